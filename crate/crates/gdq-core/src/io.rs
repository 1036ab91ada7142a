//! 8-bit image file I/O: PNG (grayscale and RGB, no alpha) plus binary
//! PPM (P6) and PGM (P5) with maxval 255.
//!
//! Loading maps byte `v` to `v / 255`; saving maps `x` to `round(x * 255)`
//! with halves rounded away from zero, so a save/load round trip moves each
//! element by at most `1/510`.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{DynamicImage, ExtendedColorType, ImageEncoder, ImageFormat, ImageReader};
use thiserror::Error;

use crate::image::ImageTensor;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unrecognized image format (not PNG, P5, or P6)")]
    UnknownFormat { path: String },
    #[error("{path}: unsupported bit depth {bits} (only 8-bit images are supported)")]
    UnsupportedBitDepth { path: String, bits: u32 },
    #[error("{path}: unsupported color layout {layout} (only 1- and 3-channel images)")]
    UnsupportedColor { path: String, layout: String },
    #[error("{path}: malformed file: {detail}")]
    Malformed { path: String, detail: String },
    #[error("{path}: png codec error: {detail}")]
    Png { path: String, detail: String },
    #[error("cannot save to {path}: unsupported extension (use .png, .ppm, or .pgm)")]
    UnsupportedExtension { path: String },
    #[error("cannot save a {channels}-channel image as {format}")]
    ChannelFormatMismatch { channels: usize, format: String },
}

fn io_err(path: &Path, source: std::io::Error) -> FormatError {
    FormatError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Loads an 8-bit PNG, PPM, or PGM file into unit-interval values.
///
/// The format is detected from the file's magic bytes, not its extension.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor, FormatError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.starts_with(b"\x89PNG\r\n\x1a\n") {
        load_png(path, &bytes)
    } else if bytes.starts_with(b"P5") || bytes.starts_with(b"P6") {
        load_pnm(path, &bytes)
    } else {
        Err(FormatError::UnknownFormat {
            path: path.display().to_string(),
        })
    }
}

/// Saves an image as 8-bit PNG, PPM, or PGM according to the path extension.
pub fn save_image(img: &ImageTensor, path: impl AsRef<Path>) -> Result<(), FormatError> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("png") => save_png(img, path),
        Some("ppm") => {
            if img.channels() != 3 {
                return Err(FormatError::ChannelFormatMismatch {
                    channels: img.channels(),
                    format: "PPM (P6)".into(),
                });
            }
            save_pnm(img, path, b"P6")
        }
        Some("pgm") => {
            if img.channels() != 1 {
                return Err(FormatError::ChannelFormatMismatch {
                    channels: img.channels(),
                    format: "PGM (P5)".into(),
                });
            }
            save_pnm(img, path, b"P5")
        }
        _ => Err(FormatError::UnsupportedExtension {
            path: path.display().to_string(),
        }),
    }
}

/// `round(x * 255)` with halves away from zero, clamped to a byte.
pub fn unit_to_byte(x: f64) -> u8 {
    (x * 255.0).round().clamp(0.0, 255.0) as u8
}

/// `v / 255`.
pub fn byte_to_unit(v: u8) -> f64 {
    f64::from(v) / 255.0
}

fn to_bytes(img: &ImageTensor) -> Vec<u8> {
    img.data().iter().map(|&x| unit_to_byte(x)).collect()
}

fn from_bytes(
    path: &Path,
    height: usize,
    width: usize,
    channels: usize,
    bytes: &[u8],
) -> Result<ImageTensor, FormatError> {
    let data = bytes.iter().map(|&v| byte_to_unit(v)).collect();
    ImageTensor::new(height, width, channels, data).map_err(|e| FormatError::Malformed {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

fn load_png(path: &Path, bytes: &[u8]) -> Result<ImageTensor, FormatError> {
    let reader = ImageReader::with_format(Cursor::new(bytes), ImageFormat::Png);
    let decoded = reader.decode().map_err(|e| FormatError::Png {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    match decoded {
        DynamicImage::ImageLuma8(img) => from_bytes(path, h, w, 1, img.as_raw()),
        DynamicImage::ImageRgb8(img) => from_bytes(path, h, w, 3, img.as_raw()),
        DynamicImage::ImageLuma16(_) | DynamicImage::ImageRgb16(_) => {
            Err(FormatError::UnsupportedBitDepth {
                path: path.display().to_string(),
                bits: 16,
            })
        }
        other => Err(FormatError::UnsupportedColor {
            path: path.display().to_string(),
            layout: format!("{:?}", other.color()),
        }),
    }
}

fn save_png(img: &ImageTensor, path: &Path) -> Result<(), FormatError> {
    let color = match img.channels() {
        1 => ExtendedColorType::L8,
        _ => ExtendedColorType::Rgb8,
    };
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(
            &to_bytes(img),
            img.width() as u32,
            img.height() as u32,
            color,
        )
        .map_err(|e| FormatError::Png {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
    fs::write(path, out).map_err(|e| io_err(path, e))
}

fn save_pnm(img: &ImageTensor, path: &Path, magic: &[u8]) -> Result<(), FormatError> {
    let mut out = Vec::with_capacity(img.len() + 32);
    out.extend_from_slice(magic);
    out.extend_from_slice(format!("\n{} {}\n255\n", img.width(), img.height()).as_bytes());
    out.extend_from_slice(&to_bytes(img));
    fs::write(path, out).map_err(|e| io_err(path, e))
}

/// PNM header tokens separated by whitespace, with `#` comments running to
/// end of line. Returns (token, next offset).
fn pnm_token(bytes: &[u8], mut pos: usize) -> Option<(u64, usize)> {
    loop {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        break;
    }
    let start = pos;
    while pos < bytes.len() && bytes[pos].is_ascii_digit() {
        pos += 1;
    }
    if pos == start {
        return None;
    }
    let text = std::str::from_utf8(&bytes[start..pos]).ok()?;
    text.parse().ok().map(|v| (v, pos))
}

fn load_pnm(path: &Path, bytes: &[u8]) -> Result<ImageTensor, FormatError> {
    let malformed = |detail: &str| FormatError::Malformed {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let channels = if bytes.starts_with(b"P6") { 3 } else { 1 };
    let (width, pos) = pnm_token(bytes, 2).ok_or_else(|| malformed("missing width"))?;
    let (height, pos) = pnm_token(bytes, pos).ok_or_else(|| malformed("missing height"))?;
    let (maxval, pos) = pnm_token(bytes, pos).ok_or_else(|| malformed("missing maxval"))?;
    if maxval > 255 {
        return Err(FormatError::UnsupportedBitDepth {
            path: path.display().to_string(),
            bits: 16,
        });
    }
    if maxval != 255 {
        return Err(malformed(&format!("maxval must be 255, got {maxval}")));
    }
    if width == 0 || height == 0 {
        return Err(malformed("zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(malformed("missing separator before pixel data"));
    }
    let payload = &bytes[pos + 1..];
    let expected = (width * height * channels as u64) as usize;
    if payload.len() < expected {
        return Err(malformed(&format!(
            "payload has {} bytes, expected {expected}",
            payload.len()
        )));
    }
    from_bytes(
        path,
        height as usize,
        width as usize,
        channels,
        &payload[..expected],
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp(name: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(name);
        (dir, path)
    }

    #[test]
    fn byte_scale_endpoints() {
        assert_eq!(byte_to_unit(255), 1.0);
        assert_eq!(byte_to_unit(0), 0.0);
        assert_eq!(byte_to_unit(128), 128.0 / 255.0);
    }

    #[test]
    fn save_rounds_half_away_from_zero() {
        // 0.5 * 255 = 127.5 rounds up to 128
        assert_eq!(unit_to_byte(0.5), 128);
        assert_eq!(unit_to_byte(0.0), 0);
        assert_eq!(unit_to_byte(1.0), 255);
    }

    #[test]
    fn png_round_trip_of_half_gray_is_within_half_step() {
        let (_d, path) = tmp("gray.png");
        let img = ImageTensor::constant(5, 7, 1, 0.5).unwrap();
        save_image(&img, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), (5, 7, 1));
        for v in back.data() {
            assert!((v - 0.5).abs() <= 1.0 / 510.0 + 1e-12);
        }
    }

    #[test]
    fn ppm_and_pgm_round_trip() {
        let (_d, dir) = tmp("x");
        let dir = dir.parent().unwrap();
        let rgb = ImageTensor::new(2, 3, 3, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
        let gray = ImageTensor::new(3, 2, 1, (0..6).map(|i| i as f64 / 5.0).collect()).unwrap();
        let p6 = dir.join("a.ppm");
        let p5 = dir.join("a.pgm");
        save_image(&rgb, &p6).unwrap();
        save_image(&gray, &p5).unwrap();
        let rgb2 = load_image(&p6).unwrap();
        let gray2 = load_image(&p5).unwrap();
        assert_eq!(rgb2.shape(), (2, 3, 3));
        assert_eq!(gray2.shape(), (3, 2, 1));
        for (a, b) in rgb.data().iter().zip(rgb2.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
        }
        for (a, b) in gray.data().iter().zip(gray2.data()) {
            assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
        }
    }

    #[test]
    fn pnm_comments_are_skipped() {
        let (_d, path) = tmp("c.pgm");
        fs::write(&path, b"P5\n# comment line\n2 1\n# another\n255\n\x10\x20").unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.shape(), (1, 2, 1));
        assert_eq!(img.data()[0], 16.0 / 255.0);
    }

    #[test]
    fn rejects_unknown_magic() {
        let (_d, path) = tmp("x.bin");
        fs::write(&path, b"hello world").unwrap();
        assert!(matches!(
            load_image(&path),
            Err(FormatError::UnknownFormat { .. })
        ));
    }

    #[test]
    fn rejects_sixteen_bit_pnm() {
        let (_d, path) = tmp("deep.pgm");
        fs::write(&path, b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(
            load_image(&path),
            Err(FormatError::UnsupportedBitDepth { bits: 16, .. })
        ));
    }

    #[test]
    fn rejects_nonstandard_maxval() {
        let (_d, path) = tmp("odd.pgm");
        fs::write(&path, b"P5\n1 1\n100\n\x10").unwrap();
        let err = load_image(&path).unwrap_err();
        assert!(err.to_string().contains("maxval"));
    }

    #[test]
    fn rejects_truncated_pnm_payload() {
        let (_d, path) = tmp("short.ppm");
        fs::write(&path, b"P6\n2 2\n255\n\x01\x02\x03").unwrap();
        let err = load_image(&path).unwrap_err();
        assert!(err.to_string().contains("expected 12"));
    }

    #[test]
    fn rejects_sixteen_bit_png() {
        let (_d, path) = tmp("deep.png");
        let mut out = Vec::new();
        PngEncoder::new(&mut out)
            .write_image(&[0u8; 4], 2, 1, ExtendedColorType::L16)
            .unwrap();
        fs::write(&path, out).unwrap();
        assert!(matches!(
            load_image(&path),
            Err(FormatError::UnsupportedBitDepth { bits: 16, .. })
        ));
    }

    #[test]
    fn rejects_alpha_png() {
        let (_d, path) = tmp("alpha.png");
        let mut out = Vec::new();
        PngEncoder::new(&mut out)
            .write_image(&[0u8; 8], 2, 1, ExtendedColorType::Rgba8)
            .unwrap();
        fs::write(&path, out).unwrap();
        assert!(matches!(
            load_image(&path),
            Err(FormatError::UnsupportedColor { .. })
        ));
    }

    #[test]
    fn save_rejects_channel_format_mismatch() {
        let (_d, dir) = tmp("x");
        let dir = dir.parent().unwrap();
        let gray = ImageTensor::constant(2, 2, 1, 0.5).unwrap();
        let rgb = ImageTensor::constant(2, 2, 3, 0.5).unwrap();
        assert!(matches!(
            save_image(&gray, dir.join("g.ppm")),
            Err(FormatError::ChannelFormatMismatch { .. })
        ));
        assert!(matches!(
            save_image(&rgb, dir.join("c.pgm")),
            Err(FormatError::ChannelFormatMismatch { .. })
        ));
        assert!(matches!(
            save_image(&rgb, dir.join("c.bmp")),
            Err(FormatError::UnsupportedExtension { .. })
        ));
    }

    proptest! {
        #[test]
        fn round_trip_error_is_bounded(
            (h, w, c) in (1usize..5, 1usize..5, prop_oneof![Just(1usize), Just(3usize)]),
            seed in 0u64..1000,
        ) {
            let n = h * w * c;
            let data: Vec<f64> = (0..n)
                .map(|i| (((i as u64 + 1) * (seed + 17)) % 997) as f64 / 996.0)
                .collect();
            let img = ImageTensor::new(h, w, c, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.png");
            save_image(&img, &path).unwrap();
            let back = load_image(&path).unwrap();
            prop_assert_eq!(back.shape(), img.shape());
            for (a, b) in img.data().iter().zip(back.data()) {
                prop_assert!((a - b).abs() <= 1.0 / 510.0 + 1e-12);
            }
        }
    }
}
