//! Generator resolution: either a model file on disk or a seeded toy
//! built on the spot from a compact spec string.
//!
//! Toy grammar (all dimensions positive integers):
//!
//! ```text
//! toy:identity:HxWxC
//! toy:linear:SEED:DIM:HxWxC
//! toy:mlp:SEED:DIM:W1-W2-...:HxWxC
//! ```

use std::path::Path;

use gdq_core::GeneratorModel;

use crate::error::CliError;

pub fn resolve_generator(text: &str) -> Result<GeneratorModel, CliError> {
    if text.starts_with("toy:") {
        build_toy(text)
    } else {
        GeneratorModel::load(Path::new(text)).map_err(CliError::from)
    }
}

fn build_toy(text: &str) -> Result<GeneratorModel, CliError> {
    let bad = |detail: &str| {
        CliError::Usage(format!(
            "bad toy generator spec {text:?}: {detail} \
             (expected toy:identity:HxWxC, toy:linear:SEED:DIM:HxWxC, \
             or toy:mlp:SEED:DIM:W1-W2-...:HxWxC)"
        ))
    };
    let parts: Vec<&str> = text.split(':').collect();
    let model = match parts.as_slice() {
        ["toy", "identity", shape] => {
            let (h, w, c) = parse_shape(shape).ok_or_else(|| bad("bad shape"))?;
            GeneratorModel::identity(h, w, c)
        }
        ["toy", "linear", seed, dim, shape] => {
            let seed = seed.parse().map_err(|_| bad("bad seed"))?;
            let dim = parse_positive(dim).ok_or_else(|| bad("bad latent dim"))?;
            let (h, w, c) = parse_shape(shape).ok_or_else(|| bad("bad shape"))?;
            GeneratorModel::linear(seed, dim, h, w, c)
        }
        ["toy", "mlp", seed, dim, widths, shape] => {
            let seed = seed.parse().map_err(|_| bad("bad seed"))?;
            let dim = parse_positive(dim).ok_or_else(|| bad("bad latent dim"))?;
            let widths = widths
                .split('-')
                .map(parse_positive)
                .collect::<Option<Vec<usize>>>()
                .ok_or_else(|| bad("bad hidden widths"))?;
            let (h, w, c) = parse_shape(shape).ok_or_else(|| bad("bad shape"))?;
            GeneratorModel::mlp(seed, dim, &widths, h, w, c)
        }
        _ => return Err(bad("unknown form")),
    };
    model.map_err(CliError::from)
}

fn parse_positive(text: &str) -> Option<usize> {
    text.parse().ok().filter(|&n| n > 0)
}

fn parse_shape(text: &str) -> Option<(usize, usize, usize)> {
    let dims = text
        .split('x')
        .map(parse_positive)
        .collect::<Option<Vec<usize>>>()?;
    match dims.as_slice() {
        [h, w, c] => Some((*h, *w, *c)),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builds_each_toy_form() {
        assert_eq!(
            resolve_generator("toy:identity:4x3x1")
                .unwrap()
                .output_shape(),
            (4, 3, 1)
        );
        let linear = resolve_generator("toy:linear:7:5:2x2x3").unwrap();
        assert_eq!(linear.latent_dim(), 5);
        assert_eq!(linear.output_shape(), (2, 2, 3));
        let mlp = resolve_generator("toy:mlp:7:8:24-16:4x4x3").unwrap();
        assert_eq!(mlp.latent_dim(), 8);
        assert_eq!(mlp.layers().len(), 3);
    }

    #[test]
    fn same_spec_gives_same_model() {
        let a = resolve_generator("toy:mlp:3:4:10:2x2x1").unwrap();
        let b = resolve_generator("toy:mlp:3:4:10:2x2x1").unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn rejects_malformed_specs() {
        for text in [
            "toy:mlp:1:8:24",         // missing shape
            "toy:linear:x:8:4x4x3",   // bad seed
            "toy:identity:4x4",       // 2-dim shape
            "toy:identity:4x0x1",     // zero dimension
            "toy:mlp:1:8:24-x:4x4x3", // bad width list
            "toy:warp:1:8:4x4x3",     // unknown form
        ] {
            assert!(
                matches!(resolve_generator(text), Err(CliError::Usage(_))),
                "{text} should be rejected"
            );
        }
    }

    #[test]
    fn missing_model_file_is_an_io_error() {
        assert!(matches!(
            resolve_generator("/nonexistent/model.gdqm"),
            Err(CliError::Io(_))
        ));
    }
}
