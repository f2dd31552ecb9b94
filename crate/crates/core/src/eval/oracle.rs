//! Segmenters that turn synthetic images back into label maps.

use std::path::Path;
use std::process::Command;

use ndarray::Array2;

use crate::config::OracleConfig;
use crate::data::{png, TOY_BANDS};
use crate::error::{Error, Result};

use super::scratch_path;

pub trait SegmentationOracle {
    fn segment(&self, image: &Array2<f32>) -> Result<Array2<u8>>;

    /// Segments an image stored on disk; `image` is its decoded content.
    fn segment_file(&self, _path: &Path, image: &Array2<f32>) -> Result<Array2<u8>> {
        self.segment(image)
    }
}

/// Labels every pixel with the toy class whose intensity band is nearest.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyIntensityOracle;

impl ToyIntensityOracle {
    pub fn classify(value: f32) -> u8 {
        let mut best = TOY_BANDS[0];
        for &band in &TOY_BANDS[1..] {
            if (value - band.1).abs() < (value - best.1).abs() {
                best = band;
            }
        }
        best.0
    }
}

impl SegmentationOracle for ToyIntensityOracle {
    fn segment(&self, image: &Array2<f32>) -> Result<Array2<u8>> {
        Ok(image.mapv(Self::classify))
    }
}

/// Shell command with `{input}` (image PNG) and `{output}` (label PNG to write).
#[derive(Clone, Debug)]
pub struct ExternalOracle {
    pub command: String,
}

impl ExternalOracle {
    fn run(&self, input: &Path) -> Result<Array2<u8>> {
        let output = scratch_path("labels.png");
        let cmd = self
            .command
            .replace("{input}", &input.display().to_string())
            .replace("{output}", &output.display().to_string());
        let status = Command::new("sh")
            .arg("-c")
            .arg(&cmd)
            .status()
            .map_err(|e| Error::io(format!("running `{cmd}`"), e))?;
        if !status.success() {
            return Err(Error::External(format!("`{cmd}` exited with {status}")));
        }
        let labels = png::read_labels(&output);
        let _ = std::fs::remove_file(&output);
        labels
    }
}

impl SegmentationOracle for ExternalOracle {
    fn segment(&self, image: &Array2<f32>) -> Result<Array2<u8>> {
        let input = scratch_path("image.png");
        png::write_gray16(&input, &png::unit_to_u16(image))?;
        let result = self.run(&input);
        let _ = std::fs::remove_file(&input);
        result
    }

    fn segment_file(&self, path: &Path, image: &Array2<f32>) -> Result<Array2<u8>> {
        let labels = self.run(path)?;
        if labels.dim() != image.dim() {
            return Err(Error::Shape(format!(
                "oracle returned {:?} labels for a {:?} image",
                labels.dim(),
                image.dim()
            )));
        }
        Ok(labels)
    }
}

pub fn oracle_from_config(config: &OracleConfig) -> Box<dyn SegmentationOracle> {
    match config {
        OracleConfig::Toy => Box::new(ToyIntensityOracle),
        OracleConfig::External { command } => Box::new(ExternalOracle {
            command: command.clone(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_dataset, ToyPhantomConfig, BODY, LIVER};
    use crate::eval::metrics::dice;

    #[test]
    fn band_centres_map_to_their_class() {
        for &(label, band) in &TOY_BANDS {
            assert_eq!(ToyIntensityOracle::classify(band), label);
            assert_eq!(ToyIntensityOracle::classify(band + 0.04), label);
        }
        assert_eq!(ToyIntensityOracle::classify(-0.3), 0);
        assert_eq!(ToyIntensityOracle::classify(1.0), TOY_BANDS[7].0);
    }

    #[test]
    fn recovers_generator_layout() {
        let cfg = ToyPhantomConfig {
            subjects: 2,
            slices_per_subject: 3,
            ..ToyPhantomConfig::default()
        };
        for rec in generate_toy_dataset(&cfg).unwrap() {
            let pred = ToyIntensityOracle.segment(&rec.image).unwrap();
            assert_eq!(dice(&pred, &rec.mask, BODY).unwrap(), 1.0);
            assert_eq!(dice(&pred, &rec.mask, LIVER).unwrap(), 1.0);
        }
    }

    #[test]
    fn external_oracle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Array2::from_shape_fn((6, 6), |(y, _)| (y % 3) as u8);
        let fixed = dir.path().join("fixed.png");
        png::write_labels(&fixed, &mask).unwrap();
        let oracle = ExternalOracle {
            command: format!("cp {} {{output}}", fixed.display()),
        };
        let img = Array2::from_elem((6, 6), 0.5f32);
        assert_eq!(oracle.segment(&img).unwrap(), mask);
        let broken = ExternalOracle { command: "false".into() };
        assert!(matches!(broken.segment(&img), Err(Error::External(_))));
    }
}
