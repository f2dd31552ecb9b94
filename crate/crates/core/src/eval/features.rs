//! Image embeddings for the Fréchet distance.

use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::ExtractorConfig;
use crate::error::{Error, Result};

use super::scratch_path;

/// Maps images to fixed-width feature rows.
pub trait FeatureExtractor {
    /// Row `i` embeds `images[i]`; `paths[i]` is its file when one exists.
    fn extract(&self, images: &[Array2<f32>], paths: &[PathBuf]) -> Result<Array2<f64>>;
}

const FILTERS: usize = 8;
const TAPS: usize = 5;
const SCALES: usize = 2;

/// Seeded random 5×5 filters at two scales, each pooled into the mean of
/// its positive and negative parts: `8 × 2 × 2 = 32` features.
#[derive(Clone, Debug)]
pub struct RandomProjection {
    filters: Vec<[f64; TAPS * TAPS]>,
}

impl RandomProjection {
    pub const DIM: usize = FILTERS * SCALES * 2;

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let filters = (0..FILTERS)
            .map(|_| {
                let mut f = [0.0; TAPS * TAPS];
                for v in f.iter_mut() {
                    *v = StandardNormal.sample(&mut rng);
                }
                let mean = f.iter().sum::<f64>() / f.len() as f64;
                let norm = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>().sqrt();
                f.map(|v| (v - mean) / norm)
            })
            .collect();
        Self { filters }
    }

    fn embed(&self, image: &Array2<f32>) -> Result<Vec<f64>> {
        let (h, w) = image.dim();
        let min = TAPS << (SCALES - 1);
        if h < min || w < min {
            return Err(Error::Parameter {
                name: "image",
                reason: format!("{h}x{w} is below the {min}-pixel minimum of the random-projection extractor"),
            });
        }
        let mut level = image.mapv(|v| 2.0 * v as f64 - 1.0);
        let mut out = Vec::with_capacity(Self::DIM);
        for scale in 0..SCALES {
            if scale > 0 {
                let (h, w) = level.dim();
                level = Array2::from_shape_fn((h / 2, w / 2), |(y, x)| {
                    0.25 * (level[[2 * y, 2 * x]]
                        + level[[2 * y + 1, 2 * x]]
                        + level[[2 * y, 2 * x + 1]]
                        + level[[2 * y + 1, 2 * x + 1]])
                });
            }
            let (h, w) = level.dim();
            let (ho, wo) = (h + 1 - TAPS, w + 1 - TAPS);
            for f in &self.filters {
                let (mut pos, mut neg) = (0.0, 0.0);
                for y in 0..ho {
                    for x in 0..wo {
                        let mut r = 0.0;
                        for i in 0..TAPS {
                            for j in 0..TAPS {
                                r += f[i * TAPS + j] * level[[y + i, x + j]];
                            }
                        }
                        if r > 0.0 {
                            pos += r;
                        } else {
                            neg -= r;
                        }
                    }
                }
                let n = (ho * wo) as f64;
                out.push(pos / n);
                out.push(neg / n);
            }
        }
        Ok(out)
    }
}

impl FeatureExtractor for RandomProjection {
    fn extract(&self, images: &[Array2<f32>], _paths: &[PathBuf]) -> Result<Array2<f64>> {
        let mut data = Vec::with_capacity(images.len() * Self::DIM);
        for img in images {
            data.extend(self.embed(img)?);
        }
        Array2::from_shape_vec((images.len(), Self::DIM), data).map_err(|e| Error::Shape(e.to_string()))
    }
}

/// Runs a shell command on a file listing the image paths and parses one
/// whitespace-separated row per image from its stdout.
#[derive(Clone, Debug)]
pub struct ExternalExtractor {
    pub command: String,
}

impl FeatureExtractor for ExternalExtractor {
    fn extract(&self, images: &[Array2<f32>], paths: &[PathBuf]) -> Result<Array2<f64>> {
        if paths.len() != images.len() {
            return Err(Error::Parameter {
                name: "paths",
                reason: "the external extractor needs a file for every image".into(),
            });
        }
        let list = scratch_path("features.txt");
        let body: String = paths.iter().map(|p| format!("{}\n", p.display())).collect();
        std::fs::write(&list, body).map_err(|e| Error::io(format!("writing {}", list.display()), e))?;
        let result = run_extractor(&self.command, &list, images.len());
        let _ = std::fs::remove_file(&list);
        result
    }
}

fn run_extractor(command: &str, list: &Path, rows: usize) -> Result<Array2<f64>> {
    let cmd = command.replace("{input}", &list.display().to_string());
    let out = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .output()
        .map_err(|e| Error::io(format!("running `{cmd}`"), e))?;
    if !out.status.success() {
        return Err(Error::External(format!(
            "`{cmd}` exited with {}: {}",
            out.status,
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    let parsed: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|e| Error::External(format!("feature `{t}`: {e}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    if parsed.len() != rows {
        return Err(Error::External(format!("`{cmd}` printed {} rows for {rows} images", parsed.len())));
    }
    let dim = parsed.first().map_or(0, Vec::len);
    if dim == 0 || parsed.iter().any(|r| r.len() != dim) {
        return Err(Error::External(format!("`{cmd}` printed rows of unequal or zero width")));
    }
    Array2::from_shape_vec((rows, dim), parsed.concat()).map_err(|e| Error::Shape(e.to_string()))
}

pub fn extractor_from_config(config: &ExtractorConfig) -> Box<dyn FeatureExtractor> {
    match config {
        ExtractorConfig::RandomProjection { seed } => Box::new(RandomProjection::new(*seed)),
        ExtractorConfig::External { command } => Box::new(ExternalExtractor {
            command: command.clone(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, phase: f32) -> Array2<f32> {
        Array2::from_shape_fn((h, w), |(y, x)| ((x as f32 * 0.3 + y as f32 * 0.1 + phase).sin() + 1.0) / 2.0)
    }

    #[test]
    fn rows_are_deterministic_and_fixed_width() {
        let imgs = vec![ramp(32, 32, 0.0), ramp(32, 32, 0.0), ramp(20, 24, 1.0)];
        let a = RandomProjection::new(3).extract(&imgs, &[]).unwrap();
        let b = RandomProjection::new(3).extract(&imgs, &[]).unwrap();
        assert_eq!(a.dim(), (3, RandomProjection::DIM));
        assert_eq!(a, b);
        assert_eq!(a.row(0), a.row(1));
        assert_ne!(a.row(0), a.row(2));
        assert_ne!(a, RandomProjection::new(4).extract(&imgs, &[]).unwrap());
        assert!(RandomProjection::new(3).extract(&[ramp(8, 8, 0.0)], &[]).is_err());
    }

    #[test]
    fn external_command_rows() {
        let dir = tempfile::tempdir().unwrap();
        let paths: Vec<_> = (0..3).map(|i| dir.path().join(format!("{i}.png"))).collect();
        let imgs = vec![ramp(4, 4, 0.0); 3];
        let ex = ExternalExtractor {
            command: "awk '{print NR, 2*NR}' {input}".into(),
        };
        let f = ex.extract(&imgs, &paths).unwrap();
        assert_eq!(f, ndarray::array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]]);
        let short = ExternalExtractor {
            command: "echo 1 2".into(),
        };
        assert!(matches!(short.extract(&imgs, &paths), Err(Error::External(_))));
        let failing = ExternalExtractor { command: "exit 3".into() };
        assert!(matches!(failing.extract(&imgs, &paths), Err(Error::External(_))));
    }
}
