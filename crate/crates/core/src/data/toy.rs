use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::manifest::{SliceRecord, Split};
use super::{AORTA, BACKGROUND, BODY, KIDNEY_LEFT, KIDNEY_RIGHT, LIVER, SPLEEN, STOMACH};
use crate::error::{Error, Result};

/// Intensity of pixels outside the body.
pub const TOY_BACKGROUND: f32 = 0.0;

/// Characteristic intensity of every class the toy generator renders.
pub const TOY_BANDS: [(u8, f32); 8] = [
    (BACKGROUND, TOY_BACKGROUND),
    (BODY, 0.22),
    (LIVER, 0.40),
    (SPLEEN, 0.51),
    (STOMACH, 0.62),
    (KIDNEY_RIGHT, 0.73),
    (KIDNEY_LEFT, 0.84),
    (AORTA, 0.95),
];

const SMALL_ORGANS: [u8; 5] = [SPLEEN, STOMACH, KIDNEY_RIGHT, KIDNEY_LEFT, AORTA];
const NOISE_AMPLITUDE: f64 = 0.005;
const NOISE_WAVES: usize = 3;
const PLACEMENT_TRIES: usize = 200;
const SLICE_TRIES: usize = 100;

pub fn toy_band(label: u8) -> Option<f32> {
    TOY_BANDS.iter().find(|(l, _)| *l == label).map(|(_, b)| *b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyPhantomConfig {
    pub subjects: usize,
    pub slices_per_subject: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for ToyPhantomConfig {
    fn default() -> Self {
        Self {
            subjects: 8,
            slices_per_subject: 16,
            size: 32,
            seed: 7,
        }
    }
}

impl ToyPhantomConfig {
    /// Subjects with index at or above this go to the test split.
    pub fn first_test_subject(&self) -> usize {
        let n_test = if self.subjects >= 2 {
            (self.subjects / 4).max(1)
        } else {
            0
        };
        self.subjects - n_test
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2) <= 1.0
    }

    fn raster(&self, size: usize) -> Array2<bool> {
        Array2::from_shape_fn((size, size), |(r, c)| self.contains(r as f64 + 0.5, c as f64 + 0.5))
    }
}

struct SubjectShape {
    body: Ellipse,
    organs: Vec<u8>,
    liver_radii: (f64, f64),
    liver_center: (f64, f64),
}

fn subject_shape(rng: &mut ChaCha8Rng, size: f64) -> SubjectShape {
    let body = Ellipse {
        cy: size * rng.random_range(0.48..0.52),
        cx: size * rng.random_range(0.48..0.52),
        ry: size * rng.random_range(0.33..0.38),
        rx: size * rng.random_range(0.42..0.46),
        angle: 0.0,
    };
    let mut pool = SMALL_ORGANS.to_vec();
    pool.shuffle(rng);
    let extra = rng.random_range(1..=4);
    let mut organs = vec![LIVER];
    organs.extend_from_slice(&pool[..extra]);
    SubjectShape {
        body,
        organs,
        liver_radii: (size * rng.random_range(0.12..0.14), size * rng.random_range(0.15..0.18)),
        liver_center: (body.cy - size * 0.03, body.cx - size * 0.12),
    }
}

/// Low-frequency field in `[-NOISE_WAVES·amp, NOISE_WAVES·amp]`.
fn smooth_noise(rng: &mut ChaCha8Rng, size: usize) -> Array2<f64> {
    let waves: Vec<(f64, f64, f64)> = (0..NOISE_WAVES)
        .map(|_| {
            let theta = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(1.0..3.0) * std::f64::consts::TAU / size as f64;
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            (freq * theta.cos(), freq * theta.sin(), phase)
        })
        .collect();
    Array2::from_shape_fn((size, size), |(r, c)| {
        waves
            .iter()
            .map(|(fy, fx, p)| NOISE_AMPLITUDE * (fy * r as f64 + fx * c as f64 + p).sin())
            .sum()
    })
}

fn render_slice(rng: &mut ChaCha8Rng, shape: &SubjectShape, size: usize) -> (Array2<f32>, Array2<u8>) {
    let s = size as f64;
    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-0.02..0.02) * s;
    let body = Ellipse {
        cy: shape.body.cy + jitter(rng),
        cx: shape.body.cx + jitter(rng),
        ..shape.body
    };
    let body_px = body.raster(size);
    // organs keep a one-pixel margin to the body outline and to each other
    let inner = Ellipse {
        ry: body.ry - 1.5,
        rx: body.rx - 1.5,
        ..body
    }
    .raster(size);
    let mut mask = body_px.mapv(|b| if b { BODY } else { BACKGROUND });
    let mut occupied = Array2::from_elem((size, size), false);

    for &organ in &shape.organs {
        for _ in 0..PLACEMENT_TRIES {
            let ellipse = if organ == LIVER {
                Ellipse {
                    cy: shape.liver_center.0 + jitter(rng),
                    cx: shape.liver_center.1 + jitter(rng),
                    ry: shape.liver_radii.0 * rng.random_range(0.9..1.1),
                    rx: shape.liver_radii.1 * rng.random_range(0.9..1.1),
                    angle: rng.random_range(-0.3..0.3),
                }
            } else {
                let (ry, rx) = if organ == AORTA {
                    let r = (0.05 * s).max(1.6);
                    (r, r)
                } else {
                    ((rng.random_range(0.06..0.09) * s).max(1.6), (rng.random_range(0.07..0.11) * s).max(2.0))
                };
                Ellipse {
                    cy: rng.random_range(body.cy - body.ry..body.cy + body.ry),
                    cx: rng.random_range(body.cx - body.rx..body.cx + body.rx),
                    ry,
                    rx,
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                }
            };
            let px = ellipse.raster(size);
            let count = px.iter().filter(|&&v| v).count();
            let fits = count >= 4
                && px.indexed_iter().all(|((r, c), &v)| {
                    !v || (inner[[r, c]] && !near_occupied(&occupied, r, c))
                });
            if fits {
                for ((r, c), &v) in px.indexed_iter() {
                    if v {
                        mask[[r, c]] = organ;
                        occupied[[r, c]] = true;
                    }
                }
                break;
            }
        }
    }

    let mut image = Array2::from_elem((size, size), TOY_BACKGROUND);
    for &(label, band) in TOY_BANDS.iter().skip(1) {
        let region: Vec<(usize, usize)> = mask
            .indexed_iter()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect();
        if region.is_empty() {
            continue;
        }
        let noise = smooth_noise(rng, size);
        let mean = region.iter().map(|&i| noise[i]).sum::<f64>() / region.len() as f64;
        for &i in &region {
            image[i] = (band as f64 + noise[i] - mean).clamp(0.0, 1.0) as f32;
        }
    }
    (image, mask)
}

fn near_occupied(occupied: &Array2<bool>, r: usize, c: usize) -> bool {
    let (h, w) = occupied.dim();
    (r.saturating_sub(1)..(r + 2).min(h)).any(|rr| (c.saturating_sub(1)..(c + 2).min(w)).any(|cc| occupied[[rr, cc]]))
}

fn organ_count(mask: &Array2<u8>) -> usize {
    SMALL_ORGANS
        .iter()
        .chain(std::iter::once(&LIVER))
        .filter(|&&o| mask.iter().any(|&l| l == o))
        .count()
}

/// Procedural abdominal phantoms: an elliptical body holding a liver and one
/// to four smaller organs, each filled with its class band plus smooth noise.
///
/// Subjects in the last quarter (at least one when there are two or more)
/// form the test split. Output is a pure function of the config.
pub fn generate_toy_dataset(config: &ToyPhantomConfig) -> Result<Vec<SliceRecord>> {
    if config.size < 32 {
        return Err(Error::param("size", format!("{} is below the minimum of 32", config.size)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let first_test = config.first_test_subject();
    let mut records = Vec::with_capacity(config.subjects * config.slices_per_subject);
    for subject in 0..config.subjects {
        let shape = subject_shape(&mut rng, config.size as f64);
        for slice_index in 0..config.slices_per_subject {
            let (image, mask) = (0..SLICE_TRIES)
                .map(|_| render_slice(&mut rng, &shape, config.size))
                .find(|(_, mask)| (2..=5).contains(&organ_count(mask)) && mask.iter().any(|&l| l == LIVER))
                .ok_or_else(|| Error::Data(format!("could not place organs for toy subject {subject}")))?;
            records.push(SliceRecord {
                image,
                mask,
                subject_id: format!("toy{subject:03}"),
                slice_index,
                split: if subject >= first_test { Split::Test } else { Split::Train },
            });
        }
    }
    Ok(records)
}
