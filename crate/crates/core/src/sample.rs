//! Ancestral sampling under a conditioning mask, and the artifact writer that
//! turns a checkpoint plus a manifest into sample PNGs, an index and a grid.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{png, Dataset, SliceRecord, Split};
use crate::error::{Error, Result};
use crate::nn::{Element, Tensor};
use crate::schedule::NoiseSchedule;
use crate::unet::{ConditioningBundle, Denoise};

pub const INDEX_FILE: &str = "index.json";
pub const GRID_FILE: &str = "grid.png";

/// How the per-step noise variance is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceMode {
    /// Interpolated from the network's variance output.
    #[default]
    Learned,
    /// No noise is added; the trajectory is a function of `x_T` alone.
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub seed: u64,
    pub variance: VarianceMode,
    /// Items denoised together in one network call.
    pub chunk: usize,
    /// Threads sampling disjoint chunks.
    pub workers: usize,
    /// Random stream of the first item; item `i` uses `first_stream + i`.
    pub first_stream: u64,
    /// Clamp each step's clean-image estimate to `[−1, 1]` and step to the
    /// posterior mean at that estimate.
    pub clip_denoised: bool,
}

impl SampleOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            variance: VarianceMode::Learned,
            chunk: 16,
            workers: 1,
            first_stream: 0,
            clip_denoised: false,
        }
    }
}

fn item_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn normals<T: Element>(rngs: &mut [ChaCha8Rng], plane: usize, h: usize, w: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(rngs.len() * plane);
    for rng in rngs.iter_mut() {
        data.extend((0..plane).map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            T::from_f64_lossy(z)
        }));
    }
    Tensor::from_vec(&[rngs.len(), 1, h, w], data).expect("noise shape")
}

fn select_items<T: Element>(t: &Tensor<T>, range: std::ops::Range<usize>) -> Tensor<T> {
    let mut shape = t.shape().to_vec();
    shape[0] = range.len();
    let data = range.flat_map(|i| t.item(i).iter().copied()).collect();
    Tensor::from_vec(&shape, data).expect("selection shape")
}

fn select_cond<T: Element>(cond: &ConditioningBundle<T>, range: std::ops::Range<usize>) -> ConditioningBundle<T> {
    ConditioningBundle {
        mask_onehot: select_items(&cond.mask_onehot, range.clone()),
        edge_map: cond.edge_map.as_ref().map(|e| select_items(e, range)),
        variant: cond.variant,
    }
}

/// Draws `n` images `[n, 1, H, W]` in `[0, 1]`.
///
/// `cond` holds either one mask (shared by every item) or exactly `n`.
/// Each item has its own random stream, so results do not depend on chunking
/// or worker count.
pub fn sample<T, D>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    cond: &ConditioningBundle<T>,
    n: usize,
    options: &SampleOptions,
) -> Result<Tensor<T>>
where
    T: Element,
    D: Denoise<T> + Sync,
{
    if denoiser.variant() != cond.variant {
        return Err(Error::VariantMismatch {
            expected: denoiser.variant().to_string(),
            found: cond.variant.to_string(),
        });
    }
    let cond = match cond.batch_size() {
        b if b == n => cond.clone(),
        1 => cond.repeat(n),
        b => {
            return Err(Error::Shape(format!(
                "{b} conditioning masks for {n} samples; expected 1 or {n}"
            )))
        }
    };
    let (_, _, h, w) = cond.mask_onehot.dims4();
    if n == 0 {
        return Ok(Tensor::zeros(&[0, 1, h, w]));
    }
    let chunk = options.chunk.max(1);
    let ranges: Vec<_> = (0..n).step_by(chunk).map(|s| s..(s + chunk).min(n)).collect();
    let workers = options.workers.clamp(1, ranges.len());
    let run = |r: &std::ops::Range<usize>| {
        sample_chunk(denoiser, schedule, &select_cond(&cond, r.clone()), r.start, options)
    };
    let results: Vec<Result<Tensor<T>>> = if workers == 1 {
        ranges.iter().map(run).collect()
    } else {
        let mut slots: Vec<Option<Result<Tensor<T>>>> = (0..ranges.len()).map(|_| None).collect();
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..workers)
                .map(|wk| {
                    let ranges = &ranges;
                    let run = &run;
                    scope.spawn(move || {
                        (wk..ranges.len())
                            .step_by(workers)
                            .map(|i| (i, run(&ranges[i])))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for handle in handles {
                for (i, r) in handle.join().expect("sampling worker panicked") {
                    slots[i] = Some(r);
                }
            }
        });
        slots.into_iter().map(|s| s.expect("every chunk sampled")).collect()
    };
    let mut data = Vec::with_capacity(n * h * w);
    for r in results {
        data.extend_from_slice(r?.data());
    }
    Tensor::from_vec(&[n, 1, h, w], data)
}

fn sample_chunk<T: Element, D: Denoise<T>>(
    denoiser: &D,
    schedule: &NoiseSchedule,
    cond: &ConditioningBundle<T>,
    first_item: usize,
    options: &SampleOptions,
) -> Result<Tensor<T>> {
    let (b, _, h, w) = cond.mask_onehot.dims4();
    let plane = h * w;
    let mut rngs: Vec<_> = (0..b)
        .map(|i| item_rng(options.seed, options.first_stream + (first_item + i) as u64))
        .collect();
    let mut x = normals::<T>(&mut rngs, plane, h, w);
    for t in (1..=schedule.timesteps()).rev() {
        let out = denoiser.predict(&x, &vec![t; b], cond)?;
        let mean = if options.clip_denoised {
            schedule.clipped_reverse_step_mean(&x, t, &out.eps_hat)?
        } else {
            schedule.reverse_step_mean(&x, t, &out.eps_hat)?
        };
        x = if t > 1 && options.variance == VarianceMode::Learned {
            let var = schedule.interpolate_variance(t, &out.v)?;
            let z = normals::<T>(&mut rngs, plane, h, w);
            let mut next = mean;
            for ((o, &s2), &zv) in next.data_mut().iter_mut().zip(var.data()).zip(z.data()) {
                *o = *o + s2.sqrt() * zv;
            }
            next
        } else {
            mean
        };
        if !x.all_finite() {
            return Err(Error::NonFiniteSample { step: t });
        }
        if t % 100 == 0 {
            log::debug!("sampling items {first_item}..{}: t={t}", first_item + b);
        }
    }
    let half = T::from_f64_lossy(0.5);
    Ok(x.map(|v| (v.max(-T::one()).min(T::one()) + T::one()) * half))
}

/// One row of the sample index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    /// Relative to the output directory.
    pub output: PathBuf,
    pub source_stem: String,
    pub subject_id: String,
    pub slice_index: usize,
    pub repeat: usize,
    pub stream: u64,
    /// Copies of the conditioning mask and real slice, relative to the output directory.
    pub mask: PathBuf,
    pub real: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleFailure {
    pub path: PathBuf,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleIndex {
    pub checkpoint_step: u64,
    pub variant: String,
    pub seed: u64,
    pub n_per_mask: usize,
    pub ema: bool,
    pub variance: VarianceMode,
    #[serde(default)]
    pub clip_denoised: bool,
    pub entries: Vec<SampleEntry>,
    pub failures: Vec<SampleFailure>,
}

#[derive(Clone, Debug)]
pub struct GridOptions {
    pub sample: SampleOptions,
    pub split: Split,
    pub use_ema: bool,
    /// Caps the number of conditioning masks taken from the split.
    pub max_masks: Option<usize>,
    /// Rows drawn in the grid image.
    pub grid_rows: usize,
}

impl GridOptions {
    pub fn new(seed: u64) -> Self {
        Self {
            sample: SampleOptions::new(seed),
            split: Split::Test,
            use_ema: false,
            max_masks: None,
            grid_rows: 8,
        }
    }
}

/// Output directory layout used by [`sample_grid`].
pub fn samples_dir(out: &Path) -> PathBuf {
    out.join("samples")
}

pub fn real_dir(out: &Path) -> PathBuf {
    out.join("real")
}

pub fn masks_dir(out: &Path) -> PathBuf {
    out.join("masks")
}

/// Name of the `repeat`-th synthetic image for a source slice.
pub fn sample_file_name(stem: &str, repeat: usize) -> String {
    format!("{stem}__r{repeat}.png")
}

/// Samples `n_per_mask` images for every mask of the chosen split and writes
/// them with an index and a preview grid.
///
/// Per-file write failures are recorded in the index and the run continues.
pub fn sample_grid(
    checkpoint: &Checkpoint,
    manifest: &Path,
    out: &Path,
    n_per_mask: usize,
    options: &GridOptions,
) -> Result<SampleIndex> {
    let denoiser = if options.use_ema {
        checkpoint
            .ema_denoiser()?
            .ok_or_else(|| Error::Config("checkpoint holds no EMA weights".into()))?
    } else {
        checkpoint.denoiser()?
    };
    let config = &checkpoint.config;
    let schedule = config.schedule.build()?;
    let dataset = Dataset::load(manifest)?
        .with_window(config.data.window)
        .with_resize(config.model.image_size);
    let mut indices = dataset.split_indices(options.split);
    if let Some(cap) = options.max_masks {
        indices.truncate(cap);
    }
    if indices.is_empty() {
        return Err(Error::Data(format!("manifest has no {} slices", options.split)));
    }
    let records = indices.iter().map(|&i| dataset.record(i)).collect::<Result<Vec<_>>>()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;

    let mut index = SampleIndex {
        checkpoint_step: checkpoint.step,
        variant: config.train.variant.to_string(),
        seed: options.sample.seed,
        n_per_mask,
        ema: options.use_ema,
        variance: options.sample.variance,
        clip_denoised: options.sample.clip_denoised,
        entries: Vec::new(),
        failures: Vec::new(),
    };
    let mut synth: Vec<Vec<Array2<f32>>> = vec![Vec::new(); records.len()];
    if n_per_mask > 0 {
        let masks: Vec<_> = records.iter().map(|r| r.mask.clone()).collect();
        let cond = ConditioningBundle::<f32>::from_masks(&masks, dataset.num_classes(), config.train.variant)?
            .repeat(n_per_mask);
        let images = sample(&denoiser, &schedule, &cond, masks.len() * n_per_mask, &options.sample)?;
        let (_, _, h, w) = images.dims4();
        for (item, rec) in records.iter().enumerate() {
            let stem = rec.stem();
            let mask_rel = Path::new("masks").join(format!("{stem}.png"));
            let real_rel = Path::new("real").join(format!("{stem}.png"));
            if let Err(e) = png::write_labels(&out.join(&mask_rel), &rec.mask) {
                record_failure(&mut index, &mask_rel, e);
            }
            if let Err(e) = png::write_gray16(&out.join(&real_rel), &png::unit_to_u16(&rec.image)) {
                record_failure(&mut index, &real_rel, e);
            }
            for k in 0..n_per_mask {
                let flat = item * n_per_mask + k;
                let img = Array2::from_shape_vec((h, w), images.item(flat).to_vec()).expect("sample plane");
                let rel = Path::new("samples").join(sample_file_name(&stem, k));
                match png::write_gray8(&out.join(&rel), &png::unit_to_u8(&img)) {
                    Ok(()) => index.entries.push(SampleEntry {
                        output: rel,
                        source_stem: stem.clone(),
                        subject_id: rec.subject_id.clone(),
                        slice_index: rec.slice_index,
                        repeat: k,
                        stream: options.sample.first_stream + flat as u64,
                        mask: mask_rel.clone(),
                        real: real_rel.clone(),
                    }),
                    Err(e) => record_failure(&mut index, &rel, e),
                }
                synth[item].push(img);
            }
        }
        if let Err(e) = write_grid(&out.join(GRID_FILE), &records, &synth, options.grid_rows) {
            record_failure(&mut index, Path::new(GRID_FILE), e);
        }
    }
    let json = serde_json::to_string_pretty(&index).map_err(|e| Error::Data(e.to_string()))?;
    let index_path = out.join(INDEX_FILE);
    std::fs::write(&index_path, json).map_err(|e| Error::io(format!("writing {}", index_path.display()), e))?;
    Ok(index)
}

fn record_failure(index: &mut SampleIndex, path: &Path, e: Error) {
    log::warn!("{}: {e}", path.display());
    index.failures.push(SampleFailure {
        path: path.to_path_buf(),
        error: e.to_string(),
    });
}

/// Rows of `mask | sample_0 .. sample_{k-1} | real`, one row per mask.
fn write_grid(path: &Path, records: &[SliceRecord], synth: &[Vec<Array2<f32>>], max_rows: usize) -> Result<()> {
    let rows = records.len().min(max_rows.max(1));
    let (h, w) = records[0].mask.dim();
    let cols = synth[0].len() + 2;
    let gap = 2;
    let width = cols * w + (cols - 1) * gap;
    let height = rows * h + (rows - 1) * gap;
    let mut rgb = vec![255u8; 3 * width * height];
    let mut put = |row: usize, col: usize, y: usize, x: usize, px: [u8; 3]| {
        let (py, pxx) = (row * (h + gap) + y, col * (w + gap) + x);
        let o = 3 * (py * width + pxx);
        rgb[o..o + 3].copy_from_slice(&px);
    };
    for (row, rec) in records.iter().take(rows).enumerate() {
        let gray = |v: f32| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g]
        };
        for ((y, x), &label) in rec.mask.indexed_iter() {
            put(row, 0, y, x, png::label_color(label));
        }
        for (k, img) in synth[row].iter().enumerate() {
            for ((y, x), &v) in img.indexed_iter() {
                put(row, k + 1, y, x, gray(v));
            }
        }
        for ((y, x), &v) in rec.image.indexed_iter() {
            put(row, cols - 1, y, x, gray(v));
        }
    }
    png::write_rgb8(path, width, height, &rgb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::NoiseSchedule;
    use crate::unet::{DenoiserOutput, Variant};

    /// Predicts a fixed fraction of `x_t` as noise; cheap and deterministic.
    struct Affine {
        variant: Variant,
        gain: f64,
        v: f64,
    }

    impl Denoise<f64> for Affine {
        fn variant(&self) -> Variant {
            self.variant
        }

        fn predict(&self, x_t: &Tensor<f64>, _t: &[usize], _cond: &ConditioningBundle<f64>) -> Result<DenoiserOutput<f64>> {
            Ok(DenoiserOutput {
                eps_hat: x_t.map(|v| v * self.gain),
                v: x_t.map(|_| self.v),
            })
        }
    }

    fn cond(n: usize, size: usize) -> ConditioningBundle<f64> {
        let masks: Vec<_> = (0..n)
            .map(|i| Array2::from_shape_fn((size, size), |(r, _)| ((r + i) % 3) as u8))
            .collect();
        ConditioningBundle::from_masks(&masks, 17, Variant::MaskGuided).unwrap()
    }

    fn net() -> Affine {
        Affine {
            variant: Variant::MaskGuided,
            gain: 0.3,
            v: 0.2,
        }
    }

    #[test]
    fn outputs_lie_in_unit_range_and_repeat_bitwise() {
        let s = NoiseSchedule::linear(50, 1e-4, 0.2).unwrap();
        let opts = SampleOptions::new(5);
        let a = sample(&net(), &s, &cond(3, 6), 3, &opts).unwrap();
        let b = sample(&net(), &s, &cond(3, 6), 3, &opts).unwrap();
        assert_eq!(a.shape(), &[3, 1, 6, 6]);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.data(), b.data());
        let c = sample(&net(), &s, &cond(3, 6), 3, &SampleOptions::new(6)).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn chunking_and_workers_do_not_change_results() {
        let s = NoiseSchedule::linear(20, 1e-4, 0.2).unwrap();
        let base = sample(&net(), &s, &cond(5, 4), 5, &SampleOptions::new(1)).unwrap();
        for (chunk, workers) in [(1, 1), (2, 3), (5, 2)] {
            let opts = SampleOptions {
                chunk,
                workers,
                ..SampleOptions::new(1)
            };
            let other = sample(&net(), &s, &cond(5, 4), 5, &opts).unwrap();
            assert_eq!(base.data(), other.data());
        }
    }

    #[test]
    fn zero_variance_trajectory_is_a_function_of_the_start() {
        // Replays the same arithmetic from x_T drawn on stream 0.
        let s = NoiseSchedule::linear(30, 1e-4, 0.2).unwrap();
        let opts = SampleOptions {
            variance: VarianceMode::Zero,
            ..SampleOptions::new(9)
        };
        let got = sample(&net(), &s, &cond(1, 4), 1, &opts).unwrap();
        let mut rng = item_rng(9, 0);
        let mut x: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
        for t in (1..=30).rev() {
            let (r, b) = (1.0 / s.alpha(t).sqrt(), s.beta(t) / s.sqrt_one_minus_alpha_bar(t));
            for v in x.iter_mut() {
                *v = r * (*v - b * 0.3 * *v);
            }
        }
        let expect: Vec<f64> = x.iter().map(|v| (v.clamp(-1.0, 1.0) + 1.0) / 2.0).collect();
        for (g, e) in got.data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn clipped_trajectory_replays_with_clamped_estimates() {
        let s = NoiseSchedule::linear(30, 1e-4, 0.2).unwrap();
        let opts = SampleOptions {
            variance: VarianceMode::Zero,
            clip_denoised: true,
            ..SampleOptions::new(4)
        };
        let got = sample(&net(), &s, &cond(1, 4), 1, &opts).unwrap();
        let mut rng = item_rng(4, 0);
        let mut x: Vec<f64> = (0..16).map(|_| StandardNormal.sample(&mut rng)).collect();
        for t in (1..=30).rev() {
            let (ab, ab_prev) = (s.alpha_bar(t), s.alpha_bar_prev(t));
            let c0 = ab_prev.sqrt() * s.beta(t) / (1.0 - ab);
            let ct = s.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
            for v in x.iter_mut() {
                let x0 = ((*v - (1.0 - ab).sqrt() * 0.3 * *v) / ab.sqrt()).clamp(-1.0, 1.0);
                *v = c0 * x0 + ct * *v;
            }
        }
        for (g, e) in got.data().iter().zip(&x) {
            assert!((g - (e.clamp(-1.0, 1.0) + 1.0) / 2.0).abs() < 1e-12);
        }
        let plain = sample(&net(), &s, &cond(1, 4), 1, &SampleOptions { clip_denoised: false, ..opts }).unwrap();
        assert_ne!(got.data(), plain.data());
    }

    #[test]
    fn one_mask_is_shared() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.2).unwrap();
        let out = sample(&net(), &s, &cond(1, 4), 4, &SampleOptions::new(0)).unwrap();
        assert_eq!(out.shape(), &[4, 1, 4, 4]);
        assert!(sample(&net(), &s, &cond(2, 4), 3, &SampleOptions::new(0)).is_err());
    }

    #[test]
    fn variant_mismatch_is_rejected() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.2).unwrap();
        let concat = Affine {
            variant: Variant::Concat,
            ..net()
        };
        assert!(matches!(
            sample(&concat, &s, &cond(1, 4), 1, &SampleOptions::new(0)),
            Err(Error::VariantMismatch { .. })
        ));
    }

    #[test]
    fn divergence_reports_the_step() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.2).unwrap();
        let wild = Affine {
            gain: -1e300,
            ..net()
        };
        match sample(&wild, &s, &cond(1, 4), 1, &SampleOptions::new(0)) {
            Err(Error::NonFiniteSample { step }) => assert!(step <= 10),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }
}
