//! Training loop: Adam on the hybrid loss with deterministic batching,
//! periodic metrics rows, checkpoints and exact resume.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::checkpoint::{checkpoint_file_name, write_latest_pointer, Checkpoint, OptimizerState};
use crate::config::ExperimentConfig;
use crate::data::{Batch, BatchSampler, Dataset, Split};
use crate::error::{Error, Result};
use crate::loss::{hybrid_loss_with_grad, LossTerms};
use crate::nn::{Adam, AdamConfig, Tensor};
use crate::schedule::NoiseSchedule;
use crate::unet::Denoiser;

pub const METRICS_FILE: &str = "metrics.csv";
const METRICS_HEADER: &str = "step,l_simple,l_vlb,total,wallclock_s";

/// Process-level knobs that do not change results.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Data-loading threads; 0 or 1 loads on the training thread.
    pub workers: usize,
    /// Forces a single worker and writes 0 for wall-clock time so repeated
    /// runs produce byte-identical metrics.
    pub deterministic: bool,
}

impl RunOptions {
    /// Reads `SEMDIFF_NUM_WORKERS` and `SEMDIFF_DETERMINISTIC`.
    pub fn from_env(out_dir: impl Into<PathBuf>) -> Self {
        let deterministic = std::env::var("SEMDIFF_DETERMINISTIC").is_ok_and(|v| v == "1");
        let workers = std::env::var("SEMDIFF_NUM_WORKERS")
            .ok()
            .and_then(|v| v.parse().ok())
            .unwrap_or(1);
        Self {
            out_dir: out_dir.into(),
            workers: if deterministic { 1 } else { workers },
            deterministic,
        }
    }

    pub fn deterministic(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            out_dir: out_dir.into(),
            workers: 1,
            deterministic: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    /// Optimizer steps completed, counting this one.
    pub step: u64,
    pub terms: LossTerms,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub metrics_path: PathBuf,
    /// One entry per step run by this call.
    pub history: Vec<StepMetrics>,
}

/// Owns the network, optimizer and data order of one run.
pub struct Trainer {
    config: ExperimentConfig,
    schedule: NoiseSchedule,
    net: Denoiser<f32>,
    adam: Adam<f32>,
    ema: Option<Vec<Tensor<f32>>>,
    dataset: Arc<Dataset>,
    sampler: BatchSampler,
    step: u64,
}

impl Trainer {
    pub fn new(config: ExperimentConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        let net = Denoiser::new(config.denoiser(), config.train.seed)?;
        let adam = Adam::new(
            AdamConfig {
                learning_rate: config.train.learning_rate,
                ..AdamConfig::default()
            },
            net.params(),
        );
        let ema = config.train.ema_decay.map(|_| net.params().tensors().to_vec());
        Self::assemble(config, net, adam, ema, dataset, 0)
    }

    /// Restores parameters, optimizer state and step count from a checkpoint.
    /// `config` must agree with the checkpoint on everything that shapes the
    /// network or the data order; `train.iterations` may grow.
    pub fn resume(checkpoint: &Path, config: ExperimentConfig, dataset: Dataset) -> Result<Self> {
        config.validate()?;
        let ck = Checkpoint::load(checkpoint)?;
        let conflicts = ck.config.resume_conflicts(&config);
        if !conflicts.is_empty() {
            return Err(Error::Incompatible(conflicts.join("\n")));
        }
        let Some(opt) = ck.optimizer.clone() else {
            return Err(Error::Checkpoint {
                path: checkpoint.to_path_buf(),
                reason: "no optimizer state; cannot resume".into(),
            });
        };
        let net = ck.denoiser()?;
        let mut adam = opt.into_adam();
        adam.config.learning_rate = config.train.learning_rate;
        Self::assemble(config, net, adam, ck.ema, dataset, ck.step)
    }

    fn assemble(
        config: ExperimentConfig,
        net: Denoiser<f32>,
        adam: Adam<f32>,
        ema: Option<Vec<Tensor<f32>>>,
        mut dataset: Dataset,
        step: u64,
    ) -> Result<Self> {
        let indices = dataset.split_indices(Split::Train);
        if indices.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        if config.data.preload {
            dataset.preload()?;
        }
        let size = config.model.image_size;
        let first = dataset.record(indices[0])?;
        if first.mask.dim() != (size, size) {
            return Err(Error::Shape(format!(
                "slices are {:?} but the model expects {size}x{size}",
                first.mask.dim()
            )));
        }
        let sampler = BatchSampler::new(indices, config.train.batch_size, config.train.shuffle_seed())?;
        Ok(Self {
            schedule: config.schedule.build()?,
            config,
            net,
            adam,
            ema,
            dataset: Arc::new(dataset),
            sampler,
            step,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn denoiser(&self) -> &Denoiser<f32> {
        &self.net
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.config.clone(), self.step, self.net.params());
        ck.optimizer = Some(OptimizerState::from_adam(&self.adam));
        ck.ema = self.ema.clone();
        ck
    }

    fn load_batch(dataset: &Dataset, sampler: &BatchSampler, step: u64, config: &ExperimentConfig) -> Result<Batch<f32>> {
        let indices = sampler.batch_at(step).expect("non-empty training split");
        dataset.batch(&indices, config.train.variant)
    }

    /// One optimizer step on `batch`, which must be the batch for the current step.
    fn apply(&mut self, batch: &Batch<f32>) -> Result<StepMetrics> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train.seed);
        rng.set_stream(self.step);
        let n = batch.len();
        let timesteps = self.schedule.timesteps();
        let t: Vec<usize> = (0..n).map(|_| rng.random_range(1..=timesteps)).collect();
        let eps_data = (0..batch.images.len()).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let eps = Tensor::from_vec(batch.images.shape(), eps_data)?;
        let x_t = self.schedule.q_sample_batch(&batch.images, &t, &eps)?;
        let lambda = self.config.train.lambda_vlb;
        let schedule = &self.schedule;
        let (terms, mut grads) = self.net.forward_backward(&x_t, &t, &batch.cond, |out| {
            hybrid_loss_with_grad(schedule, &batch.images, &t, &eps, out, lambda)
        })?;
        let step = self.step + 1;
        if !terms.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                l_simple: terms.l_simple,
                l_vlb: terms.l_vlb,
                total: terms.total,
            });
        }
        if let Some(clip) = self.config.train.grad_clip {
            let norm = grads.global_norm();
            if norm > clip {
                grads.scale((clip / norm) as f32);
            }
        }
        self.adam.update(self.net.params_mut(), &grads);
        if let (Some(ema), Some(decay)) = (&mut self.ema, self.config.train.ema_decay) {
            let decay = decay as f32;
            for (e, p) in ema.iter_mut().zip(self.net.params().tensors()) {
                for (e, &p) in e.data_mut().iter_mut().zip(p.data()) {
                    *e = decay * *e + (1.0 - decay) * p;
                }
            }
        }
        self.step = step;
        Ok(StepMetrics { step, terms })
    }

    /// Runs a single optimizer step, loading its batch on this thread.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let batch = Self::load_batch(&self.dataset, &self.sampler, self.step, &self.config)?;
        self.apply(&batch)
    }

    fn save_checkpoint(&self, dir: &Path) -> Result<PathBuf> {
        let name = checkpoint_file_name(self.step);
        let path = dir.join(&name);
        self.checkpoint().save(&path)?;
        write_latest_pointer(dir, &name)?;
        log::info!("saved checkpoint {}", path.display());
        Ok(path)
    }

    /// Trains until `train.iterations` steps are complete.
    pub fn run(&mut self, opts: &RunOptions) -> Result<TrainOutcome> {
        let dir = &opts.out_dir;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        self.config.write_snapshot(dir)?;
        let metrics_path = dir.join(METRICS_FILE);
        let mut metrics = open_metrics(&metrics_path, self.step)?;
        let target = self.config.train.iterations;
        let (log_every, ckpt_every) = (self.config.train.log_every, self.config.train.checkpoint_every);
        let started = Instant::now();
        let mut history = Vec::new();
        let mut checkpoints = Vec::new();
        let mut last_saved = None;

        if target == 0 || self.step >= target {
            checkpoints.push(self.save_checkpoint(dir)?);
            last_saved = Some(self.step);
        }

        let workers = if opts.deterministic { 1 } else { opts.workers.max(1) };
        let prefetch = (workers > 1 && self.step < target).then(|| self.spawn_loaders(workers, target));
        while self.step < target {
            let batch = match &prefetch {
                Some(channels) => {
                    let k = (self.step as usize) % channels.len();
                    channels[k]
                        .recv()
                        .map_err(|_| Error::Data("data loader stopped".into()))??
                }
                None => Self::load_batch(&self.dataset, &self.sampler, self.step, &self.config)?,
            };
            let m = self.apply(&batch)?;
            history.push(m);
            if m.step % log_every == 0 {
                let wall = if opts.deterministic { 0.0 } else { started.elapsed().as_secs_f64() };
                let t = m.terms;
                writeln!(metrics, "{},{},{},{},{wall:.3}", m.step, t.l_simple, t.l_vlb, t.total)
                    .and_then(|_| metrics.flush())
                    .map_err(|e| Error::io(format!("writing {}", metrics_path.display()), e))?;
                log::info!("step {} l_simple {:.5} l_vlb {:.5} total {:.5}", m.step, t.l_simple, t.l_vlb, t.total);
            }
            if m.step % ckpt_every == 0 || m.step == target {
                checkpoints.push(self.save_checkpoint(dir)?);
                last_saved = Some(m.step);
            }
        }
        debug_assert_eq!(last_saved, Some(self.step));
        Ok(TrainOutcome {
            final_checkpoint: checkpoints.last().cloned().expect("at least one checkpoint"),
            checkpoints,
            metrics_path,
            history,
        })
    }

    /// Worker `k` prepares the batches for steps congruent to `k` modulo the
    /// worker count; the trainer reads the channels round-robin, so the batch
    /// sequence is the same as single-threaded loading.
    fn spawn_loaders(&self, workers: usize, target: u64) -> Vec<Receiver<Result<Batch<f32>>>> {
        let start = self.step;
        (0..workers)
            .map(|k| {
                let (tx, rx) = sync_channel(2);
                let dataset = Arc::clone(&self.dataset);
                let sampler = self.sampler.clone();
                let config = self.config.clone();
                std::thread::spawn(move || {
                    let first = start + ((k as u64 + workers as u64 - start % workers as u64) % workers as u64);
                    let mut step = first;
                    while step < target {
                        if tx.send(Self::load_batch(&dataset, &sampler, step, &config)).is_err() {
                            break;
                        }
                        step += workers as u64;
                    }
                });
                rx
            })
            .collect()
    }
}

/// Opens the metrics CSV for appending after `step`, dropping any rows
/// beyond it left by an interrupted run.
fn open_metrics(path: &Path, step: u64) -> Result<File> {
    let io = |e| Error::io(format!("writing {}", path.display()), e);
    let mut kept = vec![METRICS_HEADER.to_string()];
    if step > 0 && path.is_file() {
        let f = File::open(path).map_err(io)?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(io)?;
            let row_step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(u64::MAX);
            if row_step <= step {
                kept.push(line);
            }
        }
    }
    let mut f = OpenOptions::new().create(true).write(true).truncate(true).open(path).map_err(io)?;
    for line in kept {
        writeln!(f, "{line}").map_err(io)?;
    }
    Ok(f)
}

/// Fresh run of `config` on `dataset`, writing into `opts.out_dir`.
pub fn train(config: ExperimentConfig, dataset: Dataset, opts: &RunOptions) -> Result<TrainOutcome> {
    Trainer::new(config, dataset)?.run(opts)
}

/// Continues the run saved in `checkpoint` up to `config.train.iterations`.
pub fn resume(checkpoint: &Path, config: ExperimentConfig, dataset: Dataset, opts: &RunOptions) -> Result<TrainOutcome> {
    Trainer::resume(checkpoint, config, dataset)?.run(opts)
}

/// Parses a metrics CSV into `(step, l_simple, l_vlb, total)` rows.
pub fn read_metrics(path: &Path) -> Result<Vec<(u64, f64, f64, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Data(format!("{}: unexpected header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Data(format!("{}: malformed row {}", path.display(), i + 2));
            if f.len() != 5 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            Ok((f[0].parse().map_err(|_| bad())?, num(f[1])?, num(f[2])?, num(f[3])?))
        })
        .collect()
}
