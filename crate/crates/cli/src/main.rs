use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use semdiff_core::checkpoint::Checkpoint;
use semdiff_core::config::{DiceGrouping, EvalConfig, ExperimentConfig, ExtractorConfig, OracleConfig};
use semdiff_core::data::{generate_toy_dataset, ingest, write_dataset, Dataset, IngestOptions, Split, ToyPhantomConfig};
use semdiff_core::eval::{evaluate_with_config, ComparisonTable, EvalOptions, EvalReport};
use semdiff_core::sample::{sample_grid, GridOptions, VarianceMode};
use semdiff_core::train::{resume, train, RunOptions};
use semdiff_core::unet::Variant;

#[derive(Parser)]
#[command(name = "semdiff", version, about = "Mask-conditioned diffusion for abdominal CT slices")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert per-slice PNGs (`<subject>_<slice>.png`) and organ label maps into a dataset.
    Ingest(IngestArgs),
    /// Write the synthetic phantom dataset.
    ToyGen(ToyGenArgs),
    /// Train a denoiser.
    Train(TrainArgs),
    /// Sample synthetic slices for the masks of a dataset split.
    Sample(SampleArgs),
    /// Score synthetic slices against real ones.
    Eval(EvalArgs),
    /// Combine evaluation reports into one comparison table.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML (or JSON) experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset, applied beneath the file.
    #[arg(long, value_parser = ["paper", "toy"])]
    preset: Option<String>,
    /// Conditioning variant: concat, mask-guided or edge-guided.
    #[arg(long)]
    variant: Option<Variant>,
    /// Dotted override, e.g. `train.iterations=500`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[String]) -> Result<ExperimentConfig> {
        let mut overrides = Vec::new();
        if let Some(p) = &self.preset {
            overrides.push(format!("preset={p}"));
        }
        if let Some(v) = self.variant {
            overrides.push(format!("train.variant={v}"));
        }
        overrides.extend(self.overrides.iter().cloned());
        overrides.extend(extra.iter().cloned());
        let config = match &self.config {
            Some(path) => ExperimentConfig::load(path, &overrides),
            None => ExperimentConfig::from_toml_with_overrides("", &overrides),
        };
        Ok(config?)
    }
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    masks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Resize slices to this side length (default: the config's image size).
    #[arg(long)]
    size: Option<usize>,
    /// Keep the source resolution.
    #[arg(long, conflicts_with = "size")]
    native_size: bool,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    /// Images are already windowed to [0, 1] rather than stored as HU + 1024.
    #[arg(long)]
    prewindowed: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct ToyGenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    subjects: usize,
    #[arg(long, default_value_t = 16)]
    slices: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset manifest (overrides `data.manifest`).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint file or run directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args)]
struct SampleArgs {
    /// Checkpoint file or run directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset manifest (default: the checkpoint config's `data.manifest`).
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Samples per mask.
    #[arg(long, default_value_t = 1)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use the EMA weights.
    #[arg(long)]
    ema: bool,
    /// Deterministic reverse process without injected noise.
    #[arg(long)]
    zero_variance: bool,
    /// Clamp each step's clean-image estimate to [-1, 1].
    #[arg(long)]
    clip_denoised: bool,
    #[arg(long, default_value_t = 16)]
    chunk: usize,
    /// Sampling threads (default: SEMDIFF_NUM_WORKERS or 1).
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    max_masks: Option<usize>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    Toy,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExtractorArg {
    RandomProjection,
    External,
}

#[derive(Clone, Copy, ValueEnum)]
enum GroupingArg {
    Slice,
    Subject,
}

#[derive(Args)]
struct EvalArgs {
    /// Output directory of `sample`; supplies `real/`, `samples/` and `masks/`.
    #[arg(long)]
    run: Option<PathBuf>,
    #[arg(long, required_unless_present = "run")]
    real: Option<PathBuf>,
    #[arg(long, required_unless_present = "run")]
    synth: Option<PathBuf>,
    #[arg(long, required_unless_present = "run")]
    masks: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "toy")]
    oracle: OracleArg,
    /// Command with `{input}` and `{output}` placeholders.
    #[arg(long, required_if_eq("oracle", "external"))]
    oracle_cmd: Option<String>,
    #[arg(long, value_enum, default_value = "random-projection")]
    extractor: ExtractorArg,
    /// Command with an `{input}` placeholder for the image list.
    #[arg(long, required_if_eq("extractor", "external"))]
    extractor_cmd: Option<String>,
    #[arg(long, default_value_t = 0)]
    extractor_seed: u64,
    #[arg(long, value_enum, default_value = "slice")]
    grouping: GroupingArg,
    #[arg(long, default_value_t = 1.0)]
    data_range: f64,
    /// Row label in comparison tables.
    #[arg(long, default_value = "run")]
    label: String,
    /// Report path; `.csv` and `.txt` tables are written beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Report JSON files, one table row each.
    #[arg(long = "in", required = true, num_args = 1..)]
    inputs: Vec<PathBuf>,
    /// Output prefix for `.csv` and `.txt`.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Ingest(a) => run_ingest(a),
        Command::ToyGen(a) => run_toy_gen(a),
        Command::Train(a) => run_train(a),
        Command::Sample(a) => run_sample(a),
        Command::Eval(a) => run_eval(a),
        Command::Report(a) => run_report(a),
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn run_ingest(a: IngestArgs) -> Result<()> {
    let config = a.config.resolve(&[])?;
    let options = IngestOptions {
        hounsfield: !a.prewindowed,
        window: config.data.window,
        body: config.data.body,
        size: if a.native_size { None } else { Some(a.size.unwrap_or(config.model.image_size)) },
        test_fraction: a.test_fraction,
    };
    let summary = ingest(&a.images, &a.masks, &a.out, &options)?;
    config.write_snapshot(&a.out)?;
    write_json(&a.out.join("ingest_summary.json"), &serde_json::to_value(&summary)?)?;
    println!("{}", summary.manifest.display());
    Ok(())
}

fn run_toy_gen(a: ToyGenArgs) -> Result<()> {
    let toy = ToyPhantomConfig {
        subjects: a.subjects,
        slices_per_subject: a.slices,
        size: a.size,
        seed: a.seed,
    };
    let records = generate_toy_dataset(&toy)?;
    let manifest = write_dataset(&records, &a.out)?;
    write_json(
        &a.out.join("toy_config.json"),
        &json!({
            "subjects": toy.subjects,
            "slices_per_subject": toy.slices_per_subject,
            "size": toy.size,
            "seed": toy.seed,
        }),
    )?;
    println!("{}", manifest.display());
    Ok(())
}

fn load_dataset(manifest: &Path, config: &ExperimentConfig) -> Result<Dataset> {
    Ok(Dataset::load(manifest)?
        .with_window(config.data.window)
        .with_resize(config.model.image_size))
}

fn run_train(a: TrainArgs) -> Result<()> {
    let extra: Vec<String> = a
        .manifest
        .iter()
        .map(|m| format!("data.manifest={}", toml_string(&m.display().to_string())))
        .collect();
    let config = a.config.resolve(&extra)?;
    let Some(manifest) = config.data.manifest.clone() else {
        bail!("no dataset: pass --manifest or set data.manifest");
    };
    let dataset = load_dataset(&manifest, &config)?;
    let opts = RunOptions::from_env(&a.out);
    let outcome = match &a.resume {
        Some(ckpt) => resume(ckpt, config, dataset, &opts)?,
        None => train(config, dataset, &opts)?,
    };
    println!("{}", outcome.final_checkpoint.display());
    Ok(())
}

fn toml_string(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

fn run_sample(a: SampleArgs) -> Result<()> {
    let checkpoint = Checkpoint::load(&a.ckpt)?;
    let manifest = match a.manifest.clone().or_else(|| checkpoint.config.data.manifest.clone()) {
        Some(m) => m,
        None => bail!("no dataset: pass --manifest"),
    };
    let env = RunOptions::from_env(&a.out);
    let mut options = GridOptions::new(a.seed);
    options.sample.variance = if a.zero_variance { VarianceMode::Zero } else { VarianceMode::Learned };
    options.sample.clip_denoised = a.clip_denoised;
    options.sample.chunk = a.chunk.max(1);
    options.sample.workers = a.workers.unwrap_or(env.workers).max(1);
    options.split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    options.use_ema = a.ema;
    options.max_masks = a.max_masks;
    let index = sample_grid(&checkpoint, &manifest, &a.out, a.n, &options)?;
    checkpoint.config.write_snapshot(&a.out)?;
    if !index.failures.is_empty() {
        bail!("{} output files could not be written; see index.json", index.failures.len());
    }
    println!("{} samples in {}", index.entries.len(), a.out.display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let pick = |given: &Option<PathBuf>, sub: &str| -> Result<PathBuf> {
        match (given, &a.run) {
            (Some(p), _) => Ok(p.clone()),
            (None, Some(run)) => Ok(run.join(sub)),
            (None, None) => bail!("--{sub} or --run is required"),
        }
    };
    let real = pick(&a.real, "real")?;
    let synth = pick(&a.synth, "samples")?;
    let masks = pick(&a.masks, "masks")?;
    let config = EvalConfig {
        oracle: match a.oracle {
            OracleArg::Toy => OracleConfig::Toy,
            OracleArg::External => OracleConfig::External {
                command: a.oracle_cmd.clone().unwrap_or_default(),
            },
        },
        extractor: match a.extractor {
            ExtractorArg::RandomProjection => ExtractorConfig::RandomProjection { seed: a.extractor_seed },
            ExtractorArg::External => ExtractorConfig::External {
                command: a.extractor_cmd.clone().unwrap_or_default(),
            },
        },
        dice_grouping: match a.grouping {
            GroupingArg::Slice => DiceGrouping::Slice,
            GroupingArg::Subject => DiceGrouping::Subject,
        },
        data_range: a.data_range,
    };
    if !(config.data_range > 0.0) {
        bail!("--data-range must be positive");
    }
    let mut options = EvalOptions::new(config);
    options.label = a.label.clone();
    let run_config = a.run.as_ref().map(|r| r.join("resolved_config.toml")).filter(|p| p.is_file());
    if let Some(path) = run_config {
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        options.provenance = Some(json!({ "run_config": text }));
    }
    let report = evaluate_with_config(&real, &synth, &masks, &options)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    report.write(&a.out)?;
    print!("{}", ComparisonTable::new(std::slice::from_ref(&report)).to_text());
    Ok(())
}

fn run_report(a: ReportArgs) -> Result<()> {
    let reports = a
        .inputs
        .iter()
        .map(|p| EvalReport::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let table = ComparisonTable::new(&reports);
    if let Some(out) = &a.out {
        let csv = out.with_extension("csv");
        std::fs::write(&csv, table.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
        let txt = out.with_extension("txt");
        std::fs::write(&txt, table.to_text()).with_context(|| format!("writing {}", txt.display()))?;
    }
    print!("{}", table.to_text());
    Ok(())
}
