//! Experiment configuration: one TOML file with `[schedule]`, `[model]`,
//! `[train]`, `[data]` and `[eval]` sections.
//!
//! Values are resolved in three layers: the built-in preset named by the
//! top-level `preset` key (`paper` or `toy`, default `paper`), then the file,
//! then command-line overrides given as dotted `section.key=value` pairs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{BodyParams, Window};
use crate::error::{Error, Result};
use crate::schedule::ScheduleConfig;
use crate::unet::{DenoiserConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Toy,
}

/// Network shape; the conditioning variant lives in [`TrainConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    pub num_res_blocks_per_level: usize,
    pub attention_resolutions: Vec<usize>,
    pub num_mask_classes: usize,
}

impl ModelConfig {
    fn from_denoiser(d: DenoiserConfig) -> Self {
        Self {
            image_size: d.image_size,
            base_width: d.base_width,
            channel_multipliers: d.channel_multipliers,
            num_res_blocks_per_level: d.num_res_blocks_per_level,
            attention_resolutions: d.attention_resolutions,
            num_mask_classes: d.num_mask_classes,
        }
    }

    pub fn denoiser(&self, variant: Variant) -> DenoiserConfig {
        DenoiserConfig {
            image_size: self.image_size,
            base_width: self.base_width,
            channel_multipliers: self.channel_multipliers.clone(),
            num_res_blocks_per_level: self.num_res_blocks_per_level,
            attention_resolutions: self.attention_resolutions.clone(),
            num_mask_classes: self.num_mask_classes,
            variant,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_vlb: f64,
    pub checkpoint_every: u64,
    /// A metrics row with that step's loss is written at multiples of this.
    pub log_every: u64,
    pub seed: u64,
    /// Batch order seed; the training seed when absent.
    pub shuffle_seed: Option<u64>,
    pub variant: Variant,
    pub ema_decay: Option<f64>,
    /// Rescales gradients whose global norm exceeds this.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn paper(variant: Variant) -> Self {
        Self {
            iterations: 150_000,
            batch_size: 16,
            learning_rate: 1e-4,
            lambda_vlb: 0.001,
            checkpoint_every: 50_000,
            log_every: 100,
            seed: 0,
            shuffle_seed: None,
            variant,
            ema_decay: None,
            grad_clip: None,
        }
    }

    pub fn toy(variant: Variant) -> Self {
        Self {
            iterations: 3000,
            batch_size: 8,
            checkpoint_every: 1000,
            ..Self::paper(variant)
        }
    }

    pub fn shuffle_seed(&self) -> u64 {
        self.shuffle_seed.unwrap_or(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("train: {m}")));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        if !(self.lambda_vlb >= 0.0 && self.lambda_vlb.is_finite()) {
            return bad(format!("lambda_vlb {} must be nonnegative", self.lambda_vlb));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("checkpoint_every and log_every must be positive".into());
        }
        if self.iterations > 0 && self.checkpoint_every > self.iterations {
            return bad(format!(
                "checkpoint_every {} exceeds iterations {}",
                self.checkpoint_every, self.iterations
            ));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return bad(format!("ema_decay {d} must lie in [0, 1)"));
            }
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("grad_clip {c} must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: Option<PathBuf>,
    /// Hold every training slice in memory instead of decoding per step.
    pub preload: bool,
    pub window: Window,
    pub body: BodyParams,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            preload: true,
            window: Window::default(),
            body: BodyParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OracleConfig {
    /// Nearest toy intensity band.
    Toy,
    /// `command` runs through `sh -c` with `{input}` and `{output}` replaced
    /// by an image path and the label PNG path it must write.
    External { command: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ExtractorConfig {
    /// Fixed seeded random convolutions with global pooling.
    RandomProjection { seed: u64 },
    /// `command` runs through `sh -c` with `{input}` replaced by a file that
    /// lists image paths one per line; it prints one whitespace-separated
    /// feature row per image on stdout.
    External { command: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiceGrouping {
    /// Mean over slices whose ground truth contains the class.
    Slice,
    /// Overlap pooled per subject, then averaged over subjects.
    Subject,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub oracle: OracleConfig,
    pub extractor: ExtractorConfig,
    pub dice_grouping: DiceGrouping,
    pub data_range: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            oracle: OracleConfig::Toy,
            extractor: ExtractorConfig::RandomProjection { seed: 0 },
            dice_grouping: DiceGrouping::Slice,
            data_range: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset, variant: Variant) -> Self {
        let (model, train) = match preset {
            Preset::Paper => (DenoiserConfig::paper(variant), TrainConfig::paper(variant)),
            Preset::Toy => (DenoiserConfig::toy(variant), TrainConfig::toy(variant)),
        };
        Self {
            preset,
            schedule: ScheduleConfig::default(),
            model: ModelConfig::from_denoiser(model),
            train,
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn toy(variant: Variant) -> Self {
        Self::preset(Preset::Toy, variant)
    }

    pub fn paper(variant: Variant) -> Self {
        Self::preset(Preset::Paper, variant)
    }

    pub fn denoiser(&self) -> DenoiserConfig {
        self.model.denoiser(self.train.variant)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.denoiser().validate()?;
        self.train.validate()?;
        if !(self.eval.data_range > 0.0) {
            return Err(Error::Config("eval: data_range must be positive".into()));
        }
        Ok(())
    }

    /// Resolves TOML text plus `section.key=value` overrides.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table = toml::from_str(text)?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let preset = match user.get("preset") {
            Some(v) => v
                .clone()
                .try_into::<Preset>()
                .map_err(|e| Error::Config(format!("preset: {e}")))?,
            None => Preset::Paper,
        };
        let variant = match user.get("train").and_then(|t| t.get("variant")) {
            Some(v) => v
                .clone()
                .try_into::<Variant>()
                .map_err(|e| Error::Config(format!("train.variant: {e}")))?,
            None => Variant::MaskGuided,
        };
        let mut base = toml::Table::try_from(Self::preset(preset, variant))
            .map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut base, user);
        let config: Self = toml::Value::Table(base).try_into()?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    /// Reads a TOML file, or JSON when the extension is `.json`.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        if path.extension().is_some_and(|e| e == "json") {
            let value: serde_json::Value = serde_json::from_str(&text)?;
            let text = toml::to_string(&value).map_err(|e| Error::Config(e.to_string()))?;
            return Self::from_toml_with_overrides(&text, overrides);
        }
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    /// Writes the fully resolved configuration next to a run's outputs.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join("resolved_config.toml");
        std::fs::write(&path, self.to_toml_string()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        Ok(path)
    }

    /// Field-level differences that make `other` unable to continue this run.
    pub fn resume_conflicts(&self, other: &Self) -> Vec<String> {
        let mut out = Vec::new();
        let mut check = |name: &str, a: String, b: String| {
            if a != b {
                out.push(format!("{name}: checkpoint has {a}, requested {b}"));
            }
        };
        check("train.variant", self.train.variant.to_string(), other.train.variant.to_string());
        check("schedule", format!("{:?}", self.schedule), format!("{:?}", other.schedule));
        let (a, b) = (&self.model, &other.model);
        check("model.image_size", a.image_size.to_string(), b.image_size.to_string());
        check("model.base_width", a.base_width.to_string(), b.base_width.to_string());
        check("model.channel_multipliers", format!("{:?}", a.channel_multipliers), format!("{:?}", b.channel_multipliers));
        check("model.num_res_blocks_per_level", a.num_res_blocks_per_level.to_string(), b.num_res_blocks_per_level.to_string());
        check("model.attention_resolutions", format!("{:?}", a.attention_resolutions), format!("{:?}", b.attention_resolutions));
        check("model.num_mask_classes", a.num_mask_classes.to_string(), b.num_mask_classes.to_string());
        check("train.batch_size", self.train.batch_size.to_string(), other.train.batch_size.to_string());
        check("train.seed", self.train.seed.to_string(), other.train.seed.to_string());
        check("train.shuffle_seed", self.train.shuffle_seed().to_string(), other.train.shuffle_seed().to_string());
        check("train.ema_decay", format!("{:?}", self.train.ema_decay), format!("{:?}", other.train.ema_decay));
        out
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) if !is_tagged(b) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Tagged enums are replaced whole so variant-specific fields never mix.
fn is_tagged(t: &toml::Table) -> bool {
    t.contains_key("kind")
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    let raw = raw.trim();
    // bare words that are not valid TOML values are taken as strings
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("split yields one item");
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{spec}`: `{p}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
