//! Evaluation harness: image-quality metrics between real and synthetic
//! slices, overlap of an oracle's segmentation with the conditioning mask,
//! and table-style reports.

mod features;
mod metrics;
mod oracle;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DiceGrouping, EvalConfig};
use crate::data::{png, BACKGROUND, CLASS_NAMES};
use crate::error::{Error, Result};

pub use features::{extractor_from_config, ExternalExtractor, FeatureExtractor, RandomProjection};
pub use metrics::{
    dice, dice_counts, dice_from_counts, feature_stats, fid, fid_detailed, fid_from_stats, fid_from_stats_detailed,
    psnr, psnr_from_mse, ssim, EIGEN_TOLERANCE, FID_REGULARIZER, PSNR_CAP, SSIM_SIGMA, SSIM_WINDOW,
};
pub use oracle::{oracle_from_config, ExternalOracle, SegmentationOracle, ToyIntensityOracle};

/// Organ columns in table order; classes outside this list follow in label order.
pub const TABLE_CLASSES: [&str; 14] = [
    "spleen",
    "liver",
    "kidney_left",
    "kidney_right",
    "pancreas",
    "stomach",
    "aorta",
    "gallbladder",
    "esophagus",
    "adrenal_right",
    "adrenal_left",
    "duodenum",
    "inferior_vena_cava",
    "bladder",
];

/// Separates a source stem from the repeat index in synthetic file names.
pub const REPEAT_MARKER: &str = "__r";

/// A unique temporary file path for external tools.
pub(crate) fn scratch_path(name: &str) -> PathBuf {
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let n = COUNTER.fetch_add(1, Ordering::Relaxed);
    std::env::temp_dir().join(format!("semdiff-{}-{n}-{name}", std::process::id()))
}

/// Every non-background class in table order.
pub fn table_class_order() -> Vec<&'static str> {
    let mut order: Vec<&str> = TABLE_CLASSES.to_vec();
    for (label, name) in CLASS_NAMES.iter().enumerate() {
        if label as u8 != BACKGROUND && !order.contains(name) {
            order.push(name);
        }
    }
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub synth: String,
    pub source: String,
    /// Capped at [`PSNR_CAP`].
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub fid: f64,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    /// Class name to mean Dice in `[0, 1]`; classes absent from every
    /// ground-truth mask are left out.
    pub dsc_per_class: BTreeMap<String, f64>,
    /// Images (or subjects) each Dice mean is taken over.
    pub dsc_support: BTreeMap<String, usize>,
    pub dsc_grouping: DiceGrouping,
    pub absent_classes: Vec<String>,
    pub n_images: usize,
    pub n_real: usize,
    pub fid_regularized: bool,
    pub config_fingerprint: String,
    pub per_image: Vec<ImageScores>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_json(&text)
    }

    /// Writes `path` (JSON) plus `.csv` and `.txt` tables beside it.
    pub fn write(&self, path: &Path) -> Result<()> {
        let write = |p: PathBuf, body: String| {
            std::fs::write(&p, body).map_err(|e| Error::io(format!("writing {}", p.display()), e))
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
        write(path.to_path_buf(), self.to_json()?)?;
        let table = ComparisonTable::new(std::slice::from_ref(self));
        write(path.with_extension("csv"), table.to_csv())?;
        write(path.with_extension("txt"), table.to_text())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub config: EvalConfig,
    pub label: String,
    /// Extra material folded into the fingerprint, e.g. the training config.
    pub provenance: Option<serde_json::Value>,
}

impl EvalOptions {
    pub fn new(config: EvalConfig) -> Self {
        Self {
            config,
            label: "run".into(),
            provenance: None,
        }
    }
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) && path.is_file() {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

/// Source stem of a synthetic file stem: `abc__r3` and `abc` both give `abc`.
pub fn source_stem(synth_stem: &str) -> &str {
    match synth_stem.rsplit_once(REPEAT_MARKER) {
        Some((base, k)) if !k.is_empty() && k.bytes().all(|b| b.is_ascii_digit()) => base,
        _ => synth_stem,
    }
}

/// Subject of a `<subject>_<slice>` stem.
pub fn subject_of(stem: &str) -> &str {
    match stem.rsplit_once('_') {
        Some((s, idx)) if !idx.is_empty() && idx.bytes().all(|b| b.is_ascii_digit()) => s,
        _ => stem,
    }
}

struct Aligned {
    /// `(stem, real path, mask path)`.
    sources: Vec<(String, PathBuf, PathBuf)>,
    /// `(synth stem, synth path, index into sources)`.
    synth: Vec<(String, PathBuf, usize)>,
}

fn align(real_dir: &Path, synth_dir: &Path, mask_dir: &Path) -> Result<Aligned> {
    let real = png_stems(real_dir)?;
    let masks = png_stems(mask_dir)?;
    let synth = png_stems(synth_dir)?;
    let mut unmatched = Vec::new();
    for stem in real.keys().filter(|s| !masks.contains_key(*s)) {
        unmatched.push(format!("{}: no mask", real[stem].display()));
    }
    for stem in masks.keys().filter(|s| !real.contains_key(*s)) {
        unmatched.push(format!("{}: no real image", masks[stem].display()));
    }
    let sources: Vec<_> = real
        .iter()
        .filter_map(|(stem, path)| masks.get(stem).map(|m| (stem.clone(), path.clone(), m.clone())))
        .collect();
    let position: BTreeMap<&str, usize> = sources.iter().enumerate().map(|(i, s)| (s.0.as_str(), i)).collect();
    let mut used = BTreeSet::new();
    let mut aligned = Vec::new();
    for (stem, path) in &synth {
        match position.get(source_stem(stem)) {
            Some(&i) => {
                used.insert(i);
                aligned.push((stem.clone(), path.clone(), i));
            }
            None => unmatched.push(format!("{}: no real image or mask", path.display())),
        }
    }
    for (i, s) in sources.iter().enumerate() {
        if !used.contains(&i) {
            unmatched.push(format!("{}: no synthetic image", s.1.display()));
        }
    }
    if !unmatched.is_empty() {
        return Err(Error::Unaligned(unmatched));
    }
    if aligned.is_empty() {
        return Err(Error::Data(format!("no synthetic images in {}", synth_dir.display())));
    }
    Ok(Aligned { sources, synth: aligned })
}

fn fingerprint(options: &EvalOptions) -> Result<String> {
    let bytes = serde_json::to_vec(&(&options.config, &options.provenance))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Scores a synthetic directory against real slices and their masks.
///
/// Files pair by name: `real/<stem>.png`, `masks/<stem>.png` and
/// `synth/<stem>.png` or `synth/<stem>__r<k>.png`.
pub fn evaluate(
    real_dir: &Path,
    synth_dir: &Path,
    mask_dir: &Path,
    oracle: &dyn SegmentationOracle,
    extractor: &dyn FeatureExtractor,
    options: &EvalOptions,
) -> Result<EvalReport> {
    let aligned = align(real_dir, synth_dir, mask_dir)?;
    let range = options.config.data_range;
    let mut real_images = Vec::with_capacity(aligned.sources.len());
    let mut truth = Vec::with_capacity(aligned.sources.len());
    for (_, real_path, mask_path) in &aligned.sources {
        let img = png::read_unit(real_path)?;
        let mask = png::read_labels(mask_path)?;
        if img.dim() != mask.dim() {
            return Err(Error::Shape(format!(
                "{} is {:?} but its mask is {:?}",
                real_path.display(),
                img.dim(),
                mask.dim()
            )));
        }
        real_images.push(img);
        truth.push(mask);
    }

    let classes: Vec<u8> = (0..CLASS_NAMES.len() as u8).filter(|&c| c != BACKGROUND).collect();
    // Per class: per-group (intersection, |P|, |G|) sums for subject pooling,
    // or per-image Dice values for slice grouping.
    let mut pooled: BTreeMap<u8, BTreeMap<String, (usize, usize, usize)>> = BTreeMap::new();
    let mut per_slice: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    let mut synth_images = Vec::with_capacity(aligned.synth.len());
    let mut per_image = Vec::with_capacity(aligned.synth.len());
    for (stem, path, src) in &aligned.synth {
        let img = png::read_unit(path)?;
        let real = &real_images[*src];
        let p = psnr(real, &img, range)?.min(PSNR_CAP);
        let s = ssim(real, &img, range)?;
        let pred = oracle.segment_file(path, &img)?;
        let gt = &truth[*src];
        for &c in &classes {
            let (i, pc, gc) = dice_counts(&pred, gt, c)?;
            if gc == 0 {
                continue;
            }
            match options.config.dice_grouping {
                DiceGrouping::Slice => per_slice.entry(c).or_default().push(dice_from_counts(i, pc, gc)),
                DiceGrouping::Subject => {
                    let e = pooled
                        .entry(c)
                        .or_default()
                        .entry(subject_of(&aligned.sources[*src].0).to_string())
                        .or_default();
                    e.0 += i;
                    e.1 += pc;
                    e.2 += gc;
                }
            }
        }
        per_image.push(ImageScores {
            synth: stem.clone(),
            source: aligned.sources[*src].0.clone(),
            psnr: p,
            ssim: s,
        });
        synth_images.push(img);
    }

    let mut dsc_per_class = BTreeMap::new();
    let mut dsc_support = BTreeMap::new();
    let mut absent_classes = Vec::new();
    for &c in &classes {
        let values: Vec<f64> = match options.config.dice_grouping {
            DiceGrouping::Slice => per_slice.remove(&c).unwrap_or_default(),
            DiceGrouping::Subject => pooled
                .remove(&c)
                .unwrap_or_default()
                .values()
                .map(|&(i, p, g)| dice_from_counts(i, p, g))
                .collect(),
        };
        let name = CLASS_NAMES[c as usize].to_string();
        if values.is_empty() {
            absent_classes.push(name);
        } else {
            dsc_per_class.insert(name.clone(), values.iter().sum::<f64>() / values.len() as f64);
            dsc_support.insert(name, values.len());
        }
    }
    absent_classes.sort_by_key(|n| table_class_order().iter().position(|c| c == n));

    let real_paths: Vec<PathBuf> = aligned.sources.iter().map(|s| s.1.clone()).collect();
    let synth_paths: Vec<PathBuf> = aligned.synth.iter().map(|s| s.1.clone()).collect();
    let real_features = extractor.extract(&real_images, &real_paths)?;
    let synth_features = extractor.extract(&synth_images, &synth_paths)?;
    let (fid_value, fid_regularized) = fid_detailed(&real_features, &synth_features)?;

    let n = per_image.len() as f64;
    Ok(EvalReport {
        label: options.label.clone(),
        fid: fid_value,
        psnr_mean: per_image.iter().map(|s| s.psnr).sum::<f64>() / n,
        ssim_mean: per_image.iter().map(|s| s.ssim).sum::<f64>() / n,
        dsc_per_class,
        dsc_support,
        dsc_grouping: options.config.dice_grouping,
        absent_classes,
        n_images: per_image.len(),
        n_real: real_images.len(),
        fid_regularized,
        config_fingerprint: fingerprint(options)?,
        per_image,
    })
}

/// [`evaluate`] with the oracle and extractor named in `options.config`.
pub fn evaluate_with_config(real_dir: &Path, synth_dir: &Path, mask_dir: &Path, options: &EvalOptions) -> Result<EvalReport> {
    let oracle = oracle_from_config(&options.config.oracle);
    let extractor = extractor_from_config(&options.config.extractor);
    evaluate(real_dir, synth_dir, mask_dir, oracle.as_ref(), extractor.as_ref(), options)
}

/// Several reports side by side, best value per column starred.
#[derive(Clone, Debug)]
pub struct ComparisonTable {
    header: Vec<String>,
    rows: Vec<Vec<Option<f64>>>,
    labels: Vec<String>,
    best: Vec<Option<usize>>,
    footnotes: Vec<String>,
}

impl ComparisonTable {
    pub fn new(reports: &[EvalReport]) -> Self {
        let classes: Vec<&str> = table_class_order()
            .into_iter()
            .filter(|c| reports.iter().any(|r| r.dsc_per_class.contains_key(*c)))
            .collect();
        let mut header: Vec<String> = vec!["FID".into(), "PSNR".into(), "SSIM".into()];
        header.extend(classes.iter().map(|c| format!("DSC {c} (%)")));
        let rows: Vec<Vec<Option<f64>>> = reports
            .iter()
            .map(|r| {
                let mut row = vec![Some(r.fid), Some(r.psnr_mean), Some(r.ssim_mean)];
                row.extend(classes.iter().map(|c| r.dsc_per_class.get(*c).map(|v| 100.0 * v)));
                row
            })
            .collect();
        let best = (0..header.len())
            .map(|col| {
                let lower_is_better = col == 0;
                rows.iter()
                    .enumerate()
                    .filter_map(|(i, r)| r[col].map(|v| (i, v)))
                    .reduce(|a, b| {
                        let better = if lower_is_better { b.1 < a.1 } else { b.1 > a.1 };
                        if better {
                            b
                        } else {
                            a
                        }
                    })
                    .map(|(i, _)| i)
            })
            .collect();
        let mut footnotes = Vec::new();
        let absent: Vec<&str> = table_class_order()
            .into_iter()
            .filter(|c| !classes.contains(c))
            .filter(|c| reports.iter().all(|r| r.absent_classes.iter().any(|a| a == c)))
            .collect();
        if !absent.is_empty() {
            footnotes.push(format!("not present in any ground-truth mask: {}", absent.join(", ")));
        }
        if reports.iter().any(|r| r.fid_regularized) {
            footnotes.push(format!("FID covariances regularised with {FID_REGULARIZER}*I"));
        }
        if reports.iter().any(|r| r.dsc_grouping == DiceGrouping::Subject) {
            footnotes.push("DSC pooled per subject".into());
        }
        Self {
            header,
            rows,
            labels: reports.iter().map(|r| r.label.clone()).collect(),
            best,
            footnotes,
        }
    }

    fn cell(&self, row: usize, col: usize, star: bool) -> String {
        match self.rows[row][col] {
            None => "-".into(),
            Some(v) => {
                let digits = if col == 2 { 4 } else { 2 };
                let mark = if star && self.rows.len() > 1 && self.best[col] == Some(row) { "*" } else { "" };
                format!("{v:.digits$}{mark}")
            }
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for h in &self.header {
            out.push(',');
            out.push_str(h);
        }
        out.push('\n');
        for (r, label) in self.labels.iter().enumerate() {
            out.push_str(label);
            for c in 0..self.header.len() {
                out.push(',');
                out.push_str(&self.cell(r, c, false));
            }
            out.push('\n');
        }
        out
    }

    /// Fixed-width columns; `*` marks the best value in each column.
    pub fn to_text(&self) -> String {
        let mut cols: Vec<Vec<String>> = Vec::new();
        let mut first = vec!["method".to_string()];
        first.extend(self.labels.iter().cloned());
        cols.push(first);
        for c in 0..self.header.len() {
            let mut col = vec![self.header[c].clone()];
            col.extend((0..self.rows.len()).map(|r| self.cell(r, c, true)));
            cols.push(col);
        }
        let widths: Vec<usize> = cols.iter().map(|c| c.iter().map(String::len).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for line in 0..=self.rows.len() {
            let cells: Vec<String> = cols
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, &w))| if i == 0 { format!("{:<w$}", c[line]) } else { format!("{:>w$}", c[line]) })
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        }
        for (i, f) in self.footnotes.iter().enumerate() {
            let _ = writeln!(out, "[{}] {f}", i + 1);
        }
        out
    }
}
