//! Conversion of per-slice source PNGs into a manifest-backed dataset.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::manifest::{write_dataset, SliceRecord, Split, HU_OFFSET};
use super::preprocess::{derive_body_class, resize_pair, BodyParams, Window};
use super::{organ_label_from_source, png};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct IngestOptions {
    /// Source images hold `HU + 1024`; otherwise they are already windowed.
    pub hounsfield: bool,
    pub window: Window,
    pub body: BodyParams,
    /// Output side length; `None` keeps the source size.
    pub size: Option<usize>,
    /// Share of subjects (by sorted id, taken from the end) held out for test.
    pub test_fraction: f64,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self {
            hounsfield: true,
            window: Window::default(),
            body: BodyParams::default(),
            size: None,
            test_fraction: 0.25,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub manifest: PathBuf,
    pub slices: usize,
    pub subjects: usize,
    pub test_subjects: Vec<String>,
    /// Slices dropped because no body region could be found.
    pub skipped_empty: Vec<String>,
}

/// Held-out subjects for `n` subjects: `floor(n · fraction)`, at least one
/// when there are two or more subjects and the fraction is positive.
pub fn test_subject_count(n: usize, fraction: f64) -> usize {
    if n < 2 || fraction <= 0.0 {
        return 0;
    }
    ((n as f64 * fraction).floor() as usize).clamp(1, n - 1)
}

fn parse_stem(stem: &str) -> Option<(String, usize)> {
    let (subject, idx) = stem.rsplit_once('_')?;
    if subject.is_empty() {
        return None;
    }
    Some((subject.to_string(), idx.parse().ok()?))
}

/// Reads `images/<subject>_<slice>.png` with matching `masks/<same>.png`
/// (source organ labels 0..=15), windows, derives the body class, resizes
/// and writes the dataset under `out`.
pub fn ingest(images: &Path, masks: &Path, out: &Path, options: &IngestOptions) -> Result<IngestSummary> {
    let listing = std::fs::read_dir(images).map_err(|e| Error::io(format!("listing {}", images.display()), e))?;
    let mut sources = BTreeMap::new();
    for entry in listing {
        let path = entry.map_err(|e| Error::io(format!("listing {}", images.display()), e))?.path();
        if !path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let key = parse_stem(&stem).ok_or_else(|| {
            Error::Data(format!("{}: expected a <subject>_<slice>.png name", path.display()))
        })?;
        let mask = masks.join(format!("{stem}.png"));
        if !mask.is_file() {
            return Err(Error::Data(format!("{}: no mask at {}", path.display(), mask.display())));
        }
        sources.insert(key, (path, mask));
    }
    if sources.is_empty() {
        return Err(Error::Data(format!("no PNG slices in {}", images.display())));
    }

    let subjects: Vec<String> = {
        let mut s: Vec<String> = sources.keys().map(|(s, _)| s.clone()).collect();
        s.dedup();
        s
    };
    let n_test = test_subject_count(subjects.len(), options.test_fraction);
    let test_subjects = subjects[subjects.len() - n_test..].to_vec();

    let mut records = Vec::with_capacity(sources.len());
    let mut skipped_empty = Vec::new();
    for ((subject, slice_index), (image_path, mask_path)) in sources {
        let raw = png::read_gray16(&image_path)?;
        let image = if options.hounsfield {
            raw.mapv(|v| options.window.apply(v as f32 - HU_OFFSET))
        } else {
            raw.mapv(|v| v as f32 / 65535.0)
        };
        let source = png::read_labels(&mask_path)?;
        if source.dim() != image.dim() {
            return Err(Error::Shape(format!(
                "{}: mask {:?} does not match image {:?}",
                mask_path.display(),
                source.dim(),
                image.dim()
            )));
        }
        let mut organs = source.clone();
        for ((row, col), v) in organs.indexed_iter_mut() {
            *v = organ_label_from_source(*v).ok_or_else(|| Error::LabelOutOfRange {
                label: source[[row, col]],
                row,
                col,
                classes: 16,
            })?;
        }
        let Some(mask) = derive_body_class(&image, &organs, &options.body)? else {
            log::warn!("{}: no body region, skipped", image_path.display());
            skipped_empty.push(format!("{subject}_{slice_index:04}"));
            continue;
        };
        let (image, mask) = match options.size {
            Some(size) => resize_pair(&image, &mask, size)?,
            None => (image, mask),
        };
        let split = if test_subjects.contains(&subject) { Split::Test } else { Split::Train };
        records.push(SliceRecord {
            image,
            mask,
            subject_id: subject,
            slice_index,
            split,
        });
    }
    let manifest = write_dataset(&records, out)?;
    Ok(IngestSummary {
        manifest,
        slices: records.len(),
        subjects: subjects.len(),
        test_subjects,
        skipped_empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, BODY, LIVER};
    use ndarray::Array2;

    #[test]
    fn split_counts() {
        assert_eq!(test_subject_count(0, 0.25), 0);
        assert_eq!(test_subject_count(1, 0.25), 0);
        assert_eq!(test_subject_count(2, 0.25), 1);
        assert_eq!(test_subject_count(8, 0.25), 2);
        assert_eq!(test_subject_count(8, 0.0), 0);
        assert_eq!(test_subject_count(3, 1.0), 2);
    }

    #[test]
    fn converts_hounsfield_slices() {
        let dir = tempfile::tempdir().unwrap();
        let (img_dir, mask_dir) = (dir.path().join("img"), dir.path().join("lab"));
        for subject in ["a", "b", "c", "d"] {
            for slice in 0..2 {
                // Soft tissue disk (HU 40) on air, with a source liver label (6).
                let hu = Array2::from_shape_fn((16, 16), |(y, x)| {
                    let inside = (y as f32 - 7.5).powi(2) + (x as f32 - 7.5).powi(2) < 36.0;
                    if inside { 40.0 + HU_OFFSET } else { -1000.0 + HU_OFFSET }
                });
                let labels = Array2::from_shape_fn((16, 16), |(y, x)| if (6..9).contains(&y) && (6..9).contains(&x) { 6 } else { 0 });
                let stem = format!("{subject}_{slice}");
                png::write_gray16(&img_dir.join(format!("{stem}.png")), &hu.mapv(|v| v as u16)).unwrap();
                png::write_labels(&mask_dir.join(format!("{stem}.png")), &labels).unwrap();
            }
        }
        // An all-air slice is dropped.
        png::write_gray16(&img_dir.join("d_9.png"), &Array2::from_elem((16, 16), 24u16)).unwrap();
        png::write_labels(&mask_dir.join("d_9.png"), &Array2::zeros((16, 16))).unwrap();

        let out = dir.path().join("out");
        let summary = ingest(&img_dir, &mask_dir, &out, &IngestOptions::default()).unwrap();
        assert_eq!(summary.slices, 8);
        assert_eq!(summary.subjects, 4);
        assert_eq!(summary.test_subjects, vec!["d".to_string()]);
        assert_eq!(summary.skipped_empty, vec!["d_0009".to_string()]);
        let ds = Dataset::load(&summary.manifest).unwrap();
        assert_eq!(ds.split_indices(Split::Test).len(), 2);
        let rec = ds.record(0).unwrap();
        assert_eq!(rec.mask[[7, 7]], LIVER);
        assert_eq!(rec.mask[[7, 3]], BODY);
        assert_eq!(rec.mask[[0, 0]], 0);
        assert!((rec.image[[7, 3]] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn rejects_unpaired_or_unparseable_names() {
        let dir = tempfile::tempdir().unwrap();
        let (img_dir, mask_dir) = (dir.path().join("img"), dir.path().join("lab"));
        png::write_gray16(&img_dir.join("a_0.png"), &Array2::zeros((8, 8))).unwrap();
        std::fs::create_dir_all(&mask_dir).unwrap();
        assert!(ingest(&img_dir, &mask_dir, &dir.path().join("o"), &IngestOptions::default()).is_err());
        png::write_labels(&mask_dir.join("a_0.png"), &Array2::zeros((8, 8))).unwrap();
        png::write_gray16(&img_dir.join("noslice.png"), &Array2::zeros((8, 8))).unwrap();
        assert!(ingest(&img_dir, &mask_dir, &dir.path().join("o"), &IngestOptions::default()).is_err());
    }
}
