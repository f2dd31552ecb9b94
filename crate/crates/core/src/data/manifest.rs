use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::png;
use super::preprocess::{resize_pair, Window};
use super::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::nn::{Element, Tensor};
use crate::unet::{ConditioningBundle, Variant};

/// Offset between stored 16-bit values and Hounsfield units for raw slices.
pub const HU_OFFSET: f32 = 1024.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[serde(alias = "TRAIN")]
    Train,
    #[serde(alias = "TEST")]
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split `{s}` (expected train or test)"))),
        }
    }
}

/// One preprocessed slice: windowed image in `[0, 1]` and its label map.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceRecord {
    pub image: Array2<f32>,
    pub mask: Array2<u8>,
    pub subject_id: String,
    pub slice_index: usize,
    pub split: Split,
}

impl SliceRecord {
    pub fn stem(&self) -> String {
        format!("{}_{:04}", self.subject_id, self.slice_index)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.image.dim() != self.mask.dim() {
            return Err(Error::Shape(format!(
                "{}: image {:?} and mask {:?} differ",
                self.stem(),
                self.image.dim(),
                self.mask.dim()
            )));
        }
        if let Some(v) = self.image.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("{}: image value {v} outside [0, 1]", self.stem())));
        }
        if let Some(((row, col), &label)) = self.mask.indexed_iter().find(|(_, &l)| l as usize >= num_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                row,
                col,
                classes: num_classes,
            });
        }
        Ok(())
    }
}

/// One line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub slice_index: usize,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
    pub split: Split,
    /// Image stores windowed `[0, 1]` values scaled to 16 bits; otherwise it
    /// stores Hounsfield units plus 1024.
    #[serde(default)]
    pub prewindowed: bool,
}

impl ManifestEntry {
    pub fn stem(&self) -> String {
        format!("{}_{:04}", self.subject_id, self.slice_index)
    }
}

fn check_subject_splits<'a>(items: impl Iterator<Item = (&'a str, Split)>) -> Result<()> {
    let mut seen: HashMap<&str, Split> = HashMap::new();
    for (subject, split) in items {
        if let Some(prev) = seen.insert(subject, split) {
            if prev != split {
                return Err(Error::Data(format!("subject {subject} appears in both splits")));
            }
        }
    }
    Ok(())
}

/// Writes records as PNGs under `root/{split}/{images,masks}/` plus
/// `root/manifest.jsonl`; returns the manifest path.
pub fn write_dataset(records: &[SliceRecord], root: &Path) -> Result<PathBuf> {
    check_subject_splits(records.iter().map(|r| (r.subject_id.as_str(), r.split)))?;
    let mut lines = String::new();
    let mut stems = std::collections::HashSet::new();
    for r in records {
        r.validate(NUM_CLASSES)?;
        let stem = r.stem();
        if !stems.insert(stem.clone()) {
            return Err(Error::Data(format!("duplicate slice {stem}")));
        }
        let image_rel = PathBuf::from(r.split.to_string()).join("images").join(format!("{stem}.png"));
        let mask_rel = PathBuf::from(r.split.to_string()).join("masks").join(format!("{stem}.png"));
        png::write_gray16(&root.join(&image_rel), &png::unit_to_u16(&r.image))?;
        png::write_labels(&root.join(&mask_rel), &r.mask)?;
        let entry = ManifestEntry {
            subject_id: r.subject_id.clone(),
            slice_index: r.slice_index,
            image_path: image_rel,
            mask_path: mask_rel,
            split: r.split,
            prewindowed: true,
        };
        lines.push_str(&serde_json::to_string(&entry)?);
        lines.push('\n');
    }
    let path = root.join("manifest.jsonl");
    let mut f = std::fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    f.write_all(lines.as_bytes())
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}

/// Slices listed in a manifest, read from disk on demand or held in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    entries: Vec<ManifestEntry>,
    root: PathBuf,
    num_classes: usize,
    resize_to: Option<usize>,
    window: Window,
    cache: Option<Vec<SliceRecord>>,
}

impl Dataset {
    /// Parses and validates a JSON-lines manifest. Relative paths resolve
    /// against the manifest's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let manifest_err = |line: usize, reason: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            reason,
        };
        let mut entries = Vec::new();
        let mut stems = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| manifest_err(i + 1, e.to_string()))?;
            if entry.subject_id.is_empty() {
                return Err(manifest_err(i + 1, "empty subject_id".into()));
            }
            for p in [&entry.image_path, &entry.mask_path] {
                if !root.join(p).is_file() {
                    return Err(manifest_err(i + 1, format!("missing file {}", root.join(p).display())));
                }
            }
            if let Some(prev) = stems.insert(entry.stem(), i + 1) {
                return Err(manifest_err(i + 1, format!("slice {} already listed on line {prev}", entry.stem())));
            }
            entries.push(entry);
        }
        check_subject_splits(entries.iter().map(|e| (e.subject_id.as_str(), e.split)))
            .map_err(|e| manifest_err(0, e.to_string()))?;
        Ok(Self {
            entries,
            root,
            num_classes: NUM_CLASSES,
            resize_to: None,
            window: Window::default(),
            cache: None,
        })
    }

    /// An in-memory dataset; nothing touches the filesystem.
    pub fn from_records(records: Vec<SliceRecord>) -> Result<Self> {
        check_subject_splits(records.iter().map(|r| (r.subject_id.as_str(), r.split)))?;
        for r in &records {
            r.validate(NUM_CLASSES)?;
        }
        let entries = records
            .iter()
            .map(|r| ManifestEntry {
                subject_id: r.subject_id.clone(),
                slice_index: r.slice_index,
                image_path: PathBuf::new(),
                mask_path: PathBuf::new(),
                split: r.split,
                prewindowed: true,
            })
            .collect();
        Ok(Self {
            entries,
            root: PathBuf::new(),
            num_classes: NUM_CLASSES,
            resize_to: None,
            window: Window::default(),
            cache: Some(records),
        })
    }

    /// HU window for entries that are not prewindowed.
    pub fn with_window(mut self, window: Window) -> Self {
        self.window = window;
        self
    }

    /// Resizes every slice to `size × size` on read.
    pub fn with_resize(mut self, size: usize) -> Self {
        self.resize_to = Some(size);
        if let Some(cache) = self.cache.take() {
            self.cache = Some(
                cache
                    .into_iter()
                    .map(|mut r| {
                        if let Ok((i, m)) = resize_pair(&r.image, &r.mask, size) {
                            r.image = i;
                            r.mask = m;
                        }
                        r
                    })
                    .collect(),
            );
        }
        self
    }

    /// Reads every slice into memory once.
    pub fn preload(&mut self) -> Result<()> {
        if self.cache.is_none() {
            let records = (0..self.len()).map(|i| self.read(i)).collect::<Result<Vec<_>>>()?;
            self.cache = Some(records);
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Positions of the entries in `split`, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.entries[i].split == split).collect()
    }

    pub fn subjects(&self, split: Split) -> Vec<String> {
        let mut counts: BTreeMap<&str, ()> = BTreeMap::new();
        for e in self.entries.iter().filter(|e| e.split == split) {
            counts.insert(&e.subject_id, ());
        }
        counts.keys().map(|s| s.to_string()).collect()
    }

    fn read(&self, i: usize) -> Result<SliceRecord> {
        let entry = &self.entries[i];
        let image_path = self.root.join(&entry.image_path);
        let raw = png::read_gray16(&image_path)?;
        let image = if entry.prewindowed {
            raw.mapv(|v| v as f32 / 65535.0)
        } else {
            raw.mapv(|v| self.window.apply(v as f32 - HU_OFFSET))
        };
        let mask = png::read_labels(&self.root.join(&entry.mask_path))?;
        let (image, mask) = match self.resize_to {
            Some(size) => resize_pair(&image, &mask, size)?,
            None => (image, mask),
        };
        let record = SliceRecord {
            image,
            mask,
            subject_id: entry.subject_id.clone(),
            slice_index: entry.slice_index,
            split: entry.split,
        };
        record.validate(self.num_classes)?;
        Ok(record)
    }

    pub fn record(&self, i: usize) -> Result<SliceRecord> {
        match &self.cache {
            Some(c) => c.get(i).cloned().ok_or_else(|| Error::Data(format!("no slice at index {i}"))),
            None => self.read(i),
        }
    }

    /// Stacks the given slices into a training batch for `variant`.
    pub fn batch<T: Element>(&self, indices: &[usize], variant: Variant) -> Result<Batch<T>> {
        let records = indices.iter().map(|&i| self.record(i)).collect::<Result<Vec<_>>>()?;
        Batch::from_records(indices.to_vec(), &records, self.num_classes, variant)
    }

    /// One epoch over `split` in the order fixed by `shuffle_seed`.
    pub fn iterate<'a, T: Element>(
        &'a self,
        split: Split,
        batch_size: usize,
        shuffle_seed: u64,
        variant: Variant,
    ) -> Result<impl Iterator<Item = Result<Batch<T>>> + 'a> {
        let sampler = BatchSampler::new(self.split_indices(split), batch_size, shuffle_seed)?;
        Ok(sampler
            .epoch(0)
            .into_iter()
            .map(move |idx| self.batch(&idx, variant)))
    }
}

/// Images scaled to `[-1, 1]` together with their conditioning.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    /// Dataset positions of the items.
    pub indices: Vec<usize>,
    /// `[N, 1, H, W]`.
    pub images: Tensor<T>,
    pub masks: Vec<Array2<u8>>,
    pub cond: ConditioningBundle<T>,
}

impl<T: Element> Batch<T> {
    pub fn from_records(indices: Vec<usize>, records: &[SliceRecord], num_classes: usize, variant: Variant) -> Result<Self> {
        let images = records
            .iter()
            .map(|r| {
                let (h, w) = r.image.dim();
                let data = r.image.iter().map(|&v| T::from_f64_lossy(v as f64 * 2.0 - 1.0)).collect();
                Tensor::from_vec(&[1, h, w], data)
            })
            .collect::<Result<Vec<_>>>()?;
        let masks: Vec<Array2<u8>> = records.iter().map(|r| r.mask.clone()).collect();
        Ok(Self {
            indices,
            images: Tensor::stack(&images)?,
            cond: ConditioningBundle::from_masks(&masks, num_classes, variant)?,
            masks,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Deterministic batching: epoch `e` visits a permutation fixed by
/// `(shuffle_seed, e)`, in batches whose last may be short.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    indices: Vec<usize>,
    batch_size: usize,
    shuffle_seed: u64,
}

impl BatchSampler {
    pub fn new(indices: Vec<usize>, batch_size: usize, shuffle_seed: u64) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::param("batch_size", "must be positive"));
        }
        Ok(Self {
            indices,
            batch_size,
            shuffle_seed,
        })
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.indices.len().div_ceil(self.batch_size)
    }

    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.shuffle_seed);
        rng.set_stream(epoch);
        let mut order = self.indices.clone();
        order.shuffle(&mut rng);
        order
    }

    pub fn epoch(&self, epoch: u64) -> Vec<Vec<usize>> {
        self.epoch_order(epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect()
    }

    /// The batch consumed at a global step (0-based); `None` for an empty split.
    pub fn batch_at(&self, step: u64) -> Option<Vec<usize>> {
        let per_epoch = self.batches_per_epoch() as u64;
        if per_epoch == 0 {
            return None;
        }
        let order = self.epoch_order(step / per_epoch);
        let start = (step % per_epoch) as usize * self.batch_size;
        Some(order[start..(start + self.batch_size).min(order.len())].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_toy_dataset, ToyPhantomConfig};

    fn toy() -> Vec<SliceRecord> {
        generate_toy_dataset(&ToyPhantomConfig {
            subjects: 4,
            slices_per_subject: 3,
            size: 32,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn write_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let records = toy();
        let manifest = write_dataset(&records, dir.path()).unwrap();
        assert!(dir.path().join("train/images/toy000_0000.png").is_file());
        assert!(dir.path().join("test/masks/toy003_0002.png").is_file());
        let ds = Dataset::load(&manifest).unwrap();
        assert_eq!(ds.len(), records.len());
        assert_eq!(ds.split_indices(Split::Test).len(), 3);
        for (i, r) in records.iter().enumerate() {
            let loaded = ds.record(i).unwrap();
            assert_eq!(loaded.mask, r.mask);
            let err = loaded.image.iter().zip(r.image.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max);
            assert!(err <= 0.5 / 65535.0 + 1e-7);
        }
    }

    #[test]
    fn hu_images_are_windowed() {
        let dir = tempfile::tempdir().unwrap();
        let hu = Array2::from_shape_vec((1, 3), vec![-160.0f32 + HU_OFFSET, 40.0 + HU_OFFSET, 240.0 + HU_OFFSET]).unwrap();
        png::write_gray16(&dir.path().join("i.png"), &hu.mapv(|v| v as u16)).unwrap();
        png::write_labels(&dir.path().join("m.png"), &Array2::from_elem((1, 3), 1u8)).unwrap();
        let line = r#"{"subject_id":"s","slice_index":0,"image_path":"i.png","mask_path":"m.png","split":"TRAIN","prewindowed":false}"#;
        std::fs::write(dir.path().join("m.jsonl"), line).unwrap();
        let ds = Dataset::load(&dir.path().join("m.jsonl")).unwrap();
        assert_eq!(ds.record(0).unwrap().image.as_slice().unwrap(), &[0.0, 0.5, 1.0]);
    }

    #[test]
    fn bad_manifests_are_descriptive() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        assert!(matches!(Dataset::load(&path), Err(Error::Io { .. })));
        std::fs::write(&path, "{\"subject_id\":\"a\"}\n").unwrap();
        assert!(matches!(Dataset::load(&path), Err(Error::Manifest { line: 1, .. })));
        let line = r#"{"subject_id":"a","slice_index":0,"image_path":"nope.png","mask_path":"nope.png","split":"train"}"#;
        std::fs::write(&path, format!("\n{line}\n")).unwrap();
        match Dataset::load(&path) {
            Err(Error::Manifest { line, reason, .. }) => {
                assert_eq!(line, 2);
                assert!(reason.contains("missing file"));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn subject_split_leak_is_rejected() {
        let mut records = toy();
        records[0].split = Split::Test;
        assert!(Dataset::from_records(records).is_err());
    }

    #[test]
    fn batches_cover_split_and_are_deterministic() {
        let ds = Dataset::from_records(toy()).unwrap();
        let order = |seed| {
            ds.iterate::<f32>(Split::Train, 4, seed, Variant::MaskGuided)
                .unwrap()
                .map(|b| b.unwrap().indices)
                .collect::<Vec<_>>()
        };
        let a = order(3);
        assert_eq!(a, order(3));
        assert_eq!(a.len(), 3);
        let mut all: Vec<usize> = a.concat();
        all.sort();
        assert_eq!(all, ds.split_indices(Split::Train));
    }

    #[test]
    fn short_and_empty_batches() {
        let ds = Dataset::from_records(toy()).unwrap();
        let batches: Vec<_> = ds
            .iterate::<f32>(Split::Test, 100, 0, Variant::EdgeGuided)
            .unwrap()
            .collect::<Result<_>>()
            .unwrap();
        assert_eq!(batches.len(), 1);
        let b = &batches[0];
        assert_eq!(b.images.shape(), &[3, 1, 32, 32]);
        assert_eq!(b.cond.mask_onehot.shape(), &[3, NUM_CLASSES, 32, 32]);
        assert!(b.cond.edge_map.is_some());
        assert!(b.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));

        let train_only: Vec<SliceRecord> = toy().into_iter().filter(|r| r.split == Split::Train).collect();
        let ds = Dataset::from_records(train_only).unwrap();
        assert_eq!(ds.iterate::<f32>(Split::Test, 4, 0, Variant::Concat).unwrap().count(), 0);
        let sampler = BatchSampler::new(vec![], 4, 0).unwrap();
        assert_eq!(sampler.batch_at(0), None);
    }

    #[test]
    fn batch_at_walks_epochs() {
        let sampler = BatchSampler::new((0..10).collect(), 4, 9).unwrap();
        let flat: Vec<Vec<usize>> = (0..2).flat_map(|e| sampler.epoch(e)).collect();
        for (step, b) in flat.iter().enumerate() {
            assert_eq!(sampler.batch_at(step as u64).as_ref(), Some(b));
        }
        assert_ne!(sampler.epoch_order(0), sampler.epoch_order(1));
    }
}
