//! Slice preprocessing, label handling, dataset manifests and the toy phantom
//! generator.

mod ingest;
mod manifest;
mod masks;
mod preprocess;
pub mod png;
mod toy;

pub use ingest::{ingest, test_subject_count, IngestOptions, IngestSummary};
pub use manifest::{write_dataset, HU_OFFSET, Batch, BatchSampler, Dataset, ManifestEntry, SliceRecord, Split};
pub use masks::{mask_to_edges, mask_to_onehot, onehot_to_mask};
pub use preprocess::{derive_body_class, resize_pair, window_ct, BodyParams, Window};
pub use toy::{generate_toy_dataset, toy_band, ToyPhantomConfig, TOY_BACKGROUND, TOY_BANDS};

/// Label 0: outside the body.
pub const BACKGROUND: u8 = 0;
/// Label 1: body tissue not covered by an organ label.
pub const BODY: u8 = 1;
/// Background, body and the fifteen annotated organs.
pub const NUM_CLASSES: usize = 17;

/// Class names indexed by label value.
pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "background",
    "body",
    "spleen",
    "kidney_right",
    "kidney_left",
    "gallbladder",
    "esophagus",
    "liver",
    "stomach",
    "aorta",
    "inferior_vena_cava",
    "pancreas",
    "adrenal_right",
    "adrenal_left",
    "duodenum",
    "bladder",
    "prostate_uterus",
];

pub const SPLEEN: u8 = 2;
pub const KIDNEY_RIGHT: u8 = 3;
pub const KIDNEY_LEFT: u8 = 4;
pub const LIVER: u8 = 7;
pub const STOMACH: u8 = 8;
pub const AORTA: u8 = 9;

/// Label of a class name, if it is part of the schema.
pub fn class_index(name: &str) -> Option<u8> {
    CLASS_NAMES.iter().position(|n| *n == name).map(|i| i as u8)
}

/// Maps a source organ label (0 = unlabeled, 1..=15 in the schema's organ
/// order) to a schema label. Unlabeled pixels map to background.
pub fn organ_label_from_source(label: u8) -> Option<u8> {
    match label {
        0 => Some(BACKGROUND),
        1..=15 => Some(label + 1),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn schema_layout() {
        let unique: HashSet<_> = CLASS_NAMES.iter().collect();
        assert_eq!(unique.len(), NUM_CLASSES);
        assert_eq!(CLASS_NAMES[BACKGROUND as usize], "background");
        assert_eq!(CLASS_NAMES[BODY as usize], "body");
        assert_eq!(class_index("liver"), Some(LIVER));
        assert_eq!(class_index("aorta"), Some(AORTA));
        assert_eq!(class_index("lung"), None);
    }

    #[test]
    fn source_labels_shift_past_body() {
        assert_eq!(organ_label_from_source(0), Some(BACKGROUND));
        assert_eq!(organ_label_from_source(1), Some(SPLEEN));
        assert_eq!(organ_label_from_source(6), Some(LIVER));
        assert_eq!(organ_label_from_source(15), Some(16));
        assert_eq!(organ_label_from_source(16), None);
    }
}
