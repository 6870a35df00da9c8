//! Per-image feature records: synthetic planted-part generation, feature
//! space augmentation, the binary `APLF` file format and the labeled /
//! unlabeled split.

mod augment;
mod io;
mod split;
mod synth;

pub use augment::{augment, background_patch};
pub use io::{load_dataset, read_dataset, save_dataset, write_dataset, Manifest, MAGIC, VERSION};
pub use split::{split_gcd, GcdSplit};
pub use synth::{synth_generate, GroundTruthParts, ImageParts, SynthSpec};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// Tolerance on attention row sums.
pub const ATTENTION_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("record {record} (byte offset {offset}): {reason}")]
    Inconsistent {
        record: usize,
        offset: usize,
        reason: String,
    },
    #[error(
        "file truncated at byte offset {offset}: needed {needed} more bytes, {available} available"
    )]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("class {class} has {count} images; at least 2 are needed to split")]
    ClassTooSmall { class: usize, count: usize },
    #[error("labeled fraction must lie in (0, 1), got {0}")]
    BadFraction(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

/// Dataset-wide token geometry: patches `N`, channels `C`, heads `M`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub patches: usize,
    pub channels: usize,
    pub heads: usize,
}

/// One image (or one augmented view of it) as seen by the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub image_id: u32,
    /// 0 for the canonical view, >= 1 for augmentations.
    pub view_id: u32,
    /// `N×C`.
    pub patch_features: Tensor,
    /// `1×C`.
    pub cls_feature: Tensor,
    /// `M×N`, rows non-negative and summing to one.
    pub head_attention: Tensor,
    /// Ground-truth class; kept for evaluation even when hidden from training.
    pub label: Option<usize>,
    pub is_labeled: bool,
}

impl FeatureRecord {
    /// The label as training code may see it: present only for labeled records.
    pub fn visible_label(&self) -> Option<usize> {
        if self.is_labeled {
            self.label
        } else {
            None
        }
    }

    pub fn dims(&self) -> Dims {
        Dims {
            patches: self.patch_features.rows(),
            channels: self.patch_features.cols(),
            heads: self.head_attention.rows(),
        }
    }

    /// Checks shape, label and attention invariants; returns the first violation.
    pub fn check(&self, dims: Dims, class_count: usize) -> Result<(), String> {
        let want = |t: &Tensor, r: usize, c: usize, what: &str| -> Result<(), String> {
            if t.shape() != [r, c] {
                return Err(format!(
                    "{what} has shape {:?}, expected [{r}, {c}]",
                    t.shape()
                ));
            }
            if !t.is_finite() {
                return Err(format!("{what} contains non-finite values"));
            }
            Ok(())
        };
        want(
            &self.patch_features,
            dims.patches,
            dims.channels,
            "patch_features",
        )?;
        want(&self.cls_feature, 1, dims.channels, "cls_feature")?;
        want(
            &self.head_attention,
            dims.heads,
            dims.patches,
            "head_attention",
        )?;
        if self.is_labeled && self.label.is_none() {
            return Err("labeled record without a label".into());
        }
        if let Some(l) = self.label {
            if l >= class_count {
                return Err(format!("label {l} not below class count {class_count}"));
            }
        }
        for m in 0..dims.heads {
            let row = self.head_attention.row(m);
            if row.iter().any(|&a| a < 0.0) {
                return Err(format!("attention row {m} has negative entries"));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ATTENTION_SUM_TOL {
                return Err(format!("attention row {m} sums to {s}"));
            }
        }
        Ok(())
    }
}

/// An immutable collection of records sharing one geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub dims: Dims,
    pub class_count: usize,
    pub known_class_count: usize,
    pub records: Vec<FeatureRecord>,
}

impl Dataset {
    pub fn validate(&self) -> Result<(), FeatureError> {
        if self.known_class_count >= self.class_count {
            return Err(FeatureError::Inconsistent {
                record: 0,
                offset: 0,
                reason: format!(
                    "known class count {} must be below class count {}",
                    self.known_class_count, self.class_count
                ),
            });
        }
        for (i, r) in self.records.iter().enumerate() {
            r.check(self.dims, self.class_count)
                .map_err(|reason| FeatureError::Inconsistent {
                    record: i,
                    offset: 0,
                    reason,
                })?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Rounds through `f32` so that values survive the on-disk format unchanged.
pub(crate) fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}
