use std::collections::BTreeMap;

use super::{Dataset, FeatureError, FeatureRecord};

/// Labeled (`D_l`) and unlabeled (`D_u`) partitions of a dataset.
#[derive(Clone, Debug)]
pub struct GcdSplit {
    pub labeled: Vec<FeatureRecord>,
    pub unlabeled: Vec<FeatureRecord>,
    pub known_classes: Vec<usize>,
    pub class_count: usize,
}

/// Known classes are `0..known_class_count`. Within each known class the
/// first `round(labeled_frac * n)` images (clamped to `1..n-1`) become
/// labeled; everything else, including every novel-class image, goes to
/// the unlabeled set with its label retained for evaluation only.
///
/// Records sharing an `image_id` always land on the same side.
pub fn split_gcd(ds: &Dataset, labeled_frac: f64) -> Result<GcdSplit, FeatureError> {
    if !(labeled_frac > 0.0 && labeled_frac < 1.0) {
        return Err(FeatureError::BadFraction(labeled_frac));
    }
    let mut per_class: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    for r in &ds.records {
        if let Some(l) = r.label {
            let ids = per_class.entry(l).or_default();
            if !ids.contains(&r.image_id) {
                ids.push(r.image_id);
            }
        }
    }
    let mut labeled_ids = std::collections::HashSet::new();
    for class in 0..ds.known_class_count {
        let ids = per_class.get(&class).map(Vec::as_slice).unwrap_or(&[]);
        if ids.len() < 2 {
            return Err(FeatureError::ClassTooSmall {
                class,
                count: ids.len(),
            });
        }
        let take = ((labeled_frac * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
        labeled_ids.extend(ids[..take].iter().copied());
    }

    let (mut labeled, mut unlabeled) = (Vec::new(), Vec::new());
    for r in &ds.records {
        let mut r = r.clone();
        r.is_labeled = labeled_ids.contains(&r.image_id);
        if r.is_labeled {
            labeled.push(r);
        } else {
            unlabeled.push(r);
        }
    }
    Ok(GcdSplit {
        labeled,
        unlabeled,
        known_classes: (0..ds.known_class_count).collect(),
        class_count: ds.class_count,
    })
}

impl GcdSplit {
    /// Uses the `is_labeled` flags already present in a dataset.
    pub fn from_flags(ds: &Dataset) -> Self {
        let (labeled, unlabeled) = ds.records.iter().cloned().partition(|r| r.is_labeled);
        Self {
            labeled,
            unlabeled,
            known_classes: (0..ds.known_class_count).collect(),
            class_count: ds.class_count,
        }
    }

    /// Classes appearing with labels in `D_l` and with (hidden) labels in `D_u`.
    pub fn label_spaces(&self) -> (Vec<usize>, Vec<usize>) {
        let collect = |rs: &[FeatureRecord]| {
            let mut v: Vec<usize> = rs.iter().filter_map(|r| r.label).collect();
            v.sort_unstable();
            v.dedup();
            v
        };
        (collect(&self.labeled), collect(&self.unlabeled))
    }
}
