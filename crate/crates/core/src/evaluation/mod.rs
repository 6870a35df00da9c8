//! Clustering accuracy under the All/Known/Novel protocol, planted-part
//! recovery metrics, and the discriminative-part similarity report.

mod matching;

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{FeatureRecord, GroundTruthParts};
use crate::tensor::{cosine, Graph, Tensor};
use crate::training::{pool_parts, ModelState, TrainConfig};

/// Failures during evaluation.
#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
    #[error(transparent)]
    Objective(#[from] crate::objectives::ObjectiveError),
    #[error("{0}")]
    Mismatch(String),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

pub use matching::{
    adjusted_rand_index, clustering_acc, hungarian_match, min_cost_assignment, Accuracy,
    ConfusionMatrix, Matching,
};

/// Evaluation-mode output for one record.
#[derive(Clone, Debug, PartialEq)]
pub struct RecordEval {
    pub image_id: u32,
    pub view_id: u32,
    /// Ground-truth label, if the record carries one.
    pub label: Option<usize>,
    pub pooled: Vec<f64>,
    pub prediction: usize,
    pub parts: Option<PartSnapshot>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartSnapshot {
    pub winners: Vec<usize>,
    pub empty: Vec<bool>,
    pub features: Tensor,
}

/// Noise-free forward pass of every record, in parallel.
pub fn embed_records(
    state: &ModelState,
    records: &[FeatureRecord],
    cfg: &TrainConfig,
) -> Result<Vec<RecordEval>> {
    records
        .par_iter()
        .map(|r| {
            let g = Graph::new();
            let model = state.bind_frozen(&g);
            let (pooled, parts) = if cfg.uses_parts() {
                let a = model.assign(r, None)?;
                let snap = PartSnapshot {
                    winners: a.winners.clone(),
                    empty: a.empty_mask.clone(),
                    features: (*a.part_features.value()).clone(),
                };
                (pool_parts(&a)?, Some(snap))
            } else {
                (model.cls(r)?, None)
            };
            let scores = crate::objectives::class_cosines(pooled, model.head.classifier)?;
            let s = scores.value();
            let mut best = 0;
            for (j, &v) in s.row(0).iter().enumerate() {
                if v > s.row(0)[best] {
                    best = j;
                }
            }
            Ok(RecordEval {
                image_id: r.image_id,
                view_id: r.view_id,
                label: r.label,
                pooled: pooled.value().data().to_vec(),
                prediction: best,
                parts,
            })
        })
        .collect()
}

/// Discovered-to-planted part agreement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartQuality {
    pub purity: f64,
    /// Mean over classes of the ARI between query and planted slot.
    pub ari: f64,
    /// ARI over all classes at once; also rewards a class-independent
    /// query-to-slot map.
    pub ari_global: f64,
    /// IoU of every matched (discovered, planted) pair, class by class.
    pub iou: Vec<f64>,
    /// `query_to_slot[class][t]`: planted slot matched to query `t`, if any.
    pub query_to_slot: Vec<Vec<Option<usize>>>,
}

/// Per class, discovered parts are Hungarian-matched to planted slots on
/// co-occurrence counts pooled over that class's images. Purity is the
/// share of non-background patches landing in their matched part. The ARI
/// is taken per class over the same pooled patches, then averaged.
pub fn part_quality(
    assignments: &[(u32, &[usize])],
    gt: &GroundTruthParts,
    parts: usize,
) -> PartQuality {
    let k = gt.parts_per_class;
    let classes = gt.class_prototypes.len();
    let mut co: Vec<Vec<Vec<u64>>> = vec![vec![vec![0; k]; parts]; classes];
    let mut labels: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); classes];
    for &(id, winners) in assignments {
        let Some(img) = gt.image(id) else { continue };
        for (p, slot) in img.patch_parts.iter().enumerate() {
            if let Some(s) = *slot {
                co[img.class][winners[p]][s] += 1;
                labels[img.class].0.push(winners[p]);
                labels[img.class].1.push(s);
            }
        }
    }
    let scored: Vec<f64> = labels
        .iter()
        .filter(|(p, _)| !p.is_empty())
        .map(|(p, t)| adjusted_rand_index(p, t))
        .collect();
    let (pred, truth): (Vec<usize>, Vec<usize>) = labels
        .iter()
        .flat_map(|(p, t)| p.iter().copied().zip(t.iter().copied()))
        .unzip();
    let (mut hits, mut total) = (0u64, 0u64);
    let mut iou = Vec::new();
    let mut query_to_slot = Vec::with_capacity(classes);
    for counts in &co {
        let cm = ConfusionMatrix::from_rectangular(counts);
        let m = hungarian_match(&cm);
        hits += m.matched;
        total += cm.total();
        let mut map = vec![None; parts];
        for (t, slot) in map.iter_mut().enumerate() {
            let s = m.perm[t];
            if s < k {
                *slot = Some(s);
                let inter = counts[t][s];
                let row: u64 = counts[t].iter().sum();
                let col: u64 = counts.iter().map(|r| r[s]).sum();
                if row + col > 0 {
                    iou.push(inter as f64 / (row + col - inter) as f64);
                }
            }
        }
        query_to_slot.push(map);
    }
    PartQuality {
        purity: if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        },
        ari: if scored.is_empty() {
            0.0
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        },
        ari_global: if pred.is_empty() {
            0.0
        } else {
            adjusted_rand_index(&pred, &truth)
        },
        iou,
        query_to_slot,
    }
}

/// Fixed-width histogram over `[-1, 1]` as `(left bin edge, count)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bins: Vec<(f64, u64)>,
}

impl Histogram {
    pub fn new(n: usize) -> Self {
        Self {
            bins: (0..n)
                .map(|i| (-1.0 + 2.0 * i as f64 / n as f64, 0))
                .collect(),
        }
    }

    pub fn add(&mut self, x: f64) {
        let n = self.bins.len();
        let i = (((x + 1.0) / 2.0 * n as f64).floor().max(0.0) as usize).min(n - 1);
        self.bins[i].1 += 1;
    }

    pub fn count(&self) -> u64 {
        self.bins.iter().map(|b| b.1).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Class pairs sharing the largest number of planted slots.
    pub class_pairs: Vec<(usize, usize)>,
    pub image_pairs: usize,
    /// Share of pairs whose least similar part maps to a slot where the
    /// two classes' prototypes differ.
    pub hit_rate: f64,
    pub mean_argmin_similarity: f64,
    /// Mean similarity of corresponding parts mapped to shared slots.
    pub mean_shared_similarity: f64,
    pub argmin_histogram: Histogram,
    pub other_histogram: Histogram,
}

/// Cross-class pair statistics over records of similar classes.
pub fn similarity_report(
    evals: &[RecordEval],
    gt: &GroundTruthParts,
    query_to_slot: &[Vec<Option<usize>>],
    bins: usize,
) -> SimilarityReport {
    let classes = gt.class_prototypes.len();
    let mut best = 0;
    let mut class_pairs = Vec::new();
    for a in 0..classes {
        for b in a + 1..classes {
            let s = gt.shared_slot_count(a, b);
            if s == 0 || s == gt.parts_per_class {
                continue;
            }
            if s > best {
                best = s;
                class_pairs.clear();
            }
            if s == best {
                class_pairs.push((a, b));
            }
        }
    }
    let mut by_class: BTreeMap<usize, Vec<&RecordEval>> = BTreeMap::new();
    for e in evals {
        if let (Some(l), Some(_)) = (e.label, &e.parts) {
            by_class.entry(l).or_default().push(e);
        }
    }
    let mut report = SimilarityReport {
        class_pairs: class_pairs.clone(),
        argmin_histogram: Histogram::new(bins),
        other_histogram: Histogram::new(bins),
        ..SimilarityReport::default()
    };
    let (mut hits, mut argmin_sum, mut shared_sum, mut shared_n) = (0usize, 0.0, 0.0, 0usize);
    for &(ca, cb) in &class_pairs {
        let differing = gt.differing_slots(ca, cb);
        let (Some(xs), Some(ys)) = (by_class.get(&ca), by_class.get(&cb)) else {
            continue;
        };
        for x in xs {
            for y in ys {
                let (px, py) = (x.parts.as_ref().unwrap(), y.parts.as_ref().unwrap());
                let sims: Vec<(usize, f64)> =
                    crate::parts::corresponding_parts(&px.empty, &py.empty)
                        .into_iter()
                        .map(|t| (t, cosine(px.features.row(t), py.features.row(t))))
                        .collect();
                let Some(&(t_min, s_min)) = sims.iter().min_by(|a, b| a.1.total_cmp(&b.1)) else {
                    continue;
                };
                report.image_pairs += 1;
                argmin_sum += s_min;
                report.argmin_histogram.add(s_min);
                if query_to_slot[ca][t_min].is_some_and(|s| differing.contains(&s)) {
                    hits += 1;
                }
                for &(t, s) in &sims {
                    if t != t_min {
                        report.other_histogram.add(s);
                    }
                    if query_to_slot[ca][t].is_some_and(|slot| !differing.contains(&slot)) {
                        shared_sum += s;
                        shared_n += 1;
                    }
                }
            }
        }
    }
    if report.image_pairs > 0 {
        report.hit_rate = hits as f64 / report.image_pairs as f64;
        report.mean_argmin_similarity = argmin_sum / report.image_pairs as f64;
    }
    if shared_n > 0 {
        report.mean_shared_similarity = shared_sum / shared_n as f64;
    }
    report
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_all: f64,
    pub acc_known: f64,
    pub acc_novel: f64,
    pub unlabeled_count: usize,
    pub part_purity: Option<f64>,
    pub part_ari: Option<f64>,
    pub part_ari_global: Option<f64>,
    pub part_iou: Vec<f64>,
    pub similarity: Option<SimilarityReport>,
}

/// Full report: ACC over the unlabeled records and, with ground truth,
/// part metrics and the similarity report over `part_records`.
pub fn evaluate(
    state: &ModelState,
    cfg: &TrainConfig,
    unlabeled: &[FeatureRecord],
    known_classes: &[usize],
    part_records: &[FeatureRecord],
    gt: Option<&GroundTruthParts>,
) -> Result<EvalReport> {
    let u = embed_records(state, unlabeled, cfg)?;
    let (preds, truths): (Vec<usize>, Vec<usize>) = u
        .iter()
        .filter_map(|e| e.label.map(|l| (e.prediction, l)))
        .unzip();
    let acc = clustering_acc(&preds, &truths, known_classes).map_err(EvalError::Mismatch)?;
    let mut report = EvalReport {
        acc_all: acc.all,
        acc_known: acc.known,
        acc_novel: acc.novel,
        unlabeled_count: preds.len(),
        part_purity: None,
        part_ari: None,
        part_ari_global: None,
        part_iou: Vec::new(),
        similarity: None,
    };
    if let (Some(gt), true) = (gt, cfg.uses_parts()) {
        let evals = embed_records(state, part_records, cfg)?;
        let assigned: Vec<(u32, &[usize])> = evals
            .iter()
            .filter_map(|e| e.parts.as_ref().map(|p| (e.image_id, p.winners.as_slice())))
            .collect();
        let q = part_quality(&assigned, gt, cfg.parts);
        report.similarity = Some(similarity_report(&evals, gt, &q.query_to_slot, 20));
        report.part_purity = Some(q.purity);
        report.part_ari = Some(q.ari);
        report.part_ari_global = Some(q.ari_global);
        report.part_iou = q.iou;
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
