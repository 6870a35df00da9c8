//! Training objectives: part-level contrastive losses over a pair plan, the
//! intra-image diversity hinge, the GCD representation and classification
//! terms on pooled features, and their combination.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureRecord;
use crate::parts::{corresponding_parts, PartAssignment};
use crate::tensor::{cosine, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("anchor {anchor} has an empty positive set")]
    EmptyPositives { anchor: usize },
    #[error("anchor {anchor} shares no non-empty part with any of its positives")]
    UnusableAnchor { anchor: usize },
    #[error("balance factor {lambda} > 0 but the batch holds no labeled records")]
    NoLabeled { lambda: f64 },
    #[error("batch metadata covers {items} records but {parts} part sets were given")]
    BatchLength { items: usize, parts: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ObjectiveError> = std::result::Result<T, E>;

/// What the objectives may see of a record. Hidden labels of unlabeled
/// records never reach this struct.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub image_id: u32,
    pub view_id: u32,
    pub label: Option<usize>,
}

impl BatchItem {
    pub fn of(record: &FeatureRecord) -> Self {
        Self {
            image_id: record.image_id,
            view_id: record.view_id,
            label: record.visible_label(),
        }
    }
}

/// Part features of one record and which queries came up empty.
#[derive(Clone, Debug)]
pub struct PartSet<'g> {
    pub features: Var<'g>,
    pub empty: Vec<bool>,
}

impl<'g> From<&PartAssignment<'g>> for PartSet<'g> {
    fn from(a: &PartAssignment<'g>) -> Self {
        Self {
            features: a.part_features,
            empty: a.empty_mask.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ContrastVariant {
    /// Negatives contribute only their least similar corresponding part.
    #[default]
    AllMin,
    /// Negatives contribute every corresponding part.
    AllAll,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub contrastive_tau: f64,
    pub rep_tau: f64,
    pub cls_tau: f64,
    /// Sharpening temperature applied to the teacher's class probabilities.
    pub sharpen_tau: f64,
    pub entropy_weight: f64,
    pub all_min_weight: f64,
    pub diversity_weight: f64,
    pub negative_cap: usize,
    /// Rejection draws per anchor, as a multiple of `negative_cap`.
    pub draw_factor: usize,
    pub variant: ContrastVariant,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda: 0.35,
            contrastive_tau: 0.1,
            rep_tau: 0.1,
            cls_tau: 0.1,
            sharpen_tau: 0.1,
            entropy_weight: 1.0,
            all_min_weight: 1.0,
            diversity_weight: 1.0,
            negative_cap: 8,
            draw_factor: 3,
            variant: ContrastVariant::AllMin,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(format!("lambda {} outside [0, 1]", self.lambda));
        }
        for (name, v) in [
            ("contrastive_tau", self.contrastive_tau),
            ("rep_tau", self.rep_tau),
            ("cls_tau", self.cls_tau),
            ("sharpen_tau", self.sharpen_tau),
        ] {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("entropy_weight", self.entropy_weight),
            ("all_min_weight", self.all_min_weight),
            ("diversity_weight", self.diversity_weight),
        ] {
            if !(v >= 0.0) {
                return Err(format!("{name} must be non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// Positive and negative batch indices of one anchor.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorSets {
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairPlan {
    pub anchors: Vec<AnchorSets>,
    pub neg_threshold: f64,
}

/// Smallest cosine similarity over corresponding (mutually non-empty) parts.
pub fn min_part_similarity(
    a: &Tensor,
    a_empty: &[bool],
    b: &Tensor,
    b_empty: &[bool],
) -> Option<f64> {
    corresponding_parts(a_empty, b_empty)
        .into_iter()
        .map(|t| cosine(a.row(t), b.row(t)))
        .min_by(f64::total_cmp)
}

/// Positive sets from visible labels and view siblings, then negatives:
/// labeled anchors take every labeled record of another class; unlabeled
/// anchors draw random candidates and keep those whose min-part similarity
/// falls below the mean min-part similarity of all positive pairs.
pub fn build_pair_plan<R: Rng + ?Sized>(
    items: &[BatchItem],
    parts: &[PartSet<'_>],
    negative_cap: usize,
    draw_factor: usize,
    rng: &mut R,
) -> Result<PairPlan> {
    if items.len() != parts.len() {
        return Err(ObjectiveError::BatchLength {
            items: items.len(),
            parts: parts.len(),
        });
    }
    let values: Vec<_> = parts.iter().map(|p| p.features.value()).collect();
    let min_sim = |a: usize, b: usize| {
        min_part_similarity(&values[a], &parts[a].empty, &values[b], &parts[b].empty)
    };

    let mut anchors = Vec::with_capacity(items.len());
    for (a, ia) in items.iter().enumerate() {
        let positives: Vec<usize> = items
            .iter()
            .enumerate()
            .filter(|&(b, ib)| {
                b != a
                    && match ia.label {
                        Some(l) => ib.label == Some(l),
                        None => ib.image_id == ia.image_id && ib.view_id != ia.view_id,
                    }
            })
            .map(|(b, _)| b)
            .collect();
        if positives.is_empty() {
            return Err(ObjectiveError::EmptyPositives { anchor: a });
        }
        anchors.push(AnchorSets {
            positives,
            negatives: Vec::new(),
        });
    }

    let pos_sims: Vec<f64> = anchors
        .iter()
        .enumerate()
        .flat_map(|(a, s)| s.positives.iter().filter_map(move |&b| min_sim(a, b)))
        .collect();
    let neg_threshold = if pos_sims.is_empty() {
        f64::NEG_INFINITY
    } else {
        pos_sims.iter().sum::<f64>() / pos_sims.len() as f64
    };

    for (a, ia) in items.iter().enumerate() {
        let negatives = match ia.label {
            Some(l) => items
                .iter()
                .enumerate()
                .filter(|(_, ib)| ib.label.is_some_and(|m| m != l))
                .map(|(b, _)| b)
                .collect(),
            None => {
                let pos = &anchors[a].positives;
                let mut cands: Vec<usize> = (0..items.len())
                    .filter(|&b| b != a && !pos.contains(&b))
                    .collect();
                cands.shuffle(rng);
                let mut accepted = vec![0; cands.len()];
                let mut taken = 0;
                for (i, &b) in cands.iter().enumerate().take(negative_cap * draw_factor) {
                    if taken == negative_cap {
                        break;
                    }
                    if min_sim(a, b).is_some_and(|s| s < neg_threshold) {
                        accepted[i] = 1;
                        taken += 1;
                    }
                }
                // Pinned so that replayed passes keep the same negatives.
                let accepted = match parts.first() {
                    Some(p) => p.features.graph().decide_indices(accepted)?,
                    None => accepted,
                };
                cands
                    .iter()
                    .zip(&accepted)
                    .filter(|(_, &k)| k == 1)
                    .map(|(&b, _)| b)
                    .collect()
            }
        };
        anchors[a].negatives = negatives;
    }
    Ok(PairPlan {
        anchors,
        neg_threshold,
    })
}

/// Corresponding-part cosine similarities of records `a` and `b` as a
/// column, or `None` when they share no non-empty part.
pub fn pair_similarities<'g>(a: &PartSet<'g>, b: &PartSet<'g>) -> Result<Option<Var<'g>>> {
    let idx = corresponding_parts(&a.empty, &b.empty);
    if idx.is_empty() {
        return Ok(None);
    }
    let sims = a
        .features
        .select_rows(&idx)?
        .cosine_rows(b.features.select_rows(&idx)?)?;
    Ok(Some(sims))
}

/// Part contrastive loss over a plan, given a source of pair similarity
/// columns. Entries with no positives are not anchors. Anchors whose
/// positives share no usable part are an error when `strict`, otherwise
/// they are skipped; the average runs over all anchors either way.
pub fn contrastive_from_similarities<'g, F>(
    plan: &PairPlan,
    mut sims: F,
    tau: f64,
    variant: ContrastVariant,
    strict: bool,
) -> Result<Option<Var<'g>>>
where
    F: FnMut(usize, usize) -> Result<Option<Var<'g>>>,
{
    let mut per_anchor = Vec::with_capacity(plan.anchors.len());
    let mut anchors = 0usize;
    for (a, sets) in plan.anchors.iter().enumerate() {
        if sets.positives.is_empty() {
            continue;
        }
        anchors += 1;
        let mut pos = Vec::new();
        for &b in &sets.positives {
            if let Some(s) = sims(a, b)? {
                pos.push(s);
            }
        }
        if pos.is_empty() {
            if strict {
                return Err(ObjectiveError::UnusableAnchor { anchor: a });
            }
            log::warn!("all-min: anchor {a} has no usable positive pair; skipped");
            continue;
        }
        let log_num = Var::concat_rows(&pos)?
            .t()?
            .scale(1.0 / tau)?
            .logsumexp_rows()?;

        let mut neg = Vec::new();
        for &b in &sets.negatives {
            if let Some(s) = sims(a, b)? {
                match variant {
                    ContrastVariant::AllMin => neg.push(s.t()?.row_min()?.0),
                    ContrastVariant::AllAll => neg.push(s),
                }
            }
        }
        let loss = if neg.is_empty() {
            log_num.neg()?
        } else {
            let log_den = Var::concat_rows(&neg)?
                .t()?
                .scale(1.0 / tau)?
                .logsumexp_rows()?;
            log_den.sub(log_num)?
        };
        per_anchor.push(loss);
    }
    if per_anchor.is_empty() {
        return Ok(None);
    }
    Ok(Some(
        Var::concat_rows(&per_anchor)?
            .sum()?
            .scale(1.0 / anchors as f64)?,
    ))
}

/// The all-min contrastive loss (or its all-all variant).
pub fn part_contrastive_loss<'g>(
    plan: &PairPlan,
    parts: &[PartSet<'g>],
    tau: f64,
    variant: ContrastVariant,
    strict: bool,
) -> Result<Var<'g>> {
    let g = parts
        .first()
        .map(|p| p.features.graph())
        .ok_or(ObjectiveError::BatchLength { items: 0, parts: 0 })?;
    let loss = contrastive_from_similarities(
        plan,
        |a, b| pair_similarities(&parts[a], &parts[b]),
        tau,
        variant,
        strict,
    )?;
    Ok(loss.unwrap_or_else(|| g.scalar(0.0)))
}

pub fn all_min_loss<'g>(plan: &PairPlan, parts: &[PartSet<'g>], tau: f64) -> Result<Var<'g>> {
    part_contrastive_loss(plan, parts, tau, ContrastVariant::AllMin, true)
}

/// Sum over ordered pairs of distinct non-empty parts of `max(0, cos)`.
pub fn diversity_loss<'g>(parts: &PartSet<'g>) -> Result<Var<'g>> {
    let g = parts.features.graph();
    let idx: Vec<usize> = (0..parts.empty.len())
        .filter(|&t| !parts.empty[t])
        .collect();
    if idx.len() < 2 {
        return Ok(g.scalar(0.0));
    }
    let k = idx.len();
    let p = parts.features.select_rows(&idx)?;
    let mut off = Tensor::full(k, k, 1.0);
    for i in 0..k {
        off.set(i, i, 0.0);
    }
    Ok(p.cosine_matrix(p)?.relu()?.mul(g.constant(off))?.sum()?)
}

/// Diversity averaged over the records of a batch.
pub fn diversity_batch<'g>(parts: &[PartSet<'g>]) -> Result<Var<'g>> {
    let terms = parts
        .iter()
        .map(diversity_loss)
        .collect::<Result<Vec<_>>>()?;
    let n = terms.len() as f64;
    Ok(Var::concat_rows(&terms)?.sum()?.scale(1.0 / n)?)
}

/// Representation projector and parametric classifier on a graph.
#[derive(Clone, Copy, Debug)]
pub struct Head<'g> {
    /// `C×C'`.
    pub projector: Var<'g>,
    /// `C×K`, one column per class.
    pub classifier: Var<'g>,
}

#[derive(Clone, Copy, Debug)]
pub struct GcdTerms<'g> {
    pub rep_supervised: Var<'g>,
    pub rep_unsupervised: Var<'g>,
    pub cls_supervised: Var<'g>,
    pub cls_unsupervised: Var<'g>,
}

/// For each record, the first other record of the same image with a
/// different view.
pub fn siblings(items: &[BatchItem]) -> Vec<Option<usize>> {
    items
        .iter()
        .enumerate()
        .map(|(i, a)| {
            items
                .iter()
                .enumerate()
                .position(|(j, b)| j != i && b.image_id == a.image_id && b.view_id != a.view_id)
        })
        .collect()
}

fn masked_diag(n: usize) -> Tensor {
    let mut m = Tensor::zeros(n, n);
    for i in 0..n {
        m.set(i, i, -1e9);
    }
    m
}

/// Cosine class logits before temperature, `B×K`.
pub fn class_cosines<'g>(pooled: Var<'g>, classifier: Var<'g>) -> Result<Var<'g>> {
    Ok(pooled.cosine_matrix(classifier.t()?)?)
}

/// The four terms of the GCD objective on pooled features `B×C`.
pub fn gcd_losses<'g>(
    pooled: Var<'g>,
    items: &[BatchItem],
    head: &Head<'g>,
    cfg: &ObjectiveConfig,
) -> Result<GcdTerms<'g>> {
    let g = pooled.graph();
    let b = items.len();
    if pooled.shape()[0] != b {
        return Err(ObjectiveError::BatchLength {
            items: b,
            parts: pooled.shape()[0],
        });
    }
    let labeled: Vec<usize> = (0..b).filter(|&i| items[i].label.is_some()).collect();
    if labeled.is_empty() && cfg.lambda > 0.0 {
        return Err(ObjectiveError::NoLabeled { lambda: cfg.lambda });
    }
    let sib = siblings(items);
    let with_sib: Vec<usize> = (0..b).filter(|&i| sib[i].is_some()).collect();
    let zero = || g.scalar(0.0);

    // Representation terms on the projected, normalized features.
    let z = pooled.matmul(head.projector)?.l2_normalize_rows()?;
    let s = z
        .matmul(z.t()?)?
        .scale(1.0 / cfg.rep_tau)?
        .add(g.constant(masked_diag(b)))?;
    let lse = s.logsumexp_rows()?;

    let rep_unsupervised = if with_sib.is_empty() {
        zero()
    } else {
        let mut pick = Tensor::zeros(b, b);
        let mut w = vec![0.0; b];
        for &i in &with_sib {
            pick.set(i, sib[i].unwrap(), 1.0);
            w[i] = 1.0 / with_sib.len() as f64;
        }
        let pos = s.mul(g.constant(pick))?.sum_axis(1)?;
        lse.sub(pos)?
            .mul(g.constant(Tensor::column_vector(&w)))?
            .sum()?
    };

    let rep_supervised = {
        let l = labeled.len();
        let mut mask = Tensor::zeros(l, l);
        let mut w = vec![0.0; l];
        let mut anchors = 0;
        for i in 0..l {
            let same: Vec<usize> = (0..l)
                .filter(|&j| j != i && items[labeled[j]].label == items[labeled[i]].label)
                .collect();
            for &j in &same {
                mask.set(i, j, 1.0 / same.len() as f64);
            }
            if !same.is_empty() {
                w[i] = 1.0;
                anchors += 1;
            }
        }
        if anchors == 0 {
            zero()
        } else {
            w.iter_mut().for_each(|x| *x /= anchors as f64);
            let zl = z.select_rows(&labeled)?;
            let sl = zl
                .matmul(zl.t()?)?
                .scale(1.0 / cfg.rep_tau)?
                .add(g.constant(masked_diag(l)))?;
            let pos = sl.mul(g.constant(mask))?.sum_axis(1)?;
            sl.logsumexp_rows()?
                .sub(pos)?
                .mul(g.constant(Tensor::column_vector(&w)))?
                .sum()?
        }
    };

    // Classification terms on cosine logits.
    let k = head.classifier.shape()[1];
    let logits = class_cosines(pooled, head.classifier)?.scale(1.0 / cfg.cls_tau)?;
    let log_probs = logits.sub(logits.logsumexp_rows()?)?;

    let cls_supervised = if labeled.is_empty() {
        zero()
    } else {
        let mut onehot = Tensor::zeros(labeled.len(), k);
        for (r, &i) in labeled.iter().enumerate() {
            onehot.set(r, items[i].label.unwrap(), 1.0);
        }
        log_probs
            .select_rows(&labeled)?
            .mul(g.constant(onehot))?
            .sum()?
            .scale(-1.0 / labeled.len() as f64)?
    };

    let cls_unsupervised = {
        let distill = if with_sib.is_empty() {
            zero()
        } else {
            let teacher = logits
                .scale(1.0 / cfg.sharpen_tau)?
                .row_softmax()?
                .stop_gradient()?;
            let targets: Vec<usize> = with_sib.iter().map(|&i| sib[i].unwrap()).collect();
            teacher
                .select_rows(&targets)?
                .mul(log_probs.select_rows(&with_sib)?)?
                .sum()?
                .scale(-1.0 / with_sib.len() as f64)?
        };
        let mean_p = logits.row_softmax()?.mean_axis(0)?;
        let entropy = mean_p.mul(mean_p.log()?)?.sum()?.neg()?;
        distill.sub(entropy.scale(cfg.entropy_weight)?)?
    };

    Ok(GcdTerms {
        rep_supervised,
        rep_unsupervised,
        cls_supervised,
        cls_unsupervised,
    })
}

/// Scalar values of every loss term for one step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub all_min: f64,
    pub diversity: f64,
    pub rep_supervised: f64,
    pub rep_unsupervised: f64,
    pub cls_supervised: f64,
    pub cls_unsupervised: f64,
    pub total: f64,
    pub lambda: f64,
    pub all_min_weight: f64,
    pub diversity_weight: f64,
}

impl LossBreakdown {
    pub fn gcd(&self) -> f64 {
        (1.0 - self.lambda) * (self.cls_unsupervised + self.rep_unsupervised)
            + self.lambda * (self.cls_supervised + self.rep_supervised)
    }

    pub fn recomputed_total(&self) -> f64 {
        self.gcd() + self.diversity_weight * self.diversity + self.all_min_weight * self.all_min
    }

    pub fn is_finite(&self) -> bool {
        [
            self.all_min,
            self.diversity,
            self.rep_supervised,
            self.rep_unsupervised,
            self.cls_supervised,
            self.cls_unsupervised,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// Every term of the overall objective on a graph.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'g> {
    pub gcd: GcdTerms<'g>,
    pub all_min: Var<'g>,
    pub diversity: Var<'g>,
}

/// `(1-λ)(cls_u + rep_u) + λ(cls_s + rep_s) + w_div·div + w_am·all_min`.
pub fn overall_loss<'g>(
    terms: &LossTerms<'g>,
    lambda: f64,
    all_min_weight: f64,
    diversity_weight: f64,
) -> Result<(Var<'g>, LossBreakdown)> {
    let t = &terms.gcd;
    let unsup = t
        .cls_unsupervised
        .add(t.rep_unsupervised)?
        .scale(1.0 - lambda)?;
    let sup = t.cls_supervised.add(t.rep_supervised)?.scale(lambda)?;
    let total = unsup
        .add(sup)?
        .add(terms.diversity.scale(diversity_weight)?)?
        .add(terms.all_min.scale(all_min_weight)?)?;
    let breakdown = LossBreakdown {
        all_min: terms.all_min.item(),
        diversity: terms.diversity.item(),
        rep_supervised: t.rep_supervised.item(),
        rep_unsupervised: t.rep_unsupervised.item(),
        cls_supervised: t.cls_supervised.item(),
        cls_unsupervised: t.cls_unsupervised.item(),
        total: total.item(),
        lambda,
        all_min_weight,
        diversity_weight,
    };
    Ok((total, breakdown))
}
