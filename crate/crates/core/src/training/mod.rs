//! Batching, the forward pass from patch features to pooled part features,
//! SGD with momentum, and the epoch loop.

mod checkpoint;

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{augment, FeatureRecord};
use crate::objectives::{
    build_pair_plan, diversity_batch, gcd_losses, overall_loss, part_contrastive_loss, BatchItem,
    ContrastVariant, Head, LossBreakdown, LossTerms, ObjectiveConfig, ObjectiveError, PartSet,
};
use crate::parts::{
    discover_parts, gumbel_noise, BoundQueryBank, PartAssignment, PriorMode, QueryBank,
};
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {dump}")]
    NonFinite { step: u64, dump: String },
    #[error("no training data")]
    NoData,
    /// Raised by an observer to end [`fit`] early; the state stays resumable.
    #[error("stopped after epoch {epoch}")]
    Stopped { epoch: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    Constant,
    #[default]
    Cosine,
}

/// Components that can be switched off for ablations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    NoAllmin,
    NoDiversity,
    /// Classify on the CLS feature; no part discovery or part losses.
    NoParts,
    /// Negatives use every corresponding part instead of the least similar.
    AllAll,
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "no-allmin" => Ok(Self::NoAllmin),
            "no-diversity" => Ok(Self::NoDiversity),
            "no-parts" => Ok(Self::NoParts),
            "all-all" => Ok(Self::AllAll),
            other => Err(format!(
                "unknown ablation {other:?} (expected none, no-allmin, no-diversity, no-parts, all-all)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Images per batch; each contributes two views.
    pub batch_size: usize,
    pub labeled_fraction: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: Schedule,
    pub gumbel_tau: f64,
    /// Linear anneal target for the Gumbel temperature; equal to
    /// `gumbel_tau` for no anneal.
    pub gumbel_tau_final: f64,
    pub rho: f64,
    pub parts: usize,
    pub projector_dim: usize,
    /// Initial scale of the assignment projections.
    pub assign_gain: f64,
    pub prior_mode: PriorMode,
    /// Learnable `C×C` map applied to patch and CLS features.
    pub adapter: bool,
    pub augment_drop: f64,
    pub augment_jitter: f64,
    pub ablation: Ablation,
    pub seed: u64,
    pub objective: ObjectiveConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            labeled_fraction: 0.5,
            epochs: 50,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 5e-5,
            schedule: Schedule::Cosine,
            gumbel_tau: 1.0,
            gumbel_tau_final: 1.0,
            rho: 0.25,
            parts: 3,
            projector_dim: 32,
            assign_gain: 3.0,
            prior_mode: PriorMode::Mean,
            adapter: false,
            augment_drop: 0.125,
            augment_jitter: 0.05,
            ablation: Ablation::None,
            seed: 0,
            objective: ObjectiveConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.batch_size == 0 || self.parts == 0 || self.projector_dim == 0 {
            return Err("batch_size, parts and projector_dim must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return Err(format!(
                "labeled_fraction {} outside [0, 1]",
                self.labeled_fraction
            ));
        }
        for (name, v) in [
            ("gumbel_tau", self.gumbel_tau),
            ("gumbel_tau_final", self.gumbel_tau_final),
            ("assign_gain", self.assign_gain),
        ] {
            if !(v > 0.0) {
                return Err(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("augment_jitter", self.augment_jitter),
        ] {
            if !(v >= 0.0) {
                return Err(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(format!("rho {} outside (0, 1)", self.rho));
        }
        if !(0.0..1.0).contains(&self.augment_drop) {
            return Err(format!("augment_drop {} outside [0, 1)", self.augment_drop));
        }
        self.objective.validate()
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        self.ablation = ablation;
        self
    }

    /// Objective settings after the ablation switch is applied.
    pub fn effective_objective(&self) -> ObjectiveConfig {
        let mut o = self.objective.clone();
        match self.ablation {
            Ablation::None => {}
            Ablation::NoAllmin => o.all_min_weight = 0.0,
            Ablation::NoDiversity => o.diversity_weight = 0.0,
            Ablation::NoParts => {
                o.all_min_weight = 0.0;
                o.diversity_weight = 0.0;
            }
            Ablation::AllAll => o.variant = ContrastVariant::AllAll,
        }
        o
    }

    pub fn uses_parts(&self) -> bool {
        self.ablation != Ablation::NoParts
    }

    pub fn steps_per_epoch(&self, images: usize) -> usize {
        images.div_ceil(self.batch_size).max(1)
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub bank: QueryBank,
    /// `C×C'`.
    pub projector: Tensor,
    /// `C×K`.
    pub classifier: Tensor,
    pub adapter: Option<Tensor>,
    /// Momentum buffer per parameter name.
    pub slots: BTreeMap<String, Tensor>,
    pub step: u64,
    pub rng: ChaCha8Rng,
}

pub const PARAM_NAMES: [&str; 9] = [
    "queries",
    "prior_proj_q",
    "prior_proj_k",
    "prior_proj_v",
    "assign_proj_q",
    "assign_proj_k",
    "projector",
    "classifier",
    "adapter",
];

fn randn<R: Rng + ?Sized>(rows: usize, cols: usize, sd: f64, rng: &mut R) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

impl ModelState {
    pub fn init(cfg: &TrainConfig, dim: usize, classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut bank = QueryBank::init(cfg.parts, dim, &mut rng);
        bank.gumbel_tau = cfg.gumbel_tau;
        bank.prior_threshold_rho = cfg.rho;
        bank.prior_mode = cfg.prior_mode;
        bank.assign_proj_q = bank.assign_proj_q.map(|x| x * cfg.assign_gain);
        bank.assign_proj_k = bank.assign_proj_k.map(|x| x * cfg.assign_gain);
        let projector = randn(dim, cfg.projector_dim, 1.0 / (dim as f64).sqrt(), &mut rng);
        let classifier = randn(dim, classes, 1.0, &mut rng);
        let adapter = cfg.adapter.then(|| Tensor::eye(dim));
        let mut state = Self {
            bank,
            projector,
            classifier,
            adapter,
            slots: BTreeMap::new(),
            step: 0,
            rng,
        };
        let slots = state
            .params()
            .into_iter()
            .map(|(n, t)| {
                (
                    n.to_string(),
                    Tensor::new(t.shape().to_vec(), vec![0.0; t.numel()]).unwrap(),
                )
            })
            .collect();
        state.slots = slots;
        state
    }

    pub fn dim(&self) -> usize {
        self.bank.dim()
    }

    pub fn classes(&self) -> usize {
        self.classifier.cols()
    }

    /// Learnable tensors in a fixed order.
    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        let b = &self.bank;
        let mut v = vec![
            ("queries", &b.queries),
            ("prior_proj_q", &b.prior_proj_q),
            ("prior_proj_k", &b.prior_proj_k),
            ("prior_proj_v", &b.prior_proj_v),
            ("assign_proj_q", &b.assign_proj_q),
            ("assign_proj_k", &b.assign_proj_k),
            ("projector", &self.projector),
            ("classifier", &self.classifier),
        ];
        if let Some(a) = &self.adapter {
            v.push(("adapter", a));
        }
        v
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let b = &mut self.bank;
        Some(match name {
            "queries" => &mut b.queries,
            "prior_proj_q" => &mut b.prior_proj_q,
            "prior_proj_k" => &mut b.prior_proj_k,
            "prior_proj_v" => &mut b.prior_proj_v,
            "assign_proj_q" => &mut b.assign_proj_q,
            "assign_proj_k" => &mut b.assign_proj_k,
            "projector" => &mut self.projector,
            "classifier" => &mut self.classifier,
            "adapter" => self.adapter.as_mut()?,
            _ => return None,
        })
    }

    /// Places every parameter on `g` as a tracked leaf.
    pub fn bind<'g>(&self, g: &'g Graph) -> BoundModel<'g> {
        BoundModel {
            bank: self.bank.bind(g),
            head: Head {
                projector: g.param(self.projector.clone()),
                classifier: g.param(self.classifier.clone()),
            },
            adapter: self.adapter.as_ref().map(|a| g.param(a.clone())),
        }
    }

    /// Places every parameter on `g` as a constant.
    pub fn bind_frozen<'g>(&self, g: &'g Graph) -> BoundModel<'g> {
        BoundModel {
            bank: self.bank.bind_frozen(g),
            head: Head {
                projector: g.constant(self.projector.clone()),
                classifier: g.constant(self.classifier.clone()),
            },
            adapter: self.adapter.as_ref().map(|a| g.constant(a.clone())),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundModel<'g> {
    pub bank: BoundQueryBank<'g>,
    pub head: Head<'g>,
    pub adapter: Option<Var<'g>>,
}

impl<'g> BoundModel<'g> {
    pub fn named_vars(&self) -> Vec<(&'static str, Var<'g>)> {
        let mut v: Vec<_> = self.bank.vars().into_iter().collect();
        v.push(("projector", self.head.projector));
        v.push(("classifier", self.head.classifier));
        if let Some(a) = self.adapter {
            v.push(("adapter", a));
        }
        v
    }

    fn adapt(&self, x: Var<'g>) -> crate::tensor::Result<Var<'g>> {
        match self.adapter {
            Some(a) => x.matmul(a),
            None => Ok(x),
        }
    }

    /// Part assignment of one record; `noise` of `None` is evaluation mode.
    pub fn assign(
        &self,
        record: &FeatureRecord,
        noise: Option<&Tensor>,
    ) -> crate::tensor::Result<PartAssignment<'g>> {
        let g = self.bank.queries.graph();
        let x = self.adapt(g.constant(record.patch_features.clone()))?;
        discover_parts(&self.bank, x, &record.head_attention, noise)
    }

    /// The CLS feature after the optional adapter (the no-parts path).
    pub fn cls(&self, record: &FeatureRecord) -> crate::tensor::Result<Var<'g>> {
        let g = self.bank.queries.graph();
        self.adapt(g.constant(record.cls_feature.clone()))
    }
}

/// Mean of the non-empty part features (`1×C`).
pub fn pool_parts<'g>(assignment: &PartAssignment<'g>) -> crate::tensor::Result<Var<'g>> {
    let idx: Vec<usize> = (0..assignment.parts())
        .filter(|&t| !assignment.empty_mask[t])
        .collect();
    assert!(
        !idx.is_empty(),
        "every patch is assigned, so some part is non-empty"
    );
    assignment.part_features.select_rows(&idx)?.mean_axis(0)
}

/// Two views per image: the canonical record followed by an augmented one.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub records: Vec<FeatureRecord>,
}

impl Batch {
    pub fn items(&self) -> Vec<BatchItem> {
        self.records.iter().map(BatchItem::of).collect()
    }
}

/// Samples `labeled_fraction · batch_size` labeled images and fills the
/// rest from the unlabeled pool, each followed by an augmented view.
pub fn make_batch<R: Rng + ?Sized>(
    labeled: &[FeatureRecord],
    unlabeled: &[FeatureRecord],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Batch> {
    if labeled.is_empty() && unlabeled.is_empty() {
        return Err(TrainError::NoData);
    }
    let b = cfg.batch_size;
    let mut n_l = ((cfg.labeled_fraction * b as f64).round() as usize).min(labeled.len());
    if unlabeled.is_empty() {
        n_l = b.min(labeled.len());
    }
    let n_u = (b - n_l).min(unlabeled.len());
    let mut records = Vec::with_capacity(2 * (n_l + n_u));
    for (pool, n) in [(labeled, n_l), (unlabeled, n_u)] {
        for i in sample(rng, pool.len(), n) {
            let r = &pool[i];
            records.push(r.clone());
            records.push(augment(r, cfg.augment_drop, cfg.augment_jitter, rng));
        }
    }
    Ok(Batch { records })
}

fn learning_rate(cfg: &TrainConfig, step: u64, total: u64) -> f64 {
    match cfg.schedule {
        Schedule::Constant => cfg.learning_rate,
        Schedule::Cosine => {
            let p = if total == 0 {
                0.0
            } else {
                (step as f64 / total as f64).min(1.0)
            };
            0.5 * cfg.learning_rate * (1.0 + (std::f64::consts::PI * p).cos())
        }
    }
}

fn gumbel_tau(cfg: &TrainConfig, step: u64, total: u64) -> f64 {
    let p = if total == 0 {
        0.0
    } else {
        (step as f64 / total as f64).min(1.0)
    };
    cfg.gumbel_tau + (cfg.gumbel_tau_final - cfg.gumbel_tau) * p
}

/// Loss graph of one batch. The caller owns the graph and decides whether
/// to step.
pub struct Forward<'g> {
    pub model: BoundModel<'g>,
    pub loss: Var<'g>,
    pub breakdown: LossBreakdown,
}

/// Builds the full objective for a batch, drawing Gumbel noise and the
/// negative sampling from `rng`.
pub fn forward<'g, R: Rng + ?Sized>(
    g: &'g Graph,
    model: BoundModel<'g>,
    batch: &Batch,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Forward<'g>> {
    let obj = cfg.effective_objective();
    let items = batch.items();
    let (pooled, part_sets) = if cfg.uses_parts() {
        let t = model.bank.queries.value().rows();
        let n = batch.records.first().map_or(0, |r| r.patch_features.rows());
        let mut sets = Vec::with_capacity(items.len());
        let mut pooled = Vec::with_capacity(items.len());
        for r in &batch.records {
            let noise = gumbel_noise(t, n, rng);
            let a = model.assign(r, Some(&noise))?;
            pooled.push(pool_parts(&a)?);
            sets.push(PartSet::from(&a));
        }
        (Var::concat_rows(&pooled)?, Some(sets))
    } else {
        let cls = batch
            .records
            .iter()
            .map(|r| model.cls(r))
            .collect::<crate::tensor::Result<Vec<_>>>()?;
        (Var::concat_rows(&cls)?, None)
    };

    let gcd = gcd_losses(pooled, &items, &model.head, &obj)?;
    let (all_min, diversity) = match &part_sets {
        Some(sets) => {
            let plan = build_pair_plan(&items, sets, obj.negative_cap, obj.draw_factor, rng)?;
            let am = if obj.all_min_weight > 0.0 {
                part_contrastive_loss(&plan, sets, obj.contrastive_tau, obj.variant, false)?
            } else {
                g.scalar(0.0)
            };
            let div = if obj.diversity_weight > 0.0 {
                diversity_batch(sets)?
            } else {
                g.scalar(0.0)
            };
            (am, div)
        }
        None => (g.scalar(0.0), g.scalar(0.0)),
    };
    let (loss, breakdown) = overall_loss(
        &LossTerms {
            gcd,
            all_min,
            diversity,
        },
        obj.lambda,
        obj.all_min_weight,
        obj.diversity_weight,
    )?;
    Ok(Forward {
        model,
        loss,
        breakdown,
    })
}

/// One SGD-with-momentum step on `batch`. `total_steps` drives the
/// learning-rate and temperature schedules.
pub fn train_step(
    state: &mut ModelState,
    batch: &Batch,
    cfg: &TrainConfig,
    total_steps: u64,
) -> Result<LossBreakdown> {
    let g = Graph::new();
    let mut model = state.bind(&g);
    model.bank.gumbel_tau = gumbel_tau(cfg, state.step, total_steps);
    let fwd = forward(&g, model, batch, cfg, &mut state.rng);
    let fwd = match fwd {
        Ok(f) => f,
        Err(TrainError::Tensor(TensorError::NonFinite { op })) => {
            return Err(non_finite(state.step, batch, &format!("op {op}")));
        }
        Err(e) => return Err(e),
    };
    if !fwd.breakdown.is_finite() {
        return Err(non_finite(
            state.step,
            batch,
            &format!("{:?}", fwd.breakdown),
        ));
    }
    let grads = g.backward(fwd.loss)?;
    let lr = learning_rate(cfg, state.step, total_steps);
    for (name, var) in fwd.model.named_vars() {
        let grad = grads.wrt(&var);
        if !grad.is_finite() {
            return Err(non_finite(
                state.step,
                batch,
                &format!("gradient of {name}"),
            ));
        }
        let mut slot = state
            .slots
            .remove(name)
            .ok_or_else(|| TrainError::Config(format!("no slot for {name}")))?;
        let param = state.param_mut(name).expect("bound names are state params");
        for ((p, v), &gr) in param
            .data_mut()
            .iter_mut()
            .zip(slot.data_mut())
            .zip(grad.data())
        {
            *v = cfg.momentum * *v + gr + cfg.weight_decay * *p;
            *p -= lr * *v;
        }
        state.slots.insert(name.to_string(), slot);
    }
    state.step += 1;
    Ok(fwd.breakdown)
}

fn non_finite(step: u64, batch: &Batch, what: &str) -> TrainError {
    let ids: Vec<(u32, u32)> = batch
        .records
        .iter()
        .map(|r| (r.image_id, r.view_id))
        .collect();
    TrainError::NonFinite {
        step,
        dump: format!("{what}; batch (image_id, view_id) = {ids:?}"),
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

/// Hooks into [`fit`].
pub trait FitObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    /// Called after each completed epoch (1-based) with a state snapshot.
    fn on_epoch_end(&mut self, _epoch: usize, _state: &ModelState) -> Result<()> {
        Ok(())
    }
}

impl FitObserver for () {}

/// Runs training from `state.step` up to `cfg.epochs` epochs. Every random
/// draw comes from the state's generator, so a resumed run continues the
/// exact trajectory.
pub fn fit(
    state: &mut ModelState,
    labeled: &[FeatureRecord],
    unlabeled: &[FeatureRecord],
    cfg: &TrainConfig,
    observer: &mut dyn FitObserver,
) -> Result<Vec<StepRecord>> {
    cfg.validate().map_err(TrainError::Config)?;
    let per_epoch = cfg.steps_per_epoch(labeled.len() + unlabeled.len()) as u64;
    let total = per_epoch * cfg.epochs as u64;
    let mut log = Vec::new();
    while state.step < total {
        let epoch = (state.step / per_epoch) as usize;
        let batch = make_batch(labeled, unlabeled, cfg, &mut state.rng)?;
        let step = state.step;
        let loss = train_step(state, &batch, cfg, total)?;
        let rec = StepRecord { epoch, step, loss };
        observer.on_step(&rec)?;
        log.push(rec);
        if state.step.is_multiple_of(per_epoch) {
            observer.on_epoch_end((state.step / per_epoch) as usize, state)?;
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests;
