//! Part discovery: per-head part attention, attention-thresholded part
//! priors, query specialization by cross-attention, and hard assignment of
//! patches to queries through a straight-through Gumbel-Softmax.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::{Graph, Result, Tensor, TensorError, Var};

/// Shared learnable part queries and the projections around them.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBank {
    /// `T×C`.
    pub queries: Tensor,
    pub prior_proj_q: Tensor,
    pub prior_proj_k: Tensor,
    pub prior_proj_v: Tensor,
    pub assign_proj_q: Tensor,
    pub assign_proj_k: Tensor,
    pub gumbel_tau: f64,
    pub prior_threshold_rho: f64,
    pub prior_mode: PriorMode,
}

/// How selected patches are aggregated into priors and part features.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorMode {
    /// Mean of the selected patches.
    #[default]
    Mean,
    /// Plain sum (binary mask times features).
    Sum,
}

impl QueryBank {
    /// Queries drawn i.i.d. from `N(0, 1/sqrt(C))` and row-normalized;
    /// projections start at identity.
    pub fn init<R: Rng + ?Sized>(parts: usize, dim: usize, rng: &mut R) -> Self {
        let sd = (1.0 / (dim as f64).sqrt()).sqrt();
        let mut queries = Tensor::zeros(parts, dim);
        for t in 0..parts {
            let row = queries.row_mut(t);
            for x in row.iter_mut() {
                *x = sd * rng.sample::<f64, _>(StandardNormal);
            }
            let n = crate::tensor::norm(row);
            row.iter_mut().for_each(|x| *x /= n);
        }
        Self {
            queries,
            prior_proj_q: Tensor::eye(dim),
            prior_proj_k: Tensor::eye(dim),
            prior_proj_v: Tensor::eye(dim),
            assign_proj_q: Tensor::eye(dim),
            assign_proj_k: Tensor::eye(dim),
            gumbel_tau: 1.0,
            prior_threshold_rho: 0.25,
            prior_mode: PriorMode::Mean,
        }
    }

    pub fn parts(&self) -> usize {
        self.queries.rows()
    }

    pub fn dim(&self) -> usize {
        self.queries.cols()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let c = self.dim();
        if self.parts() == 0 {
            return Err("at least one part query is required".into());
        }
        for (name, m) in self.projections() {
            if m.shape() != [c, c] {
                return Err(format!(
                    "{name} has shape {:?}, expected [{c}, {c}]",
                    m.shape()
                ));
            }
        }
        if !(self.gumbel_tau > 0.0) {
            return Err(format!(
                "gumbel_tau must be positive, got {}",
                self.gumbel_tau
            ));
        }
        if !(self.prior_threshold_rho > 0.0 && self.prior_threshold_rho < 1.0) {
            return Err(format!(
                "prior_threshold_rho {} outside (0, 1)",
                self.prior_threshold_rho
            ));
        }
        Ok(())
    }

    pub fn projections(&self) -> [(&'static str, &Tensor); 5] {
        [
            ("prior_proj_q", &self.prior_proj_q),
            ("prior_proj_k", &self.prior_proj_k),
            ("prior_proj_v", &self.prior_proj_v),
            ("assign_proj_q", &self.assign_proj_q),
            ("assign_proj_k", &self.assign_proj_k),
        ]
    }

    /// Registers every matrix as a tracked leaf on `g`.
    pub fn bind<'g>(&self, g: &'g Graph) -> BoundQueryBank<'g> {
        self.bind_with(g, |g, t| g.param(t.clone()))
    }

    /// Registers every matrix as a constant (inference).
    pub fn bind_frozen<'g>(&self, g: &'g Graph) -> BoundQueryBank<'g> {
        self.bind_with(g, |g, t| g.constant(t.clone()))
    }

    fn bind_with<'g>(
        &self,
        g: &'g Graph,
        leaf: impl Fn(&'g Graph, &Tensor) -> Var<'g>,
    ) -> BoundQueryBank<'g> {
        BoundQueryBank {
            queries: leaf(g, &self.queries),
            prior_proj_q: leaf(g, &self.prior_proj_q),
            prior_proj_k: leaf(g, &self.prior_proj_k),
            prior_proj_v: leaf(g, &self.prior_proj_v),
            assign_proj_q: leaf(g, &self.assign_proj_q),
            assign_proj_k: leaf(g, &self.assign_proj_k),
            gumbel_tau: self.gumbel_tau,
            prior_threshold_rho: self.prior_threshold_rho,
            prior_mode: self.prior_mode,
        }
    }
}

/// A [`QueryBank`] living on a graph.
#[derive(Clone, Copy, Debug)]
pub struct BoundQueryBank<'g> {
    pub queries: Var<'g>,
    pub prior_proj_q: Var<'g>,
    pub prior_proj_k: Var<'g>,
    pub prior_proj_v: Var<'g>,
    pub assign_proj_q: Var<'g>,
    pub assign_proj_k: Var<'g>,
    pub gumbel_tau: f64,
    pub prior_threshold_rho: f64,
    pub prior_mode: PriorMode,
}

impl<'g> BoundQueryBank<'g> {
    pub fn vars(&self) -> [(&'static str, Var<'g>); 6] {
        [
            ("queries", self.queries),
            ("prior_proj_q", self.prior_proj_q),
            ("prior_proj_k", self.prior_proj_k),
            ("prior_proj_v", self.prior_proj_v),
            ("assign_proj_q", self.assign_proj_q),
            ("assign_proj_k", self.assign_proj_k),
        ]
    }
}

/// Attention of each head's CLS token over the patch tokens.
///
/// `cls_heads` is `M×d`, `patch_heads[m]` is `N×d`, and `proj_q[m]`,
/// `proj_k[m]` are `d×d`, with `C = M·d`. For each head the CLS query is
/// scored against `[CLS; patches]`, soft-maxed with scale `1/sqrt(C)`, and
/// the CLS-to-CLS entry dropped, so rows sum to less than one.
pub fn part_attention(
    cls_heads: &Tensor,
    patch_heads: &[Tensor],
    proj_q: &[Tensor],
    proj_k: &[Tensor],
) -> Result<Tensor> {
    let (m, d) = cls_heads.require_matrix("part_attention")?;
    if patch_heads.len() != m || proj_q.len() != m || proj_k.len() != m {
        return Err(TensorError::ShapeMismatch {
            op: "part_attention",
            lhs: vec![m],
            rhs: vec![patch_heads.len(), proj_q.len(), proj_k.len()],
        });
    }
    let n = patch_heads.first().map_or(0, |p| p.rows());
    let scale = 1.0 / ((m * d) as f64).sqrt();
    let g = Graph::new();
    let mut rows = Vec::with_capacity(m);
    for h in 0..m {
        if patch_heads[h].shape() != [n, d]
            || proj_q[h].shape() != [d, d]
            || proj_k[h].shape() != [d, d]
        {
            return Err(TensorError::ShapeMismatch {
                op: "part_attention",
                lhs: vec![n, d],
                rhs: patch_heads[h].shape().to_vec(),
            });
        }
        let cls = g.constant(Tensor::row_vector(cls_heads.row(h)));
        let tokens = Var::concat_rows(&[cls, g.constant(patch_heads[h].clone())])?;
        let q = cls.matmul(g.constant(proj_q[h].clone()))?;
        let k = tokens.matmul(g.constant(proj_k[h].clone()))?;
        let w = q.matmul(k.t()?)?.scale(scale)?.row_softmax()?;
        rows.push(w.slice_cols(1, n + 1)?);
    }
    Ok((*Var::concat_rows(&rows)?.value()).clone())
}

/// Binary top-`rho` mask per attention row: patches whose attention is at
/// least the `ceil(rho·N)`-th largest value. Ties at the threshold are all
/// kept, and at least one patch is always selected.
pub fn prior_mask(attention: &Tensor, rho: f64) -> Tensor {
    let (m, n) = (attention.rows(), attention.cols());
    let k = ((rho * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut mask = Tensor::zeros(m, n);
    for h in 0..m {
        let row = attention.row(h);
        let mut sorted = row.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let thr = sorted[k - 1];
        for (p, &a) in row.iter().enumerate() {
            if a >= thr {
                mask.set(h, p, 1.0);
            }
        }
    }
    mask
}

/// Aggregation weights turning patch features into priors (`M×N`).
pub fn prior_weights(attention: &Tensor, rho: f64, mode: PriorMode) -> Tensor {
    let mut w = prior_mask(attention, rho);
    if mode == PriorMode::Mean {
        for h in 0..w.rows() {
            let row = w.row_mut(h);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= s);
        }
    }
    w
}

/// Part priors `F_prior` (`M×C`): per head, the aggregate of the patch
/// features selected by the attention threshold.
pub fn extract_priors<'g>(
    patches: Var<'g>,
    attention: &Tensor,
    rho: f64,
    mode: PriorMode,
) -> Result<Var<'g>> {
    let w = patches
        .graph()
        .constant(prior_weights(attention, rho, mode));
    w.matmul(patches)
}

/// Image-specific queries: single-head cross-attention from the shared
/// queries onto the priors, added back residually.
pub fn specialize_queries<'g>(bank: &BoundQueryBank<'g>, priors: Var<'g>) -> Result<Var<'g>> {
    let c = bank.queries.value().cols() as f64;
    let q = bank.queries.matmul(bank.prior_proj_q)?;
    let k = priors.matmul(bank.prior_proj_k)?;
    let v = priors.matmul(bank.prior_proj_v)?;
    let attn = q.matmul(k.t()?)?.scale(1.0 / c.sqrt())?.row_softmax()?;
    bank.queries.add(attn.matmul(v)?)
}

/// Standard Gumbel noise, `T×N`.
pub fn gumbel_noise<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for x in t.data_mut() {
        let mut u: f64 = rng.random();
        while u <= 0.0 {
            u = rng.random();
        }
        *x = -(-u.ln()).ln();
    }
    t
}

/// Output of [`straight_through`].
#[derive(Clone, Debug)]
pub struct StraightThrough<'g> {
    /// `T×N`, forward value exactly one-hot per column.
    pub hard: Var<'g>,
    /// `T×N` Gumbel-Softmax probabilities.
    pub soft: Var<'g>,
    /// Winning query per patch.
    pub winners: Vec<usize>,
}

/// Per patch column, softmax over queries of `(logits + noise) / tau`, then
/// `hard = one_hot(argmax) + (soft - sg(soft))`: exactly binary forward,
/// gradient of `soft` backward. Ties go to the lowest query index.
pub fn straight_through<'g>(
    logits: Var<'g>,
    noise: Option<&Tensor>,
    tau: f64,
) -> Result<StraightThrough<'g>> {
    let g = logits.graph();
    let shape = logits.shape();
    let (t, n) = (shape[0], shape[1]);
    let mut z = logits.t()?;
    if let Some(noise) = noise {
        if noise.shape() != [t, n] {
            return Err(TensorError::ShapeMismatch {
                op: "straight_through",
                lhs: shape,
                rhs: noise.shape().to_vec(),
            });
        }
        z = z.add(g.constant(noise.transpose()))?;
    }
    let soft_t = z.scale(1.0 / tau)?.row_softmax()?;

    let sv = soft_t.value();
    let mut one_hot = Tensor::zeros(n, t);
    for p in 0..n {
        let row = sv.row(p);
        let mut best = 0;
        for (q, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = q;
            }
        }
        one_hot.set(p, best, 1.0);
    }
    let one_hot = g.decide(one_hot)?;
    let winners = (0..n)
        .map(|p| one_hot.row(p).iter().position(|&v| v == 1.0).unwrap_or(0))
        .collect();
    let hard_t = soft_t
        .sub(soft_t.stop_gradient()?)?
        .add(g.constant(one_hot))?;
    Ok(StraightThrough {
        hard: hard_t.t()?,
        soft: soft_t.t()?,
        winners,
    })
}

/// One image's discovered parts.
#[derive(Clone, Debug)]
pub struct PartAssignment<'g> {
    /// Straight-through `H_part`, `T×N`.
    pub hard: Var<'g>,
    /// `H_g`, `T×N`.
    pub soft: Var<'g>,
    /// `P_part`, `T×C`; empty parts are zero rows.
    pub part_features: Var<'g>,
    /// Patches per query.
    pub occupancy: Vec<usize>,
    pub empty_mask: Vec<bool>,
    /// Query index per patch.
    pub winners: Vec<usize>,
}

/// Debug record of one assignment, for external part visualization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssignmentDump {
    pub image_id: u32,
    pub view_id: u32,
    pub occupancy: Vec<usize>,
    pub empty_mask: Vec<bool>,
    pub assignment: Vec<usize>,
}

impl PartAssignment<'_> {
    pub fn dump(&self, image_id: u32, view_id: u32) -> AssignmentDump {
        AssignmentDump {
            image_id,
            view_id,
            occupancy: self.occupancy.clone(),
            empty_mask: self.empty_mask.clone(),
            assignment: self.winners.clone(),
        }
    }

    pub fn parts(&self) -> usize {
        self.occupancy.len()
    }
}

/// Assigns every patch to one query and aggregates part features.
///
/// `noise` is the Gumbel sample for this image (`T×N`); pass `None` for
/// deterministic evaluation.
pub fn hard_assign<'g>(
    bank: &BoundQueryBank<'g>,
    image_queries: Var<'g>,
    patches: Var<'g>,
    noise: Option<&Tensor>,
) -> Result<PartAssignment<'g>> {
    let g = patches.graph();
    let c = patches.value().cols() as f64;
    let q = image_queries.matmul(bank.assign_proj_q)?;
    let k = patches.matmul(bank.assign_proj_k)?;
    let logits = q.matmul(k.t()?)?.scale(1.0 / c.sqrt())?;
    let st = straight_through(logits, noise, bank.gumbel_tau)?;

    let t = image_queries.value().rows();
    let mut occupancy = vec![0usize; t];
    for &w in &st.winners {
        occupancy[w] += 1;
    }
    let empty_mask: Vec<bool> = occupancy.iter().map(|&o| o == 0).collect();
    let row_scale: Vec<f64> = occupancy
        .iter()
        .map(|&o| match (o, bank.prior_mode) {
            (0, _) => 0.0,
            (o, PriorMode::Mean) => 1.0 / o as f64,
            (_, PriorMode::Sum) => 1.0,
        })
        .collect();
    let part_features = st
        .hard
        .matmul(patches)?
        .mul(g.constant(Tensor::column_vector(&row_scale)))?;
    Ok(PartAssignment {
        hard: st.hard,
        soft: st.soft,
        part_features,
        occupancy,
        empty_mask,
        winners: st.winners,
    })
}

/// Priors, specialization and hard assignment for one image.
pub fn discover_parts<'g>(
    bank: &BoundQueryBank<'g>,
    patches: Var<'g>,
    attention: &Tensor,
    noise: Option<&Tensor>,
) -> Result<PartAssignment<'g>> {
    let priors = extract_priors(
        patches,
        attention,
        bank.prior_threshold_rho,
        bank.prior_mode,
    )?;
    let q_img = specialize_queries(bank, priors)?;
    hard_assign(bank, q_img, patches, noise)
}

/// Query indices non-empty in both masks; part `t` of one image
/// corresponds to part `t` of the other.
pub fn corresponding_parts(a_empty: &[bool], b_empty: &[bool]) -> Vec<usize> {
    a_empty
        .iter()
        .zip(b_empty)
        .enumerate()
        .filter(|(_, (a, b))| !**a && !**b)
        .map(|(t, _)| t)
        .collect()
}

pub fn correspond(a: &PartAssignment<'_>, b: &PartAssignment<'_>) -> Vec<(usize, usize)> {
    corresponding_parts(&a.empty_mask, &b.empty_mask)
        .into_iter()
        .map(|t| (t, t))
        .collect()
}
