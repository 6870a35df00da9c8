//! Finite-difference checks over every differentiable primitive, the part
//! pipeline, each objective term and the full training objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::features::{synth_generate, SynthSpec};
use crate::objectives::{
    all_min_loss, build_pair_plan, diversity_loss, gcd_losses, BatchItem, Head, ObjectiveConfig,
    ObjectiveError, PartSet,
};
use crate::parts::{
    extract_priors, gumbel_noise, hard_assign, specialize_queries, straight_through,
    BoundQueryBank, PriorMode,
};
use crate::tensor::gradcheck_with_fault;
use crate::tensor::{Graph, OpKind, Result, Tensor, TensorError, Var};
use crate::training::{forward, make_batch, BoundModel, ModelState, TrainConfig, TrainError};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradRow {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

type Check = Box<dyn Fn(Option<OpKind>) -> Result<GradRow>>;

fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("shape")
}

/// Random values bounded away from zero, for ops with a kink or pole there.
fn away_from_zero(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    randn(rows, cols, rng).map(|x| if x >= 0.0 { x + 0.1 } else { x - 0.1 })
}

/// `sum(out ∘ R)` for a fixed random `R`, so every output element feeds
/// the scalar with a generic weight.
fn weighted<'g>(out: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let s = out.shape();
    let (r, c) = if s.len() == 2 { (s[0], s[1]) } else { (1, 1) };
    let w = randn(r, c, &mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed));
    out.mul(out.graph().constant(w.reshape_like(&out.value())))?
        .sum()
}

trait ReshapeLike {
    fn reshape_like(self, other: &Tensor) -> Tensor;
}

impl ReshapeLike for Tensor {
    fn reshape_like(self, other: &Tensor) -> Tensor {
        Tensor::new(other.shape().to_vec(), self.into_data()).expect("same numel")
    }
}

fn row<F>(name: &str, inputs: Vec<Tensor>, f: F, fault: Option<OpKind>) -> Result<GradRow>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let r = gradcheck_with_fault(f, &inputs, STEP, TOLERANCE, fault)?;
    Ok(GradRow {
        name: name.to_string(),
        checked: r.checked,
        max_rel_error: r.max_rel_error,
        passed: r.passed(),
    })
}

macro_rules! prim {
    ($list:ident, $name:expr, $seed:expr, |$rng:ident| $inputs:expr, |$v:ident| $body:expr) => {
        $list.push((
            $name,
            Box::new(move |fault| {
                let $rng = &mut ChaCha8Rng::seed_from_u64($seed);
                row($name, $inputs, |_, $v| weighted($body, $seed), fault)
            }),
        ));
    };
}

/// Tensor failures pass through; anything else means the fixed toy inputs
/// are malformed, which is a bug in this module.
fn toy(e: ObjectiveError) -> TensorError {
    match e {
        ObjectiveError::Tensor(t) => t,
        other => panic!("toy batch is well formed: {other}"),
    }
}

fn bank_from<'g>(v: &[Var<'g>], tau: f64, rho: f64) -> BoundQueryBank<'g> {
    BoundQueryBank {
        queries: v[0],
        prior_proj_q: v[1],
        prior_proj_k: v[2],
        prior_proj_v: v[3],
        assign_proj_q: v[4],
        assign_proj_k: v[5],
        gumbel_tau: tau,
        prior_threshold_rho: rho,
        prior_mode: PriorMode::Mean,
    }
}

fn small_bank_inputs(t: usize, c: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    let mut v = vec![randn(t, c, rng)];
    for _ in 0..5 {
        v.push(randn(c, c, rng).map(|x| 2.0 * x / (c as f64).sqrt()));
    }
    v
}

fn checks(seed: u64) -> Vec<(&'static str, Check)> {
    let s = seed;
    let mut list: Vec<(&'static str, Check)> = Vec::new();
    prim!(
        list,
        "add",
        s,
        |r| vec![randn(3, 4, r), randn(1, 4, r)],
        |v| v[0].add(v[1])?
    );
    prim!(
        list,
        "sub",
        s,
        |r| vec![randn(3, 4, r), randn(3, 1, r)],
        |v| v[0].sub(v[1])?
    );
    prim!(
        list,
        "mul",
        s,
        |r| vec![randn(3, 4, r), randn(3, 4, r)],
        |v| v[0].mul(v[1])?
    );
    prim!(
        list,
        "div",
        s,
        |r| vec![randn(3, 4, r), away_from_zero(3, 1, r)],
        |v| v[0].div(v[1])?
    );
    prim!(list, "scale", s, |r| vec![randn(2, 3, r)], |v| v[0]
        .scale(-1.7)?);
    prim!(list, "add_scalar", s, |r| vec![randn(2, 3, r)], |v| v[0]
        .add_scalar(0.3)?);
    prim!(
        list,
        "matmul",
        s,
        |r| vec![randn(3, 4, r), randn(4, 2, r)],
        |v| v[0].matmul(v[1])?
    );
    prim!(list, "transpose", s, |r| vec![randn(3, 4, r)], |v| v[0]
        .t()?);
    prim!(
        list,
        "concat_rows",
        s,
        |r| vec![randn(2, 3, r), randn(1, 3, r)],
        |v| Var::concat_rows(&[v[0], v[1], v[0]])?
    );
    prim!(list, "slice_cols", s, |r| vec![randn(3, 5, r)], |v| v[0]
        .slice_cols(1, 4)?);
    prim!(list, "select_rows", s, |r| vec![randn(4, 3, r)], |v| v[0]
        .select_rows(
        &[2, 0, 2]
    )?);
    prim!(list, "row_softmax", s, |r| vec![randn(3, 4, r)], |v| v[0]
        .row_softmax(
    )?);
    prim!(list, "exp", s, |r| vec![randn(3, 3, r)], |v| v[0].exp()?);
    prim!(
        list,
        "log",
        s,
        |r| vec![randn(3, 3, r).map(|x| x.abs() + 0.2)],
        |v| v[0].log()?
    );
    prim!(list, "relu", s, |r| vec![away_from_zero(3, 4, r)], |v| v[0]
        .relu()?);
    prim!(list, "row_min", s, |r| vec![randn(4, 5, r)], |v| v[0]
        .row_min()?
        .0);
    prim!(list, "sum", s, |r| vec![randn(3, 4, r)], |v| v[0].sum()?);
    prim!(list, "mean", s, |r| vec![randn(3, 4, r)], |v| v[0]
        .mean()?);
    prim!(list, "mean_axis_0", s, |r| vec![randn(3, 4, r)], |v| v[0]
        .mean_axis(
        0
    )?);
    prim!(list, "mean_axis_1", s, |r| vec![randn(3, 4, r)], |v| v[0]
        .mean_axis(
        1
    )?);
    prim!(list, "sum_axis", s, |r| vec![randn(3, 4, r)], |v| v[0]
        .sum_axis(0)?);
    prim!(
        list,
        "l2_normalize_rows",
        s,
        |r| vec![randn(3, 4, r)],
        |v| v[0].l2_normalize_rows()?
    );
    prim!(
        list,
        "cosine_rows",
        s,
        |r| vec![randn(3, 4, r), randn(3, 4, r)],
        |v| v[0].cosine_rows(v[1])?
    );
    prim!(
        list,
        "cosine_matrix",
        s,
        |r| vec![randn(3, 4, r), randn(2, 4, r)],
        |v| v[0].cosine_matrix(v[1])?
    );
    prim!(list, "logsumexp_rows", s, |r| vec![randn(3, 4, r)], |v| v
        [0]
    .logsumexp_rows()?);
    prim!(list, "stop_gradient", s, |r| vec![randn(3, 3, r)], |v| v[0]
        .stop_gradient()?
        .mul(v[0])?);

    list.push((
        "straight_through",
        Box::new(move |fault| {
            let rng = &mut ChaCha8Rng::seed_from_u64(s);
            let logits = randn(3, 6, rng);
            let noise = gumbel_noise(3, 6, rng);
            row(
                "straight_through",
                vec![logits],
                |_, v| weighted(straight_through(v[0], Some(&noise), 0.7)?.hard, s),
                fault,
            )
        }),
    ));
    list.push((
        "part_pipeline",
        Box::new(move |fault| {
            let rng = &mut ChaCha8Rng::seed_from_u64(s);
            let (t, c, n) = (3, 4, 7);
            let mut inputs = small_bank_inputs(t, c, rng);
            inputs.push(randn(n, c, rng));
            let attention = randn(2, n, rng).map(f64::abs);
            let noise = gumbel_noise(t, n, rng);
            row(
                "part_pipeline",
                inputs,
                |_, v| {
                    let bank = bank_from(v, 0.8, 0.3);
                    let priors = extract_priors(v[6], &attention, 0.3, PriorMode::Mean)?;
                    let q = specialize_queries(&bank, priors)?;
                    weighted(hard_assign(&bank, q, v[6], Some(&noise))?.part_features, s)
                },
                fault,
            )
        }),
    ));
    list.push((
        "all_min_loss",
        Box::new(move |fault| {
            let rng = &mut ChaCha8Rng::seed_from_u64(s);
            let items: Vec<BatchItem> = [
                (0, 0, Some(0)),
                (0, 1, Some(0)),
                (1, 0, Some(1)),
                (1, 1, Some(1)),
                (2, 0, None),
                (2, 1, None),
            ]
            .iter()
            .map(|&(image_id, view_id, label)| BatchItem {
                image_id,
                view_id,
                label,
            })
            .collect();
            let inputs: Vec<Tensor> = (0..items.len()).map(|_| randn(3, 4, rng)).collect();
            let plan_rng = ChaCha8Rng::seed_from_u64(s);
            row(
                "all_min_loss",
                inputs,
                move |_, v| {
                    let sets: Vec<PartSet> = v
                        .iter()
                        .map(|&f| PartSet {
                            features: f,
                            empty: vec![false, false, false],
                        })
                        .collect();
                    let plan =
                        build_pair_plan(&items, &sets, 4, 3, &mut plan_rng.clone()).map_err(toy)?;
                    all_min_loss(&plan, &sets, 0.3).map_err(toy)
                },
                fault,
            )
        }),
    ));
    list.push((
        "diversity_loss",
        Box::new(move |fault| {
            let rng = &mut ChaCha8Rng::seed_from_u64(s);
            row(
                "diversity_loss",
                vec![randn(4, 5, rng)],
                |_, v| {
                    diversity_loss(&PartSet {
                        features: v[0],
                        empty: vec![false, false, true, false],
                    })
                    .map_err(toy)
                },
                fault,
            )
        }),
    ));
    list.push((
        "gcd_terms",
        Box::new(move |fault| {
            let rng = &mut ChaCha8Rng::seed_from_u64(s);
            let items: Vec<BatchItem> =
                [(0, 0, Some(0)), (0, 1, Some(0)), (1, 0, None), (1, 1, None)]
                    .iter()
                    .map(|&(image_id, view_id, label)| BatchItem {
                        image_id,
                        view_id,
                        label,
                    })
                    .collect();
            let cfg = ObjectiveConfig::default();
            row(
                "gcd_terms",
                vec![randn(4, 5, rng), randn(5, 3, rng), randn(5, 2, rng)],
                |_, v| {
                    let head = Head {
                        projector: v[1],
                        classifier: v[2],
                    };
                    let t = gcd_losses(v[0], &items, &head, &cfg).map_err(toy)?;
                    t.rep_supervised
                        .add(t.rep_unsupervised.scale(1.3)?)?
                        .add(t.cls_supervised.scale(0.7)?)?
                        .add(t.cls_unsupervised.scale(1.1)?)
                },
                fault,
            )
        }),
    ));
    list.push((
        "full_objective",
        Box::new(move |fault| full_objective(s, fault)),
    ));
    list
}

/// Toy two-image batch (four views) through the whole training objective,
/// differentiated with respect to every model parameter.
pub fn full_objective(seed: u64, fault: Option<OpKind>) -> Result<GradRow> {
    let spec = SynthSpec {
        num_classes: 2,
        num_known_classes: 1,
        parts_per_class: 2,
        patch_count: 8,
        dim: 6,
        heads: 2,
        patches_per_part: 3,
        background_patches: 2,
        images_per_class: 1,
        rng_seed: seed,
        ..SynthSpec::default()
    };
    let (ds, _) = synth_generate(&spec).expect("valid toy spec");
    let cfg = TrainConfig {
        batch_size: 2,
        parts: 2,
        projector_dim: 4,
        adapter: true,
        seed,
        ..TrainConfig::default()
    };
    let mut state = ModelState::init(&cfg, spec.dim, ds.class_count);
    // One labeled image of class 0 and one unlabeled image of class 1.
    let (mut l, mut u) = (ds.records[0].clone(), ds.records[1].clone());
    l.is_labeled = true;
    u.is_labeled = false;
    let (l, u) = (vec![l], vec![u]);
    let batch = make_batch(&l, &u, &cfg, &mut state.rng).expect("toy batch");
    // Perturb the identity adapter so its gradient path is generic.
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let adapter = state.adapter.as_mut().expect("adapter on");
    for x in adapter.data_mut() {
        *x += 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    let inputs: Vec<Tensor> = state.params().into_iter().map(|(_, t)| t.clone()).collect();
    let rng0 = state.rng.clone();
    let bank = state.bank.clone();
    row(
        "full_objective",
        inputs,
        |_, v| {
            let model = BoundModel {
                bank: bank_from(v, bank.gumbel_tau, bank.prior_threshold_rho),
                head: Head {
                    projector: v[6],
                    classifier: v[7],
                },
                adapter: Some(v[8]),
            };
            let mut r = rng0.clone();
            match forward(model.bank.queries.graph(), model, &batch, &cfg, &mut r) {
                Ok(f) => Ok(f.loss),
                Err(TrainError::Tensor(e))
                | Err(TrainError::Objective(ObjectiveError::Tensor(e))) => Err(e),
                Err(e) => panic!("toy batch is well formed: {e}"),
            }
        },
        fault,
    )
}

/// Names of every row, in run order.
pub fn row_names() -> Vec<&'static str> {
    checks(0).into_iter().map(|(n, _)| n).collect()
}

/// Runs every check. `fault` flips the sign of one backward rule, as a
/// negative control.
pub fn run(seed: u64, fault: Option<OpKind>) -> Result<Vec<GradRow>> {
    checks(seed).into_iter().map(|(_, c)| c(fault)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_row_passes() {
        for r in run(0, None).unwrap() {
            assert!(r.passed, "{r:?}");
            assert!(r.checked > 0);
        }
    }

    #[test]
    fn sign_flip_fails_its_row() {
        let rows = run(0, Some(OpKind::RowSoftmax)).unwrap();
        let by = |n: &str| rows.iter().find(|r| r.name == n).unwrap().passed;
        assert!(!by("row_softmax"));
        assert!(by("add"));
        let rows = run(0, Some(OpKind::MatMul)).unwrap();
        assert!(
            !rows
                .iter()
                .find(|r| r.name == "full_objective")
                .unwrap()
                .passed
        );
    }

    #[test]
    fn seeded_runs_repeat_exactly() {
        assert_eq!(run(3, None).unwrap(), run(3, None).unwrap());
    }
}
