use super::{Graph, OpKind, Result, Tensor, Var};

/// Denominator floor for the relative error, so that near-zero gradients
/// are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub tol: f64,
    pub worst: Option<GradcheckEntry>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tol
    }
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, element by element.
///
/// Every input is registered as a tracked leaf. Non-differentiable
/// decisions taken during the first evaluation (stop-gradient values,
/// argmins, hard assignments) are replayed unchanged in the perturbed
/// evaluations, so paths blocked by `stop_gradient` are excluded from the
/// numerical side too.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradcheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    gradcheck_with_fault(f, inputs, step, tol, None)
}

#[doc(hidden)]
pub fn gradcheck_with_fault<F>(
    f: F,
    inputs: &[Tensor],
    step: f64,
    tol: f64,
    fault: Option<OpKind>,
) -> Result<GradcheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    g.inject_sign_flip(fault);
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = f(&g, &vars)?;
    let tape = g.take_replay();
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(v)).collect();

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let g = Graph::replaying(tape.clone());
        let vars: Vec<Var<'_>> = perturbed.iter().map(|t| g.param(t.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };

    let mut report = GradcheckReport {
        checked: 0,
        max_rel_error: 0.0,
        tol,
        worst: None,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        for k in 0..input.numel() {
            let x = input.data()[k];
            work[i].data_mut()[k] = x + step;
            let up = eval(&work)?;
            work[i].data_mut()[k] = x - step;
            let down = eval(&work)?;
            work[i].data_mut()[k] = x;

            let numeric = (up - down) / (2.0 * step);
            let a = analytic[i].data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(GradcheckEntry {
                    input: i,
                    index: k,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
