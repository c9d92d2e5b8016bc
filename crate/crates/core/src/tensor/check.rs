//! Central-difference gradient oracle.

use super::{backward, Tape, Tensor};
use crate::error::Result;

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// (input index, element index) where the worst relative error occurred.
    pub worst: (usize, usize),
}

impl FdReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Analytic gradients of `f` with respect to every input, via one taped
/// forward and backward. Inputs are `(shape, values)` pairs.
pub fn finite_diff_grad<F>(f: &F, inputs: &[(Vec<usize>, Vec<f64>)]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let tape = Tape::new();
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|(shape, vals)| tape.leaf(shape.clone(), vals.clone()))
        .collect();
    let loss = f(&leaves)?;
    backward(&loss)?;
    Ok(leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
        .collect())
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for a
/// scalar-valued `f` over constant (untaped) inputs.
pub fn numeric_grad<F>(
    f: &F,
    inputs: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let eval = |perturbed: &[(Vec<usize>, Vec<f64>)]| -> Result<f64> {
        let consts: Vec<Tensor> = perturbed
            .iter()
            .map(|(shape, vals)| Tensor::constant(shape.clone(), vals.clone()))
            .collect();
        Ok(f(&consts)?.item())
    };
    let mut work: Vec<(Vec<usize>, Vec<f64>)> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for (ti, (_, vals)) in inputs.iter().enumerate() {
        let mut g = vec![0.0; vals.len()];
        for (ei, gi) in g.iter_mut().enumerate() {
            let orig = vals[ei];
            work[ti].1[ei] = orig + eps;
            let plus = eval(&work)?;
            work[ti].1[ei] = orig - eps;
            let minus = eval(&work)?;
            work[ti].1[ei] = orig;
            *gi = (plus - minus) / (2.0 * eps);
        }
        out.push(g);
    }
    Ok(out)
}

/// Worst-case comparison of two gradient sets.
///
/// The relative-error denominator is floored at 1e-4: central differences on
/// an O(1) loss carry ~1e-10 cancellation noise, which would dominate the
/// ratio on genuinely zero gradient components. Components below the floor
/// are therefore judged on absolute error at that scale, which still flags
/// any real defect by orders of magnitude.
pub fn compare_grads(analytic: &[Vec<f64>], numeric: &[Vec<f64>]) -> FdReport {
    let mut report = FdReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst: (0, 0),
    };
    for (ti, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (ei, (&av, &nv)) in a.iter().zip(n).enumerate() {
            let abs = (av - nv).abs();
            let rel = abs / av.abs().max(nv.abs()).max(1e-4);
            if abs > report.max_abs_err {
                report.max_abs_err = abs;
            }
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, ei);
            }
        }
    }
    report
}

/// Compare backward gradients of a scalar-valued `f` against central
/// differences elementwise.
pub fn finite_diff_check<F>(
    f: &F,
    inputs: &[(Vec<usize>, Vec<f64>)],
    eps: f64,
) -> Result<FdReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    let analytic = finite_diff_grad(f, inputs)?;
    let numeric = numeric_grad(f, inputs, eps)?;
    Ok(compare_grads(&analytic, &numeric))
}
