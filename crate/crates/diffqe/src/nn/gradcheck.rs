//! Central finite-difference gradient checking. Test support: the checker is
//! public so integration suites can verify analytic gradients of full models
//! without reaching into private state.

use super::{Param, ParamVisitor};
use crate::num::Scalar;

fn with_param<M, F, V>(model: &mut M, visit: &V, target: usize, f: impl FnOnce(&mut Param<F>))
where
    F: Scalar,
    V: Fn(&mut M, &mut dyn ParamVisitor<F>),
{
    let mut i = 0usize;
    let mut f = Some(f);
    visit(model, &mut |_: &str, p: &mut Param<F>| {
        if i == target {
            if let Some(f) = f.take() {
                f(p);
            }
        }
        i += 1;
    });
}

/// Compare accumulated analytic gradients against central differences.
///
/// Every `stride`-th element of each parameter tensor is perturbed by
/// ±`eps`; the relative error against the stored gradient must stay below
/// `rel_tol` (with a small absolute floor for near-zero pairs). Returns the
/// number of comparisons made; panics with the parameter name on mismatch.
pub fn check<M, F, V>(
    model: &mut M,
    visit: V,
    mut loss: impl FnMut(&mut M) -> F,
    stride: usize,
    eps: f64,
    rel_tol: f64,
) -> usize
where
    F: Scalar,
    V: Fn(&mut M, &mut dyn ParamVisitor<F>),
{
    let mut names: Vec<String> = Vec::new();
    let mut grads: Vec<Vec<F>> = Vec::new();
    visit(model, &mut |n: &str, p: &mut Param<F>| {
        names.push(n.to_string());
        grads.push(p.grad.clone());
    });
    let e = F::from_f64(eps);
    let two = F::from_f64(2.0 * eps);
    let mut checked = 0usize;
    for pi in 0..names.len() {
        for j in (0..grads[pi].len()).step_by(stride.max(1)) {
            with_param(model, &visit, pi, |p| p.value[j] = p.value[j] + e);
            let up = loss(model);
            with_param(model, &visit, pi, |p| p.value[j] = p.value[j] - two);
            let down = loss(model);
            with_param(model, &visit, pi, |p| p.value[j] = p.value[j] + e);
            let fd = (up - down).to_f64_() / (2.0 * eps);
            let an = grads[pi][j].to_f64_();
            let denom = fd.abs().max(an.abs());
            let ok = if denom < 1e-7 {
                (fd - an).abs() <= 1e-7
            } else {
                (fd - an).abs() / denom < rel_tol
            };
            assert!(
                ok,
                "gradient mismatch at {}[{}]: finite-diff {fd:e}, analytic {an:e}",
                names[pi], j
            );
            checked += 1;
        }
    }
    checked
}
