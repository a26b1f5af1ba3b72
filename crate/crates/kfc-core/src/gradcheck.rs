//! Central finite-difference gradient checking.
//!
//! The oracle only ever calls the forward pass: `loss_fn` is re-evaluated
//! with perturbed leaf values, so the check stays independent of the
//! backward implementation it validates.

use crate::tensor::Tensor;

/// Relative error between an analytic and a numeric gradient entry, with an
/// absolute floor so near-zero gradients do not blow the ratio up.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    // The floor keeps O(h²) truncation noise on near-zero gradients from
    // dominating the ratio: entries below ~1e-4 are effectively checked
    // against an absolute tolerance of tol·1e-4.
    let denom = analytic.abs().max(numeric.abs()).max(1e-4);
    (analytic - numeric).abs() / denom
}

/// Checks d(loss)/d(leaf) for every leaf against central differences.
///
/// `loss_fn` must rebuild the graph from the current leaf values on every
/// call and return a scalar. Panics with a description of the first failing
/// entry when the relative error exceeds `tol`.
pub fn check_gradients(leaves: &[Tensor], loss_fn: impl Fn() -> Tensor, h: f64, tol: f64) {
    for leaf in leaves {
        leaf.zero_grad();
    }
    let loss = loss_fn();
    loss.backward();
    let analytic: Vec<Vec<f64>> = leaves
        .iter()
        .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.to_vec().len()]))
        .collect();

    for (li, leaf) in leaves.iter().enumerate() {
        let base = leaf.to_vec();
        for i in 0..base.len() {
            let mut up = base.clone();
            up[i] += h;
            leaf.set_data(up);
            let f_up = loss_fn().item();
            let mut down = base.clone();
            down[i] -= h;
            leaf.set_data(down);
            let f_down = loss_fn().item();
            leaf.set_data(base.clone());
            let numeric = (f_up - f_down) / (2.0 * h);
            let err = rel_err(analytic[li][i], numeric);
            assert!(
                err <= tol,
                "gradient mismatch at leaf {li} entry {i}: analytic {} vs numeric {} (rel err {err:.3e})",
                analytic[li][i],
                numeric
            );
        }
    }
    for leaf in leaves {
        leaf.zero_grad();
    }
}
