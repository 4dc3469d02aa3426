//! Shared helpers for the integration test suites: a central finite-difference
//! gradient oracle that is independent of the backward implementations it
//! checks, plus small random-tensor utilities.

#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use tassel_core::tensor::graph::{Graph, Mode, NodeId};
use tassel_core::tensor::Tensor;

pub const FD_STEP: f64 = 1e-3;

/// Relative error with the unit floor that keeps tiny gradients comparable:
/// `|a - n| / max(1, |n|)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Checks the analytic gradients of a scalar-valued builder against central
/// finite differences on every element of every parameter.
///
/// `build` must be a pure function of the parameter values (any internal
/// randomness, e.g. dropout masks, has to be replayed identically on every
/// call). Returns the worst relative error observed.
pub fn fd_check(
    name: &str,
    mode: Mode,
    params: &[Tensor<f64>],
    tol: f64,
    build: impl Fn(&mut Graph<f64>, &[NodeId]) -> NodeId,
) -> f64 {
    let eval = |values: &[Tensor<f64>]| -> f64 {
        let mut g = Graph::new(mode);
        let ids: Vec<NodeId> = values.iter().map(|t| g.param(t.clone())).collect();
        let loss = build(&mut g, &ids);
        g.value(loss).item()
    };

    // Analytic pass.
    let mut g = Graph::new(mode);
    let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &ids);
    let grads = g.backward(loss).expect("backward failed");

    let mut worst = 0.0f64;
    let mut values: Vec<Tensor<f64>> = params.to_vec();
    for (pi, id) in ids.iter().enumerate() {
        let analytic = grads
            .get(*id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(params[pi].shape()));
        for ei in 0..params[pi].len() {
            let orig = values[pi].data()[ei];
            values[pi].data_mut()[ei] = orig + FD_STEP;
            let up = eval(&values);
            values[pi].data_mut()[ei] = orig - FD_STEP;
            let down = eval(&values);
            values[pi].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let err = rel_err(analytic.data()[ei], numeric);
            assert!(
                err < tol,
                "{name}: param {pi} elem {ei}: analytic {} vs numeric {numeric} (rel err {err:.3e})",
                analytic.data()[ei]
            );
            worst = worst.max(err);
        }
    }
    worst
}

/// Random tensor with entries in [lo, hi).
pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random tensor bounded away from zero, for kink-sensitive ops like relu.
pub fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub mod gradsuite;
