//! Central finite-difference validation of backpropagated gradients.
//!
//! This is the independent oracle for every differentiable path in the crate:
//! it never touches the tape's backward rules, only repeated forward
//! evaluations with perturbed inputs.

use crate::autodiff::{NodeId, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_RTOL: f64 = 1e-4;
pub const DEFAULT_ATOL: f64 = 1e-6;

/// One gradient-check mismatch.
#[derive(Debug)]
pub struct GradMismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare backprop gradients of a scalar-valued function against central
/// finite differences with step `h`.
///
/// `f` must be deterministic: it is re-run twice per input element. It gets a
/// fresh tape and leaf ids for each input tensor and returns the loss node.
pub fn check_gradients(
    inputs: &[Tensor],
    h: f64,
    rtol: f64,
    atol: f64,
    f: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
) -> Result<(), GradMismatch> {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &ids);
        tape.value(loss).item()
    };

    // Analytic gradients in one pass.
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &ids);
    let grads = tape.backward(loss).expect("backward failed in gradcheck");

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[ti], input.shape());
        for e in 0..input.len() {
            let orig = work[ti].data()[e];
            work[ti].data_mut()[e] = orig + h;
            let fp = eval(&work);
            work[ti].data_mut()[e] = orig - h;
            let fm = eval(&work);
            work[ti].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs());
            let ok = if denom < 1.0 {
                (a - numeric).abs() <= atol.max(rtol * denom)
            } else {
                (a - numeric).abs() / denom <= rtol
            };
            if !ok {
                return Err(GradMismatch {
                    input: ti,
                    element: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(())
}

/// check_gradients with the crate-default tolerances.
pub fn check_default(
    inputs: &[Tensor],
    f: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
) -> Result<(), GradMismatch> {
    check_gradients(inputs, DEFAULT_STEP, DEFAULT_RTOL, DEFAULT_ATOL, f)
}

/// Finite-difference check on a random subsample of coordinates per input,
/// for functions whose parameter count makes exhaustive checks too slow.
/// Which coordinates are perturbed depends on `seed`.
pub fn check_gradients_sampled(
    inputs: &[Tensor],
    max_coords: usize,
    seed: u64,
    f: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
) -> Result<(), GradMismatch> {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = f(&mut tape, &ids);
        tape.value(loss).item()
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &ids);
    let grads = tape.backward(loss).expect("backward failed in gradcheck");

    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let h = DEFAULT_STEP;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[ti], input.shape());
        let mut coords: Vec<usize> = (0..input.len()).collect();
        coords.shuffle(&mut rng);
        coords.truncate(max_coords);
        for e in coords {
            let orig = work[ti].data()[e];
            work[ti].data_mut()[e] = orig + h;
            let fp = eval(&work);
            work[ti].data_mut()[e] = orig - h;
            let fm = eval(&work);
            work[ti].data_mut()[e] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[e];
            let denom = a.abs().max(numeric.abs());
            let ok = if denom < 1.0 {
                (a - numeric).abs() <= DEFAULT_ATOL.max(DEFAULT_RTOL * denom)
            } else {
                (a - numeric).abs() / denom <= DEFAULT_RTOL
            };
            if !ok {
                return Err(GradMismatch {
                    input: ti,
                    element: e,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(())
}
