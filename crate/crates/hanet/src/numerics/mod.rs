//! Deterministic vector/matrix arithmetic, seeded random streams, the
//! optimizer, and gradient verification.

pub mod autograd;
pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod rng;

pub use autograd::{Tape, Var};
pub use gradcheck::{finite_diff_check, GradCheckReport};
pub use matrix::{cosine, dot, Matrix};
pub use optim::{adamw_step, OptimizerState, ParamTensors};
pub use rng::{RngStream, RngSuite};

use crate::error::{Error, Result};

/// Probabilities from logits via max-subtraction; strictly positive entries
/// that sum to 1 within 1e-9.
pub fn softmax_stable(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::InvalidArgument(
            "softmax_stable: empty logits".to_string(),
        ));
    }
    for v in logits {
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "softmax_stable: non-finite logit {v}"
            )));
        }
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let sum: f64 = out.iter().sum();
    for o in out.iter_mut() {
        *o /= sum;
    }
    Ok(out)
}

/// Draw `count` vectors from a diagonal Gaussian, dimension j distributed as
/// Normal(mean[j], variance[j]). Deterministic given the stream state; each
/// dimension consumes exactly one Box-Muller pair, so zero-variance
/// dimensions still advance the counter identically.
pub fn sample_gaussian(
    mean: &[f64],
    variance: &[f64],
    count: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>> {
    if mean.len() != variance.len() {
        return Err(Error::InvalidArgument(format!(
            "sample_gaussian: mean length {} vs variance length {}",
            mean.len(),
            variance.len()
        )));
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "sample_gaussian: count must be positive".to_string(),
        ));
    }
    for v in variance {
        if *v < 0.0 || !v.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sample_gaussian: invalid variance entry {v}"
            )));
        }
    }
    let std: Vec<f64> = variance.iter().map(|v| v.sqrt()).collect();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut sample = Vec::with_capacity(mean.len());
        for (j, m) in mean.iter().enumerate() {
            sample.push(m + std[j] * rng.next_gaussian());
        }
        out.push(sample);
    }
    Ok(out)
}
