//! Knowledge distillation from the frozen previous-stage model: feature
//! level (cosine on trigger representations) and predict level (soft
//! cross-entropy over the previous label set with temperature softening).

use crate::detector::{HeadParams, LabelRegistry};
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::autograd::{Tape, Var};
use crate::numerics::matrix::Matrix;
use crate::numerics::softmax_stable;
use serde::{Deserialize, Serialize};

/// Complete copy of the model as of the end of stage t-1. Never registered
/// on a training tape, so no gradient path into it can exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenSnapshot {
    pub params: ModelParams,
    pub registry: LabelRegistry,
}

impl FrozenSnapshot {
    pub fn encoder(&self) -> &EncoderParams {
        &self.params.encoder
    }

    pub fn head(&self) -> &HeadParams {
        &self.params.head
    }

    pub fn n_labels(&self) -> usize {
        self.registry.len()
    }
}

/// Sum over pairs of 1 - cosine(previous, current). The previous side is a
/// constant; gradients reach the current model only.
pub fn feature_distill_on_tape(tape: &mut Tape, pairs: &[(Vec<f64>, Var)]) -> Result<Var> {
    let mut terms = Vec::with_capacity(pairs.len());
    for (prev, cur) in pairs {
        let prev_var = tape.constant(Matrix::row_vector(prev.clone())?);
        let cos = tape.cosine_sim(prev_var, *cur)?;
        terms.push(tape.affine(cos, -1.0, 1.0));
    }
    if terms.is_empty() {
        return Ok(tape.scalar_const(0.0));
    }
    tape.sum_list(terms)
}

pub fn feature_distill_value(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    let mut total = 0.0;
    for (prev, cur) in pairs {
        total += 1.0 - crate::numerics::cosine(prev, cur)?;
    }
    Ok(total)
}

fn check_tau_d(tau_d: f64) -> Result<()> {
    if tau_d <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "distillation temperature {tau_d} must be positive"
        )));
    }
    Ok(())
}

/// Soften a restricted logit row into a target distribution. The standard
/// form divides logits by tau_d inside the exponential; `literal_tau` keeps
/// the printed placement where tau_d cancels (equivalent to tau_d = 1).
pub fn soften(logits: &[f64], tau_d: f64, literal_tau: bool) -> Result<Vec<f64>> {
    check_tau_d(tau_d)?;
    if literal_tau {
        softmax_stable(logits)
    } else {
        let scaled: Vec<f64> = logits.iter().map(|z| z / tau_d).collect();
        softmax_stable(&scaled)
    }
}

pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|v| **v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

/// Sum over candidates of -sum_j target_j log p_j where both sides are
/// restricted to the first `prev_len` labels (the previous label set is a
/// prefix of the current registry) and softened with the same temperature.
/// `pairs` holds (previous restricted logits, current full logit Var).
pub fn predict_distill_on_tape(
    tape: &mut Tape,
    pairs: &[(Vec<f64>, Var)],
    prev_len: usize,
    tau_d: f64,
    literal_tau: bool,
) -> Result<Var> {
    check_tau_d(tau_d)?;
    let scale = if literal_tau { 1.0 } else { 1.0 / tau_d };
    let mut terms = Vec::with_capacity(pairs.len());
    for (prev_logits, cur_logits) in pairs {
        if prev_logits.len() < prev_len {
            return Err(Error::InvalidArgument(format!(
                "previous logits cover {} labels, need {prev_len}",
                prev_logits.len()
            )));
        }
        let target = soften(&prev_logits[..prev_len], tau_d, literal_tau)?;
        let restricted = tape.slice_cols(*cur_logits, 0, prev_len)?;
        let scaled = tape.affine(restricted, scale, 0.0);
        terms.push(tape.soft_ce_from_logits(scaled, target)?);
    }
    if terms.is_empty() {
        return Ok(tape.scalar_const(0.0));
    }
    tape.sum_list(terms)
}

pub fn predict_distill_value(
    prev_logits: &[f64],
    cur_logits: &[f64],
    prev_len: usize,
    tau_d: f64,
    literal_tau: bool,
) -> Result<f64> {
    check_tau_d(tau_d)?;
    if prev_logits.len() < prev_len || cur_logits.len() < prev_len {
        return Err(Error::InvalidArgument(
            "logit vectors must cover the previous label set".to_string(),
        ));
    }
    let target = soften(&prev_logits[..prev_len], tau_d, literal_tau)?;
    let p = soften(&cur_logits[..prev_len], tau_d, literal_tau)?;
    let mut acc = 0.0;
    for (t, pj) in target.iter().zip(&p) {
        acc -= t * pj.ln();
    }
    Ok(acc)
}
