//! Deterministic synthetic corpus generator.
//!
//! Each instance carries exactly one single-token trigger. With probability
//! `signal_strength` the trigger token comes from the instance type's own
//! lexicon; otherwise the lexicon is re-drawn uniformly over all types, so a
//! token predicts its type with probability s + (1-s)/n_types. Every
//! instance is generated from its own counter window, which makes generation
//! order-independent and safe to parallelize.

use super::{Instance, Trigger};
use crate::error::{Error, Result};
use crate::numerics::RngStream;
use crate::par;

/// Trigger lexicon size per event type.
pub const LEXICON_SIZE: usize = 3;

#[derive(Debug, Clone)]
pub struct GenParams {
    pub n_types: usize,
    pub instances_per_type: usize,
    pub vocab_size: usize,
    pub sentence_len: usize,
    pub signal_strength: f64,
}

impl GenParams {
    fn validate(&self) -> Result<()> {
        if self.n_types < 2 {
            return Err(Error::InvalidArgument(
                "gen_synthetic_corpus: n_types must be at least 2".to_string(),
            ));
        }
        if self.sentence_len == 0 || self.instances_per_type == 0 {
            return Err(Error::InvalidArgument(
                "gen_synthetic_corpus: sentence_len and instances_per_type must be positive"
                    .to_string(),
            ));
        }
        if !(0.0..=1.0).contains(&self.signal_strength) {
            return Err(Error::InvalidArgument(format!(
                "gen_synthetic_corpus: signal_strength {} outside [0, 1]",
                self.signal_strength
            )));
        }
        if self.vocab_size < self.n_types * LEXICON_SIZE + 1 {
            return Err(Error::InvalidArgument(format!(
                "gen_synthetic_corpus: vocab_size {} too small for {} lexicons of {} plus filler",
                self.vocab_size, self.n_types, LEXICON_SIZE
            )));
        }
        Ok(())
    }
}

pub fn type_label(ty: usize) -> String {
    format!("E{ty:02}")
}

fn trigger_token(ty: usize, j: usize) -> String {
    format!("trig{ty:02}_{j}")
}

fn filler_token(i: usize) -> String {
    format!("tok{i:03}")
}

pub fn gen_synthetic_corpus(params: &GenParams, seed: u64) -> Result<Vec<Instance>> {
    params.validate()?;
    let filler_count = params.vocab_size - params.n_types * LEXICON_SIZE;
    let total = params.n_types * params.instances_per_type;
    // Fixed per-instance draw budget so windows never overlap.
    let stride = (params.sentence_len + 8) as u64;

    let instances = par::map_range(total, |idx| {
        let ty = idx / params.instances_per_type;
        let k = idx % params.instances_per_type;
        let mut rng = RngStream::at(seed, "gen", idx as u64 * stride);

        let pos = rng.next_below(params.sentence_len);
        let lex_ty = if rng.next_f64() < params.signal_strength {
            ty
        } else {
            rng.next_below(params.n_types)
        };
        let trig = trigger_token(lex_ty, rng.next_below(LEXICON_SIZE));

        let mut tokens = Vec::with_capacity(params.sentence_len);
        for p in 0..params.sentence_len {
            if p == pos {
                tokens.push(trig.clone());
            } else {
                tokens.push(filler_token(rng.next_below(filler_count)));
            }
        }
        Instance {
            id: format!("syn-{ty:02}-{k:04}"),
            tokens,
            triggers: vec![Trigger {
                start: pos,
                end: pos + 1,
                label: type_label(ty),
            }],
        }
    });
    Ok(instances)
}
