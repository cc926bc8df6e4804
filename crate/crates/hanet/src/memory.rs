//! Exemplar memory: one stored sample per observed event type, with the
//! per-dimension variance of its type's trigger representations, replayed
//! through Gaussian feature synthesis.

use crate::corpus::{Candidate, Instance};
use crate::detector::HeadParams;
use crate::encoder::{encode_eval, trigger_rep, EncoderParams, Vocab};
use crate::error::{Error, Result};
use crate::numerics::autograd::{Tape, Var};
use crate::numerics::matrix::Matrix;
use crate::numerics::{sample_gaussian, RngStream};
use crate::par;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    L2,
    Cosine,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Metric> {
        match s {
            "l2" => Ok(Metric::L2),
            "cosine" => Ok(Metric::Cosine),
            other => Err(Error::InvalidArgument(format!("unknown metric {other}"))),
        }
    }
}

/// Eval-mode view of the current model, used wherever representations are
/// taken as constants (selection, replay means, frozen forwards).
pub struct Embedder<'a> {
    pub params: &'a EncoderParams,
    pub vocab: &'a Vocab,
}

impl Embedder<'_> {
    pub fn trigger_rep(&self, instance: &Instance, start: usize, end: usize) -> Result<Vec<f64>> {
        let ids = self.vocab.encode_tokens(&instance.tokens);
        let enc = encode_eval(self.params, &ids)?;
        trigger_rep(&enc, start, end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub candidate: Candidate,
    /// Per-dimension mean squared deviation of the type's trigger
    /// representations from their prototype, captured at selection time.
    pub variance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MemorySet {
    entries: BTreeMap<String, Exemplar>,
}

impl MemorySet {
    pub fn new() -> MemorySet {
        MemorySet::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, label: &str) -> Option<&Exemplar> {
        self.entries.get(label)
    }

    /// Exemplars in label order.
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Exemplar)> {
        self.entries.iter()
    }

    pub fn labels(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }
}

/// Prototype, per-dimension variance, and the index of the representation
/// closest to the prototype (ties keep the earliest). Exposed separately so
/// tests can drive it with raw vectors against a brute-force oracle.
pub fn nearest_to_prototype(
    reps: &[Vec<f64>],
    metric: Metric,
) -> Result<(usize, Vec<f64>, Vec<f64>)> {
    if reps.is_empty() {
        return Err(Error::Selection("no representations given".to_string()));
    }
    let dim = reps[0].len();
    let mut proto = vec![0.0; dim];
    for r in reps {
        if r.len() != dim {
            return Err(Error::Selection(
                "ragged representation lengths".to_string(),
            ));
        }
        for (p, v) in proto.iter_mut().zip(r) {
            *p += v;
        }
    }
    for p in proto.iter_mut() {
        *p /= reps.len() as f64;
    }
    let mut variance = vec![0.0; dim];
    for r in reps {
        for (j, v) in r.iter().enumerate() {
            let d = v - proto[j];
            variance[j] += d * d;
        }
    }
    for v in variance.iter_mut() {
        *v /= reps.len() as f64;
    }

    let mut best = 0;
    let mut best_d = distance(&reps[0], &proto, metric)?;
    for (i, r) in reps.iter().enumerate().skip(1) {
        let d = distance(r, &proto, metric)?;
        if d < best_d {
            best = i;
            best_d = d;
        }
    }
    Ok((best, proto, variance))
}

pub fn distance(a: &[f64], b: &[f64], metric: Metric) -> Result<f64> {
    match metric {
        Metric::L2 => Ok(a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()),
        Metric::Cosine => Ok(1.0 - crate::numerics::cosine(a, b)?),
    }
}

/// Per label: prototype = mean trigger representation over that label's
/// candidates, exemplar = the candidate nearest the prototype, variance =
/// elementwise mean squared deviation. Representations use the current
/// encoder in eval mode.
pub fn select_exemplars(
    labels: &[String],
    candidates: &[Candidate],
    instances: &BTreeMap<String, Instance>,
    embedder: &Embedder,
    metric: Metric,
) -> Result<Vec<Exemplar>> {
    let mut by_label: BTreeMap<&str, Vec<&Candidate>> = BTreeMap::new();
    for c in candidates {
        if !c.is_na() {
            by_label.entry(c.gold.as_str()).or_default().push(c);
        }
    }
    let mut out = Vec::with_capacity(labels.len());
    for label in labels {
        let cands = by_label
            .get(label.as_str())
            .ok_or_else(|| Error::Selection(format!("label {label} has no training candidates")))?;
        let reps: Vec<Result<Vec<f64>>> = par::map_slice(cands, |c| {
            let inst = instances.get(&c.instance_id).ok_or_else(|| {
                Error::MemoryIntegrity(format!("instance {} missing", c.instance_id))
            })?;
            embedder.trigger_rep(inst, c.start, c.end)
        });
        let reps: Vec<Vec<f64>> = reps.into_iter().collect::<Result<_>>()?;
        let (idx, _, variance) = nearest_to_prototype(&reps, metric)?;
        out.push(Exemplar {
            candidate: cands[idx].clone(),
            variance,
        });
    }
    Ok(out)
}

/// Union with the previous memory; previous entries stay bit-identical.
pub fn merge_memory(previous: &MemorySet, new_exemplars: Vec<Exemplar>) -> Result<MemorySet> {
    let mut merged = previous.clone();
    for e in new_exemplars {
        let label = e.candidate.gold.clone();
        if merged.entries.contains_key(&label) {
            return Err(Error::InvalidArgument(format!(
                "memory already holds an exemplar for {label}"
            )));
        }
        merged.entries.insert(label, e);
    }
    Ok(merged)
}

/// Synthetic features for one exemplar: mean = the exemplar's trigger
/// representation under the CURRENT model (re-encoded now), variance = the
/// stored one, drawn through the "gauss" stream.
pub fn sample_prototypical(
    exemplar: &Exemplar,
    instances: &BTreeMap<String, Instance>,
    embedder: &Embedder,
    n_syn: usize,
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>> {
    let inst = instances
        .get(&exemplar.candidate.instance_id)
        .ok_or_else(|| {
            Error::MemoryIntegrity(format!(
                "exemplar instance {} unresolvable",
                exemplar.candidate.instance_id
            ))
        })?;
    let mu = embedder.trigger_rep(inst, exemplar.candidate.start, exemplar.candidate.end)?;
    if mu.len() != exemplar.variance.len() {
        return Err(Error::MemoryIntegrity(format!(
            "stored variance length {} does not match representation length {}",
            exemplar.variance.len(),
            mu.len()
        )));
    }
    sample_gaussian(&mu, &exemplar.variance, n_syn, rng)
}

/// Sum over synthetic features of -log p_label, classifying the feature
/// directly (no encoder involved).
pub fn replay_loss(features: &[(Vec<f64>, usize)], head: &HeadParams) -> Result<f64> {
    let batch: Vec<(&[f64], usize)> = features.iter().map(|(f, y)| (f.as_slice(), *y)).collect();
    crate::detector::ce_loss(head, &batch)
}

/// Tape form: features enter as constants, so gradients reach the head only.
pub fn replay_loss_on_tape(
    tape: &mut Tape,
    head: &crate::detector::HeadVars,
    features: &[(Vec<f64>, usize)],
) -> Result<Var> {
    let mut terms = Vec::with_capacity(features.len());
    for (f, gold) in features {
        let h = tape.constant(Matrix::row_vector(f.clone())?);
        let logits = crate::detector::logits_on_tape(tape, head, h)?;
        terms.push(tape.ce_from_logits(logits, *gold)?);
    }
    tape.sum_list(terms)
}
