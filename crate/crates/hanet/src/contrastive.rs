//! Contrastive augmentation: view generation (dropout / shuffle / random
//! token replacement) and the two InfoNCE losses over sentence and trigger
//! representations.
//!
//! Both losses follow the written form: for an anchor view, positives sit in
//! the numerator one log-term at a time while the denominator sums over
//! views of OTHER origins only, normalized by 1/(n-1) over origins and 1/m
//! over augmentation count. Because the denominator excludes the positive
//! pair, the value can be negative; the hand-expanded fixtures in the tests
//! pin the exact sums.

use crate::corpus::Instance;
use crate::error::{Error, Result};
use crate::numerics::autograd::{Tape, Var};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::RngStream;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugMethod {
    Dropout,
    Shuffle,
    Rtr,
}

impl std::str::FromStr for AugMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<AugMethod> {
        match s {
            "dropout" => Ok(AugMethod::Dropout),
            "shuffle" => Ok(AugMethod::Shuffle),
            "rtr" => Ok(AugMethod::Rtr),
            other => Err(Error::InvalidArgument(format!(
                "unknown augmentation method {other}"
            ))),
        }
    }
}

/// One alternate view of a sentence. View 1 is always the untransformed
/// original; `instance.triggers` stays index-aligned with the origin's
/// triggers so candidate spans can be remapped by trigger index.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedView {
    pub origin_id: String,
    pub view_index: usize,
    pub method: AugMethod,
    pub instance: Instance,
}

/// Generate views 2..=m_aug+1. Shuffle permutes the sentence uniformly with
/// each trigger moving as one contiguous block; rtr replaces each non-trigger
/// token with probability `rtr_rate` by a uniform vocabulary token; dropout
/// leaves the tokens alone (the stochastic view appears at encode time).
pub fn augment(
    instance: &Instance,
    method: AugMethod,
    m_aug: usize,
    rtr_rate: f64,
    vocab_tokens: &[String],
    rng: &mut RngStream,
) -> Result<Vec<AugmentedView>> {
    if m_aug == 0 {
        return Err(Error::InvalidArgument(
            "augment: m_aug must be at least 1".to_string(),
        ));
    }
    if method == AugMethod::Rtr && vocab_tokens.is_empty() {
        return Err(Error::InvalidArgument(
            "augment: rtr needs a non-empty vocabulary".to_string(),
        ));
    }
    let mut views = Vec::with_capacity(m_aug);
    for k in 0..m_aug {
        let transformed = match method {
            AugMethod::Dropout => instance.clone(),
            AugMethod::Shuffle => shuffle_instance(instance, rng),
            AugMethod::Rtr => rtr_instance(instance, rtr_rate, vocab_tokens, rng),
        };
        views.push(AugmentedView {
            origin_id: instance.id.clone(),
            view_index: k + 2,
            method,
            instance: transformed,
        });
    }
    Ok(views)
}

fn shuffle_instance(instance: &Instance, rng: &mut RngStream) -> Instance {
    // Blocks: each trigger span is one unit, every other token is a
    // singleton. Block payloads remember which trigger they carry.
    #[derive(Clone)]
    enum Block {
        Trigger(usize),
        Token(usize),
    }
    let mut sorted: Vec<(usize, &crate::corpus::Trigger)> =
        instance.triggers.iter().enumerate().collect();
    sorted.sort_by_key(|(_, t)| t.start);

    let mut blocks: Vec<Block> = Vec::new();
    let mut pos = 0;
    for (ti, t) in &sorted {
        while pos < t.start {
            blocks.push(Block::Token(pos));
            pos += 1;
        }
        blocks.push(Block::Trigger(*ti));
        pos = t.end;
    }
    while pos < instance.tokens.len() {
        blocks.push(Block::Token(pos));
        pos += 1;
    }

    rng.shuffle(&mut blocks);

    let mut tokens = Vec::with_capacity(instance.tokens.len());
    let mut triggers = instance.triggers.clone();
    for b in &blocks {
        match b {
            Block::Token(p) => tokens.push(instance.tokens[*p].clone()),
            Block::Trigger(ti) => {
                let t = &instance.triggers[*ti];
                let new_start = tokens.len();
                tokens.extend(instance.tokens[t.start..t.end].iter().cloned());
                triggers[*ti].start = new_start;
                triggers[*ti].end = new_start + (t.end - t.start);
            }
        }
    }
    Instance {
        id: instance.id.clone(),
        tokens,
        triggers,
    }
}

fn rtr_instance(
    instance: &Instance,
    rtr_rate: f64,
    vocab_tokens: &[String],
    rng: &mut RngStream,
) -> Instance {
    let mut out = instance.clone();
    for p in 0..out.tokens.len() {
        if out.position_in_trigger(p) {
            continue;
        }
        if rng.next_f64() < rtr_rate {
            out.tokens[p] = vocab_tokens[rng.next_below(vocab_tokens.len())].clone();
        }
    }
    out
}

fn check_tau(tau: f64) -> Result<()> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "temperature {tau} must be positive"
        )));
    }
    Ok(())
}

/// Sentence-level InfoNCE over origin groups of views. Returns `None` when
/// fewer than two origins are present (the caller logs the skip).
pub fn l_cls_on_tape(
    tape: &mut Tape,
    groups: &[Vec<Var>],
    m_aug: usize,
    tau: f64,
) -> Result<Option<Var>> {
    check_tau(tau)?;
    let n = groups.len();
    if n < 2 {
        return Ok(None);
    }
    let m = m_aug.max(1) as f64;
    let mut terms: Vec<Var> = Vec::new();
    for (i, views) in groups.iter().enumerate() {
        for (j, &anchor) in views.iter().enumerate() {
            // Denominator: every view of every other origin.
            let mut negs = Vec::new();
            for (p, other) in groups.iter().enumerate() {
                if p == i {
                    continue;
                }
                for &q in other {
                    let s = tape.cosine_sim(anchor, q)?;
                    negs.push(tape.affine(s, 1.0 / tau, 0.0));
                }
            }
            let lse = tape.log_sum_exp_list(negs)?;
            for (k, &pos) in views.iter().enumerate() {
                if k == j {
                    continue;
                }
                let s = tape.cosine_sim(anchor, pos)?;
                let pos_scaled = tape.affine(s, 1.0 / tau, 0.0);
                terms.push(tape.sub(lse, pos_scaled)?);
            }
        }
    }
    if terms.is_empty() {
        return Ok(Some(tape.scalar_const(0.0)));
    }
    let total = tape.sum_list(terms)?;
    Ok(Some(tape.affine(total, 1.0 / ((n as f64 - 1.0) * m), 0.0)))
}

/// Direct-evaluation convenience for fixtures and property tests.
pub fn l_cls_value(groups: &[Vec<Vec<f64>>], m_aug: usize, tau: f64) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let vars: Vec<Vec<Var>> = groups
        .iter()
        .map(|g| {
            g.iter()
                .map(|v| Ok(tape.constant(Matrix::row_vector(v.clone())?)))
                .collect::<Result<Vec<Var>>>()
        })
        .collect::<Result<_>>()?;
    Ok(l_cls_on_tape(&mut tape, &vars, m_aug, tau)?.map(|v| tape.scalar(v)))
}

/// One trigger representation entering the trigger-level loss.
pub struct TrigItem {
    pub origin: usize,
    pub label: usize,
    pub rep: Var,
}

/// Trigger-level InfoNCE: positives are same-label representations from
/// other origins, the denominator sums different-label representations from
/// other origins, and anchors lacking either side contribute nothing.
pub fn l_trig_on_tape(
    tape: &mut Tape,
    items: &[TrigItem],
    n_origins: usize,
    m_aug: usize,
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    if items.is_empty() || n_origins < 2 {
        return Ok(tape.scalar_const(0.0));
    }
    let m = m_aug.max(1) as f64;
    let mut terms: Vec<Var> = Vec::new();
    for a in items {
        let positives: Vec<&TrigItem> = items
            .iter()
            .filter(|b| b.origin != a.origin && b.label == a.label)
            .collect();
        if positives.is_empty() {
            continue;
        }
        let mut negs = Vec::new();
        for c in items
            .iter()
            .filter(|c| c.origin != a.origin && c.label != a.label)
        {
            let s = tape.cosine_sim(a.rep, c.rep)?;
            negs.push(tape.affine(s, 1.0 / tau, 0.0));
        }
        if negs.is_empty() {
            continue;
        }
        let lse = tape.log_sum_exp_list(negs)?;
        for b in positives {
            let s = tape.cosine_sim(a.rep, b.rep)?;
            let pos_scaled = tape.affine(s, 1.0 / tau, 0.0);
            terms.push(tape.sub(lse, pos_scaled)?);
        }
    }
    if terms.is_empty() {
        return Ok(tape.scalar_const(0.0));
    }
    let total = tape.sum_list(terms)?;
    Ok(tape.affine(total, 1.0 / ((n_origins as f64 - 1.0) * m), 0.0))
}

pub fn l_trig_value(
    items: &[(usize, usize, Vec<f64>)],
    n_origins: usize,
    m_aug: usize,
    tau: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<TrigItem> = items
        .iter()
        .map(|(origin, label, rep)| {
            Ok(TrigItem {
                origin: *origin,
                label: *label,
                rep: tape.constant(Matrix::row_vector(rep.clone())?),
            })
        })
        .collect::<Result<_>>()?;
    let v = l_trig_on_tape(&mut tape, &vars, n_origins, m_aug, tau)?;
    Ok(tape.scalar(v))
}
