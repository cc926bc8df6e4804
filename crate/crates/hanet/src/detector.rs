//! Growable linear classifier over trigger representations.

use crate::corpus::NA_LABEL;
use crate::error::{Error, Result};
use crate::numerics::autograd::{Tape, Var};
use crate::numerics::matrix::{dot, Matrix};
use crate::numerics::rng::RngStream;
use crate::numerics::softmax_stable;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Append-only ordered label set. Index 0 is the reserved "NA" class when NA
/// candidates are enabled; earlier stages are always a prefix of later ones.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelRegistry {
    labels: Vec<String>,
    /// (stage, start, end) index ranges recording which labels arrived when.
    segments: Vec<(usize, usize, usize)>,
    na_enabled: bool,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl LabelRegistry {
    /// Starts empty; when NA is enabled the trainer passes `NA` as the first
    /// label of the stage-1 expansion so it lands at index 0 and its head
    /// column exists from task 1 on.
    pub fn new(na_enabled: bool) -> LabelRegistry {
        let mut r = LabelRegistry {
            labels: Vec::new(),
            segments: Vec::new(),
            na_enabled,
            index: HashMap::new(),
        };
        r.rebuild_index();
        r
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .labels
            .iter()
            .enumerate()
            .map(|(i, l)| (l.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn na_enabled(&self) -> bool {
        self.na_enabled
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn require(&self, label: &str) -> Result<usize> {
        self.index_of(label)
            .ok_or_else(|| Error::InvalidArgument(format!("label {label} not in registry")))
    }

    pub fn is_na_index(&self, idx: usize) -> bool {
        self.na_enabled && idx == 0
    }

    pub fn segments(&self) -> &[(usize, usize, usize)] {
        &self.segments
    }

    fn append(&mut self, stage: usize, new_labels: &[String]) -> Result<()> {
        for l in new_labels {
            if l.is_empty() {
                return Err(Error::InvalidArgument("empty label".to_string()));
            }
            if l == NA_LABEL && (!self.na_enabled || !self.labels.is_empty()) {
                return Err(Error::InvalidArgument(
                    "NA must be the first label of an NA-enabled registry".to_string(),
                ));
            }
            if self.index.contains_key(l) {
                return Err(Error::InvalidArgument(format!("duplicate label {l}")));
            }
            self.index.insert(l.clone(), self.labels.len());
            self.labels.push(l.clone());
        }
        let end = self.labels.len();
        self.segments.push((stage, end - new_labels.len(), end));
        Ok(())
    }
}

/// Classifier parameters, stored one row per label so label growth appends
/// rows; logits_i = weight_row_i . h + bias_i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    pub weight: Matrix, // |L| x 2d
    pub bias: Matrix,   // 1 x |L|
}

impl HeadParams {
    pub fn new(rep_dim: usize) -> HeadParams {
        HeadParams {
            weight: Matrix::zeros(0, rep_dim),
            bias: Matrix::zeros(1, 0),
        }
    }

    pub fn rep_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn n_labels(&self) -> usize {
        self.weight.rows()
    }

    pub fn logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.rep_dim() {
            return Err(Error::InvalidArgument(format!(
                "classify: representation length {} vs head input {}",
                h.len(),
                self.rep_dim()
            )));
        }
        let mut out = Vec::with_capacity(self.n_labels());
        for i in 0..self.n_labels() {
            out.push(dot(self.weight.row(i), h) + self.bias.data()[i]);
        }
        Ok(out)
    }
}

/// Probability distribution over the registry for one trigger representation.
pub fn classify(head: &HeadParams, h: &[f64]) -> Result<Vec<f64>> {
    softmax_stable(&head.logits(h)?)
}

/// Deterministic argmax (lowest index wins ties).
pub fn predict_index(head: &HeadParams, h: &[f64]) -> Result<usize> {
    let logits = head.logits(h)?;
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Sum over the batch of -log p_gold.
pub fn ce_loss(head: &HeadParams, batch: &[(&[f64], usize)]) -> Result<f64> {
    let mut total = 0.0;
    for (h, gold) in batch {
        if *gold >= head.n_labels() {
            return Err(Error::InvalidArgument(format!(
                "gold index {gold} out of {} labels",
                head.n_labels()
            )));
        }
        let p = classify(head, h)?;
        total -= p[*gold].ln();
    }
    Ok(total)
}

/// Append one weight row and bias entry per new label, drawn from
/// Normal(0, 0.02^2) on the "init" stream; existing entries stay bitwise
/// identical.
pub fn expand_labels(
    head: &mut HeadParams,
    registry: &mut LabelRegistry,
    stage: usize,
    new_labels: &[String],
    rng: &mut RngStream,
) -> Result<()> {
    {
        let mut seen = std::collections::BTreeSet::new();
        for l in new_labels {
            if !seen.insert(l.as_str()) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate label {l} in expansion"
                )));
            }
        }
    }
    registry.append(stage, new_labels)?;
    let rep_dim = head.rep_dim();
    let mut rows = Vec::with_capacity(new_labels.len() * rep_dim);
    let mut biases = Vec::with_capacity(new_labels.len());
    for _ in new_labels {
        for _ in 0..rep_dim {
            rows.push(0.02 * rng.next_gaussian());
        }
        biases.push(0.02 * rng.next_gaussian());
    }
    head.weight.append_rows(new_labels.len(), rows)?;
    head.bias.append_cols(new_labels.len(), biases)?;
    debug_assert_eq!(head.n_labels(), registry.len());
    Ok(())
}

/// Tape handles for the head tensors.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight: Var,
    pub bias: Var,
}

pub fn register_head(tape: &mut Tape, head: &HeadParams) -> HeadVars {
    HeadVars {
        weight: tape.param(crate::model::SLOT_HEAD_W, head.weight.clone()),
        bias: tape.param(crate::model::SLOT_HEAD_B, head.bias.clone()),
    }
}

/// logits = h . W^T + b on the tape.
pub fn logits_on_tape(tape: &mut Tape, head: &HeadVars, h: Var) -> Result<Var> {
    let z = tape.matmul_tb(h, head.weight)?;
    tape.add(z, head.bias)
}
