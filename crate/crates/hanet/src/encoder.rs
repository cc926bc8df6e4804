//! Sequence encoder: token + position embeddings, one single-head
//! self-attention block and one feed-forward block, each with a residual
//! connection, dropout after the embeddings and after each residual sum.
//! Row 0 of the output is a learned summary position prepended to every
//! sentence; token i sits at row i+1.

use crate::error::{Error, Result};
use crate::numerics::autograd::{Tape, Var};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::RngStream;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Reserved vocabulary ids.
pub const CLS_ID: usize = 0;
pub const UNK_ID: usize = 1;
const RESERVED: usize = 2;

/// Whitespace-token identity vocabulary with reserved summary and UNK slots.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<I: IntoIterator<Item = String>>(tokens: I) -> Vocab {
        let mut uniq: Vec<String> = tokens.into_iter().collect();
        uniq.sort();
        uniq.dedup();
        let mut v = Vocab {
            tokens: uniq,
            index: HashMap::new(),
        };
        v.rebuild_index();
        v
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i + RESERVED))
            .collect();
    }

    pub fn size(&self) -> usize {
        self.tokens.len() + RESERVED
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    /// The concrete (non-reserved) tokens, e.g. as a replacement pool for
    /// token-level augmentation.
    pub fn real_tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub token_embeddings: Matrix,    // vocab x d
    pub position_embeddings: Matrix, // max_len x d
    pub attn_query: Matrix,          // d x d
    pub attn_key: Matrix,            // d x d
    pub attn_value: Matrix,          // d x d
    pub attn_output: Matrix,         // d x d
    pub ff_w1: Matrix,               // d x d_ff
    pub ff_w2: Matrix,               // d_ff x d
    pub dropout_rate: f64,
}

impl EncoderParams {
    /// Fresh parameters from Normal(0, 0.02^2) on the given stream, drawn in
    /// field order.
    pub fn init(
        vocab_size: usize,
        max_len: usize,
        d: usize,
        d_ff: usize,
        dropout_rate: f64,
        rng: &mut RngStream,
    ) -> Result<EncoderParams> {
        if d < 2 || !d.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "encoder dimension {d} must be even and at least 2"
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidArgument(format!(
                "dropout_rate {dropout_rate} outside [0, 1)"
            )));
        }
        let mut gauss = |rows: usize, cols: usize| -> Result<Matrix> {
            let data = (0..rows * cols)
                .map(|_| 0.02 * rng.next_gaussian())
                .collect();
            Matrix::from_vec(rows, cols, data)
        };
        Ok(EncoderParams {
            token_embeddings: gauss(vocab_size, d)?,
            position_embeddings: gauss(max_len, d)?,
            attn_query: gauss(d, d)?,
            attn_key: gauss(d, d)?,
            attn_value: gauss(d, d)?,
            attn_output: gauss(d, d)?,
            ff_w1: gauss(d, d_ff)?,
            ff_w2: gauss(d_ff, d)?,
            dropout_rate,
        })
    }

    pub fn dim(&self) -> usize {
        self.token_embeddings.cols()
    }

    pub fn max_len(&self) -> usize {
        self.position_embeddings.rows()
    }

    /// Trigger representations are start/end concatenations.
    pub fn rep_dim(&self) -> usize {
        2 * self.dim()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Tape handles for the eight encoder tensors, registered in slot order.
#[derive(Debug, Clone, Copy)]
pub struct EncoderVars {
    pub tok: Var,
    pub pos: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub w1: Var,
    pub w2: Var,
}

pub fn register_encoder(tape: &mut Tape, p: &EncoderParams) -> EncoderVars {
    EncoderVars {
        tok: tape.param(crate::model::SLOT_TOK, p.token_embeddings.clone()),
        pos: tape.param(crate::model::SLOT_POS, p.position_embeddings.clone()),
        wq: tape.param(crate::model::SLOT_WQ, p.attn_query.clone()),
        wk: tape.param(crate::model::SLOT_WK, p.attn_key.clone()),
        wv: tape.param(crate::model::SLOT_WV, p.attn_value.clone()),
        wo: tape.param(crate::model::SLOT_WO, p.attn_output.clone()),
        w1: tape.param(crate::model::SLOT_FF1, p.ff_w1.clone()),
        w2: tape.param(crate::model::SLOT_FF2, p.ff_w2.clone()),
    }
}

pub struct EncodeOut {
    pub hidden: Var,
    pub attention: Var,
}

/// Forward pass on the tape. In train mode with a positive dropout rate the
/// three masks come off the "dropout" stream; eval mode is a pure function
/// of (params, token ids).
pub fn encode_on_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    params: &EncoderParams,
    token_ids: &[usize],
    mode: Mode,
    mut dropout_rng: Option<&mut RngStream>,
) -> Result<EncodeOut> {
    let n = token_ids.len();
    let d = params.dim();
    if n + 1 > params.max_len() {
        return Err(Error::InvalidArgument(format!(
            "sentence of {n} tokens exceeds max_len {} minus the summary slot",
            params.max_len()
        )));
    }
    for &id in token_ids {
        if id >= params.token_embeddings.rows() {
            return Err(Error::InvalidArgument(format!(
                "token id {id} outside vocabulary of {}",
                params.token_embeddings.rows()
            )));
        }
    }

    let apply_dropout = mode == Mode::Train && params.dropout_rate > 0.0;
    let mut dropout = |tape: &mut Tape, x: Var, rows: usize| -> Result<Var> {
        if !apply_dropout {
            return Ok(x);
        }
        let rng = dropout_rng.as_deref_mut().ok_or_else(|| {
            Error::InvalidArgument("train-mode encode needs a dropout stream".to_string())
        })?;
        let p = params.dropout_rate;
        let keep = 1.0 / (1.0 - p);
        let mask_data: Vec<f64> = (0..rows * d)
            .map(|_| if rng.next_f64() < p { 0.0 } else { keep })
            .collect();
        let mask = tape.constant(Matrix::from_vec(rows, d, mask_data)?);
        tape.mul_elem(x, mask)
    };

    // Summary slot plus tokens, with position rows added.
    let mut rows = Vec::with_capacity(n + 1);
    rows.push(CLS_ID);
    rows.extend_from_slice(token_ids);
    let tok = tape.gather_rows(vars.tok, rows)?;
    let pos = tape.gather_rows(vars.pos, (0..=n).collect())?;
    let mut h = tape.add(tok, pos)?;
    h = dropout(tape, h, n + 1)?;

    // Single-head self-attention with residual.
    let q = tape.matmul(h, vars.wq)?;
    let k = tape.matmul(h, vars.wk)?;
    let v = tape.matmul(h, vars.wv)?;
    let scores = tape.matmul_tb(q, k)?;
    let scaled = tape.affine(scores, 1.0 / (d as f64).sqrt(), 0.0);
    let attention = tape.softmax_rows(scaled);
    let ctx = tape.matmul(attention, v)?;
    let attn_out = tape.matmul(ctx, vars.wo)?;
    let mut h1 = tape.add(h, attn_out)?;
    h1 = dropout(tape, h1, n + 1)?;

    // Position-wise feed-forward with residual.
    let ff_in = tape.matmul(h1, vars.w1)?;
    let ff_act = tape.gelu(ff_in);
    let ff_out = tape.matmul(ff_act, vars.w2)?;
    let mut h2 = tape.add(h1, ff_out)?;
    h2 = dropout(tape, h2, n + 1)?;

    Ok(EncodeOut {
        hidden: h2,
        attention,
    })
}

/// Hidden states of one sentence; row 0 is the summary position.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSentence {
    pub hidden: Matrix,
    pub attention: Matrix,
}

impl EncodedSentence {
    pub fn token_count(&self) -> usize {
        self.hidden.rows() - 1
    }
}

/// Deterministic eval-mode forward.
pub fn encode_eval(params: &EncoderParams, token_ids: &[usize]) -> Result<EncodedSentence> {
    let mut tape = Tape::new();
    let vars = register_encoder(&mut tape, params);
    let out = encode_on_tape(&mut tape, &vars, params, token_ids, Mode::Eval, None)?;
    Ok(EncodedSentence {
        hidden: tape.value(out.hidden).clone(),
        attention: tape.value(out.attention).clone(),
    })
}

fn span_check(token_count: usize, start: usize, end: usize) -> Result<()> {
    if start >= end || end > token_count {
        return Err(Error::InvalidArgument(format!(
            "trigger span ({start}, {end}) invalid for {token_count} tokens"
        )));
    }
    Ok(())
}

/// Concatenation of the first and last token representation of the span,
/// offset by the summary row: rows start+1 and end.
pub fn trigger_rep(encoded: &EncodedSentence, start: usize, end: usize) -> Result<Vec<f64>> {
    span_check(encoded.token_count(), start, end)?;
    let mut rep = encoded.hidden.row(start + 1).to_vec();
    rep.extend_from_slice(encoded.hidden.row(end));
    Ok(rep)
}

pub fn trigger_rep_on_tape(
    tape: &mut Tape,
    hidden: Var,
    token_count: usize,
    start: usize,
    end: usize,
) -> Result<Var> {
    span_check(token_count, start, end)?;
    let first = tape.select_row(hidden, start + 1)?;
    let last = tape.select_row(hidden, end)?;
    tape.concat_cols(first, last)
}

/// Row 0, the summary representation.
pub fn sentence_rep(encoded: &EncodedSentence) -> Vec<f64> {
    encoded.hidden.row(0).to_vec()
}

pub fn sentence_rep_on_tape(tape: &mut Tape, hidden: Var) -> Result<Var> {
    tape.select_row(hidden, 0)
}
