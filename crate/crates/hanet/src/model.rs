//! Encoder plus head as one slot-addressed parameter set.

use crate::detector::{register_head, HeadParams, HeadVars};
use crate::encoder::{register_encoder, EncoderParams, EncoderVars};
use crate::numerics::matrix::Matrix;
use crate::numerics::optim::ParamTensors;
use crate::numerics::Tape;
use serde::{Deserialize, Serialize};

pub const SLOT_TOK: usize = 0;
pub const SLOT_POS: usize = 1;
pub const SLOT_WQ: usize = 2;
pub const SLOT_WK: usize = 3;
pub const SLOT_WV: usize = 4;
pub const SLOT_WO: usize = 5;
pub const SLOT_FF1: usize = 6;
pub const SLOT_FF2: usize = 7;
pub const SLOT_HEAD_W: usize = 8;
pub const SLOT_HEAD_B: usize = 9;
pub const N_SLOTS: usize = 10;

pub const SLOT_NAMES: [&str; N_SLOTS] = [
    "token_embeddings",
    "position_embeddings",
    "attn_query",
    "attn_key",
    "attn_value",
    "attn_output",
    "ff_w1",
    "ff_w2",
    "head_weight",
    "head_bias",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub head: HeadParams,
}

impl ModelParams {
    pub fn new(encoder: EncoderParams) -> ModelParams {
        let head = HeadParams::new(encoder.rep_dim());
        ModelParams { encoder, head }
    }
}

impl ParamTensors for ModelParams {
    fn tensor_names(&self) -> Vec<&'static str> {
        SLOT_NAMES.to_vec()
    }

    fn tensors(&self) -> Vec<&Matrix> {
        vec![
            &self.encoder.token_embeddings,
            &self.encoder.position_embeddings,
            &self.encoder.attn_query,
            &self.encoder.attn_key,
            &self.encoder.attn_value,
            &self.encoder.attn_output,
            &self.encoder.ff_w1,
            &self.encoder.ff_w2,
            &self.head.weight,
            &self.head.bias,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.encoder.token_embeddings,
            &mut self.encoder.position_embeddings,
            &mut self.encoder.attn_query,
            &mut self.encoder.attn_key,
            &mut self.encoder.attn_value,
            &mut self.encoder.attn_output,
            &mut self.encoder.ff_w1,
            &mut self.encoder.ff_w2,
            &mut self.head.weight,
            &mut self.head.bias,
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub enc: EncoderVars,
    pub head: HeadVars,
}

pub fn register_model(tape: &mut Tape, params: &ModelParams) -> ModelVars {
    ModelVars {
        enc: register_encoder(tape, &params.encoder),
        head: register_head(tape, &params.head),
    }
}

/// Slot-keyed tape gradients into the dense slot-ordered vector AdamW and
/// the checker expect; slots the tape never saw get zeros.
pub fn grads_to_slots(pairs: Vec<(usize, Matrix)>, params: &ModelParams) -> Vec<Matrix> {
    let mut out: Vec<Matrix> = params
        .tensors()
        .iter()
        .map(|t| Matrix::zeros(t.rows(), t.cols()))
        .collect();
    for (slot, g) in pairs {
        out[slot] = g;
    }
    out
}
