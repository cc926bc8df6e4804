//! Stage checkpoints: parameters, registry, memory, vocabulary and rng
//! counters, serialized as versioned JSON. serde_json round-trips f64 values
//! bit-exactly, so save -> load -> continue replays training byte-for-byte.

use super::StageState;
use crate::detector::LabelRegistry;
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::memory::MemorySet;
use crate::model::ModelParams;
use crate::numerics::rng::RngSuite;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: usize,
    pub benchmark_checksum: String,
    pub vocab: Vocab,
    pub params: ModelParams,
    pub registry: LabelRegistry,
    pub memory: MemorySet,
    pub rng: RngSuite,
}

impl Checkpoint {
    pub fn capture(
        state: &StageState,
        vocab: &Vocab,
        suite: &RngSuite,
        benchmark_checksum: &str,
    ) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            stage: state.stage,
            benchmark_checksum: benchmark_checksum.to_string(),
            vocab: vocab.clone(),
            params: state.params.clone(),
            registry: state.registry.clone(),
            memory: state.memory.clone(),
            rng: suite.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path)?;
        let mut ckpt: Checkpoint = serde_json::from_slice(&bytes)?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::State(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        ckpt.vocab.rebuild_index();
        ckpt.registry.rebuild_index();
        Ok(ckpt)
    }

    /// Resume point: the frozen snapshot is not stored because the next
    /// stage recreates it from these parameters before any update.
    pub fn into_parts(self) -> (StageState, RngSuite, Vocab) {
        let state = StageState {
            params: self.params,
            registry: self.registry,
            frozen: None,
            memory: self.memory,
            stage: self.stage,
        };
        (state, self.rng, self.vocab)
    }
}
