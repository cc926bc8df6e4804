//! Continual few-shot event detection with a replayable memory, Gaussian
//! prototypical feature augmentation, contrastive augmentation, and
//! knowledge distillation, together with a synthetic benchmark builder,
//! fine-tune / combined-retrain baselines, and a micro-F1 evaluation
//! harness. Everything is seeded and bit-reproducible; data-parallel paths
//! (evaluation, exemplar selection, corpus generation) sit behind the
//! `parallel` feature with a sequential fallback.

pub mod checksum;
pub mod cli;
pub mod contrastive;
pub mod corpus;
pub mod detector;
pub mod distill;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod memory;
pub mod model;
pub mod numerics;
pub mod par;
pub mod trainer;

pub use error::{Error, Result};
