//! Mixed sign graphs for continuous sign recognition.
//!
//! Frames are patchified into node grids; local (per-frame KNN), temporal
//! (cross-frame top-K pair) and hierarchical (fixed cross-resolution) graphs
//! are built over them and processed with EdgeConv residual updates. A
//! temporal head produces per-step gloss scores trained with CTC. The crate
//! also carries text-driven CTC pre-training support, a small attention
//! decoder for translation fine-tuning, a deterministic synthetic corpus and
//! the training/evaluation driver.

pub mod backbone;
pub mod checks;
pub mod ctc;
pub mod dataset;
pub mod error;
pub mod graph;
pub mod head;
pub mod message;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tcp;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
