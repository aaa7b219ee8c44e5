//! CMNet: a cross-modal facial-expression-recognition network.
//!
//! Three residual branches process a whole face and its two halves; the
//! half-face features are fused back into the whole-face features by
//! width-concatenation plus residual addition, refined by division-based
//! channel/spatial attention, and trained with a compound loss that couples
//! cross-entropy with a half-face symmetry term.
//!
//! The crate ships the full desk-scale harness: synthetic datasets, a
//! training engine, evaluation/ablation/profiling tools, Grad-CAM++ saliency
//! maps, and a CLI binding all of it.

pub mod backbones;
pub mod cli;
pub mod cmem;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod hfaom;
pub mod model;
pub mod serialize;
pub mod sfirm;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
