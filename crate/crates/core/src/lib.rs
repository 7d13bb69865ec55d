//! Training and evaluation engine for conditional flow matching with
//! dual-modality alignment: an auxiliary CTC loss on an early hidden state
//! and a cosine feature-alignment loss on a later one.
// `!(x > 0.0)` style checks are deliberate: they reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod flow_matching;
pub mod gradsuite;
pub mod model;
pub mod numerics;
pub mod speech_alignment;
pub mod text_alignment;
pub mod trainer;

pub use error::{Error, Result};
