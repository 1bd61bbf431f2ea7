//! Cross-modal pair discrimination (CPD) at desk scale.
//!
//! Two small feed-forward encoders map paired visual/text feature vectors onto
//! a shared unit sphere. They are trained with a cross-modal contrastive
//! objective (exact softmax or its noise-contrastive approximation backed by a
//! memory bank), with the joint instance-discrimination and margin-ranking
//! objectives available as baselines. Training follows a two-stage curriculum:
//! the text encoder is frozen until validation retrieval stops improving, then
//! both encoders are trained jointly at reduced learning rates.
//!
//! The [`evaluation`] module scores frozen features with kNN, a linear probe,
//! zero-shot classification and bidirectional retrieval recall.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod data;
pub mod encoders;
mod error;
pub mod evaluation;
pub mod memory_bank;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
