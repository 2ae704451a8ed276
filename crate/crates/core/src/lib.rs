//! Target-speaker neural transducer training with lattice-level knowledge
//! distillation.
//!
//! A single-talker transducer (the teacher) is trained on target speech plus
//! noise. Its full posterior lattices then supervise a target-speaker
//! transducer (the student) that only sees two-talker mixtures and an
//! enrollment utterance, through the multi-task objective
//! `L = L_rnnt + lambda * L_kd`.
//!
//! Module map:
//! - [`corpus`]: synthetic parallel single-talker / mixture data
//! - [`diffcore`]: arrays, parameters, differentiable ops, checkpoints
//! - [`transducer`]: features, encoder, prediction/joint networks, RNNT loss
//! - [`speaker`]: speaker encoder and the target-speaker transducer
//! - [`distill`]: KD loss, multi-task loss, teacher/student training
//! - [`tse`]: mask-based target speech extraction baseline and SI-SNR
//! - [`decode`]: greedy, alignment-length synchronous beam, streaming sessions
//! - [`eval`]: edit distance, token error rate, system comparison
//! - [`pipeline`]: experiment configuration and end-to-end orchestration

pub mod corpus;
pub mod decode;
pub mod diffcore;
pub mod distill;
mod error;
pub mod eval;
pub mod par;
pub mod pipeline;
pub mod speaker;
pub mod transducer;
pub mod tse;

pub use error::{Error, Result};
