//! Dual-flow generative ranking: an HSTU-style sequence encoder where a
//! behavior sequence is duplicated into a real flow (true action types,
//! donates per-layer K/V context) and a fake flow (action placeholders,
//! carries all predictions and loss), plus the interleaved and per-session
//! single-flow reference paradigms, session-aware masking, analytic FLOP
//! accounting, and a desk-scale training/evaluation harness.
//!
//! Start with the `examples/` directory: each runnable example exercises one
//! capability end to end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod flops;
pub mod graph;
pub mod head;
pub mod hstu;
pub mod masking;
pub mod sequence;
pub mod trainer;
