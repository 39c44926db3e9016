//! Masked-language-model continued pretraining on collaborative-building
//! dialogue, checkpoint hand-off into a voxel builder agent, and net-change
//! precision/recall/F1 evaluation.

pub mod corpus;
pub mod eval;
pub mod gridworld;
pub mod model;
pub mod numcore;
pub mod par;
pub mod tokenizer;
pub mod training;
