//! Spoiler-safe, persona-consistent character chat over a novel.
//!
//! The pipeline runs in stages: [`ingest`] turns a novel into an extraction
//! bundle, [`graph`] builds a time-anchored knowledge graph from it,
//! [`retrieval`] answers questions from the graph without looking past the
//! reader's story time, [`alignment`] synthesises preference data, [`grpo`]
//! implements the reward and policy objective, and [`eval`] runs the
//! benchmark suites against a chat system.

pub mod alignment;
pub mod embed;
pub mod eval;
pub mod graph;
pub mod grpo;
pub mod ingest;
pub mod jsonl;
pub mod llm;
pub(crate) mod par;
pub mod retrieval;
pub mod text;
pub mod time;

pub use time::{Ordinal, StoryTime};

pub type ToyPolicyF64 = grpo::ToyPolicy<f64>;
pub type ToyPolicyF32 = grpo::ToyPolicy<f32>;
pub type RewardWeightsF64 = grpo::RewardWeights<f64>;
pub type RewardWeightsF32 = grpo::RewardWeights<f32>;
pub type GrpoConfigF64 = grpo::GrpoConfig<f64>;
pub type GrpoConfigF32 = grpo::GrpoConfig<f32>;
pub type ScoredGroupF64 = grpo::ScoredGroup<f64>;
pub type GroupSampleF64 = grpo::GroupSample<f64>;
pub type TrainReportF64 = grpo::TrainReport<f64>;
