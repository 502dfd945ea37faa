//! Information-aware credit assignment for multi-turn information-seeking
//! agents.
//!
//! The crate turns sparse, outcome-only rewards from batches of rollout
//! trajectories into dense turn-level advantages: each atomic evidence unit
//! (a search-result item or a fetched page snapshot) is scored by how
//! strongly acquiring it associates with success across the batch, and that
//! signal flows back to the turns that acquired it. A seeded synthetic web
//! world and a small tabular policy harness verify, at desk scale, that the
//! dense signal beats outcome-only group-relative optimization.
//!
//! Modules:
//! - [`trajectory`]: rollout data model and the JSONL log format.
//! - [`evidence`]: stable evidence identities and the acquisition index.
//! - [`credit`]: counterfactual contributions through mixed advantages.
//! - [`policy`]: tabular softmax policy over discretized states.
//! - [`optimizer`]: clipped surrogate objective and the training loop.
//! - [`simulator`]: seeded web world, episodes, and the brute-force oracle.
//! - [`planner`]: snapshot slicing and chunk/budget planning math.

pub mod credit;
pub mod evidence;
pub mod optimizer;
pub mod planner;
pub mod policy;
pub mod simulator;
pub mod trajectory;
