//! Failure-mode-aware condition monitoring: a system model tying sensors to
//! components and failure modes, a virtual-sensor feature engine, an
//! unsupervised kNN anomaly detector with per-element attribution, and a
//! cost model that turns detector performance into expected savings.

pub mod detect;
pub mod enrich;
pub mod features;
pub mod ingest;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod risk;
pub mod sim;
pub mod spec;
pub mod store;

/// The shipped hydraulic rig model.
pub const HYDRAULIC_SPEC: &str = include_str!("../configs/hydraulic.toml");
/// The shipped cost scenarios for the hydraulic rig.
pub const HYDRAULIC_COSTS: &str = include_str!("../configs/costs.toml");
