//! Virtual-sensor evaluation over stored measurements.

pub mod graph;
pub mod matrix;
pub mod ops;

pub use graph::{evaluate_virtual_sensor, topological_order, Catalog, CycleData, CycleEvaluator, EvalCause, EvalError, GraphError};
pub use matrix::{compute_feature_matrix, compute_from_cycles, CellError, FeatureError, FeatureMatrix};
pub use ops::{apply_operator, restrict_to_segment, OpError, Series, Value, EPS_DIV};
