//! layergraph: stateful neural-network layer graphs.
//!
//! Layers are stateful functions that double as end-nodes of a dataflow
//! DAG. Graphs are traced automatically from output nodes, validated,
//! scheduled in deterministic dependency order, and convertible into
//! (optionally optimized) executable plans. Reverse-mode autodiff and a
//! small training harness sit on top, driven by the `layergraph` CLI.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod graph;
pub mod layers;
pub mod plan;
pub mod spec;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Feed, Graph};
pub use layers::{
    ExecContext, LayerKind, LayerNode, LayerState, LinearOpts, LossKind, Mode, WeightInit,
};
pub use plan::ExecutablePlan;
pub use tensor::{DType, Shape, Tensor, UnaryOp};
