//! Core of the knowledge-transfer graph framework.
//!
//! Everything here is pure computation over plain buffers: the graph data
//! model and its search space, the four gate functions, the probability and
//! attention-map transfer losses with their analytic gradients, the per-node
//! objective, ensemble averaging, training schedules and the successive
//! halving pruning rule. Tensor libraries, IO and the CLI live in the `ktg`
//! crate.

#![no_std]

extern crate alloc;

pub mod dot;
pub mod ensemble;
pub mod gates;
pub mod graph;
pub mod losses;
pub mod objective;
pub mod pruner;
pub mod schedule;
pub mod space;
pub mod tensor;

pub use ensemble::{ensemble_logits, EnsembleMode};
pub use gates::{apply_gate, gate_weights, GateContext};
pub use graph::{Arch, EdgeSpec, Endpoint, GateKind, GraphSpec, LossDesign, Violation};
pub use losses::NodeOutput;
pub use pruner::{Decision, PrunerState};
pub use schedule::{CheckpointMode, TrainConfig};
pub use space::SpaceDescriptor;
pub use tensor::{argmax, MapBatch, Matrix};

use alloc::string::String;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("graph needs at least 2 nodes, got {0}")]
    InvalidGraphSize(usize),
    #[error("no valid graph after {0} sampling attempts")]
    SamplingFailed(usize),
    #[error("invalid gate context: iteration {iteration} of {total}")]
    InvalidGateContext { iteration: u64, total: u64 },
    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: usize, found: usize },
    #[error("crop size {size} does not fit a {height}x{width} map")]
    CropTooLarge {
        size: usize,
        height: usize,
        width: usize,
    },
    #[error("crop size {0} is not odd")]
    EvenCropSize(usize),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("missing output for node {0}")]
    MissingOutput(usize),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
}
