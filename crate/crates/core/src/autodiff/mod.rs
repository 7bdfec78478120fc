//! Dense `f32`/`f64` tensors, a reverse-mode autodiff graph, and the
//! transformer building blocks the gaze model is assembled from.

mod gradcheck;
mod graph;
pub mod nn;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport, Probe, WorstCoordinate};
pub use graph::{CustomOp, Gradients, Graph, Mode, Var};
pub use params::{init, Param, ParamStore, CHECKPOINT_SCHEMA_VERSION};
pub use tensor::{Real, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    Numeric { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("index {index} out of range for {what} of size {size}")]
    Index { what: &'static str, index: usize, size: usize },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AutodiffError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        Self::Shape { op, detail }
    }
}
