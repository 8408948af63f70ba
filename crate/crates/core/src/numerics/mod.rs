//! Dense tensors, a static computation graph with reverse-mode
//! differentiation, a finite-difference gradient checker and the flat
//! parameter archive.

mod archive;
mod gradcheck;
mod graph;
mod tensor;

pub use archive::{load_archive, read_archive, save_archive, write_archive, ARCHIVE_MAGIC, ARCHIVE_VERSION};
pub use gradcheck::{all_params, gradient_check, relative_error, GradCheckOptions, Leaf, LeafReport};
pub(crate) use graph::{cos_ratio, sin_ratio};
pub use graph::{Axis, Evaluation, Gradients, Graph, NodeId, UnaryFn};
pub use tensor::{Tensor, TensorMap};

#[derive(Debug, thiserror::Error)]
pub enum NumericsError {
    #[error("invalid tensor shape {shape:?}: every dimension must be >= 1")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match buffer length {len}")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("rows of differing length")]
    RaggedRows,
    #[error("shape mismatch at node {node}: {detail}")]
    Shape { node: String, detail: String },
    #[error("unbound {kind} `{name}`")]
    Unbound { kind: &'static str, name: String },
    #[error("backward needs a scalar output; node {node} has shape {shape:?}")]
    NonScalarOutput { node: String, shape: Vec<usize> },
    #[error("non-finite value: {context}")]
    NonFinite { context: String },
    #[error("finite-difference epsilon {0} outside [1e-7, 1e-3]")]
    BadEpsilon(f64),
    #[error("archive: {0}")]
    Archive(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
