use std::io;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0:?}: dimensions must be positive")]
    InvalidShape(Vec<usize>),
    #[error("shape {shape:?} needs {} values, got {len}", shape.iter().product::<usize>())]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("node {node} ({op}): {detail}")]
    Shape {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("input `{name}` expects shape {expected:?}, got {got:?}")]
    InputShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("duplicate input name `{0}`")]
    DuplicateInput(String),
    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },
    #[error("backward called before evaluate")]
    NotEvaluated,
    #[error("loss node {node} is not scalar (shape {shape:?})")]
    NonScalarLoss { node: usize, shape: Vec<usize> },
    #[error("unknown node id {0}")]
    UnknownNode(usize),
}

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("parameter `{0}` already exists")]
    Duplicate(String),
    #[error("unknown parameter `{0}`")]
    Unknown(String),
    #[error("no gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error("parameter `{name}` has shape {expected:?}, got {got:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("learning rate must be non-negative and finite, got {0}")]
    LearningRate(f64),
    #[error("checkpoint: {reason} at byte {offset}")]
    Checkpoint { reason: String, offset: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("frame is {width}x{height}, not a multiple of the 16-pixel macroblock")]
    Unpadded { width: usize, height: usize },
    #[error("qp map is {got_w}x{got_h}, frame grid is {want_w}x{want_h}")]
    QpMapDims {
        got_w: usize,
        got_h: usize,
        want_w: usize,
        want_h: usize,
    },
    #[error("qp {0} outside [0, 51]")]
    QpRange(i32),
    #[error("high-quality qp {hi} exceeds low-quality qp {lo}")]
    QpOrder { hi: u8, lo: u8 },
    #[error("bitstream: {reason} at byte {offset}")]
    Parse { reason: String, offset: usize },
    #[error("frame dimension {0} exceeds the u16 header field")]
    TooLarge(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("{0}")]
    Invalid(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    Diverged { epoch: usize, loss: f64 },
    #[error("frame {index}: {source}")]
    Frame {
        index: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}:{line}: {reason}")]
    Config {
        path: String,
        line: usize,
        reason: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
