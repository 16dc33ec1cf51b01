pub mod engine;
pub mod accmodel;
pub mod codec;
pub mod config;
pub mod dnn;
pub mod error;
pub mod fixture;
pub mod fptol;
pub mod frame;
pub mod graph;
pub mod masks;
pub mod metrics;
pub mod netgen;
pub mod oracle;
pub mod params;
pub mod pipeline;
pub mod scene;
pub mod tensor;

pub use error::{Error, Result};
pub use frame::{Frame, MB};
pub use graph::{CompGraph, Feed, NodeId, Op};
pub use masks::{dilate_mask, threshold_mask, topc_mask, AccGradMap, QualityMask};
pub use params::{sgd_step, ParamStore};
pub use tensor::Tensor;
