//! Guided end-to-end portfolio construction.
//!
//! A staged differentiable model (embedding, temporal encoder,
//! cross-sectional encoder, position sizer) is trained on a Sharpe-ratio
//! utility, optionally with auxiliary "guides" attached to intermediate
//! stages. Stage-wise baselines, an exact backtest, and the data pipeline
//! live alongside.

pub mod backtest;
pub mod dataflow;
pub mod diff;
pub mod guides;
pub mod mvopt;
pub mod objective;
pub mod stages;
pub mod tensor;
pub mod trainer;

pub use diff::{DiffError, Graph, Mode, NodeId, ParamStore};
pub use tensor::Tensor;
