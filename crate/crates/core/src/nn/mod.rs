//! Model components. Every layer records its forward pass on a
//! [`Forward`](params::Forward) tape so one backward call differentiates the
//! whole model.

pub mod cnn;
pub mod fusion;
pub mod layers;
pub mod model;
pub mod params;
pub mod transformer;

pub use model::{HybridSegNet, ModelConfig, ModelOutputs, Prediction, VIEWS};
pub use params::{Forward, Mode, ParamId, ParamStore};
