pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flow_ops;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod param;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use flow_ops::FlowField;
pub use network::{ModelConfig, StarFlow, TemporalMode};
pub use param::{Binder, ParamId, ParamStore};
pub use tensor::{no_grad, Conv2dOpts, Tensor};
