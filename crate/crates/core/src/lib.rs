//! Weakly supervised video anomaly scoring: tensor ops with hand-written
//! backward passes, multi-scale temporal pyramid, channel/temporal
//! attention, losses, data handling, metrics and a training loop.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod amtpn;
pub mod cbam;
pub mod clip;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use layers::{Ctx, Mode};
pub use model::{Ablation, ForwardOutput, Model, ModelConfig};
pub use tensor::{ParamId, ParamStore, Tensor};
