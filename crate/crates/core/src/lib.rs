pub mod bench;
pub mod bits;
pub mod channel;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod error;
pub mod grad;
pub mod loss;
pub mod polar;
pub mod train;
pub mod weights;

pub use bits::{BitMatrix, BitVector};
pub use decoder::{BpDecoder, DecodeOutput, FactorGraphLayout, MessageState};
pub use error::{Error, Result};
pub use loss::LossKind;
pub use polar::PolarCode;
pub use weights::{Checkpoint, ScalingWeights};
