//! Convolutional encoder, baseline metric losses and the checkpoint format.

mod checkpoint;
mod encoder;
mod loss;

pub use checkpoint::{read_parameters, write_parameters, CHECKPOINT_MAGIC};
pub use encoder::{Activation, BoundEncoder, ConvLayer, Encoder, EncoderConfig, Encoding, Pooling};
pub use loss::{metric_loss, MetricLossConfig, MetricLossKind};
