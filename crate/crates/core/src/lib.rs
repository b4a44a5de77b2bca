//! Similarity attention for metric-learning models.
//!
//! Gradient-based attention maps computed from the similarity scores of
//! Siamese, triplet and quadruplet embedding networks, and the similarity
//! mining objective that trains through those maps.

pub mod arch;
pub mod attention;
pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod train;

pub use arch::Architecture;
pub use autograd::{Graph, GradientMap, Tensor};
pub use error::{Error, Result};
pub use model::{Encoder, EncoderConfig};
