//! Benchmark fixtures.

use simattn_core::data::{generate, sample_tuples, Dataset, SyntheticSpec, TupleBatch};
use simattn_core::{Architecture, Encoder, EncoderConfig};

pub struct Fixture {
    pub data: Dataset,
    pub encoder: Encoder,
}

impl Fixture {
    /// Default synthetic data (`per_class` images per class) and a freshly
    /// initialized desk encoder.
    pub fn new(per_class: usize) -> Self {
        let data = generate(&SyntheticSpec::default(), per_class).expect("default spec is valid");
        let encoder = Encoder::new(EncoderConfig::desk(data.image_shape()), 0).expect("desk config is valid");
        Fixture { data, encoder }
    }

    pub fn batch(&self, arch: Architecture, size: usize) -> TupleBatch {
        sample_tuples(&self.data, arch, size, 0).expect("fixture has enough samples")
    }
}
