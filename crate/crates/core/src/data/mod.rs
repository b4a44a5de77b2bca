//! Procedural dataset with known discriminative parts, tuple sampling and the
//! dataset file format.

mod io;
mod synthetic;
mod tuples;

pub use io::{read_dataset, write_dataset, DATASET_MAGIC};
pub use synthetic::{generate, Dataset, GlyphKind, Sample, SyntheticSpec};
pub use tuples::{sample_tuples, Tuple, TupleBatch};
