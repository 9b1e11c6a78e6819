//! Dataset generation, loading, batching and the binary tensor container.

pub mod dataset;
pub mod synth;
pub mod tensor_file;

pub use dataset::{synth_generate, BatchIter, Dataset, DatasetManifest, Split};
pub use synth::{SynthConfig, SynthData};
pub use tensor_file::{read_tensor, write_tensor, DType};
