//! Synthetic procedure generation, the on-disk embedding dataset format and
//! model checkpoints.

mod checkpoint;
mod dataset;
mod synthetic;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointHeader, NamedTensor, TensorEntry, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{read_dataset, write_dataset, Dataset, DatasetManifest, SampleRecord, Split, MANIFEST_VERSION};
pub use synthetic::{gen_synthetic, Standardization, SyntheticConfig, SyntheticData, Transition};

use std::path::Path;

use crate::error::{Error, Result};

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
