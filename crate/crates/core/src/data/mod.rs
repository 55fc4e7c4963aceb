//! Datasets: synthetic generation, on-disk layout, the window-pooling
//! encoder, split protocols and batching.
//!
//! On-disk layout of a dataset root:
//!
//! ```text
//! root/meta.json                      manifest (UTF-8 JSON)
//! root/samples/<sample_id>/<mod>.csv  one row per time step, no header
//! ```

mod batch;
mod encode;
mod manifest;
mod split;
mod synthetic;

pub use batch::{batch_iter, BatchOrder, EncodedBatch};
pub use encode::{
    load_encoded, segment_and_pool, temporal_align, EncodedDataset, EncodedModality,
    EncodedSample, EncodingConfig,
};
pub use manifest::{read_record, DatasetManifest, ModalityInfo, ModalityRecord, SampleEntry};
pub use split::{loso_protocols, make_split, Protocol, SampleKey, SplitSpec};
pub use synthetic::{generate_synthetic, SyntheticModality, SyntheticSpec};
