//! Feature files, dataset manifests, synthetic data and batching.

mod batch;
mod feature_file;
mod manifest;
mod synth;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use batch::{assemble, batch_iter, crop_rng, epoch_order, tencrop_aggregate, Batch, CropChoice};
pub use feature_file::{decode, encode, read_feature_file, write_feature_file, FORMAT_VERSION, MAGIC};
pub use manifest::{
    read_split, write_split, Dataset, RecordDescriptor, VideoLabel, VideoRecord, TEST_MANIFEST, TRAIN_MANIFEST,
};
pub use synth::{anomaly_directions, synthesize, SyntheticSpec};

/// Independent ChaCha stream for `(seed, purpose, index)`.
pub fn derived_rng(seed: u64, purpose: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose.rotate_left(48) ^ index);
    rng
}
