//! Named, independent RNG substreams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Parameter initialisation.
pub const STREAM_INIT: u64 = 1;
/// Domain-adaptation minibatches for source `i` use `STREAM_DA_SOURCE + i`.
pub const STREAM_DA_SOURCE: u64 = 100;
pub const STREAM_DA_TARGET: u64 = 200;
pub const STREAM_DA_TARGET_LABELED: u64 = 201;
/// Meta-split choice.
pub const STREAM_META_SPLIT: u64 = 300;
/// Meta-episode minibatches for source `i` use `STREAM_META_SOURCE + i`.
pub const STREAM_META_SOURCE: u64 = 400;
pub const STREAM_META_TARGET: u64 = 500;
pub const STREAM_META_TARGET_LABELED: u64 = 501;
/// Base of the per-source meta-test (held-out, unlabelled) streams.
pub const STREAM_META_HELDOUT: u64 = 600;
/// Base of the per-source meta-validation (held-out, labelled) streams.
pub const STREAM_META_VAL: u64 = 700;
/// k-shot labelled target selection, keyed by the data seed.
pub const STREAM_KSHOT: u64 = 800;

/// ChaCha8 keyed by `seed`, positioned on stream `stream`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
