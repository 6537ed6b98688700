//! Minimal CPU neural-network toolkit: named parameter storage, GEMM-backed
//! layers with hand-derived backward passes, Adam, and seeded RNG substreams.
//!
//! Everything is deterministic for a fixed seed: kernels are single-threaded
//! and reductions run in a fixed order.

mod adam;
mod attn;
mod conv;
mod init;
mod linear;
mod norm;
mod ops;
mod param;

pub use adam::{Adam, AdamOpts, LrSchedule};
pub use attn::{softmax_in_place, AttnCache, SelfAttention2d};
pub use conv::{
    gemm_nn, gemm_nt, gemm_tn, global_avg_pool, global_avg_pool_backward, upsample_nearest2,
    upsample_nearest2_backward, Conv2d,
};
pub use init::Init;
pub use linear::Linear;
pub use norm::{group_count, GnCache, GroupNorm};
pub use ops::{argmax_row, cross_entropy, log_softmax, silu, silu_backward, timestep_embedding};
pub use param::{Gradients, ParamId, ParamStore};

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Lowercase hex rendering of a digest.
pub fn hex_digest(bytes: &[u8]) -> String {
    param::hex_string(bytes)
}

/// Derives an independent, reproducible RNG from a master seed and a purpose
/// label ("init", "noising", "sampling", ...), so each phase of a run draws
/// from its own stream.
pub fn substream(master_seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}
