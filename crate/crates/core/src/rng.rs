//! Deterministic random-stream derivation.
//!
//! Every random decision in the pipelines draws from a stream derived from a
//! single master seed, a purpose label and an index. Streams are independent
//! of each other and of iteration order, so adding a consumer never perturbs
//! the draws seen by existing ones.

use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// Derives the RNG for `(label, index)` under `master`.
///
/// The 32-byte ChaCha8 key is `SHA-256(master_le || label || index_le)`;
/// distinct labels or indices therefore yield unrelated streams.
pub fn derive_rng(master: u64, label: &str, index: u64) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Samples an array of i.i.d. standard normal values in row-major order.
pub fn standard_normal(rng: &mut impl Rng, shape: &[usize]) -> ArrayD<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    ArrayD::from_shape_vec(shape.to_vec(), data).expect("shape/product mismatch")
}
