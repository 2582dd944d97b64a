use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};

/// Seeded permutation of `0..n` for one epoch, cut into full batches; the short tail is dropped.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(invalid(format!(
            "batch_size {batch_size} leaves no negatives; need at least 2"
        )));
    }
    if batch_size > n {
        return Err(invalid(format!(
            "batch_size {batch_size} exceeds dataset size {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    Ok(perm
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect())
}
