//! Deterministic shuffled batching.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::{Error, Result};

/// Seeded permutation of `0..n` cut into fixed-size batches; the trailing
/// partial batch is dropped.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    Ok(order
        .chunks_exact(batch_size)
        .map(|c| c.to_vec())
        .collect())
}

/// Batch stream over a record slice.
pub fn batch_iter<'a, T>(
    records: &'a [T],
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Vec<&'a T>>> {
    let batches = batch_indices(records.len(), batch_size, seed)?;
    Ok(batches
        .into_iter()
        .map(move |idxs| idxs.into_iter().map(|i| &records[i]).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ten_records_batch_four_gives_two_batches() {
        let batches = batch_indices(10, 4, 0).unwrap();
        assert_eq!(batches.len(), 2);
        assert!(batches.iter().all(|b| b.len() == 4));
    }

    #[test]
    fn same_seed_same_order() {
        assert_eq!(batch_indices(32, 4, 9).unwrap(), batch_indices(32, 4, 9).unwrap());
    }

    #[test]
    fn different_seeds_usually_differ() {
        let reference = batch_indices(32, 4, 0).unwrap();
        let differing = (1..=20u64)
            .filter(|&s| batch_indices(32, 4, s).unwrap() != reference)
            .count();
        assert!(differing >= 19, "only {differing}/20 seeds produced a different order");
    }

    #[test]
    fn zero_batch_size_rejected() {
        assert!(batch_indices(4, 0, 0).is_err());
    }
}
