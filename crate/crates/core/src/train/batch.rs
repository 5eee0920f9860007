//! Teacher-forced mini-batches and the index-hash holdout split.

use crate::codec::SymbolDataset;
use crate::error::{Error, Result};
use crate::rng::{splitmix64, Rng};

/// One teacher-forced batch: `inputs[b] = seq[0..L−1]`, `targets[b] = seq[1..L]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    /// Dataset indices the rows were drawn from.
    pub indices: Vec<usize>,
}

impl Batch {
    /// Batch of the given sequences, in order.
    pub fn from_indices(dataset: &SymbolDataset, indices: &[usize]) -> Batch {
        let len = dataset.seq_len() - 1;
        let mut inputs = Vec::with_capacity(indices.len() * len);
        let mut targets = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            let seq = dataset.sequence(i);
            inputs.extend_from_slice(&seq[..len]);
            targets.extend_from_slice(&seq[1..]);
        }
        Batch {
            inputs,
            targets,
            batch: indices.len(),
            len,
            indices: indices.to_vec(),
        }
    }
}

/// Endless stream of batches drawn uniformly with replacement from a pool of
/// sequence indices.
pub struct BatchSampler<'a> {
    dataset: &'a SymbolDataset,
    pool: Vec<usize>,
    batch_size: usize,
    rng: Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(dataset: &'a SymbolDataset, pool: Vec<usize>, batch_size: usize, rng: Rng) -> Result<Self> {
        if pool.is_empty() {
            return Err(Error::InvalidArgument("cannot draw batches from an empty dataset".into()));
        }
        if dataset.seq_len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "sequences of length {} have nothing to predict",
                dataset.seq_len()
            )));
        }
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        Ok(Self {
            dataset,
            pool,
            batch_size,
            rng,
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        let idx: Vec<usize> = (0..self.batch_size)
            .map(|_| self.pool[self.rng.below(self.pool.len())])
            .collect();
        Batch::from_indices(self.dataset, &idx)
    }
}

impl Iterator for BatchSampler<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

/// Batches over the whole dataset.
pub fn make_batches(dataset: &SymbolDataset, batch_size: usize, rng: Rng) -> Result<BatchSampler<'_>> {
    BatchSampler::new(dataset, (0..dataset.len()).collect(), batch_size, rng)
}

/// Whether sequence `index` belongs to the holdout split. Depends only on
/// the index, so the split never needs storing.
pub fn is_holdout(index: usize, fraction: f64) -> bool {
    let h = splitmix64(index as u64 ^ 0x686f_6c64_6f75_7421);
    ((h >> 11) as f64 / (1u64 << 53) as f64) < fraction
}

/// `(train, holdout)` index lists for `n` sequences.
pub fn split(n: usize, fraction: f64) -> (Vec<usize>, Vec<usize>) {
    (0..n).partition(|&i| !is_holdout(i, fraction))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SymbolDataset {
        SymbolDataset::new(vec![3, 0, 1, 3, 2, 2, 3, 1, 0], 3, 4).unwrap()
    }

    #[test]
    fn shift_by_one() {
        let b = Batch::from_indices(&tiny(), &[0]);
        assert_eq!(b.inputs, vec![3, 0]);
        assert_eq!(b.targets, vec![0, 1]);
    }

    #[test]
    fn batch_shape() {
        let ds = SymbolDataset::new([vec![9usize], vec![0; 9]].concat().repeat(5), 10, 10).unwrap();
        let b = make_batches(&ds, 64, Rng::new(1)).unwrap().next_batch();
        assert_eq!((b.batch, b.len, b.inputs.len()), (64, 9, 64 * 9));
    }

    #[test]
    fn same_seed_same_stream() {
        let ds = tiny();
        let a: Vec<Vec<usize>> = make_batches(&ds, 4, Rng::new(9)).unwrap().take(5).map(|b| b.indices).collect();
        let b: Vec<Vec<usize>> = make_batches(&ds, 4, Rng::new(9)).unwrap().take(5).map(|b| b.indices).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn holdout_fraction_is_respected() {
        let (train, hold) = split(10_000, 0.1);
        assert_eq!(train.len() + hold.len(), 10_000);
        assert!((hold.len() as f64 - 1000.0).abs() < 100.0);
    }

    #[test]
    fn empty_pool_is_an_error() {
        assert!(BatchSampler::new(&tiny(), vec![], 4, Rng::new(0)).is_err());
    }
}
