use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DataError, PatchDataset};
use crate::losses::Label;

/// Class-balanced mini-batch sampler.
///
/// Each epoch reshuffles both classes and emits `ceil(max_class / (batch/2))`
/// batches of exactly `batch/2` positives and `batch/2` negatives. Draws are
/// without replacement until a class is exhausted; the exhausted class is then
/// reshuffled and reused.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    pos: Vec<usize>,
    neg: Vec<usize>,
    half: usize,
}

struct Deck<'a> {
    items: Vec<usize>,
    src: &'a [usize],
    cursor: usize,
}

impl<'a> Deck<'a> {
    fn new<R: Rng + ?Sized>(src: &'a [usize], rng: &mut R) -> Self {
        let mut items = src.to_vec();
        items.shuffle(rng);
        Self { items, src, cursor: 0 }
    }

    fn draw<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if self.cursor == self.items.len() {
            self.items.copy_from_slice(self.src);
            self.items.shuffle(rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.items[self.cursor - 1]
    }
}

impl BalancedSampler {
    pub fn new(ds: &PatchDataset, batch_size: usize) -> Result<Self, DataError> {
        if batch_size == 0 || batch_size % 2 != 0 {
            return Err(DataError::InvalidBatchSize(batch_size));
        }
        let (pos, neg) = ds.class_indices();
        if pos.is_empty() {
            return Err(DataError::EmptyClass(Label::Match));
        }
        if neg.is_empty() {
            return Err(DataError::EmptyClass(Label::NonMatch));
        }
        Ok(Self { pos, neg, half: batch_size / 2 })
    }

    pub fn batch_size(&self) -> usize {
        self.half * 2
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.pos.len().max(self.neg.len()).div_ceil(self.half)
    }

    /// All batches of one epoch; each batch lists positives first, then negatives.
    pub fn epoch<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Vec<usize>> {
        let mut pos = Deck::new(&self.pos, rng);
        let mut neg = Deck::new(&self.neg, rng);
        (0..self.batches_per_epoch())
            .map(|_| {
                let mut batch = Vec::with_capacity(self.half * 2);
                for _ in 0..self.half {
                    batch.push(pos.draw(rng));
                }
                for _ in 0..self.half {
                    batch.push(neg.draw(rng));
                }
                batch
            })
            .collect()
    }
}

/// Endless stream of balanced batches (pair indices) seeded from `seed`.
pub fn balanced_batches(
    ds: &PatchDataset,
    batch_size: usize,
    seed: u64,
) -> Result<impl Iterator<Item = Vec<usize>>, DataError> {
    let sampler = BalancedSampler::new(ds, batch_size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(std::iter::repeat(()).flat_map(move |_| sampler.epoch(&mut rng)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{PairIndex, PatchStore, Split};

    fn dataset(pos: usize, neg: usize) -> PatchDataset {
        let store = PatchStore::from_raw(2, 2, vec![0; 4 * 2]).unwrap();
        let mut pairs = vec![PairIndex { a: 0, b: 1, label: Label::Match }; pos];
        pairs.extend(vec![PairIndex { a: 1, b: 0, label: Label::NonMatch }; neg]);
        PatchDataset::new(store, pairs, Split::Train).unwrap()
    }

    fn check_balanced(ds: &PatchDataset, batch: &[usize]) {
        let pos = batch.iter().filter(|&&i| ds.pairs[i].label.is_match()).count();
        assert_eq!(pos * 2, batch.len());
    }

    #[test]
    fn exact_division() {
        let ds = dataset(10, 10);
        let s = BalancedSampler::new(&ds, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ep = s.epoch(&mut rng);
        assert_eq!(ep.len(), 5);
        for b in &ep {
            check_balanced(&ds, b);
        }
        // without replacement within the epoch
        let mut all: Vec<usize> = ep.concat();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn minority_class_recycles() {
        let ds = dataset(3, 30);
        let s = BalancedSampler::new(&ds, 32).unwrap();
        assert_eq!(s.batches_per_epoch(), 2);
        let ep = s.epoch(&mut ChaCha8Rng::seed_from_u64(2));
        for b in &ep {
            assert_eq!(b.len(), 32);
            check_balanced(&ds, b);
        }
    }

    #[test]
    fn seeded_stream_is_reproducible() {
        let ds = dataset(7, 12);
        let a: Vec<_> = balanced_batches(&ds, 4, 9).unwrap().take(20).collect();
        let b: Vec<_> = balanced_batches(&ds, 4, 9).unwrap().take(20).collect();
        let c: Vec<_> = balanced_batches(&ds, 4, 10).unwrap().take(20).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for batch in &a {
            check_balanced(&ds, batch);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(BalancedSampler::new(&dataset(0, 4), 4), Err(DataError::EmptyClass(Label::Match))));
        assert!(matches!(BalancedSampler::new(&dataset(4, 0), 4), Err(DataError::EmptyClass(Label::NonMatch))));
        assert!(matches!(BalancedSampler::new(&dataset(4, 4), 3), Err(DataError::InvalidBatchSize(3))));
    }
}
