//! Index samplers: class-balanced oversampling and repeated augmentation.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Draws a class uniformly, then a member of that class uniformly, so every
/// nonempty class is equally likely regardless of its size.
#[derive(Clone, Debug)]
pub struct BalancedSampler {
    classes: Vec<Vec<usize>>,
}

impl BalancedSampler {
    /// `items` pairs a dataset index with its class id.
    pub fn new(items: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut classes: Vec<Vec<usize>> = Vec::new();
        for (index, class) in items {
            if classes.len() <= class {
                classes.resize_with(class + 1, Vec::new);
            }
            classes[class].push(index);
        }
        classes.retain(|c| !c.is_empty());
        if classes.is_empty() {
            return Err(Error::Contract(
                "balanced sampler needs at least one sample".into(),
            ));
        }
        Ok(Self { classes })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn draw(&self, rng: &mut Rng) -> usize {
        let class = &self.classes[rng.random_range(0..self.classes.len())];
        class[rng.random_range(0..class.len())]
    }

    pub fn batch(&self, size: usize, rng: &mut Rng) -> Vec<usize> {
        (0..size).map(|_| self.draw(rng)).collect()
    }

    /// `steps` batches of `batch_size` draws each.
    pub fn batches(&self, batch_size: usize, steps: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        (0..steps).map(|_| self.batch(batch_size, rng)).collect()
    }
}

/// Shuffled pass over `indices` split into consecutive batches (last may be short).
pub fn shuffled_batches(indices: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order = indices.to_vec();
    rng::shuffle(rng, &mut order);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// One emission of the repeated-augmentation sampler.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Emission {
    pub index: usize,
    /// Seed for this emission's augmentation draw; differs across repeats.
    pub aug_seed: u64,
}

/// Shuffles `indices` and emits each one `repeats` times in a row, each time
/// with a fresh augmentation seed.
pub fn repeated_augmentation(
    indices: &[usize],
    repeats: usize,
    rng: &mut Rng,
) -> Result<Vec<Emission>> {
    if repeats == 0 {
        return Err(Error::Contract("repeats must be at least 1".into()));
    }
    let mut order = indices.to_vec();
    rng::shuffle(rng, &mut order);
    let mut out = Vec::with_capacity(order.len() * repeats);
    for index in order {
        for _ in 0..repeats {
            out.push(Emission {
                index,
                aug_seed: rng.random(),
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_class_always_drawn() {
        let s = BalancedSampler::new((0..5).map(|i| (i, 3))).unwrap();
        assert_eq!(s.num_classes(), 1);
        let mut r = rng::seeded(0);
        assert!(s.batch(100, &mut r).iter().all(|&i| i < 5));
    }

    #[test]
    fn empty_sampler_rejected() {
        assert!(BalancedSampler::new(std::iter::empty()).is_err());
    }

    #[test]
    fn repeats_are_consecutive() {
        let mut r = rng::seeded(1);
        let e = repeated_augmentation(&[0, 1, 2, 3], 3, &mut r).unwrap();
        assert_eq!(e.len(), 12);
        for chunk in e.chunks(3) {
            assert!(chunk.iter().all(|x| x.index == chunk[0].index));
            assert_ne!(chunk[0].aug_seed, chunk[1].aug_seed);
        }
        let mut seen: Vec<usize> = e.iter().map(|x| x.index).collect();
        seen.sort_unstable();
        assert_eq!(seen, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
        assert!(repeated_augmentation(&[0], 0, &mut r).is_err());
    }

    #[test]
    fn single_repeat_is_permutation() {
        let mut r = rng::seeded(2);
        let mut idx: Vec<usize> = repeated_augmentation(&[5, 6, 7], 1, &mut r)
            .unwrap()
            .iter()
            .map(|e| e.index)
            .collect();
        idx.sort_unstable();
        assert_eq!(idx, vec![5, 6, 7]);
    }

    #[test]
    fn shuffled_batches_cover_all() {
        let mut r = rng::seeded(3);
        let b = shuffled_batches(&[0, 1, 2, 3, 4], 2, &mut r);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![2, 2, 1]);
    }
}
