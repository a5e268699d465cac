use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Endless stream of (vision-language, language-only) pairs.
///
/// One epoch is `max(|vl|, |lm|)` pairs. Within an epoch the longer set is
/// visited exactly once in shuffled order; the shorter one is reshuffled
/// each time it runs out. Both orders are redrawn at every epoch boundary.
pub struct PairedIterator<A, B> {
    vl: Vec<A>,
    lm: Vec<B>,
    rng: ChaCha8Rng,
    vl_order: Vec<usize>,
    lm_order: Vec<usize>,
    vl_pos: usize,
    lm_pos: usize,
    in_epoch: usize,
}

impl<A: Clone, B: Clone> PairedIterator<A, B> {
    pub fn new(vl: Vec<A>, lm: Vec<B>, seed: u64) -> Self {
        assert!(!vl.is_empty() && !lm.is_empty(), "both sets must be non-empty");
        let mut it = Self {
            vl_order: (0..vl.len()).collect(),
            lm_order: (0..lm.len()).collect(),
            vl,
            lm,
            rng: ChaCha8Rng::seed_from_u64(seed),
            vl_pos: 0,
            lm_pos: 0,
            in_epoch: 0,
        };
        it.new_epoch();
        it
    }

    pub fn epoch_len(&self) -> usize {
        self.vl.len().max(self.lm.len())
    }

    fn new_epoch(&mut self) {
        self.vl_order.shuffle(&mut self.rng);
        self.lm_order.shuffle(&mut self.rng);
        self.vl_pos = 0;
        self.lm_pos = 0;
        self.in_epoch = 0;
    }

    /// Index pair of the next item, into the original vectors.
    pub fn next_indices(&mut self) -> (usize, usize) {
        if self.in_epoch == self.epoch_len() {
            self.new_epoch();
        }
        if self.vl_pos == self.vl_order.len() {
            self.vl_order.shuffle(&mut self.rng);
            self.vl_pos = 0;
        }
        if self.lm_pos == self.lm_order.len() {
            self.lm_order.shuffle(&mut self.rng);
            self.lm_pos = 0;
        }
        let pair = (self.vl_order[self.vl_pos], self.lm_order[self.lm_pos]);
        self.vl_pos += 1;
        self.lm_pos += 1;
        self.in_epoch += 1;
        pair
    }
}

impl<A: Clone, B: Clone> Iterator for PairedIterator<A, B> {
    type Item = (A, B);

    fn next(&mut self) -> Option<(A, B)> {
        let (i, j) = self.next_indices();
        Some((self.vl[i].clone(), self.lm[j].clone()))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn shorter_set_recycled() {
        let it = PairedIterator::new(vec![0, 1, 2, 3], vec!['a', 'b'], 3);
        assert_eq!(it.epoch_len(), 4);
        let epoch: Vec<_> = it.take(4).collect();
        let mut vl: Vec<_> = epoch.iter().map(|p| p.0).collect();
        vl.sort();
        assert_eq!(vl, [0, 1, 2, 3]);
        for c in ['a', 'b'] {
            assert_eq!(epoch.iter().filter(|p| p.1 == c).count(), 2);
        }
    }

    #[test]
    fn fixed_seed_fixed_sequence() {
        let a: Vec<_> = PairedIterator::new((0..7).collect(), (0..3).collect::<Vec<i32>>(), 9).take(30).collect();
        let b: Vec<_> = PairedIterator::new((0..7).collect(), (0..3).collect::<Vec<i32>>(), 9).take(30).collect();
        let c: Vec<_> = PairedIterator::new((0..7).collect(), (0..3).collect::<Vec<i32>>(), 10).take(30).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    proptest! {
        #[test]
        fn prop_every_epoch_covers_longer_set(nv in 1usize..20, nl in 1usize..20, seed in any::<u64>()) {
            let mut it = PairedIterator::new((0..nv).collect(), (0..nl).collect::<Vec<usize>>(), seed);
            let n = it.epoch_len();
            for _ in 0..3 {
                let (mut v, mut l): (Vec<_>, Vec<_>) = (&mut it).take(n).unzip();
                v.sort();
                l.sort();
                if nv >= nl {
                    prop_assert_eq!(v, (0..nv).collect::<Vec<_>>());
                } else {
                    prop_assert_eq!(l, (0..nl).collect::<Vec<_>>());
                }
            }
        }
    }
}
