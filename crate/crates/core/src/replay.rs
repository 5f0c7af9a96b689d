//! Fixed-capacity FIFO experience replay.

use rand::seq::index;
use rand::Rng;

use crate::env::Action;

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Action,
    pub reward: f64,
    /// `None` for terminal transitions.
    pub next_state: Option<Vec<f64>>,
}

impl Transition {
    pub fn is_terminal(&self) -> bool {
        self.next_state.is_none()
    }
}

/// Ring buffer; once full, each push evicts the oldest transition.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            capacity,
            items: Vec::with_capacity(capacity),
            head: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Slot indices of a uniform mini-batch drawn without replacement.
    pub fn sample_indices(&self, batch: usize, rng: &mut impl Rng) -> Vec<usize> {
        let n = batch.min(self.items.len());
        index::sample(rng, self.items.len(), n).into_vec()
    }

    pub fn get(&self, slot: usize) -> &Transition {
        &self.items[slot]
    }

    /// Transitions from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.items.split_at(self.head);
        older.iter().chain(newer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(r: f64) -> Transition {
        Transition {
            state: vec![r],
            action: Action::Same,
            reward: r,
            next_state: None,
        }
    }

    #[test]
    fn eviction_is_fifo() {
        let mut b = ReplayBuffer::new(5);
        for k in 0..8 {
            b.push(tr(k as f64));
            assert!(b.len() <= 5);
        }
        let rewards: Vec<f64> = b.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![3.0, 4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn sampling_is_uniform_over_slots() {
        let mut b = ReplayBuffer::new(20);
        for k in 0..20 {
            b.push(tr(k as f64));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 20];
        let draws = 20_000;
        for _ in 0..draws {
            for i in b.sample_indices(4, &mut rng) {
                counts[i] += 1;
            }
        }
        let expected = draws as f64 * 4.0 / 20.0;
        for c in counts {
            // 5 sigma of a binomial(20000, 0.2)
            assert!((c as f64 - expected).abs() < 5.0 * (expected * 0.8).sqrt(), "{c}");
        }
        let batch = b.sample_indices(8, &mut rng);
        let mut dedup = batch.clone();
        dedup.sort_unstable();
        dedup.dedup();
        assert_eq!(dedup.len(), 8);
        assert_eq!(ReplayBuffer::new(3).sample_indices(16, &mut rng).len(), 0);
    }
}
