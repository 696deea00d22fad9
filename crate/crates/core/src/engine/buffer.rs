use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct ReplaySample {
    pub input: Vec<f64>,
    pub label: usize,
    pub task: usize,
}

/// Fixed-capacity uniform sample of everything inserted so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    slots: Vec<ReplaySample>,
    seen: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            slots: Vec::with_capacity(capacity.min(4096)),
            seen: 0,
        }
    }

    /// Reservoir step: the first `capacity` samples fill the buffer, after
    /// which the `i`-th sample overwrites a uniform slot with probability
    /// `capacity / i`.
    pub fn insert<R: Rng + ?Sized>(&mut self, sample: ReplaySample, rng: &mut R) {
        self.seen += 1;
        if self.capacity == 0 {
            return;
        }
        if self.slots.len() < self.capacity {
            self.slots.push(sample);
            return;
        }
        let j = rng.random_range(0..self.seen);
        if let Ok(j) = usize::try_from(j) {
            if j < self.capacity {
                self.slots[j] = sample;
            }
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn seen_count(&self) -> u64 {
        self.seen
    }

    pub fn samples(&self) -> &[ReplaySample] {
        &self.slots
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(i: usize, task: usize) -> ReplaySample {
        ReplaySample {
            input: vec![i as f64],
            label: i,
            task,
        }
    }

    #[test]
    fn keeps_everything_until_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ReplayBuffer::new(5);
        for i in 0..5 {
            b.insert(sample(i, 0), &mut rng);
        }
        let labels: Vec<usize> = b.samples().iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn zero_capacity_stays_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = ReplayBuffer::new(0);
        for i in 0..100 {
            b.insert(sample(i, 0), &mut rng);
        }
        assert!(b.is_empty());
        assert_eq!(b.seen_count(), 100);
    }

    #[test]
    fn per_task_counts_are_uniform() {
        // 10^4 inserts from 4 equal tasks into 10 slots, 200 trials: the
        // retained count of each task is Binomial-like with mean 2.5 per trial.
        let trials = 200;
        let mut totals = [0usize; 4];
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut b = ReplayBuffer::new(10);
            for i in 0..10_000 {
                b.insert(sample(i, i / 2_500), &mut rng);
            }
            assert_eq!(b.len(), 10);
            for s in b.samples() {
                totals[s.task] += 1;
            }
        }
        // Per trial the counts are multivariate hypergeometric; the binomial
        // variance 10 * 0.25 * 0.75 bounds it from above.
        let mean = 10.0 * 0.25 * trials as f64;
        let sd = (10.0 * 0.25 * 0.75 * trials as f64).sqrt();
        for t in totals {
            assert!((t as f64 - mean).abs() < 3.0 * sd, "{totals:?}");
        }
    }
}
