use crate::env::ObsSnapshot;
use crate::gnn::NodeStates;
use crate::graph::Graph;
use rand::Rng;
use std::collections::VecDeque;
use std::sync::Arc;

/// One environment step as seen by the learner.
///
/// The successor of record `t` is record `t + 1` unless `terminal` is set.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub graph: Arc<Graph>,
    /// Observation before the step.
    pub obs: ObsSnapshot,
    /// Node states before the step's update (`None` without graph observations).
    pub states: Option<NodeStates<f32>>,
    pub actions: Vec<u8>,
    pub rewards: Vec<f32>,
    pub arrived: Vec<bool>,
    /// Agent was at a node, so its action took effect.
    pub acted: Vec<bool>,
    /// First step of an episode.
    pub episode_start: bool,
    /// Observation after the last step of a truncated episode.
    pub terminal: Option<ObsSnapshot>,
}

/// Ring buffer of step records, oldest first.
#[derive(Debug, Clone)]
pub struct ReplayMemory {
    capacity: usize,
    records: VecDeque<StepRecord>,
}

impl ReplayMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        ReplayMemory {
            capacity,
            records: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: StepRecord) {
        if self.records.len() == self.capacity {
            self.records.pop_front();
        }
        self.records.push_back(record);
    }

    pub fn get(&self, i: usize) -> Option<&StepRecord> {
        self.records.get(i)
    }

    pub fn last_mut(&mut self) -> Option<&mut StepRecord> {
        self.records.back_mut()
    }

    /// `count` uniform sequence starts with `len` records available from each.
    pub fn sample_starts<R: Rng + ?Sized>(
        &self,
        count: usize,
        len: usize,
        rng: &mut R,
    ) -> Option<Vec<usize>> {
        if len == 0 || self.records.len() < len {
            return None;
        }
        let hi = self.records.len() - len;
        Some((0..count).map(|_| rng.random_range(0..=hi)).collect())
    }
}

impl std::ops::Index<usize> for ReplayMemory {
    type Output = StepRecord;

    fn index(&self, i: usize) -> &StepRecord {
        &self.records[i]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvConfig, GraphSource, RoutingEnv};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(env: &RoutingEnv, tag: f32) -> StepRecord {
        let n = env.packets().len();
        StepRecord {
            graph: env.graph().clone(),
            obs: env.snapshot(),
            states: None,
            actions: vec![0; n],
            rewards: vec![tag; n],
            arrived: vec![false; n],
            acted: vec![true; n],
            episode_start: false,
            terminal: None,
        }
    }

    #[test]
    fn ring_drops_oldest() {
        let src = GraphSource::Generated {
            nodes: 6,
            degree: 3,
            delay_scale: 7.0,
        };
        let env = RoutingEnv::new(EnvConfig::default(), src, 0).unwrap();
        let mut m = ReplayMemory::new(3);
        for i in 0..5 {
            m.push(record(&env, i as f32));
            assert_eq!(m.len(), (i + 1).min(3));
        }
        assert_eq!(m[0].rewards[0], 2.0);
        assert_eq!(m[2].rewards[0], 4.0);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(m.sample_starts(4, 4, &mut rng).is_none());
        let s = m.sample_starts(1000, 2, &mut rng).unwrap();
        assert!(s.iter().all(|&i| i <= 1));
        assert!(s.contains(&0) && s.contains(&1));
    }
}
