use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use super::episode::EpisodeRecord;
use crate::error::{Error, Result};

/// FIFO episode replay.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<EpisodeRecord>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::config("replay capacity must be at least 1"));
        }
        Ok(ReplayBuffer {
            capacity,
            episodes: VecDeque::with_capacity(capacity.min(1 << 16)),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&EpisodeRecord> {
        self.episodes.get(i)
    }

    /// Appends a validated record, evicting the oldest at capacity.
    pub fn store(&mut self, record: EpisodeRecord) -> Result<()> {
        record.validate()?;
        if let Some(first) = self.episodes.front() {
            let same = first.n_agents() == record.n_agents()
                && first.obs[0][0].len() == record.obs[0][0].len()
                && first.states[0].len() == record.states[0].len()
                && first.avail[0][0].len() == record.avail[0][0].len();
            if !same {
                return Err(Error::contract("episode shape differs from the buffer's"));
            }
        }
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(record);
        Ok(())
    }

    /// Uniform sample without replacement. `None` while fewer than
    /// `batch_size` episodes are stored.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Option<Vec<&EpisodeRecord>> {
        if batch_size == 0 || self.episodes.len() < batch_size {
            return None;
        }
        Some(
            index::sample(rng, self.episodes.len(), batch_size)
                .into_iter()
                .map(|i| &self.episodes[i])
                .collect(),
        )
    }
}
