//! Ring replay buffer with uniform sampling.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::env::{EnvAction, ACTION_DIM};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BufferError {
    #[error("requested {requested} samples from a buffer of size {size}")]
    Underfilled { requested: usize, size: usize },
    #[error("transition schema differs from the buffer's first transition")]
    MixedSchema,
    #[error("buffer capacity must be positive")]
    ZeroCapacity,
}

/// Opponent-model hidden state captured at experience time: the in-episode
/// summary `u` and the opponent representation `h` the prediction consumed.
#[derive(Debug, Clone, PartialEq)]
pub struct OmSnapshot {
    pub u: Vec<f64>,
    pub h: Vec<f64>,
}

/// One stored step from a single agent's point of view. Optional fields are
/// present only under the training modes that need them; a buffer holds one
/// consistent schema for its whole life.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub opp_obs: Option<Vec<f64>>,
    pub action: EnvAction,
    pub opp_action: EnvAction,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub next_opp_obs: Option<Vec<f64>>,
    pub done: bool,
    /// Own opponent-action prediction as fed to the policy at this step.
    pub pred: Option<EnvAction>,
    /// Prediction fed at the next step (zero-masked on terminal steps).
    pub next_pred: Option<EnvAction>,
    /// Opponent's own next-step prediction, needed to query a
    /// prediction-conditioned opponent target policy during centralised
    /// training.
    pub opp_next_pred: Option<EnvAction>,
    pub om_state: Option<OmSnapshot>,
    pub next_om_state: Option<OmSnapshot>,
}

fn schema_of(t: &Transition) -> [bool; 6] {
    [
        t.opp_obs.is_some(),
        t.pred.is_some(),
        t.next_pred.is_some(),
        t.opp_next_pred.is_some(),
        t.om_state.is_some(),
        t.next_om_state.is_some(),
    ]
}

/// A batch of transitions stacked into `[B, dim]` tensors.
#[derive(Debug, Clone)]
pub struct Batch {
    pub obs: Tensor,
    pub opp_obs: Option<Tensor>,
    pub actions: Tensor,
    pub opp_actions: Tensor,
    pub rewards: Tensor,
    pub next_obs: Tensor,
    pub next_opp_obs: Option<Tensor>,
    pub done: Tensor,
    pub preds: Option<Tensor>,
    pub next_preds: Option<Tensor>,
    pub opp_next_preds: Option<Tensor>,
    pub u: Option<Tensor>,
    pub h: Option<Tensor>,
    pub next_u: Option<Tensor>,
    pub next_h: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.obs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self, BufferError> {
        if capacity == 0 {
            return Err(BufferError::ZeroCapacity);
        }
        Ok(Self {
            capacity,
            items: Vec::new(),
            next: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn clear(&mut self) {
        self.items.clear();
        self.next = 0;
    }

    /// O(1) amortised insert; evicts the oldest transition once full.
    pub fn add(&mut self, transition: Transition) -> Result<(), BufferError> {
        if let Some(first) = self.items.first() {
            if schema_of(first) != schema_of(&transition) {
                return Err(BufferError::MixedSchema);
            }
        }
        if self.items.len() < self.capacity {
            self.items.push(transition);
        } else {
            self.items[self.next] = transition;
            self.next = (self.next + 1) % self.capacity;
        }
        Ok(())
    }

    /// Transitions in insertion order, oldest first.
    pub fn iter_ordered(&self) -> impl Iterator<Item = &Transition> {
        let (tail, head) = self.items.split_at(self.next.min(self.items.len()));
        head.iter().chain(tail.iter())
    }

    /// `n` uniform draws with replacement, stacked into a batch.
    pub fn sample(&self, n: usize, rng: &mut ChaCha20Rng) -> Result<Batch, BufferError> {
        if self.items.len() < n {
            return Err(BufferError::Underfilled {
                requested: n,
                size: self.items.len(),
            });
        }
        let picks: Vec<&Transition> = (0..n)
            .map(|_| &self.items[rng.gen_range(0..self.items.len())])
            .collect();
        Ok(stack(&picks))
    }
}

fn stack_rows(rows: impl Iterator<Item = Vec<f64>>, n: usize) -> Tensor {
    let mut data = Vec::new();
    for row in rows {
        data.extend_from_slice(&row);
    }
    let cols = data.len() / n;
    Tensor::from_raw(vec![n, cols], data)
}

fn stack(picks: &[&Transition]) -> Batch {
    let n = picks.len();
    let first = picks[0];
    let action_row = |a: &EnvAction| a.weights().to_vec();
    Batch {
        obs: stack_rows(picks.iter().map(|t| t.obs.clone()), n),
        opp_obs: first
            .opp_obs
            .as_ref()
            .map(|_| stack_rows(picks.iter().map(|t| t.opp_obs.clone().unwrap()), n)),
        actions: stack_rows(picks.iter().map(|t| action_row(&t.action)), n),
        opp_actions: stack_rows(picks.iter().map(|t| action_row(&t.opp_action)), n),
        rewards: Tensor::from_raw(vec![n, 1], picks.iter().map(|t| t.reward).collect()),
        next_obs: stack_rows(picks.iter().map(|t| t.next_obs.clone()), n),
        next_opp_obs: first
            .next_opp_obs
            .as_ref()
            .map(|_| stack_rows(picks.iter().map(|t| t.next_opp_obs.clone().unwrap()), n)),
        done: Tensor::from_raw(
            vec![n, 1],
            picks
                .iter()
                .map(|t| if t.done { 1.0 } else { 0.0 })
                .collect(),
        ),
        preds: first
            .pred
            .as_ref()
            .map(|_| stack_rows(picks.iter().map(|t| action_row(t.pred.as_ref().unwrap())), n)),
        next_preds: first.next_pred.as_ref().map(|_| {
            stack_rows(
                picks.iter().map(|t| action_row(t.next_pred.as_ref().unwrap())),
                n,
            )
        }),
        opp_next_preds: first.opp_next_pred.as_ref().map(|_| {
            stack_rows(
                picks
                    .iter()
                    .map(|t| action_row(t.opp_next_pred.as_ref().unwrap())),
                n,
            )
        }),
        u: first
            .om_state
            .as_ref()
            .map(|_| stack_rows(picks.iter().map(|t| t.om_state.clone().unwrap().u), n)),
        h: first
            .om_state
            .as_ref()
            .map(|_| stack_rows(picks.iter().map(|t| t.om_state.clone().unwrap().h), n)),
        next_u: first
            .next_om_state
            .as_ref()
            .map(|_| stack_rows(picks.iter().map(|t| t.next_om_state.clone().unwrap().u), n)),
        next_h: first
            .next_om_state
            .as_ref()
            .map(|_| stack_rows(picks.iter().map(|t| t.next_om_state.clone().unwrap().h), n)),
    }
}

pub(crate) fn simple_transition(reward: f64) -> Transition {
    Transition {
        obs: vec![reward; 3],
        opp_obs: None,
        action: EnvAction::one_hot(0),
        opp_action: EnvAction::one_hot(1),
        reward,
        next_obs: vec![0.0; 3],
        next_opp_obs: None,
        done: false,
        pred: None,
        next_pred: None,
        opp_next_pred: None,
        om_state: None,
        next_om_state: None,
    }
}

// keep the helper visible to the trajectory tests as well
#[allow(unused_imports)]
pub(crate) use simple_transition as _simple_transition;

const _: () = assert!(ACTION_DIM == 5);

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn ring_evicts_oldest_first() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for r in 0..4 {
            buf.add(simple_transition(r as f64)).unwrap();
        }
        assert_eq!(buf.len(), 3);
        let rewards: Vec<f64> = buf.iter_ordered().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn ring_holds_last_capacity_in_insertion_order() {
        let mut buf = ReplayBuffer::new(5).unwrap();
        for r in 0..13 {
            buf.add(simple_transition(r as f64)).unwrap();
        }
        let rewards: Vec<f64> = buf.iter_ordered().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![8.0, 9.0, 10.0, 11.0, 12.0]);
    }

    #[test]
    fn sampled_rewards_are_a_sub_multiset_of_stored() {
        let mut buf = ReplayBuffer::new(8).unwrap();
        for r in 0..8 {
            buf.add(simple_transition(r as f64 * 1.5)).unwrap();
        }
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let batch = buf.sample(8, &mut rng).unwrap();
        let stored: Vec<f64> = (0..8).map(|r| r as f64 * 1.5).collect();
        for &r in batch.rewards.data() {
            assert!(stored.contains(&r));
        }
    }

    #[test]
    fn sampling_underfilled_buffer_errors() {
        let mut buf = ReplayBuffer::new(10).unwrap();
        buf.add(simple_transition(0.0)).unwrap();
        let err = buf.sample(2, &mut ChaCha20Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, BufferError::Underfilled { requested: 2, size: 1 }));
    }

    #[test]
    fn uniform_sampling_frequencies_within_one_percent() {
        let mut buf = ReplayBuffer::new(10).unwrap();
        for r in 0..10 {
            buf.add(simple_transition(r as f64)).unwrap();
        }
        let mut rng = ChaCha20Rng::seed_from_u64(314);
        let mut counts = [0usize; 10];
        let draws = 100_000;
        for _ in 0..draws / 10 {
            let batch = buf.sample(10, &mut rng).unwrap();
            for &r in batch.rewards.data() {
                counts[r as usize] += 1;
            }
        }
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.1).abs() <= 0.01, "frequency {freq}");
        }
    }

    #[test]
    fn sampling_is_reproducible_under_a_fixed_seed() {
        let mut buf = ReplayBuffer::new(32).unwrap();
        for r in 0..32 {
            buf.add(simple_transition(r as f64)).unwrap();
        }
        let draw = || {
            let mut rng = ChaCha20Rng::seed_from_u64(77);
            buf.sample(16, &mut rng).unwrap().rewards.data().to_vec()
        };
        assert_eq!(draw(), draw());
    }

    #[test]
    fn mixed_schema_is_rejected() {
        let mut buf = ReplayBuffer::new(4).unwrap();
        buf.add(simple_transition(0.0)).unwrap();
        let mut with_pred = simple_transition(1.0);
        with_pred.pred = Some(EnvAction::uniform());
        let err = buf.add(with_pred).unwrap_err();
        assert_eq!(err, BufferError::MixedSchema);
    }
}
