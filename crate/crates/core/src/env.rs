//! Two-player adversarial Keep-Away particle game.
//!
//! An attacker tries to reach one of two landmarks (its goal); the defender
//! has to keep it away without knowing which landmark is the goal. State
//! transitions are pure functions of the state and the two actions.

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ACTION_DIM: usize = 5;
pub const OBS_DIM: usize = 8;

const SIMPLEX_TOLERANCE: f64 = 1e-9;
const LANDMARK_RETRIES: usize = 100;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("action entries must be non-negative and sum to 1 (sum = {sum})")]
    NotOnSimplex { sum: f64 },
    #[error("episode already finished at t = {t} (length {episode_length})")]
    EpisodeFinished { t: usize, episode_length: usize },
}

/// Force-blend weights over [no-op, +x, -x, +y, -y].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvAction([f64; ACTION_DIM]);

impl EnvAction {
    pub fn new(weights: [f64; ACTION_DIM]) -> Result<Self, EnvError> {
        let sum: f64 = weights.iter().sum();
        let ok = weights.iter().all(|&w| w >= -SIMPLEX_TOLERANCE)
            && (sum - 1.0).abs() <= SIMPLEX_TOLERANCE;
        if !ok {
            return Err(EnvError::NotOnSimplex { sum });
        }
        Ok(Self(weights))
    }

    pub fn one_hot(index: usize) -> Self {
        debug_assert!(index < ACTION_DIM);
        let mut w = [0.0; ACTION_DIM];
        w[index] = 1.0;
        Self(w)
    }

    pub fn uniform() -> Self {
        Self([1.0 / ACTION_DIM as f64; ACTION_DIM])
    }

    /// Builds an action from a probability vector produced by a softmax.
    pub fn from_distribution(values: &[f64]) -> Result<Self, EnvError> {
        let mut w = [0.0; ACTION_DIM];
        w.copy_from_slice(values);
        Self::new(w)
    }

    pub fn weights(&self) -> &[f64; ACTION_DIM] {
        &self.0
    }

    pub fn argmax(&self) -> usize {
        crate::tensor::argmax(&self.0)
    }
}

/// Physics and reward constants. Values are frozen in configuration so runs
/// are reproducible even if defaults change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub dt: f64,
    pub damping: f64,
    pub max_speed: f64,
    pub force_scale: f64,
    pub episode_length: usize,
    pub position_bound: f64,
    pub spawn_bound: f64,
    pub landmark_bound: f64,
    pub landmark_min_separation: f64,
    pub intercept_coeff: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            damping: 0.25,
            max_speed: 1.0,
            force_scale: 5.0,
            episode_length: 25,
            position_bound: 1.5,
            spawn_bound: 1.0,
            landmark_bound: 0.9,
            landmark_min_separation: 0.5,
            intercept_coeff: 0.5,
        }
    }
}

pub type Vec2 = [f64; 2];

fn dist(a: Vec2, b: Vec2) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub defender_pos: Vec2,
    pub defender_vel: Vec2,
    pub attacker_pos: Vec2,
    pub attacker_vel: Vec2,
    pub landmarks: [Vec2; 2],
    pub goal_index: usize,
    pub t: usize,
}

impl WorldState {
    pub fn goal(&self) -> Vec2 {
        self.landmarks[self.goal_index]
    }

    pub fn other_landmark(&self) -> Vec2 {
        self.landmarks[1 - self.goal_index]
    }
}

/// One observation per agent plus rewards and the shared done flag.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub defender_obs: Vec<f64>,
    pub attacker_obs: Vec<f64>,
    pub reward_defender: f64,
    pub reward_attacker: f64,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct KeepAway {
    cfg: EnvConfig,
}

impl KeepAway {
    pub fn new(cfg: EnvConfig) -> Self {
        Self { cfg }
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    /// Spawns a fresh episode. Agents start at rest inside the spawn box,
    /// landmarks are rejection-sampled for minimum separation (bounded
    /// retries, then the constraint is dropped), and the goal coin is fair.
    pub fn reset(&self, rng: &mut ChaCha20Rng) -> (WorldState, StepResult) {
        let sb = self.cfg.spawn_bound;
        let lb = self.cfg.landmark_bound;
        let defender_pos = [rng.gen_range(-sb..sb), rng.gen_range(-sb..sb)];
        let attacker_pos = [rng.gen_range(-sb..sb), rng.gen_range(-sb..sb)];
        let mut landmarks = [[0.0; 2]; 2];
        for attempt in 0..=LANDMARK_RETRIES {
            landmarks = [
                [rng.gen_range(-lb..lb), rng.gen_range(-lb..lb)],
                [rng.gen_range(-lb..lb), rng.gen_range(-lb..lb)],
            ];
            if dist(landmarks[0], landmarks[1]) >= self.cfg.landmark_min_separation
                || attempt == LANDMARK_RETRIES
            {
                break;
            }
        }
        let goal_index = rng.gen_range(0..2usize);
        let state = WorldState {
            defender_pos,
            defender_vel: [0.0; 2],
            attacker_pos,
            attacker_vel: [0.0; 2],
            landmarks,
            goal_index,
            t: 0,
        };
        let obs = StepResult {
            defender_obs: self.observe_defender(&state),
            attacker_obs: self.observe_attacker(&state),
            reward_defender: 0.0,
            reward_attacker: 0.0,
            done: false,
        };
        (state, obs)
    }

    /// Defender layout: [own_vel, landmark0 - self, landmark1 - self,
    /// attacker - self]. Landmarks appear in fixed index order, so the
    /// defender cannot tell which one is the goal.
    pub fn observe_defender(&self, s: &WorldState) -> Vec<f64> {
        vec![
            s.defender_vel[0],
            s.defender_vel[1],
            s.landmarks[0][0] - s.defender_pos[0],
            s.landmarks[0][1] - s.defender_pos[1],
            s.landmarks[1][0] - s.defender_pos[0],
            s.landmarks[1][1] - s.defender_pos[1],
            s.attacker_pos[0] - s.defender_pos[0],
            s.attacker_pos[1] - s.defender_pos[1],
        ]
    }

    /// Attacker layout: [own_vel, goal - self, other landmark - self,
    /// defender - self].
    pub fn observe_attacker(&self, s: &WorldState) -> Vec<f64> {
        let goal = s.goal();
        let other = s.other_landmark();
        vec![
            s.attacker_vel[0],
            s.attacker_vel[1],
            goal[0] - s.attacker_pos[0],
            goal[1] - s.attacker_pos[1],
            other[0] - s.attacker_pos[0],
            other[1] - s.attacker_pos[1],
            s.defender_pos[0] - s.attacker_pos[0],
            s.defender_pos[1] - s.attacker_pos[1],
        ]
    }

    pub fn reward_defender(&self, s: &WorldState) -> f64 {
        dist(s.attacker_pos, s.goal())
            - self.cfg.intercept_coeff * dist(s.defender_pos, s.attacker_pos)
    }

    pub fn reward_attacker(&self, s: &WorldState) -> f64 {
        -dist(s.attacker_pos, s.goal())
    }

    fn integrate(&self, pos: &mut Vec2, vel: &mut Vec2, action: &EnvAction) {
        let w = action.weights();
        let force = [
            self.cfg.force_scale * (w[1] - w[2]),
            self.cfg.force_scale * (w[3] - w[4]),
        ];
        for axis in 0..2 {
            vel[axis] = (1.0 - self.cfg.damping) * vel[axis] + force[axis] * self.cfg.dt;
        }
        let speed = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
        if speed > self.cfg.max_speed {
            let scale = self.cfg.max_speed / speed;
            vel[0] *= scale;
            vel[1] *= scale;
        }
        for axis in 0..2 {
            pos[axis] = (pos[axis] + vel[axis] * self.cfg.dt)
                .clamp(-self.cfg.position_bound, self.cfg.position_bound);
        }
    }

    /// Advances one step; errors when the episode is already finished.
    pub fn step(
        &self,
        state: &WorldState,
        defender_action: &EnvAction,
        attacker_action: &EnvAction,
    ) -> Result<(WorldState, StepResult), EnvError> {
        if state.t >= self.cfg.episode_length {
            return Err(EnvError::EpisodeFinished {
                t: state.t,
                episode_length: self.cfg.episode_length,
            });
        }
        let mut next = state.clone();
        self.integrate(&mut next.defender_pos, &mut next.defender_vel, defender_action);
        self.integrate(&mut next.attacker_pos, &mut next.attacker_vel, attacker_action);
        next.t += 1;
        let result = StepResult {
            defender_obs: self.observe_defender(&next),
            attacker_obs: self.observe_attacker(&next),
            reward_defender: self.reward_defender(&next),
            reward_attacker: self.reward_attacker(&next),
            done: next.t == self.cfg.episode_length,
        };
        Ok((next, result))
    }
}
