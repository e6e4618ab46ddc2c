//! Tabular Watkins Q-learning.
//!
//! The agent keeps a [`QTable`] and, after each sampled transition
//! `(s, a, r, s')`, moves `Q(s, a)` toward `r + β max_b Q(s', b)` by a
//! per-cell learning rate. With a decaying rate and an exploration floor
//! every cell keeps being visited, which is the condition under which the
//! table converges to the optimal action values of the underlying MDP.

mod equilibrium;

pub use equilibrium::{
    check_adversarial_equilibrium, check_coordination_equilibrium, AdversarialCheck, MatrixGame,
};

use rand::Rng;
use thiserror::Error;

use crate::environments::{EnvError, EpisodicEnv};
use crate::mdp::Policy;
use crate::rng;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QLearningError {
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("invalid rate: {0}")]
    InvalidRate(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid game: {0}")]
    InvalidGame(String),
    #[error("episode {episode}: {source}")]
    Env {
        episode: usize,
        #[source]
        source: EnvError,
    },
}

/// Action-value table with per-cell visit counts.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
    visits: Vec<u64>,
}

impl QTable {
    pub fn new(n_states: usize, n_actions: usize, initial: f64) -> Self {
        Self {
            n_states,
            n_actions,
            values: vec![initial; n_states * n_actions],
            visits: vec![0; n_states * n_actions],
        }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn check(&self, s: usize, a: usize) -> Result<usize, QLearningError> {
        if s >= self.n_states || a >= self.n_actions {
            return Err(QLearningError::IndexOutOfRange(format!(
                "cell ({s}, {a}) outside {} x {} table",
                self.n_states, self.n_actions
            )));
        }
        Ok(s * self.n_actions + a)
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn visits(&self, s: usize, a: usize) -> u64 {
        self.visits[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_actions..(s + 1) * self.n_actions]
    }

    /// Row-major `[s][a]` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn max_value(&self, s: usize) -> f64 {
        self.row(s).iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max_a Q(s, a)` for every state.
    pub fn row_maxima(&self) -> Vec<f64> {
        (0..self.n_states).map(|s| self.max_value(s)).collect()
    }

    /// Sup-norm distance to a row-major reference table of the same shape.
    pub fn sup_error(&self, reference: &[f64]) -> f64 {
        crate::mdp::sup_distance(&self.values, reference)
    }

    /// `Q(s,a) ← (1-α) Q(s,a) + α (r + β max_b Q(s',b))` and one more visit to `(s,a)`.
    ///
    /// `alpha` may be 1 here (a full overwrite); schedules only emit rates below 1.
    pub fn update(
        &mut self,
        s: usize,
        a: usize,
        reward: f64,
        s_next: usize,
        alpha: f64,
        beta: f64,
    ) -> Result<(), QLearningError> {
        let cell = self.check(s, a)?;
        self.check(s_next, 0)?;
        if !(0.0..=1.0).contains(&alpha) {
            return Err(QLearningError::InvalidRate(format!("alpha {alpha} outside [0, 1]")));
        }
        if !(0.0..1.0).contains(&beta) {
            return Err(QLearningError::InvalidRate(format!("beta {beta} outside [0, 1)")));
        }
        let target = reward + beta * self.max_value(s_next);
        self.values[cell] = (1.0 - alpha) * self.values[cell] + alpha * target;
        self.visits[cell] += 1;
        Ok(())
    }

    /// Per-state argmax, lowest index on exact ties.
    pub fn greedy_policy(&self) -> Policy {
        Policy::Deterministic(
            (0..self.n_states)
                .map(|s| {
                    let row = self.row(s);
                    let best = self.max_value(s);
                    row.iter().position(|q| *q == best).unwrap_or(0)
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LearningRateSchedule {
    Constant(f64),
    /// `α = 1 / (1 + n)^ω` where `n` counts visits to the cell including the current one.
    Polynomial { omega: f64 },
}

impl Default for LearningRateSchedule {
    fn default() -> Self {
        LearningRateSchedule::Polynomial { omega: 0.7 }
    }
}

impl LearningRateSchedule {
    pub fn validate(&self) -> Result<(), QLearningError> {
        match *self {
            LearningRateSchedule::Constant(alpha) if !(0.0..1.0).contains(&alpha) => Err(
                QLearningError::InvalidRate(format!("constant rate {alpha} outside [0, 1)")),
            ),
            LearningRateSchedule::Polynomial { omega } if !(omega > 0.5 && omega <= 1.0) => Err(
                QLearningError::InvalidRate(format!("exponent {omega} outside (0.5, 1]")),
            ),
            _ => Ok(()),
        }
    }

    pub fn rate(&self, visits: u64) -> f64 {
        match *self {
            LearningRateSchedule::Constant(alpha) => alpha,
            LearningRateSchedule::Polynomial { omega } => (1.0 + visits as f64).powf(-omega),
        }
    }
}

/// ε-greedy exploration with a multiplicative per-episode decay and a floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExplorationPolicy {
    pub initial: f64,
    pub decay: f64,
    pub floor: f64,
}

impl Default for ExplorationPolicy {
    fn default() -> Self {
        Self {
            initial: 1.0,
            decay: 0.999,
            floor: 0.05,
        }
    }
}

impl ExplorationPolicy {
    pub fn validate(&self) -> Result<(), QLearningError> {
        if !(0.0..=1.0).contains(&self.initial)
            || !(0.0..=self.initial).contains(&self.floor)
            || !(self.decay > 0.0 && self.decay <= 1.0)
        {
            return Err(QLearningError::InvalidConfig(format!(
                "exploration needs 0 <= floor <= initial <= 1 and decay in (0, 1], got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn epsilon(&self, episode: usize) -> f64 {
        let decayed = self.initial * self.decay.powi(episode.min(i32::MAX as usize) as i32);
        decayed.max(self.floor)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QLearningConfig {
    pub schedule: LearningRateSchedule,
    pub exploration: ExplorationPolicy,
    pub episodes: usize,
    pub discount: f64,
    pub initial_q: f64,
}

impl QLearningConfig {
    pub fn validate(&self) -> Result<(), QLearningError> {
        self.schedule.validate()?;
        self.exploration.validate()?;
        if self.episodes == 0 {
            return Err(QLearningError::InvalidConfig("episodes must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(QLearningError::InvalidConfig(format!(
                "discount {} outside [0, 1)",
                self.discount
            )));
        }
        if !self.initial_q.is_finite() {
            return Err(QLearningError::InvalidConfig("initial Q must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QLearningRun {
    pub q: QTable,
    /// Undiscounted reward collected in each episode.
    pub returns: Vec<f64>,
    pub policy: Policy,
    pub steps: usize,
}

pub fn run_q_learning<E: EpisodicEnv>(
    env: &mut E,
    config: &QLearningConfig,
    seed: u64,
) -> Result<QLearningRun, QLearningError> {
    run_q_learning_observed(env, config, seed, |_, _| {})
}

/// As [`run_q_learning`], calling `observer(episode, &q)` after every episode.
///
/// Episode ends are time-limit truncations: the last update of an episode
/// still bootstraps from its successor state.
pub fn run_q_learning_observed<E, F>(
    env: &mut E,
    config: &QLearningConfig,
    seed: u64,
    mut observer: F,
) -> Result<QLearningRun, QLearningError>
where
    E: EpisodicEnv,
    F: FnMut(usize, &QTable),
{
    config.validate()?;
    let (n_states, n_actions) = (env.n_states(), env.n_actions());
    let mut q = QTable::new(n_states, n_actions, config.initial_q);
    let mut explore = rng::stream(seed, "exploration");
    let mut returns = Vec::with_capacity(config.episodes);
    let mut steps = 0;
    for episode in 0..config.episodes {
        let epsilon = config.exploration.epsilon(episode);
        let mut state = env.reset();
        let mut total = 0.0;
        loop {
            let action = if explore.random::<f64>() < epsilon {
                explore.random_range(0..n_actions)
            } else {
                let best = q.max_value(state);
                q.row(state).iter().position(|v| *v == best).unwrap_or(0)
            };
            let transition = env
                .step(action)
                .map_err(|source| QLearningError::Env { episode, source })?;
            if transition.next_state >= n_states {
                return Err(QLearningError::Env {
                    episode,
                    source: EnvError::Fault {
                        step: steps,
                        message: format!("next state {} out of range", transition.next_state),
                    },
                });
            }
            let alpha = config.schedule.rate(q.visits(state, action) + 1);
            q.update(state, action, transition.reward, transition.next_state, alpha, config.discount)?;
            total += transition.reward;
            steps += 1;
            state = transition.next_state;
            if transition.done {
                break;
            }
        }
        returns.push(total);
        observer(episode, &q);
    }
    let policy = q.greedy_policy();
    Ok(QLearningRun {
        q,
        returns,
        policy,
        steps,
    })
}
