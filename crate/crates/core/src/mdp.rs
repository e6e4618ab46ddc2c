//! Finite discounted Markov decision processes.
//!
//! Policy evaluation, value iteration and policy iteration over a tabular
//! model. These are the exact solvers that the sampled learners in
//! [`crate::qlearning`] are checked against.

use rand::Rng;
use thiserror::Error;

/// Sum-to-one tolerance for transition rows and stochastic policy rows.
pub const PROBABILITY_TOL: f64 = 1e-12;

/// Default sup-norm tolerance for the iterative solvers.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Relative band inside which two action values count as tied.
pub const TIE_TOL: f64 = 1e-9;

const MAX_SWEEPS: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("tolerance must be positive and finite, got {0}")]
    InvalidTolerance(f64),
    #[error("no convergence after {0} sweeps")]
    NotConverged(usize),
}

/// A finite MDP with deterministic rewards `r(s, a)` and kernel `p(s' | s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    n_actions: usize,
    // [s][a][s'] flattened
    transition: Vec<f64>,
    // [s][a] flattened
    reward: Vec<f64>,
    discount: f64,
}

impl TabularMdp {
    /// Builds a model from nested `transition[s][a][s']` and `reward[s][a]` tables.
    pub fn new(
        transition: Vec<Vec<Vec<f64>>>,
        reward: Vec<Vec<f64>>,
        discount: f64,
    ) -> Result<Self, MdpError> {
        let n_states = transition.len();
        if n_states == 0 {
            return Err(MdpError::InvalidModel("at least one state is required".into()));
        }
        let n_actions = transition[0].len();
        let mut flat_t = Vec::with_capacity(n_states * n_actions * n_states);
        for (s, per_action) in transition.iter().enumerate() {
            if per_action.len() != n_actions {
                return Err(MdpError::DimensionMismatch(format!(
                    "state {s} has {} actions, expected {n_actions}",
                    per_action.len()
                )));
            }
            for (a, row) in per_action.iter().enumerate() {
                if row.len() != n_states {
                    return Err(MdpError::DimensionMismatch(format!(
                        "transition row ({s}, {a}) has length {}, expected {n_states}",
                        row.len()
                    )));
                }
                flat_t.extend_from_slice(row);
            }
        }
        if reward.len() != n_states || reward.iter().any(|r| r.len() != n_actions) {
            return Err(MdpError::DimensionMismatch(format!(
                "reward table must be {n_states} x {n_actions}"
            )));
        }
        let flat_r = reward.into_iter().flatten().collect();
        Self::from_flat(n_states, n_actions, flat_t, flat_r, discount)
    }

    /// Builds a model from row-major flat tables.
    pub fn from_flat(
        n_states: usize,
        n_actions: usize,
        transition: Vec<f64>,
        reward: Vec<f64>,
        discount: f64,
    ) -> Result<Self, MdpError> {
        if n_states == 0 || n_actions == 0 {
            return Err(MdpError::InvalidModel(
                "state and action counts must be positive".into(),
            ));
        }
        if transition.len() != n_states * n_actions * n_states {
            return Err(MdpError::DimensionMismatch(format!(
                "transition has {} entries, expected {}",
                transition.len(),
                n_states * n_actions * n_states
            )));
        }
        if reward.len() != n_states * n_actions {
            return Err(MdpError::DimensionMismatch(format!(
                "reward has {} entries, expected {}",
                reward.len(),
                n_states * n_actions
            )));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(MdpError::InvalidModel(format!(
                "discount must lie in [0, 1), got {discount}"
            )));
        }
        if let Some(r) = reward.iter().find(|r| !r.is_finite()) {
            return Err(MdpError::InvalidModel(format!("non-finite reward {r}")));
        }
        for (row_idx, row) in transition.chunks(n_states).enumerate() {
            let (s, a) = (row_idx / n_actions, row_idx % n_actions);
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(MdpError::InvalidModel(format!(
                    "transition row ({s}, {a}) has a negative or non-finite entry"
                )));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > PROBABILITY_TOL {
                return Err(MdpError::InvalidModel(format!(
                    "transition row ({s}, {a}) sums to {total}"
                )));
            }
        }
        Ok(Self {
            n_states,
            n_actions,
            transition,
            reward,
            discount,
        })
    }

    /// Random model: kernel rows are normalized uniform draws, rewards uniform on [-1, 1].
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        n_states: usize,
        n_actions: usize,
        discount: f64,
    ) -> Result<Self, MdpError> {
        let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            let row: Vec<f64> = (0..n_states).map(|_| rng.random::<f64>() + 1e-3).collect();
            let total: f64 = row.iter().sum();
            transition.extend(row.iter().map(|p| p / total));
        }
        let reward = (0..n_states * n_actions)
            .map(|_| rng.random_range(-1.0..=1.0))
            .collect();
        Self::from_flat(n_states, n_actions, transition, reward, discount)
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    /// `p(· | s, a)`.
    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let start = (s * self.n_actions + a) * self.n_states;
        &self.transition[start..start + self.n_states]
    }

    pub fn max_abs_reward(&self) -> f64 {
        self.reward.iter().fold(0.0, |m, r| m.max(r.abs()))
    }

    /// One-step lookahead `r(s,a) + β Σ p(s'|s,a) v(s')`.
    pub fn q_value(&self, s: usize, a: usize, values: &[f64]) -> f64 {
        let expected: f64 = self
            .transition_row(s, a)
            .iter()
            .zip(values)
            .map(|(p, v)| p * v)
            .sum();
        self.reward(s, a) + self.discount * expected
    }

    /// All one-step lookaheads, row-major `[s][a]`.
    pub fn q_values(&self, values: &[f64]) -> Vec<f64> {
        (0..self.n_states)
            .flat_map(|s| (0..self.n_actions).map(move |a| (s, a)))
            .map(|(s, a)| self.q_value(s, a, values))
            .collect()
    }

    /// Bellman optimality backup `(T v)(s) = max_a q(s, a)`.
    pub fn bellman_backup(&self, values: &[f64]) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| {
                (0..self.n_actions)
                    .map(|a| self.q_value(s, a, values))
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect()
    }

    /// Backup under a fixed policy. The policy must already be validated.
    pub fn policy_backup(&self, policy: &Policy, values: &[f64]) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| match policy {
                Policy::Deterministic(actions) => self.q_value(s, actions[s], values),
                Policy::Stochastic(rows) => rows[s]
                    .iter()
                    .enumerate()
                    .filter(|(_, w)| **w > 0.0)
                    .map(|(a, w)| w * self.q_value(s, a, values))
                    .sum(),
            })
            .collect()
    }
}

/// State values `υ(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueFunction(pub Vec<f64>);

impl ValueFunction {
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn sup_distance(&self, other: &ValueFunction) -> f64 {
        sup_distance(&self.0, &other.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Policy {
    /// One action index per state.
    Deterministic(Vec<usize>),
    /// One probability row over actions per state.
    Stochastic(Vec<Vec<f64>>),
}

impl Policy {
    pub fn validate(&self, mdp: &TabularMdp) -> Result<(), MdpError> {
        match self {
            Policy::Deterministic(actions) => {
                if actions.len() != mdp.n_states() {
                    return Err(MdpError::DimensionMismatch(format!(
                        "policy covers {} states, model has {}",
                        actions.len(),
                        mdp.n_states()
                    )));
                }
                if let Some((s, a)) = actions
                    .iter()
                    .enumerate()
                    .find(|(_, a)| **a >= mdp.n_actions())
                {
                    return Err(MdpError::DimensionMismatch(format!(
                        "state {s} selects action {a}, model has {}",
                        mdp.n_actions()
                    )));
                }
            }
            Policy::Stochastic(rows) => {
                if rows.len() != mdp.n_states() {
                    return Err(MdpError::DimensionMismatch(format!(
                        "policy covers {} states, model has {}",
                        rows.len(),
                        mdp.n_states()
                    )));
                }
                for (s, row) in rows.iter().enumerate() {
                    if row.len() != mdp.n_actions() {
                        return Err(MdpError::DimensionMismatch(format!(
                            "policy row {s} has {} entries, model has {} actions",
                            row.len(),
                            mdp.n_actions()
                        )));
                    }
                    let total: f64 = row.iter().sum();
                    if row.iter().any(|w| !w.is_finite() || *w < 0.0)
                        || (total - 1.0).abs() > PROBABILITY_TOL
                    {
                        return Err(MdpError::InvalidModel(format!(
                            "policy row {s} is not a probability vector"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Action indices of a deterministic policy.
    pub fn actions(&self) -> Option<&[usize]> {
        match self {
            Policy::Deterministic(actions) => Some(actions),
            Policy::Stochastic(_) => None,
        }
    }
}

pub fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn check_tol(tol: f64) -> Result<(), MdpError> {
    if tol > 0.0 && tol.is_finite() {
        Ok(())
    } else {
        Err(MdpError::InvalidTolerance(tol))
    }
}

/// Iterates `backup` from zero until the contraction bound certifies that the
/// iterate is within `tol` of the fixed point (sup-norm). The residual of the
/// returned vector is then at most `tol` as well.
fn iterate_to_fixed_point<F>(mdp: &TabularMdp, tol: f64, backup: F) -> Result<Vec<f64>, MdpError>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let beta = mdp.discount();
    let mut values = vec![0.0; mdp.n_states()];
    for _ in 0..MAX_SWEEPS {
        let next = backup(&values);
        let delta = sup_distance(&next, &values);
        values = next;
        // ‖v_{k+1} - v*‖ ≤ β/(1-β) ‖v_{k+1} - v_k‖
        if beta * delta <= tol * (1.0 - beta) {
            return Ok(values);
        }
    }
    Err(MdpError::NotConverged(MAX_SWEEPS))
}

/// Value of `policy`, accurate to `tol` in sup-norm.
pub fn evaluate_policy(
    mdp: &TabularMdp,
    policy: &Policy,
    tol: f64,
) -> Result<ValueFunction, MdpError> {
    check_tol(tol)?;
    policy.validate(mdp)?;
    iterate_to_fixed_point(mdp, tol, |v| mdp.policy_backup(policy, v)).map(ValueFunction)
}

/// Lowest action index whose value is within the tie band of the row maximum.
pub fn greedy_action(q_row: &[f64]) -> usize {
    let best = q_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let band = TIE_TOL * best.abs().max(1.0);
    q_row
        .iter()
        .position(|q| *q >= best - band)
        .unwrap_or(0)
}

/// All actions within the tie band of the row maximum, per state.
pub fn argmax_sets(mdp: &TabularMdp, values: &[f64]) -> Vec<Vec<usize>> {
    let q = mdp.q_values(values);
    q.chunks(mdp.n_actions())
        .map(|row| {
            let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let band = TIE_TOL * best.abs().max(1.0);
            (0..row.len()).filter(|a| row[*a] >= best - band).collect()
        })
        .collect()
}

/// Greedy deterministic policy with respect to `values`.
pub fn greedy_policy(mdp: &TabularMdp, values: &[f64]) -> Policy {
    let q = mdp.q_values(values);
    Policy::Deterministic(q.chunks(mdp.n_actions()).map(greedy_action).collect())
}

/// Optimal values to within `tol` and the greedy policy they induce.
pub fn value_iteration(mdp: &TabularMdp, tol: f64) -> Result<(ValueFunction, Policy), MdpError> {
    check_tol(tol)?;
    let values = iterate_to_fixed_point(mdp, tol, |v| mdp.bellman_backup(v))?;
    let policy = greedy_policy(mdp, &values);
    Ok((ValueFunction(values), policy))
}

#[derive(Debug, Clone)]
pub struct PolicyIterationOutcome {
    pub policy: Policy,
    pub values: ValueFunction,
    /// Number of improvement steps that changed the policy.
    pub improvements: usize,
}

/// Howard's policy iteration started from the all-zeros policy.
pub fn policy_iteration(mdp: &TabularMdp) -> Policy {
    policy_iteration_with_stats(mdp).policy
}

pub fn policy_iteration_with_stats(mdp: &TabularMdp) -> PolicyIterationOutcome {
    let eval_tol = 1e-12 * (mdp.max_abs_reward() / (1.0 - mdp.discount())).max(1.0);
    let cap = improvement_cap(mdp);
    let mut actions = vec![0usize; mdp.n_states()];
    let mut improvements = 0;
    loop {
        let policy = Policy::Deterministic(actions.clone());
        let values = evaluate(mdp, &policy, eval_tol);
        let q = mdp.q_values(&values);
        let mut changed = false;
        for (s, row) in q.chunks(mdp.n_actions()).enumerate() {
            let candidate = greedy_action(row);
            let band = TIE_TOL * row[candidate].abs().max(1.0);
            // switch only on a strict improvement so the policy sequence cannot cycle
            if candidate != actions[s] && row[candidate] > row[actions[s]] + band {
                actions[s] = candidate;
                changed = true;
            }
        }
        if !changed || improvements >= cap {
            // canonical lowest-index representative of each tie band
            let policy = greedy_policy(mdp, &values);
            let values = ValueFunction(evaluate(mdp, &policy, eval_tol));
            return PolicyIterationOutcome {
                policy,
                values,
                improvements,
            };
        }
        improvements += 1;
    }
}

fn evaluate(mdp: &TabularMdp, policy: &Policy, tol: f64) -> Vec<f64> {
    // the policy is built internally and always valid; evaluation converges for β < 1
    iterate_to_fixed_point(mdp, tol, |v| mdp.policy_backup(policy, v))
        .expect("policy evaluation of a valid policy converges")
}

/// Upper bound on improvement steps, `n_actions^n_states` saturated.
pub fn improvement_cap(mdp: &TabularMdp) -> usize {
    (mdp.n_actions() as u64)
        .checked_pow(mdp.n_states() as u32)
        .map_or(usize::MAX, |c| c.min(usize::MAX as u64) as usize)
}
