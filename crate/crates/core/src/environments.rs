//! Synthetic environments driving the learners.
//!
//! The prediction-game round protocol, biased binary bets, log-price
//! processes, an episodic wrapper around [`TabularMdp`], and proportional
//! transaction costs. Each environment owns its random stream, obtained from
//! [`crate::rng::stream`], so a run is reproducible from its seed alone.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::mdp::TabularMdp;
use crate::rng::{self, StreamRng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment parameter: {0}")]
    InvalidParameter(String),
    #[error("predictor failed in round {round}: {message}")]
    PredictorFault { round: usize, message: String },
    #[error("utility is not finite in round {round}")]
    NonFiniteUtility { round: usize },
    #[error("action {action} out of range for {n_actions} actions")]
    InvalidAction { action: usize, n_actions: usize },
    #[error("step called after the episode ended; reset first")]
    EpisodeOver,
    #[error("environment fault at step {step}: {message}")]
    Fault { step: usize, message: String },
}

// ---------------------------------------------------------------------------
// Prediction game
// ---------------------------------------------------------------------------

/// The "reality" side of a prediction game: it announces side information
/// before the prediction and the outcome after it.
pub trait Reality {
    type Side: Clone;
    type Outcome: Clone;

    fn announce(&mut self, round: usize) -> Self::Side;
    fn resolve(&mut self, round: usize) -> Self::Outcome;
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRound<X, G, Y> {
    /// 1-based round number.
    pub round: usize,
    pub side: X,
    pub prediction: G,
    pub outcome: Y,
    pub utility: f64,
}

#[derive(Debug, Clone)]
pub struct PredictionGameRun<X, G, Y> {
    pub rounds: Vec<PredictionRound<X, G, Y>>,
    pub cumulative_utility: f64,
}

/// Plays `n_rounds` of announce / predict / resolve / score.
///
/// The predictor sees the side information of the current round and the
/// full history of completed rounds.
pub fn run_prediction_game<R, G, P, U>(
    reality: &mut R,
    mut predictor: P,
    utility: U,
    n_rounds: usize,
) -> Result<PredictionGameRun<R::Side, G, R::Outcome>, EnvError>
where
    R: Reality,
    P: FnMut(&R::Side, &[PredictionRound<R::Side, G, R::Outcome>]) -> Result<G, String>,
    U: Fn(&G, &R::Outcome) -> f64,
{
    if n_rounds == 0 {
        return Err(EnvError::InvalidParameter("n_rounds must be at least 1".into()));
    }
    let mut rounds = Vec::with_capacity(n_rounds);
    let mut cumulative_utility = 0.0;
    for round in 1..=n_rounds {
        let side = reality.announce(round);
        let prediction = predictor(&side, &rounds)
            .map_err(|message| EnvError::PredictorFault { round, message })?;
        let outcome = reality.resolve(round);
        let score = utility(&prediction, &outcome);
        if !score.is_finite() {
            return Err(EnvError::NonFiniteUtility { round });
        }
        cumulative_utility += score;
        rounds.push(PredictionRound {
            round,
            side,
            prediction,
            outcome,
            utility: score,
        });
    }
    Ok(PredictionGameRun {
        rounds,
        cumulative_utility,
    })
}

/// Biased coin reality: no side information, outcome `true` with probability `p`.
#[derive(Debug, Clone)]
pub struct CoinReality {
    p: f64,
    rng: StreamRng,
}

impl CoinReality {
    pub fn new(p: f64, seed: u64) -> Result<Self, EnvError> {
        check_probability("p", p)?;
        Ok(Self {
            p,
            rng: rng::stream(seed, "coin"),
        })
    }
}

impl Reality for CoinReality {
    type Side = ();
    type Outcome = bool;

    fn announce(&mut self, _round: usize) {}

    fn resolve(&mut self, _round: usize) -> bool {
        self.rng.random::<f64>() < self.p
    }
}

fn check_probability(name: &str, p: f64) -> Result<(), EnvError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(EnvError::InvalidParameter(format!("{name} must lie in [0, 1], got {p}")))
    }
}

// ---------------------------------------------------------------------------
// Biased binary bets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BetOutcome {
    Win,
    Loss,
}

/// A repeated bet won with probability `p`, paying `payout_ratio` per unit staked.
#[derive(Debug, Clone)]
pub struct BiasedBetEnv {
    win_probability: f64,
    payout_ratio: f64,
    rng: StreamRng,
}

impl BiasedBetEnv {
    pub fn new(win_probability: f64, payout_ratio: f64, seed: u64) -> Result<Self, EnvError> {
        check_probability("win_probability", win_probability)?;
        if !(payout_ratio > 0.0 && payout_ratio.is_finite()) {
            return Err(EnvError::InvalidParameter(format!(
                "payout_ratio must be positive, got {payout_ratio}"
            )));
        }
        Ok(Self {
            win_probability,
            payout_ratio,
            rng: rng::stream(seed, "bets"),
        })
    }

    pub fn win_probability(&self) -> f64 {
        self.win_probability
    }

    pub fn payout_ratio(&self) -> f64 {
        self.payout_ratio
    }

    pub fn step_bet(&mut self) -> BetOutcome {
        if self.rng.random::<f64>() < self.win_probability {
            BetOutcome::Win
        } else {
            BetOutcome::Loss
        }
    }
}

// ---------------------------------------------------------------------------
// Log-price processes
// ---------------------------------------------------------------------------

/// A source of successive log-price draws.
pub trait PriceSource {
    fn next_log_price(&mut self) -> Result<f64, EnvError>;
}

#[derive(Debug, Clone, PartialEq)]
pub enum LogPriceProcess {
    /// Independent Gaussian draws.
    IidGaussian { mean: f64, sd: f64 },
    /// Two drift regimes; before each draw the regime flips with probability
    /// `switch_prob`, then `drift[regime] + N(0, sd²)` is emitted.
    RegimeSwitching {
        drifts: [f64; 2],
        switch_prob: f64,
        sd: f64,
    },
    /// Replays a fixed, nonempty sequence cyclically.
    Replay(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct LogPriceEnv {
    process: LogPriceProcess,
    regime: usize,
    cursor: usize,
    rng: StreamRng,
}

impl LogPriceEnv {
    pub fn new(process: LogPriceProcess, seed: u64) -> Result<Self, EnvError> {
        let finite_sd = |sd: f64| {
            if sd > 0.0 && sd.is_finite() {
                Ok(())
            } else {
                Err(EnvError::InvalidParameter(format!("sd must be positive, got {sd}")))
            }
        };
        match &process {
            LogPriceProcess::IidGaussian { mean, sd } => {
                finite_sd(*sd)?;
                if !mean.is_finite() {
                    return Err(EnvError::InvalidParameter("mean must be finite".into()));
                }
            }
            LogPriceProcess::RegimeSwitching {
                drifts,
                switch_prob,
                sd,
            } => {
                finite_sd(*sd)?;
                check_probability("switch_prob", *switch_prob)?;
                if drifts.iter().any(|d| !d.is_finite()) {
                    return Err(EnvError::InvalidParameter("drifts must be finite".into()));
                }
            }
            LogPriceProcess::Replay(seq) => {
                if seq.is_empty() || seq.iter().any(|p| !p.is_finite()) {
                    return Err(EnvError::InvalidParameter(
                        "replay sequence must be nonempty and finite".into(),
                    ));
                }
            }
        }
        Ok(Self {
            process,
            regime: 0,
            cursor: 0,
            rng: rng::stream(seed, "prices"),
        })
    }

    /// Current drift regime (always 0 for the non-switching kinds).
    pub fn regime(&self) -> usize {
        self.regime
    }
}

impl PriceSource for LogPriceEnv {
    fn next_log_price(&mut self) -> Result<f64, EnvError> {
        let price = match &self.process {
            LogPriceProcess::IidGaussian { mean, sd } => {
                let z: f64 = self.rng.sample(StandardNormal);
                mean + sd * z
            }
            LogPriceProcess::RegimeSwitching {
                drifts,
                switch_prob,
                sd,
            } => {
                if self.rng.random::<f64>() < *switch_prob {
                    self.regime = 1 - self.regime;
                }
                let z: f64 = self.rng.sample(StandardNormal);
                drifts[self.regime] + sd * z
            }
            LogPriceProcess::Replay(seq) => seq[self.cursor % seq.len()],
        };
        self.cursor += 1;
        Ok(price)
    }
}

// ---------------------------------------------------------------------------
// Transaction costs
// ---------------------------------------------------------------------------

/// Proportional cost `c` charged on traded value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransactionCostModel {
    proportional_cost: f64,
}

impl TransactionCostModel {
    pub fn new(proportional_cost: f64) -> Result<Self, EnvError> {
        if proportional_cost >= 0.0 && proportional_cost.is_finite() {
            Ok(Self { proportional_cost })
        } else {
            Err(EnvError::InvalidParameter(format!(
                "proportional cost must be nonnegative, got {proportional_cost}"
            )))
        }
    }

    pub fn proportional_cost(&self) -> f64 {
        self.proportional_cost
    }

    /// `gross - c · traded_value`.
    pub fn apply(&self, gross_profit: f64, traded_value: f64) -> Result<f64, EnvError> {
        if !(traded_value > 0.0 && traded_value.is_finite()) {
            return Err(EnvError::InvalidParameter(format!(
                "traded value must be positive, got {traded_value}"
            )));
        }
        Ok(gross_profit - self.proportional_cost * traded_value)
    }
}

// ---------------------------------------------------------------------------
// Episodic environments
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub reward: f64,
    pub next_state: usize,
    /// True when this step reached the episode horizon.
    pub done: bool,
}

/// Finite-state, finite-action episodic environment.
pub trait EpisodicEnv {
    fn n_states(&self) -> usize;
    fn n_actions(&self) -> usize;
    fn reset(&mut self) -> usize;
    fn step(&mut self, action: usize) -> Result<Transition, EnvError>;
}

/// Samples a [`TabularMdp`]: episodes start in state 0 and end after `horizon` steps.
#[derive(Debug, Clone)]
pub struct MdpEnv {
    mdp: TabularMdp,
    horizon: usize,
    state: usize,
    elapsed: usize,
    rng: StreamRng,
}

pub fn mdp_as_environment(mdp: TabularMdp, horizon: usize, seed: u64) -> Result<MdpEnv, EnvError> {
    if horizon == 0 {
        return Err(EnvError::InvalidParameter("episode horizon must be at least 1".into()));
    }
    Ok(MdpEnv {
        mdp,
        horizon,
        state: 0,
        elapsed: 0,
        rng: rng::stream(seed, "mdp-env"),
    })
}

impl MdpEnv {
    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }
}

/// Inverse-CDF draw from a probability row.
pub(crate) fn sample_categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the accumulated mass: take the last supported index
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
}

impl EpisodicEnv for MdpEnv {
    fn n_states(&self) -> usize {
        self.mdp.n_states()
    }

    fn n_actions(&self) -> usize {
        self.mdp.n_actions()
    }

    fn reset(&mut self) -> usize {
        self.state = 0;
        self.elapsed = 0;
        self.state
    }

    fn step(&mut self, action: usize) -> Result<Transition, EnvError> {
        if action >= self.mdp.n_actions() {
            return Err(EnvError::InvalidAction {
                action,
                n_actions: self.mdp.n_actions(),
            });
        }
        if self.elapsed >= self.horizon {
            return Err(EnvError::EpisodeOver);
        }
        let reward = self.mdp.reward(self.state, action);
        let next_state = sample_categorical(&mut self.rng, self.mdp.transition_row(self.state, action));
        self.state = next_state;
        self.elapsed += 1;
        Ok(Transition {
            reward,
            next_state,
            done: self.elapsed >= self.horizon,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_se(p: f64, n: usize) -> f64 {
        3.0 * (p * (1.0 - p) / n as f64).sqrt()
    }

    #[test]
    fn prediction_game_counts_matches() {
        struct Constant;
        impl Reality for Constant {
            type Side = usize;
            type Outcome = u8;
            fn announce(&mut self, round: usize) -> usize {
                round
            }
            fn resolve(&mut self, _round: usize) -> u8 {
                7
            }
        }
        let run = run_prediction_game(
            &mut Constant,
            |_: &usize, _: &[_]| Ok(7u8),
            |g: &u8, y: &u8| if g == y { 1.0 } else { 0.0 },
            25,
        )
        .unwrap();
        assert_eq!(run.cumulative_utility, 25.0);
        assert_eq!(run.rounds.len(), 25);
        assert!(run.rounds.iter().enumerate().all(|(i, r)| r.round == i + 1 && r.side == i + 1));

        let zero = run_prediction_game(&mut Constant, |_: &usize, _: &[_]| Ok(3u8), |_: &u8, _: &u8| 0.0, 10)
            .unwrap();
        assert_eq!(zero.cumulative_utility, 0.0);
    }

    #[test]
    fn prediction_game_reports_faults() {
        let mut coin = CoinReality::new(0.5, 1).unwrap();
        let err = run_prediction_game(
            &mut coin,
            |_: &(), hist: &[PredictionRound<(), bool, bool>]| {
                if hist.len() == 4 {
                    Err("boom".to_string())
                } else {
                    Ok(true)
                }
            },
            |_: &bool, _: &bool| 1.0,
            10,
        )
        .unwrap_err();
        assert_eq!(err, EnvError::PredictorFault { round: 5, message: "boom".into() });

        let mut coin = CoinReality::new(0.5, 1).unwrap();
        let err = run_prediction_game(&mut coin, |_: &(), _: &[_]| Ok(true), |_: &bool, _: &bool| f64::NAN, 3)
            .unwrap_err();
        assert_eq!(err, EnvError::NonFiniteUtility { round: 1 });
    }

    #[test]
    fn majority_predictor_on_biased_coin() {
        let n = 10_000;
        let mut coin = CoinReality::new(0.7, 11).unwrap();
        let mut heads = 0usize;
        let mut seen = 0usize;
        let run = run_prediction_game(
            &mut coin,
            |_: &(), hist: &[PredictionRound<(), bool, bool>]| {
                if let Some(last) = hist.last() {
                    seen += 1;
                    heads += usize::from(last.outcome);
                }
                Ok(2 * heads >= seen)
            },
            |g: &bool, y: &bool| f64::from(u8::from(g == y)),
            n,
        )
        .unwrap();
        let rate = run.cumulative_utility / n as f64;
        assert!((rate - 0.7).abs() < three_se(0.7, n), "rate {rate}");
    }

    #[test]
    fn bet_frequencies() {
        let mut always = BiasedBetEnv::new(1.0, 1.0, 0).unwrap();
        assert!((0..1000).all(|_| always.step_bet() == BetOutcome::Win));
        let mut never = BiasedBetEnv::new(0.0, 1.0, 0).unwrap();
        assert!((0..1000).all(|_| never.step_bet() == BetOutcome::Loss));

        let n = 100_000;
        let mut env = BiasedBetEnv::new(0.6, 1.0, 5).unwrap();
        let wins = (0..n).filter(|_| env.step_bet() == BetOutcome::Win).count();
        let freq = wins as f64 / n as f64;
        assert!((freq - 0.6).abs() < three_se(0.6, n), "freq {freq}");

        assert!(BiasedBetEnv::new(1.2, 1.0, 0).is_err());
        assert!(BiasedBetEnv::new(0.5, 0.0, 0).is_err());
    }

    #[test]
    fn gaussian_price_moments() {
        let n = 1_000_000;
        let mut env = LogPriceEnv::new(LogPriceProcess::IidGaussian { mean: 0.0, sd: 1.0 }, 2).unwrap();
        let draws: Vec<f64> = (0..n).map(|_| env.next_log_price().unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // SE of the mean is 1/√n, SE of the variance is √(2/n)
        assert!(mean.abs() < 3.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 3.0 * (2.0 / n as f64).sqrt(), "var {var}");

        let mut tight = LogPriceEnv::new(LogPriceProcess::IidGaussian { mean: 0.3, sd: 1e-9 }, 2).unwrap();
        for _ in 0..100 {
            assert!((tight.next_log_price().unwrap() - 0.3).abs() < 1e-7);
        }
    }

    #[test]
    fn regime_without_switching_stays_put() {
        let process = LogPriceProcess::RegimeSwitching {
            drifts: [0.5, -0.5],
            switch_prob: 0.0,
            sd: 0.1,
        };
        let mut env = LogPriceEnv::new(process, 4).unwrap();
        let n = 10_000;
        let mean = (0..n).map(|_| env.next_log_price().unwrap()).sum::<f64>() / n as f64;
        assert_eq!(env.regime(), 0);
        assert!((mean - 0.5).abs() < 3.0 * 0.1 / (n as f64).sqrt());

        let always = LogPriceProcess::RegimeSwitching {
            drifts: [0.5, -0.5],
            switch_prob: 1.0,
            sd: 0.1,
        };
        let mut env = LogPriceEnv::new(always, 4).unwrap();
        env.next_log_price().unwrap();
        assert_eq!(env.regime(), 1);
        env.next_log_price().unwrap();
        assert_eq!(env.regime(), 0);
    }

    #[test]
    fn replay_cycles() {
        let mut env = LogPriceEnv::new(LogPriceProcess::Replay(vec![-1.0, 0.0]), 0).unwrap();
        let got: Vec<f64> = (0..5).map(|_| env.next_log_price().unwrap()).collect();
        assert_eq!(got, vec![-1.0, 0.0, -1.0, 0.0, -1.0]);
        assert!(LogPriceEnv::new(LogPriceProcess::Replay(vec![]), 0).is_err());
    }

    #[test]
    fn seeds_replay_and_streams_decorrelate() {
        let process = LogPriceProcess::IidGaussian { mean: 0.0, sd: 1.0 };
        let mut a = LogPriceEnv::new(process.clone(), 9).unwrap();
        let mut b = LogPriceEnv::new(process.clone(), 9).unwrap();
        let xs: Vec<f64> = (0..1000).map(|_| a.next_log_price().unwrap()).collect();
        let ys: Vec<f64> = (0..1000).map(|_| b.next_log_price().unwrap()).collect();
        assert_eq!(
            xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            ys.iter().map(|y| y.to_bits()).collect::<Vec<_>>()
        );

        let n = 100_000;
        let mut c = LogPriceEnv::new(process, 10).unwrap();
        let mut bets = BiasedBetEnv::new(0.5, 1.0, 9).unwrap();
        let pairs: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let x = c.next_log_price().unwrap();
                let y = if bets.step_bet() == BetOutcome::Win { 1.0 } else { 0.0 };
                (x, y)
            })
            .collect();
        let corr = correlation(&pairs);
        assert!(corr.abs() < 0.02, "corr {corr}");
    }

    fn correlation(pairs: &[(f64, f64)]) -> f64 {
        let n = pairs.len() as f64;
        let (mx, my) = pairs.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x / n, b + y / n));
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (x, y) in pairs {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx).powi(2);
            syy += (y - my).powi(2);
        }
        sxy / (sxx * syy).sqrt()
    }

    #[test]
    fn transaction_costs() {
        let free = TransactionCostModel::new(0.0).unwrap();
        assert_eq!(free.apply(2.5, 10.0).unwrap(), 2.5);
        let model = TransactionCostModel::new(0.01).unwrap();
        assert!((model.apply(2.0, 100.0).unwrap() - 1.0).abs() < 1e-12);
        assert!(model.apply(2.0, 0.0).is_err());
        assert!(TransactionCostModel::new(-0.1).is_err());
    }

    fn two_state(kernel: [[f64; 2]; 2]) -> TabularMdp {
        TabularMdp::new(
            vec![vec![kernel[0].to_vec()], vec![kernel[1].to_vec()]],
            vec![vec![1.0], vec![2.0]],
            0.9,
        )
        .unwrap()
    }

    #[test]
    fn deterministic_kernel_replays_exactly() {
        let mut env = mdp_as_environment(two_state([[0.0, 1.0], [1.0, 0.0]]), 4, 0).unwrap();
        assert_eq!(env.reset(), 0);
        let steps: Vec<Transition> = (0..4).map(|_| env.step(0).unwrap()).collect();
        let states: Vec<usize> = steps.iter().map(|t| t.next_state).collect();
        let rewards: Vec<f64> = steps.iter().map(|t| t.reward).collect();
        assert_eq!(states, vec![1, 0, 1, 0]);
        assert_eq!(rewards, vec![1.0, 2.0, 1.0, 2.0]);
        assert!(steps[3].done && !steps[2].done);
        assert_eq!(env.step(0), Err(EnvError::EpisodeOver));
        assert!(matches!(env.step(3), Err(EnvError::InvalidAction { .. })));
    }

    #[test]
    fn horizon_one_is_single_step() {
        let mut env = mdp_as_environment(two_state([[0.5, 0.5], [0.5, 0.5]]), 1, 0).unwrap();
        for _ in 0..10 {
            env.reset();
            assert!(env.step(0).unwrap().done);
        }
        assert!(mdp_as_environment(two_state([[0.5, 0.5], [0.5, 0.5]]), 0, 0).is_err());
    }

    #[test]
    fn kernel_frequencies() {
        let n = 100_000;
        let mut env = mdp_as_environment(two_state([[0.3, 0.7], [0.5, 0.5]]), n, 8).unwrap();
        env.reset();
        let mut counts = [[0usize; 2]; 2];
        let mut state = 0;
        for _ in 0..n {
            let t = env.step(0).unwrap();
            counts[state][t.next_state] += 1;
            state = t.next_state;
        }
        for (s, p1) in [(0usize, 0.7), (1, 0.5)] {
            let visits = counts[s][0] + counts[s][1];
            let freq = counts[s][1] as f64 / visits as f64;
            assert!((freq - p1).abs() < three_se(p1, visits), "state {s}: {freq}");
        }
    }
}
