//! Kelly bet sizing.
//!
//! `Θ = W − (1 − W)/R` is the share of capital to stake on a bet won with
//! frequency `W` at win/loss ratio `R`. This module computes it, estimates
//! `W` and `R` from a trade history, and simulates a bankroll that stakes a
//! fixed fraction or re-estimates Kelly online from the outcomes it has seen.

use std::collections::VecDeque;
use std::io::BufRead;

use thiserror::Error;

use crate::environments::{BetOutcome, BiasedBetEnv};

/// Bets observed at zero stake before an online bettor starts staking.
pub const WARMUP_BETS: usize = 10;

pub const DEFAULT_FRACTION_CAP: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Wins,
    Losses,
}

impl std::fmt::Display for Side {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Side::Wins => f.write_str("wins"),
            Side::Losses => f.write_str("losses"),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KellyError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("insufficient data: history has no {0}")]
    InsufficientData(Side),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// One closed trade. Positive pnl is a win; zero and negative pnl are losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeRecord {
    pub pnl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KellyEstimate {
    /// `W`, the historical winning frequency.
    pub win_rate: f64,
    /// `R`, mean win over mean absolute loss.
    pub win_loss_ratio: f64,
    pub n_wins: usize,
    pub n_losses: usize,
}

impl KellyEstimate {
    pub fn fraction(&self) -> f64 {
        self.win_rate - (1.0 - self.win_rate) / self.win_loss_ratio
    }
}

/// `W − (1 − W)/R`, unclamped; negative values mean the bet has no edge.
pub fn kelly_fraction(win_rate: f64, win_loss_ratio: f64) -> Result<f64, KellyError> {
    if !(0.0..=1.0).contains(&win_rate) {
        return Err(KellyError::InvalidInput(format!("W = {win_rate} outside [0, 1]")));
    }
    if !(win_loss_ratio > 0.0) || win_loss_ratio.is_nan() {
        return Err(KellyError::InvalidInput(format!(
            "R must be positive, got {win_loss_ratio}"
        )));
    }
    Ok(win_rate - (1.0 - win_rate) / win_loss_ratio)
}

/// Expected log growth per bet, `W ln(1 + R f) + (1 − W) ln(1 − f)`.
pub fn expected_log_growth(win_rate: f64, win_loss_ratio: f64, fraction: f64) -> f64 {
    win_rate * (win_loss_ratio * fraction).ln_1p() + (1.0 - win_rate) * (-fraction).ln_1p()
}

/// Running win/loss tallies; shared by the batch and online estimators.
#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    n_wins: usize,
    n_losses: usize,
    win_sum: f64,
    loss_sum: f64,
}

impl Tally {
    fn add(&mut self, pnl: f64) {
        if pnl > 0.0 {
            self.n_wins += 1;
            self.win_sum += pnl;
        } else {
            self.n_losses += 1;
            self.loss_sum += -pnl;
        }
    }

    fn remove(&mut self, pnl: f64) {
        if pnl > 0.0 {
            self.n_wins -= 1;
            self.win_sum -= pnl;
        } else {
            self.n_losses -= 1;
            self.loss_sum -= -pnl;
        }
    }

    fn estimate(&self) -> Result<KellyEstimate, KellyError> {
        if self.n_wins == 0 {
            return Err(KellyError::InsufficientData(Side::Wins));
        }
        if self.n_losses == 0 {
            return Err(KellyError::InsufficientData(Side::Losses));
        }
        let mean_win = self.win_sum / self.n_wins as f64;
        let mean_loss = self.loss_sum / self.n_losses as f64;
        if !(mean_loss > 0.0) {
            // every loss was a zero-pnl trade: R is unbounded
            return Err(KellyError::InsufficientData(Side::Losses));
        }
        Ok(KellyEstimate {
            win_rate: self.n_wins as f64 / (self.n_wins + self.n_losses) as f64,
            win_loss_ratio: mean_win / mean_loss,
            n_wins: self.n_wins,
            n_losses: self.n_losses,
        })
    }
}

pub fn estimate_from_history(trades: &[TradeRecord]) -> Result<KellyEstimate, KellyError> {
    let mut tally = Tally::default();
    for t in trades {
        if !t.pnl.is_finite() {
            return Err(KellyError::InvalidInput(format!("non-finite pnl {}", t.pnl)));
        }
        tally.add(t.pnl);
    }
    tally.estimate()
}

/// Reads one signed pnl per line. The first comma-, semicolon- or
/// whitespace-separated field is used; blank lines and `#` comments are
/// skipped, and a non-numeric first line is taken as a header.
pub fn read_trade_history<R: BufRead>(reader: R) -> Result<Vec<TradeRecord>, KellyError> {
    let mut trades = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| KellyError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let field = text
            .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
            .next()
            .unwrap_or("");
        match field.parse::<f64>() {
            Ok(pnl) if pnl.is_finite() => trades.push(TradeRecord { pnl }),
            Ok(_) => {
                return Err(KellyError::Parse {
                    line: line_no,
                    message: format!("non-finite pnl `{field}`"),
                })
            }
            Err(_) if trades.is_empty() && idx == 0 => continue,
            Err(_) => {
                return Err(KellyError::Parse {
                    line: line_no,
                    message: format!("cannot parse `{field}` as a number"),
                })
            }
        }
    }
    Ok(trades)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Window {
    AllHistory,
    Last(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FractionRule {
    Fixed(f64),
    OnlineKelly { window: Window },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankrollConfig {
    pub initial_capital: f64,
    pub fraction_cap: f64,
}

impl Default for BankrollConfig {
    fn default() -> Self {
        Self {
            initial_capital: 1.0,
            fraction_cap: DEFAULT_FRACTION_CAP,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BankrollRun {
    /// Capital before the first bet and after each bet (`n_bets + 1` entries).
    pub capital: Vec<f64>,
    /// Natural log of `capital`, accumulated additively so it stays finite
    /// where the product would underflow.
    pub log_capital: Vec<f64>,
    /// Stake share used on each bet.
    pub fractions: Vec<f64>,
    pub outcomes: Vec<BetOutcome>,
}

impl BankrollRun {
    pub fn log_growth_rate(&self) -> f64 {
        let n = self.log_capital.len() - 1;
        (self.log_capital[n] - self.log_capital[0]) / n as f64
    }
}

/// Windowed online Kelly estimator over per-unit-stake outcomes.
#[derive(Debug, Clone)]
struct OnlineEstimator {
    window: Window,
    recent: VecDeque<f64>,
    tally: Tally,
    observed: usize,
}

impl OnlineEstimator {
    fn new(window: Window) -> Self {
        Self {
            window,
            recent: VecDeque::new(),
            tally: Tally::default(),
            observed: 0,
        }
    }

    fn observe(&mut self, pnl: f64) {
        self.tally.add(pnl);
        self.observed += 1;
        if let Window::Last(len) = self.window {
            self.recent.push_back(pnl);
            if self.recent.len() > len {
                let old = self.recent.pop_front().expect("window is nonempty");
                self.tally.remove(old);
            }
        }
    }

    /// Stake for the next bet: zero during warm-up or without both a win and a loss.
    fn fraction(&self, cap: f64) -> f64 {
        if self.observed < WARMUP_BETS {
            return 0.0;
        }
        match self.tally.estimate() {
            Ok(est) => est.fraction().clamp(0.0, cap),
            Err(_) => 0.0,
        }
    }
}

/// Checks the preconditions of [`simulate_bankroll`].
pub fn validate_bankroll(rule: &FractionRule, n_bets: usize, config: &BankrollConfig) -> Result<(), KellyError> {
    if n_bets == 0 {
        return Err(KellyError::Config("n_bets must be at least 1".into()));
    }
    if !(config.initial_capital > 0.0 && config.initial_capital.is_finite()) {
        return Err(KellyError::Config(format!(
            "initial capital must be positive, got {}",
            config.initial_capital
        )));
    }
    if !(0.0..1.0).contains(&config.fraction_cap) {
        return Err(KellyError::Config(format!(
            "fraction cap must lie in [0, 1), got {}",
            config.fraction_cap
        )));
    }
    match *rule {
        FractionRule::Fixed(f) if !(0.0..=config.fraction_cap).contains(&f) => Err(KellyError::Config(
            format!("fixed fraction {f} outside [0, {}]", config.fraction_cap),
        )),
        FractionRule::OnlineKelly {
            window: Window::Last(0),
        } => Err(KellyError::Config("window must hold at least one bet".into())),
        _ => Ok(()),
    }
}

/// Bets `n_bets` times: a win multiplies capital by `1 + f R`, a loss by `1 − f`.
pub fn simulate_bankroll(
    env: &mut BiasedBetEnv,
    rule: &FractionRule,
    n_bets: usize,
    config: &BankrollConfig,
) -> Result<BankrollRun, KellyError> {
    validate_bankroll(rule, n_bets, config)?;
    let payout = env.payout_ratio();
    let mut estimator = match rule {
        FractionRule::OnlineKelly { window } => Some(OnlineEstimator::new(*window)),
        FractionRule::Fixed(_) => None,
    };
    let mut capital = Vec::with_capacity(n_bets + 1);
    let mut log_capital = Vec::with_capacity(n_bets + 1);
    let mut fractions = Vec::with_capacity(n_bets);
    let mut outcomes = Vec::with_capacity(n_bets);
    capital.push(config.initial_capital);
    log_capital.push(config.initial_capital.ln());
    for _ in 0..n_bets {
        let f = match (rule, &estimator) {
            (FractionRule::Fixed(f), _) => *f,
            (_, Some(est)) => est.fraction(config.fraction_cap),
            _ => unreachable!("online rule always has an estimator"),
        };
        let outcome = env.step_bet();
        let growth = match outcome {
            BetOutcome::Win => 1.0 + f * payout,
            BetOutcome::Loss => 1.0 - f,
        };
        let last = *capital.last().expect("trajectory starts nonempty");
        capital.push(last * growth);
        log_capital.push(log_capital.last().expect("nonempty") + growth.ln());
        if let Some(est) = estimator.as_mut() {
            est.observe(match outcome {
                BetOutcome::Win => payout,
                BetOutcome::Loss => -1.0,
            });
        }
        fractions.push(f);
        outcomes.push(outcome);
    }
    Ok(BankrollRun {
        capital,
        log_capital,
        fractions,
        outcomes,
    })
}

/// Kelly staking re-estimated from the observed outcomes before every bet.
pub fn online_kelly(
    env: &mut BiasedBetEnv,
    window: Window,
    n_bets: usize,
    config: &BankrollConfig,
) -> Result<BankrollRun, KellyError> {
    simulate_bankroll(env, &FractionRule::OnlineKelly { window }, n_bets, config)
}

/// `(ln c_end − ln c_start) / (len − 1)`.
pub fn log_growth_rate(trajectory: &[f64]) -> Result<f64, KellyError> {
    if trajectory.len() < 2 {
        return Err(KellyError::InvalidInput("need at least two capital values".into()));
    }
    if let Some(c) = trajectory.iter().find(|c| !(**c > 0.0) || !c.is_finite()) {
        return Err(KellyError::InvalidInput(format!("capital {c} is not positive")));
    }
    let n = trajectory.len() - 1;
    Ok((trajectory[n].ln() - trajectory[0].ln()) / n as f64)
}
