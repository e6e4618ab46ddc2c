//! Withdrawal-price trading cycles.
//!
//! A trader fixes a withdrawal price `a` and buys as soon as the (log-)price
//! deviation `p` drops to `-a` or below, then sells at a later random price.
//! With `η` the density of `p`, the expected profit per round is
//!
//! ```text
//! ρ(a) = −∫_{−∞}^{−a} p η(p) dp / (1 + ∫_{−∞}^{−a} η(p) dp)
//! ```
//!
//! and `dρ/da = η(−a) (ρ(a) − a) / (1 + ∫η)`, so the maximizer is the fixed
//! point `ρ(a) = a`. The adaptive strategy sets `a` to the historical average
//! profit per round, whose self-consistent value is that same fixed point.

use std::io::BufRead;

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::environments::{EnvError, PriceSource, TransactionCostModel};
use crate::quadrature;
use crate::rng::{self, StreamRng};

/// Absolute tolerance of each integral in [`profit_rate`].
pub const QUADRATURE_TOL: f64 = 1e-10;

/// Gaussian densities are integrated over `mean ± GAUSSIAN_TRUNCATION · sd`.
pub const GAUSSIAN_TRUNCATION: f64 = 10.0;

const MAX_BRACKET: f64 = 1_048_576.0; // 2^20
const MAX_BISECTIONS: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MmmError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid density: {0}")]
    InvalidDensity(String),
    #[error("no fixed point with withdrawal price below 2^20")]
    NoFixedPoint,
    #[error("bisection stalled at a = {a} with |ρ(a) − a| = {residual}")]
    NotConverged { a: f64, residual: f64 },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("round {round}: {source}")]
    Env {
        round: usize,
        #[source]
        source: EnvError,
    },
}

/// Density `η` of the log-price deviation.
#[derive(Debug, Clone, PartialEq)]
pub enum PriceDensity {
    Gaussian { mean: f64, sd: f64 },
    Uniform { lo: f64, hi: f64 },
    /// Piecewise-constant: `masses[i]` spread evenly over `[edges[i], edges[i + 1])`.
    Histogram { edges: Vec<f64>, masses: Vec<f64> },
}

impl PriceDensity {
    pub fn gaussian(mean: f64, sd: f64) -> Result<Self, MmmError> {
        if !mean.is_finite() || !(sd > 0.0 && sd.is_finite()) {
            return Err(MmmError::InvalidDensity(format!(
                "Gaussian needs finite mean and positive sd, got ({mean}, {sd})"
            )));
        }
        Ok(PriceDensity::Gaussian { mean, sd })
    }

    pub fn uniform(lo: f64, hi: f64) -> Result<Self, MmmError> {
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(MmmError::InvalidDensity(format!(
                "uniform needs finite lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(PriceDensity::Uniform { lo, hi })
    }

    pub fn histogram(edges: Vec<f64>, masses: Vec<f64>) -> Result<Self, MmmError> {
        if masses.is_empty() || edges.len() != masses.len() + 1 {
            return Err(MmmError::InvalidDensity(format!(
                "{} edges for {} bins",
                edges.len(),
                masses.len()
            )));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(MmmError::InvalidDensity("bin edges must be finite and strictly ascending".into()));
        }
        if masses.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(MmmError::InvalidDensity("bin masses must be nonnegative".into()));
        }
        let total: f64 = masses.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(MmmError::InvalidDensity(format!("bin masses sum to {total}")));
        }
        Ok(PriceDensity::Histogram { edges, masses })
    }

    /// Histogram from bin centers: inner edges at midpoints, outer edges half a gap out.
    pub fn histogram_from_centers(centers: &[f64], masses: Vec<f64>) -> Result<Self, MmmError> {
        if centers.len() < 2 || centers.len() != masses.len() {
            return Err(MmmError::InvalidDensity(
                "need at least two bins with one mass per center".into(),
            ));
        }
        if centers.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(MmmError::InvalidDensity("bin centers must be strictly ascending".into()));
        }
        let n = centers.len();
        let mut edges = Vec::with_capacity(n + 1);
        edges.push(centers[0] - 0.5 * (centers[1] - centers[0]));
        edges.extend(centers.windows(2).map(|w| 0.5 * (w[0] + w[1])));
        edges.push(centers[n - 1] + 0.5 * (centers[n - 1] - centers[n - 2]));
        Self::histogram(edges, masses)
    }

    /// Empirical histogram of `samples` on `bins` equal bins over `[lo, hi)`;
    /// samples outside the range are dropped.
    pub fn histogram_from_samples(samples: &[f64], lo: f64, hi: f64, bins: usize) -> Result<Self, MmmError> {
        if bins == 0 || !(lo < hi) {
            return Err(MmmError::InvalidDensity("histogram needs bins > 0 and lo < hi".into()));
        }
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0u64; bins];
        for &x in samples {
            if x >= lo && x < hi {
                let k = (((x - lo) / width) as usize).min(bins - 1);
                counts[k] += 1;
            }
        }
        let kept: u64 = counts.iter().sum();
        if kept == 0 {
            return Err(MmmError::InvalidDensity("no samples inside the histogram range".into()));
        }
        let edges = (0..=bins).map(|k| lo + k as f64 * width).collect();
        let masses = counts.iter().map(|c| *c as f64 / kept as f64).collect();
        Self::histogram(edges, masses)
    }

    /// Reads a two-column `center, mass` file (comma, semicolon or whitespace
    /// separated). Blank lines, `#` comments and a non-numeric header line are skipped.
    pub fn read_histogram<R: BufRead>(reader: R) -> Result<Self, MmmError> {
        let mut centers = Vec::new();
        let mut masses = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| MmmError::Parse { line: line_no, message: e.to_string() })?;
            let text = line.trim();
            if text.is_empty() || text.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = text
                .split(|c: char| c == ',' || c == ';' || c.is_whitespace())
                .filter(|f| !f.is_empty())
                .collect();
            let parsed: Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
            match parsed {
                Ok(values) if values.len() == 2 => {
                    centers.push(values[0]);
                    masses.push(values[1]);
                }
                Err(_) if centers.is_empty() && idx == 0 => continue,
                _ => {
                    return Err(MmmError::Parse {
                        line: line_no,
                        message: format!("expected two numeric columns, got `{text}`"),
                    })
                }
            }
        }
        Self::histogram_from_centers(&centers, masses)
    }

    pub fn pdf(&self, p: f64) -> f64 {
        match self {
            PriceDensity::Gaussian { mean, sd } => {
                let z = (p - mean) / sd;
                (-0.5 * z * z).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
            }
            PriceDensity::Uniform { lo, hi } => {
                if p >= *lo && p <= *hi {
                    1.0 / (hi - lo)
                } else {
                    0.0
                }
            }
            PriceDensity::Histogram { edges, masses } => {
                if p < edges[0] || p >= edges[edges.len() - 1] {
                    return 0.0;
                }
                let k = edges.partition_point(|e| *e <= p) - 1;
                masses[k] / (edges[k + 1] - edges[k])
            }
        }
    }

    /// Integration support; Gaussian tails beyond the truncation are ignored.
    pub fn support(&self) -> (f64, f64) {
        match self {
            PriceDensity::Gaussian { mean, sd } => {
                (mean - GAUSSIAN_TRUNCATION * sd, mean + GAUSSIAN_TRUNCATION * sd)
            }
            PriceDensity::Uniform { lo, hi } => (*lo, *hi),
            PriceDensity::Histogram { edges, .. } => (edges[0], edges[edges.len() - 1]),
        }
    }

    /// Points where the density may be non-smooth, including the support ends.
    fn breakpoints(&self) -> Vec<f64> {
        match self {
            PriceDensity::Histogram { edges, .. } => edges.clone(),
            _ => {
                let (lo, hi) = self.support();
                vec![lo, hi]
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            PriceDensity::Gaussian { mean, sd } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + sd * z
            }
            PriceDensity::Uniform { lo, hi } => lo + (hi - lo) * rng.random::<f64>(),
            PriceDensity::Histogram { edges, masses } => {
                let k = crate::environments::sample_categorical(rng, masses);
                edges[k] + (edges[k + 1] - edges[k]) * rng.random::<f64>()
            }
        }
    }

    /// `∫ g(p) η(p) dp` over `(−∞, upper]`, piece by piece between breakpoints.
    fn integrate_below<G: Fn(f64) -> f64>(&self, upper: f64, g: G, method: Quadrature) -> f64 {
        let points = self.breakpoints();
        let pieces: Vec<(f64, f64)> = points
            .windows(2)
            .filter(|w| w[0] < upper)
            .map(|w| (w[0], w[1].min(upper)))
            .collect();
        if pieces.is_empty() {
            return 0.0;
        }
        let n = pieces.len() as f64;
        pieces
            .iter()
            .map(|&(a, b)| {
                let f = |p: f64| g(p) * self.pdf(p);
                match method {
                    Quadrature::Adaptive { abs_tol } => quadrature::integrate(f, a, b, abs_tol / n),
                    Quadrature::Simpson { step } => quadrature::composite_simpson(f, a, b, step),
                }
            })
            .sum()
    }

    /// Total mass under the module's quadrature.
    pub fn total_mass(&self) -> f64 {
        let (_, hi) = self.support();
        self.integrate_below(hi, |_| 1.0, Quadrature::default())
    }

    /// Mass `∫_{−∞}^{upper} η`.
    pub fn lower_mass(&self, upper: f64) -> f64 {
        self.integrate_below(upper, |_| 1.0, Quadrature::default())
    }

    /// Sampling price source drawing independently from this density.
    pub fn price_source(&self, seed: u64) -> DensityPrices {
        DensityPrices {
            density: self.clone(),
            rng: rng::stream(seed, "density-prices"),
        }
    }
}

/// Independent draws from a [`PriceDensity`].
#[derive(Debug, Clone)]
pub struct DensityPrices {
    density: PriceDensity,
    rng: StreamRng,
}

impl PriceSource for DensityPrices {
    fn next_log_price(&mut self) -> Result<f64, EnvError> {
        Ok(self.density.sample(&mut self.rng))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quadrature {
    Adaptive { abs_tol: f64 },
    /// Composite Simpson with the given panel width.
    Simpson { step: f64 },
}

impl Default for Quadrature {
    fn default() -> Self {
        Quadrature::Adaptive {
            abs_tol: QUADRATURE_TOL,
        }
    }
}

/// Withdrawal price `a`, in the same log units as the price deviation.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct WithdrawalPrice(pub f64);

impl WithdrawalPrice {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// `ρ_η(a)`, expected profit per round at withdrawal price `a`.
pub fn profit_rate(eta: &PriceDensity, a: f64) -> Result<f64, MmmError> {
    profit_rate_with(eta, a, Quadrature::default())
}

pub fn profit_rate_with(eta: &PriceDensity, a: f64, method: Quadrature) -> Result<f64, MmmError> {
    if !a.is_finite() {
        return Err(MmmError::InvalidInput(format!("withdrawal price {a} is not finite")));
    }
    let upper = -a;
    let numerator = -eta.integrate_below(upper, |p| p, method);
    let mass = eta.integrate_below(upper, |_| 1.0, method);
    Ok(numerator / (1.0 + mass))
}

/// Solves `ρ(a) = a` for `a ≥ 0` by bisection, to `|ρ(a) − a| ≤ tol`.
///
/// The bracket is `[0, a_hi]` with `a_hi` the first of 1, 2, 4, … where
/// `ρ(a_hi) < a_hi`; `ρ(0) ≥ 0` makes it a sign change.
pub fn fixed_point_withdrawal(eta: &PriceDensity, tol: f64) -> Result<WithdrawalPrice, MmmError> {
    if !(tol > 0.0 && tol.is_finite()) {
        return Err(MmmError::InvalidInput(format!("tolerance {tol} must be positive")));
    }
    let h = |a: f64| profit_rate(eta, a).map(|rho| rho - a);
    let h0 = h(0.0)?;
    if h0.abs() <= tol {
        return Ok(WithdrawalPrice(0.0));
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    loop {
        if h(hi)? < 0.0 {
            break;
        }
        if hi >= MAX_BRACKET {
            return Err(MmmError::NoFixedPoint);
        }
        lo = hi;
        hi *= 2.0;
    }
    let mut best = (f64::INFINITY, lo);
    for _ in 0..MAX_BISECTIONS {
        let mid = 0.5 * (lo + hi);
        let hm = h(mid)?;
        if hm.abs() < best.0 {
            best = (hm.abs(), mid);
        }
        if hm.abs() <= tol {
            return Ok(WithdrawalPrice(mid));
        }
        if hm > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if mid <= lo && mid >= hi {
            break;
        }
    }
    Err(MmmError::NotConverged {
        a: best.1,
        residual: best.0,
    })
}

/// Grid maximizer of `ρ` over `lo, lo + step, …, ≤ hi`; the lowest `a` wins ties.
pub fn argmax_profit(eta: &PriceDensity, lo: f64, hi: f64, step: f64) -> Result<WithdrawalPrice, MmmError> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi && step > 0.0 && step.is_finite()) {
        return Err(MmmError::InvalidInput(format!(
            "empty grid: lo = {lo}, hi = {hi}, step = {step}"
        )));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    let mut best = (f64::NEG_INFINITY, lo);
    for k in 0..=n {
        let a = lo + k as f64 * step;
        let rho = profit_rate(eta, a)?;
        if rho > best.0 {
            best = (rho, a);
        }
    }
    Ok(WithdrawalPrice(best.1))
}

/// One completed buy-then-sell cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CycleRecord {
    pub buy_price: f64,
    pub sell_price: f64,
    /// `sell_price − buy_price`.
    pub profit: f64,
    /// Rounds observed without buying before the purchase round.
    pub waiting_rounds: u64,
    /// Rounds from the purchase to the sale, at least 1.
    pub holding_rounds: u64,
    /// Withdrawal price in force when the asset was bought.
    pub withdrawal_price: f64,
}

impl CycleRecord {
    /// Rounds the cycle occupied: waiting, the purchase round, holding.
    pub fn duration(&self) -> u64 {
        self.waiting_rounds + 1 + self.holding_rounds
    }

    pub fn net_profit(&self, costs: &TransactionCostModel, traded_value: f64) -> Result<f64, EnvError> {
        costs.apply(self.profit, traded_value)
    }
}

/// Historical average profit per round, `Σ profit / Σ duration`; 0 before any cycle.
pub fn adaptive_withdrawal(history: &[CycleRecord]) -> WithdrawalPrice {
    let rounds: u64 = history.iter().map(CycleRecord::duration).sum();
    if rounds == 0 {
        return WithdrawalPrice(0.0);
    }
    WithdrawalPrice(history.iter().map(|c| c.profit).sum::<f64>() / rounds as f64)
}

/// Arithmetic mean of per-cycle profits; 0 before any cycle.
pub fn mean_cycle_profit(history: &[CycleRecord]) -> f64 {
    if history.is_empty() {
        return 0.0;
    }
    history.iter().map(|c| c.profit).sum::<f64>() / history.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WithdrawalStrategy {
    Fixed(f64),
    /// Re-sets `a` to [`adaptive_withdrawal`] after every completed cycle.
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SaleTiming {
    /// Sell at the first price drawn after the purchase.
    NextRound,
    /// Each round after the purchase, sell at that round's price with this probability.
    Geometric(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MmmConfig {
    pub strategy: WithdrawalStrategy,
    pub n_rounds: usize,
    pub sale: SaleTiming,
    /// Stop early once this many cycles have completed.
    pub max_cycles: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct MmmRun {
    pub cycles: Vec<CycleRecord>,
    /// Price draws consumed.
    pub rounds: usize,
    /// Withdrawal price in force at the end.
    pub final_withdrawal: f64,
}

impl MmmRun {
    /// Total profit over total rounds spent in completed cycles.
    pub fn profit_per_round(&self) -> f64 {
        adaptive_withdrawal(&self.cycles).0
    }
}

enum Phase {
    Buying { waited: u64 },
    Holding { buy: f64, waited: u64, held: u64, a: f64 },
}

/// Runs buy/sell cycles against `prices` for up to `n_rounds` price draws.
pub fn simulate_mmm<P: PriceSource + ?Sized>(
    prices: &mut P,
    config: &MmmConfig,
    seed: u64,
) -> Result<MmmRun, MmmError> {
    if config.n_rounds == 0 {
        return Err(MmmError::InvalidInput("n_rounds must be at least 1".into()));
    }
    if let WithdrawalStrategy::Fixed(a) = config.strategy {
        if a.is_nan() {
            return Err(MmmError::InvalidInput("withdrawal price is NaN".into()));
        }
    }
    let sell_probability = match config.sale {
        SaleTiming::NextRound => 1.0,
        SaleTiming::Geometric(q) if q > 0.0 && q <= 1.0 => q,
        SaleTiming::Geometric(q) => {
            return Err(MmmError::InvalidInput(format!("sale probability {q} outside (0, 1]")))
        }
    };
    let mut sale_rng = rng::stream(seed, "sale-timing");
    let mut a = match config.strategy {
        WithdrawalStrategy::Fixed(a) => a,
        WithdrawalStrategy::Adaptive => 0.0,
    };
    let (mut profit_sum, mut round_sum) = (0.0, 0u64);
    let mut cycles = Vec::new();
    let mut phase = Phase::Buying { waited: 0 };
    let mut rounds = 0;
    while rounds < config.n_rounds {
        if config.max_cycles.is_some_and(|m| cycles.len() >= m) {
            break;
        }
        let p = prices
            .next_log_price()
            .map_err(|source| MmmError::Env { round: rounds, source })?;
        rounds += 1;
        phase = match phase {
            Phase::Buying { waited } if p <= -a => Phase::Holding { buy: p, waited, held: 0, a },
            Phase::Buying { waited } => Phase::Buying { waited: waited + 1 },
            Phase::Holding { buy, waited, held, a: a_buy } => {
                let held = held + 1;
                if sell_probability >= 1.0 || sale_rng.random::<f64>() < sell_probability {
                    let record = CycleRecord {
                        buy_price: buy,
                        sell_price: p,
                        profit: p - buy,
                        waiting_rounds: waited,
                        holding_rounds: held,
                        withdrawal_price: a_buy,
                    };
                    profit_sum += record.profit;
                    round_sum += record.duration();
                    cycles.push(record);
                    if config.strategy == WithdrawalStrategy::Adaptive {
                        a = profit_sum / round_sum as f64;
                    }
                    Phase::Buying { waited: 0 }
                } else {
                    Phase::Holding { buy, waited, held, a: a_buy }
                }
            }
        };
    }
    Ok(MmmRun {
        cycles,
        rounds,
        final_withdrawal: a,
    })
}
