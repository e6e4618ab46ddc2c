//! TOML experiment configs.
//!
//! A config names its `kind`, the `seeds` to run and one section of
//! parameters for that kind (`[mdp]`, `[qlearning]` plus `[mdp]`, `[kelly]`,
//! `[mmm]` or `[across_games]` with `[[across_games.games]]` entries).
//! Everything is validated against the target module before a run starts.

use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::across_games::{AcrossGamesConfig, CandidateSet, GameSet, OpponentModel};
use crate::environments::{mdp_as_environment, BiasedBetEnv, TransactionCostModel};
use crate::kelly::{self, BankrollConfig, FractionRule, Window, DEFAULT_FRACTION_CAP};
use crate::mdp::{TabularMdp, DEFAULT_TOL};
use crate::mmm::{PriceDensity, SaleTiming};
use crate::qlearning::{ExplorationPolicy, LearningRateSchedule, MatrixGame, QLearningConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { key: String, line: usize },
    #[error("{}`{key}`: {message}", line.map(|l| format!("line {l}: ")).unwrap_or_default())]
    Constraint {
        key: String,
        line: Option<usize>,
        message: String,
    },
}

impl ConfigError {
    /// 1-based line the error points at, when known.
    pub fn line(&self) -> Option<usize> {
        match self {
            ConfigError::Io { .. } => None,
            ConfigError::Syntax { line, .. } | ConfigError::UnknownKey { line, .. } => Some(*line),
            ConfigError::Constraint { line, .. } => *line,
        }
    }
}

/// Experiment families, in listing order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    MdpSolve,
    QLearning,
    Kelly,
    Mmm,
    AcrossGames,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 5] = [
        ExperimentKind::MdpSolve,
        ExperimentKind::QLearning,
        ExperimentKind::Kelly,
        ExperimentKind::Mmm,
        ExperimentKind::AcrossGames,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::MdpSolve => "mdp-solve",
            ExperimentKind::QLearning => "q-learning",
            ExperimentKind::Kelly => "kelly",
            ExperimentKind::Mmm => "mmm",
            ExperimentKind::AcrossGames => "across-games",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }

    /// Config sections this kind reads.
    fn sections(self) -> &'static [&'static str] {
        match self {
            ExperimentKind::MdpSolve => &["mdp"],
            ExperimentKind::QLearning => &["mdp", "qlearning"],
            ExperimentKind::Kelly => &["kelly"],
            ExperimentKind::Mmm => &["mmm"],
            ExperimentKind::AcrossGames => &["across_games"],
        }
    }

    fn default_record_every(self) -> u64 {
        match self {
            ExperimentKind::MdpSolve | ExperimentKind::Mmm => 1,
            ExperimentKind::QLearning => 100,
            ExperimentKind::Kelly | ExperimentKind::AcrossGames => 1_000,
        }
    }
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// ---- raw file layout ----

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    kind: String,
    seeds: Vec<u64>,
    out: Option<PathBuf>,
    record_every: Option<u64>,
    mdp: Option<RawMdp>,
    qlearning: Option<RawQLearning>,
    kelly: Option<RawKelly>,
    mmm: Option<RawMmm>,
    across_games: Option<RawAcrossGames>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMdp {
    discount: f64,
    states: Option<usize>,
    actions: Option<usize>,
    rewards: Option<Vec<Vec<f64>>>,
    transitions: Option<Vec<Vec<Vec<f64>>>>,
    tolerance: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQLearning {
    episodes: usize,
    horizon: usize,
    omega: Option<f64>,
    learning_rate: Option<f64>,
    epsilon_initial: Option<f64>,
    epsilon_decay: Option<f64>,
    epsilon_floor: Option<f64>,
    initial_q: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawFraction {
    Fixed(f64),
    Named(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawKelly {
    win_probability: f64,
    payout_ratio: f64,
    bets: usize,
    fraction: RawFraction,
    window: Option<usize>,
    initial_capital: Option<f64>,
    fraction_cap: Option<f64>,
    trade_history: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMmm {
    density: String,
    mean: Option<f64>,
    sd: Option<f64>,
    lo: Option<f64>,
    hi: Option<f64>,
    histogram: Option<PathBuf>,
    strategy: String,
    withdrawal: Option<f64>,
    rounds: Option<usize>,
    max_cycles: Option<usize>,
    sale_probability: Option<f64>,
    proportional_cost: Option<f64>,
    traded_value: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAcrossGames {
    rounds: usize,
    kappa: Option<f64>,
    partition_temperature: Option<f64>,
    action_temperature: Option<f64>,
    initial_stock: Option<f64>,
    candidates: Option<String>,
    ode_step: Option<f64>,
    games: Vec<RawGame>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGame {
    /// Learner payoff, one row per learner action, one column per opponent action.
    payoffs: Vec<Vec<f64>>,
    opponent: Option<Vec<f64>>,
    weight: Option<f64>,
}

// ---- validated config ----

#[derive(Debug, Clone)]
pub enum MdpModel {
    Explicit(TabularMdp),
    /// Drawn per seed with [`TabularMdp::random`].
    Random {
        states: usize,
        actions: usize,
        discount: f64,
    },
}

#[derive(Debug, Clone)]
pub struct MdpParams {
    pub model: MdpModel,
    pub tolerance: f64,
}

#[derive(Debug, Clone)]
pub struct QLearningParams {
    pub learner: QLearningConfig,
    pub horizon: usize,
}

#[derive(Debug, Clone)]
pub struct KellyParams {
    pub win_probability: f64,
    pub payout_ratio: f64,
    pub bets: usize,
    pub rule: FractionRule,
    pub bankroll: BankrollConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MmmStrategy {
    Fixed(f64),
    /// Fixed at the fixed point of the density.
    Optimal,
    Adaptive,
}

#[derive(Debug, Clone)]
pub struct MmmParams {
    pub density: PriceDensity,
    pub strategy: MmmStrategy,
    pub rounds: usize,
    pub max_cycles: Option<usize>,
    pub sale: SaleTiming,
    pub costs: TransactionCostModel,
    pub traded_value: f64,
}

#[derive(Debug, Clone)]
pub struct AcrossGamesParams {
    pub games: GameSet,
    pub opponents: OpponentModel,
    pub learner: AcrossGamesConfig,
    pub ode_step: Option<f64>,
}

#[derive(Debug, Clone)]
pub enum KindParams {
    MdpSolve(MdpParams),
    QLearning { mdp: MdpParams, learner: QLearningParams },
    Kelly(KellyParams),
    Mmm(MmmParams),
    AcrossGames(AcrossGamesParams),
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    /// Emit a record row every this many steps (and at the last step).
    pub record_every: u64,
    pub params: KindParams,
}

/// Reads and validates the config at `path`. Relative paths inside the file
/// resolve against its directory.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig, ConfigError> {
    let source = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    let default_out = path.with_extension("csv");
    parse_config_str(&source, base, default_out)
}

/// As [`parse_config`] on in-memory text.
pub fn parse_config_str(source: &str, base: &Path, default_out: PathBuf) -> Result<ExperimentConfig, ConfigError> {
    if let Err(e) = source.parse::<toml::Table>() {
        return Err(ConfigError::Syntax {
            line: span_line(source, e.span()),
            message: e.message().trim().to_string(),
        });
    }
    let raw: RawConfig = toml::from_str(source).map_err(|e| schema_error(source, &e))?;
    Validator { source, base }.validate(raw, default_out)
}

fn span_line(source: &str, span: Option<std::ops::Range<usize>>) -> usize {
    let offset = span.map_or(0, |s| s.start.min(source.len()));
    source[..offset].matches('\n').count() + 1
}

/// Section header in force at 1-based `line`.
fn section_at(source: &str, line: usize) -> Option<String> {
    let mut section = None;
    for text in source.lines().take(line) {
        if let Some(name) = header_name(text) {
            section = Some(name);
        }
    }
    section
}

fn header_name(line: &str) -> Option<String> {
    let t = line.trim();
    let inner = t.strip_prefix("[[").and_then(|s| s.split("]]").next());
    let inner = inner.or_else(|| t.strip_prefix('[').and_then(|s| s.split(']').next()))?;
    Some(inner.trim().to_string())
}

fn backticked(message: &str) -> Option<&str> {
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(&message[start..start + len])
}

fn schema_error(source: &str, e: &toml::de::Error) -> ConfigError {
    let line = span_line(source, e.span());
    let message = e.message().trim().to_string();
    let qualify = |key: &str| match section_at(source, line) {
        Some(section) => format!("{section}.{key}"),
        None => key.to_string(),
    };
    if message.starts_with("unknown field") {
        let key = backticked(&message).unwrap_or("?");
        return ConfigError::UnknownKey { key: qualify(key), line };
    }
    if message.starts_with("missing field") {
        let key = backticked(&message).unwrap_or("?");
        return ConfigError::Constraint {
            key: qualify(key),
            line: Some(line),
            message: "required key is missing".into(),
        };
    }
    let key = source
        .lines()
        .nth(line - 1)
        .and_then(|l| l.split_once('='))
        .map(|(k, _)| qualify(k.trim()))
        .unwrap_or_else(|| section_at(source, line).unwrap_or_default());
    ConfigError::Constraint {
        key,
        line: Some(line),
        message,
    }
}

struct Validator<'a> {
    source: &'a str,
    base: &'a Path,
}

impl Validator<'_> {
    /// Line of `key` inside `section` (top level when `None`).
    fn key_line(&self, section: Option<&str>, key: &str) -> Option<usize> {
        let mut current: Option<String> = None;
        for (i, text) in self.source.lines().enumerate() {
            if let Some(name) = header_name(text) {
                current = Some(name);
                continue;
            }
            if current.as_deref() != section {
                continue;
            }
            if let Some(rest) = text.trim_start().strip_prefix(key) {
                if rest.trim_start().starts_with('=') {
                    return Some(i + 1);
                }
            }
        }
        // fall back to the section header
        section.and_then(|s| {
            self.source
                .lines()
                .position(|t| header_name(t).as_deref() == Some(s))
                .map(|i| i + 1)
        })
    }

    fn fail(&self, section: Option<&str>, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::Constraint {
            key: section.map_or(key.to_string(), |s| format!("{s}.{key}")),
            line: self.key_line(section, key),
            message: message.into(),
        }
    }

    fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base.join(path)
        }
    }

    fn validate(&self, raw: RawConfig, default_out: PathBuf) -> Result<ExperimentConfig, ConfigError> {
        let kind = ExperimentKind::from_name(&raw.kind).ok_or_else(|| {
            let names: Vec<_> = ExperimentKind::ALL.iter().map(|k| k.name()).collect();
            self.fail(None, "kind", format!("unknown kind `{}`; expected one of {}", raw.kind, names.join(", ")))
        })?;
        if raw.seeds.is_empty() {
            return Err(self.fail(None, "seeds", "seed list must not be empty"));
        }
        let record_every = raw.record_every.unwrap_or(kind.default_record_every());
        if record_every == 0 {
            return Err(self.fail(None, "record_every", "must be at least 1"));
        }
        let present = [
            ("mdp", raw.mdp.is_some()),
            ("qlearning", raw.qlearning.is_some()),
            ("kelly", raw.kelly.is_some()),
            ("mmm", raw.mmm.is_some()),
            ("across_games", raw.across_games.is_some()),
        ];
        for (section, is_present) in present {
            let wanted = kind.sections().contains(&section);
            if is_present && !wanted {
                return Err(ConfigError::Constraint {
                    key: section.into(),
                    line: self.key_line(Some(section), ""),
                    message: format!("section does not apply to kind {kind}"),
                });
            }
            if wanted && !is_present {
                return Err(ConfigError::Constraint {
                    key: section.into(),
                    line: None,
                    message: format!("kind {kind} needs a [{section}] section"),
                });
            }
        }
        let params = match kind {
            ExperimentKind::MdpSolve => KindParams::MdpSolve(self.mdp(raw.mdp.expect("checked above"))?),
            ExperimentKind::QLearning => {
                let mdp = self.mdp(raw.mdp.expect("checked above"))?;
                let learner = self.qlearning(raw.qlearning.expect("checked above"), &mdp)?;
                KindParams::QLearning { mdp, learner }
            }
            ExperimentKind::Kelly => KindParams::Kelly(self.kelly(raw.kelly.expect("checked above"))?),
            ExperimentKind::Mmm => KindParams::Mmm(self.mmm(raw.mmm.expect("checked above"))?),
            ExperimentKind::AcrossGames => {
                KindParams::AcrossGames(self.across_games(raw.across_games.expect("checked above"))?)
            }
        };
        let out = raw.out.map(|p| self.resolve(&p)).unwrap_or(default_out);
        Ok(ExperimentConfig {
            kind,
            seeds: raw.seeds,
            out,
            record_every,
            params,
        })
    }

    fn mdp(&self, raw: RawMdp) -> Result<MdpParams, ConfigError> {
        let s = Some("mdp");
        if !(0.0..1.0).contains(&raw.discount) {
            return Err(self.fail(s, "discount", format!("discount {} must lie in [0, 1)", raw.discount)));
        }
        let tolerance = raw.tolerance.unwrap_or(DEFAULT_TOL);
        if !(tolerance > 0.0 && tolerance.is_finite()) {
            return Err(self.fail(s, "tolerance", "must be positive"));
        }
        let model = match (raw.rewards, raw.transitions) {
            (Some(rewards), Some(transitions)) => {
                if raw.states.is_some() || raw.actions.is_some() {
                    return Err(self.fail(s, "states", "give either states/actions or rewards/transitions"));
                }
                let mdp = TabularMdp::new(transitions, rewards, raw.discount)
                    .map_err(|e| self.fail(s, "transitions", e.to_string()))?;
                MdpModel::Explicit(mdp)
            }
            (None, None) => {
                let states = raw.states.ok_or_else(|| self.fail(s, "states", "required for a random model"))?;
                let actions = raw.actions.ok_or_else(|| self.fail(s, "actions", "required for a random model"))?;
                if states == 0 {
                    return Err(self.fail(s, "states", "must be at least 1"));
                }
                if actions == 0 {
                    return Err(self.fail(s, "actions", "must be at least 1"));
                }
                MdpModel::Random {
                    states,
                    actions,
                    discount: raw.discount,
                }
            }
            (Some(_), None) => return Err(self.fail(s, "rewards", "rewards need transitions")),
            (None, Some(_)) => return Err(self.fail(s, "transitions", "transitions need rewards")),
        };
        Ok(MdpParams { model, tolerance })
    }

    fn qlearning(&self, raw: RawQLearning, mdp: &MdpParams) -> Result<QLearningParams, ConfigError> {
        let s = Some("qlearning");
        if raw.horizon == 0 {
            return Err(self.fail(s, "horizon", "must be at least 1"));
        }
        let schedule = match (raw.omega, raw.learning_rate) {
            (Some(_), Some(_)) => return Err(self.fail(s, "learning_rate", "give either omega or learning_rate")),
            (None, Some(alpha)) => LearningRateSchedule::Constant(alpha),
            (Some(omega), None) => LearningRateSchedule::Polynomial { omega },
            (None, None) => LearningRateSchedule::default(),
        };
        let rate_key = if raw.learning_rate.is_some() { "learning_rate" } else { "omega" };
        schedule.validate().map_err(|e| self.fail(s, rate_key, e.to_string()))?;
        let defaults = ExplorationPolicy::default();
        let exploration = ExplorationPolicy {
            initial: raw.epsilon_initial.unwrap_or(defaults.initial),
            decay: raw.epsilon_decay.unwrap_or(defaults.decay),
            floor: raw.epsilon_floor.unwrap_or(defaults.floor),
        };
        exploration
            .validate()
            .map_err(|e| self.fail(s, "epsilon_floor", e.to_string()))?;
        let discount = match &mdp.model {
            MdpModel::Explicit(m) => m.discount(),
            MdpModel::Random { discount, .. } => *discount,
        };
        let learner = QLearningConfig {
            schedule,
            exploration,
            episodes: raw.episodes,
            discount,
            initial_q: raw.initial_q.unwrap_or(0.0),
        };
        if raw.episodes == 0 {
            return Err(self.fail(s, "episodes", "must be at least 1"));
        }
        learner.validate().map_err(|e| self.fail(s, "initial_q", e.to_string()))?;
        if let MdpModel::Explicit(m) = &mdp.model {
            mdp_as_environment(m.clone(), raw.horizon, 0).map_err(|e| self.fail(s, "horizon", e.to_string()))?;
        }
        Ok(QLearningParams {
            learner,
            horizon: raw.horizon,
        })
    }

    fn kelly(&self, raw: RawKelly) -> Result<KellyParams, ConfigError> {
        let s = Some("kelly");
        BiasedBetEnv::new(raw.win_probability, raw.payout_ratio, 0).map_err(|e| {
            let key = if (0.0..=1.0).contains(&raw.win_probability) { "payout_ratio" } else { "win_probability" };
            self.fail(s, key, e.to_string())
        })?;
        let bankroll = BankrollConfig {
            initial_capital: raw.initial_capital.unwrap_or(1.0),
            fraction_cap: raw.fraction_cap.unwrap_or(DEFAULT_FRACTION_CAP),
        };
        let window = match raw.window {
            None | Some(0) => Window::AllHistory,
            Some(n) => Window::Last(n),
        };
        let clamp = |f: f64| f.clamp(0.0, bankroll.fraction_cap);
        let rule = match &raw.fraction {
            RawFraction::Fixed(f) => FractionRule::Fixed(*f),
            RawFraction::Named(name) => match name.as_str() {
                "kelly" => FractionRule::Fixed(clamp(
                    kelly::kelly_fraction(raw.win_probability, raw.payout_ratio)
                        .map_err(|e| self.fail(s, "win_probability", e.to_string()))?,
                )),
                "online" => FractionRule::OnlineKelly { window },
                "history" => {
                    let path = raw
                        .trade_history
                        .as_ref()
                        .ok_or_else(|| self.fail(s, "trade_history", "required when fraction = \"history\""))?;
                    let path = self.resolve(path);
                    let file = File::open(&path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
                    let trades = kelly::read_trade_history(BufReader::new(file))
                        .map_err(|e| self.fail(s, "trade_history", format!("{}: {e}", path.display())))?;
                    let estimate = kelly::estimate_from_history(&trades)
                        .map_err(|e| self.fail(s, "trade_history", format!("{}: {e}", path.display())))?;
                    FractionRule::Fixed(clamp(estimate.fraction()))
                }
                other => {
                    return Err(self.fail(
                        s,
                        "fraction",
                        format!("`{other}` is not a number, \"kelly\", \"online\" or \"history\""),
                    ))
                }
            },
        };
        if raw.trade_history.is_some() && !matches!(&raw.fraction, RawFraction::Named(n) if n == "history") {
            return Err(self.fail(s, "trade_history", "only read when fraction = \"history\""));
        }
        if raw.window.is_some() && !matches!(rule, FractionRule::OnlineKelly { .. }) {
            return Err(self.fail(s, "window", "only used when fraction = \"online\""));
        }
        kelly::validate_bankroll(&rule, raw.bets, &bankroll).map_err(|e| {
            let key = if raw.bets == 0 {
                "bets"
            } else if !(bankroll.initial_capital > 0.0) || !bankroll.initial_capital.is_finite() {
                "initial_capital"
            } else if !(0.0..1.0).contains(&bankroll.fraction_cap) {
                "fraction_cap"
            } else {
                "fraction"
            };
            self.fail(s, key, e.to_string())
        })?;
        Ok(KellyParams {
            win_probability: raw.win_probability,
            payout_ratio: raw.payout_ratio,
            bets: raw.bets,
            rule,
            bankroll,
        })
    }

    fn mmm(&self, raw: RawMmm) -> Result<MmmParams, ConfigError> {
        let s = Some("mmm");
        let need = |v: Option<f64>, key: &str| v.ok_or_else(|| self.fail(s, key, format!("required for density `{}`", raw.density)));
        let density = match raw.density.as_str() {
            "gaussian" => PriceDensity::gaussian(need(raw.mean, "mean")?, need(raw.sd, "sd")?)
                .map_err(|e| self.fail(s, "sd", e.to_string()))?,
            "uniform" => PriceDensity::uniform(need(raw.lo, "lo")?, need(raw.hi, "hi")?)
                .map_err(|e| self.fail(s, "hi", e.to_string()))?,
            "histogram" => {
                let path = raw
                    .histogram
                    .as_ref()
                    .ok_or_else(|| self.fail(s, "histogram", "required for density `histogram`"))?;
                let path = self.resolve(path);
                let file = File::open(&path).map_err(|source| ConfigError::Io { path: path.clone(), source })?;
                PriceDensity::read_histogram(BufReader::new(file))
                    .map_err(|e| self.fail(s, "histogram", format!("{}: {e}", path.display())))?
            }
            other => {
                return Err(self.fail(s, "density", format!("`{other}` is not gaussian, uniform or histogram")))
            }
        };
        let strategy = match raw.strategy.as_str() {
            "fixed" => {
                let a = raw
                    .withdrawal
                    .ok_or_else(|| self.fail(s, "withdrawal", "required for strategy `fixed`"))?;
                if a.is_nan() {
                    return Err(self.fail(s, "withdrawal", "must be a number"));
                }
                MmmStrategy::Fixed(a)
            }
            "optimal" => MmmStrategy::Optimal,
            "adaptive" => MmmStrategy::Adaptive,
            other => {
                return Err(self.fail(s, "strategy", format!("`{other}` is not fixed, optimal or adaptive")))
            }
        };
        if raw.withdrawal.is_some() && !matches!(strategy, MmmStrategy::Fixed(_)) {
            return Err(self.fail(s, "withdrawal", "only used with strategy `fixed`"));
        }
        if raw.rounds.is_none() && raw.max_cycles.is_none() {
            return Err(self.fail(s, "rounds", "give rounds, max_cycles or both"));
        }
        let rounds = raw.rounds.unwrap_or(usize::MAX);
        if rounds == 0 {
            return Err(self.fail(s, "rounds", "must be at least 1"));
        }
        if raw.max_cycles == Some(0) {
            return Err(self.fail(s, "max_cycles", "must be at least 1"));
        }
        let sale = match raw.sale_probability {
            None => SaleTiming::NextRound,
            Some(q) if q > 0.0 && q <= 1.0 => {
                if q == 1.0 { SaleTiming::NextRound } else { SaleTiming::Geometric(q) }
            }
            Some(q) => return Err(self.fail(s, "sale_probability", format!("{q} outside (0, 1]"))),
        };
        let costs = TransactionCostModel::new(raw.proportional_cost.unwrap_or(0.0))
            .map_err(|e| self.fail(s, "proportional_cost", e.to_string()))?;
        let traded_value = raw.traded_value.unwrap_or(2.0);
        costs
            .apply(0.0, traded_value)
            .map_err(|e| self.fail(s, "traded_value", e.to_string()))?;
        Ok(MmmParams {
            density,
            strategy,
            rounds,
            max_cycles: raw.max_cycles,
            sale,
            costs,
            traded_value,
        })
    }

    fn across_games(&self, raw: RawAcrossGames) -> Result<AcrossGamesParams, ConfigError> {
        let s = Some("across_games");
        let gs = Some("across_games.games");
        if raw.games.is_empty() {
            return Err(self.fail(s, "games", "at least one [[across_games.games]] entry is required"));
        }
        let n = raw.games.len();
        let mut games = Vec::with_capacity(n);
        let mut strategies = Vec::with_capacity(n);
        let mut weights = Vec::with_capacity(n);
        for (g, game) in raw.games.iter().enumerate() {
            let col = game.payoffs.iter().map(|r| vec![0.0; r.len()]).collect();
            let matrix = MatrixGame::bimatrix(game.payoffs.clone(), col)
                .map_err(|e| self.fail(gs, "payoffs", format!("game {g}: {e}")))?;
            let n_opp = matrix.action_counts()[1];
            strategies.push(game.opponent.clone().unwrap_or_else(|| vec![1.0 / n_opp as f64; n_opp]));
            weights.push(game.weight);
            games.push(matrix);
        }
        let weights = match weights.iter().filter(|w| w.is_some()).count() {
            0 => vec![1.0 / n as f64; n],
            k if k == n => weights.into_iter().map(|w| w.expect("all present")).collect(),
            _ => return Err(self.fail(gs, "weight", "give a weight for every game or for none")),
        };
        let games = GameSet::new(games, weights).map_err(|e| self.fail(gs, "weight", e.to_string()))?;
        let opponents = OpponentModel::new(strategies).map_err(|e| self.fail(gs, "opponent", e.to_string()))?;
        for g in 0..n {
            if opponents.strategy(g).len() != games.games()[g].action_counts()[1] {
                return Err(self.fail(gs, "opponent", format!("game {g}: one probability per payoff column")));
            }
        }
        let candidates = match raw.candidates.as_deref() {
            None | Some("all") => CandidateSet::All,
            Some("coarsest-finest") => CandidateSet::CoarsestAndFinest,
            Some(other) => {
                return Err(self.fail(s, "candidates", format!("`{other}` is not all or coarsest-finest")))
            }
        };
        if candidates == CandidateSet::All && n > crate::across_games::MAX_GAMES {
            return Err(self.fail(
                s,
                "candidates",
                format!("{n} games exceed {}; use candidates = \"coarsest-finest\"", crate::across_games::MAX_GAMES),
            ));
        }
        let defaults = AcrossGamesConfig::default();
        let learner = AcrossGamesConfig {
            partition_temperature: raw.partition_temperature.unwrap_or(defaults.partition_temperature),
            action_temperature: raw.action_temperature.unwrap_or(defaults.action_temperature),
            kappa: raw.kappa.unwrap_or(defaults.kappa),
            rounds: raw.rounds,
            initial_stock: raw.initial_stock.unwrap_or(defaults.initial_stock),
            candidates,
        };
        learner.validate().map_err(|e| {
            let key = if raw.rounds == 0 {
                "rounds"
            } else if !(learner.kappa >= 0.0) {
                "kappa"
            } else if !(learner.partition_temperature > 0.0) {
                "partition_temperature"
            } else if !(learner.action_temperature > 0.0) {
                "action_temperature"
            } else {
                "initial_stock"
            };
            self.fail(s, key, e.to_string())
        })?;
        if let Some(step) = raw.ode_step {
            if !(step > 0.0 && step.is_finite()) {
                return Err(self.fail(s, "ode_step", "must be positive"));
            }
        }
        Ok(AcrossGamesParams {
            games,
            opponents,
            learner,
            ode_step: raw.ode_step,
        })
    }
}
