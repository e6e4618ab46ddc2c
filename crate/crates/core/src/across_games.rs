//! Learning across games.
//!
//! Each round a game is drawn from a finite set, the learner picks a partition
//! of the set into classes it will not tell apart, looks up the class of the
//! drawn game and picks an action for that class. Both choices are softmax
//! draws over cumulative reinforcement stocks: partition propensities earn the
//! payoff minus a reasoning cost that grows with the number of classes, and
//! (partition, class, action) attractions earn the payoff.
//!
//! [`ode_approximation`] integrates the expected motion of the same stocks.

use rand::Rng;
use thiserror::Error;

use crate::environments::sample_categorical;
use crate::qlearning::MatrixGame;
use crate::rng;

/// Largest game set whose partitions are enumerated (Bell(8) = 4140).
pub const MAX_GAMES: usize = 8;

/// Lower bound kept on every propensity and attraction after an update.
pub const STOCK_FLOOR: f64 = 1e-6;

/// Share of final rounds over which partition frequencies are reported.
pub const FINAL_SHARE: f64 = 0.1;

const PROBABILITY_TOL: f64 = 1e-12;
const ODE_SAMPLES: usize = 1_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AcrossGamesError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("{n} games exceed the enumeration cap of {cap}")]
    TooManyGames { n: usize, cap: usize },
    #[error("invalid game set: {0}")]
    InvalidGameSet(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
}

fn check_distribution(p: &[f64], what: &str) -> Result<(), AcrossGamesError> {
    if p.is_empty() || p.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(AcrossGamesError::InvalidInput(format!("{what} must be nonnegative and nonempty")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROBABILITY_TOL {
        return Err(AcrossGamesError::InvalidInput(format!("{what} sums to {total}")));
    }
    Ok(())
}

/// Games the learner (agent 0 of each two-agent game) may face.
#[derive(Debug, Clone, PartialEq)]
pub struct GameSet {
    games: Vec<MatrixGame>,
    draw_weights: Vec<f64>,
}

impl GameSet {
    pub fn new(games: Vec<MatrixGame>, draw_weights: Vec<f64>) -> Result<Self, AcrossGamesError> {
        if games.is_empty() {
            return Err(AcrossGamesError::InvalidGameSet("no games".into()));
        }
        if draw_weights.len() != games.len() {
            return Err(AcrossGamesError::InvalidGameSet(format!(
                "{} draw weights for {} games",
                draw_weights.len(),
                games.len()
            )));
        }
        check_distribution(&draw_weights, "draw weights")?;
        let n_actions = games[0].action_counts()[0];
        for (g, game) in games.iter().enumerate() {
            if game.n_agents() != 2 {
                return Err(AcrossGamesError::InvalidGameSet(format!(
                    "game {g} has {} agents, expected 2",
                    game.n_agents()
                )));
            }
            if game.action_counts()[0] != n_actions {
                return Err(AcrossGamesError::InvalidGameSet(format!(
                    "game {g} gives the learner {} actions, game 0 gives {n_actions}",
                    game.action_counts()[0]
                )));
            }
        }
        Ok(Self { games, draw_weights })
    }

    /// Equally likely games.
    pub fn uniform(games: Vec<MatrixGame>) -> Result<Self, AcrossGamesError> {
        let n = games.len().max(1);
        Self::new(games, vec![1.0 / n as f64; n])
    }

    pub fn n_games(&self) -> usize {
        self.games.len()
    }

    /// Actions available to the learner in every game.
    pub fn n_actions(&self) -> usize {
        self.games[0].action_counts()[0]
    }

    pub fn games(&self) -> &[MatrixGame] {
        &self.games
    }

    pub fn draw_weights(&self) -> &[f64] {
        &self.draw_weights
    }

    fn learner_payoff(&self, game: usize, action: usize, opponent_action: usize) -> f64 {
        let n_opp = self.games[game].action_counts()[1];
        self.games[game].payoff_tensor(0)[action * n_opp + opponent_action]
    }
}

/// Stationary mixed strategy of the opponent in each game.
#[derive(Debug, Clone, PartialEq)]
pub struct OpponentModel {
    strategies: Vec<Vec<f64>>,
}

impl OpponentModel {
    pub fn new(strategies: Vec<Vec<f64>>) -> Result<Self, AcrossGamesError> {
        for (g, s) in strategies.iter().enumerate() {
            check_distribution(s, &format!("opponent strategy in game {g}"))?;
        }
        Ok(Self { strategies })
    }

    /// Uniform play in every game of `games`.
    pub fn uniform(games: &GameSet) -> Self {
        let strategies = games
            .games
            .iter()
            .map(|g| {
                let n = g.action_counts()[1];
                vec![1.0 / n as f64; n]
            })
            .collect();
        Self { strategies }
    }

    pub fn strategy(&self, game: usize) -> &[f64] {
        &self.strategies[game]
    }

    fn check_against(&self, games: &GameSet) -> Result<(), AcrossGamesError> {
        if self.strategies.len() != games.n_games() {
            return Err(AcrossGamesError::InvalidInput(format!(
                "{} opponent strategies for {} games",
                self.strategies.len(),
                games.n_games()
            )));
        }
        for (g, (s, game)) in self.strategies.iter().zip(&games.games).enumerate() {
            if s.len() != game.action_counts()[1] {
                return Err(AcrossGamesError::InvalidInput(format!(
                    "opponent strategy in game {g} has {} entries for {} actions",
                    s.len(),
                    game.action_counts()[1]
                )));
            }
        }
        Ok(())
    }

    /// Learner's expected payoff per (game, action).
    fn expected_payoffs(&self, games: &GameSet) -> Vec<Vec<f64>> {
        (0..games.n_games())
            .map(|g| {
                (0..games.n_actions())
                    .map(|a| {
                        self.strategies[g]
                            .iter()
                            .enumerate()
                            .map(|(b, q)| q * games.learner_payoff(g, a, b))
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Disjoint classes of game indices covering `0..n_games`, in canonical form.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Partition {
    classes: Vec<Vec<usize>>,
    class_of: Vec<usize>,
}

impl Partition {
    pub fn new(mut classes: Vec<Vec<usize>>, n_games: usize) -> Result<Self, AcrossGamesError> {
        let mut class_of = vec![usize::MAX; n_games];
        for class in &mut classes {
            if class.is_empty() {
                return Err(AcrossGamesError::InvalidPartition("empty class".into()));
            }
            class.sort_unstable();
        }
        classes.sort_by_key(|c| c[0]);
        for (k, class) in classes.iter().enumerate() {
            for &g in class {
                if g >= n_games {
                    return Err(AcrossGamesError::InvalidPartition(format!(
                        "game {g} out of range for {n_games} games"
                    )));
                }
                if class_of[g] != usize::MAX {
                    return Err(AcrossGamesError::InvalidPartition(format!("game {g} appears twice")));
                }
                class_of[g] = k;
            }
        }
        if let Some(g) = class_of.iter().position(|k| *k == usize::MAX) {
            return Err(AcrossGamesError::InvalidPartition(format!("game {g} is not covered")));
        }
        Ok(Self { classes, class_of })
    }

    /// One class holding every game.
    pub fn coarsest(n_games: usize) -> Self {
        Self::from_labels(&vec![0; n_games])
    }

    /// One class per game.
    pub fn finest(n_games: usize) -> Self {
        Self::from_labels(&(0..n_games).collect::<Vec<_>>())
    }

    /// From a restricted growth string (labels appear in first-use order).
    fn from_labels(labels: &[usize]) -> Self {
        let n_classes = labels.iter().max().map_or(0, |m| m + 1);
        let mut classes = vec![Vec::new(); n_classes];
        for (g, &k) in labels.iter().enumerate() {
            classes[k].push(g);
        }
        Self {
            classes,
            class_of: labels.to_vec(),
        }
    }

    pub fn classes(&self) -> &[Vec<usize>] {
        &self.classes
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn n_games(&self) -> usize {
        self.class_of.len()
    }

    pub fn class_of(&self, game: usize) -> usize {
        self.class_of[game]
    }
}

impl std::fmt::Display for Partition {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self
            .classes
            .iter()
            .map(|c| c.iter().map(usize::to_string).collect::<Vec<_>>().join(" "))
            .collect();
        write!(f, "{{{}}}", parts.join("|"))
    }
}

/// All set partitions of `0..n_games`, coarsest first, finest last.
pub fn enumerate_partitions(n_games: usize) -> Result<Vec<Partition>, AcrossGamesError> {
    if n_games == 0 {
        return Err(AcrossGamesError::InvalidInput("need at least one game".into()));
    }
    if n_games > MAX_GAMES {
        return Err(AcrossGamesError::TooManyGames {
            n: n_games,
            cap: MAX_GAMES,
        });
    }
    // restricted growth strings in lexicographic order
    let mut out = Vec::new();
    let mut labels = vec![0usize; n_games];
    loop {
        out.push(Partition::from_labels(&labels));
        let mut i = n_games - 1;
        loop {
            if i == 0 {
                return Ok(out);
            }
            let prefix_max = labels[..i].iter().copied().max().unwrap_or(0);
            if labels[i] <= prefix_max {
                labels[i] += 1;
                labels[i + 1..].iter_mut().for_each(|l| *l = 0);
                break;
            }
            i -= 1;
        }
    }
}

/// Which partitions the learner may choose from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CandidateSet {
    #[default]
    All,
    CoarsestAndFinest,
}

impl CandidateSet {
    pub fn partitions(self, n_games: usize) -> Result<Vec<Partition>, AcrossGamesError> {
        match self {
            CandidateSet::All => enumerate_partitions(n_games),
            CandidateSet::CoarsestAndFinest if n_games == 1 => Ok(vec![Partition::coarsest(1)]),
            CandidateSet::CoarsestAndFinest => Ok(vec![Partition::coarsest(n_games), Partition::finest(n_games)]),
        }
    }
}

/// Choice probabilities `exp(x / temperature)`, normalized.
pub fn softmax(values: &[f64], temperature: f64) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = values.iter().map(|v| ((v - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

fn check_temperature(t: f64) -> Result<(), AcrossGamesError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(AcrossGamesError::InvalidInput(format!("temperature {t} must be positive")))
    }
}

/// Reinforcement stocks over candidate partitions and their (class, action) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerState {
    partitions: Vec<Partition>,
    propensities: Vec<f64>,
    /// `[partition][class][action]`
    attractions: Vec<Vec<Vec<f64>>>,
    cost_per_class: f64,
}

impl LearnerState {
    pub fn new(
        partitions: Vec<Partition>,
        n_actions: usize,
        cost_per_class: f64,
        initial_stock: f64,
    ) -> Result<Self, AcrossGamesError> {
        if partitions.is_empty() || n_actions == 0 {
            return Err(AcrossGamesError::InvalidInput("need at least one partition and one action".into()));
        }
        if !(cost_per_class >= 0.0 && cost_per_class.is_finite()) {
            return Err(AcrossGamesError::InvalidInput(format!(
                "reasoning cost {cost_per_class} must be nonnegative"
            )));
        }
        if !(initial_stock > 0.0 && initial_stock.is_finite()) {
            return Err(AcrossGamesError::InvalidInput(format!(
                "initial stock {initial_stock} must be positive"
            )));
        }
        let n_games = partitions[0].n_games();
        if partitions.iter().any(|p| p.n_games() != n_games) {
            return Err(AcrossGamesError::InvalidPartition("partitions cover different game sets".into()));
        }
        let attractions = partitions
            .iter()
            .map(|p| vec![vec![initial_stock; n_actions]; p.n_classes()])
            .collect();
        Ok(Self {
            propensities: vec![initial_stock; partitions.len()],
            partitions,
            attractions,
            cost_per_class,
        })
    }

    pub fn partitions(&self) -> &[Partition] {
        &self.partitions
    }

    pub fn propensities(&self) -> &[f64] {
        &self.propensities
    }

    pub fn attractions(&self, partition: usize, class: usize) -> &[f64] {
        &self.attractions[partition][class]
    }

    pub fn n_actions(&self) -> usize {
        self.attractions[0][0].len()
    }

    /// `κ · (classes − 1)`.
    pub fn reasoning_cost(&self, partition: usize) -> f64 {
        self.cost_per_class * (self.partitions[partition].n_classes() - 1) as f64
    }

    pub fn partition_probabilities(&self, temperature: f64) -> Vec<f64> {
        softmax(&self.propensities, temperature)
    }

    pub fn action_probabilities(&self, partition: usize, class: usize, temperature: f64) -> Vec<f64> {
        softmax(&self.attractions[partition][class], temperature)
    }

    /// Index of the sampled partition.
    pub fn choose_partition<R: Rng + ?Sized>(&self, temperature: f64, rng: &mut R) -> usize {
        sample_categorical(rng, &self.partition_probabilities(temperature))
    }

    pub fn choose_action<R: Rng + ?Sized>(
        &self,
        partition: usize,
        class: usize,
        temperature: f64,
        rng: &mut R,
    ) -> usize {
        sample_categorical(rng, &self.action_probabilities(partition, class, temperature))
    }

    /// Reinforces one propensity by `payoff − cost` and one attraction by `payoff`.
    pub fn update(&mut self, partition: usize, class: usize, action: usize, payoff: f64) -> Result<(), AcrossGamesError> {
        if !payoff.is_finite() {
            return Err(AcrossGamesError::InvalidInput(format!("payoff {payoff} is not finite")));
        }
        let cost = self.reasoning_cost(partition);
        let prop = &mut self.propensities[partition];
        *prop = (*prop + payoff - cost).max(STOCK_FLOOR);
        let attr = &mut self.attractions[partition][class][action];
        *attr = (*attr + payoff).max(STOCK_FLOOR);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcrossGamesConfig {
    pub partition_temperature: f64,
    pub action_temperature: f64,
    /// Reasoning cost per class beyond the first.
    pub kappa: f64,
    pub rounds: usize,
    pub initial_stock: f64,
    pub candidates: CandidateSet,
}

impl Default for AcrossGamesConfig {
    fn default() -> Self {
        Self {
            partition_temperature: 50.0,
            action_temperature: 1.0,
            kappa: 0.0,
            rounds: 200_000,
            initial_stock: 1.0,
            candidates: CandidateSet::All,
        }
    }
}

impl AcrossGamesConfig {
    pub fn validate(&self) -> Result<(), AcrossGamesError> {
        check_temperature(self.partition_temperature)?;
        check_temperature(self.action_temperature)?;
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(AcrossGamesError::InvalidInput(format!("kappa {} must be nonnegative", self.kappa)));
        }
        if self.rounds == 0 {
            return Err(AcrossGamesError::InvalidInput("rounds must be at least 1".into()));
        }
        if !(self.initial_stock > 0.0 && self.initial_stock.is_finite()) {
            return Err(AcrossGamesError::InvalidInput(format!(
                "initial stock {} must be positive",
                self.initial_stock
            )));
        }
        Ok(())
    }

    fn initial_state(&self, games: &GameSet) -> Result<LearnerState, AcrossGamesError> {
        let partitions = self.candidates.partitions(games.n_games())?;
        LearnerState::new(partitions, games.n_actions(), self.kappa, self.initial_stock)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundRecord {
    pub game: usize,
    pub partition: usize,
    pub class: usize,
    pub action: usize,
    pub payoff: f64,
}

#[derive(Debug, Clone)]
pub struct AcrossGamesRun {
    pub rounds: Vec<RoundRecord>,
    /// Share of the final rounds spent on each candidate partition.
    pub final_frequencies: Vec<f64>,
    pub state: LearnerState,
}

impl AcrossGamesRun {
    pub fn partitions(&self) -> &[Partition] {
        self.state.partitions()
    }
}

/// Rounds counted in the final-frequency window.
pub fn final_window(rounds: usize) -> usize {
    ((rounds as f64 * FINAL_SHARE).ceil() as usize).clamp(1, rounds.max(1))
}

pub fn run_across_games(
    games: &GameSet,
    opponents: &OpponentModel,
    config: &AcrossGamesConfig,
    seed: u64,
) -> Result<AcrossGamesRun, AcrossGamesError> {
    config.validate()?;
    opponents.check_against(games)?;
    let mut state = config.initial_state(games)?;
    let mut draw_rng = rng::stream(seed, "game-draw");
    let mut partition_rng = rng::stream(seed, "partition-choice");
    let mut action_rng = rng::stream(seed, "action-choice");
    let mut opponent_rng = rng::stream(seed, "opponent");
    let mut rounds = Vec::with_capacity(config.rounds);
    for _ in 0..config.rounds {
        let game = sample_categorical(&mut draw_rng, &games.draw_weights);
        let partition = state.choose_partition(config.partition_temperature, &mut partition_rng);
        let class = state.partitions[partition].class_of(game);
        let action = state.choose_action(partition, class, config.action_temperature, &mut action_rng);
        let opponent_action = sample_categorical(&mut opponent_rng, opponents.strategy(game));
        let payoff = games.learner_payoff(game, action, opponent_action);
        state.update(partition, class, action, payoff)?;
        rounds.push(RoundRecord {
            game,
            partition,
            class,
            action,
            payoff,
        });
    }
    let window = final_window(config.rounds);
    let mut final_frequencies = vec![0.0; state.partitions.len()];
    for r in &rounds[config.rounds - window..] {
        final_frequencies[r.partition] += 1.0;
    }
    final_frequencies.iter_mut().for_each(|f| *f /= window as f64);
    Ok(AcrossGamesRun {
        rounds,
        final_frequencies,
        state,
    })
}

/// Deterministic trajectory of the expected stocks.
#[derive(Debug, Clone)]
pub struct OdeTrajectory {
    /// Sample times, ending at the horizon.
    pub times: Vec<f64>,
    /// Partition propensities at each sample time.
    pub propensities: Vec<Vec<f64>>,
    pub final_state: LearnerState,
    pub partition_temperature: f64,
    pub action_temperature: f64,
}

impl OdeTrajectory {
    /// Partition choice probabilities at the horizon.
    pub fn final_partition_probabilities(&self) -> Vec<f64> {
        self.final_state.partition_probabilities(self.partition_temperature)
    }
}

struct ExpectedField {
    /// `[game][action]` expected learner payoff.
    payoffs: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl ExpectedField {
    fn step(&self, state: &mut LearnerState, config: &AcrossGamesConfig, h: f64) {
        let sigma_p = state.partition_probabilities(config.partition_temperature);
        let mut d_prop = vec![0.0; state.partitions.len()];
        let mut d_attr = state.attractions.clone();
        for (p, partition) in state.partitions.iter().enumerate() {
            let mut expected = 0.0;
            for (c, class) in partition.classes().iter().enumerate() {
                let sigma_a = softmax(&state.attractions[p][c], config.action_temperature);
                for (a, sa) in sigma_a.iter().enumerate() {
                    // weighted payoff of action a over the games in this class
                    let class_payoff: f64 = class.iter().map(|&g| self.weights[g] * self.payoffs[g][a]).sum();
                    expected += sa * class_payoff;
                    d_attr[p][c][a] = sigma_p[p] * sa * class_payoff;
                }
            }
            d_prop[p] = sigma_p[p] * (expected - state.reasoning_cost(p));
        }
        for (x, dx) in state.propensities.iter_mut().zip(&d_prop) {
            *x = (*x + h * dx).max(STOCK_FLOOR);
        }
        for (xs, dxs) in state.attractions.iter_mut().flatten().zip(d_attr.iter().flatten()) {
            for (x, dx) in xs.iter_mut().zip(dxs) {
                *x = (*x + h * dx).max(STOCK_FLOOR);
            }
        }
    }
}

/// Explicit Euler integration of the expected motion up to `horizon` rounds.
///
/// Time is measured in rounds, so the endpoint is comparable with a
/// stochastic run of `horizon` rounds. The last step is shortened to land
/// on the horizon exactly.
pub fn ode_approximation(
    games: &GameSet,
    opponents: &OpponentModel,
    config: &AcrossGamesConfig,
    horizon: f64,
    step: f64,
) -> Result<OdeTrajectory, AcrossGamesError> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(AcrossGamesError::InvalidInput(format!("step {step} must be positive")));
    }
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(AcrossGamesError::InvalidInput(format!("horizon {horizon} must be nonnegative")));
    }
    check_temperature(config.partition_temperature)?;
    check_temperature(config.action_temperature)?;
    opponents.check_against(games)?;
    let mut state = config.initial_state(games)?;
    let field = ExpectedField {
        payoffs: opponents.expected_payoffs(games),
        weights: games.draw_weights.clone(),
    };
    let n_steps = (horizon / step).ceil() as usize;
    let sample_every = n_steps.div_ceil(ODE_SAMPLES).max(1);
    let mut times = vec![0.0];
    let mut propensities = vec![state.propensities.clone()];
    for k in 0..n_steps {
        let h = if k + 1 == n_steps { horizon - k as f64 * step } else { step };
        field.step(&mut state, config, h);
        if (k + 1) % sample_every == 0 || k + 1 == n_steps {
            times.push(if k + 1 == n_steps { horizon } else { (k + 1) as f64 * step });
            propensities.push(state.propensities.clone());
        }
    }
    Ok(OdeTrajectory {
        times,
        propensities,
        final_state: state,
        partition_temperature: config.partition_temperature,
        action_temperature: config.action_temperature,
    })
}
