//! Per-kind experiment runners.

use std::collections::BTreeMap;

use crate::across_games::{self, AcrossGamesError};
use crate::environments::{mdp_as_environment, BetOutcome, BiasedBetEnv, EnvError};
use crate::kelly::{self, FractionRule, KellyError};
use crate::mdp::{self, MdpError, Policy, TabularMdp};
use crate::mmm::{self, MmmConfig, MmmError, WithdrawalStrategy};
use crate::qlearning::{self, QLearningError};
use crate::rng;

use super::config::{
    AcrossGamesParams, ExperimentConfig, KellyParams, KindParams, MdpModel, MdpParams, MmmParams, MmmStrategy,
    QLearningParams,
};

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Mdp(#[from] MdpError),
    #[error(transparent)]
    QLearning(#[from] QLearningError),
    #[error(transparent)]
    Kelly(#[from] KellyError),
    #[error(transparent)]
    Mmm(#[from] MmmError),
    #[error(transparent)]
    AcrossGames(#[from] AcrossGamesError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Output of one seed: `(step, metrics)` rows and named final metrics.
#[derive(Debug, Clone, Default)]
pub struct SeedOutput {
    pub rows: Vec<(u64, Vec<f64>)>,
    pub finals: Vec<(String, f64)>,
}

/// Metric columns written for each kind.
pub fn metric_columns(params: &KindParams) -> Vec<&'static str> {
    match params {
        KindParams::MdpSolve(_) => vec!["value_vi", "value_pi", "greedy_action", "value_gap"],
        KindParams::QLearning { .. } => vec!["episode_return", "q_error", "epsilon"],
        KindParams::Kelly(_) => vec!["log_capital", "fraction", "log_growth_rate", "won"],
        KindParams::Mmm(_) => vec![
            "buy_price",
            "sell_price",
            "profit",
            "net_profit",
            "duration",
            "withdrawal_price",
            "profit_per_round",
        ],
        KindParams::AcrossGames(_) => vec![
            "game",
            "partition",
            "class",
            "action",
            "payoff",
            "coarsest_share",
            "finest_share",
        ],
    }
}

/// Seed-independent reference values for the summary.
pub fn reference_values(config: &ExperimentConfig) -> Result<(BTreeMap<String, f64>, BTreeMap<String, String>), RunError> {
    let mut values = BTreeMap::new();
    let mut labels = BTreeMap::new();
    match &config.params {
        KindParams::MdpSolve(_) | KindParams::QLearning { .. } => {}
        KindParams::Kelly(k) => {
            let theta = kelly::kelly_fraction(k.win_probability, k.payout_ratio)?;
            values.insert("kelly_fraction".into(), theta);
            let best = theta.clamp(0.0, k.bankroll.fraction_cap);
            values.insert(
                "growth_at_kelly".into(),
                kelly::expected_log_growth(k.win_probability, k.payout_ratio, best),
            );
            if let FractionRule::Fixed(f) = k.rule {
                values.insert(
                    "expected_growth_rate".into(),
                    kelly::expected_log_growth(k.win_probability, k.payout_ratio, f),
                );
            }
        }
        KindParams::Mmm(m) => {
            let a_max = mmm::fixed_point_withdrawal(&m.density, 1e-10)?.value();
            values.insert("a_max".into(), a_max);
            let a = match m.strategy {
                MmmStrategy::Fixed(a) => Some(a),
                MmmStrategy::Optimal => Some(a_max),
                MmmStrategy::Adaptive => None,
            };
            if let Some(a) = a.filter(|a| a.is_finite()) {
                values.insert("profit_rate_at_withdrawal".into(), mmm::profit_rate(&m.density, a)?);
            }
        }
        KindParams::AcrossGames(p) => {
            let partitions = p.learner.candidates.partitions(p.games.n_games())?;
            let width = partition_width(partitions.len());
            for (i, part) in partitions.iter().enumerate() {
                labels.insert(format!("partition.p{i:0width$}"), part.to_string());
            }
            if let Some(step) = p.ode_step {
                let traj =
                    across_games::ode_approximation(&p.games, &p.opponents, &p.learner, p.learner.rounds as f64, step)?;
                for (i, prob) in traj.final_partition_probabilities().iter().enumerate() {
                    values.insert(format!("ode_probability.p{i:0width$}"), *prob);
                }
            }
        }
    }
    Ok((values, labels))
}

fn partition_width(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len()
}

fn record_step(step: u64, last: u64, every: u64) -> bool {
    step % every == 0 || step == last
}

pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedOutput, RunError> {
    match &config.params {
        KindParams::MdpSolve(p) => run_mdp(p, seed),
        KindParams::QLearning { mdp, learner } => run_qlearning(mdp, learner, config.record_every, seed),
        KindParams::Kelly(p) => run_kelly(p, config.record_every, seed),
        KindParams::Mmm(p) => run_mmm(p, config.record_every, seed),
        KindParams::AcrossGames(p) => run_across_games(p, config.record_every, seed),
    }
}

fn build_mdp(params: &MdpParams, seed: u64) -> Result<TabularMdp, MdpError> {
    match &params.model {
        MdpModel::Explicit(m) => Ok(m.clone()),
        MdpModel::Random {
            states,
            actions,
            discount,
        } => TabularMdp::random(&mut rng::stream(seed, "mdp-model"), *states, *actions, *discount),
    }
}

fn run_mdp(params: &MdpParams, seed: u64) -> Result<SeedOutput, RunError> {
    let model = build_mdp(params, seed)?;
    let (v_vi, _) = mdp::value_iteration(&model, params.tolerance)?;
    let pi = mdp::policy_iteration_with_stats(&model);
    let sets_vi = mdp::argmax_sets(&model, v_vi.values());
    let sets_pi = mdp::argmax_sets(&model, pi.values.values());
    let actions = match &pi.policy {
        Policy::Deterministic(a) => a.clone(),
        Policy::Stochastic(_) => unreachable!("policy iteration returns a deterministic policy"),
    };
    let mut out = SeedOutput::default();
    for s in 0..model.n_states() {
        let (a, b) = (v_vi.values()[s], pi.values.values()[s]);
        out.rows.push((s as u64, vec![a, b, actions[s] as f64, (a - b).abs()]));
    }
    out.finals = vec![
        ("max_value_gap".into(), v_vi.sup_distance(&pi.values)),
        ("argmax_sets_agree".into(), if sets_vi == sets_pi { 1.0 } else { 0.0 }),
        ("improvement_steps".into(), pi.improvements as f64),
    ];
    Ok(out)
}

fn run_qlearning(mdp_params: &MdpParams, params: &QLearningParams, every: u64, seed: u64) -> Result<SeedOutput, RunError> {
    let model = build_mdp(mdp_params, seed)?;
    let (v_star, _) = mdp::value_iteration(&model, 1e-12)?;
    let q_star = model.q_values(v_star.values());
    let sets = mdp::argmax_sets(&model, v_star.values());
    let mut env = mdp_as_environment(model, params.horizon, seed)?;
    let last = params.learner.episodes as u64;
    let mut errors = Vec::new();
    let run = qlearning::run_q_learning_observed(&mut env, &params.learner, seed, |episode, q| {
        let step = episode as u64 + 1;
        if record_step(step, last, every) {
            errors.push((step, q.sup_error(&q_star)));
        }
    })?;
    let mut out = SeedOutput::default();
    for (step, err) in errors {
        let episode = (step - 1) as usize;
        out.rows.push((
            step,
            vec![run.returns[episode], err, params.learner.exploration.epsilon(episode)],
        ));
    }
    let greedy = match &run.policy {
        Policy::Deterministic(a) => a.clone(),
        Policy::Stochastic(_) => unreachable!("greedy policies are deterministic"),
    };
    let matched = greedy.iter().zip(&sets).filter(|(a, set)| set.contains(a)).count();
    out.finals = vec![
        ("q_error".into(), run.q.sup_error(&q_star)),
        ("optimal_action_share".into(), matched as f64 / greedy.len() as f64),
        ("steps".into(), run.steps as f64),
    ];
    Ok(out)
}

fn run_kelly(params: &KellyParams, every: u64, seed: u64) -> Result<SeedOutput, RunError> {
    let mut env = BiasedBetEnv::new(params.win_probability, params.payout_ratio, seed)?;
    let run = kelly::simulate_bankroll(&mut env, &params.rule, params.bets, &params.bankroll)?;
    let last = params.bets as u64;
    let log0 = run.log_capital[0];
    let mut out = SeedOutput::default();
    for k in 1..=params.bets {
        let step = k as u64;
        if record_step(step, last, every) {
            let won = if run.outcomes[k - 1] == BetOutcome::Win { 1.0 } else { 0.0 };
            out.rows.push((
                step,
                vec![run.log_capital[k], run.fractions[k - 1], (run.log_capital[k] - log0) / k as f64, won],
            ));
        }
    }
    let tail = (params.bets / 10).max(1);
    let tail_fraction = run.fractions[params.bets - tail..].iter().sum::<f64>() / tail as f64;
    out.finals = vec![
        ("growth_rate".into(), run.log_growth_rate()),
        ("final_log_capital".into(), run.log_capital[params.bets]),
        ("final_fraction_mean".into(), tail_fraction),
    ];
    Ok(out)
}

fn run_mmm(params: &MmmParams, every: u64, seed: u64) -> Result<SeedOutput, RunError> {
    let strategy = match params.strategy {
        MmmStrategy::Fixed(a) => WithdrawalStrategy::Fixed(a),
        MmmStrategy::Optimal => WithdrawalStrategy::Fixed(mmm::fixed_point_withdrawal(&params.density, 1e-10)?.value()),
        MmmStrategy::Adaptive => WithdrawalStrategy::Adaptive,
    };
    let config = MmmConfig {
        strategy,
        n_rounds: params.rounds,
        sale: params.sale,
        max_cycles: params.max_cycles,
    };
    let mut prices = params.density.price_source(seed);
    let run = mmm::simulate_mmm(&mut prices, &config, seed)?;
    let last = run.cycles.len() as u64;
    let (mut profit, mut rounds, mut net_sum) = (0.0, 0u64, 0.0);
    let mut out = SeedOutput::default();
    for (i, c) in run.cycles.iter().enumerate() {
        let net = c.net_profit(&params.costs, params.traded_value)?;
        profit += c.profit;
        rounds += c.duration();
        net_sum += net;
        let step = i as u64 + 1;
        if record_step(step, last, every) {
            out.rows.push((
                step,
                vec![
                    c.buy_price,
                    c.sell_price,
                    c.profit,
                    net,
                    c.duration() as f64,
                    c.withdrawal_price,
                    profit / rounds as f64,
                ],
            ));
        }
    }
    let n = run.cycles.len().max(1) as f64;
    out.finals = vec![
        ("cycles".into(), run.cycles.len() as f64),
        ("profit_per_round".into(), run.profit_per_round()),
        ("mean_cycle_profit".into(), mmm::mean_cycle_profit(&run.cycles)),
        ("mean_net_profit".into(), net_sum / n),
        ("final_withdrawal".into(), run.final_withdrawal),
    ];
    Ok(out)
}

fn run_across_games(params: &AcrossGamesParams, every: u64, seed: u64) -> Result<SeedOutput, RunError> {
    let run = across_games::run_across_games(&params.games, &params.opponents, &params.learner, seed)?;
    let finest = run.partitions().len() - 1;
    let last = run.rounds.len() as u64;
    let (mut coarse, mut fine, mut since) = (0u64, 0u64, 0u64);
    let mut out = SeedOutput::default();
    for (i, r) in run.rounds.iter().enumerate() {
        since += 1;
        coarse += u64::from(r.partition == 0);
        fine += u64::from(r.partition == finest);
        let step = i as u64 + 1;
        if record_step(step, last, every) {
            out.rows.push((
                step,
                vec![
                    r.game as f64,
                    r.partition as f64,
                    r.class as f64,
                    r.action as f64,
                    r.payoff,
                    coarse as f64 / since as f64,
                    fine as f64 / since as f64,
                ],
            ));
            (coarse, fine, since) = (0, 0, 0);
        }
    }
    let width = partition_width(run.final_frequencies.len());
    out.finals = run
        .final_frequencies
        .iter()
        .enumerate()
        .map(|(i, f)| (format!("final_frequency.p{i:0width$}"), *f))
        .collect();
    Ok(out)
}
