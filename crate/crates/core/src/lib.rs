//! Decision procedures for market games on synthetic environments.
//!
//! * [`mdp`]: tabular MDPs solved by value and policy iteration.
//! * [`qlearning`]: Watkins Q-learning and pure-strategy equilibrium checks.
//! * [`kelly`]: Kelly fractions, history estimates and bankroll simulation.
//! * [`mmm`]: the withdrawal-price profit functional, its fixed point and the
//!   adaptive average-profit strategy.
//! * [`across_games`]: reinforcement over partitions of a game set, with a
//!   mean-field ODE companion.
//! * [`environments`]: bets, price processes, MDP episodes, costs.
//! * [`experiment`]: config-driven runs emitting CSV records.

pub mod across_games;
pub mod environments;
pub mod experiment;
pub mod kelly;
pub mod mdp;
pub mod mmm;
pub mod qlearning;
pub mod quadrature;
pub mod rng;
