//! One-shot matrix games and the two pure-strategy equilibrium predicates.

use super::QLearningError;

/// An `n`-agent game in normal form.
///
/// Payoff tensors are stored row-major over the joint action, with agent 0's
/// action as the most significant index.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixGame {
    action_counts: Vec<usize>,
    payoffs: Vec<Vec<f64>>,
}

impl MatrixGame {
    pub fn new(action_counts: Vec<usize>, payoffs: Vec<Vec<f64>>) -> Result<Self, QLearningError> {
        if action_counts.is_empty() || action_counts.contains(&0) {
            return Err(QLearningError::InvalidGame(
                "need at least one agent and one action per agent".into(),
            ));
        }
        let n_joint = action_counts
            .iter()
            .try_fold(1usize, |acc, n| acc.checked_mul(*n))
            .ok_or_else(|| QLearningError::InvalidGame("joint action space overflows".into()))?;
        if payoffs.len() != action_counts.len() {
            return Err(QLearningError::InvalidGame(format!(
                "{} payoff tensors for {} agents",
                payoffs.len(),
                action_counts.len()
            )));
        }
        for (i, tensor) in payoffs.iter().enumerate() {
            if tensor.len() != n_joint {
                return Err(QLearningError::InvalidGame(format!(
                    "agent {i} payoff tensor has {} entries, expected {n_joint}",
                    tensor.len()
                )));
            }
            if tensor.iter().any(|x| !x.is_finite()) {
                return Err(QLearningError::InvalidGame(format!(
                    "agent {i} has a non-finite payoff"
                )));
            }
        }
        Ok(Self {
            action_counts,
            payoffs,
        })
    }

    /// Bimatrix game: `row[a][b]` pays agent 0, `col[a][b]` pays agent 1.
    pub fn bimatrix(row: Vec<Vec<f64>>, col: Vec<Vec<f64>>) -> Result<Self, QLearningError> {
        let n_a = row.len();
        let n_b = row.first().map_or(0, Vec::len);
        let rect = |m: &Vec<Vec<f64>>| m.len() == n_a && m.iter().all(|r| r.len() == n_b);
        if !rect(&row) || !rect(&col) {
            return Err(QLearningError::InvalidGame(
                "bimatrix payoffs must be rectangular and of equal shape".into(),
            ));
        }
        Self::new(
            vec![n_a, n_b],
            vec![row.into_iter().flatten().collect(), col.into_iter().flatten().collect()],
        )
    }

    pub fn n_agents(&self) -> usize {
        self.action_counts.len()
    }

    pub fn action_counts(&self) -> &[usize] {
        &self.action_counts
    }

    pub fn n_joint(&self) -> usize {
        self.payoffs[0].len()
    }

    fn check_joint(&self, joint: &[usize]) -> Result<(), QLearningError> {
        if joint.len() != self.n_agents()
            || joint.iter().zip(&self.action_counts).any(|(a, n)| a >= n)
        {
            return Err(QLearningError::IndexOutOfRange(format!(
                "joint action {joint:?} invalid for action counts {:?}",
                self.action_counts
            )));
        }
        Ok(())
    }

    /// Flat index of a joint action.
    pub fn joint_index(&self, joint: &[usize]) -> Result<usize, QLearningError> {
        self.check_joint(joint)?;
        Ok(joint
            .iter()
            .zip(&self.action_counts)
            .fold(0, |idx, (a, n)| idx * n + a))
    }

    /// Joint action at a flat index.
    pub fn joint_at(&self, mut index: usize) -> Vec<usize> {
        let mut joint = vec![0; self.n_agents()];
        for (slot, n) in joint.iter_mut().zip(&self.action_counts).rev() {
            *slot = index % n;
            index /= n;
        }
        joint
    }

    pub fn payoff(&self, agent: usize, joint: &[usize]) -> Result<f64, QLearningError> {
        if agent >= self.n_agents() {
            return Err(QLearningError::IndexOutOfRange(format!("agent {agent}")));
        }
        Ok(self.payoffs[agent][self.joint_index(joint)?])
    }

    /// Payoff tensor of `agent`, flat over joint actions.
    pub fn payoff_tensor(&self, agent: usize) -> &[f64] {
        &self.payoffs[agent]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdversarialCheck {
    pub per_agent: Vec<bool>,
    pub overall: bool,
}

/// Agent `i` passes iff its payoff at `joint` is no larger than at any joint
/// action that keeps `i`'s own action and varies the others.
pub fn check_adversarial_equilibrium(
    game: &MatrixGame,
    joint: &[usize],
) -> Result<AdversarialCheck, QLearningError> {
    let here = game.joint_index(joint)?;
    let per_agent: Vec<bool> = (0..game.n_agents())
        .map(|i| {
            let tensor = game.payoff_tensor(i);
            (0..game.n_joint())
                .filter(|k| game.joint_at(*k)[i] == joint[i])
                .all(|k| tensor[here] <= tensor[k])
        })
        .collect();
    let overall = per_agent.iter().all(|ok| *ok);
    Ok(AdversarialCheck { per_agent, overall })
}

/// True iff every agent's payoff at `joint` equals its global maximum.
pub fn check_coordination_equilibrium(
    game: &MatrixGame,
    joint: &[usize],
) -> Result<bool, QLearningError> {
    let here = game.joint_index(joint)?;
    Ok((0..game.n_agents()).all(|i| {
        let tensor = game.payoff_tensor(i);
        let best = tensor.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        tensor[here] == best
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matching_pennies() -> MatrixGame {
        MatrixGame::bimatrix(
            vec![vec![1.0, -1.0], vec![-1.0, 1.0]],
            vec![vec![-1.0, 1.0], vec![1.0, -1.0]],
        )
        .unwrap()
    }

    #[test]
    fn joint_indexing_round_trips() {
        let game = MatrixGame::new(vec![2, 3, 4], vec![vec![0.0; 24]; 3]).unwrap();
        for k in 0..24 {
            assert_eq!(game.joint_index(&game.joint_at(k)).unwrap(), k);
        }
        assert!(game.joint_index(&[0, 3, 0]).is_err());
        assert!(game.joint_index(&[0, 0]).is_err());
    }

    #[test]
    fn single_agent_games() {
        let game = MatrixGame::new(vec![3], vec![vec![1.0, 5.0, 5.0]]).unwrap();
        for a in 0..3 {
            assert!(check_adversarial_equilibrium(&game, &[a]).unwrap().overall);
        }
        let coordinated: Vec<bool> = (0..3)
            .map(|a| check_coordination_equilibrium(&game, &[a]).unwrap())
            .collect();
        assert_eq!(coordinated, vec![false, true, true]);
    }

    #[test]
    fn constant_game_is_adversarial_everywhere() {
        let game = MatrixGame::bimatrix(vec![vec![2.0; 3]; 2], vec![vec![2.0; 3]; 2]).unwrap();
        for k in 0..game.n_joint() {
            let check = check_adversarial_equilibrium(&game, &game.joint_at(k)).unwrap();
            assert_eq!(check.per_agent, vec![true, true]);
        }
    }

    #[test]
    fn matching_pennies_has_neither() {
        let game = matching_pennies();
        for k in 0..4 {
            let joint = game.joint_at(k);
            assert!(!check_adversarial_equilibrium(&game, &joint).unwrap().overall);
            assert!(!check_coordination_equilibrium(&game, &joint).unwrap());
        }
    }

    #[test]
    fn identical_interest_unique_max() {
        let payoff = vec![vec![1.0, 0.0], vec![0.0, 3.0]];
        let game = MatrixGame::bimatrix(payoff.clone(), payoff).unwrap();
        let hits: Vec<usize> = (0..4)
            .filter(|k| check_coordination_equilibrium(&game, &game.joint_at(*k)).unwrap())
            .collect();
        assert_eq!(hits, vec![3]);
    }

    #[test]
    fn rejects_malformed_games() {
        assert!(MatrixGame::new(vec![2, 0], vec![vec![], vec![]]).is_err());
        assert!(MatrixGame::new(vec![2], vec![vec![1.0]]).is_err());
        assert!(MatrixGame::new(vec![2], vec![vec![1.0, f64::INFINITY]]).is_err());
        assert!(MatrixGame::bimatrix(vec![vec![1.0, 2.0]], vec![vec![1.0]]).is_err());
    }

    /// Every joint action, enumerated by nested recursion rather than the flat index.
    fn all_profiles(counts: &[usize]) -> Vec<Vec<usize>> {
        if counts.is_empty() {
            return vec![vec![]];
        }
        let tails = all_profiles(&counts[1..]);
        (0..counts[0])
            .flat_map(|a| {
                tails.iter().map(move |t| {
                    let mut p = vec![a];
                    p.extend_from_slice(t);
                    p
                })
            })
            .collect()
    }

    fn game_strategy() -> impl Strategy<Value = MatrixGame> {
        proptest::collection::vec(1usize..=4, 1..=3).prop_flat_map(|counts| {
            let n_joint: usize = counts.iter().product();
            let n_agents = counts.len();
            // small integer payoffs so that ties occur
            proptest::collection::vec(proptest::collection::vec(-2i32..=2, n_joint), n_agents)
                .prop_map(move |tensors| {
                    let payoffs = tensors
                        .into_iter()
                        .map(|t| t.into_iter().map(f64::from).collect())
                        .collect();
                    MatrixGame::new(counts.clone(), payoffs).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn predicates_match_brute_force(game in game_strategy()) {
            let profiles = all_profiles(game.action_counts());
            for joint in &profiles {
                let mut expect_adv = Vec::new();
                let mut expect_coord = true;
                for i in 0..game.n_agents() {
                    let here = game.payoff(i, joint).unwrap();
                    let others_ok = profiles
                        .iter()
                        .filter(|p| p[i] == joint[i])
                        .all(|p| here <= game.payoff(i, p).unwrap());
                    expect_adv.push(others_ok);
                    let best = profiles
                        .iter()
                        .map(|p| game.payoff(i, p).unwrap())
                        .fold(f64::NEG_INFINITY, f64::max);
                    expect_coord &= here == best;
                }
                let got = check_adversarial_equilibrium(&game, joint).unwrap();
                prop_assert_eq!(&got.per_agent, &expect_adv);
                prop_assert_eq!(got.overall, expect_adv.iter().all(|b| *b));
                prop_assert_eq!(check_coordination_equilibrium(&game, joint).unwrap(), expect_coord);
            }
        }
    }
}
