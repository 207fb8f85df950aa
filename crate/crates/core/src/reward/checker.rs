//! Brute-force check that a shaping term leaves the order of policies intact.
//!
//! Every deterministic stationary policy of a small MDP is evaluated exactly
//! by solving its Bellman linear system, once under the original reward and
//! once under the shaped reward. The two value orderings are then compared,
//! per start state and for the mean over start states.
//!
//! Look-back shaping depends on the previous state-action pair, so it is
//! evaluated on the chain over `(previous state, state)` pairs rather than by
//! any closed form.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance for treating two policy values as tied.
pub const VALUE_TOLERANCE: f64 = 1e-9;

const MAX_STATES: usize = 8;
const MAX_ACTIONS: usize = 4;

/// Shaping term attached to a [`SmallMdp`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Potential {
    /// `F(s, a, s') = gamma * phi(s') - phi(s)`.
    State(Vec<f64>),
    /// Look-back advice: `F = gamma * phi(s, a) - phi(s_prev, a_prev)`.
    StateAction(Vec<Vec<f64>>),
    /// An arbitrary additive term `F(s, a)` that need not come from any
    /// potential.
    Arbitrary { arbitrary: Vec<Vec<f64>> },
}

impl Potential {
    pub fn mode(&self) -> &'static str {
        match self {
            Potential::State(_) => "state-potential",
            Potential::StateAction(_) => "state-action-potential",
            Potential::Arbitrary { .. } => "arbitrary",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmallMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// `transitions[s][a][s']`.
    pub transitions: Vec<Vec<Vec<f64>>>,
    /// `rewards[s][a]`.
    pub rewards: Vec<Vec<f64>>,
    pub gamma: f64,
    pub potential: Potential,
    /// Potential of the pair preceding the first step (look-back mode).
    #[serde(default)]
    pub initial_potential: f64,
}

impl SmallMdp {
    pub fn validate(&self) -> Result<()> {
        let (n, m) = (self.n_states, self.n_actions);
        if n == 0 || n > MAX_STATES || m == 0 || m > MAX_ACTIONS {
            return Err(Error::InvalidMdp(format!(
                "{n} states x {m} actions outside 1..={MAX_STATES} x 1..={MAX_ACTIONS}"
            )));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidMdp(format!(
                "gamma {} outside (0, 1)",
                self.gamma
            )));
        }
        if self.transitions.len() != n || self.rewards.len() != n {
            return Err(Error::InvalidMdp(
                "table sizes disagree with n_states".into(),
            ));
        }
        for s in 0..n {
            if self.transitions[s].len() != m || self.rewards[s].len() != m {
                return Err(Error::InvalidMdp(format!(
                    "state {s}: tables disagree with n_actions"
                )));
            }
            for a in 0..m {
                let row = &self.transitions[s][a];
                if row.len() != n {
                    return Err(Error::InvalidMdp(format!(
                        "transition row ({s},{a}) has wrong length"
                    )));
                }
                let sum: f64 = row.iter().sum();
                if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidMdp(format!(
                        "transition row ({s},{a}) is not a distribution (sum {sum})"
                    )));
                }
            }
        }
        let table_ok = |t: &Vec<Vec<f64>>| t.len() == n && t.iter().all(|r| r.len() == m);
        let ok = match &self.potential {
            Potential::State(phi) => phi.len() == n,
            Potential::StateAction(phi) => table_ok(phi),
            Potential::Arbitrary { arbitrary } => table_ok(arbitrary),
        };
        if !ok {
            return Err(Error::InvalidMdp(
                "shaping table has the wrong shape".into(),
            ));
        }
        Ok(())
    }

    /// Random MDP with dense random transitions, rewards in [-1, 1] and a
    /// random potential in [-5, 5] of the requested kind.
    pub fn random(
        rng: &mut impl Rng,
        n_states: usize,
        n_actions: usize,
        gamma: f64,
        state_action: bool,
    ) -> Self {
        let transitions = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| {
                        let raw: Vec<f64> =
                            (0..n_states).map(|_| rng.random::<f64>().powi(2)).collect();
                        let total: f64 = raw.iter().sum();
                        raw.iter().map(|p| p / total).collect()
                    })
                    .collect()
            })
            .collect();
        let rewards = (0..n_states)
            .map(|_| {
                (0..n_actions)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect()
            })
            .collect();
        let potential = if state_action {
            Potential::StateAction(
                (0..n_states)
                    .map(|_| {
                        (0..n_actions)
                            .map(|_| rng.random_range(-5.0..5.0))
                            .collect()
                    })
                    .collect(),
            )
        } else {
            Potential::State((0..n_states).map(|_| rng.random_range(-5.0..5.0)).collect())
        };
        Self {
            n_states,
            n_actions,
            transitions,
            rewards,
            gamma,
            potential,
            initial_potential: if state_action {
                rng.random_range(-5.0..5.0)
            } else {
                0.0
            },
        }
    }

    /// Shaping that cancels the reward (`F = -R`), so every policy ties.
    pub fn with_cancelling_term(mut self) -> Self {
        self.potential = Potential::Arbitrary {
            arbitrary: self
                .rewards
                .iter()
                .map(|r| r.iter().map(|x| -x).collect())
                .collect(),
        };
        self
    }

    pub fn num_policies(&self) -> usize {
        self.n_actions.pow(self.n_states as u32)
    }

    fn policy(&self, index: usize) -> Vec<usize> {
        let mut rest = index;
        (0..self.n_states)
            .map(|_| {
                let a = rest % self.n_actions;
                rest /= self.n_actions;
                a
            })
            .collect()
    }

    /// Exact discounted values of `policy` from each start state, with the
    /// reward `R(s, pi(s))` plus the expected per-step term `extra`.
    fn policy_values(
        &self,
        gamma: f64,
        policy: &[usize],
        extra: impl Fn(usize, usize) -> f64,
    ) -> Vec<f64> {
        let n = self.n_states;
        let mut a = vec![vec![0.0; n]; n];
        let mut b = vec![0.0; n];
        for s in 0..n {
            let act = policy[s];
            a[s][s] += 1.0;
            for (t, p) in self.transitions[s][act].iter().enumerate() {
                a[s][t] -= gamma * p;
            }
            b[s] = self.rewards[s][act] + extra(s, act);
        }
        solve(a, b)
    }

    fn shaped_values(&self, potential: &Potential, gamma: f64, policy: &[usize]) -> Vec<f64> {
        match potential {
            Potential::State(phi) => self.policy_values(gamma, policy, |s, a| {
                self.transitions[s][a]
                    .iter()
                    .zip(phi)
                    .map(|(p, phi_next)| p * (gamma * phi_next - phi[s]))
                    .sum()
            }),
            Potential::Arbitrary { arbitrary } => {
                self.policy_values(gamma, policy, |s, a| arbitrary[s][a])
            }
            Potential::StateAction(phi) => self.lookback_values(phi, gamma, policy),
        }
    }

    /// Values on the pair chain. Index `p * n + s` holds "previous state p,
    /// current state s"; `p = n` marks the first step.
    fn lookback_values(&self, phi: &[Vec<f64>], gamma: f64, policy: &[usize]) -> Vec<f64> {
        let n = self.n_states;
        let dim = (n + 1) * n;
        let prev_potential = |p: usize| {
            if p == n {
                self.initial_potential
            } else {
                phi[p][policy[p]]
            }
        };
        let mut a = vec![vec![0.0; dim]; dim];
        let mut b = vec![0.0; dim];
        for p in 0..=n {
            for s in 0..n {
                let row = p * n + s;
                let act = policy[s];
                a[row][row] += 1.0;
                for (t, prob) in self.transitions[s][act].iter().enumerate() {
                    a[row][s * n + t] -= gamma * prob;
                }
                b[row] = self.rewards[s][act] + gamma * phi[s][act] - prev_potential(p);
            }
        }
        let values = solve(a, b);
        values[n * n..].to_vec()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderViolation {
    /// `None` for the order of mean values over start states.
    pub start_state: Option<usize>,
    pub policy_a: Vec<usize>,
    pub policy_b: Vec<usize>,
    pub unshaped: (f64, f64),
    pub shaped: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderReport {
    pub mode: String,
    pub n_policies: usize,
    pub preserved: bool,
    /// One witness per violated ordering view.
    pub violations: Vec<OrderViolation>,
}

/// Compares the policy order under `R` and `R + F` for every start state and
/// for the mean over start states.
pub fn check_shaping_safety(
    mdp: &SmallMdp,
    potential: &Potential,
    gamma: f64,
) -> Result<OrderReport> {
    let mut mdp = mdp.clone();
    mdp.potential = potential.clone();
    mdp.gamma = gamma;
    mdp.validate()?;

    let n_policies = mdp.num_policies();
    let policies: Vec<Vec<usize>> = (0..n_policies).map(|i| mdp.policy(i)).collect();
    let unshaped: Vec<Vec<f64>> = policies
        .iter()
        .map(|pi| mdp.policy_values(gamma, pi, |_, _| 0.0))
        .collect();
    let shaped: Vec<Vec<f64>> = policies
        .iter()
        .map(|pi| mdp.shaped_values(potential, gamma, pi))
        .collect();

    let mut violations = Vec::new();
    let views = (0..mdp.n_states).map(Some).chain(std::iter::once(None));
    for view in views {
        let pick = |v: &Vec<f64>| match view {
            Some(s) => v[s],
            None => v.iter().sum::<f64>() / v.len() as f64,
        };
        let u: Vec<f64> = unshaped.iter().map(pick).collect();
        let v: Vec<f64> = shaped.iter().map(pick).collect();
        if let Some((i, j)) = order_witness(&u, &v) {
            violations.push(OrderViolation {
                start_state: view,
                policy_a: policies[i].clone(),
                policy_b: policies[j].clone(),
                unshaped: (u[i], u[j]),
                shaped: (v[i], v[j]),
            });
        }
    }
    Ok(OrderReport {
        mode: potential.mode().to_string(),
        n_policies,
        preserved: violations.is_empty(),
        violations,
    })
}

/// Returns a pair whose relative order (with ties at [`VALUE_TOLERANCE`])
/// differs between `u` and `v`, if any.
fn order_witness(u: &[f64], v: &[f64]) -> Option<(usize, usize)> {
    let mut order: Vec<usize> = (0..u.len()).collect();
    order.sort_by(|&a, &b| u[a].total_cmp(&u[b]).then(a.cmp(&b)));

    // tie classes of u, in increasing order
    let mut classes: Vec<Vec<usize>> = Vec::new();
    for &i in &order {
        match classes.last_mut() {
            Some(class) if u[i] - u[*class.last().expect("nonempty")] <= VALUE_TOLERANCE => {
                class.push(i)
            }
            _ => classes.push(vec![i]),
        }
    }

    let argmin = |c: &[usize]| {
        *c.iter()
            .min_by(|&&a, &&b| v[a].total_cmp(&v[b]))
            .expect("nonempty")
    };
    let argmax = |c: &[usize]| {
        *c.iter()
            .max_by(|&&a, &&b| v[a].total_cmp(&v[b]))
            .expect("nonempty")
    };

    let mut best_below: Option<usize> = None;
    for class in &classes {
        let (lo, hi) = (argmin(class), argmax(class));
        if v[hi] - v[lo] > VALUE_TOLERANCE {
            return Some((lo, hi));
        }
        if let Some(below) = best_below {
            if v[lo] - v[below] <= VALUE_TOLERANCE {
                return Some((below, lo));
            }
        }
        if best_below.is_none_or(|b| v[hi] > v[b]) {
            best_below = Some(hi);
        }
    }
    None
}

/// Gaussian elimination with partial pivoting. The systems here are
/// `I - gamma P` and always nonsingular.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("nonempty");
        a.swap(col, pivot);
        b.swap(col, pivot);
        let diag = a[col][col];
        for row in col + 1..n {
            let factor = a[row][col] / diag;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    x
}
