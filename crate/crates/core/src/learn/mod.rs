//! Training: contextual-bandit policy gradient, REINFORCE, supervised
//! learning, DQN and the supervised planner baseline.

pub mod adam;
pub mod dqn;
pub mod pg;
pub mod planner;
pub mod supervised;

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::BoardGeometry;
use crate::error::{Error, Result};
use crate::eval::{stream_seed, SuiteReport, Task};
use crate::lang::Vocabulary;
use crate::policy::{ModelDims, NetShape};
use crate::reward::{RewardParams, RewardSpec};

pub use adam::{Adam, Objective, StepInfo};
pub use dqn::{train_dqn, DqnTrainer, QAgent, QParams, ReplayBuffer, Transition};
pub use pg::{
    accumulate_rollout_gradient, rollout, train_cb_policy_gradient, train_reinforce, Credit,
    PgTrainer, Rollout, StepRecord, Terminal,
};
pub use planner::{train_planner_supervised, PlannerAgent, PlannerParams, PlannerTrainer};
pub use supervised::{train_supervised, SupervisedTrainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Cbpg,
    Supervised,
    Reinforce,
    Dqn,
    Planner,
    Stop,
    Random,
}

impl Algorithm {
    pub const ALL: [Algorithm; 7] = [
        Self::Cbpg,
        Self::Supervised,
        Self::Reinforce,
        Self::Dqn,
        Self::Planner,
        Self::Stop,
        Self::Random,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Cbpg => "cbpg",
            Self::Supervised => "supervised",
            Self::Reinforce => "reinforce",
            Self::Dqn => "dqn",
            Self::Planner => "planner",
            Self::Stop => "stop",
            Self::Random => "random",
        }
    }

    pub fn is_trained(self) -> bool {
        !matches!(self, Self::Stop | Self::Random)
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown algorithm {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub replay_capacity: usize,
    /// Priority exponent of proportional prioritized replay.
    pub priority_alpha: f64,
    /// Importance-sampling exponent.
    pub priority_beta: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: usize,
    pub gamma: f64,
    pub learning_rate: f64,
    /// Environment steps between minibatch updates.
    pub update_every: usize,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            replay_capacity: 2000,
            priority_alpha: 0.6,
            priority_beta: 0.4,
            epsilon_start: 1.0,
            epsilon_end: 0.1,
            epsilon_decay_steps: 100_000,
            gamma: 0.99,
            learning_rate: 0.00025,
            update_every: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadReinit {
    None,
    Direction,
    Block,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearnConfig {
    pub epochs: usize,
    /// Maximum actions per episode `J`.
    pub horizon: usize,
    /// Entropy weight `lambda`.
    pub entropy_weight: f64,
    pub lr_policy_gradient: f64,
    pub lr_supervised: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    /// Number of previous observations `K`.
    pub history: usize,
    pub seed: u64,
    pub reward: RewardParams,
    /// Replace the problem reward by the negative distance to the goal.
    pub distance_reward: bool,
    /// Supervised epochs before policy-gradient training.
    pub init_epochs: usize,
    /// Head drawn afresh after supervised initialization.
    pub reinit_head: HeadReinit,
    /// Fraction of training examples that keep their demonstrations.
    pub demo_fraction: f64,
    /// Rollouts averaged per policy-gradient update.
    pub rollouts_per_update: usize,
    pub dims: ModelDims,
    pub dqn: DqnConfig,
    /// Record elapsed time in the metrics log (makes it nondeterministic).
    pub record_wall_time: bool,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Preset::Desk.config()
    }
}

/// Named starting points for a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Small network, longer supervised warm start, heads kept after it.
    Desk,
    /// Full-size network and the published hyperparameters.
    PaperAppendixC,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::PaperAppendixC => "paper-appendix-c",
        }
    }

    pub fn config(self) -> LearnConfig {
        let paper = LearnConfig {
            epochs: 50,
            horizon: 40,
            entropy_weight: 0.1,
            lr_policy_gradient: 0.00025,
            lr_supervised: 0.001,
            clip_norm: 5.0,
            batch_size: 32,
            history: 4,
            seed: 0,
            reward: RewardParams::default(),
            distance_reward: false,
            init_epochs: 2,
            reinit_head: HeadReinit::Direction,
            demo_fraction: 1.0,
            rollouts_per_update: 1,
            dims: ModelDims::paper(),
            dqn: DqnConfig::default(),
            record_wall_time: false,
        };
        match self {
            Self::PaperAppendixC => paper,
            Self::Desk => LearnConfig {
                init_epochs: 25,
                lr_supervised: 0.003,
                reinit_head: HeadReinit::None,
                dims: ModelDims::desk(),
                ..paper
            },
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper-appendix-c" => Ok(Self::PaperAppendixC),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected desk or paper-appendix-c)"
            ))),
        }
    }
}

impl LearnConfig {
    pub fn validate(&self, algorithm: Algorithm) -> Result<()> {
        let fail = |field: &str, msg: &str| Err(Error::Config(format!("{field}: {msg}")));
        if self.horizon == 0 {
            return fail("horizon", "must be at least 1");
        }
        if !(self.entropy_weight >= 0.0) {
            return fail("entropy_weight", "must be nonnegative");
        }
        if !(self.lr_policy_gradient >= 0.0) || !(self.lr_supervised >= 0.0) {
            return fail("learning rate", "must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.demo_fraction) {
            return fail("demo_fraction", "must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1");
        }
        if self.rollouts_per_update == 0 {
            return fail("rollouts_per_update", "must be at least 1");
        }
        let shaped = matches!(
            algorithm,
            Algorithm::Cbpg | Algorithm::Reinforce | Algorithm::Dqn
        );
        if shaped && self.reward.enable_f2 && self.demo_fraction == 0.0 {
            return fail(
                "reward.enable_f2",
                "needs demonstrations but demo_fraction is 0",
            );
        }
        if algorithm == Algorithm::Supervised && self.demo_fraction == 0.0 {
            return fail("demo_fraction", "supervised learning needs demonstrations");
        }
        if algorithm == Algorithm::Dqn {
            let d = &self.dqn;
            if d.replay_capacity < self.batch_size {
                return fail("dqn.replay_capacity", "smaller than the minibatch");
            }
            if !(0.0..=1.0).contains(&d.gamma) || !(d.priority_alpha >= 0.0) || d.update_every == 0
            {
                return fail(
                    "dqn",
                    "gamma must lie in [0, 1], alpha be nonnegative, update_every positive",
                );
            }
        }
        Ok(())
    }

    pub fn net_shape(&self, vocab: &Vocabulary, geometry: &BoardGeometry) -> NetShape {
        NetShape {
            vocab_size: vocab.len(),
            n_blocks: geometry.num_blocks(),
            height: geometry.height(),
            width: geometry.width(),
            history: self.history,
            dims: self.dims.clone(),
        }
    }

    pub fn eval_settings(&self) -> crate::eval::EvalSettings {
        crate::eval::EvalSettings {
            horizon: self.horizon,
            history: self.history,
            seed: self.seed,
        }
    }
}

/// Keeps the demonstrations of `round(fraction * n)` tasks picked by a
/// seeded permutation and drops the rest.
pub fn apply_demo_fraction(tasks: &[Task], fraction: f64, seed: u64) -> Vec<Task> {
    let keep = (fraction * tasks.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(
        seed,
        "demo-fraction",
        0,
    )));
    let mut keep_mask = vec![false; tasks.len()];
    for &i in &order[..keep.min(tasks.len())] {
        keep_mask[i] = true;
    }
    tasks
        .iter()
        .zip(keep_mask)
        .map(|(t, k)| {
            let mut t = t.clone();
            if !k {
                t.demonstration = None;
            }
            t
        })
        .collect()
}

/// Reward definition for one task: `F2` only where a demonstration exists.
pub fn reward_spec(task: &Task, params: RewardParams) -> Result<RewardSpec> {
    let params = RewardParams {
        enable_f2: params.enable_f2 && task.demonstration.is_some(),
        ..params
    };
    RewardSpec::new(task.goal.clone(), task.demonstration.clone(), params)
}

/// Training inputs: the board, training tasks and the tasks evaluated after
/// every epoch for the metrics log (the training tasks when empty).
#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub geometry: &'a BoardGeometry,
    pub vocab: &'a Vocabulary,
    pub train: &'a [Task],
    pub monitor: &'a [Task],
}

impl TrainData<'_> {
    pub fn monitor_tasks(&self) -> &[Task] {
        if self.monitor.is_empty() {
            self.train
        } else {
            self.monitor
        }
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_error: f64,
    pub median_error: f64,
    pub mean_min_distance: f64,
    pub completion_rate: f64,
    pub mean_steps: f64,
    pub mean_entropy: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,mean_error,median_error,mean_min_distance,completion_rate,mean_steps,mean_entropy,wall_seconds";

impl EpochMetrics {
    pub fn from_report(epoch: usize, report: &SuiteReport, wall_seconds: f64) -> Self {
        Self {
            epoch,
            mean_error: report.mean_error,
            median_error: report.median_error,
            mean_min_distance: report.mean_min_distance,
            completion_rate: report.completion_rate,
            mean_steps: report.mean_steps,
            mean_entropy: report.mean_entropy,
            wall_seconds,
        }
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.mean_error,
            self.median_error,
            self.mean_min_distance,
            self.completion_rate,
            self.mean_steps,
            self.mean_entropy,
            self.wall_seconds
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Wall clock that reads zero unless enabled.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stopwatch {
    start: Option<Instant>,
}

impl Stopwatch {
    pub(crate) fn new(enabled: bool) -> Self {
        Self {
            start: enabled.then(Instant::now),
        }
    }

    pub(crate) fn seconds(&self) -> f64 {
        self.start.map_or(0.0, |s| s.elapsed().as_secs_f64())
    }
}

/// Seeded shuffle of `0..n` for one epoch.
pub(crate) fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(
        seed,
        "epoch-order",
        epoch as u64,
    )));
    order
}

/// What a trainer returns.
#[derive(Debug, Clone)]
pub struct TrainOutcome<P> {
    pub params: P,
    pub metrics: Vec<EpochMetrics>,
    /// Per-epoch training loss where the trainer has one.
    pub losses: Vec<f64>,
    /// Updates dropped because of non-finite gradients.
    pub skipped_updates: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{generate_synthetic, template_vocabulary, TemplateSet};

    #[test]
    fn config_validation() {
        let c = LearnConfig::default();
        c.validate(Algorithm::Cbpg).unwrap();
        let bad = LearnConfig {
            demo_fraction: 0.0,
            ..c.clone()
        };
        assert!(bad.validate(Algorithm::Cbpg).is_err());
        assert!(bad.validate(Algorithm::Supervised).is_err());
        let mut ok = bad.clone();
        ok.reward.enable_f2 = false;
        ok.validate(Algorithm::Cbpg).unwrap();
        assert!(LearnConfig {
            horizon: 0,
            ..c.clone()
        }
        .validate(Algorithm::Cbpg)
        .is_err());
        assert!(LearnConfig {
            demo_fraction: 1.5,
            ..c.clone()
        }
        .validate(Algorithm::Cbpg)
        .is_err());
        let mut dqn = c.clone();
        dqn.dqn.replay_capacity = 8;
        assert!(dqn.validate(Algorithm::Dqn).is_err());
        assert!("nope".parse::<Algorithm>().is_err());
        assert_eq!("dqn".parse::<Algorithm>().unwrap(), Algorithm::Dqn);
    }

    #[test]
    fn demo_fraction_keeps_rounded_count() {
        let g = BoardGeometry::square(5, 3).unwrap();
        let vocab = template_vocabulary(&g);
        let tasks = Task::from_examples(
            &generate_synthetic(1, 40, &g, &TemplateSet::default()).unwrap(),
            &vocab,
        );
        for (rho, expected) in [(0.0, 0), (0.125, 5), (1.0, 40)] {
            let kept = apply_demo_fraction(&tasks, rho, 3);
            assert_eq!(
                kept.iter().filter(|t| t.demonstration.is_some()).count(),
                expected
            );
        }
        assert_eq!(
            apply_demo_fraction(&tasks, 0.5, 3),
            apply_demo_fraction(&tasks, 0.5, 3)
        );
    }

    #[test]
    fn metrics_csv_has_header() {
        let csv = metrics_csv(&[EpochMetrics {
            epoch: 1,
            mean_error: 1.5,
            median_error: 1.0,
            mean_min_distance: 0.5,
            completion_rate: 0.25,
            mean_steps: 3.0,
            mean_entropy: 2.0,
            wall_seconds: 0.0,
        }]);
        assert_eq!(csv, format!("{METRICS_HEADER}\n1,1.5,1,0.5,0.25,3,2,0\n"));
    }
}
