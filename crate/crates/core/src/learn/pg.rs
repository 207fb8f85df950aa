//! Policy-gradient training: the contextual-bandit learner, which weights
//! each step by its immediate shaped reward, and REINFORCE, which weights
//! every step by the total reward of its rollout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{state_distance, Action, BoardGeometry, WorldState};
use crate::error::{Error, Result};
use crate::eval::{evaluate, stream_seed, DecodeMode, PolicyAgent, Task};
use crate::learn::supervised::{initial_policy, SupervisedTrainer};
use crate::learn::{
    epoch_order, reward_spec, Adam, Algorithm, EpochMetrics, HeadReinit, LearnConfig, Objective,
    Stopwatch, TrainData, TrainOutcome,
};
use crate::policy::{AgentContext, EncodedInstruction, ForwardTrace, ParamSet, PolicyParams};
use crate::reward::{shaped_reward_breakdown, RewardBreakdown, RewardSpec, ShapingInputs};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Credit {
    /// Immediate reward of each step.
    Immediate,
    /// Sum of the rollout's rewards, no baseline.
    Total,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Terminal {
    Stop,
    Horizon,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub action: Action,
    /// Reward components; `total` is what the learner optimizes.
    pub reward: RewardBreakdown,
    pub log_prob: f64,
    pub entropy: f64,
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub struct Rollout {
    pub steps: Vec<StepRecord>,
    pub terminal: Terminal,
    pub final_state: WorldState,
    encoding: EncodedInstruction,
    traces: Vec<ForwardTrace>,
}

impl Rollout {
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward.total).sum()
    }

    pub fn contexts(&self) -> usize {
        self.traces.len()
    }
}

/// Samples one episode of at most `horizon` steps from the policy.
#[allow(clippy::too_many_arguments)]
pub fn rollout(
    params: &PolicyParams,
    geometry: &BoardGeometry,
    task: &Task,
    spec: &RewardSpec,
    horizon: usize,
    history: usize,
    distance_reward: bool,
    rng: &mut impl Rng,
) -> Result<Rollout> {
    let encoding = params.encode(&task.instruction)?;
    let mut ctx = AgentContext::initial(geometry, task.instruction.clone(), &task.start, history)?;
    let mut state = task.start.clone();
    let mut prev_state = task.start.clone();
    let mut steps = Vec::new();
    let mut traces = Vec::new();
    let mut terminal = Terminal::Horizon;
    while steps.len() < horizon {
        let trace = params.forward_encoded(&encoding, &ctx.observations, ctx.prev_action)?;
        let action = trace.dist.sample(rng);
        let step = geometry.apply(&state, action);
        let inputs = ShapingInputs {
            prev_state: &prev_state,
            prev_action: ctx.prev_action,
            state: &state,
            action,
            next_state: &step.next_state,
        };
        let mut reward = shaped_reward_breakdown(spec, &inputs, &step)?;
        if distance_reward {
            reward.problem = -state_distance(&step.next_state, &spec.goal)?;
            reward.total = reward.problem + reward.f1 + reward.f2;
        }
        steps.push(StepRecord {
            action,
            reward,
            log_prob: trace.dist.log_prob(action)?,
            entropy: trace.dist.entropy(),
            failed: step.failed,
        });
        traces.push(trace);
        if step.terminal {
            terminal = Terminal::Stop;
            break;
        }
        ctx = ctx.advance(geometry, action, &step.next_state)?;
        prev_state = std::mem::replace(&mut state, step.next_state);
    }
    Ok(Rollout {
        steps,
        terminal,
        final_state: state,
        encoding,
        traces,
    })
}

/// Adds `scale` times the mean over steps of
/// `weight_j * grad log pi(a_j) + lambda * grad H` to `grads`.
pub fn accumulate_rollout_gradient(
    params: &PolicyParams,
    rollout: &Rollout,
    credit: Credit,
    entropy_weight: f64,
    scale: f64,
    grads: &mut PolicyParams,
) -> Result<()> {
    let n = rollout.steps.len();
    if n == 0 {
        return Ok(());
    }
    let total = rollout.total_reward();
    let w = scale / n as f64;
    let mut d_instruction = vec![0.0; rollout.encoding.vector().len()];
    for (record, trace) in rollout.steps.iter().zip(&rollout.traces) {
        let weight = match credit {
            Credit::Immediate => record.reward.total,
            Credit::Total => total,
        };
        let d =
            params.backward_partial(trace, record.action, w * weight, w * entropy_weight, grads)?;
        d_instruction.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
    params.backward_instruction(rollout.encoding.trace(), &d_instruction, grads);
    Ok(())
}

pub struct PgTrainer<'d> {
    data: TrainData<'d>,
    config: LearnConfig,
    credit: Credit,
    specs: Vec<RewardSpec>,
    pub params: PolicyParams,
    pub adam: Adam<PolicyParams>,
    pub epochs_done: usize,
    pub metrics: Vec<EpochMetrics>,
    pub skipped_updates: usize,
}

impl<'d> PgTrainer<'d> {
    pub fn new(
        data: TrainData<'d>,
        config: LearnConfig,
        credit: Credit,
        params: PolicyParams,
    ) -> Result<Self> {
        let algorithm = match credit {
            Credit::Immediate => Algorithm::Cbpg,
            Credit::Total => Algorithm::Reinforce,
        };
        config.validate(algorithm)?;
        let specs = data
            .train
            .iter()
            .map(|t| reward_spec(t, config.reward))
            .collect::<Result<_>>()?;
        Ok(Self {
            adam: Adam::new(&params),
            data,
            config,
            credit,
            specs,
            params,
            epochs_done: 0,
            metrics: Vec::new(),
            skipped_updates: 0,
        })
    }

    /// Supervised epochs on the demonstration-bearing tasks, then optionally
    /// a fresh direction head. Does nothing without demonstrations or with
    /// zero init epochs.
    pub fn supervised_init(&mut self) -> Result<()> {
        let has_demo = self.data.train.iter().any(|t| t.demonstration.is_some());
        if self.config.init_epochs == 0 || !has_demo {
            return Ok(());
        }
        let mut sup = SupervisedTrainer::new(self.data, self.config.clone(), self.params.clone())?;
        for _ in 0..self.config.init_epochs {
            sup.train_epoch()?;
        }
        self.skipped_updates += sup.skipped_updates;
        self.params = sup.params;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.config.seed, "head-reinit", 0));
        match self.config.reinit_head {
            HeadReinit::None => {}
            HeadReinit::Direction => self.params.reinit_direction_head(&mut rng),
            HeadReinit::Block => self.params.reinit_block_head(&mut rng),
        }
        self.adam = Adam::new(&self.params);
        Ok(())
    }

    fn episode_rng(&self, task: &Task) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(stream_seed(
            self.config.seed,
            &task.id,
            self.epochs_done as u64,
        ))
    }

    /// One pass over the training tasks, one update per
    /// `rollouts_per_update` rollouts.
    pub fn train_epoch(&mut self) -> Result<()> {
        let order = epoch_order(self.data.train.len(), self.config.seed, self.epochs_done);
        for group in order.chunks(self.config.rollouts_per_update) {
            let mut grads = self.params.zeros_like();
            let scale = 1.0 / group.len() as f64;
            for &i in group {
                let task = &self.data.train[i];
                let mut rng = self.episode_rng(task);
                let r = rollout(
                    &self.params,
                    self.data.geometry,
                    task,
                    &self.specs[i],
                    self.config.horizon,
                    self.config.history,
                    self.config.distance_reward,
                    &mut rng,
                )?;
                accumulate_rollout_gradient(
                    &self.params,
                    &r,
                    self.credit,
                    self.config.entropy_weight,
                    scale,
                    &mut grads,
                )?;
            }
            match self.adam.update(
                &mut self.params,
                &grads,
                self.config.lr_policy_gradient,
                self.config.clip_norm,
                Objective::Maximize,
            ) {
                Ok(_) => {}
                Err(Error::NonFiniteGradient(_)) => self.skipped_updates += 1,
                Err(e) => return Err(e),
            }
        }
        self.epochs_done += 1;
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let clock = Stopwatch::new(self.config.record_wall_time);
        self.train_epoch()?;
        let agent = PolicyAgent::single(&self.params, DecodeMode::Greedy);
        let report = evaluate(
            &agent,
            self.data.geometry,
            self.data.monitor_tasks(),
            &self.config.eval_settings(),
        )?;
        let row = EpochMetrics::from_report(self.epochs_done, &report, clock.seconds());
        self.metrics.push(row.clone());
        Ok(row)
    }

    pub fn into_outcome(self) -> TrainOutcome<PolicyParams> {
        TrainOutcome {
            params: self.params,
            metrics: self.metrics,
            losses: Vec::new(),
            skipped_updates: self.skipped_updates,
        }
    }
}

fn train_pg(
    data: TrainData<'_>,
    config: &LearnConfig,
    credit: Credit,
) -> Result<TrainOutcome<PolicyParams>> {
    let params = initial_policy(&data, config)?;
    let mut trainer = PgTrainer::new(data, config.clone(), credit, params)?;
    trainer.supervised_init()?;
    while trainer.epochs_done < config.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_outcome())
}

pub fn train_cb_policy_gradient(
    data: TrainData<'_>,
    config: &LearnConfig,
) -> Result<TrainOutcome<PolicyParams>> {
    train_pg(data, config, Credit::Immediate)
}

pub fn train_reinforce(
    data: TrainData<'_>,
    config: &LearnConfig,
) -> Result<TrainOutcome<PolicyParams>> {
    train_pg(data, config, Credit::Total)
}
