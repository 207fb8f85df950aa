//! Deep Q-learning baseline: the policy trunk with one value per selectable
//! action, epsilon-greedy exploration, proportional prioritized replay and a
//! target network synchronized every epoch.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{Action, BoardGeometry, WorldState};
use crate::error::{Error, Result};
use crate::eval::{evaluate, stream_seed, Agent, Decision, EpisodeActor, Task};
use crate::learn::{
    epoch_order, reward_spec, Adam, Algorithm, DqnConfig, EpochMetrics, LearnConfig, Objective,
    Stopwatch, TrainData, TrainOutcome,
};
use crate::policy::{
    AgentContext, InstructionTrace, NetShape, ParamSet, Tensor, Trunk, TrunkTrace,
};
use crate::reward::{shaped_reward, RewardSpec, ShapingInputs};

#[derive(Debug, Clone, PartialEq)]
pub struct QParams {
    pub trunk: Trunk,
    /// One row per action in the geometry's canonical order.
    pub q_weight: Tensor,
    pub q_bias: Tensor,
    revision: u64,
}

pub struct QTrace {
    trunk: TrunkTrace,
    pub values: Vec<f64>,
}

impl QParams {
    pub fn init(shape: NetShape, rng: &mut impl Rng) -> Result<Self> {
        let trunk = Trunk::init(shape, rng)?;
        let n_actions = trunk.shape.n_blocks * 4 + 1;
        Ok(Self {
            q_weight: Tensor::normal(&[n_actions, trunk.shape.dims.hidden_dim], 0.01, rng),
            q_bias: Tensor::zeros(&[n_actions]),
            trunk,
            revision: 0,
        })
    }

    pub fn num_actions(&self) -> usize {
        self.q_bias.len()
    }

    pub fn encode(&self, ctx: &AgentContext) -> Result<Arc<InstructionTrace>> {
        Ok(Arc::new(
            self.trunk.encode_instruction(&ctx.instruction.tokens)?,
        ))
    }

    pub fn forward_encoded(
        &self,
        encoding: &Arc<InstructionTrace>,
        ctx: &AgentContext,
    ) -> Result<QTrace> {
        let trunk = self
            .trunk
            .forward(encoding, &ctx.observations, ctx.prev_action)?;
        let values = self.q_weight.affine(&trunk.hidden, &self.q_bias);
        Ok(QTrace { trunk, values })
    }

    pub fn forward(&self, ctx: &AgentContext) -> Result<QTrace> {
        self.forward_encoded(&self.encode(ctx)?, ctx)
    }

    /// Accumulates the gradient of `d_values . Q(ctx)` into `grads`.
    pub fn backward(&self, trace: &QTrace, d_values: &[f64], grads: &mut QParams) {
        grads.q_weight.add_outer(d_values, &trace.trunk.hidden);
        grads.q_bias.add_assign(d_values);
        let mut d_hidden = vec![0.0; trace.trunk.hidden.len()];
        self.q_weight.add_transpose_product(d_values, &mut d_hidden);
        let d_instruction = self
            .trunk
            .backward(&trace.trunk, &d_hidden, &mut grads.trunk);
        self.trunk
            .backward_instruction(&trace.trunk.instruction, &d_instruction, &mut grads.trunk);
    }
}

impl ParamSet for QParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.trunk.tensors();
        out.push(("q_weight".into(), &self.q_weight));
        out.push(("q_bias".into(), &self.q_bias));
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.trunk.tensors_mut();
        out.push(("q_weight".into(), &mut self.q_weight));
        out.push(("q_bias".into(), &mut self.q_bias));
        out
    }

    fn revision(&self) -> u64 {
        self.revision
    }

    fn set_revision(&mut self, revision: u64) {
        self.revision = revision;
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub ctx: AgentContext,
    pub action: usize,
    pub reward: f64,
    /// `None` when the episode ended with STOP.
    pub next: Option<AgentContext>,
}

/// FIFO replay memory sampled in proportion to `priority^alpha`.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    alpha: f64,
    items: VecDeque<(Transition, f64)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, alpha: f64) -> Self {
        Self {
            capacity,
            alpha,
            items: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> &Transition {
        &self.items[i].0
    }

    pub fn priority(&self, i: usize) -> f64 {
        self.items[i].1
    }

    /// Inserts with the current maximum priority, evicting the oldest entry
    /// at capacity.
    pub fn push(&mut self, t: Transition) {
        let p = self.items.iter().map(|(_, p)| *p).fold(1.0, f64::max);
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back((t, p));
    }

    pub fn set_priority(&mut self, i: usize, td_error: f64) {
        self.items[i].1 = td_error.abs() + 1e-6;
    }

    /// Draws `n` indices with replacement; each comes with its normalized
    /// importance weight.
    pub fn sample(&self, n: usize, beta: f64, rng: &mut impl Rng) -> Vec<(usize, f64)> {
        let mut cumulative = Vec::with_capacity(self.items.len());
        let mut acc = 0.0;
        for (_, p) in &self.items {
            acc += p.powf(self.alpha);
            cumulative.push(acc);
        }
        let len = self.items.len() as f64;
        let weight = |i: usize| {
            let prob = self.items[i].1.powf(self.alpha) / acc;
            (len * prob).powf(-beta)
        };
        let picks: Vec<usize> = (0..n)
            .map(|_| {
                let u = rng.random::<f64>() * acc;
                cumulative
                    .partition_point(|&c| c <= u)
                    .min(self.items.len() - 1)
            })
            .collect();
        let max_w = picks.iter().map(|&i| weight(i)).fold(0.0, f64::max);
        picks.into_iter().map(|i| (i, weight(i) / max_w)).collect()
    }
}

/// Gradient of the importance-weighted squared TD error (halved, averaged
/// over the batch) and the TD errors themselves.
pub fn td_gradient(
    online: &QParams,
    target: &QParams,
    batch: &[(&Transition, f64)],
    gamma: f64,
) -> Result<(QParams, Vec<f64>)> {
    let mut grads = online.zeros_like();
    let mut errors = Vec::with_capacity(batch.len());
    let scale = 1.0 / batch.len() as f64;
    for (t, w) in batch {
        let bootstrap = match &t.next {
            Some(next) => target
                .forward(next)?
                .values
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max),
            None => 0.0,
        };
        let y = t.reward + gamma * bootstrap;
        let trace = online.forward(&t.ctx)?;
        let delta = trace.values[t.action] - y;
        errors.push(delta);
        let mut d = vec![0.0; online.num_actions()];
        d[t.action] = w * delta * scale;
        online.backward(&trace, &d, &mut grads);
    }
    Ok((grads, errors))
}

pub struct DqnTrainer<'d> {
    data: TrainData<'d>,
    config: LearnConfig,
    specs: Vec<RewardSpec>,
    pub online: QParams,
    pub target: QParams,
    pub adam: Adam<QParams>,
    pub replay: ReplayBuffer,
    pub env_steps: usize,
    pub epochs_done: usize,
    pub metrics: Vec<EpochMetrics>,
    pub skipped_updates: usize,
    rng: ChaCha8Rng,
}

impl<'d> DqnTrainer<'d> {
    pub fn new(data: TrainData<'d>, config: LearnConfig) -> Result<Self> {
        config.validate(Algorithm::Dqn)?;
        let specs = data
            .train
            .iter()
            .map(|t| reward_spec(t, config.reward))
            .collect::<Result<_>>()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "init", 0));
        let online = QParams::init(config.net_shape(data.vocab, data.geometry), &mut init_rng)?;
        Ok(Self {
            target: online.clone(),
            adam: Adam::new(&online),
            replay: ReplayBuffer::new(config.dqn.replay_capacity, config.dqn.priority_alpha),
            rng: ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "dqn", 0)),
            online,
            data,
            config,
            specs,
            env_steps: 0,
            epochs_done: 0,
            metrics: Vec::new(),
            skipped_updates: 0,
        })
    }

    pub fn epsilon(&self) -> f64 {
        epsilon_at(&self.config.dqn, self.env_steps)
    }

    fn learn_step(&mut self) -> Result<()> {
        let picks = self.replay.sample(
            self.config.batch_size,
            self.config.dqn.priority_beta,
            &mut self.rng,
        );
        let batch: Vec<(&Transition, f64)> = picks
            .iter()
            .map(|&(i, w)| (self.replay.get(i), w))
            .collect();
        let (grads, errors) =
            td_gradient(&self.online, &self.target, &batch, self.config.dqn.gamma)?;
        for (&(i, _), e) in picks.iter().zip(errors) {
            self.replay.set_priority(i, e);
        }
        match self.adam.update(
            &mut self.online,
            &grads,
            self.config.dqn.learning_rate,
            self.config.clip_norm,
            Objective::Minimize,
        ) {
            Ok(_) => Ok(()),
            Err(Error::NonFiniteGradient(_)) => {
                self.skipped_updates += 1;
                Ok(())
            }
            Err(e) => Err(e),
        }
    }

    fn run_episode(&mut self, i: usize) -> Result<()> {
        let geometry = self.data.geometry;
        let train = self.data.train;
        let task = &train[i];
        let mut ctx = AgentContext::initial(
            geometry,
            task.instruction.clone(),
            &task.start,
            self.config.history,
        )?;
        let mut state = task.start.clone();
        let mut prev_state = state.clone();
        for _ in 0..self.config.horizon {
            let a = if self.rng.random::<f64>() < self.epsilon() {
                self.rng.random_range(0..geometry.num_actions())
            } else {
                argmax(&self.online.forward(&ctx)?.values)
            };
            let action = geometry.action_from_index(a);
            let step = geometry.apply(&state, action);
            let inputs = ShapingInputs {
                prev_state: &prev_state,
                prev_action: ctx.prev_action,
                state: &state,
                action,
                next_state: &step.next_state,
            };
            let reward = shaped_reward(&self.specs[i], &inputs, &step)?;
            let next = (!step.terminal)
                .then(|| ctx.advance(geometry, action, &step.next_state))
                .transpose()?;
            self.replay.push(Transition {
                ctx: ctx.clone(),
                action: a,
                reward,
                next: next.clone(),
            });
            self.env_steps += 1;
            if self.replay.len() >= self.config.batch_size
                && self.env_steps % self.config.dqn.update_every == 0
            {
                self.learn_step()?;
            }
            let Some(next) = next else { break };
            ctx = next;
            prev_state = std::mem::replace(&mut state, step.next_state);
        }
        Ok(())
    }

    pub fn train_epoch(&mut self) -> Result<()> {
        for i in epoch_order(self.data.train.len(), self.config.seed, self.epochs_done) {
            self.run_episode(i)?;
        }
        self.target = self.online.clone();
        self.epochs_done += 1;
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let clock = Stopwatch::new(self.config.record_wall_time);
        self.train_epoch()?;
        let agent = QAgent {
            params: &self.online,
        };
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

    pub fn into_outcome(self) -> TrainOutcome<QParams> {
        TrainOutcome {
            params: self.online,
            metrics: self.metrics,
            losses: Vec::new(),
            skipped_updates: self.skipped_updates,
        }
    }
}

/// Linear decay from `epsilon_start` to `epsilon_end`.
pub fn epsilon_at(config: &DqnConfig, step: usize) -> f64 {
    if config.epsilon_decay_steps == 0 {
        return config.epsilon_end;
    }
    let frac = (step as f64 / config.epsilon_decay_steps as f64).min(1.0);
    config.epsilon_start * (1.0 - frac) + config.epsilon_end * frac
}

pub fn train_dqn(data: TrainData<'_>, config: &LearnConfig) -> Result<TrainOutcome<QParams>> {
    let mut trainer = DqnTrainer::new(data, config.clone())?;
    while trainer.epochs_done < config.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_outcome())
}

/// Greedy action under a Q-network.
pub struct QAgent<'p> {
    pub params: &'p QParams,
}

struct QActor<'a> {
    params: &'a QParams,
    geometry: &'a BoardGeometry,
    encoding: Option<Arc<InstructionTrace>>,
}

impl Agent for QAgent<'_> {
    fn begin<'a>(
        &'a self,
        geometry: &'a BoardGeometry,
        _: &'a Task,
        _: u64,
    ) -> Result<Box<dyn EpisodeActor + 'a>> {
        Ok(Box::new(QActor {
            params: self.params,
            geometry,
            encoding: None,
        }))
    }
}

impl EpisodeActor for QActor<'_> {
    fn act(&mut self, ctx: &AgentContext, _: &WorldState) -> Result<Decision> {
        let encoding = match &self.encoding {
            Some(e) => Arc::clone(e),
            None => {
                let e = self.params.encode(ctx)?;
                self.encoding = Some(Arc::clone(&e));
                e
            }
        };
        let values = self.params.forward_encoded(&encoding, ctx)?.values;
        let action: Action = self.geometry.action_from_index(argmax(&values));
        Ok(action.into())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Cell;
    use crate::lang::{tokenize, Vocabulary};
    use crate::policy::ModelDims;

    fn tiny() -> (BoardGeometry, QParams, AgentContext) {
        let g = BoardGeometry::square(4, 2).unwrap();
        let vocab = Vocabulary::build(["stop here"]);
        let shape = NetShape {
            vocab_size: vocab.len(),
            n_blocks: 2,
            height: 4,
            width: 4,
            history: 1,
            dims: ModelDims::desk(),
        };
        let q = QParams::init(shape, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let s = WorldState::from_positions(&g, vec![Some(Cell::new(0, 0)), Some(Cell::new(3, 3))])
            .unwrap();
        let ctx = AgentContext::initial(&g, tokenize("stop here", &vocab), &s, 1).unwrap();
        (g, q, ctx)
    }

    fn transition(ctx: &AgentContext, i: usize) -> Transition {
        Transition {
            ctx: ctx.clone(),
            action: i,
            reward: i as f64,
            next: None,
        }
    }

    #[test]
    fn buffer_evicts_oldest() {
        let (_, _, ctx) = tiny();
        let mut buf = ReplayBuffer::new(3, 0.6);
        for i in 0..4 {
            buf.push(transition(&ctx, i));
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.get(0).action, 1);
        assert_eq!(buf.get(2).action, 3);
    }

    #[test]
    fn priorities_shape_sampling() {
        let (_, _, ctx) = tiny();
        let mut buf = ReplayBuffer::new(2, 1.0);
        buf.push(transition(&ctx, 0));
        buf.push(transition(&ctx, 1));
        buf.set_priority(0, 3.0);
        buf.set_priority(1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let picks = buf.sample(20_000, 0.4, &mut rng);
        let zeros = picks.iter().filter(|(i, _)| *i == 0).count() as f64 / 20_000.0;
        assert!((zeros - 0.75).abs() < 0.02, "{zeros}");
        assert!(picks.iter().all(|&(_, w)| w > 0.0 && w <= 1.0));
    }

    #[test]
    fn target_sync_is_exact() {
        let (_, q, _) = tiny();
        let target = q.clone();
        assert!(target.same_values(&q));
    }

    #[test]
    fn terminal_value_converges_to_reward() {
        let (g, mut q, ctx) = tiny();
        let stop = g.action_index(Action::Stop).unwrap();
        let t = Transition {
            ctx: ctx.clone(),
            action: stop,
            reward: 1.0,
            next: None,
        };
        let mut adam = Adam::new(&q);
        let target = q.clone();
        for _ in 0..3000 {
            let (grads, _) = td_gradient(&q, &target, &[(&t, 1.0)], 0.99).unwrap();
            adam.update(&mut q, &grads, 0.001, 5.0, Objective::Minimize)
                .unwrap();
        }
        let v = q.forward(&ctx).unwrap().values[stop];
        assert!((v - 1.0).abs() < 1e-3, "{v}");
    }

    #[test]
    fn epsilon_schedule() {
        let c = DqnConfig {
            epsilon_decay_steps: 100,
            ..DqnConfig::default()
        };
        assert_eq!(epsilon_at(&c, 0), 1.0);
        assert!((epsilon_at(&c, 50) - 0.55).abs() < 1e-12);
        assert_eq!(epsilon_at(&c, 1000), 0.1);
    }
}
