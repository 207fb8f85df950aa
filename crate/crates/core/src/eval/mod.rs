//! Evaluation: episode execution for any agent, per-episode and suite
//! reports, and the trivial baselines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{state_distance, states_equal_relaxed, Action, BoardGeometry, WorldState};
use crate::error::{Error, Result};
use crate::lang::{tokenize, Execution, Instruction, TaskExample, Vocabulary};
use crate::policy::{ActionDistribution, AgentContext, EncodedInstruction, PolicyParams};
use crate::reward::{shaped_reward_breakdown, RewardBreakdown, RewardSpec, ShapingInputs};

/// A task ready to run: tokenized instruction plus start, goal and optional
/// demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub id: String,
    pub instruction: Instruction,
    pub start: WorldState,
    pub goal: WorldState,
    pub demonstration: Option<Execution>,
}

impl Task {
    pub fn from_example(example: &TaskExample, vocab: &Vocabulary) -> Self {
        Self {
            id: example.id.clone(),
            instruction: tokenize(&example.instruction, vocab),
            start: example.start.clone(),
            goal: example.goal.clone(),
            demonstration: example.demonstration.clone(),
        }
    }

    pub fn from_examples(examples: &[TaskExample], vocab: &Vocabulary) -> Vec<Self> {
        examples
            .iter()
            .map(|e| Self::from_example(e, vocab))
            .collect()
    }
}

/// Seed for an independent random stream keyed by a base seed, an example id
/// and a counter such as the epoch.
pub fn stream_seed(base: u64, id: &str, salt: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id
        .bytes()
        .chain(salt.to_le_bytes())
        .chain(base.to_le_bytes())
    {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Argmax of each head.
    #[default]
    Greedy,
    Sample,
}

/// What an agent chose, with the entropy of its action distribution when it
/// has one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decision {
    pub action: Action,
    pub entropy: Option<f64>,
}

impl From<Action> for Decision {
    fn from(action: Action) -> Self {
        Self {
            action,
            entropy: None,
        }
    }
}

/// Something that can act in episodes. `begin` is called once per episode
/// with a seed for that episode's random stream.
pub trait Agent: Sync {
    fn begin<'a>(
        &'a self,
        geometry: &'a BoardGeometry,
        task: &'a Task,
        seed: u64,
    ) -> Result<Box<dyn EpisodeActor + 'a>>;
}

pub trait EpisodeActor {
    /// Chooses the next action. `state` is the simulator state; learned
    /// policies only read `ctx`.
    fn act(&mut self, ctx: &AgentContext, state: &WorldState) -> Result<Decision>;
}

/// Emits STOP immediately.
#[derive(Debug, Clone, Copy, Default)]
pub struct StopAgent;

impl Agent for StopAgent {
    fn begin<'a>(
        &'a self,
        _: &'a BoardGeometry,
        _: &'a Task,
        _: u64,
    ) -> Result<Box<dyn EpisodeActor + 'a>> {
        Ok(Box::new(StopAgent))
    }
}

impl EpisodeActor for StopAgent {
    fn act(&mut self, _: &AgentContext, _: &WorldState) -> Result<Decision> {
        Ok(Action::Stop.into())
    }
}

/// Uniform over all selectable actions until STOP or the horizon.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomAgent;

struct RandomActor<'a> {
    geometry: &'a BoardGeometry,
    rng: ChaCha8Rng,
}

impl Agent for RandomAgent {
    fn begin<'a>(
        &'a self,
        geometry: &'a BoardGeometry,
        _: &'a Task,
        seed: u64,
    ) -> Result<Box<dyn EpisodeActor + 'a>> {
        Ok(Box::new(RandomActor {
            geometry,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }))
    }
}

impl EpisodeActor for RandomActor<'_> {
    fn act(&mut self, _: &AgentContext, _: &WorldState) -> Result<Decision> {
        let i = self.rng.random_range(0..self.geometry.num_actions());
        Ok(Decision {
            action: self.geometry.action_from_index(i),
            entropy: Some((self.geometry.num_actions() as f64).ln()),
        })
    }
}

/// Replays each task's demonstration.
#[derive(Debug, Clone, Copy, Default)]
pub struct DemonstrationAgent;

struct ReplayActor {
    actions: Vec<Action>,
    next: usize,
}

impl Agent for DemonstrationAgent {
    fn begin<'a>(
        &'a self,
        _: &'a BoardGeometry,
        task: &'a Task,
        _: u64,
    ) -> Result<Box<dyn EpisodeActor + 'a>> {
        let demo = task
            .demonstration
            .as_ref()
            .ok_or_else(|| Error::MissingDemonstration(task.id.clone()))?;
        Ok(Box::new(ReplayActor {
            actions: demo.actions().collect(),
            next: 0,
        }))
    }
}

impl ReplayActor {
    pub fn new(actions: Vec<Action>) -> Self {
        Self { actions, next: 0 }
    }
}

impl EpisodeActor for ReplayActor {
    fn act(&mut self, _: &AgentContext, _: &WorldState) -> Result<Decision> {
        let action = self.actions.get(self.next).copied().unwrap_or(Action::Stop);
        self.next += 1;
        Ok(action.into())
    }
}

/// Boxes a fixed action sequence as an actor; STOP once exhausted.
pub fn replay_actor(actions: Vec<Action>) -> Box<dyn EpisodeActor> {
    Box::new(ReplayActor::new(actions))
}

/// A trained policy or an ensemble of them. Ensembles average head
/// probabilities.
pub struct PolicyAgent<'p> {
    members: Vec<&'p PolicyParams>,
    mode: DecodeMode,
}

impl<'p> PolicyAgent<'p> {
    pub fn new(members: Vec<&'p PolicyParams>, mode: DecodeMode) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("empty ensemble".into()))?;
        if members.iter().any(|m| m.shape() != first.shape()) {
            return Err(Error::Shape(
                "ensemble members have different shapes".into(),
            ));
        }
        Ok(Self { members, mode })
    }

    pub fn single(params: &'p PolicyParams, mode: DecodeMode) -> Self {
        Self {
            members: vec![params],
            mode,
        }
    }
}

struct PolicyActor<'a> {
    members: &'a [&'a PolicyParams],
    encodings: Vec<EncodedInstruction>,
    mode: DecodeMode,
    rng: ChaCha8Rng,
}

impl Agent for PolicyAgent<'_> {
    fn begin<'a>(
        &'a self,
        _: &'a BoardGeometry,
        task: &'a Task,
        seed: u64,
    ) -> Result<Box<dyn EpisodeActor + 'a>> {
        let encodings = self
            .members
            .iter()
            .map(|m| m.encode(&task.instruction))
            .collect::<Result<_>>()?;
        Ok(Box::new(PolicyActor {
            members: &self.members,
            encodings,
            mode: self.mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }))
    }
}

impl EpisodeActor for PolicyActor<'_> {
    fn act(&mut self, ctx: &AgentContext, _: &WorldState) -> Result<Decision> {
        let dists = self
            .members
            .iter()
            .zip(&self.encodings)
            .map(|(m, enc)| {
                Ok(m.forward_encoded(enc, &ctx.observations, ctx.prev_action)?
                    .dist)
            })
            .collect::<Result<Vec<_>>>()?;
        let dist = ActionDistribution::average(&dists)?;
        let action = match self.mode {
            DecodeMode::Greedy => dist.greedy(),
            DecodeMode::Sample => dist.sample(&mut self.rng),
        };
        Ok(Decision {
            action,
            entropy: Some(dist.entropy()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub horizon: usize,
    pub history: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            horizon: 40,
            history: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub id: String,
    /// Distance between the final and goal states, in block widths.
    pub final_error: f64,
    /// Closest the episode came to the goal, over every visited state.
    pub min_distance: f64,
    pub steps: usize,
    pub completed: bool,
    pub hit_horizon: bool,
    /// Mean entropy of the agent's action distribution, if it has one.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mean_entropy: Option<f64>,
}

/// One executed step, for trajectory dumps.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub state: WorldState,
    pub action: Action,
    pub failed: bool,
    pub reward: Option<RewardBreakdown>,
}

/// Runs one episode. With `reward`, each step also carries its reward
/// breakdown.
pub fn run_episode(
    agent: &dyn Agent,
    geometry: &BoardGeometry,
    task: &Task,
    settings: &EvalSettings,
    reward: Option<&RewardSpec>,
) -> Result<(EpisodeReport, Vec<TrajectoryStep>)> {
    let seed = stream_seed(settings.seed, &task.id, 0);
    let mut actor = agent.begin(geometry, task, seed)?;
    let mut ctx = AgentContext::initial(
        geometry,
        task.instruction.clone(),
        &task.start,
        settings.history,
    )?;
    let mut state = task.start.clone();
    let mut prev_state = task.start.clone();
    let mut min_distance = state_distance(&state, &task.goal)?;
    let mut trajectory = Vec::new();
    let mut entropy_sum = 0.0;
    let mut entropy_count = 0usize;
    let mut completed = false;
    let mut stopped = false;
    while trajectory.len() < settings.horizon {
        let decision = actor.act(&ctx, &state)?;
        if !decision.action.is_selectable() {
            return Err(Error::InvalidAction(format!(
                "agent chose {:?}",
                decision.action
            )));
        }
        if let Some(h) = decision.entropy {
            entropy_sum += h;
            entropy_count += 1;
        }
        let step = geometry.apply(&state, decision.action);
        let breakdown = reward
            .map(|spec| {
                let inputs = ShapingInputs {
                    prev_state: &prev_state,
                    prev_action: ctx.prev_action,
                    state: &state,
                    action: decision.action,
                    next_state: &step.next_state,
                };
                shaped_reward_breakdown(spec, &inputs, &step)
            })
            .transpose()?;
        trajectory.push(TrajectoryStep {
            state: state.clone(),
            action: decision.action,
            failed: step.failed,
            reward: breakdown,
        });
        min_distance = min_distance.min(state_distance(&step.next_state, &task.goal)?);
        if step.terminal {
            completed = states_equal_relaxed(&state, &task.goal)?;
            stopped = true;
            break;
        }
        ctx = ctx.advance(geometry, decision.action, &step.next_state)?;
        prev_state = std::mem::replace(&mut state, step.next_state);
    }
    let report = EpisodeReport {
        id: task.id.clone(),
        final_error: state_distance(&state, &task.goal)?,
        min_distance,
        steps: trajectory.len(),
        completed,
        hit_horizon: !stopped && trajectory.len() == settings.horizon,
        mean_entropy: (entropy_count > 0).then(|| entropy_sum / entropy_count as f64),
    };
    Ok((report, trajectory))
}

/// Runs every task in parallel. The report keeps the input order.
pub fn evaluate(
    agent: &dyn Agent,
    geometry: &BoardGeometry,
    tasks: &[Task],
    settings: &EvalSettings,
) -> Result<SuiteReport> {
    let episodes = tasks
        .par_iter()
        .map(|task| run_episode(agent, geometry, task, settings, None).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    Ok(SuiteReport::from_episodes(episodes))
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    xs.sum::<f64>() / n as f64
}

/// Median using the lower middle element for even counts.
pub fn lower_median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted[(sorted.len() - 1) / 2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub episodes: Vec<EpisodeReport>,
    pub mean_error: f64,
    pub median_error: f64,
    pub mean_min_distance: f64,
    pub median_min_distance: f64,
    pub completion_rate: f64,
    pub mean_steps: f64,
    pub horizon_rate: f64,
    pub mean_entropy: f64,
}

pub const AGGREGATE_HEADER: &str =
    "episodes,mean_error,median_error,mean_min_distance,median_min_distance,completion_rate,mean_steps,horizon_rate,mean_entropy";

impl SuiteReport {
    pub fn from_episodes(episodes: Vec<EpisodeReport>) -> Self {
        let errors: Vec<f64> = episodes.iter().map(|e| e.final_error).collect();
        let mins: Vec<f64> = episodes.iter().map(|e| e.min_distance).collect();
        let entropies: Vec<f64> = episodes.iter().filter_map(|e| e.mean_entropy).collect();
        Self {
            mean_error: mean(errors.iter().copied()),
            median_error: lower_median(&errors),
            mean_min_distance: mean(mins.iter().copied()),
            median_min_distance: lower_median(&mins),
            completion_rate: mean(episodes.iter().map(|e| f64::from(u8::from(e.completed)))),
            mean_steps: mean(episodes.iter().map(|e| e.steps as f64)),
            horizon_rate: mean(episodes.iter().map(|e| f64::from(u8::from(e.hit_horizon)))),
            mean_entropy: mean(entropies.iter().copied()),
            episodes,
        }
    }

    /// Comma-separated aggregate values matching [`AGGREGATE_HEADER`].
    pub fn aggregate_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.episodes.len(),
            self.mean_error,
            self.median_error,
            self.mean_min_distance,
            self.median_min_distance,
            self.completion_rate,
            self.mean_steps,
            self.horizon_rate,
            self.mean_entropy
        )
    }

    /// One JSON object per episode, one per line.
    pub fn episodes_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.episodes {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}
