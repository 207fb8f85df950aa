//! Agent context and the factored neural policy.
//!
//! The direction head has five outputs (four moves and STOP) and the block
//! head one output per block. `P(STOP)` is the STOP direction probability and
//! `P(MOVE(b, d)) = P(d) * P(b)`, which covers the `4n + 1` selectable actions.

pub mod checkpoint;
pub mod net;
pub mod tensor;

use std::collections::VecDeque;
use std::sync::Arc;

use rand::Rng;

use crate::env::{Action, BoardGeometry, Direction, Observation, WorldState};
use crate::error::{Error, Result};
use crate::lang::Instruction;

pub use net::{
    ConvSpec, InstructionTrace, ModelDims, NetShape, Trunk, TrunkTrace, NUM_DIRECTIONS, STOP_INDEX,
};
pub use tensor::{ParamSet, Tensor};

/// What the policy conditions on: the instruction, the current observation
/// and the `K` before it (oldest first, current last), and the previous
/// action.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentContext {
    pub instruction: Instruction,
    pub observations: Vec<Observation>,
    pub prev_action: Action,
}

impl AgentContext {
    /// Context at the first step: zero frames before the start and NONE as
    /// the previous action.
    pub fn initial(
        geometry: &BoardGeometry,
        instruction: Instruction,
        start: &WorldState,
        history: usize,
    ) -> Result<Self> {
        let mut observations = vec![geometry.empty_observation(); history];
        observations.push(geometry.render(start)?);
        Ok(Self {
            instruction,
            observations,
            prev_action: Action::None,
        })
    }

    /// Context after taking `action` and landing in `next_state`.
    pub fn advance(
        &self,
        geometry: &BoardGeometry,
        action: Action,
        next_state: &WorldState,
    ) -> Result<Self> {
        let mut observations: VecDeque<Observation> = self.observations.iter().cloned().collect();
        observations.pop_front();
        observations.push_back(geometry.render(next_state)?);
        Ok(Self {
            instruction: self.instruction.clone(),
            observations: observations.into(),
            prev_action: action,
        })
    }

    pub fn history(&self) -> usize {
        self.observations.len().saturating_sub(1)
    }
}

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

fn entropy_of(log_probs: &[f64]) -> f64 {
    -log_probs.iter().map(|lp| lp.exp() * lp).sum::<f64>()
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

fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // rounding left a sliver above the last cumulative sum
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .unwrap_or(probs.len() - 1)
}

/// The two head distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    pub block_probs: Vec<f64>,
    /// North, South, East, West, STOP.
    pub dir_probs: Vec<f64>,
    block_log_probs: Vec<f64>,
    dir_log_probs: Vec<f64>,
}

impl ActionDistribution {
    pub fn from_logits(block_logits: &[f64], dir_logits: &[f64]) -> Result<Self> {
        if dir_logits.len() != NUM_DIRECTIONS || block_logits.is_empty() {
            return Err(Error::Shape(format!(
                "head sizes {}/{}, expected nonempty/{NUM_DIRECTIONS}",
                block_logits.len(),
                dir_logits.len()
            )));
        }
        Ok(Self::from_log_probs(
            log_softmax(block_logits),
            log_softmax(dir_logits),
        ))
    }

    fn from_log_probs(block_log_probs: Vec<f64>, dir_log_probs: Vec<f64>) -> Self {
        Self {
            block_probs: block_log_probs.iter().map(|x| x.exp()).collect(),
            dir_probs: dir_log_probs.iter().map(|x| x.exp()).collect(),
            block_log_probs,
            dir_log_probs,
        }
    }

    /// Member-wise average of head probabilities.
    pub fn average(members: &[ActionDistribution]) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Config("empty ensemble".into()))?;
        if members
            .iter()
            .any(|m| m.block_probs.len() != first.block_probs.len())
        {
            return Err(Error::Shape(
                "ensemble members disagree on block count".into(),
            ));
        }
        if members.len() == 1 {
            return Ok(first.clone());
        }
        let mean = |get: fn(&ActionDistribution) -> &Vec<f64>| -> Vec<f64> {
            let n = members.len() as f64;
            (0..get(first).len())
                .map(|i| (members.iter().map(|m| get(m)[i]).sum::<f64>() / n).ln())
                .collect()
        };
        Ok(Self::from_log_probs(
            mean(|m| &m.block_probs),
            mean(|m| &m.dir_probs),
        ))
    }

    pub fn num_blocks(&self) -> usize {
        self.block_probs.len()
    }

    pub fn log_prob(&self, action: Action) -> Result<f64> {
        match action {
            Action::Stop => Ok(self.dir_log_probs[STOP_INDEX]),
            Action::Move { block, dir } if block < self.num_blocks() => {
                Ok(self.block_log_probs[block] + self.dir_log_probs[dir.index()])
            }
            other => Err(Error::InvalidAction(format!(
                "{other:?} has no probability"
            ))),
        }
    }

    pub fn prob(&self, action: Action) -> Result<f64> {
        self.log_prob(action).map(f64::exp)
    }

    /// Sum of the two head entropies.
    pub fn entropy(&self) -> f64 {
        entropy_of(&self.block_log_probs) + entropy_of(&self.dir_log_probs)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Action {
        let d = sample_index(&self.dir_probs, rng);
        if d == STOP_INDEX {
            return Action::Stop;
        }
        Action::Move {
            block: sample_index(&self.block_probs, rng),
            dir: Direction::ALL[d],
        }
    }

    /// Argmax of each head, lowest index on ties.
    pub fn greedy(&self) -> Action {
        let d = argmax(&self.dir_probs);
        if d == STOP_INDEX {
            return Action::Stop;
        }
        Action::Move {
            block: argmax(&self.block_probs),
            dir: Direction::ALL[d],
        }
    }

    /// Gradient of `w_logp * log P(action) + w_ent * H` w.r.t. the block and
    /// direction logits.
    pub fn logit_gradients(
        &self,
        action: Action,
        w_logp: f64,
        w_ent: f64,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let head = |log_probs: &[f64], chosen: Option<usize>| -> Vec<f64> {
            let h = entropy_of(log_probs);
            log_probs
                .iter()
                .enumerate()
                .map(|(k, &lp)| {
                    let p = lp.exp();
                    let logp_term = match chosen {
                        Some(c) => w_logp * (f64::from(u8::from(c == k)) - p),
                        None => 0.0,
                    };
                    logp_term - w_ent * p * (lp + h)
                })
                .collect()
        };
        let (block, dir) = match action {
            Action::Stop => (None, STOP_INDEX),
            Action::Move { block, dir } if block < self.num_blocks() => (Some(block), dir.index()),
            other => {
                return Err(Error::InvalidAction(format!(
                    "{other:?} has no probability"
                )))
            }
        };
        Ok((
            head(&self.block_log_probs, block),
            head(&self.dir_log_probs, Some(dir)),
        ))
    }
}

/// Instruction encoding tagged with the parameter revision it came from.
#[derive(Debug, Clone)]
pub struct EncodedInstruction {
    revision: u64,
    trace: Arc<InstructionTrace>,
}

impl EncodedInstruction {
    pub fn vector(&self) -> &[f64] {
        self.trace.vector()
    }

    pub fn trace(&self) -> &InstructionTrace {
        &self.trace
    }
}

/// Activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    revision: u64,
    trunk: TrunkTrace,
    pub dist: ActionDistribution,
}

impl ForwardTrace {
    pub fn hidden(&self) -> &[f64] {
        &self.trunk.hidden
    }

    pub fn instruction(&self) -> &Arc<InstructionTrace> {
        &self.trunk.instruction
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub trunk: Trunk,
    pub dir_weight: Tensor,
    pub dir_bias: Tensor,
    pub block_weight: Tensor,
    pub block_bias: Tensor,
    revision: u64,
}

impl PolicyParams {
    pub fn init(shape: NetShape, rng: &mut impl Rng) -> Result<Self> {
        let trunk = Trunk::init(shape, rng)?;
        let (dir_weight, block_weight) = Self::head_weights(&trunk.shape, rng);
        let n = trunk.shape.n_blocks;
        Ok(Self {
            trunk,
            dir_weight,
            dir_bias: Tensor::zeros(&[NUM_DIRECTIONS]),
            block_weight,
            block_bias: Tensor::zeros(&[n]),
            revision: 0,
        })
    }

    fn head_weights(shape: &NetShape, rng: &mut impl Rng) -> (Tensor, Tensor) {
        let h = shape.dims.hidden_dim;
        (
            Tensor::normal(&[NUM_DIRECTIONS, h], 0.01, rng),
            Tensor::normal(&[shape.n_blocks, h], 0.01, rng),
        )
    }

    /// Fresh direction head and bias.
    pub fn reinit_direction_head(&mut self, rng: &mut impl Rng) {
        let (dir_weight, _) = Self::head_weights(&self.trunk.shape, rng);
        self.dir_weight = dir_weight;
        self.dir_bias.fill(0.0);
        self.revision += 1;
    }

    pub fn reinit_block_head(&mut self, rng: &mut impl Rng) {
        let (_, block_weight) = Self::head_weights(&self.trunk.shape, rng);
        self.block_weight = block_weight;
        self.block_bias.fill(0.0);
        self.revision += 1;
    }

    pub fn shape(&self) -> &NetShape {
        &self.trunk.shape
    }

    pub fn encode(&self, instruction: &Instruction) -> Result<EncodedInstruction> {
        Ok(EncodedInstruction {
            revision: self.revision,
            trace: Arc::new(self.trunk.encode_instruction(&instruction.tokens)?),
        })
    }

    pub fn forward(&self, ctx: &AgentContext) -> Result<ForwardTrace> {
        let encoded = self.encode(&ctx.instruction)?;
        self.forward_encoded(&encoded, &ctx.observations, ctx.prev_action)
    }

    /// Forward pass reusing an instruction encoding from the same revision.
    pub fn forward_encoded(
        &self,
        encoded: &EncodedInstruction,
        observations: &[Observation],
        prev_action: Action,
    ) -> Result<ForwardTrace> {
        if encoded.revision != self.revision {
            return Err(Error::StaleTrace(format!(
                "instruction encoded at revision {}, parameters at {}",
                encoded.revision, self.revision
            )));
        }
        let trunk = self
            .trunk
            .forward(&encoded.trace, observations, prev_action)?;
        let dir_logits = self.dir_weight.affine(&trunk.hidden, &self.dir_bias);
        let block_logits = self.block_weight.affine(&trunk.hidden, &self.block_bias);
        Ok(ForwardTrace {
            revision: self.revision,
            dist: ActionDistribution::from_logits(&block_logits, &dir_logits)?,
            trunk,
        })
    }

    pub fn action_distribution(&self, ctx: &AgentContext) -> Result<ActionDistribution> {
        Ok(self.forward(ctx)?.dist)
    }

    /// Accumulates the gradient of `w_logp * log P(action) + w_ent * H` into
    /// `grads`, except the recurrent encoder, and returns the gradient w.r.t.
    /// the pooled instruction vector. Finish with
    /// [`PolicyParams::backward_instruction`].
    pub fn backward_partial(
        &self,
        trace: &ForwardTrace,
        action: Action,
        w_logp: f64,
        w_ent: f64,
        grads: &mut PolicyParams,
    ) -> Result<Vec<f64>> {
        if trace.revision != self.revision {
            return Err(Error::StaleTrace(format!(
                "trace from revision {}, parameters at {}",
                trace.revision, self.revision
            )));
        }
        let (d_block, d_dir) = trace.dist.logit_gradients(action, w_logp, w_ent)?;
        let hidden = &trace.trunk.hidden;
        grads.dir_weight.add_outer(&d_dir, hidden);
        grads.dir_bias.add_assign(&d_dir);
        grads.block_weight.add_outer(&d_block, hidden);
        grads.block_bias.add_assign(&d_block);
        let mut d_hidden = vec![0.0; hidden.len()];
        self.dir_weight.add_transpose_product(&d_dir, &mut d_hidden);
        self.block_weight
            .add_transpose_product(&d_block, &mut d_hidden);
        Ok(self
            .trunk
            .backward(&trace.trunk, &d_hidden, &mut grads.trunk))
    }

    pub fn backward_instruction(
        &self,
        instruction: &InstructionTrace,
        d_vector: &[f64],
        grads: &mut PolicyParams,
    ) {
        self.trunk
            .backward_instruction(instruction, d_vector, &mut grads.trunk);
    }

    /// Full gradient of `w_logp * log P(action) + w_ent * H` for one trace.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        action: Action,
        w_logp: f64,
        w_ent: f64,
        grads: &mut PolicyParams,
    ) -> Result<()> {
        let d_vector = self.backward_partial(trace, action, w_logp, w_ent, grads)?;
        self.backward_instruction(&trace.trunk.instruction, &d_vector, grads);
        Ok(())
    }

    pub fn gradient(
        &self,
        trace: &ForwardTrace,
        action: Action,
        w_logp: f64,
        w_ent: f64,
    ) -> Result<PolicyParams> {
        let mut grads = self.zeros_like();
        self.backward(trace, action, w_logp, w_ent, &mut grads)?;
        Ok(grads)
    }
}

impl ParamSet for PolicyParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.trunk.tensors();
        out.extend([
            ("dir_weight".to_string(), &self.dir_weight),
            ("dir_bias".to_string(), &self.dir_bias),
            ("block_weight".to_string(), &self.block_weight),
            ("block_bias".to_string(), &self.block_bias),
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.trunk.tensors_mut();
        out.extend([
            ("dir_weight".to_string(), &mut self.dir_weight),
            ("dir_bias".to_string(), &mut self.dir_bias),
            ("block_weight".to_string(), &mut self.block_weight),
            ("block_bias".to_string(), &mut self.block_bias),
        ]);
        out
    }

    fn revision(&self) -> u64 {
        self.revision
    }

    fn set_revision(&mut self, revision: u64) {
        self.revision = revision;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::Cell;
    use crate::lang::{tokenize, Vocabulary};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (BoardGeometry, PolicyParams, AgentContext) {
        let g = BoardGeometry::square(5, 3).unwrap();
        let vocab = Vocabulary::build(["move the bmw north"]);
        let shape = NetShape {
            vocab_size: vocab.len(),
            n_blocks: 3,
            height: 5,
            width: 5,
            history: 2,
            dims: ModelDims::desk(),
        };
        let params = PolicyParams::init(shape, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let start = WorldState::from_positions(
            &g,
            vec![
                Some(Cell::new(0, 0)),
                Some(Cell::new(2, 2)),
                Some(Cell::new(4, 1)),
            ],
        )
        .unwrap();
        let ctx =
            AgentContext::initial(&g, tokenize("move the bmw north", &vocab), &start, 2).unwrap();
        (g, params, ctx)
    }

    #[test]
    fn zero_heads_are_uniform() {
        let (_, mut params, ctx) = small();
        params.dir_weight.fill(0.0);
        params.block_weight.fill(0.0);
        let dist = params.action_distribution(&ctx).unwrap();
        assert!(dist.dir_probs.iter().all(|p| (p - 0.2).abs() < 1e-15));
        assert!(dist
            .block_probs
            .iter()
            .all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert!((dist.entropy() - (5f64.ln() + 3f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn selectable_actions_sum_to_one() {
        let (g, params, ctx) = small();
        let dist = params.action_distribution(&ctx).unwrap();
        let total: f64 = g.actions().into_iter().map(|a| dist.prob(a).unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(dist.log_prob(Action::None).is_err());
    }

    #[test]
    fn context_advances_history() {
        let (g, _, ctx) = small();
        assert_eq!(ctx.observations[0], g.empty_observation());
        let a = Action::Move {
            block: 1,
            dir: Direction::North,
        };
        let s = g.apply(
            &WorldState::from_positions(
                &g,
                vec![
                    Some(Cell::new(0, 0)),
                    Some(Cell::new(2, 2)),
                    Some(Cell::new(4, 1)),
                ],
            )
            .unwrap(),
            a,
        );
        let next = ctx.advance(&g, a, &s.next_state).unwrap();
        assert_eq!(next.observations[1], ctx.observations[2]);
        assert_eq!(next.prev_action, a);
        assert_eq!(next.history(), 2);
    }

    #[test]
    fn stale_trace_is_rejected() {
        let (_, mut params, ctx) = small();
        let trace = params.forward(&ctx).unwrap();
        params.set_revision(1);
        assert!(matches!(
            params.gradient(&trace, Action::Stop, 1.0, 0.0),
            Err(Error::StaleTrace(_))
        ));
    }

    #[test]
    fn singleton_average_is_identity() {
        let (_, params, ctx) = small();
        let dist = params.action_distribution(&ctx).unwrap();
        assert_eq!(ActionDistribution::average(&[dist.clone()]).unwrap(), dist);
        let avg = ActionDistribution::average(&[dist.clone(), dist.clone()]).unwrap();
        for (a, b) in avg.dir_probs.iter().zip(&dist.dir_probs) {
            assert!((a - b).abs() < 1e-15);
        }
    }
}
