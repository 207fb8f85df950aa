//! Supervised planner baseline: predict which block moves and where it ends
//! up from the instruction and the start observation, then let a
//! shortest-path planner execute the move.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::env::{Action, BoardGeometry, Cell, WorldState};
use crate::error::{Error, Result};
use crate::eval::{evaluate, replay_actor, stream_seed, Agent, EpisodeActor, Task};
use crate::lang::demo::reachable_cells;
use crate::lang::make_demonstration;
use crate::learn::{
    epoch_order, Adam, Algorithm, EpochMetrics, LearnConfig, Objective, Stopwatch, TrainData,
    TrainOutcome,
};
use crate::policy::{AgentContext, NetShape, ParamSet, Tensor, Trunk, TrunkTrace};

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerParams {
    pub trunk: Trunk,
    pub block_weight: Tensor,
    pub block_bias: Tensor,
    /// Predicts `(col, row)` of the target cell in block widths.
    pub coord_weight: Tensor,
    pub coord_bias: Tensor,
    revision: u64,
}

pub struct PlannerTrace {
    trunk: TrunkTrace,
    pub block_log_probs: Vec<f64>,
    pub coords: [f64; 2],
}

/// Supervision for one task: the moved block and its goal cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerTarget {
    pub block: usize,
    pub cell: Cell,
}

impl PlannerTarget {
    pub fn of(task: &Task) -> Result<Self> {
        let changed = task.start.changed_blocks(&task.goal);
        let [block] = changed[..] else {
            return Err(Error::InvalidExample {
                id: task.id.clone(),
                message: "expected exactly one moved block".into(),
            });
        };
        Ok(Self {
            block,
            cell: task.goal.position(block).expect("moved block is present"),
        })
    }
}

impl PlannerParams {
    pub fn init(shape: NetShape, rng: &mut impl Rng) -> Result<Self> {
        let trunk = Trunk::init(shape, rng)?;
        let (n, h) = (trunk.shape.n_blocks, trunk.shape.dims.hidden_dim);
        Ok(Self {
            block_weight: Tensor::normal(&[n, h], 0.01, rng),
            block_bias: Tensor::zeros(&[n]),
            coord_weight: Tensor::normal(&[2, h], 0.01, rng),
            coord_bias: Tensor::zeros(&[2]),
            trunk,
            revision: 0,
        })
    }

    pub fn forward(&self, ctx: &AgentContext) -> Result<PlannerTrace> {
        let encoding = std::sync::Arc::new(self.trunk.encode_instruction(&ctx.instruction.tokens)?);
        let trunk = self
            .trunk
            .forward(&encoding, &ctx.observations, ctx.prev_action)?;
        let logits = self.block_weight.affine(&trunk.hidden, &self.block_bias);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let coords = self.coord_weight.affine(&trunk.hidden, &self.coord_bias);
        Ok(PlannerTrace {
            block_log_probs: logits.iter().map(|z| z - lse).collect(),
            coords: [coords[0], coords[1]],
            trunk,
        })
    }

    /// Cross-entropy on the block plus squared distance to the target cell.
    pub fn loss(trace: &PlannerTrace, target: &PlannerTarget) -> f64 {
        let dx = trace.coords[0] - f64::from(target.cell.col);
        let dy = trace.coords[1] - f64::from(target.cell.row);
        -trace.block_log_probs[target.block] + dx * dx + dy * dy
    }

    /// Accumulates `scale` times the loss gradient into `grads`.
    pub fn backward(
        &self,
        trace: &PlannerTrace,
        target: &PlannerTarget,
        scale: f64,
        grads: &mut PlannerParams,
    ) {
        let d_block: Vec<f64> = trace
            .block_log_probs
            .iter()
            .enumerate()
            .map(|(k, lp)| scale * (lp.exp() - f64::from(u8::from(k == target.block))))
            .collect();
        let d_coord = [
            scale * 2.0 * (trace.coords[0] - f64::from(target.cell.col)),
            scale * 2.0 * (trace.coords[1] - f64::from(target.cell.row)),
        ];
        let hidden = &trace.trunk.hidden;
        grads.block_weight.add_outer(&d_block, hidden);
        grads.block_bias.add_assign(&d_block);
        grads.coord_weight.add_outer(&d_coord, hidden);
        grads.coord_bias.add_assign(&d_coord);
        let mut d_hidden = vec![0.0; hidden.len()];
        self.block_weight
            .add_transpose_product(&d_block, &mut d_hidden);
        self.coord_weight
            .add_transpose_product(&d_coord, &mut d_hidden);
        let d_instruction = self
            .trunk
            .backward(&trace.trunk, &d_hidden, &mut grads.trunk);
        self.trunk
            .backward_instruction(&trace.trunk.instruction, &d_instruction, &mut grads.trunk);
    }

    /// Predicted block and target cell snapped to the board.
    pub fn predict(&self, ctx: &AgentContext, geometry: &BoardGeometry) -> Result<(usize, Cell)> {
        let trace = self.forward(ctx)?;
        let mut block = 0;
        for (i, lp) in trace.block_log_probs.iter().enumerate() {
            if *lp > trace.block_log_probs[block] {
                block = i;
            }
        }
        let snap = |x: f64, n: usize| x.round().clamp(0.0, (n - 1) as f64) as i32;
        let cell = Cell::new(
            snap(trace.coords[0], geometry.width()),
            snap(trace.coords[1], geometry.height()),
        );
        Ok((block, cell))
    }
}

impl ParamSet for PlannerParams {
    fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = self.trunk.tensors();
        out.extend([
            ("block_weight".to_string(), &self.block_weight),
            ("block_bias".to_string(), &self.block_bias),
            ("coord_weight".to_string(), &self.coord_weight),
            ("coord_bias".to_string(), &self.coord_bias),
        ]);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = self.trunk.tensors_mut();
        out.extend([
            ("block_weight".to_string(), &mut self.block_weight),
            ("block_bias".to_string(), &mut self.block_bias),
            ("coord_weight".to_string(), &mut self.coord_weight),
            ("coord_bias".to_string(), &mut self.coord_bias),
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

/// Moves the predicted block along a shortest path to the reachable cell
/// nearest the predicted target, then stops.
pub fn plan_actions(
    geometry: &BoardGeometry,
    start: &WorldState,
    block: usize,
    target: Cell,
) -> Result<Vec<Action>> {
    let Some(from) = start.position(block) else {
        return Ok(vec![Action::Stop]);
    };
    let dest = reachable_cells(geometry, start, block)
        .into_iter()
        .min_by(|(a, da), (b, db)| {
            a.euclidean(target)
                .total_cmp(&b.euclidean(target))
                .then(da.cmp(db))
        })
        .map_or(from, |(c, _)| c);
    if dest == from {
        return Ok(vec![Action::Stop]);
    }
    let goal = start.clone().with_block(block, Some(dest));
    Ok(make_demonstration(geometry, start, &goal)?
        .actions()
        .collect())
}

pub struct PlannerAgent<'p> {
    pub params: &'p PlannerParams,
    pub history: usize,
}

impl Agent for PlannerAgent<'_> {
    fn begin<'a>(
        &'a self,
        geometry: &'a BoardGeometry,
        task: &'a Task,
        _: u64,
    ) -> Result<Box<dyn EpisodeActor + 'a>> {
        let ctx = AgentContext::initial(
            geometry,
            task.instruction.clone(),
            &task.start,
            self.history,
        )?;
        let (block, cell) = self.params.predict(&ctx, geometry)?;
        Ok(replay_actor(plan_actions(
            geometry,
            &task.start,
            block,
            cell,
        )?))
    }
}

pub struct PlannerTrainer<'d> {
    data: TrainData<'d>,
    config: LearnConfig,
    inputs: Vec<(AgentContext, PlannerTarget)>,
    pub params: PlannerParams,
    pub adam: Adam<PlannerParams>,
    pub epochs_done: usize,
    pub metrics: Vec<EpochMetrics>,
    pub losses: Vec<f64>,
    pub skipped_updates: usize,
}

impl<'d> PlannerTrainer<'d> {
    pub fn new(data: TrainData<'d>, config: LearnConfig) -> Result<Self> {
        config.validate(Algorithm::Planner)?;
        let inputs = data
            .train
            .iter()
            .map(|t| {
                let ctx = AgentContext::initial(
                    data.geometry,
                    t.instruction.clone(),
                    &t.start,
                    config.history,
                )?;
                Ok((ctx, PlannerTarget::of(t)?))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "init", 0));
        let params = PlannerParams::init(config.net_shape(data.vocab, data.geometry), &mut rng)?;
        Ok(Self {
            adam: Adam::new(&params),
            data,
            config,
            inputs,
            params,
            epochs_done: 0,
            metrics: Vec::new(),
            losses: Vec::new(),
            skipped_updates: 0,
        })
    }

    pub fn train_epoch(&mut self) -> Result<f64> {
        let order = epoch_order(
            self.inputs.len(),
            stream_seed(self.config.seed, "planner", 0),
            self.epochs_done,
        );
        let mut total = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let mut grads = self.params.zeros_like();
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (ctx, target) = &self.inputs[i];
                let trace = self.params.forward(ctx)?;
                total += PlannerParams::loss(&trace, target);
                self.params.backward(&trace, target, scale, &mut grads);
            }
            match self.adam.update(
                &mut self.params,
                &grads,
                self.config.lr_supervised,
                self.config.clip_norm,
                Objective::Minimize,
            ) {
                Ok(_) => {}
                Err(Error::NonFiniteGradient(_)) => self.skipped_updates += 1,
                Err(e) => return Err(e),
            }
        }
        self.epochs_done += 1;
        let loss = total / self.inputs.len().max(1) as f64;
        self.losses.push(loss);
        Ok(loss)
    }

    pub fn run_epoch(&mut self) -> Result<EpochMetrics> {
        let clock = Stopwatch::new(self.config.record_wall_time);
        self.train_epoch()?;
        let agent = PlannerAgent {
            params: &self.params,
            history: self.config.history,
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

    pub fn into_outcome(self) -> TrainOutcome<PlannerParams> {
        TrainOutcome {
            params: self.params,
            metrics: self.metrics,
            losses: self.losses,
            skipped_updates: self.skipped_updates,
        }
    }
}

pub fn train_planner_supervised(
    data: TrainData<'_>,
    config: &LearnConfig,
) -> Result<TrainOutcome<PlannerParams>> {
    let mut trainer = PlannerTrainer::new(data, config.clone())?;
    while trainer.epochs_done < config.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_outcome())
}
