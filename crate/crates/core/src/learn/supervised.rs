//! Maximum-likelihood training on demonstrations.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::env::{Action, BoardGeometry};
use crate::error::{Error, Result};
use crate::eval::{evaluate, stream_seed, DecodeMode, PolicyAgent, Task};
use crate::learn::{
    epoch_order, Adam, EpochMetrics, LearnConfig, Objective, Stopwatch, TrainData, TrainOutcome,
};
use crate::policy::{AgentContext, ParamSet, PolicyParams};

/// Freshly initialized policy for the data's vocabulary and board.
pub fn initial_policy(data: &TrainData<'_>, config: &LearnConfig) -> Result<PolicyParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(config.seed, "init", 0));
    PolicyParams::init(config.net_shape(data.vocab, data.geometry), &mut rng)
}

/// A demonstration step with the context the agent would see there.
#[derive(Debug, Clone)]
pub(crate) struct DemoPair {
    pub ctx: AgentContext,
    pub action: Action,
}

pub(crate) fn demo_pairs(
    geometry: &BoardGeometry,
    tasks: &[Task],
    history: usize,
) -> Result<Vec<DemoPair>> {
    let mut out = Vec::new();
    for task in tasks {
        let Some(demo) = &task.demonstration else {
            continue;
        };
        let mut ctx =
            AgentContext::initial(geometry, task.instruction.clone(), &task.start, history)?;
        for (j, (_, action)) in demo.steps.iter().enumerate() {
            out.push(DemoPair {
                ctx: ctx.clone(),
                action: *action,
            });
            if let Some((next, _)) = demo.steps.get(j + 1) {
                ctx = ctx.advance(geometry, *action, next)?;
            }
        }
    }
    Ok(out)
}

pub struct SupervisedTrainer<'d> {
    data: TrainData<'d>,
    config: LearnConfig,
    pairs: Vec<DemoPair>,
    pub params: PolicyParams,
    pub adam: Adam<PolicyParams>,
    pub epochs_done: usize,
    pub metrics: Vec<EpochMetrics>,
    pub losses: Vec<f64>,
    pub skipped_updates: usize,
}

impl<'d> SupervisedTrainer<'d> {
    pub fn new(data: TrainData<'d>, config: LearnConfig, params: PolicyParams) -> Result<Self> {
        let pairs = demo_pairs(data.geometry, data.train, config.history)?;
        if pairs.is_empty() {
            return Err(Error::MissingDemonstration("every training example".into()));
        }
        Ok(Self {
            adam: Adam::new(&params),
            data,
            config,
            pairs,
            params,
            epochs_done: 0,
            metrics: Vec::new(),
            losses: Vec::new(),
            skipped_updates: 0,
        })
    }

    /// One pass over the demonstration steps in seeded minibatches. Returns
    /// the mean negative log-likelihood seen during the pass.
    pub fn train_epoch(&mut self) -> Result<f64> {
        let epoch = self.epochs_done;
        let order = epoch_order(
            self.pairs.len(),
            stream_seed(self.config.seed, "supervised", 0),
            epoch,
        );
        let mut nll = 0.0;
        for batch in order.chunks(self.config.batch_size) {
            let mut grads = self.params.zeros_like();
            let w = 1.0 / batch.len() as f64;
            for &i in batch {
                let pair = &self.pairs[i];
                let trace = self.params.forward(&pair.ctx)?;
                nll -= trace.dist.log_prob(pair.action)?;
                self.params
                    .backward(&trace, pair.action, w, 0.0, &mut grads)?;
            }
            match self.adam.update(
                &mut self.params,
                &grads,
                self.config.lr_supervised,
                self.config.clip_norm,
                Objective::Maximize,
            ) {
                Ok(_) => {}
                Err(Error::NonFiniteGradient(_)) => self.skipped_updates += 1,
                Err(e) => return Err(e),
            }
        }
        self.epochs_done += 1;
        let loss = nll / self.pairs.len() as f64;
        self.losses.push(loss);
        Ok(loss)
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
            losses: self.losses,
            skipped_updates: self.skipped_updates,
        }
    }
}

pub fn train_supervised(
    data: TrainData<'_>,
    config: &LearnConfig,
) -> Result<TrainOutcome<PolicyParams>> {
    config.validate(crate::learn::Algorithm::Supervised)?;
    let params = initial_policy(&data, config)?;
    let mut trainer = SupervisedTrainer::new(data, config.clone(), params)?;
    while trainer.epochs_done < config.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_outcome())
}
