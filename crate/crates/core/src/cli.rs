//! Experiment configuration and the commands behind the `blocks` binary.
//!
//! A configuration file is TOML:
//!
//! ```toml
//! algo = "cbpg"
//! preset = "desk"
//! seed = 0
//! out = "runs/cbpg"
//!
//! [geometry]
//! width = 5
//! height = 5
//! blocks = 3
//!
//! [data.synthetic]
//! count = 250
//! seed = 0
//!
//! [learn]
//! epochs = 50
//! ```
//!
//! `[learn]` overrides the fields of the chosen preset. Relative paths are
//! taken relative to the configuration file.

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Action, BoardGeometry, WorldState};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, run_episode, DecodeMode, DemonstrationAgent, EvalSettings, PolicyAgent, RandomAgent,
    StopAgent, SuiteReport, Task,
};
use crate::lang::{
    generate_synthetic, load_corpus, save_corpus, split_dataset, template_vocabulary, TaskExample,
    TemplateSet, Vocabulary,
};
use crate::learn::{
    apply_demo_fraction, metrics_csv, reward_spec, Adam, Algorithm, Credit, DqnTrainer,
    EpochMetrics, LearnConfig, PgTrainer, PlannerAgent, PlannerParams, PlannerTrainer, Preset,
    QAgent, QParams, SupervisedTrainer, TrainData,
};
use crate::policy::checkpoint::{Checkpoint, CheckpointHeader};
use crate::policy::{ParamSet, PolicyParams};
use crate::reward::{check_shaping_safety, OrderReport, SmallMdp};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometrySpec {
    pub width: usize,
    pub height: usize,
    /// Number of blocks, taken from the standard logo list.
    #[serde(default)]
    pub blocks: usize,
    /// Explicit block ids; overrides `blocks`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_ids: Option<Vec<String>>,
}

impl Default for GeometrySpec {
    fn default() -> Self {
        Self {
            width: 5,
            height: 5,
            blocks: 3,
            block_ids: None,
        }
    }
}

impl GeometrySpec {
    pub fn build(&self) -> Result<BoardGeometry> {
        match &self.block_ids {
            Some(ids) => BoardGeometry::new(self.width, self.height, ids.clone()),
            None => {
                let ids = BoardGeometry::standard(self.blocks)?.block_ids().to_vec();
                BoardGeometry::new(self.width, self.height, ids)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Corpus files. Without `dev` and `test` the training file is split
    /// 70/10/20.
    Corpus {
        train: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        dev: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test: Option<PathBuf>,
    },
    /// Generated examples, split 70/10/20.
    Synthetic {
        count: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        templates: TemplateSet,
    },
}

/// A fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algo: Algorithm,
    pub preset: Preset,
    pub seed: u64,
    pub out: PathBuf,
    pub geometry: GeometrySpec,
    pub data: DataSource,
    pub learn: LearnConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub algo: Option<String>,
    pub preset: Option<String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base, overrides)
    }

    /// Parses a configuration, expands the preset under `[learn]` and
    /// validates the result. Relative paths are joined onto `base`.
    pub fn parse(text: &str, base: &Path, overrides: &Overrides) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(algo) = &overrides.algo {
            table.insert("algo".into(), algo.clone().into());
        }
        if let Some(preset) = &overrides.preset {
            table.insert("preset".into(), preset.clone().into());
        }
        if let Some(seed) = overrides.seed {
            table.insert("seed".into(), toml_int(seed)?);
        }
        if let Some(out) = &overrides.out {
            table.insert("out".into(), out.display().to_string().into());
        }

        let algo: Algorithm = take_str(&mut table, "algo")?
            .ok_or_else(|| Error::Config("algo: missing".into()))?
            .parse()?;
        let preset: Preset = take_str(&mut table, "preset")?
            .as_deref()
            .unwrap_or("desk")
            .parse()?;
        let seed = match table.remove("seed") {
            None => 0,
            Some(toml::Value::Integer(s)) if s >= 0 => s as u64,
            Some(other) => {
                return Err(Error::Config(format!(
                    "seed: expected a nonnegative integer, got {other}"
                )))
            }
        };
        let out = take_str(&mut table, "out")?
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs").join(algo.name()));

        let mut learn =
            toml::Table::try_from(preset.config()).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(user) = table.remove("learn") {
            let toml::Value::Table(user) = user else {
                return Err(Error::Config("learn: expected a table".into()));
            };
            merge(&mut learn, user);
        }
        learn.insert("seed".into(), toml_int(seed)?);
        let learn: LearnConfig = toml::Value::Table(learn)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("learn: {}", e.message())))?;

        let geometry: GeometrySpec = match table.remove("geometry") {
            Some(v) => v.try_into().map_err(|e: toml::de::Error| {
                Error::Config(format!("geometry: {}", e.message()))
            })?,
            None => GeometrySpec::default(),
        };
        let data = match table.remove("data") {
            Some(toml::Value::Table(t)) if t.len() == 1 => toml::Value::Table(t)
                .try_into()
                .map_err(|e: toml::de::Error| Error::Config(format!("data: {}", e.message())))?,
            Some(_) => {
                return Err(Error::Config(
                    "data: give exactly one of [data.corpus] or [data.synthetic]".into(),
                ))
            }
            None => return Err(Error::Config("data: missing".into())),
        };
        if let Some(key) = table.keys().next() {
            return Err(Error::Config(format!("unknown field {key:?}")));
        }

        let config = Self {
            algo,
            preset,
            seed,
            out: resolve(base, &out),
            geometry,
            data: match data {
                DataSource::Corpus { train, dev, test } => DataSource::Corpus {
                    train: resolve(base, &train),
                    dev: dev.map(|p| resolve(base, &p)),
                    test: test.map(|p| resolve(base, &p)),
                },
                synthetic => synthetic,
            },
            learn,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.geometry.build()?;
        if let DataSource::Synthetic { count: 0, .. } = self.data {
            return Err(Error::Config(
                "data.synthetic.count: must be at least 1".into(),
            ));
        }
        self.learn.validate(self.algo)
    }

    pub fn to_json(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(self)?)
    }
}

fn toml_int(x: u64) -> Result<toml::Value> {
    i64::try_from(x)
        .map(toml::Value::Integer)
        .map_err(|_| Error::Config(format!("{x} is too large")))
}

fn take_str(table: &mut toml::Table, key: &str) -> Result<Option<String>> {
    match table.remove(key) {
        None => Ok(None),
        Some(toml::Value::String(s)) => Ok(Some(s)),
        Some(other) => Err(Error::Config(format!(
            "{key}: expected a string, got {other}"
        ))),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loaded examples, split and tokenized.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub geometry: BoardGeometry,
    pub vocab: Vocabulary,
    pub train: Vec<Task>,
    pub dev: Vec<Task>,
    pub test: Vec<Task>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "dev" => Ok(Self::Dev),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!(
                "unknown split {other:?} (expected train, dev or test)"
            ))),
        }
    }
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Dev => "dev",
            Self::Test => "test",
        }
    }
}

impl Dataset {
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let geometry = config.geometry.build()?;
        let (vocab, train, dev, test) = match &config.data {
            DataSource::Synthetic {
                count,
                seed,
                templates,
            } => {
                let examples = generate_synthetic(*seed, *count, &geometry, templates)?;
                let (train, dev, test) = split_dataset(&examples, *seed);
                (template_vocabulary(&geometry), train, dev, test)
            }
            DataSource::Corpus { train, dev, test } => {
                let train_examples = load_corpus(train, &geometry)?;
                let (train, dev, test) = match (dev, test) {
                    (None, None) => split_dataset(&train_examples, config.seed),
                    (dev, test) => {
                        let load = |p: &Option<PathBuf>| -> Result<Vec<TaskExample>> {
                            p.as_ref()
                                .map_or(Ok(Vec::new()), |p| load_corpus(p, &geometry))
                        };
                        (train_examples, load(dev)?, load(test)?)
                    }
                };
                let vocab = Vocabulary::build(train.iter().map(|e| e.instruction.as_str()));
                (vocab, train, dev, test)
            }
        };
        let train = apply_demo_fraction(
            &Task::from_examples(&train, &vocab),
            config.learn.demo_fraction,
            config.seed,
        );
        Ok(Self {
            dev: Task::from_examples(&dev, &vocab),
            test: Task::from_examples(&test, &vocab),
            geometry,
            vocab,
            train,
        })
    }

    pub fn split(&self, split: Split) -> &[Task] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Training data monitored on the dev split.
    pub fn train_data(&self) -> TrainData<'_> {
        TrainData {
            geometry: &self.geometry,
            vocab: &self.vocab,
            train: &self.train,
            monitor: &self.dev,
        }
    }
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "{} is in use by another command (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        std::io::Write::write_all(&mut f, bytes)?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub path: PathBuf,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
}

/// Writes the synthetic examples as `corpus.jsonl` in the output directory.
pub fn gen_data(config: &ExperimentConfig) -> Result<GenSummary> {
    let DataSource::Synthetic {
        count,
        seed,
        templates,
    } = &config.data
    else {
        return Err(Error::Config(
            "gen-data needs a [data.synthetic] source".into(),
        ));
    };
    let geometry = config.geometry.build()?;
    let examples = generate_synthetic(*seed, *count, &geometry, templates)?;
    let (train, dev, test) = split_dataset(&examples, *seed);
    let _lock = DirLock::acquire(&config.out)?;
    let path = config.out.join("corpus.jsonl");
    save_corpus(&path, &examples, &geometry)?;
    Ok(GenSummary {
        path,
        train: train.len(),
        dev: dev.len(),
        test: test.len(),
    })
}

const POLICY_KIND: &str = "policy";
const Q_KIND: &str = "q";
const PLANNER_KIND: &str = "planner";

/// Progress stored with a checkpoint so training can continue.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub adam_step: u64,
    pub skipped_updates: usize,
    pub metrics: Vec<EpochMetrics>,
    #[serde(default)]
    pub losses: Vec<f64>,
}

/// A trainer that can be driven epoch by epoch and checkpointed.
trait Session {
    fn kind(&self) -> &'static str;
    fn epochs_done(&self) -> usize;
    fn run_epoch(&mut self) -> Result<EpochMetrics>;
    fn state(&self) -> TrainState;
    fn save_tensors(&self, ckpt: &mut Checkpoint);
}

fn adam_tensors<P: ParamSet>(ckpt: &mut Checkpoint, params: &P, adam: &Adam<P>) {
    ckpt.push_params("", params);
    ckpt.push_params("adam.m.", &adam.m);
    ckpt.push_params("adam.v.", &adam.v);
}

fn restore_adam<P: ParamSet>(
    ckpt: &Checkpoint,
    params: &mut P,
    adam: &mut Adam<P>,
    step: u64,
) -> Result<()> {
    ckpt.load_params("", params)?;
    ckpt.load_params("adam.m.", &mut adam.m)?;
    ckpt.load_params("adam.v.", &mut adam.v)?;
    adam.step = step;
    Ok(())
}

impl Session for PgTrainer<'_> {
    fn kind(&self) -> &'static str {
        POLICY_KIND
    }
    fn epochs_done(&self) -> usize {
        self.epochs_done
    }
    fn run_epoch(&mut self) -> Result<EpochMetrics> {
        PgTrainer::run_epoch(self)
    }
    fn state(&self) -> TrainState {
        TrainState {
            epochs_done: self.epochs_done,
            adam_step: self.adam.step,
            skipped_updates: self.skipped_updates,
            metrics: self.metrics.clone(),
            losses: Vec::new(),
        }
    }
    fn save_tensors(&self, ckpt: &mut Checkpoint) {
        adam_tensors(ckpt, &self.params, &self.adam);
    }
}

impl Session for SupervisedTrainer<'_> {
    fn kind(&self) -> &'static str {
        POLICY_KIND
    }
    fn epochs_done(&self) -> usize {
        self.epochs_done
    }
    fn run_epoch(&mut self) -> Result<EpochMetrics> {
        SupervisedTrainer::run_epoch(self)
    }
    fn state(&self) -> TrainState {
        TrainState {
            epochs_done: self.epochs_done,
            adam_step: self.adam.step,
            skipped_updates: self.skipped_updates,
            metrics: self.metrics.clone(),
            losses: self.losses.clone(),
        }
    }
    fn save_tensors(&self, ckpt: &mut Checkpoint) {
        adam_tensors(ckpt, &self.params, &self.adam);
    }
}

impl Session for PlannerTrainer<'_> {
    fn kind(&self) -> &'static str {
        PLANNER_KIND
    }
    fn epochs_done(&self) -> usize {
        self.epochs_done
    }
    fn run_epoch(&mut self) -> Result<EpochMetrics> {
        PlannerTrainer::run_epoch(self)
    }
    fn state(&self) -> TrainState {
        TrainState {
            epochs_done: self.epochs_done,
            adam_step: self.adam.step,
            skipped_updates: self.skipped_updates,
            metrics: self.metrics.clone(),
            losses: self.losses.clone(),
        }
    }
    fn save_tensors(&self, ckpt: &mut Checkpoint) {
        adam_tensors(ckpt, &self.params, &self.adam);
    }
}

impl Session for DqnTrainer<'_> {
    fn kind(&self) -> &'static str {
        Q_KIND
    }
    fn epochs_done(&self) -> usize {
        self.epochs_done
    }
    fn run_epoch(&mut self) -> Result<EpochMetrics> {
        DqnTrainer::run_epoch(self)
    }
    fn state(&self) -> TrainState {
        TrainState {
            epochs_done: self.epochs_done,
            adam_step: self.adam.step,
            skipped_updates: self.skipped_updates,
            metrics: self.metrics.clone(),
            losses: Vec::new(),
        }
    }
    fn save_tensors(&self, ckpt: &mut Checkpoint) {
        ckpt.push_params("", &self.online);
    }
}

fn restore_state<S>(
    state: &TrainState,
    epochs_done: &mut usize,
    metrics: &mut Vec<EpochMetrics>,
    skipped: &mut S,
) where
    S: From<usize> + Copy,
{
    *epochs_done = state.epochs_done;
    *metrics = state.metrics.clone();
    *skipped = S::from(state.skipped_updates);
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs_done: usize,
    pub last: Option<EpochMetrics>,
    pub best: Option<EpochMetrics>,
    pub out: PathBuf,
}

/// Runs the configured trainer. After every epoch it rewrites
/// `metrics.csv` and `last.ckpt`, and `best.ckpt` when the dev mean error
/// improves. With `resume`, continues from `last.ckpt`.
pub fn train(config: &ExperimentConfig, resume: bool) -> Result<TrainSummary> {
    if !config.algo.is_trained() {
        return Err(Error::Config(format!(
            "algo: {} has nothing to train; evaluate it directly",
            config.algo.name()
        )));
    }
    let dataset = Dataset::load(config)?;
    let _lock = DirLock::acquire(&config.out)?;
    let last_path = config.out.join("last.ckpt");
    let previous = if resume {
        let ckpt = Checkpoint::load(&last_path)?;
        check_resumable(config, &ckpt.header)?;
        Some(ckpt)
    } else {
        None
    };
    let data = dataset.train_data();
    let learn = config.learn.clone();
    let shape = learn.net_shape(&dataset.vocab, &dataset.geometry);
    let mut session: Box<dyn Session + '_> = match config.algo {
        Algorithm::Cbpg | Algorithm::Reinforce => {
            let credit = if config.algo == Algorithm::Cbpg {
                Credit::Immediate
            } else {
                Credit::Total
            };
            let params = crate::learn::supervised::initial_policy(&data, &learn)?;
            let mut t = PgTrainer::new(data, learn.clone(), credit, params)?;
            match &previous {
                Some(ckpt) => {
                    let s = train_state(&ckpt.header)?;
                    restore_adam(ckpt, &mut t.params, &mut t.adam, s.adam_step)?;
                    restore_state(
                        &s,
                        &mut t.epochs_done,
                        &mut t.metrics,
                        &mut t.skipped_updates,
                    );
                }
                None => t.supervised_init()?,
            }
            Box::new(t)
        }
        Algorithm::Supervised => {
            let params = crate::learn::supervised::initial_policy(&data, &learn)?;
            let mut t = SupervisedTrainer::new(data, learn.clone(), params)?;
            if let Some(ckpt) = &previous {
                let s = train_state(&ckpt.header)?;
                restore_adam(ckpt, &mut t.params, &mut t.adam, s.adam_step)?;
                restore_state(
                    &s,
                    &mut t.epochs_done,
                    &mut t.metrics,
                    &mut t.skipped_updates,
                );
                t.losses = s.losses;
            }
            Box::new(t)
        }
        Algorithm::Planner => {
            let mut t = PlannerTrainer::new(data, learn.clone())?;
            if let Some(ckpt) = &previous {
                let s = train_state(&ckpt.header)?;
                restore_adam(ckpt, &mut t.params, &mut t.adam, s.adam_step)?;
                restore_state(
                    &s,
                    &mut t.epochs_done,
                    &mut t.metrics,
                    &mut t.skipped_updates,
                );
                t.losses = s.losses;
            }
            Box::new(t)
        }
        Algorithm::Dqn => {
            if previous.is_some() {
                return Err(Error::Config(
                    "dqn runs cannot be resumed: the replay memory is not checkpointed".into(),
                ));
            }
            Box::new(DqnTrainer::new(data, learn.clone())?)
        }
        Algorithm::Stop | Algorithm::Random => unreachable!("checked above"),
    };

    let config_json = config.to_json()?;
    write_atomic(
        &config.out.join("config.json"),
        serde_json::to_string_pretty(&config_json)?.as_bytes(),
    )?;
    let header = |state: &TrainState, kind: &str| -> Result<CheckpointHeader> {
        Ok(CheckpointHeader {
            kind: kind.to_string(),
            shape: shape.clone(),
            vocab: dataset.vocab.clone(),
            config: config_json.clone(),
            state: serde_json::to_value(state)?,
        })
    };
    let best_of = |rows: &[EpochMetrics]| -> Option<EpochMetrics> {
        rows.iter()
            .fold(None, |best: Option<&EpochMetrics>, r| match best {
                Some(b) if b.mean_error <= r.mean_error => Some(b),
                _ => Some(r),
            })
            .cloned()
    };
    let mut best = best_of(&session.state().metrics);
    while session.epochs_done() < learn.epochs {
        let row = session.run_epoch()?;
        let state = session.state();
        write_atomic(
            &config.out.join("metrics.csv"),
            metrics_csv(&state.metrics).as_bytes(),
        )?;
        let mut ckpt = Checkpoint::new(header(&state, session.kind())?);
        session.save_tensors(&mut ckpt);
        write_atomic(&last_path, &ckpt.to_bytes()?)?;
        if best.as_ref().is_none_or(|b| row.mean_error < b.mean_error) {
            write_atomic(&config.out.join("best.ckpt"), &ckpt.to_bytes()?)?;
            best = Some(row);
        }
    }
    let state = session.state();
    Ok(TrainSummary {
        epochs_done: state.epochs_done,
        last: state.metrics.last().cloned(),
        best,
        out: config.out.clone(),
    })
}

fn train_state(header: &CheckpointHeader) -> Result<TrainState> {
    serde_json::from_value(header.state.clone())
        .map_err(|e| Error::Checkpoint(format!("trainer state: {e}")))
}

/// A checkpoint may be continued when everything but the epoch budget
/// matches the current configuration.
fn check_resumable(config: &ExperimentConfig, header: &CheckpointHeader) -> Result<()> {
    let mut saved: ExperimentConfig = serde_json::from_value(header.config.clone())
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    saved.learn.epochs = config.learn.epochs;
    if &saved != config {
        return Err(Error::Config(
            "checkpoint was trained with a different configuration".into(),
        ));
    }
    Ok(())
}

/// Trained parameters of any kind.
pub enum Model {
    Policy(PolicyParams),
    Q(QParams),
    Planner(PlannerParams),
}

impl Model {
    /// Loads a checkpoint's parameters and checks them against the board
    /// and vocabulary of the dataset.
    pub fn load(path: &Path, dataset: &Dataset, history: usize) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let h = &ckpt.header;
        if h.vocab != dataset.vocab {
            return Err(Error::Shape(format!(
                "{}: vocabulary differs from the dataset's",
                path.display()
            )));
        }
        if (
            h.shape.n_blocks,
            h.shape.height,
            h.shape.width,
            h.shape.history,
        ) != (
            dataset.geometry.num_blocks(),
            dataset.geometry.height(),
            dataset.geometry.width(),
            history,
        ) {
            return Err(Error::Shape(format!(
                "{}: trained for a {}x{} board with {} blocks and history {}",
                path.display(),
                h.shape.width,
                h.shape.height,
                h.shape.n_blocks,
                h.shape.history
            )));
        }
        // parameter values are overwritten below, the seed is irrelevant
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Ok(match h.kind.as_str() {
            POLICY_KIND => {
                let mut p = PolicyParams::init(h.shape.clone(), &mut rng)?;
                ckpt.load_params("", &mut p)?;
                Model::Policy(p)
            }
            Q_KIND => {
                let mut p = QParams::init(h.shape.clone(), &mut rng)?;
                ckpt.load_params("", &mut p)?;
                Model::Q(p)
            }
            PLANNER_KIND => {
                let mut p = PlannerParams::init(h.shape.clone(), &mut rng)?;
                ckpt.load_params("", &mut p)?;
                Model::Planner(p)
            }
            other => {
                return Err(Error::Checkpoint(format!(
                    "unknown parameter kind {other:?}"
                )))
            }
        })
    }
}

/// What to evaluate.
#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    /// Checkpoint of a trained model; defaults to `best.ckpt` in the output
    /// directory.
    pub checkpoint: Option<PathBuf>,
    /// Policy checkpoints whose head probabilities are averaged.
    pub ensemble: Vec<PathBuf>,
    pub split: Option<Split>,
    pub sample: bool,
    /// Replay the demonstrations instead of running a model.
    pub demonstrations: bool,
}

fn default_checkpoint(config: &ExperimentConfig, given: &Option<PathBuf>) -> PathBuf {
    given
        .clone()
        .unwrap_or_else(|| config.out.join("best.ckpt"))
}

/// Evaluates a model or baseline on one split and writes
/// `eval-<split>/episodes.jsonl`, `aggregate.csv` and `report.json`.
pub fn eval(config: &ExperimentConfig, options: &EvalOptions) -> Result<SuiteReport> {
    let dataset = Dataset::load(config)?;
    let split = options.split.unwrap_or(Split::Test);
    let tasks = dataset.split(split);
    let settings = config.learn.eval_settings();
    let mode = if options.sample {
        DecodeMode::Sample
    } else {
        DecodeMode::Greedy
    };
    let report = if options.demonstrations {
        evaluate(&DemonstrationAgent, &dataset.geometry, tasks, &settings)?
    } else if !options.ensemble.is_empty() {
        let members = options
            .ensemble
            .iter()
            .map(|p| match Model::load(p, &dataset, config.learn.history)? {
                Model::Policy(params) => Ok(params),
                _ => Err(Error::Config(format!(
                    "{}: ensembles need policy checkpoints",
                    p.display()
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        let agent = PolicyAgent::new(members.iter().collect(), mode)?;
        evaluate(&agent, &dataset.geometry, tasks, &settings)?
    } else {
        match config.algo {
            Algorithm::Stop => evaluate(&StopAgent, &dataset.geometry, tasks, &settings)?,
            Algorithm::Random => evaluate(&RandomAgent, &dataset.geometry, tasks, &settings)?,
            _ => {
                let path = default_checkpoint(config, &options.checkpoint);
                evaluate_model(
                    &Model::load(&path, &dataset, config.learn.history)?,
                    mode,
                    &dataset,
                    tasks,
                    &settings,
                )?
            }
        }
    };
    let dir = config.out.join(format!("eval-{}", split.name()));
    fs::create_dir_all(&dir)?;
    let _lock = DirLock::acquire(&dir)?;
    write_atomic(
        &dir.join("episodes.jsonl"),
        report.episodes_jsonl()?.as_bytes(),
    )?;
    let mut aggregate = String::from(crate::eval::AGGREGATE_HEADER);
    aggregate.push('\n');
    aggregate.push_str(&report.aggregate_row());
    aggregate.push('\n');
    write_atomic(&dir.join("aggregate.csv"), aggregate.as_bytes())?;
    let echo = serde_json::json!({
        "config": config.to_json()?,
        "split": split.name(),
        "checkpoint": options.checkpoint,
        "ensemble": options.ensemble,
        "decode": if options.sample { "sample" } else { "greedy" },
        "demonstrations": options.demonstrations,
        "aggregate": report.aggregate_row(),
    });
    write_atomic(
        &dir.join("report.json"),
        serde_json::to_string_pretty(&echo)?.as_bytes(),
    )?;
    Ok(report)
}

fn evaluate_model(
    model: &Model,
    mode: DecodeMode,
    dataset: &Dataset,
    tasks: &[Task],
    settings: &EvalSettings,
) -> Result<SuiteReport> {
    match model {
        Model::Policy(p) => evaluate(
            &PolicyAgent::single(p, mode),
            &dataset.geometry,
            tasks,
            settings,
        ),
        Model::Q(p) => evaluate(&QAgent { params: p }, &dataset.geometry, tasks, settings),
        Model::Planner(p) => evaluate(
            &PlannerAgent {
                params: p,
                history: settings.history,
            },
            &dataset.geometry,
            tasks,
            settings,
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShapingSummary {
    pub trials: usize,
    /// Trials whose state-potential shaping kept the policy order.
    pub state_preserved: usize,
    /// Trials whose look-back shaping kept the policy order.
    pub state_action_preserved: usize,
    /// Reports of the supplied fixtures, in order.
    pub fixtures: Vec<OrderReport>,
}

impl ShapingSummary {
    /// True when every potential-based check kept the order.
    pub fn passed(&self) -> bool {
        self.state_preserved == self.trials
            && self.state_action_preserved == self.trials
            && self
                .fixtures
                .iter()
                .all(|r| r.preserved || r.mode == ARBITRARY_MODE)
    }
}

/// Fixtures whose term is not potential-based are expected to break the
/// order and do not count as failures.
const ARBITRARY_MODE: &str = "arbitrary";

/// Discount of the random trials.
pub const SHAPING_GAMMA: f64 = 0.9;

/// Seeded random MDPs of 2 to 6 states and 2 or 3 actions, checked under
/// both potential kinds, plus any MDP fixtures given as JSON files.
pub fn shaping_check(trials: usize, seed: u64, fixtures: &[PathBuf]) -> Result<ShapingSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut state_ok, mut pair_ok) = (0, 0);
    for _ in 0..trials {
        use rand::Rng;
        let n = rng.random_range(2..=6);
        let m = rng.random_range(2..=3);
        let gamma = SHAPING_GAMMA;
        let mdp = SmallMdp::random(&mut rng, n, m, gamma, false);
        state_ok += usize::from(check_shaping_safety(&mdp, &mdp.potential, gamma)?.preserved);
        let mdp = SmallMdp::random(&mut rng, n, m, gamma, true);
        pair_ok += usize::from(check_shaping_safety(&mdp, &mdp.potential, gamma)?.preserved);
    }
    let fixtures = fixtures
        .iter()
        .map(|p| {
            let mdp: SmallMdp = serde_json::from_str(&fs::read_to_string(p)?)?;
            check_shaping_safety(&mdp, &mdp.potential, mdp.gamma)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ShapingSummary {
        trials,
        state_preserved: state_ok,
        state_action_preserved: pair_ok,
        fixtures,
    })
}

/// Which agent a rollout dump follows.
#[derive(Debug, Clone, Default)]
pub struct RolloutOptions {
    pub checkpoint: Option<PathBuf>,
    pub sample: bool,
    pub demonstration: bool,
}

fn describe_state(geometry: &BoardGeometry, state: &WorldState) -> String {
    let mut out = String::new();
    for (i, pos) in state.positions().iter().enumerate() {
        if let Some(c) = pos {
            if !out.is_empty() {
                out.push(' ');
            }
            let _ = write!(out, "{}@{},{}", geometry.block_name(i), c.col, c.row);
        }
    }
    out
}

/// One line per step: the state acted in, the action and its reward terms.
pub fn rollout(
    config: &ExperimentConfig,
    example_id: &str,
    options: &RolloutOptions,
) -> Result<String> {
    let dataset = Dataset::load(config)?;
    let task = [&dataset.train, &dataset.dev, &dataset.test]
        .into_iter()
        .flatten()
        .find(|t| t.id == example_id)
        .ok_or_else(|| Error::UnknownExample(example_id.to_string()))?;
    let spec = reward_spec(task, config.learn.reward)?;
    let settings = config.learn.eval_settings();
    let mode = if options.sample {
        DecodeMode::Sample
    } else {
        DecodeMode::Greedy
    };
    let run = |agent: &dyn crate::eval::Agent| {
        run_episode(agent, &dataset.geometry, task, &settings, Some(&spec))
    };
    let (_, steps) = if options.demonstration {
        run(&DemonstrationAgent)?
    } else {
        match config.algo {
            Algorithm::Stop => run(&StopAgent)?,
            Algorithm::Random => run(&RandomAgent)?,
            _ => {
                let path = default_checkpoint(config, &options.checkpoint);
                match Model::load(&path, &dataset, config.learn.history)? {
                    Model::Policy(p) => run(&PolicyAgent::single(&p, mode))?,
                    Model::Q(p) => run(&QAgent { params: &p })?,
                    Model::Planner(p) => run(&PlannerAgent {
                        params: &p,
                        history: settings.history,
                    })?,
                }
            }
        }
    };
    let mut out = String::new();
    for (j, step) in steps.iter().enumerate() {
        let r = step.reward.unwrap_or_default();
        let action = match step.action {
            Action::Stop => "STOP".to_string(),
            a => a.describe(&dataset.geometry),
        };
        let _ = writeln!(
            out,
            "{}\t{}\t{}{}\tproblem={:.4}\tf1={:.4}\tf2={:.4}\ttotal={:.4}",
            j + 1,
            describe_state(&dataset.geometry, &step.state),
            action,
            if step.failed { " (failed)" } else { "" },
            r.problem,
            r.f1,
            r.f2,
            r.total
        );
    }
    Ok(out)
}
