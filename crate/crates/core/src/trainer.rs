//! Training loop, best-checkpoint selection, eta sweeps and seed aggregation.
//!
//! A run is fully determined by its configuration and seed: initialization,
//! batch order, dropout masks, Gumbel noise and validation samples each come
//! from a named stream of the run seed.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Dataset;
use crate::grad::{Tape, Tensor};
use crate::metrics::{self, MetricError, MetricReport};
use crate::model::{Mode, ModelError, ModelParams, NeuralBigramLM, DEFAULT_DROPOUT, DEFAULT_HIDDEN};
use crate::objectives::{self, ObjectiveError, ObjectiveKind, ObjectiveSpec};
use crate::rng;
use crate::sampling::{rollout_relaxed, sample_sequences, BigramTable, SamplingError};
use crate::world::{BigramWorld, TokenSequence};

pub const CHECKPOINT_FORMAT: &str = "mixce-ckpt/1";

/// The eta search grid used for model selection.
pub const ETA_GRID: [f64; 5] = [0.99, 0.9, 0.5, 0.1, 0.01];

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0} needs the gold world")]
    MissingWorld(ObjectiveKind),
    #[error("{0} set is empty")]
    EmptyData(&'static str),
    #[error("training loss became non-finite in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("seed {seed} failed: {message}")]
    SeedFailed { seed: u64, message: String },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Sampling(#[from] SamplingError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
}

type Result<T> = std::result::Result<T, TrainError>;

fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    50
}
fn default_patience() -> Option<usize> {
    Some(10)
}
fn default_batch() -> usize {
    64
}
fn default_hidden() -> usize {
    DEFAULT_HIDDEN
}
fn default_dropout() -> f64 {
    DEFAULT_DROPOUT
}
fn default_max_len() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveSpec,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    #[serde(default = "default_patience")]
    pub patience: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_dropout")]
    pub dropout_rate: f64,
    /// Longest rollout, in tokens, when sampling from the model.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Hard model samples used to estimate validation losses; defaults to
    /// the validation set size.
    #[serde(default)]
    pub valid_samples: Option<usize>,
}

impl TrainConfig {
    pub fn new(objective: ObjectiveSpec) -> Self {
        Self {
            objective,
            learning_rate: default_lr(),
            max_epochs: default_epochs(),
            patience: default_patience(),
            batch_size: default_batch(),
            seed: 0,
            hidden_dim: default_hidden(),
            dropout_rate: default_dropout(),
            max_len: default_max_len(),
            valid_samples: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.objective.validate()?;
        let bad = |msg: &str| Err(TrainError::Config(msg.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        if self.max_len == 0 {
            return bad("max_len must be at least 1");
        }
        if self.patience == Some(0) || self.valid_samples == Some(0) {
            return bad("patience and valid_samples must be positive when set");
        }
        Ok(())
    }

    fn mc_samples(&self) -> usize {
        self.objective.mc_samples.unwrap_or(self.batch_size)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub epoch: usize,
    pub val_loss: f64,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn model(&self) -> Result<NeuralBigramLM> {
        Ok(NeuralBigramLM::from_params(&self.params, self.config.dropout_rate)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub model: NeuralBigramLM,
    pub trace: Vec<EpochTrace>,
}

fn check_inputs(config: &TrainConfig, world: Option<&BigramWorld>, train: &Dataset, valid: &Dataset) -> Result<()> {
    config.validate()?;
    if config.objective.kind.oracle_only() && world.is_none() {
        return Err(TrainError::MissingWorld(config.objective.kind));
    }
    if train.is_empty() {
        return Err(TrainError::EmptyData("training"));
    }
    if valid.is_empty() {
        return Err(TrainError::EmptyData("validation"));
    }
    if train.vocab_size != valid.vocab_size || world.is_some_and(|w| w.vocab_size() != train.vocab_size) {
        return Err(TrainError::Config("vocabulary sizes disagree".into()));
    }
    Ok(())
}

/// Objective value of `model` on the whole validation set, in evaluation
/// mode. Model-sample terms use hard samples from a fixed stream of the run
/// seed, so values are comparable across epochs.
pub fn validation_loss(
    model: &NeuralBigramLM,
    config: &TrainConfig,
    world: Option<&BigramWorld>,
    valid: &[TokenSequence],
) -> Result<f64> {
    let spec = &config.objective;
    let mut tape = Tape::new();
    let fwd = model.attach(&mut tape)?;
    let data = if spec.uses_data() {
        Some(objectives::score_sequences(&mut tape, &fwd, valid, world, &mut Mode::Eval)?)
    } else {
        None
    };
    let samples = if spec.uses_samples() {
        let count = config.valid_samples.unwrap_or(valid.len());
        let mut r = rng::stream(config.seed, "validation", 0);
        let seqs = sample_sequences(&model.as_table(), count, config.max_len, &mut r)?;
        Some(objectives::score_sequences(&mut tape, &fwd, &seqs, world, &mut Mode::Eval)?)
    } else {
        None
    };
    Ok(objectives::evaluate(&mut tape, spec, data.as_ref(), samples.as_ref())?.value)
}

/// Trains one model and returns the parameters of the epoch with the lowest
/// validation loss (earliest on ties).
pub fn train(
    config: &TrainConfig,
    world: Option<&BigramWorld>,
    train: &Dataset,
    valid: &Dataset,
    mut on_epoch: impl FnMut(&EpochTrace),
) -> Result<TrainOutcome> {
    check_inputs(config, world, train, valid)?;
    let spec = &config.objective;
    let mut model = NeuralBigramLM::new(train.vocab_size, config.hidden_dim, config.dropout_rate, config.seed)?;
    let sizes: Vec<usize> = model.tensors().iter().map(|t| t.numel()).collect();
    let mut adam = Adam::new(config.learning_rate, &sizes);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = Vec::new();
    let mut best: Option<(usize, f64, NeuralBigramLM)> = None;
    let mut stale = 0;

    for epoch in 1..=config.max_epochs {
        let e = epoch as u64;
        order.shuffle(&mut rng::stream(config.seed, "shuffle", e));
        let mut dropout = rng::stream(config.seed, "dropout", e);
        let mut noise = rng::stream(config.seed, "gumbel", e);
        let mut loss_sum = 0.0;
        let mut batches = 0;

        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TokenSequence> = chunk.iter().map(|&i| train.sequences[i].clone()).collect();
            let mut tape = Tape::new();
            let fwd = model.attach(&mut tape)?;
            let mut mode = Mode::Train(&mut dropout);
            let data = if spec.uses_data() {
                Some(objectives::score_sequences(&mut tape, &fwd, &batch, world, &mut mode)?)
            } else {
                None
            };
            let samples = if spec.uses_samples() {
                let ro = rollout_relaxed(
                    &mut tape,
                    &fwd,
                    config.mc_samples(),
                    config.max_len,
                    spec.tau,
                    &mut mode,
                    &mut noise,
                )?;
                Some(objectives::score_rollouts(&mut tape, &ro, world)?)
            } else {
                None
            };
            let loss = objectives::evaluate(&mut tape, spec, data.as_ref(), samples.as_ref())?;
            if !loss.value.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            let grads = tape.backward(loss.loss).map_err(ObjectiveError::from)?;
            let vars = fwd.vars.as_array();
            let g: Vec<&Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
            adam.step(&mut model.tensors_mut(), &g);
            loss_sum += loss.value;
            batches += 1;
        }

        let val_loss = validation_loss(&model, config, world, &valid.sequences)?;
        let entry = EpochTrace {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_loss,
        };
        on_epoch(&entry);
        trace.push(entry);
        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, model.clone()));
            stale = 0;
        } else {
            stale += 1;
            if config.patience.is_some_and(|p| stale >= p) {
                break;
            }
        }
    }

    let (epoch, val_loss, model) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: config.clone(),
            epoch,
            val_loss,
            params: model.params(),
        },
        model,
        trace,
    })
}

/// Number of model samples drawn for the diversity metric.
const DIVERSITY_SAMPLES: usize = 1000;

/// avg. js / avg. 0s against the gold matrix, validation perplexity, and the
/// n-gram diversity of unbiased samples.
pub fn evaluate_model(
    model: &NeuralBigramLM,
    world: &BigramWorld,
    valid: Option<&[TokenSequence]>,
    sample_len: usize,
    seed: u64,
) -> Result<MetricReport> {
    evaluate_table(&model.as_table(), world, valid, sample_len, seed)
}

/// [`evaluate_model`] for any explicit bigram table.
pub fn evaluate_table(
    table: &BigramTable,
    world: &BigramWorld,
    valid: Option<&[TokenSequence]>,
    sample_len: usize,
    seed: u64,
) -> Result<MetricReport> {
    let vocab = table.rows().len();
    let mut report = MetricReport::from_matrices(world.transitions(), table.rows())?;
    if let Some(valid) = valid {
        let mut log_probs = Vec::new();
        for s in valid {
            let (_, probs) = table
                .seq_log_prob(&s.tokens)
                .map_err(|token| ModelError::TokenRange { token, vocab })?;
            log_probs.extend(probs.iter().map(|p| p.ln()));
        }
        report.perplexity = metrics::perplexity(&log_probs).ok();
    }
    let mut r = rng::stream(seed, "diversity", 0);
    let samples = sample_sequences(table, DIVERSITY_SAMPLES, sample_len, &mut r)?;
    report.diversity = metrics::ngram_diversity(&samples).ok().map(|d| d.mean);
    report.meta.insert("vocab_size".into(), vocab.into());
    Ok(report)
}

/// A trained (eta, seed) cell with its metrics.
#[derive(Debug, Clone)]
pub struct CellRun {
    pub outcome: TrainOutcome,
    pub metrics: MetricReport,
}

pub fn run_cell(
    base: &TrainConfig,
    eta: f64,
    seed: u64,
    world: &BigramWorld,
    train_set: &Dataset,
    valid: &Dataset,
    on_epoch: impl FnMut(&EpochTrace),
) -> Result<CellRun> {
    let mut config = base.clone();
    config.objective.eta = eta;
    config.seed = seed;
    let outcome = train(&config, Some(world), train_set, valid, on_epoch)?;
    let mut metrics = evaluate_model(&outcome.model, world, Some(&valid.sequences), config.max_len, seed)?;
    let meta = &mut metrics.meta;
    meta.insert("objective".into(), config.objective.kind.name().into());
    meta.insert("eta".into(), eta.into());
    meta.insert("seed".into(), seed.into());
    meta.insert("epoch".into(), outcome.checkpoint.epoch.into());
    meta.insert("val_loss".into(), outcome.checkpoint.val_loss.into());
    Ok(CellRun { outcome, metrics })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CellStatus {
    Ok { metrics: MetricReport },
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub eta: f64,
    pub seed: u64,
    #[serde(flatten)]
    pub status: CellStatus,
}

impl CellResult {
    pub fn metrics(&self) -> Option<&MetricReport> {
        match &self.status {
            CellStatus::Ok { metrics } => Some(metrics),
            CellStatus::Failed { .. } => None,
        }
    }
}

/// Mean and sample standard deviation over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub avg_js_mean: f64,
    pub avg_js_std: f64,
    pub avg_0s_mean: f64,
    pub avg_0s_std: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(reports: &[&MetricReport]) -> Option<Aggregate> {
    if reports.is_empty() {
        return None;
    }
    let js: Vec<f64> = reports.iter().map(|r| r.avg_js).collect();
    let zs: Vec<f64> = reports.iter().map(|r| r.avg_0s).collect();
    let (avg_js_mean, avg_js_std) = mean_std(&js);
    let (avg_0s_mean, avg_0s_std) = mean_std(&zs);
    Some(Aggregate {
        n: reports.len(),
        avg_js_mean,
        avg_js_std,
        avg_0s_mean,
        avg_0s_std,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaSummary {
    pub eta: f64,
    /// None when any seed of this eta failed.
    pub aggregate: Option<Aggregate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub objective: ObjectiveKind,
    pub grid: Vec<f64>,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
    pub best_eta: Option<f64>,
    pub per_eta: Vec<EtaSummary>,
}

/// Smallest mean avg. js over complete etas; ties go to the larger eta.
pub fn select_best_eta(per_eta: &[EtaSummary]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for s in per_eta {
        let Some(a) = &s.aggregate else { continue };
        let better = match best {
            None => true,
            Some((eta, js)) => a.avg_js_mean < js || (a.avg_js_mean == js && s.eta > eta),
        };
        if better {
            best = Some((s.eta, a.avg_js_mean));
        }
    }
    best.map(|(eta, _)| eta)
}

/// Assembles a sweep summary from finished cells, in grid order.
pub fn summarize(objective: ObjectiveKind, grid: &[f64], seeds: &[u64], cells: Vec<CellResult>) -> SweepResult {
    let per_eta: Vec<EtaSummary> = grid
        .iter()
        .map(|&eta| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| c.eta == eta).collect();
            let reports: Option<Vec<&MetricReport>> = mine.iter().map(|c| c.metrics()).collect();
            EtaSummary {
                eta,
                aggregate: reports.filter(|r| r.len() == seeds.len()).and_then(|r| aggregate(&r)),
            }
        })
        .collect();
    SweepResult {
        objective,
        grid: grid.to_vec(),
        seeds: seeds.to_vec(),
        best_eta: select_best_eta(&per_eta),
        cells,
        per_eta,
    }
}

/// One model per eta at the base seed; failures are recorded per cell and
/// the sweep continues.
pub fn sweep_eta(
    base: &TrainConfig,
    grid: &[f64],
    world: &BigramWorld,
    train_set: &Dataset,
    valid: &Dataset,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(TrainError::Config("empty eta grid".into()));
    }
    let cells = grid
        .iter()
        .map(|&eta| CellResult {
            eta,
            seed: base.seed,
            status: match run_cell(base, eta, base.seed, world, train_set, valid, |_| {}) {
                Ok(run) => CellStatus::Ok { metrics: run.metrics },
                Err(e) => CellStatus::Failed { error: e.to_string() },
            },
        })
        .collect();
    Ok(summarize(base.objective.kind, grid, &[base.seed], cells))
}

/// Runs seeds `base + 0 .. base + n - 1` and aggregates avg. js and avg. 0s.
/// Any failing seed fails the whole aggregate.
pub fn multi_seed(
    config: &TrainConfig,
    n_seeds: usize,
    world: &BigramWorld,
    train_set: &Dataset,
    valid: &Dataset,
) -> Result<(Aggregate, Vec<CellRun>)> {
    if n_seeds == 0 {
        return Err(TrainError::Config("need at least one seed".into()));
    }
    let runs: Vec<CellRun> = (0..n_seeds as u64)
        .into_par_iter()
        .map(|k| {
            let seed = config.seed + k;
            run_cell(config, config.objective.eta, seed, world, train_set, valid, |_| {}).map_err(|e| {
                TrainError::SeedFailed {
                    seed,
                    message: e.to_string(),
                }
            })
        })
        .collect::<Result<_>>()?;
    let reports: Vec<&MetricReport> = runs.iter().map(|r| &r.metrics).collect();
    Ok((aggregate(&reports).expect("nonempty"), runs))
}

/// On-disk layout of a sweep: `<root>/cell-<eta>-<seed>/` holds
/// `checkpoint.json`, `trace.json` and `metrics.json`; `<root>/sweep.json`
/// holds the summary.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub best_epoch: usize,
    pub epochs: Vec<EpochTrace>,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn cell_dir(&self, eta: f64, seed: u64) -> PathBuf {
        self.root.join(format!("cell-{eta}-{seed}"))
    }

    pub fn sweep_path(&self) -> PathBuf {
        self.root.join("sweep.json")
    }

    pub fn write_cell(&self, eta: f64, seed: u64, run: &CellRun) -> Result<()> {
        let dir = self.cell_dir(eta, seed);
        create_dir(&dir)?;
        write_json(&dir.join("checkpoint.json"), &run.outcome.checkpoint)?;
        let trace = TraceFile {
            best_epoch: run.outcome.checkpoint.epoch,
            epochs: run.outcome.trace.clone(),
        };
        write_json(&dir.join("trace.json"), &trace)?;
        write_json(&dir.join("metrics.json"), &run.metrics)
    }

    pub fn read_metrics(&self, eta: f64, seed: u64) -> Option<MetricReport> {
        let path = self.cell_dir(eta, seed).join("metrics.json");
        read_json(&path).ok()
    }

    /// Trains every (eta, seed) cell with up to `jobs` in parallel. Cells with
    /// an existing `metrics.json` are reused unless `force` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn sweep(
        &self,
        base: &TrainConfig,
        grid: &[f64],
        n_seeds: usize,
        world: &BigramWorld,
        train_set: &Dataset,
        valid: &Dataset,
        jobs: usize,
        force: bool,
    ) -> Result<SweepResult> {
        if grid.is_empty() || n_seeds == 0 {
            return Err(TrainError::Config("need at least one eta and one seed".into()));
        }
        create_dir(&self.root)?;
        let seeds: Vec<u64> = (0..n_seeds as u64).map(|k| base.seed + k).collect();
        let cells: Vec<(f64, u64)> = grid
            .iter()
            .flat_map(|&eta| seeds.iter().map(move |&s| (eta, s)))
            .collect();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let results: Vec<CellResult> = pool.install(|| {
            cells
                .par_iter()
                .map(|&(eta, seed)| {
                    if !force {
                        if let Some(metrics) = self.read_metrics(eta, seed) {
                            log::info!("cell eta={eta} seed={seed}: reusing existing results");
                            return CellResult {
                                eta,
                                seed,
                                status: CellStatus::Ok { metrics },
                            };
                        }
                    }
                    let status = run_cell(base, eta, seed, world, train_set, valid, |t| {
                        log::debug!(
                            "cell eta={eta} seed={seed} epoch {}: train {:.6} valid {:.6}",
                            t.epoch,
                            t.train_loss,
                            t.val_loss
                        );
                    })
                    .and_then(|run| {
                        self.write_cell(eta, seed, &run)?;
                        Ok(run)
                    });
                    match status {
                        Ok(run) => {
                            log::info!(
                                "cell eta={eta} seed={seed}: avg_js {:.4e} avg_0s {:.4e}",
                                run.metrics.avg_js,
                                run.metrics.avg_0s
                            );
                            CellResult {
                                eta,
                                seed,
                                status: CellStatus::Ok { metrics: run.metrics },
                            }
                        }
                        Err(e) => {
                            log::error!("cell eta={eta} seed={seed} failed: {e}");
                            CellResult {
                                eta,
                                seed,
                                status: CellStatus::Failed { error: e.to_string() },
                            }
                        }
                    }
                })
                .collect()
        });
        let summary = summarize(base.objective.kind, grid, &seeds, results);
        write_json(&self.sweep_path(), &summary)?;
        Ok(summary)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| TrainError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| TrainError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| TrainError::Json {
        path: path.to_path_buf(),
        source,
    })
}
