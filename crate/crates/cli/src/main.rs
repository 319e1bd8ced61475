mod config;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use mixce::corpus::{self, Dataset};
use mixce::model::NeuralBigramLM;
use mixce::sampling::BigramTable;
use mixce::trainer::{self, Checkpoint, RunDir, TraceFile, ETA_GRID};
use mixce::world::{sample_corpus, BigramWorld, WORLD_FORMAT};

use crate::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "mixce", version, about = "Bigram language-model experiments with mixed cross-entropy objectives")]
struct Cli {
    /// Verbose logging: per-batch and per-cell detail.
    #[arg(long, global = true)]
    progress: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Gold world generation.
    World {
        #[command(subcommand)]
        command: WorldCommand,
    },
    /// Training and validation data.
    Data {
        #[command(subcommand)]
        command: DataCommand,
    },
    /// Train one model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long, env = "MIXCE_SEED")]
        seed: Option<u64>,
    },
    /// Train every (eta, seed) cell of a grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = ETA_GRID.to_vec())]
        etas: Vec<f64>,
        /// Number of seeds, counted up from the base seed.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Base seed; overrides the config seed.
        #[arg(long, env = "MIXCE_SEED")]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Retrain cells that already have results.
        #[arg(long)]
        force: bool,
    },
    /// Score a checkpoint (or a world file) against the gold world.
    Eval {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Validation data for perplexity.
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        sample_len: usize,
        #[arg(long, env = "MIXCE_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Summarize a runs directory as markdown and JSON.
    Report {
        #[arg(long, default_value = "runs")]
        runs: PathBuf,
        /// Directory for report.md and report.json; defaults to the runs directory.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Init {
    Random,
    Counts,
}

#[derive(Subcommand)]
enum WorldCommand {
    /// Write a random or corpus-count world file
    Gen {
        #[arg(long)]
        vocab: Option<usize>,
        #[arg(long, value_enum, default_value = "random")]
        init: Init,
        #[arg(long, default_value_t = 0.5)]
        zero_frac: f64,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        /// Count matrix (JSON) or dataset file for `--init counts`.
        #[arg(long)]
        counts: Option<PathBuf>,
        #[arg(long, env = "MIXCE_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum DataCommand {
    /// Sample train.txt and valid.txt from a world
    Sample {
        #[arg(long)]
        world: PathBuf,
        #[arg(long, default_value_t = 50_000)]
        train: usize,
        #[arg(long, default_value_t = 5_000)]
        valid: usize,
        #[arg(long, default_value_t = 500)]
        max_len: usize,
        #[arg(long, env = "MIXCE_SEED", default_value_t = 0)]
        seed: u64,
        /// Output directory for train.txt and valid.txt.
        #[arg(short, long)]
        output: PathBuf,
    },
}

fn usage_error(kind: clap::error::ErrorKind, msg: &str) -> ! {
    Cli::command().error(kind, msg).exit()
}

fn world_gen(
    vocab: Option<usize>,
    init: Init,
    zero_frac: f64,
    alpha: f64,
    counts: Option<PathBuf>,
    seed: u64,
    output: &Path,
) -> Result<()> {
    let world = match init {
        Init::Random => {
            let Some(v) = vocab else {
                usage_error(clap::error::ErrorKind::MissingRequiredArgument, "--init random needs --vocab");
            };
            BigramWorld::init_random(v, zero_frac, alpha, seed)?
        }
        Init::Counts => {
            let Some(path) = counts else {
                usage_error(clap::error::ErrorKind::MissingRequiredArgument, "--init counts needs --counts");
            };
            let counts = corpus::load_counts(&path)?;
            if let Some(v) = vocab {
                if v != counts.len() {
                    bail!("--vocab {v} disagrees with the {}-row count matrix", counts.len());
                }
            }
            BigramWorld::init_from_counts(&counts)?
        }
    };
    world.save(output)?;
    log::info!(
        "wrote {} (vocab {}, tight {})",
        output.display(),
        world.vocab_size(),
        world.check_tight()
    );
    Ok(())
}

fn data_sample(world: &Path, n_train: usize, n_valid: usize, max_len: usize, seed: u64, out: &Path) -> Result<()> {
    if max_len == 0 {
        usage_error(clap::error::ErrorKind::InvalidValue, "--max-len must be at least 1");
    }
    let world = BigramWorld::load(world)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, count) in [("train", n_train), ("valid", n_valid)] {
        if count == 0 {
            log::warn!("{name} set is empty");
        }
        let data = Dataset {
            sequences: sample_corpus(&world, count, max_len, seed, name),
            vocab_size: world.vocab_size(),
            max_len,
            seed,
        };
        let path = out.join(format!("{name}.txt"));
        data.save(&path)?;
        log::info!("wrote {count} sequences to {}", path.display());
    }
    Ok(())
}

fn train(config_path: &Path, seed: Option<u64>) -> Result<()> {
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(s) = seed {
        config.training.seed = s;
    }
    let inputs = config.load_inputs()?;
    let tc = &config.training;
    let outcome = trainer::train(tc, inputs.world.as_ref(), &inputs.train, &inputs.valid, |t| {
        log::info!(
            "epoch {:3}  train {:.6}  valid {:.6}",
            t.epoch,
            t.train_loss,
            t.val_loss
        )
    })?;
    let runs = RunDir::new(config.run_root());
    let dir = runs.cell_dir(tc.objective.eta, tc.seed);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    trainer::write_json(&dir.join("checkpoint.json"), &outcome.checkpoint)?;
    let trace = TraceFile {
        best_epoch: outcome.checkpoint.epoch,
        epochs: outcome.trace.clone(),
    };
    trainer::write_json(&dir.join("trace.json"), &trace)?;
    log::info!(
        "best epoch {} (valid {:.6}); wrote {}",
        outcome.checkpoint.epoch,
        outcome.checkpoint.val_loss,
        dir.display()
    );
    match &inputs.world {
        Some(world) => {
            let mut metrics = trainer::evaluate_model(
                &outcome.model,
                world,
                Some(&inputs.valid.sequences),
                tc.max_len,
                tc.seed,
            )?;
            metrics.meta.insert("objective".into(), tc.objective.kind.name().into());
            metrics.meta.insert("eta".into(), tc.objective.eta.into());
            metrics.meta.insert("seed".into(), tc.seed.into());
            metrics.meta.insert("epoch".into(), outcome.checkpoint.epoch.into());
            metrics.meta.insert("val_loss".into(), outcome.checkpoint.val_loss.into());
            trainer::write_json(&dir.join("metrics.json"), &metrics)?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        None => log::info!("no world in the config; metrics skipped"),
    }
    Ok(())
}

fn sweep(config_path: &Path, etas: Vec<f64>, seeds: usize, seed: Option<u64>, jobs: usize, force: bool) -> Result<bool> {
    if seeds == 0 || jobs == 0 {
        usage_error(clap::error::ErrorKind::InvalidValue, "--seeds and --jobs must be at least 1");
    }
    if etas.is_empty() || etas.iter().any(|e| !(0.0..=1.0).contains(e)) {
        usage_error(clap::error::ErrorKind::InvalidValue, "--etas must be values in [0, 1]");
    }
    let mut config = ExperimentConfig::load(config_path)?;
    if let Some(s) = seed {
        config.training.seed = s;
    }
    let inputs = config.load_inputs()?;
    let Some(world) = inputs.world.as_ref() else {
        bail!("sweeps score cells by avg. js and need a world in the config");
    };
    let kind = config.training.objective.kind;
    let grid = if kind.uses_eta() {
        etas
    } else {
        log::info!("{kind} ignores eta; running a single eta");
        vec![config.training.objective.eta]
    };
    let runs = RunDir::new(config.run_root());
    let summary = runs.sweep(&config.training, &grid, seeds, world, &inputs.train, &inputs.valid, jobs, force)?;
    let failed = summary
        .cells
        .iter()
        .filter(|c| matches!(c.status, trainer::CellStatus::Failed { .. }))
        .count();
    for c in &summary.cells {
        match &c.status {
            trainer::CellStatus::Ok { metrics } => println!(
                "eta {:<5} seed {:<3} ok      avg_js {:.4e}  avg_0s {:.4e}",
                c.eta, c.seed, metrics.avg_js, metrics.avg_0s
            ),
            trainer::CellStatus::Failed { error } => {
                println!("eta {:<5} seed {:<3} FAILED  {error}", c.eta, c.seed)
            }
        }
    }
    for s in &summary.per_eta {
        if let Some(a) = &s.aggregate {
            println!(
                "eta {:<5} avg_js {:.4e} ± {:.2e}  avg_0s {:.4e} ± {:.2e}  (n={})",
                s.eta, a.avg_js_mean, a.avg_js_std, a.avg_0s_mean, a.avg_0s_std, a.n
            );
        }
    }
    match summary.best_eta {
        Some(eta) => println!("best eta {eta}"),
        None => println!("best eta: none (no complete eta)"),
    }
    println!("summary: {}", runs.sweep_path().display());
    Ok(failed == 0)
}

/// A checkpoint file, or a world file standing in for a perfect model.
fn load_table(path: &Path) -> Result<BigramTable> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if value.get("format").and_then(|f| f.as_str()) == Some(WORLD_FORMAT) {
        let w = BigramWorld::from_json(&text)?;
        return Ok(BigramTable::new(w.pi().to_vec(), w.transitions().to_vec()));
    }
    let ckpt: Checkpoint = serde_json::from_value(value).with_context(|| format!("parsing {}", path.display()))?;
    let model: NeuralBigramLM = ckpt.model()?;
    Ok(model.as_table())
}

fn eval(
    world: &Path,
    checkpoint: &Path,
    valid: Option<PathBuf>,
    sample_len: usize,
    seed: u64,
    output: Option<PathBuf>,
) -> Result<()> {
    let world = BigramWorld::load(world)?;
    let table = load_table(checkpoint)?;
    let valid = valid.map(|p| Dataset::load(&p)).transpose()?;
    let report = trainer::evaluate_table(
        &table,
        &world,
        valid.as_ref().map(|d| &d.sequences[..]),
        sample_len,
        seed,
    )?;
    let text = serde_json::to_string_pretty(&report)?;
    match output {
        Some(p) => std::fs::write(&p, text + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{text}"),
    }
    Ok(())
}

fn report(runs: &Path, output: Option<PathBuf>) -> Result<()> {
    let r = report::collect(runs)?;
    if r.experiments.is_empty() {
        bail!("no runs found under {}", runs.display());
    }
    let md = report::markdown(&r);
    let out = output.unwrap_or_else(|| runs.to_path_buf());
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("report.md"), &md)?;
    trainer::write_json(&out.join("report.json"), &r)?;
    print!("{md}");
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::World {
            command:
                WorldCommand::Gen {
                    vocab,
                    init,
                    zero_frac,
                    alpha,
                    counts,
                    seed,
                    output,
                },
        } => world_gen(vocab, init, zero_frac, alpha, counts, seed, &output)?,
        Command::Data {
            command:
                DataCommand::Sample {
                    world,
                    train,
                    valid,
                    max_len,
                    seed,
                    output,
                },
        } => data_sample(&world, train, valid, max_len, seed, &output)?,
        Command::Train { config, seed } => train(&config, seed)?,
        Command::Sweep {
            config,
            etas,
            seeds,
            seed,
            jobs,
            force,
        } => return sweep(&config, etas, seeds, seed, jobs, force),
        Command::Eval {
            world,
            checkpoint,
            valid,
            sample_len,
            seed,
            output,
        } => eval(&world, &checkpoint, valid, sample_len, seed, output)?,
        Command::Report { runs, output } => report(&runs, output)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.progress { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
