//! Command-line driver for the `nclip` crate: synthetic data generation,
//! gradient verification, training, evaluation, ablation sweeps and
//! plot-data reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod report;
pub mod sweep;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nclip::evaluation::SimilarityMetric;
use nclip::training::ObjectiveKind;
use serde_json::Value;

pub use commands::{cmd_eval, cmd_gen_data, cmd_train};
pub use config::{EvalTask, RunConfig};
pub use error::CliError;
pub use gradcheck::{run_gradcheck, GradcheckOptions};
pub use report::cmd_report;
pub use sweep::{cmd_sweep, SweepSpec};

#[derive(Debug, Parser)]
#[command(
    name = "nclip",
    version,
    about = "Contrastive and non-contrastive language-image objectives at desk scale"
)]
pub struct Cli {
    /// Only print warnings and errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run config JSON; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sets one config field, e.g. `--set objective.lambda2=1.2`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic paired dataset file.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write this many held-out pairs instead of the training set.
        #[arg(long)]
        heldout: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic loss gradients with central differences.
    Gradcheck {
        /// Loss to check (repeatable); default all.
        #[arg(long = "loss")]
        losses: Vec<String>,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Comma-separated BxK shapes.
        #[arg(long, default_value = "4x8,8x16,16x64")]
        shapes: String,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Also write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        inject_sign_flip: bool,
    },
    /// Train a dual encoder and write a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Run directory (default: config out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// clip, nclip, xclip, unified or shared_latent.
        #[arg(long, value_parser = parse_objective)]
        objective: Option<ObjectiveKind>,
        /// Overrides schedule.total_epochs.
        #[arg(long)]
        epochs: Option<usize>,
        /// Training pairs file instead of generated data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Training-state checkpoint to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (zero-shot, retrieval, linear probe).
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, required_unless_present = "untrained", conflicts_with = "untrained")]
        checkpoint: Option<PathBuf>,
        /// Evaluate a fresh initialization from the config instead.
        #[arg(long)]
        untrained: bool,
        /// Task to run (repeatable); default from the config.
        #[arg(long = "task", value_enum)]
        tasks: Vec<EvalTask>,
        /// cosine (clip head) or neg_ce (nclip head).
        #[arg(long, value_parser = parse_metric)]
        metric: Option<SimilarityMetric>,
        /// Evaluation pairs file instead of the generated held-out set.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train once per value of one config axis.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Sweep spec JSON with `base`, `axis` and `values`.
        #[arg(long, conflicts_with_all = ["axis", "values"])]
        spec: Option<PathBuf>,
        /// Dotted config path.
        #[arg(long, requires = "values")]
        axis: Option<String>,
        /// Comma-separated values (JSON literals or bare strings).
        #[arg(long, requires = "axis")]
        values: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn run metrics logs into plot-ready CSV files.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_objective(s: &str) -> Result<ObjectiveKind, String> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| format!("unknown objective '{s}'"))
}

fn parse_metric(s: &str) -> Result<SimilarityMetric, String> {
    s.parse().map_err(|e: nclip::Error| e.to_string())
}

impl ConfigArgs {
    fn resolve(&self, fallback: Option<&Path>) -> Result<RunConfig, CliError> {
        let mut cfg = match self.config.as_deref().or(fallback) {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let sets = self
            .overrides
            .iter()
            .map(|o| {
                o.split_once('=')
                    .map(|(path, raw)| (path.trim().to_string(), config::parse_value(raw.trim())))
                    .ok_or_else(|| CliError::usage(format!("--set expects PATH=VALUE, got '{o}'")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        if !sets.is_empty() {
            cfg = cfg.with_overrides(&sets)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

fn print_json(v: &impl serde::Serialize) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", serde_json::to_string_pretty(v).map_err(CliError::runtime)?)?;
    Ok(())
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(v).map_err(CliError::runtime)? + "\n")?;
    Ok(())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { cfg, heldout, out } => {
            let cfg = cfg.resolve(None)?;
            let n = cmd_gen_data(&cfg, &out, heldout)?;
            println!("wrote {n} pairs to {}", out.display());
        }
        Command::Gradcheck {
            losses,
            seeds,
            shapes,
            step,
            tolerance,
            out,
            inject_sign_flip,
        } => {
            let opts = GradcheckOptions {
                losses,
                seeds,
                shapes: shapes
                    .split(',')
                    .map(gradcheck::parse_shape)
                    .collect::<Result<_, _>>()?,
                step,
                tolerance,
                inject_sign_flip,
            };
            let rows = run_gradcheck(&opts)?;
            print!("{}", gradcheck::format_table(&rows, tolerance));
            if let Some(p) = out {
                write_json(&p, &rows)?;
            }
            let failed = rows.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                return Err(CliError::runtime(format!(
                    "{failed} of {} gradient checks failed",
                    rows.len()
                )));
            }
        }
        Command::Train {
            cfg,
            out,
            objective,
            epochs,
            data,
            resume,
        } => {
            // a resumed run defaults to its own config snapshot
            let snapshot = resume.as_deref().and_then(commands::find_run_config);
            let mut cfg = cfg.resolve(snapshot.as_deref())?;
            if let Some(k) = objective {
                cfg.objective.kind = k;
            }
            if let Some(e) = epochs {
                cfg.schedule.total_epochs = e;
            }
            if data.is_some() {
                cfg.dataset = data;
            }
            cfg.validate()?;
            let out = out.unwrap_or_else(|| cfg.out_dir.clone());
            let summary = cmd_train(&cfg, &out, resume.as_deref())?;
            print_json(&summary)?;
            if summary.collapse != nclip::training::CollapseKind::None {
                log::warn!("collapse detected: {:?}", summary.collapse);
            }
        }
        Command::Eval {
            cfg,
            checkpoint,
            untrained,
            tasks,
            metric,
            data,
            out,
        } => {
            let snapshot = checkpoint.as_deref().and_then(commands::find_run_config);
            let cfg = cfg.resolve(snapshot.as_deref())?;
            let model = match (&checkpoint, untrained) {
                (Some(p), _) => commands::load_checkpoint(p)?,
                (None, _) => nclip::model::DualEncoder::init(&cfg.model_config(), cfg.seed)?,
            };
            let pairs = data.as_deref().map(commands::load_pairs).transpose()?;
            let tasks = if tasks.is_empty() {
                cfg.eval.tasks.clone()
            } else {
                tasks
            };
            let report = cmd_eval(&cfg, &model, pairs.as_ref(), &tasks, metric.unwrap_or(cfg.eval.metric))?;
            print_json(&report)?;
            if let Some(p) = out {
                write_json(&p, &report)?;
            }
        }
        Command::Sweep {
            cfg,
            spec,
            axis,
            values,
            out,
        } => {
            let (base, axis, values) = match (spec, axis, values) {
                (Some(p), _, _) => {
                    let text = fs::read_to_string(&p)
                        .map_err(|e| CliError::usage(format!("cannot read sweep spec {}: {e}", p.display())))?;
                    let s: SweepSpec =
                        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("invalid sweep spec: {e}")))?;
                    let mut base = RunConfig::from_value(s.base)?;
                    if let Some(seed) = cfg.seed {
                        base.seed = seed;
                    }
                    (base, s.axis, s.values)
                }
                (None, Some(a), Some(v)) => (
                    cfg.resolve(None)?,
                    a,
                    v.split(',').map(|x| config::parse_value(x.trim())).collect(),
                ),
                _ => return Err(CliError::usage("sweep needs --spec or --axis with --values")),
            };
            let out = out.unwrap_or_else(|| base.out_dir.clone());
            let rows = cmd_sweep(&base, &axis, &values, &out)?;
            for r in &rows {
                println!(
                    "{axis}={:<12} {:?} steps={} collapse={:?} zeroshot={:.4} r1={:.4}/{:.4}",
                    r.value, r.status, r.steps, r.collapse, r.zeroshot, r.r1_i2t, r.r1_t2i
                );
            }
            println!("wrote {}", out.join(sweep::SWEEP_CSV).display());
        }
        Command::Report { runs, out } => {
            let files = cmd_report(&runs, &out)?;
            println!(
                "wrote {} run tables and {} statistic tables under {}",
                files.runs.len(),
                files.stats.len(),
                out.display()
            );
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and maps the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Warn
        } else {
            log::LevelFilter::Info
        })
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
