//! `mpl`: collect demonstrations, train the dynamics model, evaluate the
//! optimization conditions, and run the teaching server.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or model
//! error, 3 `--check` failure.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};

use mpl_core::config::RunConfig;
use mpl_core::data;
use mpl_core::error::Error;
use mpl_core::executor::{self, ordinal_checks};
use mpl_core::model::{self, TrainedModel};
use mpl_core::optimizer::Condition;
use mpl_core::server::{self, ServeOptions};
use mpl_core::teacher;

#[derive(Parser, Debug)]
#[command(name = "mpl", version, about = "Model predictive learning with assistance-aware input optimization")]
struct Cli {
    /// TOML run configuration (JSON reports with an embedded config also work).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Collect scripted-teacher demonstrations into a dataset file.
    Collect {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dynamics model on a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate conditions and write `<out>.csv` and `<out>.json`.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum, default_value_t = ConditionArg::All)]
        condition: ConditionArg,
        /// Enables aborting once predicted assistance reaches this value.
        #[arg(long)]
        abort_threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Exit with code 3 unless the ordinal checks hold.
        #[arg(long)]
        check: bool,
    },
    /// Serve teaching sessions over WebSocket, appending successes to `--out`.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        assets: Option<PathBuf>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum ConditionArg {
    Nobp,
    Bpu,
    Bpp,
    Bpup,
    All,
}

impl ConditionArg {
    fn conditions(self) -> Vec<Condition> {
        match self {
            Self::Nobp => vec![Condition::NoBP],
            Self::Bpu => vec![Condition::BPu],
            Self::Bpp => vec![Condition::BPp],
            Self::Bpup => vec![Condition::BPuP],
            Self::All => Condition::ALL.to_vec(),
        }
    }
}

enum Failure {
    Usage(String),
    Data(String),
    Check,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Check) => ExitCode::from(3),
    }
}

fn base_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, Failure> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Collect { n, out } => {
            let mut cfg = base_config(cli.config.as_deref(), cli.seed)?;
            if let Some(n) = n {
                cfg.collect.episodes = n;
            }
            let cfg = cfg.effective()?;
            let mut dataset = teacher::collect_episodes(&cfg.env, &cfg.teacher, cfg.collect.episodes, cfg.seed)?;
            dataset.header.config = Some(cfg.to_json());
            data::save_dataset(&dataset, &out)?;
            eprintln!(
                "collected {} episodes, assistance fraction {:.3} -> {}",
                dataset.episodes.len(),
                dataset.intervention_fraction(),
                out.display()
            );
        }
        Command::Train { data: data_path, epochs, out } => {
            let dataset = data::load_dataset(&data_path)?;
            let mut cfg = match (&cli.config, &dataset.header.config) {
                (None, Some(embedded)) => serde_json::from_value(embedded.clone())
                    .map_err(|e| Failure::Data(format!("embedded dataset config: {e}")))?,
                _ => base_config(cli.config.as_deref(), None)?,
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.model.epochs = e;
            }
            let cfg = cfg.effective()?;
            let episodes = data::prepare_training_episodes(&dataset, &cfg.pipeline, cfg.seed)?;
            let started = Instant::now();
            let every = (cfg.model.epochs / 20).max(1);
            let mut trained = model::train_with_progress(&episodes, dataset.header.norm(), &cfg.model, |epoch, loss| {
                if epoch % every == 0 || epoch + 1 == cfg.model.epochs {
                    eprintln!("epoch {:>5}  loss {loss:.6}  ({:.1}s)", epoch + 1, started.elapsed().as_secs_f64());
                }
            })?;
            let mut run_cfg = cfg.clone();
            run_cfg.env = dataset.header.env_config.clone();
            trained.provenance = Some(run_cfg.to_json());
            model::save_model(&trained, &out)?;
            let curve: String = std::iter::once("epoch,loss\n".to_string())
                .chain(trained.loss_curve.iter().enumerate().map(|(i, l)| format!("{},{l:e}\n", i + 1)))
                .collect();
            write(&with_suffix(&out, ".loss.csv"), &curve)?;
            eprintln!("trained on {} sequences -> {}", episodes.len(), out.display());
        }
        Command::Eval {
            model: model_path,
            n,
            condition,
            abort_threshold,
            out,
            check,
        } => {
            let trained: TrainedModel = model::load_model(&model_path)?;
            let mut cfg = match (&cli.config, &trained.provenance) {
                (None, Some(embedded)) => serde_json::from_value(embedded.clone())
                    .map_err(|e| Failure::Data(format!("embedded model config: {e}")))?,
                _ => base_config(cli.config.as_deref(), None)?,
            };
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(n) = n {
                cfg.eval.episodes = n;
            }
            if let Some(th) = abort_threshold {
                cfg.opt.abort_enabled = true;
                cfg.opt.abort_threshold = th;
            }
            let cfg = cfg.effective()?;
            let conditions = condition.conditions();
            let (table, records) =
                executor::evaluate(&trained, &cfg.env, &cfg.opt, &conditions, cfg.eval.episodes, cfg.seed)?;
            let checks = if conditions.len() == Condition::ALL.len() {
                ordinal_checks(&table)
            } else {
                Vec::new()
            };
            let csv = table.to_csv();
            print!("{csv}");
            write(&with_suffix(&out, ".csv"), &csv)?;
            let report = serde_json::json!({
                "config": cfg.to_json(),
                "model": model_path.display().to_string(),
                "metrics": table,
                "checks": checks,
                "episodes": records,
            });
            write(
                &with_suffix(&out, ".json"),
                &serde_json::to_string_pretty(&report).expect("report serializes"),
            )?;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if check {
                if checks.is_empty() {
                    return Err(Failure::Usage("--check needs --condition all".into()));
                }
                if checks.iter().any(|c| !c.passed) {
                    return Err(Failure::Check);
                }
            }
        }
        Command::Serve { port, out, assets } => {
            let mut cfg = base_config(cli.config.as_deref(), cli.seed)?;
            if let Some(p) = port {
                cfg.serve.port = p;
            }
            if assets.is_some() {
                cfg.serve.assets_dir = assets;
            }
            let cfg = cfg.effective()?;
            if out.exists() {
                let existing = data::load_dataset(&out)?;
                if existing.header.env_config != cfg.env {
                    return Err(Failure::Data(format!(
                        "{} was recorded with a different environment configuration",
                        out.display()
                    )));
                }
            }
            let opts = ServeOptions {
                env_cfg: cfg.env.clone(),
                seed: cfg.seed,
                tick_hz: cfg.serve.tick_hz,
                dataset_path: out,
                assets_dir: cfg.serve.assets_dir.clone(),
                run_config: Some(cfg.to_json()),
            };
            let addr = SocketAddr::from(([0, 0, 0, 0], cfg.serve.port));
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Data(e.to_string()))?;
            eprintln!("serving on http://{addr} (websocket at /ws)");
            runtime.block_on(server::serve(opts, addr, async {
                let _ = tokio::signal::ctrl_c().await;
            }))?;
        }
    }
    Ok(())
}
