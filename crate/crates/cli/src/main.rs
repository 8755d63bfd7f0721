//! `leakmem`: train, probe and inspect models on the synthetic world.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use leakmem_core::checkpoint;
use leakmem_core::probe::{self, Setting};
use leakmem_core::train;
use leakmem_core::{gradcheck, Error, RunConfig, World};

const SEED_VAR: &str = "LEAKMEM_SEED";

mod exit {
    pub const CONFIG: u8 = 2;
    pub const NUMERIC: u8 = 3;
    pub const CHECKPOINT: u8 = 4;
    pub const CAPABILITY: u8 = 5;
    pub const OTHER: u8 = 1;
}

#[derive(Parser)]
#[command(name = "leakmem", version, about = "Identity-leakage experiments on a synthetic identity x motion world")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes metrics.jsonl, alignment.jsonl, config.json and model.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-scale feature swap sweep; writes probe_<setting>.json and .csv.
    Probe {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "cross")]
        setting: Setting,
        /// Output directory, defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable primitive and loss.
    Gradcheck {
        #[arg(long, default_value_t = gradcheck::DEFAULT_PROBES)]
        probes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Memory bank statistics as JSON.
    MemoryInspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 256)]
        samples: usize,
    },
    /// Leakage, gap, swap and retrieval metrics for one checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
    },
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    error: Error,
}

impl Failure {
    fn with(code: u8) -> impl Fn(Error) -> Failure {
        move |error| Failure { code, error }
    }
}

impl From<Error> for Failure {
    fn from(error: Error) -> Self {
        let code = match &error {
            Error::Config { .. } => exit::CONFIG,
            Error::NonFiniteLoss { .. } | Error::Numeric { .. } => exit::NUMERIC,
            Error::Checkpoint { .. } => exit::CHECKPOINT,
            Error::Capability(_) => exit::CAPABILITY,
            _ => exit::OTHER,
        };
        Failure { code, error }
    }
}

type CmdResult = Result<(), Failure>;

fn seed_override() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_VAR) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            Failure::with(exit::CONFIG)(Error::Config {
                path: SEED_VAR.into(),
                message: format!("`{v}` is not an unsigned integer"),
            })
        }),
        Err(_) => Ok(None),
    }
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable report");
    s.push('\n');
    s
}

fn write(path: &Path, text: &str) -> CmdResult {
    checkpoint::write_atomic(path, text.as_bytes()).map_err(Failure::from)
}

fn load_checkpoint(path: &Path) -> Result<(RunConfig, leakmem_core::Model, World), Failure> {
    let (mut cfg, model) = checkpoint::load(path).map_err(Failure::with(exit::CHECKPOINT))?;
    if let Some(seed) = seed_override()? {
        cfg.eval.seed = seed;
    }
    let world = World::new(cfg.world.clone()).map_err(Failure::with(exit::CHECKPOINT))?;
    Ok((cfg, model, world))
}

fn cmd_train(config: &Path, out: &Path) -> CmdResult {
    let mut cfg = RunConfig::load(config).map_err(Failure::with(exit::CONFIG))?;
    if let Some(seed) = seed_override()? {
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    let world = World::new(cfg.world.clone())?;
    let outcome = train::run_training(&cfg, &world, |r| {
        if r.step % 500 == 0 {
            log::info!("step {} total {:.5}", r.step, r.total);
        }
    })?;
    train::write_run(out, &cfg, &outcome)?;
    println!(
        "{}",
        serde_json::json!({
            "steps": cfg.train.steps,
            "final": outcome.history.last(),
            "final_alignment_kl": outcome.alignment.last().map(|p| p.kl),
            "checkpoint": out.join(train::CHECKPOINT_FILE),
        })
    );
    Ok(())
}

fn cmd_probe(ckpt: &Path, setting: Setting, out: Option<&Path>) -> CmdResult {
    let (cfg, model, world) = load_checkpoint(ckpt)?;
    let report = probe::feature_swap_sweep(&model, &world, setting, &cfg.eval)?;
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).to_path_buf());
    let json = to_json(&report);
    write(&dir.join(format!("probe_{setting}.json")), &json)?;
    write(&dir.join(format!("probe_{setting}.csv")), &report.to_csv())?;
    print!("{json}");
    Ok(())
}

fn cmd_gradcheck(probes: usize, seed: u64) -> CmdResult {
    let report = gradcheck::run_all(probes, seed, None)?;
    print!("{}", to_json(&report));
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<_> = report
            .results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.name.as_str())
            .collect();
        Err(Failure::with(exit::NUMERIC)(Error::Numeric {
            op: "gradcheck".into(),
            detail: format!("failed: {}", failed.join(", ")),
        }))
    }
}

fn cmd_memory_inspect(ckpt: &Path, samples: usize) -> CmdResult {
    let (cfg, model, world) = load_checkpoint(ckpt)?;
    let report = probe::memory_inspect(&model, &world, samples, cfg.eval.seed)?;
    print!("{}", to_json(&report));
    Ok(())
}

fn cmd_eval(ckpt: &Path) -> CmdResult {
    let (cfg, model, world) = load_checkpoint(ckpt)?;
    let report = probe::evaluate(&model, &world, &cfg.eval)?;
    print!("{}", to_json(&report));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { config, out } => cmd_train(config, out),
        Command::Probe { ckpt, setting, out } => cmd_probe(ckpt, *setting, out.as_deref()),
        Command::Gradcheck { probes, seed } => cmd_gradcheck(*probes, *seed),
        Command::MemoryInspect { ckpt, samples } => cmd_memory_inspect(ckpt, *samples),
        Command::Eval { ckpt } => cmd_eval(ckpt),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, error }) => {
            eprintln!("error: {error}");
            ExitCode::from(code)
        }
    }
}
