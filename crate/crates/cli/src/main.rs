//! `sso`: train, sweep, placement and MoE-factor commands.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 divergence.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use spectral_sphere::config::ExperimentConfig;
use spectral_sphere::granularity::init_registry;
use spectral_sphere::harness::{moe_scaling_factor, run_training, width_sweep};
use spectral_sphere::placement::{place, PlacementReport, Policy, WorkItem};
use spectral_sphere::Error;

/// Overrides `output_dir` from the config file.
const OUT_DIR_ENV: &str = "SPHERE_OUT_DIR";

#[derive(Parser)]
#[command(name = "sso", version, about = "Spectral sphere optimizer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write per-step metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the config's width x learning-rate grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
    },
    /// Assign a workload of modules to ranks and print the report as JSON.
    Place {
        #[arg(long)]
        workload: PathBuf,
        #[arg(long)]
        ranks: usize,
        #[arg(long, value_enum, default_value = "pingpong")]
        policy: PolicyArg,
    },
    /// Monte Carlo estimate of the MoE routing scaling factor.
    MoeFactor {
        #[arg(long, default_value_t = 64)]
        n_total: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        n_shared: usize,
        #[arg(long, default_value_t = 10_000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Pingpong,
    Greedy,
    Roundrobin,
    All,
}

impl PolicyArg {
    fn policies(self) -> Vec<Policy> {
        match self {
            PolicyArg::Pingpong => vec![Policy::Pingpong],
            PolicyArg::Greedy => vec![Policy::Greedy],
            PolicyArg::Roundrobin => vec![Policy::RoundRobin],
            PolicyArg::All => Policy::ALL.to_vec(),
        }
    }
}

enum Outcome {
    Done,
    Diverged,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train { config } => train(&config),
        Command::Sweep { config } => sweep(&config),
        Command::Place { workload, ranks, policy } => place_cmd(&workload, ranks, policy),
        Command::MoeFactor { n_total, k, n_shared, trials, seed } => moe(n_total, k, n_shared, trials, seed),
    };
    match result {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Diverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Prints to stdout; a reader that went away early is not an error.
fn emit(text: &str) -> anyhow::Result<()> {
    match writeln!(std::io::stdout().lock(), "{text}") {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        other => Ok(other?),
    }
}

fn load_config(path: &Path) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(path).with_context(|| format!("config {}", path.display()))?;
    let out = std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn train(path: &Path) -> anyhow::Result<Outcome> {
    let (cfg, out) = load_config(path)?;
    let mut reg = init_registry(&cfg.model, &cfg.init_options())?;
    std::fs::create_dir_all(&out).with_context(|| format!("output directory {}", out.display()))?;
    std::fs::write(out.join(format!("{}.config.json", cfg.run_name)), cfg.to_json()?)?;
    match run_training(&cfg.task, &cfg.model, &mut reg, &cfg.run_config(Some(&out))) {
        Ok(rep) => {
            emit(&format!(
                "run {} optimizer {} steps {} final_loss {:.6e} metrics {}",
                cfg.run_name,
                cfg.optimizer.name(),
                rep.metrics.len(),
                rep.final_loss,
                out.join(format!("{}.jsonl", cfg.run_name)).display()
            ))?;
            Ok(Outcome::Done)
        }
        Err(e) if matches!(e.root(), Error::DivergenceDetected { .. }) => {
            log::error!("DivergenceDetected: {e}");
            Ok(Outcome::Diverged)
        }
        Err(e) => Err(e.into()),
    }
}

fn sweep(path: &Path) -> anyhow::Result<Outcome> {
    let (cfg, out) = load_config(path)?;
    let Some(grid) = &cfg.sweep else {
        bail!("config {} has no `sweep` section", path.display());
    };
    let rep = width_sweep(
        &grid.widths,
        &grid.etas,
        &cfg.task,
        &cfg.model,
        &cfg.init_options(),
        &cfg.run_config(None),
    )?;
    std::fs::create_dir_all(&out).with_context(|| format!("output directory {}", out.display()))?;
    let csv = out.join(format!("{}_sweep.csv", cfg.run_name));
    std::fs::write(&csv, rep.to_csv())?;
    std::fs::write(out.join(format!("{}_sweep.json", cfg.run_name)), serde_json::to_string_pretty(&rep)?)?;
    for cell in rep.cells.iter().filter(|c| c.error.is_some()) {
        log::warn!("width {} eta {}: {}", cell.width, cell.eta, cell.error.as_deref().unwrap_or(""));
    }
    emit(&format!(
        "sweep {}: {}/{} cells succeeded, grid {}",
        cfg.run_name,
        rep.succeeded(),
        rep.cells.len(),
        csv.display()
    ))?;
    if rep.succeeded() > 0 {
        Ok(Outcome::Done)
    } else if rep.cells.iter().any(|c| c.diverged) {
        log::error!("DivergenceDetected in every cell");
        Ok(Outcome::Diverged)
    } else {
        bail!("every sweep cell failed")
    }
}

fn place_cmd(workload: &Path, ranks: usize, policy: PolicyArg) -> anyhow::Result<Outcome> {
    let text = std::fs::read_to_string(workload).with_context(|| format!("workload {}", workload.display()))?;
    let items: Vec<WorkItem> =
        serde_json::from_str(&text).with_context(|| format!("workload {}", workload.display()))?;
    let reports = policy
        .policies()
        .into_iter()
        .map(|p| place(&items, ranks, p))
        .collect::<Result<Vec<PlacementReport>, _>>()?;
    let doc = match reports.as_slice() {
        [one] => serde_json::to_string_pretty(one)?,
        all => serde_json::to_string_pretty(all)?,
    };
    emit(&doc)?;
    Ok(Outcome::Done)
}

fn moe(n_total: usize, k: usize, n_shared: usize, trials: usize, seed: u64) -> anyhow::Result<Outcome> {
    let est = moe_scaling_factor(n_total, k, n_shared, trials, seed)?;
    let doc = serde_json::json!({
        "n_total": n_total,
        "k": k,
        "n_shared": n_shared,
        "seed": seed,
        "trials": est.trials,
        "mean": est.mean,
        "std_error": est.std_error,
    });
    emit(&serde_json::to_string_pretty(&doc)?)?;
    Ok(Outcome::Done)
}
