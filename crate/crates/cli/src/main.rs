//! Command-line front end for the dispatch simulator.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dispatchsim_core::experiment::{
    cmd_abtest, cmd_compare, cmd_gen_log, cmd_heatmap, cmd_run, cmd_sweep, ExperimentConfig,
    Overrides,
};
use dispatchsim_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dispatchsim",
    version,
    about = "Marketplace dispatch simulator and experiment harness"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by the config-driven subcommands. Command-line values
/// override the config file.
#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Base seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Half-open seed range `N..M` for multi-seed commands.
    #[arg(long)]
    seeds: Option<String>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Price scale override.
    #[arg(long)]
    price_scale: Option<f64>,
    /// Policy name for single-policy commands.
    #[arg(long)]
    policy: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one policy through the configured scenario.
    Run(CommonArgs),
    /// Run every configured policy over matched seeds and compare to a baseline.
    Compare(CommonArgs),
    /// Alternate two policies in wall-clock blocks within one run.
    Abtest(CommonArgs),
    /// Search edge-weight schedule bounds for the best income.
    Sweep(CommonArgs),
    /// Export a value heatmap from a previous run's snapshots.
    Heatmap {
        /// Directory a `run` command wrote its artifacts to.
        #[arg(long)]
        run_dir: PathBuf,
        /// Simulation time to look up; the nearest snapshot wins.
        #[arg(long)]
        t: u64,
        /// Policy to export when snapshots cover several.
        #[arg(long)]
        policy: Option<String>,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a replayable trip event log from the configured preset.
    GenLog(CommonArgs),
}

fn parse_seed_range(s: &str) -> Result<(u64, u64)> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| Error::config(format!("--seeds wants `N..M`, got '{s}'")))?;
    let a: u64 = a
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("--seeds start '{a}' is not an integer")))?;
    let b: u64 = b
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("--seeds end '{b}' is not an integer")))?;
    if b <= a {
        return Err(Error::config("--seeds range must be non-empty (N < M)"));
    }
    Ok((a, b))
}

fn load(common: &CommonArgs) -> Result<(ExperimentConfig, Overrides)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    let ov = Overrides {
        seed: common.seed,
        seeds: common.seeds.as_deref().map(parse_seed_range).transpose()?,
        out: common.out.clone(),
        price_scale: common.price_scale,
        policy: common.policy.clone(),
    };
    cfg.apply_overrides(&ov);
    Ok((cfg, ov))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(common) => {
            let (cfg, ov) = load(&common)?;
            let report = cmd_run(&cfg, ov.policy.as_deref())?;
            let t = &report.totals;
            println!(
                "run seed={} horizon={}s policy={}",
                report.seed,
                report.horizon_s,
                report.policies.join(",")
            );
            println!(
                "requests={} accepted={} completed={} income={:.2}",
                t.requests, t.accepted, t.completed, t.income
            );
            println!("cr={:.4} ar={:.4} sr={:.4}", t.cr, t.ar, t.sr);
            println!("artifacts: {}", cfg.experiment.out_dir.display());
        }
        Command::Compare(common) => {
            let (cfg, ov) = load(&common)?;
            let report = cmd_compare(&cfg, &ov)?;
            println!(
                "compare baseline={} seeds={:?}",
                report.baseline, report.seeds
            );
            for row in &report.improvements {
                println!(
                    "{:>12} {:>7}: {:+.3}% ± {:.3}%",
                    row.policy, row.metric, row.mean_pct, row.std_pct
                );
            }
            println!("artifacts: {}", cfg.experiment.out_dir.display());
        }
        Command::Abtest(common) => {
            let (cfg, _) = load(&common)?;
            let report = cmd_abtest(&cfg)?;
            println!("abtest flip={}s seed={}", report.flip_interval_s, report.seed);
            for p in &report.per_policy {
                println!(
                    "{:>12}: requests={} completed={} income={:.2} cr={:.4}",
                    p.policy, p.requests, p.completed, p.income, p.cr
                );
            }
            println!("artifacts: {}", cfg.experiment.out_dir.display());
        }
        Command::Sweep(common) => {
            let (cfg, ov) = load(&common)?;
            let report = cmd_sweep(&cfg, &ov)?;
            let b = &report.best;
            println!(
                "sweep evaluated {} points over seeds {:?}",
                report.trace.len(),
                report.seeds
            );
            println!(
                "best index={} w_rew=({}, {}) w_p=({}, {}) income={:.2}",
                b.index, b.w_rew_start, b.w_rew_finish, b.w_p_start, b.w_p_finish, b.income
            );
            println!("artifacts: {}", cfg.experiment.out_dir.display());
        }
        Command::Heatmap { run_dir, t, policy, out } => {
            let csv = cmd_heatmap(&run_dir, t, policy.as_deref(), out.as_deref())?;
            match out {
                Some(path) => println!("wrote {}", path.display()),
                None => print!("{csv}"),
            }
        }
        Command::GenLog(common) => {
            let (cfg, _) = load(&common)?;
            let path = cmd_gen_log(&cfg)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
