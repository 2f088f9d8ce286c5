use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use softmin_cbf_bench::output::{self, Summary};
use softmin_cbf_bench::{Experiment, ExperimentConfig};

#[derive(Parser)]
#[command(name = "softmin-cbf", version, about = "Safety-filter experiments for the pendulum and ground-robot benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Suppress the summary on stdout.
    #[arg(long)]
    quiet: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single configured run (the first unless --run is given).
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        run: Option<String>,
        /// Also write the level-set grid to <out>/grid.csv.
        #[arg(long)]
        grid: bool,
    },
    /// Run every configured run in parallel.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Also write the level-set grid to <out>/grid.csv.
        #[arg(long)]
        grid: bool,
    },
    /// Sampled forward-invariance check of the backup set.
    CheckInvariance {
        #[command(flatten)]
        common: Common,
    },
    /// Sampled Lipschitz constants and the resulting epsilon threshold.
    EstimateLipschitz {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> anyhow::Result<Experiment> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Experiment::new(cfg)
}

fn finish(common: &Common, summary: &Summary, file: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    let path = common.out.join(file);
    std::fs::write(&path, summary.render()).with_context(|| format!("writing {}", path.display()))?;
    if !common.quiet {
        print!("{}", summary.render());
    }
    Ok(())
}

fn write_grid(exp: &Experiment, out: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(out)?;
    output::write_experiment_grid(exp, &out.join("grid.csv"))
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Simulate { common, run, grid } => {
            let exp = load(&common)?;
            let plan = match &run {
                Some(name) => exp.find_plan(name)?,
                None => &exp.plans[0],
            };
            let outcome = exp.run(plan)?;
            let ok = outcome.error.is_none();
            let summary = output::write_outcomes(&exp, std::slice::from_ref(&outcome), &common.out)?;
            if grid {
                write_grid(&exp, &common.out)?;
            }
            if !common.quiet {
                print!("{}", summary.render());
            }
            Ok(ok)
        }
        Command::Sweep { common, grid } => {
            let exp = load(&common)?;
            let outcomes = exp.run_all()?;
            let ok = outcomes.iter().all(|o| o.error.is_none());
            let summary = output::write_outcomes(&exp, &outcomes, &common.out)?;
            if grid {
                write_grid(&exp, &common.out)?;
            }
            if !common.quiet {
                print!("{}", summary.render());
            }
            Ok(ok)
        }
        Command::CheckInvariance { common } => {
            let exp = load(&common)?;
            let report = exp.check_invariance()?;
            let mut s = Summary::default();
            s.push("model", exp.bundle.name);
            s.push("seed", exp.seed());
            if let Some(syn) = &exp.robot_synthesis {
                s.push_float("robot.c_b_requested", syn.c_b_requested);
                s.push_float("robot.c_b", syn.c_b);
                s.push_float("robot.lyapunov_residual", syn.residual);
                s.push_float("robot.p_b_min_eigenvalue", syn.min_eigenvalue);
            }
            s.push("samples", report.samples);
            s.push_float("horizon", report.horizon);
            s.push_float("min_margin", report.min_margin);
            s.push("worst_start", format!("{:?}", report.worst_start));
            s.push("result", if report.pass { "PASS" } else { "FAIL" });
            finish(&common, &s, "invariance.txt")?;
            Ok(report.pass)
        }
        Command::EstimateLipschitz { common } => {
            let exp = load(&common)?;
            let l = exp.lipschitz()?;
            let mut s = Summary::default();
            s.push("model", exp.bundle.name);
            s.push("seed", l.seed);
            s.push("samples", l.samples);
            s.push_float("l_s", l.l_s);
            s.push_float("l_phi", l.l_phi);
            s.push_float("sample_time", exp.barrier.sample_time);
            s.push_float("epsilon_threshold", l.epsilon_threshold);
            s.push_float("sampled_sup_h", l.sampled_sup_h);
            s.push("threshold_below_sup_h", l.epsilon_threshold < l.sampled_sup_h);
            finish(&common, &s, "lipschitz.txt")?;
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
