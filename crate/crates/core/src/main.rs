use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qoc_codesign::harness::{
    dump, gradient_check, invariant_suite, load_config, preset, run_experiment, run_sweep,
    ExperimentConfig, OptimizerConfig,
};

#[derive(Parser)]
#[command(
    name = "qoc",
    version,
    about = "Photonic-hardware-aware quantum optimal control experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run only this seed (overrides the config's seed list).
    #[arg(long)]
    seed: Option<u64>,
    /// Report directory (overrides the config's output_dir).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads for seeds and sweep points.
    #[arg(long)]
    threads: Option<usize>,
    /// Cap on simulator passes per seed (gradients count twice).
    #[arg(long)]
    eval_budget: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run a named preset, or write its config with --out.
    Preset {
        /// easy_x1, intermediate_ng2, hard_ng3, pitch_sweep or dynamic_imperfections.
        name: String,
        /// Write the resolved config(s) here instead of running.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the preset optimizer: sade_adam, ppo or e2e.
        #[arg(long)]
        method: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Invariant suite: unitarity, phase invariance, chain linearity, Rabi oracle.
    Check {
        #[arg(long, default_value_t = 100)]
        schedules: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Analytic gradient against central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 1e-5)]
        step: f64,
        #[command(flatten)]
        common: Common,
    },
}

fn apply_common(cfg: &mut ExperimentConfig, common: &Common) {
    if let Some(s) = common.seed {
        cfg.seeds = vec![s];
    }
    if common.eval_budget.is_some() {
        cfg.optimizer.set_eval_budget(common.eval_budget);
    }
}

fn run_all(cfgs: &[ExperimentConfig], common: &Common) -> qoc_codesign::Result<bool> {
    if let [cfg] = cfgs {
        let outcome = run_experiment(cfg, common.out_dir.as_deref(), common.threads)?;
        println!("{}", serde_json::to_string_pretty(&outcome.aggregate)?);
        return Ok(outcome.all_succeeded());
    }
    let root = common
        .out_dir
        .clone()
        .unwrap_or_else(|| Path::new("runs").join("sweep"));
    let outcomes = run_sweep(cfgs, &root, common.threads)?;
    for o in &outcomes {
        println!("{}", serde_json::to_string_pretty(&o.aggregate)?);
    }
    Ok(outcomes.iter().all(|o| o.all_succeeded()))
}

fn write_configs(cfgs: &[ExperimentConfig], out: &Path) -> qoc_codesign::Result<()> {
    if let [cfg] = cfgs {
        std::fs::write(out, dump(cfg)?)?;
    } else {
        std::fs::create_dir_all(out)?;
        for c in cfgs {
            std::fs::write(out.join(format!("{}.toml", c.name)), dump(c)?)?;
        }
    }
    Ok(())
}

fn execute(cli: Cli) -> qoc_codesign::Result<bool> {
    match cli.command {
        Command::Run { config, common } => {
            let mut cfg = load_config(&config)?;
            apply_common(&mut cfg, &common);
            run_all(&[cfg], &common)
        }
        Command::Preset {
            name,
            out,
            method,
            common,
        } => {
            let mut cfgs = preset(&name)?;
            for c in &mut cfgs {
                if let Some(m) = &method {
                    c.optimizer = OptimizerConfig::from_method(m)?;
                    c.resolve()?;
                }
                apply_common(c, &common);
            }
            match out {
                Some(path) => {
                    write_configs(&cfgs, &path)?;
                    Ok(true)
                }
                None => {
                    let common = Common {
                        out_dir: common
                            .out_dir
                            .clone()
                            .or_else(|| Some(Path::new("runs").join(&name))),
                        ..common
                    };
                    run_all(&cfgs, &common)
                }
            }
        }
        Command::Check { schedules, common } => {
            let results = invariant_suite(common.seed.unwrap_or(0), schedules)?;
            for r in &results {
                println!("{r}");
            }
            Ok(results.iter().all(|r| r.pass))
        }
        Command::Gradcheck {
            points,
            step,
            common,
        } => {
            let r = gradient_check(common.seed.unwrap_or(0), points, step)?;
            println!("{r}");
            Ok(r.pass)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
