use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dump, ExperimentConfig};
use crate::error::{QocError, Result};
use crate::report::OptimizerReport;

/// Contents of `seed_<n>/summary.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub name: String,
    pub gate_strings: Vec<String>,
    #[serde(flatten)]
    pub report: OptimizerReport,
    /// Full resolved config as TOML.
    pub config: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub name: String,
    pub method: String,
    pub seeds: Vec<u64>,
    pub successes: usize,
    pub failures: Vec<SeedFailure>,
    /// `(seed, final error)` per successful seed.
    pub final_errors: Vec<(u64, f64)>,
    pub final_error_mean: Option<f64>,
    /// Population standard deviation.
    pub final_error_std: Option<f64>,
    pub final_error_median: Option<f64>,
    pub episodes_mean: Option<f64>,
    pub episodes_std: Option<f64>,
}

impl Aggregate {
    pub fn from_reports(
        cfg: &ExperimentConfig,
        reports: &[OptimizerReport],
        failures: Vec<SeedFailure>,
    ) -> Self {
        let errors: Vec<f64> = reports.iter().map(|r| r.final_error).collect();
        let episodes: Vec<f64> = reports.iter().map(|r| episode_count(r) as f64).collect();
        let (em, es) = mean_std(&errors);
        let (pm, ps) = mean_std(&episodes);
        Self {
            name: cfg.name.clone(),
            method: cfg.optimizer.method().into(),
            seeds: cfg.seeds.clone(),
            successes: reports.len(),
            failures,
            final_errors: reports.iter().map(|r| (r.seed, r.final_error)).collect(),
            final_error_mean: em,
            final_error_std: es,
            final_error_median: median(&errors),
            episodes_mean: pm,
            episodes_std: ps,
        }
    }
}

/// Iterations (generations, steps or episodes) recorded in the trace.
pub fn episode_count(r: &OptimizerReport) -> u64 {
    r.trace.last().map_or(0, |p| p.iteration + 1)
}

fn mean_std(x: &[f64]) -> (Option<f64>, Option<f64>) {
    if x.is_empty() {
        return (None, None);
    }
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (Some(m), Some(v.sqrt()))
}

pub(crate) fn median(x: &[f64]) -> Option<f64> {
    if x.is_empty() {
        return None;
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub reports: Vec<OptimizerReport>,
    pub aggregate: Aggregate,
}

impl ExperimentOutcome {
    pub fn all_succeeded(&self) -> bool {
        self.aggregate.failures.is_empty()
    }
}

/// One pitch-sweep dot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub d0: f64,
    pub seed: u64,
    pub final_error: f64,
}

/// Optimizes one seed and writes its trace and summary under `dir`.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<OptimizerReport> {
    let report = cfg.optimize(seed)?;
    write_seed_report(dir, cfg, &report)?;
    Ok(report)
}

pub fn write_seed_report(
    dir: &Path,
    cfg: &ExperimentConfig,
    report: &OptimizerReport,
) -> Result<()> {
    let seed_dir = dir.join(format!("seed_{}", report.seed));
    fs::create_dir_all(&seed_dir)?;
    let mut w = csv::Writer::from_path(seed_dir.join("trace.csv"))?;
    for p in &report.trace {
        w.serialize(p)?;
    }
    if report.trace.is_empty() {
        w.write_record(["iteration", "best_cost", "fidelity", "wall_ms"])?;
    }
    w.flush()?;
    let summary = SeedSummary {
        name: cfg.name.clone(),
        gate_strings: cfg.quantum.task.resolve(report.seed)?.gate_strings,
        report: report.clone(),
        config: dump(cfg)?,
    };
    fs::write(
        seed_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| QocError::InvalidParameter(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        None => Ok(f()),
    }
}

fn run_in_pool(cfg: &ExperimentConfig, dir: &Path) -> Result<ExperimentOutcome> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), dump(cfg)?)?;
    let results: Vec<(u64, Result<OptimizerReport>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| (seed, run_seed(cfg, seed, dir)))
        .collect();
    let mut reports = Vec::new();
    let mut failures = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(rep) => {
                log::info!(
                    "{} seed {seed}: error {:.3e} ({:?})",
                    cfg.name,
                    rep.final_error,
                    rep.termination
                );
                reports.push(rep);
            }
            Err(e) => {
                log::error!("{} seed {seed} failed: {e}", cfg.name);
                failures.push(SeedFailure {
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    let aggregate = Aggregate::from_reports(cfg, &reports, failures);
    fs::write(
        dir.join("aggregate.json"),
        serde_json::to_string_pretty(&aggregate)?,
    )?;
    emit_plot_data(&reports, dir)?;
    Ok(ExperimentOutcome {
        dir: dir.to_path_buf(),
        reports,
        aggregate,
    })
}

/// Runs every seed (in parallel, up to `threads`) and writes
/// `config.toml`, `seed_<n>/{trace.csv,summary.json}`, `aggregate.json` and `curve.csv`.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    dir: Option<&Path>,
    threads: Option<usize>,
) -> Result<ExperimentOutcome> {
    let mut cfg = cfg.clone();
    if let Some(d) = dir {
        cfg.output_dir = Some(d.to_path_buf());
    }
    let dir = cfg.output_dir();
    with_pool(threads, || run_in_pool(&cfg, &dir))?
}

/// Runs several configs into `dir/<name>` and writes `pitch_sweep.csv` when they differ in pitch.
pub fn run_sweep(
    cfgs: &[ExperimentConfig],
    dir: &Path,
    threads: Option<usize>,
) -> Result<Vec<ExperimentOutcome>> {
    let outcomes = with_pool(threads, || {
        cfgs.par_iter()
            .map(|c| {
                let d = dir.join(&c.name);
                let c = ExperimentConfig {
                    output_dir: Some(d.clone()),
                    ..c.clone()
                };
                run_in_pool(&c, &d)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    if cfgs.len() > 1 {
        let points: Vec<SweepPoint> = cfgs
            .iter()
            .zip(&outcomes)
            .flat_map(|(c, o)| {
                o.reports.iter().map(|r| SweepPoint {
                    d0: c.hardware.geometry.d0,
                    seed: r.seed,
                    final_error: r.final_error,
                })
            })
            .collect();
        emit_sweep_data(&points, dir)?;
    }
    Ok(outcomes)
}

/// Writes `curve.csv`: one row per trace index with each seed's best cost
/// (held after a trace ends) and the mean and standard deviation across seeds.
pub fn emit_plot_data(reports: &[OptimizerReport], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("curve.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["iteration".to_string()];
    header.extend(reports.iter().map(|r| format!("seed_{}", r.seed)));
    header.extend(["mean_best_cost".into(), "std_best_cost".into()]);
    w.write_record(&header)?;
    let rows = reports.iter().map(|r| r.trace.len()).max().unwrap_or(0);
    for k in 0..rows {
        let vals: Vec<f64> = reports
            .iter()
            .map(|r| r.trace[k.min(r.trace.len() - 1)].best_cost)
            .collect();
        let (m, s) = mean_std(&vals);
        let mut rec = vec![k.to_string()];
        rec.extend(vals.iter().map(|v| v.to_string()));
        rec.push(m.unwrap_or(f64::NAN).to_string());
        rec.push(s.unwrap_or(f64::NAN).to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(path)
}

/// Writes `pitch_sweep.csv` with one `(d0, seed, final_error)` row per dot.
pub fn emit_sweep_data(points: &[SweepPoint], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("pitch_sweep.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(path)
}
