//! Experiment configuration, presets, orchestration and report emission.
//!
//! Configs are TOML. Every section except `quantum.task` and `optimizer` may
//! be omitted; [`load_config`] fills all defaults so that [`dump`] echoes a
//! fully explicit file.

mod checks;
mod presets;
mod run;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::e2e::{train_e2e, E2eConfig};
use crate::error::{QocError, Result};
use crate::hwmodel::HardwareModel;
use crate::ppo::{train_ppo, PpoConfig};
use crate::qsim::{
    parse_gate_string, task_defaults, Backend, PhysicalConstants, QuantumTask, Simulator,
};
use crate::report::OptimizerReport;
use crate::sade_adam::{hybrid_run, HybridConfig};

pub use checks::{gradient_check, invariant_suite, CheckOutcome};
pub use presets::{preset, random_gate_set, GATE_POOL, PRESET_NAMES};
pub use run::{
    emit_plot_data, emit_sweep_data, episode_count, run_experiment, run_seed, run_sweep,
    write_seed_report, Aggregate, ExperimentOutcome, SeedFailure, SeedSummary, SweepPoint,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Where reports go; defaults to `runs/<name>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub hardware: HardwareModel,
    pub quantum: QuantumSection,
    pub optimizer: OptimizerConfig,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantumSection {
    pub task: TaskSpec,
    #[serde(default)]
    pub constants: PhysicalConstants,
    #[serde(default)]
    pub backend: Backend,
}

/// Either explicit gate strings or a random draw from [`GATE_POOL`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gates: Option<Vec<String>>,
    /// Number of atoms receiving a non-identity gate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random_gates: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_atoms: Option<usize>,
    /// Random gate sets are drawn with `gate_seed + run seed`.
    #[serde(default)]
    pub gate_seed: u64,
    #[serde(default = "task_defaults::gate_time_us")]
    pub gate_time_us: f64,
    #[serde(default = "task_defaults::t_steps")]
    pub t_steps: usize,
}

impl TaskSpec {
    pub fn fixed(gates: &[&str]) -> Self {
        Self {
            gates: Some(gates.iter().map(|s| s.to_string()).collect()),
            random_gates: None,
            n_atoms: Some(gates.len()),
            gate_seed: 0,
            gate_time_us: task_defaults::gate_time_us(),
            t_steps: task_defaults::t_steps(),
        }
    }

    pub fn random(n_gates: usize, n_atoms: usize, gate_seed: u64) -> Self {
        Self {
            gates: None,
            random_gates: Some(n_gates),
            n_atoms: Some(n_atoms),
            gate_seed,
            gate_time_us: task_defaults::gate_time_us(),
            t_steps: task_defaults::t_steps(),
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.n_atoms.unwrap_or(0)
    }

    /// The concrete task used for run seed `seed`.
    pub fn resolve(&self, seed: u64) -> Result<QuantumTask> {
        let gate_strings = match (&self.gates, self.random_gates) {
            (Some(g), None) => g.clone(),
            (None, Some(k)) => {
                random_gate_set(k, self.n_atoms(), self.gate_seed.wrapping_add(seed))?
            }
            _ => {
                return Err(schema(
                    "quantum.task",
                    "set exactly one of `gates` or `random_gates`",
                ))
            }
        };
        let task = QuantumTask {
            gate_strings,
            gate_time_us: self.gate_time_us,
            t_steps: self.t_steps,
        };
        task.validate()?;
        Ok(task)
    }

    fn fill(&mut self) -> Result<()> {
        match (&self.gates, self.random_gates) {
            (Some(g), None) => {
                for s in g {
                    parse_gate_string(s)
                        .map_err(|e| schema("quantum.task.gates", &e.to_string()))?;
                }
                match self.n_atoms {
                    None => self.n_atoms = Some(g.len()),
                    Some(n) if n != g.len() => {
                        return Err(schema(
                            "quantum.task.n_atoms",
                            "must equal the number of gate strings",
                        ))
                    }
                    _ => {}
                }
            }
            (None, Some(k)) => {
                let n = *self.n_atoms.get_or_insert(k.max(1));
                if k > n {
                    return Err(schema("quantum.task.random_gates", "cannot exceed n_atoms"));
                }
            }
            _ => {
                return Err(schema(
                    "quantum.task",
                    "set exactly one of `gates` or `random_gates`",
                ))
            }
        }
        if self.n_atoms() == 0 {
            return Err(schema("quantum.task.n_atoms", "must be >= 1"));
        }
        if self.t_steps == 0 {
            return Err(schema("quantum.task.t_steps", "must be >= 1"));
        }
        if !(self.gate_time_us > 0.0 && self.gate_time_us.is_finite()) {
            return Err(schema("quantum.task.gate_time_us", "must be > 0"));
        }
        Ok(())
    }
}

/// Exactly one optimizer, written as `[optimizer.sade_adam]`, `[optimizer.ppo]` or `[optimizer.e2e]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerConfig {
    SadeAdam(HybridConfig),
    Ppo(PpoConfig),
    E2e(E2eConfig),
}

impl OptimizerConfig {
    pub fn method(&self) -> &'static str {
        match self {
            OptimizerConfig::SadeAdam(_) => "sade_adam",
            OptimizerConfig::Ppo(_) => "ppo",
            OptimizerConfig::E2e(_) => "e2e",
        }
    }

    /// Default configuration for a method name.
    pub fn from_method(name: &str) -> Result<Self> {
        match name {
            "sade_adam" => Ok(OptimizerConfig::SadeAdam(HybridConfig::default())),
            "ppo" => Ok(OptimizerConfig::Ppo(PpoConfig::default())),
            "e2e" => Ok(OptimizerConfig::E2e(E2eConfig::default())),
            other => Err(schema("optimizer", &format!("unknown method `{other}`"))),
        }
    }

    pub fn eval_budget(&self) -> Option<u64> {
        match self {
            OptimizerConfig::SadeAdam(c) => c.eval_budget,
            OptimizerConfig::Ppo(c) => c.eval_budget,
            OptimizerConfig::E2e(c) => c.eval_budget,
        }
    }

    pub fn set_eval_budget(&mut self, budget: Option<u64>) {
        match self {
            OptimizerConfig::SadeAdam(c) => c.eval_budget = budget,
            OptimizerConfig::Ppo(c) => c.eval_budget = budget,
            OptimizerConfig::E2e(c) => c.eval_budget = budget,
        }
    }

    fn validate(&self, t_steps: usize) -> Result<()> {
        match self {
            OptimizerConfig::SadeAdam(c) => {
                c.sade.validate()?;
                c.adam.validate()?;
                if c.n_segments == 0 || !t_steps.is_multiple_of(c.n_segments) {
                    return Err(schema(
                        "optimizer.sade_adam.n_segments",
                        "must divide quantum.task.t_steps",
                    ));
                }
                Ok(())
            }
            OptimizerConfig::Ppo(c) => {
                c.validate()?;
                if c.n_segments == 0 || !t_steps.is_multiple_of(c.n_segments) {
                    return Err(schema(
                        "optimizer.ppo.n_segments",
                        "must divide quantum.task.t_steps",
                    ));
                }
                Ok(())
            }
            OptimizerConfig::E2e(c) => c.validate(t_steps),
        }
    }
}

fn schema(field: &str, reason: &str) -> QocError {
    QocError::Schema {
        field: field.into(),
        reason: reason.into(),
    }
}

impl ExperimentConfig {
    pub fn new(name: &str, task: TaskSpec, optimizer: OptimizerConfig) -> Self {
        Self {
            name: name.into(),
            seeds: default_seeds(),
            output_dir: None,
            hardware: HardwareModel::default(),
            quantum: QuantumSection {
                task,
                constants: PhysicalConstants::default(),
                backend: Backend::default(),
            },
            optimizer,
        }
    }

    /// Fill every derived default and check cross-section invariants.
    pub fn resolve(&mut self) -> Result<()> {
        if self.name.is_empty() {
            return Err(schema("name", "must be nonempty"));
        }
        if self.seeds.is_empty() {
            return Err(schema("seeds", "must be nonempty"));
        }
        self.quantum.task.fill()?;
        let n_atoms = self.quantum.task.n_atoms();
        self.hardware.resolve(n_atoms)?;
        if self.hardware.n_channels() != n_atoms {
            return Err(schema(
                "hardware.geometry.n_channels",
                "must equal the number of atoms",
            ));
        }
        self.quantum
            .constants
            .resolve(self.quantum.task.gate_time_us * 1e-6)?;
        self.optimizer.validate(self.quantum.task.t_steps)?;
        if self.output_dir.is_none() {
            self.output_dir = Some(PathBuf::from("runs").join(&self.name));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("runs").join(&self.name))
    }

    /// Identifies everything that determines the outcome of run `seed`.
    /// The output directory and the other seeds are excluded.
    pub fn config_hash(&self, seed: u64) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        c.seeds = vec![seed];
        let text = dump(&c)?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }

    pub fn simulator(&self, seed: u64) -> Result<Simulator> {
        let task = self.quantum.task.resolve(seed)?;
        Ok(
            Simulator::new(&self.hardware, &task, &self.quantum.constants)?
                .with_backend(self.quantum.backend),
        )
    }

    /// Runs the configured optimizer for one seed.
    pub fn optimize(&self, seed: u64) -> Result<OptimizerReport> {
        let sim = self.simulator(seed)?;
        let mut report = match &self.optimizer {
            OptimizerConfig::SadeAdam(c) => hybrid_run(&sim, c, seed)?,
            OptimizerConfig::Ppo(c) => train_ppo(&sim, c, seed)?,
            OptimizerConfig::E2e(c) => train_e2e(&self.hardware, &sim, c, seed)?,
        };
        report.config_hash = self.config_hash(seed)?;
        Ok(report)
    }
}

/// Parse and resolve a config from TOML text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let mut cfg: ExperimentConfig = toml::from_str(text)?;
    cfg.resolve()?;
    Ok(cfg)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Canonical TOML text of a config.
pub fn dump(cfg: &ExperimentConfig) -> Result<String> {
    Ok(toml::to_string(cfg)?)
}
