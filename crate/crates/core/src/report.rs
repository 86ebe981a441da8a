//! Optimizer output shared by every method.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::schedule::ControlSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: u64,
    pub best_cost: f64,
    pub fidelity: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    TargetReached,
    Stagnation,
    BudgetExhausted,
    MaxIterations,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub name: String,
    /// Index range into the trace, end exclusive.
    pub trace_start: usize,
    pub trace_end: usize,
    pub termination: Termination,
    pub best_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerReport {
    pub method: String,
    pub seed: u64,
    pub trace: Vec<TracePoint>,
    pub phases: Vec<PhaseSummary>,
    pub best_schedule: ControlSchedule,
    /// Fidelity of `best_schedule` re-simulated on the task grid.
    pub final_fidelity: f64,
    pub final_error: f64,
    pub termination: Termination,
    /// Simulator passes; a gradient evaluation counts as two.
    pub evaluations: u64,
    /// SADE generation at which Adam took over.
    pub switch_generation: Option<u64>,
    pub wall_ms: f64,
    pub config_hash: String,
}

impl OptimizerReport {
    /// Trace with wall-clock stripped, for determinism comparisons.
    pub fn trace_without_time(&self) -> Vec<(u64, f64, f64)> {
        self.trace
            .iter()
            .map(|p| (p.iteration, p.best_cost, p.fidelity))
            .collect()
    }
}

/// Shared evaluation counter and clock.
#[derive(Debug)]
pub struct Budget {
    used: AtomicU64,
    limit: Option<u64>,
    start: Instant,
}

impl Budget {
    pub fn new(limit: Option<u64>) -> Self {
        Self {
            used: AtomicU64::new(0),
            limit,
            start: Instant::now(),
        }
    }

    pub fn charge(&self, n: u64) {
        self.used.fetch_add(n, Ordering::Relaxed);
    }

    pub fn used(&self) -> u64 {
        self.used.load(Ordering::Relaxed)
    }

    pub fn exhausted(&self) -> bool {
        self.limit.is_some_and(|l| self.used() >= l)
    }

    /// Whether `n` more evaluations fit.
    pub fn allows(&self, n: u64) -> bool {
        self.limit.is_none_or(|l| self.used() + n <= l)
    }

    pub fn elapsed_ms(&self) -> f64 {
        self.start.elapsed().as_secs_f64() * 1e3
    }
}

/// Gradient calls count as a forward plus a reverse sweep.
pub const GRADIENT_EVALUATIONS: u64 = 2;
