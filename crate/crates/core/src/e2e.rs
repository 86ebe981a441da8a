//! Differentiable end-to-end optimizer: an MLP maps a latent vector to a full
//! voltage schedule and the infidelity gradient flows back through the
//! simulator into the network, with a coarse-to-fine segment curriculum.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffengine::{
    adam_step, mlp_backward, mlp_forward, mlp_init, value_and_grad, Activation, AdamState,
    LayerSpec, MlpParams,
};
use crate::error::{QocError, Result};
use crate::hwmodel::{HardwareModel, V_MAX};
use crate::qsim::Simulator;
use crate::report::{
    Budget, OptimizerReport, PhaseSummary, Termination, TracePoint, GRADIENT_EVALUATIONS,
};
use crate::schedule::{hold_source, ControlSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct E2eConfig {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    /// Segment counts per curriculum phase; each phase simulates on a grid of that many steps.
    pub phases: Vec<usize>,
    /// Gradient steps allowed per phase.
    pub phase_episodes: Vec<usize>,
    pub lr: f64,
    pub grad_clip: f64,
    pub stop_fidelity: f64,
    pub stagnation_window: usize,
    /// Relative loss improvement below which an episode counts as stagnant.
    pub stagnation_eps: f64,
    /// Consecutive learning-rate halvings without improvement before a phase ends.
    pub max_decays: usize,
    pub latent: LatentMode,
    /// Simulator passes allowed in total (gradients count twice).
    pub eval_budget: Option<u64>,
}

impl Default for E2eConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            latent_dim: 16,
            phases: vec![20, 50, 100],
            phase_episodes: vec![3000, 3000, 4000],
            lr: 1e-3,
            grad_clip: 1.0,
            stop_fidelity: 0.999,
            stagnation_window: 300,
            stagnation_eps: 1e-6,
            max_decays: 2,
            latent: LatentMode::default(),
            eval_budget: None,
        }
    }
}

impl E2eConfig {
    pub fn validate(&self, t_steps: usize) -> Result<()> {
        let bad = |field: &str, reason: String| {
            Err(QocError::Schema {
                field: format!("optimizer.e2e.{field}"),
                reason,
            })
        };
        if self.phases.is_empty() || self.phases.windows(2).any(|w| w[0] >= w[1]) {
            return bad("phases", "must be nonempty and strictly increasing".into());
        }
        if self.phases.len() != self.phase_episodes.len() {
            return bad("phase_episodes", "needs one budget per phase".into());
        }
        if let Some(last) = self.phases.last() {
            if !t_steps.is_multiple_of(*last) {
                return bad(
                    "phases",
                    format!("final phase {last} must divide t_steps = {t_steps}"),
                );
            }
        }
        if self.latent_dim == 0 || self.hidden.contains(&0) {
            return bad("hidden", "layer widths must be >= 1".into());
        }
        if !(self.lr >= 0.0) || !(self.grad_clip > 0.0) {
            return bad("lr", "lr must be >= 0 and grad_clip > 0".into());
        }
        if self.stagnation_window == 0 {
            return bad("stagnation_window", "must be >= 1".into());
        }
        Ok(())
    }
}

/// When a fresh latent vector is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// One draw for the whole run.
    Fixed,
    /// A fresh draw every episode of the first phase, then the best one is kept.
    #[default]
    FirstPhase,
    /// A fresh draw every episode.
    Always,
}

/// Network producing a `(2 n_channels, n_segments)` schedule from `latent_dim` inputs.
pub fn policy_network(
    cfg: &E2eConfig,
    n_channels: usize,
    n_segments: usize,
    seed: u64,
) -> Result<MlpParams> {
    let mut layers = Vec::new();
    let mut width = cfg.latent_dim;
    for h in &cfg.hidden {
        layers.push(LayerSpec::dense(width, *h, Activation::Tanh));
        width = *h;
    }
    layers.push(LayerSpec::dense(
        width,
        2 * n_channels * n_segments,
        Activation::Identity,
    ));
    mlp_init(layers, seed)
}

/// `V = 15 tanh(MLP(z))`, laid out as the schedule's flat storage.
pub fn policy_schedule(net: &MlpParams, z: &[f64], n_channels: usize) -> Result<ControlSchedule> {
    let out = mlp_forward(net, z)?.output;
    let n_segments = out.len() / (2 * n_channels);
    ControlSchedule::from_vec(
        n_channels,
        n_segments,
        out.iter().map(|o| V_MAX * o.tanh()).collect(),
    )
}

/// Widen the output layer from `s_prev` to `s_next` segments so the new
/// schedule is the piecewise-constant hold of the old one.
pub fn refine_resolution(
    net: &MlpParams,
    n_channels: usize,
    s_prev: usize,
    s_next: usize,
) -> Result<MlpParams> {
    let last = net.layers.len() - 1;
    let (inputs, outputs, activation) = match &net.layers[last] {
        LayerSpec::Dense {
            inputs,
            outputs,
            activation,
        } => (*inputs, *outputs, *activation),
        LayerSpec::Conv2d { .. } => {
            return Err(QocError::InvalidParameter(
                "policy output layer must be dense".into(),
            ))
        }
    };
    let rows = 2 * n_channels;
    if outputs != rows * s_prev {
        return Err(QocError::DimensionMismatch {
            what: "policy outputs",
            expected: rows * s_prev,
            found: outputs,
        });
    }
    let mut layers = net.layers.clone();
    layers[last] = LayerSpec::dense(inputs, rows * s_next, activation);
    let mut out = MlpParams::new(layers)?;
    let n_front: usize = net.layers[..last].iter().map(LayerSpec::n_params).sum();
    out.params[..n_front].copy_from_slice(&net.params[..n_front]);
    let old = net.layer_params(last);
    let (old_w, old_b) = old.split_at(inputs * outputs);
    let new = out.layer_params_mut(last);
    let (new_w, new_b) = new.split_at_mut(inputs * rows * s_next);
    for r in 0..rows {
        for seg in 0..s_next {
            let src = r * s_prev + hold_source(seg, s_prev, s_next);
            let dst = r * s_next + seg;
            new_w[dst * inputs..(dst + 1) * inputs]
                .copy_from_slice(&old_w[src * inputs..(src + 1) * inputs]);
            new_b[dst] = old_b[src];
        }
    }
    Ok(out)
}

fn sample_latent(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// One gradient step of `1 - F` through the simulator into the network.
/// Returns the cost of the schedule evaluated before the update.
fn train_step(
    net: &mut MlpParams,
    adam: &mut AdamState,
    sim: &Simulator,
    z: &[f64],
    lr: f64,
    clip: f64,
) -> Result<(f64, ControlSchedule)> {
    let n_ch = sim.n_channels();
    let tape = mlp_forward(net, z)?;
    let schedule = ControlSchedule::from_vec(
        n_ch,
        tape.output.len() / (2 * n_ch),
        tape.output.iter().map(|o| V_MAX * o.tanh()).collect(),
    )?;
    let (cost, grad_v) = value_and_grad(sim, &schedule)?;
    let grad_out: Vec<f64> = grad_v
        .as_slice()
        .iter()
        .zip(&tape.output)
        .map(|(g, o)| {
            let t = o.tanh();
            g * V_MAX * (1.0 - t * t)
        })
        .collect();
    let (grad_p, _) = mlp_backward(net, &tape, &grad_out)?;
    adam_step(&mut net.params, &grad_p, adam, lr, Some(clip))?;
    Ok((cost, schedule))
}

pub fn train_e2e(
    hw: &HardwareModel,
    sim: &Simulator,
    cfg: &E2eConfig,
    seed: u64,
) -> Result<OptimizerReport> {
    cfg.validate(sim.t_steps())?;
    let n_ch = sim.n_channels();
    let budget = Budget::new(cfg.eval_budget);
    let target = 1.0 - cfg.stop_fidelity;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0xE2E);
    let mut net = policy_network(cfg, n_ch, cfg.phases[0], seed)?;
    let mut z = sample_latent(&mut rng, cfg.latent_dim);

    let mut trace = Vec::new();
    let mut phases = Vec::new();
    let mut best_overall: Option<(f64, ControlSchedule)> = None;
    let mut best_trace_cost = f64::INFINITY;
    let mut episode: u64 = 0;
    let mut termination = Termination::MaxIterations;

    for (p, (&segs, &episodes)) in cfg.phases.iter().zip(&cfg.phase_episodes).enumerate() {
        if p > 0 {
            net = refine_resolution(&net, n_ch, cfg.phases[p - 1], segs)?;
        }
        let phase_sim = if segs == sim.t_steps() {
            sim.clone()
        } else {
            sim.regrid(hw, segs)?
        };
        let resample = match cfg.latent {
            LatentMode::Fixed => false,
            LatentMode::FirstPhase => p == 0,
            LatentMode::Always => true,
        };
        let mut adam = AdamState::new(net.n_params());
        let mut lr = cfg.lr;
        let mut phase_best = f64::INFINITY;
        let mut phase_best_z = z.clone();
        let mut phase_best_schedule = ControlSchedule::zeros(n_ch, segs);
        let mut reference = f64::INFINITY;
        let mut since_improvement = 0;
        let mut decays = 0;
        let phase_start = trace.len();
        let mut phase_term = Termination::MaxIterations;

        for _ in 0..episodes {
            if !budget.allows(GRADIENT_EVALUATIONS) {
                phase_term = Termination::BudgetExhausted;
                break;
            }
            if resample {
                z = sample_latent(&mut rng, cfg.latent_dim);
            }
            let (cost, schedule) =
                train_step(&mut net, &mut adam, &phase_sim, &z, lr, cfg.grad_clip)?;
            budget.charge(GRADIENT_EVALUATIONS);
            episode += 1;
            if cost < phase_best {
                phase_best = cost;
                phase_best_z.clone_from(&z);
                phase_best_schedule = schedule;
            }
            best_trace_cost = best_trace_cost.min(cost);
            trace.push(TracePoint {
                iteration: episode,
                best_cost: best_trace_cost,
                fidelity: 1.0 - cost,
                wall_ms: budget.elapsed_ms(),
            });
            if phase_best <= target {
                phase_term = Termination::TargetReached;
                break;
            }
            if !reference.is_finite() || reference - phase_best > cfg.stagnation_eps * reference {
                reference = phase_best;
                since_improvement = 0;
                decays = 0;
            } else {
                since_improvement += 1;
                if since_improvement >= cfg.stagnation_window {
                    if decays >= cfg.max_decays {
                        phase_term = Termination::Stagnation;
                        break;
                    }
                    lr *= 0.5;
                    decays += 1;
                    since_improvement = 0;
                    log::debug!("e2e phase {p}: lr decayed to {lr:.3e}");
                }
            }
        }
        if cfg.latent != LatentMode::Always {
            z = phase_best_z;
        }
        phases.push(PhaseSummary {
            name: format!("segments_{segs}"),
            trace_start: phase_start,
            trace_end: trace.len(),
            termination: phase_term,
            best_cost: phase_best,
        });
        log::info!("e2e phase {p} ({segs} segments): best cost {phase_best:.4e}, {phase_term:?}");
        if phase_best.is_finite() {
            let final_cost =
                sim.cost(&phase_best_schedule.resample(cfg.phases[cfg.phases.len() - 1]))?;
            budget.charge(1);
            if best_overall.as_ref().is_none_or(|(c, _)| final_cost < *c) {
                best_overall = Some((
                    final_cost,
                    phase_best_schedule.resample(*cfg.phases.last().unwrap()),
                ));
            }
        }
        termination = phase_term;
        if phase_term == Termination::BudgetExhausted {
            break;
        }
        if best_overall.as_ref().is_some_and(|(c, _)| *c <= target) {
            termination = Termination::TargetReached;
            break;
        }
    }
    let (_, best) =
        best_overall.ok_or_else(|| QocError::InvalidParameter("no episodes were run".into()))?;
    let final_fidelity = sim.fidelity(&best)?;
    Ok(OptimizerReport {
        method: "e2e".into(),
        seed,
        trace,
        phases,
        best_schedule: best,
        final_fidelity,
        final_error: 1.0 - final_fidelity,
        termination,
        evaluations: budget.used(),
        switch_generation: None,
        wall_ms: budget.elapsed_ms(),
        config_hash: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim::{PhysicalConstants, QuantumTask};

    #[test]
    fn zero_weights_give_zero_schedule() {
        let cfg = E2eConfig::default();
        let net = policy_network(&cfg, 3, 20, 0).unwrap();
        let zero = MlpParams::new(net.layers.clone()).unwrap();
        let s = policy_schedule(&zero, &[0.3; 16], 3).unwrap();
        assert!(s.as_slice().iter().all(|v| *v == 0.0));
        assert_eq!(s.n_segments(), 20);
    }

    #[test]
    fn outputs_within_bounds() {
        let cfg = E2eConfig::default();
        let mut net = policy_network(&cfg, 3, 20, 5).unwrap();
        net.params.iter_mut().for_each(|p| *p *= 50.0);
        let s = policy_schedule(&net, &[1.0; 16], 3).unwrap();
        assert!(s.within_bounds());
    }

    #[test]
    fn refine_is_a_hold() {
        let cfg = E2eConfig::default();
        let net = policy_network(&cfg, 3, 20, 1).unwrap();
        let z = vec![0.4; 16];
        let same = refine_resolution(&net, 3, 20, 20).unwrap();
        assert_eq!(same, net);
        let fine = refine_resolution(&net, 3, 20, 50).unwrap();
        let coarse_s = policy_schedule(&net, &z, 3).unwrap();
        let fine_s = policy_schedule(&fine, &z, 3).unwrap();
        assert_eq!(fine_s, coarse_s.resample(50));
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut hw = HardwareModel::default();
        hw.resolve(1).unwrap();
        let task = QuantumTask::new(&["X"]);
        let sim = Simulator::new(&hw, &task, &PhysicalConstants::default()).unwrap();
        let cfg = E2eConfig {
            lr: 0.0,
            phases: vec![100],
            phase_episodes: vec![20],
            latent: LatentMode::Fixed,
            ..E2eConfig::default()
        };
        let r = train_e2e(&hw, &sim, &cfg, 3).unwrap();
        let f0 = r.trace[0].fidelity;
        assert!(r.trace.iter().all(|p| p.fidelity == f0));
    }
}
