//! Invariant suite behind the `check` and `gradcheck` subcommands.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::random_gate_set;
use crate::diffengine::{finite_diff_grad, value_and_grad};
use crate::error::Result;
use crate::hwmodel::{forward_chain, voltages_for_real_transfer, HardwareModel};
use crate::qsim::{gate_fidelity, Backend, PhysicalConstants, QuantumTask, Simulator};
use crate::schedule::ControlSchedule;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl CheckOutcome {
    fn new(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {}: {:.3e} (tolerance {:.0e})",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.value,
            self.tolerance
        )
    }
}

fn resolved_hw(n_atoms: usize, dynamic: bool) -> Result<HardwareModel> {
    let mut hw = HardwareModel::default();
    hw.imperfections.dynamic = dynamic;
    hw.resolve(n_atoms)?;
    Ok(hw)
}

fn random_task(rng: &mut ChaCha8Rng, n_atoms: usize, t_steps: usize) -> Result<QuantumTask> {
    let gates = random_gate_set(n_atoms, n_atoms, rng.random())?;
    Ok(QuantumTask {
        gate_strings: gates,
        gate_time_us: 0.1,
        t_steps,
    })
}

/// Unitarity, global-phase invariance, chain linearity and the Rabi oracle.
pub fn invariant_suite(seed: u64, n_random: usize) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pc = PhysicalConstants::default();
    let mut out = Vec::new();

    let mut unitarity = 0.0f64;
    let mut phase = 0.0f64;
    for i in 0..n_random {
        let hw = resolved_hw(3, i % 2 == 1)?;
        let task = random_task(&mut rng, 3, 20)?;
        let sim = Simulator::new(&hw, &task, &pc)?.with_backend(Backend::Dense);
        let s = ControlSchedule::random(3, 10, &mut rng);
        let u = sim.propagate(&s)?.u_final;
        unitarity = unitarity.max(u.unitarity_defect());
        let f = gate_fidelity(&u, &sim.target);
        let rotated = u.scale(Complex64::from_polar(1.0, rng.random_range(0.0..2.0 * PI)));
        phase = phase.max((gate_fidelity(&rotated, &sim.target) - f).abs());
    }
    out.push(CheckOutcome::new("propagator unitarity", unitarity, 1e-10));
    out.push(CheckOutcome::new("global phase invariance", phase, 1e-12));

    let hw = resolved_hw(3, true)?;
    let s = ControlSchedule::random(3, 5, &mut rng);
    let mut draw = || -> Vec<Complex64> {
        (0..3)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect()
    };
    let (a, b) = (draw(), draw());
    let (alpha, beta) = (Complex64::new(0.3, -1.2), Complex64::new(-0.7, 0.4));
    let mix: Vec<Complex64> = a
        .iter()
        .zip(&b)
        .map(|(x, y)| alpha * x + beta * y)
        .collect();
    let (ea, eb, em) = (
        forward_chain(&s, &hw, &a, 10)?,
        forward_chain(&s, &hw, &b, 10)?,
        forward_chain(&s, &hw, &mix, 10)?,
    );
    let mut lin = 0.0f64;
    for k in 0..10 {
        for j in 0..3 {
            lin = lin.max((em[k][j] - (alpha * ea[k][j] + beta * eb[k][j])).norm());
        }
    }
    out.push(CheckOutcome::new("forward chain linearity", lin, 1e-12));

    // Constant drive on one atom: F = sin^2(|g| T) cos^2(arg g) for an X target.
    let hw = resolved_hw(1, false)?;
    let task = QuantumTask::new(&["X"]);
    let sim = Simulator::new(&hw, &task, &pc)?;
    let mut rabi = 0.0f64;
    for i in 0..50 {
        let amp = i as f64 / 49.0;
        let (v0, v1) = voltages_for_real_transfer(amp, &hw.drmzm);
        let s = ControlSchedule::from_channel_pairs(&[(v0, v1)], 1);
        let g = sim.couplings(&s)?[0][0];
        let closed = ((g.norm() * task.gate_time_s()).sin() * g.arg().cos()).powi(2);
        rabi = rabi.max((sim.fidelity(&s)? - closed).abs());
    }
    out.push(CheckOutcome::new("Rabi closed form", rabi, 1e-9));
    Ok(out)
}

/// Largest `|analytic - central FD|_inf / |central FD|_inf` over random
/// crosstalk-on points.
pub fn gradient_check(seed: u64, points: usize, h: f64) -> Result<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hw = resolved_hw(3, false)?;
    let pc = PhysicalConstants::default();
    let mut worst = 0.0f64;
    for _ in 0..points {
        let task = random_task(&mut rng, 3, 100)?;
        let sim = Simulator::new(&hw, &task, &pc)?;
        let s = ControlSchedule::random(3, 10, &mut rng);
        let (_, g) = value_and_grad(&sim, &s)?;
        let fd = finite_diff_grad(&sim, &s, h)?;
        let scale = fd
            .as_slice()
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(1e-12);
        let diff = g
            .as_slice()
            .iter()
            .zip(fd.as_slice())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        worst = worst.max(diff / scale);
    }
    Ok(CheckOutcome::new(
        "gradient vs central differences",
        worst,
        1e-5,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for c in invariant_suite(3, 6).unwrap() {
            assert!(c.pass, "{c}");
        }
        let g = gradient_check(1, 2, 1e-5).unwrap();
        assert!(g.pass, "{g}");
    }
}
