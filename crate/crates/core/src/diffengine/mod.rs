//! Reverse-mode gradients of the gate cost with respect to every voltage,
//! and a small neural-network core used by the learned optimizers.

mod nn;

pub use nn::{
    adam_step, mlp_backward, mlp_backward_batch, mlp_forward, mlp_forward_batch, mlp_init,
    Activation, AdamConfig, AdamState, BatchTape, Conv2dSpec, ForwardTape, LayerSpec, MlpParams,
};

use num_complex::Complex64;

use crate::error::{QocError, Result};
use crate::hwmodel::{drmzm_derivative, HardwareModel};
use crate::linalg::{embed, expm_pullback, pauli_x, pauli_y, CMat, HermitianEigen, Mat2};
use crate::qsim::{
    control_hamiltonian, gate_fidelity, Backend, DriveBlocks, PhysicalConstants, QuantumTask,
    Simulator,
};
use crate::schedule::ControlSchedule;

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug)]
pub struct GradientTape {
    pub backend: Backend,
    /// Couplings per constant-drive interval.
    pub blocks: DriveBlocks,
    pub fidelity: f64,
    steps: TapeSteps,
}

#[derive(Clone, Debug)]
enum TapeSteps {
    /// `[k][j]` single-atom step propagators.
    Factorized(Vec<Vec<Mat2>>),
    /// Full-register eigendecompositions and step propagators per step.
    Dense(Vec<HermitianEigen>, Vec<CMat>),
}

impl GradientTape {
    pub fn record(sim: &Simulator, schedule: &ControlSchedule) -> Result<Self> {
        let blocks = sim.drive_blocks(schedule)?;
        let dt = blocks.duration;
        let steps = match sim.backend {
            Backend::Factorized => TapeSteps::Factorized(
                blocks
                    .couplings
                    .iter()
                    .map(|g| g.iter().map(|gj| Mat2::qubit_propagator(*gj, dt)).collect())
                    .collect(),
            ),
            Backend::Dense => {
                let eigs: Vec<HermitianEigen> = blocks
                    .couplings
                    .iter()
                    .map(|g| HermitianEigen::new(&control_hamiltonian(g)))
                    .collect();
                let us = eigs.iter().map(|e| e.expm_neg_i(dt)).collect();
                TapeSteps::Dense(eigs, us)
            }
        };
        let mut tape = Self {
            backend: sim.backend,
            blocks,
            fidelity: 0.0,
            steps,
        };
        tape.fidelity = tape.replay_fidelity(sim);
        Ok(tape)
    }

    /// Fidelity recomputed from the cached step propagators alone.
    pub fn replay_fidelity(&self, sim: &Simulator) -> f64 {
        match &self.steps {
            TapeSteps::Factorized(steps) => {
                let us: Vec<Mat2> = (0..sim.n_atoms())
                    .map(|j| steps.iter().fold(Mat2::IDENTITY, |u, s| s[j].mul(&u)))
                    .collect();
                sim.atom_fidelities(&us)
                    .iter()
                    .product::<f64>()
                    .clamp(0.0, 1.0)
            }
            TapeSteps::Dense(_, steps) => {
                let dim = sim.target.rows();
                let u = steps.iter().fold(CMat::identity(dim), |u, s| s.matmul(&u));
                gate_fidelity(&u, &sim.target)
            }
        }
    }

    /// `dC/dg` per block: `out[b][j] = dC/dRe g + i dC/dIm g`.
    pub fn coupling_gradient(&self, sim: &Simulator) -> Vec<Vec<Complex64>> {
        match &self.steps {
            TapeSteps::Factorized(steps) => self.factorized_gradient(sim, steps),
            TapeSteps::Dense(eigs, steps) => self.dense_gradient(sim, eigs, steps),
        }
    }

    fn factorized_gradient(&self, sim: &Simulator, steps: &[Vec<Mat2>]) -> Vec<Vec<Complex64>> {
        let n_steps = steps.len();
        let n_atoms = sim.n_atoms();
        let sx = Mat2::from_cmat(&pauli_x());
        let sy = Mat2::from_cmat(&pauli_y());
        let mut out = vec![vec![Complex64::new(0.0, 0.0); n_atoms]; n_steps];
        let mut taus = Vec::with_capacity(n_atoms);
        let mut pullbacks: Vec<Vec<Mat2>> = Vec::with_capacity(n_atoms);
        let mut suffix = vec![Mat2::IDENTITY; n_steps];
        for j in 0..n_atoms {
            // suffix[k] = R^dagger U_{K-1} ... U_{k+1}
            let mut acc = Mat2::from_cmat(&sim.target_factors[j]).adjoint();
            for k in (0..n_steps).rev() {
                suffix[k] = acc;
                acc = acc.mul(&steps[k][j]);
            }
            taus.push(acc.trace());
            let mut prefix = Mat2::IDENTITY;
            let gs = (0..n_steps)
                .map(|k| {
                    let x = prefix.mul(&suffix[k]);
                    prefix = steps[k][j].mul(&prefix);
                    Mat2::qubit_pullback(self.blocks.couplings[k][j], self.blocks.duration, &x)
                })
                .collect();
            pullbacks.push(gs);
        }
        let fids: Vec<f64> = taus.iter().map(|t| t.norm_sqr() / 4.0).collect();
        for j in 0..n_atoms {
            let others: f64 = fids
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != j)
                .map(|(_, f)| f)
                .product();
            let tau_c = taus[j].conj();
            for (k, g) in pullbacks[j].iter().enumerate() {
                let dx = (tau_c * g.trace_of_product(&sx)).re / 2.0;
                let dy = (tau_c * g.trace_of_product(&sy)).re / 2.0;
                out[k][j] = Complex64::new(-others * dx, -others * dy);
            }
        }
        out
    }

    fn dense_gradient(
        &self,
        sim: &Simulator,
        eigs: &[HermitianEigen],
        steps: &[CMat],
    ) -> Vec<Vec<Complex64>> {
        let n_steps = steps.len();
        let n_atoms = sim.n_atoms();
        let dim = sim.target.rows();
        let mut suffix = vec![CMat::identity(dim); n_steps];
        let mut acc = sim.target.adjoint();
        for k in (0..n_steps).rev() {
            suffix[k] = acc.clone();
            acc = acc.matmul(&steps[k]);
        }
        let tau_c = acc.trace().conj();
        let d2 = (dim * dim) as f64;
        let ops: Vec<(CMat, CMat)> = (0..n_atoms)
            .map(|j| (embed(&pauli_x(), j, n_atoms), embed(&pauli_y(), j, n_atoms)))
            .collect();
        let mut prefix = CMat::identity(dim);
        let mut out = Vec::with_capacity(n_steps);
        for k in 0..n_steps {
            let g = expm_pullback(&eigs[k], self.blocks.duration, &prefix.matmul(&suffix[k]));
            prefix = steps[k].matmul(&prefix);
            out.push(
                ops.iter()
                    .map(|(ox, oy)| {
                        let dx = 2.0 * (tau_c * g.trace_of_product(ox)).re / d2;
                        let dy = 2.0 * (tau_c * g.trace_of_product(oy)).re / d2;
                        Complex64::new(-dx, -dy)
                    })
                    .collect(),
            );
        }
        out
    }

    /// `dC/dV` with the same layout as the schedule.
    pub fn backward(&self, sim: &Simulator, schedule: &ControlSchedule) -> ControlSchedule {
        let g_coupling = self.coupling_gradient(sim);
        let n_ch = sim.n_channels();
        let n_seg = schedule.n_segments();
        let kappa = sim.coupling_per_field;
        let chain = &sim.chain;
        let mut grad = ControlSchedule::zeros(n_ch, n_seg);
        let mut g_transfer = vec![vec![Complex64::new(0.0, 0.0); n_ch]; n_seg];
        for (b, gk) in g_coupling.iter().enumerate() {
            let p = chain.projection_at(self.blocks.first_step[b]);
            let seg = self.blocks.segment[b];
            for c in 0..n_ch {
                // E_j = sum_c P_jc T_c a_c + const, so conj(dE_j/dT_c) pulls back.
                let alpha_col = |j: usize| (p[(j, c)] * chain.a_in[c]).conj();
                let s: Complex64 = gk
                    .iter()
                    .enumerate()
                    .map(|(j, ge)| alpha_col(j) * ge * kappa)
                    .sum();
                g_transfer[seg][c] += s;
            }
        }
        for (seg, gt) in g_transfer.iter().enumerate() {
            for (c, g) in gt.iter().enumerate() {
                let (d0, d1) = drmzm_derivative(
                    schedule.get(c, 0, seg),
                    schedule.get(c, 1, seg),
                    &chain.drmzm,
                );
                grad.set(c, 0, seg, (g.conj() * d0).re);
                grad.set(c, 1, seg, (g.conj() * d1).re);
            }
        }
        grad
    }
}

/// `(C_f, dC_f/dV)` from one forward and one backward sweep.
pub fn value_and_grad(
    sim: &Simulator,
    schedule: &ControlSchedule,
) -> Result<(f64, ControlSchedule)> {
    let tape = GradientTape::record(sim, schedule)?;
    Ok((1.0 - tape.fidelity, tape.backward(sim, schedule)))
}

pub fn grad_cost(
    schedule: &ControlSchedule,
    hw: &HardwareModel,
    task: &QuantumTask,
    pc: &PhysicalConstants,
) -> Result<ControlSchedule> {
    let sim = Simulator::new(hw, task, pc)?;
    Ok(value_and_grad(&sim, schedule)?.1)
}

/// Central differences of the cost. Coordinates within `h` of a voltage
/// bound fall back to a one-sided difference.
pub fn finite_diff_grad(
    sim: &Simulator,
    schedule: &ControlSchedule,
    h: f64,
) -> Result<ControlSchedule> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(QocError::InvalidParameter(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    sim.cost(schedule)?;
    let mut grad = ControlSchedule::zeros(schedule.n_channels(), schedule.n_segments());
    let mut probe = schedule.clone();
    for i in 0..schedule.len() {
        let x = schedule.as_slice()[i];
        let hi = (x + h).min(crate::hwmodel::V_MAX);
        let lo = (x - h).max(crate::hwmodel::V_MIN);
        probe.as_mut_slice()[i] = hi;
        let c_hi = sim.cost(&probe)?;
        probe.as_mut_slice()[i] = lo;
        let c_lo = sim.cost(&probe)?;
        probe.as_mut_slice()[i] = x;
        grad.as_mut_slice()[i] = (c_hi - c_lo) / (hi - lo);
    }
    Ok(grad)
}

/// Central differences of an arbitrary scalar function.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(QocError::InvalidParameter(format!(
            "finite-difference step must be > 0, got {h}"
        )));
    }
    let mut probe = x.to_vec();
    Ok((0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let a = f(&probe);
            probe[i] = x[i] - h;
            let b = f(&probe);
            probe[i] = x[i];
            (a - b) / (2.0 * h)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hwmodel::voltages_for_real_transfer;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-12);
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / y.abs().max(1e-3 * scale))
            .fold(0.0, f64::max)
    }

    fn sim(gates: &[&str], t_steps: usize, dynamic: bool) -> (HardwareModel, Simulator) {
        let mut hw = HardwareModel::default();
        hw.imperfections.dynamic = dynamic;
        hw.imperfections.weak_scatter_eps = 0.02;
        hw.resolve(gates.len()).unwrap();
        let task = QuantumTask {
            t_steps,
            ..QuantumTask::new(gates)
        };
        let s = Simulator::new(&hw, &task, &PhysicalConstants::default()).unwrap();
        (hw, s)
    }

    #[test]
    fn tape_replays_forward() {
        let (_, s) = sim(&["H", "T", "XS"], 20, true);
        let sched = ControlSchedule::random(3, 10, &mut ChaCha8Rng::seed_from_u64(4));
        let tape = GradientTape::record(&s, &sched).unwrap();
        assert!((tape.fidelity - s.fidelity(&sched).unwrap()).abs() <= 1e-14);
        let dense = s.clone().with_backend(Backend::Dense);
        let tape_d = GradientTape::record(&dense, &sched).unwrap();
        assert!((tape_d.fidelity - dense.fidelity(&sched).unwrap()).abs() <= 1e-14);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (_, s) = sim(&["X", "HS", "I"], 20, true);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..3 {
            let sched = ControlSchedule::random(3, 5, &mut rng);
            let (_, g) = value_and_grad(&s, &sched).unwrap();
            let fd = finite_diff_grad(&s, &sched, 1e-4).unwrap();
            let err = max_rel_err(g.as_slice(), fd.as_slice());
            assert!(err < 1e-5, "rel err {err}");
        }
    }

    #[test]
    fn backends_give_same_gradient() {
        let (_, s) = sim(&["Y", "T", "H"], 10, false);
        let dense = s.clone().with_backend(Backend::Dense);
        let sched = ControlSchedule::random(3, 5, &mut ChaCha8Rng::seed_from_u64(2));
        let (ca, ga) = value_and_grad(&s, &sched).unwrap();
        let (cb, gb) = value_and_grad(&dense, &sched).unwrap();
        assert!((ca - cb).abs() < 1e-12);
        for (a, b) in ga.as_slice().iter().zip(gb.as_slice()) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn stationary_at_perfect_rabi_pulse() {
        let mut hw = HardwareModel::default();
        hw.resolve(1).unwrap();
        let task = QuantumTask::new(&["X"]);
        let s = Simulator::new(&hw, &task, &PhysicalConstants::default()).unwrap();
        let pair = voltages_for_real_transfer(0.5, &hw.drmzm);
        let sched = ControlSchedule::from_channel_pairs(&[pair], 10);
        let (c, g) = value_and_grad(&s, &sched).unwrap();
        assert!(c < 1e-14);
        let norm = g.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 1e-8, "{norm}");
    }

    #[test]
    fn zero_step_rejected() {
        let (_, s) = sim(&["X"], 10, false);
        let sched = ControlSchedule::zeros(1, 10);
        assert!(finite_diff_grad(&s, &sched, 0.0).is_err());
        assert!(finite_diff(|x| x[0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn finite_diff_on_quadratic() {
        let g = finite_diff(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-3).unwrap();
        assert!((g[0] - 4.0).abs() < 1e-9 && (g[1] - 3.0).abs() < 1e-9);
    }
}
