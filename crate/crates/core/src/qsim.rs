//! Qubit register driven by the atom-site fields: Raman coupling strengths,
//! control Hamiltonian, time-stepped propagation and gate fidelity.
//!
//! Dynamics are evaluated in the rotating frame with a semiclassical drive,
//! so the only Hamiltonian is `H(t) = sum_j g_j sigma_+^(j) + g_j^* sigma_-^(j)`.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{QocError, Result};
use crate::hwmodel::{drmzm_transfer_unchecked, ChainModel, HardwareModel};
use crate::linalg::{embed, sigma_minus, sigma_plus, CMat, HermitianEigen, Mat2, I, ONE, ZERO};
use crate::schedule::ControlSchedule;

pub const HBAR: f64 = 1.054_571_817e-34;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
pub const EPSILON_0: f64 = 8.854_187_812_8e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhysicalConstants {
    /// Dipole moment of the first Raman leg (C m).
    #[serde(default = "defaults::dipole")]
    pub mu1e: f64,
    /// Dipole moment of the second Raman leg (C m).
    #[serde(default = "defaults::dipole")]
    pub mu2e: f64,
    /// Raman detuning (rad/s).
    #[serde(default = "defaults::detuning")]
    pub detuning: f64,
    /// Laser intensity (mW/cm^2).
    #[serde(default = "defaults::intensity")]
    pub intensity: f64,
    /// Hyperfine splitting (GHz). Not used by the rotating-frame dynamics.
    #[serde(default = "defaults::hyperfine")]
    pub hyperfine: f64,
    /// Atomic transition frequency (rad/s). Not used by the rotating-frame dynamics.
    #[serde(default = "defaults::omega0")]
    pub omega0: f64,
    /// Field frequency (rad/s). Not used by the rotating-frame dynamics.
    #[serde(default = "defaults::omega_r")]
    pub omega_r: f64,
    /// Dimensionless amplitude calibration; `None` selects the value giving
    /// `|g| T_g = pi` for a unit normalized field.
    #[serde(default)]
    pub drive_scale: Option<f64>,
}

mod defaults {
    use std::f64::consts::PI;
    pub fn dipole() -> f64 {
        2.54e-29
    }
    pub fn detuning() -> f64 {
        2.0 * PI * 1e9
    }
    pub fn intensity() -> f64 {
        20.0
    }
    pub fn hyperfine() -> f64 {
        6.835
    }
    pub fn omega0() -> f64 {
        2.0 * PI * 6.835e9
    }
    pub fn omega_r() -> f64 {
        2.0 * PI * super::SPEED_OF_LIGHT / 780e-9
    }
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self {
            mu1e: defaults::dipole(),
            mu2e: defaults::dipole(),
            detuning: defaults::detuning(),
            intensity: defaults::intensity(),
            hyperfine: defaults::hyperfine(),
            omega0: defaults::omega0(),
            omega_r: defaults::omega_r(),
            drive_scale: None,
        }
    }
}

impl PhysicalConstants {
    /// Real field amplitude (V/m) of a plane wave of the configured intensity.
    pub fn global_field(&self) -> f64 {
        let watts_per_m2 = self.intensity * 10.0;
        (2.0 * watts_per_m2 / (SPEED_OF_LIGHT * EPSILON_0)).sqrt()
    }

    /// `mu1 mu2 E_glob / (2 hbar^2 Delta)` per unit normalized local field (rad/s).
    pub fn bare_coupling(&self) -> f64 {
        self.mu1e * self.mu2e * self.global_field() / (2.0 * HBAR * HBAR * self.detuning)
    }

    /// Drive scale making a unit normalized field rotate by `|g| T_g = pi`.
    pub fn calibrated_drive_scale(&self, gate_time_s: f64) -> f64 {
        PI / (self.bare_coupling() * gate_time_s)
    }

    pub fn resolve(&mut self, gate_time_s: f64) -> Result<()> {
        if self.detuning == 0.0 || !self.detuning.is_finite() {
            return Err(QocError::Schema {
                field: "quantum.constants.detuning".into(),
                reason: "must be nonzero".into(),
            });
        }
        if self.drive_scale.is_none() {
            let s = self.calibrated_drive_scale(gate_time_s);
            log::debug!("calibrated drive_scale = {s:.6e} (|g| T_g = pi at unit field)");
            self.drive_scale = Some(s);
        }
        match self.drive_scale {
            Some(s) if s > 0.0 && s.is_finite() => Ok(()),
            _ => Err(QocError::Schema {
                field: "quantum.constants.drive_scale".into(),
                reason: "must be > 0".into(),
            }),
        }
    }

    /// Coupling `g` (rad/s) per unit normalized field, including the calibration.
    pub fn coupling_per_field(&self) -> f64 {
        self.drive_scale.unwrap_or(1.0) * self.bare_coupling()
    }
}

/// Target gate and time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantumTask {
    /// One gate string per atom over `{I, X, Y, Z, H, S, T}`.
    pub gate_strings: Vec<String>,
    /// Gate time (µs).
    #[serde(default = "task_defaults::gate_time_us")]
    pub gate_time_us: f64,
    #[serde(default = "task_defaults::t_steps")]
    pub t_steps: usize,
}

pub(crate) mod task_defaults {
    pub fn gate_time_us() -> f64 {
        0.1
    }
    pub fn t_steps() -> usize {
        100
    }
}

impl QuantumTask {
    pub fn new(gates: &[&str]) -> Self {
        Self {
            gate_strings: gates.iter().map(|s| s.to_string()).collect(),
            gate_time_us: task_defaults::gate_time_us(),
            t_steps: task_defaults::t_steps(),
        }
    }

    pub fn n_atoms(&self) -> usize {
        self.gate_strings.len()
    }

    pub fn gate_time_s(&self) -> f64 {
        self.gate_time_us * 1e-6
    }

    pub fn validate(&self) -> Result<()> {
        if self.gate_strings.is_empty() {
            return Err(QocError::Schema {
                field: "quantum.task.gates".into(),
                reason: "needs at least one atom".into(),
            });
        }
        for s in &self.gate_strings {
            parse_gate_string(s)?;
        }
        if self.t_steps == 0 {
            return Err(QocError::Schema {
                field: "quantum.task.t_steps".into(),
                reason: "must be >= 1".into(),
            });
        }
        if !(self.gate_time_us > 0.0) {
            return Err(QocError::Schema {
                field: "quantum.task.gate_time_us".into(),
                reason: "must be > 0".into(),
            });
        }
        Ok(())
    }
}

pub fn single_gate(c: char) -> Result<CMat> {
    let s = FRAC_1_SQRT_2;
    let h = Complex64::new(s, 0.0);
    Ok(match c {
        'I' => CMat::identity(2),
        'X' => CMat::from_rows(&[&[ZERO, ONE], &[ONE, ZERO]]),
        'Y' => CMat::from_rows(&[&[ZERO, -I], &[I, ZERO]]),
        'Z' => CMat::from_rows(&[&[ONE, ZERO], &[ZERO, -ONE]]),
        'H' => CMat::from_rows(&[&[h, h], &[h, -h]]),
        'S' => CMat::from_rows(&[&[ONE, ZERO], &[ZERO, I]]),
        'T' => CMat::from_rows(&[&[ONE, ZERO], &[ZERO, Complex64::from_polar(1.0, PI / 4.0)]]),
        other => return Err(QocError::UnknownGate(other)),
    })
}

/// `"HS"` means the matrix product `H * S` (S acts first).
pub fn parse_gate_string(s: &str) -> Result<CMat> {
    if s.is_empty() {
        return Err(QocError::EmptyGate);
    }
    s.chars()
        .try_fold(CMat::identity(2), |acc, c| Ok(acc.matmul(&single_gate(c)?)))
}

/// `R_1 (x) R_2 (x) ...` with atom 1 as the most significant factor.
pub fn build_target(task: &QuantumTask) -> Result<CMat> {
    task.gate_strings
        .iter()
        .try_fold(CMat::identity(1), |acc, s| {
            Ok(acc.kron(&parse_gate_string(s)?))
        })
}

pub fn coupling_strengths(fields: &[Complex64], pc: &PhysicalConstants) -> Vec<Complex64> {
    let k = pc.coupling_per_field();
    fields.iter().map(|e| e * k).collect()
}

/// Single-qubit block `[[0, g*], [g, 0]]`.
pub fn qubit_drive(g: Complex64) -> CMat {
    CMat::from_rows(&[&[ZERO, g.conj()], &[g, ZERO]])
}

pub fn control_hamiltonian(g: &[Complex64]) -> CMat {
    let n = g.len();
    let (sp, sm) = (sigma_plus(), sigma_minus());
    let mut h = CMat::zeros(1 << n, 1 << n);
    for (j, gj) in g.iter().enumerate() {
        let local = sp.scale(*gj).add(&sm.scale(gj.conj()));
        h = h.add(&embed(&local, j, n));
    }
    h
}

/// `|Tr(U_target^dagger U)|^2 / d^2`.
pub fn gate_fidelity(u: &CMat, target: &CMat) -> f64 {
    let d = u.rows() as f64;
    let tau = target.adjoint().trace_of_product(u);
    (tau.norm_sqr() / (d * d)).clamp(0.0, 1.0)
}

/// How each step exponential is diagonalized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Per-atom closed-form eigendecompositions. The drive is a sum of
    /// commuting single-site terms, so this is exact.
    #[default]
    Factorized,
    /// General Hermitian eigendecomposition of the full `2^N` Hamiltonian.
    Dense,
}

#[derive(Clone, Debug)]
pub struct SimResult {
    pub u_final: CMat,
    pub fidelity: f64,
    /// `fields[k][j]`: normalized field at atom `j` during step `k`.
    pub fields: Vec<Vec<Complex64>>,
    /// `couplings[k][j]` (rad/s).
    pub couplings: Vec<Vec<Complex64>>,
    /// Full control Hamiltonian per step (rad/s). Empty for the factorized backend.
    pub hamiltonians: Vec<CMat>,
}

/// Drive couplings (rad/s) over consecutive intervals of equal `duration` (s).
#[derive(Clone, Debug)]
pub struct DriveBlocks {
    /// `couplings[b][j]`.
    pub couplings: Vec<Vec<Complex64>>,
    pub duration: f64,
    /// First time step covered by each block.
    pub first_step: Vec<usize>,
    pub segment: Vec<usize>,
}

/// Everything that does not depend on the schedule, prepared once per
/// (hardware, task, constants, grid).
#[derive(Clone, Debug)]
pub struct Simulator {
    pub chain: ChainModel,
    pub task: QuantumTask,
    pub constants: PhysicalConstants,
    pub target_factors: Vec<CMat>,
    pub target: CMat,
    /// rad/s per unit normalized field.
    pub coupling_per_field: f64,
    /// Step length (s).
    pub dt: f64,
    pub backend: Backend,
}

impl Simulator {
    pub fn new(hw: &HardwareModel, task: &QuantumTask, pc: &PhysicalConstants) -> Result<Self> {
        task.validate()?;
        let mut pc = pc.clone();
        pc.resolve(task.gate_time_s())?;
        let chain = ChainModel::new(hw, task.n_atoms(), task.t_steps)?;
        let target_factors = task
            .gate_strings
            .iter()
            .map(|s| parse_gate_string(s))
            .collect::<Result<Vec<_>>>()?;
        let target = build_target(task)?;
        Ok(Self {
            chain,
            coupling_per_field: pc.coupling_per_field(),
            dt: task.gate_time_s() / task.t_steps as f64,
            task: task.clone(),
            constants: pc,
            target_factors,
            target,
            backend: Backend::default(),
        })
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    pub fn n_atoms(&self) -> usize {
        self.task.n_atoms()
    }

    pub fn n_channels(&self) -> usize {
        self.chain.n_channels
    }

    pub fn t_steps(&self) -> usize {
        self.task.t_steps
    }

    pub fn steps_per_segment(&self, schedule: &ControlSchedule) -> usize {
        self.t_steps() / schedule.n_segments()
    }

    /// Modulator transfer per channel for each segment.
    pub fn transfers(&self, schedule: &ControlSchedule) -> Vec<Vec<Complex64>> {
        (0..schedule.n_segments())
            .map(|seg| {
                (0..self.n_channels())
                    .map(|ch| {
                        drmzm_transfer_unchecked(
                            schedule.get(ch, 0, seg),
                            schedule.get(ch, 1, seg),
                            &self.chain.drmzm,
                        )
                    })
                    .collect()
            })
            .collect()
    }

    /// `E[k][j]` for every step.
    pub fn fields(&self, schedule: &ControlSchedule) -> Result<Vec<Vec<Complex64>>> {
        schedule.validate(self.n_channels(), self.t_steps())?;
        let per_seg = self.steps_per_segment(schedule);
        let transfers = self.transfers(schedule);
        Ok((0..self.t_steps())
            .map(|k| self.chain.fields_from_transfers(k, &transfers[k / per_seg]))
            .collect())
    }

    pub fn couplings(&self, schedule: &ControlSchedule) -> Result<Vec<Vec<Complex64>>> {
        Ok(self
            .fields(schedule)?
            .iter()
            .map(|e| e.iter().map(|x| x * self.coupling_per_field).collect())
            .collect())
    }

    /// Couplings over intervals of constant drive. With static hardware and
    /// the factorized backend a whole segment is one interval (the step
    /// exponentials within it commute), otherwise every step is its own.
    pub fn drive_blocks(&self, schedule: &ControlSchedule) -> Result<DriveBlocks> {
        schedule.validate(self.n_channels(), self.t_steps())?;
        let per_seg = self.steps_per_segment(schedule);
        let transfers = self.transfers(schedule);
        let merge = self.backend == Backend::Factorized && self.chain.is_static();
        let (n_blocks, stride) = if merge {
            (schedule.n_segments(), per_seg)
        } else {
            (self.t_steps(), 1)
        };
        let mut blocks = DriveBlocks {
            couplings: Vec::with_capacity(n_blocks),
            duration: self.dt * stride as f64,
            first_step: Vec::with_capacity(n_blocks),
            segment: Vec::with_capacity(n_blocks),
        };
        for b in 0..n_blocks {
            let step = b * stride;
            let seg = step / per_seg;
            let mut e = self.chain.fields_from_transfers(step, &transfers[seg]);
            for x in &mut e {
                *x *= self.coupling_per_field;
            }
            blocks.couplings.push(e);
            blocks.first_step.push(step);
            blocks.segment.push(seg);
        }
        Ok(blocks)
    }

    /// Per-atom propagators `U_j = prod_b exp(-i h_j(b) tau)`.
    pub fn atom_propagators(&self, blocks: &DriveBlocks) -> Vec<Mat2> {
        (0..self.n_atoms())
            .map(|j| {
                blocks.couplings.iter().fold(Mat2::IDENTITY, |u, gk| {
                    Mat2::qubit_propagator(gk[j], blocks.duration).mul(&u)
                })
            })
            .collect()
    }

    /// Per-atom fidelities `|Tr(R_j^dagger U_j)|^2 / 4`.
    pub fn atom_fidelities(&self, atom_u: &[Mat2]) -> Vec<f64> {
        atom_u
            .iter()
            .zip(&self.target_factors)
            .map(|(u, r)| {
                (Mat2::from_cmat(r).adjoint().trace_of_product(u).norm_sqr() / 4.0).clamp(0.0, 1.0)
            })
            .collect()
    }

    pub fn propagate(&self, schedule: &ControlSchedule) -> Result<SimResult> {
        let fields = self.fields(schedule)?;
        let couplings: Vec<Vec<Complex64>> = fields
            .iter()
            .map(|e| e.iter().map(|x| x * self.coupling_per_field).collect())
            .collect();
        match self.backend {
            Backend::Factorized => {
                let atom_u = self.atom_propagators(&self.drive_blocks(schedule)?);
                let u_final = atom_u
                    .iter()
                    .fold(CMat::identity(1), |acc, u| acc.kron(&u.to_cmat()));
                let fidelity = gate_fidelity(&u_final, &self.target);
                Ok(SimResult {
                    u_final,
                    fidelity,
                    fields,
                    couplings,
                    hamiltonians: Vec::new(),
                })
            }
            Backend::Dense => {
                let dim = 1 << self.n_atoms();
                let hamiltonians: Vec<CMat> =
                    couplings.iter().map(|g| control_hamiltonian(g)).collect();
                let u_final = hamiltonians.iter().fold(CMat::identity(dim), |u, h| {
                    HermitianEigen::new(h).expm_neg_i(self.dt).matmul(&u)
                });
                let fidelity = gate_fidelity(&u_final, &self.target);
                Ok(SimResult {
                    u_final,
                    fidelity,
                    fields,
                    couplings,
                    hamiltonians,
                })
            }
        }
    }

    pub fn fidelity(&self, schedule: &ControlSchedule) -> Result<f64> {
        match self.backend {
            Backend::Factorized => {
                let atom_u = self.atom_propagators(&self.drive_blocks(schedule)?);
                Ok(self
                    .atom_fidelities(&atom_u)
                    .iter()
                    .product::<f64>()
                    .clamp(0.0, 1.0))
            }
            Backend::Dense => Ok(self.propagate(schedule)?.fidelity),
        }
    }

    /// `C_f = 1 - F`.
    pub fn cost(&self, schedule: &ControlSchedule) -> Result<f64> {
        Ok(1.0 - self.fidelity(schedule)?)
    }

    /// Same simulator on a different time grid (dynamic draws are resampled for that grid).
    pub fn regrid(&self, hw: &HardwareModel, t_steps: usize) -> Result<Simulator> {
        let mut task = self.task.clone();
        task.t_steps = t_steps;
        Ok(Simulator::new(hw, &task, &self.constants)?.with_backend(self.backend))
    }
}

pub fn propagate(
    schedule: &ControlSchedule,
    hw: &HardwareModel,
    task: &QuantumTask,
    pc: &PhysicalConstants,
) -> Result<SimResult> {
    Simulator::new(hw, task, pc)?.propagate(schedule)
}

pub fn cost(
    schedule: &ControlSchedule,
    hw: &HardwareModel,
    task: &QuantumTask,
    pc: &PhysicalConstants,
) -> Result<f64> {
    Simulator::new(hw, task, pc)?.cost(schedule)
}

/// Propagate an explicit per-step coupling sequence (rad/s) without the hardware chain.
pub fn propagate_couplings(couplings: &[Vec<Complex64>], dt: f64) -> CMat {
    let n = couplings.first().map_or(0, |g| g.len());
    couplings.iter().fold(CMat::identity(1 << n), |u, g| {
        HermitianEigen::new(&control_hamiltonian(g))
            .expm_neg_i(dt)
            .matmul(&u)
    })
}
