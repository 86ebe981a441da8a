//! Photonic control chain: programmable PIC with crosstalk, weak scattering,
//! static SLM and Gaussian addressing beams.
//!
//! Lengths are in µm and coupling coefficients in rad/µm, so `kappa * L` is
//! dimensionless. Field amplitudes are normalized: a unit input through an
//! isolated, fully transmitting channel produces a unit field at its own atom.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{QocError, Result};
use crate::linalg::CMat;
use crate::schedule::ControlSchedule;

/// Hardware voltage limits (V).
pub const V_MIN: f64 = -15.0;
pub const V_MAX: f64 = 15.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicGeometry {
    /// Number of PIC channels; `None` means one per atom.
    #[serde(default)]
    pub n_channels: Option<usize>,
    /// Nominal channel pitch (µm).
    #[serde(default = "defaults::d0")]
    pub d0: f64,
    /// Nominal nearest-neighbour coupling length (µm).
    #[serde(default = "defaults::l0")]
    pub l0: f64,
    /// Coupling-length scaling per extra channel of separation.
    #[serde(default = "defaults::s")]
    pub s: f64,
    /// Half-width of the uniform pitch perturbation (µm).
    #[serde(default = "defaults::delta_d_range")]
    pub delta_d_range: f64,
    /// Half-width of the uniform length perturbation (µm).
    #[serde(default = "defaults::delta_l_range")]
    pub delta_l_range: f64,
    /// Per-channel effective index; empty means all equal to `defaults::N_EFF`.
    #[serde(default)]
    pub n_eff: Vec<f64>,
    /// Wavelength (µm).
    #[serde(default = "defaults::lambda0")]
    pub lambda0: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingFit {
    /// Base coupling coefficient (rad/µm).
    #[serde(default = "defaults::kappa0")]
    pub kappa0: f64,
    /// Exponential decay factor (1/µm).
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
}

/// Two-arm interferometric modulator: `T = insertion * (e^{i pi v0/v_pi} + e^{i pi v1/v_pi}) / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrmzmConfig {
    #[serde(default = "defaults::v_pi")]
    pub v_pi: f64,
    #[serde(default = "defaults::insertion")]
    pub insertion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SlmConfig {
    /// Per-channel amplitude in [0, 1]; empty means all 1.
    #[serde(default)]
    pub amplitude: Vec<f64>,
    /// Per-channel phase (rad); empty means all 0.
    #[serde(default)]
    pub phase: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamLattice {
    /// Atom coordinates (µm); empty means a triangular lattice at `spacing`.
    #[serde(default)]
    pub atom_positions: Vec<[f64; 2]>,
    /// Beam centres (µm), one per channel; empty means centred on the atoms.
    #[serde(default)]
    pub beam_centers: Vec<[f64; 2]>,
    /// Beam waist (µm).
    #[serde(default = "defaults::w0")]
    pub w0: f64,
    /// Inter-atomic spacing (µm).
    #[serde(default = "defaults::spacing")]
    pub spacing: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImperfectionConfig {
    #[serde(default)]
    pub weak_scatter_eps: f64,
    #[serde(default)]
    pub dynamic: bool,
    /// Half-width of per-step kappa0 fluctuations (rad/µm).
    #[serde(default = "defaults::delta_kappa")]
    pub delta_kappa: f64,
    /// Half-width of per-step alpha fluctuations (1/µm).
    #[serde(default = "defaults::delta_alpha")]
    pub delta_alpha: f64,
    /// Half-width of per-step waist fluctuations (µm).
    #[serde(default = "defaults::delta_w")]
    pub delta_w: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Full hardware description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareModel {
    #[serde(default)]
    pub geometry: PicGeometry,
    #[serde(default)]
    pub coupling: CouplingFit,
    #[serde(default)]
    pub drmzm: DrmzmConfig,
    #[serde(default)]
    pub slm: SlmConfig,
    #[serde(default)]
    pub lattice: BeamLattice,
    #[serde(default)]
    pub imperfections: ImperfectionConfig,
    /// Real input amplitude per channel; empty means all 1.
    #[serde(default)]
    pub input_amplitudes: Vec<f64>,
    /// Seed for the fabrication perturbations of pitch and coupling length.
    #[serde(default)]
    pub fabrication_seed: u64,
    /// When false, all crosstalk coefficients are forced to zero.
    #[serde(default = "defaults::yes")]
    pub crosstalk: bool,
}

pub(crate) mod defaults {
    pub const N_EFF: f64 = 1.8;
    pub fn d0() -> f64 {
        1.0
    }
    pub fn l0() -> f64 {
        600.0
    }
    pub fn s() -> f64 {
        1.1
    }
    pub fn delta_d_range() -> f64 {
        0.1
    }
    pub fn delta_l_range() -> f64 {
        60.0
    }
    pub fn lambda0() -> f64 {
        0.78
    }
    pub fn kappa0() -> f64 {
        10.145
    }
    pub fn alpha() -> f64 {
        6.934
    }
    pub fn v_pi() -> f64 {
        15.0
    }
    pub fn insertion() -> f64 {
        1.0
    }
    pub fn w0() -> f64 {
        2.0
    }
    pub fn spacing() -> f64 {
        3.0
    }
    pub fn delta_kappa() -> f64 {
        0.5
    }
    pub fn delta_alpha() -> f64 {
        0.2
    }
    pub fn delta_w() -> f64 {
        0.1
    }
    pub fn yes() -> bool {
        true
    }
}

impl Default for PicGeometry {
    fn default() -> Self {
        Self {
            n_channels: None,
            d0: defaults::d0(),
            l0: defaults::l0(),
            s: defaults::s(),
            delta_d_range: defaults::delta_d_range(),
            delta_l_range: defaults::delta_l_range(),
            n_eff: Vec::new(),
            lambda0: defaults::lambda0(),
        }
    }
}

impl Default for CouplingFit {
    fn default() -> Self {
        Self {
            kappa0: defaults::kappa0(),
            alpha: defaults::alpha(),
        }
    }
}

impl Default for DrmzmConfig {
    fn default() -> Self {
        Self {
            v_pi: defaults::v_pi(),
            insertion: defaults::insertion(),
        }
    }
}

impl Default for BeamLattice {
    fn default() -> Self {
        Self {
            atom_positions: Vec::new(),
            beam_centers: Vec::new(),
            w0: defaults::w0(),
            spacing: defaults::spacing(),
        }
    }
}

impl Default for ImperfectionConfig {
    fn default() -> Self {
        Self {
            weak_scatter_eps: 0.0,
            dynamic: false,
            delta_kappa: defaults::delta_kappa(),
            delta_alpha: defaults::delta_alpha(),
            delta_w: defaults::delta_w(),
            seed: 0,
        }
    }
}

impl Default for HardwareModel {
    fn default() -> Self {
        Self {
            geometry: PicGeometry::default(),
            coupling: CouplingFit::default(),
            drmzm: DrmzmConfig::default(),
            slm: SlmConfig::default(),
            lattice: BeamLattice::default(),
            imperfections: ImperfectionConfig::default(),
            input_amplitudes: Vec::new(),
            fabrication_seed: 0,
            crosstalk: true,
        }
    }
}

fn schema(field: &str, reason: impl Into<String>) -> QocError {
    QocError::Schema {
        field: field.to_string(),
        reason: reason.into(),
    }
}

/// Atom sites on an equilateral triangular lattice, filled row by row.
pub fn triangular_lattice(n_atoms: usize, spacing: f64) -> Vec<[f64; 2]> {
    let per_row = ((n_atoms as f64).sqrt().ceil() as usize).max(1);
    let row_height = spacing * 3f64.sqrt() / 2.0;
    (0..n_atoms)
        .map(|i| {
            let (row, col) = (i / per_row, i % per_row);
            let shift = if row % 2 == 1 { spacing / 2.0 } else { 0.0 };
            [col as f64 * spacing + shift, row as f64 * row_height]
        })
        .collect()
}

impl HardwareModel {
    pub fn n_channels(&self) -> usize {
        self.geometry.n_channels.unwrap_or(0)
    }

    /// Fill every atom-count dependent default and validate invariants.
    pub fn resolve(&mut self, n_atoms: usize) -> Result<()> {
        let n = *self.geometry.n_channels.get_or_insert(n_atoms);
        if n == 0 {
            return Err(schema("hardware.geometry.n_channels", "must be >= 1"));
        }
        if self.geometry.n_eff.is_empty() {
            self.geometry.n_eff = vec![defaults::N_EFF; n];
        }
        if self.slm.amplitude.is_empty() {
            self.slm.amplitude = vec![1.0; n];
        }
        if self.slm.phase.is_empty() {
            self.slm.phase = vec![0.0; n];
        }
        if self.lattice.atom_positions.is_empty() {
            self.lattice.atom_positions = triangular_lattice(n_atoms, self.lattice.spacing);
        }
        if self.lattice.beam_centers.is_empty() {
            self.lattice.beam_centers = self.lattice.atom_positions.clone();
        }
        if self.input_amplitudes.is_empty() {
            self.input_amplitudes = vec![1.0; n];
        }
        self.validate(n_atoms)
    }

    pub fn validate(&self, n_atoms: usize) -> Result<()> {
        let n = self.n_channels();
        let g = &self.geometry;
        if n == 0 {
            return Err(schema("hardware.geometry.n_channels", "must be >= 1"));
        }
        if !(g.d0 > 0.0) {
            return Err(schema("hardware.geometry.d0", "must be > 0"));
        }
        if !(g.l0 >= 0.0) {
            return Err(schema("hardware.geometry.l0", "must be >= 0"));
        }
        if !(g.lambda0 > 0.0) {
            return Err(schema("hardware.geometry.lambda0", "must be > 0"));
        }
        if !(g.delta_d_range >= 0.0) || !(g.delta_l_range >= 0.0) {
            return Err(schema("hardware.geometry.delta_*_range", "must be >= 0"));
        }
        if g.n_eff.len() != n {
            return Err(schema(
                "hardware.geometry.n_eff",
                format!("needs {n} entries"),
            ));
        }
        if !(self.coupling.kappa0 >= 0.0) || !(self.coupling.alpha >= 0.0) {
            return Err(schema("hardware.coupling", "kappa0 and alpha must be >= 0"));
        }
        if !(self.drmzm.v_pi > 0.0) {
            return Err(schema("hardware.drmzm.v_pi", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.drmzm.insertion) {
            return Err(schema("hardware.drmzm.insertion", "must lie in [0, 1]"));
        }
        if self.slm.amplitude.len() != n || self.slm.phase.len() != n {
            return Err(schema(
                "hardware.slm",
                format!("needs {n} amplitudes and phases"),
            ));
        }
        if self.slm.amplitude.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(schema(
                "hardware.slm.amplitude",
                "entries must lie in [0, 1]",
            ));
        }
        if self.lattice.atom_positions.len() != n_atoms {
            return Err(schema(
                "hardware.lattice.atom_positions",
                format!("needs {n_atoms} entries"),
            ));
        }
        if self.lattice.beam_centers.len() != n {
            return Err(schema(
                "hardware.lattice.beam_centers",
                format!("needs {n} entries"),
            ));
        }
        if !(self.lattice.w0 > 0.0) || !(self.lattice.spacing > 0.0) {
            return Err(schema("hardware.lattice", "w0 and spacing must be > 0"));
        }
        let imp = &self.imperfections;
        if !(imp.weak_scatter_eps >= 0.0)
            || !(imp.delta_kappa >= 0.0)
            || !(imp.delta_alpha >= 0.0)
            || !(imp.delta_w >= 0.0)
        {
            return Err(schema("hardware.imperfections", "half-widths must be >= 0"));
        }
        if self.input_amplitudes.len() != n {
            return Err(schema(
                "hardware.input_amplitudes",
                format!("needs {n} entries"),
            ));
        }
        if n != n_atoms {
            return Err(QocError::DimensionMismatch {
                what: "PIC channels vs atoms",
                expected: n_atoms,
                found: n,
            });
        }
        Ok(())
    }

    pub fn input_field(&self) -> Vec<Complex64> {
        self.input_amplitudes
            .iter()
            .map(|a| Complex64::new(*a, 0.0))
            .collect()
    }
}

/// Fabricated pairwise separations and coupling lengths (µm). Diagonals are 0.
#[derive(Clone, Debug, PartialEq)]
pub struct RealizedGeometry {
    pub n: usize,
    pub d: Vec<f64>,
    pub l: Vec<f64>,
}

impl RealizedGeometry {
    pub fn distance(&self, m: usize, n: usize) -> f64 {
        self.d[m * self.n + n]
    }

    pub fn length(&self, m: usize, n: usize) -> f64 {
        self.l[m * self.n + n]
    }
}

/// Sample one fabricated chip: one perturbation per unordered channel pair.
pub fn realize_geometry(geom: &PicGeometry, n_channels: usize, seed: u64) -> RealizedGeometry {
    let n = n_channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut d = vec![0.0; n * n];
    let mut l = vec![0.0; n * n];
    for m in 0..n {
        for k in (m + 1)..n {
            let sep = (k - m) as f64;
            let dd = symmetric_uniform(&mut rng, geom.delta_d_range);
            let dl = symmetric_uniform(&mut rng, geom.delta_l_range);
            let dist = sep * geom.d0 + dd;
            let len = geom.l0 * geom.s.powi((k - m) as i32) + dl;
            d[m * n + k] = dist;
            d[k * n + m] = dist;
            l[m * n + k] = len;
            l[k * n + m] = len;
        }
    }
    RealizedGeometry { n, d, l }
}

fn symmetric_uniform(rng: &mut impl Rng, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

/// Coupled-mode crosstalk coefficient `C_mn = |sin(kappa_eff L)| e^{-i pi/2}`.
pub fn coupling_coefficient(
    m: usize,
    n: usize,
    geo: &RealizedGeometry,
    fit: &CouplingFit,
    geom: &PicGeometry,
) -> Result<Complex64> {
    if m == n {
        return Err(QocError::InvalidPair { m, n });
    }
    let kappa = fit.kappa0 * (-fit.alpha * geo.distance(m, n)).exp();
    let beta = |i: usize| 2.0 * PI * geom.n_eff[i] / geom.lambda0;
    let delta_beta = (beta(m) - beta(n)) / 2.0;
    let kappa_eff = (kappa * kappa + delta_beta * delta_beta).sqrt();
    let amplitude = (kappa_eff * geo.length(m, n)).sin().abs();
    Ok(Complex64::from_polar(amplitude, -PI / 2.0))
}

/// Full off-diagonal crosstalk matrix (zero diagonal).
pub fn crosstalk_matrix(geo: &RealizedGeometry, fit: &CouplingFit, geom: &PicGeometry) -> CMat {
    let n = geo.n;
    let mut c = CMat::zeros(n, n);
    for m in 0..n {
        for k in 0..n {
            if m != k {
                c[(m, k)] = coupling_coefficient(m, k, geo, fit, geom).expect("m != k");
            }
        }
    }
    c
}

pub fn drmzm_transfer(v0: f64, v1: f64, cfg: &DrmzmConfig) -> Result<Complex64> {
    for v in [v0, v1] {
        if !(V_MIN..=V_MAX).contains(&v) {
            return Err(QocError::ConstraintViolation {
                channel: 0,
                ring: usize::from(v == v1 && v != v0),
                segment: 0,
                value: v,
            });
        }
    }
    Ok(drmzm_transfer_unchecked(v0, v1, cfg))
}

pub(crate) fn drmzm_transfer_unchecked(v0: f64, v1: f64, cfg: &DrmzmConfig) -> Complex64 {
    let arm = |v: f64| Complex64::from_polar(1.0, PI * v / cfg.v_pi);
    (arm(v0) + arm(v1)) * (0.5 * cfg.insertion)
}

/// `(dT/dv0, dT/dv1)`.
pub(crate) fn drmzm_derivative(v0: f64, v1: f64, cfg: &DrmzmConfig) -> (Complex64, Complex64) {
    let k = Complex64::new(0.0, 0.5 * cfg.insertion * PI / cfg.v_pi);
    (
        k * Complex64::from_polar(1.0, PI * v0 / cfg.v_pi),
        k * Complex64::from_polar(1.0, PI * v1 / cfg.v_pi),
    )
}

/// PIC matrix for one time step: modulator transfer on the diagonal,
/// crosstalk off the diagonal. Generally sub-unitary.
pub fn build_pic_matrix(
    voltages: &[(f64, f64)],
    crosstalk: &CMat,
    cfg: &DrmzmConfig,
) -> Result<CMat> {
    let n = crosstalk.rows();
    if voltages.len() != n {
        return Err(QocError::DimensionMismatch {
            what: "voltage pairs per step",
            expected: n,
            found: voltages.len(),
        });
    }
    let mut u = crosstalk.clone();
    for (ch, &(v0, v1)) in voltages.iter().enumerate() {
        u[(ch, ch)] = drmzm_transfer(v0, v1, cfg).map_err(|e| match e {
            QocError::ConstraintViolation { ring, value, .. } => QocError::ConstraintViolation {
                channel: ch,
                ring,
                segment: 0,
                value,
            },
            other => other,
        })?;
    }
    Ok(u)
}

pub fn slm_matrix(slm: &SlmConfig) -> CMat {
    let diag: Vec<Complex64> = slm
        .amplitude
        .iter()
        .zip(&slm.phase)
        .map(|(a, p)| Complex64::from_polar(*a, *p))
        .collect();
    CMat::diag(&diag)
}

pub fn apply_slm(modes: &[Complex64], slm: &SlmConfig) -> Vec<Complex64> {
    modes
        .iter()
        .zip(slm.amplitude.iter().zip(&slm.phase))
        .map(|(m, (a, p))| m * Complex64::from_polar(*a, *p))
        .collect()
}

/// `I + eps R` with `R` a seeded matrix of entries `U(-1,1) + i U(-1,1)`.
pub fn weak_scatter_matrix(n: usize, eps: f64, seed: u64, stage: u8) -> CMat {
    let mut m = CMat::identity(n);
    if eps == 0.0 {
        return m;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(stage));
    for i in 0..n {
        for j in 0..n {
            let r = Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            m[(i, j)] += r * eps;
        }
    }
    m
}

pub fn weak_scatter(modes: &[Complex64], eps: f64, seed: u64, stage: u8) -> Vec<Complex64> {
    weak_scatter_matrix(modes.len(), eps, seed, stage).matvec(modes)
}

/// Gaussian projection matrix `G[j][k] = exp(-|r_j - c_k|^2 / w^2)`.
pub fn leakage_matrix(lattice: &BeamLattice, w0: f64) -> CMat {
    let atoms = &lattice.atom_positions;
    let beams = &lattice.beam_centers;
    CMat::from_fn(atoms.len(), beams.len(), |j, k| {
        let dx = atoms[j][0] - beams[k][0];
        let dy = atoms[j][1] - beams[k][1];
        Complex64::new((-(dx * dx + dy * dy) / (w0 * w0)).exp(), 0.0)
    })
}

/// LG00 envelope at focus (flat phase): `E_j = sum_k b_k exp(-|r_j - c_k|^2 / w^2)`.
pub fn field_at_atoms(outputs: &[Complex64], lattice: &BeamLattice, w0: f64) -> Vec<Complex64> {
    leakage_matrix(lattice, w0).matvec(outputs)
}

/// Per-step imperfection draws.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDynamics {
    /// `(delta_kappa, delta_alpha)` per unordered pair `(m < n)` in row order.
    pub pairs: Vec<(f64, f64)>,
    pub delta_w: f64,
}

pub fn sample_dynamics(
    imp: &ImperfectionConfig,
    n_channels: usize,
    t_steps: usize,
) -> Vec<StepDynamics> {
    let n_pairs = n_channels * n_channels.saturating_sub(1) / 2;
    if !imp.dynamic {
        return vec![
            StepDynamics {
                pairs: vec![(0.0, 0.0); n_pairs],
                delta_w: 0.0,
            };
            t_steps
        ];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(imp.seed);
    rng.set_stream(0xD1_u64);
    (0..t_steps)
        .map(|_| {
            let pairs = (0..n_pairs)
                .map(|_| {
                    let dk = symmetric_uniform(&mut rng, imp.delta_kappa);
                    let da = symmetric_uniform(&mut rng, imp.delta_alpha);
                    (dk, da)
                })
                .collect();
            let delta_w = symmetric_uniform(&mut rng, imp.delta_w);
            StepDynamics { pairs, delta_w }
        })
        .collect()
}

fn pair_index(m: usize, n: usize, n_channels: usize) -> usize {
    let (a, b) = if m < n { (m, n) } else { (n, m) };
    a * (2 * n_channels - a - 1) / 2 + (b - a - 1)
}

/// Crosstalk matrix for one step under sampled fluctuations of kappa0 and alpha.
pub fn perturbed_crosstalk(
    geo: &RealizedGeometry,
    fit: &CouplingFit,
    geom: &PicGeometry,
    dynamics: &StepDynamics,
) -> CMat {
    let n = geo.n;
    let mut c = CMat::zeros(n, n);
    for m in 0..n {
        for k in 0..n {
            if m == k {
                continue;
            }
            let (dk, da) = dynamics.pairs[pair_index(m, k, n)];
            let local = CouplingFit {
                kappa0: fit.kappa0 + dk,
                alpha: fit.alpha + da,
            };
            c[(m, k)] = coupling_coefficient(m, k, geo, &local, geom).expect("m != k");
        }
    }
    c
}

/// The static part of the chain, shared by every schedule evaluated on one grid.
///
/// For each step `k` the atom fields are affine in the channel transfers:
/// `E_k = P_k (T_k o a) + P_k C_k a` where `P_k = G_k W2 S W1`.
#[derive(Clone, Debug)]
pub struct ChainModel {
    pub n_channels: usize,
    pub n_atoms: usize,
    pub t_steps: usize,
    pub drmzm: DrmzmConfig,
    pub a_in: Vec<Complex64>,
    /// Per-step crosstalk matrices (length 1 when static).
    pub crosstalk: Vec<CMat>,
    /// Per-step post-PIC linear maps (length 1 when static).
    pub projection: Vec<CMat>,
    /// Per-step field offsets `P_k C_k a` (length 1 when static).
    pub offset: Vec<Vec<Complex64>>,
}

impl ChainModel {
    pub fn new(hw: &HardwareModel, n_atoms: usize, t_steps: usize) -> Result<Self> {
        hw.validate(n_atoms)?;
        let n = hw.n_channels();
        let geo = realize_geometry(&hw.geometry, n, hw.fabrication_seed);
        let imp = &hw.imperfections;
        let w1 = weak_scatter_matrix(n, imp.weak_scatter_eps, imp.seed, 1);
        let w2 = weak_scatter_matrix(n, imp.weak_scatter_eps, imp.seed, 2);
        let post_pic = w2.matmul(&slm_matrix(&hw.slm)).matmul(&w1);
        let a_in = hw.input_field();

        let (crosstalk, waists): (Vec<CMat>, Vec<f64>) = if imp.dynamic {
            sample_dynamics(imp, n, t_steps)
                .iter()
                .map(|dy| {
                    let c = if hw.crosstalk {
                        perturbed_crosstalk(&geo, &hw.coupling, &hw.geometry, dy)
                    } else {
                        CMat::zeros(n, n)
                    };
                    (c, hw.lattice.w0 + dy.delta_w)
                })
                .unzip()
        } else {
            let c = if hw.crosstalk {
                crosstalk_matrix(&geo, &hw.coupling, &hw.geometry)
            } else {
                CMat::zeros(n, n)
            };
            (vec![c], vec![hw.lattice.w0])
        };

        let projection: Vec<CMat> = waists
            .iter()
            .map(|w| leakage_matrix(&hw.lattice, *w).matmul(&post_pic))
            .collect();
        let offset = crosstalk
            .iter()
            .zip(&projection)
            .map(|(c, p)| p.matvec(&c.matvec(&a_in)))
            .collect();
        Ok(Self {
            n_channels: n,
            n_atoms,
            t_steps,
            drmzm: hw.drmzm,
            a_in,
            crosstalk,
            projection,
            offset,
        })
    }

    /// True when every step shares one crosstalk matrix and projection.
    pub fn is_static(&self) -> bool {
        self.projection.len() == 1
    }

    pub fn projection_at(&self, step: usize) -> &CMat {
        &self.projection[step.min(self.projection.len() - 1)]
    }

    pub fn offset_at(&self, step: usize) -> &[Complex64] {
        &self.offset[step.min(self.offset.len() - 1)]
    }

    /// Atom fields for one step given the channel transfers.
    pub fn fields_from_transfers(&self, step: usize, transfers: &[Complex64]) -> Vec<Complex64> {
        let p = self.projection_at(step);
        let off = self.offset_at(step);
        let driven: Vec<Complex64> = transfers
            .iter()
            .zip(&self.a_in)
            .map(|(t, a)| t * a)
            .collect();
        p.matvec(&driven)
            .into_iter()
            .zip(off)
            .map(|(e, o)| e + o)
            .collect()
    }
}

/// Reference composition of every stage, one step at a time.
///
/// Returns `E[k][j]`, the field at atom `j` during time step `k`.
pub fn forward_chain(
    schedule: &ControlSchedule,
    hw: &HardwareModel,
    a_in: &[Complex64],
    t_steps: usize,
) -> Result<Vec<Vec<Complex64>>> {
    let n = hw.n_channels();
    let n_atoms = hw.lattice.atom_positions.len();
    if n != n_atoms {
        return Err(QocError::DimensionMismatch {
            what: "PIC channels vs atoms",
            expected: n_atoms,
            found: n,
        });
    }
    if a_in.len() != n {
        return Err(QocError::DimensionMismatch {
            what: "input amplitudes",
            expected: n,
            found: a_in.len(),
        });
    }
    schedule.validate(n, t_steps)?;
    let geo = realize_geometry(&hw.geometry, n, hw.fabrication_seed);
    let imp = &hw.imperfections;
    let dynamics = sample_dynamics(imp, n, t_steps);
    let static_c = crosstalk_matrix(&geo, &hw.coupling, &hw.geometry);
    let steps_per_segment = t_steps / schedule.n_segments();

    (0..t_steps)
        .map(|k| {
            let dy = &dynamics[k];
            let c = match (hw.crosstalk, imp.dynamic) {
                (false, _) => CMat::zeros(n, n),
                (true, false) => static_c.clone(),
                (true, true) => perturbed_crosstalk(&geo, &hw.coupling, &hw.geometry, dy),
            };
            let seg = k / steps_per_segment;
            let volts: Vec<(f64, f64)> = (0..n)
                .map(|ch| (schedule.get(ch, 0, seg), schedule.get(ch, 1, seg)))
                .collect();
            let pic = build_pic_matrix(&volts, &c, &hw.drmzm)?;
            let b = pic.matvec(a_in);
            let b = weak_scatter(&b, imp.weak_scatter_eps, imp.seed, 1);
            let b = apply_slm(&b, &hw.slm);
            let b = weak_scatter(&b, imp.weak_scatter_eps, imp.seed, 2);
            Ok(field_at_atoms(&b, &hw.lattice, hw.lattice.w0 + dy.delta_w))
        })
        .collect()
}

/// Voltages `(v0, v1)` giving a real, non-negative transfer `|T| = amplitude`.
pub fn voltages_for_real_transfer(amplitude: f64, cfg: &DrmzmConfig) -> (f64, f64) {
    let a = (amplitude / cfg.insertion).clamp(0.0, 1.0);
    // T = insertion * cos(pi (v0 - v1) / (2 v_pi)) for v1 = -v0.
    let v = cfg.v_pi * a.acos() / PI;
    (v, -v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{ONE, ZERO};
    use approx::assert_relative_eq;

    fn resolved(n: usize) -> HardwareModel {
        let mut hw = HardwareModel::default();
        hw.resolve(n).unwrap();
        hw
    }

    #[test]
    fn geometry_without_perturbation() {
        let geom = PicGeometry {
            d0: 1.0,
            l0: 600.0,
            s: 1.1,
            delta_d_range: 0.0,
            delta_l_range: 0.0,
            ..PicGeometry::default()
        };
        let g = realize_geometry(&geom, 4, 9);
        assert_eq!(g.distance(1, 3), 2.0);
        assert_relative_eq!(g.length(1, 3), 726.0, max_relative = 1e-14);
        assert_relative_eq!(g.length(0, 1), 660.0, max_relative = 1e-14);
        assert_eq!(g.distance(2, 2), 0.0);
    }

    #[test]
    fn geometry_is_seeded_and_symmetric() {
        let geom = PicGeometry::default();
        let a = realize_geometry(&geom, 6, 42);
        let b = realize_geometry(&geom, 6, 42);
        assert_eq!(a, b);
        let c = realize_geometry(&geom, 6, 43);
        assert_ne!(a, c);
        for m in 0..6 {
            for n in 0..6 {
                assert_eq!(a.distance(m, n), a.distance(n, m));
                assert_eq!(a.length(m, n), a.length(n, m));
                if m != n {
                    let sep = (m as f64 - n as f64).abs();
                    assert!((a.distance(m, n) - sep).abs() <= 0.1);
                }
            }
        }
    }

    #[test]
    fn coupling_zero_length_and_pair_errors() {
        let geom = PicGeometry {
            l0: 0.0,
            delta_d_range: 0.0,
            delta_l_range: 0.0,
            n_eff: vec![1.8; 3],
            ..PicGeometry::default()
        };
        let g = realize_geometry(&geom, 3, 0);
        let c = coupling_coefficient(0, 1, &g, &CouplingFit::default(), &geom).unwrap();
        assert_eq!(c.norm(), 0.0);
        assert!(matches!(
            coupling_coefficient(1, 1, &g, &CouplingFit::default(), &geom),
            Err(QocError::InvalidPair { m: 1, n: 1 })
        ));
    }

    #[test]
    fn coupling_at_fitted_constants() {
        let geom = PicGeometry {
            s: 1.0,
            delta_d_range: 0.0,
            delta_l_range: 0.0,
            n_eff: vec![1.8; 2],
            ..PicGeometry::default()
        };
        let g = realize_geometry(&geom, 2, 0);
        let c = coupling_coefficient(0, 1, &g, &CouplingFit::default(), &geom).unwrap();
        // Oracle: |sin(600 * 10.145 * exp(-6.934))| evaluated independently.
        let expected = (600.0f64 * 10.145 * (-6.934f64).exp()).sin().abs();
        assert_relative_eq!(c.norm(), expected, max_relative = 1e-14);
        assert!((c.norm() - 0.35).abs() < 0.01, "{}", c.norm());
        assert_relative_eq!(c.arg(), -PI / 2.0, epsilon = 1e-15);
        let c10 = coupling_coefficient(1, 0, &g, &CouplingFit::default(), &geom).unwrap();
        assert_eq!(c, c10);
    }

    #[test]
    fn phase_mismatch_shifts_coupling() {
        let geom = PicGeometry {
            s: 1.0,
            delta_d_range: 0.0,
            delta_l_range: 0.0,
            n_eff: vec![1.8, 1.8001],
            ..PicGeometry::default()
        };
        let g = realize_geometry(&geom, 2, 0);
        let c = coupling_coefficient(0, 1, &g, &CouplingFit::default(), &geom).unwrap();
        let kappa = 10.145 * (-6.934f64).exp();
        let db = PI * 0.0001 / 0.78;
        let expected = ((kappa * kappa + db * db).sqrt() * 600.0).sin().abs();
        assert_relative_eq!(c.norm(), expected, max_relative = 1e-12);
    }

    #[test]
    fn drmzm_examples() {
        let cfg = DrmzmConfig::default();
        assert_relative_eq!(drmzm_transfer(0.0, 0.0, &cfg).unwrap().re, 1.0);
        assert!(drmzm_transfer(15.0, 0.0, &cfg).unwrap().norm() < 1e-15);
        let t = drmzm_transfer(7.5, 0.0, &cfg).unwrap();
        assert_relative_eq!(t.norm(), 2f64.sqrt() / 2.0, epsilon = 1e-15);
        assert_relative_eq!(t.arg(), PI / 4.0, epsilon = 1e-15);
        assert!(matches!(
            drmzm_transfer(15.5, 0.0, &cfg),
            Err(QocError::ConstraintViolation { .. })
        ));
        let lossy = DrmzmConfig {
            insertion: 0.6,
            ..cfg
        };
        assert!(drmzm_transfer(3.0, -8.0, &lossy).unwrap().norm() <= 0.6 + 1e-15);
    }

    #[test]
    fn drmzm_derivative_matches_difference() {
        let cfg = DrmzmConfig::default();
        let (d0, d1) = drmzm_derivative(3.0, -4.0, &cfg);
        let h = 1e-6;
        let fd0 = (drmzm_transfer_unchecked(3.0 + h, -4.0, &cfg)
            - drmzm_transfer_unchecked(3.0 - h, -4.0, &cfg))
            / (2.0 * h);
        let fd1 = (drmzm_transfer_unchecked(3.0, -4.0 + h, &cfg)
            - drmzm_transfer_unchecked(3.0, -4.0 - h, &cfg))
            / (2.0 * h);
        assert!((d0 - fd0).norm() < 1e-9);
        assert!((d1 - fd1).norm() < 1e-9);
    }

    #[test]
    fn pic_matrix_construction() {
        let cfg = DrmzmConfig::default();
        let zero = CMat::zeros(3, 3);
        let u = build_pic_matrix(&[(0.0, 0.0); 3], &zero, &cfg).unwrap();
        assert!(u.sub(&CMat::identity(3)).frobenius_norm() < 1e-15);

        let mut c = CMat::zeros(2, 2);
        let c12 = Complex64::new(0.0, -0.35);
        c[(0, 1)] = c12;
        c[(1, 0)] = c12;
        let u = build_pic_matrix(&[(1.0, 2.0), (-3.0, 4.0)], &c, &cfg).unwrap();
        assert_eq!(u[(0, 1)], c12);
        assert!(matches!(
            build_pic_matrix(&[(0.0, 0.0)], &c, &cfg),
            Err(QocError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn pic_matrix_norm_bound() {
        let hw = resolved(6);
        let geo = realize_geometry(&hw.geometry, 6, 3);
        let c = crosstalk_matrix(&geo, &hw.coupling, &hw.geometry);
        let max_c = c.as_slice().iter().map(|x| x.norm()).fold(0.0, f64::max);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let volts: Vec<(f64, f64)> = (0..6)
                .map(|_| (rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0)))
                .collect();
            let u = build_pic_matrix(&volts, &c, &hw.drmzm).unwrap();
            assert!(u.spectral_norm() <= 1.0 + 6.0 * max_c + 1e-12);
        }
    }

    #[test]
    fn slm_examples() {
        let modes = vec![Complex64::new(0.3, -0.2), Complex64::new(1.0, 0.5)];
        let unit = SlmConfig {
            amplitude: vec![1.0, 1.0],
            phase: vec![0.0, 0.0],
        };
        assert_eq!(apply_slm(&modes, &unit), modes);
        let flip = SlmConfig {
            amplitude: vec![1.0, 1.0],
            phase: vec![PI, 0.0],
        };
        let out = apply_slm(&modes, &flip);
        assert!((out[0] + modes[0]).norm() < 1e-15);
        let half = SlmConfig {
            amplitude: vec![0.5, 1.0],
            phase: vec![0.0, 0.0],
        };
        assert_relative_eq!(apply_slm(&modes, &half)[0].norm(), modes[0].norm() / 2.0);
    }

    #[test]
    fn weak_scatter_examples() {
        let modes = vec![Complex64::new(0.3, -0.2), Complex64::new(1.0, 0.5), ONE];
        assert_eq!(weak_scatter(&modes, 0.0, 5, 1), modes);
        assert_eq!(
            weak_scatter_matrix(3, 0.01, 5, 1),
            weak_scatter_matrix(3, 0.01, 5, 1)
        );
        assert_ne!(
            weak_scatter_matrix(3, 0.01, 5, 1),
            weak_scatter_matrix(3, 0.01, 5, 2)
        );
        let eps = 0.02;
        let r = weak_scatter_matrix(3, eps, 5, 1)
            .sub(&CMat::identity(3))
            .scale(Complex64::new(1.0 / eps, 0.0));
        let out = weak_scatter(&modes, eps, 5, 1);
        let diff: f64 = out
            .iter()
            .zip(&modes)
            .map(|(a, b)| (a - b).norm_sqr())
            .sum::<f64>()
            .sqrt();
        let norm_in: f64 = modes.iter().map(|m| m.norm_sqr()).sum::<f64>().sqrt();
        assert!(diff <= eps * r.spectral_norm() * norm_in + 1e-15);
    }

    #[test]
    fn gaussian_projection() {
        let lattice = BeamLattice {
            atom_positions: triangular_lattice(3, 3.0),
            beam_centers: triangular_lattice(3, 3.0),
            ..BeamLattice::default()
        };
        let b = [Complex64::new(0.7, 0.1), ZERO, ZERO];
        let e = field_at_atoms(&b, &lattice, 2.0);
        assert_eq!(e[0], b[0]);
        let b = [ONE, ZERO, ZERO];
        let e = field_at_atoms(&b, &lattice, 2.0);
        assert_relative_eq!(e[1].norm(), (-9.0f64 / 4.0).exp(), max_relative = 1e-12);
        assert_relative_eq!(e[1].norm(), 0.1054, epsilon = 1e-4);
        assert_relative_eq!(e[2].norm(), (-9.0f64 / 4.0).exp(), max_relative = 1e-12);
        let b2 = [Complex64::new(2.0, 0.0), ZERO, ZERO];
        let e2 = field_at_atoms(&b2, &lattice, 2.0);
        for (x, y) in e.iter().zip(&e2) {
            assert!((x * 2.0 - y).norm() < 1e-15);
        }
    }

    #[test]
    fn triangular_lattice_is_equilateral() {
        let p = triangular_lattice(3, 3.0);
        let dist =
            |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        assert_relative_eq!(dist(p[0], p[1]), 3.0, epsilon = 1e-12);
        assert_relative_eq!(dist(p[0], p[2]), 3.0, epsilon = 1e-12);
        assert_relative_eq!(dist(p[1], p[2]), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn dynamics_sampling() {
        let off = ImperfectionConfig::default();
        let s = sample_dynamics(&off, 3, 10);
        assert!(s
            .iter()
            .all(|d| d.delta_w == 0.0 && d.pairs.iter().all(|p| *p == (0.0, 0.0))));
        let on = ImperfectionConfig {
            dynamic: true,
            seed: 7,
            ..off
        };
        let a = sample_dynamics(&on, 3, 50);
        assert_eq!(a, sample_dynamics(&on, 3, 50));
        assert_eq!(a[0].pairs.len(), 3);
        for d in &a {
            assert!(d.delta_w.abs() <= 0.1);
            for (k, al) in &d.pairs {
                assert!(k.abs() <= 0.5 && al.abs() <= 0.2);
            }
        }
    }

    #[test]
    fn pair_indexing_covers_upper_triangle() {
        let n = 5;
        let mut seen = vec![false; n * (n - 1) / 2];
        for m in 0..n {
            for k in (m + 1)..n {
                let i = pair_index(m, k, n);
                assert_eq!(i, pair_index(k, m, n));
                assert!(!seen[i]);
                seen[i] = true;
            }
        }
        assert!(seen.into_iter().all(|x| x));
    }

    #[test]
    fn forward_chain_ideal_hardware() {
        let mut hw = resolved(3);
        hw.crosstalk = false;
        let sched = ControlSchedule::zeros(3, 4);
        let a = [
            Complex64::new(1.0, 0.0),
            Complex64::new(0.5, 0.0),
            Complex64::new(0.0, 0.25),
        ];
        let e = forward_chain(&sched, &hw, &a, 8).unwrap();
        let leak = (-9.0f64 / 4.0).exp();
        for step in &e {
            for j in 0..3 {
                let others: Complex64 = (0..3).filter(|k| *k != j).map(|k| a[k]).sum();
                let expected = a[j] + others * leak;
                assert!((step[j] - expected).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn forward_chain_rejects_channel_mismatch() {
        let mut hw = resolved(3);
        hw.lattice.atom_positions.pop();
        let sched = ControlSchedule::zeros(3, 1);
        let a = vec![ONE; 3];
        assert!(matches!(
            forward_chain(&sched, &hw, &a, 4),
            Err(QocError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn chain_model_matches_reference() {
        let mut hw = resolved(3);
        hw.imperfections.weak_scatter_eps = 0.03;
        hw.imperfections.seed = 4;
        hw.slm.phase = vec![0.2, -1.0, 0.5];
        for dynamic in [false, true] {
            hw.imperfections.dynamic = dynamic;
            let sched = ControlSchedule::random(3, 5, &mut ChaCha8Rng::seed_from_u64(2));
            let reference = forward_chain(&sched, &hw, &hw.input_field(), 10).unwrap();
            let model = ChainModel::new(&hw, 3, 10).unwrap();
            for (k, expected) in reference.iter().enumerate() {
                let seg = k / 2;
                let t: Vec<Complex64> = (0..3)
                    .map(|ch| {
                        drmzm_transfer_unchecked(
                            sched.get(ch, 0, seg),
                            sched.get(ch, 1, seg),
                            &hw.drmzm,
                        )
                    })
                    .collect();
                let got = model.fields_from_transfers(k, &t);
                for (x, y) in got.iter().zip(expected) {
                    assert!((x - y).norm() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn real_transfer_voltages() {
        let cfg = DrmzmConfig::default();
        for a in [0.0, 0.25, 0.5, 1.0] {
            let (v0, v1) = voltages_for_real_transfer(a, &cfg);
            let t = drmzm_transfer(v0, v1, &cfg).unwrap();
            assert!((t - Complex64::new(a, 0.0)).norm() < 1e-14);
        }
    }
}
