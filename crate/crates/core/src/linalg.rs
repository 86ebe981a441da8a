//! Small dense complex matrices.
//!
//! Everything the simulator touches is at most 2^N_a x 2^N_a with N_a around 3,
//! so a flat row-major `Vec` beats a general linear-algebra dependency in the
//! hot loops. The general Hermitian eigensolver delegates to nalgebra.

use std::ops::{Index, IndexMut};

use num_complex::Complex64;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);
pub const I: Complex64 = Complex64::new(0.0, 1.0);

/// Square-or-rectangular complex matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CMat {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![ZERO; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = ONE;
        }
        m
    }

    pub fn from_rows(rows: &[&[Complex64]]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self {
            rows: r,
            cols: c,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[Complex64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn matmul(&self, rhs: &CMat) -> CMat {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = CMat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == ZERO {
                    continue;
                }
                let rrow = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let orow = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, b) in orow.iter_mut().zip(rrow) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[Complex64]) -> Vec<Complex64> {
        assert_eq!(self.cols, v.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|i| {
                self.data[i * self.cols..(i + 1) * self.cols]
                    .iter()
                    .zip(v)
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> CMat {
        CMat::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn transpose(&self) -> CMat {
        CMat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn trace(&self) -> Complex64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// `Tr(self * rhs)` without forming the product.
    pub fn trace_of_product(&self, rhs: &CMat) -> Complex64 {
        assert_eq!(self.cols, rhs.rows);
        assert_eq!(self.rows, rhs.cols);
        let mut acc = ZERO;
        for i in 0..self.rows {
            for k in 0..self.cols {
                acc += self.data[i * self.cols + k] * rhs.data[k * rhs.cols + i];
            }
        }
        acc
    }

    pub fn kron(&self, rhs: &CMat) -> CMat {
        let (r, c) = (self.rows * rhs.rows, self.cols * rhs.cols);
        CMat::from_fn(r, c, |i, j| {
            self[(i / rhs.rows, j / rhs.cols)] * rhs[(i % rhs.rows, j % rhs.cols)]
        })
    }

    pub fn scale(&self, s: Complex64) -> CMat {
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, rhs: &CMat) -> CMat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, rhs: &CMat) -> CMat {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        CMat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
    }

    /// Largest singular value, via power iteration on `A^dagger A`.
    pub fn spectral_norm(&self) -> f64 {
        let gram = self.adjoint().matmul(self);
        let eig = HermitianEigen::new(&gram);
        eig.values
            .iter()
            .fold(0.0_f64, |m, v| m.max(*v))
            .max(0.0)
            .sqrt()
    }

    /// `||A^dagger A - I||_F`.
    pub fn unitarity_defect(&self) -> f64 {
        self.adjoint()
            .matmul(self)
            .sub(&CMat::identity(self.cols))
            .frobenius_norm()
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.rows == self.cols && self.sub(&self.adjoint()).frobenius_norm() <= tol
    }
}

impl Index<(usize, usize)> for CMat {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for CMat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Eigendecomposition `H = V diag(values) V^dagger` of a Hermitian matrix.
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    /// Columns are eigenvectors.
    pub vectors: CMat,
}

impl HermitianEigen {
    /// General solver (nalgebra Householder + implicit QR).
    pub fn new(h: &CMat) -> Self {
        let n = h.rows();
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| h[(i, j)]);
        let eig = nalgebra::linalg::SymmetricEigen::new(m);
        let values = eig.eigenvalues.iter().copied().collect();
        let vectors = CMat::from_fn(n, n, |i, j| eig.eigenvectors[(i, j)]);
        Self { values, vectors }
    }

    /// Closed-form decomposition of the single-qubit drive `[[0, g*], [g, 0]]`.
    ///
    /// Eigenvalues `+|g|, -|g|` with eigenvectors `(1, +-e^{i arg g}) / sqrt 2`.
    /// At `g = 0` the same basis is still a valid eigenbasis.
    pub fn qubit_drive(g: Complex64) -> Self {
        let r = g.norm();
        let phase = if r > 0.0 { g / r } else { ONE };
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let vectors = CMat::from_rows(&[
            &[Complex64::new(s, 0.0), Complex64::new(s, 0.0)],
            &[phase * s, -phase * s],
        ]);
        Self {
            values: vec![r, -r],
            vectors,
        }
    }

    /// Tensor product of decompositions of commuting terms acting on
    /// distinct tensor factors: eigenvalues add, eigenvectors multiply.
    pub fn kron_sum(parts: &[HermitianEigen]) -> Self {
        let mut values = vec![0.0];
        let mut vectors = CMat::identity(1);
        for p in parts {
            let mut next = Vec::with_capacity(values.len() * p.values.len());
            for a in &values {
                for b in &p.values {
                    next.push(a + b);
                }
            }
            values = next;
            vectors = vectors.kron(&p.vectors);
        }
        Self { values, vectors }
    }

    /// `exp(-i H dt)`.
    pub fn expm_neg_i(&self, dt: f64) -> CMat {
        let n = self.values.len();
        let phases: Vec<Complex64> = self
            .values
            .iter()
            .map(|l| Complex64::from_polar(1.0, -l * dt))
            .collect();
        let v = &self.vectors;
        CMat::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| v[(i, k)] * phases[k] * v[(j, k)].conj())
                .sum()
        })
    }

    /// Rebuild `V diag(values) V^dagger`.
    pub fn reconstruct(&self) -> CMat {
        let n = self.values.len();
        let v = &self.vectors;
        CMat::from_fn(n, n, |i, j| {
            (0..n)
                .map(|k| v[(i, k)] * self.values[k] * v[(j, k)].conj())
                .sum()
        })
    }
}

/// `sin(x)/x` with the removable singularity filled in.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        let x2 = x * x;
        1.0 - x2 / 6.0 + x2 * x2 / 120.0
    } else {
        x.sin() / x
    }
}

/// Divided-difference kernel of `lambda -> exp(-i lambda dt)` on an eigenvalue set.
///
/// `F[a][b] = (e^{-i l_a dt} - e^{-i l_b dt}) / (l_a - l_b)`, evaluated in the
/// cancellation-free form `-i dt e^{-i (l_a + l_b) dt / 2} sinc((l_a - l_b) dt / 2)`.
/// Pairs closer than `1e-12 * max|l|` use the analytic limit `-i dt e^{-i l_a dt}`.
pub fn exp_divided_differences(values: &[f64], dt: f64) -> CMat {
    let n = values.len();
    let scale = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * scale;
    let neg_i_dt = Complex64::new(0.0, -dt);
    CMat::from_fn(n, n, |a, b| {
        let (la, lb) = (values[a], values[b]);
        if (la - lb).abs() <= tol {
            neg_i_dt * Complex64::from_polar(1.0, -la * dt)
        } else {
            neg_i_dt
                * Complex64::from_polar(1.0, -(la + lb) * dt / 2.0)
                * sinc((la - lb) * dt / 2.0)
        }
    })
}

/// Reverse-mode pullback of `U = exp(-i H dt)` through the trace pairing.
///
/// Given `X` such that the scalar of interest changes by `Tr(X dU)`, returns
/// `G` with `Tr(X dU) = Tr(G dH)` for every Hermitian perturbation `dH`
/// (Daleckii-Krein formula in the eigenbasis of `H`).
pub fn expm_pullback(eig: &HermitianEigen, dt: f64, x: &CMat) -> CMat {
    let n = eig.values.len();
    let v = &eig.vectors;
    let vh = v.adjoint();
    let y = vh.matmul(x).matmul(v);
    let f = exp_divided_differences(&eig.values, dt);
    // dU = V (F o (V^dag dH V)) V^dag, so Tr(X dU) = sum_ab Y_ba F_ab Z_ab
    // with Z = V^dag dH V; collecting Gamma_ab = Y_ba F_ab gives
    // Tr(Gamma^T V^dag dH V) = Tr(V Gamma^T V^dag dH).
    let gamma_t = CMat::from_fn(n, n, |a, b| y[(a, b)] * f[(b, a)]);
    v.matmul(&gamma_t).matmul(&vh)
}

pub fn pauli_x() -> CMat {
    CMat::from_rows(&[&[ZERO, ONE], &[ONE, ZERO]])
}

pub fn pauli_y() -> CMat {
    CMat::from_rows(&[&[ZERO, -I], &[I, ZERO]])
}

pub fn pauli_z() -> CMat {
    CMat::from_rows(&[&[ONE, ZERO], &[ZERO, -ONE]])
}

/// `sigma_+ = |1><0|`.
pub fn sigma_plus() -> CMat {
    CMat::from_rows(&[&[ZERO, ZERO], &[ONE, ZERO]])
}

/// `sigma_- = |0><1|`.
pub fn sigma_minus() -> CMat {
    CMat::from_rows(&[&[ZERO, ONE], &[ZERO, ZERO]])
}

/// Embed a single-qubit operator on `site` of an `n`-qubit register (site 0 leftmost).
pub fn embed(op: &CMat, site: usize, n: usize) -> CMat {
    let mut out = CMat::identity(1);
    for q in 0..n {
        if q == site {
            out = out.kron(op);
        } else {
            out = out.kron(&CMat::identity(2));
        }
    }
    out
}

/// Fixed-size 2x2 complex matrix for the per-atom hot path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mat2(pub [[Complex64; 2]; 2]);

impl Mat2 {
    pub const IDENTITY: Mat2 = Mat2([[ONE, ZERO], [ZERO, ONE]]);

    pub fn from_cmat(m: &CMat) -> Self {
        Mat2([[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]])
    }

    pub fn to_cmat(&self) -> CMat {
        CMat::from_rows(&[&self.0[0], &self.0[1]])
    }

    #[inline]
    pub fn mul(&self, o: &Mat2) -> Mat2 {
        let (a, b) = (&self.0, &o.0);
        Mat2([
            [
                a[0][0] * b[0][0] + a[0][1] * b[1][0],
                a[0][0] * b[0][1] + a[0][1] * b[1][1],
            ],
            [
                a[1][0] * b[0][0] + a[1][1] * b[1][0],
                a[1][0] * b[0][1] + a[1][1] * b[1][1],
            ],
        ])
    }

    #[inline]
    pub fn adjoint(&self) -> Mat2 {
        let a = &self.0;
        Mat2([
            [a[0][0].conj(), a[1][0].conj()],
            [a[0][1].conj(), a[1][1].conj()],
        ])
    }

    #[inline]
    pub fn trace(&self) -> Complex64 {
        self.0[0][0] + self.0[1][1]
    }

    /// `Tr(self * o)`.
    #[inline]
    pub fn trace_of_product(&self, o: &Mat2) -> Complex64 {
        let (a, b) = (&self.0, &o.0);
        a[0][0] * b[0][0] + a[0][1] * b[1][0] + a[1][0] * b[0][1] + a[1][1] * b[1][1]
    }

    /// `exp(-i dt [[0, g*], [g, 0]]) = cos(|g| dt) I - i sin(|g| dt) n.sigma`.
    #[inline]
    pub fn qubit_propagator(g: Complex64, dt: f64) -> Mat2 {
        let r = g.norm();
        if r == 0.0 {
            return Mat2::IDENTITY;
        }
        let (s, c) = (r * dt).sin_cos();
        let k = Complex64::new(0.0, -s / r);
        Mat2([
            [Complex64::new(c, 0.0), k * g.conj()],
            [k * g, Complex64::new(c, 0.0)],
        ])
    }

    /// Closed-form [`expm_pullback`] for the single-qubit drive.
    pub fn qubit_pullback(g: Complex64, dt: f64, x: &Mat2) -> Mat2 {
        let r = g.norm();
        let ph = if r > 0.0 { g / r } else { ONE };
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let v = Mat2([
            [Complex64::new(s, 0.0), Complex64::new(s, 0.0)],
            [ph * s, -ph * s],
        ]);
        let vh = v.adjoint();
        let y = vh.mul(x).mul(&v);
        let neg_i_dt = Complex64::new(0.0, -dt);
        let f_diag = [
            neg_i_dt * Complex64::from_polar(1.0, -r * dt),
            neg_i_dt * Complex64::from_polar(1.0, r * dt),
        ];
        let f_off = neg_i_dt * sinc(r * dt);
        let gamma_t = Mat2([
            [y.0[0][0] * f_diag[0], y.0[0][1] * f_off],
            [y.0[1][0] * f_off, y.0[1][1] * f_diag[1]],
        ]);
        v.mul(&gamma_t).mul(&vh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hermitian(n: usize, rng: &mut impl Rng) -> CMat {
        let a = CMat::from_fn(n, n, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        a.add(&a.adjoint()).scale(Complex64::new(0.5, 0.0))
    }

    /// Taylor series reference for exp(-i H dt).
    fn expm_taylor(h: &CMat, dt: f64) -> CMat {
        let n = h.rows();
        let a = h.scale(Complex64::new(0.0, -dt));
        let mut term = CMat::identity(n);
        let mut sum = CMat::identity(n);
        for k in 1..60 {
            term = term.matmul(&a).scale(Complex64::new(1.0 / k as f64, 0.0));
            sum = sum.add(&term);
        }
        sum
    }

    #[test]
    fn general_eigen_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2, 4, 8] {
            let h = random_hermitian(n, &mut rng);
            let eig = HermitianEigen::new(&h);
            assert!(eig.reconstruct().sub(&h).frobenius_norm() < 1e-12);
            assert!(eig.vectors.unitarity_defect() < 1e-12);
        }
    }

    #[test]
    fn expm_matches_taylor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_hermitian(4, &mut rng);
        let u = HermitianEigen::new(&h).expm_neg_i(0.7);
        assert!(u.sub(&expm_taylor(&h, 0.7)).frobenius_norm() < 1e-12);
    }

    #[test]
    fn qubit_drive_decomposition() {
        for g in [
            Complex64::new(0.0, 0.0),
            Complex64::new(1.3, 0.0),
            Complex64::new(-0.2, 0.9),
        ] {
            let h = CMat::from_rows(&[&[ZERO, g.conj()], &[g, ZERO]]);
            let eig = HermitianEigen::qubit_drive(g);
            assert!(eig.reconstruct().sub(&h).frobenius_norm() < 1e-14);
        }
    }

    #[test]
    fn kron_sum_matches_dense_sum() {
        let gs = [
            Complex64::new(0.4, -0.3),
            Complex64::new(0.0, 0.0),
            Complex64::new(1.0, 0.2),
        ];
        let parts: Vec<_> = gs.iter().map(|g| HermitianEigen::qubit_drive(*g)).collect();
        let eig = HermitianEigen::kron_sum(&parts);
        let mut h = CMat::zeros(8, 8);
        for (j, g) in gs.iter().enumerate() {
            let local = CMat::from_rows(&[&[ZERO, g.conj()], &[*g, ZERO]]);
            h = h.add(&embed(&local, j, 3));
        }
        assert!(eig.reconstruct().sub(&h).frobenius_norm() < 1e-13);
    }

    #[test]
    fn pullback_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 4;
        let dt = 0.9;
        let h = random_hermitian(n, &mut rng);
        let x = CMat::from_fn(n, n, |_, _| {
            Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        });
        let dh = random_hermitian(n, &mut rng);
        let g = expm_pullback(&HermitianEigen::new(&h), dt, &x);
        let analytic = g.trace_of_product(&dh);
        let eps = 1e-6;
        let up = HermitianEigen::new(&h.add(&dh.scale(Complex64::new(eps, 0.0)))).expm_neg_i(dt);
        let dn = HermitianEigen::new(&h.sub(&dh.scale(Complex64::new(eps, 0.0)))).expm_neg_i(dt);
        let fd = x.trace_of_product(&up.sub(&dn)) / (2.0 * eps);
        assert!((analytic - fd).norm() < 1e-7, "{analytic} vs {fd}");
    }

    #[test]
    fn pullback_on_degenerate_spectrum() {
        // H = 0 is fully degenerate: dU = -i dt dH exactly.
        let h = CMat::zeros(2, 2);
        let eig = HermitianEigen::qubit_drive(ZERO);
        let x = pauli_x();
        let g = expm_pullback(&eig, 0.5, &x);
        let expected = x.scale(Complex64::new(0.0, -0.5));
        assert!(g.sub(&expected).frobenius_norm() < 1e-15);
        assert_eq!(h.trace(), ZERO);
    }

    #[test]
    fn sinc_is_continuous() {
        assert_eq!(sinc(0.0), 1.0);
        assert!((sinc(1e-4 * 0.999) - (1e-4f64 * 0.999).sin() / (1e-4 * 0.999)).abs() < 1e-16);
        assert!((sinc(2.0) - 2f64.sin() / 2.0).abs() < 1e-16);
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = CMat::diag(&[Complex64::new(0.5, 0.0), Complex64::new(0.0, -2.0)]);
        assert!((m.spectral_norm() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mat2_matches_general_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for k in 0..20 {
            let g = if k == 0 {
                ZERO
            } else {
                Complex64::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0))
            };
            let dt = 0.37;
            let eig = HermitianEigen::qubit_drive(g);
            let u = Mat2::qubit_propagator(g, dt).to_cmat();
            assert!(u.sub(&eig.expm_neg_i(dt)).frobenius_norm() < 1e-14);
            let x = CMat::from_fn(2, 2, |_, _| {
                Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
            });
            let a = Mat2::qubit_pullback(g, dt, &Mat2::from_cmat(&x)).to_cmat();
            let b = expm_pullback(&eig, dt, &x);
            assert!(a.sub(&b).frobenius_norm() < 1e-14);
            let p = Mat2::from_cmat(&x).mul(&Mat2::from_cmat(&u));
            assert!(p.to_cmat().sub(&x.matmul(&u)).frobenius_norm() < 1e-14);
            let t = Mat2::from_cmat(&x).trace_of_product(&Mat2::from_cmat(&u));
            assert!((t - x.trace_of_product(&u)).norm() < 1e-14);
        }
    }
}
