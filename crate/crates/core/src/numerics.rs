//! Small dense linear algebra for the state dimensions used here (2n ≤ 8).
//!
//! Everything is a pure function over value inputs. Eigenvalues of general
//! matrices come from the characteristic polynomial with closed-form roots
//! (polished and clustered) so that losses built on top are reproducible.

use std::fmt;
use std::ops::Index;

use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix entries must be finite")]
    NonFinite,
    #[error("shape mismatch: expected {expected} entries, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("unsupported dimension {0}")]
    UnsupportedDimension(usize),
    #[error("matrix is not positive definite: pivot {pivot} is {value:e}")]
    NotPositiveDefinite { pivot: usize, value: f64 },
    #[error("matrix is singular at pivot {pivot}")]
    Singular { pivot: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Relative tolerance under which a matrix counts as symmetric.
pub const SYMMETRY_TOL: f64 = 1e-10;

/// Dense row-major matrix with finite entries.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.to_rows()).finish()
    }
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumericsError> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(NumericsError::Shape {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(NumericsError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(NumericsError::DimensionMismatch(
                "rows have differing lengths".into(),
            ));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.cols).map(<[f64]>::to_vec).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.get(i, j);
            }
        }
        t
    }

    /// Panics on inner-dimension mismatch.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += a * other.get(k, j);
                }
            }
        }
        out
    }

    /// Panics on dimension mismatch.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec dimension");
        self.data
            .chunks(self.cols)
            .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn add(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Mat { data, ..*self }
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Mat { data, ..*self }
    }

    pub fn scale(&self, s: f64) -> Mat {
        let data = self.data.iter().map(|a| a * s).collect();
        Mat { data, ..*self }
    }

    /// Assembles `[[tl, tr], [bl, br]]`.
    pub fn block(tl: &Mat, tr: &Mat, bl: &Mat, br: &Mat) -> Mat {
        assert_eq!(tl.rows, tr.rows);
        assert_eq!(bl.rows, br.rows);
        assert_eq!(tl.cols, bl.cols);
        assert_eq!(tr.cols, br.cols);
        let rows = tl.rows + bl.rows;
        let cols = tl.cols + tr.cols;
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = match (i < tl.rows, j < tl.cols) {
                    (true, true) => tl.get(i, j),
                    (true, false) => tr.get(i, j - tl.cols),
                    (false, true) => bl.get(i - tl.rows, j),
                    (false, false) => br.get(i - tl.rows, j - tl.cols),
                };
                m.set(i, j, v);
            }
        }
        m
    }

    pub fn sub_block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Mat {
        let mut m = Mat::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.set(i, j, self.get(r0 + i, c0 + j));
            }
        }
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest |a_ij − a_ji|; infinite for non-square input.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Determinant by partial-pivot elimination.
    pub fn det(&self) -> f64 {
        assert!(self.is_square());
        let n = self.rows;
        let mut a = self.data.clone();
        let mut det = 1.0;
        for k in 0..n {
            let piv = (k..n)
                .max_by(|&x, &y| a[x * n + k].abs().total_cmp(&a[y * n + k].abs()))
                .unwrap();
            if a[piv * n + k] == 0.0 {
                return 0.0;
            }
            if piv != k {
                for j in 0..n {
                    a.swap(k * n + j, piv * n + j);
                }
                det = -det;
            }
            let d = a[k * n + k];
            det *= d;
            for i in (k + 1)..n {
                let f = a[i * n + k] / d;
                for j in k..n {
                    a[i * n + j] -= f * a[k * n + j];
                }
            }
        }
        det
    }

    fn check_finite(&self) -> Result<(), NumericsError> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(NumericsError::NonFinite)
        }
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigen-decomposition of a symmetric matrix.
#[derive(Debug, Clone)]
pub struct SymEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Column `i` is the unit eigenvector of `values[i]`.
    pub vectors: Mat,
}

/// Symmetric eigen-decomposition by cyclic Jacobi rotations (d ≤ 8).
pub fn sym_eigen(a: &Mat) -> Result<SymEigen, NumericsError> {
    a.check_finite()?;
    if !a.is_square() {
        return Err(NumericsError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let n = a.rows;
    if n > 8 {
        return Err(NumericsError::UnsupportedDimension(n));
    }
    let asym = a.asymmetry();
    if asym > SYMMETRY_TOL * a.max_abs().max(1.0) {
        return Err(NumericsError::NotSymmetric { asymmetry: asym });
    }
    let mut m = a.add(&a.transpose()).scale(0.5);
    let mut v = Mat::identity(n);
    let total: f64 = m.data.iter().map(|x| x * x).sum();

    for _sweep in 0..64 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j).powi(2))
            .sum();
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Mat::zeros(n, n);
    for (col, &src) in order.iter().enumerate() {
        // Sign convention: largest-magnitude component positive.
        let pivot = (0..n)
            .max_by(|&x, &y| {
                v.get(x, src)
                    .abs()
                    .total_cmp(&v.get(y, src).abs())
                    .then(y.cmp(&x))
            })
            .unwrap();
        let sign = if v.get(pivot, src) < 0.0 { -1.0 } else { 1.0 };
        for k in 0..n {
            vectors.set(k, col, sign * v.get(k, src));
        }
    }
    Ok(SymEigen { values, vectors })
}

/// Eigenvalues of a real matrix, sorted by real part then imaginary part.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub values: Vec<Complex64>,
}

impl ComplexSpectrum {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn real_parts(&self) -> Vec<f64> {
        self.values.iter().map(|z| z.re).collect()
    }

    pub fn imag_parts(&self) -> Vec<f64> {
        self.values.iter().map(|z| z.im).collect()
    }
}

/// Monic characteristic polynomial coefficients `[c_0, …, c_{d−1}]` of
/// `det(λI − A) = λ^d + c_{d−1}λ^{d−1} + … + c_0` (Faddeev–LeVerrier).
pub fn characteristic_polynomial(a: &Mat) -> Vec<f64> {
    let n = a.rows;
    let mut coeffs = vec![0.0; n + 1];
    coeffs[n] = 1.0;
    let mut m = Mat::zeros(n, n);
    for k in 1..=n {
        let mut next = a.matmul(&m);
        for i in 0..n {
            next.data[i * n + i] += coeffs[n - k + 1];
        }
        m = next;
        coeffs[n - k] = -a.matmul(&m).trace() / k as f64;
    }
    coeffs.truncate(n);
    coeffs
}

/// Roots closer than this (relative to the spectrum scale) are merged.
const CLUSTER_TOL: f64 = 1e-7;

/// Eigenvalues of a real square matrix of dimension 1 to 4.
pub fn general_eigenvalues(a: &Mat) -> Result<ComplexSpectrum, NumericsError> {
    a.check_finite()?;
    if !a.is_square() {
        return Err(NumericsError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let d = a.rows;
    if !(1..=4).contains(&d) {
        return Err(NumericsError::UnsupportedDimension(d));
    }
    let coeffs = characteristic_polynomial(a);
    let mut roots = match d {
        1 => vec![Complex64::new(-coeffs[0], 0.0)],
        2 => quadratic_roots(coeffs[1], coeffs[0]).to_vec(),
        3 => cubic_roots(coeffs[2], coeffs[1], coeffs[0]).to_vec(),
        _ => quartic_roots(coeffs[3], coeffs[2], coeffs[1], coeffs[0]).to_vec(),
    };
    for z in roots.iter_mut() {
        *z = polish_root(&coeffs, *z);
    }
    Ok(ComplexSpectrum {
        values: finalize_roots(roots),
    })
}

fn horner(coeffs: &[f64], z: Complex64) -> (Complex64, Complex64) {
    // Monic polynomial with implicit leading 1.
    let mut p = Complex64::new(1.0, 0.0);
    let mut dp = Complex64::new(0.0, 0.0);
    for c in coeffs.iter().rev() {
        dp = dp * z + p;
        p = p * z + c;
    }
    (p, dp)
}

fn polish_root(coeffs: &[f64], mut z: Complex64) -> Complex64 {
    for _ in 0..4 {
        let (p, dp) = horner(coeffs, z);
        if p.norm() == 0.0 || dp.norm() == 0.0 {
            break;
        }
        let candidate = z - p / dp;
        if !(candidate.re.is_finite() && candidate.im.is_finite()) {
            break;
        }
        if horner(coeffs, candidate).0.norm() < p.norm() {
            z = candidate;
        } else {
            break;
        }
    }
    z
}

/// Merges numerically coincident roots, enforces conjugate pairing and sorts.
fn finalize_roots(mut roots: Vec<Complex64>) -> Vec<Complex64> {
    let scale = roots.iter().fold(1.0_f64, |m, z| m.max(z.norm()));
    let tol = CLUSTER_TOL * scale;
    let n = roots.len();

    // Greedy single-linkage clusters, replaced by their mean.
    let mut label: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            if (roots[i] - roots[j]).norm() <= tol {
                let (from, to) = (label[j].max(label[i]), label[j].min(label[i]));
                for l in label.iter_mut() {
                    if *l == from {
                        *l = to;
                    }
                }
            }
        }
    }
    let snapshot = roots.clone();
    for i in 0..n {
        let members: Vec<Complex64> = (0..n)
            .filter(|&j| label[j] == label[i])
            .map(|j| snapshot[j])
            .collect();
        if members.len() > 1 {
            roots[i] = members.iter().sum::<Complex64>() / members.len() as f64;
        }
    }

    for z in roots.iter_mut() {
        if z.im.abs() <= tol {
            z.im = 0.0;
        }
    }
    let mut upper: Vec<Complex64> = roots.iter().copied().filter(|z| z.im > 0.0).collect();
    let lower_count = roots.iter().filter(|z| z.im < 0.0).count();
    if upper.len() == lower_count {
        upper.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        let mut out: Vec<Complex64> = roots.iter().copied().filter(|z| z.im == 0.0).collect();
        for z in &upper {
            out.push(*z);
            out.push(z.conj());
        }
        roots = out;
    }
    roots.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
    roots
}

/// Roots of `λ² + bλ + c`.
fn quadratic_roots(b: f64, c: f64) -> [Complex64; 2] {
    let disc = b * b - 4.0 * c;
    if disc >= 0.0 {
        let s = disc.sqrt();
        let q = -0.5 * (b + if b >= 0.0 { s } else { -s });
        if q == 0.0 {
            return [Complex64::new(0.0, 0.0); 2];
        }
        [Complex64::new(q, 0.0), Complex64::new(c / q, 0.0)]
    } else {
        let im = 0.5 * (-disc).sqrt();
        [Complex64::new(-0.5 * b, im), Complex64::new(-0.5 * b, -im)]
    }
}

/// Roots of `λ³ + aλ² + bλ + c` (Cardano, complex arithmetic).
fn cubic_roots(a: f64, b: f64, c: f64) -> [Complex64; 3] {
    let p = b - a * a / 3.0;
    let q = 2.0 * a * a * a / 27.0 - a * b / 3.0 + c;
    let shift = Complex64::new(-a / 3.0, 0.0);
    if p.abs() < 1e-300 && q.abs() < 1e-300 {
        return [shift; 3];
    }
    let disc = Complex64::new(q * q / 4.0 + p * p * p / 27.0, 0.0).sqrt();
    let mut u3 = Complex64::new(-q / 2.0, 0.0) + disc;
    if u3.norm() < 1e-14 * (q.abs() + p.abs().powf(1.5)) {
        u3 = Complex64::new(-q / 2.0, 0.0) - disc;
    }
    let u = u3.cbrt();
    let omega = Complex64::new(-0.5, 3.0_f64.sqrt() / 2.0);
    let mut out = [shift; 3];
    let mut uk = u;
    for slot in out.iter_mut() {
        let t = if uk.norm() == 0.0 {
            Complex64::new(0.0, 0.0)
        } else {
            uk - Complex64::new(p / 3.0, 0.0) / uk
        };
        *slot = t + shift;
        uk *= omega;
    }
    out
}

/// Roots of `λ⁴ + aλ³ + bλ² + cλ + d` (Ferrari).
fn quartic_roots(a: f64, b: f64, c: f64, d: f64) -> [Complex64; 4] {
    let p = b - 3.0 * a * a / 8.0;
    let q = c - a * b / 2.0 + a * a * a / 8.0;
    let r = d - a * c / 4.0 + a * a * b / 16.0 - 3.0 * a.powi(4) / 256.0;
    let shift = Complex64::new(-a / 4.0, 0.0);
    let scale = 1.0 + p.abs() + q.abs().sqrt() + r.abs().sqrt();

    if q.abs() <= 1e-14 * scale * scale {
        // Biquadratic: y⁴ + p y² + r = 0.
        let [z1, z2] = quadratic_roots(p, r);
        let (s1, s2) = (z1.sqrt(), z2.sqrt());
        return [s1 + shift, -s1 + shift, s2 + shift, -s2 + shift];
    }

    // Resolvent: 8m³ + 8p m² + (2p² − 8r) m − q² = 0.
    let resolvent = cubic_roots(p, (2.0 * p * p - 8.0 * r) / 8.0, -q * q / 8.0);
    let m = resolvent
        .iter()
        .copied()
        .max_by(|x, y| x.norm().total_cmp(&y.norm()))
        .unwrap();
    let two_m_sqrt = (m * 2.0).sqrt();
    let mut out = [shift; 4];
    let mut k = 0;
    for s1 in [1.0, -1.0] {
        let inner = -(Complex64::new(2.0 * p, 0.0) + m * 2.0 + s1 * 2.0_f64.sqrt() * q / m.sqrt());
        let root = inner.sqrt();
        for s2 in [1.0, -1.0] {
            out[k] = (s1 * two_m_sqrt + s2 * root) * 0.5 + shift;
            k += 1;
        }
    }
    out
}

/// Eigenvalues closer than this are treated as colliding.
pub const COLLISION_GAP: f64 = 1e-8;

/// Sensitivity `∂λ_i/∂A_jk` (row-major over `jk`) of each eigenvalue in
/// `spectrum`, or `None` when λ_i is within [`COLLISION_GAP`] of another
/// eigenvalue.
pub fn eigenvalue_sensitivities(
    a: &Mat,
    spectrum: &ComplexSpectrum,
) -> Vec<Option<Vec<Complex64>>> {
    let d = a.rows;
    spectrum
        .values
        .iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let mut dp = Complex64::new(1.0, 0.0);
            for (j, &other) in spectrum.values.iter().enumerate() {
                if j == i {
                    continue;
                }
                if (lambda - other).norm() < COLLISION_GAP {
                    return None;
                }
                dp *= lambda - other;
            }
            let shifted: Vec<Complex64> = (0..d * d)
                .map(|idx| {
                    let (r, c) = (idx / d, idx % d);
                    let diag = if r == c {
                        lambda
                    } else {
                        Complex64::new(0.0, 0.0)
                    };
                    diag - a.get(r, c)
                })
                .collect();
            let adj = complex_adjugate(&shifted, d);
            // ∂λ/∂A_jk = adj(λI − A)_kj / p'(λ)
            Some(
                (0..d * d)
                    .map(|idx| {
                        let (j, k) = (idx / d, idx % d);
                        adj[k * d + j] / dp
                    })
                    .collect(),
            )
        })
        .collect()
}

fn complex_det(m: &[Complex64], n: usize) -> Complex64 {
    match n {
        0 => Complex64::new(1.0, 0.0),
        1 => m[0],
        2 => m[0] * m[3] - m[1] * m[2],
        _ => {
            let mut total = Complex64::new(0.0, 0.0);
            for col in 0..n {
                let minor = complex_minor(m, n, 0, col);
                let sign = if col % 2 == 0 { 1.0 } else { -1.0 };
                total += m[col] * complex_det(&minor, n - 1) * sign;
            }
            total
        }
    }
}

fn complex_minor(m: &[Complex64], n: usize, row: usize, col: usize) -> Vec<Complex64> {
    let mut out = Vec::with_capacity((n - 1) * (n - 1));
    for r in (0..n).filter(|&r| r != row) {
        for c in (0..n).filter(|&c| c != col) {
            out.push(m[r * n + c]);
        }
    }
    out
}

fn complex_adjugate(m: &[Complex64], n: usize) -> Vec<Complex64> {
    if n == 1 {
        return vec![Complex64::new(1.0, 0.0)];
    }
    let mut adj = vec![Complex64::new(0.0, 0.0); n * n];
    for r in 0..n {
        for c in 0..n {
            let sign = if (r + c) % 2 == 0 { 1.0 } else { -1.0 };
            adj[c * n + r] = complex_det(&complex_minor(m, n, r, c), n - 1) * sign;
        }
    }
    adj
}

/// Lower-triangular Cholesky factor of an SPD matrix.
pub fn cholesky(a: &Mat) -> Result<Mat, NumericsError> {
    a.check_finite()?;
    if !a.is_square() {
        return Err(NumericsError::NotSquare {
            rows: a.rows,
            cols: a.cols,
        });
    }
    let n = a.rows;
    let mut l = Mat::zeros(n, n);
    for j in 0..n {
        let mut diag = a.get(j, j);
        for k in 0..j {
            diag -= l.get(j, k).powi(2);
        }
        if diag <= 0.0 || !diag.is_finite() {
            return Err(NumericsError::NotPositiveDefinite {
                pivot: j,
                value: diag,
            });
        }
        let ljj = diag.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut v = a.get(i, j);
            for k in 0..j {
                v -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, v / ljj);
        }
    }
    Ok(l)
}

/// Solves `A x = b` for symmetric positive-definite `A`.
pub fn spd_solve(a: &Mat, b: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if a.rows != b.len() {
        return Err(NumericsError::DimensionMismatch(format!(
            "matrix is {}x{}, rhs has {} entries",
            a.rows,
            a.cols,
            b.len()
        )));
    }
    let l = cholesky(a)?;
    let n = b.len();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut v = b[i];
        for k in 0..i {
            v -= l.get(i, k) * y[k];
        }
        y[i] = v / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in (i + 1)..n {
            v -= l.get(k, i) * x[k];
        }
        x[i] = v / l.get(i, i);
    }
    Ok(x)
}

/// Solves `A x = b` for a general square `A` by partial-pivot elimination.
pub fn lu_solve(a: &Mat, b: &[f64]) -> Result<Vec<f64>, NumericsError> {
    if !a.is_square() || a.rows != b.len() {
        return Err(NumericsError::DimensionMismatch(format!(
            "matrix is {}x{}, rhs has {} entries",
            a.rows,
            a.cols,
            b.len()
        )));
    }
    let n = a.rows;
    let mut m = a.data.clone();
    let mut x = b.to_vec();
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for k in 0..n {
        let piv = (k..n)
            .max_by(|&i, &j| m[i * n + k].abs().total_cmp(&m[j * n + k].abs()))
            .unwrap();
        if m[piv * n + k].abs() <= 1e-14 * scale {
            return Err(NumericsError::Singular { pivot: k });
        }
        if piv != k {
            for j in 0..n {
                m.swap(k * n + j, piv * n + j);
            }
            x.swap(k, piv);
        }
        for i in (k + 1)..n {
            let f = m[i * n + k] / m[k * n + k];
            for j in k..n {
                m[i * n + j] -= f * m[k * n + j];
            }
            x[i] -= f * x[k];
        }
    }
    for i in (0..n).rev() {
        let mut v = x[i];
        for j in (i + 1)..n {
            v -= m[i * n + j] * x[j];
        }
        x[i] = v / m[i * n + i];
    }
    Ok(x)
}
