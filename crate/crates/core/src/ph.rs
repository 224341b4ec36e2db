//! Port-Hamiltonian models of fully-actuated mechanical systems.
//!
//! State `x = (q, p)`, Hamiltonian `H = ½pᵀM⁻¹(q)p + U(q)`, and
//!
//! ```text
//! ẋ = [J − R] ∂H/∂x + g u,   y = gᵀ ∂H/∂x,
//! J = [0 I; −I 0],  R = [0 0; 0 D],  g = [0; B].
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{variables, Jet2, Real};
use crate::numerics::{self, lu_solve, spd_solve, sym_eigen, Mat, NumericsError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PhError {
    #[error("model invariant violated: {0}")]
    ModelInvariant(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("unknown system {0:?}")]
    UnknownSystem(String),
    #[error("system {system}: {message}")]
    BadParameter { system: String, message: String },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Phase-space point `(q, p)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub q: Vec<f64>,
    pub p: Vec<f64>,
}

impl State {
    pub fn new(q: Vec<f64>, p: Vec<f64>) -> Self {
        assert_eq!(q.len(), p.len(), "q and p must have equal length");
        Self { q, p }
    }

    /// Splits `[q…, p…]`; panics on odd length.
    pub fn from_flat(x: &[f64]) -> Self {
        assert!(x.len() % 2 == 0, "state vector must have even length");
        let n = x.len() / 2;
        Self {
            q: x[..n].to_vec(),
            p: x[n..].to_vec(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.q.clone();
        v.extend_from_slice(&self.p);
        v
    }

    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(&self.p).all(|v| v.is_finite())
    }

    pub fn distance(&self, other: &State) -> f64 {
        let a = self.to_flat();
        let b = other.to_flat();
        a.iter()
            .zip(&b)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Built-in mechanical models.
#[derive(Debug, Clone, PartialEq)]
pub enum SystemKind {
    SimplePendulum {
        mass: f64,
        length: f64,
        gravity: f64,
    },
    DoublePendulum {
        m1: f64,
        m2: f64,
        l1: f64,
        l2: f64,
        gravity: f64,
    },
}

/// Configuration-file form of a system: a built-in name plus parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

/// Open-loop mechanical system in port-Hamiltonian form.
#[derive(Debug, Clone, PartialEq)]
pub struct MechanicalPH {
    kind: SystemKind,
    dissipation: Mat,
    input_map: Mat,
}

/// Value, gradient and Hessian of an energy function at a state.
#[derive(Debug, Clone)]
pub struct EnergyJet {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Mat,
}

impl EnergyJet {
    fn from_jet(jet: Jet2<f64>) -> Self {
        Self {
            value: jet.value,
            hess: jet.hessian_mat(),
            grad: jet.grad,
        }
    }
}

/// `J`, `R` and `g` evaluated at a state.
#[derive(Debug, Clone)]
pub struct Structure {
    pub j: Mat,
    pub r: Mat,
    pub g: Mat,
}

impl MechanicalPH {
    fn from_kind(kind: SystemKind) -> Self {
        let n = match kind {
            SystemKind::SimplePendulum { .. } => 1,
            SystemKind::DoublePendulum { .. } => 2,
        };
        Self {
            kind,
            dissipation: Mat::zeros(n, n),
            input_map: Mat::identity(n),
        }
    }

    /// `H = p²/(2ml²) + mgl(1 − cos q)`, actuated at the joint.
    pub fn simple_pendulum(mass: f64, length: f64, gravity: f64) -> Self {
        Self::from_kind(SystemKind::SimplePendulum {
            mass,
            length,
            gravity,
        })
    }

    /// Two-link pendulum with absolute joint angles, actuated at both joints.
    pub fn double_pendulum(m1: f64, m2: f64, l1: f64, l2: f64, gravity: f64) -> Self {
        Self::from_kind(SystemKind::DoublePendulum {
            m1,
            m2,
            l1,
            l2,
            gravity,
        })
    }

    pub fn from_spec(spec: &SystemSpec) -> Result<Self, PhError> {
        let get = |key: &str, default: f64| -> Result<f64, PhError> {
            let v = spec.params.get(key).copied().unwrap_or(default);
            if !v.is_finite() {
                return Err(PhError::BadParameter {
                    system: spec.name.clone(),
                    message: format!("{key} must be finite"),
                });
            }
            Ok(v)
        };
        let positive = |key: &str, default: f64| -> Result<f64, PhError> {
            let v = get(key, default)?;
            if v <= 0.0 {
                return Err(PhError::BadParameter {
                    system: spec.name.clone(),
                    message: format!("{key} must be positive, got {v}"),
                });
            }
            Ok(v)
        };
        let (sys, allowed): (Self, &[&str]) = match spec.name.as_str() {
            "simple_pendulum" => (
                Self::simple_pendulum(
                    positive("mass", 1.0)?,
                    positive("length", 1.0)?,
                    get("gravity", 9.81)?,
                ),
                &["mass", "length", "gravity", "damping"],
            ),
            "double_pendulum" => (
                Self::double_pendulum(
                    positive("m1", 1.0)?,
                    positive("m2", 1.0)?,
                    positive("l1", 1.0)?,
                    positive("l2", 1.0)?,
                    get("gravity", 9.81)?,
                ),
                &["m1", "m2", "l1", "l2", "gravity", "damping"],
            ),
            other => return Err(PhError::UnknownSystem(other.to_string())),
        };
        if let Some(key) = spec.params.keys().find(|k| !allowed.contains(&k.as_str())) {
            return Err(PhError::BadParameter {
                system: spec.name.clone(),
                message: format!("unknown parameter {key:?}"),
            });
        }
        let damping = get("damping", 0.0)?;
        if damping != 0.0 {
            let n = sys.dof();
            return sys.with_dissipation(Mat::identity(n).scale(damping));
        }
        Ok(sys)
    }

    pub fn spec(&self) -> SystemSpec {
        let mut params = BTreeMap::new();
        let name = match self.kind {
            SystemKind::SimplePendulum {
                mass,
                length,
                gravity,
            } => {
                params.insert("mass".into(), mass);
                params.insert("length".into(), length);
                params.insert("gravity".into(), gravity);
                "simple_pendulum"
            }
            SystemKind::DoublePendulum {
                m1,
                m2,
                l1,
                l2,
                gravity,
            } => {
                params.insert("m1".into(), m1);
                params.insert("m2".into(), m2);
                params.insert("l1".into(), l1);
                params.insert("l2".into(), l2);
                params.insert("gravity".into(), gravity);
                "double_pendulum"
            }
        };
        let d = self.dissipation.get(0, 0);
        if d != 0.0 {
            params.insert("damping".into(), d);
        }
        SystemSpec {
            name: name.into(),
            params,
        }
    }

    /// Replaces `D`; it must be symmetric positive semi-definite.
    pub fn with_dissipation(mut self, d: Mat) -> Result<Self, PhError> {
        let n = self.dof();
        if d.rows() != n || d.cols() != n {
            return Err(PhError::Dimension {
                expected: n,
                got: d.rows(),
            });
        }
        let eig = sym_eigen(&d)?;
        if eig.values[0] < -1e-12 {
            return Err(PhError::ModelInvariant(format!(
                "dissipation has negative eigenvalue {}",
                eig.values[0]
            )));
        }
        self.dissipation = d;
        Ok(self)
    }

    /// Replaces `B`; it must be square and invertible (full actuation).
    pub fn with_input_map(mut self, b: Mat) -> Result<Self, PhError> {
        let n = self.dof();
        if b.rows() != n || b.cols() != n {
            return Err(PhError::Unsupported(format!(
                "input map must be {n}x{n} (fully actuated), got {}x{}",
                b.rows(),
                b.cols()
            )));
        }
        if b.det().abs() <= 1e-12 {
            return Err(PhError::ModelInvariant("input map is singular".into()));
        }
        self.input_map = b;
        Ok(self)
    }

    pub fn kind(&self) -> &SystemKind {
        &self.kind
    }

    /// Degrees of freedom `n`.
    pub fn dof(&self) -> usize {
        match self.kind {
            SystemKind::SimplePendulum { .. } => 1,
            SystemKind::DoublePendulum { .. } => 2,
        }
    }

    pub fn dissipation(&self) -> &Mat {
        &self.dissipation
    }

    pub fn input_map(&self) -> &Mat {
        &self.input_map
    }

    /// `M(q)` as rows, generic over the scalar type.
    pub fn inertia<T: Real>(&self, q: &[T]) -> Vec<Vec<T>> {
        match self.kind {
            SystemKind::SimplePendulum { mass, length, .. } => {
                vec![vec![q[0].lift(mass * length * length)]]
            }
            SystemKind::DoublePendulum { m1, m2, l1, l2, .. } => {
                let coupling = (q[0].clone() - q[1].clone()).cos() * (m2 * l1 * l2);
                vec![
                    vec![q[0].lift((m1 + m2) * l1 * l1), coupling.clone()],
                    vec![coupling, q[0].lift(m2 * l2 * l2)],
                ]
            }
        }
    }

    /// `U(q)`, zero at the hanging rest position.
    pub fn potential<T: Real>(&self, q: &[T]) -> T {
        match self.kind {
            SystemKind::SimplePendulum {
                mass,
                length,
                gravity,
            } => (q[0].lift(1.0) - q[0].cos()) * (mass * gravity * length),
            SystemKind::DoublePendulum {
                m1,
                m2,
                l1,
                l2,
                gravity,
            } => {
                (q[0].lift(1.0) - q[0].cos()) * ((m1 + m2) * gravity * l1)
                    + (q[1].lift(1.0) - q[1].cos()) * (m2 * gravity * l2)
            }
        }
    }

    /// `H(x)` for a flat state `[q…, p…]`, generic over the scalar type.
    pub fn hamiltonian_generic<T: Real>(&self, x: &[T]) -> Result<T, PhError> {
        let n = self.dof();
        if x.len() != 2 * n {
            return Err(PhError::Dimension {
                expected: 2 * n,
                got: x.len(),
            });
        }
        let (q, p) = x.split_at(n);
        let kinetic = inverse_quadratic_form(&self.inertia(q), p)? * 0.5;
        Ok(kinetic + self.potential(q))
    }

    fn check_state(&self, x: &State) -> Result<(), PhError> {
        let n = self.dof();
        if x.q.len() != n || x.p.len() != n {
            return Err(PhError::Dimension {
                expected: n,
                got: x.q.len().max(x.p.len()),
            });
        }
        Ok(())
    }

    pub fn hamiltonian(&self, x: &State) -> Result<f64, PhError> {
        self.check_state(x)?;
        self.hamiltonian_generic(&x.to_flat())
    }

    /// `H`, `∂H/∂x` and `∂²H/∂x²` at `x`.
    pub fn energy_jet(&self, x: &State) -> Result<EnergyJet, PhError> {
        self.check_state(x)?;
        let vars = variables(&x.to_flat());
        let mut jet = self.hamiltonian_generic(&vars)?;
        if jet.grad.is_empty() {
            let (g, h) = jet.expanded(vars.len());
            jet.grad = g;
            jet.hess = h;
        }
        if !jet.value.is_finite() {
            return Err(PhError::ModelInvariant("non-finite energy".into()));
        }
        Ok(EnergyJet::from_jet(jet))
    }

    pub fn grad_hamiltonian(&self, x: &State) -> Result<Vec<f64>, PhError> {
        Ok(self.energy_jet(x)?.grad)
    }

    /// `∂U/∂q`.
    pub fn potential_gradient(&self, q: &[f64]) -> Vec<f64> {
        let vars = variables(q);
        self.potential(&vars).grad
    }

    pub fn inertia_matrix(&self, q: &[f64]) -> Mat {
        Mat::from_rows(&self.inertia(q)).expect("finite inertia")
    }

    /// Generalized velocity `M⁻¹(q) p`.
    pub fn velocity(&self, x: &State) -> Result<Vec<f64>, PhError> {
        self.check_state(x)?;
        spd_solve(&self.inertia_matrix(&x.q), &x.p).map_err(|e| {
            PhError::ModelInvariant(format!("inertia matrix not positive definite: {e}"))
        })
    }

    pub fn structure_matrices(&self, _x: &State) -> Structure {
        let n = self.dof();
        let zero = Mat::zeros(n, n);
        let eye = Mat::identity(n);
        Structure {
            j: Mat::block(&zero, &eye, &eye.scale(-1.0), &zero),
            r: Mat::block(&zero, &zero, &zero, &self.dissipation),
            g: Mat::block(&zero, &zero, &zero, &self.input_map).sub_block(0, n, 2 * n, n),
        }
    }

    /// `(J − R) ∂H/∂x` without input.
    pub fn drift(&self, x: &State) -> Result<Vec<f64>, PhError> {
        let grad = self.grad_hamiltonian(x)?;
        let s = self.structure_matrices(x);
        Ok(s.j.sub(&s.r).matvec(&grad))
    }

    pub fn open_loop_dynamics(&self, x: &State, u: &[f64]) -> Result<Vec<f64>, PhError> {
        let n = self.dof();
        if u.len() != n {
            return Err(PhError::Dimension {
                expected: n,
                got: u.len(),
            });
        }
        let mut xdot = self.drift(x)?;
        let bu = self.input_map.matvec(u);
        for i in 0..n {
            xdot[n + i] += bu[i];
        }
        Ok(xdot)
    }

    /// `y = gᵀ ∂H/∂x = Bᵀ M⁻¹ p`.
    pub fn output_map(&self, x: &State) -> Result<Vec<f64>, PhError> {
        let v = self.velocity(x)?;
        Ok(self.input_map.transpose().matvec(&v))
    }

    /// `∂Hᵀ/∂x ẋ − (−∂Hᵀ/∂p D ∂H/∂p + yᵀu)`; zero up to rounding.
    pub fn power_balance_defect(&self, x: &State, u: &[f64]) -> Result<f64, PhError> {
        let n = self.dof();
        let grad = self.grad_hamiltonian(x)?;
        let xdot = self.open_loop_dynamics(x, u)?;
        let hdot = numerics::dot(&grad, &xdot);
        let dh_dp = &grad[n..];
        let dissipated = numerics::dot(dh_dp, &self.dissipation.matvec(dh_dp));
        let supplied = numerics::dot(&self.output_map(x)?, u);
        Ok(hdot - (-dissipated + supplied))
    }

    /// `B⁻¹ v`.
    pub fn solve_input(&self, v: &[f64]) -> Result<Vec<f64>, PhError> {
        Ok(lu_solve(&self.input_map, v)?)
    }
}

/// `pᵀ M⁻¹ p` by a generic Cholesky solve.
fn inverse_quadratic_form<T: Real>(m: &[Vec<T>], p: &[T]) -> Result<T, PhError> {
    let n = p.len();
    let mut l: Vec<Vec<T>> = vec![Vec::with_capacity(n); n];
    for j in 0..n {
        let mut diag = m[j][j].clone();
        for k in 0..j {
            diag = diag - l[j][k].clone() * l[j][k].clone();
        }
        if diag.value() <= 0.0 || !diag.value().is_finite() {
            return Err(PhError::ModelInvariant(format!(
                "inertia matrix not positive definite at pivot {j}"
            )));
        }
        let ljj = diag.sqrt();
        for i in 0..n {
            if i < j {
                continue;
            }
            if i == j {
                l[j].push(ljj.clone());
                continue;
            }
            let mut v = m[i][j].clone();
            for k in 0..j {
                v = v - l[i][k].clone() * l[j][k].clone();
            }
            l[i].push(v / ljj.clone());
        }
    }
    // y = L⁻¹ p, pᵀM⁻¹p = ‖y‖².
    let mut y: Vec<T> = Vec::with_capacity(n);
    for i in 0..n {
        let mut v = p[i].clone();
        for k in 0..i {
            v = v - l[i][k].clone() * y[k].clone();
        }
        y.push(v / l[i][i].clone());
    }
    let mut acc = y[0].clone() * y[0].clone();
    for yi in &y[1..] {
        acc = acc + yi.clone() * yi.clone();
    }
    Ok(acc)
}

/// Canonical left annihilator `[I_n, 0_n]` of `g = [0; B]`.
pub fn left_annihilator(g: &Mat) -> Result<Mat, PhError> {
    let rows = g.rows();
    let n = g.cols();
    if rows != 2 * n {
        return Err(PhError::Unsupported(format!(
            "input matrix must be 2n x n, got {rows}x{n}"
        )));
    }
    if g.sub_block(0, 0, n, n).max_abs() != 0.0 {
        return Err(PhError::Unsupported(
            "input matrix must have a zero top block".into(),
        ));
    }
    if g.sub_block(n, 0, n, n).det().abs() <= 1e-12 {
        return Err(PhError::Unsupported("input block is singular".into()));
    }
    let mut ann = Mat::zeros(n, 2 * n);
    for i in 0..n {
        ann.set(i, i, 1.0);
    }
    Ok(ann)
}
