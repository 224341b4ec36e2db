//! Closed-loop evaluation: the energy-shaping control law, the analytic
//! PD-plus-gravity baseline, fixed-step RK4 integration and trajectory-level
//! verification of passivity and convergence.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::numerics::{dot, lu_solve, Mat, NumericsError};
use crate::ph::{MechanicalPH, PhError, State};
use crate::residuals::matching_defect;
use crate::surrogate::{assemble, desired_damping, DesiredStructure, SurrogateError, SurrogateNet};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation settings: {0}")]
    Invalid(String),
    #[error("state diverged at step {step} (t = {t}); last finite state {last:?}")]
    Divergence { step: usize, t: f64, last: State },
    #[error(transparent)]
    Model(#[from] PhError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// Desired closed-loop energy and damping at a state.
#[derive(Debug, Clone)]
pub struct Shaping {
    pub h_d: f64,
    pub grad_hd: Vec<f64>,
    pub r_d: Mat,
}

pub trait Controller {
    fn control(&self, x: &State) -> Result<Vec<f64>, SimError>;

    /// `None` for controllers without a desired closed loop.
    fn shaping(&self, x: &State) -> Result<Option<Shaping>, SimError>;
}

/// `u ≡ 0`.
pub struct ZeroInput {
    pub n: usize,
}

impl Controller for ZeroInput {
    fn control(&self, _x: &State) -> Result<Vec<f64>, SimError> {
        Ok(vec![0.0; self.n])
    }

    fn shaping(&self, _x: &State) -> Result<Option<Shaping>, SimError> {
        Ok(None)
    }
}

/// `β(x) = (gᵀg)⁻¹gᵀ(F_d ∂H_d/∂x − (J − R) ∂H/∂x)`.
pub fn control_law(
    sys: &MechanicalPH,
    net: &SurrogateNet,
    ds: &DesiredStructure,
    x: &State,
) -> Result<Vec<f64>, SimError> {
    let a = assemble(net, ds, sys, x)?;
    let target = a.f_d.matvec(&a.grad_hd);
    let drift = sys.drift(x)?;
    let diff: Vec<f64> = target.iter().zip(&drift).map(|(t, d)| t - d).collect();
    let g = sys.structure_matrices(x).g;
    let gt = g.transpose();
    let gtg = gt.matmul(&g);
    if gtg.det().abs() <= 1e-14 {
        return Err(PhError::ModelInvariant("gᵀg is singular".into()).into());
    }
    Ok(lu_solve(&gtg, &gt.matvec(&diff))?)
}

/// Learned energy-shaping controller.
pub struct NeuralController<'a> {
    pub sys: &'a MechanicalPH,
    pub net: &'a SurrogateNet,
    pub ds: &'a DesiredStructure,
}

impl Controller for NeuralController<'_> {
    fn control(&self, x: &State) -> Result<Vec<f64>, SimError> {
        control_law(self.sys, self.net, self.ds, x)
    }

    fn shaping(&self, x: &State) -> Result<Option<Shaping>, SimError> {
        let a = assemble(self.net, self.ds, self.sys, x)?;
        Ok(Some(Shaping {
            h_d: a.h_d,
            grad_hd: a.grad_hd,
            r_d: a.r_d,
        }))
    }
}

/// Closed loop with `J_a = 0`, `H_d = ½pᵀM⁻¹p + ½(q − q*)ᵀK_p(q − q*)` and
/// `R₂ = K_d`:  `u = B⁻¹(∂U/∂q − K_p(q − q*) − K_d M⁻¹p)`.
pub struct BaselineController<'a> {
    pub sys: &'a MechanicalPH,
    pub x_star: State,
    pub k_p: Mat,
    pub k_d: Mat,
}

impl<'a> BaselineController<'a> {
    pub fn new(sys: &'a MechanicalPH, x_star: State, k_p: Mat, k_d: Mat) -> Result<Self, SimError> {
        for (name, m) in [("k_p", &k_p), ("k_d", &k_d)] {
            if m.rows() != sys.dof() || m.asymmetry() > 0.0 || crate::numerics::cholesky(m).is_err()
            {
                return Err(SimError::Invalid(format!(
                    "{name} must be a {0}x{0} symmetric positive definite matrix",
                    sys.dof()
                )));
            }
        }
        Ok(Self {
            sys,
            x_star,
            k_p,
            k_d,
        })
    }

    fn dq(&self, x: &State) -> Vec<f64> {
        x.q.iter().zip(&self.x_star.q).map(|(a, b)| a - b).collect()
    }
}

impl Controller for BaselineController<'_> {
    fn control(&self, x: &State) -> Result<Vec<f64>, SimError> {
        let du = self.sys.potential_gradient(&x.q);
        let kp = self.k_p.matvec(&self.dq(x));
        let kd = self.k_d.matvec(&self.sys.velocity(x)?);
        let rhs: Vec<f64> = (0..du.len()).map(|i| du[i] - kp[i] - kd[i]).collect();
        Ok(self.sys.solve_input(&rhs)?)
    }

    fn shaping(&self, x: &State) -> Result<Option<Shaping>, SimError> {
        let n = self.sys.dof();
        let dq = self.dq(x);
        let h = self.sys.energy_jet(x)?;
        let du = self.sys.potential_gradient(&x.q);
        let kp = self.k_p.matvec(&dq);
        let kinetic = h.value - self.sys.potential(&x.q);
        let mut grad = h.grad.clone();
        for i in 0..n {
            grad[i] += kp[i] - du[i];
        }
        Ok(Some(Shaping {
            h_d: kinetic + 0.5 * dot(&dq, &kp),
            grad_hd: grad,
            r_d: desired_damping(self.sys, &self.k_d),
        }))
    }
}

/// Difference between the open-loop dynamics under `β(x)` and the target
/// `F_d ∂H_d/∂x`, with the matching defect for comparison.
#[derive(Debug, Clone)]
pub struct IdentityCheck {
    /// `ẋ_open(x, β) − F_d ∂H_d`, unactuated (`q`) rows.
    pub unactuated: Vec<f64>,
    /// Same, actuated (`p`) rows.
    pub actuated: Vec<f64>,
    /// `(I + J₁) ∂H_d/∂p − ∂H/∂p`.
    pub defect: Vec<f64>,
}

pub fn closed_loop_identity(
    sys: &MechanicalPH,
    net: &SurrogateNet,
    ds: &DesiredStructure,
    x: &State,
) -> Result<IdentityCheck, SimError> {
    let n = sys.dof();
    let u = control_law(sys, net, ds, x)?;
    let actual = sys.open_loop_dynamics(x, &u)?;
    let a = assemble(net, ds, sys, x)?;
    let target = a.f_d.matvec(&a.grad_hd);
    let diff: Vec<f64> = actual.iter().zip(&target).map(|(a, b)| a - b).collect();
    let grad_h = sys.grad_hamiltonian(x)?;
    Ok(IdentityCheck {
        unactuated: diff[..n].to_vec(),
        actuated: diff[n..].to_vec(),
        defect: matching_defect(ds.j1(), &a.grad_hd[n..], &grad_h[n..]),
    })
}

/// External input `v(t, x)` added on top of the controller.
pub type InputInjection<'a> = &'a dyn Fn(f64, &State) -> Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub n: usize,
    pub h: f64,
    pub times: Vec<f64>,
    /// `[q…, p…]` per step.
    pub states: Vec<Vec<f64>>,
    /// Total input `u + v` per step.
    pub inputs: Vec<Vec<f64>>,
    pub energy: Vec<f64>,
    /// `H_d`, or `H` when the controller defines no desired energy.
    pub desired_energy: Vec<f64>,
    /// `∂H_dᵀ ẋ` along the actual closed loop.
    pub hd_rate: Vec<f64>,
    /// `∂H_dᵀ R_d ∂H_d`.
    pub dissipation: Vec<f64>,
    /// Supply rate `yᵀv` of the injected input.
    pub supply: Vec<f64>,
    /// Open-loop power-balance defect at each step.
    pub power_defect: Vec<f64>,
    pub shaped: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_state(&self) -> State {
        State::from_flat(self.states.last().expect("non-empty trajectory"))
    }

    pub fn header(&self) -> String {
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=self.n).map(|i| format!("q{i}")));
        cols.extend((1..=self.n).map(|i| format!("p{i}")));
        cols.extend((1..=self.n).map(|i| format!("u{i}")));
        cols.push("H".into());
        cols.push("H_d".into());
        cols.join(",")
    }

    /// `t, q…, p…, u…, H, H_d` with shortest round-trip decimal floats.
    pub fn to_csv(&self) -> String {
        let mut s = self.header();
        s.push('\n');
        for k in 0..self.len() {
            let _ = write!(s, "{:?}", self.times[k]);
            for v in self.states[k].iter().chain(&self.inputs[k]) {
                let _ = write!(s, ",{v:?}");
            }
            let _ = writeln!(s, ",{:?},{:?}", self.energy[k], self.desired_energy[k]);
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), SimError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn record(
    sys: &MechanicalPH,
    controller: &dyn Controller,
    v: Option<InputInjection<'_>>,
    t: f64,
    x: &State,
    traj: &mut Trajectory,
) -> Result<(), SimError> {
    let mut u = controller.control(x)?;
    let mut supply = 0.0;
    if let Some(v) = v {
        let vv = v(t, x);
        supply = dot(&sys.output_map(x)?, &vv);
        for (a, b) in u.iter_mut().zip(&vv) {
            *a += b;
        }
    }
    let xdot = sys.open_loop_dynamics(x, &u)?;
    let h = sys.hamiltonian(x)?;
    let (hd, rate, diss) = match controller.shaping(x)? {
        Some(s) => {
            let rg = s.r_d.matvec(&s.grad_hd);
            (s.h_d, dot(&s.grad_hd, &xdot), dot(&s.grad_hd, &rg))
        }
        None => {
            let g = sys.grad_hamiltonian(x)?;
            let n = sys.dof();
            let dp = &g[n..];
            (h, dot(&g, &xdot), dot(dp, &sys.dissipation().matvec(dp)))
        }
    };
    traj.times.push(t);
    traj.states.push(x.to_flat());
    traj.energy.push(h);
    traj.desired_energy.push(hd);
    traj.hd_rate.push(rate);
    traj.dissipation.push(diss);
    traj.supply.push(supply);
    traj.power_defect.push(sys.power_balance_defect(x, &u)?);
    traj.inputs.push(u);
    Ok(())
}

fn closed_loop_rhs(
    sys: &MechanicalPH,
    controller: &dyn Controller,
    v: Option<InputInjection<'_>>,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>, SimError> {
    let s = State::from_flat(x);
    let mut u = controller.control(&s)?;
    if let Some(v) = v {
        for (a, b) in u.iter_mut().zip(v(t, &s)) {
            *a += b;
        }
    }
    Ok(sys.open_loop_dynamics(&s, &u)?)
}

/// One classical RK4 step of `ẋ = f(t, x)`.
pub fn rk4_step<E>(
    f: &mut dyn FnMut(f64, &[f64]) -> Result<Vec<f64>, E>,
    t: f64,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>, E> {
    let shift = |x: &[f64], k: &[f64], s: f64| -> Vec<f64> {
        x.iter().zip(k).map(|(a, b)| a + s * b).collect()
    };
    let k1 = f(t, x)?;
    let k2 = f(t + 0.5 * h, &shift(x, &k1, 0.5 * h))?;
    let k3 = f(t + 0.5 * h, &shift(x, &k2, 0.5 * h))?;
    let k4 = f(t + h, &shift(x, &k3, h))?;
    Ok((0..x.len())
        .map(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Integrates the closed loop from `x0` with step `h` up to `t_end`
/// (`round(t_end / h)` steps), recording every step including `t = 0`.
pub fn simulate(
    sys: &MechanicalPH,
    controller: &dyn Controller,
    x0: &State,
    h: f64,
    t_end: f64,
    v: Option<InputInjection<'_>>,
) -> Result<Trajectory, SimError> {
    if !(h.is_finite() && h > 0.0) {
        return Err(SimError::Invalid(format!("step must be positive, got {h}")));
    }
    if !(t_end.is_finite() && t_end >= h) {
        return Err(SimError::Invalid(format!(
            "horizon must be at least one step, got {t_end}"
        )));
    }
    if x0.dof() != sys.dof() || !x0.is_finite() {
        return Err(SimError::Invalid(
            "initial state has wrong size or is not finite".into(),
        ));
    }
    let steps = (t_end / h).round() as usize;
    let shaped = controller.shaping(x0)?.is_some();
    let mut traj = Trajectory {
        n: sys.dof(),
        h,
        times: Vec::with_capacity(steps + 1),
        states: Vec::with_capacity(steps + 1),
        inputs: Vec::with_capacity(steps + 1),
        energy: Vec::with_capacity(steps + 1),
        desired_energy: Vec::with_capacity(steps + 1),
        hd_rate: Vec::with_capacity(steps + 1),
        dissipation: Vec::with_capacity(steps + 1),
        supply: Vec::with_capacity(steps + 1),
        power_defect: Vec::with_capacity(steps + 1),
        shaped,
    };
    let mut x = x0.to_flat();
    record(sys, controller, v, 0.0, x0, &mut traj)?;
    let mut rhs = |t: f64, y: &[f64]| closed_loop_rhs(sys, controller, v, t, y);
    for k in 0..steps {
        let t = k as f64 * h;
        let next = rk4_step(&mut rhs, t, &x, h);
        let diverged = |step| SimError::Divergence {
            step,
            t,
            last: State::from_flat(&x),
        };
        let next = match next {
            Ok(n) if n.iter().all(|v| v.is_finite()) => n,
            Ok(_) => return Err(diverged(k + 1)),
            Err(SimError::Model(_)) | Err(SimError::Numerics(_)) => return Err(diverged(k + 1)),
            Err(e) => return Err(e),
        };
        x = next;
        record(
            sys,
            controller,
            v,
            (k + 1) as f64 * h,
            &State::from_flat(&x),
            &mut traj,
        )?;
    }
    Ok(traj)
}

/// Trajectory-level checks.
#[derive(Debug, Clone, PartialEq)]
pub struct VerificationReport {
    /// `max (Ḣ_d + ∂H_dᵀR_d∂H_d − yᵀv)`; should not exceed rounding level.
    pub passivity_residual: f64,
    pub final_distance: f64,
    /// Largest per-step increase of `H_d`; only meaningful for shaped loops.
    pub hd_max_increase: Option<f64>,
    /// Steps whose `H_d` increase exceeds the tolerance.
    pub hd_violations: usize,
    /// `|H(T) − H(0)|`, reported for unshaped loops.
    pub energy_drift: Option<f64>,
    pub power_balance_max: f64,
}

pub fn verify_trajectory(traj: &Trajectory, x_star: &State, tol: f64) -> VerificationReport {
    let passivity_residual = (0..traj.len())
        .map(|k| traj.hd_rate[k] + traj.dissipation[k] - traj.supply[k])
        .fold(f64::NEG_INFINITY, f64::max);
    let final_distance = traj.final_state().distance(x_star);
    let power_balance_max = traj
        .power_defect
        .iter()
        .fold(0.0_f64, |m, v| m.max(v.abs()));
    let (hd_max_increase, hd_violations, energy_drift) = if traj.shaped {
        let incs: Vec<f64> = traj
            .desired_energy
            .windows(2)
            .map(|w| w[1] - w[0])
            .collect();
        let max = incs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let bad = incs.iter().filter(|&&d| d > tol).count();
        (Some(max), bad, None)
    } else {
        let e = &traj.energy;
        (None, 0, Some((e[e.len() - 1] - e[0]).abs()))
    };
    VerificationReport {
        passivity_residual,
        final_distance,
        hd_max_increase,
        hd_violations,
        energy_drift,
        power_balance_max,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surrogate::widths_for;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn pendulum() -> MechanicalPH {
        MechanicalPH::simple_pendulum(1.0, 1.0, 9.81)
    }

    fn random_net(n: usize, seed: u64) -> SurrogateNet {
        let mut net = SurrogateNet::init(seed, &widths_for(n, &[10, 10])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let th: Vec<f64> = net
            .theta()
            .iter()
            .map(|_| rng.gen_range(-0.6..0.6))
            .collect();
        net.set_theta(&th).unwrap();
        net
    }

    fn ds(n: usize, j1: f64) -> DesiredStructure {
        DesiredStructure::new(
            Mat::identity(n).scale(j1),
            Mat::zeros(n, n),
            State::new(vec![0.3; n], vec![0.0; n]),
            0.1,
            0.1,
            1.0,
            Mat::identity(n),
        )
        .unwrap()
    }

    #[test]
    fn no_shaping_gives_zero_input() {
        let sys = pendulum();
        let net = SurrogateNet::with_options(0, &widths_for(1, &[5]), 1e-6, 0.0).unwrap();
        let desired = ds(1, 0.0);
        let u = control_law(&sys, &net, &desired, &State::new(vec![0.7], vec![0.4])).unwrap();
        // Only the ε-damping of R₂ remains: u = −ε ∂H/∂p.
        assert!((u[0] + 1e-6 * 0.4).abs() < 1e-15);
    }

    #[test]
    fn gravity_compensation_at_target() {
        let sys = pendulum();
        let base = BaselineController::new(
            &sys,
            State::new(vec![FRAC_PI_2], vec![0.0]),
            Mat::identity(1),
            Mat::identity(1),
        )
        .unwrap();
        let u = base
            .control(&State::new(vec![FRAC_PI_2], vec![0.0]))
            .unwrap();
        assert!((u[0] - 9.81).abs() < 1e-12);
    }

    #[test]
    fn baseline_examples() {
        let sys = pendulum();
        let q_star = 0.4;
        let base = BaselineController::new(
            &sys,
            State::new(vec![q_star], vec![0.0]),
            Mat::identity(1),
            Mat::identity(1),
        )
        .unwrap();
        let u = base.control(&State::new(vec![q_star], vec![0.0])).unwrap();
        assert!((u[0] - 9.81 * q_star.sin()).abs() < 1e-12);
        let q = q_star + 0.1;
        let u = base.control(&State::new(vec![q], vec![0.0])).unwrap();
        assert!((u[0] - (9.81 * q.sin() - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn baseline_closes_the_matching_equation() {
        let sys = MechanicalPH::double_pendulum(1.0, 1.3, 0.8, 1.1, 9.81);
        let base = BaselineController::new(
            &sys,
            State::new(vec![0.2, -0.1], vec![0.0, 0.0]),
            Mat::diag(&[3.0, 2.0]),
            Mat::diag(&[1.0, 0.5]),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let x = State::new(
                vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
                vec![rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)],
            );
            let s = base.shaping(&x).unwrap().unwrap();
            let h = sys.grad_hamiltonian(&x).unwrap();
            let defect = matching_defect(&Mat::zeros(2, 2), &s.grad_hd[2..], &h[2..]);
            assert!(defect.iter().all(|d| d.abs() < 1e-12));
            // And the closed loop equals the target F_d ∂H_d.
            let u = base.control(&x).unwrap();
            let actual = sys.open_loop_dynamics(&x, &u).unwrap();
            let j = sys.structure_matrices(&x).j;
            let target = j.sub(&s.r_d).matvec(&s.grad_hd);
            for (a, b) in actual.iter().zip(&target) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn theorem_identity_at_random_states() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1, 2] {
            let sys = if n == 1 {
                pendulum()
            } else {
                MechanicalPH::double_pendulum(1.0, 1.0, 1.0, 1.0, 9.81)
            };
            let net = random_net(n, 3);
            let desired = ds(n, 0.7);
            for _ in 0..200 {
                let q: Vec<f64> = (0..n).map(|_| rng.gen_range(-PI..PI)).collect();
                let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let c = closed_loop_identity(&sys, &net, &desired, &State::new(q, p)).unwrap();
                assert!(c.actuated.iter().all(|v| v.abs() <= 1e-12 * 100.0));
                for (a, d) in c.unactuated.iter().zip(&c.defect) {
                    assert!((a + d).abs() <= 1e-13, "{a} vs {d}");
                }
            }
        }
    }

    #[test]
    fn rk4_linear_oracle() {
        let mut f = |_: f64, x: &[f64]| -> Result<Vec<f64>, ()> { Ok(vec![-x[0]]) };
        let x1 = rk4_step(&mut f, 0.0, &[1.0], 0.1).unwrap();
        assert!((x1[0] - 0.9048375).abs() < 1e-7);
    }

    #[test]
    fn conservation_and_rk4_order() {
        let sys = pendulum();
        let x0 = State::new(vec![1.0], vec![0.5]);
        let drift = |h: f64| {
            let t = simulate(&sys, &ZeroInput { n: 1 }, &x0, h, 10.0, None).unwrap();
            verify_trajectory(&t, &x0, 1e-4).energy_drift.unwrap()
        };
        let d1 = drift(1e-3);
        assert!(d1 <= 1e-6, "{d1}");
        let coarse = drift(4e-2);
        let fine = drift(2e-2);
        assert!(coarse / fine >= 8.0, "ratio {}", coarse / fine);
    }

    #[test]
    fn baseline_converges_and_is_passive() {
        let sys = pendulum();
        let x_star = State::new(vec![FRAC_PI_2], vec![0.0]);
        let base =
            BaselineController::new(&sys, x_star.clone(), Mat::diag(&[9.81]), Mat::diag(&[6.0]))
                .unwrap();
        let t = simulate(
            &sys,
            &base,
            &State::new(vec![0.0], vec![0.0]),
            1e-3,
            10.0,
            None,
        )
        .unwrap();
        let r = verify_trajectory(&t, &x_star, 1e-4);
        assert!(r.final_distance < 1e-2, "{}", r.final_distance);
        assert_eq!(r.hd_violations, 0);
        assert!(r.passivity_residual < 1e-9);
        assert!(r.power_balance_max < 1e-9);
        let header = t.to_csv().lines().next().unwrap().to_string();
        assert_eq!(header, "t,q1,p1,u1,H,H_d");
    }

    #[test]
    fn equilibrium_is_invariant_under_exact_shaping() {
        let sys = MechanicalPH::double_pendulum(1.0, 1.0, 1.0, 1.0, 9.81);
        let x_star = State::new(vec![0.3, -0.2], vec![0.0, 0.0]);
        let base =
            BaselineController::new(&sys, x_star.clone(), Mat::identity(2), Mat::identity(2))
                .unwrap();
        let t = simulate(&sys, &base, &x_star, 1e-2, 2.0, None).unwrap();
        for s in &t.states {
            assert!(State::from_flat(s).distance(&x_star) <= 1e-8);
        }
    }

    #[test]
    fn passivity_with_injected_input() {
        let sys = pendulum();
        let x_star = State::new(vec![0.0], vec![0.0]);
        let base =
            BaselineController::new(&sys, x_star.clone(), Mat::identity(1), Mat::identity(1))
                .unwrap();
        let v = |t: f64, _: &State| vec![(3.0 * t).sin()];
        let t = simulate(
            &sys,
            &base,
            &State::new(vec![0.5], vec![0.0]),
            1e-3,
            3.0,
            Some(&v),
        )
        .unwrap();
        let r = verify_trajectory(&t, &x_star, 1e-4);
        assert!(r.passivity_residual.abs() < 1e-9);
    }

    #[test]
    fn invalid_settings_are_rejected() {
        let sys = pendulum();
        let x0 = State::new(vec![0.0], vec![0.0]);
        assert!(matches!(
            simulate(&sys, &ZeroInput { n: 1 }, &x0, 0.0, 1.0, None),
            Err(SimError::Invalid(_))
        ));
        assert!(matches!(
            simulate(&sys, &ZeroInput { n: 1 }, &x0, 0.1, 0.01, None),
            Err(SimError::Invalid(_))
        ));
    }
}
