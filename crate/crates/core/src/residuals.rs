//! Residual terms of the matching problem and the composite training loss.
//!
//! The loss over a collocation batch `X` with target `x*` is
//!
//! ```text
//! L = f_transient + f_eq + f_lyap + f_matching + λ·f_comp
//! ```
//!
//! where every term except the `x*`-only parts of `f_eq` is a batch mean.
//! [`LossProblem`] caches the system energy at the batch points and computes
//! the loss and its `θ`-gradient with the fused jet passes of the surrogate.

use num_complex::Complex64;
use thiserror::Error;

use crate::autodiff::packed_len;
use crate::numerics::{
    eigenvalue_sensitivities, general_eigenvalues, sym_eigen, Mat, NumericsError,
};
use crate::ph::{MechanicalPH, PhError, State};
use crate::surrogate::{
    assemble, desired_damping, factor_adjoint, factor_from_entries, factor_len, DesiredStructure,
    SeedBlock, SurrogateError, SurrogateNet,
};

#[derive(Debug, Error)]
pub enum ResidualError {
    #[error("collocation batch is empty")]
    EmptyBatch,
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("network is sized for n = {net}, system has n = {sys}")]
    Mismatch { net: usize, sys: usize },
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Model(#[from] PhError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Per-term `θ`-gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TermGradients {
    pub f_transient: Vec<f64>,
    pub f_eq: Vec<f64>,
    pub f_lyap: Vec<f64>,
    pub f_matching: Vec<f64>,
    pub f_comp: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBreakdown {
    pub f_transient: f64,
    pub f_eq: f64,
    pub f_lyap: f64,
    pub f_matching: f64,
    pub f_comp: f64,
    pub total: f64,
    /// Gradient of `total`, present unless evaluated without gradients.
    pub grad_total: Option<Vec<f64>>,
    pub grad_terms: Option<TermGradients>,
}

impl ResidualBreakdown {
    pub fn terms(&self) -> [f64; 5] {
        [
            self.f_transient,
            self.f_eq,
            self.f_lyap,
            self.f_matching,
            self.f_comp,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.terms().iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    None,
    Total,
    PerTerm,
}

// ---------------------------------------------------------------------------
// Point kernels on explicit quantities.

/// `(I + J₁) ∂H_d/∂p − ∂H/∂p`, the unactuated rows of the matching equation.
pub fn matching_defect(j1: &Mat, dhd_dp: &[f64], dh_dp: &[f64]) -> Vec<f64> {
    let n = dhd_dp.len();
    (0..n)
        .map(|i| {
            let mut v = dhd_dp[i] - dh_dp[i];
            for k in 0..n {
                v += j1.get(i, k) * dhd_dp[k];
            }
            v
        })
        .collect()
}

/// `Σ max(0, c + Re λ) + ‖Im λ‖₂` over `σ(F_d)`, and `∂/∂F_d`.
///
/// Eigenvalues within the collision gap of another contribute no gradient.
pub fn transient_term(f_d: &Mat, c: f64) -> Result<(f64, Mat), ResidualError> {
    let spectrum = general_eigenvalues(f_d)?;
    let mut value = 0.0;
    let mut im_sq = 0.0;
    for l in &spectrum.values {
        value += (c + l.re).max(0.0);
        im_sq += l.im * l.im;
    }
    let im_norm = im_sq.sqrt();
    value += im_norm;

    let d = f_d.rows();
    let mut adj = Mat::zeros(d, d);
    let sens = eigenvalue_sensitivities(f_d, &spectrum);
    for (l, s) in spectrum.values.iter().zip(&sens) {
        let Some(s) = s else { continue };
        let w_re = if c + l.re > 0.0 { 1.0 } else { 0.0 };
        let w_im = if im_norm > 0.0 { l.im / im_norm } else { 0.0 };
        if w_re == 0.0 && w_im == 0.0 {
            continue;
        }
        for j in 0..d {
            for k in 0..d {
                let z: Complex64 = s[j * d + k];
                adj.set(j, k, adj.get(j, k) + w_re * z.re + w_im * z.im);
            }
        }
    }
    Ok((value, adj))
}

/// `Σ max(0, c − λᵢ(∂²H_d/∂x²))` and its gradient in packed upper storage
/// (off-diagonal entries count both symmetric positions).
pub fn lyapunov_term(hess: &Mat, c: f64) -> Result<(f64, Vec<f64>), ResidualError> {
    let d = hess.rows();
    let eig = sym_eigen(hess)?;
    let mut value = 0.0;
    let mut adj = vec![0.0; packed_len(d)];
    for (i, &lambda) in eig.values.iter().enumerate() {
        if c - lambda > 0.0 {
            value += c - lambda;
            let mut p = 0;
            for k in 0..d {
                for l in k..d {
                    let vk = eig.vectors.get(k, i);
                    let vl = eig.vectors.get(l, i);
                    adj[p] -= if k == l { vk * vk } else { 2.0 * vk * vl };
                    p += 1;
                }
            }
        }
    }
    Ok((value, adj))
}

/// `‖∂H_d/∂x(x*)‖² + H_d(x*)² + mean max(0, −H_d(x))`.
///
/// Callers pass `0` for batch entries that coincide with `x*`: there the
/// squared term already pins `H_d`, and a hinge sitting exactly at its kink
/// at the optimum stalls line searches.
pub fn equilibrium_term(grad_at_star: &[f64], h_at_star: f64, batch_hd: &[f64]) -> f64 {
    let g: f64 = grad_at_star.iter().map(|v| v * v).sum();
    let hinge = if batch_hd.is_empty() {
        0.0
    } else {
        batch_hd.iter().map(|h| (-h).max(0.0)).sum::<f64>() / batch_hd.len() as f64
    };
    g + h_at_star * h_at_star + hinge
}

/// `K_p(q − q*) − ∂H_d/∂q`.
pub fn comp_defect(k_p: &Mat, q: &[f64], q_star: &[f64], dhd_dq: &[f64]) -> Vec<f64> {
    let dq: Vec<f64> = q.iter().zip(q_star).map(|(a, b)| a - b).collect();
    k_p.matvec(&dq)
        .iter()
        .zip(dhd_dq)
        .map(|(g, h)| g - h)
        .collect()
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

// ---------------------------------------------------------------------------
// Terms for a trained network, evaluated through `assemble`.

pub fn f_matching(
    sys: &MechanicalPH,
    net: &SurrogateNet,
    ds: &DesiredStructure,
    x: &State,
) -> Result<f64, ResidualError> {
    let n = sys.dof();
    let a = assemble(net, ds, sys, x)?;
    let h = sys.grad_hamiltonian(x)?;
    Ok(sq_norm(&matching_defect(ds.j1(), &a.grad_hd[n..], &h[n..])))
}

pub fn f_transient(
    sys: &MechanicalPH,
    net: &SurrogateNet,
    ds: &DesiredStructure,
    x: &State,
) -> Result<f64, ResidualError> {
    let a = assemble(net, ds, sys, x)?;
    Ok(transient_term(&a.f_d, ds.c_transient())?.0)
}

pub fn f_eq(
    sys: &MechanicalPH,
    net: &SurrogateNet,
    ds: &DesiredStructure,
    batch: &[State],
) -> Result<f64, ResidualError> {
    if batch.is_empty() {
        return Err(ResidualError::EmptyBatch);
    }
    let star = assemble(net, ds, sys, ds.x_star())?;
    let values = batch
        .iter()
        .map(|x| {
            if x == ds.x_star() {
                return Ok(0.0);
            }
            Ok(sys.hamiltonian(x)? + net.eval_ha(x)?)
        })
        .collect::<Result<Vec<f64>, ResidualError>>()?;
    Ok(equilibrium_term(&star.grad_hd, star.h_d, &values))
}

pub fn f_lyap(
    sys: &MechanicalPH,
    net: &SurrogateNet,
    ds: &DesiredStructure,
    batch: &[State],
) -> Result<f64, ResidualError> {
    if batch.is_empty() {
        return Err(ResidualError::EmptyBatch);
    }
    let mut acc = 0.0;
    for x in batch {
        let a = assemble(net, ds, sys, x)?;
        acc += lyapunov_term(&a.hess_hd, ds.c_lyap())?.0;
    }
    Ok(acc / batch.len() as f64)
}

pub fn f_comp(
    sys: &MechanicalPH,
    net: &SurrogateNet,
    ds: &DesiredStructure,
    x: &State,
) -> Result<f64, ResidualError> {
    let n = sys.dof();
    let a = assemble(net, ds, sys, x)?;
    Ok(sq_norm(&comp_defect(
        ds.k_p_comp(),
        &x.q,
        &ds.x_star().q,
        &a.grad_hd[..n],
    )))
}

/// Composite loss with per-term gradients.
pub fn total_loss(
    sys: &MechanicalPH,
    net: &SurrogateNet,
    ds: &DesiredStructure,
    batch: &[State],
) -> Result<ResidualBreakdown, ResidualError> {
    LossProblem::new(sys, ds, batch)?.evaluate(net, GradientMode::PerTerm)
}

// ---------------------------------------------------------------------------
// Batched loss with fused gradients.

#[derive(Debug, Clone)]
struct PointCache {
    x: Vec<f64>,
    h: f64,
    grad_h: Vec<f64>,
    /// Packed upper Hessian.
    hess_h: Vec<f64>,
    /// Coincides with `x*`; excluded from the positivity hinge.
    at_star: bool,
}

impl PointCache {
    fn new(sys: &MechanicalPH, x: &State, x_star: &State) -> Result<Self, ResidualError> {
        let jet = sys.energy_jet(x)?;
        let d = jet.grad.len();
        let mut hess_h = Vec::with_capacity(packed_len(d));
        for i in 0..d {
            for j in i..d {
                hess_h.push(jet.hess.get(i, j));
            }
        }
        Ok(Self {
            x: x.to_flat(),
            h: jet.value,
            grad_h: jet.grad,
            hess_h,
            at_star: x == x_star,
        })
    }
}

/// Fixed collocation batch with cached system energy, ready for repeated
/// loss evaluations at different `θ`.
#[derive(Debug, Clone)]
pub struct LossProblem {
    sys: MechanicalPH,
    ds: DesiredStructure,
    j_d: Mat,
    points: Vec<PointCache>,
    star: PointCache,
}

// Term indices, in `ResidualBreakdown::terms` order.
const TRANSIENT: usize = 0;
const EQ: usize = 1;
const LYAP: usize = 2;
const MATCHING: usize = 3;
const COMP: usize = 4;

impl LossProblem {
    pub fn new(
        sys: &MechanicalPH,
        ds: &DesiredStructure,
        batch: &[State],
    ) -> Result<Self, ResidualError> {
        if batch.is_empty() {
            return Err(ResidualError::EmptyBatch);
        }
        if ds.dof() != sys.dof() {
            return Err(ResidualError::Mismatch {
                net: ds.dof(),
                sys: sys.dof(),
            });
        }
        let points = batch
            .iter()
            .map(|x| PointCache::new(sys, x, ds.x_star()))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            sys: sys.clone(),
            ds: ds.clone(),
            j_d: ds.j_d(),
            star: PointCache::new(sys, ds.x_star(), ds.x_star())?,
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn system(&self) -> &MechanicalPH {
        &self.sys
    }

    pub fn desired(&self) -> &DesiredStructure {
        &self.ds
    }

    pub fn evaluate(
        &self,
        net: &SurrogateNet,
        mode: GradientMode,
    ) -> Result<ResidualBreakdown, ResidualError> {
        let n = self.sys.dof();
        if net.dof() != n {
            return Err(ResidualError::Mismatch {
                net: net.dof(),
                sys: n,
            });
        }
        let d = 2 * n;
        let np = net.num_params();
        let lambda = self.ds.lambda_comp();
        let c_t = self.ds.c_transient();
        let c_l = self.ds.c_lyap();
        let q_star = &self.ds.x_star().q;
        let j1 = self.ds.j1();
        let w = 1.0 / self.points.len() as f64;
        let want = mode != GradientMode::None;

        // Seed blocks: one combined block, or one per term in `TERMS` order.
        let n_blocks = match mode {
            GradientMode::None => 0,
            GradientMode::Total => 1,
            GradientMode::PerTerm => 5,
        };
        let mut seeds: Vec<SeedBlock> = (0..n_blocks).map(|_| net.seed_block()).collect();
        let slot = |term: usize| -> (usize, f64) {
            match mode {
                GradientMode::PerTerm => (term, 1.0),
                _ => (0, if term == COMP { lambda } else { 1.0 }),
            }
        };
        let mut grads: Vec<Vec<f64>> = (0..n_blocks).map(|_| vec![0.0; np]).collect();

        let mut ws = net.workspace();
        let mut xs: Vec<f64> = Vec::with_capacity(ws.capacity() * d);
        let mut sums = [0.0; 5];
        let mut grad_hd = vec![0.0; d];
        let mut hess_hd = Mat::zeros(d, d);
        let mut factor = vec![0.0; factor_len(n)];
        // R₂ is frequently identical across points; reuse the last spectrum.
        let mut memo: Option<(Vec<f64>, f64, Vec<f64>)> = None;

        let chunks = self
            .points
            .chunks(ws.capacity())
            .map(|c| (c, false))
            .chain(std::iter::once((std::slice::from_ref(&self.star), true)));
        for (chunk, is_star) in chunks {
            xs.clear();
            for pt in chunk {
                xs.extend_from_slice(&pt.x);
            }
            net.forward_block(&xs, &mut ws);
            seeds.iter_mut().for_each(|s| s.clear());

            for (b, pt) in chunk.iter().enumerate() {
                let jet = ws.ha(b);
                for (g, (a, v)) in grad_hd.iter_mut().zip(pt.grad_h.iter().zip(&jet[1..1 + d])) {
                    *g = a + v;
                }
                let h_d = pt.h + jet[0];

                if is_star {
                    sums[EQ] += sq_norm(&grad_hd) + h_d * h_d;
                    if want {
                        let (s, sw) = slot(EQ);
                        let seed = seeds[s].ha_mut(b);
                        seed[0] += sw * 2.0 * h_d;
                        for (sv, g) in seed[1..1 + d].iter_mut().zip(&grad_hd) {
                            *sv += sw * 2.0 * g;
                        }
                    }
                    continue;
                }

                // Matching.
                let defect = matching_defect(j1, &grad_hd[n..], &pt.grad_h[n..]);
                sums[MATCHING] += w * sq_norm(&defect);
                if want {
                    let (s, sw) = slot(MATCHING);
                    let seed = seeds[s].ha_mut(b);
                    for k in 0..n {
                        let mut v = defect[k];
                        for i in 0..n {
                            v += j1.get(i, k) * defect[i];
                        }
                        seed[1 + n + k] += sw * w * 2.0 * v;
                    }
                }

                // Positivity hinge of the equilibrium term.
                if h_d < 0.0 && !pt.at_star {
                    sums[EQ] += w * -h_d;
                    if want {
                        let (s, sw) = slot(EQ);
                        seeds[s].ha_mut(b)[0] -= sw * w;
                    }
                }

                // Complementary potential shaping.
                let comp = comp_defect(self.ds.k_p_comp(), &pt.x[..n], q_star, &grad_hd[..n]);
                sums[COMP] += w * sq_norm(&comp);
                if want {
                    let (s, sw) = slot(COMP);
                    if sw != 0.0 {
                        let seed = seeds[s].ha_mut(b);
                        for (sv, v) in seed[1..1 + n].iter_mut().zip(&comp) {
                            *sv -= sw * w * 2.0 * v;
                        }
                    }
                }

                // Lyapunov.
                let mut p = 0;
                for i in 0..d {
                    for j in i..d {
                        let v = pt.hess_h[p] + jet[1 + d + p];
                        hess_hd.set(i, j, v);
                        hess_hd.set(j, i, v);
                        p += 1;
                    }
                }
                let (l_val, l_adj) = lyapunov_term(&hess_hd, c_l)?;
                sums[LYAP] += w * l_val;
                if want && l_val > 0.0 {
                    let (s, sw) = slot(LYAP);
                    let seed = seeds[s].ha_mut(b);
                    for (sv, a) in seed[1 + d..].iter_mut().zip(&l_adj) {
                        *sv += sw * w * a;
                    }
                }

                // Transient, through R₂ only.
                for (k, f) in factor.iter_mut().enumerate() {
                    *f = ws.factor(b, k);
                }
                let hit = matches!(&memo, Some((f, _, _)) if *f == factor);
                if !hit {
                    let l = factor_from_entries(n, &factor);
                    let r2 = l
                        .matmul(&l.transpose())
                        .add(&Mat::identity(n).scale(net.epsilon()));
                    let f_d = self.j_d.sub(&desired_damping(&self.sys, &r2));
                    let (v, adj_f) = transient_term(&f_d, c_t)?;
                    let adj_r2 = adj_f.sub_block(n, n, n, n).scale(-1.0);
                    memo = Some((factor.clone(), v, factor_adjoint(n, &factor, &adj_r2)));
                }
                let (_, t_val, t_adj) = memo.as_ref().unwrap();
                sums[TRANSIENT] += w * t_val;
                if want && t_adj.iter().any(|&a| a != 0.0) {
                    let (s, sw) = slot(TRANSIENT);
                    for (k, a) in t_adj.iter().enumerate() {
                        *seeds[s].factor_mut(b, k) += sw * w * a;
                    }
                }
            }

            for (s, g) in seeds.iter().zip(grads.iter_mut()) {
                net.backward_block(&mut ws, s, g);
            }
        }

        let total = sums[TRANSIENT] + sums[EQ] + sums[LYAP] + sums[MATCHING] + lambda * sums[COMP];
        let mut report = ResidualBreakdown {
            f_transient: sums[TRANSIENT],
            f_eq: sums[EQ],
            f_lyap: sums[LYAP],
            f_matching: sums[MATCHING],
            f_comp: sums[COMP],
            total,
            grad_total: None,
            grad_terms: None,
        };
        if !report.is_finite() {
            return Err(ResidualError::NonFinite(format!("{:?}", report.terms())));
        }
        match mode {
            GradientMode::None => {}
            GradientMode::Total => report.grad_total = grads.pop(),
            GradientMode::PerTerm => {
                let total_grad = (0..np)
                    .map(|k| {
                        grads[TRANSIENT][k]
                            + grads[EQ][k]
                            + grads[LYAP][k]
                            + grads[MATCHING][k]
                            + lambda * grads[COMP][k]
                    })
                    .collect();
                let mut it = grads.into_iter();
                report.grad_total = Some(total_grad);
                report.grad_terms = Some(TermGradients {
                    f_transient: it.next().unwrap(),
                    f_eq: it.next().unwrap(),
                    f_lyap: it.next().unwrap(),
                    f_matching: it.next().unwrap(),
                    f_comp: it.next().unwrap(),
                });
            }
        }
        Ok(report)
    }

    /// `(loss, ∂loss/∂θ)`, the optimizer interface.
    pub fn loss_and_gradient(&self, net: &SurrogateNet) -> Result<(f64, Vec<f64>), ResidualError> {
        let r = self.evaluate(net, GradientMode::Total)?;
        Ok((r.total, r.grad_total.unwrap()))
    }

    /// `sqrt(mean ‖matching defect‖²)` over the batch.
    pub fn matching_rms(&self, net: &SurrogateNet) -> Result<f64, ResidualError> {
        Ok(self.evaluate(net, GradientMode::None)?.f_matching.sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{input_jet, Jet2, Real};
    use crate::surrogate::{widths_for, DEFAULT_HIDDEN};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn pendulum() -> MechanicalPH {
        MechanicalPH::simple_pendulum(1.0, 1.0, 9.81)
    }

    fn ds(j1: f64, q_star: f64, lambda: f64) -> DesiredStructure {
        DesiredStructure::new(
            Mat::diag(&[j1]),
            Mat::zeros(1, 1),
            State::new(vec![q_star], vec![0.0]),
            0.1,
            0.1,
            lambda,
            Mat::diag(&[2.0]),
        )
        .unwrap()
    }

    /// Value, gradient and Hessian of a scalar field as used by the kernels.
    fn field<F>(f: F, x: &[f64]) -> (f64, Vec<f64>, Mat)
    where
        F: Fn(&[Jet2<f64>]) -> Jet2<f64>,
    {
        let j = input_jet(f, x);
        (j.value, j.grad.clone(), j.hessian_mat())
    }

    #[test]
    fn matching_examples() {
        let j1 = Mat::diag(&[1.0]);
        // H_a ≡ 0, J₁ = 0 → open-loop match.
        assert_eq!(
            matching_defect(&Mat::zeros(1, 1), &[0.7], &[0.7]),
            vec![0.0]
        );
        // Analytic solution H_a = −p²/4.
        let p = 1.3;
        let dhd_dp = p - p / 2.0;
        assert!(sq_norm(&matching_defect(&j1, &[dhd_dp], &[p])) < 1e-30);
        // H_a ≡ 0 at p = 1.
        assert_eq!(sq_norm(&matching_defect(&j1, &[1.0], &[1.0])), 1.0);
    }

    #[test]
    fn matching_analytic_family_vanishes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(j, m, l) in &[
            (1.0, 1.0, 1.0),
            (-0.5, 1.0, 1.0),
            (2.5, 0.7, 1.4),
            (-0.9, 2.0, 0.5),
        ] {
            let sys = MechanicalPH::simple_pendulum(m, l, 9.81);
            let j1 = Mat::diag(&[j]);
            for _ in 0..100 {
                let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
                // H_d = H − (j/(1+j)) p²/(2ml²) + V(q) with V = sin(3q)·q.
                let (_, g, _) = field(
                    |v| {
                        let h = sys.hamiltonian_generic(v).unwrap();
                        let ha =
                            v[1].clone() * v[1].clone() * (-(j / (1.0 + j)) / (2.0 * m * l * l))
                                + (v[0].clone() * 3.0).sin() * v[0].clone();
                        h + ha
                    },
                    &x,
                );
                let h = sys.grad_hamiltonian(&State::from_flat(&x)).unwrap();
                let defect = matching_defect(&j1, &g[1..], &h[1..]);
                assert!(sq_norm(&defect) < 1e-24);
            }
        }
    }

    #[test]
    fn transient_examples() {
        let (v, _) = transient_term(&Mat::diag(&[-2.0, -3.0]), 1.0).unwrap();
        assert_eq!(v, 0.0);
        let rot = Mat::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let (v, _) = transient_term(&rot, 0.5).unwrap();
        assert!((v - (1.0 + 2f64.sqrt())).abs() < 1e-12);
        let crit = Mat::from_rows(&[vec![0.0, 1.0], vec![-1.0, -2.0]]).unwrap();
        let (v, adj) = transient_term(&crit, 0.5).unwrap();
        assert!(v.abs() < 1e-12);
        assert_eq!(adj.max_abs(), 0.0);
    }

    #[test]
    fn transient_adjoint_matches_finite_differences() {
        let a = Mat::from_rows(&[
            vec![0.0, 0.0, 2.0, 0.3],
            vec![0.0, 0.0, -0.2, 1.5],
            vec![-2.0, 0.2, -0.7, 0.1],
            vec![-0.3, -1.5, 0.1, -0.4],
        ])
        .unwrap();
        let (_, adj) = transient_term(&a, 0.6).unwrap();
        for j in 0..4 {
            for k in 0..4 {
                let h = 1e-6;
                let mut up = a.clone();
                let mut dn = a.clone();
                up.set(j, k, a.get(j, k) + h);
                dn.set(j, k, a.get(j, k) - h);
                let fd = (transient_term(&up, 0.6).unwrap().0
                    - transient_term(&dn, 0.6).unwrap().0)
                    / (2.0 * h);
                assert!(
                    (fd - adj.get(j, k)).abs() < 1e-6,
                    "({j},{k}) {fd} vs {}",
                    adj.get(j, k)
                );
            }
        }
    }

    #[test]
    fn equilibrium_examples() {
        // H_d = ½‖x − x*‖².
        let xs = [0.3_f64, -0.2];
        let batch: Vec<f64> = [[0.0_f64, 1.0], [2.0, -1.0]]
            .iter()
            .map(|x| 0.5 * ((x[0] - xs[0]).powi(2) + (x[1] - xs[1]).powi(2)))
            .collect();
        assert_eq!(equilibrium_term(&[0.0, 0.0], 0.0, &batch), 0.0);
        // H_d = x₁, x* = 0, batch {(−1, 0)}.
        assert_eq!(equilibrium_term(&[1.0, 0.0], 0.0, &[-1.0]), 2.0);
        // Pendulum H with x* = (0, 0).
        let sys = pendulum();
        let g = sys
            .grad_hamiltonian(&State::new(vec![0.0], vec![0.0]))
            .unwrap();
        let h = sys.hamiltonian(&State::new(vec![0.0], vec![0.0])).unwrap();
        let batch = [sys.hamiltonian(&State::new(vec![1.0], vec![2.0])).unwrap()];
        assert_eq!(equilibrium_term(&g, h, &batch), 0.0);
    }

    #[test]
    fn lyapunov_examples() {
        assert_eq!(lyapunov_term(&Mat::identity(2), 0.1).unwrap().0, 0.0);
        let (v, _) = lyapunov_term(&Mat::diag(&[1.0, -1.0]), 0.1).unwrap();
        assert!((v - 1.1).abs() < 1e-15);
        let h = pendulum()
            .energy_jet(&State::new(vec![0.0], vec![0.0]))
            .unwrap();
        assert_eq!(lyapunov_term(&h.hess, 0.1).unwrap().0, 0.0);
    }

    #[test]
    fn lyapunov_adjoint_matches_finite_differences() {
        let pack = |m: &Mat| {
            let mut v = Vec::new();
            for i in 0..3 {
                for j in i..3 {
                    v.push(m.get(i, j));
                }
            }
            v
        };
        let unpack = |v: &[f64]| {
            let mut m = Mat::zeros(3, 3);
            let mut p = 0;
            for i in 0..3 {
                for j in i..3 {
                    m.set(i, j, v[p]);
                    m.set(j, i, v[p]);
                    p += 1;
                }
            }
            m
        };
        let base = Mat::from_rows(&[
            vec![0.05, 0.3, -0.1],
            vec![0.3, -0.4, 0.2],
            vec![-0.1, 0.2, 2.0],
        ])
        .unwrap();
        let (_, adj) = lyapunov_term(&base, 0.5).unwrap();
        let v0 = pack(&base);
        for p in 0..v0.len() {
            let mut up = v0.clone();
            let mut dn = v0.clone();
            up[p] += 1e-6;
            dn[p] -= 1e-6;
            let fd = (lyapunov_term(&unpack(&up), 0.5).unwrap().0
                - lyapunov_term(&unpack(&dn), 0.5).unwrap().0)
                / 2e-6;
            assert!((fd - adj[p]).abs() < 1e-7);
        }
    }

    #[test]
    fn comp_examples() {
        // Quadratic potential with q-independent mass.
        let k = Mat::diag(&[3.0]);
        let q = [0.9];
        let q_star = [0.2];
        let dhd_dq = [3.0 * (0.9 - 0.2)];
        assert!(sq_norm(&comp_defect(&k, &q, &q_star, &dhd_dq)) < 1e-30);
        assert_eq!(
            sq_norm(&comp_defect(&Mat::identity(1), &[2.0], &[0.0], &[1.0])),
            1.0
        );
    }

    #[test]
    fn fused_terms_match_assembled_terms() {
        let sys = MechanicalPH::double_pendulum(1.0, 1.2, 0.9, 1.1, 9.81);
        let mut net = SurrogateNet::init(2, &widths_for(2, &[8, 8])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let theta: Vec<f64> = net
            .theta()
            .iter()
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        net.set_theta(&theta).unwrap();
        let desired = DesiredStructure::new(
            Mat::diag(&[-0.5, 0.3]),
            Mat::from_rows(&[vec![0.0, 0.4], vec![-0.4, 0.0]]).unwrap(),
            State::new(vec![0.3, -0.2], vec![0.0, 0.0]),
            0.4,
            0.2,
            0.7,
            Mat::diag(&[2.0, 1.0]),
        )
        .unwrap();
        let batch: Vec<State> = (0..6)
            .map(|_| {
                State::new(
                    vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                    vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                )
            })
            .collect();
        let r = total_loss(&sys, &net, &desired, &batch).unwrap();
        let mean =
            |f: &dyn Fn(&State) -> f64| batch.iter().map(f).sum::<f64>() / batch.len() as f64;
        let m = mean(&|x| f_matching(&sys, &net, &desired, x).unwrap());
        let t = mean(&|x| f_transient(&sys, &net, &desired, x).unwrap());
        let c = mean(&|x| f_comp(&sys, &net, &desired, x).unwrap());
        let e = f_eq(&sys, &net, &desired, &batch).unwrap();
        let l = f_lyap(&sys, &net, &desired, &batch).unwrap();
        for (a, b) in [
            (r.f_matching, m),
            (r.f_transient, t),
            (r.f_comp, c),
            (r.f_eq, e),
            (r.f_lyap, l),
        ] {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()), "{a} vs {b}");
        }
        let sum = r.f_transient + r.f_eq + r.f_lyap + r.f_matching + 0.7 * r.f_comp;
        assert!((r.total - sum).abs() <= 1e-12);
    }

    #[test]
    fn zero_heads_leave_only_spectral_terms() {
        let sys = pendulum();
        let net =
            SurrogateNet::with_options(1, &widths_for(1, &DEFAULT_HIDDEN), 1e-6, 0.0).unwrap();
        let desired = ds(0.0, 0.0, 0.0);
        let batch: Vec<State> = [(0.01, 0.02), (-0.02, 0.0), (0.0, -0.01)]
            .iter()
            .map(|&(q, p)| State::new(vec![q], vec![p]))
            .collect();
        let r = total_loss(&sys, &net, &desired, &batch).unwrap();
        assert_eq!(r.f_matching, 0.0);
        assert_eq!(r.f_eq, 0.0);
        assert!((r.total - (r.f_transient + r.f_lyap)).abs() < 1e-15);
        assert!(r.f_transient > 0.0);
    }

    #[test]
    fn lambda_zero_ignores_comp() {
        let sys = pendulum();
        let net = SurrogateNet::init(4, &widths_for(1, &DEFAULT_HIDDEN)).unwrap();
        let batch = vec![State::new(vec![1.0], vec![0.5])];
        let a = total_loss(&sys, &net, &ds(1.0, FRAC_PI_2, 0.0), &batch).unwrap();
        let b = total_loss(
            &sys,
            &net,
            &DesiredStructure::new(
                Mat::diag(&[1.0]),
                Mat::zeros(1, 1),
                State::new(vec![FRAC_PI_2], vec![0.0]),
                0.1,
                0.1,
                0.0,
                Mat::diag(&[50.0]),
            )
            .unwrap(),
            &batch,
        )
        .unwrap();
        assert_ne!(a.f_comp, b.f_comp);
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn constructed_quadratic_meets_equilibrium_and_curvature() {
        // H_d = H + H_a with H_a chosen so that H_d = ½(q − q*)²·k + ½p².
        let k = 0.8;
        let q_star = 0.4;
        let mut x = [0.0; 2];
        for &(q, p) in &[(q_star, 0.0), (1.0, 0.5), (-0.5, 2.0)] {
            x[0] = q;
            x[1] = p;
            let (h, g, hess) = field(
                |v| (v[0].clone() - q_star).square() * (0.5 * k) + v[1].clone().square() * 0.5,
                &x,
            );
            assert!(h >= 0.0);
            if q == q_star {
                assert!(sq_norm(&g) == 0.0);
            }
            assert_eq!(lyapunov_term(&hess, 0.5).unwrap().0, 0.0);
            assert!(sym_eigen(&hess).unwrap().values[0] >= 0.5);
        }
    }

    #[test]
    fn term_gradients_match_finite_differences() {
        let sys = MechanicalPH::double_pendulum(1.0, 1.0, 1.0, 1.0, 9.81);
        let mut net = SurrogateNet::init(6, &widths_for(2, &[5, 5])).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let theta: Vec<f64> = net
            .theta()
            .iter()
            .map(|_| rng.gen_range(-0.7..0.7))
            .collect();
        net.set_theta(&theta).unwrap();
        let desired = DesiredStructure::new(
            Mat::diag(&[1.0, 0.5]),
            Mat::zeros(2, 2),
            State::new(vec![0.3, -0.3], vec![0.0, 0.0]),
            1.5,
            3.0,
            1.0,
            Mat::identity(2),
        )
        .unwrap();
        let batch: Vec<State> = (0..4)
            .map(|_| {
                State::new(
                    vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                    vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
                )
            })
            .collect();
        let problem = LossProblem::new(&sys, &desired, &batch).unwrap();
        let r = problem.evaluate(&net, GradientMode::PerTerm).unwrap();
        let g = r.grad_terms.clone().unwrap();
        let at = |th: &[f64]| {
            let mut n2 = net.clone();
            n2.set_theta(th).unwrap();
            problem.evaluate(&n2, GradientMode::None).unwrap().terms()
        };
        let total = problem
            .evaluate(&net, GradientMode::Total)
            .unwrap()
            .grad_total
            .unwrap();
        for k in 0..net.num_params() {
            let mut up = theta.clone();
            let mut dn = theta.clone();
            up[k] += 1e-5;
            dn[k] -= 1e-5;
            let (a, b) = (at(&up), at(&dn));
            let analytic = [
                g.f_transient[k],
                g.f_eq[k],
                g.f_lyap[k],
                g.f_matching[k],
                g.f_comp[k],
            ];
            for t in 0..5 {
                let fd = (a[t] - b[t]) / 2e-5;
                assert!(
                    (fd - analytic[t]).abs() <= 1e-4 * fd.abs().max(1e-2),
                    "param {k} term {t}: {fd} vs {}",
                    analytic[t]
                );
            }
            let sum: f64 = analytic.iter().sum();
            assert!((total[k] - sum).abs() <= 1e-10 * (1.0 + sum.abs()));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn terms_are_nonnegative(seed in 0u64..10_000, j in -0.8..2.0f64) {
            let sys = pendulum();
            let mut net = SurrogateNet::init(seed, &widths_for(1, &[6, 6])).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta: Vec<f64> = net.theta().iter().map(|_| rng.gen_range(-1.0..1.0)).collect();
            net.set_theta(&theta).unwrap();
            let batch: Vec<State> = (0..5)
                .map(|_| State::new(vec![rng.gen_range(-3.0..3.0)], vec![rng.gen_range(-3.0..3.0)]))
                .collect();
            let r = total_loss(&sys, &net, &ds(j, FRAC_PI_2, 1.0), &batch).unwrap();
            prop_assert!(r.terms().iter().all(|&v| v >= 0.0));
            let sum = r.f_transient + r.f_eq + r.f_lyap + r.f_matching + r.f_comp;
            prop_assert!((r.total - sum).abs() <= 1e-12 * (1.0 + sum));
        }
    }
}
