//! Neural parameterization of the auxiliary energy `H_a(θ; x)` and the
//! auxiliary damping block `R₂(θ; x)`, and assembly of the desired
//! closed-loop quantities `J_d`, `R_d`, `H_d`, `F_d`.
//!
//! One tanh MLP with a shared trunk feeds two linear heads: output 0 is
//! `H_a` and the remaining `n(n+1)/2` outputs are the row-major lower
//! triangle of a factor `L`, giving `R₂ = L Lᵀ + εI`.
//!
//! The training path evaluates the network on second-order input jets in a
//! fused form: every neuron carries `1 + d + d(d+1)/2` components (value,
//! input gradient, packed input Hessian) so one forward and one backward pass
//! give `∂/∂θ` of any loss built from `H_a`, `∂H_a/∂x`, `∂²H_a/∂x²` and `L`.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{packed_len, variables, Jet2, Real};
use crate::numerics::{sym_eigen, Mat, NumericsError};
use crate::ph::{EnergyJet, MechanicalPH, PhError, State, SystemSpec};

pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const DEFAULT_HIDDEN: [usize; 3] = [20, 20, 20];
pub const DEFAULT_DAMPING_INIT: f64 = 1.0;

const CHECKPOINT_FORMAT: &str = "neural-ida-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("invalid network configuration: {0}")]
    Config(String),
    #[error("invalid desired structure: {0}")]
    Desired(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] PhError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Dense tanh network with an `H_a` head and an `L`-factor head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurrogateNet {
    widths: Vec<usize>,
    seed: u64,
    epsilon: f64,
    damping_init: f64,
    /// Optional affine input map `z = (x − offset) ⊙ scale`; empty means
    /// identity.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    input_offset: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    input_scale: Vec<f64>,
    theta: Vec<f64>,
}

/// Number of `L` entries for `n` degrees of freedom.
pub fn factor_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// `(row, col)` of the `k`-th entry of the row-major lower triangle.
fn lower_entry(k: usize) -> (usize, usize) {
    let mut row = 0;
    while (row + 1) * (row + 2) / 2 <= k {
        row += 1;
    }
    (row, k - row * (row + 1) / 2)
}

/// Widths `(2n, hidden…, 1 + n(n+1)/2)`.
pub fn widths_for(n: usize, hidden: &[usize]) -> Vec<usize> {
    let mut w = vec![2 * n];
    w.extend_from_slice(hidden);
    w.push(1 + factor_len(n));
    w
}

pub fn parameter_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl SurrogateNet {
    /// Xavier-uniform weights, zero biases, zero `H_a` head, and an `L` head
    /// whose output is the constant `sqrt(damping_init)·I`.
    pub fn init(seed: u64, widths: &[usize]) -> Result<Self, SurrogateError> {
        Self::with_options(seed, widths, DEFAULT_EPSILON, DEFAULT_DAMPING_INIT)
    }

    pub fn with_options(
        seed: u64,
        widths: &[usize],
        epsilon: f64,
        damping_init: f64,
    ) -> Result<Self, SurrogateError> {
        validate_widths(widths)?;
        if !(epsilon.is_finite() && epsilon > 0.0) {
            return Err(SurrogateError::Config(format!(
                "epsilon must be positive, got {epsilon}"
            )));
        }
        if !(damping_init.is_finite() && damping_init >= 0.0) {
            return Err(SurrogateError::Config(format!(
                "damping_init must be non-negative, got {damping_init}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut theta = Vec::with_capacity(parameter_count(widths));
        let last = widths.len() - 2;
        for (k, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let start = theta.len();
            for _ in 0..fan_in * fan_out {
                theta.push(rng.gen_range(-bound..bound));
            }
            theta.extend(std::iter::repeat(0.0).take(fan_out));
            if k == last {
                // Heads: deterministic start H_a ≡ 0, L ≡ sqrt(damping_init)·I.
                theta[start..].iter_mut().for_each(|v| *v = 0.0);
                let bias = start + fan_in * fan_out;
                for j in 1..fan_out {
                    let (r, c) = lower_entry(j - 1);
                    if r == c {
                        theta[bias + j] = damping_init.sqrt();
                    }
                }
            }
        }
        Ok(Self {
            widths: widths.to_vec(),
            seed,
            epsilon,
            damping_init,
            input_offset: Vec::new(),
            input_scale: Vec::new(),
            theta,
        })
    }

    /// Maps the box `[lower, upper]` onto `[−1, 1]` before the first layer.
    /// Degenerate intervals are only shifted. At initialization the outputs
    /// do not depend on the input, so this leaves the initial network
    /// function unchanged.
    pub fn with_input_normalization(
        mut self,
        lower: &[f64],
        upper: &[f64],
    ) -> Result<Self, SurrogateError> {
        let d = self.widths[0];
        if lower.len() != d || upper.len() != d {
            return Err(SurrogateError::Dimension {
                expected: d,
                got: lower.len().min(upper.len()),
            });
        }
        let mut offset = Vec::with_capacity(d);
        let mut scale = Vec::with_capacity(d);
        for (&lo, &hi) in lower.iter().zip(upper) {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(SurrogateError::Config(format!(
                    "normalization interval [{lo}, {hi}] is invalid"
                )));
            }
            offset.push(0.5 * (lo + hi));
            scale.push(if hi > lo { 2.0 / (hi - lo) } else { 1.0 });
        }
        self.input_offset = offset;
        self.input_scale = scale;
        Ok(self)
    }

    /// `(offset, scale)` of the input map, if any.
    pub fn input_normalization(&self) -> Option<(&[f64], &[f64])> {
        (!self.input_scale.is_empty())
            .then(|| (self.input_offset.as_slice(), self.input_scale.as_slice()))
    }

    fn validate_normalization(&self) -> Result<(), SurrogateError> {
        let d = self.widths[0];
        let (o, s) = (&self.input_offset, &self.input_scale);
        if o.len() != s.len() || !(s.is_empty() || s.len() == d) {
            return Err(SurrogateError::Checkpoint(
                "input normalization has the wrong size".into(),
            ));
        }
        if o.iter().any(|v| !v.is_finite()) || s.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(SurrogateError::Checkpoint(
                "input normalization must be finite and positive".into(),
            ));
        }
        Ok(())
    }

    fn normalize<T: Real>(&self, x: &[T]) -> Vec<T> {
        if self.input_scale.is_empty() {
            return x.to_vec();
        }
        x.iter()
            .zip(self.input_offset.iter().zip(&self.input_scale))
            .map(|(v, (&o, &s))| (v.clone() - o) * s)
            .collect()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn damping_init(&self) -> f64 {
        self.damping_init
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn num_params(&self) -> usize {
        self.theta.len()
    }

    /// Degrees of freedom `n` of the system this net is sized for.
    pub fn dof(&self) -> usize {
        self.widths[0] / 2
    }

    pub fn set_theta(&mut self, theta: &[f64]) -> Result<(), SurrogateError> {
        if theta.len() != self.theta.len() {
            return Err(SurrogateError::Dimension {
                expected: self.theta.len(),
                got: theta.len(),
            });
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(SurrogateError::Config("parameters must be finite".into()));
        }
        self.theta.copy_from_slice(theta);
        Ok(())
    }

    fn check_input<T>(&self, x: &[T]) -> Result<(), SurrogateError> {
        if x.len() != self.widths[0] {
            return Err(SurrogateError::Dimension {
                expected: self.widths[0],
                got: x.len(),
            });
        }
        Ok(())
    }

    /// All network outputs for a generic-scalar input.
    pub fn forward<T: Real>(&self, x: &[T]) -> Vec<T> {
        let lifted: Vec<T> = self.theta.iter().map(|&w| x[0].lift(w)).collect();
        forward_with(&self.widths, &lifted, &self.normalize(x))
    }

    /// `H_a(x)`.
    pub fn eval_ha(&self, x: &State) -> Result<f64, SurrogateError> {
        let flat = x.to_flat();
        self.check_input(&flat)?;
        Ok(self.forward(&flat)[0])
    }

    /// `H_a`, `∂H_a/∂x` and `∂²H_a/∂x²` at `x`.
    pub fn eval_ha_jet(&self, x: &State) -> Result<EnergyJet, SurrogateError> {
        let flat = x.to_flat();
        self.check_input(&flat)?;
        let vars = variables(&flat);
        let out = self.forward(&vars).swap_remove(0);
        let (grad, hess) = out.expanded(flat.len());
        let jet = Jet2 {
            value: out.value,
            grad,
            hess,
        };
        Ok(EnergyJet {
            value: jet.value,
            hess: jet.hessian_mat(),
            grad: jet.grad,
        })
    }

    /// Lower-triangular factor `L(x)`.
    pub fn eval_factor(&self, x: &State) -> Result<Mat, SurrogateError> {
        let flat = x.to_flat();
        self.check_input(&flat)?;
        let out = self.forward(&flat);
        Ok(factor_from_entries(self.dof(), &out[1..]))
    }

    /// `R₂(x) = L Lᵀ + εI`.
    pub fn eval_r2(&self, x: &State) -> Result<Mat, SurrogateError> {
        let l = self.eval_factor(x)?;
        let n = l.rows();
        Ok(l.matmul(&l.transpose())
            .add(&Mat::identity(n).scale(self.epsilon)))
    }

    /// `H_a` jet and `R₂` from one fused forward pass; the fast path behind
    /// [`assemble`].
    pub fn eval_point(&self, x: &State) -> Result<(EnergyJet, Mat), SurrogateError> {
        let flat = x.to_flat();
        self.check_input(&flat)?;
        let d = flat.len();
        let mut ws = JetWorkspace::new(self, 1);
        let out = self.forward_jet(&flat, &mut ws);
        let mut hess = Mat::zeros(d, d);
        for (&(i, j), &v) in ws.pairs().iter().zip(&out.ha_hess) {
            hess.set(i, j, v);
            hess.set(j, i, v);
        }
        let l = factor_from_entries(self.dof(), &out.factor);
        let r2 = l
            .matmul(&l.transpose())
            .add(&Mat::identity(l.rows()).scale(self.epsilon));
        let jet = EnergyJet {
            value: out.ha,
            grad: out.ha_grad,
            hess,
        };
        Ok((jet, r2))
    }

    /// Layout helpers for the flat parameter vector.
    fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.widths.len() - 1);
        let mut off = 0;
        for w in self.widths.windows(2) {
            out.push((off, off + w[0] * w[1]));
            off += w[0] * w[1] + w[1];
        }
        out
    }

    pub fn workspace(&self) -> JetWorkspace {
        JetWorkspace::new(self, BLOCK)
    }

    pub fn seed_block(&self) -> SeedBlock {
        SeedBlock::new(self, BLOCK)
    }

    /// Fused jet forward pass at a block of points (`xs` holds `b × 2n`
    /// coordinates, `b ≤ BLOCK`). Results stay in `ws` for
    /// [`JetWorkspace::ha`], [`JetWorkspace::factor`] and a later
    /// [`SurrogateNet::backward_block`].
    pub fn forward_block(&self, xs: &[f64], ws: &mut JetWorkspace) {
        let d = ws.d;
        let c = ws.c;
        let rs = ws.stride();
        let len = xs.len() / d;
        assert!(
            len >= 1 && len <= ws.cap && xs.len() == len * d,
            "bad block size"
        );
        ws.len = len;
        let used = len * c;
        for i in 0..d {
            let (off, scale) = match self.input_normalization() {
                Some((o, s)) => (o[i], s[i]),
                None => (0.0, 1.0),
            };
            let row = &mut ws.input[i * rs..i * rs + used];
            row.iter_mut().for_each(|v| *v = 0.0);
            for b in 0..len {
                row[b * c] = (xs[b * d + i] - off) * scale;
                row[b * c + 1 + i] = scale;
            }
        }
        let layers = self.widths.len() - 1;
        for k in 0..layers {
            let (w_off, b_off) = ws.offsets[k];
            let n_in = self.widths[k];
            let n_out = self.widths[k + 1];
            let w = &self.theta[w_off..w_off + n_in * n_out];
            let bias = &self.theta[b_off..b_off + n_out];
            let prev: &[f64] = if k == 0 { &ws.input } else { &ws.post[k - 1] };
            let z = &mut ws.pre[k];
            for o in 0..n_out {
                let dst = &mut z[o * rs..o * rs + used];
                dst.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..n_in {
                    let wi = w[o * n_in + i];
                    let src = &prev[i * rs..i * rs + used];
                    for (dv, sv) in dst.iter_mut().zip(src) {
                        *dv += wi * sv;
                    }
                }
                for b in 0..len {
                    dst[b * c] += bias[o];
                }
            }
            if k + 1 < layers {
                let (z, a, deriv) = (&ws.pre[k], &mut ws.post[k], &mut ws.deriv[k]);
                for o in 0..n_out {
                    for b in 0..len {
                        let at = o * rs + b * c;
                        deriv[o * ws.cap + b] =
                            tanh_jet(&z[at..at + c], &mut a[at..at + c], d, &ws.pairs);
                    }
                }
            }
        }
    }

    /// Accumulates `∂loss/∂θ` into `grad` given output adjoints for the
    /// block from the last [`SurrogateNet::forward_block`].
    pub fn backward_block(&self, ws: &mut JetWorkspace, seed: &SeedBlock, grad: &mut [f64]) {
        let d = ws.d;
        let c = ws.c;
        let rs = ws.stride();
        let len = ws.len;
        let used = len * c;
        let layers = self.widths.len() - 1;
        let n_last = self.widths[layers];
        for o in 0..n_last {
            ws.adj_z[o * rs..o * rs + used].copy_from_slice(&seed.data[o * rs..o * rs + used]);
        }
        for k in (0..layers).rev() {
            let (w_off, b_off) = ws.offsets[k];
            let n_in = self.widths[k];
            let n_out = self.widths[k + 1];
            let prev: &[f64] = if k == 0 { &ws.input } else { &ws.post[k - 1] };
            let gz = &ws.adj_z;
            for o in 0..n_out {
                let go = &gz[o * rs..o * rs + used];
                grad[b_off + o] += (0..len).map(|b| go[b * c]).sum::<f64>();
                let row = &mut grad[w_off + o * n_in..w_off + (o + 1) * n_in];
                for (i, g) in row.iter_mut().enumerate() {
                    *g += dot(go, &prev[i * rs..i * rs + used]);
                }
            }
            if k == 0 {
                break;
            }
            let w = &self.theta[w_off..w_off + n_in * n_out];
            let ga = &mut ws.adj_a;
            for i in 0..n_in {
                let dst = &mut ga[i * rs..i * rs + used];
                dst.iter_mut().for_each(|v| *v = 0.0);
                for o in 0..n_out {
                    let wi = w[o * n_in + i];
                    for (dv, gv) in dst.iter_mut().zip(&gz[o * rs..o * rs + used]) {
                        *dv += wi * gv;
                    }
                }
            }
            let (z, deriv) = (&ws.pre[k - 1], &ws.deriv[k - 1]);
            for i in 0..n_in {
                for b in 0..len {
                    let at = i * rs + b * c;
                    tanh_jet_backward(
                        &z[at..at + c],
                        &deriv[i * ws.cap + b],
                        &ws.adj_a[at..at + c],
                        &mut ws.adj_z[at..at + c],
                        d,
                        &ws.pairs,
                    );
                }
            }
        }
    }

    /// Single-point form of [`SurrogateNet::forward_block`].
    pub fn forward_jet(&self, x: &[f64], ws: &mut JetWorkspace) -> PointOutput {
        self.forward_block(x, ws);
        let jet = ws.ha(0);
        let d = ws.d;
        PointOutput {
            ha: jet[0],
            ha_grad: jet[1..1 + d].to_vec(),
            ha_hess: jet[1 + d..].to_vec(),
            factor: (0..factor_len(self.dof()))
                .map(|k| ws.factor(0, k))
                .collect(),
        }
    }

    /// Single-point form of [`SurrogateNet::backward_block`].
    pub fn backward(&self, ws: &mut JetWorkspace, seed: &OutputAdjoint, grad: &mut [f64]) {
        let mut block = SeedBlock::new(self, ws.cap);
        let d = ws.d;
        let s = block.ha_mut(0);
        s[0] = seed.ha;
        s[1..1 + d].copy_from_slice(&seed.ha_grad);
        s[1 + d..].copy_from_slice(&seed.ha_hess);
        for (k, v) in seed.factor.iter().enumerate() {
            *block.factor_mut(0, k) = *v;
        }
        self.backward_block(ws, &block, grad);
    }
}

fn validate_widths(widths: &[usize]) -> Result<(), SurrogateError> {
    if widths.len() < 2 {
        return Err(SurrogateError::Config(
            "need at least input and output widths".into(),
        ));
    }
    if let Some(k) = widths.iter().position(|&w| w == 0) {
        return Err(SurrogateError::Config(format!("layer {k} has zero width")));
    }
    let input = widths[0];
    if input % 2 != 0 {
        return Err(SurrogateError::Config(format!(
            "input width must be even (2n), got {input}"
        )));
    }
    let n = input / 2;
    let out = *widths.last().unwrap();
    if out != 1 + factor_len(n) {
        return Err(SurrogateError::Config(format!(
            "output width must be {} for n = {n}, got {out}",
            1 + factor_len(n)
        )));
    }
    Ok(())
}

fn forward_with<T: Real>(widths: &[usize], theta: &[T], x: &[T]) -> Vec<T> {
    let mut a: Vec<T> = x.to_vec();
    let mut off = 0;
    let layers = widths.len() - 1;
    for k in 0..layers {
        let (n_in, n_out) = (widths[k], widths[k + 1]);
        let w = &theta[off..off + n_in * n_out];
        let b = &theta[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        let mut z = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let mut acc = b[o].clone();
            for i in 0..n_in {
                acc = acc + w[o * n_in + i].clone() * a[i].clone();
            }
            z.push(if k + 1 < layers { acc.tanh() } else { acc });
        }
        a = z;
    }
    a
}

/// Network outputs with `θ` itself generic, used to check the fused backward
/// pass against tape-based reverse mode.
pub fn forward_generic<T: Real>(widths: &[usize], theta: &[T], x: &[T]) -> Vec<T> {
    forward_with(widths, theta, x)
}

pub fn factor_from_entries(n: usize, entries: &[f64]) -> Mat {
    let mut l = Mat::zeros(n, n);
    for (k, v) in entries.iter().take(factor_len(n)).enumerate() {
        let (r, c) = lower_entry(k);
        l.set(r, c, *v);
    }
    l
}

/// Adjoint of `R₂ = L Lᵀ + εI`: maps `∂loss/∂R₂` (full, possibly asymmetric)
/// to `∂loss/∂L` over the row-major lower triangle.
pub fn factor_adjoint(n: usize, entries: &[f64], r2_adjoint: &Mat) -> Vec<f64> {
    let l = factor_from_entries(n, entries);
    let g = r2_adjoint.add(&r2_adjoint.transpose()).matmul(&l);
    (0..factor_len(n))
        .map(|k| {
            let (r, c) = lower_entry(k);
            g.get(r, c)
        })
        .collect()
}

/// Dot product with four independent accumulators (fixed order).
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Applies tanh to one jet and returns `tanh` with its first three
/// derivatives at the value.
#[inline]
fn tanh_jet(z: &[f64], a: &mut [f64], d: usize, pairs: &[(usize, usize)]) -> [f64; 4] {
    let t = z[0].tanh();
    let t1 = 1.0 - t * t;
    let t2 = -2.0 * t * t1;
    let t3 = -2.0 * (t1 * t1 + t * t2);
    a[0] = t;
    for i in 0..d {
        a[1 + i] = t1 * z[1 + i];
    }
    for (p, &(i, j)) in pairs.iter().enumerate() {
        a[1 + d + p] = t1 * z[1 + d + p] + t2 * z[1 + i] * z[1 + j];
    }
    [t, t1, t2, t3]
}

#[inline]
fn tanh_jet_backward(
    z: &[f64],
    deriv: &[f64; 4],
    ga: &[f64],
    gz: &mut [f64],
    d: usize,
    pairs: &[(usize, usize)],
) {
    let [_, t1, t2, t3] = *deriv;
    let mut g0 = ga[0] * t1;
    for i in 0..d {
        gz[1 + i] = ga[1 + i] * t1;
        g0 += ga[1 + i] * t2 * z[1 + i];
    }
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let gp = ga[1 + d + p];
        gz[1 + d + p] = gp * t1;
        g0 += gp * (t2 * z[1 + d + p] + t3 * z[1 + i] * z[1 + j]);
        gz[1 + i] += gp * t2 * z[1 + j];
        gz[1 + j] += gp * t2 * z[1 + i];
    }
    gz[0] = g0;
}

/// Points evaluated together by the fused passes.
pub const BLOCK: usize = 32;

/// Scratch buffers for the fused jet passes. Buffers are laid out
/// `[neuron][point][component]` so each layer is a small matrix product
/// over contiguous rows.
#[derive(Debug, Clone)]
pub struct JetWorkspace {
    d: usize,
    c: usize,
    cap: usize,
    len: usize,
    pairs: Vec<(usize, usize)>,
    offsets: Vec<(usize, usize)>,
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    deriv: Vec<Vec<[f64; 4]>>,
    adj_a: Vec<f64>,
    adj_z: Vec<f64>,
}

impl JetWorkspace {
    fn new(net: &SurrogateNet, cap: usize) -> Self {
        let d = net.widths[0];
        let mut pairs = Vec::with_capacity(packed_len(d));
        for i in 0..d {
            for j in i..d {
                pairs.push((i, j));
            }
        }
        let c = 1 + d + pairs.len();
        let rs = cap * c;
        let widest = *net.widths.iter().max().unwrap();
        Self {
            d,
            c,
            cap,
            len: 0,
            offsets: net.layer_offsets(),
            input: vec![0.0; d * rs],
            pre: net.widths[1..].iter().map(|&w| vec![0.0; w * rs]).collect(),
            post: net.widths[1..].iter().map(|&w| vec![0.0; w * rs]).collect(),
            deriv: net.widths[1..]
                .iter()
                .map(|&w| vec![[0.0; 4]; w * cap])
                .collect(),
            adj_a: vec![0.0; widest * rs],
            adj_z: vec![0.0; widest * rs],
            pairs,
        }
    }

    fn stride(&self) -> usize {
        self.cap * self.c
    }

    /// Maximum points per block.
    pub fn capacity(&self) -> usize {
        self.cap
    }

    /// Packed Hessian index pairs `(i, j)`, `i ≤ j`, in storage order.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// `H_a` jet of point `b`: value, gradient, packed Hessian.
    pub fn ha(&self, b: usize) -> &[f64] {
        let z = self.pre.last().unwrap();
        &z[b * self.c..(b + 1) * self.c]
    }

    /// Entry `k` of the `L` factor at point `b`.
    pub fn factor(&self, b: usize, k: usize) -> f64 {
        self.pre.last().unwrap()[(k + 1) * self.stride() + b * self.c]
    }
}

/// Output adjoints for one block, laid out like the workspace rows.
#[derive(Debug, Clone)]
pub struct SeedBlock {
    c: usize,
    rs: usize,
    data: Vec<f64>,
}

impl SeedBlock {
    fn new(net: &SurrogateNet, cap: usize) -> Self {
        let d = net.widths[0];
        let c = 1 + d + packed_len(d);
        let out = net.widths[net.widths.len() - 1];
        Self {
            c,
            rs: cap * c,
            data: vec![0.0; out * cap * c],
        }
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|v| *v = 0.0);
    }

    /// Adjoint of the `H_a` jet at point `b`.
    pub fn ha_mut(&mut self, b: usize) -> &mut [f64] {
        &mut self.data[b * self.c..(b + 1) * self.c]
    }

    pub fn factor_mut(&mut self, b: usize, k: usize) -> &mut f64 {
        &mut self.data[(k + 1) * self.rs + b * self.c]
    }

    /// `self += w · other`.
    pub fn add_scaled(&mut self, w: f64, other: &SeedBlock) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += w * b;
        }
    }
}

/// Network outputs at one point: the `H_a` jet and the `L` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct PointOutput {
    pub ha: f64,
    pub ha_grad: Vec<f64>,
    /// Packed upper Hessian.
    pub ha_hess: Vec<f64>,
    pub factor: Vec<f64>,
}

/// Adjoint (sensitivity of a scalar loss) of every [`PointOutput`] field.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputAdjoint {
    pub ha: f64,
    pub ha_grad: Vec<f64>,
    pub ha_hess: Vec<f64>,
    pub factor: Vec<f64>,
}

impl OutputAdjoint {
    pub fn zeros(n: usize) -> Self {
        let d = 2 * n;
        Self {
            ha: 0.0,
            ha_grad: vec![0.0; d],
            ha_hess: vec![0.0; packed_len(d)],
            factor: vec![0.0; factor_len(n)],
        }
    }

    pub fn clear(&mut self) {
        self.ha = 0.0;
        self.ha_grad.iter_mut().for_each(|v| *v = 0.0);
        self.ha_hess.iter_mut().for_each(|v| *v = 0.0);
        self.factor.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// User-chosen parts of the closed loop: the constant interconnection blocks
/// `J₁`, `J₂`, the target `x*` and the residual settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DesiredStructureFile", into = "DesiredStructureFile")]
pub struct DesiredStructure {
    j1: Mat,
    j2: Mat,
    x_star: State,
    c_transient: f64,
    c_lyap: f64,
    lambda_comp: f64,
    k_p_comp: Mat,
}

#[derive(Serialize, Deserialize)]
struct DesiredStructureFile {
    j1: Vec<Vec<f64>>,
    j2: Vec<Vec<f64>>,
    x_star: Vec<f64>,
    c_transient: f64,
    c_lyap: f64,
    lambda_comp: f64,
    k_p_comp: Vec<Vec<f64>>,
}

impl TryFrom<DesiredStructureFile> for DesiredStructure {
    type Error = SurrogateError;

    fn try_from(f: DesiredStructureFile) -> Result<Self, Self::Error> {
        if f.x_star.len() % 2 != 0 {
            return Err(SurrogateError::Desired(
                "x_star must have even length".into(),
            ));
        }
        DesiredStructure::new(
            Mat::from_rows(&f.j1)?,
            Mat::from_rows(&f.j2)?,
            State::from_flat(&f.x_star),
            f.c_transient,
            f.c_lyap,
            f.lambda_comp,
            Mat::from_rows(&f.k_p_comp)?,
        )
    }
}

impl From<DesiredStructure> for DesiredStructureFile {
    fn from(d: DesiredStructure) -> Self {
        Self {
            j1: d.j1.to_rows(),
            j2: d.j2.to_rows(),
            x_star: d.x_star.to_flat(),
            c_transient: d.c_transient,
            c_lyap: d.c_lyap,
            lambda_comp: d.lambda_comp,
            k_p_comp: d.k_p_comp.to_rows(),
        }
    }
}

impl DesiredStructure {
    pub fn new(
        j1: Mat,
        j2: Mat,
        x_star: State,
        c_transient: f64,
        c_lyap: f64,
        lambda_comp: f64,
        k_p_comp: Mat,
    ) -> Result<Self, SurrogateError> {
        let n = x_star.dof();
        let square = |m: &Mat, name: &str| {
            if m.rows() != n || m.cols() != n {
                Err(SurrogateError::Desired(format!(
                    "{name} must be {n}x{n}, got {}x{}",
                    m.rows(),
                    m.cols()
                )))
            } else {
                Ok(())
            }
        };
        square(&j1, "j1")?;
        square(&j2, "j2")?;
        square(&k_p_comp, "k_p_comp")?;
        if j2.add(&j2.transpose()).max_abs() != 0.0 {
            return Err(SurrogateError::Desired("j2 must be skew-symmetric".into()));
        }
        if !x_star.is_finite() {
            return Err(SurrogateError::Desired("x_star must be finite".into()));
        }
        if x_star.p.iter().any(|&v| v != 0.0) {
            return Err(SurrogateError::Desired(
                "x_star must have zero momentum".into(),
            ));
        }
        if !(c_transient.is_finite() && c_transient > 0.0) {
            return Err(SurrogateError::Desired(format!(
                "c_transient must be positive, got {c_transient}"
            )));
        }
        if !(c_lyap.is_finite() && c_lyap > 0.0) {
            return Err(SurrogateError::Desired(format!(
                "c_lyap must be positive, got {c_lyap}"
            )));
        }
        if !(lambda_comp.is_finite() && lambda_comp >= 0.0) {
            return Err(SurrogateError::Desired(format!(
                "lambda_comp must be non-negative, got {lambda_comp}"
            )));
        }
        if k_p_comp.asymmetry() > 0.0 || crate::numerics::cholesky(&k_p_comp).is_err() {
            return Err(SurrogateError::Desired(
                "k_p_comp must be symmetric positive definite".into(),
            ));
        }
        Ok(Self {
            j1,
            j2,
            x_star,
            c_transient,
            c_lyap,
            lambda_comp,
            k_p_comp,
        })
    }

    pub fn dof(&self) -> usize {
        self.x_star.dof()
    }

    pub fn j1(&self) -> &Mat {
        &self.j1
    }

    pub fn j2(&self) -> &Mat {
        &self.j2
    }

    pub fn x_star(&self) -> &State {
        &self.x_star
    }

    pub fn c_transient(&self) -> f64 {
        self.c_transient
    }

    pub fn c_lyap(&self) -> f64 {
        self.c_lyap
    }

    pub fn lambda_comp(&self) -> f64 {
        self.lambda_comp
    }

    pub fn k_p_comp(&self) -> &Mat {
        &self.k_p_comp
    }

    /// `J_d = J + J_a = [0, I + J₁; −(I + J₁)ᵀ, J₂]`.
    pub fn j_d(&self) -> Mat {
        let n = self.dof();
        let top = Mat::identity(n).add(&self.j1);
        Mat::block(
            &Mat::zeros(n, n),
            &top,
            &top.transpose().scale(-1.0),
            &self.j2,
        )
    }
}

/// Desired closed-loop quantities at one state.
#[derive(Debug, Clone)]
pub struct Assembled {
    pub j_d: Mat,
    pub r_d: Mat,
    pub h_d: f64,
    pub grad_hd: Vec<f64>,
    pub hess_hd: Mat,
    pub f_d: Mat,
}

/// `R_d = blockdiag(0, D + R₂)`.
pub fn desired_damping(sys: &MechanicalPH, r2: &Mat) -> Mat {
    let n = sys.dof();
    let z = Mat::zeros(n, n);
    Mat::block(&z, &z, &z, &sys.dissipation().add(r2))
}

pub fn assemble(
    net: &SurrogateNet,
    ds: &DesiredStructure,
    sys: &MechanicalPH,
    x: &State,
) -> Result<Assembled, SurrogateError> {
    let n = sys.dof();
    if ds.dof() != n || net.dof() != n {
        return Err(SurrogateError::Dimension {
            expected: n,
            got: if ds.dof() != n { ds.dof() } else { net.dof() },
        });
    }
    let h = sys.energy_jet(x)?;
    let (ha, r2) = net.eval_point(x)?;
    let j_d = ds.j_d();
    let r_d = desired_damping(sys, &r2);
    let f_d = j_d.sub(&r_d);
    Ok(Assembled {
        h_d: h.value + ha.value,
        grad_hd: h.grad.iter().zip(&ha.grad).map(|(a, b)| a + b).collect(),
        hess_hd: h.hess.add(&ha.hess),
        j_d,
        r_d,
        f_d,
    })
}

/// Everything needed to rebuild a trained controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format: String,
    version: u32,
    pub system: SystemSpec,
    pub desired: DesiredStructure,
    pub net: SurrogateNet,
}

impl Checkpoint {
    pub fn new(system: SystemSpec, desired: DesiredStructure, net: SurrogateNet) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            system,
            desired,
            net,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, SurrogateError> {
        let ck: Checkpoint =
            serde_json::from_str(text).map_err(|e| SurrogateError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(SurrogateError::Checkpoint(format!(
                "unrecognized format {:?}",
                ck.format
            )));
        }
        if ck.version != CHECKPOINT_VERSION {
            return Err(SurrogateError::Checkpoint(format!(
                "unsupported version {}",
                ck.version
            )));
        }
        validate_widths(&ck.net.widths)?;
        ck.net.validate_normalization()?;
        if ck.net.theta.len() != parameter_count(&ck.net.widths) {
            return Err(SurrogateError::Checkpoint(format!(
                "expected {} parameters, found {}",
                parameter_count(&ck.net.widths),
                ck.net.theta.len()
            )));
        }
        if ck.net.theta.iter().any(|v| !v.is_finite()) {
            return Err(SurrogateError::Checkpoint("non-finite parameter".into()));
        }
        let sys = MechanicalPH::from_spec(&ck.system)?;
        if sys.dof() != ck.net.dof() || sys.dof() != ck.desired.dof() {
            return Err(SurrogateError::Checkpoint(
                "system, network and desired structure disagree on dimension".into(),
            ));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<(), SurrogateError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir)?;
            }
        }
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SurrogateError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn system(&self) -> Result<MechanicalPH, SurrogateError> {
        Ok(MechanicalPH::from_spec(&self.system)?)
    }
}

/// Smallest eigenvalue of `R₂(x)`; used by invariant checks.
pub fn min_r2_eigenvalue(net: &SurrogateNet, x: &State) -> Result<f64, SurrogateError> {
    Ok(sym_eigen(&net.eval_r2(x)?)?.values[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::FRAC_PI_2;

    fn pendulum_ds(j1: f64) -> DesiredStructure {
        DesiredStructure::new(
            Mat::diag(&[j1]),
            Mat::zeros(1, 1),
            State::new(vec![FRAC_PI_2], vec![0.0]),
            0.1,
            0.1,
            0.0,
            Mat::diag(&[9.81]),
        )
        .unwrap()
    }

    fn randomized(widths: &[usize], seed: u64) -> SurrogateNet {
        let mut net = SurrogateNet::init(seed, widths).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let theta: Vec<f64> = net
            .theta()
            .iter()
            .map(|_| rng.gen_range(-0.8..0.8))
            .collect();
        net.set_theta(&theta).unwrap();
        net
    }

    #[test]
    fn init_is_deterministic_and_sized() {
        let w = widths_for(1, &DEFAULT_HIDDEN);
        assert_eq!(w, vec![2, 20, 20, 20, 2]);
        let a = SurrogateNet::init(7, &w).unwrap();
        let b = SurrogateNet::init(7, &w).unwrap();
        let c = SurrogateNet::init(8, &w).unwrap();
        assert_eq!(a.num_params(), 942);
        assert_eq!(a.theta(), b.theta());
        assert_ne!(a.theta(), c.theta());
        assert!(matches!(
            SurrogateNet::init(1, &[2, 20, 0, 2]),
            Err(SurrogateError::Config(_))
        ));
    }

    #[test]
    fn zero_head_gives_zero_energy_and_epsilon_damping() {
        let w = widths_for(1, &DEFAULT_HIDDEN);
        let net = SurrogateNet::with_options(3, &w, DEFAULT_EPSILON, 0.0).unwrap();
        let x = State::new(vec![0.4], vec![-1.2]);
        assert_eq!(net.eval_ha(&x).unwrap(), 0.0);
        assert_eq!(net.eval_r2(&x).unwrap().to_rows(), vec![vec![1e-6]]);

        let w2 = widths_for(2, &DEFAULT_HIDDEN);
        let net = SurrogateNet::with_options(3, &w2, DEFAULT_EPSILON, 0.0).unwrap();
        let x = State::new(vec![0.4, 0.1], vec![-1.2, 0.3]);
        let jet = net.eval_ha_jet(&x).unwrap();
        assert_eq!(jet.value, 0.0);
        assert!(jet.grad.iter().all(|&g| g == 0.0));
        assert_eq!(net.eval_r2(&x).unwrap(), Mat::identity(2).scale(1e-6));
    }

    #[test]
    fn scalar_factor_squares() {
        let w = widths_for(1, &DEFAULT_HIDDEN);
        let net = SurrogateNet::with_options(3, &w, DEFAULT_EPSILON, 4.0).unwrap();
        let r2 = net.eval_r2(&State::new(vec![1.0], vec![2.0])).unwrap();
        assert_eq!(r2.get(0, 0), 4.0 + 1e-6);
    }

    #[test]
    fn assemble_examples() {
        let sys = MechanicalPH::simple_pendulum(1.0, 1.0, 9.81);
        let w = widths_for(1, &DEFAULT_HIDDEN);
        let net = SurrogateNet::with_options(1, &w, DEFAULT_EPSILON, 0.0).unwrap();
        let x = State::new(vec![0.3], vec![0.7]);

        let zero = DesiredStructure::new(
            Mat::zeros(1, 1),
            Mat::zeros(1, 1),
            State::new(vec![0.0], vec![0.0]),
            0.1,
            0.1,
            0.0,
            Mat::identity(1),
        )
        .unwrap();
        let a = assemble(&net, &zero, &sys, &x).unwrap();
        let h = sys.energy_jet(&x).unwrap();
        let s = sys.structure_matrices(&x);
        let eps_block = desired_damping(&sys, &Mat::diag(&[1e-6]));
        assert_eq!(a.j_d, s.j);
        assert_eq!(a.r_d, s.r.add(&eps_block));
        assert_eq!(a.grad_hd, h.grad);
        assert_eq!(a.hess_hd, h.hess);
        assert_eq!(a.f_d, s.j.sub(&s.r).sub(&eps_block));

        let a = assemble(&net, &pendulum_ds(1.0), &sys, &x).unwrap();
        assert_eq!(a.j_d.to_rows(), vec![vec![0.0, 2.0], vec![-2.0, 0.0]]);
        let a = assemble(&net, &pendulum_ds(-0.5), &sys, &x).unwrap();
        assert_eq!(a.j_d.to_rows(), vec![vec![0.0, 0.5], vec![-0.5, 0.0]]);
    }

    #[test]
    fn desired_structure_validation() {
        let bad_j2 = DesiredStructure::new(
            Mat::zeros(1, 1),
            Mat::diag(&[1.0]),
            State::new(vec![0.0], vec![0.0]),
            0.1,
            0.1,
            0.0,
            Mat::identity(1),
        );
        assert!(bad_j2.is_err());
        let moving = DesiredStructure::new(
            Mat::zeros(1, 1),
            Mat::zeros(1, 1),
            State::new(vec![0.0], vec![1.0]),
            0.1,
            0.1,
            0.0,
            Mat::identity(1),
        );
        assert!(moving.is_err());
    }

    #[test]
    fn fused_forward_matches_generic_jets() {
        for n in [1, 2] {
            let net = randomized(&widths_for(n, &[7, 5]), 21);
            let mut ws = net.workspace();
            let x: Vec<f64> = (0..2 * n).map(|i| 0.3 * i as f64 - 0.4).collect();
            let fused = net.forward_jet(&x, &mut ws);
            let jets = net.forward(&variables(&x));
            assert!((fused.ha - jets[0].value).abs() < 1e-14);
            for (a, b) in fused.ha_grad.iter().zip(&jets[0].grad) {
                assert!((a - b).abs() < 1e-14);
            }
            for (a, b) in fused.ha_hess.iter().zip(&jets[0].hess) {
                assert!((a - b).abs() < 1e-13);
            }
            for (k, v) in fused.factor.iter().enumerate() {
                assert!((v - jets[k + 1].value).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn normalized_inputs_agree_between_paths() {
        let plain = randomized(&widths_for(1, &[6, 6]), 4);
        let net = plain
            .clone()
            .with_input_normalization(&[-1.0, -3.0], &[4.0, 3.0])
            .unwrap();
        let x = [0.7, -1.2];
        let z = [(0.7 - 1.5) * 0.4, -1.2 / 3.0];
        let mut ws = net.workspace();
        let fused = net.forward_jet(&x, &mut ws);
        let jets = net.forward(&variables(&x));
        let raw = plain.forward(&variables(&z));
        assert!((fused.ha - raw[0].value).abs() < 1e-14);
        // Chain rule through the diagonal input map.
        assert!((fused.ha_grad[0] - 0.4 * raw[0].grad[0]).abs() < 1e-13);
        assert!((fused.ha_grad[1] - raw[0].grad[1] / 3.0).abs() < 1e-13);
        for (a, b) in fused.ha_hess.iter().zip(&jets[0].hess) {
            assert!((a - b).abs() < 1e-13);
        }
        let fresh = SurrogateNet::init(0, &widths_for(1, &[6]))
            .unwrap()
            .with_input_normalization(&[0.0, 0.0], &[0.0, 1.0])
            .unwrap();
        assert_eq!(
            fresh.eval_ha(&State::new(vec![0.3], vec![0.2])).unwrap(),
            0.0
        );
    }

    #[test]
    fn fused_backward_matches_tape() {
        let n = 2;
        let plain = randomized(&widths_for(n, &[6, 5]), 4);
        let scaled = plain
            .clone()
            .with_input_normalization(&[-1.0, -2.0, -3.0, 0.5], &[1.0, 3.0, 3.0, 0.5])
            .unwrap();
        for net in [plain, scaled] {
            let x = [0.2, -0.5, 0.9, 0.1];
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut seed = OutputAdjoint::zeros(n);
            seed.ha = rng.gen_range(-1.0..1.0);
            seed.ha_grad
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-1.0..1.0));
            seed.ha_hess
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-1.0..1.0));
            seed.factor
                .iter_mut()
                .for_each(|v| *v = rng.gen_range(-1.0..1.0));

            let mut ws = net.workspace();
            net.forward_jet(&x, &mut ws);
            let mut fused = vec![0.0; net.num_params()];
            net.backward(&mut ws, &seed, &mut fused);

            let tape = Tape::new();
            let theta: Vec<Jet2<_>> = tape
                .leaves(net.theta())
                .into_iter()
                .map(Jet2::constant)
                .collect();
            let xs: Vec<_> = tape.leaves(&x).into_iter().map(|v| v * 1.0).collect();
            let mut inputs = variables(&xs);
            if let Some((o, s)) = net.input_normalization() {
                inputs = inputs
                    .into_iter()
                    .enumerate()
                    .map(|(i, v)| (v - o[i]) * s[i])
                    .collect();
            }
            let out = forward_generic(net.widths(), &theta, &inputs);
            let mut loss = out[0].value * seed.ha;
            for (g, s) in out[0].grad.iter().zip(&seed.ha_grad) {
                loss = loss + *g * *s;
            }
            for (h, s) in out[0].hess.iter().zip(&seed.ha_hess) {
                loss = loss + *h * *s;
            }
            for (o, s) in out[1..].iter().zip(&seed.factor) {
                loss = loss + o.value * *s;
            }
            let adj = tape.gradient(loss).unwrap();
            let leaves: Vec<f64> = (0..net.num_params())
                .map(|k| adj.wrt(theta[k].value))
                .collect();
            for (a, b) in fused.iter().zip(&leaves) {
                assert!((a - b).abs() <= 1e-11 * (1.0 + b.abs()), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn ha_gradient_matches_finite_differences() {
        let net = randomized(&widths_for(2, &DEFAULT_HIDDEN), 5);
        let x = State::new(vec![0.3, -0.2], vec![0.5, 1.1]);
        let jet = net.eval_ha_jet(&x).unwrap();
        let flat = x.to_flat();
        for i in 0..4 {
            let h = 1e-6;
            let mut up = flat.clone();
            let mut dn = flat.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (net.eval_ha(&State::from_flat(&up)).unwrap()
                - net.eval_ha(&State::from_flat(&dn)).unwrap())
                / (2.0 * h);
            assert!((fd - jet.grad[i]).abs() <= 1e-5 * jet.grad[i].abs().max(1e-3));
        }
    }

    #[test]
    fn factor_adjoint_matches_finite_differences() {
        let entries = [0.7, -0.3, 1.2];
        let g = Mat::from_rows(&[vec![0.4, -1.0], vec![0.3, 2.0]]).unwrap();
        let f = |e: &[f64]| {
            let l = factor_from_entries(2, e);
            let r = l.matmul(&l.transpose());
            (0..2)
                .flat_map(|i| (0..2).map(move |j| (i, j)))
                .map(|(i, j)| g.get(i, j) * r.get(i, j))
                .sum::<f64>()
        };
        let adj = factor_adjoint(2, &entries, &g);
        for k in 0..3 {
            let mut up = entries;
            let mut dn = entries;
            up[k] += 1e-6;
            dn[k] -= 1e-6;
            let fd = (f(&up) - f(&dn)) / 2e-6;
            assert!((fd - adj[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn fused_point_matches_generic_jet() {
        let net = randomized(&widths_for(2, &DEFAULT_HIDDEN), 4)
            .with_input_normalization(&[-1.0, -2.0, -1.0, 0.0], &[2.0, 2.0, 1.0, 3.0])
            .unwrap();
        let x = State::new(vec![0.3, -0.7], vec![0.4, 1.1]);
        let (jet, r2) = net.eval_point(&x).unwrap();
        let reference = net.eval_ha_jet(&x).unwrap();
        assert!((jet.value - reference.value).abs() < 1e-12);
        for (a, b) in jet.grad.iter().zip(&reference.grad) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(jet.hess.sub(&reference.hess).max_abs() < 1e-12);
        assert!(r2.sub(&net.eval_r2(&x).unwrap()).max_abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let sys = MechanicalPH::simple_pendulum(1.0, 1.0, 9.81);
        let net = randomized(&widths_for(1, &DEFAULT_HIDDEN), 9);
        let ck = Checkpoint::new(sys.spec(), pendulum_ds(1.0), net);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json(), ck.to_json());

        let text = ck.to_json().replace("\"version\": 1", "\"version\": 99");
        assert!(Checkpoint::from_json(&text).is_err());
    }

    proptest! {
        #[test]
        fn structure_invariants_hold(seed in 0u64..1000, q1 in -3.0..3.0f64, p1 in -3.0..3.0f64, q2 in -3.0..3.0f64, p2 in -3.0..3.0f64) {
            let sys = MechanicalPH::double_pendulum(1.0, 1.0, 1.0, 1.0, 9.81);
            let net = randomized(&widths_for(2, &DEFAULT_HIDDEN), seed);
            let ds = DesiredStructure::new(
                Mat::diag(&[-0.5, -0.5]),
                Mat::zeros(2, 2),
                State::new(vec![0.3, -0.3], vec![0.0, 0.0]),
                0.1, 0.1, 1.0, Mat::identity(2),
            ).unwrap();
            let x = State::new(vec![q1, q2], vec![p1, p2]);
            let a = assemble(&net, &ds, &sys, &x).unwrap();
            prop_assert_eq!(a.j_d.add(&a.j_d.transpose()).max_abs(), 0.0);
            prop_assert!(sym_eigen(&a.r_d).unwrap().values[0] >= 0.0);
            prop_assert!(min_r2_eigenvalue(&net, &x).unwrap() >= 1e-6 * (1.0 - 1e-9));
            let h = net.eval_ha_jet(&x).unwrap();
            prop_assert!(h.hess.asymmetry() <= 1e-12);
        }
    }
}
