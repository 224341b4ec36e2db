//! Collocation sampling and the two-stage optimization schedule: Adam until a
//! windowed relative-change test passes, then L-BFGS refinement.

use std::collections::VecDeque;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::numerics::dot;
use crate::ph::{MechanicalPH, State};
use crate::residuals::{GradientMode, LossProblem, ResidualBreakdown, ResidualError};
use crate::surrogate::{Checkpoint, DesiredStructure, SurrogateError, SurrogateNet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid collocation domain: {0}")]
    Domain(String),
    #[error("invalid optimizer settings: {0}")]
    Optimizer(String),
    #[error("{stage} stage aborted at iteration {iteration}: {message}")]
    Aborted {
        stage: Stage,
        iteration: usize,
        message: String,
        /// Terms at the last finite evaluation, when one exists.
        last: Option<[f64; 6]>,
    },
    #[error(transparent)]
    Residual(#[from] ResidualError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Adam,
    Lbfgs,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Adam => "adam",
            Stage::Lbfgs => "lbfgs",
        })
    }
}

/// Axis-aligned box in state space, `[q…, p…]` ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct CollocationDomain {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub n_points: usize,
    pub seed: u64,
}

impl CollocationDomain {
    /// A degenerate interval `[a, a]` is allowed and yields `a`.
    pub fn validate(&self, x_star: &State) -> Result<(), TrainError> {
        let x = x_star.to_flat();
        if self.lower.len() != x.len() || self.upper.len() != x.len() {
            return Err(TrainError::Domain(format!(
                "bounds must have {} entries",
                x.len()
            )));
        }
        for (i, ((lo, hi), v)) in self.lower.iter().zip(&self.upper).zip(&x).enumerate() {
            if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                return Err(TrainError::Domain(format!(
                    "coordinate {i}: need finite lower <= upper, got [{lo}, {hi}]"
                )));
            }
            if v < lo || v > hi {
                return Err(TrainError::Domain(format!(
                    "coordinate {i}: target {v} outside [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &State) -> bool {
        x.to_flat()
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (lo, hi))| v >= lo && v <= hi)
    }
}

/// `n_points` uniform samples of the box followed by `x*`.
pub fn sample_collocation(
    domain: &CollocationDomain,
    x_star: &State,
) -> Result<Vec<State>, TrainError> {
    domain.validate(x_star)?;
    let mut rng = ChaCha8Rng::seed_from_u64(domain.seed);
    let mut out = Vec::with_capacity(domain.n_points + 1);
    for _ in 0..domain.n_points {
        let flat: Vec<f64> = domain
            .lower
            .iter()
            .zip(&domain.upper)
            .map(|(&lo, &hi)| {
                let u: f64 = rng.gen();
                (lo + (hi - lo) * u).clamp(lo, hi)
            })
            .collect();
        out.push(State::from_flat(&flat));
    }
    out.push(x_star.clone());
    Ok(out)
}

// ---------------------------------------------------------------------------
// Optimizers over a flat parameter vector.

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub tol: f64,
    pub max_iters: usize,
    pub window: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            tol: 1e-6,
            max_iters: 50_000,
            window: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iters: usize,
    /// Stop when the relative loss decrease of an accepted step is below this.
    pub ftol: f64,
    /// Stop when the gradient infinity norm is below this.
    pub gtol: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 5_000,
            ftol: 1e-12,
            gtol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageOutcome {
    pub iterations: usize,
    pub converged: bool,
    pub line_search_failed: bool,
    pub best_loss: f64,
}

/// Objective evaluation failure, carried as text so optimizers stay generic.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFailure(pub String);

type Eval<'a> = dyn FnMut(&[f64]) -> Result<(f64, Vec<f64>), EvalFailure> + 'a;

fn abort(stage: Stage, iteration: usize, message: impl Into<String>) -> TrainError {
    TrainError::Aborted {
        stage,
        iteration,
        message: message.into(),
        last: None,
    }
}

/// Adam with `β₁ = 0.9`, `β₂ = 0.999`, `ε = 1e-8`. Stops once
/// `|L_k − L_{k−w}| / max(L_{k−w}, 1e-12) < tol`. Leaves the best
/// parameters seen in `theta`. `on_iter(k, θ_k, L_k)` runs before each update.
pub fn adam(
    theta: &mut [f64],
    f: &mut Eval<'_>,
    cfg: &AdamConfig,
    on_iter: &mut dyn FnMut(usize, &[f64], f64),
) -> Result<StageOutcome, TrainError> {
    if !(cfg.lr > 0.0 && cfg.tol > 0.0 && cfg.window > 0) {
        return Err(TrainError::Optimizer(
            "adam needs lr > 0, tol > 0 and window > 0".into(),
        ));
    }
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let np = theta.len();
    let mut m = vec![0.0; np];
    let mut v = vec![0.0; np];
    let mut best = theta.to_vec();
    let mut best_loss = f64::INFINITY;
    let mut window: VecDeque<f64> = VecDeque::with_capacity(cfg.window + 1);
    let mut converged = false;
    let mut k = 0;
    let (mut b1t, mut b2t) = (1.0, 1.0);
    while k < cfg.max_iters {
        let (loss, grad) = f(theta).map_err(|e| abort(Stage::Adam, k, e.0))?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(abort(Stage::Adam, k, format!("non-finite loss {loss}")));
        }
        on_iter(k, theta, loss);
        if loss < best_loss {
            best_loss = loss;
            best.copy_from_slice(theta);
        }
        window.push_back(loss);
        if window.len() > cfg.window {
            let old = window.pop_front().unwrap();
            if (loss - old).abs() / old.max(1e-12) < cfg.tol {
                converged = true;
                k += 1;
                break;
            }
        }
        b1t *= B1;
        b2t *= B2;
        for i in 0..np {
            m[i] = B1 * m[i] + (1.0 - B1) * grad[i];
            v[i] = B2 * v[i] + (1.0 - B2) * grad[i] * grad[i];
            let mh = m[i] / (1.0 - b1t);
            let vh = v[i] / (1.0 - b2t);
            theta[i] -= cfg.lr * mh / (vh.sqrt() + EPS);
        }
        k += 1;
    }
    if !converged {
        // The final update has not been evaluated; only keep it if it helps.
        if let Ok((loss, _)) = f(theta) {
            if loss.is_finite() && loss < best_loss {
                best_loss = loss;
                best.copy_from_slice(theta);
            }
        }
    }
    theta.copy_from_slice(&best);
    Ok(StageOutcome {
        iterations: k,
        converged,
        line_search_failed: false,
        best_loss,
    })
}

/// Result of a strong-Wolfe line search along `dir`.
struct LineSearchHit {
    step: f64,
    loss: f64,
    grad: Vec<f64>,
}

const C1: f64 = 1e-4;
const C2: f64 = 0.9;

fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if disc < 0.0 {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let t = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    t.is_finite().then_some(t)
}

#[allow(clippy::too_many_arguments)]
fn strong_wolfe(
    f: &mut Eval<'_>,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    dir: &[f64],
    step0: f64,
    trial: &mut Vec<f64>,
) -> Result<Option<LineSearchHit>, EvalFailure> {
    let d0 = dot(g0, dir);
    if d0 >= 0.0 {
        return Ok(None);
    }
    let mut eval = |a: f64, trial: &mut Vec<f64>| -> Result<(f64, Vec<f64>, f64), EvalFailure> {
        trial.clear();
        trial.extend(x.iter().zip(dir).map(|(xi, di)| xi + a * di));
        let (fa, ga) = f(trial)?;
        let da = if fa.is_finite() {
            dot(&ga, dir)
        } else {
            f64::NAN
        };
        Ok((fa, ga, da))
    };
    let (mut a_prev, mut f_prev, mut d_prev) = (0.0, f0, d0);
    let mut a = step0;
    for i in 0..25 {
        let (fa, ga, da) = eval(a, trial)?;
        if !fa.is_finite() || !da.is_finite() {
            a = 0.5 * (a_prev + a);
            continue;
        }
        if fa > f0 + C1 * a * d0 || (i > 0 && fa >= f_prev) {
            return zoom(
                &mut eval,
                trial,
                f0,
                d0,
                (a_prev, f_prev, d_prev),
                (a, fa, da),
            );
        }
        if da.abs() <= -C2 * d0 {
            return Ok(Some(LineSearchHit {
                step: a,
                loss: fa,
                grad: ga,
            }));
        }
        if da >= 0.0 {
            return zoom(
                &mut eval,
                trial,
                f0,
                d0,
                (a, fa, da),
                (a_prev, f_prev, d_prev),
            );
        }
        a_prev = a;
        f_prev = fa;
        d_prev = da;
        a *= 2.0;
    }
    Ok(None)
}

type Bracket = (f64, f64, f64);

fn zoom(
    eval: &mut dyn FnMut(f64, &mut Vec<f64>) -> Result<(f64, Vec<f64>, f64), EvalFailure>,
    trial: &mut Vec<f64>,
    f0: f64,
    d0: f64,
    mut lo: Bracket,
    mut hi: Bracket,
) -> Result<Option<LineSearchHit>, EvalFailure> {
    for _ in 0..30 {
        let (a_lo, a_hi) = (lo.0, hi.0);
        let left = a_lo.min(a_hi);
        let right = a_lo.max(a_hi);
        let width = right - left;
        if width <= 1e-16 * right.max(1.0) {
            break;
        }
        let mut a = cubic_min(lo.0, lo.1, lo.2, hi.0, hi.1, hi.2).unwrap_or(0.5 * (left + right));
        if a <= left + 0.1 * width || a >= right - 0.1 * width {
            a = 0.5 * (left + right);
        }
        let (fa, ga, da) = eval(a, trial)?;
        if !fa.is_finite() || !da.is_finite() {
            hi = (a, f64::INFINITY, 0.0);
            continue;
        }
        if fa > f0 + C1 * a * d0 || fa >= lo.1 {
            hi = (a, fa, da);
        } else {
            if da.abs() <= -C2 * d0 {
                return Ok(Some(LineSearchHit {
                    step: a,
                    loss: fa,
                    grad: ga,
                }));
            }
            if da * (hi.0 - lo.0) >= 0.0 {
                hi = lo;
            }
            lo = (a, fa, da);
        }
    }
    // Accept a sufficient-decrease point if the curvature test never passed.
    if lo.0 > 0.0 && lo.1 < f0 + C1 * lo.0 * d0 {
        let (fa, ga, _) = eval(lo.0, trial)?;
        return Ok(Some(LineSearchHit {
            step: lo.0,
            loss: fa,
            grad: ga,
        }));
    }
    Ok(None)
}

/// Weak-Wolfe bracketing by bisection and doubling. Unlike the strong
/// condition, `φ'(a) ≥ c₂φ'(0)` can be met just past a kink of a piecewise
/// smooth loss, where `|φ'|` never becomes small.
fn weak_wolfe(
    f: &mut Eval<'_>,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    dir: &[f64],
    step0: f64,
    trial: &mut Vec<f64>,
) -> Result<Option<LineSearchHit>, EvalFailure> {
    let d0 = dot(g0, dir);
    if d0 >= 0.0 {
        return Ok(None);
    }
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut best: Option<LineSearchHit> = None;
    let mut a = step0;
    for _ in 0..60 {
        trial.clear();
        trial.extend(x.iter().zip(dir).map(|(xi, di)| xi + a * di));
        let (fa, ga) = f(trial)?;
        let da = if fa.is_finite() {
            dot(&ga, dir)
        } else {
            f64::NAN
        };
        if !fa.is_finite() || !da.is_finite() || fa > f0 + C1 * a * d0 {
            hi = a;
        } else if da < C2 * d0 {
            lo = a;
            best = Some(LineSearchHit {
                step: a,
                loss: fa,
                grad: ga,
            });
        } else {
            return Ok(Some(LineSearchHit {
                step: a,
                loss: fa,
                grad: ga,
            }));
        }
        a = if hi.is_finite() {
            0.5 * (lo + hi)
        } else {
            2.0 * lo
        };
        if hi - lo <= 1e-16 * hi {
            break;
        }
    }
    Ok(best)
}

/// Limited-memory BFGS with a strong-Wolfe line search (`c₁ = 1e-4`,
/// `c₂ = 0.9`) over unbounded parameters. Every accepted step decreases the
/// loss; on line-search failure the best parameters are kept and flagged.
/// `on_iter(k, θ_k, L_k)` runs at the start and after every accepted step.
pub fn lbfgs(
    theta: &mut [f64],
    f: &mut Eval<'_>,
    cfg: &LbfgsConfig,
    on_iter: &mut dyn FnMut(usize, &[f64], f64),
) -> Result<StageOutcome, TrainError> {
    if cfg.memory == 0 {
        return Err(TrainError::Optimizer(
            "lbfgs memory must be positive".into(),
        ));
    }
    let np = theta.len();
    let (mut loss, mut grad) = f(theta).map_err(|e| abort(Stage::Lbfgs, 0, e.0))?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(abort(
            Stage::Lbfgs,
            0,
            format!("non-finite starting loss {loss}"),
        ));
    }
    on_iter(0, theta, loss);
    let mut s_hist: VecDeque<Vec<f64>> = VecDeque::with_capacity(cfg.memory);
    let mut y_hist: VecDeque<Vec<f64>> = VecDeque::with_capacity(cfg.memory);
    let mut rho_hist: VecDeque<f64> = VecDeque::with_capacity(cfg.memory);
    let mut trial = Vec::with_capacity(np);
    let mut alpha = vec![0.0; cfg.memory];
    let mut outcome = StageOutcome {
        iterations: 0,
        converged: false,
        line_search_failed: false,
        best_loss: loss,
    };
    let inf_norm = |g: &[f64]| g.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let mut confirming = false;

    while outcome.iterations < cfg.max_iters {
        if inf_norm(&grad) <= cfg.gtol {
            outcome.converged = true;
            break;
        }
        // Two-loop recursion.
        let mut dir: Vec<f64> = grad.iter().map(|g| -g).collect();
        let h = s_hist.len();
        for i in (0..h).rev() {
            alpha[i] = rho_hist[i] * dot(&s_hist[i], &dir);
            for (d, y) in dir.iter_mut().zip(&y_hist[i]) {
                *d -= alpha[i] * y;
            }
        }
        if h > 0 {
            let gamma = dot(&s_hist[h - 1], &y_hist[h - 1]) / dot(&y_hist[h - 1], &y_hist[h - 1]);
            dir.iter_mut().for_each(|d| *d *= gamma);
        }
        for i in 0..h {
            let beta = rho_hist[i] * dot(&y_hist[i], &dir);
            for (d, s) in dir.iter_mut().zip(&s_hist[i]) {
                *d += (alpha[i] - beta) * s;
            }
        }
        if dot(&dir, &grad) >= 0.0 {
            // Not a descent direction; restart from steepest descent.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            dir = grad.iter().map(|g| -g).collect();
        }
        let step0 = if s_hist.is_empty() {
            (1.0 / inf_norm(&grad)).min(1.0)
        } else {
            1.0
        };
        let strong = strong_wolfe(f, theta, loss, &grad, &dir, step0, &mut trial)
            .map_err(|e| abort(Stage::Lbfgs, outcome.iterations, e.0))?;
        // When the strong search fails or barely moves, the loss is usually
        // at a hinge kink; the weak conditions can step across it.
        let stalled = match &strong {
            Some(h) => h.loss > loss || (loss - h.loss) <= cfg.ftol * loss.abs(),
            None => true,
        };
        let hit = if stalled {
            match weak_wolfe(f, theta, loss, &grad, &dir, step0, &mut trial)
                .map_err(|e| abort(Stage::Lbfgs, outcome.iterations, e.0))?
            {
                Some(w) if strong.as_ref().is_none_or(|h| w.loss < h.loss) => Some(w),
                _ => strong,
            }
        } else {
            strong
        };
        let hit = match hit {
            Some(hit) if hit.loss <= loss => hit,
            // A stale curvature history can produce a poor direction; retry
            // once from steepest descent before giving up.
            _ if !s_hist.is_empty() => {
                s_hist.clear();
                y_hist.clear();
                rho_hist.clear();
                continue;
            }
            _ => {
                outcome.line_search_failed = true;
                break;
            }
        };
        let s: Vec<f64> = dir.iter().map(|d| hit.step * d).collect();
        let y: Vec<f64> = hit.grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
        for (t, si) in theta.iter_mut().zip(&s) {
            *t += si;
        }
        let rel = (loss - hit.loss) / loss.abs().max(1e-300);
        loss = hit.loss;
        grad = hit.grad;
        outcome.iterations += 1;
        outcome.best_loss = loss;
        on_iter(outcome.iterations, theta, loss);

        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if s_hist.len() == cfg.memory {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
            s_hist.push_back(s);
            y_hist.push_back(y);
            rho_hist.push_back(1.0 / sy);
        }
        if rel <= cfg.ftol {
            // Confirm with a fresh steepest-descent step before stopping; a
            // single short step often comes from stale curvature at a kink.
            if confirming {
                outcome.converged = true;
                break;
            }
            confirming = true;
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
        } else {
            confirming = false;
        }
    }
    Ok(outcome)
}

// ---------------------------------------------------------------------------
// Full training run.

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub domain: CollocationDomain,
    pub adam: AdamConfig,
    pub lbfgs: LbfgsConfig,
}

/// Where `train` writes its artifacts; `None` skips a file.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub adam_iterations: usize,
    pub lbfgs_iterations: usize,
    pub initial: ResidualBreakdown,
    pub final_breakdown: ResidualBreakdown,
    pub wall_time_s: f64,
    pub converged: bool,
    pub line_search_failed: bool,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub net: SurrogateNet,
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub stage: Stage,
    pub terms: [f64; 6],
}

pub const LOG_HEADER: &str = "iter,f_transient,f_eq,f_lyap,f_matching,f_comp,total";

fn row_of(b: &ResidualBreakdown) -> [f64; 6] {
    [
        b.f_transient,
        b.f_eq,
        b.f_lyap,
        b.f_matching,
        b.f_comp,
        b.total,
    ]
}

/// Samples the collocation batch, runs Adam then L-BFGS from `net`, and
/// writes the checkpoint and per-iteration log. `observer` sees every row.
pub fn train(
    sys: &MechanicalPH,
    ds: &DesiredStructure,
    net: &SurrogateNet,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
    observer: &mut dyn FnMut(&LogRow),
) -> Result<TrainReport, TrainError> {
    let started = Instant::now();
    let batch = sample_collocation(&cfg.domain, ds.x_star())?;
    let problem = LossProblem::new(sys, ds, &batch)?;
    let initial = problem.evaluate(net, GradientMode::None)?;

    let mut work = net.clone();
    let mut theta = net.theta().to_vec();
    let mut rows: Vec<LogRow> = Vec::new();
    // Breakdown of the most recent evaluation, keyed by its parameters.
    let last: std::cell::RefCell<Option<(Vec<f64>, [f64; 6])>> = Default::default();

    let mut eval = |th: &[f64]| -> Result<(f64, Vec<f64>), EvalFailure> {
        work.set_theta(th).map_err(|e| EvalFailure(e.to_string()))?;
        let r = problem
            .evaluate(&work, GradientMode::Total)
            .map_err(|e| EvalFailure(e.to_string()))?;
        *last.borrow_mut() = Some((th.to_vec(), row_of(&r)));
        Ok((r.total, r.grad_total.unwrap()))
    };

    let mut global = 0usize;
    let mut record = |stage: Stage, th: &[f64], rows: &mut Vec<LogRow>| {
        let cached = last
            .borrow()
            .as_ref()
            .filter(|(t, _)| t.as_slice() == th)
            .map(|(_, r)| *r);
        let terms = match cached {
            Some(r) => r,
            None => {
                let mut probe = net.clone();
                probe.set_theta(th).expect("finite parameters");
                problem
                    .evaluate(&probe, GradientMode::None)
                    .map(|r| row_of(&r))
                    .unwrap_or([f64::NAN; 6])
            }
        };
        let row = LogRow {
            iter: global,
            stage,
            terms,
        };
        global += 1;
        observer(&row);
        rows.push(row);
    };

    let adam_out = match adam(&mut theta, &mut eval, &cfg.adam, &mut |_, th, _| {
        record(Stage::Adam, th, &mut rows)
    }) {
        Ok(o) => o,
        Err(TrainError::Aborted {
            stage,
            iteration,
            message,
            ..
        }) => {
            write_log(outputs.log.as_deref(), &rows)?;
            return Err(TrainError::Aborted {
                stage,
                iteration,
                message,
                last: rows.last().map(|r| r.terms),
            });
        }
        Err(e) => return Err(e),
    };
    let lbfgs_out = if cfg.lbfgs.max_iters > 0 {
        match lbfgs(&mut theta, &mut eval, &cfg.lbfgs, &mut |k, th, _| {
            // The starting point duplicates Adam's best; log accepted steps only.
            if k > 0 {
                record(Stage::Lbfgs, th, &mut rows)
            }
        }) {
            Ok(o) => o,
            Err(TrainError::Aborted {
                stage,
                iteration,
                message,
                ..
            }) => {
                write_log(outputs.log.as_deref(), &rows)?;
                return Err(TrainError::Aborted {
                    stage,
                    iteration,
                    message,
                    last: rows.last().map(|r| r.terms),
                });
            }
            Err(e) => return Err(e),
        }
    } else {
        StageOutcome {
            iterations: 0,
            converged: false,
            line_search_failed: false,
            best_loss: adam_out.best_loss,
        }
    };

    let mut trained = net.clone();
    trained.set_theta(&theta)?;
    let mut final_breakdown = problem.evaluate(&trained, GradientMode::None)?;
    if final_breakdown.total > initial.total {
        trained = net.clone();
        final_breakdown = initial.clone();
    }

    write_log(outputs.log.as_deref(), &rows)?;
    if let Some(path) = &outputs.checkpoint {
        Checkpoint::new(sys.spec(), ds.clone(), trained.clone()).save(path)?;
    }
    Ok(TrainReport {
        adam_iterations: adam_out.iterations,
        lbfgs_iterations: lbfgs_out.iterations,
        initial,
        final_breakdown,
        wall_time_s: started.elapsed().as_secs_f64(),
        converged: adam_out.converged || lbfgs_out.converged,
        line_search_failed: lbfgs_out.line_search_failed,
        checkpoint_path: outputs.checkpoint.clone(),
        log_path: outputs.log.clone(),
        net: trained,
    })
}

fn write_log(path: Option<&Path>, rows: &[LogRow]) -> Result<(), TrainError> {
    let Some(path) = path else { return Ok(()) };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "{LOG_HEADER}")?;
    for r in rows {
        write!(out, "{}", r.iter)?;
        for v in r.terms {
            write!(out, ",{v:?}")?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Mat;
    use crate::surrogate::widths_for;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn domain(n: usize, seed: u64) -> CollocationDomain {
        CollocationDomain {
            lower: vec![FRAC_PI_2 - PI, -3.0],
            upper: vec![FRAC_PI_2 + PI, 3.0],
            n_points: n,
            seed,
        }
    }

    fn x_star() -> State {
        State::new(vec![FRAC_PI_2], vec![0.0])
    }

    #[test]
    fn collocation_examples() {
        let degenerate = CollocationDomain {
            lower: vec![0.5, -1.0],
            upper: vec![0.5, -1.0],
            n_points: 1,
            seed: 0,
        };
        let star = State::new(vec![0.5], vec![-1.0]);
        let pts = sample_collocation(&degenerate, &star).unwrap();
        assert_eq!(pts, vec![star.clone(), star]);

        let a = sample_collocation(&domain(300, 4), &x_star()).unwrap();
        let b = sample_collocation(&domain(300, 4), &x_star()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 301);
        assert_eq!(a.last().unwrap(), &x_star());
        assert!(a.iter().all(|x| domain(300, 4).contains(x)));
        assert_ne!(a, sample_collocation(&domain(300, 5), &x_star()).unwrap());
    }

    #[test]
    fn domain_validation() {
        let mut d = domain(10, 0);
        d.lower[1] = 4.0;
        assert!(matches!(
            sample_collocation(&d, &x_star()),
            Err(TrainError::Domain(_))
        ));
        let far = State::new(vec![10.0], vec![0.0]);
        assert!(matches!(
            sample_collocation(&domain(10, 0), &far),
            Err(TrainError::Domain(_))
        ));
    }

    fn quadratic(th: &[f64]) -> Result<(f64, Vec<f64>), EvalFailure> {
        Ok((
            th.iter().map(|v| v * v).sum(),
            th.iter().map(|v| 2.0 * v).collect(),
        ))
    }

    fn rosenbrock(th: &[f64]) -> Result<(f64, Vec<f64>), EvalFailure> {
        let (x, y) = (th[0], th[1]);
        let f = (1.0 - x).powi(2) + 100.0 * (y - x * x).powi(2);
        let g = vec![
            -2.0 * (1.0 - x) - 400.0 * x * (y - x * x),
            200.0 * (y - x * x),
        ];
        Ok((f, g))
    }

    #[test]
    fn adam_minimizes_quadratic_monotonically() {
        let mut theta = vec![0.8, -0.6, 0.3];
        let cfg = AdamConfig {
            lr: 1e-3,
            tol: 1e-9,
            max_iters: 20_000,
            window: 100,
        };
        let mut losses = Vec::new();
        let out = adam(&mut theta, &mut quadratic, &cfg, &mut |_, _, l| {
            losses.push(l)
        })
        .unwrap();
        assert!(out.best_loss < 1e-6, "{}", out.best_loss);
        assert!(out.iterations <= 20_000);
        // Monotone until the 1e-6 level is reached.
        let reach = losses.iter().position(|&l| l < 1e-6).unwrap();
        assert!(losses[..reach].windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn adam_stops_on_flat_loss() {
        let mut theta = vec![1.0, 2.0];
        let mut flat = |_: &[f64]| Ok((3.0, vec![0.0, 0.0]));
        let out = adam(
            &mut theta,
            &mut flat,
            &AdamConfig::default(),
            &mut |_, _, _| {},
        )
        .unwrap();
        assert!(out.converged);
        assert_eq!(out.iterations, 101);
        assert_eq!(theta, vec![1.0, 2.0]);
    }

    #[test]
    fn adam_aborts_on_non_finite_loss() {
        let mut theta = vec![1.0];
        let mut bad = |_: &[f64]| Ok((f64::NAN, vec![0.0]));
        let err = adam(
            &mut theta,
            &mut bad,
            &AdamConfig::default(),
            &mut |_, _, _| {},
        );
        assert!(matches!(
            err,
            Err(TrainError::Aborted {
                stage: Stage::Adam,
                ..
            })
        ));
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let mut theta = vec![-1.2, 1.0];
        let cfg = LbfgsConfig {
            max_iters: 200,
            ftol: 0.0,
            gtol: 1e-12,
            ..LbfgsConfig::default()
        };
        let mut losses = Vec::new();
        let out = lbfgs(&mut theta, &mut rosenbrock, &cfg, &mut |_, _, l| {
            losses.push(l)
        })
        .unwrap();
        let err = ((theta[0] - 1.0).powi(2) + (theta[1] - 1.0).powi(2)).sqrt();
        assert!(err < 1e-5, "err {err} after {} iterations", out.iterations);
        assert!(out.iterations <= 200);
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn lbfgs_crosses_kinks() {
        // Minimum sits on the kink x = 0.5, where |φ'| stays bounded away
        // from zero along any direction through it.
        let mut kinked = |t: &[f64]| -> Result<(f64, Vec<f64>), EvalFailure> {
            let s = if t[0] > 0.5 { 3.0 } else { -3.0 };
            Ok((
                3.0 * (t[0] - 0.5).abs() + (t[1] - 1.0).powi(2),
                vec![s, 2.0 * (t[1] - 1.0)],
            ))
        };
        let mut theta = vec![-1.0, -1.0];
        let cfg = LbfgsConfig {
            max_iters: 500,
            ftol: 0.0,
            ..LbfgsConfig::default()
        };
        let mut losses = Vec::new();
        lbfgs(&mut theta, &mut kinked, &cfg, &mut |_, _, l| losses.push(l)).unwrap();
        assert!(losses.windows(2).all(|w| w[1] <= w[0]));
        assert!(
            *losses.last().unwrap() < 1e-6,
            "{:?} {theta:?}",
            losses.last()
        );
    }

    #[test]
    fn lbfgs_stationary_start() {
        let mut theta = vec![0.0, 0.0];
        let out = lbfgs(
            &mut theta,
            &mut quadratic,
            &LbfgsConfig::default(),
            &mut |_, _, _| {},
        )
        .unwrap();
        assert!(out.iterations <= 1);
        assert_eq!(theta, vec![0.0, 0.0]);
    }

    fn small_setup() -> (MechanicalPH, DesiredStructure, SurrogateNet) {
        let sys = MechanicalPH::simple_pendulum(1.0, 1.0, 9.81);
        let ds = DesiredStructure::new(
            Mat::diag(&[1.0]),
            Mat::zeros(1, 1),
            x_star(),
            0.1,
            0.1,
            1.0,
            Mat::diag(&[2.0]),
        )
        .unwrap();
        let net = SurrogateNet::with_options(3, &widths_for(1, &[8, 8]), 1e-6, 6.0).unwrap();
        (sys, ds, net)
    }

    fn small_config(n: usize) -> TrainConfig {
        TrainConfig {
            domain: domain(n, 1),
            adam: AdamConfig {
                max_iters: 60,
                ..AdamConfig::default()
            },
            lbfgs: LbfgsConfig {
                max_iters: 20,
                ..LbfgsConfig::default()
            },
        }
    }

    #[test]
    fn train_decreases_loss_and_is_deterministic() {
        let (sys, ds, net) = small_setup();
        let dir = tempfile::tempdir().unwrap();
        let run = |tag: &str| {
            let outputs = TrainOutputs {
                checkpoint: Some(dir.path().join(format!("{tag}.json"))),
                log: Some(dir.path().join(format!("{tag}.csv"))),
            };
            train(&sys, &ds, &net, &small_config(64), &outputs, &mut |_| {}).unwrap()
        };
        let a = run("a");
        let b = run("b");
        assert!(a.final_breakdown.total <= a.initial.total);
        assert!(a.final_breakdown.total < 0.5 * a.initial.total);
        let ca = fs::read(dir.path().join("a.json")).unwrap();
        let cb = fs::read(dir.path().join("b.json")).unwrap();
        assert_eq!(ca, cb);
        let log = fs::read_to_string(dir.path().join("a.csv")).unwrap();
        let mut lines = log.lines();
        assert_eq!(lines.next().unwrap(), LOG_HEADER);
        assert_eq!(lines.count(), a.adam_iterations + a.lbfgs_iterations);
        assert_eq!(b.final_breakdown, a.final_breakdown);
    }

    #[test]
    fn train_on_target_alone() {
        let (sys, ds, net) = small_setup();
        let r = train(
            &sys,
            &ds,
            &net,
            &small_config(0),
            &TrainOutputs::default(),
            &mut |_| {},
        )
        .unwrap();
        assert!(r.final_breakdown.total <= r.initial.total);
    }
}
