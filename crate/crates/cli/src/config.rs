//! Experiment configuration files (TOML).
//!
//! ```toml
//! output_dir = "out/pendulum"
//!
//! [system]
//! name = "simple_pendulum"
//! params = { mass = 1.0, length = 1.0 }
//!
//! [desired]
//! j1 = [[1.0]]
//! q_star = [1.5707963267948966]
//!
//! [training]
//! n_points = 1024
//! ```
//!
//! Everything except `system.name`, `desired.j1` and `desired.q_star` has a
//! default. Errors name the offending field as a dotted path.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};
use std::fmt;
use std::path::{Path, PathBuf};

use neural_ida_core::numerics::{cholesky, Mat};
use neural_ida_core::ph::{MechanicalPH, State, SystemSpec};
use neural_ida_core::surrogate::{
    DesiredStructure, DEFAULT_DAMPING_INIT, DEFAULT_EPSILON, DEFAULT_HIDDEN,
};
use neural_ida_core::trainer::{AdamConfig, CollocationDomain, LbfgsConfig, TrainConfig};
use serde::Deserialize;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "NEURAL_IDA_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    /// Dotted field path; empty for file-level problems.
    pub path: String,
    pub message: String,
}

impl ConfigError {
    fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

// Raw file layout. Every section rejects unknown keys.

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    system: RawSystem,
    desired: RawDesired,
    #[serde(default)]
    surrogate: RawSurrogate,
    #[serde(default)]
    training: RawTraining,
    #[serde(default)]
    simulation: RawSimulation,
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    name: String,
    #[serde(default)]
    params: BTreeMap<String, f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDesired {
    j1: Vec<Vec<f64>>,
    j2: Option<Vec<Vec<f64>>>,
    q_star: Vec<f64>,
    #[serde(default = "default_c")]
    c_transient: f64,
    #[serde(default = "default_c")]
    c_lyap: f64,
    lambda: Option<f64>,
    k_p_comp: Option<Vec<Vec<f64>>>,
}

fn default_c() -> f64 {
    0.1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawSurrogate {
    hidden: Vec<usize>,
    seed: u64,
    epsilon: f64,
    damping_init: f64,
    normalize_inputs: bool,
}

impl Default for RawSurrogate {
    fn default() -> Self {
        Self {
            hidden: DEFAULT_HIDDEN.to_vec(),
            seed: 0,
            epsilon: DEFAULT_EPSILON,
            damping_init: DEFAULT_DAMPING_INIT,
            normalize_inputs: false,
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTraining {
    lower: Option<Vec<f64>>,
    upper: Option<Vec<f64>>,
    n_points: Option<usize>,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    adam: RawAdam,
    #[serde(default)]
    lbfgs: RawLbfgs,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawAdam {
    lr: f64,
    tol: f64,
    max_iters: usize,
    window: usize,
}

impl Default for RawAdam {
    fn default() -> Self {
        let d = AdamConfig::default();
        Self {
            lr: d.lr,
            tol: d.tol,
            max_iters: d.max_iters,
            window: d.window,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RawLbfgs {
    memory: usize,
    max_iters: usize,
    ftol: f64,
    gtol: f64,
}

impl Default for RawLbfgs {
    fn default() -> Self {
        let d = LbfgsConfig::default();
        Self {
            memory: d.memory,
            max_iters: d.max_iters,
            ftol: d.ftol,
            gtol: d.gtol,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSimulation {
    #[serde(default = "default_step")]
    h: f64,
    #[serde(default = "default_horizon")]
    t_end: f64,
    initial_conditions: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    baseline: RawBaseline,
}

fn default_step() -> f64 {
    1e-3
}

fn default_horizon() -> f64 {
    10.0
}

impl Default for RawSimulation {
    fn default() -> Self {
        Self {
            h: default_step(),
            t_end: default_horizon(),
            initial_conditions: None,
            baseline: RawBaseline::default(),
        }
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBaseline {
    k_p: Option<Vec<Vec<f64>>>,
    k_d: Option<Vec<Vec<f64>>>,
}

// Validated form.

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateSettings {
    pub hidden: Vec<usize>,
    pub seed: u64,
    pub epsilon: f64,
    pub damping_init: f64,
    /// Map the collocation box affinely onto [-1, 1] before the first layer.
    pub normalize_inputs: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSettings {
    pub h: f64,
    pub t_end: f64,
    pub initial_conditions: Vec<State>,
    pub k_p: Mat,
    pub k_d: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub system: SystemSpec,
    pub model: MechanicalPH,
    pub desired: DesiredStructure,
    pub surrogate: SurrogateSettings,
    pub training: TrainConfig,
    pub simulation: SimulationSettings,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let de =
            toml::de::Deserializer::parse(text).map_err(|e| ConfigError::at("", e.to_string()))?;
        let raw: RawConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let path = if path == "." { String::new() } else { path };
            ConfigError::at(path, e.into_inner().message().to_string())
        })?;
        validate(raw)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::at("", format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn dof(&self) -> usize {
        self.model.dof()
    }

    /// `output_dir`, unless the override variable is set and non-empty.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }
}

fn matrix(path: &str, rows: &[Vec<f64>], n: usize) -> Result<Mat, ConfigError> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(ConfigError::at(path, format!("must be a {n}x{n} matrix")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ConfigError::at(path, "entries must be finite"));
    }
    Mat::from_rows(rows).map_err(|e| ConfigError::at(path, e.to_string()))
}

fn spd(path: &str, m: &Mat) -> Result<(), ConfigError> {
    if m.asymmetry() > 0.0 || cholesky(m).is_err() {
        return Err(ConfigError::at(path, "must be symmetric positive definite"));
    }
    Ok(())
}

fn positive(path: &str, v: f64) -> Result<f64, ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(ConfigError::at(path, format!("must be positive, got {v}")))
    }
}

fn vector(path: &str, v: &[f64], len: usize) -> Result<(), ConfigError> {
    if v.len() != len {
        return Err(ConfigError::at(
            path,
            format!("must have {len} entries, got {}", v.len()),
        ));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(ConfigError::at(format!("{path}[{i}]"), "must be finite"));
    }
    Ok(())
}

/// Default box: `q* ± π`, `p ∈ [−3, 3]` for one joint; `q* ± π/2`,
/// `p ∈ [−2, 2]` otherwise.
fn default_box(q_star: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (dq, pmax) = if q_star.len() == 1 {
        (PI, 3.0)
    } else {
        (FRAC_PI_2, 2.0)
    };
    let mut lower: Vec<f64> = q_star.iter().map(|q| q - dq).collect();
    let mut upper: Vec<f64> = q_star.iter().map(|q| q + dq).collect();
    lower.extend(std::iter::repeat(-pmax).take(q_star.len()));
    upper.extend(std::iter::repeat(pmax).take(q_star.len()));
    (lower, upper)
}

fn default_initial_conditions(n: usize) -> Vec<State> {
    let flat: Vec<Vec<f64>> = if n == 1 {
        vec![
            vec![0.0, 0.0],
            vec![PI, 0.0],
            vec![FRAC_PI_2, 1.0],
            vec![-FRAC_PI_2, -1.0],
        ]
    } else {
        vec![
            vec![0.0, 0.0, 0.0, 0.0],
            vec![FRAC_PI_4, -FRAC_PI_4, 0.0, 0.0],
            vec![-FRAC_PI_4, FRAC_PI_4, 0.5, -0.5],
        ]
    };
    flat.iter().map(|x| State::from_flat(x)).collect()
}

/// `k·I` with `k` the largest diagonal entry of `∂²U/∂q²` at `q = 0`
/// (`mgl` for the single pendulum).
fn default_stiffness(model: &MechanicalPH) -> Mat {
    let n = model.dof();
    let jet = model
        .energy_jet(&State::new(vec![0.0; n], vec![0.0; n]))
        .expect("built-in systems are smooth at the origin");
    let k = (0..n).map(|i| jet.hess.get(i, i)).fold(0.0, f64::max);
    Mat::identity(n).scale(if k > 0.0 { k } else { 1.0 })
}

fn validate(raw: RawConfig) -> Result<ExperimentConfig, ConfigError> {
    let system = SystemSpec {
        name: raw.system.name,
        params: raw.system.params,
    };
    let model = MechanicalPH::from_spec(&system).map_err(|e| {
        let path = match &e {
            neural_ida_core::ph::PhError::UnknownSystem(_) => "system.name",
            _ => "system.params",
        };
        ConfigError::at(path, e.to_string())
    })?;
    let n = model.dof();

    let d = raw.desired;
    let j1 = matrix("desired.j1", &d.j1, n)?;
    if Mat::identity(n).add(&j1).det().abs() < 1e-12 {
        return Err(ConfigError::at("desired.j1", "I + j1 must be invertible"));
    }
    let j2 = match &d.j2 {
        Some(rows) => matrix("desired.j2", rows, n)?,
        None => Mat::zeros(n, n),
    };
    if j2.add(&j2.transpose()).max_abs() != 0.0 {
        return Err(ConfigError::at("desired.j2", "must be skew-symmetric"));
    }
    vector("desired.q_star", &d.q_star, n)?;
    let c_transient = positive("desired.c_transient", d.c_transient)?;
    let c_lyap = positive("desired.c_lyap", d.c_lyap)?;
    let lambda = d.lambda.unwrap_or(if n >= 2 { 1.0 } else { 0.0 });
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(ConfigError::at(
            "desired.lambda",
            format!("must be non-negative, got {lambda}"),
        ));
    }
    let k_p_comp = match &d.k_p_comp {
        Some(rows) => matrix("desired.k_p_comp", rows, n)?,
        None => Mat::identity(n),
    };
    spd("desired.k_p_comp", &k_p_comp)?;
    let x_star = State::new(d.q_star.clone(), vec![0.0; n]);
    let desired = DesiredStructure::new(
        j1,
        j2,
        x_star.clone(),
        c_transient,
        c_lyap,
        lambda,
        k_p_comp,
    )
    .map_err(|e| ConfigError::at("desired", e.to_string()))?;

    let s = raw.surrogate;
    if s.hidden.is_empty() || s.hidden.contains(&0) {
        return Err(ConfigError::at(
            "surrogate.hidden",
            "needs at least one layer, all widths positive",
        ));
    }
    positive("surrogate.epsilon", s.epsilon)?;
    if !(s.damping_init.is_finite() && s.damping_init >= 0.0) {
        return Err(ConfigError::at(
            "surrogate.damping_init",
            "must be non-negative",
        ));
    }
    let surrogate = SurrogateSettings {
        hidden: s.hidden,
        seed: s.seed,
        epsilon: s.epsilon,
        damping_init: s.damping_init,
        normalize_inputs: s.normalize_inputs,
    };

    let t = raw.training;
    let (dl, du) = default_box(&d.q_star);
    let lower = t.lower.unwrap_or(dl);
    let upper = t.upper.unwrap_or(du);
    vector("training.lower", &lower, 2 * n)?;
    vector("training.upper", &upper, 2 * n)?;
    let xs = x_star.to_flat();
    for i in 0..2 * n {
        if lower[i] > upper[i] {
            return Err(ConfigError::at(
                format!("training.upper[{i}]"),
                format!("must be >= training.lower[{i}] = {}", lower[i]),
            ));
        }
        if xs[i] < lower[i] || xs[i] > upper[i] {
            return Err(ConfigError::at(
                format!("training.lower[{i}]"),
                format!("box must contain the target coordinate {}", xs[i]),
            ));
        }
    }
    let n_points = t.n_points.unwrap_or(if n == 1 { 2048 } else { 4096 });
    positive("training.adam.lr", t.adam.lr)?;
    positive("training.adam.tol", t.adam.tol)?;
    if t.adam.window == 0 {
        return Err(ConfigError::at("training.adam.window", "must be positive"));
    }
    if t.lbfgs.memory == 0 {
        return Err(ConfigError::at("training.lbfgs.memory", "must be positive"));
    }
    for (path, v) in [
        ("training.lbfgs.ftol", t.lbfgs.ftol),
        ("training.lbfgs.gtol", t.lbfgs.gtol),
    ] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(ConfigError::at(path, "must be non-negative"));
        }
    }
    let training = TrainConfig {
        domain: CollocationDomain {
            lower,
            upper,
            n_points,
            seed: t.seed,
        },
        adam: AdamConfig {
            lr: t.adam.lr,
            tol: t.adam.tol,
            max_iters: t.adam.max_iters,
            window: t.adam.window,
        },
        lbfgs: LbfgsConfig {
            memory: t.lbfgs.memory,
            max_iters: t.lbfgs.max_iters,
            ftol: t.lbfgs.ftol,
            gtol: t.lbfgs.gtol,
        },
    };

    let sim = raw.simulation;
    let h = positive("simulation.h", sim.h)?;
    let t_end = positive("simulation.t_end", sim.t_end)?;
    if t_end < h {
        return Err(ConfigError::at(
            "simulation.t_end",
            "must be at least one step",
        ));
    }
    let initial_conditions = match &sim.initial_conditions {
        Some(list) => {
            if list.is_empty() {
                return Err(ConfigError::at(
                    "simulation.initial_conditions",
                    "must not be empty",
                ));
            }
            let mut out = Vec::with_capacity(list.len());
            for (i, x) in list.iter().enumerate() {
                vector(&format!("simulation.initial_conditions[{i}]"), x, 2 * n)?;
                out.push(State::from_flat(x));
            }
            out
        }
        None => default_initial_conditions(n),
    };
    let k_p = match &sim.baseline.k_p {
        Some(rows) => matrix("simulation.baseline.k_p", rows, n)?,
        None => default_stiffness(&model),
    };
    spd("simulation.baseline.k_p", &k_p)?;
    let k_d = match &sim.baseline.k_d {
        Some(rows) => matrix("simulation.baseline.k_d", rows, n)?,
        None => Mat::identity(n),
    };
    spd("simulation.baseline.k_d", &k_d)?;

    Ok(ExperimentConfig {
        system,
        model,
        desired,
        surrogate,
        training,
        simulation: SimulationSettings {
            h,
            t_end,
            initial_conditions,
            k_p,
            k_d,
        },
        output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from("out")),
    })
}
