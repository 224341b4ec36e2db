//! The four subcommands. Each returns a process exit code or an error that
//! the binary reports with exit code 1.

use std::io::Write;
use std::path::{Path, PathBuf};

use neural_ida_core::numerics::sym_eigen;
use neural_ida_core::ph::{MechanicalPH, State, SystemKind};
use neural_ida_core::residuals::LossProblem;
use neural_ida_core::simulator::{
    closed_loop_identity, simulate, verify_trajectory, BaselineController, Controller,
    NeuralController, SimError, Trajectory, ZeroInput,
};
use neural_ida_core::surrogate::{assemble, widths_for, Checkpoint, SurrogateError, SurrogateNet};
use neural_ida_core::trainer::{
    sample_collocation, train, CollocationDomain, TrainError, TrainOutputs, LOG_HEADER,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, OUTPUT_DIR_ENV};

pub const EXIT_OK: u8 = 0;
pub const EXIT_ERROR: u8 = 1;
pub const EXIT_NOT_CONVERGED: u8 = 2;
pub const EXIT_CHECKS_FAILED: u8 = 3;

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const LOG_FILE: &str = "training_log.csv";
pub const ENERGY_MAP_FILE: &str = "energy_map.csv";

// Acceptance thresholds.
pub const MATCHING_RMS_MAX: f64 = 1e-3;
pub const EQ_GRADIENT_MAX: f64 = 1e-3;
pub const HD_STEP_TOL: f64 = 1e-4;
pub const FINAL_DISTANCE_MAX: f64 = 1e-2;
pub const ORACLE_REL_TOL: f64 = 0.1;
pub const IDENTITY_TOL: f64 = 1e-10;
pub const ENERGY_DRIFT_MAX: f64 = 1e-6;
pub const RK4_RATIO_MIN: f64 = 8.0;
/// Size of the held-out sample used for the matching RMS.
pub const VERIFY_POINTS: usize = 2048;
pub const IDENTITY_STATES: usize = 1000;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("checkpoint does not match config: {0}")]
    Mismatch(String),
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| CliError::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Rejects checkpoints trained for a different system or architecture.
pub fn check_compatible(cfg: &ExperimentConfig, ck: &Checkpoint) -> Result<MechanicalPH, CliError> {
    let sys = ck.system()?;
    if sys != cfg.model {
        return Err(CliError::Mismatch(format!(
            "checkpoint system {:?} differs from configured {:?}",
            ck.system.name, cfg.system.name
        )));
    }
    let widths = widths_for(cfg.dof(), &cfg.surrogate.hidden);
    if ck.net.widths() != widths.as_slice() {
        return Err(CliError::Mismatch(format!(
            "network widths {:?}, config expects {:?}",
            ck.net.widths(),
            widths
        )));
    }
    Ok(sys)
}

pub fn initial_network(cfg: &ExperimentConfig) -> Result<SurrogateNet, CliError> {
    let net = SurrogateNet::with_options(
        cfg.surrogate.seed,
        &widths_for(cfg.dof(), &cfg.surrogate.hidden),
        cfg.surrogate.epsilon,
        cfg.surrogate.damping_init,
    )?;
    if cfg.surrogate.normalize_inputs {
        let box_ = &cfg.training.domain;
        Ok(net.with_input_normalization(&box_.lower, &box_.upper)?)
    } else {
        Ok(net)
    }
}

/// Trains and writes `checkpoint.json` and `training_log.csv` into the output
/// directory. Exit 0 when a stage met its tolerance, 2 otherwise.
pub fn cmd_train(config: &Path, log: &mut dyn Write) -> Result<u8, CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let out = cfg.resolved_output_dir();
    let net = initial_network(&cfg)?;
    let outputs = TrainOutputs {
        checkpoint: Some(out.join(CHECKPOINT_FILE)),
        log: Some(out.join(LOG_FILE)),
    };
    writeln!(
        log,
        "training {} ({} parameters)",
        cfg.system.name,
        net.num_params()
    )?;
    writeln!(log, "{LOG_HEADER}")?;
    let mut progress = |row: &neural_ida_core::trainer::LogRow| {
        if row.iter % 500 == 0 {
            let t = row.terms;
            let _ = writeln!(
                log,
                "{},{:.3e},{:.3e},{:.3e},{:.3e},{:.3e},{:.3e}",
                row.iter, t[0], t[1], t[2], t[3], t[4], t[5]
            );
        }
    };
    let report = train(
        &cfg.model,
        &cfg.desired,
        &net,
        &cfg.training,
        &outputs,
        &mut progress,
    )?;
    let f = &report.final_breakdown;
    writeln!(
        log,
        "adam {} + lbfgs {} iterations in {:.1} s; total {:.3e} (matching rms {:.3e}); converged {}",
        report.adam_iterations,
        report.lbfgs_iterations,
        report.wall_time_s,
        f.total,
        f.f_matching.sqrt(),
        report.converged
    )?;
    writeln!(log, "checkpoint {}", out.join(CHECKPOINT_FILE).display())?;
    Ok(if report.converged {
        EXIT_OK
    } else {
        EXIT_NOT_CONVERGED
    })
}

pub fn trajectory_file(dir: &Path, baseline: bool, index: usize) -> PathBuf {
    let kind = if baseline { "baseline" } else { "neural" };
    dir.join("trajectories")
        .join(format!("{kind}_ic{index}.csv"))
}

pub fn baseline_controller<'a>(
    cfg: &ExperimentConfig,
    sys: &'a MechanicalPH,
) -> Result<BaselineController<'a>, CliError> {
    Ok(BaselineController::new(
        sys,
        cfg.desired.x_star().clone(),
        cfg.simulation.k_p.clone(),
        cfg.simulation.k_d.clone(),
    )?)
}

pub fn run_initial_conditions(
    cfg: &ExperimentConfig,
    sys: &MechanicalPH,
    controller: &dyn Controller,
) -> Result<Vec<Trajectory>, CliError> {
    let s = &cfg.simulation;
    s.initial_conditions
        .iter()
        .map(|x0| Ok(simulate(sys, controller, x0, s.h, s.t_end, None)?))
        .collect()
}

/// One CSV per initial condition under `<output>/trajectories/`.
pub fn cmd_simulate(
    config: &Path,
    checkpoint: Option<&Path>,
    baseline: bool,
    log: &mut dyn Write,
) -> Result<u8, CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let out = cfg.resolved_output_dir();
    let trajectories = if baseline {
        if let Some(path) = checkpoint {
            check_compatible(&cfg, &load_checkpoint(path)?)?;
        }
        run_initial_conditions(&cfg, &cfg.model, &baseline_controller(&cfg, &cfg.model)?)?
    } else {
        let path = checkpoint.ok_or_else(|| {
            CliError::Usage("simulate needs a checkpoint unless --baseline is given".into())
        })?;
        let ck = load_checkpoint(path)?;
        let sys = check_compatible(&cfg, &ck)?;
        let controller = NeuralController {
            sys: &sys,
            net: &ck.net,
            ds: &ck.desired,
        };
        run_initial_conditions(&cfg, &sys, &controller)?
    };
    let x_star = cfg.desired.x_star();
    for (i, t) in trajectories.iter().enumerate() {
        let file = trajectory_file(&out, baseline, i);
        t.write_csv(&file)?;
        writeln!(
            log,
            "{}: final distance to target {:.3e}",
            file.display(),
            t.final_state().distance(x_star)
        )?;
    }
    Ok(EXIT_OK)
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value <= threshold,
        }
    }

    fn at_least(name: impl Into<String>, value: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            value,
            threshold,
            pass: value >= threshold,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrajectorySummary {
    pub initial_condition: Vec<f64>,
    pub final_distance: f64,
    pub baseline_final_distance: f64,
    pub hd_max_increase: f64,
    pub hd_violations: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyticOracle {
    pub d2ha_dp2: f64,
    pub expected: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub system: String,
    pub matching_rms: f64,
    pub equilibrium_gradient_norm: f64,
    pub hessian_min_eigenvalue: f64,
    pub analytic_oracle: Option<AnalyticOracle>,
    pub identity_residual: f64,
    pub open_loop_energy_drift: f64,
    pub rk4_halving_ratio: f64,
    pub trajectories: Vec<TrajectorySummary>,
    pub checks: Vec<Check>,
    pub all_pass: bool,
}

/// Open-loop, undamped, `u ≡ 0` drift from `q = 1, p = 0.5` over 10 s at
/// `h = 1e-3`, and the drift improvement from halving a coarse step.
fn conservation(cfg: &ExperimentConfig) -> Result<(f64, f64), CliError> {
    let mut spec = cfg.system.clone();
    spec.params.remove("damping");
    let sys = MechanicalPH::from_spec(&spec).map_err(SimError::from)?;
    let n = sys.dof();
    let x0 = State::new(vec![1.0; n], vec![0.5; n]);
    let zero = ZeroInput { n };
    let drift = |h: f64| -> Result<f64, CliError> {
        let t = simulate(&sys, &zero, &x0, h, 10.0, None)?;
        Ok(verify_trajectory(&t, &x0, HD_STEP_TOL)
            .energy_drift
            .unwrap_or(f64::NAN))
    };
    Ok((drift(1e-3)?, drift(4e-2)? / drift(2e-2)?))
}

/// Computes every acceptance quantity for a trained checkpoint.
pub fn verify_checkpoint(
    cfg: &ExperimentConfig,
    ck: &Checkpoint,
) -> Result<VerifyReport, CliError> {
    let sys = check_compatible(cfg, ck)?;
    let net = &ck.net;
    let ds = &ck.desired;
    let x_star = ds.x_star();

    let domain = CollocationDomain {
        n_points: VERIFY_POINTS,
        seed: cfg.training.domain.seed.wrapping_add(1),
        ..cfg.training.domain.clone()
    };
    let fresh = sample_collocation(&domain, x_star)?;
    let problem = LossProblem::new(&sys, ds, &fresh[..VERIFY_POINTS]).map_err(TrainError::from)?;
    let matching_rms = problem.matching_rms(net).map_err(TrainError::from)?;

    let a = assemble(net, ds, &sys, x_star)?;
    let equilibrium_gradient_norm = a.grad_hd.iter().map(|g| g * g).sum::<f64>().sqrt();
    let hessian_min_eigenvalue = sym_eigen(&a.hess_hd).map_err(SimError::from)?.values[0];

    let analytic_oracle = match sys.kind() {
        SystemKind::SimplePendulum { mass, length, .. } => {
            let j1 = ds.j1().get(0, 0);
            let expected = -(j1 / (1.0 + j1)) / (mass * length * length);
            let d2ha_dp2 = net.eval_ha_jet(x_star)?.hess.get(1, 1);
            Some(AnalyticOracle {
                d2ha_dp2,
                expected,
                relative_error: ((d2ha_dp2 - expected) / expected).abs(),
            })
        }
        SystemKind::DoublePendulum { .. } => None,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.training.domain.seed.wrapping_add(2));
    let mut identity_residual = 0.0_f64;
    for _ in 0..IDENTITY_STATES {
        let flat: Vec<f64> = domain
            .lower
            .iter()
            .zip(&domain.upper)
            .map(|(lo, hi)| {
                if hi > lo {
                    rng.gen_range(*lo..*hi)
                } else {
                    *lo
                }
            })
            .collect();
        let c = closed_loop_identity(&sys, net, ds, &State::from_flat(&flat))?;
        for v in &c.actuated {
            identity_residual = identity_residual.max(v.abs());
        }
        for (u, d) in c.unactuated.iter().zip(&c.defect) {
            identity_residual = identity_residual.max((u + d).abs());
        }
    }

    let (open_loop_energy_drift, rk4_halving_ratio) = conservation(cfg)?;

    let neural = NeuralController { sys: &sys, net, ds };
    let learned = run_initial_conditions(cfg, &sys, &neural)?;
    let base = run_initial_conditions(cfg, &sys, &baseline_controller(cfg, &sys)?)?;
    let trajectories: Vec<TrajectorySummary> = learned
        .iter()
        .zip(&base)
        .zip(&cfg.simulation.initial_conditions)
        .map(|((t, b), x0)| {
            let r = verify_trajectory(t, x_star, HD_STEP_TOL);
            TrajectorySummary {
                initial_condition: x0.to_flat(),
                final_distance: r.final_distance,
                baseline_final_distance: b.final_state().distance(x_star),
                hd_max_increase: r.hd_max_increase.unwrap_or(0.0),
                hd_violations: r.hd_violations,
            }
        })
        .collect();

    let mut checks = vec![
        Check::at_most(
            "equilibrium_gradient_norm",
            equilibrium_gradient_norm,
            EQ_GRADIENT_MAX,
        ),
        Check::at_least(
            "hessian_min_eigenvalue",
            hessian_min_eigenvalue,
            ds.c_lyap() / 2.0,
        ),
    ];
    // The matching equations have an exact solution only for the single
    // pendulum; for the double pendulum they compete with f_comp and the
    // RMS is reported without a threshold.
    if let Some(o) = &analytic_oracle {
        checks.insert(
            0,
            Check::at_most("matching_rms", matching_rms, MATCHING_RMS_MAX),
        );
        checks.push(Check::at_most(
            "analytic_oracle_relative_error",
            o.relative_error,
            ORACLE_REL_TOL,
        ));
    }
    checks.push(Check::at_most(
        "identity_residual",
        identity_residual,
        IDENTITY_TOL,
    ));
    checks.push(Check::at_most(
        "open_loop_energy_drift",
        open_loop_energy_drift,
        ENERGY_DRIFT_MAX,
    ));
    checks.push(Check::at_least(
        "rk4_halving_ratio",
        rk4_halving_ratio,
        RK4_RATIO_MIN,
    ));
    for (i, t) in trajectories.iter().enumerate() {
        checks.push(Check::at_most(
            format!("ic{i}.final_distance"),
            t.final_distance,
            FINAL_DISTANCE_MAX,
        ));
        checks.push(Check::at_most(
            format!("ic{i}.baseline_final_distance"),
            t.baseline_final_distance,
            FINAL_DISTANCE_MAX,
        ));
        checks.push(Check::at_most(
            format!("ic{i}.hd_max_increase"),
            t.hd_max_increase,
            HD_STEP_TOL,
        ));
    }
    let all_pass = checks.iter().all(|c| c.pass);
    Ok(VerifyReport {
        system: ck.system.name.clone(),
        matching_rms,
        equilibrium_gradient_norm,
        hessian_min_eigenvalue,
        analytic_oracle,
        identity_residual,
        open_loop_energy_drift,
        rk4_halving_ratio,
        trajectories,
        checks,
        all_pass,
    })
}

/// Prints the report as JSON; exit 0 when every check passes, 3 otherwise.
pub fn cmd_verify(config: &Path, checkpoint: &Path, out: &mut dyn Write) -> Result<u8, CliError> {
    let cfg = ExperimentConfig::load(config)?;
    let ck = load_checkpoint(checkpoint)?;
    let report = verify_checkpoint(&cfg, &ck)?;
    writeln!(
        out,
        "{}",
        serde_json::to_string_pretty(&report).expect("report serializes")
    )?;
    Ok(if report.all_pass {
        EXIT_OK
    } else {
        EXIT_CHECKS_FAILED
    })
}

/// One axis of an export grid: `name=lo:hi:count`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridAxis {
    pub coordinate: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

impl GridAxis {
    pub fn value(&self, i: usize) -> f64 {
        if self.count == 1 {
            self.lo
        } else {
            self.lo + (self.hi - self.lo) * i as f64 / (self.count - 1) as f64
        }
    }
}

/// Parses `q1=a:b:n,p1=c:d:m` for a system with `n` joints.
pub fn parse_grid(spec: &str, n: usize) -> Result<Vec<GridAxis>, CliError> {
    let bad = |m: String| CliError::Grid(m);
    let mut axes: Vec<GridAxis> = Vec::new();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, range) = part
            .split_once('=')
            .ok_or_else(|| bad(format!("{part:?}: expected name=lo:hi:count")))?;
        let name = name.trim();
        let coordinate = match (
            name.get(..1),
            name.get(1..).and_then(|i| i.parse::<usize>().ok()),
        ) {
            (Some("q"), Some(i)) if (1..=n).contains(&i) => i - 1,
            (Some("p"), Some(i)) if (1..=n).contains(&i) => n + i - 1,
            _ => {
                return Err(bad(format!(
                    "unknown coordinate {name:?} (expected q1..q{n} or p1..p{n})"
                )))
            }
        };
        if axes.iter().any(|a| a.coordinate == coordinate) {
            return Err(bad(format!("coordinate {name} given twice")));
        }
        let fields: Vec<&str> = range.split(':').collect();
        if fields.len() != 3 {
            return Err(bad(format!("{name}: expected lo:hi:count, got {range:?}")));
        }
        let lo: f64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| bad(format!("{name}: bad lower bound {:?}", fields[0])))?;
        let hi: f64 = fields[1]
            .trim()
            .parse()
            .map_err(|_| bad(format!("{name}: bad upper bound {:?}", fields[1])))?;
        let count: usize = fields[2]
            .trim()
            .parse()
            .map_err(|_| bad(format!("{name}: bad count {:?}", fields[2])))?;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi {
            return Err(bad(format!("{name}: need finite lo <= hi")));
        }
        if count == 0 {
            return Err(bad(format!("{name}: count must be positive")));
        }
        axes.push(GridAxis {
            coordinate,
            lo,
            hi,
            count,
        });
    }
    if axes.is_empty() {
        return Err(bad("no axes given".into()));
    }
    Ok(axes)
}

/// CSV of `H`, `H_a` and `H_d = H + H_a` over the grid. Coordinates not on an
/// axis stay at `x*` (so momenta default to 0). The first axis varies slowest.
pub fn energy_grid_csv(ck: &Checkpoint, axes: &[GridAxis]) -> Result<String, CliError> {
    let sys = ck.system()?;
    let n = sys.dof();
    let base = ck.desired.x_star().to_flat();
    let mut s = String::new();
    let names: Vec<String> = (1..=n)
        .map(|i| format!("q{i}"))
        .chain((1..=n).map(|i| format!("p{i}")))
        .collect();
    s.push_str(&names.join(","));
    s.push_str(",H,H_a,H_d\n");
    let total: usize = axes.iter().map(|a| a.count).product();
    let mut idx = vec![0usize; axes.len()];
    for _ in 0..total {
        let mut x = base.clone();
        for (a, &i) in axes.iter().zip(&idx) {
            x[a.coordinate] = a.value(i);
        }
        let state = State::from_flat(&x);
        let h = sys.hamiltonian(&state).map_err(SimError::from)?;
        let ha = ck.net.eval_ha(&state)?;
        for v in &x {
            s.push_str(&format!("{v:?},"));
        }
        s.push_str(&format!("{h:?},{ha:?},{:?}\n", h + ha));
        for k in (0..axes.len()).rev() {
            idx[k] += 1;
            if idx[k] < axes[k].count {
                break;
            }
            idx[k] = 0;
        }
    }
    Ok(s)
}

/// Writes the energy map to `output`, or to `energy_map.csv` in the override
/// directory (falling back to the working directory).
pub fn cmd_export(
    checkpoint: &Path,
    grid: &str,
    output: Option<&Path>,
    log: &mut dyn Write,
) -> Result<u8, CliError> {
    let ck = load_checkpoint(checkpoint)?;
    let axes = parse_grid(grid, ck.net.dof())?;
    let csv = energy_grid_csv(&ck, &axes)?;
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir).join(ENERGY_MAP_FILE),
            _ => PathBuf::from(ENERGY_MAP_FILE),
        },
    };
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(&path, csv)?;
    writeln!(log, "{}", path.display())?;
    Ok(EXIT_OK)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        let axes = parse_grid("q1=-1:1:3, p1=0:2:2", 1).unwrap();
        assert_eq!(axes.len(), 2);
        assert_eq!(axes[0].coordinate, 0);
        assert_eq!(axes[1].coordinate, 1);
        assert_eq!(axes[0].value(1), 0.0);
        assert_eq!(axes[1].value(1), 2.0);
        let axes = parse_grid("p2=0:0:1", 2).unwrap();
        assert_eq!(axes[0].coordinate, 3);
        for bad in [
            "",
            "q1=0:1",
            "q3=0:1:2",
            "x1=0:1:2",
            "q1=1:0:3",
            "q1=0:1:0",
            "q1=0:1:2,q1=0:1:2",
            "q1=a:1:2",
        ] {
            assert!(
                matches!(parse_grid(bad, 2), Err(CliError::Grid(_))),
                "{bad}"
            );
        }
    }
}
