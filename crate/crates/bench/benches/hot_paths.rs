use std::f64::consts::{FRAC_PI_2, PI};
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use neural_ida_core::numerics::Mat;
use neural_ida_core::ph::{MechanicalPH, State};
use neural_ida_core::residuals::{GradientMode, LossProblem};
use neural_ida_core::simulator::{rk4_step, Controller, NeuralController, SimError};
use neural_ida_core::surrogate::{widths_for, DesiredStructure, SurrogateNet, BLOCK};
use neural_ida_core::trainer::{sample_collocation, CollocationDomain};

fn pendulum() -> (MechanicalPH, DesiredStructure, SurrogateNet, State) {
    let sys = MechanicalPH::simple_pendulum(1.0, 1.0, 9.81);
    let x_star = State::new(vec![FRAC_PI_2], vec![0.0]);
    let ds = DesiredStructure::new(
        Mat::diag(&[1.0]),
        Mat::zeros(1, 1),
        x_star.clone(),
        0.1,
        0.1,
        1.0,
        Mat::diag(&[2.0]),
    )
    .unwrap();
    // Random head weights so every code path does real work.
    let net = SurrogateNet::with_options(3, &widths_for(1, &[20, 20, 20]), 1e-6, 1.0).unwrap();
    let theta: Vec<f64> = net
        .theta()
        .iter()
        .enumerate()
        .map(|(i, t)| t + 1e-2 * ((i as f64).sin()))
        .collect();
    let mut net = net;
    net.set_theta(&theta).unwrap();
    (sys, ds, net, x_star)
}

fn loss(c: &mut Criterion) {
    let (sys, ds, net, x_star) = pendulum();
    let dom = CollocationDomain {
        lower: vec![FRAC_PI_2 - PI, -3.0],
        upper: vec![FRAC_PI_2 + PI, 3.0],
        n_points: 1024,
        seed: 0,
    };
    let batch = sample_collocation(&dom, &x_star).unwrap();
    let prob = LossProblem::new(&sys, &ds, &batch).unwrap();
    c.bench_function("loss_and_gradient_1024", |b| {
        b.iter(|| prob.evaluate(black_box(&net), GradientMode::Total).unwrap())
    });
    c.bench_function("loss_value_1024", |b| {
        b.iter(|| prob.evaluate(black_box(&net), GradientMode::None).unwrap())
    });
}

fn forward(c: &mut Criterion) {
    let (_, _, net, _) = pendulum();
    let xs: Vec<f64> = (0..BLOCK)
        .flat_map(|i| [0.1 * i as f64 - 1.0, 0.05 * i as f64])
        .collect();
    let mut ws = net.workspace();
    c.bench_function("forward_block_32", |b| {
        b.iter(|| net.forward_block(black_box(&xs), &mut ws))
    });
}

fn simulation(c: &mut Criterion) {
    let (sys, ds, net, _) = pendulum();
    let ctrl = NeuralController {
        sys: &sys,
        net: &net,
        ds: &ds,
    };
    let x0 = [0.3, 0.2];
    c.bench_function("closed_loop_rk4_step", |b| {
        b.iter(|| {
            let mut f = |_t: f64, x: &[f64]| {
                let s = State::from_flat(x);
                let u = ctrl.control(&s)?;
                Ok::<_, SimError>(sys.open_loop_dynamics(&s, &u)?)
            };
            rk4_step(&mut f, 0.0, black_box(&x0), 1e-3).unwrap()
        })
    });
}

criterion_group!(benches, loss, forward, simulation);
criterion_main!(benches);
