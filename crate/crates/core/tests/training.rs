mod common;

use common::five_point;
use prgp_core::data::{Dataset, Observation};
use prgp_core::kernel::KernelFamily;
use prgp_core::physics::{PhysicsModel, PhysicsSpec};
use prgp_core::trainer::{
    elbo_and_gradient, elbo_at, fit_models, resume, train, Draw, ModelParams, ParamLayout, TrainConfig, TrainState,
    TrainingData,
};
use rand::Rng;

/// 24 readings from a smooth synthetic field, 20 of them for training.
fn synthetic() -> TrainingData {
    let mut rows = Vec::new();
    for k in 0..4 {
        for p in 0..6 {
            let (x, t) = (0.5 + k as f64, p as f64 / 12.0);
            let speed = 55.0 - 8.0 * (x * 0.8).sin() - 20.0 * t;
            let flow = 120.0 + 15.0 * (x * 0.6 + t * 3.0).cos();
            rows.push(Observation { station_id: format!("S{k}"), timestamp: 300 * p, milepost: x, flow, speed });
        }
    }
    let data = Dataset::from_observations(rows).unwrap().split(20.0 / 24.0, 4).unwrap().standardize().unwrap();
    let training = TrainingData::from_dataset(&data).unwrap();
    assert_eq!(training.len(), 20);
    training
}

fn perturbed(model: PhysicsModel, family: KernelFamily, rng: &mut impl Rng) -> (ModelParams, ParamLayout, Vec<f64>) {
    let spec = PhysicsSpec::new(model, &[0.7], family).unwrap();
    let params = ModelParams::initial(family, spec).unwrap();
    let layout = ParamLayout::new(&params).unwrap();
    let theta: Vec<f64> = layout.pack(&params).iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
    (params, layout, theta)
}

#[test]
fn elbo_gradient_matches_finite_differences_for_every_model() {
    let data = synthetic();
    let mut rng = common::rng(31);
    let config = TrainConfig { m: 10, ..TrainConfig::default() };
    let draws = Draw::for_iteration(&data, &config, 3);
    for family in [KernelFamily::SeArd, KernelFamily::Compound] {
        for model in PhysicsModel::ALL {
            let (mut params, layout, theta) = perturbed(model, family, &mut rng);
            layout.unpack(&theta, &mut params);
            let models = fit_models(&data, &params).unwrap();
            let (value, grad) = elbo_and_gradient(&data, &layout, &models, &params.physics, &draws).unwrap();
            assert!((value - elbo_at(&data, &layout, &params, &theta, &draws).unwrap()).abs() < 1e-9 * (1.0 + value.abs()));
            for i in 0..theta.len() {
                let mut f = |h: f64| {
                    let mut t = theta.clone();
                    t[i] += h;
                    elbo_at(&data, &layout, &params, &t, &draws).unwrap()
                };
                let fd = five_point(&mut f, 1e-3);
                let tol = (1e-4 * fd.abs()).max(1e-7);
                assert!((grad[i] - fd).abs() <= tol, "{model:?} {family:?} {}: {} vs {fd}", layout.names[i], grad[i]);
            }
        }
    }
}

#[test]
fn zero_weight_reproduces_the_pure_gp() {
    let data = synthetic();
    let config = TrainConfig { iterations: 40, ..TrainConfig::default() };
    let run = |model| {
        let init = ModelParams::initial(KernelFamily::SeArd, PhysicsSpec::new(model, &[0.0], KernelFamily::SeArd).unwrap()).unwrap();
        train(&data, &init, &config, &mut |_| {}).unwrap()
    };
    let pure = run(PhysicsModel::None);
    for model in [PhysicsModel::Lwr, PhysicsModel::Arz] {
        let zero = run(model);
        assert_eq!(zero.params.outputs, pure.params.outputs, "{model:?}");
        assert_eq!(zero.state.elbo_trace, pure.state.elbo_trace);
    }
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let data = synthetic();
    let init = ModelParams::initial(KernelFamily::SeArd, PhysicsSpec::new(PhysicsModel::Arz, &[1.0], KernelFamily::SeArd).unwrap()).unwrap();
    let full_cfg = TrainConfig { iterations: 30, seed: 5, ..TrainConfig::default() };
    let full = train(&data, &init, &full_cfg, &mut |_| {}).unwrap();
    let half = train(&data, &init, &TrainConfig { iterations: 15, ..full_cfg.clone() }, &mut |_| {}).unwrap();
    let state: TrainState = half.state.clone();
    let resumed = resume(&data, &half.params, state, &full_cfg, &mut |_| {}).unwrap();
    assert_eq!(resumed.state.iteration, 30);
    let (a, b) = (full.state.elbo_trace.last().unwrap(), resumed.state.elbo_trace.last().unwrap());
    assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    assert_eq!(full.state.theta, resumed.state.theta);
}

#[test]
fn training_is_deterministic_and_improves_the_objective() {
    let data = synthetic();
    let init = ModelParams::initial(KernelFamily::SeArd, PhysicsSpec::new(PhysicsModel::Lwr, &[1.0], KernelFamily::SeArd).unwrap()).unwrap();
    let config = TrainConfig { iterations: 60, seed: 2, ..TrainConfig::default() };
    let mut seen = 0;
    let a = train(&data, &init, &config, &mut |p| {
        assert_eq!(p.iteration, seen);
        assert!(p.elbo.is_finite() && p.grad_norm.is_finite());
        seen += 1;
    })
    .unwrap();
    let b = train(&data, &init, &config, &mut |_| {}).unwrap();
    assert_eq!(a.state, b.state);
    let trace = &a.state.elbo_trace;
    let head = trace[..10].iter().sum::<f64>() / 10.0;
    let tail = trace[trace.len() - 10..].iter().sum::<f64>() / 10.0;
    assert!(tail > head, "{head} -> {tail}");
}
