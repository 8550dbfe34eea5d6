//! Central finite-difference check of every BPTT gradient.

use redf_core::lstm::{backward, forward, mse_loss, HyperParams, ModelParams};
use redf_core::numeric::{Matrix, Rng};

const EPS: f64 = 1e-5;
const REL_TOL: f64 = 1e-5;
/// Denominator floor for the relative error. Central differences at this
/// step carry ~1e-10 absolute noise, so gradients below the floor are held
/// to an absolute bound of `REL_TOL * REL_FLOOR` instead.
const REL_FLOOR: f64 = 5e-6;

struct Fixture {
    params: ModelParams,
    windows: Vec<Vec<f64>>,
    targets: Vec<f64>,
    mask_seed: u64,
}

fn fixture(seed: u64, dropout: f64) -> Fixture {
    let hyper = HyperParams {
        units: 4,
        timesteps: 3,
        features: 1,
        dense_units: 1,
        dropout,
        ..HyperParams::default()
    };
    let mut rng = Rng::new(seed);
    let mut params = ModelParams::init(hyper, &mut rng);
    // random biases so no gradient is trivially structured
    for t in params.weights.tensors_mut() {
        for v in t.iter_mut() {
            *v += rng.uniform(-0.3, 0.3);
        }
    }
    let windows = (0..2)
        .map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect())
        .collect();
    let targets = (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect();
    Fixture {
        params,
        windows,
        targets,
        mask_seed: seed.wrapping_mul(31).wrapping_add(7),
    }
}

fn loss(f: &Fixture, params: &ModelParams) -> f64 {
    let batch: Vec<&[f64]> = f.windows.iter().map(Vec::as_slice).collect();
    // same seed, same masks: masks are drawn independently of the weights
    let (pred, _) = forward(params, &batch, true, &mut Rng::new(f.mask_seed)).unwrap();
    mse_loss(pred.data(), &f.targets).unwrap().0
}

/// Returns the worst relative error over all parameters.
fn check(f: &Fixture) -> (f64, String) {
    let batch: Vec<&[f64]> = f.windows.iter().map(Vec::as_slice).collect();
    let (pred, cache) = forward(&f.params, &batch, true, &mut Rng::new(f.mask_seed)).unwrap();
    let (_, lg) = mse_loss(pred.data(), &f.targets).unwrap();
    let grads = backward(&f.params, &cache, &Matrix::from_vec(2, 1, lg).unwrap()).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|t| (t.name, t.data.to_vec()))
        .collect();

    let mut worst = (0.0, String::new());
    let mut probe = f.params.clone();
    for (ti, (name, ga)) in analytic.iter().enumerate() {
        for k in 0..ga.len() {
            let orig = probe.weights.tensors_mut()[ti][k];
            probe.weights.tensors_mut()[ti][k] = orig + EPS;
            let up = loss(f, &probe);
            probe.weights.tensors_mut()[ti][k] = orig - EPS;
            let down = loss(f, &probe);
            probe.weights.tensors_mut()[ti][k] = orig;
            let numeric = (up - down) / (2.0 * EPS);
            let denom = ga[k].abs().max(numeric.abs()).max(REL_FLOOR);
            let rel = (ga[k] - numeric).abs() / denom;
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}] analytic {} numeric {numeric}", ga[k]));
            }
        }
    }
    worst
}

#[test]
fn gradients_match_finite_differences_without_dropout() {
    for seed in 0..20 {
        let (rel, at) = check(&fixture(seed, 0.0));
        assert!(rel < REL_TOL, "seed {seed}: rel {rel:e} at {at}");
    }
}

#[test]
fn gradients_match_finite_differences_through_dropout() {
    for seed in 100..120 {
        let (rel, at) = check(&fixture(seed, 0.25));
        assert!(rel < REL_TOL, "seed {seed}: rel {rel:e} at {at}");
    }
}

#[test]
fn gradient_check_with_default_dropout_many_seeds() {
    for seed in 1000..1050 {
        let (rel, at) = check(&fixture(seed, 0.1));
        assert!(rel < REL_TOL, "seed {seed}: rel {rel:e} at {at}");
    }
}
