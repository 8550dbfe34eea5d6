//! Shared pieces of the acceptance suite: dataset lookup, outcome lines,
//! a finite-difference gradient checker and direct-formula metrics.

use std::fmt;
use std::path::{Path, PathBuf};

use redf_core::lstm::{backward, forward, mse_loss, HyperParams, ModelParams};
use redf_core::numeric::{Matrix, Rng};

/// Published row counts of the four hourly datasets.
pub const DATASET_ROWS: [(&str, usize); 4] = [("AEP", 121_273), ("COMED", 66_497), ("DAYTON", 121_275), ("PJME", 145_366)];

/// `$REDF_DATA_DIR`, else `data/` at the workspace root.
pub fn data_dir() -> PathBuf {
    std::env::var_os("REDF_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
            manifest.ancestors().nth(2).unwrap_or(manifest).join("data")
        })
}

pub fn dataset_path(zone: &str) -> PathBuf {
    data_dir().join(format!("{zone}_hourly.csv"))
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub id: String,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{status}] criterion {} {}: {}", self.id, self.title, self.detail)
    }
}

pub mod gradient {
    use super::*;

    pub const EPS: f64 = 1e-5;
    pub const REL_TOL: f64 = 1e-5;
    /// Relative errors are taken against max(|analytic|, |numeric|, floor).
    pub const REL_FLOOR: f64 = 5e-6;

    struct Case {
        params: ModelParams,
        windows: Vec<Vec<f64>>,
        targets: Vec<f64>,
        mask_seed: u64,
    }

    fn case(seed: u64, dropout: f64) -> Case {
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
        for t in params.weights.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.uniform(-0.3, 0.3);
            }
        }
        Case {
            params,
            windows: (0..2).map(|_| (0..3).map(|_| rng.uniform(-1.0, 1.0)).collect()).collect(),
            targets: (0..2).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            mask_seed: !seed,
        }
    }

    fn loss(c: &Case, params: &ModelParams) -> f64 {
        let batch: Vec<&[f64]> = c.windows.iter().map(Vec::as_slice).collect();
        let (pred, _) = forward(params, &batch, true, &mut Rng::new(c.mask_seed)).unwrap();
        mse_loss(pred.data(), &c.targets).unwrap().0
    }

    /// Worst relative error over every parameter of a 4-unit, 3-step,
    /// batch-2 network, with its location.
    pub fn worst_relative_error(seed: u64, dropout: f64) -> (f64, String) {
        let c = case(seed, dropout);
        let batch: Vec<&[f64]> = c.windows.iter().map(Vec::as_slice).collect();
        let (pred, cache) = forward(&c.params, &batch, true, &mut Rng::new(c.mask_seed)).unwrap();
        let (_, lg) = mse_loss(pred.data(), &c.targets).unwrap();
        let grads = backward(&c.params, &cache, &Matrix::from_vec(2, 1, lg).unwrap()).unwrap();
        let analytic: Vec<(String, Vec<f64>)> = grads.tensors().into_iter().map(|t| (t.name, t.data.to_vec())).collect();
        let mut probe = c.params.clone();
        let mut worst = (0.0, String::new());
        for (ti, (name, ga)) in analytic.iter().enumerate() {
            for (k, &g) in ga.iter().enumerate() {
                let orig = probe.weights.tensors_mut()[ti][k];
                probe.weights.tensors_mut()[ti][k] = orig + EPS;
                let up = loss(&c, &probe);
                probe.weights.tensors_mut()[ti][k] = orig - EPS;
                let down = loss(&c, &probe);
                probe.weights.tensors_mut()[ti][k] = orig;
                let numeric = (up - down) / (2.0 * EPS);
                let rel = (g - numeric).abs() / g.abs().max(numeric.abs()).max(REL_FLOOR);
                if rel > worst.0 {
                    worst = (rel, format!("{name}[{k}]"));
                }
            }
        }
        worst
    }
}

/// Textbook formulas, written without sharing code with the library.
pub mod oracle {
    pub fn mae(y: &[f64], p: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..y.len() {
            s += (y[i] - p[i]).abs();
        }
        s / y.len() as f64
    }

    pub fn rmse(y: &[f64], p: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..y.len() {
            s += (y[i] - p[i]) * (y[i] - p[i]);
        }
        (s / y.len() as f64).sqrt()
    }

    pub fn r2(y: &[f64], p: &[f64]) -> f64 {
        let mean = y.iter().sum::<f64>() / y.len() as f64;
        let (mut res, mut tot) = (0.0, 0.0);
        for i in 0..y.len() {
            res += (y[i] - p[i]).powi(2);
            tot += (y[i] - mean).powi(2);
        }
        1.0 - res / tot
    }
}
