//! Multi-step inference from raw MW history.

use thiserror::Error;

use crate::lstm::{forward, ModelError, ModelParams};
use crate::numeric::Rng;
use crate::timeseries::Scaler;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("history has {got} values, model needs {need}")]
    InsufficientHistory { got: usize, need: usize },
    #[error("history value at index {0} is not finite")]
    InvalidValues(usize),
    #[error("horizon must be positive")]
    ZeroHorizon,
    #[error("model produced a non-finite value at step {0}")]
    NonFiniteOutput(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl ForecastError {
    /// Stable short code used on the wire.
    pub fn code(&self) -> &'static str {
        match self {
            ForecastError::InsufficientHistory { .. } => "insufficient_history",
            ForecastError::InvalidValues(_) => "invalid_values",
            ForecastError::ZeroHorizon => "invalid_horizon",
            ForecastError::NonFiniteOutput(_) | ForecastError::Model(_) => "internal",
        }
    }
}

/// A trained network bundled with the scaler it was trained under.
#[derive(Debug, Clone)]
pub struct Forecaster {
    pub params: ModelParams,
    pub scaler: Scaler,
}

impl Forecaster {
    pub fn new(params: ModelParams, scaler: Scaler) -> Self {
        Self { params, scaler }
    }

    pub fn timesteps(&self) -> usize {
        self.params.hyper.timesteps
    }

    /// Scale the history, keep the last `timesteps` values and roll the
    /// model forward `horizon` steps, feeding each prediction back in.
    /// Returns MW values.
    pub fn forecast(&self, history_mw: &[f64], horizon: usize) -> Result<Vec<f64>, ForecastError> {
        if horizon == 0 {
            return Err(ForecastError::ZeroHorizon);
        }
        if let Some(i) = history_mw.iter().position(|v| !v.is_finite()) {
            return Err(ForecastError::InvalidValues(i));
        }
        let need = self.timesteps();
        if history_mw.len() < need {
            return Err(ForecastError::InsufficientHistory {
                got: history_mw.len(),
                need,
            });
        }
        let mut window = self.scaler.apply(&history_mw[history_mw.len() - need..]);
        let mut rng = Rng::new(0);
        let mut out = Vec::with_capacity(horizon);
        for step in 0..horizon {
            let (pred, _) = forward(&self.params, &[&window], false, &mut rng)?;
            let next = pred.get(0, 0);
            if !next.is_finite() {
                return Err(ForecastError::NonFiniteOutput(step));
            }
            out.push(self.scaler.invert_value(next));
            window.remove(0);
            window.push(next);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lstm::{predict, HyperParams};

    fn forecaster() -> Forecaster {
        let hyper = HyperParams {
            units: 3,
            timesteps: 4,
            ..HyperParams::default()
        };
        let params = ModelParams::init(hyper, &mut Rng::new(9));
        Forecaster::new(params, Scaler::minmax(100.0, 300.0).unwrap())
    }

    #[test]
    fn one_step_matches_predict() {
        let f = forecaster();
        let history = [150.0, 180.0, 220.0, 260.0, 240.0];
        let got = f.forecast(&history, 1).unwrap();
        let scaled = f.scaler.apply(&history[1..]);
        let direct = predict(&f.params, [scaled.as_slice()], 1).unwrap();
        assert_eq!(got, vec![f.scaler.invert_value(direct[0])]);
    }

    #[test]
    fn rollout_feeds_predictions_back() {
        let f = forecaster();
        let history = [150.0, 180.0, 220.0, 260.0];
        let two = f.forecast(&history, 2).unwrap();
        let first = f.forecast(&history, 1).unwrap()[0];
        let shifted = [180.0, 220.0, 260.0, first];
        // exact only if the MW round trip of the first step is exact
        let s = f.scaler.apply(&history);
        let p1 = predict(&f.params, [s.as_slice()], 1).unwrap()[0];
        let w2 = [s[1], s[2], s[3], p1];
        let p2 = predict(&f.params, [w2.as_slice()], 1).unwrap()[0];
        assert_eq!(two, vec![f.scaler.invert_value(p1), f.scaler.invert_value(p2)]);
        let approx = f.forecast(&shifted, 1).unwrap()[0];
        assert!((approx - two[1]).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_requests() {
        let f = forecaster();
        let e = f.forecast(&[1.0, 2.0, 3.0], 1).unwrap_err();
        assert_eq!(e.code(), "insufficient_history");
        let e = f.forecast(&[1.0, f64::NAN, 3.0, 4.0], 1).unwrap_err();
        assert_eq!(e.code(), "invalid_values");
        assert!(matches!(f.forecast(&[1.0; 4], 0), Err(ForecastError::ZeroHorizon)));
        assert_eq!(f.forecast(&[200.0; 10], 3).unwrap().len(), 3);
    }
}
