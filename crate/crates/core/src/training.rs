//! Adam, the epoch/batch training loop with early stopping, and grid search
//! with expanding-window cross-validation.

use std::io::{self, Write};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lstm::{backward, forward, mse_loss, predict, Gradients, HyperParams, ModelError, ModelParams, NetworkWeights};
use crate::numeric::{Matrix, Rng};
use crate::timeseries::{make_windows, make_windows_from, WindowedDataset};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Batch size used when scoring validation windows. Does not affect
/// results: batch rows are computed independently.
const EVAL_BATCH: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite gradient in {0}")]
    Numeric(String),
    #[error("training diverged: loss {loss} exceeds 1e6 x initial {initial}")]
    Divergence { loss: f64, initial: f64 },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no feasible grid combination: {0}")]
    Grid(String),
}

/// Per-parameter moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: NetworkWeights,
    pub v: NetworkWeights,
    pub t: u64,
    pub learning_rate: f64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            m: NetworkWeights::zeros(&params.hyper),
            v: NetworkWeights::zeros(&params.hyper),
            t: 0,
            learning_rate: params.hyper.learning_rate,
        }
    }
}

/// One bias-corrected Adam update. The update is aborted, leaving both
/// parameters and state untouched, if any gradient is non-finite.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut AdamState) -> Result<(), TrainError> {
    let views = grads.tensors();
    if let Some(bad) = views.iter().find(|t| t.data.iter().any(|v| !v.is_finite())) {
        return Err(TrainError::Numeric(bad.name.clone()));
    }
    state.t += 1;
    let t = state.t as i32;
    let lr = state.learning_rate;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let mut ps = params.weights.tensors_mut();
    let mut ms = state.m.tensors_mut();
    let mut vs = state.v.tensors_mut();
    if ps.len() != views.len() {
        return Err(TrainError::Config("gradient layout does not match parameters".into()));
    }
    for (k, g) in views.iter().enumerate() {
        let (p, m, v) = (&mut ps[k], &mut ms[k], &mut vs[k]);
        for j in 0..g.data.len() {
            let gj = g.data[j];
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * gj;
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub patience: usize,
    pub min_delta: f64,
    /// Chronological tail of the training windows held out for validation.
    pub validation_fraction: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self {
            patience: 3,
            min_delta: 1e-5,
            validation_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StopReason {
    Completed,
    EarlyStopped,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    /// Epoch (1-based) whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn train_mse(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_mse).collect()
    }

    pub fn val_mse(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_mse).collect()
    }

    pub fn best_val_mse(&self) -> f64 {
        self.epochs.iter().map(|e| e.val_mse).fold(f64::INFINITY, f64::min)
    }

    /// `epoch,train_mse,val_mse`; wall-clock is left out so the file is
    /// reproducible.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "epoch,train_mse,val_mse")?;
        for e in &self.epochs {
            writeln!(out, "{},{},{}", e.epoch, e.train_mse, e.val_mse)?;
        }
        Ok(())
    }
}

/// Split training windows into a fit part and a chronological validation
/// tail. A single window is used for both.
pub fn validation_split(windows: &WindowedDataset, fraction: f64) -> (WindowedDataset, WindowedDataset) {
    let n = windows.len();
    if n < 2 {
        return (windows.clone(), windows.clone());
    }
    let val = ((n as f64 * fraction).floor() as usize).clamp(1, n - 1);
    (windows.slice(0..n - val), windows.slice(n - val..n))
}

/// Inference-mode MSE over a window set.
pub fn evaluate_mse(params: &ModelParams, windows: &WindowedDataset) -> Result<f64, TrainError> {
    let pred = predict(params, windows.inputs(), EVAL_BATCH)?;
    Ok(mse_loss(&pred, windows.targets())?.0)
}

pub fn train(
    params: ModelParams,
    windows: &WindowedDataset,
    rng: &mut Rng,
    early_stop: &EarlyStop,
) -> Result<(ModelParams, TrainHistory), TrainError> {
    train_with_callback(params, windows, rng, early_stop, |_| {})
}

/// Mini-batch training with per-epoch shuffling. Returns the parameters
/// from the epoch with the lowest validation MSE.
pub fn train_with_callback(
    mut params: ModelParams,
    windows: &WindowedDataset,
    rng: &mut Rng,
    early_stop: &EarlyStop,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(ModelParams, TrainHistory), TrainError> {
    let hyper = params.hyper;
    hyper.validate()?;
    params.check()?;
    if early_stop.patience == 0 {
        return Err(TrainError::Config("patience must be at least 1".into()));
    }
    if !(early_stop.validation_fraction > 0.0 && early_stop.validation_fraction < 1.0) {
        return Err(TrainError::Config("validation fraction must be in (0, 1)".into()));
    }
    if windows.is_empty() {
        return Err(ModelError::EmptyBatch.into());
    }
    if windows.timesteps() != hyper.timesteps * hyper.features {
        return Err(TrainError::Config(format!(
            "windows have {} values, model expects {}",
            windows.timesteps(),
            hyper.timesteps * hyper.features
        )));
    }

    let (fit, val) = validation_split(windows, early_stop.validation_fraction);
    let mut adam = AdamState::new(&params);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut reference = f64::INFINITY;
    let mut stale = 0usize;
    let mut initial_loss: Option<f64> = None;
    let mut stop_reason = StopReason::Completed;

    for epoch in 1..=hyper.epochs {
        let started = Instant::now();
        rng.shuffle(&mut order);
        let mut sum_loss = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let batch: Vec<&[f64]> = chunk.iter().map(|&i| fit.input(i)).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| fit.target(i)).collect();
            let (pred, cache) = forward(&params, &batch, true, rng)?;
            let col: Vec<f64> = (0..pred.rows()).map(|r| pred.get(r, 0)).collect();
            let (loss, grad) = mse_loss(&col, &targets)?;
            if !loss.is_finite() {
                return Err(TrainError::Numeric("loss".into()));
            }
            let initial = *initial_loss.get_or_insert(loss);
            if loss > 1e6 * initial.max(f64::MIN_POSITIVE) {
                return Err(TrainError::Divergence { loss, initial });
            }
            let mut loss_grad = Matrix::zeros(pred.rows(), pred.cols());
            for (r, g) in grad.iter().enumerate() {
                loss_grad.set(r, 0, *g);
            }
            let grads = backward(&params, &cache, &loss_grad)?;
            adam_step(&mut params, &grads, &mut adam)?;
            sum_loss += loss * chunk.len() as f64;
        }
        let train_mse = sum_loss / fit.len() as f64;
        let val_mse = evaluate_mse(&params, &val)?;
        if !val_mse.is_finite() {
            return Err(TrainError::Numeric("validation loss".into()));
        }
        let record = EpochRecord {
            epoch,
            train_mse,
            val_mse,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.push(record);

        if best.as_ref().is_none_or(|(b, _, _)| val_mse < *b) {
            best = Some((val_mse, epoch, params.clone()));
        }
        if val_mse < reference - early_stop.min_delta {
            reference = val_mse;
            stale = 0;
        } else {
            stale += 1;
            if stale >= early_stop.patience && epoch < hyper.epochs {
                stop_reason = StopReason::EarlyStopped;
                break;
            }
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    Ok((
        best_params,
        TrainHistory {
            epochs: history,
            stop_reason,
            best_epoch,
        },
    ))
}

/// Candidate values per hyperparameter. The Cartesian product is
/// enumerated with `units` outermost and `batch_size` innermost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub units: Vec<usize>,
    pub timesteps: Vec<usize>,
    pub learning_rate: Vec<f64>,
    pub dropout: Vec<f64>,
    pub batch_size: Vec<usize>,
}

impl Grid {
    /// units {50, 100, 200} × lr {1e-3, 1e-2} × timesteps {24}, with the
    /// base dropout and batch size.
    pub fn default_for(base: &HyperParams) -> Self {
        Self {
            units: vec![50, 100, 200],
            timesteps: vec![24],
            learning_rate: vec![1e-3, 1e-2],
            dropout: vec![base.dropout],
            batch_size: vec![base.batch_size],
        }
    }

    /// A grid with one candidate per field, taken from `base`.
    pub fn single(base: &HyperParams) -> Self {
        Self {
            units: vec![base.units],
            timesteps: vec![base.timesteps],
            learning_rate: vec![base.learning_rate],
            dropout: vec![base.dropout],
            batch_size: vec![base.batch_size],
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let empty = [
            ("units", self.units.is_empty()),
            ("timesteps", self.timesteps.is_empty()),
            ("learning_rate", self.learning_rate.is_empty()),
            ("dropout", self.dropout.is_empty()),
            ("batch_size", self.batch_size.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(TrainError::Config(format!("grid field `{name}` is empty")));
        }
        Ok(())
    }

    pub fn combinations(&self, base: &HyperParams) -> Vec<HyperParams> {
        let mut out = Vec::new();
        for &units in &self.units {
            for &timesteps in &self.timesteps {
                for &learning_rate in &self.learning_rate {
                    for &dropout in &self.dropout {
                        for &batch_size in &self.batch_size {
                            out.push(HyperParams {
                                units,
                                timesteps,
                                learning_rate,
                                dropout,
                                batch_size,
                                ..*base
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    pub seed: u64,
    pub early_stop: EarlyStop,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 3,
            seed: crate::DEFAULT_SEED,
            early_stop: EarlyStop::default(),
        }
    }
}

/// Train and validation windows for one expanding-window fold.
#[derive(Debug, Clone)]
pub struct Fold {
    pub index: usize,
    pub train: WindowedDataset,
    pub validation: WindowedDataset,
}

/// Fold `k` (1-based) trains on the first `k / (folds + 1)` of the series
/// and validates on the next segment of the same length. Validation
/// windows may draw their inputs from the training segment.
pub fn expanding_folds(series: &[f64], folds: usize, timesteps: usize, horizon: usize) -> Result<Vec<Fold>, String> {
    if folds == 0 {
        return Err("at least one fold required".into());
    }
    let n = series.len();
    let mut out = Vec::with_capacity(folds);
    for k in 1..=folds {
        let train_end = k * n / (folds + 1);
        let val_end = (k + 1) * n / (folds + 1);
        let train = make_windows(&series[..train_end], timesteps, horizon)
            .map_err(|e| format!("fold {k}: {e}"))?;
        let validation = make_windows_from(&series[..val_end], timesteps, horizon, train_end)
            .map_err(|e| format!("fold {k}: {e}"))?;
        out.push(Fold {
            index: k,
            train,
            validation,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridScore {
    pub index: usize,
    pub hyper: HyperParams,
    /// Mean validation MAE across folds, `None` when infeasible.
    pub score: Option<f64>,
    pub fold_scores: Vec<f64>,
    pub skipped: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub best: HyperParams,
    pub best_score: f64,
    pub table: Vec<GridScore>,
}

/// Train an LSTM on the fold and return its validation MAE.
pub fn lstm_fold_score(hyper: &HyperParams, fold: &Fold, seed: u64, early_stop: &EarlyStop) -> Result<f64, TrainError> {
    let mut rng = Rng::new(seed);
    let params = ModelParams::init(*hyper, &mut rng);
    let (trained, _) = train(params, &fold.train, &mut rng, early_stop)?;
    let pred = predict(&trained, fold.validation.inputs(), EVAL_BATCH)?;
    let mae = pred
        .iter()
        .zip(fold.validation.targets())
        .map(|(p, t)| (p - t).abs())
        .sum::<f64>()
        / pred.len() as f64;
    Ok(mae)
}

pub fn grid_search(grid: &Grid, base: &HyperParams, series: &[f64], cv: &CvConfig) -> Result<GridResult, TrainError> {
    grid_search_with(grid, base, series, cv, |hyper, fold, seed| {
        lstm_fold_score(hyper, fold, seed, &cv.early_stop)
    })
}

/// Grid search with a caller-supplied fold scorer. Each combination gets
/// the seed `cv.seed ^ index`. Lowest mean score wins; ties go to fewer
/// units, then fewer timesteps, then earlier grid position.
pub fn grid_search_with(
    grid: &Grid,
    base: &HyperParams,
    series: &[f64],
    cv: &CvConfig,
    mut score_fold: impl FnMut(&HyperParams, &Fold, u64) -> Result<f64, TrainError>,
) -> Result<GridResult, TrainError> {
    grid.validate()?;
    if cv.folds == 0 {
        return Err(TrainError::Config("at least one fold required".into()));
    }
    let mut table = Vec::new();
    for (index, hyper) in grid.combinations(base).into_iter().enumerate() {
        if let Err(e) = hyper.validate() {
            table.push(GridScore {
                index,
                hyper,
                score: None,
                fold_scores: vec![],
                skipped: Some(e.to_string()),
            });
            continue;
        }
        let folds = match expanding_folds(series, cv.folds, hyper.timesteps, hyper.horizon) {
            Ok(f) => f,
            Err(reason) => {
                table.push(GridScore {
                    index,
                    hyper,
                    score: None,
                    fold_scores: vec![],
                    skipped: Some(reason),
                });
                continue;
            }
        };
        let seed = cv.seed ^ index as u64;
        let mut fold_scores = Vec::with_capacity(folds.len());
        for fold in &folds {
            fold_scores.push(score_fold(&hyper, fold, seed)?);
        }
        let score = fold_scores.iter().sum::<f64>() / fold_scores.len() as f64;
        table.push(GridScore {
            index,
            hyper,
            score: Some(score),
            fold_scores,
            skipped: None,
        });
    }

    let best = table
        .iter()
        .filter_map(|row| row.score.map(|s| (s, row)))
        .min_by(|(sa, a), (sb, b)| {
            sa.total_cmp(sb)
                .then(a.hyper.units.cmp(&b.hyper.units))
                .then(a.hyper.timesteps.cmp(&b.hyper.timesteps))
                .then(a.index.cmp(&b.index))
        })
        .map(|(s, row)| (s, row.hyper));
    match best {
        Some((best_score, best)) => Ok(GridResult {
            best,
            best_score,
            table,
        }),
        None => Err(TrainError::Grid(
            table
                .iter()
                .filter_map(|r| r.skipped.clone())
                .next()
                .unwrap_or_default(),
        )),
    }
}
