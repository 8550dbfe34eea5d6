//! Train/test construction and the model comparison run behind `benchmark`.

use anyhow::{bail, Context, Result};
use chrono::NaiveDateTime;
use redf_core::baselines::{fit_forest, seasonal_naive_at, ForestConfig};
use redf_core::evaluation::{evaluate, ReportRow};
use redf_core::lstm::{predict, HyperParams, ModelParams};
use redf_core::numeric::Rng;
use redf_core::timeseries::{make_windows, Prepared, Scaler, WindowedDataset};
use redf_core::training::{train_with_callback, EarlyStop, EpochRecord, TrainHistory};

/// Windows over the whole scaled series, cut by target position: training
/// windows have their target inside the training split, test windows
/// after it. Test inputs may reach back into the training split.
#[derive(Debug, Clone)]
pub struct Windows {
    pub scaled: Vec<f64>,
    pub train: WindowedDataset,
    pub test: WindowedDataset,
}

pub fn windows(prepared: &Prepared, timesteps: usize, horizon: usize) -> Result<Windows> {
    let scaled = prepared.scaled();
    let all = make_windows(&scaled, timesteps, horizon)?;
    let cut = all
        .target_indices()
        .partition_point(|&i| i < prepared.train_len);
    if cut == 0 || cut == all.len() {
        bail!(
            "{} points with timesteps {timesteps} leave no training or no test windows",
            scaled.len()
        );
    }
    Ok(Windows {
        train: all.slice(0..cut),
        test: all.slice(cut..all.len()),
        scaled,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Redf,
    Rfr,
    SeasonalNaive,
}

impl ModelKind {
    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Redf => "REDf",
            ModelKind::Rfr => "RFR",
            ModelKind::SeasonalNaive => "SeasonalNaive",
        }
    }

    pub const ALL: [ModelKind; 3] = [ModelKind::Redf, ModelKind::Rfr, ModelKind::SeasonalNaive];
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "redf" | "lstm" => Ok(ModelKind::Redf),
            "rfr" | "forest" => Ok(ModelKind::Rfr),
            "naive" | "seasonal-naive" | "seasonalnaive" => Ok(ModelKind::SeasonalNaive),
            other => Err(format!("unknown model `{other}` (expected redf|rfr|naive)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelRun {
    pub kind: ModelKind,
    /// Test-window forecasts in scaled units.
    pub predictions: Vec<f64>,
    pub rows: [ReportRow; 2],
}

impl ModelRun {
    pub fn scaled(&self) -> &ReportRow {
        &self.rows[0]
    }

    pub fn mw(&self) -> &ReportRow {
        &self.rows[1]
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkRun {
    pub zone: String,
    pub scaler: Scaler,
    pub test_targets: Vec<f64>,
    pub test_timestamps: Vec<NaiveDateTime>,
    pub runs: Vec<ModelRun>,
    pub history: Option<TrainHistory>,
    pub model: Option<ModelParams>,
}

impl BenchmarkRun {
    pub fn run(&self, kind: ModelKind) -> Option<&ModelRun> {
        self.runs.iter().find(|r| r.kind == kind)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BenchmarkConfig {
    pub hyper: HyperParams,
    pub seed: u64,
    pub early_stop: EarlyStop,
    pub forest: ForestConfig,
    pub season: usize,
}

/// Fit every requested model on the training windows and score it on the
/// test windows, in scaled units and MW.
pub fn run_benchmark(
    prepared: &Prepared,
    cfg: &BenchmarkConfig,
    models: &[ModelKind],
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<BenchmarkRun> {
    let h = &cfg.hyper;
    let w = windows(prepared, h.timesteps, h.horizon)?;
    let zone = prepared.series.zone.clone();
    let timestamps = prepared.series.timestamps();
    let test_timestamps = w.test.target_indices().iter().map(|&i| timestamps[i]).collect();
    let mut runs = Vec::new();
    let mut history = None;
    let mut model = None;
    for &kind in models {
        let predictions = match kind {
            ModelKind::Redf => {
                let mut rng = Rng::new(cfg.seed);
                let params = ModelParams::init(*h, &mut rng);
                let (trained, hist) = train_with_callback(params, &w.train, &mut rng, &cfg.early_stop, &mut on_epoch)
                    .context("training the lstm")?;
                let pred = predict(&trained, w.test.inputs(), 1024)?;
                history = Some(hist);
                model = Some(trained);
                pred
            }
            ModelKind::Rfr => {
                let mut rng = Rng::new(cfg.seed).stream(1);
                let forest = fit_forest(&w.train, &cfg.forest, &mut rng);
                forest.predict_all(&w.test)
            }
            ModelKind::SeasonalNaive => seasonal_naive_at(&w.scaled, w.test.target_indices(), cfg.season)?,
        };
        let rows = evaluate(kind.name(), &zone, w.test.targets(), &predictions, &prepared.scaler)
            .with_context(|| format!("scoring {}", kind.name()))?;
        runs.push(ModelRun {
            kind,
            predictions,
            rows,
        });
    }
    Ok(BenchmarkRun {
        zone,
        scaler: prepared.scaler,
        test_targets: w.test.targets().to_vec(),
        test_timestamps,
        runs,
        history,
        model,
    })
}
