//! Command implementations behind the `redf` binary.

pub mod pipeline;
pub mod synthetic;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, ensure, Context, Result};
use clap::Args;
use redf_core::baselines::{ForestConfig, TreeConfig};
use redf_core::evaluation::{export_predictions, reference_rows, render_plot, write_report, PlotSeries, ReportRow};
use redf_core::forecast::Forecaster;
use redf_core::lstm::{HyperParams, ModelParams};
use redf_core::numeric::Rng;
use redf_core::timeseries::{
    load_csv, parse_timestamp, preprocess, write_csv, GapReport, OutlierReport, PrepConfig, Prepared, Scaler,
    ScalerKind,
};
use redf_core::training::{
    grid_search, train_with_callback, CvConfig, EarlyStop, EpochRecord, Grid, GridResult, TrainHistory,
};
use redf_serving::{artifact, client_request, run_broker, run_model_server, ModelRegistry, ServeMode, Target};
use serde::Serialize;

pub use pipeline::{BenchmarkConfig, BenchmarkRun, ModelKind};

pub const DEFAULT_SEED: u64 = redf_core::DEFAULT_SEED;

/// Dataset, preprocessing and model settings shared by the pipeline
/// commands. Defaults follow the reference configuration.
#[derive(Debug, Clone, Args)]
pub struct RunConfig {
    /// Hourly CSV with header `Datetime,<ZONE>_MW`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Zone name; inferred from the file name when omitted.
    #[arg(long)]
    pub zone: Option<String>,
    /// zscore | minmax (benchmark defaults to minmax, the rest to zscore).
    #[arg(long)]
    pub scaler: Option<ScalerKind>,
    #[arg(long, default_value_t = 24)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 1)]
    pub horizon: usize,
    #[arg(long, default_value_t = 200)]
    pub units: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1000)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub dropout: f64,
    #[arg(long, default_value_t = 0.001)]
    pub lr: f64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Keep only the most recent hours of the raw series.
    #[arg(long)]
    pub last_hours: Option<usize>,
    #[arg(long, default_value_t = 0.8)]
    pub split: f64,
    #[arg(long, default_value_t = 3)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub min_delta: f64,
    /// Suppress per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let h = HyperParams::default();
        Self {
            data: None,
            zone: None,
            scaler: None,
            timesteps: h.timesteps,
            horizon: h.horizon,
            units: h.units,
            epochs: h.epochs,
            batch: h.batch_size,
            dropout: h.dropout,
            lr: h.learning_rate,
            seed: DEFAULT_SEED,
            out: PathBuf::from("out"),
            last_hours: None,
            split: 0.8,
            patience: 3,
            min_delta: 1e-5,
            quiet: false,
        }
    }
}

impl RunConfig {
    pub fn hyper(&self) -> HyperParams {
        HyperParams {
            units: self.units,
            dense_units: 1,
            epochs: self.epochs,
            batch_size: self.batch,
            timesteps: self.timesteps,
            features: 1,
            dropout: self.dropout,
            learning_rate: self.lr,
            horizon: self.horizon,
        }
    }

    pub fn early_stop(&self) -> EarlyStop {
        EarlyStop {
            patience: self.patience,
            min_delta: self.min_delta,
            ..EarlyStop::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let data = self.data.as_ref().context("--data is required")?;
        ensure!(self.zone.is_some() || zone_from_path(data).is_some(), "cannot infer zone from {}; pass --zone", data.display());
        ensure!(self.split > 0.0 && self.split < 1.0, "--split must be in (0, 1)");
        ensure!(self.patience >= 1, "--patience must be at least 1");
        ensure!(self.min_delta >= 0.0, "--min-delta must be non-negative");
        if let Some(0) = self.last_hours {
            bail!("--last-hours must be positive");
        }
        self.hyper().validate()?;
        Ok(())
    }

    pub fn zone(&self) -> String {
        self.zone
            .clone()
            .or_else(|| self.data.as_deref().and_then(zone_from_path))
            .unwrap_or_else(|| "SERIES".into())
    }

    fn prep(&self, default_scaler: ScalerKind) -> PrepConfig {
        PrepConfig {
            split_ratio: self.split,
            scaler: self.scaler.unwrap_or(default_scaler),
            ..PrepConfig::default()
        }
    }

    fn out_path(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(self.out.join(name))
    }
}

/// `AEP_hourly.csv` → `AEP`.
pub fn zone_from_path(path: &Path) -> Option<String> {
    let stem = path.file_stem()?.to_str()?;
    let zone = stem.split('_').next()?;
    (!zone.is_empty()).then(|| zone.to_ascii_uppercase())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub zone: String,
    pub source: String,
    pub raw_rows: usize,
    pub duplicates_merged: usize,
    pub row_errors: usize,
    pub points: usize,
    pub train_len: usize,
    pub scaler: Scaler,
    pub gaps: GapReport,
    pub outliers: OutlierReport,
}

pub struct Loaded {
    pub prepared: Prepared,
    pub metadata: Metadata,
}

/// Load the CSV, keep the requested tail and run the cleaning pipeline.
pub fn load(cfg: &RunConfig, default_scaler: ScalerKind) -> Result<Loaded> {
    cfg.validate()?;
    let path = cfg.data.as_ref().expect("validated");
    let zone = cfg.zone();
    let report = load_csv(path, &zone)?;
    let raw = match cfg.last_hours {
        Some(n) => report.series.tail(n),
        None => report.series.clone(),
    };
    let prepared = preprocess(&raw, &cfg.prep(default_scaler)).with_context(|| format!("preprocessing {zone}"))?;
    let metadata = Metadata {
        zone,
        source: path.display().to_string(),
        raw_rows: report.raw_rows,
        duplicates_merged: report.duplicates_merged,
        row_errors: report.row_errors.len(),
        points: prepared.series.len(),
        train_len: prepared.train_len,
        scaler: prepared.scaler,
        gaps: prepared.gaps,
        outliers: prepared.outliers,
    };
    Ok(Loaded { prepared, metadata })
}

#[derive(Debug, Clone)]
pub struct PreprocessOutput {
    pub series: PathBuf,
    pub metadata_path: PathBuf,
    pub metadata: Metadata,
}

/// Cleaned series as `<out>/<ZONE>_clean.csv` plus a JSON sidecar.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<PreprocessOutput> {
    let loaded = load(cfg, ScalerKind::Zscore)?;
    let zone = &loaded.metadata.zone;
    let series = cfg.out_path(&format!("{zone}_clean.csv"))?;
    let mut out = create(&series)?;
    write_csv(&loaded.prepared.series, &mut out)?;
    out.flush()?;
    let metadata_path = cfg.out_path(&format!("{zone}_clean.json"))?;
    let mut meta = create(&metadata_path)?;
    serde_json::to_writer_pretty(&mut meta, &loaded.metadata)?;
    writeln!(meta)?;
    meta.flush()?;
    Ok(PreprocessOutput {
        series,
        metadata_path,
        metadata: loaded.metadata,
    })
}

fn progress(quiet: bool, total: usize) -> impl FnMut(&EpochRecord) {
    move |e: &EpochRecord| {
        if !quiet {
            eprintln!(
                "epoch {}/{total} train_mse={:.6e} val_mse={:.6e} ({:.1}s)",
                e.epoch, e.train_mse, e.val_mse, e.seconds
            );
        }
    }
}

fn write_history(path: &Path, history: &TrainHistory) -> Result<()> {
    let mut out = create(path)?;
    history.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub artifact: PathBuf,
    pub history_path: PathBuf,
    pub history: TrainHistory,
    pub params: ModelParams,
    pub scaler: Scaler,
}

/// Train on the training split and write `<ZONE>.redf` and
/// `<ZONE>_history.csv`.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutput> {
    let loaded = load(cfg, ScalerKind::Zscore)?;
    let w = pipeline::windows(&loaded.prepared, cfg.timesteps, cfg.horizon)?;
    let mut rng = Rng::new(cfg.seed);
    let params = ModelParams::init(cfg.hyper(), &mut rng);
    let (params, history) = train_with_callback(
        params,
        &w.train,
        &mut rng,
        &cfg.early_stop(),
        progress(cfg.quiet, cfg.epochs),
    )?;
    let zone = &loaded.metadata.zone;
    let artifact_path = cfg.out_path(&format!("{zone}.redf"))?;
    let scaler = loaded.prepared.scaler;
    artifact::save(&artifact_path, &params, &scaler)?;
    let history_path = cfg.out_path(&format!("{zone}_history.csv"))?;
    write_history(&history_path, &history)?;
    Ok(TrainOutput {
        artifact: artifact_path,
        history_path,
        history,
        params,
        scaler,
    })
}

#[derive(Debug, Clone, Default, Args)]
pub struct GridArgs {
    /// Comma-separated candidates; defaults to 50,100,200.
    #[arg(long, value_delimiter = ',')]
    pub grid_units: Vec<usize>,
    /// Defaults to the configured --timesteps.
    #[arg(long, value_delimiter = ',')]
    pub grid_timesteps: Vec<usize>,
    /// Defaults to 0.001,0.01.
    #[arg(long, value_delimiter = ',')]
    pub grid_lr: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub grid_dropout: Vec<f64>,
    #[arg(long, value_delimiter = ',')]
    pub grid_batch: Vec<usize>,
    #[arg(long, default_value_t = 3)]
    pub folds: usize,
}

impl GridArgs {
    pub fn grid(&self, base: &HyperParams) -> Grid {
        let default = Grid::default_for(base);
        let pick = |given: &Vec<usize>, fallback: Vec<usize>| if given.is_empty() { fallback } else { given.clone() };
        let pick_f = |given: &Vec<f64>, fallback: Vec<f64>| if given.is_empty() { fallback } else { given.clone() };
        Grid {
            units: pick(&self.grid_units, default.units),
            timesteps: pick(&self.grid_timesteps, vec![base.timesteps]),
            learning_rate: pick_f(&self.grid_lr, default.learning_rate),
            dropout: pick_f(&self.grid_dropout, default.dropout),
            batch_size: pick(&self.grid_batch, default.batch_size),
        }
    }
}

/// Cross-validated search over the training split; writes `grid.csv`.
pub fn cmd_grid_search(cfg: &RunConfig, args: &GridArgs) -> Result<GridResult> {
    let loaded = load(cfg, ScalerKind::Zscore)?;
    let scaled = loaded.prepared.scaled();
    let train = &scaled[..loaded.prepared.train_len];
    let base = cfg.hyper();
    let grid = args.grid(&base);
    let cv = CvConfig {
        folds: args.folds,
        seed: cfg.seed,
        early_stop: cfg.early_stop(),
    };
    let result = grid_search(&grid, &base, train, &cv)?;
    let path = cfg.out_path("grid.csv")?;
    let mut out = create(&path)?;
    writeln!(out, "index,units,timesteps,learning_rate,dropout,batch_size,score,skipped")?;
    for row in &result.table {
        let h = &row.hyper;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            row.index,
            h.units,
            h.timesteps,
            h.learning_rate,
            h.dropout,
            h.batch_size,
            row.score.map(|s| s.to_string()).unwrap_or_default(),
            row.skipped.as_deref().unwrap_or("").replace(',', ";")
        )?;
    }
    out.flush()?;
    Ok(result)
}

#[derive(Debug, Clone, Args)]
pub struct BenchmarkArgs {
    /// Comma-separated: redf, rfr, naive.
    #[arg(long, value_delimiter = ',', default_value = "redf,rfr,naive")]
    pub models: Vec<ModelKind>,
    #[arg(long, default_value_t = 100)]
    pub trees: usize,
    #[arg(long, default_value_t = 10)]
    pub tree_depth: usize,
    #[arg(long, default_value_t = 5)]
    pub min_leaf: usize,
    /// Season length for the naive baseline, in hours.
    #[arg(long, default_value_t = 24)]
    pub season: usize,
}

impl Default for BenchmarkArgs {
    fn default() -> Self {
        Self {
            models: ModelKind::ALL.to_vec(),
            trees: 100,
            tree_depth: 10,
            min_leaf: 5,
            season: 24,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkOutput {
    pub run: BenchmarkRun,
    pub rows: Vec<ReportRow>,
    pub report: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Score the models on the test split. Writes `report.csv` (computed rows
/// plus the published reference rows), per-model prediction CSVs and
/// SVG figures.
pub fn cmd_benchmark(cfg: &RunConfig, args: &BenchmarkArgs) -> Result<BenchmarkOutput> {
    ensure!(!args.models.is_empty(), "--models is empty");
    let loaded = load(cfg, ScalerKind::Minmax)?;
    let bench = BenchmarkConfig {
        hyper: cfg.hyper(),
        seed: cfg.seed,
        early_stop: cfg.early_stop(),
        forest: ForestConfig {
            n_trees: args.trees,
            tree: TreeConfig {
                max_depth: args.tree_depth,
                min_samples_leaf: args.min_leaf,
                max_features: None,
            },
            bootstrap: true,
        },
        season: args.season,
    };
    let run = pipeline::run_benchmark(&loaded.prepared, &bench, &args.models, progress(cfg.quiet, cfg.epochs))?;

    let mut rows: Vec<ReportRow> = run.runs.iter().flat_map(|r| r.rows.clone()).collect();
    rows.extend(reference_rows(&["REDf", "SVR", "Prophet", "RFR"]));
    let report = cfg.out_path("report.csv")?;
    let mut out = create(&report)?;
    write_report(&rows, &mut out)?;
    out.flush()?;

    let zone = &run.zone;
    let actual_mw = run.scaler.invert(&run.test_targets);
    let mut files = Vec::new();
    for r in &run.runs {
        let name = r.kind.name();
        let predicted_mw = run.scaler.invert(&r.predictions);
        let csv = cfg.out_path(&format!("predictions_{name}_{zone}.csv"))?;
        let mut out = create(&csv)?;
        export_predictions(&run.test_timestamps, &actual_mw, &predicted_mw, &mut out)?;
        out.flush()?;
        let svg = cfg.out_path(&format!("{name}_{zone}.svg"))?;
        let plot = render_plot(
            &format!("{name} {zone}: actual vs predicted"),
            "test hour",
            "demand (MW)",
            &[
                PlotSeries { label: "actual", values: &actual_mw },
                PlotSeries { label: "predicted", values: &predicted_mw },
            ],
        );
        fs::write(&svg, plot).with_context(|| format!("writing {}", svg.display()))?;
        files.extend([csv, svg]);
    }
    if let Some(history) = &run.history {
        let path = cfg.out_path(&format!("{zone}_history.csv"))?;
        write_history(&path, history)?;
        let (train, val) = (history.train_mse(), history.val_mse());
        let svg = cfg.out_path(&format!("loss_{zone}.svg"))?;
        let plot = render_plot(
            &format!("REDf {zone}: loss curves"),
            "epoch",
            "MSE (scaled)",
            &[
                PlotSeries { label: "train", values: &train },
                PlotSeries { label: "validation", values: &val },
            ],
        );
        fs::write(&svg, plot).with_context(|| format!("writing {}", svg.display()))?;
        files.extend([path, svg]);
    }
    Ok(BenchmarkOutput {
        run,
        rows,
        report,
        files,
    })
}

/// Render a `timestamp,actual_mw,predicted_mw` file as SVG next to `out`.
pub fn cmd_plot(predictions: &Path, out: &Path, title: Option<&str>) -> Result<PathBuf> {
    let mut reader = csv::ReaderBuilder::new()
        .from_path(predictions)
        .with_context(|| format!("reading {}", predictions.display()))?;
    let headers = reader.headers()?.clone();
    ensure!(
        headers.iter().collect::<Vec<_>>() == ["timestamp", "actual_mw", "predicted_mw"],
        "{}: expected header timestamp,actual_mw,predicted_mw",
        predictions.display()
    );
    let (mut actual, mut predicted) = (Vec::new(), Vec::new());
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec[i]
                .parse()
                .with_context(|| format!("{} line {}: bad number {:?}", predictions.display(), line + 2, &rec[i]))
        };
        ensure!(
            parse_timestamp(&rec[0]).is_some(),
            "{} line {}: bad timestamp",
            predictions.display(),
            line + 2
        );
        actual.push(parse(1)?);
        predicted.push(parse(2)?);
    }
    let stem = predictions.file_stem().and_then(|s| s.to_str()).unwrap_or("predictions");
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(format!("{stem}.svg"));
    let svg = render_plot(
        title.unwrap_or(stem),
        "hour",
        "demand (MW)",
        &[
            PlotSeries { label: "actual", values: &actual },
            PlotSeries { label: "predicted", values: &predicted },
        ],
    );
    fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Block until `stop` is raised, then shut the service down.
fn wait(handle: redf_serving::ServerHandle, stop: &AtomicBool) {
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(50));
    }
    handle.shutdown();
}

pub fn cmd_broker(listen: &str, stop: Arc<AtomicBool>, ready: impl FnOnce(std::net::SocketAddr)) -> Result<()> {
    let (handle, _) = run_broker(listen).with_context(|| format!("binding {listen}"))?;
    ready(handle.addr().expect("listening"));
    wait(handle, &stop);
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    /// Model artifacts; each is served under its file stem.
    #[arg(long = "artifact", required = true)]
    pub artifacts: Vec<PathBuf>,
    /// Accept client connections on this address.
    #[arg(long, conflicts_with = "broker")]
    pub listen: Option<String>,
    /// Consume requests from a broker at this address.
    #[arg(long)]
    pub broker: Option<String>,
    #[arg(long, default_value = redf_serving::REQUEST_TOPIC)]
    pub topic: String,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
}

pub fn cmd_serve(args: &ServeArgs, stop: Arc<AtomicBool>, ready: impl FnOnce(Option<std::net::SocketAddr>)) -> Result<()> {
    let registry = Arc::new(ModelRegistry::load(&args.artifacts)?);
    let mode = match (&args.listen, &args.broker) {
        (_, Some(addr)) => ServeMode::Broker {
            address: addr.clone(),
            topic: args.topic.clone(),
            workers: args.workers,
        },
        (Some(addr), None) => ServeMode::Listen(addr.clone()),
        (None, None) => ServeMode::Listen("127.0.0.1:7878".into()),
    };
    let handle = run_model_server(registry, mode.clone()).with_context(|| format!("starting server ({mode:?})"))?;
    ready(handle.addr());
    wait(handle, &stop);
    Ok(())
}

#[derive(Debug, Clone, Args)]
pub struct PredictArgs {
    /// Artifact to run in-process with --local, or whose stem names the model.
    #[arg(long)]
    pub artifact: Option<PathBuf>,
    /// Model name on the server; defaults to the artifact stem.
    #[arg(long)]
    pub model: Option<String>,
    /// Run inference in this process.
    #[arg(long, conflicts_with_all = ["server", "broker"])]
    pub local: bool,
    /// Model server address.
    #[arg(long, conflicts_with = "broker")]
    pub server: Option<String>,
    /// Broker address.
    #[arg(long)]
    pub broker: Option<String>,
    /// File with MW history: one value per line, or a CSV whose last column holds MW.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Inline comma-separated MW history.
    #[arg(long, value_delimiter = ',', conflicts_with = "history")]
    pub values: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub horizon: usize,
    #[arg(long, default_value_t = 10_000)]
    pub timeout_ms: u64,
}

/// Read MW values: one per line, or CSV rows whose last field is the value.
/// Non-numeric lines such as headers are skipped.
pub fn read_history(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let field = line.rsplit(',').next().unwrap_or("").trim();
        if field.is_empty() {
            continue;
        }
        match field.parse::<f64>() {
            Ok(v) => out.push(v),
            Err(_) if i == 0 => {}
            Err(_) => bail!("{} line {}: bad value {field:?}", path.display(), i + 1),
        }
    }
    Ok(out)
}

pub fn cmd_predict(args: &PredictArgs) -> Result<Vec<f64>> {
    let history = match &args.history {
        Some(p) => read_history(p)?,
        None => args.values.clone(),
    };
    ensure!(!history.is_empty(), "no history given (use --history or --values)");
    let model = args
        .model
        .clone()
        .or_else(|| {
            args.artifact
                .as_ref()
                .and_then(|p| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
        })
        .context("--model or --artifact is required")?;
    let timeout = Duration::from_millis(args.timeout_ms);
    let target = match (&args.server, &args.broker) {
        (Some(addr), _) => Target::Direct(addr.clone()),
        (None, Some(addr)) => Target::broker(addr.clone()),
        (None, None) => {
            let path = args.artifact.as_ref().context("--local needs --artifact")?;
            let (params, scaler) = artifact::load(path)?;
            let forecast = Forecaster::new(params, scaler)
                .forecast(&history, args.horizon)
                .map_err(|e| anyhow::anyhow!("{}: {e}", e.code()))?;
            return Ok(forecast);
        }
    };
    let resp = client_request(&target, &model, &history, args.horizon, timeout)
        .map_err(|e| anyhow::anyhow!("{}: {e}", e.code()))?;
    Ok(resp.forecast)
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(long, default_value = "SYNTH")]
    pub zone: String,
    #[arg(long, default_value_t = 20_000)]
    pub hours: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

/// Write a synthetic `<ZONE>_hourly.csv`.
pub fn cmd_synth(args: &SynthArgs) -> Result<PathBuf> {
    let series = synthetic::load_series(&args.zone, args.hours, &synthetic::LoadShape::default(), args.seed);
    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let path = args.out.join(format!("{}_hourly.csv", args.zone));
    let mut out = create(&path)?;
    write_csv(&series, &mut out)?;
    out.flush()?;
    Ok(path)
}

/// Collapse an error chain onto one line for stderr.
pub fn one_line(err: &anyhow::Error) -> String {
    format!("{err:#}").replace(['\n', '\r'], " ")
}
