//! Accuracy metrics, benchmark report rows and figure export.

use std::fmt::Write as _;
use std::io::{self, Write};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::timeseries::{format_timestamp, Scaler};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {actual} actual vs {predicted} predicted")]
    Shape { actual: usize, predicted: usize },
    #[error("need at least 2 observations, got {0}")]
    TooFew(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("actual values are constant; R² undefined")]
    DegenerateVariance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Unit {
    Scaled,
    Mw,
}

impl Unit {
    pub fn as_str(&self) -> &'static str {
        match self {
            Unit::Scaled => "SCALED",
            Unit::Mw => "MW",
        }
    }
}

/// Validated actual/predicted pair.
#[derive(Debug, Clone, Copy)]
pub struct MetricsInput<'a> {
    actual: &'a [f64],
    predicted: &'a [f64],
    unit: Unit,
}

impl<'a> MetricsInput<'a> {
    pub fn new(actual: &'a [f64], predicted: &'a [f64], unit: Unit) -> Result<Self, MetricError> {
        if actual.len() != predicted.len() {
            return Err(MetricError::Shape {
                actual: actual.len(),
                predicted: predicted.len(),
            });
        }
        if actual.len() < 2 {
            return Err(MetricError::TooFew(actual.len()));
        }
        if let Some(i) = actual
            .iter()
            .zip(predicted)
            .position(|(a, p)| !a.is_finite() || !p.is_finite())
        {
            return Err(MetricError::NonFinite(i));
        }
        Ok(Self {
            actual,
            predicted,
            unit,
        })
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    fn n(&self) -> f64 {
        self.actual.len() as f64
    }

    fn residuals(&self) -> impl Iterator<Item = f64> + '_ {
        self.actual.iter().zip(self.predicted).map(|(y, p)| y - p)
    }
}

pub fn mae(input: &MetricsInput) -> f64 {
    input.residuals().map(f64::abs).sum::<f64>() / input.n()
}

pub fn rmse(input: &MetricsInput) -> f64 {
    (input.residuals().map(|r| r * r).sum::<f64>() / input.n()).sqrt()
}

/// Coefficient of determination; negative when worse than the mean.
pub fn r2(input: &MetricsInput) -> Result<f64, MetricError> {
    let mean = input.actual.iter().sum::<f64>() / input.n();
    let ss_tot: f64 = input.actual.iter().map(|y| (y - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::DegenerateVariance);
    }
    let ss_res: f64 = input.residuals().map(|r| r * r).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub r2: f64,
}

impl Metrics {
    pub fn compute(actual: &[f64], predicted: &[f64], unit: Unit) -> Result<Metrics, MetricError> {
        let input = MetricsInput::new(actual, predicted, unit)?;
        Ok(Metrics {
            mae: mae(&input),
            rmse: rmse(&input),
            r2: r2(&input)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Provenance {
    Computed,
    PaperReported,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Computed => "COMPUTED",
            Provenance::PaperReported => "PAPER_REPORTED",
        }
    }
}

/// One row of the benchmark report, flattened per unit system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub dataset: String,
    pub unit: Unit,
    pub metrics: Metrics,
    pub provenance: Provenance,
}

/// Score scaled-unit forecasts in both scaled units and MW.
pub fn evaluate(
    model: &str,
    dataset: &str,
    actual_scaled: &[f64],
    forecast_scaled: &[f64],
    scaler: &Scaler,
) -> Result<[ReportRow; 2], MetricError> {
    let scaled = Metrics::compute(actual_scaled, forecast_scaled, Unit::Scaled)?;
    let actual_mw = scaler.invert(actual_scaled);
    let forecast_mw = scaler.invert(forecast_scaled);
    let mw = Metrics::compute(&actual_mw, &forecast_mw, Unit::Mw)?;
    let row = |unit, metrics| ReportRow {
        model: model.to_string(),
        dataset: dataset.to_string(),
        unit,
        metrics,
        provenance: Provenance::Computed,
    };
    Ok([row(Unit::Scaled, scaled), row(Unit::Mw, mw)])
}

/// Published reference results, in the order (model, dataset, R², MAE,
/// RMSE). The lstm rows are in scaled units; the others are read as MW.
pub const REFERENCE_RESULTS: [(&str, &str, f64, f64, f64); 16] = [
    ("REDf", "AEP", 0.983, 0.015, 0.024),
    ("REDf", "COMED", 0.979, 0.014, 0.022),
    ("REDf", "DAYTON", 0.980, 0.015, 0.023),
    ("REDf", "PJME", 0.985, 0.014, 0.020),
    ("SVR", "AEP", 0.982, 159.269, 346.603),
    ("SVR", "COMED", 0.958, 149.045, 471.277),
    ("SVR", "DAYTON", 0.976, 11.064, 24.873),
    ("SVR", "PJME", 0.726, 1878.685, 3382.786),
    ("Prophet", "AEP", 0.052, 2018.417, 2522.092),
    ("Prophet", "COMED", -0.021, 1782.898, 2321.032),
    ("Prophet", "DAYTON", -9.939, 0.602, 0.632),
    ("Prophet", "PJME", -3.298, 0.359, 0.407),
    ("RFR", "AEP", 0.133, 1926.917, 2412.619),
    ("RFR", "COMED", 0.170, 1613.671, 2099.070),
    ("RFR", "DAYTON", 0.065, 300.336, 380.377),
    ("RFR", "PJME", 0.047, 4890.830, 6309.890),
];

/// Reference rows for the given models (e.g. `["SVR", "Prophet"]`).
pub fn reference_rows(models: &[&str]) -> Vec<ReportRow> {
    REFERENCE_RESULTS
        .iter()
        .filter(|(m, ..)| models.contains(m))
        .map(|&(model, dataset, r2, mae, rmse)| ReportRow {
            model: model.to_string(),
            dataset: dataset.to_string(),
            unit: if model == "REDf" { Unit::Scaled } else { Unit::Mw },
            metrics: Metrics { mae, rmse, r2 },
            provenance: Provenance::PaperReported,
        })
        .collect()
}

/// `model,dataset,unit,mae,rmse,r2,provenance`
pub fn write_report<W: Write>(rows: &[ReportRow], mut out: W) -> io::Result<()> {
    writeln!(out, "model,dataset,unit,mae,rmse,r2,provenance")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.model,
            r.dataset,
            r.unit.as_str(),
            r.metrics.mae,
            r.metrics.rmse,
            r.metrics.r2,
            r.provenance.as_str()
        )?;
    }
    Ok(())
}

/// `timestamp,actual_mw,predicted_mw`
pub fn export_predictions<W: Write>(
    timestamps: &[NaiveDateTime],
    actual: &[f64],
    predicted: &[f64],
    mut out: W,
) -> io::Result<()> {
    if timestamps.len() != actual.len() || actual.len() != predicted.len() {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "series are not aligned"));
    }
    writeln!(out, "timestamp,actual_mw,predicted_mw")?;
    for ((t, a), p) in timestamps.iter().zip(actual).zip(predicted) {
        writeln!(out, "{},{},{}", format_timestamp(*t), a, p)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct PlotSeries<'a> {
    pub label: &'a str,
    pub values: &'a [f64],
}

const WIDTH: f64 = 960.0;
const HEIGHT: f64 = 480.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 30.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 60.0;
const PALETTE: [&str; 4] = ["#2ca02c", "#d62728", "#1f77b4", "#ff7f0e"];
const Y_TICKS: usize = 5;
const X_TICKS: usize = 6;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn fmt_num(v: f64) -> String {
    if v.abs() >= 1000.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.2}")
    } else {
        format!("{v:.4}")
    }
}

/// Line chart on a fixed canvas. Output bytes depend only on the inputs.
pub fn render_plot(title: &str, x_label: &str, y_label: &str, series: &[PlotSeries]) -> String {
    let plot_w = WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let len = series.iter().map(|s| s.values.len()).max().unwrap_or(0);
    let finite = series.iter().flat_map(|s| s.values.iter().copied()).filter(|v| v.is_finite());
    let (mut lo, mut hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    if hi <= lo {
        lo -= 0.5;
        hi += 0.5;
    }
    let x_of = |i: usize| MARGIN_LEFT + if len > 1 { plot_w * i as f64 / (len - 1) as f64 } else { 0.0 };
    let y_of = |v: f64| MARGIN_TOP + plot_h * (1.0 - (v - lo) / (hi - lo));

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    // axes
    let x0 = MARGIN_LEFT;
    let y0 = MARGIN_TOP + plot_h;
    let _ = writeln!(
        svg,
        r#"<g class="axes" stroke="black" stroke-width="1"><line x1="{x0}" y1="{y0}" x2="{}" y2="{y0}"/><line x1="{x0}" y1="{MARGIN_TOP}" x2="{x0}" y2="{y0}"/></g>"#,
        x0 + plot_w
    );
    for k in 0..=Y_TICKS {
        let v = lo + (hi - lo) * k as f64 / Y_TICKS as f64;
        let y = y_of(v);
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{y:.2}" x2="{x0}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}" text-anchor="end">{}</text>"#,
            x0 - 5.0,
            x0 - 8.0,
            y + 4.0,
            fmt_num(v)
        );
    }
    let x_ticks = if len > 1 { X_TICKS.min(len - 1) } else { 0 };
    for k in 0..=x_ticks {
        let i = if x_ticks == 0 { 0 } else { k * (len - 1) / x_ticks };
        let x = x_of(i);
        let _ = writeln!(
            svg,
            r#"<line x1="{x:.2}" y1="{y0}" x2="{x:.2}" y2="{}" stroke="black"/><text x="{x:.2}" y="{}" text-anchor="middle">{i}</text>"#,
            y0 + 5.0,
            y0 + 20.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        x0 + plot_w / 2.0,
        HEIGHT - 15.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="18" y="{}" text-anchor="middle" transform="rotate(-90 18 {})">{}</text>"#,
        MARGIN_TOP + plot_h / 2.0,
        MARGIN_TOP + plot_h / 2.0,
        escape(y_label)
    );
    for (k, s) in series.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        if !s.values.is_empty() {
            let points: Vec<String> = s
                .values
                .iter()
                .enumerate()
                .filter(|(_, v)| v.is_finite())
                .map(|(i, &v)| format!("{:.2},{:.2}", x_of(i), y_of(v)))
                .collect();
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"><title>{}</title></polyline>"#,
                points.join(" "),
                escape(s.label)
            );
        }
        let ly = MARGIN_TOP + 8.0 + 18.0 * k as f64;
        let lx = x0 + plot_w - 150.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(s.label)
        );
    }
    svg.push_str("</svg>\n");
    svg
}
