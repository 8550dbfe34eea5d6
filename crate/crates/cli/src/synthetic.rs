//! Synthetic hourly load with daily, weekly and annual cycles plus
//! autocorrelated noise, shaped like a mid-sized utility zone.

use chrono::{Datelike, Duration, NaiveDate, Timelike};
use redf_core::numeric::Rng;
use redf_core::timeseries::TimeSeries;

#[derive(Debug, Clone, Copy)]
pub struct LoadShape {
    pub base: f64,
    pub daily: f64,
    pub weekly: f64,
    pub annual: f64,
    pub noise: f64,
    pub persistence: f64,
}

impl Default for LoadShape {
    fn default() -> Self {
        Self {
            base: 2000.0,
            daily: 320.0,
            weekly: 140.0,
            annual: 260.0,
            noise: 35.0,
            persistence: 0.9,
        }
    }
}

pub fn load_series(zone: &str, hours: usize, shape: &LoadShape, seed: u64) -> TimeSeries {
    use std::f64::consts::PI;
    let start = NaiveDate::from_ymd_opt(2016, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let mut rng = Rng::new(seed);
    let mut ar = 0.0;
    let values: Vec<f64> = (0..hours)
        .map(|k| {
            let t = start + Duration::hours(k as i64);
            let hour = t.hour() as f64;
            let day = 2.0 * PI * hour / 24.0;
            let daily = -(day).cos() * 0.7 - (2.0 * day).cos() * 0.3;
            let weekend = if t.weekday().number_from_monday() >= 6 { -1.0 } else { 0.0 };
            let annual = (4.0 * PI * t.ordinal() as f64 / 365.25).cos();
            // sum of uniforms: cheap, bounded, close to normal
            let shock = (0..4).map(|_| rng.uniform(-1.0, 1.0)).sum::<f64>() * 0.866;
            ar = shape.persistence * ar + shock;
            shape.base + shape.daily * daily + shape.weekly * weekend + shape.annual * annual + shape.noise * ar
        })
        .collect();
    TimeSeries::hourly(zone, start, &values)
}
