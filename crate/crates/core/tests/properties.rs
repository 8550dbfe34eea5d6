use proptest::prelude::*;

use redf_core::evaluation::{mae, r2, rmse, MetricsInput, Unit};
use redf_core::lstm::{forward, layer_forward, HyperParams, LstmLayerWeights, ModelParams};
use redf_core::numeric::{Matrix, Rng};
use redf_core::timeseries::{handle_missing, make_windows, split, Scaler, ScalerKind, TimeSeries, Point};

fn finite() -> impl Strategy<Value = f64> {
    -1e6..1e6f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn split_preserves_order_and_count(v in prop::collection::vec(any::<i32>(), 2..500), ratio in 0.05..0.95f64) {
        if let Ok((a, b)) = split(&v, ratio) {
            prop_assert_eq!(a.len() + b.len(), v.len());
            prop_assert_eq!([a, b].concat(), v);
        }
    }

    #[test]
    fn targets_come_after_their_window(n in 2usize..200, t in 1usize..20, h in 1usize..5) {
        let values: Vec<f64> = (0..n).map(|i| i as f64).collect();
        match make_windows(&values, t, h) {
            Ok(w) => {
                prop_assert_eq!(w.len(), n - t - h + 1);
                for i in 0..w.len() {
                    let target = w.target_indices()[i];
                    prop_assert_eq!(w.target(i), target as f64);
                    prop_assert!(w.input(i).iter().all(|&x| (x as usize) < target));
                }
            }
            Err(_) => prop_assert!(n < t + h),
        }
    }

    #[test]
    fn scaler_round_trip(v in prop::collection::vec(finite(), 2..100), probe in finite()) {
        for kind in [ScalerKind::Zscore, ScalerKind::Minmax] {
            let Ok(s) = Scaler::fit(&v, kind) else { continue };
            let back = s.invert_value(s.scale_value(probe));
            prop_assert!((back - probe).abs() <= 1e-9 * probe.abs().max(1.0), "{kind}: {probe} -> {back}");
        }
    }

    #[test]
    fn zscore_standardises_its_fit_set(v in prop::collection::vec(-1e4..1e4f64, 3..200)) {
        let Ok(s) = Scaler::fit(&v, ScalerKind::Zscore) else { return Ok(()) };
        let (_, std) = s.raw_params();
        prop_assume!(std > 1e-3);
        let z = s.apply(&v);
        let n = z.len() as f64;
        let mean = z.iter().sum::<f64>() / n;
        let sd = (z.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        prop_assert!(mean.abs() <= 1e-9);
        prop_assert!((sd - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn filled_series_is_hourly(values in prop::collection::vec(prop::option::weighted(0.8, 100.0..200.0f64), 30..200)) {
        prop_assume!(values.iter().any(Option::is_some));
        let start = redf_core::timeseries::parse_timestamp("2015-01-01 00:00:00").unwrap();
        let points = values
            .iter()
            .enumerate()
            .map(|(i, v)| Point { timestamp: start + chrono::Duration::hours(i as i64), value: *v })
            .collect();
        let (filled, _) = handle_missing(&TimeSeries::new("X", points), 6).unwrap();
        prop_assert!(filled.is_complete());
        let ts = filled.timestamps();
        prop_assert!(ts.windows(2).all(|w| w[1] - w[0] == chrono::Duration::hours(1)));
    }

    #[test]
    fn cell_state_bounds(seed in any::<u64>(), scale in 0.1..10.0f64, steps in 1usize..12) {
        let mut rng = Rng::new(seed);
        let mut w = LstmLayerWeights::init(&mut rng, 3, 2, 1.0);
        for g in [&mut w.input, &mut w.forget, &mut w.cell, &mut w.output] {
            g.w_x = g.w_x.scale(scale);
            g.w_h = g.w_h.scale(scale);
        }
        let seq = Matrix::from_vec(steps, 2, (0..steps * 2).map(|_| rng.uniform(-5.0, 5.0)).collect()).unwrap();
        let out = layer_forward(&seq, &w, true).unwrap();
        for t in 0..steps {
            prop_assert!(out.hidden.row(t).iter().all(|h| h.abs() < 1.0));
        }
        prop_assert!(out.final_c.iter().all(|c| c.abs() <= steps as f64));
    }

    #[test]
    fn dropout_zero_training_equals_inference(seed in any::<u64>()) {
        let hyper = HyperParams { units: 3, timesteps: 5, dropout: 0.0, ..HyperParams::default() };
        let mut rng = Rng::new(seed);
        let params = ModelParams::init(hyper, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.uniform(-2.0, 2.0)).collect();
        let (a, _) = forward(&params, &[&x], true, &mut Rng::new(1)).unwrap();
        let (b, _) = forward(&params, &[&x], false, &mut Rng::new(2)).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn metric_scaling(y in prop::collection::vec(-100.0..100.0f64, 2..50), seed in any::<u64>(), a in 0.01..100.0f64, b in -1e3..1e3f64) {
        let mut rng = Rng::new(seed);
        let p: Vec<f64> = y.iter().map(|v| v + rng.uniform(-3.0, 3.0)).collect();
        let base = MetricsInput::new(&y, &p, Unit::Scaled).unwrap();
        let ys: Vec<f64> = y.iter().map(|v| a * v + b).collect();
        let ps: Vec<f64> = p.iter().map(|v| a * v + b).collect();
        let moved = MetricsInput::new(&ys, &ps, Unit::Mw).unwrap();
        prop_assert!(rmse(&base) >= mae(&base));
        prop_assert!((mae(&moved) - a * mae(&base)).abs() <= 1e-9 * (1.0 + a * mae(&base)));
        prop_assert!((rmse(&moved) - a * rmse(&base)).abs() <= 1e-9 * (1.0 + a * rmse(&base)));
        if let (Ok(r0), Ok(r1)) = (r2(&base), r2(&moved)) {
            prop_assert!((r0 - r1).abs() <= 1e-9);
        }
    }
}
