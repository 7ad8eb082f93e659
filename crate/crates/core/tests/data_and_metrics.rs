use prgp_core::data::{Dataset, NoiseDistribution, Observation, SplitRole};
use prgp_core::metrics::{mape, rmse, trend_line};
use prgp_core::Error;
use proptest::prelude::*;

fn rows(n: usize) -> Vec<Observation> {
    (0..n)
        .map(|i| Observation {
            station_id: format!("S{}", i % 4),
            timestamp: 1_000_000 + 300 * (i / 4) as i64,
            milepost: (i % 4) as f64,
            flow: 150.0 + (i % 7) as f64 * 10.0,
            speed: 40.0 + (i % 5) as f64 * 4.0,
        })
        .collect()
}

#[test]
fn uniform_noise_has_uniform_moments() {
    // δ ~ U(-A, A) has mean 0 and variance A²/3. Flows are large enough that
    // the clamp at zero never binds.
    let amplitude = 100.0;
    let mut deltas = Vec::new();
    for seed in 0..40 {
        let d = Dataset::from_observations(rows(400)).unwrap().split(0.5, seed).unwrap();
        let mut high = d.clone();
        for s in &mut high.samples {
            s.flow += 1000.0;
        }
        let noisy = high.inject_noise(1.0, amplitude, NoiseDistribution::Uniform, seed).unwrap();
        deltas.extend(noisy.noise.unwrap().deltas);
    }
    let n = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / n;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let expected_var = amplitude * amplitude / 3.0;
    assert!(mean.abs() < 5.0 * (expected_var / n).sqrt(), "mean {mean}");
    // Var of the sample variance of U(-A, A) is (μ4 - σ⁴)/n with μ4 = A⁴/5.
    let se_var = ((amplitude.powi(4) / 5.0 - expected_var * expected_var) / n).sqrt();
    assert!((var - expected_var).abs() < 5.0 * se_var, "var {var}");
    assert!(deltas.iter().all(|d| d.abs() <= amplitude));
}

#[test]
fn noise_touches_the_requested_share_of_training_rows_only() {
    let clean = Dataset::from_observations(rows(200)).unwrap().split(0.5, 9).unwrap();
    let noisy = clean.clone().inject_noise(0.5, 100.0, NoiseDistribution::Uniform, 9).unwrap();
    let rec = noisy.noise.as_ref().unwrap();
    assert_eq!(rec.rows.len(), 50);
    for i in 0..clean.len() {
        let changed = clean.samples[i].flow != noisy.samples[i].flow;
        if changed {
            assert_eq!(noisy.role(i), Some(SplitRole::Train));
            assert!(rec.rows.contains(&i));
        }
        if noisy.role(i) == Some(SplitRole::Test) {
            assert_eq!(clean.samples[i], noisy.samples[i]);
        }
    }
    assert!(noisy.samples.iter().all(|s| s.flow >= 0.0));
}

#[test]
fn standardization_uses_training_rows() {
    let d = Dataset::from_observations(rows(40)).unwrap().split(0.5, 1).unwrap().standardize().unwrap();
    let st = d.standardization.unwrap();
    let train = d.train_indices();
    let n = train.len() as f64;
    let mean = train.iter().map(|&i| d.samples[i].speed).sum::<f64>() / n;
    let var = train.iter().map(|&i| (d.samples[i].speed - mean).powi(2)).sum::<f64>() / n;
    assert!((st.speed.mean - mean).abs() < 1e-12);
    assert!((st.speed.std - var.sqrt()).abs() < 1e-12);
}

#[test]
fn constant_column_is_a_zero_variance_error() {
    let mut r = rows(20);
    for o in &mut r {
        o.milepost = 3.0;
    }
    let d = Dataset::from_observations(r).unwrap().split(0.5, 0).unwrap();
    assert_eq!(d.standardize().unwrap_err(), Error::ZeroVariance("milepost"));
}

#[test]
fn metrics_match_hand_computed_values() {
    // Errors 10, -10, 30, -40: mean square 675; relative errors .1, .05, .1, .1.
    let t = [100.0, 200.0, 300.0, 400.0];
    let p = [110.0, 190.0, 330.0, 360.0];
    assert!((rmse(&t, &p).unwrap() - 25.98076211353316).abs() < 1e-9);
    assert!((mape(&t, &p).unwrap().value - 8.75).abs() < 1e-9);
    let line = trend_line(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap();
    assert!((line.slope - 2.25).abs() < 1e-12);
    assert!((line.intercept + 1.0 / 3.0).abs() < 1e-12);
}

proptest! {
    #[test]
    fn split_partitions_rows(n in 2usize..300, frac in 0.05f64..0.95, seed in any::<u64>()) {
        let d = Dataset::from_observations(rows(n)).unwrap().split(frac, seed).unwrap();
        let (train, test) = (d.train_indices(), d.test_indices());
        prop_assert_eq!(train.len() + test.len(), n);
        prop_assert!(!train.is_empty() && !test.is_empty());
        let expected = ((frac * n as f64).round() as usize).clamp(1, n - 1);
        prop_assert_eq!(train.len(), expected);
        let again = Dataset::from_observations(rows(n)).unwrap().split(frac, seed).unwrap();
        prop_assert_eq!(again.split, d.split);
    }

    #[test]
    fn metrics_are_permutation_invariant(
        pairs in prop::collection::vec((1.0f64..500.0, 0.0f64..500.0), 2..60),
        rot in 0usize..60,
    ) {
        let (t, p): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
        let mut shuffled = pairs.clone();
        let k = rot % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let (t2, p2): (Vec<f64>, Vec<f64>) = shuffled.into_iter().unzip();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-10 * (1.0 + a.abs());
        prop_assert!(close(rmse(&t, &p).unwrap(), rmse(&t2, &p2).unwrap()));
        prop_assert!(close(mape(&t, &p).unwrap().value, mape(&t2, &p2).unwrap().value));
    }

    #[test]
    fn rmse_is_nonnegative_and_zero_only_on_exact_match(v in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        prop_assert_eq!(rmse(&v, &v).unwrap(), 0.0);
        let shifted: Vec<f64> = v.iter().map(|x| x + 1.0).collect();
        prop_assert!((rmse(&v, &shifted).unwrap() - 1.0).abs() < 1e-9);
    }
}
