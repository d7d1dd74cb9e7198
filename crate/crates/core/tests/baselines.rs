mod common;

use chrono::Duration;
use haulcast_core::baselines::{lr_fit, lr_predict, mc_fit, mc_predict};
use haulcast_core::geo::CellId;
use haulcast_core::regression::ols_inference;
use haulcast_core::sequences::{ActivityDay, StayActivity};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_days(seed: u64, n_days: usize, n_cells: u32) -> Vec<ActivityDay> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_days)
        .map(|k| {
            let start = common::t0() + Duration::days(k as i64);
            let mut t = start;
            let stays = (0..rng.random_range(1..8))
                .map(|_| {
                    t += Duration::minutes(rng.random_range(5..90));
                    let arrival = t;
                    t += Duration::minutes(rng.random_range(10..60));
                    StayActivity {
                        cell: CellId::new(rng.random_range(0..n_cells), 0),
                        arrival,
                        departure: t,
                        centroid: (30.6, 104.0),
                    }
                })
                .collect();
            ActivityDay::from_stays("v", start, stays)
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn chain_rows_are_distributions(seed in any::<u64>(), n_days in 1usize..20, cells in 1u32..6, alpha in 0.01f64..3.0) {
        let days = random_days(seed, n_days, cells);
        let mc = mc_fit(&days, alpha).unwrap();
        let first = mc.first_probs();
        prop_assert!((first.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(first.iter().all(|p| *p > 0.0));
        for &a in &mc.destinations {
            let row = mc.transition_probs(a);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|p| *p > 0.0));
        }
        // counts add up to the observed activities
        let total: u64 = mc.first_counts.iter().sum::<u64>() + mc.trans_counts.iter().flatten().sum::<u64>();
        prop_assert_eq!(total as usize, days.iter().map(ActivityDay::len).sum::<usize>());
    }

    #[test]
    fn chain_prediction_is_the_row_mode(seed in any::<u64>(), cells in 2u32..6) {
        let days = random_days(seed, 10, cells);
        let mc = mc_fit(&days, 1.0).unwrap();
        for prev in std::iter::once(None).chain(mc.destinations.iter().copied().map(Some)) {
            let f = mc_predict(&mc, prev);
            let best = f.probs.iter().cloned().fold(f64::MIN, f64::max);
            let k = mc.destinations.iter().position(|c| *c == f.predicted_cell).unwrap();
            prop_assert_eq!(f.probs[k], best);
        }
    }
}

#[test]
fn duplicated_rows_keep_coefficients_and_shrink_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, p) = (40usize, 4usize);
    let x: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            std::iter::once(1.0)
                .chain((1..p).map(|_| rng.random::<f64>() * 4.0 - 2.0))
                .collect()
        })
        .collect();
    let y: Vec<f64> = x
        .iter()
        .map(|r| 0.5 + r[1] - 2.0 * r[2] + rng.random::<f64>() - 0.5)
        .collect();
    let once = ols_inference(&x, &y).unwrap();
    let x2: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
    let y2: Vec<f64> = y.iter().chain(&y).copied().collect();
    let twice = ols_inference(&x2, &y2).unwrap();
    let ratio = (((n - p) as f64) / ((2 * n - p) as f64)).sqrt();
    for j in 0..p {
        assert!((once.coefs[j] - twice.coefs[j]).abs() < 1e-10);
        assert!(
            (twice.std_errors[j] - once.std_errors[j] * ratio).abs()
                < 1e-10 * once.std_errors[j].max(1.0)
        );
    }
    assert_eq!(twice.df, 2 * n - p);
}

#[test]
fn linear_baseline_fits_exact_data() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let rows: Vec<(Vec<f64>, f64)> = (0..30)
        .map(|_| {
            let z: Vec<f64> = (0..3).map(|_| rng.random::<f64>()).collect();
            let t = 1.5 + 2.0 * z[0] - z[1] + 0.25 * z[2];
            (z, t)
        })
        .collect();
    let m = lr_fit(&rows).unwrap();
    assert!((m.beta0 - 1.5).abs() < 1e-8);
    for (b, want) in m.beta.iter().zip([2.0, -1.0, 0.25]) {
        assert!((b - want).abs() < 1e-8);
    }
    for (z, t) in &rows {
        assert!((lr_predict(&m, z).unwrap() - t).abs() < 1e-8);
    }
    assert!(lr_predict(&m, &[1.0]).is_err());
}
