use haulcast_core::config::ToolkitConfig;
use haulcast_core::geo::detect_stays;
use haulcast_core::sequences::locate_stays;
use haulcast_core::synth::{
    fixture_grid, fixture_spec, sample_categorical, sample_fleet, synthesize_track,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn categorical_frequencies_match_probabilities() {
    let probs = [0.5, 0.2, 0.25, 0.05];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[sample_categorical(&probs, &mut rng)] += 1;
    }
    for (c, p) in counts.iter().zip(probs) {
        let f = *c as f64 / n as f64;
        assert!((f - p).abs() <= 0.02 * p, "{f} vs {p}");
    }
}

/// Realized states, destinations and durations against the summed
/// conditional probabilities and means of the generator along the sampled
/// paths.
#[test]
fn fleet_marginals_match_the_generator() {
    let spec = fixture_spec(50, 110, 21);
    let fleet = sample_fleet(&spec).unwrap();
    let m = &spec.ground_truth;
    let (h, l) = (m.n_states, m.n_destinations());
    let mut seen_h = vec![0.0; h];
    let mut want_h = vec![0.0; h];
    let mut seen_l = vec![0.0; l];
    let mut want_l = vec![0.0; l];
    let (mut seen_t, mut want_t) = (0.0, 0.0);
    let mut n = 0usize;
    for v in &fleet.vehicles {
        for (rec, states) in v.records.iter().zip(&v.hidden) {
            let z = rec.encoded_contexts();
            for (i, &u) in states.iter().enumerate() {
                let p = if i == 0 {
                    m.initial_probs(&z[0]).unwrap()
                } else {
                    m.transition_probs(states[i - 1], &z[i]).unwrap()
                };
                for k in 0..h {
                    want_h[k] += p[k];
                }
                seen_h[u] += 1.0;
                let q = m.destination_probs(u, &z[i]).unwrap();
                for c in 0..l {
                    want_l[c] += q[c];
                }
                seen_l[m.dest_index(&rec.day.stays[i].cell).unwrap()] += 1.0;
                want_t += m.duration_mean(u, &z[i]).unwrap();
                seen_t += rec.day.trip_durations[i];
                n += 1;
            }
        }
    }
    assert!(n >= 100_000, "{n} activities");
    for (s, w) in seen_h.iter().zip(&want_h).chain(seen_l.iter().zip(&want_l)) {
        assert!((s - w).abs() <= 0.02 * w, "{s} vs {w}");
    }
    assert!((seen_t - want_t).abs() <= 0.02 * want_t);
}

#[test]
fn sampling_is_deterministic_per_seed() {
    let a = sample_fleet(&fixture_spec(3, 10, 5)).unwrap();
    let b = sample_fleet(&fixture_spec(3, 10, 5)).unwrap();
    let c = sample_fleet(&fixture_spec(3, 10, 6)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    // a vehicle's days do not depend on fleet size
    let d = sample_fleet(&fixture_spec(5, 10, 5)).unwrap();
    assert_eq!(a.vehicles[..], d.vehicles[..3]);
}

#[test]
fn synthetic_tracks_reproduce_their_stays() {
    let fleet = sample_fleet(&fixture_spec(2, 6, 8)).unwrap();
    let grid = fixture_grid();
    let th = ToolkitConfig::default().thresholds();
    for v in &fleet.vehicles {
        let days: Vec<_> = v.records.iter().map(|r| r.day.clone()).collect();
        let track = synthesize_track(&days, &grid, 1);
        let raw = detect_stays(&track, &th);
        let (stays, dropped) = locate_stays(&track, &raw, &grid).unwrap();
        assert_eq!(dropped, 0);
        let want: Vec<_> = days.iter().flat_map(|d| d.stays.iter()).collect();
        assert_eq!(stays.len(), want.len());
        for (s, w) in stays.iter().zip(want) {
            assert_eq!(
                (s.cell, s.arrival, s.departure),
                (w.cell, w.arrival, w.departure)
            );
        }
    }
}
