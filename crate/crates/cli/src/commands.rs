//! One function per subcommand. Vehicles are processed independently on the
//! worker pool and written back in vehicle-id order.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use chrono::{DateTime, FixedOffset, NaiveDate};
use haulcast_core::config::ToolkitConfig;
use haulcast_core::evaluation::{
    error_histogram, factor_regression, factor_row, mean_defined, observed_day, VehicleScore,
};
use haulcast_core::fleet::fleet_stats;
use haulcast_core::geo::{detect_stays, ingest_trajectories, CellId, TrajectoryPoint};
use haulcast_core::persist::{write_atomic, VehicleModel};
use haulcast_core::pipeline::{
    evaluate_vehicle, fit_vehicle, select_states as select_vehicle_states, test_records,
    training_records, VehicleEvaluation,
};
use haulcast_core::predict::predict_next_lenient;
use haulcast_core::sequences::{
    build_sequences as build_vehicle_sequences, locate_stays, partition_days, SequenceRecord,
    StayRecord, WeatherTable,
};
use haulcast_core::synth::{
    fixture_grid, fixture_spec, hidden_truth, sample_fleet, synthesize_track, GeneratorSpec,
};
use haulcast_core::{seeds, Error};
use rayon::prelude::*;
use serde::Serialize;

use crate::io::{self, read_grid_beside, write_csv, write_grid_beside, write_json, write_jsonl};
use crate::GlobalArgs;

const TAG_TRACK: u64 = 3;

fn input(g: &GlobalArgs) -> Result<&Path> {
    g.input
        .as_deref()
        .ok_or_else(|| anyhow!("--input is required"))
}

fn output(g: &GlobalArgs) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| anyhow!("--out is required"))
}

/// Runs `f` for every vehicle on the pool; results keep vehicle order.
fn per_vehicle<T, R, F>(items: BTreeMap<String, T>, f: F) -> Vec<(String, Result<R>)>
where
    T: Send,
    R: Send,
    F: Fn(&str, T) -> Result<R> + Sync,
{
    let items: Vec<(String, T)> = items.into_iter().collect();
    items
        .into_par_iter()
        .map(|(vid, item)| {
            let r = f(&vid, item).with_context(|| format!("vehicle {vid}"));
            (vid, r)
        })
        .collect()
}

/// Splits results into successes and a combined error. Vehicles failing a
/// precondition are skipped with a warning when `skip_preconditions` is set.
fn collect_vehicles<R>(
    results: Vec<(String, Result<R>)>,
    skip_preconditions: bool,
) -> Result<BTreeMap<String, R>> {
    let mut ok = BTreeMap::new();
    let mut failures = Vec::new();
    for (vid, r) in results {
        match r {
            Ok(v) => {
                ok.insert(vid, v);
            }
            Err(e)
                if skip_preconditions
                    && matches!(
                        e.root_cause().downcast_ref::<Error>(),
                        Some(Error::Precondition(_))
                    ) =>
            {
                log::warn!("{e:#}; skipped");
            }
            Err(e) => failures.push(format!("{e:#}")),
        }
    }
    if !failures.is_empty() {
        bail!(
            "{} vehicle(s) failed:\n  {}",
            failures.len(),
            failures.join("\n  ")
        );
    }
    Ok(ok)
}

fn read_sequences_nonempty(g: &GlobalArgs) -> Result<BTreeMap<String, Vec<SequenceRecord>>> {
    let path = input(g)?;
    let by = io::read_sequences(path, &g.vehicles)?;
    if by.is_empty() {
        bail!("no vehicles in {}", path.display());
    }
    Ok(by)
}

#[derive(Serialize)]
struct TrajectoryRow<'a> {
    vehicle_id: &'a str,
    timestamp: String,
    lat: f64,
    lon: f64,
}

#[derive(Serialize)]
struct Truth<'a> {
    spec: &'a GeneratorSpec,
    hidden_states: BTreeMap<String, Vec<Vec<usize>>>,
}

pub fn simulate(g: &GlobalArgs, cfg: &ToolkitConfig, n_vehicles: usize, days: usize) -> Result<()> {
    let out = output(g)?;
    let mut spec = fixture_spec(n_vehicles, days, cfg.seed);
    spec.utc_offset_minutes = cfg.utc_offset_minutes;
    let fleet = sample_fleet(&spec)?;
    let grid = fixture_grid();
    let vehicles: BTreeMap<String, Vec<SequenceRecord>> = fleet
        .vehicles
        .iter()
        .filter(|v| io::keep_vehicle(&g.vehicles, &v.vehicle_id))
        .map(|v| (v.vehicle_id.clone(), v.records.clone()))
        .collect();
    let tracks = collect_vehicles(
        per_vehicle(vehicles, |vid, records| {
            let days: Vec<_> = records.into_iter().map(|r| r.day).collect();
            Ok(synthesize_track(
                &days,
                &grid,
                seeds::derive(seeds::vehicle_seed(cfg.seed, vid), TAG_TRACK),
            ))
        }),
        false,
    )?;
    let rows = tracks
        .values()
        .flatten()
        .map(|p: &TrajectoryPoint| TrajectoryRow {
            vehicle_id: &p.vehicle_id,
            timestamp: p.time.to_rfc3339(),
            lat: p.lat,
            lon: p.lon,
        });
    write_csv(&out.join("trajectories.csv"), rows)?;
    write_csv(&out.join("weather.csv"), &fleet.weather)?;
    write_json(
        &out.join("truth.json"),
        &Truth {
            spec: &spec,
            hidden_states: hidden_truth(&fleet),
        },
    )?;
    let mut run_cfg = cfg.clone();
    run_cfg.set_grid(&grid);
    write_atomic(
        &out.join("config.toml"),
        run_cfg.to_toml_string().as_bytes(),
    )?;
    log::info!(
        "simulated {} vehicles over {days} days, {} fixes",
        tracks.len(),
        tracks.values().map(Vec::len).sum::<usize>()
    );
    Ok(())
}

pub fn extract_stays(g: &GlobalArgs, cfg: &ToolkitConfig) -> Result<()> {
    let (path, out) = (input(g)?, output(g)?);
    let ingested = ingest_trajectories(io::open(path)?)
        .with_context(|| format!("reading {}", path.display()))?;
    if !ingested.skipped.is_empty() {
        log::warn!("{} trajectory rows skipped", ingested.skipped.len());
    }
    let vehicles: BTreeMap<String, Vec<TrajectoryPoint>> = ingested
        .vehicles
        .into_iter()
        .filter(|(vid, _)| io::keep_vehicle(&g.vehicles, vid))
        .collect();
    if vehicles.is_empty() {
        bail!("no vehicles in {}", path.display());
    }
    let all: Vec<TrajectoryPoint> = vehicles.values().flatten().cloned().collect();
    let grid = cfg.grid_for(&all)?;
    let th = cfg.thresholds();
    let stays = collect_vehicles(
        per_vehicle(vehicles, |vid, points| {
            let raw = detect_stays(&points, &th);
            let (located, dropped) = locate_stays(&points, &raw, &grid)?;
            log::info!(
                "vehicle {vid}: {} fixes, {} stays, {dropped} outside the grid",
                points.len(),
                located.len()
            );
            Ok(located)
        }),
        false,
    )?;
    let records = stays.into_iter().flat_map(|(vid, v)| {
        v.into_iter().map(move |stay| StayRecord {
            vehicle_id: vid.clone(),
            stay,
        })
    });
    write_jsonl(out, records)?;
    write_grid_beside(out, &grid)
}

pub fn build_sequences(g: &GlobalArgs, cfg: &ToolkitConfig, weather: &Path) -> Result<()> {
    let (path, out) = (input(g)?, output(g)?);
    let table = WeatherTable::from_csv(io::open(weather)?)
        .with_context(|| format!("reading {}", weather.display()))?;
    let stays = io::group_stays(io::read_jsonl(path)?, &g.vehicles);
    let offset = cfg.utc_offset();
    let sequences = collect_vehicles(
        per_vehicle(stays, |vid, recs| {
            let stays: Vec<_> = recs.into_iter().map(|r| r.stay).collect();
            let days = partition_days(vid, &stays, offset)?;
            let seq = build_vehicle_sequences(days, &table, cfg.weather_policy)?;
            log::info!("vehicle {vid}: {} active days", seq.len());
            Ok(seq)
        }),
        false,
    )?;
    let days: BTreeMap<String, Vec<_>> = sequences
        .iter()
        .map(|(vid, recs)| (vid.clone(), recs.iter().map(|r| r.day.clone()).collect()))
        .collect();
    write_jsonl(out, sequences.values().flatten())?;
    if let Some(grid) = read_grid_beside(path)? {
        write_grid_beside(out, &grid)?;
    }
    let stats_path = out.with_file_name("fleet_stats.json");
    write_json(&stats_path, &fleet_stats(&days, None))
}

pub fn select_states(g: &GlobalArgs, cfg: &ToolkitConfig) -> Result<()> {
    let out = output(g)?;
    let selections = collect_vehicles(
        per_vehicle(read_sequences_nonempty(g)?, |vid, records| {
            let sel = select_vehicle_states(vid, &training_records(records, cfg)?, cfg)?;
            log::info!("vehicle {vid}: {} hidden states", sel.n_states);
            Ok(sel)
        }),
        true,
    )?;
    write_json(out, &selections)
}

pub fn fit(g: &GlobalArgs, cfg: &ToolkitConfig) -> Result<()> {
    let (path, out) = (input(g)?, output(g)?);
    let sequences = read_sequences_nonempty(g)?;
    let grid = match cfg.fixed_grid() {
        Some(grid) => grid,
        None => read_grid_beside(path)?.ok_or_else(|| {
            anyhow!(
                "no grid configured and no {} beside {}",
                io::GRID_FILE,
                path.display()
            )
        })?,
    };
    let models = collect_vehicles(
        per_vehicle(sequences, |vid, records| {
            let m = fit_vehicle(vid, records, &grid, cfg)?;
            log::info!(
                "vehicle {vid}: {} states, {} EM iterations, penalized log-likelihood {:.3}",
                m.n_states,
                m.trace.iterations.len(),
                m.trace
                    .iterations
                    .last()
                    .map_or(f64::NAN, |it| it.penalized)
            );
            Ok(m)
        }),
        true,
    )?;
    if models.is_empty() {
        bail!("no vehicle could be fitted");
    }
    for (vid, m) in &models {
        let p = io::model_path(out, vid);
        m.save(&p)
            .with_context(|| format!("vehicle {vid}: writing {}", p.display()))?;
    }
    log::info!("wrote {} models to {}", models.len(), out.display());
    Ok(())
}

/// Models for the vehicles in `sequences` that have one; the rest are
/// skipped with a warning.
fn pair_models(
    sequences: BTreeMap<String, Vec<SequenceRecord>>,
    dir: &Path,
) -> Result<BTreeMap<String, (VehicleModel, Vec<SequenceRecord>)>> {
    let (with, without): (Vec<_>, Vec<_>) = sequences
        .into_iter()
        .partition(|(vid, _)| io::model_path(dir, vid).exists());
    for (vid, _) in &without {
        log::warn!("vehicle {vid}: no model in {}; skipped", dir.display());
    }
    let ids: Vec<String> = with.iter().map(|(v, _)| v.clone()).collect();
    let mut models = io::read_models(dir, &ids)?;
    if models.is_empty() {
        bail!("no vehicles with models in {}", dir.display());
    }
    Ok(with
        .into_iter()
        .map(|(vid, recs)| {
            let m = models.remove(&vid).expect("loaded above");
            (vid, (m, recs))
        })
        .collect())
}

#[derive(Serialize)]
struct ForecastRecord {
    vehicle_id: String,
    date: NaiveDate,
    /// 1-based position of the forecast activity; `m + 1` is the pending one.
    activity: usize,
    issued_at: DateTime<FixedOffset>,
    predicted_cell: CellId,
    predicted_duration_h: f64,
    top_destinations: Vec<(CellId, f64)>,
    state_probs: Vec<f64>,
    actual_cell: Option<CellId>,
    actual_duration_h: Option<f64>,
}

pub fn predict(g: &GlobalArgs, models: &Path) -> Result<()> {
    let out = output(g)?;
    let paired = pair_models(read_sequences_nonempty(g)?, models)?;
    let forecasts = collect_vehicles(
        per_vehicle(paired, |vid, (model, records)| {
            let mut out = Vec::new();
            for rec in test_records(&model, &records) {
                let day = observed_day(&rec);
                for i in 0..=rec.day.len() {
                    let f =
                        predict_next_lenient(&model.iohmm, &day.observations[..i], &day.contexts)
                            .with_context(|| format!("day {} activity {}", rec.day.date(), i + 1))?;
                    let actual = rec.day.stays.get(i);
                    out.push(ForecastRecord {
                        vehicle_id: vid.to_string(),
                        date: rec.day.date(),
                        activity: i + 1,
                        issued_at: if i == 0 {
                            rec.day.day_start
                        } else {
                            rec.day.stays[i - 1].departure
                        },
                        predicted_cell: f.predicted_cell,
                        predicted_duration_h: f.predicted_duration_h,
                        top_destinations: f.top_k(3),
                        state_probs: f.state_probs,
                        actual_cell: actual.map(|s| s.cell),
                        actual_duration_h: actual.map(|_| rec.day.trip_durations[i]),
                    });
                }
            }
            log::info!("vehicle {vid}: {} forecasts", out.len());
            Ok(out)
        }),
        false,
    )?;
    write_jsonl(out, forecasts.values().flatten())
}

const MODEL_NAMES: [&str; 3] = ["iohmm", "markov_chain", "linear_duration"];

fn scores(e: &VehicleEvaluation) -> [&VehicleScore; 3] {
    [&e.iohmm, &e.markov_chain, &e.linear_duration]
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    vehicle_id: &'a str,
    model: &'a str,
    n_test_days: usize,
    n_test_activities: usize,
    dest_accuracy: Option<f64>,
    duration_r2: Option<f64>,
    mean_abs_error_h: Option<f64>,
}

#[derive(Serialize)]
struct SummaryRow<'a> {
    model: &'a str,
    n_vehicles: usize,
    mean_dest_accuracy: Option<f64>,
    mean_duration_r2: Option<f64>,
    mean_abs_error_h: Option<f64>,
}

#[derive(Serialize)]
struct HistogramRow<'a> {
    model: &'a str,
    lower_h: f64,
    upper_h: f64,
    count: usize,
    fraction: f64,
}

fn evaluate_all(
    g: &GlobalArgs,
    models: &Path,
) -> Result<BTreeMap<String, (VehicleModel, Vec<SequenceRecord>, VehicleEvaluation)>> {
    let paired = pair_models(read_sequences_nonempty(g)?, models)?;
    let evaluated = collect_vehicles(
        per_vehicle(paired, |vid, (model, records)| {
            let e = evaluate_vehicle(&model, &records)?;
            log::info!(
                "vehicle {vid}: {} test activities, IOHMM accuracy {:?}",
                e.iohmm.n_test_activities,
                e.iohmm.dest_accuracy
            );
            Ok((model, records, e))
        }),
        true,
    )?;
    if evaluated.is_empty() {
        bail!("no vehicle has test days");
    }
    Ok(evaluated)
}

pub fn evaluate(g: &GlobalArgs, cfg: &ToolkitConfig, models: &Path) -> Result<()> {
    let out = output(g)?;
    let evaluated = evaluate_all(g, models)?;
    let evals: Vec<&VehicleEvaluation> = evaluated.values().map(|(_, _, e)| e).collect();
    let mut score_rows = Vec::new();
    for e in &evals {
        for (name, s) in MODEL_NAMES.iter().zip(scores(e)) {
            score_rows.push(ScoreRow {
                vehicle_id: &e.vehicle_id,
                model: name,
                n_test_days: e.n_test_days,
                n_test_activities: s.n_test_activities,
                dest_accuracy: s.dest_accuracy,
                duration_r2: s.duration_r2,
                mean_abs_error_h: mean(&s.abs_errors_h),
            });
        }
    }
    let mut summary = Vec::new();
    let mut histogram = Vec::new();
    for (k, name) in MODEL_NAMES.iter().enumerate() {
        let per: Vec<&VehicleScore> = evals.iter().map(|e| scores(e)[k]).collect();
        let errors: Vec<f64> = per
            .iter()
            .flat_map(|s| s.abs_errors_h.iter().copied())
            .collect();
        summary.push(SummaryRow {
            model: name,
            n_vehicles: per.len(),
            mean_dest_accuracy: mean_defined(per.iter().map(|s| s.dest_accuracy)),
            mean_duration_r2: mean_defined(per.iter().map(|s| s.duration_r2)),
            mean_abs_error_h: mean(&errors),
        });
        for b in error_histogram(&errors, cfg.histogram_bin_h)? {
            histogram.push(HistogramRow {
                model: name,
                lower_h: b.lower_h,
                upper_h: b.upper_h,
                count: b.count,
                fraction: b.fraction,
            });
        }
    }
    write_csv(&out.join("scores.csv"), score_rows)?;
    write_csv(&out.join("summary.csv"), summary)?;
    write_csv(&out.join("error_histogram.csv"), histogram)?;
    log::info!("evaluated {} vehicles", evals.len());
    Ok(())
}

pub fn analyze_factors(g: &GlobalArgs, models: &Path) -> Result<()> {
    let out = output(g)?;
    let evaluated = evaluate_all(g, models)?;
    let mut destination = Vec::new();
    let mut duration = Vec::new();
    for (model, records, e) in evaluated.values() {
        let days: Vec<_> = records.iter().map(|r| r.day.clone()).collect();
        let row = factor_row(&days, model.n_states);
        if let Some(a) = e.iohmm.dest_accuracy {
            destination.push((row, a));
        }
        if let Some(r2) = e.iohmm.duration_r2 {
            duration.push((row, r2));
        }
    }
    let table = factor_regression(&destination, &duration)?;
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    write_atomic(out, &buf).with_context(|| format!("writing {}", out.display()))?;
    if table.jittered {
        log::warn!("factor design was rank deficient; a ridge jitter was applied");
    }
    Ok(())
}
