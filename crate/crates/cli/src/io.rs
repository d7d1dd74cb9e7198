//! Artifact readers and writers. Every write goes through a temporary file
//! and a rename.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use haulcast_core::geo::GridSpec;
use haulcast_core::persist::{model_file_name, write_atomic, VehicleModel};
use haulcast_core::sequences::{SequenceRecord, StayRecord};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub const GRID_FILE: &str = "grid.json";

pub fn open(path: &Path) -> Result<BufReader<File>> {
    let f = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(BufReader::new(f))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (n, line) in open(path)?.lines().enumerate() {
        let line = line.with_context(|| format!("reading {}", path.display()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .with_context(|| format!("{} line {}", path.display(), n + 1))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, &item)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf).with_context(|| format!("writing {}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().context("flushing csv")?;
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent()
        .map_or_else(|| PathBuf::from(name), |p| p.join(name))
}

/// Writes the grid next to an artifact so later stages can find it.
pub fn write_grid_beside(artifact: &Path, grid: &GridSpec) -> Result<()> {
    write_json(&sibling(artifact, GRID_FILE), grid)
}

/// The grid stored beside `artifact`, if any.
pub fn read_grid_beside(artifact: &Path) -> Result<Option<GridSpec>> {
    let p = sibling(artifact, GRID_FILE);
    if !p.exists() {
        return Ok(None);
    }
    let g: GridSpec =
        serde_json::from_reader(open(&p)?).with_context(|| format!("parsing {}", p.display()))?;
    Ok(Some(g))
}

/// Keeps vehicles named in `filter`; an empty filter keeps all.
pub fn keep_vehicle(filter: &[String], vehicle_id: &str) -> bool {
    filter.is_empty() || filter.iter().any(|v| v == vehicle_id)
}

pub fn group_stays(
    records: Vec<StayRecord>,
    filter: &[String],
) -> BTreeMap<String, Vec<StayRecord>> {
    let mut by: BTreeMap<String, Vec<StayRecord>> = BTreeMap::new();
    for r in records {
        if keep_vehicle(filter, &r.vehicle_id) {
            by.entry(r.vehicle_id.clone()).or_default().push(r);
        }
    }
    for v in by.values_mut() {
        v.sort_by_key(|r| r.stay.arrival);
    }
    by
}

/// Sequence records per vehicle, days in chronological order.
pub fn read_sequences(
    path: &Path,
    filter: &[String],
) -> Result<BTreeMap<String, Vec<SequenceRecord>>> {
    let mut by: BTreeMap<String, Vec<SequenceRecord>> = BTreeMap::new();
    for r in read_jsonl::<SequenceRecord>(path)? {
        if keep_vehicle(filter, &r.day.vehicle_id) {
            by.entry(r.day.vehicle_id.clone()).or_default().push(r);
        }
    }
    for v in by.values_mut() {
        v.sort_by_key(|r| r.day.day_start);
    }
    Ok(by)
}

pub fn model_path(dir: &Path, vehicle_id: &str) -> PathBuf {
    dir.join(model_file_name(vehicle_id))
}

/// Models for the given vehicles; a missing model is an error.
pub fn read_models<'a>(
    dir: &Path,
    vehicles: impl IntoIterator<Item = &'a String>,
) -> Result<BTreeMap<String, VehicleModel>> {
    let mut out = BTreeMap::new();
    for vid in vehicles {
        let p = model_path(dir, vid);
        let m = VehicleModel::load(&p)
            .with_context(|| format!("vehicle {vid}: loading {}", p.display()))?;
        if &m.vehicle_id != vid {
            bail!(
                "{} holds vehicle {}, expected {vid}",
                p.display(),
                m.vehicle_id
            );
        }
        out.insert(vid.clone(), m);
    }
    Ok(out)
}
