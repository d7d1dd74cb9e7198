//! Python bindings. Structured values cross the boundary as plain Python
//! objects (dicts, lists, numbers) converted through JSON.

use haulcast_core::config::ToolkitConfig;
use haulcast_core::geo::{self, GridSpec, StayThresholds, TrajectoryPoint};
use haulcast_core::iohmm::Observation;
use haulcast_core::persist::VehicleModel;
use haulcast_core::pipeline::{evaluate_vehicle, fit_vehicle, test_records};
use haulcast_core::sequences::{self, SequenceRecord, StayRecord, WeatherTable};
use haulcast_core::{predict, states, synth};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::de::DeserializeOwned;
use serde::Serialize;

fn core_err(e: haulcast_core::Error) -> PyErr {
    match e {
        haulcast_core::Error::Io(e) => PyRuntimeError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj
        .py()
        .import("json")?
        .call_method1("dumps", (obj,))?
        .extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Toolkit settings; keyword names match the TOML keys.
#[pyclass(module = "haulcast")]
struct Config {
    inner: ToolkitConfig,
}

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (toml = None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        let inner = match toml {
            Some(t) => ToolkitConfig::from_toml_str(t).map_err(core_err)?,
            None => ToolkitConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = ToolkitConfig::load(path.as_ref()).map_err(core_err)?;
        Ok(Self { inner })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml_string()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner)
    }

    /// Copy with the given keys replaced.
    #[pyo3(signature = (**changes))]
    fn replace(
        &self,
        py: Python<'_>,
        changes: Option<&Bound<'_, pyo3::types::PyDict>>,
    ) -> PyResult<Self> {
        let merged = to_py(py, &self.inner)?;
        if let Some(c) = changes {
            merged.call_method1("update", (c,))?;
        }
        let inner: ToolkitConfig = from_py(&merged)?;
        inner.validate().map_err(core_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(seed={}, k_candidates={:?})",
            self.inner.seed, self.inner.k_candidates
        )
    }
}

fn config_or_default(config: Option<PyRef<'_, Config>>) -> ToolkitConfig {
    config.map(|c| c.inner.clone()).unwrap_or_default()
}

/// A fitted per-vehicle model: IOHMM plus both baselines.
#[pyclass(module = "haulcast")]
struct Model {
    inner: VehicleModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: VehicleModel::from_json(text).map_err(core_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self {
            inner: VehicleModel::load(path.as_ref()).map_err(core_err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(core_err)
    }

    #[getter]
    fn vehicle_id(&self) -> &str {
        &self.inner.vehicle_id
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.inner.n_states
    }

    /// Destination cells as `(row, col)` pairs, in model order.
    #[getter]
    fn destinations(&self) -> Vec<(u32, u32)> {
        self.inner
            .iohmm
            .destinations
            .iter()
            .map(|c| (c.row, c.col))
            .collect()
    }

    /// Forecast after the observed `prefix` of `(row, col, trip_duration_h)`
    /// activities. `contexts` holds one raw context per prefix activity plus
    /// one for the next. Unknown cells count as unobserved destinations.
    fn predict_next<'py>(
        &self,
        py: Python<'py>,
        prefix: Vec<(u32, u32, f64)>,
        contexts: Vec<Vec<f64>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let obs: Vec<Observation> = prefix
            .into_iter()
            .map(|(row, col, duration_h)| Observation {
                cell: geo::CellId::new(row, col),
                duration_h,
            })
            .collect();
        let f =
            predict::predict_next_lenient(&self.inner.iohmm, &obs, &contexts).map_err(core_err)?;
        to_py(py, &f)
    }

    /// Sequence records after the training period.
    fn test_records<'py>(
        &self,
        py: Python<'py>,
        records: &Bound<'py, PyAny>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let records: Vec<SequenceRecord> = from_py(records)?;
        to_py(py, &test_records(&self.inner, &records))
    }

    /// Scores of the IOHMM and both baselines on the test days.
    fn evaluate<'py>(
        &self,
        py: Python<'py>,
        records: &Bound<'py, PyAny>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let records: Vec<SequenceRecord> = from_py(records)?;
        let e = py
            .detach(|| evaluate_vehicle(&self.inner, &records))
            .map_err(core_err)?;
        to_py(py, &e)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(vehicle_id={:?}, n_states={}, destinations={})",
            self.inner.vehicle_id,
            self.inner.n_states,
            self.inner.iohmm.n_destinations()
        )
    }
}

/// Great-circle distance in metres between `(lat, lon)` pairs.
#[pyfunction]
fn haversine_m(a: (f64, f64), b: (f64, f64)) -> f64 {
    geo::haversine_m(a, b)
}

/// Stay records and the grid for trajectory CSV text.
#[pyfunction]
#[pyo3(signature = (trajectory_csv, config = None))]
fn extract_stays<'py>(
    py: Python<'py>,
    trajectory_csv: &str,
    config: Option<PyRef<'_, Config>>,
) -> PyResult<(Bound<'py, PyAny>, Bound<'py, PyAny>)> {
    let cfg = config_or_default(config);
    let ingested = geo::ingest_trajectories(trajectory_csv.as_bytes()).map_err(core_err)?;
    let all: Vec<TrajectoryPoint> = ingested.vehicles.values().flatten().cloned().collect();
    let grid = cfg.grid_for(&all).map_err(core_err)?;
    let th: StayThresholds = cfg.thresholds();
    let mut out = Vec::new();
    for (vid, points) in &ingested.vehicles {
        let raw = geo::detect_stays(points, &th);
        let (located, _) = sequences::locate_stays(points, &raw, &grid).map_err(core_err)?;
        out.extend(located.into_iter().map(|stay| StayRecord {
            vehicle_id: vid.clone(),
            stay,
        }));
    }
    Ok((to_py(py, &out)?, to_py(py, &grid)?))
}

/// Sequence records from one vehicle's stay records and weather CSV text.
#[pyfunction]
#[pyo3(signature = (stays, weather_csv, config = None))]
fn build_sequences<'py>(
    py: Python<'py>,
    stays: &Bound<'py, PyAny>,
    weather_csv: &str,
    config: Option<PyRef<'_, Config>>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config_or_default(config);
    let mut stays: Vec<StayRecord> = from_py(stays)?;
    let Some(vid) = stays.first().map(|s| s.vehicle_id.clone()) else {
        return to_py(py, &Vec::<SequenceRecord>::new());
    };
    if stays.iter().any(|s| s.vehicle_id != vid) {
        return Err(PyValueError::new_err(
            "stays must belong to a single vehicle",
        ));
    }
    stays.sort_by_key(|s| s.stay.arrival);
    let table = WeatherTable::from_csv(weather_csv.as_bytes()).map_err(core_err)?;
    let plain: Vec<_> = stays.into_iter().map(|s| s.stay).collect();
    let days = sequences::partition_days(&vid, &plain, cfg.utc_offset()).map_err(core_err)?;
    let seq = sequences::build_sequences(days, &table, cfg.weather_policy).map_err(core_err)?;
    to_py(py, &seq)
}

/// Samples a fleet from the built-in three-state generator. Returns
/// `{"vehicles": {id: [records]}, "weather": [...], "hidden_states": {...}}`.
#[pyfunction]
#[pyo3(signature = (n_vehicles, days, seed = 0))]
fn simulate<'py>(
    py: Python<'py>,
    n_vehicles: usize,
    days: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let fleet = py
        .detach(|| synth::sample_fleet(&synth::fixture_spec(n_vehicles, days, seed)))
        .map_err(core_err)?;
    let vehicles: std::collections::BTreeMap<&str, &Vec<SequenceRecord>> = fleet
        .vehicles
        .iter()
        .map(|v| (v.vehicle_id.as_str(), &v.records))
        .collect();
    let doc = serde_json::json!({
        "vehicles": vehicles,
        "weather": fleet.weather,
        "hidden_states": synth::hidden_truth(&fleet),
    });
    to_py(py, &doc)
}

/// The grid of the built-in generator.
#[pyfunction]
fn simulation_grid<'py>(py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &synth::fixture_grid())
}

/// Fits one vehicle. `grid` defaults to the configured grid.
#[pyfunction]
#[pyo3(signature = (vehicle_id, records, config = None, grid = None))]
fn fit(
    py: Python<'_>,
    vehicle_id: &str,
    records: &Bound<'_, PyAny>,
    config: Option<PyRef<'_, Config>>,
    grid: Option<&Bound<'_, PyAny>>,
) -> PyResult<Model> {
    let cfg = config_or_default(config);
    let records: Vec<SequenceRecord> = from_py(records)?;
    let grid: GridSpec = match grid {
        Some(g) => from_py(g)?,
        None => cfg
            .fixed_grid()
            .ok_or_else(|| PyValueError::new_err("no grid given and none configured"))?,
    };
    let model = py
        .detach(|| fit_vehicle(vehicle_id, records, &grid, &cfg))
        .map_err(core_err)?;
    Ok(Model { inner: model })
}

/// Mean silhouette of `points` under `labels`.
#[pyfunction]
fn silhouette(points: Vec<Vec<f64>>, labels: Vec<usize>) -> PyResult<f64> {
    states::silhouette(&points, &labels).map_err(core_err)
}

#[pymodule]
fn haulcast(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Config>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(haversine_m, m)?)?;
    m.add_function(wrap_pyfunction!(extract_stays, m)?)?;
    m.add_function(wrap_pyfunction!(build_sequences, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(simulation_grid, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(silhouette, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
