//! Per-vehicle model documents and atomic artifact writes.

use std::io::Write;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::baselines::{LinearDurationModel, MarkovChainModel};
use crate::config::ToolkitConfig;
use crate::error::{Error, Result};
use crate::geo::GridSpec;
use crate::iohmm::{EmRun, IohmmModel};
use crate::states::StateSelection;

pub const FORMAT_VERSION: u32 = 1;

/// Everything fitted for one vehicle, with the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleModel {
    pub format_version: u32,
    pub vehicle_id: String,
    pub grid: GridSpec,
    pub config: ToolkitConfig,
    /// Seed of this vehicle's streams, derived from the run seed.
    pub vehicle_seed: u64,
    pub n_states: usize,
    pub selection: StateSelection,
    /// Last operational date used for training; later days are test days.
    pub train_until: NaiveDate,
    pub n_train_days: usize,
    pub iohmm: IohmmModel,
    /// Log of the EM run that produced `iohmm`.
    pub trace: EmRun,
    pub markov_chain: MarkovChainModel,
    pub linear_duration: LinearDurationModel,
}

impl VehicleModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model documents contain only finite numbers")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Self = serde_json::from_str(text)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "model format version {} is not supported (expected {FORMAT_VERSION})",
                doc.format_version
            )));
        }
        doc.iohmm.validate()?;
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.to_json();
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }
}

/// Writes `bytes` to a temporary file beside `path` and renames it into
/// place, so readers see either the old file or the complete new one.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

/// File name of a vehicle's model; ids are escaped to stay filesystem-safe.
pub fn model_file_name(vehicle_id: &str) -> String {
    let safe: String = vehicle_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.json")
}
