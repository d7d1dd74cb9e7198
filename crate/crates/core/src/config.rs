//! Toolkit configuration: one flat TOML document, every key optional.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{GridSpec, StayThresholds, TrajectoryPoint};
use crate::iohmm::EmConfig;
use crate::sequences::WeatherPolicy;
use crate::states::{DEFAULT_K_CANDIDATES, KMEANS_RESTARTS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolkitConfig {
    pub theta_d_m: f64,
    pub theta_t_s: f64,
    pub cell_side_m: f64,
    /// The four grid keys are set together or not at all; when absent the
    /// grid covers the ingested fixes.
    pub grid_origin_lat: Option<f64>,
    pub grid_origin_lon: Option<f64>,
    pub grid_n_rows: Option<u32>,
    pub grid_n_cols: Option<u32>,
    /// Offset of the local clock in which operational days start at 05:00.
    pub utc_offset_minutes: i32,
    pub k_candidates: Vec<usize>,
    pub kmeans_restarts: usize,
    pub em_max_iter: usize,
    pub em_rel_tol: f64,
    pub em_l2: f64,
    pub em_sigma_floor: f64,
    pub em_restarts: usize,
    pub em_screen_restarts: usize,
    pub em_screen_iter: usize,
    pub standardize_context: bool,
    pub mc_alpha: f64,
    pub train_frac: f64,
    pub seed: u64,
    pub weather_policy: WeatherPolicy,
    pub histogram_bin_h: f64,
}

impl Default for ToolkitConfig {
    fn default() -> Self {
        let th = StayThresholds::default();
        let em = EmConfig::default();
        Self {
            theta_d_m: th.theta_d,
            theta_t_s: th.theta_t,
            cell_side_m: 500.0,
            grid_origin_lat: None,
            grid_origin_lon: None,
            grid_n_rows: None,
            grid_n_cols: None,
            utc_offset_minutes: 0,
            k_candidates: DEFAULT_K_CANDIDATES.to_vec(),
            kmeans_restarts: KMEANS_RESTARTS,
            em_max_iter: em.max_iter,
            em_rel_tol: em.rel_tol,
            em_l2: em.l2,
            em_sigma_floor: em.sigma_floor,
            em_restarts: em.random_restarts,
            em_screen_restarts: em.screen_restarts,
            em_screen_iter: em.screen_iter,
            standardize_context: em.standardize,
            mc_alpha: 1.0,
            train_frac: 0.7,
            seed: 0,
            weather_policy: WeatherPolicy::Error,
            histogram_bin_h: 0.5,
        }
    }
}

impl ToolkitConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config fields are plain values")
    }

    pub fn thresholds(&self) -> StayThresholds {
        StayThresholds {
            theta_d: self.theta_d_m,
            theta_t: self.theta_t_s,
        }
    }

    /// The configured grid, if all four grid keys are present.
    pub fn fixed_grid(&self) -> Option<GridSpec> {
        Some(GridSpec {
            origin_lat: self.grid_origin_lat?,
            origin_lon: self.grid_origin_lon?,
            cell_side_m: self.cell_side_m,
            n_rows: self.grid_n_rows?,
            n_cols: self.grid_n_cols?,
        })
    }

    /// The configured grid, or the smallest whole-cell grid covering `points`.
    pub fn grid_for(&self, points: &[TrajectoryPoint]) -> Result<GridSpec> {
        match self.fixed_grid() {
            Some(g) => Ok(g),
            None => GridSpec::covering(points.iter().map(|p| (p.lat, p.lon)), self.cell_side_m),
        }
    }

    pub fn set_grid(&mut self, grid: &GridSpec) {
        self.grid_origin_lat = Some(grid.origin_lat);
        self.grid_origin_lon = Some(grid.origin_lon);
        self.grid_n_rows = Some(grid.n_rows);
        self.grid_n_cols = Some(grid.n_cols);
        self.cell_side_m = grid.cell_side_m;
    }

    pub fn utc_offset(&self) -> chrono::FixedOffset {
        chrono::FixedOffset::east_opt(self.utc_offset_minutes * 60).expect("validated range")
    }

    /// EM settings for one vehicle; `seed` is that vehicle's stream.
    pub fn em(&self, seed: u64) -> EmConfig {
        EmConfig {
            max_iter: self.em_max_iter,
            rel_tol: self.em_rel_tol,
            l2: self.em_l2,
            sigma_floor: self.em_sigma_floor,
            random_restarts: self.em_restarts,
            screen_restarts: self.em_screen_restarts,
            screen_iter: self.em_screen_iter,
            standardize: self.standardize_context,
            seed,
            ..EmConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds().validate()?;
        if !(self.cell_side_m > 0.0 && self.cell_side_m.is_finite()) {
            return Err(Error::Config(format!(
                "cell_side_m must be positive, got {}",
                self.cell_side_m
            )));
        }
        let set = [
            self.grid_origin_lat.is_some(),
            self.grid_origin_lon.is_some(),
            self.grid_n_rows.is_some(),
            self.grid_n_cols.is_some(),
        ];
        if set.iter().any(|&b| b) && !set.iter().all(|&b| b) {
            return Err(Error::Config(
                "grid_origin_lat, grid_origin_lon, grid_n_rows and grid_n_cols must be given together".into(),
            ));
        }
        if let Some(g) = self.fixed_grid() {
            g.validate()?;
        }
        if self.utc_offset_minutes.abs() >= 24 * 60 {
            return Err(Error::Config(format!(
                "utc_offset_minutes out of range: {}",
                self.utc_offset_minutes
            )));
        }
        if self.k_candidates.is_empty() || self.k_candidates.contains(&0) {
            return Err(Error::Config(
                "k_candidates must be non-empty positive integers".into(),
            ));
        }
        if self.kmeans_restarts == 0 {
            return Err(Error::Config("kmeans_restarts must be positive".into()));
        }
        self.em(0).validate()?;
        if !(self.mc_alpha > 0.0 && self.mc_alpha.is_finite()) {
            return Err(Error::Config(format!(
                "mc_alpha must be positive, got {}",
                self.mc_alpha
            )));
        }
        if !(self.train_frac > 0.0 && self.train_frac < 1.0) {
            return Err(Error::Config(format!(
                "train_frac must lie in (0, 1), got {}",
                self.train_frac
            )));
        }
        if !(self.histogram_bin_h > 0.0 && self.histogram_bin_h.is_finite()) {
            return Err(Error::Config(format!(
                "histogram_bin_h must be positive, got {}",
                self.histogram_bin_h
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_default() {
        assert_eq!(
            ToolkitConfig::from_toml_str("").unwrap(),
            ToolkitConfig::default()
        );
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = ToolkitConfig::default();
        c.seed = 42;
        c.weather_policy = WeatherPolicy::ZeroFill;
        c.set_grid(&GridSpec {
            origin_lat: 30.5,
            origin_lon: 103.9,
            cell_side_m: 250.0,
            n_rows: 10,
            n_cols: 12,
        });
        let back = ToolkitConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            ToolkitConfig::from_toml_str("theta_x = 1"),
            Err(Error::Config(_))
        ));
        assert!(ToolkitConfig::from_toml_str("train_frac = 1.0").is_err());
        assert!(ToolkitConfig::from_toml_str("theta_d_m = -5.0").is_err());
        assert!(ToolkitConfig::from_toml_str("grid_n_rows = 4").is_err());
        assert!(ToolkitConfig::from_toml_str("k_candidates = []").is_err());
        assert!(ToolkitConfig::from_toml_str("weather_policy = \"zero-fill\"").is_ok());
    }
}
