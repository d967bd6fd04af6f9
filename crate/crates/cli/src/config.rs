//! Run configuration: one JSON document plus `--set key=value` overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use qsd_core::estimation::EtaGrid;
use qsd_core::validation::{Axis, ReadoutFidelity};
use qsd_core::{InitialState, QsdError, Result, Scheme, SimParams};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const SEED_ENV: &str = "QSD_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Output {
    Records,
    Trajectories,
    Invariants,
    Grid,
    Tomography,
    Likelihood,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordFormat {
    #[default]
    Csv,
    Binary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TomographyConfig {
    pub axes: Vec<Axis>,
    /// Efficiency assumed by the filter; `None` uses the true one.
    pub filter_eta: Option<f64>,
}

impl Default for TomographyConfig {
    fn default() -> Self {
        Self {
            axes: Axis::ALL.to_vec(),
            filter_eta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    pub grid: EtaGrid,
}

/// Pass/fail thresholds applied to the reports a command produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Checks {
    pub slope_tol: f64,
    pub min_bin_fraction: f64,
    pub fail_on_boundary: bool,
    pub eta_window: Option<(f64, f64)>,
    pub max_alpha_rel_error: Option<f64>,
}

impl Default for Checks {
    fn default() -> Self {
        Self {
            slope_tol: 0.05,
            min_bin_fraction: 0.9,
            fail_on_boundary: true,
            eta_window: None,
            max_alpha_rel_error: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub params: SimParams,
    pub initial: InitialState,
    pub ensemble_size: usize,
    /// Trajectory index of the first ensemble member.
    pub first_index: u64,
    pub outputs: BTreeSet<Output>,
    pub output_dir: PathBuf,
    pub record_format: RecordFormat,
    pub scheme: Scheme,
    pub cell_side: Option<f64>,
    pub bin_half_width: Option<f64>,
    pub min_bin_count: Option<usize>,
    pub readout: Option<ReadoutFidelity>,
    /// Occupancy slice times in us; defaults to every whole microsecond.
    pub grid_times: Option<Vec<f64>>,
    pub tomography: TomographyConfig,
    pub estimation: EstimationConfig,
    pub checks: Checks,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            params: SimParams::reference(),
            initial: InitialState::PlusX,
            ensemble_size: 1,
            first_index: 0,
            outputs: BTreeSet::from([Output::Records]),
            output_dir: PathBuf::from("qsd-out"),
            record_format: RecordFormat::Csv,
            scheme: Scheme::Kraus,
            cell_side: None,
            bin_half_width: None,
            min_bin_count: None,
            readout: None,
            grid_times: None,
            tomography: TomographyConfig::default(),
            estimation: EstimationConfig::default(),
            checks: Checks::default(),
        }
    }
}

/// Where the master seed came from, for the manifest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedSource {
    Config,
    Environment,
    Override,
}

impl RunConfig {
    pub fn cell_side(&self) -> f64 {
        self.cell_side.unwrap_or(0.04)
    }

    pub fn readout(&self) -> ReadoutFidelity {
        self.readout.unwrap_or_default()
    }

    pub fn grid_times(&self) -> Vec<f64> {
        match &self.grid_times {
            Some(t) => t.clone(),
            None => (0..=self.params.horizon.floor() as usize).map(|k| k as f64).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.initial.state()?;
        let bad = |msg: String| Err(QsdError::Config(msg));
        if self.ensemble_size < 1 {
            return bad("ensemble_size must be at least 1".into());
        }
        if let Some(c) = self.cell_side {
            if !(c > 0.0 && c <= 2.0) {
                return bad(format!("cell_side {c} outside (0, 2]"));
            }
        }
        if let Some(h) = self.bin_half_width {
            if !(h > 0.0 && h <= 0.5) {
                return bad(format!("bin_half_width {h} outside (0, 0.5]"));
            }
        }
        if let Some(r) = self.readout {
            r.validate()?;
        }
        if let Some(eta) = self.tomography.filter_eta {
            if !(0.0..=1.0).contains(&eta) {
                return bad(format!("tomography.filter_eta {eta} outside [0, 1]"));
            }
        }
        if self.tomography.axes.is_empty() {
            return bad("tomography.axes is empty".into());
        }
        self.estimation.grid.validate()?;
        for t in self.grid_times() {
            if !(0.0..=self.params.horizon + 1e-9).contains(&t) {
                return bad(format!("grid time {t} outside [0, horizon]"));
            }
            qsd_core::state::steps_for(t, self.params.dt)?;
        }
        let c = &self.checks;
        if !(c.slope_tol > 0.0) || !(0.0..=1.0).contains(&c.min_bin_fraction) {
            return bad("checks.slope_tol must be positive and checks.min_bin_fraction in [0, 1]".into());
        }
        Ok(())
    }
}

/// Parses a `QSD_SEED` value, decimal or `0x`-prefixed hex.
pub fn parse_seed(s: &str) -> Result<u64> {
    let s = s.trim();
    let parsed = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16),
        None => s.replace('_', "").parse(),
    };
    parsed.map_err(|_| QsdError::Config(format!("{SEED_ENV}='{s}' is not a u64")))
}

/// Sets `path` (dot separated) in a JSON object tree. The value is read as
/// JSON when it parses, otherwise as a plain string.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| QsdError::Config(format!("override '{assignment}' is not key=value")))?;
    let path = path.trim();
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(QsdError::Config(format!("override '{assignment}' has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = doc;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = match node {
            Value::Object(m) => m,
            Value::Null => {
                *node = Value::Object(Default::default());
                node.as_object_mut().expect("just created")
            }
            _ => {
                return Err(QsdError::Config(format!(
                    "override '{assignment}': '{}' is not an object",
                    keys[..i].join(".")
                )))
            }
        };
        if i + 1 == keys.len() {
            obj.insert((*key).to_string(), value);
            return Ok(());
        }
        node = obj.entry(*key).or_insert(Value::Null);
    }
    unreachable!("loop returns on the last key")
}

/// Loads the config file (or defaults), then `QSD_SEED`, then overrides.
pub fn load(
    path: Option<&Path>,
    overrides: &[String],
    env_seed: Option<&str>,
) -> Result<(RunConfig, SeedSource)> {
    let mut doc = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| QsdError::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| QsdError::Parse {
                file: p.to_path_buf(),
                line: e.line(),
                msg: e.to_string(),
            })?
        }
        None => serde_json::to_value(RunConfig::default())?,
    };
    let mut source = SeedSource::Config;
    if let Some(s) = env_seed {
        apply_override(&mut doc, &format!("params.master_seed={}", parse_seed(s)?))?;
        source = SeedSource::Environment;
    }
    for o in overrides {
        if o.trim_start().starts_with("params.master_seed") {
            source = SeedSource::Override;
        }
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig =
        serde_json::from_value(doc).map_err(|e| QsdError::Config(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok((cfg, source))
}
