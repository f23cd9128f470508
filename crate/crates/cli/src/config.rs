//! TOML run configuration. Every key is optional; command-line flags win
//! over `DHCAL_*` path variables, which win over the file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use crate::CliError;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct RunConfig {
    pub topology: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub rejects: Option<PathBuf>,

    /// Structural preset for calibration: A, B or C.
    pub preset: Option<String>,
    /// Built-in fitted model used as simulation truth.
    pub truth: Option<String>,
    /// Simulation protocol: exciting or loadcurve.
    pub protocol: Option<String>,

    pub delta: Option<f64>,
    pub window: Option<f64>,
    pub discard: Option<f64>,
    pub clip: Option<f64>,
    pub filter_order: Option<String>,
    pub min_flow: Option<f64>,
    pub max_iter: Option<usize>,

    pub seed: Option<u64>,
    pub dwells: Option<usize>,
    pub dwell_seconds: Option<u32>,
    pub floor: Option<f64>,
    pub ceiling: Option<f64>,
    pub delta_true: Option<f64>,
    pub noise: Option<f64>,
    pub pressure_noise: Option<f64>,
    pub dp0: Option<f64>,

    /// Canonical column name to file column name.
    pub columns: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }
}

/// First present value of flag, then file.
pub fn pick<T: Clone>(flag: &Option<T>, file: &Option<T>) -> Option<T> {
    flag.clone().or_else(|| file.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_kebab_keys() {
        let cfg: RunConfig = toml::from_str(
            "data = \"d.csv\"\nmin-flow = 0.1\ndwell-seconds = 30\n[columns]\nft1 = \"FT_1\"\n",
        )
        .unwrap();
        assert_eq!(cfg.data, Some(PathBuf::from("d.csv")));
        assert_eq!(cfg.min_flow, Some(0.1));
        assert_eq!(cfg.dwell_seconds, Some(30));
        assert_eq!(cfg.columns["ft1"], "FT_1");
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(toml::from_str::<RunConfig>("dleta = 0.1\n").is_err());
    }

    #[test]
    fn flag_wins() {
        assert_eq!(pick(&Some(1), &Some(2)), Some(1));
        assert_eq!(pick(&None, &Some(2)), Some(2));
        assert_eq!(pick::<i32>(&None, &None), None);
    }
}
