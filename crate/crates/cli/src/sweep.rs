//! Alpha-sweep summaries: one `[[run]]` table per trained alpha.

use std::path::Path;

use serde::{Deserialize, Serialize};
use wilson::{Error, Result};

pub const FILE_NAME: &str = "alpha_sweep.toml";
pub const ALPHAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepRun {
    pub protocol: String,
    pub alpha: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub all: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default)]
    pub run: Vec<SweepRun>,
}

impl Sweep {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).expect("sweep serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Format {
            what: "alpha sweep",
            msg: e.to_string(),
        })
    }
}
