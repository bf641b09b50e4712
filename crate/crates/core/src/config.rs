//! Run configuration documents, layered as defaults < file < overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::taxonomy::{build_schedule, ClassId, IncrementalSchedule, Preset, Protocol};
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub preset: Preset,
    /// Class ids per step; read only when `preset` is custom.
    pub steps: Option<Vec<Vec<ClassId>>>,
    pub protocol: Protocol,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Custom,
            steps: Some(vec![vec![1, 2, 3], vec![4, 5]]),
            protocol: Protocol::Disjoint,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<IncrementalSchedule> {
        let steps = (self.preset == Preset::Custom).then(|| self.steps.clone()).flatten();
        build_schedule(self.preset, steps)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_manifest: Option<PathBuf>,
    pub val_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub output: PathBuf,
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    /// Dense training of the first step.
    pub base: TrainConfig,
    /// Weakly supervised training of later steps.
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("runs"),
            data: DataConfig::default(),
            schedule: ScheduleConfig::default(),
            base: TrainConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Parses `value` as a TOML value, falling back to a bare string.
fn parse_value(value: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {value}")) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(value.to_string()),
    }
}

/// Sets `dotted.key = value` inside `table`, creating tables on the way.
pub fn apply_override(table: &mut Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut node = table;
    for part in &path[..path.len() - 1] {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    node.insert(path[path.len() - 1].to_string(), parse_value(value.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults, then the optional file, then each `key=value` override.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                toml::from_str::<Table>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.build()?;
        self.base.validate()?;
        self.train.validate()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loc_prior::PriorVariant;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert_eq!(cfg.train.batch_size, 24);
        assert_eq!(cfg.train.base_lr, 0.001);
    }

    #[test]
    fn layering_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[train]\nalpha = 0.25\nepochs = 12\n").unwrap();
        let cfg = RunConfig::resolve(
            Some(&path),
            &["train.epochs=7".into(), "train.prior=none".into(), "schedule.protocol=\"overlap\"".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.alpha, 0.25);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.prior, PriorVariant::None);
        assert_eq!(cfg.schedule.protocol, Protocol::Overlap);
        assert_eq!(cfg.base, TrainConfig::default());
    }

    #[test]
    fn bad_documents_are_config_errors() {
        assert!(matches!(RunConfig::from_toml("[train]\nalhpa = 1\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::resolve(None, &["train.alpha=2".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::resolve(None, &["novalue".into()]), Err(Error::Config(_))));
        let voc = RunConfig::resolve(None, &["schedule.preset=voc-15-5".into()]).unwrap();
        assert_eq!(voc.schedule.build().unwrap().new_classes(1).unwrap(), &[16, 17, 18, 19, 20]);
    }
}
