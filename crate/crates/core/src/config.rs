//! The experiment configuration file.
//!
//! One TOML document with sections `data`, `mapping`, `arch`, `estimators`,
//! `trainer` and `eval`. Every key has a default and unknown keys are
//! rejected. Dotted `key=value` overrides are applied before parsing, so a
//! command-line flag and a config key always mean the same thing.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::EstimatorConfig;
use crate::eval::{Alignment, TaskNetConfig};
use crate::labels::LabelMapping;
use crate::nets::ArchConfig;
use crate::scene::{SceneConfig, TargetStyle};
use crate::train::TrainerConfig;

/// File name of the resolved config echoed into every output directory.
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const VERSION_FILE: &str = "VERSION";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Annotated dataset with source-domain images.
    pub source: Option<PathBuf>,
    /// Dataset whose target-domain images are the unpaired target set.
    pub target: Option<PathBuf>,
    pub scene: SceneConfig,
    pub style: TargetStyle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MappingConfig {
    /// Built-in mapping name or path to a mapping file.
    pub name: String,
}

impl Default for MappingConfig {
    fn default() -> Self {
        MappingConfig { name: "toy-source->toy-target".into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorsConfig {
    pub semseg: Option<PathBuf>,
    pub disparity: Option<PathBuf>,
    pub instance: Option<PathBuf>,
    /// Settings used by `pretrain-estimator`.
    pub pretrain: EstimatorConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub task: TaskNetConfig,
    pub alignment: Alignment,
    pub max_depth_m: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { task: TaskNetConfig::default(), alignment: Alignment::Median, max_depth_m: 80.0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub mapping: MappingConfig,
    pub arch: ArchConfig,
    pub estimators: EstimatorsConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Parse TOML text after applying `overrides` (`section.key=value`).
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: ExperimentConfig = doc.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from a file, or start from defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides).map_err(|e| match (e, path) {
            (Error::Config(m), Some(p)) => Error::Config(format!("{}: {m}", p.display())),
            (e, _) => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.mapping()?;
        self.data.scene.validate()?;
        self.data.style.validate()?;
        self.arch.validate()?;
        self.estimators.pretrain.validate()?;
        self.trainer.validate()?;
        let t = &self.eval.task;
        if t.width == 0 || t.batch_size == 0 || !(t.lr > 0.0) {
            return Err(Error::Config("eval.task: width, batch_size and lr must be positive".into()));
        }
        if !(self.eval.max_depth_m > 0.0) {
            return Err(Error::Config("eval.max_depth_m must be positive".into()));
        }
        Ok(())
    }

    pub fn mapping(&self) -> Result<LabelMapping> {
        LabelMapping::load(&self.mapping.name)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Write the resolved config and the tool version into `dir`.
    pub fn echo_into(&self, dir: &Path, version: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(RESOLVED_CONFIG);
        std::fs::write(&p, self.to_toml()).map_err(|e| Error::io(&p, e))?;
        let v = dir.join(VERSION_FILE);
        std::fs::write(&v, format!("{version}\n")).map_err(|e| Error::io(&v, e))
    }
}

fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    // Values parse as TOML; anything that does not is taken as a bare string.
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut table = doc;
    for p in &parts[..parts.len() - 1] {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("", &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn resolved_config_round_trips() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&c.to_toml(), &[]).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = ExperimentConfig::from_toml("[trainer]\nstepz = 3\n", &[]).unwrap_err().to_string();
        assert!(e.contains("stepz"), "{e}");
    }

    #[test]
    fn overrides_set_nested_keys() {
        let c = ExperimentConfig::from_toml("", &["trainer.steps=7".into(), "trainer.model=unit".into()]).unwrap();
        assert_eq!(c.trainer.steps, 7);
        assert_eq!(c.trainer.model, crate::train::ModelKind::Unit);
    }
}
