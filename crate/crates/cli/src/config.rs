//! TOML run configuration. A file only needs the keys it changes; everything else keeps its
//! default, and unknown keys are rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use glyphforge_core::experiment::ExperimentConfig;
use serde::{Deserialize, Serialize};

pub const DATA_ENV: &str = "GLYPHFORGE_DATA";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset root holding `manifest.json`.
    pub data_root: PathBuf,
    /// Synthetic-oracle groups written by `gen-data`, one per stage-2 condition up to this count.
    pub synthetic_groups: usize,
    pub synthetic_error_rate: f64,
    pub experiment: ExperimentConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_root: PathBuf::from("data"),
            synthetic_groups: 50,
            synthetic_error_rate: 0.3,
            experiment: ExperimentConfig::default(),
        }
    }
}

fn merge(base: &mut toml::Value, patch: toml::Value, path: &str) -> Result<()> {
    match (base, patch) {
        (toml::Value::Table(b), toml::Value::Table(p)) => {
            for (k, v) in p {
                let key = if path.is_empty() {
                    k.clone()
                } else {
                    format!("{path}.{k}")
                };
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => bail!("unknown config key `{key}`"),
                }
            }
        }
        (slot, v) => *slot = v,
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let patch: toml::Value = toml::from_str(text).context("parsing config")?;
        let mut base =
            toml::Value::try_from(RunConfig::default()).context("serializing defaults")?;
        merge(&mut base, patch, "")?;
        let cfg: RunConfig = base.try_into().context("config values")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading {}", p.display()))?;
                RunConfig::from_toml_str(&text).with_context(|| format!("in {}", p.display()))
            }
            None => Ok(RunConfig::default()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        e.model.validate()?;
        e.hyper.validate()?;
        e.sample.validate()?;
        if !(0.0..=1.0).contains(&self.synthetic_error_rate)
            || !(0.0..=1.0).contains(&e.stage1_error_rate)
        {
            bail!("error rates must lie in [0, 1]");
        }
        Ok(())
    }

    /// Dataset root: an explicit flag wins, then `GLYPHFORGE_DATA`, then the config value.
    pub fn data_root(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        match std::env::var_os(DATA_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.data_root.clone(),
        }
    }
}
