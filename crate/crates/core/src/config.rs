//! Training configuration: one TOML or JSON file plus environment overrides.
//!
//! Any key can be overridden with `FOGFLOW_<PATH>`, where `__` separates
//! nested keys: `FOGFLOW_OPTIMIZER__LR=1e-4`, `FOGFLOW_DATA__TOY__PAIRS=8`.
//! Values are parsed as JSON when possible (numbers, booleans, arrays) and
//! taken as strings otherwise.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::datapipe::{Stage, DEFAULT_BATCH_SIZE, DEFAULT_CROP};
use crate::error::{Error, Result};
use crate::fogphys::{FogRanges, DEFAULT_ATMO_PATCH};
use crate::losses::{LossWeights, DEFAULT_MASK_TAU};
use crate::nets::NetConfig;

pub const ENV_PREFIX: &str = "FOGFLOW_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    /// Total steps (one stage batch each). There is no default; `train` needs it.
    pub steps: Option<u64>,
    pub batch_size: usize,
    /// Training crop `[height, width]`; `None` trains on whole frames.
    pub crop: Option<[usize; 2]>,
    /// Stages taking part in the cycle.
    pub stages: Vec<Stage>,
    pub net: NetConfig,
    pub optimizer: AdamConfig,
    pub loss_weights: LossWeights,
    pub fog: FogRanges,
    pub mask: MaskConfig,
    pub ablation: AblationConfig,
    /// Adds the per-level terms to the supervised EPE.
    pub multiscale_epe: bool,
    /// Side of the brightest-patch window for the atmospheric chromaticity.
    pub atmo_patch: usize,
    pub data: DataConfig,
    pub checkpoint: CheckpointConfig,
    /// Loss log CSV, one line per step.
    pub loss_log: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: None,
            batch_size: DEFAULT_BATCH_SIZE,
            crop: Some([DEFAULT_CROP.0, DEFAULT_CROP.1]),
            stages: Stage::CYCLE.to_vec(),
            net: NetConfig::default(),
            optimizer: AdamConfig::default(),
            loss_weights: LossWeights::default(),
            fog: FogRanges::default(),
            mask: MaskConfig::default(),
            ablation: AblationConfig::default(),
            multiscale_epe: true,
            atmo_patch: DEFAULT_ATMO_PATCH,
            data: DataConfig::default(),
            checkpoint: CheckpointConfig::default(),
            loss_log: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub tau: f64,
    /// Gate the cross-domain EPE of the real-clean stage.
    pub real_clean: bool,
    /// Gate the flow-consistency loss of the real-fog stage.
    pub real_fog: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_MASK_TAU,
            real_clean: true,
            real_fog: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub hazeline: bool,
    /// With `false` the domain transformation is removed: only the flow
    /// path trains, on synthetic data.
    pub transform: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            hazeline: true,
            transform: true,
        }
    }
}

/// Where the three datasets come from: manifests, or procedural toy scenes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: Option<PathBuf>,
    pub real_clean: Option<PathBuf>,
    pub real_fog: Option<PathBuf>,
    pub toy: Option<ToyDataConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDataConfig {
    pub synthetic: usize,
    pub real_clean: usize,
    pub real_fog: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for ToyDataConfig {
    fn default() -> Self {
        Self {
            synthetic: 4,
            real_clean: 2,
            real_fog: 2,
            height: 128,
            width: 256,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointConfig {
    pub dir: Option<PathBuf>,
    pub every: u64,
    pub keep: usize,
}

impl Default for CheckpointConfig {
    fn default() -> Self {
        Self {
            dir: None,
            every: 1000,
            keep: 3,
        }
    }
}

impl TrainConfig {
    /// Reads a `.toml` or `.json` file and applies `FOGFLOW_*` overrides
    /// from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let value = if is_json {
            serde_json::from_str::<Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            let t: toml::Value = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::to_value(t).map_err(|e| Error::Config(e.to_string()))?
        };
        let mut config = Self::from_value(value, std::env::vars())?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    /// Builds a config from a parsed document and `(key, value)` environment pairs.
    pub fn from_value(mut value: Value, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        if !value.is_object() {
            return Err(Error::Config("configuration root must be a table".into()));
        }
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.starts_with(ENV_PREFIX) && k.len() > ENV_PREFIX.len())
            .collect();
        overrides.sort();
        for (key, raw) in overrides {
            let path: Vec<String> = key[ENV_PREFIX.len()..]
                .split("__")
                .map(|s| s.to_ascii_lowercase())
                .collect();
            let parsed = serde_json::from_str::<Value>(&raw).unwrap_or(Value::String(raw));
            set_path(&mut value, &path, parsed).map_err(|e| Error::Config(format!("{key}: {e}")))?;
        }
        let config: Self = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        fix(&mut self.data.synthetic);
        fix(&mut self.data.real_clean);
        fix(&mut self.data.real_fog);
        fix(&mut self.checkpoint.dir);
        fix(&mut self.loss_log);
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if let Some([h, w]) = self.crop {
            if h == 0 || w == 0 || h % 64 != 0 || w % 64 != 0 {
                return bad(format!("crop {h}x{w} must be positive multiples of 64"));
            }
        }
        if self.stages.is_empty() {
            return bad("at least one stage must be enabled".into());
        }
        if !self.ablation.transform && self.stages.iter().any(|s| *s != Stage::Synthetic) {
            return bad("without the transformation module only the synthetic stage can run".into());
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0) {
            return bad(format!("invalid optimizer settings {o:?}"));
        }
        if !(self.mask.tau > 0.0 && self.mask.tau.is_finite()) {
            return bad(format!("mask tau must be positive, got {}", self.mask.tau));
        }
        if self.atmo_patch == 0 {
            return bad("atmo_patch must be positive".into());
        }
        if self.checkpoint.every == 0 || self.checkpoint.keep == 0 {
            return bad("checkpoint cadence and retention must be positive".into());
        }
        self.loss_weights.validate().or_else(|e| bad(e.to_string()))?;
        self.fog.validate().or_else(|e| bad(e.to_string()))?;
        self.net.validate().or_else(|e| bad(e.to_string()))?;
        Ok(())
    }
}

fn set_path(root: &mut Value, path: &[String], value: Value) -> std::result::Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut node = root;
    for key in parents {
        let obj = node.as_object_mut().ok_or_else(|| format!("`{key}` is not inside a table"))?;
        node = obj.entry(key.clone()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node.as_object_mut().ok_or_else(|| format!("`{last}` is not inside a table"))?;
    obj.insert(last.clone(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_training_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.batch_size, 3);
        assert_eq!(c.crop, Some([256, 512]));
        assert_eq!((c.optimizer.lr, c.optimizer.beta1, c.optimizer.beta2), (2e-4, 0.5, 0.999));
        assert_eq!(c.steps, None);
        c.validate().unwrap();
    }

    #[test]
    fn toml_with_env_overrides() {
        let doc: toml::Value = toml::from_str("seed = 3\n[optimizer]\nlr = 0.001\n[data.toy]\nsynthetic = 2\n").unwrap();
        let env = vec![
            ("FOGFLOW_OPTIMIZER__LR".to_string(), "0.01".to_string()),
            ("FOGFLOW_DATA__TOY__HEIGHT".to_string(), "64".to_string()),
            ("FOGFLOW_LOSS_LOG".to_string(), "/tmp/x.csv".to_string()),
            ("OTHER".to_string(), "1".to_string()),
        ];
        let c = TrainConfig::from_value(serde_json::to_value(doc).unwrap(), env).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.optimizer.lr, 0.01);
        let toy = c.data.toy.unwrap();
        assert_eq!((toy.synthetic, toy.height, toy.width), (2, 64, 256));
        assert_eq!(c.loss_log, Some(PathBuf::from("/tmp/x.csv")));
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let v = serde_json::json!({ "sed": 1 });
        assert!(matches!(TrainConfig::from_value(v, vec![]), Err(Error::Config(_))));
        let v = serde_json::json!({ "batch_size": 0 });
        assert!(matches!(TrainConfig::from_value(v, vec![]), Err(Error::Config(_))));
        let v = serde_json::json!({ "ablation": { "transform": false } });
        assert!(TrainConfig::from_value(v, vec![]).is_err());
    }
}
