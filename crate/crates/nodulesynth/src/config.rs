//! Run configuration: one JSON document with a section per component, plus
//! `key.path=value` overrides from the command line.

use std::path::{Path, PathBuf};

use nodulesynth_core::detector::{DetectorTrainConfig, HeatmapDetectorConfig};
use nodulesynth_core::hem::HemConfig;
use nodulesynth_core::phantom::PhantomConfig;
use nodulesynth_core::shape_gan::ShapeGanConfig;
use nodulesynth_core::texture_gan::TextureGanConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{ConfigError, Error, Result};
use crate::io::read_bytes;

/// Environment variable naming the cache directory for extractor weights.
pub const CACHE_ENV: &str = "NODULESYNTH_CACHE";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: PhantomConfig,
    pub shape_gan: ShapeGanConfig,
    pub texture_gan: TextureGanConfig,
    pub detector: HeatmapDetectorConfig,
    pub detector_train: DetectorTrainConfig,
    pub hem: HemConfig,
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies `overrides` in order and
    /// validates every section.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = match path {
            Some(p) => serde_json::from_slice(&read_bytes(p)?).map_err(|e| Error::format(p, e))?,
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg = Self::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_value(value: Value) -> std::result::Result<Self, ConfigError> {
        serde_path_to_error::deserialize(value).map_err(|e| {
            let key = e.path().to_string();
            ConfigError::new(key, e.into_inner())
        })
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        self.phantom
            .validate()
            .map_err(|e| ConfigError::new("phantom", e))?;
        self.shape_gan
            .validate()
            .map_err(|e| ConfigError::new("shape_gan", e))?;
        self.texture_gan
            .validate()
            .map_err(|e| ConfigError::new("texture_gan", e))?;
        if self.detector.downsample == 0 || self.detector.channels == 0 {
            return Err(ConfigError::new(
                "detector",
                "downsample and channels must be positive",
            ));
        }
        for (key, t) in [
            ("detector_train", &self.detector_train),
            ("hem.finetune", &self.hem.finetune),
        ] {
            if t.batch_size == 0 || !(t.lr > 0.0) {
                return Err(ConfigError::new(key, "batch_size and lr must be positive"));
            }
        }
        Ok(())
    }
}

/// Sets the value at a dotted key path. The right-hand side is parsed as JSON
/// and falls back to a plain string.
pub fn apply_override(root: &mut Value, assignment: &str) -> std::result::Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::new(assignment, "override must look like key.path=value"))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::new(key, "empty key segment"));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let Value::Object(map) = node else {
            return Err(ConfigError::new(parts[..i].join("."), "not an object"));
        };
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("key has at least one segment")
}

/// Cache directory: `$NODULESYNTH_CACHE`, else `.nodulesynth-cache` under the
/// working directory.
pub fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".nodulesynth-cache"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn override_nested_key() {
        let cfg = RunConfig::load(
            None,
            &["shape_gan.epochs=3".into(), "phantom.seed=11".into()],
        )
        .unwrap();
        assert_eq!(cfg.shape_gan.epochs, 3);
        assert_eq!(cfg.phantom.seed, 11);
    }

    #[test]
    fn type_error_names_key_path() {
        let err = RunConfig::load(None, &["texture_gan.weights.perc=\"high\"".into()]).unwrap_err();
        match err {
            Error::Config(c) => assert_eq!(c.key_path, "texture_gan.weights.perc"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_rejected() {
        let err =
            RunConfig::from_value(serde_json::json!({"detector": {"chanels": 4}})).unwrap_err();
        assert_eq!(err.key_path, "detector.chanels");
    }

    #[test]
    fn invalid_section_reported() {
        let err = RunConfig::load(None, &["shape_gan.batch_size=0".into()]).unwrap_err();
        assert!(
            matches!(err, Error::Config(ref c) if c.key_path == "shape_gan"),
            "{err}"
        );
    }
}
