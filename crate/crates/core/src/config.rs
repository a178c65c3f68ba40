//! JSON run configuration for training.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{load_directory, synth_roads, SamplePair};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Where the samples come from: tile directories (each holding `images/`
/// and `masks/`) or freshly generated synthetic scenes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub val: Option<PathBuf>,
    pub synthetic: Option<SyntheticData>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub count: usize,
    pub size: usize,
    #[serde(default)]
    pub val_count: usize,
}

/// Everything a training run needs besides the output directory.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Mandatory for training; drives initialization, shuffling and
    /// synthetic data.
    pub seed: Option<u64>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl RunConfig {
    /// Parses `text`, reporting every unknown key at once.
    pub fn from_json(text: &str) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| Error::config(format!("invalid JSON: {e}")))?;
        let mut unknown = Vec::new();
        loop {
            match serde_path_to_error::deserialize::<_, RunConfig>(&value) {
                Ok(cfg) if unknown.is_empty() => return Ok(cfg),
                Ok(_) => return Err(Error::config(format!("unknown keys: {}", unknown.join(", ")))),
                Err(e) => {
                    let path = e.path().to_string();
                    let message = e.inner().to_string();
                    let Some(key) = unknown_field(&message) else {
                        let mut report = format!("{path}: {message}");
                        if !unknown.is_empty() {
                            report.push_str(&format!("; unknown keys: {}", unknown.join(", ")));
                        }
                        return Err(Error::config(report));
                    };
                    let parent = parent_segments(&path, &key);
                    if !remove_key(&mut value, &parent, &key) {
                        return Err(Error::config(format!("{path}: {message}")));
                    }
                    unknown.push(parent.iter().chain(std::iter::once(&key)).cloned().collect::<Vec<_>>().join("."));
                }
            }
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(base) = path.parent() {
            cfg.data.resolve(base);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()
    }

    /// The seed, which training cannot run without.
    pub fn require_seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| Error::config("seed: required for training"))
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        match (&self.train, &self.synthetic) {
            (Some(_), Some(_)) => Err(Error::config("data: give either train or synthetic, not both")),
            (None, None) => Err(Error::config("data: one of train or synthetic is required")),
            (None, Some(_)) if self.val.is_some() => Err(Error::config("data.val: only used with data.train")),
            (None, Some(s)) if s.count == 0 => Err(Error::config("data.synthetic.count: must be positive")),
            _ => Ok(()),
        }
    }

    /// Makes relative directories relative to `base`.
    pub fn resolve(&mut self, base: &Path) {
        for dir in [&mut self.train, &mut self.val].into_iter().flatten() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
    }

    /// Training and validation samples.
    pub fn load(&self, seed: u64) -> Result<(Vec<SamplePair>, Vec<SamplePair>)> {
        self.validate()?;
        if let Some(s) = &self.synthetic {
            let mut all = synth_roads(s.count + s.val_count, s.size, seed)?;
            let val = all.split_off(s.count);
            return Ok((all, val));
        }
        let train = load_directory(self.train.as_deref().expect("validated"))?;
        let val = match &self.val {
            Some(dir) => load_directory(dir)?,
            None => Vec::new(),
        };
        Ok((train, val))
    }
}

/// The key named by serde's "unknown field `x`" message.
fn unknown_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

/// Path segments of the object holding `key`. The reported path ends at the
/// key itself unless the error surfaced inside buffered content, where it
/// ends at the enclosing object.
fn parent_segments(path: &str, key: &str) -> Vec<String> {
    let mut segments: Vec<String> = if path == "." {
        Vec::new()
    } else {
        path.split('.').map(str::to_string).collect()
    };
    if segments.last().map(String::as_str) == Some(key) {
        segments.pop();
    }
    segments
}

fn remove_key(value: &mut Value, parent: &[String], key: &str) -> bool {
    let mut at = value;
    for segment in parent {
        at = match at {
            Value::Object(map) => match map.get_mut(segment) {
                Some(v) => v,
                None => return false,
            },
            _ => return false,
        };
    }
    match at {
        Value::Object(map) => map.remove(key).is_some(),
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::PyramidConfig;

    #[test]
    fn empty_object_gives_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.train.epochs, 300);
        assert!(matches!(cfg.require_seed(), Err(Error::Config(_))));
    }

    #[test]
    fn round_trips_through_json() {
        let mut cfg = RunConfig {
            seed: Some(42),
            model: ModelConfig::toy().with_aspp_pyramid(),
            ..RunConfig::default()
        };
        cfg.data.synthetic = Some(SyntheticData {
            count: 16,
            size: 64,
            val_count: 0,
        });
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }

    #[test]
    fn pyramid_is_selected_by_kind() {
        let cfg = RunConfig::from_json(r#"{"model": {"pyramid": {"kind": "aspp", "dilation_rates": [1, 2]}}}"#).unwrap();
        let PyramidConfig::Aspp(a) = &cfg.model.pyramid else { panic!("expected aspp") };
        assert_eq!(a.dilation_rates, vec![1, 2]);
    }

    #[test]
    fn every_unknown_key_is_reported() {
        let text = r#"{
            "seed": 1,
            "colour": "red",
            "train": {"epochs": 3, "learning_rate": 0.1},
            "model": {"pyramid": {"kind": "dense", "growth": 8}}
        }"#;
        let Err(Error::Config(msg)) = RunConfig::from_json(text) else { panic!("expected a config error") };
        for key in ["colour", "train.learning_rate", "model.pyramid.growth"] {
            assert!(msg.contains(key), "{key} missing from {msg}");
        }
    }

    #[test]
    fn type_errors_name_the_path() {
        let Err(Error::Config(msg)) = RunConfig::from_json(r#"{"train": {"epochs": "many"}}"#) else {
            panic!("expected a config error")
        };
        assert!(msg.starts_with("train.epochs"), "{msg}");
    }

    #[test]
    fn data_source_rules() {
        let mut d = DataConfig::default();
        assert!(d.validate().is_err());
        d.synthetic = Some(SyntheticData {
            count: 2,
            size: 32,
            val_count: 1,
        });
        let (train, val) = d.load(0).unwrap();
        assert_eq!((train.len(), val.len()), (2, 1));
        d.train = Some("tiles".into());
        assert!(d.validate().is_err());
    }

    #[test]
    fn relative_directories_follow_the_config_file() {
        let mut d = DataConfig {
            train: Some("tiles/train".into()),
            val: Some("/abs/test".into()),
            synthetic: None,
        };
        d.resolve(Path::new("/runs"));
        assert_eq!(d.train.unwrap(), Path::new("/runs/tiles/train"));
        assert_eq!(d.val.unwrap(), Path::new("/abs/test"));
    }
}
