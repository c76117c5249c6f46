//! Run configuration: a JSON document with one section per module, adjusted
//! by `--override key=value` flags.

use std::fs;
use std::path::{Path, PathBuf};

use msad_core::data::SyntheticSpec;
use msad_core::gradcam::DEFAULT_TAP;
use msad_core::train::TrainConfig;
use msad_core::ModelConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory; the synthetic generator is used when absent.
    pub root: Option<PathBuf>,
    /// Partition scored by `eval`: train, valid, test or all.
    pub eval_split: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: None,
            eval_split: "test".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcamConfig {
    pub tap: String,
    pub alpha: f64,
    /// Target class; the predicted class when absent.
    pub class: Option<usize>,
}

impl Default for GradcamConfig {
    fn default() -> Self {
        Self {
            tap: DEFAULT_TAP.into(),
            alpha: 0.4,
            class: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossvalConfig {
    pub folds: usize,
}

impl Default for CrossvalConfig {
    fn default() -> Self {
        Self { folds: 5 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SyntheticSpec,
    pub data: DataConfig,
    pub crossval: CrossvalConfig,
    pub gradcam: GradcamConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::ConfigFile {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::ConfigFile {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })
    }

    /// Applies `key=value`. A dotted key names one field; a bare key sets the
    /// field of that name in every section that has one. Values are parsed
    /// as JSON, falling back to a plain string.
    pub fn apply_override(&mut self, spec: &str) -> CliResult<()> {
        let fail = |msg: String| CliError::Override(spec.to_string(), msg);
        let (key, raw) = spec.split_once('=').ok_or_else(|| fail("expected key=value".into()))?;
        let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self).map_err(|e| fail(e.to_string()))?;
        let sections = doc.as_object_mut().expect("config serializes to an object");
        if key.contains('.') {
            let mut parts = key.split('.');
            let mut slot = sections.get_mut(parts.next().unwrap_or_default());
            for part in parts {
                slot = slot.and_then(|v| v.as_object_mut()).and_then(|o| o.get_mut(part));
            }
            *slot.ok_or_else(|| fail(format!("unknown key `{key}`")))? = value;
        } else {
            let mut hits = 0;
            for section in sections.values_mut() {
                if let Some(field) = section.as_object_mut().and_then(|o| o.get_mut(key)) {
                    *field = value.clone();
                    hits += 1;
                }
            }
            if hits == 0 {
                return Err(fail(format!("no section has a field `{key}`")));
            }
        }
        *self = serde_json::from_value(doc).map_err(|e| fail(e.to_string()))?;
        Ok(())
    }

    /// Routes one seed to every consumer of randomness.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}
