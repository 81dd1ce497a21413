//! Experiment configuration: one TOML file, strict about unknown keys.

use std::path::{Path, PathBuf};

use cotasim_core::cache::CachePolicy;
use cotasim_core::cota::CotaConfig;
use cotasim_core::decoder::{DecodeConfig, Decoder, InputSequence, Retention};
use cotasim_core::model::{
    build_sticky_script, AnyModel, Backend, ModelConfig, Script, ScriptedModel, ToyModel,
};
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub n_samples: usize,
    pub prefix_length: usize,
    pub response_length: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_samples: 16,
            prefix_length: 16,
            response_length: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Relative paths are resolved under `COTASIM_OUTPUT_ROOT` when it is set.
    pub dir: PathBuf,
    /// Rate used to turn FLOP counts into the modeled `tps` column.
    pub nominal_flops_per_second: f64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            nominal_flops_per_second: 1e9,
        }
    }
}

/// Where a scripted backend gets its script.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScriptConfig {
    /// Built-in fixture name (`sticky`), ignored when `path` is set.
    pub fixture: String,
    pub path: Option<PathBuf>,
    pub repeat_token: u32,
    pub trigger_staleness: usize,
}

impl Default for ScriptConfig {
    fn default() -> Self {
        Self {
            fixture: "sticky".into(),
            path: None,
            repeat_token: 7,
            trigger_staleness: 4,
        }
    }
}

impl ScriptConfig {
    pub fn load(&self, base: Option<&Path>) -> Result<Script, HarnessError> {
        if let Some(path) = &self.path {
            let path = match base {
                Some(b) if path.is_relative() => b.join(path),
                _ => path.clone(),
            };
            let text = std::fs::read_to_string(&path).map_err(|e| HarnessError::io(&path, e))?;
            return toml::from_str(&text)
                .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())));
        }
        match self.fixture.as_str() {
            "sticky" => Ok(build_sticky_script(
                self.repeat_token,
                self.trigger_staleness,
            )),
            other => Err(HarnessError::Config(format!("unknown fixture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    /// Dotted config key, e.g. `cache.suffix_interval`.
    pub key: String,
    pub values: Vec<toml::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub max_points: usize,
    pub axes: Vec<SweepAxis>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            max_points: 256,
            axes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub script: ScriptConfig,
    pub decode: DecodeConfig,
    pub cache: CachePolicy,
    pub cota: CotaConfig,
    pub corpus: CorpusConfig,
    pub output: OutputConfig,
    pub retention: Retention,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Applies `key = value` overrides given as dotted keys. Values are
    /// parsed as TOML and fall back to plain strings.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, HarnessError> {
        let mut doc =
            toml::Value::try_from(self).map_err(|e| HarnessError::Config(e.to_string()))?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item.split_once('=').ok_or_else(|| {
                HarnessError::Config(format!("override {item:?} is not key=value"))
            })?;
            set_dotted(&mut doc, key.trim(), parse_value(raw.trim()))?;
        }
        from_value(doc)
    }

    /// Rejects anything the decoder or model would reject, before decoding.
    /// `base` resolves a relative script path.
    pub fn validate(&self, base: Option<&Path>) -> Result<(), HarnessError> {
        self.model.validate()?;
        let c = &self.corpus;
        let len = c.prefix_length + c.response_length;
        if len > self.model.max_seq_len {
            return Err(HarnessError::Config(format!(
                "prefix {} + response {} exceeds max_seq_len {}",
                c.prefix_length, c.response_length, self.model.max_seq_len
            )));
        }
        let nominal = self.output.nominal_flops_per_second;
        if nominal.is_nan() || nominal <= 0.0 {
            return Err(HarnessError::Config(
                "nominal_flops_per_second must be > 0".into(),
            ));
        }
        let model = self.build_model(base)?;
        let input = InputSequence {
            prefix: vec![0; c.prefix_length],
            response_len: c.response_length,
        };
        Decoder::new(&model, self.decode.clone())
            .with_cota(Some(self.cota.clone()))
            .with_cache(Some(self.cache.clone()))
            .validate(&input)?;
        Ok(())
    }

    /// `base` resolves a relative script path.
    pub fn build_model(&self, base: Option<&Path>) -> Result<AnyModel, HarnessError> {
        Ok(match self.model.backend {
            Backend::Toy => AnyModel::Toy(ToyModel::new(self.model.clone())?),
            Backend::Scripted => AnyModel::Scripted(ScriptedModel::new(
                self.model.clone(),
                self.script.load(base)?,
            )?),
        })
    }

    /// Output directory after applying `COTASIM_OUTPUT_ROOT`.
    pub fn output_dir(&self) -> PathBuf {
        match std::env::var_os("COTASIM_OUTPUT_ROOT") {
            Some(root) if self.output.dir.is_relative() => {
                PathBuf::from(root).join(&self.output.dir)
            }
            _ => self.output.dir.clone(),
        }
    }
}

pub(crate) fn from_value(doc: toml::Value) -> Result<ExperimentConfig, HarnessError> {
    doc.try_into()
        .map_err(|e: toml::de::Error| HarnessError::Config(e.to_string()))
}

pub(crate) fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets a dotted key, creating intermediate tables. Whether the key names
/// a real field is decided when the document is deserialized again.
pub(crate) fn set_dotted(
    doc: &mut toml::Value,
    key: &str,
    value: toml::Value,
) -> Result<(), HarnessError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(HarnessError::Config(format!("malformed key {key:?}")));
    }
    let mut cur = doc;
    for part in &parts[..parts.len() - 1] {
        let table = cur
            .as_table_mut()
            .ok_or_else(|| HarnessError::Config(format!("{key:?}: {part} is not a table")))?;
        cur = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| HarnessError::Config(format!("{key:?} does not name a field")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
