//! Layered configuration: command-line flags over a JSON config file over
//! built-in defaults, with the source of every field recorded.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Checkpoint,
    Flag,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Checkpoint => "checkpoint",
            Source::Flag => "flag",
        })
    }
}

#[derive(Clone, Debug)]
pub struct Layered<T> {
    pub value: T,
    pub sources: BTreeMap<String, Source>,
}

impl<T: Serialize + DeserializeOwned> Layered<T> {
    pub fn new(base: &T, source: Source) -> Result<Self> {
        let value = serde_json::to_value(base)?;
        let sources = object(&value)?.keys().map(|k| (k.clone(), source)).collect();
        Ok(Layered {
            value: serde_json::from_value(value)?,
            sources,
        })
    }

    /// Overlays the fields present in `layer`. Unknown fields are rejected by
    /// the target type.
    pub fn overlay(&mut self, layer: &Map<String, Value>, source: Source, what: &str) -> Result<()> {
        if layer.is_empty() {
            return Ok(());
        }
        let mut merged = serde_json::to_value(&self.value)?;
        let obj = merged.as_object_mut().expect("config serializes to an object");
        for (k, v) in layer {
            obj.insert(k.clone(), v.clone());
            self.sources.insert(k.clone(), source);
        }
        self.value = serde_json::from_value(merged).with_context(|| format!("invalid {}", what))?;
        Ok(())
    }

    /// One `section.field = value [source]` line per field.
    pub fn describe(&self, section: &str) -> Vec<String> {
        let value = serde_json::to_value(&self.value).expect("serializable config");
        let obj = value.as_object().expect("object");
        obj.iter()
            .map(|(k, v)| format!("  {}.{} = {} [{}]", section, k, v, self.sources.get(k).copied().unwrap_or(Source::Default)))
            .collect()
    }
}

fn object(v: &Value) -> Result<&Map<String, Value>> {
    v.as_object().context("config section must be a JSON object")
}

/// Sections of a config file: `{"model": {...}, "train": {...}}`.
#[derive(Debug, Default)]
pub struct ConfigFile {
    pub model: Map<String, Value>,
    pub train: Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(ConfigFile::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let value: Value =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let mut out = ConfigFile::default();
        for (k, v) in object(&value)? {
            match k.as_str() {
                "model" => out.model = object(v)?.clone(),
                "train" => out.train = object(v)?.clone(),
                other => bail!("{}: unknown config section '{}' (expected model, train)", path.display(), other),
            }
        }
        Ok(out)
    }
}

/// Collects the flags that were actually given into a JSON object.
#[derive(Default)]
pub struct FlagLayer(pub Map<String, Value>);

impl FlagLayer {
    pub fn set<V: Serialize>(&mut self, key: &str, v: Option<V>) -> &mut Self {
        if let Some(v) = v {
            self.0.insert(key.to_string(), serde_json::to_value(v).expect("serializable flag"));
        }
        self
    }
}
