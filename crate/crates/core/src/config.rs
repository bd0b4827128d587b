//! Hierarchical run configuration: defaults, then a TOML file, then `LSE_<SECTION>_<KEY>`
//! environment variables, then command-line overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::audio::{FrameConfig, MelConfig};
use crate::checkpoint::fingerprint;
use crate::data::CorpusConfig;
use crate::dcl::TrainConfig;
use crate::denoiser::DenoiserConfig;
use crate::diffusion::ScheduleConfig;
use crate::enhance::EnhanceConfig;
use crate::error::{Error, Result};
use crate::vae::{VaeConfig, VaeTrainConfig};

pub const ENV_PREFIX: &str = "LSE_";

/// Every module configuration, one section each.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub corpus: CorpusConfig,
    pub frame: FrameConfig,
    pub mel: MelConfig,
    pub vae: VaeConfig,
    pub vae_train: VaeTrainConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub enhance: EnhanceConfig,
}

impl CliConfig {
    /// Parses a TOML document on top of the defaults. Unknown keys are rejected.
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let mut tree = defaults_tree();
        let file: Value = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            detail: e.to_string(),
        })?;
        merge(&mut tree, file);
        from_tree(tree)
    }

    /// Resolves the full configuration: defaults, the optional file, environment
    /// variables with [`ENV_PREFIX`], then `overrides` as `(dotted.path, value)` pairs.
    pub fn resolve(
        file: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
        overrides: &[(String, String)],
    ) -> Result<Self> {
        let mut tree = defaults_tree();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let parsed: Value = toml::from_str(&text).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                detail: e.to_string(),
            })?;
            merge(&mut tree, parsed);
        }
        for (key, raw) in env {
            let Some(rest) = key.strip_prefix(ENV_PREFIX) else { continue };
            let tokens: Vec<String> = rest.split('_').map(str::to_ascii_lowercase).collect();
            let tokens: Vec<&str> = tokens.iter().map(String::as_str).collect();
            if !set_by_tokens(&mut tree, &tokens, parse_scalar(&raw)) {
                return Err(Error::Config(format!("{key} does not name a configuration key")));
            }
        }
        for (path, raw) in overrides {
            set_by_path(&mut tree, path, parse_scalar(raw))?;
        }
        from_tree(tree)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.frame.validate()?;
        self.vae.validate()?;
        self.denoiser.validate()?;
        self.train.validate()?;
        self.schedule.build()?;
        if self.denoiser.out_channels != self.vae.latent_channels {
            return Err(Error::Config(format!(
                "denoiser.out_channels {} differs from vae.latent_channels {}",
                self.denoiser.out_channels, self.vae.latent_channels
            )));
        }
        if self.enhance.steps == 0 || self.enhance.steps > self.schedule.steps {
            return Err(Error::Config(format!(
                "enhance.steps {} outside 1..={}",
                self.enhance.steps, self.schedule.steps
            )));
        }
        Ok(())
    }

    pub fn fingerprint(&self) -> String {
        fingerprint(self)
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// TOML rendering of the configuration; unset optional keys are omitted.
    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config renders as TOML")
    }
}

fn defaults_tree() -> Value {
    serde_json::to_value(CliConfig::default()).expect("defaults serialize")
}

fn from_tree(tree: Value) -> Result<CliConfig> {
    serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// A TOML scalar or array when `raw` parses as one, otherwise the raw string.
fn parse_scalar(raw: &str) -> Value {
    #[derive(Deserialize)]
    struct Holder {
        v: Value,
    }
    toml::from_str::<Holder>(&format!("v = {raw}"))
        .map(|h| h.v)
        .unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Walks `tokens` (underscore-separated pieces) through nested objects, trying every
/// way of regrouping them into existing keys.
fn set_by_tokens(node: &mut Value, tokens: &[&str], value: Value) -> bool {
    let Value::Object(map) = node else { return false };
    for i in 1..=tokens.len() {
        let key = tokens[..i].join("_");
        if !map.contains_key(&key) {
            continue;
        }
        if i == tokens.len() {
            map.insert(key, value);
            return true;
        }
        if set_by_tokens(map.get_mut(&key).expect("key present"), &tokens[i..], value.clone()) {
            return true;
        }
    }
    false
}

fn set_by_path(tree: &mut Value, path: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let mut node = tree;
    for (i, part) in parts.iter().enumerate() {
        let Value::Object(map) = node else {
            return Err(Error::Config(format!("{path}: {} is not a section", parts[..i].join("."))));
        };
        if !map.contains_key(*part) {
            return Err(Error::Config(format!("{path} does not name a configuration key")));
        }
        if i + 1 == parts.len() {
            map.insert(part.to_string(), value);
            return Ok(());
        }
        node = map.get_mut(*part).expect("key present");
    }
    Err(Error::Config("empty configuration path".into()))
}
