//! Flat `section.key = value` run configuration covering the model, pretraining
//! and fine-tuning options.

use std::collections::BTreeSet;

use blocklm::model::{ModelConfig, MODEL_CONFIG_KEYS};
use blocklm::training::{FinetuneConfig, PretrainConfig};

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    explicit: BTreeSet<String>,
}

/// Every accepted key in the order the effective config is written.
pub fn all_keys() -> Vec<String> {
    let mut keys = Vec::new();
    keys.extend(MODEL_CONFIG_KEYS.iter().map(|k| format!("model.{k}")));
    keys.extend(PretrainConfig::KEYS.iter().map(|k| format!("pretrain.{k}")));
    keys.extend(FinetuneConfig::KEYS.iter().map(|k| format!("finetune.{k}")));
    keys
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let (section, name) = key.split_once('.').ok_or_else(|| format!("unknown config key `{key}`"))?;
        match section {
            "model" if MODEL_CONFIG_KEYS.contains(&name) => self.model.set(name, value)?,
            "pretrain" if PretrainConfig::KEYS.contains(&name) => self.pretrain.set(name, value)?,
            "finetune" if FinetuneConfig::KEYS.contains(&name) => self.finetune.set(name, value)?,
            _ => return Err(format!("unknown config key `{key}`")),
        }
        self.explicit.insert(key.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let (section, name) = key.split_once('.')?;
        match section {
            "model" => self.model.get(name),
            "pretrain" => self.pretrain.get(name),
            "finetune" => self.finetune.get(name),
            _ => None,
        }
    }

    /// Whether `key` was set by the config file or a flag rather than left at
    /// its default.
    pub fn is_explicit(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Applies `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| format!("line {}: expected `key = value`", i + 1))?;
            self.set(k.trim(), v.trim()).map_err(|e| format!("line {}: {e}", i + 1))?;
        }
        Ok(())
    }

    /// Overwrites every model key not set explicitly with `base`'s value.
    pub fn inherit_model(&mut self, base: &ModelConfig) {
        for k in MODEL_CONFIG_KEYS {
            if !self.is_explicit(&format!("model.{k}")) {
                let v = base.get(k).expect("known key");
                self.model.set(k, &v).expect("value read from a config");
            }
        }
    }

    /// All keys with their effective values, one `key = value` per line.
    pub fn to_text(&self) -> String {
        all_keys()
            .iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }
}
