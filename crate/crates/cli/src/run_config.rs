//! Run configuration: dataset, input variant, model and training settings
//! in one JSON document. Relative paths resolve against the config file's
//! directory.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use mscrack_core::data::Variant;
use mscrack_core::model::ModelConfig;
use mscrack_core::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory written by `synth`.
    pub data: PathBuf,
    pub variant: Variant,
    /// Super-resolution checkpoint, required by the `PRGB_plus_PIRprime`
    /// variant.
    #[serde(default)]
    pub sr_model: Option<PathBuf>,
    /// Receives checkpoints and the metrics log.
    pub out: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

const TOP_KEYS: [&str; 6] = ["data", "variant", "sr_model", "out", "model", "train"];

fn field_names<T: Serialize + Default>() -> BTreeSet<String> {
    match serde_json::to_value(T::default()) {
        Ok(Value::Object(m)) => m.keys().cloned().collect(),
        _ => BTreeSet::new(),
    }
}

/// Every key in `doc` the schema does not know, as dotted paths.
pub fn unknown_keys(doc: &Value) -> Vec<String> {
    let mut bad = Vec::new();
    let Value::Object(top) = doc else {
        return vec!["<root is not an object>".into()];
    };
    for (k, v) in top {
        let known = match k.as_str() {
            "model" => Some(field_names::<ModelConfig>()),
            "train" => Some(field_names::<TrainConfig>()),
            other if TOP_KEYS.contains(&other) => None,
            _ => {
                bad.push(k.clone());
                continue;
            }
        };
        if let (Some(known), Value::Object(inner)) = (known, v) {
            bad.extend(
                inner
                    .keys()
                    .filter(|ik| !known.contains(*ik))
                    .map(|ik| format!("{k}.{ik}")),
            );
        }
    }
    bad
}

impl RunConfig {
    pub fn parse(text: &str, base: &Path) -> anyhow::Result<Self> {
        let doc: Value = serde_json::from_str(text).context("run config is not valid JSON")?;
        let bad = unknown_keys(&doc);
        if !bad.is_empty() {
            bail!("unknown run config keys: {}", bad.join(", "));
        }
        let mut cfg: RunConfig = serde_json::from_value(doc).context("run config does not match the schema")?;
        for p in [Some(&mut cfg.data), Some(&mut cfg.out), cfg.sr_model.as_mut()]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if let Some(dir) = cfg.train.checkpoint_dir.as_mut() {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("in {}", path.display()))
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate().map_err(|e| anyhow!("model: {e}"))?;
        self.train.validate().map_err(|e| anyhow!("train: {e}"))?;
        if self.model.in_channels != self.variant.channels() {
            bail!(
                "model.in_channels is {} but variant {} has {} channels",
                self.model.in_channels,
                self.variant,
                self.variant.channels()
            );
        }
        Ok(())
    }

    /// Training settings with checkpoints directed to `out` unless set.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            checkpoint_dir: Some(self.train.checkpoint_dir.clone().unwrap_or_else(|| self.out.clone())),
            ..self.train.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"{
        "data": "d", "variant": "P_RGB", "out": "runs/a",
        "model": {"in_channels": 3, "depths": [1, 1, 1, 1]},
        "train": {"iterations": 100, "warmup": 10}
    }"#;

    #[test]
    fn parses_and_resolves_paths() {
        let c = RunConfig::parse(GOOD, Path::new("/cfg")).unwrap();
        assert_eq!(c.data, Path::new("/cfg/d"));
        assert_eq!(c.train.iterations, 100);
        assert_eq!(c.train_config().checkpoint_dir.unwrap(), Path::new("/cfg/runs/a"));
    }

    #[test]
    fn lists_every_unknown_key() {
        let text = GOOD
            .replace("\"out\"", "\"colour\": 1, \"out\"")
            .replace("\"warmup\"", "\"lr_max\": 2, \"warmup\"");
        let err = format!("{:#}", RunConfig::parse(&text, Path::new(".")).unwrap_err());
        assert!(err.contains("colour") && err.contains("train.lr_max"), "{err}");
    }

    #[test]
    fn rejects_channel_mismatch_and_bad_values() {
        let text = GOOD.replace("\"P_RGB\"", "\"PRGB_plus_PIRprime\"");
        assert!(RunConfig::parse(&text, Path::new(".")).is_err());
        let text = GOOD.replace("\"warmup\": 10", "\"warmup\": 500");
        assert!(RunConfig::parse(&text, Path::new(".")).is_err());
    }
}
