//! One JSON document mirroring all module configs, with dotted-path
//! overrides. Unknown keys are rejected; the resolved document is what runs
//! persist next to their outputs.

use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::loss::LossConfig;
use crate::nets::{BottleneckConfig, ModelConfig};
use crate::trainer::TrainConfig;
use crate::warp::{mix_seed, WarpConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; module seeds are mixed with it (see [`RunConfig::effective`]).
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub bottleneck: BottleneckConfig,
    pub loss: LossConfig,
    pub warp: WarpConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Loads a (possibly partial) config file and applies `--set key=value`
    /// overrides, then validates the result.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<RunConfig> {
        let mut doc: serde_json::Value = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::invalid_config(format!("config {}: {e}", p.display())))?
            }
            None => serde_json::json!({}),
        };
        for s in sets {
            apply_set(&mut doc, s)?;
        }
        let cfg: RunConfig = serde_json::from_value(doc)
            .map_err(|e| Error::invalid_config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.warp.validate()?;
        self.train.validate()?;
        self.data.sprite.validate()?;
        if self.data.image_size != self.model.input_size {
            return Err(Error::invalid_config(format!(
                "data.image_size ({}) must match model.input_size ({})",
                self.data.image_size, self.model.input_size
            )));
        }
        Ok(())
    }

    /// The config actually used by a run: module seeds mixed with the master
    /// seed so one `--set seed=N` re-randomizes everything coherently.
    pub fn effective(&self) -> RunConfig {
        let mut out = self.clone();
        out.data.sprite.seed = mix_seed(self.seed, 0xDA7A ^ self.data.sprite.seed);
        out.train.seed = mix_seed(self.seed, 0x7124 ^ self.train.seed);
        out.eval.seed = mix_seed(self.seed, 0xE0A1 ^ self.eval.seed);
        out.loss.lossnet_seed = mix_seed(self.seed, 0x1055 ^ self.loss.lossnet_seed);
        out
    }

    pub fn to_pretty_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Applies one `dotted.path=value` override onto a JSON document; the value
/// is parsed as JSON when possible and taken as a string otherwise.
pub fn apply_set(doc: &mut serde_json::Value, set: &str) -> Result<()> {
    let (path, raw) = set
        .split_once('=')
        .ok_or_else(|| Error::invalid_config(format!("--set needs key=value, got '{set}'")))?;
    let value: serde_json::Value = match serde_json::from_str(raw) {
        Ok(v) => v,
        Err(_) => serde_json::Value::String(raw.to_string()),
    };
    let mut cur = doc;
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(Error::invalid_config(format!("bad --set path '{path}'")));
    }
    for seg in &segments[..segments.len() - 1] {
        if !cur.is_object() {
            return Err(Error::invalid_config(format!(
                "--set path '{path}' descends through a non-object"
            )));
        }
        cur = cur
            .as_object_mut()
            .unwrap()
            .entry(seg.to_string())
            .or_insert(serde_json::json!({}));
    }
    match cur.as_object_mut() {
        Some(obj) => {
            obj.insert(segments[segments.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::invalid_config(format!(
            "--set path '{path}' descends through a non-object"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::load(None, &[]).unwrap();
        assert_eq!(cfg.train.lr, 1e-2);
        assert_eq!(cfg.model.heatmap_size, 16);
        let json = cfg.to_pretty_json();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.train.lr, cfg.train.lr);
    }

    #[test]
    fn sets_override_nested_fields() {
        let cfg = RunConfig::load(
            None,
            &[
                "train.lr=0.5".into(),
                "model.k=7".into(),
                "loss.kind=l1".into(),
                "data.sprite.n_parts=3".into(),
                "eval.ns=[1,2,3]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.lr, 0.5);
        assert_eq!(cfg.model.k, 7);
        assert!(matches!(cfg.loss.kind, crate::loss::LossKind::L1));
        assert_eq!(cfg.data.sprite.n_parts, 3);
        assert_eq!(cfg.eval.ns, vec![1, 2, 3]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::load(None, &["train.nonsense=1".into()]).is_err());
        assert!(RunConfig::load(None, &["typo_section.lr=1".into()]).is_err());
    }

    #[test]
    fn validation_catches_mismatched_sizes() {
        let r = RunConfig::load(None, &["model.input_size=128".into()]);
        assert!(r.is_err(), "image_size 64 vs input_size 128 must fail");
    }

    #[test]
    fn effective_seeds_differ_per_master_seed() {
        let a = RunConfig::load(None, &["seed=1".into()]).unwrap().effective();
        let b = RunConfig::load(None, &["seed=2".into()]).unwrap().effective();
        assert_ne!(a.train.seed, b.train.seed);
        assert_ne!(a.data.sprite.seed, b.data.sprite.seed);
    }
}
