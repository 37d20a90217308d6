//! Run configuration: every module's settings in one validated JSON document.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::decoder::DecoderConfig;
use crate::encoder::ConformerConfig;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::losses::LossWeights;
use crate::training::{BatchingConfig, ScheduleConfig};
use crate::vocab::Vocabulary;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: String,
    pub out_dir: String,
    pub seed: u64,
    pub epochs: usize,
    /// Epochs between checkpoints; the final epoch is always written.
    pub checkpoint_every: usize,
    /// Two dropout branches with the KL term when true; a single plain branch otherwise.
    pub rdrop: bool,
    /// Characters in id order; blank and sos/eos are added around them.
    pub vocab: Vocabulary,
    /// Upper bound on attention-decoder output length at evaluation.
    pub max_decode_len: usize,
    pub frontend: FrontendConfig,
    pub encoder: ConformerConfig,
    pub decoder: DecoderConfig,
    pub loss: LossWeights,
    pub schedule: ScheduleConfig,
    pub batching: BatchingConfig,
}

impl RunConfig {
    /// Desk-scale defaults around the given vocabulary.
    pub fn desk(vocab: Vocabulary) -> Self {
        RunConfig {
            experiment: "desk".into(),
            out_dir: "runs/desk".into(),
            seed: 1,
            epochs: 20,
            checkpoint_every: 1,
            rdrop: true,
            vocab,
            max_decode_len: 64,
            frontend: FrontendConfig::default(),
            encoder: ConformerConfig::default(),
            decoder: DecoderConfig::default(),
            loss: LossWeights::default(),
            schedule: ScheduleConfig::default(),
            batching: BatchingConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.is_empty() {
            return Err(Error::config("experiment", "must not be empty"));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every", "must be positive"));
        }
        if self.max_decode_len == 0 {
            return Err(Error::config("max_decode_len", "must be positive"));
        }
        self.frontend.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.encoder.d_model != self.decoder.d_model {
            return Err(Error::config(
                "decoder.d_model",
                format!("{} differs from encoder.d_model {}", self.decoder.d_model, self.encoder.d_model),
            ));
        }
        self.loss.validate()?;
        self.schedule.validate()?;
        self.batching.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::config(path.display().to_string(), j.to_string()),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    /// The configuration with run-location fields cleared: output directory,
    /// epoch count and checkpoint spacing do not change what a given step computes.
    pub fn identity(&self) -> RunConfig {
        RunConfig {
            out_dir: String::new(),
            epochs: 0,
            checkpoint_every: 1,
            ..self.clone()
        }
    }

    /// SHA-256 over the compact JSON of [`RunConfig::identity`].
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.identity()).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(map) => {
            for (k, x) in map {
                let p = if prefix.is_empty() { k.clone() } else { format!("{}.{}", prefix, k) };
                flatten(&p, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Field-by-field differences, one `path: old -> new` line each.
pub fn config_diff(old: &RunConfig, new: &RunConfig) -> Vec<String> {
    let (mut a, mut b) = (BTreeMap::new(), BTreeMap::new());
    flatten("", &serde_json::to_value(old).expect("serializes"), &mut a);
    flatten("", &serde_json::to_value(new).expect("serializes"), &mut b);
    let keys: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    keys.into_iter()
        .filter(|k| a.get(*k) != b.get(*k))
        .map(|k| {
            let show = |m: &BTreeMap<String, String>| m.get(k).cloned().unwrap_or_else(|| "<absent>".into());
            format!("{}: {} -> {}", k, show(&a), show(&b))
        })
        .collect()
}
