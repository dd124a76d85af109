//! Run configuration: a JSON document with dotted-path overrides and a
//! fully resolved echo.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::contrastive::ContrastiveConfig;
use crate::datapipe::{
    load_jsonl, synth_corpus, tag_document, Example, InstanceConfig, MixtureDataset, MixtureSpec, SynthTask,
};
use crate::error::{Error, Result};
use crate::fewshot::EvalConfig;
use crate::lm::{FlamingoConfig, LmConfig};
use crate::pipeline::{ContrastivePretrainConfig, LmPretrainConfig};
use crate::tokenizer::Vocab;
use crate::train::{AdamWConfig, ClipMode, ClipRule, FreezePolicy, Strategy};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: FlamingoConfig,
    pub checkpoints: CheckpointSources,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub lm_pretrain: LmPretrainConfig,
    pub contrastive: ContrastiveSection,
    pub eval: EvalConfig,
}

/// Pretrained component sources for `train`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckpointSources {
    /// Language-model checkpoint (components `lm` and `eoc`).
    pub lm: Option<PathBuf>,
    /// Vision-encoder checkpoint (component `vision`).
    pub vision: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DataSource {
    Synthetic { task: SynthTask, size: usize },
    Jsonl { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub name: String,
    pub source: DataSource,
    pub weight: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub datasets: Vec<DatasetConfig>,
    pub instance: InstanceConfig,
    /// Probability of a space between `<image>` and a paired caption.
    pub space_prob: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let synth = |name: &str, task, weight, batch_size| DatasetConfig {
            name: name.into(),
            source: DataSource::Synthetic { task, size: 400 },
            weight,
            batch_size,
        };
        DataConfig {
            datasets: vec![
                synth("glyph_caption", SynthTask::GlyphCaption, 1.0, 8),
                synth("glyph_vqa", SynthTask::GlyphVqa, 1.0, 8),
                synth("interleaved_pages", SynthTask::InterleavedPages, 1.0, 4),
            ],
            instance: InstanceConfig::default(),
            space_prob: 0.5,
        }
    }
}

impl DataConfig {
    /// Materializes every dataset. Synthetic items come from the `data`
    /// streams of `seed`; JSONL paths resolve against `base`.
    pub fn build(&self, seed: u64, model: &FlamingoConfig, vocab: &Vocab, base: &Path) -> Result<MixtureSpec> {
        let datasets = self
            .datasets
            .iter()
            .map(|d| {
                let source = match &d.source {
                    DataSource::Synthetic { task, size } => synth_corpus(*task, *size, seed, &model.vision, vocab)?,
                    DataSource::Jsonl { path } => load_jsonl(&base.join(path), &model.vision)?
                        .iter()
                        .map(|doc| Example::Document(tag_document(doc, vocab)))
                        .collect(),
                };
                Ok(MixtureDataset {
                    name: d.name.clone(),
                    weight: d.weight,
                    batch_size: d.batch_size,
                    instance: self.instance.clone(),
                    space_prob: self.space_prob,
                    source: Arc::new(source),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = MixtureSpec { datasets };
        spec.validate().map_err(|e| Error::Config(format!("data.datasets: {e}")))?;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    pub strategy: Strategy,
    pub optimizer: AdamWConfig,
    pub clip: Vec<ClipRule>,
    pub freeze: FreezePolicy,
    /// Pretrain the language model in-process when no checkpoint is given.
    pub pretrain_lm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1500,
            strategy: Strategy::Accumulation,
            optimizer: AdamWConfig {
                peak_lr: 1e-3,
                warmup_steps: 50,
                ..AdamWConfig::default()
            },
            clip: vec![ClipRule {
                prefix: String::new(),
                mode: ClipMode::GlobalNorm { max_norm: 1.0 },
            }],
            freeze: FreezePolicy::default(),
            pretrain_lm: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContrastiveSection {
    pub model: ContrastiveConfig,
    pub pretrain: ContrastivePretrainConfig,
    /// Recall cut-offs reported on the held-out set.
    pub recall_k: Vec<usize>,
    /// Template sets for zero-shot classification; `{class_name}` is
    /// substituted.
    pub zero_shot_templates: Vec<Vec<String>>,
}

impl Default for ContrastiveSection {
    fn default() -> Self {
        ContrastiveSection {
            model: ContrastiveConfig::default(),
            pretrain: ContrastivePretrainConfig {
                steps: 3000,
                ..ContrastivePretrainConfig::default()
            },
            recall_k: vec![1, 5, 10],
            zero_shot_templates: vec![
                vec!["a {class_name}".into()],
                vec!["a {class_name}".into(), "a photo of a {class_name}".into()],
            ],
        }
    }
}

/// Named model presets.
pub fn preset(name: &str) -> Result<FlamingoConfig> {
    match name {
        "tiny" => Ok(FlamingoConfig::default()),
        "small" => {
            let mut c = FlamingoConfig::default();
            c.lm = LmConfig {
                d_model: 64,
                layers: 4,
                heads: 4,
                ..LmConfig::default()
            };
            c.vision.width = 64;
            c.resampler.latents = 16;
            c.xattn.every = 2;
            Ok(c)
        }
        other => Err(Error::Config(format!("unknown model preset {other:?} (expected tiny or small)"))),
    }
}

/// Sets `path` (dot separated) inside a JSON document, creating objects on
/// the way. Numeric segments index existing arrays.
pub fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<()> {
    if path.is_empty() {
        return Err(Error::Config("empty override path".into()));
    }
    let parts: Vec<&str> = path.split('.').collect();
    let mut cur = doc;
    for (i, key) in parts.iter().enumerate() {
        let here = || parts[..i].join(".");
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Array(items) => {
                let n = items.len();
                let slot = key
                    .parse::<usize>()
                    .ok()
                    .and_then(|k| items.get_mut(k))
                    .ok_or_else(|| Error::Config(format!("{}: no element {key} in array of {n}", here())))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            Value::Object(obj) => {
                if last {
                    obj.insert((*key).to_string(), value);
                    return Ok(());
                }
                obj.entry((*key).to_string())
                    .or_insert_with(|| Value::Object(Default::default()))
            }
            _ => return Err(Error::Config(format!("{}: not an object", here()))),
        };
    }
    unreachable!("loop returns on the last key")
}

/// Parses `key=value`; values that are not valid JSON are taken as strings.
pub fn parse_override(spec: &str) -> Result<(String, Value)> {
    let (k, v) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.trim().to_string(), value))
}

impl RunConfig {
    /// Default config, then the file (if any), then overrides in order.
    /// Unknown or ill-typed fields are reported by path.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<RunConfig> {
        let mut doc = serde_json::to_value(RunConfig::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
            let user: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            merge(&mut doc, user);
        }
        for (k, v) in overrides {
            set_path(&mut doc, k, v.clone())?;
        }
        let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.contrastive.model.validate()?;
        if self.data.datasets.is_empty() {
            return Err(Error::Config("data.datasets is empty".into()));
        }
        for d in &self.data.datasets {
            if !(d.weight > 0.0) {
                return Err(Error::Config(format!("data.datasets.{}.weight must be positive", d.name)));
            }
            if d.batch_size == 0 {
                return Err(Error::Config(format!("data.datasets.{}.batch_size must be positive", d.name)));
            }
        }
        if self.data.instance.seq_len > self.model.lm.max_positions {
            return Err(Error::Config(format!(
                "data.instance.seq_len {} exceeds model.lm.max_positions {}",
                self.data.instance.seq_len, self.model.lm.max_positions
            )));
        }
        if self.contrastive.recall_k.contains(&0) {
            return Err(Error::Config("contrastive.recall_k entries must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Deep merge of `src` into `dst`; objects merge key-wise, everything else
/// replaces.
pub fn merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k, v);
                    }
                }
            }
        }
        (d, s) => *d = s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::resolve(None, &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        let back: RunConfig = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_and_unknown_fields() {
        let o = vec![parse_override("train.steps=7").unwrap(), parse_override("train.strategy=round_robin").unwrap()];
        let c = RunConfig::resolve(None, &o).unwrap();
        assert_eq!(c.train.steps, 7);
        assert_eq!(c.train.strategy, Strategy::RoundRobin);
        let err = RunConfig::resolve(None, &[parse_override("train.stepz=1").unwrap()]).unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
        assert!(RunConfig::resolve(None, &[parse_override("model.lm.heads=5").unwrap()]).is_err());
    }

    #[test]
    fn presets() {
        assert!(preset("small").unwrap().validate().is_ok());
        assert!(preset("huge").is_err());
    }
}
