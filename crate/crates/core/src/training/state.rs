//! Training state and its checkpoint encoding.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Adam, OptimizerConfig, TaskVariant};
use crate::checkpoint::Container;
use crate::decoding::Summarizer;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tokenizer::Vocab;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: ModelConfig,
    pub opt: OptimizerConfig,
    pub variant: TaskVariant,
    pub seed: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub params: ModelParams,
    pub adam: Adam,
    pub best_val_xent: Option<f64>,
    pub best_step: Option<u64>,
    pub vocab_hash: String,
}

const MODEL_PREFIX: &str = "model.";
const OPT_PREFIX: &str = "opt.";

impl TrainState {
    /// Fresh parameters initialized from `seed`.
    pub fn new(
        config: ModelConfig,
        opt: OptimizerConfig,
        variant: TaskVariant,
        seed: u64,
        vocab: &Vocab,
    ) -> Result<Self> {
        config.validate()?;
        opt.validate()?;
        if config.vocab_size != vocab.len() {
            return Err(Error::invalid(format!(
                "model vocab_size {} differs from vocabulary size {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let params = ModelParams::init(&config, seed);
        let adam = Adam::new(&params);
        Ok(TrainState {
            config,
            opt,
            variant,
            seed,
            step: 0,
            params,
            adam,
            best_val_xent: None,
            best_step: None,
            vocab_hash: vocab.content_hash(),
        })
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        if vocab.content_hash() != self.vocab_hash {
            return Err(Error::HashMismatch {
                artifact: "vocab".into(),
            });
        }
        Ok(())
    }

    pub fn summarizer<'a>(&'a self, vocab: &'a Vocab) -> Summarizer<'a> {
        Summarizer {
            params: &self.params,
            config: &self.config,
            vocab,
            variant: self.variant,
        }
    }

    pub fn to_container(&self) -> Container {
        let mut header = BTreeMap::new();
        for (k, v) in self.config.to_kv() {
            header.insert(format!("{MODEL_PREFIX}{k}"), v);
        }
        for (k, v) in self.opt.to_kv() {
            header.insert(format!("{OPT_PREFIX}{k}"), v);
        }
        header.insert("variant".into(), self.variant.id.to_string());
        header.insert("seed".into(), self.seed.to_string());
        header.insert("step".into(), self.step.to_string());
        header.insert("vocab_hash".into(), self.vocab_hash.clone());
        header.insert(
            "best_val_xent".into(),
            self.best_val_xent
                .map_or("none".into(), |x| format!("{:016x}", x.to_bits())),
        );
        header.insert(
            "best_step".into(),
            self.best_step.map_or("none".into(), |s| s.to_string()),
        );
        let mut tensors: Vec<_> = self.params.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        for (prefix, moments) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            tensors.extend(
                moments
                    .named()
                    .into_iter()
                    .map(|(n, t)| (format!("{prefix}{n}"), t.clone())),
            );
        }
        Container { header, tensors }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let section = |prefix: &str| -> BTreeMap<String, String> {
            c.header
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
                .collect()
        };
        let config = ModelConfig::from_kv(&section(MODEL_PREFIX))?;
        let opt = OptimizerConfig::from_kv(&section(OPT_PREFIX))?;
        let variant = TaskVariant::from_id(c.parse("variant")?)?;
        let best_val_xent = match c.get("best_val_xent")? {
            "none" => None,
            bits => Some(f64::from_bits(
                u64::from_str_radix(bits, 16).map_err(|_| Error::Checkpoint("bad best_val_xent".into()))?,
            )),
        };
        let best_step = match c.get("best_step")? {
            "none" => None,
            _ => Some(c.parse("best_step")?),
        };
        let mut params = ModelParams::zeros(&config);
        let mut m = params.clone();
        let mut v = params.clone();
        let mut tensors: BTreeMap<String, crate::model::Mat> = c.tensors.iter().cloned().collect();
        if tensors.len() != c.tensors.len() {
            return Err(Error::Checkpoint("duplicate tensor names".into()));
        }
        for (prefix, target) in [("", &mut params), ("adam.m.", &mut m), ("adam.v.", &mut v)] {
            for (name, slot) in target.named_mut() {
                let key = format!("{prefix}{name}");
                let t = tensors
                    .remove(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
                if t.dim() != slot.dim() {
                    return Err(Error::Shape(format!(
                        "{key} has shape {:?}, config implies {:?}",
                        t.dim(),
                        slot.dim()
                    )));
                }
                *slot = t;
            }
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(TrainState {
            config,
            opt,
            variant,
            seed: c.parse("seed")?,
            step: c.parse("step")?,
            params,
            adam: Adam { m, v },
            best_val_xent,
            best_step,
            vocab_hash: c.get("vocab_hash")?.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    /// Loads a checkpoint and checks it was trained with `vocab`.
    pub fn resume(path: impl AsRef<Path>, vocab: &Vocab) -> Result<Self> {
        let state = Self::load(path)?;
        state.check_vocab(vocab)?;
        Ok(state)
    }
}
