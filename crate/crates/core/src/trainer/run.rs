use std::path::Path;

use super::TrainConfig;
use crate::config::{parse_num, read_key_values, KeyValues};
use crate::data::{make_toy_corpus, Example, NoiseKind, ToyCorpusConfig};
use crate::model::ModelConfig;
use crate::{Error, Result};

/// Everything a config file can set: `model.*`, `stft.*`, `train.*` and `corpus.*` keys.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub corpus: ToyCorpusConfig,
    /// Toy examples held out for validation, drawn after the training examples.
    pub validation_examples: usize,
    /// Segment length for real-data manifests.
    pub segment_seconds: f64,
}

impl RunConfig {
    /// Small model on the synthetic corpus.
    pub fn toy() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            corpus: ToyCorpusConfig::default(),
            validation_examples: 8,
            segment_seconds: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.corpus.validate()?;
        if self.corpus.sample_rate != self.model.stft.sample_rate {
            return Err(Error::Config(format!(
                "corpus.sample_rate {} differs from stft.sample_rate {}",
                self.corpus.sample_rate, self.model.stft.sample_rate
            )));
        }
        if self.validation_examples == 0 {
            return Err(Error::Config("corpus.validation_examples must be positive".into()));
        }
        if !(self.segment_seconds > 0.0) {
            return Err(Error::Config("corpus.segment_seconds must be positive".into()));
        }
        Ok(())
    }

    pub fn to_key_values(&self) -> KeyValues {
        let mut kv = self.model.to_key_values();
        for (k, v) in self.train.to_key_values().iter() {
            kv.push(k, v);
        }
        let c = &self.corpus;
        kv.push("corpus.num_examples", c.num_examples);
        kv.push("corpus.validation_examples", self.validation_examples);
        kv.push("corpus.seed", c.seed);
        kv.push("corpus.tone_min", c.tone_count.0);
        kv.push("corpus.tone_max", c.tone_count.1);
        kv.push("corpus.f0_min_hz", c.fundamental_hz.0);
        kv.push("corpus.f0_max_hz", c.fundamental_hz.1);
        kv.push("corpus.noise", c.noise.name());
        kv.push("corpus.clip_seconds", c.clip_seconds);
        kv.push("corpus.sample_rate", c.sample_rate);
        kv.push("corpus.segment_seconds", self.segment_seconds);
        kv
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? || self.train.set(key, value)? {
            return Ok(());
        }
        let c = &mut self.corpus;
        match key {
            "corpus.num_examples" => c.num_examples = parse_num(key, value)?,
            "corpus.validation_examples" => self.validation_examples = parse_num(key, value)?,
            "corpus.seed" => c.seed = parse_num(key, value)?,
            "corpus.tone_min" => c.tone_count.0 = parse_num(key, value)?,
            "corpus.tone_max" => c.tone_count.1 = parse_num(key, value)?,
            "corpus.f0_min_hz" => c.fundamental_hz.0 = parse_num(key, value)?,
            "corpus.f0_max_hz" => c.fundamental_hz.1 = parse_num(key, value)?,
            "corpus.noise" => c.noise = NoiseKind::parse(value)?,
            "corpus.clip_seconds" => c.clip_seconds = parse_num(key, value)?,
            "corpus.sample_rate" => c.sample_rate = parse_num(key, value)?,
            "corpus.segment_seconds" => self.segment_seconds = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Applies `kv` on top of the toy defaults, then validates.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let mut cfg = RunConfig::toy();
        for (k, v) in kv.iter() {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kv = read_key_values(path)?;
        RunConfig::from_key_values(&kv).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Mixed training and validation toy examples.
    pub fn toy_splits(&self) -> Result<(Vec<Example>, Vec<Example>)> {
        let n = self.corpus.num_examples;
        let all = make_toy_corpus(&ToyCorpusConfig {
            num_examples: n + self.validation_examples,
            ..self.corpus.clone()
        })?;
        let mixed = all.iter().map(|m| m.mix()).collect::<Result<Vec<_>>>()?;
        let (train, val) = mixed.split_at(n);
        Ok((train.to_vec(), val.to_vec()))
    }
}
