//! The versioned run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::synth::SynthConfig;
use crate::bench::BenchConfig;
use crate::compression::{PretrainConfig, Precision};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::store::MissingDocPolicy;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IndexConfig {
    pub precision: Precision,
    pub missing: MissingDocPolicy,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F16,
            missing: MissingDocPolicy::Error,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankConfig {
    /// Candidates re-ranked per query, taken from the top of the input run.
    pub k: usize,
    pub tag: String,
    pub cls_only_last: bool,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            k: 100,
            tag: "prettr".into(),
            cls_only_last: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSweep {
    pub docs_per_query: usize,
    pub repeats: usize,
    pub warmups: usize,
    pub cls_only_last: bool,
    pub parallel: bool,
    /// Split layers to time; empty means every layer `0..n`.
    pub layers: Vec<usize>,
    pub queries: usize,
}

impl Default for BenchSweep {
    fn default() -> Self {
        let t = BenchConfig::default();
        Self {
            docs_per_query: t.docs_per_query,
            repeats: t.repeats,
            warmups: t.warmups,
            cls_only_last: t.cls_only_last,
            parallel: t.parallel,
            layers: Vec::new(),
            queries: 4,
        }
    }
}

impl BenchSweep {
    pub fn timing(&self) -> BenchConfig {
        BenchConfig {
            docs_per_query: self.docs_per_query,
            repeats: self.repeats,
            warmups: self.warmups,
            cls_only_last: self.cls_only_last,
            parallel: self.parallel,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub threads: usize,
    /// Share of judged queries held out for validation during training.
    pub validation_fraction: f64,
    pub model: ModelConfig,
    pub index: IndexConfig,
    pub rerank: RerankConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub bench: BenchSweep,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            threads: 0,
            validation_fraction: 0.25,
            model: ModelConfig::default(),
            index: IndexConfig::default(),
            rerank: RerankConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            bench: BenchSweep::default(),
            synth: SynthConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub split_layer: Option<usize>,
    /// `Some(0)` removes the compressor.
    pub comp_dim: Option<usize>,
    pub precision: Option<Precision>,
    pub cls_only_last: Option<bool>,
}

impl RunConfig {
    /// Parses TOML, refusing unknown keys and other versions.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Applies overrides and propagates the seed. `comp_dim = 0` means no
    /// compressor.
    pub fn resolve(mut self, o: &Overrides) -> Result<Self> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.threads {
            self.threads = t;
        }
        if let Some(l) = o.split_layer {
            self.model.split_layer = l;
        }
        if let Some(e) = o.comp_dim {
            self.model.comp_dim = Some(e);
        }
        if self.model.comp_dim == Some(0) {
            self.model.comp_dim = None;
        }
        if let Some(p) = o.precision {
            self.index.precision = p;
        }
        if let Some(c) = o.cls_only_last {
            self.rerank.cls_only_last = c;
            self.bench.cls_only_last = c;
        }
        self.train.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.synth.seed = self.seed;
        self.synth.vocab_size = self.model.vocab_size;
        self.model.validate()?;
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(self)
    }
}
