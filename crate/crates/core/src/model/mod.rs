//! The encoder: configuration, parameters, input layout and forward pass.

pub mod checkpoint;
mod config;
mod forward;
mod sequence;
mod weights;

use rand::SeedableRng;
use sha2::{Digest, Sha256};

pub use config::ModelConfig;
pub use forward::{
    embed, forward, layer_forward, layer_invocations, reset_layer_invocations, score,
    AttentionTensor, ForwardOptions, ForwardOutput, LayerState,
};
pub(crate) use forward::{cls_layer_forward, forward_traced, layer_forward_traced, LayerTrace, SequenceTrace};
pub use sequence::{EncodedSequence, Group, Segment, Side, CLS_ID, MASK_ID, PAD_ID, RESERVED_IDS, SEP_ID};
pub use weights::{CompressorWeights, LayerWeights, Weights, INIT_STD};

use crate::error::Result;

/// 32-byte digest identifying a configuration together with its weights.
pub type Fingerprint = [u8; 32];

/// A configuration and its `f32` weights, with a cached fingerprint.
///
/// Representations carry the fingerprint of the model that produced them
/// and are refused by any other model.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    weights: Weights,
    fingerprint: Fingerprint,
}

impl Model {
    pub fn new(cfg: ModelConfig, weights: Weights) -> Result<Self> {
        cfg.validate()?;
        weights.check_shapes(&cfg)?;
        let fingerprint = fingerprint(&cfg, &weights);
        Ok(Self {
            cfg,
            weights,
            fingerprint,
        })
    }

    /// Random initialization from a seed.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let weights = Weights::init(&cfg, &mut rng);
        Self::new(cfg, weights)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn into_parts(self) -> (ModelConfig, Weights) {
        (self.cfg, self.weights)
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn fingerprint_hex(&self) -> String {
        hex(&self.fingerprint)
    }

    /// Same weights under a different split layer. The mask schedule is a
    /// training-time property, so this is only meaningful for benchmarking
    /// and for experiments on untrained weights.
    pub fn with_split_layer(&self, l: usize) -> Result<Self> {
        Self::new(self.cfg.with_split_layer(l), self.weights.clone())
    }

    /// Replaces (or installs) the compressor.
    pub fn with_compressor(&self, comp: Option<CompressorWeights>) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.comp_dim = comp.as_ref().map(CompressorWeights::comp_dim);
        let mut weights = self.weights.clone();
        weights.compressor = comp;
        Self::new(cfg, weights)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn fingerprint(cfg: &ModelConfig, weights: &Weights) -> Fingerprint {
    let mut h = Sha256::new();
    h.update(b"prettr-model-v1\0");
    h.update(serde_json::to_vec(cfg).expect("config serializes"));
    for (name, m) in weights.named_params() {
        h.update(name.as_bytes());
        h.update((m.rows() as u64).to_le_bytes());
        h.update((m.cols() as u64).to_le_bytes());
        for v in m.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().into()
}
