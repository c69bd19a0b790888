//! Toy audio-conditioned autoregressive sequence model.
//!
//! The encoder runs a stack of strided 1-D convolutions over feature frames,
//! a layer norm and a linear projector. The decoder embeds the text prompt
//! and the emitted tokens, and runs pre-norm blocks of causal self-attention,
//! cross-attention to the encoded audio, and a feed-forward layer, ending in
//! a projection onto the codebook.

mod checkpoint;
mod model;
mod params;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{Binding, GenerationResult, Model, StepDistribution, TrackedSequence};
pub use params::{AdaptableSet, ModelParams, ParamSnapshot};

/// Output codebook with reserved padding / begin / end tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookVocab {
    pub size: usize,
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
    pub names: Vec<String>,
}

impl CodebookVocab {
    /// `size` entries: `<pad>`, `<bos>`, `<eos>`, then content tokens `t03`, `t04`, ...
    pub fn with_size(size: usize) -> Self {
        let names = (0..size)
            .map(|i| match i {
                0 => "<pad>".to_string(),
                1 => "<bos>".to_string(),
                2 => "<eos>".to_string(),
                _ => format!("t{i:02}"),
            })
            .collect();
        Self {
            size,
            pad: 0,
            bos: 1,
            eos: 2,
            names,
        }
    }

    /// Token ids that can appear in an utterance (everything but the specials).
    pub fn content_tokens(&self) -> Vec<usize> {
        (0..self.size)
            .filter(|&i| i != self.pad && i != self.bos && i != self.eos)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let specials = [self.pad, self.bos, self.eos];
        if specials.iter().any(|&s| s >= self.size) {
            return Err(Error::Config(
                "special token index out of vocabulary".into(),
            ));
        }
        if self.pad == self.bos || self.pad == self.eos || self.bos == self.eos {
            return Err(Error::Config("special tokens must be distinct".into()));
        }
        if self.names.len() != self.size {
            return Err(Error::Config(format!(
                "vocabulary has {} names for {} entries",
                self.names.len(),
                self.size
            )));
        }
        Ok(())
    }
}

impl Default for CodebookVocab {
    fn default() -> Self {
        Self::with_size(32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub out_channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub audio_dim: usize,
    pub conv_layers: Vec<ConvLayerSpec>,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub vocab: CodebookVocab,
    pub prompt_vocab_size: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let conv = ConvLayerSpec {
            kernel: 3,
            stride: 2,
            out_channels: 32,
        };
        Self {
            audio_dim: 32,
            conv_layers: vec![conv, conv],
            d_model: 64,
            n_blocks: 2,
            n_heads: 4,
            ff_dim: 128,
            vocab: CodebookVocab::default(),
            prompt_vocab_size: 4,
            max_len: 16,
        }
    }
}

/// Layer-norm epsilon used by every normalization layer in the model.
pub const LN_EPS: f64 = 1e-5;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vocab.validate()?;
        let nonzero = [
            ("audio_dim", self.audio_dim),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("ff_dim", self.ff_dim),
            ("prompt_vocab_size", self.prompt_vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = nonzero.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.conv_layers.is_empty() {
            return Err(Error::Config("at least one conv layer is required".into()));
        }
        for (i, c) in self.conv_layers.iter().enumerate() {
            if c.kernel == 0 || c.stride == 0 || c.out_channels == 0 {
                return Err(Error::Config(format!(
                    "conv layer {i} needs positive kernel, stride and channels"
                )));
            }
        }
        if self.total_stride() < 2 {
            return Err(Error::Config("total conv stride must be >= 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn total_stride(&self) -> usize {
        self.conv_layers.iter().map(|c| c.stride).product()
    }

    /// Encoded length after the conv stack, or `None` if the input is too short.
    pub fn encoded_len(&self, frames: usize) -> Option<usize> {
        self.conv_layers.iter().try_fold(frames, |t, c| {
            (t >= c.kernel).then(|| (t - c.kernel) / c.stride + 1)
        })
    }

    /// Smallest number of input frames that survives the conv stack.
    pub fn min_frames(&self) -> usize {
        self.conv_layers
            .iter()
            .rev()
            .fold(1, |need, c| (need - 1) * c.stride + c.kernel)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }
}
