//! Tiny decoder-only transformer: weights, the `D3W1` file format and
//! layer-stepwise execution with readout from any depth.
//!
//! Architecture: RMS pre-norm residual blocks, rotary multi-head attention
//! and a two-matrix GELU MLP. No biases.

mod forward;
mod io;

pub use forward::{FullForward, KvView, LayerStep};
pub use io::MAGIC;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("bad magic {found:?}, expected \"D3W1\"")]
    BadMagic { found: [u8; 4] },
    #[error("file truncated while reading `{tensor}`")]
    TruncatedFile { tensor: String },
    #[error("dimension mismatch at `{tensor}`: {detail}")]
    DimensionMismatch { tensor: String, detail: String },
    #[error("non-finite weight in `{tensor}` at element {index}")]
    NonFiniteWeight { tensor: String, index: usize },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {token} out of range for vocab of {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("layer {layer} out of range for {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("shape mismatch in {what}: expected {expected}, found {found}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("sequence length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
    pub tied_lm_head: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.max_seq < 2 {
            return Err(ModelError::InvalidConfig("max_seq must be >= 2".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Vec<f32>,
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub mlp_norm: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

impl LayerWeights {
    fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            attn_norm: vec![0.0; d],
            wq: vec![0.0; d * d],
            wk: vec![0.0; d * d],
            wv: vec![0.0; d * d],
            wo: vec![0.0; d * d],
            mlp_norm: vec![0.0; d],
            w_up: vec![0.0; d * cfg.d_ff],
            w_down: vec![0.0; cfg.d_ff * d],
        }
    }

    /// Tensors in file order.
    pub(crate) fn tensors(&self) -> [(&'static str, &Vec<f32>); 8] {
        [
            ("attn_norm", &self.attn_norm),
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("mlp_norm", &self.mlp_norm),
            ("w_up", &self.w_up),
            ("w_down", &self.w_down),
        ]
    }

    pub(crate) fn tensors_mut(&mut self) -> [(&'static str, &mut Vec<f32>); 8] {
        [
            ("attn_norm", &mut self.attn_norm),
            ("wq", &mut self.wq),
            ("wk", &mut self.wk),
            ("wv", &mut self.wv),
            ("wo", &mut self.wo),
            ("mlp_norm", &mut self.mlp_norm),
            ("w_up", &mut self.w_up),
            ("w_down", &mut self.w_down),
        ]
    }
}

/// Immutable after construction; share freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `[vocab_size × d_model]`
    pub token_embedding: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f32>,
    /// `[d_model × vocab_size]`, `None` when tied to the embedding.
    pub lm_head: Option<Vec<f32>>,
}

impl Model {
    /// All-zero weights. With zero layer weights every block is the identity
    /// on the residual stream.
    pub fn zeros(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        Ok(Self {
            config,
            token_embedding: vec![0.0; config.vocab_size * d],
            layers: (0..config.n_layers)
                .map(|_| LayerWeights::zeros(&config))
                .collect(),
            final_norm: vec![0.0; d],
            lm_head: (!config.tied_lm_head).then(|| vec![0.0; d * config.vocab_size]),
        })
    }

    /// Gaussian initialisation from a fixed seed. Projections use
    /// `1/sqrt(fan_in)` scaling, norm gains are close to one.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut model = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model as f32;
        let dff = config.d_ff as f32;
        let mut fill = |buf: &mut Vec<f32>, mean: f32, std: f32| {
            let dist = Normal::new(mean, std).expect("finite std");
            buf.iter_mut().for_each(|w| *w = dist.sample(&mut rng));
        };
        fill(&mut model.token_embedding, 0.0, 1.0);
        for layer in &mut model.layers {
            for (name, t) in layer.tensors_mut() {
                match name {
                    "attn_norm" | "mlp_norm" => fill(t, 1.0, 0.05),
                    "w_down" => fill(t, 0.0, dff.sqrt().recip()),
                    _ => fill(t, 0.0, d.sqrt().recip()),
                }
            }
        }
        fill(&mut model.final_norm, 1.0, 0.05);
        if let Some(head) = model.lm_head.as_mut() {
            fill(head, 0.0, d.sqrt().recip());
        }
        Ok(model)
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Checks shapes and finiteness of every tensor.
    pub fn validate(&self) -> Result<(), ModelError> {
        let cfg = &self.config;
        cfg.validate()?;
        if self.layers.len() != cfg.n_layers {
            return Err(ModelError::DimensionMismatch {
                tensor: "layers".into(),
                detail: format!("{} layers for n_layers {}", self.layers.len(), cfg.n_layers),
            });
        }
        if self.lm_head.is_some() == cfg.tied_lm_head {
            return Err(ModelError::DimensionMismatch {
                tensor: "lm_head".into(),
                detail: "presence disagrees with tied_lm_head".into(),
            });
        }
        for (name, data) in self.named_tensors() {
            let expected = io::tensor_len(cfg, &name);
            if data.len() != expected {
                return Err(ModelError::DimensionMismatch {
                    tensor: name,
                    detail: format!("{} elements, expected {expected}", data.len()),
                });
            }
            if let Some(index) = data.iter().position(|w| !w.is_finite()) {
                return Err(ModelError::NonFiniteWeight {
                    tensor: name,
                    index,
                });
            }
        }
        Ok(())
    }

    /// Every tensor with its file name, in file order.
    pub fn named_tensors(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> =
            vec![("token_embedding".to_string(), &self.token_embedding)];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.tensors() {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        if let Some(head) = &self.lm_head {
            out.push(("lm_head".to_string(), head));
        }
        out
    }
}

#[cfg(test)]
pub(crate) fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 8,
        d_model: 4,
        n_layers: 2,
        n_heads: 1,
        d_ff: 8,
        max_seq: 16,
        tied_lm_head: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_rejects_bad_heads() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..tiny_config()
        };
        assert!(matches!(cfg.validate(), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn config_rejects_short_max_seq() {
        let cfg = ModelConfig {
            max_seq: 1,
            ..tiny_config()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn random_is_seeded() {
        let a = Model::random(tiny_config(), 3).unwrap();
        let b = Model::random(tiny_config(), 3).unwrap();
        let c = Model::random(tiny_config(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
    }

    #[test]
    fn validate_catches_nan() {
        let mut m = Model::random(tiny_config(), 1).unwrap();
        m.layers[1].wv[3] = f32::NAN;
        assert_eq!(
            m.validate(),
            Err(ModelError::NonFiniteWeight {
                tensor: "layers.1.wv".into(),
                index: 3
            })
        );
    }
}
