//! `D3W1` weight files.
//!
//! Layout: 4 magic bytes, 7 little-endian `u32` header fields (vocab_size,
//! d_model, n_layers, n_heads, d_ff, max_seq, tied flag), then raw
//! little-endian `f32` tensors, row-major: token_embedding, per layer
//! (attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down), final_norm, and
//! lm_head when untied.

use super::{LayerWeights, Model, ModelConfig, ModelError};

pub const MAGIC: &[u8; 4] = b"D3W1";
const HEADER_LEN: usize = 4 + 7 * 4;

/// Element count of a named tensor under `cfg`.
pub(crate) fn tensor_len(cfg: &ModelConfig, name: &str) -> usize {
    let d = cfg.d_model;
    let base = name.rsplit('.').next().unwrap_or(name);
    match base {
        "token_embedding" => cfg.vocab_size * d,
        "attn_norm" | "mlp_norm" | "final_norm" => d,
        "wq" | "wk" | "wv" | "wo" => d * d,
        "w_up" | "w_down" => d * cfg.d_ff,
        "lm_head" => d * cfg.vocab_size,
        _ => 0,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl Reader<'_> {
    fn tensor(&mut self, cfg: &ModelConfig, name: String) -> Result<Vec<f32>, ModelError> {
        let n = tensor_len(cfg, &name);
        let end = self.offset + n * 4;
        if end > self.bytes.len() {
            return Err(ModelError::TruncatedFile { tensor: name });
        }
        let data: Vec<f32> = self.bytes[self.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if let Some(index) = data.iter().position(|w| !w.is_finite()) {
            return Err(ModelError::NonFiniteWeight {
                tensor: name,
                index,
            });
        }
        self.offset = end;
        Ok(data)
    }
}

impl Model {
    /// Parses and validates a `D3W1` image. Floats are copied bit-exactly.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < 4 {
            return Err(ModelError::TruncatedFile {
                tensor: "magic".into(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(ModelError::BadMagic {
                found: [bytes[0], bytes[1], bytes[2], bytes[3]],
            });
        }
        if bytes.len() < HEADER_LEN {
            return Err(ModelError::TruncatedFile {
                tensor: "header".into(),
            });
        }
        let field = |i: usize| {
            let o = 4 + i * 4;
            u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        };
        let tied_lm_head = match field(6) {
            0 => false,
            1 => true,
            other => {
                return Err(ModelError::InvalidConfig(format!(
                    "tied flag must be 0 or 1, got {other}"
                )))
            }
        };
        let config = ModelConfig {
            vocab_size: field(0),
            d_model: field(1),
            n_layers: field(2),
            n_heads: field(3),
            d_ff: field(4),
            max_seq: field(5),
            tied_lm_head,
        };
        config.validate()?;

        let mut r = Reader {
            bytes,
            offset: HEADER_LEN,
        };
        let token_embedding = r.tensor(&config, "token_embedding".into())?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let mut layer = LayerWeights::zeros(&config);
            for (name, t) in layer.tensors_mut() {
                *t = r.tensor(&config, format!("layers.{i}.{name}"))?;
            }
            layers.push(layer);
        }
        let final_norm = r.tensor(&config, "final_norm".into())?;
        let lm_head = if tied_lm_head {
            None
        } else {
            Some(r.tensor(&config, "lm_head".into())?)
        };
        if r.offset != bytes.len() {
            return Err(ModelError::DimensionMismatch {
                tensor: "payload".into(),
                detail: format!(
                    "{} trailing bytes after the declared tensors",
                    bytes.len() - r.offset
                ),
            });
        }
        let model = Model {
            config,
            token_embedding,
            layers,
            final_norm,
            lm_head,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.parameter_count());
        out.extend_from_slice(MAGIC);
        for v in [
            c.vocab_size,
            c.d_model,
            c.n_layers,
            c.n_heads,
            c.d_ff,
            c.max_seq,
            c.tied_lm_head as usize,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for (_, t) in self.named_tensors() {
            for w in t {
                out.extend_from_slice(&w.to_le_bytes());
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}
