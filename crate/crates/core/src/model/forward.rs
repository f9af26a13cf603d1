use super::{Model, ModelError};
use crate::tensor::{self, add_assign, apply_rope, dot, gelu, matvec, rms_norm, softmax_in_place};

/// Keys and values of earlier positions at one layer, `[positions × d_model]`.
#[derive(Debug, Clone, Copy)]
pub struct KvView<'a> {
    pub keys: &'a [f32],
    pub values: &'a [f32],
}

impl<'a> KvView<'a> {
    pub fn new(keys: &'a [f32], values: &'a [f32]) -> Self {
        Self { keys, values }
    }

    pub fn empty() -> Self {
        Self {
            keys: &[],
            values: &[],
        }
    }
}

/// Output of one block at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStep {
    /// Residual stream leaving the block.
    pub hidden: Vec<f32>,
    /// Rotated key of this position, to be cached.
    pub key: Vec<f32>,
    pub value: Vec<f32>,
    /// Attention sublayer output (after `wo`), before the residual add.
    pub attn: Vec<f32>,
    /// MLP sublayer output, before the residual add.
    pub mlp: Vec<f32>,
    /// Matmul multiply-adds performed.
    pub macs: u64,
}

/// Per-layer activations over a whole sequence, each `[positions × d_model]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullForward {
    pub positions: usize,
    pub embedded: Vec<f32>,
    pub hidden: Vec<Vec<f32>>,
    pub mlp: Vec<Vec<f32>>,
    pub attn: Vec<Vec<f32>>,
}

impl FullForward {
    pub fn hidden_at(&self, layer: usize, pos: usize, d: usize) -> &[f32] {
        &self.hidden[layer][pos * d..(pos + 1) * d]
    }
}

impl Model {
    /// Embedding lookup for one sequence, `[tokens × d_model]`. Position
    /// enters through rotary attention, so rows are plain lookups.
    pub fn embed(&self, tokens: &[u32]) -> Result<Vec<f32>, ModelError> {
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            out.extend_from_slice(self.embedding_row(t)?);
        }
        Ok(out)
    }

    pub fn embedding_row(&self, token: u32) -> Result<&[f32], ModelError> {
        let d = self.config.d_model;
        let t = token as usize;
        if t >= self.config.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                token,
                vocab_size: self.config.vocab_size,
            });
        }
        Ok(&self.token_embedding[t * d..(t + 1) * d])
    }

    fn check_layer(&self, layer: usize) -> Result<(), ModelError> {
        if layer >= self.config.n_layers {
            return Err(ModelError::LayerOutOfRange {
                layer,
                n_layers: self.config.n_layers,
            });
        }
        Ok(())
    }

    /// Rotated key and value of `hidden` (the residual stream entering
    /// `layer`) at logical position `pos`.
    pub fn project_kv(
        &self,
        layer: usize,
        hidden: &[f32],
        pos: usize,
    ) -> Result<(Vec<f32>, Vec<f32>), ModelError> {
        self.check_layer(layer)?;
        self.check_width("hidden", hidden.len())?;
        let w = &self.layers[layer];
        let d = self.config.d_model;
        let normed = rms_norm(hidden, &w.attn_norm);
        let mut k = matvec(&normed, &w.wk, d);
        apply_rope(&mut k, self.config.n_heads, pos);
        let v = matvec(&normed, &w.wv, d);
        Ok((k, v))
    }

    fn check_width(&self, what: &'static str, found: usize) -> Result<(), ModelError> {
        if found != self.config.d_model {
            return Err(ModelError::ShapeMismatch {
                what,
                expected: self.config.d_model,
                found,
            });
        }
        Ok(())
    }

    /// Runs one block for a single new position.
    ///
    /// `past` holds the cached keys/values of every earlier position visible
    /// at this layer; the new position attends to those plus itself, so the
    /// causal mask holds by construction. `pos` is the logical position used
    /// for the rotary phase.
    pub fn run_layer(
        &self,
        layer: usize,
        h_in: &[f32],
        pos: usize,
        past: KvView<'_>,
    ) -> Result<LayerStep, ModelError> {
        self.check_layer(layer)?;
        let cfg = &self.config;
        let d = cfg.d_model;
        self.check_width("h_in", h_in.len())?;
        if past.keys.len() != past.values.len() || !past.keys.len().is_multiple_of(d) {
            return Err(ModelError::ShapeMismatch {
                what: "kv_view",
                expected: past.keys.len() - past.keys.len() % d,
                found: past.values.len(),
            });
        }
        let w = &self.layers[layer];
        let n_past = past.keys.len() / d;
        let mut macs = 0u64;

        let normed = rms_norm(h_in, &w.attn_norm);
        let mut q = matvec(&normed, &w.wq, d);
        let mut k = matvec(&normed, &w.wk, d);
        let v = matvec(&normed, &w.wv, d);
        macs += 3 * (d * d) as u64;
        apply_rope(&mut q, cfg.n_heads, pos);
        apply_rope(&mut k, cfg.n_heads, pos);

        let hd = cfg.head_dim();
        let scale = 1.0 / (hd as f32).sqrt();
        let mut mixed = vec![0.0f32; d];
        let mut scores = vec![0.0f32; n_past + 1];
        for h in 0..cfg.n_heads {
            let r = h * hd..(h + 1) * hd;
            for (j, s) in scores[..n_past].iter_mut().enumerate() {
                *s = dot(&q[r.clone()], &past.keys[j * d..][r.clone()]) * scale;
            }
            scores[n_past] = dot(&q[r.clone()], &k[r.clone()]) * scale;
            softmax_in_place(&mut scores);
            let out = &mut mixed[r.clone()];
            for (j, p) in scores[..n_past].iter().enumerate() {
                for (o, vj) in out.iter_mut().zip(&past.values[j * d..][r.clone()]) {
                    *o += p * vj;
                }
            }
            for (o, vj) in out.iter_mut().zip(&v[r.clone()]) {
                *o += scores[n_past] * vj;
            }
            // scores and weighted values
            macs += 2 * ((n_past + 1) * hd) as u64;
        }
        let attn = matvec(&mixed, &w.wo, d);
        macs += (d * d) as u64;

        let mut hidden = h_in.to_vec();
        add_assign(&mut hidden, &attn);

        let normed = rms_norm(&hidden, &w.mlp_norm);
        let mut up = matvec(&normed, &w.w_up, cfg.d_ff);
        up.iter_mut().for_each(|x| *x = gelu(*x));
        let mlp = matvec(&up, &w.w_down, d);
        macs += 2 * (d * cfg.d_ff) as u64;
        add_assign(&mut hidden, &mlp);

        Ok(LayerStep {
            hidden,
            key: k,
            value: v,
            attn,
            mlp,
            macs,
        })
    }

    /// Final norm then vocabulary projection. Accepts the residual stream of
    /// any layer.
    pub fn logits(&self, h: &[f32]) -> Result<Vec<f32>, ModelError> {
        self.check_width("readout", h.len())?;
        let d = self.config.d_model;
        let normed = rms_norm(h, &self.final_norm);
        Ok(match &self.lm_head {
            Some(head) => matvec(&normed, head, self.config.vocab_size),
            None => self
                .token_embedding
                .chunks_exact(d)
                .map(|row| dot(&normed, row))
                .collect(),
        })
    }

    /// Probability distribution over the vocabulary for a residual stream.
    pub fn readout(&self, h: &[f32]) -> Result<Vec<f32>, ModelError> {
        let mut p = self.logits(h)?;
        softmax_in_place(&mut p);
        Ok(p)
    }

    /// Greedy pick: `(token, probability)`.
    pub fn predict(&self, h: &[f32]) -> Result<(u32, f32), ModelError> {
        let p = self.readout(h)?;
        let t = tensor::argmax(&p);
        Ok((t as u32, p[t]))
    }

    /// Full-depth forward over a sequence, keeping the hidden, MLP and
    /// attention streams of every block.
    pub fn forward_full(&self, tokens: &[u32]) -> Result<FullForward, ModelError> {
        let cfg = &self.config;
        if tokens.len() > cfg.max_seq {
            return Err(ModelError::SequenceTooLong {
                len: tokens.len(),
                max_seq: cfg.max_seq,
            });
        }
        let d = cfg.d_model;
        let n = tokens.len();
        let embedded = self.embed(tokens)?;
        let mut x = embedded.clone();
        let mut out = FullForward {
            positions: n,
            embedded,
            hidden: Vec::with_capacity(cfg.n_layers),
            mlp: Vec::with_capacity(cfg.n_layers),
            attn: Vec::with_capacity(cfg.n_layers),
        };
        for layer in 0..cfg.n_layers {
            let mut keys = Vec::with_capacity(n * d);
            let mut values = Vec::with_capacity(n * d);
            let (mut hid, mut mlp, mut attn) = (
                Vec::with_capacity(n * d),
                Vec::with_capacity(n * d),
                Vec::with_capacity(n * d),
            );
            for t in 0..n {
                let step = self.run_layer(
                    layer,
                    &x[t * d..(t + 1) * d],
                    t,
                    KvView::new(&keys, &values),
                )?;
                keys.extend_from_slice(&step.key);
                values.extend_from_slice(&step.value);
                hid.extend_from_slice(&step.hidden);
                mlp.extend_from_slice(&step.mlp);
                attn.extend_from_slice(&step.attn);
            }
            x = hid.clone();
            out.hidden.push(hid);
            out.mlp.push(mlp);
            out.attn.push(attn);
        }
        Ok(out)
    }
}
