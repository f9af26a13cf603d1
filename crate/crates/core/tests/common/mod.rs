//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use d3_core::model::KvView;
use d3_core::{Model, ModelConfig};
use num_bigint::BigUint;
use num_traits::{One, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn config(
    vocab: usize,
    d: usize,
    layers: usize,
    heads: usize,
    dff: usize,
    max_seq: usize,
) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: d,
        n_layers: layers,
        n_heads: heads,
        d_ff: dff,
        max_seq,
        tied_lm_head: true,
    }
}

pub fn random_model(cfg: ModelConfig, seed: u64) -> Model {
    Model::random(cfg, seed).unwrap()
}

pub fn random_prompts(
    n: usize,
    vocab: usize,
    min_len: usize,
    max_len: usize,
    seed: u64,
) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(min_len..=max_len);
            (0..len)
                .map(|_| rng.random_range(0..vocab as u32))
                .collect()
        })
        .collect()
}

/// `⌊l · alphaⁱ⌋` by fixed-point interval arithmetic on big integers,
/// widening until both bounds floor alike; exact rational fallback.
pub fn exact_floor_scaled_power(l: usize, alpha: f64, i: usize) -> usize {
    assert!(alpha > 0.0 && alpha <= 1.0 && alpha.is_normal());
    let bits = alpha.to_bits();
    let mut mant = (bits & ((1u64 << 52) - 1)) | (1u64 << 52);
    let mut shift = 1075 - ((bits >> 52) & 0x7ff) as i64;
    while mant & 1 == 0 && shift > 0 {
        mant >>= 1;
        shift -= 1;
    }
    let k = shift as usize;
    let total = k * i;
    let l_big = BigUint::from(l);

    let mut p = 128usize;
    while p < total + 64 {
        // alpha = mant / 2^k is exact in p-bit fixed point for p >= k
        let x = BigUint::from(mant) << (p - k);
        let (lo, hi) = fixed_pow(&x, i, p);
        let f_lo = (&l_big * &lo) >> p;
        let f_hi = (&l_big * &hi) >> p;
        if f_lo == f_hi {
            return to_usize(&f_lo);
        }
        p *= 2;
    }
    let num = l_big * BigUint::from(mant).pow(i as u32);
    to_usize(&(num >> total))
}

fn fixed_pow(x: &BigUint, mut e: usize, p: usize) -> (BigUint, BigUint) {
    let one = BigUint::one() << p;
    let (mut rlo, mut rhi) = (one.clone(), one);
    let (mut blo, mut bhi) = (x.clone(), x.clone());
    let mask = (BigUint::one() << p) - BigUint::one();
    let ceil_shift = |v: BigUint| {
        let rem_nonzero = !(&v & &mask).is_zero();
        (v >> p)
            + if rem_nonzero {
                BigUint::one()
            } else {
                BigUint::zero()
            }
    };
    while e > 0 {
        if e & 1 == 1 {
            rlo = (&rlo * &blo) >> p;
            rhi = ceil_shift(&rhi * &bhi);
        }
        e >>= 1;
        if e > 0 {
            blo = (&blo * &blo) >> p;
            bhi = ceil_shift(&bhi * &bhi);
        }
    }
    (rlo, rhi)
}

fn to_usize(v: &BigUint) -> usize {
    let digits = v.to_u64_digits();
    match digits.len() {
        0 => 0,
        1 => digits[0] as usize,
        _ => usize::MAX,
    }
}

/// Full recomputation of every position's logits in f64, written directly
/// from the architecture: RMS pre-norm, half-split rotary attention over
/// all heads, tanh-GELU MLP, final norm and vocabulary projection.
pub fn naive_logits(model: &Model, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &model.config;
    let (d, n, h) = (cfg.d_model, tokens.len(), cfg.n_heads);
    let hd = d / h;
    let w64 = |v: &[f32]| v.iter().map(|x| *x as f64).collect::<Vec<f64>>();
    let emb = w64(&model.token_embedding);
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .map(|&t| emb[t as usize * d..(t as usize + 1) * d].to_vec())
        .collect();

    for layer in &model.layers {
        let (wq, wk, wv, wo) = (
            w64(&layer.wq),
            w64(&layer.wk),
            w64(&layer.wv),
            w64(&layer.wo),
        );
        let (up, down) = (w64(&layer.w_up), w64(&layer.w_down));
        let normed: Vec<Vec<f64>> = x.iter().map(|r| rms(r, &layer.attn_norm)).collect();
        let mut q: Vec<Vec<f64>> = normed.iter().map(|r| mat(r, &wq, d)).collect();
        let mut k: Vec<Vec<f64>> = normed.iter().map(|r| mat(r, &wk, d)).collect();
        let v: Vec<Vec<f64>> = normed.iter().map(|r| mat(r, &wv, d)).collect();
        for t in 0..n {
            rope(&mut q[t], h, t);
            rope(&mut k[t], h, t);
        }
        let mut mixed = vec![vec![0.0; d]; n];
        for head in 0..h {
            let r = head * hd..(head + 1) * hd;
            for t in 0..n {
                let scores: Vec<f64> = (0..=t)
                    .map(|s| {
                        q[t][r.clone()]
                            .iter()
                            .zip(&k[s][r.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for (s, w) in e.iter().enumerate() {
                    for c in r.clone() {
                        mixed[t][c] += w / z * v[s][c];
                    }
                }
            }
        }
        for t in 0..n {
            let a = mat(&mixed[t], &wo, d);
            for c in 0..d {
                x[t][c] += a[c];
            }
            let nm = rms(&x[t], &layer.mlp_norm);
            let hid: Vec<f64> = mat(&nm, &up, cfg.d_ff).into_iter().map(gelu).collect();
            let m = mat(&hid, &down, d);
            for c in 0..d {
                x[t][c] += m[c];
            }
        }
    }
    let head = match &model.lm_head {
        Some(w) => w64(w),
        None => {
            let mut t = vec![0.0; d * cfg.vocab_size];
            for vi in 0..cfg.vocab_size {
                for c in 0..d {
                    t[c * cfg.vocab_size + vi] = emb[vi * d + c];
                }
            }
            t
        }
    };
    x.iter()
        .map(|r| mat(&rms(r, &model.final_norm), &head, cfg.vocab_size))
        .collect()
}

fn rms(x: &[f64], gain: &[f32]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    x.iter()
        .zip(gain)
        .map(|(v, g)| v * inv * *g as f64)
        .collect()
}

fn mat(x: &[f64], w: &[f64], out: usize) -> Vec<f64> {
    let mut y = vec![0.0; out];
    for (i, xi) in x.iter().enumerate() {
        for (j, yj) in y.iter_mut().enumerate() {
            *yj += xi * w[i * out + j];
        }
    }
    y
}

fn rope(x: &mut [f64], heads: usize, pos: usize) {
    let hd = x.len() / heads;
    let half = hd / 2;
    for head in x.chunks_mut(hd) {
        for j in 0..half {
            let theta = pos as f64 / 10000f64.powf(2.0 * j as f64 / hd as f64);
            let (a, b) = (head[j], head[j + half]);
            head[j] = a * theta.cos() - b * theta.sin();
            head[j + half] = a * theta.sin() + b * theta.cos();
        }
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Readout argmax and probabilities at every depth for every position,
/// computed position by position with a private KV store.
pub fn all_depth_readouts(model: &Model, tokens: &[u32]) -> Vec<Vec<Vec<f32>>> {
    let d = model.config.d_model;
    let l = model.n_layers();
    let mut keys = vec![Vec::new(); l];
    let mut values = vec![Vec::new(); l];
    let mut out = Vec::new();
    for (pos, &t) in tokens.iter().enumerate() {
        let mut h = model.embedding_row(t).unwrap().to_vec();
        let mut per_depth = Vec::new();
        for layer in 0..l {
            let step = model
                .run_layer(layer, &h, pos, KvView::new(&keys[layer], &values[layer]))
                .unwrap();
            keys[layer].extend_from_slice(&step.key);
            values[layer].extend_from_slice(&step.value);
            h = step.hidden;
            assert_eq!(h.len(), d);
            per_depth.push(model.readout(&h).unwrap());
        }
        out.push(per_depth);
    }
    out
}

/// Lowest index of the maximum.
pub fn first_argmax(p: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if p[i] > p[best] {
            best = i;
        }
    }
    best
}
