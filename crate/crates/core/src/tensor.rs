//! Dense f32 kernels used by the decoder.
//!
//! Matrices are row-major `[in × out]` and applied to row vectors, so a
//! projection is `y = x · W`. Every kernel accumulates in a fixed order, which
//! keeps results bitwise reproducible across calls and batch layouts.
//! Storage is f32; reductions accumulate in f64.

/// RMS normalisation epsilon.
pub const RMS_EPS: f32 = 1e-5;

/// Base of the rotary frequency ladder.
pub const ROPE_BASE: f64 = 10_000.0;

/// `out = x · w` where `w` is `[x.len() × out_dim]` row-major.
pub fn matvec(x: &[f32], w: &[f32], out_dim: usize) -> Vec<f32> {
    debug_assert_eq!(w.len(), x.len() * out_dim);
    let mut acc = vec![0.0f64; out_dim];
    for (&xi, row) in x.iter().zip(w.chunks_exact(out_dim)) {
        let xi = xi as f64;
        for (o, &wij) in acc.iter_mut().zip(row) {
            *o += xi * wij as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + x as f64 * y as f64) as f32
}

pub fn add_assign(acc: &mut [f32], x: &[f32]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// RMS norm with learned gain.
pub fn rms_norm(x: &[f32], gain: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS as f64).sqrt();
    x.iter()
        .zip(gain)
        .map(|(&v, &g)| (v as f64 * inv * g as f64) as f32)
        .collect()
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(x: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    for v in x.iter_mut() {
        *v = (*v as f64 / sum) as f32;
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f32) -> f32 {
    const SQRT_2_OVER_PI: f32 = 0.797_884_6;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

/// Rotary embedding over every head of `x`, half-split pairing: dimension `j`
/// rotates with `j + head_dim / 2`. An odd trailing dimension is left as is.
pub fn apply_rope(x: &mut [f32], n_heads: usize, pos: usize) {
    let head_dim = x.len() / n_heads;
    let half = head_dim / 2;
    if half == 0 {
        return;
    }
    for head in x.chunks_exact_mut(head_dim) {
        for j in 0..half {
            let freq = ROPE_BASE.powf(-2.0 * j as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            let (sin, cos) = (angle.sin() as f32, angle.cos() as f32);
            let (a, b) = (head[j], head[j + half]);
            head[j] = a * cos - b * sin;
            head[j + half] = a * sin + b * cos;
        }
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(x: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in x.iter().enumerate() {
        if *v > x[best] {
            best = i;
        }
    }
    best
}
