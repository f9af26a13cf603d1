//! Diagnostics over models and generation traces: per-token perplexity,
//! saturation depth, layer-to-layer flow similarity, FLOPs accounting and
//! the tail-copy error-propagation experiment.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::engine::{token_agreement, DecodeParams, Engine, EngineError, GenTrace};
use crate::kvcache::FillPolicy;
use crate::model::{Model, ModelConfig, ModelError};
use crate::schedule::{DepthSchedule, KeptSet, LayerPlan};
use crate::tensor::argmax;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("probability {0} is not positive")]
    NonPositiveProbability(f64),
    #[error("empty trace")]
    EmptyTrace,
    #[error("empty token sequence")]
    EmptySequence,
    #[error("tail copy of {k} layers needs 1 <= k < {n_layers}")]
    InvalidTailCount { k: usize, n_layers: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// `1 / p`.
pub fn token_ppl(p: f64) -> Result<f64, AnalysisError> {
    if p.is_nan() || p <= 0.0 {
        return Err(AnalysisError::NonPositiveProbability(p));
    }
    Ok(1.0 / p)
}

/// Per-token decoder cost.
///
/// `flops_step` follows the `c·d·(d + S)` per-layer template with `S` the
/// number of attended positions; `c = 4 + 2·d_ff/d` makes the `d²` term equal
/// the block's projection and MLP multiply-adds. `flops_exact` is the
/// literal matmul multiply-add count of one block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FlopsModel {
    pub d_model: usize,
    pub d_ff: usize,
    pub c: f64,
}

impl FlopsModel {
    pub fn for_config(cfg: &ModelConfig) -> Self {
        Self {
            d_model: cfg.d_model,
            d_ff: cfg.d_ff,
            c: 4.0 + 2.0 * cfg.d_ff as f64 / cfg.d_model as f64,
        }
    }

    pub fn flops_step(&self, position: usize, kept_count: usize) -> f64 {
        let d = self.d_model as f64;
        kept_count as f64 * self.c * d * (d + (position + 1) as f64)
    }

    /// QKV (3d²) + scores and weighted values (2·d·S) + output (d²) + MLP
    /// (2·d·d_ff) per kept block.
    pub fn flops_exact(&self, position: usize, kept_count: usize) -> u64 {
        let (d, f) = (self.d_model as u64, self.d_ff as u64);
        let s = position as u64 + 1;
        kept_count as u64 * (4 * d * d + 2 * d * s + 2 * d * f)
    }
}

/// Mean executed layers per generated token.
pub fn avg_layers(trace: &GenTrace) -> Result<f64, AnalysisError> {
    if trace.steps.is_empty() {
        return Err(AnalysisError::EmptyTrace);
    }
    Ok(trace.steps.iter().map(|s| s.kept_count).sum::<usize>() as f64 / trace.steps.len() as f64)
}

/// Mean over all generated tokens of a set of traces.
pub fn mean_avg_layers(traces: &[GenTrace]) -> Result<f64, AnalysisError> {
    let (sum, n) = traces
        .iter()
        .flat_map(|t| &t.steps)
        .fold((0usize, 0usize), |(s, n), st| (s + st.kept_count, n + 1));
    if n == 0 {
        return Err(AnalysisError::EmptyTrace);
    }
    Ok(sum as f64 / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Speedup {
    pub exact: f64,
    pub model: f64,
}

/// `Σ flops(baseline) / Σ flops(method)`, prompt pass included on both
/// sides.
pub fn speedup(traces: &[GenTrace], baseline: &[GenTrace]) -> Result<Speedup, AnalysisError> {
    let steps = |ts: &[GenTrace]| ts.iter().map(|t| t.steps.len()).sum::<usize>();
    if steps(traces) == 0 || steps(baseline) == 0 {
        return Err(AnalysisError::EmptyTrace);
    }
    let exact = |ts: &[GenTrace]| ts.iter().map(GenTrace::total_flops_exact).sum::<u64>() as f64;
    let model = |ts: &[GenTrace]| ts.iter().map(GenTrace::total_flops_model).sum::<f64>();
    Ok(Speedup {
        exact: exact(baseline) / exact(traces),
        model: model(baseline) / model(traces),
    })
}

/// Mean per-token PPL by generation step, over every trace long enough.
pub fn ppl_by_step(traces: &[GenTrace]) -> Vec<(usize, f64, usize)> {
    let longest = traces.iter().map(|t| t.steps.len()).max().unwrap_or(0);
    (0..longest)
        .map(|i| {
            let vals: Vec<f64> = traces
                .iter()
                .filter_map(|t| t.steps.get(i))
                .map(|s| s.ppl)
                .collect();
            (i, vals.iter().sum::<f64>() / vals.len() as f64, vals.len())
        })
        .collect()
}

/// Mean PPL over the first and last third of each trace's positions,
/// averaged across traces. Traces shorter than 3 steps are ignored.
pub fn ppl_thirds(traces: &[GenTrace]) -> Option<(f64, f64)> {
    let mut first = Vec::new();
    let mut last = Vec::new();
    for t in traces.iter().filter(|t| t.steps.len() >= 3) {
        let third = t.steps.len() / 3;
        let mean =
            |s: &[crate::engine::StepRecord]| s.iter().map(|x| x.ppl).sum::<f64>() / s.len() as f64;
        first.push(mean(&t.steps[..third]));
        last.push(mean(&t.steps[t.steps.len() - third..]));
    }
    if first.is_empty() {
        return None;
    }
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Some((avg(&first), avg(&last)))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaturationRecord {
    pub position: usize,
    /// Final-layer prediction.
    pub token: u32,
    /// Shallowest 1-based depth from which every deeper readout agrees with
    /// the final layer.
    pub depth: usize,
    /// Shallowest depth whose readout agrees, ignoring later disagreement.
    pub first_touch_depth: usize,
    /// Probability of the predicted token at `depth`.
    pub confidence: f64,
}

/// Saturation depth of the next-token prediction at every position.
pub fn saturation_depth(
    model: &Model,
    tokens: &[u32],
) -> Result<Vec<SaturationRecord>, AnalysisError> {
    if tokens.is_empty() {
        return Err(AnalysisError::EmptySequence);
    }
    let full = model.forward_full(tokens)?;
    let d = model.config.d_model;
    let l = model.n_layers();
    (0..tokens.len())
        .map(|pos| {
            let probs: Vec<Vec<f32>> = (0..l)
                .map(|layer| model.readout(full.hidden_at(layer, pos, d)))
                .collect::<Result<_, _>>()?;
            let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
            let last = preds[l - 1];
            let mut depth = l;
            while depth > 1 && preds[depth - 2] == last {
                depth -= 1;
            }
            let first_touch_depth = preds.iter().position(|p| *p == last).unwrap() + 1;
            Ok(SaturationRecord {
                position: pos,
                token: last as u32,
                depth,
                first_touch_depth,
                confidence: probs[depth - 1][last] as f64,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaturationSummary {
    pub tokens: usize,
    pub n_layers: usize,
    pub mean_depth: f64,
    pub max_depth: usize,
    pub mean_confidence: f64,
    /// Fraction of tokens saturated at or before `⌈mean_depth⌉`.
    pub coverage_at_mean: f64,
}

pub fn summarize_saturation(
    records: &[SaturationRecord],
    n_layers: usize,
) -> Option<SaturationSummary> {
    if records.is_empty() {
        return None;
    }
    let n = records.len() as f64;
    let mean_depth = records.iter().map(|r| r.depth as f64).sum::<f64>() / n;
    let cut = mean_depth.ceil() as usize;
    Some(SaturationSummary {
        tokens: records.len(),
        n_layers,
        mean_depth,
        max_depth: records.iter().map(|r| r.depth).max().unwrap_or(0),
        mean_confidence: records.iter().map(|r| r.confidence).sum::<f64>() / n,
        coverage_at_mean: records.iter().filter(|r| r.depth <= cut).count() as f64 / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    Hidden,
    Mlp,
    Attn,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::Hidden, Stream::Mlp, Stream::Attn];

    pub fn name(&self) -> &'static str {
        match self {
            Stream::Hidden => "hidden",
            Stream::Mlp => "mlp",
            Stream::Attn => "attn",
        }
    }
}

/// Similarity of one stream between blocks `layer` and `layer + 1`,
/// averaged over positions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlowRecord {
    pub layer: usize,
    pub stream: Stream,
    /// `None` when every position had a zero-norm vector.
    pub cosine: Option<f64>,
    pub euclidean: f64,
    /// Positions left out of the cosine mean for a zero norm.
    pub zero_norm_positions: usize,
}

pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (aa > 0.0 && bb > 0.0).then(|| ab / (aa.sqrt() * bb.sqrt()))
}

pub fn euclidean(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Cosine and Euclidean flow between consecutive blocks for the hidden,
/// MLP and attention streams.
pub fn layer_flow(model: &Model, tokens: &[u32]) -> Result<Vec<FlowRecord>, AnalysisError> {
    if tokens.is_empty() {
        return Err(AnalysisError::EmptySequence);
    }
    let full = model.forward_full(tokens)?;
    let d = model.config.d_model;
    let n = tokens.len();
    let mut out = Vec::new();
    for layer in 0..model.n_layers().saturating_sub(1) {
        for stream in Stream::ALL {
            let data = match stream {
                Stream::Hidden => &full.hidden,
                Stream::Mlp => &full.mlp,
                Stream::Attn => &full.attn,
            };
            let (a, b) = (&data[layer], &data[layer + 1]);
            let mut cos_sum = 0.0;
            let mut cos_n = 0;
            let mut euc = 0.0;
            for t in 0..n {
                let (x, y) = (&a[t * d..(t + 1) * d], &b[t * d..(t + 1) * d]);
                if let Some(c) = cosine(x, y) {
                    cos_sum += c;
                    cos_n += 1;
                }
                euc += euclidean(x, y);
            }
            out.push(FlowRecord {
                layer,
                stream,
                cosine: (cos_n > 0).then(|| cos_sum / cos_n as f64),
                euclidean: euc / n as f64,
                zero_norm_positions: n - cos_n,
            });
        }
    }
    Ok(out)
}

/// Identity-skips the top `k` layers from step `t0` on, optionally only for
/// `window` steps after which full depth resumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TailPerturbation {
    pub n_layers: usize,
    pub t0: usize,
    pub k: usize,
    pub window: Option<usize>,
}

impl TailPerturbation {
    pub fn new(
        n_layers: usize,
        t0: usize,
        k: usize,
        window: Option<usize>,
    ) -> Result<Self, AnalysisError> {
        if k == 0 || k >= n_layers {
            return Err(AnalysisError::InvalidTailCount { k, n_layers });
        }
        Ok(Self {
            n_layers,
            t0,
            k,
            window,
        })
    }

    fn active(&self, step: usize) -> bool {
        step >= self.t0 && self.window.is_none_or(|w| step < self.t0 + w)
    }
}

impl LayerPlan for TailPerturbation {
    fn n_layers(&self) -> usize {
        self.n_layers
    }

    fn kept_set(&self, step: usize) -> KeptSet {
        if self.active(step) {
            KeptSet::bottom(self.n_layers - self.k, self.n_layers)
        } else {
            KeptSet::full(self.n_layers)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ErrorPropPoint {
    pub t0: usize,
    pub k: usize,
    /// Mean token agreement with the full-depth run.
    pub agreement: f64,
    /// Mean task metric when a scorer was supplied.
    pub metric: Option<f64>,
    pub missing_events: u64,
}

pub type Scorer<'a> = dyn Fn(usize, &GenTrace) -> f64 + Sync + 'a;

/// Runs the tail-copy experiment for every `(t0, k)` pair. Missing K/V
/// entries (only possible with a finite `window`) go through `policy`.
#[allow(clippy::too_many_arguments)]
pub fn error_prop_run(
    model: &Model,
    prompts: &[Vec<u32>],
    t0s: &[usize],
    ks: &[usize],
    window: Option<usize>,
    policy: FillPolicy,
    params: &DecodeParams,
    scorer: Option<&Scorer<'_>>,
) -> Result<Vec<ErrorPropPoint>, AnalysisError> {
    let engine = Engine::with_policy(model, policy);
    let l = model.n_layers();
    let reference = engine.generate(&DepthSchedule::full(l).expect("l >= 1"), prompts, params)?;
    let cells: Vec<(usize, usize)> = ks
        .iter()
        .flat_map(|&k| t0s.iter().map(move |&t0| (t0, k)))
        .collect();
    cells
        .par_iter()
        .map(|&(t0, k)| {
            let plan = TailPerturbation::new(l, t0, k, window)?;
            let traces = engine.generate(&plan, prompts, params)?;
            let n = traces.len().max(1) as f64;
            let agreement = traces
                .iter()
                .zip(&reference)
                .map(|(a, b)| token_agreement(&a.tokens(), &b.tokens()))
                .sum::<f64>()
                / n;
            let metric =
                scorer.map(|f| traces.iter().enumerate().map(|(i, t)| f(i, t)).sum::<f64>() / n);
            Ok(ErrorPropPoint {
                t0,
                k,
                agreement,
                metric,
                missing_events: traces.iter().map(|t| t.missing_events).sum(),
            })
        })
        .collect()
}

pub fn write_saturation_csv<W: Write>(records: &[SaturationRecord], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "token_pos",
        "depth",
        "confidence",
        "first_touch_depth",
        "token",
    ])?;
    for r in records {
        w.write_record([
            r.position.to_string(),
            r.depth.to_string(),
            format!("{}", r.confidence),
            r.first_touch_depth.to_string(),
            r.token.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `layer_pair,stream,cosine,euclidean`, with an optional leading
/// checkpoint-step column.
pub fn write_flow_csv<W: Write>(rows: &[(Option<u64>, FlowRecord)], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let with_step = rows.iter().any(|(s, _)| s.is_some());
    let mut header = vec!["layer_pair", "stream", "cosine", "euclidean"];
    if with_step {
        header.insert(0, "checkpoint_step");
    }
    w.write_record(&header)?;
    for (step, r) in rows {
        let mut rec = vec![
            format!("{}-{}", r.layer, r.layer + 1),
            r.stream.name().to_string(),
            r.cosine.map(|c| c.to_string()).unwrap_or_default(),
            r.euclidean.to_string(),
        ];
        if with_step {
            rec.insert(0, step.map(|s| s.to_string()).unwrap_or_default());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_errorprop_csv<W: Write>(points: &[ErrorPropPoint], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t0", "k", "agreement", "metric", "missing_events"])?;
    for p in points {
        w.write_record([
            p.t0.to_string(),
            p.k.to_string(),
            p.agreement.to_string(),
            p.metric.map(|m| m.to_string()).unwrap_or_default(),
            p.missing_events.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
