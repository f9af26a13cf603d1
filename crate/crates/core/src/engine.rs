//! Two-phase greedy generation with schedule-driven layer skipping.
//!
//! The prompt always runs through every layer (initiation phase) and yields
//! generated token 0. Each later token `i` is produced by feeding token
//! `i - 1` through `plan.kept_set(i)` only; skipped layers pass the residual
//! stream through unchanged and write no K/V.
//!
//! Rows of a batch are left-padded to a common length. The step index is
//! shared by the whole batch, and a row that finished keeps its index
//! frozen while the others advance.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::FlopsModel;
use crate::kvcache::{CacheError, FillPolicy, KvCache};
use crate::model::{Model, ModelError};
use crate::schedule::{KeptSet, LayerPlan};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("empty prompt in batch row {row}")]
    EmptyPrompt { row: usize },
    #[error("prompt of {len} tokens exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },
    #[error("schedule has {plan} layers but the model has {model}")]
    PlanMismatch { plan: usize, model: usize },
    #[error("invalid decode params: {0}")]
    InvalidParams(String),
    #[error("expected {expected} batch inputs, got {found}")]
    BatchMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub max_new_tokens: usize,
    pub eos_token: Option<u32>,
    pub batch_size: usize,
    /// Reserved; decoding is greedy.
    pub seed: u64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        Self {
            max_new_tokens: 32,
            eos_token: None,
            batch_size: 1,
            seed: 0,
        }
    }
}

impl DecodeParams {
    pub fn validate(&self) -> Result<(), EngineError> {
        if self.max_new_tokens == 0 {
            return Err(EngineError::InvalidParams(
                "max_new_tokens must be >= 1".into(),
            ));
        }
        if self.batch_size == 0 {
            return Err(EngineError::InvalidParams("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One generated token.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub token: u32,
    /// Probability of the chosen token.
    pub prob: f64,
    pub ppl: f64,
    /// Layers executed for this token.
    pub kept_count: usize,
    pub kept_set: KeptSet,
    /// Decoder matmul multiply-adds; step 0 carries the whole prompt pass.
    pub flops_exact: u64,
    pub flops_model: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenTrace {
    pub prompt_length: usize,
    pub steps: Vec<StepRecord>,
    pub missing_events: u64,
    /// Wall time of the batch this row was generated in.
    pub wall_ms: f64,
}

impl GenTrace {
    pub fn tokens(&self) -> Vec<u32> {
        self.steps.iter().map(|s| s.token).collect()
    }

    pub fn total_flops_exact(&self) -> u64 {
        self.steps.iter().map(|s| s.flops_exact).sum()
    }

    pub fn total_flops_model(&self) -> f64 {
        self.steps.iter().map(|s| s.flops_model).sum()
    }

    /// Same trace with timing removed, for equality checks.
    pub fn untimed(&self) -> GenTrace {
        GenTrace {
            wall_ms: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone)]
struct RowState {
    cache: KvCache,
    pad: usize,
    prompt_len: usize,
    /// Logical position of the next input token.
    next_pos: usize,
    hidden: Vec<f32>,
}

/// Per-batch decoding state produced by [`Engine::prefill`].
#[derive(Debug, Clone)]
pub struct BatchState {
    rows: Vec<RowState>,
    prefill_macs: Vec<u64>,
}

impl BatchState {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Residual stream at the newest processed position of `row`.
    pub fn last_hidden(&self, row: usize) -> &[f32] {
        &self.rows[row].hidden
    }

    pub fn cache(&self, row: usize) -> &KvCache {
        &self.rows[row].cache
    }

    pub fn next_position(&self, row: usize) -> usize {
        self.rows[row].next_pos
    }

    pub fn pad(&self, row: usize) -> usize {
        self.rows[row].pad
    }
}

/// Result of one decode step for one row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowStep {
    pub token: u32,
    pub prob: f32,
    /// Logical position of the input token that was processed.
    pub position: usize,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub kept_set: KeptSet,
    /// `None` for rows that were not fed an input.
    pub rows: Vec<Option<RowStep>>,
}

#[derive(Debug, Clone, Copy)]
pub struct Engine<'m> {
    model: &'m Model,
    policy: FillPolicy,
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m Model) -> Self {
        Self {
            model,
            policy: FillPolicy::Strict,
        }
    }

    pub fn with_policy(model: &'m Model, policy: FillPolicy) -> Self {
        Self { model, policy }
    }

    pub fn model(&self) -> &'m Model {
        self.model
    }

    pub fn policy(&self) -> FillPolicy {
        self.policy
    }

    /// Runs every prompt position through all layers, filling each row's
    /// cache for the prompt range.
    pub fn prefill(&self, prompts: &[Vec<u32>]) -> Result<BatchState, EngineError> {
        let cfg = &self.model.config;
        for (row, p) in prompts.iter().enumerate() {
            if p.is_empty() {
                return Err(EngineError::EmptyPrompt { row });
            }
            if p.len() > cfg.max_seq {
                return Err(EngineError::SequenceTooLong {
                    len: p.len(),
                    max_seq: cfg.max_seq,
                });
            }
        }
        let padded = prompts.iter().map(Vec::len).max().unwrap_or(0);
        let mut rows = Vec::with_capacity(prompts.len());
        let mut prefill_macs = Vec::with_capacity(prompts.len());
        for prompt in prompts {
            let pad = padded - prompt.len();
            let mut row = RowState {
                cache: KvCache::for_model(self.model, pad + cfg.max_seq, self.policy, pad),
                pad,
                prompt_len: prompt.len(),
                next_pos: 0,
                hidden: Vec::new(),
            };
            let full = KeptSet::full(cfg.n_layers);
            let mut macs = 0;
            for &token in prompt {
                macs += self.advance(&mut row, token, &full)?;
            }
            rows.push(row);
            prefill_macs.push(macs);
        }
        Ok(BatchState { rows, prefill_macs })
    }

    /// Processes `token` at the row's next position through `kept`.
    fn advance(&self, row: &mut RowState, token: u32, kept: &KeptSet) -> Result<u64, EngineError> {
        let model = self.model;
        let slot = row.pad + row.next_pos;
        let mut x = model.embedding_row(token)?.to_vec();
        let mut macs = 0;
        for layer in 0..model.n_layers() {
            if self.policy == FillPolicy::Reproject {
                row.cache.record_stream(layer, slot, &x)?;
            }
            if !kept.contains(layer) {
                continue;
            }
            let view = row.cache.view(layer, slot, Some(model))?;
            let step = model.run_layer(layer, &x, row.next_pos, view)?;
            row.cache.append(layer, slot, &step.key, &step.value)?;
            macs += step.macs;
            x = step.hidden;
        }
        row.hidden = x;
        row.next_pos += 1;
        Ok(macs)
    }

    /// Feeds `inputs[r]` (when present) to row `r` through the layers kept
    /// at `step`, then greedily picks the next token from the readout.
    pub fn decode_step(
        &self,
        plan: &dyn LayerPlan,
        state: &mut BatchState,
        step: usize,
        inputs: &[Option<u32>],
    ) -> Result<StepOutput, EngineError> {
        self.check_plan(plan)?;
        if inputs.len() != state.rows.len() {
            return Err(EngineError::BatchMismatch {
                expected: state.rows.len(),
                found: inputs.len(),
            });
        }
        let kept = plan.kept_set(step);
        let max_seq = self.model.config.max_seq;
        let mut rows = Vec::with_capacity(inputs.len());
        for (row, input) in state.rows.iter_mut().zip(inputs) {
            let Some(token) = *input else {
                rows.push(None);
                continue;
            };
            if row.next_pos >= max_seq {
                return Err(EngineError::SequenceTooLong {
                    len: row.next_pos + 1,
                    max_seq,
                });
            }
            let position = row.next_pos;
            let macs = self.advance(row, token, &kept)?;
            let (token, prob) = self.model.predict(&row.hidden)?;
            rows.push(Some(RowStep {
                token,
                prob,
                position,
                macs,
            }));
        }
        Ok(StepOutput {
            kept_set: kept,
            rows,
        })
    }

    fn check_plan(&self, plan: &dyn LayerPlan) -> Result<(), EngineError> {
        if plan.n_layers() != self.model.n_layers() {
            return Err(EngineError::PlanMismatch {
                plan: plan.n_layers(),
                model: self.model.n_layers(),
            });
        }
        Ok(())
    }

    /// Greedy generation for every prompt, in batches of
    /// `params.batch_size`. A row stops after emitting EOS, after
    /// `max_new_tokens`, or when its positions reach `max_seq`.
    pub fn generate(
        &self,
        plan: &dyn LayerPlan,
        prompts: &[Vec<u32>],
        params: &DecodeParams,
    ) -> Result<Vec<GenTrace>, EngineError> {
        params.validate()?;
        self.check_plan(plan)?;
        let mut traces = Vec::with_capacity(prompts.len());
        for chunk in prompts.chunks(params.batch_size) {
            traces.extend(self.generate_batch(plan, chunk, params)?);
        }
        Ok(traces)
    }

    fn generate_batch(
        &self,
        plan: &dyn LayerPlan,
        prompts: &[Vec<u32>],
        params: &DecodeParams,
    ) -> Result<Vec<GenTrace>, EngineError> {
        let cfg = &self.model.config;
        let fm = FlopsModel::for_config(cfg);
        let started = Instant::now();
        let mut state = self.prefill(prompts)?;
        let n_rows = prompts.len();

        let mut steps: Vec<Vec<StepRecord>> = vec![Vec::new(); n_rows];
        for (r, row_steps) in steps.iter_mut().enumerate() {
            let row = &state.rows[r];
            let (token, prob) = self.model.predict(&row.hidden)?;
            let flops_model = (0..row.prompt_len)
                .map(|pos| fm.flops_step(pos, cfg.n_layers))
                .sum();
            row_steps.push(record(
                0,
                token,
                prob,
                KeptSet::full(cfg.n_layers),
                state.prefill_macs[r],
                flops_model,
            ));
        }

        for step in 1..params.max_new_tokens {
            let inputs: Vec<Option<u32>> = (0..n_rows)
                .map(|r| {
                    let last = steps[r].last().map(|s| s.token)?;
                    let open = params.eos_token != Some(last)
                        && steps[r].len() == step
                        && state.rows[r].next_pos < cfg.max_seq;
                    open.then_some(last)
                })
                .collect();
            if inputs.iter().all(Option::is_none) {
                break;
            }
            let out = self.decode_step(plan, &mut state, step, &inputs)?;
            for (r, row) in out.rows.into_iter().enumerate() {
                if let Some(row) = row {
                    steps[r].push(record(
                        step,
                        row.token,
                        row.prob,
                        out.kept_set,
                        row.macs,
                        fm.flops_step(row.position, out.kept_set.len()),
                    ));
                }
            }
        }
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok(steps
            .into_iter()
            .zip(&state.rows)
            .map(|(steps, row)| GenTrace {
                prompt_length: row.prompt_len,
                steps,
                missing_events: row.cache.missing_events(),
                wall_ms,
            })
            .collect())
    }
}

fn record(
    step: usize,
    token: u32,
    prob: f32,
    kept_set: KeptSet,
    flops_exact: u64,
    flops_model: f64,
) -> StepRecord {
    let prob = prob as f64;
    StepRecord {
        step,
        token,
        prob,
        ppl: 1.0 / prob,
        kept_count: kept_set.len(),
        kept_set,
        flops_exact,
        flops_model,
    }
}

/// Fraction of positions, up to the shorter trace, with equal tokens.
/// Two empty traces agree fully.
pub fn agreement(a: &GenTrace, b: &GenTrace) -> f64 {
    token_agreement(&a.tokens(), &b.tokens())
}

pub fn token_agreement(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len().min(b.len());
    if n == 0 {
        return 1.0;
    }
    a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n as f64
}

#[derive(Serialize)]
struct TraceLine<'a> {
    row: usize,
    #[serde(flatten)]
    step: &'a StepRecord,
}

/// JSON lines, one record per step.
pub fn write_trace_jsonl<W: Write>(traces: &[GenTrace], mut out: W) -> std::io::Result<()> {
    for (row, t) in traces.iter().enumerate() {
        for step in &t.steps {
            serde_json::to_writer(&mut out, &TraceLine { row, step })?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// CSV summary, one row per sequence:
/// `row,prompt_length,tokens,avg_layers,total_flops_exact,total_flops_model,wall_ms`.
pub fn write_trace_summary_csv<W: Write>(traces: &[GenTrace], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "row",
        "prompt_length",
        "tokens",
        "avg_layers",
        "total_flops_exact",
        "total_flops_model",
        "wall_ms",
    ])?;
    for (row, t) in traces.iter().enumerate() {
        let tokens: Vec<String> = t.steps.iter().map(|s| s.token.to_string()).collect();
        let avg = crate::analysis::avg_layers(t).unwrap_or(0.0);
        w.write_record([
            row.to_string(),
            t.prompt_length.to_string(),
            tokens.join(" "),
            format!("{avg}"),
            t.total_flops_exact().to_string(),
            format!("{}", t.total_flops_model()),
            format!("{:.3}", t.wall_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}
