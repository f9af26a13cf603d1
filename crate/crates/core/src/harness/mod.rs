//! Task evaluation: synthetic and file-backed datasets, few-shot prompting,
//! exact-match scoring, the hyperparameter grid and the benchmark report.

mod bench;
mod grid;
mod manifest;
pub mod tasks;

pub use bench::{
    run_benchmark, run_benchmark_with, BenchReport, ExperimentConfig, MetricsReport, TaskMetrics,
};
pub use grid::{
    grid_search, transfer_check, FullDepthResult, GridSpec, HPCell, HPResult, TransferReport,
    DEFAULT_ALPHAS, DEFAULT_STARTS,
};
pub use manifest::{flow_over_checkpoints, CheckpointEntry, CheckpointManifest};
pub use tasks::{exact_match, few_shot_prompt, Example, Split, TaskData, TaskName, Vocab};

use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use thiserror::Error;

use crate::analysis::{mean_avg_layers, AnalysisError};
use crate::engine::{DecodeParams, Engine, EngineError, GenTrace};
use crate::kvcache::FillPolicy;
use crate::model::{Model, ModelError};
use crate::schedule::{LayerPlan, ScheduleError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("bad data: {0}")]
    Data(String),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, e: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    /// True for mistakes in flags or config files, false for problems with
    /// data, weights or execution.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            HarnessError::ConfigInvalid(_)
                | HarnessError::EmptyGrid
                | HarnessError::Schedule(_)
                | HarnessError::Engine(
                    EngineError::InvalidParams(_) | EngineError::PlanMismatch { .. }
                )
        )
    }
}

/// Reads and validates a `D3W1` file.
pub fn load_model(path: &Path) -> Result<Model, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    Ok(Model::from_bytes(&bytes)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSettings {
    pub shots: usize,
    pub max_new_tokens: usize,
    pub batch_size: usize,
    pub policy: FillPolicy,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            shots: 3,
            max_new_tokens: 16,
            batch_size: 8,
            policy: FillPolicy::Strict,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalResult {
    pub traces: Vec<GenTrace>,
    pub predictions: Vec<String>,
    pub scores: Vec<u8>,
    pub wall_ms: f64,
}

impl EvalResult {
    pub fn metric(&self) -> f64 {
        if self.scores.is_empty() {
            return 0.0;
        }
        self.scores.iter().map(|&s| s as f64).sum::<f64>() / self.scores.len() as f64
    }

    pub fn avg_layers(&self) -> Result<f64, HarnessError> {
        Ok(mean_avg_layers(&self.traces)?)
    }
}

/// Few-shot greedy evaluation of one model under any layer plan.
pub struct Evaluator<'a> {
    model: &'a Model,
    vocab: &'a Vocab,
    settings: EvalSettings,
    eos: u32,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        model: &'a Model,
        vocab: &'a Vocab,
        settings: EvalSettings,
    ) -> Result<Self, HarnessError> {
        if vocab.len() > model.config.vocab_size {
            return Err(HarnessError::ConfigInvalid(format!(
                "vocab has {} entries but the model only {}",
                vocab.len(),
                model.config.vocab_size
            )));
        }
        if settings.batch_size == 0 || settings.max_new_tokens == 0 {
            return Err(HarnessError::ConfigInvalid(
                "batch size and max_new_tokens must be positive".into(),
            ));
        }
        let eos = vocab
            .id('\n')
            .ok_or_else(|| HarnessError::Data("vocab has no newline token".into()))?;
        Ok(Self {
            model,
            vocab,
            settings,
            eos,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn settings(&self) -> &EvalSettings {
        &self.settings
    }

    pub fn params(&self) -> DecodeParams {
        DecodeParams {
            max_new_tokens: self.settings.max_new_tokens,
            eos_token: Some(self.eos),
            batch_size: self.settings.batch_size,
            seed: 0,
        }
    }

    /// Token ids of the few-shot prompt for each example; shots are the
    /// first `shots` entries of `shot_pool`.
    pub fn prompts(
        &self,
        shot_pool: &[Example],
        examples: &[Example],
    ) -> Result<Vec<Vec<u32>>, HarnessError> {
        let shots = &shot_pool[..self.settings.shots.min(shot_pool.len())];
        examples
            .iter()
            .map(|e| self.vocab.encode(&few_shot_prompt(shots, &e.input)))
            .collect()
    }

    /// Batches run in parallel; results keep example order.
    pub fn evaluate(
        &self,
        plan: &dyn LayerPlan,
        shot_pool: &[Example],
        examples: &[Example],
    ) -> Result<EvalResult, HarnessError> {
        let started = Instant::now();
        let prompts = self.prompts(shot_pool, examples)?;
        let engine = Engine::with_policy(self.model, self.settings.policy);
        let params = self.params();
        let batches: Vec<Vec<GenTrace>> = prompts
            .par_chunks(self.settings.batch_size)
            .map(|chunk| engine.generate(plan, chunk, &params))
            .collect::<Result<_, _>>()?;
        let traces: Vec<GenTrace> = batches.into_iter().flatten().collect();
        let predictions: Vec<String> = traces
            .iter()
            .map(|t| tasks::extract_answer(self.vocab, &t.tokens()))
            .collect();
        let scores = predictions
            .iter()
            .zip(examples)
            .map(|(p, e)| exact_match(p, &e.target))
            .collect();
        Ok(EvalResult {
            traces,
            predictions,
            scores,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

#[cfg(test)]
pub(crate) fn test_model(n_layers: usize, seed: u64) -> Model {
    Model::random(
        crate::model::ModelConfig {
            vocab_size: 70,
            d_model: 16,
            n_layers,
            n_heads: 2,
            d_ff: 32,
            max_seq: 160,
            tied_lm_head: true,
        },
        seed,
    )
    .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::DepthSchedule;

    #[test]
    fn evaluation_is_batch_invariant_and_ordered() {
        let model = test_model(4, 1);
        let vocab = Vocab::default();
        let data = TaskData::synthetic(TaskName::Sort, 20, 6, 3);
        let split = data.split(0.1, 0).unwrap();
        let plan = DepthSchedule::d3(4, 0.5, 0.9, 1).unwrap();
        let run = |batch_size| {
            let settings = EvalSettings {
                batch_size,
                max_new_tokens: 6,
                ..Default::default()
            };
            Evaluator::new(&model, &vocab, settings)
                .unwrap()
                .evaluate(&plan, &split.shot_pool, &split.test)
                .unwrap()
        };
        let (a, b) = (run(1), run(4));
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.scores.len(), 6);
        for (x, y) in a.traces.iter().zip(&b.traces) {
            assert_eq!(x.untimed(), y.untimed());
        }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let model = test_model(2, 0);
        let vocab = Vocab::default();
        let ev = Evaluator::new(&model, &vocab, EvalSettings::default()).unwrap();
        let r = ev
            .evaluate(
                &DepthSchedule::full(2).unwrap(),
                &[],
                &[Example {
                    input: "ab".into(),
                    target: "ab".into(),
                }],
            )
            .unwrap();
        let expected = exact_match(&r.predictions[0], "ab") as f64;
        assert_eq!(r.metric(), expected);
    }

    #[test]
    fn error_classification() {
        assert!(HarnessError::EmptyGrid.is_config_error());
        assert!(HarnessError::ConfigInvalid("x".into()).is_config_error());
        assert!(!HarnessError::Data("x".into()).is_config_error());
        assert!(!HarnessError::Model(ModelError::BadMagic { found: *b"XXXX" }).is_config_error());
    }

    #[test]
    fn small_model_vocab_is_rejected() {
        let model = Model::random(crate::model::tiny_config(), 0).unwrap();
        let vocab = Vocab::default();
        assert!(matches!(
            Evaluator::new(&model, &vocab, EvalSettings::default()),
            Err(HarnessError::ConfigInvalid(_))
        ));
    }
}
