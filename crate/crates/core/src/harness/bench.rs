use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_model, EvalSettings, Evaluator, HarnessError, Split, TaskData, TaskName, Vocab};
use crate::analysis::{mean_avg_layers, speedup};
use crate::engine::GenTrace;
use crate::kvcache::FillPolicy;
use crate::model::Model;
use crate::schedule::{DepthSchedule, ScheduleKind};

/// Benchmark configuration, usually read from TOML. Missing keys take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: Option<PathBuf>,
    pub tasks: Vec<TaskName>,
    /// Schedule config strings; the full-depth row is always added.
    pub schedules: Vec<String>,
    /// Holds `<task>/train.jsonl` and `<task>/test.jsonl`; synthetic data
    /// is generated when absent.
    pub data_dir: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub n_train: usize,
    pub n_test: usize,
    pub validation_fraction: f64,
    pub shots: usize,
    pub max_new_tokens: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub fill_policy: FillPolicy,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: None,
            tasks: vec![TaskName::Sort, TaskName::Modarith],
            schedules: Vec::new(),
            data_dir: None,
            vocab: None,
            n_train: 200,
            n_test: 100,
            validation_fraction: 0.1,
            shots: 3,
            max_new_tokens: 16,
            batch_size: 8,
            seed: 0,
            fill_policy: FillPolicy::Strict,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn settings(&self) -> EvalSettings {
        EvalSettings {
            shots: self.shots,
            max_new_tokens: self.max_new_tokens,
            batch_size: self.batch_size,
            policy: self.fill_policy,
        }
    }

    pub fn load_vocab(&self) -> Result<Vocab, HarnessError> {
        match &self.vocab {
            Some(p) => Vocab::load(p),
            None => Ok(Vocab::default()),
        }
    }

    /// One split per configured task.
    pub fn load_splits(&self) -> Result<Vec<Split>, HarnessError> {
        if self.tasks.is_empty() {
            return Err(HarnessError::ConfigInvalid("no tasks configured".into()));
        }
        self.tasks
            .iter()
            .map(|&task| {
                let data = match &self.data_dir {
                    Some(dir) => TaskData::load_dir(task, &dir.join(task.to_string()))?,
                    None => TaskData::synthetic(task, self.n_train, self.n_test, self.seed),
                };
                data.split(self.validation_fraction, self.seed)
            })
            .collect()
    }

    /// Parsed schedules with full depth first and duplicates of it removed.
    pub fn parse_schedules(&self, n_layers: usize) -> Result<Vec<DepthSchedule>, HarnessError> {
        let mut out = vec![DepthSchedule::full(n_layers)?];
        for text in &self.schedules {
            let s = DepthSchedule::parse_config(text, Some(n_layers), Some(self.max_new_tokens))?;
            if s.n_layers() != n_layers {
                return Err(HarnessError::ConfigInvalid(format!(
                    "schedule `{text}` has {} layers, the model {n_layers}",
                    s.n_layers()
                )));
            }
            if *s.kind() != ScheduleKind::FullDepth {
                out.push(s);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskMetrics {
    pub n: usize,
    pub exact_match: f64,
    pub avg_layers: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub schedule: String,
    pub exact_match: f64,
    pub avg_layers: f64,
    pub speedup_exact: f64,
    pub speedup_model: f64,
    pub wall_ms: f64,
    pub per_task: BTreeMap<String, TaskMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub n_layers: usize,
    pub rows: Vec<MetricsReport>,
}

impl BenchReport {
    /// Same report with every wall-clock field zeroed.
    pub fn untimed(&self) -> Self {
        let mut r = self.clone();
        for row in &mut r.rows {
            row.wall_ms = 0.0;
        }
        r
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// One line per schedule and task, plus an `all` line per schedule.
    pub fn write_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "schedule",
            "task",
            "n",
            "exact_match",
            "avg_layers",
            "speedup_exact",
            "speedup_model",
            "wall_ms",
        ])?;
        for r in &self.rows {
            let n: usize = r.per_task.values().map(|t| t.n).sum();
            w.write_record([
                r.schedule.clone(),
                "all".into(),
                n.to_string(),
                r.exact_match.to_string(),
                r.avg_layers.to_string(),
                r.speedup_exact.to_string(),
                r.speedup_model.to_string(),
                r.wall_ms.to_string(),
            ])?;
            for (task, t) in &r.per_task {
                w.write_record([
                    r.schedule.clone(),
                    task.clone(),
                    t.n.to_string(),
                    t.exact_match.to_string(),
                    t.avg_layers.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Loads model, vocab and data from `config` and runs every schedule on
/// every task's test split.
pub fn run_benchmark(config: &ExperimentConfig) -> Result<BenchReport, HarnessError> {
    let path = config
        .model
        .as_ref()
        .ok_or_else(|| HarnessError::ConfigInvalid("no model path".into()))?;
    let model = load_model(path)?;
    let vocab = config.load_vocab()?;
    let splits = config.load_splits()?;
    let schedules = config.parse_schedules(model.n_layers())?;
    run_benchmark_with(&model, &vocab, &splits, &schedules, config.settings())
}

/// `schedules[0]` must be full depth; speedups are relative to it.
pub fn run_benchmark_with(
    model: &Model,
    vocab: &Vocab,
    splits: &[Split],
    schedules: &[DepthSchedule],
    settings: EvalSettings,
) -> Result<BenchReport, HarnessError> {
    match schedules.first() {
        Some(s) if *s.kind() == ScheduleKind::FullDepth => {}
        _ => {
            return Err(HarnessError::ConfigInvalid(
                "first schedule must be full depth".into(),
            ))
        }
    }
    if splits.iter().any(|s| s.test.is_empty()) {
        return Err(HarnessError::EmptySplit("test"));
    }
    let ev = Evaluator::new(model, vocab, settings)?;
    let mut baseline: Vec<GenTrace> = Vec::new();
    let mut rows = Vec::with_capacity(schedules.len());
    for schedule in schedules {
        let mut all: Vec<GenTrace> = Vec::new();
        let mut scores: Vec<u8> = Vec::new();
        let mut per_task = BTreeMap::new();
        let mut wall_ms = 0.0;
        for split in splits {
            let r = ev.evaluate(schedule, &split.shot_pool, &split.test)?;
            wall_ms += r.wall_ms;
            per_task.insert(
                split.task.to_string(),
                TaskMetrics {
                    n: r.scores.len(),
                    exact_match: r.metric(),
                    avg_layers: r.avg_layers()?,
                },
            );
            scores.extend(&r.scores);
            all.extend(r.traces);
        }
        if baseline.is_empty() {
            baseline = all.clone();
        }
        let sp = speedup(&all, &baseline)?;
        rows.push(MetricsReport {
            schedule: schedule.label(),
            exact_match: scores.iter().map(|&s| s as f64).sum::<f64>() / scores.len().max(1) as f64,
            avg_layers: mean_avg_layers(&all)?,
            speedup_exact: sp.exact,
            speedup_model: sp.model,
            wall_ms,
            per_task,
        });
    }
    Ok(BenchReport {
        n_layers: model.n_layers(),
        rows,
    })
}
