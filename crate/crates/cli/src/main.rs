//! `d3`: layer-skipping generation, benchmarks and diagnostics.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or model error.

use std::fs::File;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use d3_core::analysis::{
    error_prop_run, layer_flow, saturation_depth, summarize_saturation, write_errorprop_csv,
    write_flow_csv, write_saturation_csv,
};
use d3_core::engine::{write_trace_jsonl, write_trace_summary_csv};
use d3_core::harness::{
    flow_over_checkpoints, grid_search, load_model, run_benchmark, transfer_check,
    CheckpointManifest, EvalSettings, ExperimentConfig, GridSpec, HarnessError, Split, TaskData,
    TaskName, Vocab,
};
use d3_core::schedule::schedule_table;
use d3_core::{DecodeParams, DepthSchedule, Engine, FillPolicy, Model, ModelConfig};

#[derive(Parser)]
#[command(
    name = "d3",
    version,
    about = "Layer-skipping decoding for small transformers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a randomly initialised model file.
    Init(InitArgs),
    /// Generate continuations under one schedule.
    Generate(GenerateArgs),
    /// Full-depth baseline plus every configured schedule on task test sets.
    Bench(BenchArgs),
    /// Search start and alpha on the validation split.
    Grid(GridArgs),
    /// Rank a small model's best cell in a larger model's grid.
    Transfer(TransferArgs),
    /// Per-token saturation depth of the full-depth model.
    Oracle(OracleArgs),
    /// Layer-to-layer cosine and distance of hidden, attention and MLP streams.
    Flow(FlowArgs),
    /// Tail-copy error propagation against full depth.
    Errorprop(ErrorpropArgs),
    /// Kept layers per generation step.
    ScheduleTable(ScheduleTableArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Strict,
    TensorCopy,
    Reproject,
}

impl From<Policy> for FillPolicy {
    fn from(p: Policy) -> Self {
        match p {
            Policy::Strict => FillPolicy::Strict,
            Policy::TensorCopy => FillPolicy::TensorCopy,
            Policy::Reproject => FillPolicy::Reproject,
        }
    }
}

#[derive(Args)]
struct OutputArgs {
    /// Output file; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
}

#[derive(Args)]
struct ScheduleArgs {
    /// File with `key=value` schedule settings.
    #[arg(long)]
    schedule: Option<PathBuf>,
    /// full, d3, linear_head or constant_tail.
    #[arg(long)]
    kind: Option<String>,
    #[arg(long)]
    start: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tail_min: Option<usize>,
    #[arg(long)]
    upper: Option<usize>,
    #[arg(long)]
    lower: Option<usize>,
    #[arg(long)]
    ramp: Option<usize>,
    #[arg(long)]
    exit_layer: Option<usize>,
}

impl ScheduleArgs {
    fn build(&self, n_layers: usize, max_new: usize) -> Result<DepthSchedule, CliError> {
        let mut text = match &self.schedule {
            Some(p) => read_text(p)?,
            None => String::new(),
        };
        let kind = self
            .kind
            .clone()
            .or_else(|| self.alpha.map(|_| "d3".to_string()))
            .or_else(|| self.schedule.is_none().then(|| "full".to_string()));
        let flags = [
            ("kind", kind),
            ("start", self.start.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("tail_min", self.tail_min.map(|v| v.to_string())),
            ("upper", self.upper.map(|v| v.to_string())),
            ("lower", self.lower.map(|v| v.to_string())),
            ("ramp", self.ramp.map(|v| v.to_string())),
            ("exit_layer", self.exit_layer.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                text.push_str(&format!("\n{k}={v}"));
            }
        }
        let s = DepthSchedule::parse_config(&text, Some(n_layers), Some(max_new))
            .map_err(HarnessError::from)?;
        if s.n_layers() != n_layers {
            return Err(CliError::config(format!(
                "schedule has {} layers, the model {n_layers}",
                s.n_layers()
            )));
        }
        Ok(s)
    }
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long, value_enum, default_value = "sort")]
    task: TaskArg,
    /// Directory with train.jsonl and test.jsonl; synthetic data otherwise.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Vocab JSON (`{"tokens": [...]}`); built-in character vocab otherwise.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    n_train: usize,
    #[arg(long, default_value_t = 50)]
    n_test: usize,
    #[arg(long, default_value_t = 0.1)]
    val_fraction: f64,
    #[arg(long, default_value_t = 3)]
    shots: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Sort,
    Modarith,
}

impl From<TaskArg> for TaskName {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Sort => TaskName::Sort,
            TaskArg::Modarith => TaskName::Modarith,
        }
    }
}

impl TaskArgs {
    fn vocab(&self) -> Result<Vocab, CliError> {
        Ok(match &self.vocab {
            Some(p) => Vocab::load(p)?,
            None => Vocab::default(),
        })
    }

    fn split(&self) -> Result<Split, CliError> {
        let task = self.task.into();
        let data = match &self.data {
            Some(dir) => TaskData::load_dir(task, dir)?,
            None => TaskData::synthetic(task, self.n_train, self.n_test, self.seed),
        };
        Ok(data.split(self.val_fraction, self.seed)?)
    }

    /// Explicit prompts when given, else few-shot prompts for the test split.
    fn prompts(
        &self,
        vocab: &Vocab,
        explicit: &[String],
        limit: usize,
    ) -> Result<Vec<Vec<u32>>, CliError> {
        if !explicit.is_empty() {
            return explicit
                .iter()
                .map(|p| Ok(vocab.encode(&p.replace("\\n", "\n"))?))
                .collect();
        }
        let split = self.split()?;
        let shots = &split.shot_pool[..self.shots.min(split.shot_pool.len())];
        split
            .test
            .iter()
            .take(limit)
            .map(|e| Ok(vocab.encode(&d3_core::harness::few_shot_prompt(shots, &e.input))?))
            .collect()
    }
}

#[derive(Args)]
struct InitArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 70)]
    vocab_size: usize,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 8)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    d_ff: usize,
    #[arg(long, default_value_t = 256)]
    max_seq: usize,
    #[arg(long)]
    untied: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Prompt text (`\n` escapes allowed); repeatable. Task prompts otherwise.
    #[arg(long)]
    prompt: Vec<String>,
    /// Number of task prompts when no --prompt is given.
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 32)]
    max_new: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    /// Token id that ends a row; the newline token when absent.
    #[arg(long)]
    eos: Option<u32>,
    #[arg(long, value_enum, default_value = "strict")]
    policy: Policy,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's model path.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Extra schedule strings such as `kind=d3,start=0.6,alpha=0.9`.
    #[arg(long = "schedule-str")]
    schedules: Vec<String>,
    #[arg(long, value_enum)]
    task: Vec<TaskArg>,
    #[arg(long)]
    max_new: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    policy: Option<Policy>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct GridOptions {
    #[arg(long, value_delimiter = ',')]
    starts: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1)]
    tail_min: usize,
    #[arg(long, default_value_t = 16)]
    max_new: usize,
    #[arg(long, default_value_t = 8)]
    batch: usize,
}

impl GridOptions {
    fn spec(&self) -> GridSpec {
        let d = GridSpec::default();
        GridSpec {
            starts: self.starts.clone().unwrap_or(d.starts),
            alphas: self.alphas.clone().unwrap_or(d.alphas),
            tail_min: self.tail_min,
        }
    }

    fn settings(&self, shots: usize) -> EvalSettings {
        EvalSettings {
            shots,
            max_new_tokens: self.max_new,
            batch_size: self.batch,
            policy: FillPolicy::Strict,
        }
    }
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    grid: GridOptions,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    small: PathBuf,
    #[arg(long)]
    large: PathBuf,
    #[command(flatten)]
    grid: GridOptions,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct OracleArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    prompt: Vec<String>,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct FlowArgs {
    #[arg(long, required_unless_present = "manifest")]
    model: Option<PathBuf>,
    /// Checkpoint manifest; adds a checkpoint_step column.
    #[arg(long, conflicts_with = "model")]
    manifest: Option<PathBuf>,
    #[arg(long)]
    prompt: Vec<String>,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ErrorpropArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    t0: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    k: Vec<usize>,
    /// Steps the tail copy stays active; forever when absent.
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, value_enum, default_value = "tensor-copy")]
    policy: Policy,
    #[arg(long)]
    prompt: Vec<String>,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 16)]
    max_new: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[command(flatten)]
    task: TaskArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct ScheduleTableArgs {
    #[arg(long)]
    layers: usize,
    #[arg(long, default_value_t = 32)]
    steps: usize,
    #[command(flatten)]
    schedule: ScheduleArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug)]
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    fn data(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        if e.is_config_error() {
            Self::config(e.to_string())
        } else {
            Self::data(e.to_string())
        }
    }
}

macro_rules! via_harness {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                HarnessError::from(e).into()
            }
        }
    )*};
}
via_harness!(
    d3_core::EngineError,
    d3_core::ModelError,
    d3_core::AnalysisError,
    d3_core::ScheduleError
);

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        Self::data(e.to_string())
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn sink(out: &Option<PathBuf>) -> Result<Box<dyn Write>, CliError> {
    Ok(match out {
        Some(p) => {
            Box::new(File::create(p).map_err(|e| CliError::data(format!("{}: {e}", p.display())))?)
        }
        None => Box::new(io::stdout().lock()),
    })
}

fn write_json<T: serde::Serialize>(out: &Option<PathBuf>, value: &T) -> Result<(), CliError> {
    let mut w = sink(out)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::data(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

fn csv_err(e: impl std::fmt::Display) -> CliError {
    CliError::data(e.to_string())
}

fn model_at(path: &Path) -> Result<Model, CliError> {
    Ok(load_model(path)?)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Init(a) => {
            let cfg = ModelConfig {
                vocab_size: a.vocab_size,
                d_model: a.d_model,
                n_layers: a.layers,
                n_heads: a.heads,
                d_ff: a.d_ff,
                max_seq: a.max_seq,
                tied_lm_head: !a.untied,
            };
            let model = Model::random(cfg, a.seed).map_err(|e| CliError::config(e.to_string()))?;
            std::fs::write(&a.out, model.to_bytes())
                .map_err(|e| CliError::data(format!("{}: {e}", a.out.display())))?;
        }
        Command::Generate(a) => {
            let model = model_at(&a.model)?;
            let vocab = a.task.vocab()?;
            let plan = a.schedule.build(model.n_layers(), a.max_new)?;
            let prompts = a.task.prompts(&vocab, &a.prompt, a.n)?;
            let params = DecodeParams {
                max_new_tokens: a.max_new,
                eos_token: a.eos.or(vocab.id('\n')),
                batch_size: a.batch,
                seed: a.task.seed,
            };
            let traces =
                Engine::with_policy(&model, a.policy.into()).generate(&plan, &prompts, &params)?;
            let w = sink(&a.output.out)?;
            match a.output.format {
                Format::Json => write_trace_jsonl(&traces, w)?,
                Format::Csv => write_trace_summary_csv(&traces, w).map_err(csv_err)?,
            }
        }
        Command::Bench(a) => {
            let mut cfg = match &a.config {
                Some(p) => ExperimentConfig::load(p)?,
                None => ExperimentConfig::default(),
            };
            if a.model.is_some() {
                cfg.model = a.model;
            }
            cfg.schedules.extend(a.schedules);
            if !a.task.is_empty() {
                cfg.tasks = a.task.into_iter().map(Into::into).collect();
            }
            cfg.max_new_tokens = a.max_new.unwrap_or(cfg.max_new_tokens);
            cfg.batch_size = a.batch.unwrap_or(cfg.batch_size);
            cfg.shots = a.shots.unwrap_or(cfg.shots);
            cfg.n_test = a.n_test.unwrap_or(cfg.n_test);
            cfg.seed = a.seed.unwrap_or(cfg.seed);
            if let Some(p) = a.policy {
                cfg.fill_policy = p.into();
            }
            let report = run_benchmark(&cfg)?;
            match a.output.format {
                Format::Json => write_json(&a.output.out, &report)?,
                Format::Csv => report.write_csv(sink(&a.output.out)?).map_err(csv_err)?,
            }
        }
        Command::Grid(a) => {
            let model = model_at(&a.model)?;
            let vocab = a.task.vocab()?;
            let split = a.task.split()?;
            let result = grid_search(
                &model,
                &vocab,
                &split,
                &a.grid.spec(),
                a.grid.settings(a.task.shots),
            )?;
            match a.output.format {
                Format::Json => write_json(&a.output.out, &result)?,
                Format::Csv => {
                    let mut w = sink(&a.output.out)?;
                    writeln!(
                        w,
                        "start,alpha,val_metric,test_metric,val_avg_layers,test_avg_layers"
                    )?;
                    for c in &result.cells {
                        writeln!(
                            w,
                            "{},{},{},{},{},{}",
                            c.start,
                            c.alpha,
                            c.val_metric,
                            c.test_metric,
                            c.val_avg_layers,
                            c.test_avg_layers
                        )?;
                    }
                }
            }
        }
        Command::Transfer(a) => {
            let small = model_at(&a.small)?;
            let large = model_at(&a.large)?;
            let vocab = a.task.vocab()?;
            let split = a.task.split()?;
            let r = transfer_check(
                &small,
                &large,
                &vocab,
                &split,
                &a.grid.spec(),
                a.grid.settings(a.task.shots),
            )?;
            match a.output.format {
                Format::Json => write_json(&a.output.out, &r)?,
                Format::Csv => {
                    let mut w = sink(&a.output.out)?;
                    writeln!(w, "small_start,small_alpha,rank_in_large,n_cells")?;
                    writeln!(
                        w,
                        "{},{},{},{}",
                        r.small.best.start, r.small.best.alpha, r.rank_in_large, r.n_cells
                    )?;
                }
            }
        }
        Command::Oracle(a) => {
            let model = model_at(&a.model)?;
            let vocab = a.task.vocab()?;
            let mut records = Vec::new();
            for p in a.task.prompts(&vocab, &a.prompt, a.n)? {
                records.extend(saturation_depth(&model, &p)?);
            }
            match a.output.format {
                Format::Json => write_json(
                    &a.output.out,
                    &serde_json::json!({
                        "summary": summarize_saturation(&records, model.n_layers()),
                        "records": records,
                    }),
                )?,
                Format::Csv => {
                    write_saturation_csv(&records, sink(&a.output.out)?).map_err(csv_err)?
                }
            }
        }
        Command::Flow(a) => {
            let vocab = a.task.vocab()?;
            let prompts = a.task.prompts(&vocab, &a.prompt, 1)?;
            let tokens = prompts
                .first()
                .ok_or_else(|| CliError::config("no prompt"))?;
            let rows = match (&a.model, &a.manifest) {
                (_, Some(m)) => flow_over_checkpoints(&CheckpointManifest::load(m)?, tokens)?,
                (Some(p), None) => layer_flow(&model_at(p)?, tokens)?
                    .into_iter()
                    .map(|r| (None, r))
                    .collect(),
                (None, None) => return Err(CliError::config("--model or --manifest is required")),
            };
            write_flow_csv(&rows, sink(&a.out)?).map_err(csv_err)?;
        }
        Command::Errorprop(a) => {
            let model = model_at(&a.model)?;
            let vocab = a.task.vocab()?;
            let prompts = a.task.prompts(&vocab, &a.prompt, a.n)?;
            let params = DecodeParams {
                max_new_tokens: a.max_new,
                eos_token: None,
                batch_size: a.batch,
                seed: a.task.seed,
            };
            let points = error_prop_run(
                &model,
                &prompts,
                &a.t0,
                &a.k,
                a.window,
                a.policy.into(),
                &params,
                None,
            )?;
            match a.output.format {
                Format::Json => write_json(&a.output.out, &points)?,
                Format::Csv => {
                    write_errorprop_csv(&points, sink(&a.output.out)?).map_err(csv_err)?
                }
            }
        }
        Command::ScheduleTable(a) => {
            let plan = a.schedule.build(a.layers, a.steps)?;
            let table = schedule_table(&plan, a.steps);
            match a.output.format {
                Format::Json => write_json(
                    &a.output.out,
                    &serde_json::json!({
                        "schedule": plan.label(),
                        "steps": table.iter().enumerate().map(|(i, k)| serde_json::json!({
                            "step": i, "kept_count": k.len(), "kept_set": k,
                        })).collect::<Vec<_>>(),
                    }),
                )?,
                Format::Csv => {
                    let mut w = sink(&a.output.out)?;
                    writeln!(w, "step,kept_count,kept_layers")?;
                    for (i, k) in table.iter().enumerate() {
                        let ids: Vec<String> = k.iter().map(|l| l.to_string()).collect();
                        writeln!(w, "{i},{},{}", k.len(), ids.join(" "))?;
                    }
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
