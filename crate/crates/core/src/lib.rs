//! Layer-skipping autoregressive decoding for small decoder-only
//! transformers.
//!
//! Each generated token runs a position-dependent subset of the decoder
//! blocks. The power-law schedule keeps `⌊L·αⁱ⌋` blocks for the `i`-th
//! generated token and skips a contiguous block of middle layers, so the
//! kept sets are nested and the KV cache never misses an entry.

pub mod analysis;
pub mod engine;
pub mod harness;
pub mod kvcache;
pub mod model;
pub mod schedule;
pub mod tensor;

pub use analysis::{AnalysisError, FlopsModel};
pub use engine::{DecodeParams, Engine, EngineError, GenTrace, StepRecord};
pub use kvcache::{CacheError, FillPolicy, KvCache};
pub use model::{Model, ModelConfig, ModelError};
pub use schedule::{DepthSchedule, KeptSet, LayerPlan, ScheduleError};
