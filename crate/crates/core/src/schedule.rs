//! Depth schedules: which layers run for the `i`-th generated token.
//!
//! The power-law schedule keeps `⌊L·αⁱ⌋` layers and drops one contiguous
//! block that begins at the flex-layer start. Two baselines are provided:
//! a linear budget that keeps the top layers, and a constant budget that
//! keeps the bottom layers.

use std::fmt;
use std::ops::Range;

use serde::ser::SerializeSeq;
use serde::{Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("alpha {0} outside (0, 1]")]
    AlphaOutOfRange(f64),
    #[error("start fraction {0} outside [0, 1)")]
    StartOutOfRange(f64),
    #[error("layer count must be >= 1")]
    NoLayers,
    #[error("invalid schedule bounds: {0}")]
    InvalidBounds(String),
    #[error("schedule config: {0}")]
    Parse(String),
}

/// Layers executed at one step: `[0, head_end) ∪ [tail_start, n_layers)`.
///
/// Normalised so that equal sets compare equal: a full set is always
/// `head_end == tail_start == n_layers`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct KeptSet {
    head_end: usize,
    tail_start: usize,
    n_layers: usize,
}

impl KeptSet {
    pub fn new(head_end: usize, tail_start: usize, n_layers: usize) -> Self {
        assert!(
            head_end <= n_layers && tail_start <= n_layers,
            "kept set bounds exceed layer count"
        );
        if head_end >= tail_start || head_end == n_layers {
            Self::full(n_layers)
        } else {
            Self {
                head_end,
                tail_start,
                n_layers,
            }
        }
    }

    pub fn full(n_layers: usize) -> Self {
        Self {
            head_end: n_layers,
            tail_start: n_layers,
            n_layers,
        }
    }

    /// Keeps the bottom `count` layers.
    pub fn bottom(count: usize, n_layers: usize) -> Self {
        Self::new(count.min(n_layers), n_layers, n_layers)
    }

    /// Keeps the top `count` layers.
    pub fn top(count: usize, n_layers: usize) -> Self {
        Self::new(0, n_layers - count.min(n_layers), n_layers)
    }

    pub fn head(&self) -> Range<usize> {
        0..self.head_end
    }

    pub fn tail(&self) -> Range<usize> {
        self.tail_start..self.n_layers
    }

    /// Dropped block `[head_end, tail_start)`.
    pub fn dropped(&self) -> Range<usize> {
        self.head_end..self.tail_start
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn len(&self) -> usize {
        self.head_end + (self.n_layers - self.tail_start)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_full(&self) -> bool {
        self.len() == self.n_layers
    }

    pub fn contains(&self, layer: usize) -> bool {
        layer < self.head_end || (layer >= self.tail_start && layer < self.n_layers)
    }

    /// Ascending layer ids.
    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.head().chain(self.tail())
    }

    pub fn is_subset(&self, other: &KeptSet) -> bool {
        self.iter().all(|l| other.contains(l))
    }
}

impl Serialize for KeptSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut seq = s.serialize_seq(Some(self.len()))?;
        for l in self.iter() {
            seq.serialize_element(&l)?;
        }
        seq.end()
    }
}

/// Anything that decides the kept layers per generation step.
pub trait LayerPlan: Send + Sync {
    fn n_layers(&self) -> usize;
    fn kept_set(&self, step: usize) -> KeptSet;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleKind {
    FullDepth,
    D3PowerLaw {
        start_frac: f64,
        start_id: usize,
        alpha: f64,
        tail_min: usize,
    },
    /// Keeps the top layers; budget ramps linearly from `upper` to `lower`.
    LinearHeadSkip {
        upper: usize,
        lower: usize,
        ramp: usize,
    },
    /// Keeps the bottom `exit_layer` layers.
    ConstantTailSkip {
        exit_layer: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthSchedule {
    n_layers: usize,
    kind: ScheduleKind,
}

/// Flex-layer start index for a fractional start. The small epsilon keeps
/// products such as `0.7 × 20` from flooring one layer low.
pub fn start_id(start_frac: f64, n_layers: usize) -> usize {
    let raw = (start_frac * n_layers as f64 + 1e-9).floor() as usize;
    raw.min(n_layers.saturating_sub(1))
}

impl DepthSchedule {
    pub fn full(n_layers: usize) -> Result<Self, ScheduleError> {
        if n_layers == 0 {
            return Err(ScheduleError::NoLayers);
        }
        Ok(Self {
            n_layers,
            kind: ScheduleKind::FullDepth,
        })
    }

    pub fn d3(
        n_layers: usize,
        start_frac: f64,
        alpha: f64,
        tail_min: usize,
    ) -> Result<Self, ScheduleError> {
        if n_layers == 0 {
            return Err(ScheduleError::NoLayers);
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(ScheduleError::AlphaOutOfRange(alpha));
        }
        if !(0.0..1.0).contains(&start_frac) {
            return Err(ScheduleError::StartOutOfRange(start_frac));
        }
        Ok(Self {
            n_layers,
            kind: ScheduleKind::D3PowerLaw {
                start_frac,
                start_id: start_id(start_frac, n_layers),
                alpha,
                tail_min,
            },
        })
    }

    pub fn linear_head(
        n_layers: usize,
        upper: usize,
        lower: usize,
        ramp: usize,
    ) -> Result<Self, ScheduleError> {
        if n_layers == 0 {
            return Err(ScheduleError::NoLayers);
        }
        if !(1 <= lower && lower <= upper && upper <= n_layers) {
            return Err(ScheduleError::InvalidBounds(format!(
                "need 1 <= lower ({lower}) <= upper ({upper}) <= L ({n_layers})"
            )));
        }
        if ramp == 0 {
            return Err(ScheduleError::InvalidBounds("ramp must be >= 1".into()));
        }
        Ok(Self {
            n_layers,
            kind: ScheduleKind::LinearHeadSkip { upper, lower, ramp },
        })
    }

    /// Defaults: upper = L, lower = ⌈L/2⌉, ramp over the token budget.
    pub fn linear_head_default(
        n_layers: usize,
        max_new_tokens: usize,
    ) -> Result<Self, ScheduleError> {
        Self::linear_head(
            n_layers,
            n_layers,
            n_layers.div_ceil(2),
            max_new_tokens.max(1),
        )
    }

    pub fn constant_tail(n_layers: usize, exit_layer: usize) -> Result<Self, ScheduleError> {
        if n_layers == 0 {
            return Err(ScheduleError::NoLayers);
        }
        if !(1..=n_layers).contains(&exit_layer) {
            return Err(ScheduleError::InvalidBounds(format!(
                "exit_layer {exit_layer} outside [1, {n_layers}]"
            )));
        }
        Ok(Self {
            n_layers,
            kind: ScheduleKind::ConstantTailSkip { exit_layer },
        })
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    /// Number of layers kept at step `i`; always in `[1, L]`.
    pub fn kept_count(&self, step: usize) -> usize {
        let l = self.n_layers;
        let count = match self.kind {
            ScheduleKind::FullDepth => l,
            ScheduleKind::D3PowerLaw {
                start_id,
                alpha,
                tail_min,
                ..
            } => {
                let budget = floor_scaled_power(l, alpha, step);
                budget.max(start_id + tail_min)
            }
            ScheduleKind::LinearHeadSkip { upper, lower, ramp } => {
                upper - (upper - lower) * step.min(ramp) / ramp
            }
            ScheduleKind::ConstantTailSkip { exit_layer } => exit_layer,
        };
        count.clamp(1, l)
    }

    pub fn kept_set(&self, step: usize) -> KeptSet {
        let l = self.n_layers;
        let kept = self.kept_count(step);
        match self.kind {
            ScheduleKind::FullDepth => KeptSet::full(l),
            ScheduleKind::D3PowerLaw { start_id, .. } => {
                let drop = l - kept;
                KeptSet::new(start_id, start_id + drop, l)
            }
            ScheduleKind::LinearHeadSkip { .. } => KeptSet::top(kept, l),
            ScheduleKind::ConstantTailSkip { .. } => KeptSet::bottom(kept, l),
        }
    }

    /// Short label used in reports.
    pub fn label(&self) -> String {
        match self.kind {
            ScheduleKind::FullDepth => "full".into(),
            ScheduleKind::D3PowerLaw {
                start_frac,
                alpha,
                tail_min,
                ..
            } => format!("d3(start={start_frac},alpha={alpha},tail_min={tail_min})"),
            ScheduleKind::LinearHeadSkip { upper, lower, ramp } => {
                format!("linear_head(upper={upper},lower={lower},ramp={ramp})")
            }
            ScheduleKind::ConstantTailSkip { exit_layer } => {
                format!("constant_tail(exit_layer={exit_layer})")
            }
        }
    }

    /// Flat `key=value` config text, one pair per line.
    pub fn to_config_string(&self) -> String {
        let mut out = vec![format!("L={}", self.n_layers)];
        match self.kind {
            ScheduleKind::FullDepth => out.insert(0, "kind=full".into()),
            ScheduleKind::D3PowerLaw {
                start_frac,
                alpha,
                tail_min,
                ..
            } => {
                out.insert(0, "kind=d3".into());
                out.push(format!("start={start_frac}"));
                out.push(format!("alpha={alpha}"));
                out.push(format!("tail_min={tail_min}"));
            }
            ScheduleKind::LinearHeadSkip { upper, lower, ramp } => {
                out.insert(0, "kind=linear_head".into());
                out.push(format!("upper={upper}"));
                out.push(format!("lower={lower}"));
                out.push(format!("ramp={ramp}"));
            }
            ScheduleKind::ConstantTailSkip { exit_layer } => {
                out.insert(0, "kind=constant_tail".into());
                out.push(format!("exit_layer={exit_layer}"));
            }
        }
        out.join("\n") + "\n"
    }

    /// Parses the flat config text. Pairs may be separated by newlines,
    /// commas or semicolons; `#` starts a comment. `default_layers` fills in
    /// `L`, and `default_ramp` the linear ramp, when absent.
    pub fn parse_config(
        text: &str,
        default_layers: Option<usize>,
        default_ramp: Option<usize>,
    ) -> Result<Self, ScheduleError> {
        let mut kind = None;
        let mut l = default_layers;
        let mut start = 0.5f64;
        let mut alpha = 1.0f64;
        let mut tail_min = 1usize;
        let (mut upper, mut lower, mut ramp, mut exit) = (None, None, default_ramp, None);

        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ScheduleError> {
            v.parse()
                .map_err(|_| ScheduleError::Parse(format!("bad value `{v}` for `{key}`")))
        }

        for item in text
            .lines()
            .map(|line| line.split('#').next().unwrap_or(""))
            .flat_map(|line| line.split([',', ';']))
            .map(str::trim)
            .filter(|s| !s.is_empty())
        {
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| ScheduleError::Parse(format!("expected key=value, got `{item}`")))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "kind" => kind = Some(value.to_ascii_lowercase()),
                "L" | "l" => l = Some(num(key, value)?),
                "start" => start = num(key, value)?,
                "alpha" => alpha = num(key, value)?,
                "tail_min" => tail_min = num(key, value)?,
                "upper" => upper = Some(num(key, value)?),
                "lower" => lower = Some(num(key, value)?),
                "ramp" => ramp = Some(num(key, value)?),
                "exit_layer" => exit = Some(num(key, value)?),
                other => return Err(ScheduleError::Parse(format!("unknown key `{other}`"))),
            }
        }
        let l = l.ok_or_else(|| ScheduleError::Parse("missing `L`".into()))?;
        let kind = kind.ok_or_else(|| ScheduleError::Parse("missing `kind`".into()))?;
        match kind.as_str() {
            "full" | "fulldepth" => Self::full(l),
            "d3" | "d3powerlaw" => Self::d3(l, start, alpha, tail_min),
            "linear_head" | "linearheadskip" => Self::linear_head(
                l,
                upper.unwrap_or(l),
                lower.unwrap_or(l.div_ceil(2)),
                ramp.ok_or_else(|| ScheduleError::Parse("linear_head needs `ramp`".into()))?,
            ),
            "constant_tail" | "constanttailskip" => Self::constant_tail(
                l,
                exit.ok_or_else(|| {
                    ScheduleError::Parse("constant_tail needs `exit_layer`".into())
                })?,
            ),
            other => Err(ScheduleError::Parse(format!("unknown kind `{other}`"))),
        }
    }
}

impl fmt::Display for DepthSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl LayerPlan for DepthSchedule {
    fn n_layers(&self) -> usize {
        self.n_layers
    }

    fn kept_set(&self, step: usize) -> KeptSet {
        DepthSchedule::kept_set(self, step)
    }
}

/// `kept_set(s, i)` for `i` in `0..max_steps`.
pub fn schedule_table(plan: &dyn LayerPlan, max_steps: usize) -> Vec<KeptSet> {
    (0..max_steps).map(|i| plan.kept_set(i)).collect()
}

/// `⌊l · alphaⁱ⌋`, evaluated in double-double arithmetic so the floor is
/// exact away from pathological ties with an integer.
pub fn floor_scaled_power(l: usize, alpha: f64, i: usize) -> usize {
    if alpha >= 1.0 || i == 0 {
        return l;
    }
    let lf = l as f64;
    let mut result = Dd::ONE;
    let mut base = Dd(alpha, 0.0);
    let mut e = i;
    while e > 0 {
        if e & 1 == 1 {
            result = result.mul(base);
            // Only factors <= 1 follow, so the value cannot climb back.
            if result.0 * lf < 0.5 {
                return 0;
            }
        }
        e >>= 1;
        if e > 0 {
            base = base.mul(base);
        }
    }
    let scaled = result.mul(Dd(lf, 0.0));
    scaled.floor() as usize
}

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy)]
struct Dd(f64, f64);

impl Dd {
    const ONE: Dd = Dd(1.0, 0.0);

    fn mul(self, o: Dd) -> Dd {
        let p = self.0 * o.0;
        let err = self.0.mul_add(o.0, -p) + (self.0 * o.1 + self.1 * o.0);
        let hi = p + err;
        Dd(hi, err - (hi - p))
    }

    fn floor(self) -> f64 {
        let f = self.0.floor();
        if f == self.0 && self.1 < 0.0 {
            f - 1.0
        } else {
            f
        }
    }
}
