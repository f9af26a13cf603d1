//! Per-(layer, position) key/value storage for one sequence.
//!
//! Slots are indexed by padded position: the first `pad` slots belong to
//! left padding and never hold entries nor take part in attention. Missing
//! entries (a token skipped a layer that a later token runs) are served by
//! the configured [`FillPolicy`] when a view is taken, then memoised as
//! fills.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{KvView, Model, ModelError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CacheError {
    #[error("position {pos} beyond cache capacity {capacity}")]
    PositionOverflow { pos: usize, capacity: usize },
    #[error("layer {layer} out of range for {n_layers} layers")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("entry (layer {layer}, pos {pos}) already written")]
    DoubleWrite { layer: usize, pos: usize },
    #[error("position {pos} is left padding")]
    PaddingSlot { pos: usize },
    #[error("missing state at (layer {layer}, pos {pos})")]
    MissingState { layer: usize, pos: usize },
    #[error("reprojection of (layer {layer}, pos {pos}) needs the propagated hidden state")]
    ReprojectStateUnavailable { layer: usize, pos: usize },
    #[error("view up to {end} exceeds written range {written}")]
    ViewOutOfRange { end: usize, written: usize },
    #[error("entry width {found}, expected {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// How a missing (layer, position) entry is served.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FillPolicy {
    /// Missing entries are an error.
    #[default]
    Strict,
    /// Copy K/V from the deepest layer actually computed at that position.
    TensorCopy,
    /// Apply the target layer's K/V projections to the propagated hidden
    /// state of that position.
    Reproject,
}

impl std::str::FromStr for FillPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "strict" => Ok(Self::Strict),
            "tensor_copy" | "copy" => Ok(Self::TensorCopy),
            "reproject" => Ok(Self::Reproject),
            other => Err(format!("unknown fill policy `{other}`")),
        }
    }
}

/// Source of K/V for reprojection fills.
pub trait KvProjector {
    fn project_kv(
        &self,
        layer: usize,
        hidden: &[f32],
        pos: usize,
    ) -> Result<(Vec<f32>, Vec<f32>), ModelError>;
}

impl KvProjector for Model {
    fn project_kv(
        &self,
        layer: usize,
        hidden: &[f32],
        pos: usize,
    ) -> Result<(Vec<f32>, Vec<f32>), ModelError> {
        Model::project_kv(self, layer, hidden, pos)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotState {
    Empty,
    Real,
    Fill { source_layer: usize },
}

#[derive(Debug, Clone)]
pub struct KvCache {
    n_layers: usize,
    capacity: usize,
    width: usize,
    pad: usize,
    policy: FillPolicy,
    keys: Vec<f32>,
    values: Vec<f32>,
    slots: Vec<SlotState>,
    deepest: Vec<Option<usize>>,
    /// Residual stream entering each (layer, slot); kept for reprojection.
    streams: Option<(Vec<f32>, Vec<bool>)>,
    written: usize,
    missing_events: u64,
}

impl KvCache {
    pub fn new(n_layers: usize, capacity: usize, width: usize, policy: FillPolicy) -> Self {
        Self::with_padding(n_layers, capacity, width, policy, 0)
    }

    /// Cache whose first `pad` slots are left padding.
    pub fn with_padding(
        n_layers: usize,
        capacity: usize,
        width: usize,
        policy: FillPolicy,
        pad: usize,
    ) -> Self {
        let cells = n_layers * capacity;
        Self {
            n_layers,
            capacity,
            width,
            pad: pad.min(capacity),
            policy,
            keys: vec![0.0; cells * width],
            values: vec![0.0; cells * width],
            slots: vec![SlotState::Empty; cells],
            deepest: vec![None; capacity],
            streams: (policy == FillPolicy::Reproject)
                .then(|| (vec![0.0; cells * width], vec![false; cells])),
            written: pad.min(capacity),
            missing_events: 0,
        }
    }

    /// Cache shaped for `model`.
    pub fn for_model(model: &Model, capacity: usize, policy: FillPolicy, pad: usize) -> Self {
        Self::with_padding(
            model.n_layers(),
            capacity,
            model.config.d_model,
            policy,
            pad,
        )
    }

    pub fn policy(&self) -> FillPolicy {
        self.policy
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// One past the highest slot written at any layer.
    pub fn written(&self) -> usize {
        self.written
    }

    pub fn missing_events(&self) -> u64 {
        self.missing_events
    }

    pub fn deepest_computed(&self, pos: usize) -> Option<usize> {
        self.deepest.get(pos).copied().flatten()
    }

    pub fn slot_state(&self, layer: usize, pos: usize) -> SlotState {
        self.slots[layer * self.capacity + pos]
    }

    pub fn is_present(&self, layer: usize, pos: usize) -> bool {
        self.slot_state(layer, pos) != SlotState::Empty
    }

    fn check(&self, layer: usize, pos: usize) -> Result<usize, CacheError> {
        if layer >= self.n_layers {
            return Err(CacheError::LayerOutOfRange {
                layer,
                n_layers: self.n_layers,
            });
        }
        if pos >= self.capacity {
            return Err(CacheError::PositionOverflow {
                pos,
                capacity: self.capacity,
            });
        }
        if pos < self.pad {
            return Err(CacheError::PaddingSlot { pos });
        }
        Ok(layer * self.capacity + pos)
    }

    fn check_width(&self, found: usize) -> Result<(), CacheError> {
        if found != self.width {
            return Err(CacheError::WidthMismatch {
                expected: self.width,
                found,
            });
        }
        Ok(())
    }

    fn store(&mut self, cell: usize, k: &[f32], v: &[f32]) {
        let o = cell * self.width;
        self.keys[o..o + self.width].copy_from_slice(k);
        self.values[o..o + self.width].copy_from_slice(v);
    }

    /// Stores a computed entry. Overwriting an earlier fill is allowed;
    /// a second real write is not.
    pub fn append(
        &mut self,
        layer: usize,
        pos: usize,
        k: &[f32],
        v: &[f32],
    ) -> Result<(), CacheError> {
        let cell = self.check(layer, pos)?;
        self.check_width(k.len())?;
        self.check_width(v.len())?;
        if self.slots[cell] == SlotState::Real {
            return Err(CacheError::DoubleWrite { layer, pos });
        }
        self.store(cell, k, v);
        self.slots[cell] = SlotState::Real;
        let deepest = &mut self.deepest[pos];
        *deepest = Some(deepest.map_or(layer, |d| d.max(layer)));
        self.written = self.written.max(pos + 1);
        Ok(())
    }

    /// Records the residual stream entering `layer` at `pos`. Only kept when
    /// the policy is [`FillPolicy::Reproject`].
    pub fn record_stream(
        &mut self,
        layer: usize,
        pos: usize,
        hidden: &[f32],
    ) -> Result<(), CacheError> {
        let cell = self.check(layer, pos)?;
        self.check_width(hidden.len())?;
        let width = self.width;
        if let Some((data, present)) = self.streams.as_mut() {
            data[cell * width..(cell + 1) * width].copy_from_slice(hidden);
            present[cell] = true;
        }
        self.written = self.written.max(pos + 1);
        Ok(())
    }

    /// Stored `(key, value)` at a slot, fill or real.
    pub fn entry(&self, layer: usize, pos: usize) -> Option<(&[f32], &[f32])> {
        let cell = layer * self.capacity + pos;
        (self.slots.get(cell)? != &SlotState::Empty).then(|| {
            let o = cell * self.width;
            (
                &self.keys[o..o + self.width],
                &self.values[o..o + self.width],
            )
        })
    }

    /// K/V of non-padding slots `[pad, end)` at `layer`, filling missing
    /// entries per the policy. Each fill bumps `missing_events` once and is
    /// memoised.
    pub fn view(
        &mut self,
        layer: usize,
        end: usize,
        projector: Option<&dyn KvProjector>,
    ) -> Result<KvView<'_>, CacheError> {
        if layer >= self.n_layers {
            return Err(CacheError::LayerOutOfRange {
                layer,
                n_layers: self.n_layers,
            });
        }
        if end > self.written {
            return Err(CacheError::ViewOutOfRange {
                end,
                written: self.written,
            });
        }
        for pos in self.pad..end {
            let cell = layer * self.capacity + pos;
            if self.slots[cell] == SlotState::Empty {
                self.fill(layer, pos, projector)?;
            }
        }
        let lo = (layer * self.capacity + self.pad) * self.width;
        let hi = (layer * self.capacity + end.max(self.pad)) * self.width;
        Ok(KvView::new(&self.keys[lo..hi], &self.values[lo..hi]))
    }

    fn fill(
        &mut self,
        layer: usize,
        pos: usize,
        projector: Option<&dyn KvProjector>,
    ) -> Result<(), CacheError> {
        let cell = layer * self.capacity + pos;
        let (k, v, source_layer) = match self.policy {
            FillPolicy::Strict => return Err(CacheError::MissingState { layer, pos }),
            FillPolicy::TensorCopy => {
                let src = self.deepest[pos].ok_or(CacheError::MissingState { layer, pos })?;
                let o = (src * self.capacity + pos) * self.width;
                (
                    self.keys[o..o + self.width].to_vec(),
                    self.values[o..o + self.width].to_vec(),
                    src,
                )
            }
            FillPolicy::Reproject => {
                let unavailable = CacheError::ReprojectStateUnavailable { layer, pos };
                let projector = projector.ok_or(unavailable.clone())?;
                let (data, present) = self.streams.as_ref().ok_or(unavailable.clone())?;
                if !present[cell] {
                    return Err(unavailable);
                }
                let hidden = &data[cell * self.width..(cell + 1) * self.width];
                let (k, v) = projector.project_kv(layer, hidden, pos - self.pad)?;
                (k, v, layer)
            }
        };
        self.store(cell, &k, &v);
        self.slots[cell] = SlotState::Fill { source_layer };
        self.missing_events += 1;
        Ok(())
    }

    /// Debug dump: `layer,pos,present,is_fill,fill_source_layer`, one row
    /// per non-padding slot below the written range.
    pub fn dump_csv<W: Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "pos", "present", "is_fill", "fill_source_layer"])?;
        for layer in 0..self.n_layers {
            for pos in self.pad..self.written {
                let state = self.slot_state(layer, pos);
                let (present, is_fill, src) = match state {
                    SlotState::Empty => (false, false, String::new()),
                    SlotState::Real => (true, false, String::new()),
                    SlotState::Fill { source_layer } => (true, true, source_layer.to_string()),
                };
                w.write_record([
                    layer.to_string(),
                    (pos - self.pad).to_string(),
                    present.to_string(),
                    is_fill.to_string(),
                    src,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tiny_config;

    fn kv(x: f32) -> (Vec<f32>, Vec<f32>) {
        (vec![x; 4], vec![-x; 4])
    }

    #[test]
    fn append_then_read_is_bit_exact() {
        let mut c = KvCache::new(2, 4, 4, FillPolicy::Strict);
        let k = vec![0.1f32, f32::from_bits(7), -0.0, 3.5];
        let v = vec![1.0f32, 2.0, 3.0, 4.0];
        c.append(0, 0, &k, &v).unwrap();
        let (rk, rv) = c.entry(0, 0).unwrap();
        assert_eq!(
            rk.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            k.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(rv, v.as_slice());
        assert_eq!(c.deepest_computed(0), Some(0));
    }

    #[test]
    fn overflow_and_double_write() {
        let mut c = KvCache::new(2, 4, 4, FillPolicy::Strict);
        let (k, v) = kv(1.0);
        assert_eq!(
            c.append(0, 4, &k, &v),
            Err(CacheError::PositionOverflow {
                pos: 4,
                capacity: 4
            })
        );
        c.append(1, 2, &k, &v).unwrap();
        assert_eq!(
            c.append(1, 2, &k, &v),
            Err(CacheError::DoubleWrite { layer: 1, pos: 2 })
        );
    }

    #[test]
    fn full_view_has_no_fills() {
        let mut c = KvCache::new(2, 4, 4, FillPolicy::Strict);
        for pos in 0..3 {
            for layer in 0..2 {
                let (k, v) = kv(pos as f32);
                c.append(layer, pos, &k, &v).unwrap();
            }
        }
        let view = c.view(1, 3, None).unwrap();
        assert_eq!(view.keys.len(), 12);
        assert_eq!(view.keys[8], 2.0);
        assert_eq!(c.missing_events(), 0);
        assert!(matches!(
            c.view(1, 4, None),
            Err(CacheError::ViewOutOfRange { .. })
        ));
    }

    #[test]
    fn strict_reports_missing_state() {
        let mut c = KvCache::new(2, 4, 4, FillPolicy::Strict);
        let (k, v) = kv(1.0);
        c.append(0, 0, &k, &v).unwrap();
        assert_eq!(
            c.view(1, 1, None).unwrap_err(),
            CacheError::MissingState { layer: 1, pos: 0 }
        );
    }

    #[test]
    fn tensor_copy_uses_deepest_computed() {
        let mut c = KvCache::new(6, 8, 4, FillPolicy::TensorCopy);
        for pos in 0..4 {
            for layer in 0..6 {
                if pos == 3 && layer > 2 {
                    continue;
                }
                let (k, v) = kv((layer * 10 + pos) as f32);
                c.append(layer, pos, &k, &v).unwrap();
            }
        }
        assert_eq!(c.deepest_computed(3), Some(2));
        let view = c.view(5, 4, None).unwrap();
        assert_eq!(&view.keys[12..16], &[23.0; 4]);
        assert_eq!(&view.values[12..16], &[-23.0; 4]);
        assert_eq!(c.missing_events(), 1);
        assert_eq!(c.slot_state(5, 3), SlotState::Fill { source_layer: 2 });
        // memoised: a second view does not fill again
        c.view(5, 4, None).unwrap();
        assert_eq!(c.missing_events(), 1);
        // fills do not move deepest_computed
        assert_eq!(c.deepest_computed(3), Some(2));
    }

    #[test]
    fn reproject_with_zero_projections_gives_zero_entries() {
        let model = Model::zeros(tiny_config()).unwrap();
        let mut c = KvCache::for_model(&model, 4, FillPolicy::Reproject, 0);
        let (k, v) = kv(1.0);
        c.append(0, 0, &k, &v).unwrap();
        c.record_stream(1, 0, &[0.3, -0.2, 0.1, 1.0]).unwrap();
        let view = c.view(1, 1, Some(&model)).unwrap();
        assert_eq!(view.keys, &[0.0; 4]);
        assert_eq!(view.values, &[0.0; 4]);
        assert_eq!(c.missing_events(), 1);
    }

    #[test]
    fn reproject_matches_model_projection() {
        let model = Model::random(tiny_config(), 4).unwrap();
        let mut c = KvCache::for_model(&model, 6, FillPolicy::Reproject, 2);
        let h = [0.3f32, -0.2, 0.1, 1.0];
        let (k, v) = kv(1.0);
        c.append(0, 2, &k, &v).unwrap();
        c.record_stream(1, 2, &h).unwrap();
        let view = c.view(1, 3, Some(&model)).unwrap();
        // slot 2 is logical position 0 after two padding slots
        let (ek, ev) = model.project_kv(1, &h, 0).unwrap();
        assert_eq!(view.keys, ek.as_slice());
        assert_eq!(view.values, ev.as_slice());
    }

    #[test]
    fn reproject_without_state() {
        let model = Model::random(tiny_config(), 4).unwrap();
        let mut c = KvCache::for_model(&model, 4, FillPolicy::Reproject, 0);
        let (k, v) = kv(1.0);
        c.append(0, 0, &k, &v).unwrap();
        assert_eq!(
            c.view(1, 1, None).unwrap_err(),
            CacheError::ReprojectStateUnavailable { layer: 1, pos: 0 }
        );
        assert_eq!(
            c.view(1, 1, Some(&model)).unwrap_err(),
            CacheError::ReprojectStateUnavailable { layer: 1, pos: 0 }
        );
    }

    #[test]
    fn padding_slots_are_excluded() {
        let mut c = KvCache::with_padding(1, 5, 4, FillPolicy::Strict, 2);
        let (k, v) = kv(9.0);
        assert_eq!(
            c.append(0, 1, &k, &v),
            Err(CacheError::PaddingSlot { pos: 1 })
        );
        c.append(0, 2, &k, &v).unwrap();
        let view = c.view(0, 3, None).unwrap();
        assert_eq!(view.keys.len(), 4);
        assert_eq!(c.view(0, 2, None).unwrap().keys.len(), 0);
    }

    #[test]
    fn csv_dump() {
        let mut c = KvCache::new(2, 3, 4, FillPolicy::TensorCopy);
        let (k, v) = kv(1.0);
        c.append(0, 0, &k, &v).unwrap();
        c.view(1, 1, None).unwrap();
        let mut buf = Vec::new();
        c.dump_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "layer,pos,present,is_fill,fill_source_layer\n0,0,true,false,\n1,0,true,true,0\n"
        );
    }

    #[test]
    fn fill_policy_parses() {
        assert_eq!(
            "tensor-copy".parse::<FillPolicy>().unwrap(),
            FillPolicy::TensorCopy
        );
        assert_eq!(
            "Reproject".parse::<FillPolicy>().unwrap(),
            FillPolicy::Reproject
        );
        assert!("nope".parse::<FillPolicy>().is_err());
    }
}
