use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{EvalSettings, Evaluator, HarnessError, Split, Vocab};
use crate::model::Model;
use crate::schedule::DepthSchedule;

pub const DEFAULT_STARTS: [f64; 7] = [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8];
pub const DEFAULT_ALPHAS: [f64; 4] = [0.8, 0.9, 0.999, 0.9999];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub starts: Vec<f64>,
    pub alphas: Vec<f64>,
    pub tail_min: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            starts: DEFAULT_STARTS.to_vec(),
            alphas: DEFAULT_ALPHAS.to_vec(),
            tail_min: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HPCell {
    pub start: f64,
    pub alpha: f64,
    pub val_metric: f64,
    pub test_metric: f64,
    pub val_avg_layers: f64,
    pub test_avg_layers: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FullDepthResult {
    pub val_metric: f64,
    pub test_metric: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HPResult {
    pub n_layers: usize,
    pub full_depth: FullDepthResult,
    /// Grid order: alphas outer, starts inner.
    pub cells: Vec<HPCell>,
    pub best: HPCell,
    /// Best start lies strictly inside the searched start range.
    pub best_start_interior: bool,
}

impl HPResult {
    /// Cell indices, best first: validation metric descending, then fewer
    /// validation layers, then grid order.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.cells.len()).collect();
        idx.sort_by(|&a, &b| {
            let (x, y) = (&self.cells[a], &self.cells[b]);
            y.val_metric
                .total_cmp(&x.val_metric)
                .then(x.val_avg_layers.total_cmp(&y.val_avg_layers))
                .then(a.cmp(&b))
        });
        idx
    }

    /// 1-based rank of the cell with these hyperparameters.
    pub fn rank_of(&self, start: f64, alpha: f64) -> Option<usize> {
        self.ranking()
            .iter()
            .position(|&i| self.cells[i].start == start && self.cells[i].alpha == alpha)
            .map(|r| r + 1)
    }
}

/// Evaluates every `(start, alpha)` cell on validation and test, picks the
/// best by validation metric with ties going to fewer layers.
pub fn grid_search(
    model: &Model,
    vocab: &Vocab,
    split: &Split,
    grid: &GridSpec,
    settings: EvalSettings,
) -> Result<HPResult, HarnessError> {
    if grid.starts.is_empty() || grid.alphas.is_empty() {
        return Err(HarnessError::EmptyGrid);
    }
    if split.validation.is_empty() {
        return Err(HarnessError::EmptySplit("validation"));
    }
    if split.test.is_empty() {
        return Err(HarnessError::EmptySplit("test"));
    }
    let l = model.n_layers();
    let ev = Evaluator::new(model, vocab, settings)?;
    let full = DepthSchedule::full(l)?;
    let full_depth = FullDepthResult {
        val_metric: ev
            .evaluate(&full, &split.shot_pool, &split.validation)?
            .metric(),
        test_metric: ev.evaluate(&full, &split.shot_pool, &split.test)?.metric(),
    };

    let pairs: Vec<(f64, f64)> = grid
        .alphas
        .iter()
        .flat_map(|&a| grid.starts.iter().map(move |&s| (s, a)))
        .collect();
    let cells = pairs
        .par_iter()
        .map(|&(start, alpha)| {
            let plan = DepthSchedule::d3(l, start, alpha, grid.tail_min)?;
            let val = ev.evaluate(&plan, &split.shot_pool, &split.validation)?;
            let test = ev.evaluate(&plan, &split.shot_pool, &split.test)?;
            Ok(HPCell {
                start,
                alpha,
                val_metric: val.metric(),
                test_metric: test.metric(),
                val_avg_layers: val.avg_layers()?,
                test_avg_layers: test.avg_layers()?,
            })
        })
        .collect::<Result<Vec<_>, HarnessError>>()?;

    let mut result = HPResult {
        n_layers: l,
        full_depth,
        best: cells[0].clone(),
        cells,
        best_start_interior: false,
    };
    result.best = result.cells[result.ranking()[0]].clone();
    let lo = grid.starts.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = grid
        .starts
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    result.best_start_interior = result.best.start > lo && result.best.start < hi;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferReport {
    pub small: HPResult,
    pub large: HPResult,
    /// Rank of the small model's best cell within the large model's grid.
    pub rank_in_large: usize,
    pub n_cells: usize,
}

/// Searches both models on the same split and ranks the small model's
/// choice in the large model's ordering.
pub fn transfer_check(
    small: &Model,
    large: &Model,
    vocab: &Vocab,
    split: &Split,
    grid: &GridSpec,
    settings: EvalSettings,
) -> Result<TransferReport, HarnessError> {
    let s = grid_search(small, vocab, split, grid, settings)?;
    let l = grid_search(large, vocab, split, grid, settings)?;
    let rank = l
        .rank_of(s.best.start, s.best.alpha)
        .expect("both searches share one grid");
    Ok(TransferReport {
        n_cells: l.cells.len(),
        small: s,
        large: l,
        rank_in_large: rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{test_model, TaskData, TaskName};

    fn cell(start: f64, alpha: f64, val: f64, layers: f64) -> HPCell {
        HPCell {
            start,
            alpha,
            val_metric: val,
            test_metric: 0.0,
            val_avg_layers: layers,
            test_avg_layers: layers,
        }
    }

    #[test]
    fn ranking_breaks_ties_by_fewer_layers_then_order() {
        let r = HPResult {
            n_layers: 4,
            full_depth: FullDepthResult {
                val_metric: 0.0,
                test_metric: 0.0,
            },
            cells: vec![
                cell(0.2, 0.9, 0.5, 3.0),
                cell(0.4, 0.9, 0.7, 3.5),
                cell(0.6, 0.9, 0.7, 3.2),
                cell(0.8, 0.9, 0.5, 3.0),
            ],
            best: cell(0.0, 0.0, 0.0, 0.0),
            best_start_interior: false,
        };
        assert_eq!(r.ranking(), vec![2, 1, 0, 3]);
        assert_eq!(r.rank_of(0.6, 0.9), Some(1));
        assert_eq!(r.rank_of(0.8, 0.9), Some(4));
        assert_eq!(r.rank_of(0.1, 0.9), None);
    }

    fn small_split() -> Split {
        TaskData::synthetic(TaskName::Modarith, 30, 4, 5)
            .split(0.1, 0)
            .unwrap()
    }

    fn settings() -> EvalSettings {
        EvalSettings {
            shots: 2,
            max_new_tokens: 4,
            ..Default::default()
        }
    }

    #[test]
    fn empty_grid_is_rejected() {
        let m = test_model(4, 0);
        let grid = GridSpec {
            starts: vec![],
            ..Default::default()
        };
        let e = grid_search(&m, &Vocab::default(), &small_split(), &grid, settings()).unwrap_err();
        assert!(matches!(e, HarnessError::EmptyGrid));
    }

    #[test]
    fn grid_is_deterministic_and_ordered() {
        let m = test_model(4, 2);
        let grid = GridSpec {
            starts: vec![0.25, 0.5, 0.75],
            alphas: vec![0.8, 0.99],
            tail_min: 1,
        };
        let split = small_split();
        let a = grid_search(&m, &Vocab::default(), &split, &grid, settings()).unwrap();
        let b = grid_search(&m, &Vocab::default(), &split, &grid, settings()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.cells.len(), 6);
        assert_eq!((a.cells[1].start, a.cells[1].alpha), (0.5, 0.8));
        assert_eq!(a.best, a.cells[a.ranking()[0]]);
        assert!(a.cells.iter().all(|c| c.val_avg_layers <= 4.0));
    }

    #[test]
    fn transfer_rank_is_one_for_identical_models() {
        let m = test_model(4, 3);
        let grid = GridSpec {
            starts: vec![0.25, 0.5],
            alphas: vec![0.8],
            tail_min: 1,
        };
        let r =
            transfer_check(&m, &m, &Vocab::default(), &small_split(), &grid, settings()).unwrap();
        assert_eq!(r.rank_in_large, 1);
        assert_eq!(r.n_cells, 2);
    }
}
