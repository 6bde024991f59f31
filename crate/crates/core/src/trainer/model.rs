//! Linear model with a frozen base matrix and one low-rank factor pair per
//! task column block.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Batch, TrainError};
use crate::plan::{BlockLayout, ColRange};
use crate::taskgraph::{TaskGraph, TaskId};

/// Blocks taking part in a forward pass, each with its block-local columns.
pub type ActiveSet = BTreeMap<TaskId, ColRange>;

/// Low-rank factors of one column block: `delta W[:, seg] = b * a`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBlock {
    /// `d_out x rank`
    pub b: DMatrix<f64>,
    /// `rank x width`
    pub a: DMatrix<f64>,
}

/// Gradient of the loss with respect to one block's factors, restricted to
/// the block-local columns `cols` of `a`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockGradient {
    pub cols: ColRange,
    pub b: DMatrix<f64>,
    pub a: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    base: DMatrix<f64>,
    blocks: Vec<AdapterBlock>,
    layout: BlockLayout,
}

impl ToyModel {
    /// Base entries are uniform in (-0.5, 0.5); every `b` is Gaussian with
    /// standard deviation `1/sqrt(rank)` and every `a` starts at zero, so the
    /// adapter update is zero at initialization.
    pub fn init(layout: &BlockLayout, seed: u64) -> Result<Self, TrainError> {
        layout.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d_out, d_in, rank) = (layout.d_out, layout.d_in, layout.rank);
        // row-major fill so the draw order does not depend on storage order
        let base = DMatrix::from_row_iterator(
            d_out,
            d_in,
            (0..d_out * d_in).map(|_| rng.random_range(-0.5..0.5)),
        );
        let scale = 1.0 / (rank as f64).sqrt();
        let blocks = layout
            .segments
            .iter()
            .map(|seg| {
                let b = DMatrix::from_row_iterator(
                    d_out,
                    rank,
                    (0..d_out * rank).map(|_| scale * rng.sample::<f64, _>(StandardNormal)),
                );
                AdapterBlock {
                    b,
                    a: DMatrix::zeros(rank, seg.width()),
                }
            })
            .collect();
        Ok(ToyModel {
            base,
            blocks,
            layout: layout.clone(),
        })
    }

    /// Assembles a model from explicit matrices, checking every shape.
    pub fn from_parts(
        layout: BlockLayout,
        base: DMatrix<f64>,
        blocks: Vec<AdapterBlock>,
    ) -> Result<Self, TrainError> {
        layout.check()?;
        if base.shape() != (layout.d_out, layout.d_in) {
            return Err(TrainError::Dimension(format!(
                "base is {:?}, layout wants ({}, {})",
                base.shape(),
                layout.d_out,
                layout.d_in
            )));
        }
        if blocks.len() != layout.num_blocks() {
            return Err(TrainError::Dimension(format!(
                "{} blocks for {} segments",
                blocks.len(),
                layout.num_blocks()
            )));
        }
        for (seg, block) in layout.segments.iter().zip(&blocks) {
            if block.b.shape() != (layout.d_out, layout.rank)
                || block.a.shape() != (layout.rank, seg.width())
            {
                return Err(TrainError::Dimension(format!(
                    "block for segment {seg} has factors {:?} and {:?}",
                    block.b.shape(),
                    block.a.shape()
                )));
            }
        }
        Ok(ToyModel {
            base,
            blocks,
            layout,
        })
    }

    pub fn base(&self) -> &DMatrix<f64> {
        &self.base
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.layout
    }

    pub fn block(&self, t: TaskId) -> &AdapterBlock {
        &self.blocks[t.0]
    }

    pub fn blocks(&self) -> &[AdapterBlock] {
        &self.blocks
    }

    pub(crate) fn block_mut(&mut self, t: TaskId) -> &mut AdapterBlock {
        &mut self.blocks[t.0]
    }

    /// Every block with all of its columns.
    pub fn all_blocks(&self) -> ActiveSet {
        (0..self.blocks.len())
            .map(|i| (TaskId(i), self.layout.full(TaskId(i))))
            .collect()
    }

    fn check_active(&self, active: &ActiveSet) -> Result<(), TrainError> {
        for (&t, r) in active {
            if t.0 >= self.blocks.len() {
                return Err(TrainError::UnknownTask(t.to_string()));
            }
            if r.start > r.end || r.end > self.layout.width(t) {
                return Err(TrainError::Dimension(format!(
                    "active range {r} exceeds block {t} of width {}",
                    self.layout.width(t)
                )));
            }
        }
        Ok(())
    }

    /// `W0 * x` plus the low-rank contribution of the active columns of each
    /// active block. Inactive columns act only through `W0`.
    pub fn forward(
        &self,
        active: &ActiveSet,
        x: &DVector<f64>,
    ) -> Result<DVector<f64>, TrainError> {
        let x = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        let y = self.forward_batch(active, &x)?;
        Ok(y.column(0).into_owned())
    }

    /// Column-wise forward over a `d_in x m` input matrix.
    pub fn forward_batch(
        &self,
        active: &ActiveSet,
        x: &DMatrix<f64>,
    ) -> Result<DMatrix<f64>, TrainError> {
        if x.nrows() != self.layout.d_in {
            return Err(TrainError::Dimension(format!(
                "input has {} rows, model expects {}",
                x.nrows(),
                self.layout.d_in
            )));
        }
        self.check_active(active)?;
        let mut y = &self.base * x;
        for (&t, r) in active {
            if r.is_empty() {
                continue;
            }
            let block = &self.blocks[t.0];
            let abs = self.layout.segment(t).start + r.start;
            let hidden = block.a.columns(r.start, r.width()) * x.rows(abs, r.width());
            y += &block.b * hidden;
        }
        Ok(y)
    }

    /// Mean squared error `sum ||y - target||^2 / (2 m)` over the batch.
    pub fn loss(&self, active: &ActiveSet, batch: &Batch) -> Result<f64, TrainError> {
        let y = self.forward_batch(active, &batch.x)?;
        check_targets(&y, batch)?;
        let m = batch.len() as f64;
        Ok((y - &batch.y).norm_squared() / (2.0 * m))
    }

    /// Analytic gradients of [`ToyModel::loss`] for every active block.
    pub fn gradients(
        &self,
        active: &ActiveSet,
        batch: &Batch,
    ) -> Result<BTreeMap<TaskId, BlockGradient>, TrainError> {
        let y = self.forward_batch(active, &batch.x)?;
        check_targets(&y, batch)?;
        let err = (y - &batch.y) / batch.len() as f64;
        let mut out = BTreeMap::new();
        for (&t, &r) in active {
            let block = &self.blocks[t.0];
            let abs = self.layout.segment(t).start + r.start;
            // d_out x width: output error against the segment's inputs
            let g_seg = &err * batch.x.rows(abs, r.width()).transpose();
            let a_sub = block.a.columns(r.start, r.width());
            out.insert(
                t,
                BlockGradient {
                    cols: r,
                    b: &g_seg * a_sub.transpose(),
                    a: block.b.transpose() * &g_seg,
                },
            );
        }
        Ok(out)
    }

    /// Dense `W0 + sum embed(b * a)` over the active columns.
    pub fn effective_weight(&self, active: &ActiveSet) -> Result<DMatrix<f64>, TrainError> {
        self.check_active(active)?;
        let mut w = self.base.clone();
        for (&t, r) in active {
            let block = &self.blocks[t.0];
            let abs = self.layout.segment(t).start + r.start;
            let delta = &block.b * block.a.columns(r.start, r.width());
            let mut target = w.columns_mut(abs, r.width());
            target += delta;
        }
        Ok(w)
    }

    /// Restricts the model to `tasks` and all of their ancestors.
    pub fn compose<'m>(
        &'m self,
        graph: &TaskGraph,
        tasks: &BTreeSet<TaskId>,
    ) -> Result<ComposedModel<'m>, TrainError> {
        if graph.len() != self.blocks.len() {
            return Err(TrainError::Dimension(format!(
                "graph has {} tasks, model has {} blocks",
                graph.len(),
                self.blocks.len()
            )));
        }
        let mut closure = BTreeSet::new();
        for &t in tasks {
            closure.insert(t);
            closure.extend(graph.ancestors(t)?);
        }
        let active = closure.iter().map(|&t| (t, self.layout.full(t))).collect();
        Ok(ComposedModel {
            model: self,
            active,
        })
    }

    /// Copy of the model with the block of leaf task `t` zeroed out.
    pub fn without_leaf(&self, graph: &TaskGraph, t: TaskId) -> Result<ToyModel, TrainError> {
        if !graph.is_leaf(t)? {
            return Err(TrainError::NotALeaf(graph.name(t).to_string()));
        }
        let mut pruned = self.clone();
        let block = pruned.block_mut(t);
        block.a.fill(0.0);
        block.b.fill(0.0);
        Ok(pruned)
    }
}

fn check_targets(y: &DMatrix<f64>, batch: &Batch) -> Result<(), TrainError> {
    if y.shape() != batch.y.shape() {
        return Err(TrainError::Dimension(format!(
            "targets are {:?}, outputs are {:?}",
            batch.y.shape(),
            y.shape()
        )));
    }
    if batch.is_empty() {
        return Err(TrainError::Dimension("empty batch".into()));
    }
    Ok(())
}

/// A read-only view of a model that uses only a dependency-closed set of
/// blocks.
#[derive(Debug, Clone)]
pub struct ComposedModel<'m> {
    model: &'m ToyModel,
    active: ActiveSet,
}

impl ComposedModel<'_> {
    pub fn active(&self) -> &ActiveSet {
        &self.active
    }

    pub fn tasks(&self) -> BTreeSet<TaskId> {
        self.active.keys().copied().collect()
    }

    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>, TrainError> {
        self.model.forward(&self.active, x)
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64, TrainError> {
        self.model.loss(&self.active, batch)
    }
}
