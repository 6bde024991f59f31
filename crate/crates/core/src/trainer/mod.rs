//! Reference trainer that executes a [`TrainingPlan`] on a linear model with
//! per-task low-rank column blocks.
//!
//! Each stage runs full-batch gradient descent on the trainee's data. The
//! forward pass uses every trainable and frozen column; updates touch only
//! the trainable ones. For a partially activated prerequisite only the
//! activated columns of its `a` factor move and its `b` factor stays fixed.

mod data;
mod io;
mod model;

use std::collections::BTreeSet;

use serde::Serialize;
use thiserror::Error;

pub use data::{Batch, DatasetConfig, TaskDataset, TeacherSupport};
pub use io::{
    read_checkpoint, write_checkpoint, write_stage_csv, write_stage_jsonl, Checkpoint,
    MatrixDocument,
};
pub use model::{ActiveSet, AdapterBlock, BlockGradient, ComposedModel, ToyModel};

use crate::plan::{PlanError, StagePlan, TrainingPlan, ValidationReport};
use crate::taskgraph::{GraphError, TaskId};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("task `{0}` has dependents and cannot be removed")]
    NotALeaf(String),
    #[error("dataset for {0} is empty")]
    EmptyDataset(String),
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f64),
    #[error("plan is invalid: {} violation(s)", .0.len())]
    InvalidPlan(ValidationReport),
    #[error("loss diverged to {loss} in stage {stage}")]
    Diverged { stage: usize, loss: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Norm of the parameter change of one block across a stage.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BlockChange {
    pub task: TaskId,
    pub b_norm: f64,
    pub a_norm: f64,
}

impl BlockChange {
    pub fn norm(&self) -> f64 {
        self.b_norm.hypot(self.a_norm)
    }
}

/// Bitwise immutability checks for one stage.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StageAudit {
    /// Masked blocks with any parameter changed.
    pub masked_changed: Vec<TaskId>,
    /// Blocks whose frozen columns, or whose fixed `b` factor, changed.
    pub frozen_changed: Vec<TaskId>,
    pub base_changed: bool,
}

impl StageAudit {
    pub fn violations(&self) -> usize {
        self.masked_changed.len() + self.frozen_changed.len() + usize::from(self.base_changed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageResult {
    pub stage_index: usize,
    pub trainee: TaskId,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    /// Loss before every step, followed by the final loss.
    pub losses: Vec<f64>,
    pub changes: Vec<BlockChange>,
    pub audit: StageAudit,
}

/// One gradient-descent step of `stage` on `batch`. Returns the loss before
/// the update.
pub fn stage_step(
    model: &mut ToyModel,
    stage: &StagePlan,
    batch: &Batch,
    lr: f64,
) -> Result<f64, TrainError> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(TrainError::LearningRate(lr));
    }
    let active = stage.active_blocks();
    let loss = model.loss(&active, batch)?;
    let grads = model.gradients(&active, batch)?;
    for (&t, &cols) in &stage.train {
        if cols.is_empty() {
            continue;
        }
        let grad = &grads[&t];
        let offset = cols.start - grad.cols.start;
        let block = model.block_mut(t);
        let mut a = block.a.columns_mut(cols.start, cols.width());
        a -= lr * grad.a.columns(offset, cols.width());
        if t == stage.trainee {
            block.b -= lr * &grad.b;
        }
    }
    Ok(loss)
}

/// Runs `steps` full-batch steps on the trainee's data and audits the stage.
pub fn run_stage(
    model: &mut ToyModel,
    stage: &StagePlan,
    batch: &Batch,
    steps: usize,
    lr: f64,
) -> Result<StageResult, TrainError> {
    let before = model.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let loss = stage_step(model, stage, batch, lr)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged {
                stage: stage.stage_index,
                loss,
            });
        }
        losses.push(loss);
    }
    let final_loss = model.loss(&stage.active_blocks(), batch)?;
    losses.push(final_loss);
    let changes = (0..model.blocks().len())
        .map(|i| {
            let (old, new) = (before.block(TaskId(i)), model.block(TaskId(i)));
            BlockChange {
                task: TaskId(i),
                b_norm: (&new.b - &old.b).norm(),
                a_norm: (&new.a - &old.a).norm(),
            }
        })
        .collect();
    Ok(StageResult {
        stage_index: stage.stage_index,
        trainee: stage.trainee,
        initial_loss: losses[0],
        final_loss,
        steps,
        losses,
        changes,
        audit: audit_stage(&before, model, stage),
    })
}

/// Executes every stage of a valid plan in order.
pub fn run_plan(
    model: &mut ToyModel,
    plan: &TrainingPlan,
    data: &TaskDataset,
    steps_per_stage: usize,
    lr: f64,
) -> Result<Vec<StageResult>, TrainError> {
    let report = plan.validate();
    if !report.is_valid() {
        return Err(TrainError::InvalidPlan(report));
    }
    if model.layout() != &plan.layout {
        return Err(TrainError::Dimension(
            "model and plan layouts differ".into(),
        ));
    }
    if data.num_tasks() != plan.graph.len() {
        return Err(TrainError::Dimension(format!(
            "dataset covers {} tasks, plan has {}",
            data.num_tasks(),
            plan.graph.len()
        )));
    }
    plan.stages
        .iter()
        .map(|stage| run_stage(model, stage, data.batch(stage.trainee), steps_per_stage, lr))
        .collect()
}

/// Loss of task `t` on its own data when deployed with its dependency closure.
pub fn composed_loss(
    model: &ToyModel,
    graph: &crate::taskgraph::TaskGraph,
    t: TaskId,
    data: &TaskDataset,
) -> Result<f64, TrainError> {
    let set: BTreeSet<TaskId> = [t].into();
    model.compose(graph, &set)?.loss(data.batch(t))
}

fn bits_equal(a: &nalgebra::DMatrix<f64>, b: &nalgebra::DMatrix<f64>) -> bool {
    a.shape() == b.shape()
        && a.iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn audit_stage(before: &ToyModel, after: &ToyModel, stage: &StagePlan) -> StageAudit {
    let mut audit = StageAudit {
        base_changed: !bits_equal(before.base(), after.base()),
        ..StageAudit::default()
    };
    for &t in &stage.mask {
        let (old, new) = (before.block(t), after.block(t));
        if !bits_equal(&old.a, &new.a) || !bits_equal(&old.b, &new.b) {
            audit.masked_changed.push(t);
        }
    }
    let mut fixed: BTreeSet<TaskId> = stage.freeze.keys().copied().collect();
    fixed.extend(stage.train.keys().copied().filter(|&t| t != stage.trainee));
    for t in fixed {
        let (old, new) = (before.block(t), after.block(t));
        let frozen_cols_same = match stage.freeze.get(&t) {
            Some(r) if !r.is_empty() => bits_equal(
                &old.a.columns(r.start, r.width()).into_owned(),
                &new.a.columns(r.start, r.width()).into_owned(),
            ),
            _ => true,
        };
        if !frozen_cols_same || !bits_equal(&old.b, &new.b) {
            audit.frozen_changed.push(t);
        }
    }
    audit
}
