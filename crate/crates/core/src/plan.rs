//! Column-block layout of the adapter matrix and per-stage train/freeze/mask
//! assignments.
//!
//! The adapter matrix has one contiguous column segment per task. Every task
//! is trained exactly once, in layer order. While task `v` trains, its own
//! block is fully trainable, each direct prerequisite block has its first
//! `ceil(delta * width)` columns trainable and the rest frozen, and every other
//! block is masked. Column ranges inside a [`StagePlan`] are block-local.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taskgraph::{LayerList, TaskGraph, TaskId};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("delta must lie in [0, 1], got {0}")]
    Delta(f64),
}

/// Half-open column range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "[usize; 2]", from = "[usize; 2]")]
pub struct ColRange {
    pub start: usize,
    pub end: usize,
}

impl ColRange {
    pub fn new(start: usize, end: usize) -> Self {
        ColRange { start, end }
    }

    pub fn width(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, col: usize) -> bool {
        self.start <= col && col < self.end
    }

    pub fn intersects(&self, other: &ColRange) -> bool {
        self.start.max(other.start) < self.end.min(other.end)
    }

    /// Shifts a block-local range into absolute matrix columns.
    pub fn offset(&self, by: usize) -> ColRange {
        ColRange::new(self.start + by, self.end + by)
    }

    pub fn iter(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

impl From<ColRange> for [usize; 2] {
    fn from(r: ColRange) -> Self {
        [r.start, r.end]
    }
}

impl From<[usize; 2]> for ColRange {
    fn from([start, end]: [usize; 2]) -> Self {
        ColRange { start, end }
    }
}

impl fmt::Display for ColRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{},{})", self.start, self.end)
    }
}

/// Fraction of each prerequisite block that is activated (trainable) while a
/// dependent task trains. `frozen_ratio = 1 - delta`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Delta(f64);

impl Delta {
    pub const ZERO: Delta = Delta(0.0);
    pub const ONE: Delta = Delta(1.0);

    pub fn new(delta: f64) -> Result<Self, PlanError> {
        if (0.0..=1.0).contains(&delta) {
            Ok(Delta(delta))
        } else {
            Err(PlanError::Delta(delta))
        }
    }

    pub fn from_frozen_ratio(frozen_ratio: f64) -> Result<Self, PlanError> {
        if (0.0..=1.0).contains(&frozen_ratio) {
            Ok(Delta(1.0 - frozen_ratio))
        } else {
            Err(PlanError::Delta(1.0 - frozen_ratio))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn frozen_ratio(self) -> f64 {
        1.0 - self.0
    }

    /// Number of leading columns activated in a block of `width` columns:
    /// `ceil(delta * width)`. Products within 1e-9 of an integer are snapped
    /// so that e.g. `0.7 * 10` activates 7 columns, not 8.
    pub fn activated(self, width: usize) -> usize {
        let exact = self.0 * width as f64;
        let nearest = exact.round();
        let cols = if (exact - nearest).abs() < 1e-9 {
            nearest
        } else {
            exact.ceil()
        };
        (cols as usize).min(width)
    }
}

/// Per-task column segments of a `d_out x d_in` adapter matrix of rank `rank`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockLayout {
    pub d_out: usize,
    pub d_in: usize,
    pub rank: usize,
    /// Absolute column segment of each task, indexed by task.
    pub segments: Vec<ColRange>,
}

impl BlockLayout {
    /// Splits `d_in` columns across the graph's tasks. Without explicit widths
    /// the split is equal, with the remainder going to the first
    /// `d_in mod n` tasks.
    pub fn partition(
        d_out: usize,
        d_in: usize,
        rank: usize,
        graph: &TaskGraph,
        widths: Option<&[usize]>,
    ) -> Result<Self, PlanError> {
        let n = graph.len();
        if d_out == 0 {
            return Err(PlanError::Dimension("d_out must be at least 1".into()));
        }
        if rank == 0 {
            return Err(PlanError::Dimension("rank must be at least 1".into()));
        }
        if d_in < n {
            return Err(PlanError::Dimension(format!(
                "d_in = {d_in} is smaller than the task count {n}"
            )));
        }
        let widths: Vec<usize> = match widths {
            Some(w) => {
                if w.len() != n {
                    return Err(PlanError::Dimension(format!(
                        "{} widths given for {n} tasks",
                        w.len()
                    )));
                }
                if w.contains(&0) {
                    return Err(PlanError::Dimension("segment widths must be >= 1".into()));
                }
                let total: usize = w.iter().sum();
                if total != d_in {
                    return Err(PlanError::Dimension(format!(
                        "widths sum to {total}, expected d_in = {d_in}"
                    )));
                }
                w.to_vec()
            }
            None => {
                let base = d_in / n;
                let extra = d_in % n;
                (0..n).map(|i| base + usize::from(i < extra)).collect()
            }
        };
        let mut start = 0;
        let segments = widths
            .iter()
            .map(|&w| {
                let seg = ColRange::new(start, start + w);
                start += w;
                seg
            })
            .collect();
        Ok(BlockLayout {
            d_out,
            d_in,
            rank,
            segments,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.segments.len()
    }

    pub fn segment(&self, t: TaskId) -> ColRange {
        self.segments[t.0]
    }

    pub fn width(&self, t: TaskId) -> usize {
        self.segments[t.0].width()
    }

    pub fn widths(&self) -> Vec<usize> {
        self.segments.iter().map(ColRange::width).collect()
    }

    pub fn full(&self, t: TaskId) -> ColRange {
        ColRange::new(0, self.width(t))
    }

    /// Checks the segment invariants: contiguous, ordered, covering `[0, d_in)`.
    pub fn check(&self) -> Result<(), PlanError> {
        if self.rank == 0 || self.d_out == 0 {
            return Err(PlanError::Dimension("rank and d_out must be >= 1".into()));
        }
        let mut expected = 0;
        for seg in &self.segments {
            if seg.start != expected || seg.width() == 0 {
                return Err(PlanError::Dimension(format!(
                    "segment {seg} breaks contiguity at column {expected}"
                )));
            }
            expected = seg.end;
        }
        if expected != self.d_in {
            return Err(PlanError::Dimension(format!(
                "segments cover {expected} of {} columns",
                self.d_in
            )));
        }
        Ok(())
    }
}

/// Train/freeze/mask assignment of every block for one trainee.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage_index: usize,
    pub trainee: TaskId,
    pub train: BTreeMap<TaskId, ColRange>,
    pub freeze: BTreeMap<TaskId, ColRange>,
    pub mask: BTreeSet<TaskId>,
    pub delta: f64,
}

impl StagePlan {
    /// Blocks that take part in the forward pass (trainable or frozen columns),
    /// with the union of their active block-local columns.
    pub fn active_blocks(&self) -> BTreeMap<TaskId, ColRange> {
        let mut active: BTreeMap<TaskId, ColRange> = self.train.clone();
        for (&t, &r) in &self.freeze {
            active
                .entry(t)
                .and_modify(|cur| {
                    *cur = ColRange::new(cur.start.min(r.start), cur.end.max(r.end));
                })
                .or_insert(r);
        }
        active
    }

    /// Tasks with at least one trainable column.
    pub fn training_tasks(&self) -> BTreeSet<TaskId> {
        self.train
            .iter()
            .filter(|(_, r)| !r.is_empty())
            .map(|(&t, _)| t)
            .collect()
    }

    /// Tasks whose block takes part in the forward pass only.
    pub fn frozen_tasks(&self) -> BTreeSet<TaskId> {
        let training = self.training_tasks();
        self.freeze
            .iter()
            .filter(|(t, r)| !r.is_empty() && !training.contains(t))
            .map(|(&t, _)| t)
            .collect()
    }
}

/// One stage per task, ordered by layer and then task index.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPlan {
    pub stages: Vec<StagePlan>,
    pub layout: BlockLayout,
    pub graph: TaskGraph,
    pub delta: Delta,
}

impl TrainingPlan {
    pub fn build(graph: &TaskGraph, layout: &BlockLayout, delta: Delta) -> Result<Self, PlanError> {
        layout.check()?;
        if layout.num_blocks() != graph.len() {
            return Err(PlanError::Dimension(format!(
                "layout has {} blocks for {} tasks",
                layout.num_blocks(),
                graph.len()
            )));
        }
        let layers = graph.extract_layers();
        let mut stages = Vec::with_capacity(graph.len());
        for trainee in layers.iter_tasks() {
            let prereqs = graph
                .prerequisites(trainee)
                .expect("trainee comes from the graph");
            let mut train = BTreeMap::new();
            let mut freeze = BTreeMap::new();
            train.insert(trainee, layout.full(trainee));
            for &p in prereqs {
                let width = layout.width(p);
                let active = delta.activated(width);
                if active > 0 {
                    train.insert(p, ColRange::new(0, active));
                }
                if active < width {
                    freeze.insert(p, ColRange::new(active, width));
                }
            }
            let mask = graph
                .tasks()
                .filter(|t| *t != trainee && !prereqs.contains(t))
                .collect();
            stages.push(StagePlan {
                stage_index: stages.len(),
                trainee,
                train,
                freeze,
                mask,
                delta: delta.value(),
            });
        }
        Ok(TrainingPlan {
            stages,
            layout: layout.clone(),
            graph: graph.clone(),
            delta,
        })
    }

    pub fn layers(&self) -> LayerList {
        self.graph.extract_layers()
    }

    pub fn stage_for(&self, trainee: TaskId) -> Option<&StagePlan> {
        self.stages.iter().find(|s| s.trainee == trainee)
    }

    pub fn validate(&self) -> ValidationReport {
        validate_plan(self)
    }

    /// Plain-text listing of the layers and every stage's block states.
    pub fn render(&self) -> String {
        let g = &self.graph;
        let name = |t: &TaskId| g.name(*t).to_string();
        let mut out = String::new();
        let layers: Vec<String> = self
            .layers()
            .layers
            .iter()
            .map(|l| format!("[{}]", l.iter().map(name).collect::<Vec<_>>().join(", ")))
            .collect();
        let _ = writeln!(out, "layers: {}", layers.join(" "));
        let _ = writeln!(out, "delta: {}", self.delta.value());
        let ranges = |m: &BTreeMap<TaskId, ColRange>| {
            if m.is_empty() {
                "-".to_string()
            } else {
                m.iter()
                    .map(|(t, r)| format!("{}{}", name(t), r))
                    .collect::<Vec<_>>()
                    .join(" ")
            }
        };
        for s in &self.stages {
            let mask = if s.mask.is_empty() {
                "-".to_string()
            } else {
                s.mask.iter().map(name).collect::<Vec<_>>().join(" ")
            };
            let _ = writeln!(
                out,
                "stage {}: trainee {} | train {} | freeze {} | mask {}",
                s.stage_index,
                name(&s.trainee),
                ranges(&s.train),
                ranges(&s.freeze),
                mask
            );
        }
        out
    }

    pub fn to_document(&self) -> PlanDocument {
        let g = &self.graph;
        let named = |m: &BTreeMap<TaskId, ColRange>| {
            m.iter()
                .map(|(t, r)| (g.name(*t).to_string(), *r))
                .collect::<BTreeMap<_, _>>()
        };
        PlanDocument {
            delta: self.delta.value(),
            frozen_ratio: self.delta.frozen_ratio(),
            layout: LayoutDocument {
                d_out: self.layout.d_out,
                d_in: self.layout.d_in,
                rank: self.layout.rank,
                segments: g
                    .tasks()
                    .map(|t| SegmentDocument {
                        task: g.name(t).to_string(),
                        cols: self.layout.segment(t),
                    })
                    .collect(),
            },
            stages: self
                .stages
                .iter()
                .map(|s| StageDocument {
                    trainee: g.name(s.trainee).to_string(),
                    train: named(&s.train),
                    freeze: named(&s.freeze),
                    mask: s.mask.iter().map(|t| g.name(*t).to_string()).collect(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanDocument {
    pub delta: f64,
    pub frozen_ratio: f64,
    pub layout: LayoutDocument,
    pub stages: Vec<StageDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutDocument {
    pub d_out: usize,
    pub d_in: usize,
    pub rank: usize,
    pub segments: Vec<SegmentDocument>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentDocument {
    pub task: String,
    pub cols: ColRange,
}

/// One stage as `{"trainee", "train", "freeze", "mask"}` with block-local,
/// half-open column ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDocument {
    pub trainee: String,
    pub train: BTreeMap<String, ColRange>,
    pub freeze: BTreeMap<String, ColRange>,
    pub mask: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    DeltaOutOfRange,
    LayoutMismatch {
        detail: String,
    },
    StageIndex {
        position: usize,
        found: usize,
    },
    UnknownTask {
        stage: usize,
        task: TaskId,
    },
    OutOfOrder {
        stage: usize,
        trainee: TaskId,
    },
    NeverTrained {
        task: TaskId,
    },
    TrainedTwice {
        task: TaskId,
    },
    RangeOutsideBlock {
        stage: usize,
        task: TaskId,
    },
    Overlap {
        stage: usize,
        task: TaskId,
    },
    Uncovered {
        stage: usize,
        task: TaskId,
    },
    WrongState {
        stage: usize,
        task: TaskId,
        detail: String,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DeltaOutOfRange => write!(f, "delta outside [0, 1]"),
            Violation::LayoutMismatch { detail } => write!(f, "layout mismatch: {detail}"),
            Violation::StageIndex { position, found } => {
                write!(f, "stage at position {position} carries index {found}")
            }
            Violation::UnknownTask { stage, task } => {
                write!(f, "stage {stage}: unknown task {task}")
            }
            Violation::OutOfOrder { stage, trainee } => {
                write!(f, "stage {stage}: trainee {trainee} breaks layer order")
            }
            Violation::NeverTrained { task } => write!(f, "task {task} never trained"),
            Violation::TrainedTwice { task } => write!(f, "task {task} trained more than once"),
            Violation::RangeOutsideBlock { stage, task } => {
                write!(f, "stage {stage}: range outside block of task {task}")
            }
            Violation::Overlap { stage, task } => {
                write!(
                    f,
                    "stage {stage}: overlapping states in block of task {task}"
                )
            }
            Violation::Uncovered { stage, task } => {
                write!(f, "stage {stage}: columns of task {task} have no state")
            }
            Violation::WrongState {
                stage,
                task,
                detail,
            } => {
                write!(f, "stage {stage}: task {task}: {detail}")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Lists every violated plan invariant. Each (stage, block) pair reports at
/// most one block-level violation, in the order: out of range, overlap,
/// uncovered, wrong state.
pub fn validate_plan(plan: &TrainingPlan) -> ValidationReport {
    let mut violations = Vec::new();
    let g = &plan.graph;
    let n = g.len();
    let layout = &plan.layout;

    if !(0.0..=1.0).contains(&plan.delta.value()) {
        violations.push(Violation::DeltaOutOfRange);
    }
    if let Err(e) = layout.check() {
        violations.push(Violation::LayoutMismatch {
            detail: e.to_string(),
        });
        return ValidationReport { violations };
    }
    if layout.num_blocks() != n {
        violations.push(Violation::LayoutMismatch {
            detail: format!("{} blocks for {n} tasks", layout.num_blocks()),
        });
        return ValidationReport { violations };
    }

    let layer_of = g.extract_layers().layer_of();
    let mut trained = vec![0usize; n];
    let mut last_layer = 0;
    for (position, stage) in plan.stages.iter().enumerate() {
        if stage.stage_index != position {
            violations.push(Violation::StageIndex {
                position,
                found: stage.stage_index,
            });
        }
        let mentioned = stage
            .train
            .keys()
            .chain(stage.freeze.keys())
            .chain(stage.mask.iter())
            .chain(std::iter::once(&stage.trainee));
        let mut unknown = false;
        for &t in mentioned {
            if !g.contains(t) {
                violations.push(Violation::UnknownTask {
                    stage: position,
                    task: t,
                });
                unknown = true;
            }
        }
        if unknown {
            continue;
        }
        trained[stage.trainee.0] += 1;
        let layer = layer_of[&stage.trainee];
        if layer < last_layer {
            violations.push(Violation::OutOfOrder {
                stage: position,
                trainee: stage.trainee,
            });
        }
        last_layer = last_layer.max(layer);

        let prereqs = g.prerequisites(stage.trainee).expect("checked above");
        for t in g.tasks() {
            if let Some(v) = check_block(plan, stage, position, t, prereqs.contains(&t)) {
                violations.push(v);
            }
        }
    }
    for (i, &count) in trained.iter().enumerate() {
        match count {
            0 => violations.push(Violation::NeverTrained { task: TaskId(i) }),
            1 => {}
            _ => violations.push(Violation::TrainedTwice { task: TaskId(i) }),
        }
    }
    ValidationReport { violations }
}

fn check_block(
    plan: &TrainingPlan,
    stage: &StagePlan,
    position: usize,
    t: TaskId,
    is_prereq: bool,
) -> Option<Violation> {
    let width = plan.layout.width(t);
    let train = stage.train.get(&t).copied().filter(|r| !r.is_empty());
    let freeze = stage.freeze.get(&t).copied().filter(|r| !r.is_empty());
    let mask = stage.mask.contains(&t).then(|| ColRange::new(0, width));
    let parts: Vec<ColRange> = [train, freeze, mask].into_iter().flatten().collect();

    if parts.iter().any(|r| r.end > width || r.start > r.end) {
        return Some(Violation::RangeOutsideBlock {
            stage: position,
            task: t,
        });
    }
    for (i, a) in parts.iter().enumerate() {
        if parts[i + 1..].iter().any(|b| a.intersects(b)) {
            return Some(Violation::Overlap {
                stage: position,
                task: t,
            });
        }
    }
    if parts.iter().map(ColRange::width).sum::<usize>() != width {
        return Some(Violation::Uncovered {
            stage: position,
            task: t,
        });
    }

    let wrong = |detail: String| {
        Some(Violation::WrongState {
            stage: position,
            task: t,
            detail,
        })
    };
    if t == stage.trainee {
        if train != Some(ColRange::new(0, width)) {
            return wrong("trainee block is not fully trainable".into());
        }
    } else if is_prereq {
        let active = Delta(plan.delta.value().clamp(0.0, 1.0)).activated(width);
        let want_train = (active > 0).then(|| ColRange::new(0, active));
        let want_freeze = (active < width).then(|| ColRange::new(active, width));
        if train != want_train || freeze != want_freeze {
            return wrong(format!(
                "prerequisite split should activate the first {active} of {width} columns"
            ));
        }
    } else if mask.is_none() {
        return wrong("non-prerequisite block is not masked".into());
    }
    None
}
