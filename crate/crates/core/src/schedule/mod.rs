//! Two-group pipeline schedules.
//!
//! Devices split into a training group `D_t` and a frozen group `D_f`. The
//! model's layers are cut once: the first `N_t` layers are spread
//! contiguously over `D_t`, the remaining `N_f` over `D_f`. For every
//! micro-batch the training tasks run a forward chain and a backward chain
//! through the `D_t` stages, and the frozen tasks run a forward-only chain
//! through the `D_f` stages. Frozen tasks that are offloaded run their
//! forward chain on the `D_t` stages instead.
//!
//! Events are emitted cycle by cycle:
//!
//! ```text
//! cycle 0:        FP_f(0)  FP_t(0)
//! cycle i (1..n): FP_f(i)  FP_t(i)  BP_t(i-1)
//! cycle n:        BP_t(n-1)
//! ```

mod sim;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use sim::{
    group_completion, serial_makespan, simulate, simulate_serial, write_gantt_json,
    write_summary_csv, DeviceStats, GanttEntry, Trace, TraceEvent,
};

use crate::costmodel::CostError;
use crate::plan::StagePlan;
use crate::taskgraph::TaskGraph;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid grouping: {0}")]
    InvalidGrouping(String),
    #[error("invalid partition: {0}")]
    InvalidPartition(String),
    #[error("event {kind} of micro-batch {micro_batch} on `{device}` never finishes")]
    Unbounded {
        kind: EventKind,
        micro_batch: usize,
        device: String,
    },
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// Training and frozen task sets of one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Workload {
    pub training: Vec<String>,
    pub frozen: Vec<String>,
}

impl Workload {
    /// Tasks with any trainable column count as training; tasks with only
    /// frozen columns count as frozen; masked tasks are absent.
    pub fn from_stage(stage: &StagePlan, graph: &TaskGraph) -> Self {
        Workload {
            training: stage
                .training_tasks()
                .into_iter()
                .map(|t| graph.name(t).to_string())
                .collect(),
            frozen: stage
                .frozen_tasks()
                .into_iter()
                .map(|t| graph.name(t).to_string())
                .collect(),
        }
    }
}

/// Device groups plus the frozen tasks moved onto the training group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Grouping {
    pub train_devices: Vec<String>,
    pub frozen_devices: Vec<String>,
    pub offloaded: BTreeSet<String>,
}

impl Grouping {
    pub fn check(&self, workload: &Workload) -> Result<(), ScheduleError> {
        let bad = |msg: String| Err(ScheduleError::InvalidGrouping(msg));
        if self.train_devices.is_empty() {
            return bad("the training group is empty".into());
        }
        let mut seen = BTreeSet::new();
        for d in self.train_devices.iter().chain(&self.frozen_devices) {
            if !seen.insert(d) {
                return bad(format!("device `{d}` appears twice"));
            }
        }
        if workload.training.is_empty() {
            return bad("the workload has no training task".into());
        }
        for t in &self.offloaded {
            if !workload.frozen.contains(t) {
                return bad(format!("offloaded task `{t}` is not a frozen task"));
            }
        }
        if self.frozen_devices.is_empty() && self.local_frozen(workload).next().is_some() {
            return bad("frozen tasks remain but the frozen group is empty".into());
        }
        Ok(())
    }

    /// Frozen tasks that stay on the frozen group.
    pub fn local_frozen<'w>(
        &'w self,
        workload: &'w Workload,
    ) -> impl Iterator<Item = &'w String> + 'w {
        workload
            .frozen
            .iter()
            .filter(|t| !self.offloaded.contains(*t))
    }

    pub fn is_train_device(&self, id: &str) -> bool {
        self.train_devices.iter().any(|d| d == id)
    }
}

/// Contiguous layer range `[start, end)` hosted by one device.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpan {
    pub device: String,
    pub start: usize,
    pub end: usize,
}

impl LayerSpan {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Layer-to-device assignment: a prefix of `N_t` layers on the training
/// group followed by `N_f` layers on the frozen group.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<LayerSpan>,
    pub frozen: Vec<LayerSpan>,
}

impl Partition {
    /// Builds spans from per-device layer counts, in device order.
    pub fn from_counts(
        train_devices: &[String],
        train_counts: &[usize],
        frozen_devices: &[String],
        frozen_counts: &[usize],
    ) -> Result<Self, ScheduleError> {
        if train_devices.len() != train_counts.len() || frozen_devices.len() != frozen_counts.len()
        {
            return Err(ScheduleError::InvalidPartition(
                "one layer count per device is required".into(),
            ));
        }
        if train_counts.iter().chain(frozen_counts).any(|&c| c == 0) {
            return Err(ScheduleError::InvalidPartition(
                "every device must host at least one layer".into(),
            ));
        }
        let mut next = 0;
        let mut spans = |devices: &[String], counts: &[usize]| -> Vec<LayerSpan> {
            devices
                .iter()
                .zip(counts)
                .map(|(d, &c)| {
                    let span = LayerSpan {
                        device: d.clone(),
                        start: next,
                        end: next + c,
                    };
                    next += c;
                    span
                })
                .collect()
        };
        let train = spans(train_devices, train_counts);
        let frozen = spans(frozen_devices, frozen_counts);
        Ok(Partition { train, frozen })
    }

    pub fn num_layers(&self) -> usize {
        self.train
            .iter()
            .chain(&self.frozen)
            .map(LayerSpan::len)
            .sum()
    }

    /// `N_t`, the number of layers on the training group.
    pub fn train_layers(&self) -> usize {
        self.train.iter().map(LayerSpan::len).sum()
    }

    /// Device of every layer, in layer order.
    pub fn q(&self) -> Vec<String> {
        self.train
            .iter()
            .chain(&self.frozen)
            .flat_map(|s| std::iter::repeat_n(s.device.clone(), s.len()))
            .collect()
    }

    pub fn train_counts(&self) -> Vec<usize> {
        self.train.iter().map(LayerSpan::len).collect()
    }

    pub fn frozen_counts(&self) -> Vec<usize> {
        self.frozen.iter().map(LayerSpan::len).collect()
    }

    fn check(&self, grouping: &Grouping) -> Result<(), ScheduleError> {
        let devices =
            |spans: &[LayerSpan]| spans.iter().map(|s| s.device.clone()).collect::<Vec<_>>();
        if devices(&self.train) != grouping.train_devices
            || devices(&self.frozen) != grouping.frozen_devices
        {
            return Err(ScheduleError::InvalidPartition(
                "partition devices do not match the grouping".into(),
            ));
        }
        let mut next = 0;
        for span in self.train.iter().chain(&self.frozen) {
            if span.start != next || span.is_empty() {
                return Err(ScheduleError::InvalidPartition(format!(
                    "span on `{}` is not contiguous",
                    span.device
                )));
            }
            next = span.end;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    #[serde(rename = "FP_f")]
    FpFrozen,
    #[serde(rename = "FP_t")]
    FpTrain,
    #[serde(rename = "BP_t")]
    BpTrain,
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EventKind::FpFrozen => "FP_f",
            EventKind::FpTrain => "FP_t",
            EventKind::BpTrain => "BP_t",
        })
    }
}

/// Which stream of stages an event belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Chain {
    /// Frozen forward on the frozen group.
    Frozen,
    /// Frozen forward moved onto the training group.
    Offloaded,
    /// Training forward and backward on the training group.
    Train,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledEvent {
    pub kind: EventKind,
    pub chain: Chain,
    pub micro_batch: usize,
    pub cycle: usize,
    /// Index of the stage within its chain's span list.
    pub position: usize,
    pub device: String,
    pub layers: LayerSpan,
    /// Number of task blocks processed by this event.
    pub tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSchedule {
    pub micro_batches: usize,
    pub batch_size: usize,
    pub grouping: Grouping,
    pub partition: Partition,
    /// Events in cycle order; each device executes its events in this order.
    pub events: Vec<ScheduledEvent>,
}

impl PipelineSchedule {
    pub fn cycles(&self) -> Vec<Vec<&ScheduledEvent>> {
        let mut out: Vec<Vec<&ScheduledEvent>> = vec![Vec::new(); self.micro_batches + 1];
        for e in &self.events {
            out[e.cycle].push(e);
        }
        out
    }

    fn spans(&self, chain: Chain) -> &[LayerSpan] {
        match chain {
            Chain::Frozen => &self.partition.frozen,
            Chain::Offloaded | Chain::Train => &self.partition.train,
        }
    }
}

/// Emits the cycle-ordered event list for `n` micro-batches of size `k`.
pub fn build_schedule(
    workload: &Workload,
    grouping: &Grouping,
    partition: &Partition,
    k: usize,
    n: usize,
) -> Result<PipelineSchedule, ScheduleError> {
    if n == 0 || k == 0 {
        return Err(ScheduleError::InvalidGrouping(
            "batch size and micro-batch count must be at least 1".into(),
        ));
    }
    grouping.check(workload)?;
    partition.check(grouping)?;

    let local = grouping.local_frozen(workload).count();
    let offloaded = grouping.offloaded.len();
    let training = workload.training.len();

    let mut events = Vec::new();
    let mut chain = |kind: EventKind,
                     chain: Chain,
                     spans: &[LayerSpan],
                     mb: usize,
                     cycle: usize,
                     tasks: usize| {
        let mut emit = |position: usize| {
            let span = &spans[position];
            events.push(ScheduledEvent {
                kind,
                chain,
                micro_batch: mb,
                cycle,
                position,
                device: span.device.clone(),
                layers: span.clone(),
                tasks,
            });
        };
        if kind == EventKind::BpTrain {
            (0..spans.len()).rev().for_each(&mut emit);
        } else {
            (0..spans.len()).for_each(&mut emit);
        }
    };
    for cycle in 0..=n {
        if cycle < n {
            if local > 0 {
                chain(
                    EventKind::FpFrozen,
                    Chain::Frozen,
                    &partition.frozen,
                    cycle,
                    cycle,
                    local,
                );
            }
            if offloaded > 0 {
                chain(
                    EventKind::FpFrozen,
                    Chain::Offloaded,
                    &partition.train,
                    cycle,
                    cycle,
                    offloaded,
                );
            }
            chain(
                EventKind::FpTrain,
                Chain::Train,
                &partition.train,
                cycle,
                cycle,
                training,
            );
        }
        if cycle > 0 {
            chain(
                EventKind::BpTrain,
                Chain::Train,
                &partition.train,
                cycle - 1,
                cycle,
                training,
            );
        }
    }
    Ok(PipelineSchedule {
        micro_batches: n,
        batch_size: k,
        grouping: grouping.clone(),
        partition: partition.clone(),
        events,
    })
}

/// `ceil(dataset_size / k)`.
pub fn micro_batch_count(dataset_size: usize, k: usize) -> usize {
    dataset_size.div_ceil(k.max(1))
}
