//! Dependency-staged training of low-rank adapter blocks over a task DAG,
//! plus a cost model, simulator and optimizer for two-group pipeline
//! schedules.

pub mod costmodel;
pub mod optimizer;
pub mod plan;
pub mod schedule;
pub mod taskgraph;
pub mod trainer;

pub use costmodel::{CostError, CostModel, DeviceProfile, Execution, LayerCost, Link, TaskLoad};
pub use optimizer::{
    minimize_gap, optimize, search_partition_batch, GapResult, OptDocument, OptResult,
    OptimizeError,
};
pub use plan::{
    validate_plan, BlockLayout, ColRange, Delta, PlanError, StagePlan, TrainingPlan,
    ValidationReport, Violation,
};
pub use schedule::{
    build_schedule, group_completion, serial_makespan, simulate, EventKind, Grouping, Partition,
    PipelineSchedule, ScheduleError, Trace, Workload,
};
pub use taskgraph::{GraphError, LayerList, TaskGraph, TaskId};
pub use trainer::{run_plan, Batch, DatasetConfig, StageResult, TaskDataset, ToyModel, TrainError};
