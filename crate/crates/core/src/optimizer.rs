//! Two-phase search for a pipeline strategy.
//!
//! Phase one fixes the device grouping and the frozen-task allocation by
//! minimizing the computation gap
//! `G_c = |R_c(D_t) - R_r(V_t)| + |R_c(D_f) - R_r(V_f)|`.
//! Phase two keeps that grouping and enumerates every layer partition and
//! batch size, simulating each candidate and keeping the smallest makespan.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::costmodel::{CostError, CostModel, Execution};
use crate::schedule::{
    build_schedule, micro_batch_count, simulate, Grouping, Partition, ScheduleError, Trace,
    Workload,
};

/// Upper bound on `2^devices * 2^frozen_tasks` for the grouping phase.
pub const MAX_GROUPING_CANDIDATES: u64 = 1 << 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimizeError {
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapResult {
    pub train_devices: Vec<String>,
    pub frozen_devices: Vec<String>,
    pub offloaded: BTreeSet<String>,
    /// Training tasks followed by offloaded frozen tasks.
    pub train_tasks: Vec<String>,
    pub frozen_tasks: Vec<String>,
    pub gap: f64,
    pub train_capacity: f64,
}

impl GapResult {
    pub fn grouping(&self) -> Grouping {
        Grouping {
            train_devices: self.train_devices.clone(),
            frozen_devices: self.frozen_devices.clone(),
            offloaded: self.offloaded.clone(),
        }
    }
}

/// `G_c` for one grouping.
pub fn computation_gap(
    cm: &CostModel,
    workload: &Workload,
    grouping: &Grouping,
) -> Result<f64, OptimizeError> {
    let capacity = |ids: &[String]| -> Result<f64, CostError> {
        ids.iter().map(|d| Ok(cm.device(d)?.capacity)).sum()
    };
    let mut req_t = 0.0;
    for t in &workload.training {
        req_t += cm.task(t)?.requirement(Execution::Train);
    }
    let mut req_f = 0.0;
    for t in &workload.frozen {
        let r = cm.task(t)?.requirement(Execution::Frozen);
        if grouping.offloaded.contains(t) {
            req_t += r;
        } else {
            req_f += r;
        }
    }
    Ok((capacity(&grouping.train_devices)? - req_t).abs()
        + (capacity(&grouping.frozen_devices)? - req_f).abs())
}

/// Exhaustive search over device bipartitions and frozen-task offloads.
///
/// Both groups must be nonempty unless there is a single device, which then
/// forms the training group and receives every frozen task.
pub fn minimize_gap(cm: &CostModel, workload: &Workload) -> Result<GapResult, OptimizeError> {
    let nd = cm.devices.len();
    let nf = workload.frozen.len();
    if nd == 0 {
        return Err(OptimizeError::Infeasible("no devices".into()));
    }
    if workload.training.is_empty() {
        return Err(OptimizeError::Infeasible("no training task".into()));
    }
    if nd + nf >= 64 || (1u64 << (nd + nf)) > MAX_GROUPING_CANDIDATES {
        return Err(OptimizeError::Infeasible(format!(
            "{nd} devices and {nf} frozen tasks exceed the enumeration limit"
        )));
    }

    let req_train: f64 = workload
        .training
        .iter()
        .map(|t| Ok(cm.task(t)?.req_train))
        .sum::<Result<f64, CostError>>()?;
    let req_frozen: Vec<f64> = workload
        .frozen
        .iter()
        .map(|t| Ok(cm.task(t)?.req_frozen))
        .collect::<Result<_, CostError>>()?;

    let device_masks: Vec<u64> = if nd == 1 {
        vec![1]
    } else {
        (1..(1u64 << nd) - 1).collect()
    };
    // (gap, R_c(D_t), sorted D_t ids, sorted offloads, device mask, offload mask)
    type Candidate<'a> = (f64, f64, Vec<&'a str>, Vec<&'a str>, u64, u64);
    let mut best: Option<Candidate> = None;
    for &dm in &device_masks {
        let train_ids: Vec<&str> = (0..nd)
            .filter(|i| dm >> i & 1 == 1)
            .map(|i| cm.devices[i].id.as_str())
            .collect();
        let cap_t: f64 = (0..nd)
            .filter(|i| dm >> i & 1 == 1)
            .map(|i| cm.devices[i].capacity)
            .sum();
        let cap_f: f64 = (0..nd)
            .filter(|i| dm >> i & 1 == 0)
            .map(|i| cm.devices[i].capacity)
            .sum();
        let mut sorted_ids = train_ids.clone();
        sorted_ids.sort_unstable();
        let offload_masks: Vec<u64> = if nd == 1 {
            vec![(1u64 << nf) - 1]
        } else {
            (0..1u64 << nf).collect()
        };
        for om in offload_masks {
            let mut r_t = req_train;
            let mut r_f = 0.0;
            for (j, r) in req_frozen.iter().enumerate() {
                if om >> j & 1 == 1 {
                    r_t += r;
                } else {
                    r_f += r;
                }
            }
            let gap = (cap_t - r_t).abs() + (cap_f - r_f).abs();
            let mut offloaded: Vec<&str> = (0..nf)
                .filter(|j| om >> j & 1 == 1)
                .map(|j| workload.frozen[j].as_str())
                .collect();
            offloaded.sort_unstable();
            let better = match &best {
                None => true,
                Some((bg, bc, bids, boff, _, _)) => {
                    gap.total_cmp(bg)
                        .then(bc.total_cmp(&cap_t))
                        .then_with(|| sorted_ids.cmp(bids))
                        .then(offloaded.len().cmp(&boff.len()))
                        .then_with(|| offloaded.cmp(boff))
                        == Ordering::Less
                }
            };
            if better {
                best = Some((gap, cap_t, sorted_ids.clone(), offloaded, dm, om));
            }
        }
    }
    let (gap, train_capacity, _, _, dm, om) = best.expect("at least one candidate");
    let pick = |bit: u64| -> Vec<String> {
        (0..nd)
            .filter(|i| dm >> i & 1 == bit)
            .map(|i| cm.devices[i].id.clone())
            .collect()
    };
    let offloaded: BTreeSet<String> = (0..nf)
        .filter(|j| om >> j & 1 == 1)
        .map(|j| workload.frozen[j].clone())
        .collect();
    let mut train_tasks = workload.training.clone();
    train_tasks.extend(
        workload
            .frozen
            .iter()
            .filter(|t| offloaded.contains(*t))
            .cloned(),
    );
    let frozen_tasks = workload
        .frozen
        .iter()
        .filter(|t| !offloaded.contains(*t))
        .cloned()
        .collect();
    Ok(GapResult {
        train_devices: pick(1),
        frozen_devices: pick(0),
        offloaded,
        train_tasks,
        frozen_tasks,
        gap,
        train_capacity,
    })
}

/// All ways to write `total` as `parts` positive integers, in lexicographic
/// order.
pub fn compositions(total: usize, parts: usize) -> Vec<Vec<usize>> {
    fn rec(left: usize, parts: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if parts == 0 {
            if left == 0 {
                out.push(prefix.clone());
            }
            return;
        }
        if left < parts {
            return;
        }
        for first in 1..=left - (parts - 1) {
            prefix.push(first);
            rec(left - first, parts - 1, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(total, parts, &mut Vec::new(), &mut out);
    out
}

/// Every partition of `num_layers` layers consistent with the grouping.
pub fn candidate_partitions(
    grouping: &Grouping,
    num_layers: usize,
) -> Result<Vec<Partition>, OptimizeError> {
    let (nt, nf) = (grouping.train_devices.len(), grouping.frozen_devices.len());
    let splits: Vec<usize> = if nf == 0 {
        vec![num_layers]
    } else {
        (1..num_layers).collect()
    };
    let mut out = Vec::new();
    for n_t in splits {
        for tc in compositions(n_t, nt) {
            for fc in compositions(num_layers - n_t, nf) {
                out.push(Partition::from_counts(
                    &grouping.train_devices,
                    &tc,
                    &grouping.frozen_devices,
                    &fc,
                )?);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptResult {
    pub grouping: Grouping,
    /// Absent when the grouping was supplied rather than searched.
    pub gap: Option<GapResult>,
    pub partition: Partition,
    pub k: usize,
    pub micro_batches: usize,
    pub c_min: f64,
    pub evaluated: usize,
    pub trace: Trace,
}

/// `{"D_t", "D_f", "V_t", "V_f", "G_c", "Q", "k", "C_min", "evaluated"}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptDocument {
    #[serde(rename = "D_t")]
    pub d_t: Vec<String>,
    #[serde(rename = "D_f")]
    pub d_f: Vec<String>,
    #[serde(rename = "V_t")]
    pub v_t: Vec<String>,
    #[serde(rename = "V_f")]
    pub v_f: Vec<String>,
    #[serde(rename = "G_c")]
    pub g_c: Option<f64>,
    #[serde(rename = "Q")]
    pub q: Vec<String>,
    pub k: usize,
    #[serde(rename = "C_min")]
    pub c_min: f64,
    pub evaluated: usize,
}

impl OptResult {
    pub fn to_document(&self, workload: &Workload) -> OptDocument {
        let offloaded = &self.grouping.offloaded;
        let mut v_t = workload.training.clone();
        v_t.extend(
            workload
                .frozen
                .iter()
                .filter(|t| offloaded.contains(*t))
                .cloned(),
        );
        OptDocument {
            d_t: self.grouping.train_devices.clone(),
            d_f: self.grouping.frozen_devices.clone(),
            v_t,
            v_f: self.grouping.local_frozen(workload).cloned().collect(),
            g_c: self.gap.as_ref().map(|g| g.gap),
            q: self.partition.q(),
            k: self.k,
            c_min: self.c_min,
            evaluated: self.evaluated,
        }
    }
}

/// Makespan of one configuration.
pub fn evaluate(
    cm: &CostModel,
    workload: &Workload,
    grouping: &Grouping,
    partition: &Partition,
    k: usize,
    dataset_size: usize,
) -> Result<Trace, OptimizeError> {
    let n = micro_batch_count(dataset_size, k);
    let schedule = build_schedule(workload, grouping, partition, k, n)?;
    Ok(simulate(&schedule, cm)?)
}

/// Exhaustive search over partitions and `k in 1..=k_max` for a fixed
/// grouping. Ties go to the smaller `k`, then the smaller `N_t`, then the
/// lexicographically smaller per-device layer counts.
pub fn search_partition_batch(
    cm: &CostModel,
    workload: &Workload,
    grouping: &Grouping,
    k_max: usize,
    dataset_size: usize,
) -> Result<OptResult, OptimizeError> {
    if k_max == 0 {
        return Err(OptimizeError::Infeasible("k_max must be at least 1".into()));
    }
    if dataset_size == 0 {
        return Err(OptimizeError::Infeasible("the dataset is empty".into()));
    }
    grouping.check(workload)?;
    let num_layers = cm.num_layers();
    let devices = grouping.train_devices.len() + grouping.frozen_devices.len();
    if num_layers < devices {
        return Err(OptimizeError::Infeasible(format!(
            "{num_layers} layers cannot cover {devices} devices"
        )));
    }
    let partitions = candidate_partitions(grouping, num_layers)?;
    if partitions.is_empty() {
        return Err(OptimizeError::Infeasible("no partition candidates".into()));
    }
    let candidates: Vec<(usize, usize)> = (0..partitions.len())
        .flat_map(|p| (1..=k_max).map(move |k| (p, k)))
        .collect();

    let scored: Vec<(f64, usize, usize)> = candidates
        .par_iter()
        .map(|&(p, k)| {
            let trace = evaluate(cm, workload, grouping, &partitions[p], k, dataset_size)?;
            Ok((trace.makespan, k, p))
        })
        .collect::<Result<_, OptimizeError>>()?;
    let key = |&(c, k, p): &(f64, usize, usize)| {
        let part = &partitions[p];
        (
            c,
            k,
            part.train_layers(),
            part.train_counts(),
            part.frozen_counts(),
        )
    };
    let best = scored
        .iter()
        .min_by(|a, b| {
            let (ka, kb) = (key(a), key(b));
            ka.0.total_cmp(&kb.0)
                .then(ka.1.cmp(&kb.1))
                .then(ka.2.cmp(&kb.2))
                .then_with(|| ka.3.cmp(&kb.3))
                .then_with(|| ka.4.cmp(&kb.4))
        })
        .copied()
        .expect("nonempty candidates");
    let (c_min, k, p) = best;
    let partition = partitions[p].clone();
    let trace = evaluate(cm, workload, grouping, &partition, k, dataset_size)?;
    Ok(OptResult {
        grouping: grouping.clone(),
        gap: None,
        partition,
        k,
        micro_batches: micro_batch_count(dataset_size, k),
        c_min,
        evaluated: scored.len(),
        trace,
    })
}

/// Gap minimization followed by the partition and batch-size search.
pub fn optimize(
    cm: &CostModel,
    workload: &Workload,
    k_max: usize,
    dataset_size: usize,
) -> Result<OptResult, OptimizeError> {
    let gap = minimize_gap(cm, workload)?;
    let mut result = search_partition_batch(cm, workload, &gap.grouping(), k_max, dataset_size)?;
    result.gap = Some(gap);
    Ok(result)
}
