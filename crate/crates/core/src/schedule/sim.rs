//! Event-level simulation of a pipeline schedule.
//!
//! Each device executes its events in schedule order. An event starts once
//! its device is free and its upstream event has finished and the boundary
//! activations have arrived.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Chain, EventKind, PipelineSchedule, ScheduleError, ScheduledEvent};
use crate::costmodel::{t_bwd, t_fwd, CostModel, Execution};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub kind: EventKind,
    pub chain: Chain,
    pub micro_batch: usize,
    pub cycle: usize,
    pub position: usize,
    pub device: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeviceStats {
    pub busy: f64,
    pub idle: f64,
}

impl DeviceStats {
    pub fn utilization(&self) -> f64 {
        let total = self.busy + self.idle;
        if total > 0.0 {
            self.busy / total
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub events: Vec<TraceEvent>,
    pub makespan: f64,
    pub devices: BTreeMap<String, DeviceStats>,
    pub train_devices: Vec<String>,
    pub frozen_devices: Vec<String>,
}

/// One row of the Gantt export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanttEntry {
    pub device: String,
    pub event: EventKind,
    pub mb: usize,
    pub start: f64,
    pub end: f64,
}

impl Trace {
    pub fn gantt(&self) -> Vec<GanttEntry> {
        self.events
            .iter()
            .map(|e| GanttEntry {
                device: e.device.clone(),
                event: e.kind,
                mb: e.micro_batch,
                start: e.start,
                end: e.end,
            })
            .collect()
    }
}

type EventKey = (EventKind, Chain, usize, usize);

fn key(e: &ScheduledEvent) -> EventKey {
    (e.kind, e.chain, e.micro_batch, e.position)
}

/// Compute time of one event.
fn duration(e: &ScheduledEvent, cm: &CostModel, k: usize) -> Result<f64, ScheduleError> {
    let device = cm.device(&e.device)?;
    let mut work = 0.0;
    for l in e.layers.start..e.layers.end {
        let layer = cm.layer(l)?;
        work += match e.kind {
            EventKind::BpTrain => t_bwd(layer, device, k, Execution::Train),
            EventKind::FpTrain | EventKind::FpFrozen => t_fwd(layer, device, k),
        };
    }
    Ok(e.tasks as f64 * work)
}

/// The event this one waits for, and the transfer time between them.
fn upstream(
    e: &ScheduledEvent,
    schedule: &PipelineSchedule,
    cm: &CostModel,
) -> Result<Option<(EventKey, f64)>, ScheduleError> {
    let spans = schedule.spans(e.chain);
    let k = schedule.batch_size as f64;
    let transfer = |from: usize, boundary: usize| -> Result<f64, ScheduleError> {
        let bytes = cm.layer(boundary)?.act_bytes * k;
        Ok(cm.comm(&spans[from].device, &e.device, bytes)?)
    };
    Ok(match e.kind {
        EventKind::FpTrain | EventKind::FpFrozen => {
            if e.position == 0 {
                None
            } else {
                let prev = e.position - 1;
                let comm = transfer(prev, spans[prev].end - 1)?;
                Some(((e.kind, e.chain, e.micro_batch, prev), comm))
            }
        }
        EventKind::BpTrain => {
            let last = spans.len() - 1;
            if e.position == last {
                Some(((EventKind::FpTrain, Chain::Train, e.micro_batch, last), 0.0))
            } else {
                let next = e.position + 1;
                let comm = transfer(next, spans[e.position].end - 1)?;
                Some(((e.kind, e.chain, e.micro_batch, next), comm))
            }
        }
    })
}

fn run(
    schedule: &PipelineSchedule,
    cm: &CostModel,
    order: &[&ScheduledEvent],
    serial: bool,
) -> Result<Trace, ScheduleError> {
    let k = schedule.batch_size;
    let mut ends: HashMap<EventKey, f64> = HashMap::with_capacity(order.len());
    let mut free: HashMap<&str, f64> = HashMap::new();
    let mut clock = 0.0_f64;
    let mut events = Vec::with_capacity(order.len());
    for &e in order {
        let dur = duration(e, cm, k)?;
        let ready = match upstream(e, schedule, cm)? {
            Some((dep, comm)) => ends[&dep] + comm,
            None => 0.0,
        };
        let available = if serial {
            clock
        } else {
            free.get(e.device.as_str()).copied().unwrap_or(0.0)
        };
        let start = available.max(ready);
        let end = start + dur;
        if !end.is_finite() {
            return Err(ScheduleError::Unbounded {
                kind: e.kind,
                micro_batch: e.micro_batch,
                device: e.device.clone(),
            });
        }
        ends.insert(key(e), end);
        free.insert(e.device.as_str(), end);
        clock = end;
        events.push(TraceEvent {
            kind: e.kind,
            chain: e.chain,
            micro_batch: e.micro_batch,
            cycle: e.cycle,
            position: e.position,
            device: e.device.clone(),
            start,
            end,
        });
    }
    let makespan = events.iter().map(|e| e.end).fold(0.0, f64::max);
    let grouping = &schedule.grouping;
    let mut devices: BTreeMap<String, DeviceStats> = grouping
        .train_devices
        .iter()
        .chain(&grouping.frozen_devices)
        .map(|d| {
            (
                d.clone(),
                DeviceStats {
                    busy: 0.0,
                    idle: 0.0,
                },
            )
        })
        .collect();
    for e in &events {
        if let Some(s) = devices.get_mut(&e.device) {
            s.busy += e.end - e.start;
        }
    }
    for s in devices.values_mut() {
        s.idle = (makespan - s.busy).max(0.0);
    }
    Ok(Trace {
        events,
        makespan,
        devices,
        train_devices: grouping.train_devices.clone(),
        frozen_devices: grouping.frozen_devices.clone(),
    })
}

/// Earliest-start simulation with per-device in-order execution.
pub fn simulate(schedule: &PipelineSchedule, cm: &CostModel) -> Result<Trace, ScheduleError> {
    let order: Vec<_> = schedule.events.iter().collect();
    run(schedule, cm, &order, false)
}

/// Runs the same events one at a time, micro-batch by micro-batch, on a
/// single global clock.
pub fn simulate_serial(
    schedule: &PipelineSchedule,
    cm: &CostModel,
) -> Result<Trace, ScheduleError> {
    let mut order: Vec<_> = schedule.events.iter().collect();
    order.sort_by_key(|e| e.micro_batch);
    run(schedule, cm, &order, true)
}

/// Makespan of the one-event-at-a-time execution.
pub fn serial_makespan(schedule: &PipelineSchedule, cm: &CostModel) -> Result<f64, ScheduleError> {
    Ok(simulate_serial(schedule, cm)?.makespan)
}

/// `(C_T, C_F)`: latest finish over training-group and frozen-group devices.
pub fn group_completion(trace: &Trace) -> (f64, f64) {
    let latest = |group: &[String]| {
        trace
            .events
            .iter()
            .filter(|e| group.contains(&e.device))
            .map(|e| e.end)
            .fold(0.0, f64::max)
    };
    (latest(&trace.train_devices), latest(&trace.frozen_devices))
}

pub fn write_gantt_json<W: Write>(trace: &Trace, out: W) -> serde_json::Result<()> {
    serde_json::to_writer_pretty(out, &trace.gantt())
}

/// `metric,value` rows: makespan, C_T, C_F, then `util_<device>` per device.
pub fn write_summary_csv<W: Write>(trace: &Trace, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let (c_t, c_f) = group_completion(trace);
    w.write_record(["metric", "value"])?;
    w.write_record(["makespan", &trace.makespan.to_string()])?;
    w.write_record(["C_T", &c_t.to_string()])?;
    w.write_record(["C_F", &c_f.to_string()])?;
    for (id, s) in &trace.devices {
        w.write_record([format!("util_{id}"), s.utilization().to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeSet;

    use super::super::tests::one_per_group;
    use super::super::*;
    use super::*;
    use crate::costmodel::{LayerCost, Link};

    fn unit_costs(devs: &[&str], layers: usize) -> CostModel {
        let caps: Vec<_> = devs.iter().map(|&d| (d, 1.0)).collect();
        CostModel::uniform(
            &caps,
            Link { bw: 1.0, lat: 0.0 },
            vec![LayerCost::new(1.0, 2.0, 0.0); layers],
            vec![],
        )
    }

    #[test]
    fn hand_computed_two_micro_batches() {
        let (w, g, p) = one_per_group();
        let cm = unit_costs(&["dt", "df"], 2);
        let s = build_schedule(&w, &g, &p, 1, 2).unwrap();
        let trace = simulate(&s, &cm).unwrap();
        assert_eq!(trace.makespan, 6.0);
        assert_eq!(group_completion(&trace), (6.0, 2.0));
        let dt: Vec<_> = trace
            .events
            .iter()
            .filter(|e| e.device == "dt")
            .map(|e| (e.kind, e.micro_batch, e.start, e.end))
            .collect();
        use EventKind::*;
        assert_eq!(
            dt,
            vec![
                (FpTrain, 0, 0.0, 1.0),
                (FpTrain, 1, 1.0, 2.0),
                (BpTrain, 0, 2.0, 4.0),
                (BpTrain, 1, 4.0, 6.0)
            ]
        );
        assert_eq!(trace.devices["df"].busy, 2.0);
        assert_eq!(trace.devices["df"].idle, 4.0);
        assert_eq!(serial_makespan(&s, &cm).unwrap(), 8.0);
    }

    #[test]
    fn offloaded_tasks_share_training_devices() {
        let (w, mut g, p) = one_per_group();
        g.offloaded = BTreeSet::from(["F".to_string()]);
        let cm = unit_costs(&["dt", "df"], 2);
        let s = build_schedule(&w, &g, &p, 1, 1).unwrap();
        let trace = simulate(&s, &cm).unwrap();
        assert_eq!(trace.makespan, 4.0);
        assert_eq!(group_completion(&trace), (4.0, 0.0));
    }

    #[test]
    fn communication_delays_downstream_stage() {
        let w = Workload {
            training: vec!["T".into()],
            frozen: vec![],
        };
        let g = Grouping {
            train_devices: vec!["a".into(), "b".into()],
            frozen_devices: vec![],
            offloaded: BTreeSet::new(),
        };
        let p = Partition::from_counts(&g.train_devices, &[1, 1], &[], &[]).unwrap();
        let cm = CostModel::uniform(
            &[("a", 1.0), ("b", 1.0)],
            Link { bw: 2.0, lat: 0.5 },
            vec![LayerCost::new(1.0, 2.0, 1.0); 2],
            vec![],
        );
        let s = build_schedule(&w, &g, &p, 1, 1).unwrap();
        let trace = simulate(&s, &cm).unwrap();
        // FP a [0,1], comm 1, FP b [2,3], BP b [3,5], comm 1, BP a [6,8]
        assert_eq!(trace.makespan, 8.0);
    }

    #[test]
    fn exports() {
        let (w, g, p) = one_per_group();
        let cm = unit_costs(&["dt", "df"], 2);
        let trace = simulate(&build_schedule(&w, &g, &p, 1, 2).unwrap(), &cm).unwrap();
        let mut json = Vec::new();
        write_gantt_json(&trace, &mut json).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
        assert_eq!(v[0]["device"], "df");
        assert_eq!(v[0]["event"], "FP_f");
        assert_eq!(v[0]["mb"], 0);
        let mut csv_out = Vec::new();
        write_summary_csv(&trace, &mut csv_out).unwrap();
        let text = String::from_utf8(csv_out).unwrap();
        assert!(text.starts_with("metric,value\nmakespan,6\nC_T,6\nC_F,2\n"));
        assert!(text.contains("util_df,0.333"));
    }

    #[test]
    fn missing_link_and_layer_are_errors() {
        let (w, g, p) = one_per_group();
        let s = build_schedule(&w, &g, &p, 1, 1).unwrap();
        let short = unit_costs(&["dt", "df"], 1);
        assert!(matches!(simulate(&s, &short), Err(ScheduleError::Cost(_))));
        let unknown = unit_costs(&["dt"], 2);
        assert!(simulate(&s, &unknown).is_err());
    }

    #[test]
    fn infinite_times_are_unbounded() {
        let (w, g, p) = one_per_group();
        let mut cm = unit_costs(&["dt", "df"], 2);
        cm.layers[0].fwd = f64::INFINITY;
        let s = build_schedule(&w, &g, &p, 1, 1).unwrap();
        assert!(matches!(
            simulate(&s, &cm),
            Err(ScheduleError::Unbounded { .. })
        ));
    }
}
