//! Independent reference implementations and seeded generators shared by
//! the integration tests.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stagelora_core::costmodel::{CostModel, DeviceProfile, LayerCost, Link, TaskLoad};
use stagelora_core::plan::{StagePlan, TrainingPlan};
use stagelora_core::schedule::{
    build_schedule, micro_batch_count, simulate, Chain, EventKind, Grouping, Partition,
    PipelineSchedule, Workload,
};
use stagelora_core::taskgraph::{TaskGraph, TaskId};
use stagelora_core::trainer::{AdapterBlock, Batch, ToyModel};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i}")).collect()
}

/// Random DAG on `n` nodes: a hidden random topological order with each
/// forward pair connected with probability `p`.
pub fn random_dag(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((order[i], order[j]));
            }
        }
    }
    edges
}

pub fn graph_from(n: usize, edges: &[(usize, usize)]) -> TaskGraph {
    let e: Vec<(TaskId, TaskId)> = edges.iter().map(|&(a, b)| (TaskId(a), TaskId(b))).collect();
    TaskGraph::from_ids(names(n), &e).expect("acyclic by construction")
}

/// Layer peeling by repeated scans of the edge list.
pub fn peel_layers(n: usize, edges: &[(usize, usize)]) -> Option<Vec<Vec<usize>>> {
    let mut removed = vec![false; n];
    let mut layers = Vec::new();
    let mut left = n;
    while left > 0 {
        let layer: Vec<usize> = (0..n)
            .filter(|&v| !removed[v] && !edges.iter().any(|&(a, b)| b == v && !removed[a]))
            .collect();
        if layer.is_empty() {
            return None;
        }
        for &v in &layer {
            removed[v] = true;
        }
        left -= layer.len();
        layers.push(layer);
    }
    Some(layers)
}

/// Checks, with plain column-index sets, that every stage splits `[0, d_in)`
/// into disjoint train, freeze and mask sets with the expected roles.
pub fn check_partition(plan: &TrainingPlan) -> Result<(), String> {
    let layout = &plan.layout;
    let g = &plan.graph;
    let delta = plan.delta.value();
    for stage in &plan.stages {
        let mut train = BTreeSet::new();
        let mut freeze = BTreeSet::new();
        let mut mask = BTreeSet::new();
        for (t, r) in &stage.train {
            let off = layout.segments[t.0].start;
            for c in r.start..r.end {
                if !train.insert(off + c) {
                    return Err(format!(
                        "stage {}: column {} trained twice",
                        stage.stage_index,
                        off + c
                    ));
                }
            }
        }
        for (t, r) in &stage.freeze {
            let off = layout.segments[t.0].start;
            freeze.extend((r.start..r.end).map(|c| off + c));
        }
        for t in &stage.mask {
            let s = layout.segments[t.0];
            mask.extend(s.start..s.end);
        }
        let all: BTreeSet<usize> = (0..layout.d_in).collect();
        if !train.is_disjoint(&freeze) || !train.is_disjoint(&mask) || !freeze.is_disjoint(&mask) {
            return Err(format!("stage {}: sets overlap", stage.stage_index));
        }
        let union: BTreeSet<usize> = train.union(&freeze).chain(mask.iter()).copied().collect();
        if union != all {
            return Err(format!(
                "stage {}: sets do not cover [0, d_in)",
                stage.stage_index
            ));
        }
        // roles
        let trainee = stage.trainee;
        let seg = layout.segments[trainee.0];
        if !(seg.start..seg.end).all(|c| train.contains(&c)) {
            return Err(format!(
                "stage {}: trainee block not fully trainable",
                stage.stage_index
            ));
        }
        let prereqs: BTreeSet<usize> = g
            .edges()
            .iter()
            .filter(|(_, b)| *b == trainee)
            .map(|(a, _)| a.0)
            .collect();
        for t in 0..g.len() {
            let s = layout.segments[t];
            let cols: BTreeSet<usize> = (s.start..s.end).collect();
            if t == trainee.0 {
                continue;
            }
            if prereqs.contains(&t) {
                let w = s.end - s.start;
                let expect = expected_activated(delta, w);
                let got: Vec<usize> = (s.start..s.end).filter(|c| train.contains(c)).collect();
                let want: Vec<usize> = (s.start..s.start + expect).collect();
                if got != want {
                    return Err(format!(
                        "stage {}: prerequisite t{t} activates {got:?}, want {want:?}",
                        stage.stage_index
                    ));
                }
                if !(s.start + expect..s.end).all(|c| freeze.contains(&c)) {
                    return Err(format!(
                        "stage {}: prerequisite t{t} tail not frozen",
                        stage.stage_index
                    ));
                }
            } else if !cols.is_subset(&mask) {
                return Err(format!("stage {}: t{t} not masked", stage.stage_index));
            }
        }
    }
    Ok(())
}

/// `ceil(delta * w)` computed with exact rational rounding on a decimal
/// grid of 1e-9.
pub fn expected_activated(delta: f64, w: usize) -> usize {
    let scaled = (delta * 1e9).round() as u128 * w as u128;
    scaled.div_ceil(1_000_000_000) as usize
}

pub fn active_set(stage: &StagePlan) -> BTreeMap<TaskId, stagelora_core::plan::ColRange> {
    stage.active_blocks()
}

/// Copy of `model` with one parameter entry shifted by `h`.
pub fn perturbed(model: &ToyModel, t: TaskId, in_b: bool, i: usize, j: usize, h: f64) -> ToyModel {
    let mut blocks: Vec<AdapterBlock> = model.blocks().to_vec();
    if in_b {
        blocks[t.0].b[(i, j)] += h;
    } else {
        blocks[t.0].a[(i, j)] += h;
    }
    ToyModel::from_parts(model.layout().clone(), model.base().clone(), blocks).unwrap()
}

/// Largest relative error between analytic gradients and central
/// differences, over every trainable entry of the stage.
pub fn fd_max_rel_error(
    model: &ToyModel,
    stage: &StagePlan,
    batch: &Batch,
    h: f64,
    floor: f64,
) -> f64 {
    let active = stage.active_blocks();
    let grads = model.gradients(&active, batch).unwrap();
    let loss = |m: &ToyModel| m.loss(&active, batch).unwrap();
    let mut worst = 0.0_f64;
    let mut compare = |an: f64, fd: f64| {
        let err = (an - fd).abs() / an.abs().max(fd.abs()).max(floor);
        worst = worst.max(err);
    };
    for (&t, &cols) in &stage.train {
        let g = &grads[&t];
        let rank = model.layout().rank;
        for i in 0..rank {
            for c in cols.start..cols.end {
                let fd = (loss(&perturbed(model, t, false, i, c, h))
                    - loss(&perturbed(model, t, false, i, c, -h)))
                    / (2.0 * h);
                compare(g.a[(i, c - g.cols.start)], fd);
            }
        }
        if t == stage.trainee {
            for i in 0..model.layout().d_out {
                for j in 0..rank {
                    let fd = (loss(&perturbed(model, t, true, i, j, h))
                        - loss(&perturbed(model, t, true, i, j, -h)))
                        / (2.0 * h);
                    compare(g.b[(i, j)], fd);
                }
            }
        }
    }
    worst
}

/// Bitwise equality of two matrices.
pub fn same_bits(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    a.shape() == b.shape()
        && a.iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Random fully connected cost profile.
pub fn random_profile(
    rng: &mut ChaCha8Rng,
    devices: usize,
    layers: usize,
    tasks: &[String],
) -> CostModel {
    let ids: Vec<String> = (0..devices).map(|i| format!("d{i}")).collect();
    let mut profiles: Vec<DeviceProfile> = ids
        .iter()
        .map(|id| DeviceProfile {
            id: id.clone(),
            capacity: rng.random_range(1..=8) as f64,
            links: BTreeMap::new(),
        })
        .collect();
    for (i, profile) in profiles.iter_mut().enumerate() {
        for peer in &ids[i + 1..] {
            let link = Link {
                bw: rng.random_range(1..=64) as f64 * 16.0,
                lat: rng.random_range(0..=4) as f64 * 0.25,
            };
            profile.links.insert(peer.clone(), link);
        }
    }
    let layers = (0..layers)
        .map(|_| {
            LayerCost::new(
                rng.random_range(1..=8) as f64 * 0.5,
                rng.random_range(1..=16) as f64 * 0.5,
                rng.random_range(0..=8) as f64 * 4.0,
            )
        })
        .collect();
    let tasks = tasks
        .iter()
        .map(|id| TaskLoad {
            id: id.clone(),
            req_train: rng.random_range(1..=10) as f64,
            req_frozen: rng.random_range(0..=5) as f64,
        })
        .collect();
    CostModel {
        devices: profiles,
        layers,
        tasks,
    }
}

/// Workload with `training` training tasks and `frozen` frozen tasks.
pub fn workload(training: usize, frozen: usize) -> Workload {
    let all = names(training + frozen);
    Workload {
        training: all[..training].to_vec(),
        frozen: all[training..].to_vec(),
    }
}

/// Random grouping and partition over the profile's devices.
pub fn random_assignment(
    rng: &mut ChaCha8Rng,
    cm: &CostModel,
    w: &Workload,
) -> (Grouping, Partition) {
    let ids = cm.device_ids();
    let mut shuffled = ids.clone();
    shuffled.shuffle(rng);
    let nt = if ids.len() == 1 {
        1
    } else {
        rng.random_range(1..ids.len())
    };
    let train_devices = shuffled[..nt].to_vec();
    let frozen_devices = shuffled[nt..].to_vec();
    let offloaded: BTreeSet<String> = if frozen_devices.is_empty() {
        w.frozen.iter().cloned().collect()
    } else {
        w.frozen
            .iter()
            .filter(|_| rng.random_bool(0.3))
            .cloned()
            .collect()
    };
    let n = cm.num_layers();
    let n_t = if frozen_devices.is_empty() {
        n
    } else {
        rng.random_range(train_devices.len()..=n - frozen_devices.len())
    };
    let split = |rng: &mut ChaCha8Rng, total: usize, parts: usize| -> Vec<usize> {
        let mut cuts: Vec<usize> = (1..total).collect();
        cuts.shuffle(rng);
        let mut cuts: Vec<usize> = cuts[..parts - 1].to_vec();
        cuts.sort_unstable();
        let mut prev = 0;
        let mut out = Vec::new();
        for c in cuts.into_iter().chain([total]) {
            out.push(c - prev);
            prev = c;
        }
        out
    };
    let tc = split(rng, n_t, train_devices.len());
    let fc = if frozen_devices.is_empty() {
        vec![]
    } else {
        split(rng, n - n_t, frozen_devices.len())
    };
    let grouping = Grouping {
        train_devices,
        frozen_devices,
        offloaded,
    };
    let partition =
        Partition::from_counts(&grouping.train_devices, &tc, &grouping.frozen_devices, &fc)
            .unwrap();
    (grouping, partition)
}

/// Makespan from an explicit precedence graph: every event waits for the
/// previous event on its device and for its data dependency plus transfer.
/// Start times are the longest path from the origin, found by relaxing
/// edges until nothing changes.
pub fn longest_path_makespan(schedule: &PipelineSchedule, cm: &CostModel) -> f64 {
    let events = &schedule.events;
    let k = schedule.batch_size as f64;
    let dur: Vec<f64> = events
        .iter()
        .map(|e| {
            let cap = cm
                .devices
                .iter()
                .find(|d| d.id == e.device)
                .unwrap()
                .capacity;
            let work: f64 = (e.layers.start..e.layers.end)
                .map(|l| {
                    let layer = &cm.layers[l];
                    match e.kind {
                        EventKind::BpTrain => layer.bwd.unwrap_or(2.0 * layer.fwd),
                        _ => layer.fwd,
                    }
                })
                .sum();
            e.tasks as f64 * k * work / cap
        })
        .collect();
    let link = |a: &str, b: &str, bytes: f64| -> f64 {
        if a == b {
            return 0.0;
        }
        let da = cm.devices.iter().find(|d| d.id == a).unwrap();
        let db = cm.devices.iter().find(|d| d.id == b).unwrap();
        let l = da.links.get(b).or_else(|| db.links.get(a)).unwrap();
        l.lat + bytes / l.bw
    };
    // (from, to, weight added to the end of `from`)
    let mut edges: Vec<(usize, usize, f64)> = Vec::new();
    let mut last_on: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, e) in events.iter().enumerate() {
        if let Some(&p) = last_on.get(e.device.as_str()) {
            edges.push((p, i, 0.0));
        }
        last_on.insert(e.device.as_str(), i);
    }
    let find = |kind: EventKind, chain: Chain, mb: usize, pos: usize| {
        events
            .iter()
            .position(|e| {
                e.kind == kind && e.chain == chain && e.micro_batch == mb && e.position == pos
            })
            .unwrap()
    };
    for (i, e) in events.iter().enumerate() {
        let spans = match e.chain {
            Chain::Frozen => &schedule.partition.frozen,
            _ => &schedule.partition.train,
        };
        match e.kind {
            EventKind::FpFrozen | EventKind::FpTrain if e.position > 0 => {
                let p = find(e.kind, e.chain, e.micro_batch, e.position - 1);
                let bytes = cm.layers[spans[e.position - 1].end - 1].act_bytes * k;
                edges.push((p, i, link(&events[p].device, &e.device, bytes)));
            }
            EventKind::BpTrain => {
                let last = spans.len() - 1;
                if e.position == last {
                    edges.push((
                        find(EventKind::FpTrain, Chain::Train, e.micro_batch, last),
                        i,
                        0.0,
                    ));
                } else {
                    let p = find(
                        EventKind::BpTrain,
                        Chain::Train,
                        e.micro_batch,
                        e.position + 1,
                    );
                    let bytes = cm.layers[spans[e.position].end - 1].act_bytes * k;
                    edges.push((p, i, link(&events[p].device, &e.device, bytes)));
                }
            }
            _ => {}
        }
    }
    let mut start = vec![0.0_f64; events.len()];
    loop {
        let mut changed = false;
        for &(a, b, w) in &edges {
            let cand = start[a] + dur[a] + w;
            if cand > start[b] {
                start[b] = cand;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    (0..events.len())
        .map(|i| start[i] + dur[i])
        .fold(0.0, f64::max)
}

/// Result of the reference two-phase search.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub train_devices: Vec<String>,
    pub offloaded: BTreeSet<String>,
    pub gap: f64,
    pub c_min: f64,
    pub k: usize,
    pub q: Vec<String>,
}

/// Two-phase reference search. Phase one labels every device and frozen
/// task with a group and keeps the smallest gap under the documented
/// tie-breaks; phase two enumerates cut points with combinations.
pub fn two_phase_oracle(
    cm: &CostModel,
    w: &Workload,
    k_max: usize,
    dataset: usize,
) -> OracleResult {
    let nd = cm.devices.len();
    let nf = w.frozen.len();
    let req = |id: &str, train: bool| {
        let t = cm.tasks.iter().find(|t| t.id == id).unwrap();
        if train {
            t.req_train
        } else {
            t.req_frozen
        }
    };
    type Key = (f64, f64, Vec<String>, usize, Vec<String>);
    let mut best: Option<(Key, Vec<bool>, Vec<bool>)> = None;
    let labelings = |len: usize| -> Vec<Vec<bool>> {
        (0..1usize << len)
            .map(|m| (0..len).map(|i| m & (1 << i) != 0).collect())
            .collect()
    };
    for on_train in labelings(nd) {
        let nt = on_train.iter().filter(|&&b| b).count();
        let proper = if nd == 1 { nt == 1 } else { nt >= 1 && nt < nd };
        if !proper {
            continue;
        }
        for offload in labelings(nf) {
            if nd == 1 && offload.iter().any(|&b| !b) {
                continue;
            }
            let mut cap_t = 0.0;
            let mut cap_f = 0.0;
            for (d, &t) in cm.devices.iter().zip(&on_train) {
                if t {
                    cap_t += d.capacity
                } else {
                    cap_f += d.capacity
                }
            }
            let mut r_t: f64 = w.training.iter().map(|t| req(t, true)).sum();
            let mut r_f = 0.0;
            for (t, &o) in w.frozen.iter().zip(&offload) {
                if o {
                    r_t += req(t, false)
                } else {
                    r_f += req(t, false)
                }
            }
            let gap = (cap_t - r_t).abs() + (cap_f - r_f).abs();
            let mut ids: Vec<String> = cm
                .devices
                .iter()
                .zip(&on_train)
                .filter(|(_, &t)| t)
                .map(|(d, _)| d.id.clone())
                .collect();
            ids.sort();
            let mut off: Vec<String> = w
                .frozen
                .iter()
                .zip(&offload)
                .filter(|(_, &o)| o)
                .map(|(t, _)| t.clone())
                .collect();
            off.sort();
            let key: Key = (gap, -cap_t, ids, off.len(), off);
            let better = match &best {
                None => true,
                Some((b, _, _)) => {
                    key.0 < b.0
                        || (key.0 == b.0
                            && (key.1 < b.1
                                || (key.1 == b.1
                                    && (key.2 < b.2
                                        || (key.2 == b.2
                                            && (key.3 < b.3 || (key.3 == b.3 && key.4 < b.4)))))))
                }
            };
            if better {
                best = Some((key, on_train.clone(), offload.clone()));
            }
        }
    }
    let (key, on_train, offload) = best.unwrap();
    let train_devices: Vec<String> = cm
        .devices
        .iter()
        .zip(&on_train)
        .filter(|(_, &t)| t)
        .map(|(d, _)| d.id.clone())
        .collect();
    let frozen_devices: Vec<String> = cm
        .devices
        .iter()
        .zip(&on_train)
        .filter(|(_, &t)| !t)
        .map(|(d, _)| d.id.clone())
        .collect();
    let offloaded: BTreeSet<String> = w
        .frozen
        .iter()
        .zip(&offload)
        .filter(|(_, &o)| o)
        .map(|(t, _)| t.clone())
        .collect();
    let grouping = Grouping {
        train_devices: train_devices.clone(),
        frozen_devices: frozen_devices.clone(),
        offloaded: offloaded.clone(),
    };

    // Phase two: choose |D| - 1 cut points among the N - 1 layer boundaries;
    // the cut after the training group must exist when D_f is nonempty.
    let n = cm.num_layers();
    let devices = train_devices.len() + frozen_devices.len();
    type Scored = (f64, usize, usize, Vec<usize>, Vec<String>);
    let mut best2: Option<Scored> = None;
    for cuts in combinations(n - 1, devices - 1) {
        let mut bounds = vec![0];
        bounds.extend(cuts.iter().map(|c| c + 1));
        bounds.push(n);
        let counts: Vec<usize> = bounds.windows(2).map(|w| w[1] - w[0]).collect();
        let nt = train_devices.len();
        let n_t: usize = counts[..nt].iter().sum();
        let partition = Partition::from_counts(
            &train_devices,
            &counts[..nt],
            &frozen_devices,
            &counts[nt..],
        )
        .unwrap();
        for k in 1..=k_max {
            let s =
                build_schedule(w, &grouping, &partition, k, micro_batch_count(dataset, k)).unwrap();
            let c = simulate(&s, cm).unwrap().makespan;
            let cand = (c, k, n_t, counts.clone(), partition.q());
            let better = match &best2 {
                None => true,
                Some(b) => (cand.0, cand.1, cand.2, &cand.3) < (b.0, b.1, b.2, &b.3),
            };
            if better {
                best2 = Some(cand);
            }
        }
    }
    let (c_min, k, _, _, q) = best2.unwrap();
    OracleResult {
        train_devices,
        offloaded,
        gap: key.0,
        c_min,
        k,
        q,
    }
}

/// All `r`-subsets of `0..n`, in lexicographic order.
pub fn combinations(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    fn go(start: usize, n: usize, r: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == r {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, r, cur, out);
            cur.pop();
        }
    }
    go(0, n, r, &mut cur, &mut out);
    out
}
