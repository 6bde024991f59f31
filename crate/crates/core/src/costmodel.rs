//! Device capacities, per-layer work, task requirements and link costs.
//!
//! Compute time is linear in batch size: `k * work / capacity`. Links are
//! point-to-point and contention-free; a transfer costs
//! `latency + bytes / bandwidth`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Backward work of a layer when a profile leaves it out, as a multiple of
/// the forward work.
pub const DEFAULT_BWD_RATIO: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error("unknown device `{0}`")]
    UnknownDevice(String),
    #[error("no link between `{0}` and `{1}`")]
    UnknownLink(String, String),
    #[error("unknown layer {0}")]
    UnknownLayer(usize),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("invalid cost profile: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    /// Bytes per second.
    pub bw: f64,
    /// Seconds.
    pub lat: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub id: String,
    /// Work units per second.
    pub capacity: f64,
    #[serde(default)]
    pub links: BTreeMap<String, Link>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    /// Forward work units per sample.
    pub fwd: f64,
    /// Backward work units per sample; defaults to `DEFAULT_BWD_RATIO * fwd`.
    #[serde(default)]
    pub bwd: Option<f64>,
    /// Activation bytes per sample leaving this layer.
    #[serde(default)]
    pub act_bytes: f64,
}

impl LayerCost {
    pub fn new(fwd: f64, bwd: f64, act_bytes: f64) -> Self {
        LayerCost {
            fwd,
            bwd: Some(bwd),
            act_bytes,
        }
    }

    pub fn bwd_work(&self) -> f64 {
        self.bwd.unwrap_or(DEFAULT_BWD_RATIO * self.fwd)
    }
}

/// Whether a block is trained (forward and backward) or only evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Execution {
    Train,
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLoad {
    pub id: String,
    /// Requirement when the task's block is trained (forward and backward).
    pub req_train: f64,
    /// Requirement when the task's block is only evaluated.
    pub req_frozen: f64,
}

impl TaskLoad {
    pub fn requirement(&self, execution: Execution) -> f64 {
        match execution {
            Execution::Train => self.req_train,
            Execution::Frozen => self.req_frozen,
        }
    }
}

pub fn t_fwd(layer: &LayerCost, device: &DeviceProfile, k: usize) -> f64 {
    k as f64 * layer.fwd / device.capacity
}

/// Backward time; zero for frozen executions.
pub fn t_bwd(layer: &LayerCost, device: &DeviceProfile, k: usize, execution: Execution) -> f64 {
    match execution {
        Execution::Train => k as f64 * layer.bwd_work() / device.capacity,
        Execution::Frozen => 0.0,
    }
}

/// Transfer time from `src` to `dst`. Uses the `src -> dst` link, falling
/// back to the `dst -> src` entry; zero when both ends are the same device.
pub fn t_comm(src: &DeviceProfile, dst: &DeviceProfile, bytes: f64) -> Result<f64, CostError> {
    if src.id == dst.id {
        return Ok(0.0);
    }
    let link = src
        .links
        .get(&dst.id)
        .or_else(|| dst.links.get(&src.id))
        .ok_or_else(|| CostError::UnknownLink(src.id.clone(), dst.id.clone()))?;
    Ok(link.lat + bytes / link.bw)
}

/// Sum of capacities and sum of requirements of a device set and a task set.
pub fn group_metrics<'a>(
    devices: impl IntoIterator<Item = &'a DeviceProfile>,
    tasks: impl IntoIterator<Item = (&'a TaskLoad, Execution)>,
) -> (f64, f64) {
    let capacity = devices.into_iter().map(|d| d.capacity).sum();
    let requirement = tasks.into_iter().map(|(t, e)| t.requirement(e)).sum();
    (capacity, requirement)
}

/// `{"devices": [...], "layers": [...], "tasks": [...]}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub devices: Vec<DeviceProfile>,
    pub layers: Vec<LayerCost>,
    #[serde(default)]
    pub tasks: Vec<TaskLoad>,
}

impl CostModel {
    pub fn from_json(text: &str) -> Result<Self, CostError> {
        let model: CostModel =
            serde_json::from_str(text).map_err(|e| CostError::Invalid(e.to_string()))?;
        model.check()?;
        Ok(model)
    }

    pub fn check(&self) -> Result<(), CostError> {
        let invalid = |msg: String| Err(CostError::Invalid(msg));
        let mut ids = BTreeSet::new();
        for d in &self.devices {
            if !ids.insert(d.id.as_str()) {
                return invalid(format!("duplicate device `{}`", d.id));
            }
            if d.capacity.is_nan() || d.capacity <= 0.0 {
                return invalid(format!("device `{}` capacity must be > 0", d.id));
            }
        }
        for d in &self.devices {
            for (peer, link) in &d.links {
                if !ids.contains(peer.as_str()) {
                    return Err(CostError::UnknownDevice(peer.clone()));
                }
                if link.bw.is_nan() || link.bw <= 0.0 || link.lat.is_nan() || link.lat < 0.0 {
                    return invalid(format!(
                        "link `{}` -> `{peer}` needs bw > 0 and lat >= 0",
                        d.id
                    ));
                }
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if !(l.fwd >= 0.0 && l.bwd_work() >= 0.0 && l.act_bytes >= 0.0) {
                return invalid(format!("layer {i} has negative cost"));
            }
        }
        let mut task_ids = BTreeSet::new();
        for t in &self.tasks {
            if !task_ids.insert(t.id.as_str()) {
                return invalid(format!("duplicate task `{}`", t.id));
            }
            if !(t.req_train >= 0.0 && t.req_frozen >= 0.0) {
                return invalid(format!("task `{}` has a negative requirement", t.id));
            }
        }
        Ok(())
    }

    pub fn device(&self, id: &str) -> Result<&DeviceProfile, CostError> {
        self.devices
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| CostError::UnknownDevice(id.to_string()))
    }

    pub fn layer(&self, l: usize) -> Result<&LayerCost, CostError> {
        self.layers.get(l).ok_or(CostError::UnknownLayer(l))
    }

    pub fn task(&self, id: &str) -> Result<&TaskLoad, CostError> {
        self.tasks
            .iter()
            .find(|t| t.id == id)
            .ok_or_else(|| CostError::UnknownTask(id.to_string()))
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn device_ids(&self) -> Vec<String> {
        self.devices.iter().map(|d| d.id.clone()).collect()
    }

    pub fn comm(&self, src: &str, dst: &str, bytes: f64) -> Result<f64, CostError> {
        t_comm(self.device(src)?, self.device(dst)?, bytes)
    }

    /// Multiplies every capacity, bandwidth and task requirement by `factor`
    /// and divides every latency by it. Every time scales by `1 / factor` and
    /// the computation gap by `factor`.
    pub fn scaled(&self, factor: f64) -> CostModel {
        let mut out = self.clone();
        for t in &mut out.tasks {
            t.req_train *= factor;
            t.req_frozen *= factor;
        }
        for d in &mut out.devices {
            d.capacity *= factor;
            for link in d.links.values_mut() {
                link.bw *= factor;
                link.lat /= factor;
            }
        }
        out
    }

    /// Fully connected helper: every device pair gets the same link.
    pub fn uniform(
        capacities: &[(&str, f64)],
        link: Link,
        layers: Vec<LayerCost>,
        tasks: Vec<TaskLoad>,
    ) -> CostModel {
        let devices = capacities
            .iter()
            .map(|&(id, capacity)| DeviceProfile {
                id: id.to_string(),
                capacity,
                links: capacities
                    .iter()
                    .filter(|(peer, _)| *peer != id)
                    .map(|&(peer, _)| (peer.to_string(), link))
                    .collect(),
            })
            .collect();
        CostModel {
            devices,
            layers,
            tasks,
        }
    }
}
