//! Checkpoints as named row-major matrices, and stage reports as JSON lines
//! and CSV.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{AdapterBlock, StageResult, ToyModel, TrainError};
use crate::plan::BlockLayout;
use crate::taskgraph::{TaskGraph, TaskId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixDocument {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

impl MatrixDocument {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let data = (0..m.nrows())
            .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)])
            .collect();
        MatrixDocument {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>, TrainError> {
        if self.data.len() != self.rows * self.cols {
            return Err(TrainError::Checkpoint(format!(
                "matrix declares {}x{} but holds {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// `{"tasks": [...], "layout": {...}, "matrices": {"W0": .., "B/<task>": .., "A/<task>": ..}}`
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub tasks: Vec<String>,
    pub layout: BlockLayout,
    pub matrices: BTreeMap<String, MatrixDocument>,
}

impl Checkpoint {
    pub fn from_model(model: &ToyModel, graph: &TaskGraph) -> Self {
        let mut matrices = BTreeMap::new();
        matrices.insert("W0".to_string(), MatrixDocument::from_matrix(model.base()));
        for t in graph.tasks() {
            let block = model.block(t);
            let name = graph.name(t);
            matrices.insert(format!("B/{name}"), MatrixDocument::from_matrix(&block.b));
            matrices.insert(format!("A/{name}"), MatrixDocument::from_matrix(&block.a));
        }
        Checkpoint {
            tasks: graph.names().to_vec(),
            layout: model.layout().clone(),
            matrices,
        }
    }

    pub fn into_model(self) -> Result<ToyModel, TrainError> {
        let get = |key: &str| {
            self.matrices
                .get(key)
                .ok_or_else(|| TrainError::Checkpoint(format!("missing matrix `{key}`")))
                .and_then(MatrixDocument::to_matrix)
        };
        let base = get("W0")?;
        let blocks = self
            .tasks
            .iter()
            .map(|name| {
                Ok(AdapterBlock {
                    b: get(&format!("B/{name}"))?,
                    a: get(&format!("A/{name}"))?,
                })
            })
            .collect::<Result<Vec<_>, TrainError>>()?;
        ToyModel::from_parts(self.layout, base, blocks)
    }
}

pub fn write_checkpoint<W: Write>(
    model: &ToyModel,
    graph: &TaskGraph,
    mut out: W,
) -> Result<(), TrainError> {
    serde_json::to_writer_pretty(&mut out, &Checkpoint::from_model(model, graph))?;
    writeln!(out)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<ToyModel, TrainError> {
    let ckpt: Checkpoint = serde_json::from_reader(input)?;
    ckpt.into_model()
}

#[derive(Serialize)]
struct StageLine<'a> {
    stage: usize,
    trainee: &'a str,
    initial_loss: f64,
    loss: f64,
    steps: usize,
    delta_norms: BTreeMap<&'a str, f64>,
    masked_changed: Vec<&'a str>,
    frozen_changed: Vec<&'a str>,
}

/// One JSON object per stage.
pub fn write_stage_jsonl<W: Write>(
    results: &[StageResult],
    graph: &TaskGraph,
    mut out: W,
) -> Result<(), TrainError> {
    let names = |ts: &[TaskId]| ts.iter().map(|&t| graph.name(t)).collect::<Vec<_>>();
    for r in results {
        let line = StageLine {
            stage: r.stage_index,
            trainee: graph.name(r.trainee),
            initial_loss: r.initial_loss,
            loss: r.final_loss,
            steps: r.steps,
            delta_norms: r
                .changes
                .iter()
                .map(|c| (graph.name(c.task), c.norm()))
                .collect(),
            masked_changed: names(&r.audit.masked_changed),
            frozen_changed: names(&r.audit.frozen_changed),
        };
        serde_json::to_writer(&mut out, &line)?;
        writeln!(out)?;
    }
    Ok(())
}

/// `stage,trainee,loss,delta_<task>...` with one delta-norm column per task.
pub fn write_stage_csv<W: Write>(
    results: &[StageResult],
    graph: &TaskGraph,
    out: W,
) -> Result<(), TrainError> {
    let mut writer = csv::Writer::from_writer(out);
    let mut header = vec!["stage".to_string(), "trainee".into(), "loss".into()];
    header.extend(graph.names().iter().map(|n| format!("delta_{n}")));
    writer.write_record(&header)?;
    for r in results {
        let mut row = vec![
            r.stage_index.to_string(),
            graph.name(r.trainee).to_string(),
            r.final_loss.to_string(),
        ];
        row.extend(r.changes.iter().map(|c| c.norm().to_string()));
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{Delta, TrainingPlan};
    use crate::trainer::{run_plan, DatasetConfig, TaskDataset};

    #[test]
    fn checkpoint_restores_bitwise() {
        let g = TaskGraph::build(&["a", "b"], &[("a", "b")]).unwrap();
        let layout = BlockLayout::partition(2, 5, 2, &g, None).unwrap();
        let plan = TrainingPlan::build(&g, &layout, Delta::new(0.5).unwrap()).unwrap();
        let mut model = ToyModel::init(&layout, 1).unwrap();
        let data = TaskDataset::synthetic(&model, &g, &DatasetConfig::default(), 2).unwrap();
        let results = run_plan(&mut model, &plan, &data, 5, 0.1).unwrap();

        let mut buf = Vec::new();
        write_checkpoint(&model, &g, &mut buf).unwrap();
        let restored = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(restored, model);

        let mut csv_out = Vec::new();
        write_stage_csv(&results, &g, &mut csv_out).unwrap();
        let text = String::from_utf8(csv_out).unwrap();
        assert!(text.starts_with("stage,trainee,loss,delta_a,delta_b\n0,a,"));
        assert_eq!(text.lines().count(), 3);

        let mut jsonl = Vec::new();
        write_stage_jsonl(&results, &g, &mut jsonl).unwrap();
        let first: serde_json::Value =
            serde_json::from_str(String::from_utf8(jsonl).unwrap().lines().next().unwrap())
                .unwrap();
        assert_eq!(first["trainee"], "a");
        assert_eq!(first["delta_norms"]["b"], 0.0);
    }

    #[test]
    fn malformed_checkpoint() {
        let doc = MatrixDocument {
            rows: 2,
            cols: 2,
            data: vec![1.0],
        };
        assert!(doc.to_matrix().is_err());
        let err = read_checkpoint(r#"{"tasks":["a"],"layout":{"d_out":1,"d_in":1,"rank":1,"segments":[[0,1]]},"matrices":{}}"#.as_bytes());
        assert!(matches!(err, Err(TrainError::Checkpoint(_))));
    }
}
