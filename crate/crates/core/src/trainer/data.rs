//! Seeded per-task regression datasets.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ToyModel, TrainError};
use crate::taskgraph::{TaskGraph, TaskId};

/// Inputs `x` (`d_in x m`) and targets `y` (`d_out x m`), one sample per column.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl Batch {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self, TrainError> {
        if x.ncols() != y.ncols() {
            return Err(TrainError::Dimension(format!(
                "{} inputs but {} targets",
                x.ncols(),
                y.ncols()
            )));
        }
        Ok(Batch { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.x.ncols() == 0
    }

    /// Columns `[start, start + len)` as a new batch.
    pub fn slice(&self, start: usize, len: usize) -> Batch {
        Batch {
            x: self.x.columns(start, len).into_owned(),
            y: self.y.columns(start, len).into_owned(),
        }
    }
}

/// Which column segments a task's hidden target update reads from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TeacherSupport {
    /// The task's own segment only.
    Own,
    /// Own segment plus direct prerequisites.
    #[default]
    Prerequisites,
    /// Own segment plus every ancestor.
    Ancestors,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub samples_per_task: usize,
    pub noise: f64,
    pub support: TeacherSupport,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            samples_per_task: 32,
            noise: 0.01,
            support: TeacherSupport::Prerequisites,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    batches: Vec<Batch>,
    pub seed: u64,
}

impl TaskDataset {
    pub fn from_batches(batches: Vec<Batch>, seed: u64) -> Result<Self, TrainError> {
        if let Some(i) = batches.iter().position(Batch::is_empty) {
            return Err(TrainError::EmptyDataset(TaskId(i).to_string()));
        }
        Ok(TaskDataset { batches, seed })
    }

    /// Gaussian inputs with targets `W0 x + T_t x + noise`, where the teacher
    /// update `T_t` is nonzero only on the columns selected by `support`.
    pub fn synthetic(
        model: &ToyModel,
        graph: &TaskGraph,
        config: &DatasetConfig,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let layout = model.layout();
        if graph.len() != layout.num_blocks() {
            return Err(TrainError::Dimension(format!(
                "graph has {} tasks, layout has {} blocks",
                graph.len(),
                layout.num_blocks()
            )));
        }
        if config.samples_per_task == 0 {
            return Err(TrainError::EmptyDataset("all tasks".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d_out, d_in, m) = (layout.d_out, layout.d_in, config.samples_per_task);
        let mut batches = Vec::with_capacity(graph.len());
        for t in graph.tasks() {
            let mut sources = vec![t];
            match config.support {
                TeacherSupport::Own => {}
                TeacherSupport::Prerequisites => sources.extend(graph.prerequisites(t)?),
                TeacherSupport::Ancestors => sources.extend(graph.ancestors(t)?),
            }
            let mut teacher = DMatrix::<f64>::zeros(d_out, d_in);
            for s in sources {
                let seg = layout.segment(s);
                let scale = 1.0 / (seg.width() as f64).sqrt();
                for i in 0..d_out {
                    for j in seg.iter() {
                        teacher[(i, j)] = scale * gaussian(&mut rng);
                    }
                }
            }
            let x = DMatrix::from_fn(d_in, m, |_, _| gaussian(&mut rng));
            let noise = DMatrix::from_fn(d_out, m, |_, _| config.noise * gaussian(&mut rng));
            let y = (model.base() + teacher) * &x + noise;
            batches.push(Batch { x, y });
        }
        Ok(TaskDataset { batches, seed })
    }

    pub fn batch(&self, t: TaskId) -> &Batch {
        &self.batches[t.0]
    }

    pub fn batch_mut(&mut self, t: TaskId) -> &mut Batch {
        &mut self.batches[t.0]
    }

    pub fn num_tasks(&self) -> usize {
        self.batches.len()
    }

    /// Replaces a task's targets with seeded noise of the same shape.
    pub fn corrupt_targets(&mut self, t: TaskId, scale: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = &mut self.batches[t.0].y;
        y.iter_mut().for_each(|v| *v = scale * gaussian(&mut rng));
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}
