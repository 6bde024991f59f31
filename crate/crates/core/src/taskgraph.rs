//! Task dependency graphs and source-node layer extraction.
//!
//! An edge `(u, w)` means task `u` must be completed before task `w`. Graphs
//! are validated on construction: names are unique, every edge endpoint is a
//! declared task, and the edge set is acyclic.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("task graph contains a cycle through: {}", .0.join(" -> "))]
    Cycle(Vec<String>),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("duplicate edge `{0}` -> `{1}`")]
    DuplicateEdge(String, String),
    #[error("duplicate task name `{0}`")]
    DuplicateTask(String),
    #[error("task names must be nonempty")]
    EmptyName,
    #[error("a task graph needs at least one task")]
    NoTasks,
}

/// Index of a task in declaration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TaskId(pub usize);

impl TaskId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A validated directed acyclic task graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskGraph {
    names: Vec<String>,
    edges: BTreeSet<(TaskId, TaskId)>,
    // preds[w] = every u with (u, w) in edges
    preds: Vec<BTreeSet<TaskId>>,
    succs: Vec<BTreeSet<TaskId>>,
}

impl TaskGraph {
    /// Builds a graph from task names and named edges. Indices follow
    /// declaration order.
    pub fn build<S: AsRef<str>>(task_names: &[S], edges: &[(S, S)]) -> Result<Self, GraphError> {
        if task_names.is_empty() {
            return Err(GraphError::NoTasks);
        }
        let mut index = HashMap::with_capacity(task_names.len());
        let mut names = Vec::with_capacity(task_names.len());
        for (i, name) in task_names.iter().enumerate() {
            let name = name.as_ref();
            if name.is_empty() {
                return Err(GraphError::EmptyName);
            }
            if index.insert(name.to_string(), TaskId(i)).is_some() {
                return Err(GraphError::DuplicateTask(name.to_string()));
            }
            names.push(name.to_string());
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| GraphError::UnknownTask(name.to_string()))
        };
        let mut id_edges = Vec::with_capacity(edges.len());
        for (from, to) in edges {
            id_edges.push((lookup(from.as_ref())?, lookup(to.as_ref())?));
        }
        Self::from_ids(names, &id_edges)
    }

    /// Builds a graph from names and index pairs.
    pub fn from_ids(names: Vec<String>, edges: &[(TaskId, TaskId)]) -> Result<Self, GraphError> {
        let n = names.len();
        if n == 0 {
            return Err(GraphError::NoTasks);
        }
        let mut seen = BTreeSet::new();
        for name in &names {
            if name.is_empty() {
                return Err(GraphError::EmptyName);
            }
            if !seen.insert(name.as_str()) {
                return Err(GraphError::DuplicateTask(name.clone()));
            }
        }
        let mut edge_set = BTreeSet::new();
        let mut preds = vec![BTreeSet::new(); n];
        let mut succs = vec![BTreeSet::new(); n];
        for &(u, w) in edges {
            for t in [u, w] {
                if t.0 >= n {
                    return Err(GraphError::UnknownTask(t.to_string()));
                }
            }
            if u == w {
                return Err(GraphError::Cycle(vec![
                    names[u.0].clone(),
                    names[u.0].clone(),
                ]));
            }
            if !edge_set.insert((u, w)) {
                return Err(GraphError::DuplicateEdge(
                    names[u.0].clone(),
                    names[w.0].clone(),
                ));
            }
            preds[w.0].insert(u);
            succs[u.0].insert(w);
        }
        let graph = TaskGraph {
            names,
            edges: edge_set,
            preds,
            succs,
        };
        if let Some(cycle) = graph.find_cycle() {
            return Err(GraphError::Cycle(
                cycle.iter().map(|t| graph.names[t.0].clone()).collect(),
            ));
        }
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        (0..self.names.len()).map(TaskId)
    }

    pub fn name(&self, t: TaskId) -> &str {
        &self.names[t.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<TaskId> {
        self.names.iter().position(|n| n == name).map(TaskId)
    }

    pub fn edges(&self) -> &BTreeSet<(TaskId, TaskId)> {
        &self.edges
    }

    pub fn contains(&self, t: TaskId) -> bool {
        t.0 < self.names.len()
    }

    fn check(&self, t: TaskId) -> Result<(), GraphError> {
        if self.contains(t) {
            Ok(())
        } else {
            Err(GraphError::UnknownTask(t.to_string()))
        }
    }

    /// Adjacency matrix with `cells[i][j] == 1` iff `(i, j)` is an edge.
    pub fn adjacency(&self) -> AdjacencyMatrix {
        let n = self.len();
        let mut cells = vec![vec![0u8; n]; n];
        for &(u, w) in &self.edges {
            cells[u.0][w.0] = 1;
        }
        AdjacencyMatrix { n, cells }
    }

    /// Direct prerequisites of `t`: every task with an edge into `t`.
    pub fn prerequisites(&self, t: TaskId) -> Result<&BTreeSet<TaskId>, GraphError> {
        self.check(t)?;
        Ok(&self.preds[t.0])
    }

    pub fn dependents(&self, t: TaskId) -> Result<&BTreeSet<TaskId>, GraphError> {
        self.check(t)?;
        Ok(&self.succs[t.0])
    }

    /// Transitive prerequisites of `t`, excluding `t` itself.
    pub fn ancestors(&self, t: TaskId) -> Result<BTreeSet<TaskId>, GraphError> {
        self.check(t)?;
        let mut out = BTreeSet::new();
        let mut stack: Vec<TaskId> = self.preds[t.0].iter().copied().collect();
        while let Some(u) = stack.pop() {
            if out.insert(u) {
                stack.extend(self.preds[u.0].iter().copied());
            }
        }
        Ok(out)
    }

    pub fn is_leaf(&self, t: TaskId) -> Result<bool, GraphError> {
        Ok(self.dependents(t)?.is_empty())
    }

    /// Iteratively peels the zero-in-degree tasks of the residual graph.
    /// Tasks inside one layer are in ascending index order.
    pub fn extract_layers(&self) -> LayerList {
        let n = self.len();
        let mut indegree: Vec<usize> = self.preds.iter().map(BTreeSet::len).collect();
        let mut removed = vec![false; n];
        let mut layers = Vec::new();
        let mut remaining = n;
        while remaining > 0 {
            let layer: Vec<TaskId> = (0..n)
                .filter(|&i| !removed[i] && indegree[i] == 0)
                .map(TaskId)
                .collect();
            // acyclicity is enforced at construction, so every residual graph has a source
            debug_assert!(!layer.is_empty());
            for &t in &layer {
                removed[t.0] = true;
                for w in &self.succs[t.0] {
                    indegree[w.0] -= 1;
                }
            }
            remaining -= layer.len();
            layers.push(layer);
        }
        LayerList { layers }
    }

    /// Returns a cycle (first node repeated at the end) if one exists.
    fn find_cycle(&self) -> Option<Vec<TaskId>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            New,
            Open,
            Done,
        }
        let n = self.len();
        let mut mark = vec![Mark::New; n];
        let mut parent = vec![usize::MAX; n];
        for root in 0..n {
            if mark[root] != Mark::New {
                continue;
            }
            // iterative DFS over (node, successor iterator position)
            let mut stack: Vec<(usize, Vec<usize>)> =
                vec![(root, self.succs[root].iter().map(|t| t.0).collect())];
            mark[root] = Mark::Open;
            while let Some((node, pending)) = stack.last_mut() {
                let node = *node;
                match pending.pop() {
                    Some(next) => match mark[next] {
                        Mark::New => {
                            mark[next] = Mark::Open;
                            parent[next] = node;
                            let succ = self.succs[next].iter().map(|t| t.0).collect();
                            stack.push((next, succ));
                        }
                        Mark::Open => {
                            let mut cycle = vec![TaskId(next)];
                            let mut cur = node;
                            while cur != next {
                                cycle.push(TaskId(cur));
                                cur = parent[cur];
                            }
                            cycle.push(TaskId(next));
                            cycle.reverse();
                            return Some(cycle);
                        }
                        Mark::Done => {}
                    },
                    None => {
                        mark[node] = Mark::Done;
                        stack.pop();
                    }
                }
            }
        }
        None
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            tasks: self.names.clone(),
            edges: self
                .edges
                .iter()
                .map(|&(u, w)| [self.names[u.0].clone(), self.names[w.0].clone()])
                .collect(),
        }
    }
}

/// JSON form of a task graph: `{"tasks": [...], "edges": [["A","C"], ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub tasks: Vec<String>,
    #[serde(default)]
    pub edges: Vec<[String; 2]>,
}

impl GraphDocument {
    pub fn into_graph(self) -> Result<TaskGraph, GraphError> {
        let edges: Vec<(String, String)> = self.edges.into_iter().map(|[a, b]| (a, b)).collect();
        TaskGraph::build(&self.tasks, &edges)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    pub n: usize,
    pub cells: Vec<Vec<u8>>,
}

impl AdjacencyMatrix {
    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.cells[i][j]
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.cells[i]
    }
}

/// Ordered source-node layers `[S_1, .., S_L]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerList {
    pub layers: Vec<Vec<TaskId>>,
}

impl LayerList {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Layer position of every task, indexed by task.
    pub fn layer_of(&self) -> BTreeMap<TaskId, usize> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(k, layer)| layer.iter().map(move |&t| (t, k)))
            .collect()
    }

    pub fn iter_tasks(&self) -> impl Iterator<Item = TaskId> + '_ {
        self.layers.iter().flatten().copied()
    }

    pub fn to_document(&self, graph: &TaskGraph) -> LayersDocument {
        LayersDocument {
            layers: self
                .layers
                .iter()
                .map(|layer| layer.iter().map(|&t| graph.name(t).to_string()).collect())
                .collect(),
        }
    }
}

/// JSON form of a layer list: `{"layers": [["A","B"],["C","E"],["D"]]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayersDocument {
    pub layers: Vec<Vec<String>>,
}
