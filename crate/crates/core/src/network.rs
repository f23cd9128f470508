//! Tree-structured supply network: validation, incidence matrix, consumer
//! paths and conversion of consumer flows into edge flows.
//!
//! The return network mirrors the supply tree and is never materialized; the
//! mirror shows up downstream only as the factor 2 on pipe pressure drops.

use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid topology: {}", join_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("expected {expected} consumer flows, got {found}")]
    FlowCount { expected: usize, found: usize },
    #[error("negative flow {value} for consumer {consumer}")]
    NegativeFlow { consumer: String, value: f64 },
    #[error("non-finite flow for consumer {0}")]
    NonFiniteFlow(String),
    #[error("unknown edge id {0:?}")]
    UnknownEdge(String),
    #[error("unknown consumer id {0:?}")]
    UnknownConsumer(String),
    #[error("topology file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("topology file {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// One directed pipe of the supply tree, pointing away from the root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeSpec {
    pub id: String,
    pub from: String,
    pub to: String,
}

/// Topology as stored on disk. Identifiers are opaque strings; the order of
/// `consumers` fixes the layout of every per-consumer vector downstream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkTopology {
    pub nodes: Vec<String>,
    pub root: String,
    pub edges: Vec<EdgeSpec>,
    pub consumers: Vec<String>,
}

impl NetworkTopology {
    pub fn from_json_str(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("topology serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetworkError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| NetworkError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json_str(&text).map_err(|source| NetworkError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), NetworkError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json_string()).map_err(|source| NetworkError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    /// The four-consumer line network used by the laboratory setup: a trunk
    /// `alpha -> 5 -> 6 -> 7` with consumers 1 and 2 branching off junctions 5
    /// and 6, and consumers 3 and 4 terminating at junction 7.
    pub fn four_consumer_line() -> Self {
        let e = |id: &str, from: &str, to: &str| EdgeSpec {
            id: id.into(),
            from: from.into(),
            to: to.into(),
        };
        NetworkTopology {
            nodes: ["alpha", "1", "2", "3", "4", "5", "6", "7"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            root: "alpha".into(),
            edges: vec![
                e("1", "5", "1"),
                e("2", "6", "2"),
                e("3", "7", "3"),
                e("4", "7", "4"),
                e("5", "alpha", "5"),
                e("6", "5", "6"),
                e("7", "6", "7"),
            ],
            consumers: ["1", "2", "3", "4"].iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// A structural problem found by [`validate_topology`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Violation {
    DuplicateNode(String),
    DuplicateEdge(String),
    UnknownRoot(String),
    UnknownEdgeEndpoint { edge: String, node: String },
    SelfLoop(String),
    EdgeCount { nodes: usize, edges: usize },
    EdgeIntoRoot(String),
    MultipleParents { node: String, edges: Vec<String> },
    Unreachable(String),
    NoConsumers,
    DuplicateConsumer(String),
    UnknownConsumer(String),
    RootIsConsumer(String),
    ConsumerNotLeaf { node: String, children: usize },
    /// A node that is neither a consumer nor the root touches fewer than
    /// three edges, i.e. it joins pipes in direct series.
    LowDegree { node: String, degree: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use Violation::*;
        match self {
            DuplicateNode(n) => write!(f, "node {n:?} listed more than once"),
            DuplicateEdge(e) => write!(f, "edge {e:?} listed more than once"),
            UnknownRoot(n) => write!(f, "root {n:?} is not a node"),
            UnknownEdgeEndpoint { edge, node } => {
                write!(f, "edge {edge:?} references unknown node {node:?}")
            }
            SelfLoop(e) => write!(f, "edge {e:?} starts and ends at the same node"),
            EdgeCount { nodes, edges } => write!(
                f,
                "a tree on {nodes} nodes needs {} edges, found {edges}",
                nodes.saturating_sub(1)
            ),
            EdgeIntoRoot(e) => write!(f, "edge {e:?} points into the root"),
            MultipleParents { node, edges } => {
                write!(f, "node {node:?} has several incoming edges {edges:?}")
            }
            Unreachable(n) => write!(f, "node {n:?} is not reachable from the root"),
            NoConsumers => write!(f, "no consumer nodes"),
            DuplicateConsumer(n) => write!(f, "consumer {n:?} listed more than once"),
            UnknownConsumer(n) => write!(f, "consumer {n:?} is not a node"),
            RootIsConsumer(n) => write!(f, "root {n:?} cannot be a consumer"),
            ConsumerNotLeaf { node, children } => write!(
                f,
                "consumer {node:?} has {children} outgoing edges; consumers must be leaves"
            ),
            LowDegree { node, degree } => write!(
                f,
                "junction {node:?} touches {degree} edges; non-consumer nodes need at least 3"
            ),
        }
    }
}

/// Checks the tree, degree and consumer-placement rules. An empty result
/// means the topology can be turned into a [`Network`].
pub fn validate_topology(topology: &NetworkTopology) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut index = HashMap::new();
    for (i, n) in topology.nodes.iter().enumerate() {
        if index.insert(n.as_str(), i).is_some() {
            out.push(Violation::DuplicateNode(n.clone()));
        }
    }
    let root = index.get(topology.root.as_str()).copied();
    if root.is_none() {
        out.push(Violation::UnknownRoot(topology.root.clone()));
    }

    let n = topology.nodes.len();
    let mut seen_edges = HashSet::new();
    let mut incoming: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut degree = vec![0usize; n];
    for (j, e) in topology.edges.iter().enumerate() {
        if !seen_edges.insert(e.id.as_str()) {
            out.push(Violation::DuplicateEdge(e.id.clone()));
        }
        let from = index.get(e.from.as_str()).copied();
        let to = index.get(e.to.as_str()).copied();
        for (end, name) in [(from, &e.from), (to, &e.to)] {
            if end.is_none() {
                out.push(Violation::UnknownEdgeEndpoint {
                    edge: e.id.clone(),
                    node: name.clone(),
                });
            }
        }
        let (Some(from), Some(to)) = (from, to) else {
            continue;
        };
        if from == to {
            out.push(Violation::SelfLoop(e.id.clone()));
            continue;
        }
        degree[from] += 1;
        degree[to] += 1;
        children[from].push(j);
        incoming[to].push(j);
        if Some(to) == root {
            out.push(Violation::EdgeIntoRoot(e.id.clone()));
        }
    }
    if topology.edges.len() + 1 != n {
        out.push(Violation::EdgeCount {
            nodes: n,
            edges: topology.edges.len(),
        });
    }
    for (i, inc) in incoming.iter().enumerate() {
        if inc.len() > 1 {
            out.push(Violation::MultipleParents {
                node: topology.nodes[i].clone(),
                edges: inc.iter().map(|&j| topology.edges[j].id.clone()).collect(),
            });
        }
    }

    if let Some(r) = root {
        let mut reached = vec![false; n];
        reached[r] = true;
        let mut queue = VecDeque::from([r]);
        while let Some(u) = queue.pop_front() {
            for &j in &children[u] {
                let w = index[topology.edges[j].to.as_str()];
                if !reached[w] {
                    reached[w] = true;
                    queue.push_back(w);
                }
            }
        }
        let mut flagged = HashSet::new();
        for (i, ok) in reached.iter().enumerate() {
            if !ok && flagged.insert(i) {
                out.push(Violation::Unreachable(topology.nodes[i].clone()));
            }
        }
    }

    if topology.consumers.is_empty() {
        out.push(Violation::NoConsumers);
    }
    let mut consumer_set = HashSet::new();
    for c in &topology.consumers {
        if !consumer_set.insert(c.as_str()) {
            out.push(Violation::DuplicateConsumer(c.clone()));
            continue;
        }
        match index.get(c.as_str()) {
            None => out.push(Violation::UnknownConsumer(c.clone())),
            Some(&i) => {
                if Some(i) == root {
                    out.push(Violation::RootIsConsumer(c.clone()));
                } else if !children[i].is_empty() {
                    out.push(Violation::ConsumerNotLeaf {
                        node: c.clone(),
                        children: children[i].len(),
                    });
                }
            }
        }
    }
    for (i, name) in topology.nodes.iter().enumerate() {
        if Some(i) == root || consumer_set.contains(name.as_str()) {
            continue;
        }
        if degree[i] < 3 {
            out.push(Violation::LowDegree {
                node: name.clone(),
                degree: degree[i],
            });
        }
    }
    out
}

/// Node-edge incidence matrix with the root row removed. Rows follow the
/// topology node order (root skipped), columns the edge order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IncidenceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<i8>,
    row_nodes: Vec<usize>,
}

impl IncidenceMatrix {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> i8 {
        self.data[row * self.cols + col]
    }

    /// Network node index behind each row.
    pub fn row_nodes(&self) -> &[usize] {
        &self.row_nodes
    }

    pub fn mul_vec<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows)
            .map(|i| {
                (0..self.cols).fold(T::zero(), |acc, j| match self.get(i, j) {
                    1 => acc + x[j],
                    -1 => acc - x[j],
                    _ => acc,
                })
            })
            .collect()
    }

    pub fn to_dense<T: Scalar>(&self) -> Vec<Vec<T>> {
        (0..self.rows)
            .map(|i| {
                (0..self.cols)
                    .map(|j| T::from_i8(self.get(i, j)).unwrap())
                    .collect()
            })
            .collect()
    }
}

/// Edge sequence from the root to one consumer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConsumerPath {
    pub consumer: usize,
    /// Edge indices ordered from the root outwards.
    pub edges: Vec<usize>,
}

/// A validated supply tree with dense internal indices.
#[derive(Clone, Debug)]
pub struct Network {
    topology: NetworkTopology,
    root: usize,
    edge_from: Vec<usize>,
    edge_to: Vec<usize>,
    parent_edge: Vec<Option<usize>>,
    child_edges: Vec<Vec<usize>>,
    /// Nodes in breadth-first order from the root.
    order: Vec<usize>,
    consumers: Vec<usize>,
    consumer_at: Vec<Option<usize>>,
    paths: Vec<ConsumerPath>,
}

impl Network {
    pub fn new(topology: NetworkTopology) -> Result<Self, NetworkError> {
        let violations = validate_topology(&topology);
        if !violations.is_empty() {
            return Err(NetworkError::Invalid(violations));
        }
        let index: HashMap<&str, usize> = topology
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.as_str(), i))
            .collect();
        let n = topology.nodes.len();
        let root = index[topology.root.as_str()];
        let edge_from: Vec<usize> = topology
            .edges
            .iter()
            .map(|e| index[e.from.as_str()])
            .collect();
        let edge_to: Vec<usize> = topology.edges.iter().map(|e| index[e.to.as_str()]).collect();
        let mut parent_edge = vec![None; n];
        let mut child_edges = vec![Vec::new(); n];
        for (j, (&u, &w)) in edge_from.iter().zip(&edge_to).enumerate() {
            parent_edge[w] = Some(j);
            child_edges[u].push(j);
        }
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            for &j in &child_edges[u] {
                queue.push_back(edge_to[j]);
            }
        }
        let consumers: Vec<usize> = topology
            .consumers
            .iter()
            .map(|c| index[c.as_str()])
            .collect();
        let mut consumer_at = vec![None; n];
        for (k, &c) in consumers.iter().enumerate() {
            consumer_at[c] = Some(k);
        }
        let paths = consumers
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let mut edges = Vec::new();
                let mut node = c;
                while let Some(j) = parent_edge[node] {
                    edges.push(j);
                    node = edge_from[j];
                }
                edges.reverse();
                ConsumerPath { consumer: k, edges }
            })
            .collect();
        Ok(Network {
            topology,
            root,
            edge_from,
            edge_to,
            parent_edge,
            child_edges,
            order,
            consumers,
            consumer_at,
            paths,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, NetworkError> {
        Self::new(NetworkTopology::load(path)?)
    }

    pub fn topology(&self) -> &NetworkTopology {
        &self.topology
    }

    pub fn node_count(&self) -> usize {
        self.topology.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_to.len()
    }

    pub fn consumer_count(&self) -> usize {
        self.consumers.len()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn node_id(&self, node: usize) -> &str {
        &self.topology.nodes[node]
    }

    pub fn edge_id(&self, edge: usize) -> &str {
        &self.topology.edges[edge].id
    }

    pub fn consumer_id(&self, consumer: usize) -> &str {
        &self.topology.consumers[consumer]
    }

    pub fn edge_index(&self, id: &str) -> Option<usize> {
        self.topology.edges.iter().position(|e| e.id == id)
    }

    pub fn consumer_index(&self, id: &str) -> Option<usize> {
        self.topology.consumers.iter().position(|c| c == id)
    }

    pub fn edge_head(&self, edge: usize) -> usize {
        self.edge_to[edge]
    }

    pub fn edge_tail(&self, edge: usize) -> usize {
        self.edge_from[edge]
    }

    pub fn parent_edge(&self, node: usize) -> Option<usize> {
        self.parent_edge[node]
    }

    pub fn child_edges(&self, node: usize) -> &[usize] {
        &self.child_edges[node]
    }

    /// Consumer slot of a node, if it is a consumer.
    pub fn consumer_at(&self, node: usize) -> Option<usize> {
        self.consumer_at[node]
    }

    pub fn consumer_node(&self, consumer: usize) -> usize {
        self.consumers[consumer]
    }

    /// Nodes in breadth-first order from the root.
    pub fn bfs_order(&self) -> &[usize] {
        &self.order
    }

    pub fn incidence(&self) -> IncidenceMatrix {
        let row_nodes: Vec<usize> = (0..self.node_count()).filter(|&i| i != self.root).collect();
        let cols = self.edge_count();
        let mut data = vec![0i8; row_nodes.len() * cols];
        for (r, &node) in row_nodes.iter().enumerate() {
            for j in 0..cols {
                if self.edge_to[j] == node {
                    data[r * cols + j] = 1;
                } else if self.edge_from[j] == node {
                    data[r * cols + j] = -1;
                }
            }
        }
        IncidenceMatrix {
            rows: row_nodes.len(),
            cols,
            data,
            row_nodes,
        }
    }

    pub fn consumer_paths(&self) -> &[ConsumerPath] {
        &self.paths
    }

    pub fn path(&self, consumer: usize) -> &[usize] {
        &self.paths[consumer].edges
    }

    /// Edge flows from consumer draws: the flow on each edge is the total
    /// drawn downstream of it. Back-substitution from the leaves towards the
    /// root solves `B q_E = q_N` exactly for a tree.
    pub fn propagate_flows<T: Scalar>(&self, consumer_flows: &[T]) -> Result<Vec<T>, NetworkError> {
        if consumer_flows.len() != self.consumer_count() {
            return Err(NetworkError::FlowCount {
                expected: self.consumer_count(),
                found: consumer_flows.len(),
            });
        }
        for (k, &q) in consumer_flows.iter().enumerate() {
            if !q.is_finite() {
                return Err(NetworkError::NonFiniteFlow(self.consumer_id(k).to_string()));
            }
            if q < T::zero() {
                return Err(NetworkError::NegativeFlow {
                    consumer: self.consumer_id(k).to_string(),
                    value: q.to_f64().unwrap_or(f64::NAN),
                });
            }
        }
        let mut node_draw = vec![T::zero(); self.node_count()];
        for (k, &c) in self.consumers.iter().enumerate() {
            node_draw[c] = consumer_flows[k];
        }
        let mut edge_flow = vec![T::zero(); self.edge_count()];
        for &node in self.order.iter().rev() {
            if let Some(j) = self.parent_edge[node] {
                let downstream = self.child_edges[node]
                    .iter()
                    .fold(node_draw[node], |acc, &c| acc + edge_flow[c]);
                edge_flow[j] = downstream;
            }
        }
        Ok(edge_flow)
    }
}

/// Free-function form of [`validate_topology`] followed by
/// [`Network::incidence`].
pub fn incidence(topology: &NetworkTopology) -> Result<IncidenceMatrix, NetworkError> {
    Ok(Network::new(topology.clone())?.incidence())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig1() -> Network {
        Network::new(NetworkTopology::four_consumer_line()).unwrap()
    }

    fn single() -> NetworkTopology {
        NetworkTopology {
            nodes: vec!["a".into(), "c".into()],
            root: "a".into(),
            edges: vec![EdgeSpec {
                id: "e".into(),
                from: "a".into(),
                to: "c".into(),
            }],
            consumers: vec!["c".into()],
        }
    }

    #[test]
    fn four_consumer_line_is_valid() {
        assert!(validate_topology(&NetworkTopology::four_consumer_line()).is_empty());
    }

    #[test]
    fn single_edge_is_valid() {
        assert!(validate_topology(&single()).is_empty());
        let b = incidence(&single()).unwrap();
        assert_eq!((b.rows(), b.cols()), (1, 1));
        assert_eq!(b.get(0, 0), 1);
        let net = Network::new(single()).unwrap();
        assert_eq!(net.path(0), &[0]);
    }

    #[test]
    fn two_degree_junction_is_flagged() {
        // alpha -> j -> c puts two pipes in direct series
        let t = NetworkTopology {
            nodes: vec!["a".into(), "j".into(), "c".into()],
            root: "a".into(),
            edges: vec![
                EdgeSpec { id: "1".into(), from: "a".into(), to: "j".into() },
                EdgeSpec { id: "2".into(), from: "j".into(), to: "c".into() },
            ],
            consumers: vec!["c".into()],
        };
        let v = validate_topology(&t);
        assert_eq!(v, vec![Violation::LowDegree { node: "j".into(), degree: 2 }]);
        assert!(Network::new(t).is_err());
    }

    #[test]
    fn internal_consumer_is_rejected() {
        let mut t = NetworkTopology::four_consumer_line();
        t.consumers.push("6".into());
        let v = validate_topology(&t);
        assert!(v
            .iter()
            .any(|x| matches!(x, Violation::ConsumerNotLeaf { node, .. } if node == "6")));
    }

    #[test]
    fn structural_errors_are_named() {
        let mut t = NetworkTopology::four_consumer_line();
        t.edges[6].from = "7".into(); // self loop 7 -> 7
        let v = validate_topology(&t);
        assert!(v.contains(&Violation::SelfLoop("7".into())));

        let mut t = NetworkTopology::four_consumer_line();
        t.edges[4] = EdgeSpec { id: "5".into(), from: "5".into(), to: "alpha".into() };
        let v = validate_topology(&t);
        assert!(v.contains(&Violation::EdgeIntoRoot("5".into())));

        let mut t = NetworkTopology::four_consumer_line();
        t.edges.pop();
        let v = validate_topology(&t);
        assert!(v.iter().any(|x| matches!(x, Violation::EdgeCount { .. })));
        assert!(v.iter().any(|x| matches!(x, Violation::Unreachable(_))));
    }

    #[test]
    fn incidence_of_four_consumer_line() {
        let net = fig1();
        let b = net.incidence();
        assert_eq!((b.rows(), b.cols()), (7, 7));
        // edge "5" runs alpha -> 5: only the row of node 5 is nonzero
        let col = net.edge_index("5").unwrap();
        let nonzero: Vec<(usize, i8)> = (0..7)
            .filter(|&r| b.get(r, col) != 0)
            .map(|r| (b.row_nodes()[r], b.get(r, col)))
            .collect();
        let n5 = net.topology().nodes.iter().position(|n| n == "5").unwrap();
        assert_eq!(nonzero, vec![(n5, 1)]);
        // every other column has exactly one +1 and one -1
        for j in (0..7).filter(|&j| j != col) {
            let plus = (0..7).filter(|&r| b.get(r, j) == 1).count();
            let minus = (0..7).filter(|&r| b.get(r, j) == -1).count();
            assert_eq!((plus, minus), (1, 1));
        }
    }

    #[test]
    fn paths_of_four_consumer_line() {
        let net = fig1();
        let ids = |k: usize| -> Vec<&str> { net.path(k).iter().map(|&j| net.edge_id(j)).collect() };
        assert_eq!(ids(0), vec!["5", "1"]);
        assert_eq!(ids(1), vec!["5", "6", "2"]);
        assert_eq!(ids(2), vec!["5", "6", "7", "3"]);
        assert_eq!(ids(3), vec!["5", "6", "7", "4"]);
    }

    #[test]
    fn propagate_four_consumer_line() {
        let net = fig1();
        let by_id = |flows: &[f64]| -> Vec<f64> {
            let q = net.propagate_flows(flows).unwrap();
            (1..=7)
                .map(|e| q[net.edge_index(&e.to_string()).unwrap()])
                .collect()
        };
        assert_eq!(by_id(&[1.0, 2.0, 3.0, 4.0]), vec![1.0, 2.0, 3.0, 4.0, 10.0, 9.0, 7.0]);
        assert_eq!(by_id(&[0.0; 4]), vec![0.0; 7]);
        assert_eq!(by_id(&[1.0, 0.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn propagate_rejects_bad_input() {
        let net = fig1();
        assert!(matches!(
            net.propagate_flows(&[1.0, -0.5, 0.0, 0.0]),
            Err(NetworkError::NegativeFlow { .. })
        ));
        assert!(matches!(
            net.propagate_flows(&[1.0, 0.0]),
            Err(NetworkError::FlowCount { expected: 4, found: 2 })
        ));
        assert!(net.propagate_flows(&[f64::NAN, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn topology_json_round_trip() {
        let t = NetworkTopology::four_consumer_line();
        let back = NetworkTopology::from_json_str(&t.to_json_string()).unwrap();
        assert_eq!(t, back);
    }
}
