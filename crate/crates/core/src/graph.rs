//! Network designs: typed undirected graphs with node magnitudes, positions
//! and edge capacities, plus the matrix views consumed by the learned models.

use std::collections::HashSet;
use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};

/// Node class index into the active profile's class list.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeClass(pub u8);

impl NodeClass {
    pub const SUPPLY: NodeClass = NodeClass(0);
    pub const DEMAND: NodeClass = NodeClass(1);
    pub const TRANSFER: NodeClass = NodeClass(2);

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

/// Class and feature conventions shared by every design of one kind.
#[derive(Clone, Debug, PartialEq)]
pub struct Profile {
    pub id: String,
    pub class_names: Vec<String>,
    pub edge_types: usize,
    pub feature_schema: Vec<String>,
}

pub const SYNTHETIC_PROFILE: &str = "synthetic";

impl Profile {
    /// Supply/demand/transfer nodes, three capacity bins, six node features.
    pub fn synthetic() -> Self {
        Profile {
            id: SYNTHETIC_PROFILE.to_string(),
            class_names: ["supply", "demand", "transfer"].map(String::from).to_vec(),
            edge_types: 3,
            feature_schema: [
                "is_supply",
                "is_demand",
                "is_transfer",
                "magnitude",
                "degree",
                "mean_capacity",
            ]
            .map(String::from)
            .to_vec(),
        }
    }

    pub fn lookup(id: &str) -> Result<Self> {
        match id {
            SYNTHETIC_PROFILE => Ok(Profile::synthetic()),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn feature_count(&self) -> usize {
        self.feature_schema.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeAttr {
    pub id: usize,
    pub class: NodeClass,
    pub magnitude: f64,
    pub pos: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeAttr {
    pub u: usize,
    pub v: usize,
    #[serde(rename = "type")]
    pub edge_type: u8,
    pub capacity: f64,
    pub unit_cost: f64,
}

impl EdgeAttr {
    pub fn key(&self) -> (usize, usize) {
        (self.u.min(self.v), self.u.max(self.v))
    }

    pub fn other(&self, node: usize) -> usize {
        if self.u == node {
            self.v
        } else {
            self.u
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignGraph {
    pub profile: String,
    pub nodes: Vec<NodeAttr>,
    pub edges: Vec<EdgeAttr>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedAdjacency(pub Tensor);

#[derive(Clone, Debug, PartialEq)]
pub struct DegreeMatrix(pub Tensor);

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub values: Tensor,
    pub schema: Vec<String>,
}

/// One broken invariant found by [`validate`].
#[derive(Clone, Debug, PartialEq)]
pub enum Violation {
    NonConsecutiveId { index: usize, id: usize },
    ClassOutOfRange { node: usize, class: u8 },
    NegativeMagnitude { node: usize, magnitude: f64 },
    TransferMagnitude { node: usize, magnitude: f64 },
    PositionOutOfRange { node: usize },
    NonFinite { what: String },
    SelfLoop { edge: usize, node: usize },
    DanglingEndpoint { edge: usize, node: usize },
    DuplicateEdge { edge: usize, u: usize, v: usize },
    EdgeTypeOutOfRange { edge: usize, edge_type: u8 },
    NonPositiveCapacity { edge: usize, capacity: f64 },
    NegativeCost { edge: usize, unit_cost: f64 },
    UnknownProfile { profile: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NonConsecutiveId { index, id } => {
                write!(f, "node at index {index} has id {id}; ids must be 0..N-1")
            }
            Violation::ClassOutOfRange { node, class } => {
                write!(f, "node {node}: class {class} out of range")
            }
            Violation::NegativeMagnitude { node, magnitude } => {
                write!(f, "node {node}: negative magnitude {magnitude}")
            }
            Violation::TransferMagnitude { node, magnitude } => {
                write!(f, "node {node}: transfer node with magnitude {magnitude}")
            }
            Violation::PositionOutOfRange { node } => {
                write!(f, "node {node}: position outside the unit square")
            }
            Violation::NonFinite { what } => write!(f, "{what}: non-finite value"),
            Violation::SelfLoop { edge, node } => write!(f, "edge {edge}: self-loop on {node}"),
            Violation::DanglingEndpoint { edge, node } => {
                write!(f, "edge {edge}: endpoint {node} does not exist")
            }
            Violation::DuplicateEdge { edge, u, v } => {
                write!(f, "edge {edge}: duplicate of ({u}, {v})")
            }
            Violation::EdgeTypeOutOfRange { edge, edge_type } => {
                write!(f, "edge {edge}: type {edge_type} out of range")
            }
            Violation::NonPositiveCapacity { edge, capacity } => {
                write!(f, "edge {edge}: capacity {capacity} must be positive")
            }
            Violation::NegativeCost { edge, unit_cost } => {
                write!(f, "edge {edge}: negative unit cost {unit_cost}")
            }
            Violation::UnknownProfile { profile } => write!(f, "unknown profile `{profile}`"),
        }
    }
}

impl DesignGraph {
    pub fn new(profile: impl Into<String>) -> Self {
        DesignGraph {
            profile: profile.into(),
            nodes: Vec::new(),
            edges: Vec::new(),
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Appends a node with the next free id and returns that id.
    pub fn add_node(&mut self, class: NodeClass, magnitude: f64, pos: [f64; 2]) -> usize {
        let id = self.nodes.len();
        self.nodes.push(NodeAttr {
            id,
            class,
            magnitude,
            pos,
        });
        id
    }

    pub fn add_edge(&mut self, u: usize, v: usize, edge_type: u8, capacity: f64, unit_cost: f64) {
        self.edges.push(EdgeAttr {
            u,
            v,
            edge_type,
            capacity,
            unit_cost,
        });
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        let key = (u.min(v), u.max(v));
        self.edges.iter().any(|e| e.key() == key)
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.nodes.len()];
        for e in &self.edges {
            deg[e.u] += 1;
            deg[e.v] += 1;
        }
        deg
    }

    /// Neighbor lists with edge indices, sorted by neighbor id.
    pub fn neighbors(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for (k, e) in self.edges.iter().enumerate() {
            adj[e.u].push((e.v, k));
            adj[e.v].push((e.u, k));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        let n = self.nodes.len();
        if n <= 1 {
            return true;
        }
        let adj = self.neighbors();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &(v, _) in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == n
    }

    pub fn total_magnitude(&self, class: NodeClass) -> f64 {
        self.nodes
            .iter()
            .filter(|n| n.class == class)
            .map(|n| n.magnitude)
            .sum()
    }

    pub fn count_class(&self, class: NodeClass) -> usize {
        self.nodes.iter().filter(|n| n.class == class).count()
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> DesignGraph {
        let mut nodes = self.nodes.clone();
        for (old, node) in self.nodes.iter().enumerate() {
            nodes[perm[old]] = NodeAttr {
                id: perm[old],
                ..node.clone()
            };
        }
        let edges = self
            .edges
            .iter()
            .map(|e| EdgeAttr {
                u: perm[e.u],
                v: perm[e.v],
                ..e.clone()
            })
            .collect();
        DesignGraph {
            profile: self.profile.clone(),
            nodes,
            edges,
        }
    }

    pub fn to_json(&self) -> String {
        serialize(self)
    }
}

/// Capacity-weighted symmetric adjacency matrix.
pub fn adjacency(graph: &DesignGraph) -> WeightedAdjacency {
    let n = graph.node_count();
    let mut a = Tensor::zeros(&[n, n]);
    for e in &graph.edges {
        a.set(e.u, e.v, e.capacity);
        a.set(e.v, e.u, e.capacity);
    }
    WeightedAdjacency(a)
}

pub fn degree(adj: &WeightedAdjacency) -> DegreeMatrix {
    let n = adj.0.rows();
    let mut d = Tensor::zeros(&[n, n]);
    for i in 0..n {
        d.set(i, i, adj.0.row_slice(i).iter().sum());
    }
    DegreeMatrix(d)
}

/// Node feature rows under the graph's profile schema.
///
/// Synthetic layout: one-hot class, magnitude, degree, mean incident capacity.
pub fn feature_matrix(graph: &DesignGraph) -> Result<FeatureMatrix> {
    let profile = Profile::lookup(&graph.profile)?;
    let c = profile.class_count();
    let f = profile.feature_count();
    let n = graph.node_count();
    let mut deg = vec![0usize; n];
    let mut cap_sum = vec![0.0; n];
    for e in &graph.edges {
        deg[e.u] += 1;
        deg[e.v] += 1;
        cap_sum[e.u] += e.capacity;
        cap_sum[e.v] += e.capacity;
    }
    let mut x = Tensor::zeros(&[n, f]);
    for (i, node) in graph.nodes.iter().enumerate() {
        let class = node.class.index();
        if class >= c {
            return Err(Error::Config(format!("node {i}: class {class} outside profile")));
        }
        x.set(i, class, 1.0);
        x.set(i, c, node.magnitude);
        x.set(i, c + 1, deg[i] as f64);
        let mean_cap = if deg[i] > 0 { cap_sum[i] / deg[i] as f64 } else { 0.0 };
        x.set(i, c + 2, mean_cap);
    }
    Ok(FeatureMatrix {
        values: x,
        schema: profile.feature_schema,
    })
}

pub fn validate(graph: &DesignGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    let profile = match Profile::lookup(&graph.profile) {
        Ok(p) => Some(p),
        Err(_) => {
            out.push(Violation::UnknownProfile {
                profile: graph.profile.clone(),
            });
            None
        }
    };
    let class_count = profile.as_ref().map_or(u8::MAX as usize + 1, |p| p.class_count());
    let edge_types = profile.as_ref().map_or(u8::MAX as usize + 1, |p| p.edge_types);

    for (index, node) in graph.nodes.iter().enumerate() {
        if node.id != index {
            out.push(Violation::NonConsecutiveId { index, id: node.id });
        }
        if node.class.index() >= class_count {
            out.push(Violation::ClassOutOfRange {
                node: index,
                class: node.class.0,
            });
        }
        if !node.magnitude.is_finite() || !node.pos.iter().all(|p| p.is_finite()) {
            out.push(Violation::NonFinite {
                what: format!("node {index}"),
            });
            continue;
        }
        if node.magnitude < 0.0 {
            out.push(Violation::NegativeMagnitude {
                node: index,
                magnitude: node.magnitude,
            });
        }
        if node.class == NodeClass::TRANSFER && node.magnitude != 0.0 {
            out.push(Violation::TransferMagnitude {
                node: index,
                magnitude: node.magnitude,
            });
        }
        if node.pos.iter().any(|p| !(0.0..=1.0).contains(p)) {
            out.push(Violation::PositionOutOfRange { node: index });
        }
    }

    let n = graph.node_count();
    let mut seen = HashSet::new();
    for (k, e) in graph.edges.iter().enumerate() {
        if e.u == e.v {
            out.push(Violation::SelfLoop { edge: k, node: e.u });
        }
        for node in [e.u, e.v] {
            if node >= n {
                out.push(Violation::DanglingEndpoint { edge: k, node });
            }
        }
        if !seen.insert(e.key()) {
            out.push(Violation::DuplicateEdge {
                edge: k,
                u: e.key().0,
                v: e.key().1,
            });
        }
        if e.edge_type as usize >= edge_types {
            out.push(Violation::EdgeTypeOutOfRange {
                edge: k,
                edge_type: e.edge_type,
            });
        }
        if !e.capacity.is_finite() || !e.unit_cost.is_finite() {
            out.push(Violation::NonFinite {
                what: format!("edge {k}"),
            });
            continue;
        }
        if e.capacity <= 0.0 {
            out.push(Violation::NonPositiveCapacity {
                edge: k,
                capacity: e.capacity,
            });
        }
        if e.unit_cost < 0.0 {
            out.push(Violation::NegativeCost {
                edge: k,
                unit_cost: e.unit_cost,
            });
        }
    }
    out
}

pub fn serialize(graph: &DesignGraph) -> String {
    serde_json::to_string(graph).expect("design graphs always serialize")
}

pub fn deserialize(text: &str) -> Result<DesignGraph> {
    serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })
}

/// A dataset line: a graph plus its optional performance label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledGraph {
    pub profile: String,
    pub nodes: Vec<NodeAttr>,
    pub edges: Vec<EdgeAttr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<f64>,
}

impl LabeledGraph {
    pub fn new(graph: DesignGraph, label: Option<f64>) -> Self {
        LabeledGraph {
            profile: graph.profile,
            nodes: graph.nodes,
            edges: graph.edges,
            label,
        }
    }

    pub fn into_parts(self) -> (DesignGraph, Option<f64>) {
        (
            DesignGraph {
                profile: self.profile,
                nodes: self.nodes,
                edges: self.edges,
            },
            self.label,
        )
    }
}

pub fn write_jsonl<W: std::io::Write>(
    mut out: W,
    graphs: &[DesignGraph],
    labels: Option<&[f64]>,
) -> Result<()> {
    for (i, g) in graphs.iter().enumerate() {
        let line = LabeledGraph::new(g.clone(), labels.map(|l| l[i]));
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads a JSON-lines dataset; blank lines are skipped.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<(DesignGraph, Option<f64>)>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LabeledGraph = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(parsed.into_parts());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> DesignGraph {
        let mut g = DesignGraph::new(SYNTHETIC_PROFILE);
        for i in 0..3 {
            g.add_node(NodeClass::TRANSFER, 0.0, [0.1 * i as f64, 0.5]);
        }
        g.add_edge(0, 1, 0, 1.0, 1.0);
        g.add_edge(1, 2, 0, 1.0, 1.0);
        g.add_edge(2, 0, 0, 1.0, 1.0);
        g
    }

    #[test]
    fn triangle_adjacency_and_degree() {
        let a = adjacency(&triangle());
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(a.0.get(i, j), if i == j { 0.0 } else { 1.0 });
            }
        }
        let d = degree(&a);
        assert_eq!(d.0.data(), &[2., 0., 0., 0., 2., 0., 0., 0., 2.]);
    }

    #[test]
    fn edgeless_and_zero_cases() {
        let mut g = DesignGraph::new(SYNTHETIC_PROFILE);
        g.add_node(NodeClass::TRANSFER, 0.0, [0.0, 0.0]);
        g.add_node(NodeClass::TRANSFER, 0.0, [1.0, 1.0]);
        let a = adjacency(&g);
        assert_eq!(a.0, Tensor::zeros(&[2, 2]));
        assert_eq!(degree(&a).0, Tensor::zeros(&[2, 2]));

        let two = WeightedAdjacency(Tensor::matrix(2, 2, vec![0., 2., 2., 0.]).unwrap());
        assert_eq!(degree(&two).0.data(), &[2., 0., 0., 2.]);
    }

    #[test]
    fn grid_scale_adjacency_nonzeros() {
        // 123 nodes, 180 distinct edges: ring plus chords.
        let mut g = DesignGraph::new(SYNTHETIC_PROFILE);
        for _ in 0..123 {
            g.add_node(NodeClass::TRANSFER, 0.0, [0.5, 0.5]);
        }
        for i in 0..123 {
            g.add_edge(i, (i + 1) % 123, 0, 1.0, 1.0);
        }
        for i in 0..57 {
            g.add_edge(i, i + 60, 1, 2.0, 1.0);
        }
        assert!(validate(&g).is_empty());
        let a = adjacency(&g);
        assert_eq!(a.0.data().iter().filter(|v| **v != 0.0).count(), 360);
        assert_eq!(feature_matrix(&g).unwrap().values.shape(), &[123, 6]);
    }

    #[test]
    fn feature_rows() {
        let mut g = DesignGraph::new(SYNTHETIC_PROFILE);
        g.add_node(NodeClass::SUPPLY, 5.0, [0.0, 0.0]);
        g.add_node(NodeClass::DEMAND, 1.0, [0.0, 0.0]);
        g.add_node(NodeClass::DEMAND, 1.0, [0.0, 0.0]);
        g.add_node(NodeClass::TRANSFER, 0.0, [0.0, 0.0]);
        g.add_edge(0, 1, 0, 2.0, 1.0);
        g.add_edge(0, 2, 1, 4.0, 1.0);
        let x = feature_matrix(&g).unwrap().values;
        assert_eq!(x.row_slice(0), &[1., 0., 0., 5., 2., 3.]);
        assert_eq!(x.row_slice(3), &[0., 0., 1., 0., 0., 0.]);

        g.profile = "power-6class".into();
        assert!(matches!(feature_matrix(&g), Err(Error::Config(_))));
    }

    #[test]
    fn validate_reports_rules() {
        assert!(validate(&triangle()).is_empty());

        let mut g = triangle();
        g.add_edge(0, 0, 0, 1.0, 1.0);
        assert_eq!(validate(&g), vec![Violation::SelfLoop { edge: 3, node: 0 }]);

        let mut g = triangle();
        g.nodes[1].magnitude = 3.0;
        assert_eq!(
            validate(&g),
            vec![Violation::TransferMagnitude {
                node: 1,
                magnitude: 3.0
            }]
        );

        let mut g = triangle();
        g.add_edge(1, 0, 0, 1.0, 1.0);
        g.add_edge(1, 7, 0, 0.0, 1.0);
        let v = validate(&g);
        assert!(v.contains(&Violation::DuplicateEdge { edge: 3, u: 0, v: 1 }));
        assert!(v.contains(&Violation::DanglingEndpoint { edge: 4, node: 7 }));
        assert!(v.contains(&Violation::NonPositiveCapacity {
            edge: 4,
            capacity: 0.0
        }));
    }

    #[test]
    fn parse_errors() {
        let text = serialize(&triangle());
        let truncated = &text[..text.len() / 2];
        assert!(matches!(deserialize(truncated), Err(Error::Parse { .. })));

        let extra = text.replacen("\"profile\"", "\"colour\":1,\"profile\"", 1);
        match deserialize(&extra) {
            Err(Error::Parse { message, .. }) => assert!(message.contains("colour"), "{message}"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn jsonl_round_trip_with_labels() {
        let graphs = vec![triangle(), DesignGraph::new(SYNTHETIC_PROFILE)];
        let mut buf = Vec::new();
        write_jsonl(&mut buf, &graphs, Some(&[1.5, 0.1 + 0.2])).unwrap();
        let back = read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back[0], (graphs[0].clone(), Some(1.5)));
        assert_eq!(back[1], (graphs[1].clone(), Some(0.1 + 0.2)));

        let bad = b"{\"profile\":\"synthetic\",\"nodes\":[],\"edges\":[]}\n{\"profile\":1}\n";
        assert!(matches!(
            read_jsonl(&bad[..]),
            Err(Error::Parse { line: 2, .. })
        ));
    }
}
