//! Min-cost max-flow on designs and the performance metrics built on it.
//!
//! Real-valued capacities and costs are scaled to integers at a resolution of
//! `1e-6` before solving, so results are exact on that lattice and free of
//! floating-point drift.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{DesignGraph, NodeClass};

pub const SCALE: f64 = 1e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Maximize,
    Minimize,
}

impl Objective {
    /// True when `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            Objective::Maximize => a > b,
            Objective::Minimize => a < b,
        }
    }

    /// Sort key where smaller is better.
    pub fn key(self, value: f64) -> f64 {
        match self {
            Objective::Maximize => -value,
            Objective::Minimize => value,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Arc {
    pub from: usize,
    pub to: usize,
    pub capacity: f64,
    pub unit_cost: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowNetwork {
    pub node_count: usize,
    pub arcs: Vec<Arc>,
    pub source: usize,
    pub sink: usize,
    /// Arc pair `(forward, backward)` for each undirected design edge, indexed
    /// like the design's edge list. `None` for edges left out of the network.
    pub edge_arcs: Vec<Option<(usize, usize)>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowResult {
    pub f_max: f64,
    pub total_cost: f64,
    /// Flow in integer units of `1 / SCALE`.
    pub flow_units: i64,
    /// Cost in integer units of `1 / SCALE^2`.
    pub cost_units: i128,
    pub arc_flows: Vec<f64>,
    /// Signed net flow per design edge, positive in the `u -> v` direction.
    pub edge_flows: Vec<f64>,
}

/// Components removed from a design before solving.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Outage {
    pub failed_nodes: Vec<usize>,
    pub failed_edges: Vec<usize>,
}

impl Outage {
    pub fn is_empty(&self) -> bool {
        self.failed_nodes.is_empty() && self.failed_edges.is_empty()
    }
}

impl FlowNetwork {
    pub fn new(node_count: usize, source: usize, sink: usize) -> Result<Self> {
        if source == sink || source >= node_count || sink >= node_count {
            return Err(Error::Config(format!(
                "invalid terminals s={source}, t={sink} for {node_count} nodes"
            )));
        }
        Ok(FlowNetwork {
            node_count,
            arcs: Vec::new(),
            source,
            sink,
            edge_arcs: Vec::new(),
        })
    }

    pub fn add_arc(&mut self, from: usize, to: usize, capacity: f64, unit_cost: f64) -> usize {
        self.arcs.push(Arc {
            from,
            to,
            capacity,
            unit_cost,
        });
        self.arcs.len() - 1
    }
}

/// Adds a super-source feeding every supply node and a super-sink drained by
/// every demand node; interior edges become opposed arc pairs.
pub fn augment_source_sink(graph: &DesignGraph) -> Result<FlowNetwork> {
    augment_with_outage(graph, &Outage::default())
}

pub fn augment_with_outage(graph: &DesignGraph, outage: &Outage) -> Result<FlowNetwork> {
    let n = graph.node_count();
    let mut node_down = vec![false; n];
    for &v in &outage.failed_nodes {
        node_down[v] = true;
    }
    let mut edge_down = vec![false; graph.edge_count()];
    for &e in &outage.failed_edges {
        edge_down[e] = true;
    }
    let alive = |class: NodeClass| {
        graph
            .nodes
            .iter()
            .any(|v| v.class == class && !node_down[v.id])
    };
    if !alive(NodeClass::SUPPLY) {
        return Err(Error::DegenerateNetwork("no supply nodes".into()));
    }
    if !alive(NodeClass::DEMAND) {
        return Err(Error::DegenerateNetwork("no demand nodes".into()));
    }

    let (s, t) = (n, n + 1);
    let mut net = FlowNetwork::new(n + 2, s, t)?;
    for (k, e) in graph.edges.iter().enumerate() {
        if edge_down[k] || node_down[e.u] || node_down[e.v] {
            net.edge_arcs.push(None);
            continue;
        }
        let fwd = net.add_arc(e.u, e.v, e.capacity, e.unit_cost);
        let bwd = net.add_arc(e.v, e.u, e.capacity, e.unit_cost);
        net.edge_arcs.push(Some((fwd, bwd)));
    }
    for node in &graph.nodes {
        if node_down[node.id] {
            continue;
        }
        match node.class {
            NodeClass::SUPPLY => {
                net.add_arc(s, node.id, node.magnitude, 0.0);
            }
            NodeClass::DEMAND => {
                net.add_arc(node.id, t, node.magnitude, 0.0);
            }
            _ => {}
        }
    }
    Ok(net)
}

fn to_units(x: f64) -> i64 {
    (x * SCALE).round() as i64
}

const INF: i64 = i64::MAX / 4;

/// Successive shortest augmenting paths with node potentials: Bellman-Ford
/// for the initial potentials, then Dijkstra on reduced costs.
pub fn min_cost_max_flow(net: &FlowNetwork) -> Result<FlowResult> {
    let n = net.node_count;
    for a in &net.arcs {
        if !(a.capacity.is_finite() && a.unit_cost.is_finite()) || a.capacity < 0.0 {
            return Err(Error::Domain(format!(
                "arc {}->{} has capacity {} and cost {}",
                a.from, a.to, a.capacity, a.unit_cost
            )));
        }
        if a.from >= n || a.to >= n {
            return Err(Error::Config(format!("arc {}->{} out of range", a.from, a.to)));
        }
    }

    // Residual graph: arc 2k is the original, 2k + 1 its reverse.
    let m = net.arcs.len();
    let mut to = Vec::with_capacity(2 * m);
    let mut residual = Vec::with_capacity(2 * m);
    let mut cost = Vec::with_capacity(2 * m);
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    for a in &net.arcs {
        let k = to.len();
        to.extend([a.to, a.from]);
        residual.extend([to_units(a.capacity), 0]);
        let c = to_units(a.unit_cost);
        cost.extend([c, -c]);
        out[a.from].push(k);
        out[a.to].push(k + 1);
    }

    let mut potential = vec![INF; n];
    potential[net.source] = 0;
    for _ in 0..n {
        let mut changed = false;
        for u in 0..n {
            if potential[u] == INF {
                continue;
            }
            for &k in &out[u] {
                if residual[k] > 0 && potential[u] + cost[k] < potential[to[k]] {
                    potential[to[k]] = potential[u] + cost[k];
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
    for p in &mut potential {
        if *p == INF {
            *p = 0;
        }
    }

    let mut flow_units: i64 = 0;
    let mut cost_units: i128 = 0;
    let mut dist = vec![INF; n];
    let mut parent = vec![usize::MAX; n];
    loop {
        dist.fill(INF);
        parent.fill(usize::MAX);
        dist[net.source] = 0;
        let mut heap = BinaryHeap::new();
        heap.push(Reverse((0i64, net.source)));
        while let Some(Reverse((d, u))) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &k in &out[u] {
                if residual[k] <= 0 {
                    continue;
                }
                let v = to[k];
                let nd = d + cost[k] + potential[u] - potential[v];
                if nd < dist[v] {
                    dist[v] = nd;
                    parent[v] = k;
                    heap.push(Reverse((nd, v)));
                }
            }
        }
        if dist[net.sink] == INF {
            break;
        }
        for v in 0..n {
            if dist[v] < INF {
                potential[v] += dist[v];
            }
        }
        let mut push = i64::MAX;
        let mut v = net.sink;
        while v != net.source {
            let k = parent[v];
            push = push.min(residual[k]);
            v = to[k ^ 1];
        }
        let mut v = net.sink;
        while v != net.source {
            let k = parent[v];
            residual[k] -= push;
            residual[k ^ 1] += push;
            cost_units += push as i128 * cost[k] as i128;
            v = to[k ^ 1];
        }
        flow_units += push;
    }

    let arc_flows: Vec<f64> = (0..m).map(|k| residual[2 * k + 1] as f64 / SCALE).collect();
    let edge_flows = net
        .edge_arcs
        .iter()
        .map(|pair| match pair {
            Some((f, b)) => (residual[2 * f + 1] - residual[2 * b + 1]) as f64 / SCALE,
            None => 0.0,
        })
        .collect();
    Ok(FlowResult {
        f_max: flow_units as f64 / SCALE,
        total_cost: cost_units as f64 / (SCALE * SCALE),
        flow_units,
        cost_units,
        arc_flows,
        edge_flows,
    })
}

/// Total carried flow over total installed capacity on design edges.
pub fn capacity_ratio(graph: &DesignGraph, flows: &FlowResult) -> Result<f64> {
    if graph.edges.is_empty() {
        return Err(Error::UndefinedMetric("capacity ratio of an edgeless design".into()));
    }
    let carried: f64 = flows.edge_flows.iter().map(|f| f.abs()).sum();
    let installed: f64 = graph.edges.iter().map(|e| e.capacity).sum();
    Ok(carried / installed)
}

/// Cost of installing every edge's capacity at `a` per unit.
pub fn edge_cost(graph: &DesignGraph, a: f64) -> f64 {
    graph.edges.iter().map(|e| a * e.capacity).sum()
}

/// `alpha * C^R + (1 - alpha) * C^E / K`; smaller is better.
pub fn combined_label(capacity_ratio: f64, edge_cost: f64, alpha: f64, k: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&alpha) && k > 0.0);
    alpha * capacity_ratio + (1.0 - alpha) * edge_cost / k
}

/// Maximum deliverable flow from supplies to demands (larger is better).
pub fn synthetic_label(graph: &DesignGraph) -> Result<f64> {
    Ok(min_cost_max_flow(&augment_source_sink(graph)?)?.f_max)
}

pub fn delivered_demand(graph: &DesignGraph) -> Result<f64> {
    synthetic_label(graph)
}

/// Delivered demand with components removed. A design left without any
/// working supply or demand node delivers nothing.
pub fn delivered_demand_with_outage(graph: &DesignGraph, outage: &Outage) -> Result<f64> {
    match augment_with_outage(graph, outage) {
        Ok(net) => Ok(min_cost_max_flow(&net)?.f_max),
        Err(Error::DegenerateNetwork(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Metric weights for the combined capacity-ratio/cost label.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelWeights {
    pub alpha: f64,
    pub k: f64,
    pub a: f64,
}

impl Default for LabelWeights {
    fn default() -> Self {
        LabelWeights {
            alpha: 0.5,
            k: 100.0,
            a: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub f_max: f64,
    pub total_cost: f64,
    pub capacity_ratio: Option<f64>,
    pub edge_cost: f64,
    pub combined_q: Option<f64>,
}

pub fn evaluate(graph: &DesignGraph, weights: LabelWeights) -> Result<Metrics> {
    let net = augment_source_sink(graph)?;
    let flows = min_cost_max_flow(&net)?;
    let cr = capacity_ratio(graph, &flows).ok();
    let ce = edge_cost(graph, weights.a);
    Ok(Metrics {
        f_max: flows.f_max,
        total_cost: flows.total_cost,
        capacity_ratio: cr,
        edge_cost: ce,
        combined_q: cr.map(|cr| combined_label(cr, ce, weights.alpha, weights.k)),
    })
}
