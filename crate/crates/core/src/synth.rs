//! Labeled corpora of small-world supply networks.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow;
use crate::graph::{self, DesignGraph, NodeClass, SYNTHETIC_PROFILE};
use crate::seed::{derive_seed, derived_rng, rng_from, stream};

/// Percentage of nodes drawn as supply (rounded up).
pub const SUPPLY_PERCENT: usize = 15;
/// Probability that a non-supply node is a demand node.
pub const DEMAND_SHARE: f64 = 0.7;

const MAX_TOPOLOGY_ATTEMPTS: u64 = 10_000;
const MAX_LABEL_ATTEMPTS: u64 = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n: usize,
    pub k: usize,
    pub p_rewire: f64,
    pub beta: f64,
    pub supply_range: [f64; 2],
    pub demand_range: [f64; 2],
    pub capacity_bins: Vec<f64>,
    pub cost_range: [f64; 2],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n: 33,
            k: 2,
            p_rewire: 0.3,
            beta: 1.0,
            supply_range: [5.0, 15.0],
            demand_range: [1.0, 5.0],
            capacity_bins: vec![2.0, 6.0, 12.0],
            cost_range: [0.5, 2.0],
            seed: 0,
        }
    }
}

fn check_interval(name: &str, r: [f64; 2]) -> Result<()> {
    if !(r[0].is_finite() && r[1].is_finite() && r[0] > 0.0 && r[0] <= r[1]) {
        return Err(Error::Config(format!("{name} must be a positive interval, got {r:?}")));
    }
    Ok(())
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        check_topology(self.n, self.k, self.p_rewire)?;
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        check_interval("supply_range", self.supply_range)?;
        check_interval("demand_range", self.demand_range)?;
        check_interval("cost_range", self.cost_range)?;
        if self.capacity_bins.is_empty()
            || self.capacity_bins.iter().any(|c| !(*c > 0.0 && c.is_finite()))
            || self.capacity_bins.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(
                "capacity_bins must be non-empty, positive and ascending".into(),
            ));
        }
        if self.capacity_bins.len() > u8::MAX as usize {
            return Err(Error::Config("too many capacity bins".into()));
        }
        Ok(())
    }

    pub fn magnitude_range(&self, class: NodeClass) -> Option<[f64; 2]> {
        match class {
            NodeClass::SUPPLY => Some(self.supply_range),
            NodeClass::DEMAND => Some(self.demand_range),
            _ => None,
        }
    }
}

fn check_topology(n: usize, k: usize, p: f64) -> Result<()> {
    if k < 2 || k % 2 != 0 || n <= k {
        return Err(Error::Config(format!(
            "need n > k >= 2 with k even, got n={n}, k={k}"
        )));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("p_rewire must lie in [0, 1], got {p}")));
    }
    Ok(())
}

/// Node count plus a sorted list of undirected edges `(u, v)` with `u < v`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
}

impl Topology {
    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.n];
        for &(u, v) in &self.edges {
            d[u] += 1;
            d[v] += 1;
        }
        d
    }

    fn is_connected(&self) -> bool {
        let mut adj = vec![Vec::new(); self.n];
        for &(u, v) in &self.edges {
            adj[u].push(v);
            adj[v].push(u);
        }
        let mut seen = vec![false; self.n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == self.n
    }
}

fn rewired_ring(n: usize, k: usize, p: f64, seed: u64) -> Topology {
    let mut rng = rng_from(seed);
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for j in 1..=k / 2 {
        for u in 0..n {
            let v = (u + j) % n;
            adj[u].insert(v);
            adj[v].insert(u);
        }
    }
    let nodes: Vec<usize> = (0..n).collect();
    for j in 1..=k / 2 {
        for u in 0..n {
            let v = (u + j) % n;
            if !adj[u].contains(&v) || rng.random::<f64>() >= p {
                continue;
            }
            if adj[u].len() >= n - 1 {
                continue;
            }
            let mut w = *nodes.choose(&mut rng).expect("n > 0");
            while w == u || adj[u].contains(&w) {
                w = *nodes.choose(&mut rng).expect("n > 0");
            }
            adj[u].remove(&v);
            adj[v].remove(&u);
            adj[u].insert(w);
            adj[w].insert(u);
        }
    }
    let edges = adj
        .iter()
        .enumerate()
        .flat_map(|(u, set)| set.iter().filter(move |&&v| v > u).map(move |&v| (u, v)))
        .collect();
    Topology { n, edges }
}

/// Connected Watts-Strogatz graph; disconnected draws are redrawn from fresh
/// sub-seeds.
pub fn watts_strogatz(n: usize, k: usize, p_rewire: f64, seed: u64) -> Result<Topology> {
    check_topology(n, k, p_rewire)?;
    for attempt in 0..MAX_TOPOLOGY_ATTEMPTS {
        let t = rewired_ring(n, k, p_rewire, derive_seed(seed, stream::TOPOLOGY, attempt));
        if t.is_connected() {
            return Ok(t);
        }
    }
    Err(Error::Config(format!(
        "no connected Watts-Strogatz graph after {MAX_TOPOLOGY_ATTEMPTS} attempts"
    )))
}

pub fn supply_count(n: usize) -> usize {
    (SUPPLY_PERCENT * n).div_ceil(100)
}

/// Draws supply nodes without replacement with weight `exp(beta * degree)`;
/// the rest become demand or transfer nodes independently.
pub fn assign_node_classes(topology: &Topology, beta: f64, seed: u64) -> Vec<NodeClass> {
    let mut rng = rng_from(seed);
    let deg = topology.degrees();
    let n = topology.n;
    let max_deg = deg.iter().copied().max().unwrap_or(0) as f64;
    let mut weights: Vec<f64> = deg
        .iter()
        .map(|&d| (beta * (d as f64 - max_deg)).exp())
        .collect();
    let mut classes = vec![NodeClass::DEMAND; n];
    let mut is_supply = vec![false; n];
    for _ in 0..supply_count(n).min(n) {
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 && total.is_finite() {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = None;
            for (i, &w) in weights.iter().enumerate() {
                if w <= 0.0 {
                    continue;
                }
                chosen = Some(i);
                if r < w {
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            None
        };
        // All remaining weights underflowed: fall back to the highest degree.
        let i = pick.unwrap_or_else(|| {
            (0..n)
                .filter(|&i| !is_supply[i])
                .max_by_key(|&i| (deg[i], std::cmp::Reverse(i)))
                .expect("fewer supply nodes than nodes")
        });
        is_supply[i] = true;
        weights[i] = 0.0;
    }
    for i in 0..n {
        classes[i] = if is_supply[i] {
            NodeClass::SUPPLY
        } else if rng.random::<f64>() < DEMAND_SHARE {
            NodeClass::DEMAND
        } else {
            NodeClass::TRANSFER
        };
    }
    classes
}

fn uniform_in<R: Rng>(rng: &mut R, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

pub fn sample_features(
    topology: &Topology,
    classes: &[NodeClass],
    config: &SynthConfig,
    seed: u64,
) -> DesignGraph {
    let mut rng = rng_from(seed);
    let mut g = DesignGraph::new(SYNTHETIC_PROFILE);
    for &class in classes {
        let magnitude = match config.magnitude_range(class) {
            Some(r) => uniform_in(&mut rng, r),
            None => 0.0,
        };
        let pos = [rng.random::<f64>(), rng.random::<f64>()];
        g.add_node(class, magnitude, pos);
    }
    for &(u, v) in &topology.edges {
        let bin = rng.random_range(0..config.capacity_bins.len());
        let cost = uniform_in(&mut rng, config.cost_range);
        g.add_edge(u, v, bin as u8, config.capacity_bins[bin], cost);
    }
    g
}

/// One unlabeled design from a per-design seed.
pub fn generate_design(config: &SynthConfig, seed: u64) -> Result<DesignGraph> {
    let topo = watts_strogatz(config.n, config.k, config.p_rewire, seed)?;
    let classes = assign_node_classes(&topo, config.beta, derive_seed(seed, stream::CLASSES, 0));
    Ok(sample_features(
        &topo,
        &classes,
        config,
        derive_seed(seed, stream::FEATURES, 0),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub graphs: Vec<DesignGraph>,
    pub labels: Vec<f64>,
    pub config: SynthConfig,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, out: W) -> Result<()> {
        graph::write_jsonl(out, &self.graphs, Some(&self.labels))
    }

    /// Reads a labeled JSON-lines dataset; every line must carry a label.
    pub fn read_jsonl<R: BufRead>(input: R, config: SynthConfig) -> Result<Self> {
        let rows = graph::read_jsonl(input)?;
        let mut graphs = Vec::with_capacity(rows.len());
        let mut labels = Vec::with_capacity(rows.len());
        for (i, (g, label)) in rows.into_iter().enumerate() {
            let label = label.ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "missing `label`".into(),
            })?;
            graphs.push(g);
            labels.push(label);
        }
        Ok(Dataset {
            graphs,
            labels,
            config,
        })
    }
}

fn labeled_design(config: &SynthConfig, index: u64) -> Result<(DesignGraph, f64)> {
    let base = derive_seed(config.seed, stream::DATASET, index);
    let mut last_err = None;
    for attempt in 0..MAX_LABEL_ATTEMPTS {
        let g = generate_design(config, derive_seed(base, stream::DATASET, attempt))?;
        match flow::synthetic_label(&g) {
            Ok(q) => return Ok((g, q)),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.expect("at least one attempt"))
}

/// `count` designs labeled with their max-flow value; design `i` depends only
/// on `(config, i)`.
pub fn build_dataset(count: usize, config: &SynthConfig) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    config.validate()?;
    let rows: Vec<(DesignGraph, f64)> = (0..count as u64)
        .into_par_iter()
        .map(|i| labeled_design(config, i))
        .collect::<Result<_>>()?;
    let (graphs, labels) = rows.into_iter().unzip();
    Ok(Dataset {
        graphs,
        labels,
        config: config.clone(),
    })
}

/// Uniform position in the unit square, used for freshly generated nodes.
pub fn random_positions(n: usize, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = derived_rng(seed, stream::POSITIONS, 0);
    (0..n).map(|_| [rng.random(), rng.random()]).collect()
}
