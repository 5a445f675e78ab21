#![allow(dead_code)]

use rand::Rng;
use resgen_core::graph::{DesignGraph, NodeClass, SYNTHETIC_PROFILE};
use resgen_core::seed::rng_from;

/// Small design with integer magnitudes, capacities and costs. Node 0
/// supplies and node 1 demands; the rest are drawn from all classes.
pub fn integer_instance(seed: u64, max_nodes: usize, max_edges: usize) -> DesignGraph {
    let mut rng = rng_from(seed);
    let n = rng.random_range(2..=max_nodes);
    let mut g = DesignGraph::new(SYNTHETIC_PROFILE);
    for v in 0..n {
        let class = match v {
            0 => NodeClass::SUPPLY,
            1 => NodeClass::DEMAND,
            _ => NodeClass(rng.random_range(0..3)),
        };
        let mag = if class == NodeClass::TRANSFER {
            0.0
        } else {
            rng.random_range(1..=5) as f64
        };
        g.add_node(class, mag, [rng.random(), rng.random()]);
    }
    let mut pairs: Vec<(usize, usize)> = (0..n).flat_map(|u| (u + 1..n).map(move |v| (u, v))).collect();
    let m = rng.random_range(0..=max_edges.min(pairs.len()));
    for _ in 0..m {
        let (u, v) = pairs.swap_remove(rng.random_range(0..pairs.len()));
        let cap = rng.random_range(1..=3);
        g.add_edge(u, v, (cap - 1) as u8, cap as f64, rng.random_range(0..=3) as f64);
    }
    g
}

/// Maximum deliverable flow and the least transport cost among maximum
/// flows, by enumerating every signed integer flow on every edge.
pub fn brute_force_flow(g: &DesignGraph) -> (i64, i64) {
    let caps: Vec<i64> = g.edges.iter().map(|e| e.capacity as i64).collect();
    let mut x: Vec<i64> = caps.iter().map(|&c| -c).collect();
    let mut best = (0i64, 0i64);
    loop {
        let mut net = vec![0i64; g.node_count()];
        for (e, &f) in g.edges.iter().zip(&x) {
            net[e.u] += f;
            net[e.v] -= f;
        }
        let feasible = g.nodes.iter().all(|v| {
            let mag = v.magnitude as i64;
            match v.class {
                NodeClass::SUPPLY => (0..=mag).contains(&net[v.id]),
                NodeClass::DEMAND => (0..=mag).contains(&-net[v.id]),
                _ => net[v.id] == 0,
            }
        });
        if feasible {
            let flow: i64 = g
                .nodes
                .iter()
                .filter(|v| v.class == NodeClass::SUPPLY)
                .map(|v| net[v.id])
                .sum();
            let cost: i64 = g
                .edges
                .iter()
                .zip(&x)
                .map(|(e, &f)| f.abs() * e.unit_cost as i64)
                .sum();
            if flow > best.0 || (flow == best.0 && cost < best.1) {
                best = (flow, cost);
            }
        }
        // Odometer over [-c, c] per edge.
        let mut k = 0;
        loop {
            if k == x.len() {
                return best;
            }
            if x[k] < caps[k] {
                x[k] += 1;
                break;
            }
            x[k] = -caps[k];
            k += 1;
        }
    }
}

/// Supply hub at the centre with one demand leaf per magnitude.
pub fn star(demands: &[f64]) -> DesignGraph {
    let mut g = DesignGraph::new(SYNTHETIC_PROFILE);
    let total: f64 = demands.iter().sum();
    g.add_node(NodeClass::SUPPLY, total, [0.5, 0.5]);
    for (i, &d) in demands.iter().enumerate() {
        let angle = i as f64 / demands.len() as f64 * std::f64::consts::TAU;
        let v = g.add_node(NodeClass::DEMAND, d, [0.5 + 0.4 * angle.cos(), 0.5 + 0.4 * angle.sin()]);
        g.add_edge(0, v, 2, 12.0, 1.0);
    }
    g
}

/// Supply, one edge, demand.
pub fn pair(supply: f64, demand: f64) -> DesignGraph {
    let mut g = DesignGraph::new(SYNTHETIC_PROFILE);
    g.add_node(NodeClass::SUPPLY, supply, [0.1, 0.1]);
    g.add_node(NodeClass::DEMAND, demand, [0.2, 0.1]);
    g.add_edge(0, 1, 2, 12.0, 1.0);
    g
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_std(a);
    let (mb, sb) = mean_std(b);
    let cov = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (a.len() as f64 - 1.0);
    cov / (sa * sb)
}
