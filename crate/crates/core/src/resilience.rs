//! Regional disruption simulation, expected demand not supplied, and the
//! resilience ratio of recovery curves.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{delivered_demand_with_outage, Outage};
use crate::graph::DesignGraph;
use crate::seed::{derive_seed, derived_rng, rng_from, stream};

/// `(row, col)` on the grid.
pub type Cell = (usize, usize);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellMap {
    pub grid: usize,
    pub nodes: Vec<Cell>,
    pub edges: Vec<Cell>,
}

fn cell_of(pos: [f64; 2], grid: usize) -> Cell {
    let clamp = |v: f64| ((v * grid as f64).floor().max(0.0) as usize).min(grid - 1);
    (clamp(pos[1]), clamp(pos[0]))
}

/// Node cell `(floor(y G), floor(x G))`, clamped; edges use their midpoint.
pub fn map_to_grid(graph: &DesignGraph, grid: usize) -> Result<CellMap> {
    if grid == 0 {
        return Err(Error::Config("grid needs at least one cell per side".into()));
    }
    let nodes = graph.nodes.iter().map(|n| cell_of(n.pos, grid)).collect();
    let edges = graph
        .edges
        .iter()
        .map(|e| {
            let (a, b) = (graph.nodes[e.u].pos, graph.nodes[e.v].pos);
            cell_of([(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0], grid)
        })
        .collect();
    Ok(CellMap { grid, nodes, edges })
}

/// Regional event law: epicenter drawn over the grid, components fail
/// independently with `p0 * gamma^d` at Chebyshev cell distance `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisruptionModel {
    pub grid: usize,
    pub p0: f64,
    pub gamma: f64,
    #[serde(default = "yes")]
    pub affect_nodes: bool,
    #[serde(default = "yes")]
    pub affect_edges: bool,
    /// Relative epicenter weight per cell in row-major order; uniform when absent.
    #[serde(default)]
    pub cell_weights: Option<Vec<f64>>,
}

fn yes() -> bool {
    true
}

impl Default for DisruptionModel {
    fn default() -> Self {
        DisruptionModel {
            grid: 8,
            p0: 0.9,
            gamma: 0.5,
            affect_nodes: true,
            affect_edges: true,
            cell_weights: None,
        }
    }
}

impl DisruptionModel {
    pub fn validate(&self) -> Result<()> {
        if self.grid == 0 {
            return Err(Error::Config("grid needs at least one cell per side".into()));
        }
        if !(self.p0 > 0.0 && self.p0 <= 1.0) || !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(Error::Config("need p0 in (0, 1] and gamma in [0, 1)".into()));
        }
        if let Some(w) = &self.cell_weights {
            if w.len() != self.grid * self.grid
                || w.iter().any(|&x| !(x >= 0.0) || !x.is_finite())
                || !w.iter().any(|&x| x > 0.0)
            {
                return Err(Error::Config(
                    "cell weights need one nonnegative value per cell and a positive total".into(),
                ));
            }
        }
        Ok(())
    }

    /// Occurrence probability of each epicenter cell, row-major.
    pub fn epicenter_probs(&self) -> Vec<f64> {
        let cells = self.grid * self.grid;
        match &self.cell_weights {
            Some(w) => {
                let total: f64 = w.iter().sum();
                w.iter().map(|x| x / total).collect()
            }
            None => vec![1.0 / cells as f64; cells],
        }
    }

    pub fn event_at(&self, epicenter: Cell) -> DisruptionEvent {
        let probs = self.epicenter_probs();
        DisruptionEvent {
            epicenter,
            probability: probs[epicenter.0 * self.grid + epicenter.1],
            p0: self.p0,
            gamma: self.gamma,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DisruptionEvent {
    pub epicenter: Cell,
    pub probability: f64,
    pub p0: f64,
    pub gamma: f64,
}

fn chebyshev(a: Cell, b: Cell) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

/// Failure probability per node and per edge.
pub fn failure_probs(event: &DisruptionEvent, cells: &CellMap) -> (Vec<f64>, Vec<f64>) {
    let p = |c: Cell| (event.p0 * event.gamma.powi(chebyshev(c, event.epicenter) as i32)).clamp(0.0, 1.0);
    (
        cells.nodes.iter().map(|&c| p(c)).collect(),
        cells.edges.iter().map(|&c| p(c)).collect(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventOutcome {
    pub failed_nodes: Vec<usize>,
    pub failed_edges: Vec<usize>,
    pub lost_demand: f64,
}

impl EventOutcome {
    pub fn outage(&self) -> Outage {
        Outage {
            failed_nodes: self.failed_nodes.clone(),
            failed_edges: self.failed_edges.clone(),
        }
    }
}

/// Delivered demand with nothing failed; zero for designs without a supply
/// or demand node.
pub fn nominal_demand(graph: &DesignGraph) -> Result<f64> {
    delivered_demand_with_outage(graph, &Outage::default())
}

/// Lost demand for a fixed set of failures.
pub fn lost_demand(graph: &DesignGraph, nominal: f64, outage: &Outage) -> Result<f64> {
    let after = delivered_demand_with_outage(graph, outage)?;
    Ok((nominal - after).max(0.0))
}

fn draw_failures<R: Rng>(
    rng: &mut R,
    node_p: &[f64],
    edge_p: &[f64],
    model_nodes: bool,
    model_edges: bool,
) -> (Vec<usize>, Vec<usize>) {
    // Every component consumes one draw so the stream layout is fixed.
    let mut pick = |p: &[f64], on: bool| -> Vec<usize> {
        p.iter()
            .enumerate()
            .filter_map(|(i, &p)| {
                let u: f64 = rng.random();
                (on && u < p).then_some(i)
            })
            .collect()
    };
    let nodes = pick(node_p, model_nodes);
    let edges = pick(edge_p, model_edges);
    (nodes, edges)
}

/// Samples component failures for `event` and re-solves the flow.
pub fn apply_event(
    graph: &DesignGraph,
    cells: &CellMap,
    event: &DisruptionEvent,
    model: &DisruptionModel,
    nominal: f64,
    seed: u64,
) -> Result<EventOutcome> {
    let (np, ep) = failure_probs(event, cells);
    let mut rng = rng_from(seed);
    let (failed_nodes, failed_edges) = draw_failures(&mut rng, &np, &ep, model.affect_nodes, model.affect_edges);
    let outage = Outage {
        failed_nodes,
        failed_edges,
    };
    let lost = if outage.is_empty() {
        0.0
    } else {
        lost_demand(graph, nominal, &outage)?
    };
    Ok(EventOutcome {
        failed_nodes: outage.failed_nodes,
        failed_edges: outage.failed_edges,
        lost_demand: lost,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample: usize,
    pub epicenter_row: usize,
    pub epicenter_col: usize,
    pub failed_nodes: Vec<usize>,
    pub failed_edges: Vec<usize>,
    pub lost_demand: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdnsEstimate {
    pub edns: f64,
    pub stderr: f64,
    pub samples: Vec<SampleRecord>,
}

fn draw_epicenter<R: Rng>(rng: &mut R, probs: &[f64], grid: usize) -> Cell {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (k, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        last = k;
        acc += p;
        if u < acc {
            break;
        }
    }
    (last / grid, last % grid)
}

/// Monte Carlo estimate of expected lost demand with its standard error.
/// Samples run in parallel; each has its own derived seed and the mean is
/// reduced in sample order.
pub fn edns(graph: &DesignGraph, model: &DisruptionModel, samples: usize, seed: u64) -> Result<EdnsEstimate> {
    model.validate()?;
    if samples == 0 {
        return Err(Error::Config("EDNS needs at least one sample".into()));
    }
    let cells = map_to_grid(graph, model.grid)?;
    let probs = model.epicenter_probs();
    let nominal = nominal_demand(graph)?;
    let records = (0..samples)
        .into_par_iter()
        .map(|k| {
            let sample_seed = derive_seed(seed, stream::EVENT, k as u64);
            let epicenter = draw_epicenter(&mut derived_rng(sample_seed, stream::EVENT, 0), &probs, model.grid);
            let event = model.event_at(epicenter);
            let failure_seed = derive_seed(sample_seed, stream::EVENT, 1);
            let outcome = apply_event(graph, &cells, &event, model, nominal, failure_seed)?;
            Ok(SampleRecord {
                sample: k,
                epicenter_row: epicenter.0,
                epicenter_col: epicenter.1,
                failed_nodes: outcome.failed_nodes,
                failed_edges: outcome.failed_edges,
                lost_demand: outcome.lost_demand,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = samples as f64;
    let mean = records.iter().map(|r| r.lost_demand).sum::<f64>() / n;
    let stderr = if samples > 1 {
        let var = records.iter().map(|r| (r.lost_demand - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(EdnsEstimate {
        edns: mean,
        stderr,
        samples: records,
    })
}

/// One entry of an explicit finite event list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactEvent {
    pub probability: f64,
    pub outage: Outage,
}

/// `sum_e P_e C_e` over an explicit event list.
pub fn edns_exact(graph: &DesignGraph, events: &[ExactEvent]) -> Result<f64> {
    let nominal = nominal_demand(graph)?;
    let mut total = 0.0;
    for e in events {
        if !(0.0..=1.0).contains(&e.probability) {
            return Err(Error::Domain(format!("event probability {} outside [0, 1]", e.probability)));
        }
        total += e.probability * lost_demand(graph, nominal, &e.outage)?;
    }
    Ok(total)
}

/// Exact expectation of the Monte Carlo estimator by enumerating every
/// epicenter and every failure pattern. Limited to 20 affected components.
pub fn edns_enumerate(graph: &DesignGraph, model: &DisruptionModel) -> Result<f64> {
    model.validate()?;
    let cells = map_to_grid(graph, model.grid)?;
    let mut components: Vec<(bool, usize)> = Vec::new();
    if model.affect_nodes {
        components.extend((0..graph.node_count()).map(|i| (true, i)));
    }
    if model.affect_edges {
        components.extend((0..graph.edge_count()).map(|i| (false, i)));
    }
    if components.len() > 20 {
        return Err(Error::Config(format!(
            "{} components are too many to enumerate",
            components.len()
        )));
    }
    let nominal = nominal_demand(graph)?;
    let mut total = 0.0;
    for (k, &pc) in model.epicenter_probs().iter().enumerate() {
        if pc == 0.0 {
            continue;
        }
        let event = model.event_at((k / model.grid, k % model.grid));
        let (np, ep) = failure_probs(&event, &cells);
        for pattern in 0u32..(1 << components.len()) {
            let mut prob = 1.0;
            let mut outage = Outage::default();
            for (b, &(is_node, i)) in components.iter().enumerate() {
                let p = if is_node { np[i] } else { ep[i] };
                if pattern & (1 << b) != 0 {
                    prob *= p;
                    if is_node {
                        outage.failed_nodes.push(i);
                    } else {
                        outage.failed_edges.push(i);
                    }
                } else {
                    prob *= 1.0 - p;
                }
            }
            if prob > 0.0 && !outage.is_empty() {
                total += pc * prob * lost_demand(graph, nominal, &outage)?;
            }
        }
    }
    Ok(total)
}

/// Writes per-sample rows and a trailing summary comment.
pub fn write_simulation_csv<W: Write>(mut out: W, estimate: &EdnsEstimate) -> Result<()> {
    {
        let mut w = csv::Writer::from_writer(&mut out);
        w.write_record(["sample", "epicenter_row", "epicenter_col", "failed_nodes", "failed_edges", "C_e"])?;
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        for r in &estimate.samples {
            w.write_record([
                r.sample.to_string(),
                r.epicenter_row.to_string(),
                r.epicenter_col.to_string(),
                join(&r.failed_nodes),
                join(&r.failed_edges),
                r.lost_demand.to_string(),
            ])?;
        }
        w.flush()?;
    }
    writeln!(
        out,
        "# edns={},stderr={},samples={}",
        estimate.edns,
        estimate.stderr,
        estimate.samples.len()
    )?;
    Ok(())
}

/// Performance sampled on a uniform time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerformanceCurve {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

impl PerformanceCurve {
    pub fn new(times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if times.len() != values.len() || times.len() < 2 {
            return Err(Error::Config("a curve needs at least two matching samples".into()));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Config("curve times must increase".into()));
        }
        if values.iter().any(|&v| !(v >= 0.0)) {
            return Err(Error::Domain("curve values must be nonnegative".into()));
        }
        Ok(PerformanceCurve { times, values })
    }

    /// Constant curve on the same time grid.
    pub fn constant_like(&self, value: f64) -> PerformanceCurve {
        PerformanceCurve {
            times: self.times.clone(),
            values: vec![value; self.times.len()],
        }
    }

    pub fn trapezoid(&self) -> f64 {
        self.times
            .windows(2)
            .zip(self.values.windows(2))
            .map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1]))
            .sum()
    }
}

/// Area under the resilience curve over the area under the nominal curve.
pub fn resilience_ratio(resilience: &PerformanceCurve, nominal: &PerformanceCurve) -> Result<f64> {
    if resilience.times != nominal.times {
        return Err(Error::Config("curves must share a time grid".into()));
    }
    let denom = nominal.trapezoid();
    if denom == 0.0 {
        return Err(Error::UndefinedMetric("nominal curve has zero area".into()));
    }
    Ok(resilience.trapezoid() / denom)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecoveryPolicy {
    Random,
    /// Restore the component whose repair recovers the most demand next.
    LargestDemandFirst,
}

/// Repairs one failed component per time step. The first sample is the
/// post-event performance and the last equals the nominal value.
pub fn recovery_curve(
    graph: &DesignGraph,
    outcome: &EventOutcome,
    policy: RecoveryPolicy,
    seed: u64,
) -> Result<PerformanceCurve> {
    let nominal = nominal_demand(graph)?;
    // (is_node, id)
    let mut pending: Vec<(bool, usize)> = outcome
        .failed_nodes
        .iter()
        .map(|&i| (true, i))
        .chain(outcome.failed_edges.iter().map(|&i| (false, i)))
        .collect();
    let outage_of = |pending: &[(bool, usize)]| Outage {
        failed_nodes: pending.iter().filter(|c| c.0).map(|c| c.1).collect(),
        failed_edges: pending.iter().filter(|c| !c.0).map(|c| c.1).collect(),
    };
    if policy == RecoveryPolicy::Random {
        pending.shuffle(&mut derived_rng(seed, stream::RECOVERY, 0));
    }
    let mut values = vec![delivered_demand_with_outage(graph, &outage_of(&pending))?];
    while !pending.is_empty() {
        let pick = match policy {
            RecoveryPolicy::Random => 0,
            RecoveryPolicy::LargestDemandFirst => {
                let mut best = (0, f64::NEG_INFINITY);
                for k in 0..pending.len() {
                    let mut rest = pending.clone();
                    rest.remove(k);
                    let v = delivered_demand_with_outage(graph, &outage_of(&rest))?;
                    if v > best.1 {
                        best = (k, v);
                    }
                }
                best.0
            }
        };
        pending.remove(pick);
        values.push(delivered_demand_with_outage(graph, &outage_of(&pending))?);
    }
    if values.len() == 1 {
        values.push(nominal);
    }
    let times = (0..values.len()).map(|t| t as f64).collect();
    PerformanceCurve::new(times, values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{NodeClass, SYNTHETIC_PROFILE};

    fn pair() -> DesignGraph {
        let mut g = DesignGraph::new(SYNTHETIC_PROFILE);
        g.add_node(NodeClass::SUPPLY, 5.0, [0.1, 0.1]);
        g.add_node(NodeClass::DEMAND, 2.0, [0.2, 0.1]);
        g.add_edge(0, 1, 0, 10.0, 1.0);
        g
    }

    #[test]
    fn grid_mapping() {
        let mut g = DesignGraph::new(SYNTHETIC_PROFILE);
        g.add_node(NodeClass::TRANSFER, 0.0, [0.5, 0.5]);
        g.add_node(NodeClass::TRANSFER, 0.0, [1.0, 0.0]);
        g.add_node(NodeClass::TRANSFER, 0.0, [0.1, 0.9]);
        g.add_edge(0, 1, 0, 1.0, 1.0);
        let m = map_to_grid(&g, 2).unwrap();
        assert_eq!(m.nodes, vec![(1, 1), (0, 1), (1, 0)]);
        assert_eq!(m.edges, vec![(0, 1)]);
        let one = map_to_grid(&g, 1).unwrap();
        assert!(one.nodes.iter().chain(&one.edges).all(|&c| c == (0, 0)));
    }

    #[test]
    fn decay_rule() {
        let cells = CellMap {
            grid: 4,
            nodes: vec![(2, 2), (1, 3), (0, 0)],
            edges: vec![],
        };
        let ev = DisruptionEvent {
            epicenter: (2, 2),
            probability: 1.0,
            p0: 0.9,
            gamma: 0.5,
        };
        let (p, _) = failure_probs(&ev, &cells);
        assert_eq!(p, vec![0.9, 0.45, 0.9 * 0.25]);
        let sharp = DisruptionEvent { gamma: 0.0, ..ev };
        assert_eq!(failure_probs(&sharp, &cells).0, vec![0.9, 0.0, 0.0]);
    }

    #[test]
    fn supply_loss_and_bridge_loss() {
        let mut g = pair();
        g.add_node(NodeClass::DEMAND, 3.0, [0.3, 0.1]);
        g.add_edge(1, 2, 0, 10.0, 1.0);
        let nominal = nominal_demand(&g).unwrap();
        assert_eq!(nominal, 5.0);
        let all_supply = Outage {
            failed_nodes: vec![0],
            failed_edges: vec![],
        };
        assert_eq!(lost_demand(&g, nominal, &all_supply).unwrap(), nominal);
        let bridge = Outage {
            failed_nodes: vec![],
            failed_edges: vec![1],
        };
        assert_eq!(lost_demand(&g, nominal, &bridge).unwrap(), 3.0);
    }

    #[test]
    fn exact_sum() {
        // Edge 0 strands 2 units; node 1 and edge 0 together strand the same.
        let g = pair();
        let events = [
            ExactEvent {
                probability: 0.25,
                outage: Outage {
                    failed_nodes: vec![],
                    failed_edges: vec![0],
                },
            },
            ExactEvent {
                probability: 0.5,
                outage: Outage::default(),
            },
        ];
        assert_eq!(edns_exact(&g, &events).unwrap(), 0.5);
    }

    #[test]
    fn certain_event_gives_its_loss() {
        let g = pair();
        let model = DisruptionModel {
            grid: 1,
            p0: 1.0,
            gamma: 0.5,
            affect_nodes: false,
            ..DisruptionModel::default()
        };
        let est = edns(&g, &model, 10, 3).unwrap();
        assert_eq!(est.edns, 2.0);
        assert_eq!(est.stderr, 0.0);
        assert_eq!(edns_enumerate(&g, &model).unwrap(), 2.0);
    }

    #[test]
    fn estimate_is_deterministic() {
        let g = pair();
        let m = DisruptionModel::default();
        assert_eq!(edns(&g, &m, 50, 9).unwrap(), edns(&g, &m, 50, 9).unwrap());
    }

    #[test]
    fn ratio_cases() {
        let n = PerformanceCurve::new(vec![0.0, 1.0, 2.0], vec![4.0, 4.0, 4.0]).unwrap();
        let r = PerformanceCurve::new(vec![0.0, 1.0, 2.0], vec![0.0, 2.0, 4.0]).unwrap();
        // (0 + 2)/2 + (2 + 4)/2 = 4 against 8.
        assert_eq!(resilience_ratio(&r, &n).unwrap(), 0.5);
        let zero = n.constant_like(0.0);
        assert!(matches!(resilience_ratio(&r, &zero), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn recovery_ends_at_nominal() {
        let g = pair();
        let empty = EventOutcome {
            failed_nodes: vec![],
            failed_edges: vec![],
            lost_demand: 0.0,
        };
        let c = recovery_curve(&g, &empty, RecoveryPolicy::Random, 0).unwrap();
        assert_eq!(c.values, vec![2.0, 2.0]);
        let hit = EventOutcome {
            failed_nodes: vec![1],
            failed_edges: vec![0],
            lost_demand: 2.0,
        };
        let c = recovery_curve(&g, &hit, RecoveryPolicy::LargestDemandFirst, 0).unwrap();
        assert_eq!(c.values.len(), 3);
        assert_eq!(*c.values.last().unwrap(), 2.0);
    }
}
