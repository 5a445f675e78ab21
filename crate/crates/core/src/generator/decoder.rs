use std::collections::VecDeque;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::LatentCode;
use super::GeneratorModel;
use crate::diff::{masked_softmax, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{DesignGraph, NodeClass};
use crate::seed::{derive_seed, derived_rng, stream};
use crate::synth::random_positions;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Sample,
}

/// Hard constraints on the decoded design.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    /// Existing system to expand. Its nodes occupy the first ids, keep their
    /// classes, magnitudes and positions, and its edges are fixed; no new edge
    /// may join two of its nodes.
    pub base: Option<DesignGraph>,
    /// Node pairs that may never be connected.
    #[serde(default)]
    pub forbidden_pairs: Vec<(usize, usize)>,
    /// `(u, v, edge type)` triples that may never be used.
    #[serde(default)]
    pub forbidden_types: Vec<(usize, usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub mode: DecodeMode,
    /// Candidate positions; drawn uniformly from the seed when absent.
    pub positions: Option<Vec<[f64; 2]>>,
    pub constraints: Constraints,
    pub seed: u64,
    /// Overrides the model's decision guard.
    pub max_steps: Option<usize>,
}

impl DecodeOptions {
    pub fn new(mode: DecodeMode, seed: u64) -> Self {
        DecodeOptions {
            mode,
            positions: None,
            constraints: Constraints::default(),
            seed,
            max_steps: None,
        }
    }
}

/// One connect decision and, when an edge was added, its type decision.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeStep {
    pub focus: usize,
    /// Probabilities over candidates `0..N` followed by the stop action.
    pub connect_probs: Vec<f64>,
    pub connect_mask: Vec<bool>,
    pub chosen: usize,
    pub type_probs: Option<Vec<f64>>,
    pub type_mask: Option<Vec<bool>>,
    pub chosen_type: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub steps: Vec<DecodeStep>,
}

impl DecodeTrace {
    /// Every masked entry has probability exactly zero, every chosen action
    /// is permitted and every distribution sums to one within `1e-12`.
    pub fn is_sound(&self) -> bool {
        let dist_ok = |p: &[f64], m: &[bool], chosen: usize| {
            p.len() == m.len()
                && p.iter().zip(m).all(|(&p, &m)| m || p == 0.0)
                && m.get(chosen).copied().unwrap_or(false)
                && (p.iter().sum::<f64>() - 1.0).abs() <= 1e-12
        };
        self.steps.iter().all(|s| {
            dist_ok(&s.connect_probs, &s.connect_mask, s.chosen)
                && match (&s.type_probs, &s.type_mask, s.chosen_type) {
                    (Some(p), Some(m), Some(c)) => dist_ok(p, m, c),
                    (None, None, None) => s.chosen + 1 == s.connect_probs.len(),
                    _ => false,
                }
        })
    }

    /// Sum of the log-probabilities of the chosen actions.
    pub fn log_likelihood(&self) -> f64 {
        self.steps
            .iter()
            .map(|s| {
                s.connect_probs[s.chosen].ln()
                    + match (&s.type_probs, s.chosen_type) {
                        (Some(p), Some(c)) => p[c].ln(),
                        _ => 0.0,
                    }
            })
            .sum()
    }
}

/// Decoder state between decisions.
#[derive(Clone, Debug, PartialEq)]
pub struct GenState {
    /// Every candidate node plus the edges chosen so far.
    pub graph: DesignGraph,
    /// Edge type per edge of `graph`.
    pub edge_types: Vec<usize>,
    pub classes: Vec<usize>,
    /// Node states, `N x (d + c)`.
    pub h: Tensor,
    pub h_init: Tensor,
    pub h_t: Tensor,
    pub queue: VecDeque<usize>,
    pub visited: Vec<bool>,
    pub locked: Vec<bool>,
    pub connect_mask: Vec<Vec<bool>>,
    pub type_mask: Vec<Vec<Vec<bool>>>,
    pub distances: Tensor,
    pub step: usize,
}

impl GenState {
    pub fn nodes(&self) -> usize {
        self.classes.len()
    }

    fn adjacency(&self) -> Tensor {
        let n = self.nodes();
        let mut a = Tensor::zeros(&[n, n]);
        for e in &self.graph.edges {
            a.set(e.u, e.v, 1.0);
            a.set(e.v, e.u, 1.0);
        }
        a
    }

    fn add_edge(&mut self, model: &GeneratorModel, i: usize, j: usize, edge_type: usize, rng: &mut ChaCha8Rng) {
        let cost = model.unit_cost(rng);
        self.graph.add_edge(i, j, edge_type as u8, model.capacity_of(edge_type), cost);
        self.edge_types.push(edge_type);
        self.connect_mask[i][j] = false;
        self.connect_mask[j][i] = false;
        if !self.visited[j] {
            self.visited[j] = true;
            self.queue.push_back(j);
        }
    }
}

/// Decomposed first layer of the edge scorer, bound on one tape.
struct EdgeWeights {
    hi: Var,
    hj: Var,
    dist: Var,
    h_t: Var,
    /// `H_init` block times its weights plus the bias; fixed during a decode.
    init_term: Var,
}

struct Net<'a> {
    model: &'a GeneratorModel,
    params: &'a ParamSet,
}

impl Net<'_> {
    fn classify(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.model.parts.classifier.forward(tape, self.params, z)
    }

    fn initial_states(&self, tape: &mut Tape, z: Var, classes: &[usize]) -> Result<(Var, Var)> {
        let c = self.model.class_count();
        let mut onehot = Tensor::zeros(&[classes.len(), c]);
        for (v, &k) in classes.iter().enumerate() {
            onehot.set(v, k, 1.0);
        }
        let oh = tape.constant(onehot);
        let h = tape.concat_cols(&[z, oh])?;
        let h_init = tape.mean_rows(h);
        Ok((h, h_init))
    }

    fn edge_weights(&self, tape: &mut Tape, h_init: Var) -> Result<EdgeWeights> {
        let w = self.model.state_width();
        let (wid, bid) = self.model.parts.edge.layer_params(0);
        let w1 = tape.param(self.params, wid);
        let b1 = tape.param(self.params, bid);
        let hi = tape.slice_rows(w1, 0, w)?;
        let hj = tape.slice_rows(w1, w, 2 * w)?;
        let dist = tape.slice_rows(w1, 2 * w, 2 * w + 1)?;
        let wi = tape.slice_rows(w1, 2 * w + 1, 3 * w + 1)?;
        let h_t = tape.slice_rows(w1, 3 * w + 1, 4 * w + 1)?;
        let init = tape.matmul(h_init, wi)?;
        let init_term = tape.add(init, b1)?;
        Ok(EdgeWeights {
            hi,
            hj,
            dist,
            h_t,
            init_term,
        })
    }

    /// Connect logits for every candidate followed by the stop logit.
    fn connect_logits(
        &self,
        tape: &mut Tape,
        ew: &EdgeWeights,
        h: Var,
        h_init: Var,
        focus: usize,
        dist_col: Tensor,
    ) -> Result<Var> {
        let hi = tape.row(h, focus)?;
        let h_t = tape.mean_rows(h);
        let a = tape.matmul(hi, ew.hi)?;
        let b = tape.matmul(h_t, ew.h_t)?;
        let ab = tape.add(a, b)?;
        let common = tape.add(ab, ew.init_term)?;
        let all = tape.matmul(h, ew.hj)?;
        let dc = tape.constant(dist_col);
        let dd = tape.matmul(dc, ew.dist)?;
        let pair = tape.add(all, dd)?;
        let pre = tape.add_row(pair, common)?;
        let logits = self.model.parts.edge.forward_from_first_preactivation(tape, self.params, pre)?;
        let stop_in = tape.concat_cols(&[hi, h_init, h_t])?;
        let stop = self.model.parts.stop.forward(tape, self.params, stop_in)?;
        tape.concat_rows(&[logits, stop])
    }

    fn edge_feature(&self, tape: &mut Tape, h: Var, h_init: Var, i: usize, j: usize, d: f64) -> Result<Var> {
        let hi = tape.row(h, i)?;
        let hj = tape.row(h, j)?;
        let dv = tape.constant(Tensor::scalar(d));
        let h_t = tape.mean_rows(h);
        tape.concat_cols(&[hi, hj, dv, h_init, h_t])
    }

    fn type_logits(&self, tape: &mut Tape, phi: Var) -> Result<Var> {
        let scores = self
            .model
            .parts
            .types
            .iter()
            .map(|mlp| mlp.forward(tape, self.params, phi))
            .collect::<Result<Vec<_>>>()?;
        tape.concat_cols(&scores)
    }

    fn update(&self, tape: &mut Tape, h: Var, adjacency: Tensor) -> Result<Var> {
        let w = tape.param(self.params, self.model.parts.upd_msg);
        let hw = tape.matmul(h, w)?;
        let a = tape.constant(adjacency);
        let msg = tape.matmul(a, hw)?;
        self.model.parts.upd_gru.forward(tape, self.params, h, msg)
    }
}

fn distances(positions: &[[f64; 2]]) -> Tensor {
    let n = positions.len();
    let mut d = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let (dx, dy) = (positions[i][0] - positions[j][0], positions[i][1] - positions[j][1]);
            d.set(i, j, (dx * dx + dy * dy).sqrt());
        }
    }
    d
}

fn argmax_masked(probs: &[f64], mask: &[bool]) -> usize {
    let mut best = None;
    for (i, (&p, &m)) in probs.iter().zip(mask).enumerate() {
        if m && best.is_none_or(|b: usize| p > probs[b]) {
            best = Some(i);
        }
    }
    best.expect("at least one permitted entry")
}

fn sample_index<R: Rng>(rng: &mut R, probs: &[f64], mask: &[bool]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = None;
    for (i, (&p, &m)) in probs.iter().zip(mask).enumerate() {
        if !m || p == 0.0 {
            continue;
        }
        acc += p;
        last = Some(i);
        if u < acc {
            return i;
        }
    }
    last.unwrap_or_else(|| argmax_masked(probs, mask))
}

enum Policy<'g> {
    Greedy,
    Sample(ChaCha8Rng),
    /// Follow a known graph: breadth-first, ascending neighbor ids.
    Replay {
        neighbors: Vec<Vec<(usize, usize)>>,
        graph: &'g DesignGraph,
    },
}

impl Policy<'_> {
    fn node_class(&mut self, v: usize, probs: &[f64]) -> usize {
        let all = vec![true; probs.len()];
        match self {
            Policy::Greedy => argmax_masked(probs, &all),
            Policy::Sample(rng) => sample_index(rng, probs, &all),
            Policy::Replay { graph, .. } => graph.nodes[v].class.index(),
        }
    }

    /// Candidate index or `n` for stop.
    fn connect(&mut self, state: &GenState, focus: usize, probs: &[f64], mask: &[bool]) -> Result<usize> {
        match self {
            Policy::Greedy => Ok(argmax_masked(probs, mask)),
            Policy::Sample(rng) => Ok(sample_index(rng, probs, mask)),
            Policy::Replay { neighbors, .. } => {
                let n = state.nodes();
                let next = neighbors[focus]
                    .iter()
                    .map(|&(j, _)| j)
                    .find(|&j| !state.graph.has_edge(focus, j));
                match next {
                    Some(j) if mask[j] => Ok(j),
                    Some(j) => Err(Error::Domain(format!("edge ({focus}, {j}) is masked"))),
                    None => Ok(n),
                }
            }
        }
    }

    fn edge_type(&mut self, i: usize, j: usize, probs: &[f64], mask: &[bool]) -> Result<usize> {
        match self {
            Policy::Greedy => Ok(argmax_masked(probs, mask)),
            Policy::Sample(rng) => Ok(sample_index(rng, probs, mask)),
            Policy::Replay { neighbors, graph } => {
                let &(_, e) = neighbors[i].iter().find(|&&(k, _)| k == j).expect("replayed edge");
                let l = graph.edges[e].edge_type as usize;
                if l < mask.len() && mask[l] {
                    Ok(l)
                } else {
                    Err(Error::Domain(format!("edge type {l} of ({i}, {j}) is masked")))
                }
            }
        }
    }
}

fn onehot_classes_from_logits(policy: &mut Policy, logits: &Tensor, fixed: &[Option<usize>]) -> Result<Vec<usize>> {
    let c = logits.cols();
    (0..logits.rows())
        .map(|v| match fixed[v] {
            Some(k) => Ok(k),
            None => {
                let probs = masked_softmax(logits.row_slice(v), &vec![true; c])?;
                Ok(policy.node_class(v, &probs))
            }
        })
        .collect()
}

fn check_code(model: &GeneratorModel, code: &LatentCode) -> Result<()> {
    if code.z.cols() != model.latent_dim() || code.nodes() == 0 {
        return Err(Error::shape(
            "decode",
            format!("latent {:?}, expected N x {}", code.z.shape(), model.latent_dim()),
        ));
    }
    Ok(())
}

/// Builds the initial state: node types from the classifier (fixed for base
/// nodes), states `[z_v ; onehot]`, masks and the focus queue.
fn initial_state(
    model: &GeneratorModel,
    code: &LatentCode,
    positions: &[[f64; 2]],
    classes: Vec<usize>,
    h: Tensor,
    h_init: Tensor,
    constraints: &Constraints,
) -> Result<GenState> {
    let n = code.nodes();
    let l = model.edge_type_count();
    let mut graph = DesignGraph::new(model.profile.clone());
    for (v, &k) in classes.iter().enumerate() {
        graph.add_node(NodeClass(k as u8), 0.0, positions[v]);
    }
    let mut connect_mask = vec![vec![true; n]; n];
    for (i, row) in connect_mask.iter_mut().enumerate() {
        row[i] = false;
    }
    let mut type_mask = vec![vec![vec![true; l]; n]; n];
    let mut locked = vec![false; n];
    let mut visited = vec![false; n];
    let mut queue = VecDeque::new();
    let mut edge_types = Vec::new();
    if let Some(base) = &constraints.base {
        let b = base.node_count();
        for i in 0..b {
            locked[i] = true;
            visited[i] = true;
            queue.push_back(i);
            graph.nodes[i].magnitude = base.nodes[i].magnitude;
            for j in 0..b {
                connect_mask[i][j] = false;
            }
        }
        for e in &base.edges {
            graph.add_edge(e.u, e.v, e.edge_type, e.capacity, e.unit_cost);
            edge_types.push(e.edge_type as usize);
        }
    }
    if queue.is_empty() {
        visited[0] = true;
        queue.push_back(0);
    }
    for &(u, v) in &constraints.forbidden_pairs {
        if u < n && v < n {
            connect_mask[u][v] = false;
            connect_mask[v][u] = false;
        }
    }
    for &(u, v, t) in &constraints.forbidden_types {
        if u < n && v < n && t < l {
            type_mask[u][v][t] = false;
            type_mask[v][u][t] = false;
        }
    }
    let h_t = h_init.clone();
    Ok(GenState {
        graph,
        edge_types,
        classes,
        h,
        h_init,
        h_t,
        queue,
        visited,
        locked,
        connect_mask,
        type_mask,
        distances: distances(positions),
        step: 0,
    })
}

fn resolve_positions(code: &LatentCode, opts: &DecodeOptions) -> Result<Vec<[f64; 2]>> {
    let n = code.nodes();
    let mut positions = match &opts.positions {
        Some(p) if p.len() == n => p.clone(),
        Some(p) => {
            return Err(Error::shape(
                "decode",
                format!("{} positions for {n} candidate nodes", p.len()),
            ))
        }
        None => random_positions(n, derive_seed(opts.seed, stream::POSITIONS, 0)),
    };
    if let Some(base) = &opts.constraints.base {
        if base.node_count() > n {
            return Err(Error::Config(format!(
                "base graph has {} nodes but the code has {n}",
                base.node_count()
            )));
        }
        for (i, node) in base.nodes.iter().enumerate() {
            positions[i] = node.pos;
        }
    }
    Ok(positions)
}

/// Node types and initial states for `code`.
pub fn init_nodes(model: &GeneratorModel, code: &LatentCode, opts: &DecodeOptions) -> Result<GenState> {
    check_code(model, code)?;
    let positions = resolve_positions(code, opts)?;
    let net = Net {
        model,
        params: &model.params,
    };
    let mut tape = Tape::new();
    let z = tape.constant(code.z.clone());
    let logits = net.classify(&mut tape, z)?;
    let fixed = fixed_classes(code.nodes(), &opts.constraints);
    let mut policy = match opts.mode {
        DecodeMode::Greedy => Policy::Greedy,
        DecodeMode::Sample => Policy::Sample(derived_rng(opts.seed, stream::DECODE, 0)),
    };
    let classes = onehot_classes_from_logits(&mut policy, tape.value(logits), &fixed)?;
    let (h, h_init) = net.initial_states(&mut tape, z, &classes)?;
    let (hv, hi) = (tape.value(h).clone(), tape.value(h_init).clone());
    initial_state(model, code, &positions, classes, hv, hi, &opts.constraints)
}

fn fixed_classes(n: usize, constraints: &Constraints) -> Vec<Option<usize>> {
    let mut fixed = vec![None; n];
    if let Some(base) = &constraints.base {
        for (i, node) in base.nodes.iter().enumerate().take(n) {
            fixed[i] = Some(node.class.index());
        }
    }
    fixed
}

/// `[h_i, h_j, d_ij, H_init, H(t)]`.
pub fn edge_feature(state: &GenState, i: usize, j: usize) -> Result<Tensor> {
    let n = state.nodes();
    if i == j || i >= n || j >= n {
        return Err(Error::Domain(format!("no candidate edge ({i}, {j})")));
    }
    let mut out = Vec::with_capacity(4 * state.h.cols() + 1);
    out.extend_from_slice(state.h.row_slice(i));
    out.extend_from_slice(state.h.row_slice(j));
    out.push(state.distances.get(i, j));
    out.extend_from_slice(state.h_init.data());
    out.extend_from_slice(state.h_t.data());
    Ok(Tensor::row(out))
}

/// Decision distributions for a focus node.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeProbs {
    /// Over candidates `0..N`, then stop.
    pub connect: Vec<f64>,
    /// Edge-type distribution per candidate; empty for masked candidates.
    pub types: Vec<Vec<f64>>,
}

pub fn edge_probs(model: &GeneratorModel, state: &GenState, focus: usize) -> Result<EdgeProbs> {
    let n = state.nodes();
    if focus >= n {
        return Err(Error::Domain(format!("focus {focus} out of range")));
    }
    let net = Net {
        model,
        params: &model.params,
    };
    let mut tape = Tape::new();
    let h = tape.constant(state.h.clone());
    let h_init = tape.constant(state.h_init.clone());
    let ew = net.edge_weights(&mut tape, h_init)?;
    let dist_col = Tensor::col(state.distances.row_slice(focus).to_vec());
    let logits = net.connect_logits(&mut tape, &ew, h, h_init, focus, dist_col)?;
    let mut mask = state.connect_mask[focus].clone();
    mask.push(true);
    let connect = masked_softmax(tape.value(logits).data(), &mask)?;
    let mut types = vec![Vec::new(); n];
    for j in (0..n).filter(|&j| mask[j]) {
        let phi = net.edge_feature(&mut tape, h, h_init, focus, j, state.distances.get(focus, j))?;
        let tl = net.type_logits(&mut tape, phi)?;
        types[j] = masked_softmax(tape.value(tl).data(), &state.type_mask[focus][j])?;
    }
    Ok(EdgeProbs { connect, types })
}

/// Gated update of every node state from the current edges; refreshes `H(t)`.
pub fn node_update(model: &GeneratorModel, state: &mut GenState) -> Result<()> {
    let net = Net {
        model,
        params: &model.params,
    };
    let mut tape = Tape::new();
    let h = tape.constant(state.h.clone());
    let h2 = net.update(&mut tape, h, state.adjacency())?;
    let ht = tape.mean_rows(h2);
    state.h = tape.value(h2).clone();
    state.h_t = tape.value(ht).clone();
    state.step += 1;
    Ok(())
}

struct RunOutput {
    state: GenState,
    z: Var,
    trace: DecodeTrace,
    loss: Option<Var>,
    tape: Tape,
}

/// The shared decision loop. With `differentiable` the whole decode lives on
/// one tape and the negative log-likelihood is returned as a variable;
/// otherwise every step starts a fresh tape.
#[allow(clippy::too_many_arguments)]
fn run(
    model: &GeneratorModel,
    params: &ParamSet,
    z_value: &Tensor,
    positions: &[[f64; 2]],
    constraints: &Constraints,
    mut policy: Policy,
    max_steps: usize,
    differentiable: bool,
    cost_seed: u64,
) -> Result<RunOutput> {
    let net = Net { model, params };
    let n = z_value.rows();
    let mut tape = Tape::new();
    let z = if differentiable {
        // Gradients with respect to the latents flow through this leaf.
        tape.var(z_value.clone())
    } else {
        tape.constant(z_value.clone())
    };
    let mut terms: Vec<Var> = Vec::new();
    let logits = net.classify(&mut tape, z)?;
    let fixed = fixed_classes(n, constraints);
    let classes = onehot_classes_from_logits(&mut policy, tape.value(logits), &fixed)?;
    if differentiable {
        let c = model.class_count();
        for (v, &k) in classes.iter().enumerate() {
            if fixed[v].is_some() {
                continue;
            }
            let row = tape.row(logits, v)?;
            terms.push(tape.log_softmax_pick(row, &vec![true; c], k)?);
        }
    }
    let (mut h, mut h_init) = net.initial_states(&mut tape, z, &classes)?;
    let code_stub = LatentCode {
        z: z_value.clone(),
        mu: Tensor::zeros(&[0, 0]),
        sigma: Tensor::zeros(&[0, 0]),
        seed: 0,
    };
    let mut state = initial_state(
        model,
        &code_stub,
        positions,
        classes,
        tape.value(h).clone(),
        tape.value(h_init).clone(),
        constraints,
    )?;
    let mut ew = net.edge_weights(&mut tape, h_init)?;
    let mut cost_rng = derived_rng(cost_seed, stream::MAGNITUDE, 1);
    let mut trace = DecodeTrace::default();
    let mut decisions = 0usize;

    while let Some(&focus) = state.queue.front() {
        decisions += 1;
        if decisions > max_steps {
            return Err(Error::DecodeRunaway(max_steps));
        }
        let dist_col = Tensor::col(state.distances.row_slice(focus).to_vec());
        let logits = net.connect_logits(&mut tape, &ew, h, h_init, focus, dist_col)?;
        let mut mask = state.connect_mask[focus].clone();
        mask.push(true);
        let probs = masked_softmax(tape.value(logits).data(), &mask)?;
        let chosen = policy.connect(&state, focus, &probs, &mask)?;
        if differentiable {
            terms.push(tape.log_softmax_pick(logits, &mask, chosen)?);
        }
        let mut step = DecodeStep {
            focus,
            connect_probs: probs,
            connect_mask: mask,
            chosen,
            type_probs: None,
            type_mask: None,
            chosen_type: None,
        };
        if chosen == n {
            trace.steps.push(step);
            state.queue.pop_front();
            continue;
        }
        let j = chosen;
        let phi = net.edge_feature(&mut tape, h, h_init, focus, j, state.distances.get(focus, j))?;
        let tl = net.type_logits(&mut tape, phi)?;
        let tmask = state.type_mask[focus][j].clone();
        let tprobs = masked_softmax(tape.value(tl).data(), &tmask)?;
        let l = policy.edge_type(focus, j, &tprobs, &tmask)?;
        if differentiable {
            terms.push(tape.log_softmax_pick(tl, &tmask, l)?);
        }
        step.type_probs = Some(tprobs);
        step.type_mask = Some(tmask);
        step.chosen_type = Some(l);
        trace.steps.push(step);

        state.add_edge(model, focus, j, l, &mut cost_rng);
        h = net.update(&mut tape, h, state.adjacency())?;
        state.step += 1;
        if !differentiable {
            let (hv, iv) = (tape.value(h).clone(), tape.value(h_init).clone());
            tape = Tape::new();
            h = tape.constant(hv);
            h_init = tape.constant(iv);
            ew = net.edge_weights(&mut tape, h_init)?;
        }
    }
    let ht = tape.mean_rows(h);
    state.h = tape.value(h).clone();
    state.h_t = tape.value(ht).clone();
    let loss = if differentiable && !terms.is_empty() {
        let all = tape.concat_rows(&terms)?;
        let total = tape.sum(all);
        Some(tape.scale(total, -1.0))
    } else {
        None
    };
    Ok(RunOutput {
        state,
        z,
        trace,
        loss,
        tape,
    })
}

/// Drops candidates that never joined the design (node 0 and base nodes are
/// always kept), renumbers, and assigns magnitudes.
fn realize(model: &GeneratorModel, state: &GenState, seed: u64) -> DesignGraph {
    let n = state.nodes();
    let mut keep = vec![false; n];
    keep[0] = true;
    for (i, k) in keep.iter_mut().enumerate() {
        *k |= state.locked[i];
    }
    for e in &state.graph.edges {
        keep[e.u] = true;
        keep[e.v] = true;
    }
    let mut rng = derived_rng(seed, stream::MAGNITUDE, 0);
    let mut map = vec![usize::MAX; n];
    let mut out = DesignGraph::new(model.profile.clone());
    for v in (0..n).filter(|&v| keep[v]) {
        let node = &state.graph.nodes[v];
        let magnitude = if state.locked[v] {
            node.magnitude
        } else {
            match model.realization.magnitude_range(node.class) {
                Some([lo, hi]) if hi > lo => rng.random_range(lo..hi),
                Some([lo, _]) => lo,
                None => 0.0,
            }
        };
        map[v] = out.add_node(node.class, magnitude, node.pos);
    }
    for e in &state.graph.edges {
        out.add_edge(map[e.u], map[e.v], e.edge_type, e.capacity, e.unit_cost);
    }
    out
}

fn policy_for(opts: &DecodeOptions) -> Policy<'static> {
    match opts.mode {
        DecodeMode::Greedy => Policy::Greedy,
        DecodeMode::Sample => Policy::Sample(derived_rng(opts.seed, stream::DECODE, 0)),
    }
}

/// Decodes a design and the record of every decision.
pub fn decode_with_trace(
    model: &GeneratorModel,
    code: &LatentCode,
    opts: &DecodeOptions,
) -> Result<(DesignGraph, DecodeTrace)> {
    check_code(model, code)?;
    let positions = resolve_positions(code, opts)?;
    let max_steps = opts.max_steps.unwrap_or_else(|| model.max_steps(code.nodes()));
    let out = run(
        model,
        &model.params,
        &code.z,
        &positions,
        &opts.constraints,
        policy_for(opts),
        max_steps,
        false,
        opts.seed,
    )?;
    Ok((realize(model, &out.state, opts.seed), out.trace))
}

pub fn decode(model: &GeneratorModel, code: &LatentCode, opts: &DecodeOptions) -> Result<DesignGraph> {
    decode_with_trace(model, code, opts).map(|(g, _)| g)
}

/// Teacher-forced negative log-likelihood of `graph` given latents `z`,
/// recorded on a fresh tape. Returns the tape, the loss, the latent leaf and
/// the decision trace.
pub(crate) fn decode_loss_on(
    model: &GeneratorModel,
    params: &ParamSet,
    z: &Tensor,
    graph: &DesignGraph,
) -> Result<(Tape, Var, Var, DecodeTrace)> {
    if z.rows() != graph.node_count() || graph.node_count() == 0 {
        return Err(Error::shape(
            "decode_loss",
            format!("{} latent rows for {} nodes", z.rows(), graph.node_count()),
        ));
    }
    let positions: Vec<[f64; 2]> = graph.nodes.iter().map(|n| n.pos).collect();
    let policy = Policy::Replay {
        neighbors: graph.neighbors(),
        graph,
    };
    let out = run(
        model,
        params,
        z,
        &positions,
        &Constraints::default(),
        policy,
        usize::MAX,
        true,
        0,
    )?;
    let loss = out.loss.expect("differentiable run has at least one decision");
    Ok((out.tape, loss, out.z, out.trace))
}

/// Negative log-probability of decoding `graph` node types and breadth-first
/// edge sequence from `code`.
pub fn decode_loss(model: &GeneratorModel, code: &LatentCode, graph: &DesignGraph) -> Result<f64> {
    check_code(model, code)?;
    let (tape, loss, _, _) = decode_loss_on(model, &model.params, &code.z, graph)?;
    Ok(tape.scalar(loss))
}

/// Teacher-forced trace, for replaying step probabilities independently.
pub fn replay_trace(model: &GeneratorModel, code: &LatentCode, graph: &DesignGraph) -> Result<DecodeTrace> {
    check_code(model, code)?;
    Ok(decode_loss_on(model, &model.params, &code.z, graph)?.3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::Objective;
    use crate::generator::encoder::sample_prior;
    use crate::generator::GeneratorConfig;
    use crate::graph::{validate, SYNTHETIC_PROFILE};
    use crate::synth::{generate_design, SynthConfig};

    fn model() -> GeneratorModel {
        let config = GeneratorConfig {
            latent_dim: 4,
            hidden: 8,
            ..GeneratorConfig::default()
        };
        GeneratorModel::new(config, SYNTHETIC_PROFILE, Objective::Maximize, SynthConfig::default(), 1).unwrap()
    }

    #[test]
    fn edge_feature_layout() {
        let m = model();
        let code = sample_prior(&m, Some(5), 2);
        let state = init_nodes(&m, &code, &DecodeOptions::new(DecodeMode::Greedy, 0)).unwrap();
        let phi = edge_feature(&state, 1, 3).unwrap();
        assert_eq!(phi.cols(), m.edge_feature_width());
        assert_eq!(phi.cols(), 2 * 7 + 1 + 2 * 7);
        assert!(edge_feature(&state, 2, 2).is_err());
    }

    #[test]
    fn decomposed_scorer_matches_literal_feature() {
        let m = model();
        let code = sample_prior(&m, Some(6), 3);
        let state = init_nodes(&m, &code, &DecodeOptions::new(DecodeMode::Greedy, 0)).unwrap();
        let focus = 2;
        let net = Net {
            model: &m,
            params: &m.params,
        };
        let mut tape = Tape::new();
        let h = tape.constant(state.h.clone());
        let hi = tape.constant(state.h_init.clone());
        let ew = net.edge_weights(&mut tape, hi).unwrap();
        let col = Tensor::col(state.distances.row_slice(focus).to_vec());
        let logits = net.connect_logits(&mut tape, &ew, h, hi, focus, col).unwrap();
        for j in (0..6).filter(|&j| j != focus) {
            let phi = tape.constant(edge_feature(&state, focus, j).unwrap());
            let direct = m.parts.edge.forward(&mut tape, &m.params, phi).unwrap();
            let a = tape.value(logits).data()[j];
            assert!((a - tape.scalar(direct)).abs() < 1e-12);
        }
    }

    #[test]
    fn probabilities_normalize_and_respect_masks() {
        let m = model();
        let code = sample_prior(&m, Some(6), 5);
        let mut state = init_nodes(&m, &code, &DecodeOptions::new(DecodeMode::Greedy, 0)).unwrap();
        state.connect_mask[0][3] = false;
        state.type_mask[0][1][2] = false;
        let p = edge_probs(&m, &state, 0).unwrap();
        assert_eq!(p.connect[0], 0.0);
        assert_eq!(p.connect[3], 0.0);
        assert!((p.connect.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(p.types[1][2], 0.0);
        assert!((p.types[1].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.types[3].is_empty());
    }

    #[test]
    fn node_update_moves_h_t() {
        let m = model();
        let code = sample_prior(&m, Some(4), 5);
        let mut state = init_nodes(&m, &code, &DecodeOptions::new(DecodeMode::Greedy, 0)).unwrap();
        let before = state.h_t.clone();
        let mut rng = derived_rng(0, 0, 0);
        state.add_edge(&m, 0, 1, 0, &mut rng);
        node_update(&m, &mut state).unwrap();
        assert_ne!(state.h_t, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn greedy_decode_is_deterministic_and_valid() {
        let m = model();
        let code = sample_prior(&m, Some(8), 7);
        let opts = DecodeOptions {
            max_steps: Some(1000),
            ..DecodeOptions::new(DecodeMode::Greedy, 3)
        };
        let (a, trace) = decode_with_trace(&m, &code, &opts).unwrap();
        let b = decode(&m, &code, &opts).unwrap();
        assert_eq!(a, b);
        assert!(validate(&a).is_empty(), "{:?}", validate(&a));
        assert!(trace.is_sound());
    }

    #[test]
    fn sampled_decodes_are_sound() {
        let m = model();
        for seed in 0..10 {
            let code = sample_prior(&m, Some(7), seed);
            let opts = DecodeOptions {
                max_steps: Some(10_000),
                ..DecodeOptions::new(DecodeMode::Sample, seed)
            };
            let (g, trace) = decode_with_trace(&m, &code, &opts).unwrap();
            assert!(validate(&g).is_empty());
            assert!(trace.is_sound());
        }
    }

    #[test]
    fn runaway_guard() {
        let m = model();
        let code = sample_prior(&m, Some(6), 1);
        let opts = DecodeOptions {
            max_steps: Some(1),
            ..DecodeOptions::new(DecodeMode::Sample, 0)
        };
        // A single decision can only succeed if the first focus stops at once.
        match decode(&m, &code, &opts) {
            Ok(g) => assert_eq!(g.node_count(), 1),
            Err(e) => assert!(matches!(e, Error::DecodeRunaway(1))),
        }
    }

    #[test]
    fn single_node_loss_has_two_decisions() {
        let m = model();
        let mut g = DesignGraph::new(SYNTHETIC_PROFILE);
        g.add_node(NodeClass::SUPPLY, 3.0, [0.2, 0.2]);
        let code = sample_prior(&m, Some(1), 4);
        let trace = replay_trace(&m, &code, &g).unwrap();
        assert_eq!(trace.steps.len(), 1);
        let net = Net {
            model: &m,
            params: &m.params,
        };
        let mut tape = Tape::new();
        let z = tape.constant(code.z.clone());
        let logits = net.classify(&mut tape, z).unwrap();
        let p_type = masked_softmax(tape.value(logits).data(), &[true; 3]).unwrap()[0];
        let expect = -(p_type.ln() + trace.steps[0].connect_probs[1].ln());
        assert!((decode_loss(&m, &code, &g).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn teacher_forced_loss_matches_replayed_steps() {
        let m = model();
        let g = generate_design(&SynthConfig { n: 6, ..SynthConfig::default() }, 2).unwrap();
        let code = sample_prior(&m, Some(6), 9);
        let trace = replay_trace(&m, &code, &g).unwrap();
        assert!(trace.is_sound());
        assert_eq!(trace.steps.len(), g.edge_count() + g.node_count());
        let net = Net {
            model: &m,
            params: &m.params,
        };
        let mut tape = Tape::new();
        let z = tape.constant(code.z.clone());
        let logits = net.classify(&mut tape, z).unwrap();
        let lt = tape.value(logits).clone();
        let type_ll: f64 = (0..6)
            .map(|v| masked_softmax(lt.row_slice(v), &[true; 3]).unwrap()[g.nodes[v].class.index()].ln())
            .sum();
        let expect = -(type_ll + trace.log_likelihood());
        let loss = decode_loss(&m, &code, &g).unwrap();
        assert!((loss - expect).abs() < 1e-9 * expect.abs().max(1.0));
        assert!(loss >= 0.0);
    }
}
