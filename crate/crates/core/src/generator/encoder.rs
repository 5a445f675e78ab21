use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::GeneratorModel;
use crate::diff::{kl_standard_normal, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{feature_matrix, DesignGraph};
use crate::seed::{derived_rng, stream};

/// Per-node latent Gaussians and one draw from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    pub z: Tensor,
    pub mu: Tensor,
    pub sigma: Tensor,
    /// Seed of the standard-normal draw behind `z`.
    pub seed: u64,
}

impl LatentCode {
    pub fn nodes(&self) -> usize {
        self.z.rows()
    }

    /// Redraws `z = mu + sigma * eps` with a new seed.
    pub fn resample(&self, seed: u64) -> LatentCode {
        let eps = standard_normal(self.mu.shape(), seed);
        let mut z = self.mu.clone();
        for ((z, s), e) in z.data_mut().iter_mut().zip(self.sigma.data()).zip(eps.data()) {
            *z += s * e;
        }
        LatentCode {
            z,
            mu: self.mu.clone(),
            sigma: self.sigma.clone(),
            seed,
        }
    }
}

pub(crate) fn standard_normal(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = derived_rng(seed, stream::EPSILON, 0);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.sample(StandardNormal);
    }
    t
}

/// Standardized node features and binary adjacency of a graph.
#[derive(Clone, Debug)]
pub(crate) struct EncoderInput {
    pub features: Tensor,
    pub adjacency: Tensor,
}

impl EncoderInput {
    pub fn new(model: &GeneratorModel, graph: &DesignGraph) -> Result<Self> {
        if graph.profile != model.profile {
            return Err(Error::Config(format!(
                "graph profile `{}` does not match generator profile `{}`",
                graph.profile, model.profile
            )));
        }
        let mut features = feature_matrix(graph)?.values;
        let f = features.cols();
        for (k, v) in features.data_mut().iter_mut().enumerate() {
            let j = k % f;
            *v = (*v - model.scaler.feature_mean[j]) / model.scaler.feature_std[j];
        }
        let n = graph.node_count();
        let mut adjacency = Tensor::zeros(&[n, n]);
        for e in &graph.edges {
            adjacency.set(e.u, e.v, 1.0);
            adjacency.set(e.v, e.u, 1.0);
        }
        Ok(EncoderInput { features, adjacency })
    }
}

/// Message passing with summed linear messages and a gated update, then linear
/// maps to `mu` and `log sigma`. Returns `(mu, sigma)`.
pub(crate) fn encode_vars(
    model: &GeneratorModel,
    tape: &mut Tape,
    params: &ParamSet,
    input: &EncoderInput,
) -> Result<(Var, Var)> {
    let p = &model.parts;
    let x = tape.constant(input.features.clone());
    let adj = tape.constant(input.adjacency.clone());
    let mut h = p.enc_in.forward(tape, params, x)?;
    let w_msg = tape.param(params, p.enc_msg);
    for _ in 0..model.config.encoder_rounds {
        let hw = tape.matmul(h, w_msg)?;
        let msg = tape.matmul(adj, hw)?;
        h = p.enc_gru.forward(tape, params, h, msg)?;
    }
    let mu = p.enc_mu.forward(tape, params, h)?;
    let log_sigma = p.enc_log_sigma.forward(tape, params, h)?;
    let sigma = tape.exp(log_sigma);
    Ok((mu, sigma))
}

pub fn encode(model: &GeneratorModel, graph: &DesignGraph, seed: u64) -> Result<LatentCode> {
    let input = EncoderInput::new(model, graph)?;
    let mut tape = Tape::new();
    let (mu, sigma) = encode_vars(model, &mut tape, &model.params, &input)?;
    let code = LatentCode {
        z: Tensor::zeros(&[0, 0]),
        mu: tape.value(mu).clone(),
        sigma: tape.value(sigma).clone(),
        seed,
    };
    Ok(code.resample(seed))
}

/// Summed KL divergence of the per-node posteriors from the standard normal.
pub fn encode_loss(code: &LatentCode) -> Result<f64> {
    kl_standard_normal(&code.mu, &code.sigma)
}

/// Latents drawn from the prior; the node count comes from the training
/// distribution unless given.
pub fn sample_prior(model: &GeneratorModel, nodes: Option<usize>, seed: u64) -> LatentCode {
    let n = nodes.unwrap_or_else(|| {
        let mut rng = derived_rng(seed, stream::CANDIDATE, 0);
        model
            .node_counts
            .choose_weighted(&mut rng, |&(_, freq)| freq)
            .map_or(model.realization.n, |&(n, _)| n)
    });
    let shape = [n, model.latent_dim()];
    LatentCode {
        z: standard_normal(&shape, seed),
        mu: Tensor::zeros(&shape),
        sigma: Tensor::filled(&shape, 1.0),
        seed,
    }
}

/// `R(z) = sum_v sigmoid(f1(z_v)) f2(z_v)` in normalized metric units.
pub(crate) fn head_var(model: &GeneratorModel, tape: &mut Tape, params: &ParamSet, z: Var) -> Result<Var> {
    let gate_pre = model.parts.f1.forward(tape, params, z)?;
    let gate = tape.sigmoid(gate_pre);
    let value = model.parts.f2.forward(tape, params, z)?;
    let prod = tape.mul(gate, value)?;
    Ok(tape.sum(prod))
}

pub fn performance_head(model: &GeneratorModel, z: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let r = head_var(model, &mut tape, &model.params, zv)?;
    Ok(tape.scalar(r))
}

#[derive(Clone, Debug)]
pub struct AscentResult {
    pub code: LatentCode,
    /// `|R(z) - target|` before the first step and after every accepted step.
    pub trajectory: Vec<f64>,
}

fn ascent_loss(model: &GeneratorModel, z: &Tensor, target: f64) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let zv = tape.var(z.clone());
    let r = head_var(model, &mut tape, &model.params, zv)?;
    let diff = tape.add_scalar(r, -target);
    let loss = tape.norm2(diff);
    let grads = tape.backward(loss);
    let g = grads.wrt(zv).cloned().unwrap_or_else(|| Tensor::zeros(z.shape()));
    Ok((tape.scalar(loss), g))
}

/// Moves `z` to reduce `|R(z) - target|` with parameters frozen. Each step
/// halves the step size until the loss does not increase; when no halving
/// helps the ascent stops early. `q_target` is in metric units.
pub fn latent_ascent(
    model: &GeneratorModel,
    code: &LatentCode,
    q_target: f64,
    steps: usize,
    step_size: f64,
) -> Result<AscentResult> {
    const MAX_HALVINGS: usize = 30;
    let target = model.scaler.scale_label(q_target);
    let mut z = code.z.clone();
    let (mut loss, mut grad) = ascent_loss(model, &z, target)?;
    let mut trajectory = vec![loss];
    for _ in 0..steps {
        if !grad.is_finite() {
            return Err(Error::Ascent("non-finite latent gradient".into()));
        }
        if grad.data().iter().all(|&g| g == 0.0) {
            break;
        }
        let mut eta = step_size;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let mut cand = z.clone();
            for (c, g) in cand.data_mut().iter_mut().zip(grad.data()) {
                *c -= eta * g;
            }
            let (l, g) = ascent_loss(model, &cand, target)?;
            if l.is_finite() && l <= loss {
                accepted = Some((cand, l, g));
                break;
            }
            eta *= 0.5;
        }
        let Some((cand, l, g)) = accepted else { break };
        z = cand;
        loss = l;
        grad = g;
        trajectory.push(loss);
    }
    Ok(AscentResult {
        code: LatentCode { z, ..code.clone() },
        trajectory,
    })
}
