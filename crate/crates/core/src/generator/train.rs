use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::decoder::decode_loss_on;
use super::encoder::{encode_vars, head_var, standard_normal, EncoderInput};
use super::{GeneratorModel, LossWeights};
use crate::diff::{Optimizer, OptimizerRule, ParamSet, Tape, Tensor};
use crate::error::{Error, Result};
use crate::estimator::Scaler;
use crate::graph::DesignGraph;
use crate::seed::{derive_seed, derived_rng, stream};

/// Loss terms for one design; `total` is their weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub kl: f64,
    pub dec: f64,
    pub perf: f64,
    pub total: f64,
}

/// Weighted generator loss for one design, with latents `mu + sigma * eps`.
/// `label` is in metric units; without it the head term is zero. Parameter
/// gradients of the weighted total are added into `grads` when given.
pub fn generator_loss(
    model: &GeneratorModel,
    params: &ParamSet,
    graph: &DesignGraph,
    label: Option<f64>,
    eps: &Tensor,
    weights: LossWeights,
    grads: Option<&mut ParamSet>,
) -> Result<LossTerms> {
    let input = EncoderInput::new(model, graph)?;
    let mut tape = Tape::new();
    let (mu, sigma) = encode_vars(model, &mut tape, params, &input)?;
    if tape.value(mu).shape() != eps.shape() {
        return Err(Error::shape(
            "generator_loss",
            format!("noise {:?} for latents {:?}", eps.shape(), tape.value(mu).shape()),
        ));
    }
    let e = tape.constant(eps.clone());
    let spread = tape.mul(sigma, e)?;
    let z = tape.add(mu, spread)?;
    let kl = tape.kl_standard_normal(mu, sigma)?;
    let perf = match label {
        Some(y) => {
            let r = head_var(model, &mut tape, params, z)?;
            let diff = tape.add_scalar(r, -model.scaler.scale_label(y));
            Some(tape.norm2(diff))
        }
        None => None,
    };

    // The decoder runs on its own tape; its latent gradient re-enters the
    // encoder tape through a linear surrogate term.
    let (dtape, dec, dz, _) = decode_loss_on(model, params, tape.value(z), graph)?;
    let terms = LossTerms {
        kl: tape.scalar(kl),
        dec: dtape.scalar(dec),
        perf: perf.map_or(0.0, |p| tape.scalar(p)),
        total: 0.0,
    };
    let terms = LossTerms {
        total: weights.kl * terms.kl + weights.dec * terms.dec + weights.perf * terms.perf,
        ..terms
    };
    if let Some(grads) = grads {
        let dgrads = dtape.backward(dec);
        dgrads.accumulate_scaled_into(grads, weights.dec);
        let gz = dgrads.wrt(dz).cloned().unwrap_or_else(|| Tensor::zeros(eps.shape()));
        let gz = tape.constant(gz.map(|g| weights.dec * g));
        let link = tape.mul(z, gz)?;
        let mut surrogate = tape.sum(link);
        let kl_w = tape.scale(kl, weights.kl);
        surrogate = tape.add(surrogate, kl_w)?;
        if let Some(p) = perf {
            let pw = tape.scale(p, weights.perf);
            surrogate = tape.add(surrogate, pw)?;
        }
        tape.backward(surrogate).accumulate_into(grads);
    }
    Ok(terms)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorTrainConfig {
    pub epochs: usize,
    pub rule: OptimizerRule,
    pub batch_size: usize,
    pub weights: LossWeights,
    /// Refit feature scaling, metric normalization and the node-count
    /// distribution on the training designs.
    pub fit_scaler: bool,
    pub seed: u64,
}

impl Default for GeneratorTrainConfig {
    fn default() -> Self {
        GeneratorTrainConfig {
            epochs: 20,
            rule: OptimizerRule::adam(3e-3),
            batch_size: 16,
            weights: LossWeights::default(),
            fit_scaler: true,
            seed: 0,
        }
    }
}

/// Mean loss terms per design over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorEpoch {
    pub epoch: usize,
    pub kl: f64,
    pub dec: f64,
    pub perf: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GeneratorHistory {
    pub records: Vec<GeneratorEpoch>,
}

impl GeneratorHistory {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn node_count_histogram(graphs: &[DesignGraph]) -> Vec<(usize, usize)> {
    let mut counts = std::collections::BTreeMap::new();
    for g in graphs {
        *counts.entry(g.node_count()).or_insert(0usize) += 1;
    }
    counts.into_iter().collect()
}

/// Minibatch training of all generator blocks on the weighted loss.
pub fn train_generator(
    mut model: GeneratorModel,
    graphs: &[DesignGraph],
    labels: &[f64],
    config: &GeneratorTrainConfig,
) -> Result<(GeneratorModel, GeneratorHistory)> {
    if graphs.is_empty() || graphs.len() != labels.len() {
        return Err(Error::Config("generator training needs one label per design".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if config.fit_scaler {
        model.scaler = Scaler::fit(graphs, labels, model.scaler.feature_mean.len())?;
        model.node_counts = node_count_histogram(graphs);
    }
    let mut opt = Optimizer::new(config.rule);
    let mut history = GeneratorHistory::default();
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let d = model.latent_dim();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut derived_rng(config.seed, stream::SHUFFLE, epoch as u64));
        let mut sums = LossTerms::default();
        for chunk in order.chunks(config.batch_size) {
            model.params.zero_grad();
            let mut grads = model.params.clone();
            for &i in chunk {
                let noise_seed = derive_seed(config.seed, epoch as u64, i as u64);
                let eps = standard_normal(&[graphs[i].node_count(), d], noise_seed);
                let t = generator_loss(
                    &model,
                    &model.params,
                    &graphs[i],
                    Some(labels[i]),
                    &eps,
                    config.weights,
                    Some(&mut grads),
                )?;
                if !t.total.is_finite() {
                    return Err(Error::TrainingDiverged {
                        epoch,
                        detail: format!("loss {} on design {i}", t.total),
                    });
                }
                sums.kl += t.kl;
                sums.dec += t.dec;
                sums.perf += t.perf;
                sums.total += t.total;
            }
            grads.scale_grad(1.0 / chunk.len() as f64);
            for (p, g) in model.params.iter_mut().zip(grads.iter()) {
                p.grad = g.grad.clone();
            }
            opt.step(&mut model.params).map_err(|e| Error::TrainingDiverged {
                epoch,
                detail: e.to_string(),
            })?;
        }
        let n = graphs.len() as f64;
        history.records.push(GeneratorEpoch {
            epoch,
            kl: sums.kl / n,
            dec: sums.dec / n,
            perf: sums.perf / n,
            total: sums.total / n,
        });
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::{gradient_check, CheckOptions};
    use crate::flow::Objective;
    use crate::generator::GeneratorConfig;
    use crate::graph::SYNTHETIC_PROFILE;
    use crate::synth::{generate_design, SynthConfig};

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let config = GeneratorConfig {
            latent_dim: 3,
            hidden: 4,
            encoder_rounds: 2,
            ..GeneratorConfig::default()
        };
        let model =
            GeneratorModel::new(config, SYNTHETIC_PROFILE, Objective::Maximize, SynthConfig::default(), 2).unwrap();
        let g = generate_design(&SynthConfig { n: 4, ..SynthConfig::default() }, 5).unwrap();
        let eps = standard_normal(&[4, 3], 1);
        let w = LossWeights::default();
        let mut grads = model.params.clone();
        grads.zero_grad();
        generator_loss(&model, &model.params, &g, Some(1.5), &eps, w, Some(&mut grads)).unwrap();
        let opts = CheckOptions {
            max_coords_per_tensor: Some(6),
            ..CheckOptions::new(1e-4)
        };
        let report = gradient_check(
            &grads,
            |p| Ok(generator_loss(&model, p, &g, Some(1.5), &eps, w, None)?.total),
            &opts,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
