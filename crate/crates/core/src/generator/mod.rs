//! Graph variational autoencoder for network designs.
//!
//! A gated message-passing encoder maps each node to a diagonal Gaussian
//! latent. The decoder types every node from its latent, then grows edges
//! breadth-first: for the focus node it picks a partner (or stops) and an edge
//! type from masked softmaxes, and refreshes node states with a gated update
//! after every new edge. A per-node gated regression head predicts the design
//! metric from the latents and drives latent ascent toward a target value.

mod decoder;
mod encoder;
mod train;

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{
    read_checkpoint, write_checkpoint, Activation, GruCell, GruCellSpec, Mlp, MlpSpec, ParamId, ParamSet,
};
use crate::error::{Error, Result};
use crate::estimator::Scaler;
use crate::flow::Objective;
use crate::graph::Profile;
use crate::seed::{derived_rng, stream};
use crate::synth::SynthConfig;

pub use decoder::{
    decode, decode_loss, decode_with_trace, edge_feature, edge_probs, init_nodes, node_update, Constraints,
    DecodeMode, DecodeOptions, DecodeStep, DecodeTrace, EdgeProbs, GenState, replay_trace,
};
pub use encoder::{
    encode, encode_loss, latent_ascent, performance_head, sample_prior, AscentResult, LatentCode,
};
pub use train::{generator_loss, train_generator, GeneratorEpoch, GeneratorHistory, GeneratorTrainConfig, LossTerms};

const CHECKPOINT_KIND: &str = "generator";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub kl: f64,
    pub dec: f64,
    pub perf: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            kl: 1.0,
            dec: 1.0,
            perf: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub latent_dim: usize,
    pub encoder_rounds: usize,
    /// Hidden width of every scorer and head.
    pub hidden: usize,
    /// Decode guard: at most this many decisions per candidate node.
    pub steps_per_node: usize,
    /// Draw edge unit costs from the cost range instead of using its midpoint.
    pub sample_cost: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            latent_dim: 16,
            encoder_rounds: 4,
            hidden: 32,
            steps_per_node: 4,
            sample_cost: false,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.hidden == 0 || self.steps_per_node == 0 {
            return Err(Error::Config("generator widths and step guard must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter handles of every trainable block.
#[derive(Clone, Debug)]
pub(crate) struct Parts {
    pub enc_in: Mlp,
    pub enc_msg: ParamId,
    pub enc_gru: GruCell,
    pub enc_mu: Mlp,
    pub enc_log_sigma: Mlp,
    pub classifier: Mlp,
    pub edge: Mlp,
    pub types: Vec<Mlp>,
    pub stop: Mlp,
    pub upd_msg: ParamId,
    pub upd_gru: GruCell,
    pub f1: Mlp,
    pub f2: Mlp,
}

struct Builder<'a, R> {
    params: &'a mut ParamSet,
    rng: Option<&'a mut R>,
}

impl<R: Rng> Builder<'_, R> {
    fn mlp(&mut self, name: &str, spec: MlpSpec) -> Result<Mlp> {
        match self.rng.as_deref_mut() {
            Some(rng) => Mlp::new(self.params, name, spec, rng),
            None => Mlp::bind(self.params, name, spec),
        }
    }

    fn gru(&mut self, name: &str, spec: GruCellSpec) -> Result<GruCell> {
        match self.rng.as_deref_mut() {
            Some(rng) => GruCell::new(self.params, name, spec, rng),
            None => GruCell::bind(self.params, name, spec),
        }
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        match self.rng.as_deref_mut() {
            Some(rng) => self.params.add_glorot(name, rows, cols, rng),
            None => self
                .params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub params: ParamSet,
    pub profile: String,
    pub objective: Objective,
    /// Magnitude intervals, capacity bins and cost range used to realize
    /// decoded designs.
    pub realization: SynthConfig,
    /// Encoder feature scaling and metric normalization for the head.
    pub scaler: Scaler,
    /// `(node count, frequency)` over the training designs; free generation
    /// draws from it.
    pub node_counts: Vec<(usize, usize)>,
    pub(crate) parts: Parts,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    kind: String,
    config: GeneratorConfig,
    profile: String,
    objective: Objective,
    realization: SynthConfig,
    scaler: Scaler,
    node_counts: Vec<(usize, usize)>,
}

impl GeneratorModel {
    pub fn new(
        config: GeneratorConfig,
        profile: &str,
        objective: Objective,
        realization: SynthConfig,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        realization.validate()?;
        let prof = Profile::lookup(profile)?;
        if realization.capacity_bins.len() != prof.edge_types {
            return Err(Error::Config(format!(
                "{} capacity bins for {} edge types",
                realization.capacity_bins.len(),
                prof.edge_types
            )));
        }
        let mut params = ParamSet::new();
        let mut rng = derived_rng(seed, stream::INIT, 0);
        let parts = build_parts(&config, &prof, &mut params, Some(&mut rng))?;
        Ok(GeneratorModel {
            scaler: Scaler::identity(prof.feature_count()),
            config,
            params,
            profile: profile.to_string(),
            objective,
            node_counts: vec![(realization.n, 1)],
            realization,
            parts,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn class_count(&self) -> usize {
        self.parts.classifier.spec.output_width()
    }

    pub fn edge_type_count(&self) -> usize {
        self.parts.types.len()
    }

    /// Width of a decoder node state: latent plus one-hot class.
    pub fn state_width(&self) -> usize {
        self.config.latent_dim + self.class_count()
    }

    /// Width of the candidate-edge feature.
    pub fn edge_feature_width(&self) -> usize {
        4 * self.state_width() + 1
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        let meta = serde_json::to_string(&Metadata {
            kind: CHECKPOINT_KIND.into(),
            config: self.config.clone(),
            profile: self.profile.clone(),
            objective: self.objective,
            realization: self.realization.clone(),
            scaler: self.scaler.clone(),
            node_counts: self.node_counts.clone(),
        })?;
        write_checkpoint(out, &self.params, &meta)
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let (mut params, meta) = read_checkpoint(input)?;
        let meta: Metadata = serde_json::from_str(&meta)?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a generator checkpoint, found `{}`",
                meta.kind
            )));
        }
        let prof = Profile::lookup(&meta.profile)?;
        let parts = build_parts::<rand_chacha::ChaCha8Rng>(&meta.config, &prof, &mut params, None)?;
        Ok(GeneratorModel {
            config: meta.config,
            params,
            profile: meta.profile,
            objective: meta.objective,
            realization: meta.realization,
            scaler: meta.scaler,
            node_counts: meta.node_counts,
            parts,
        })
    }

    pub(crate) fn max_steps(&self, nodes: usize) -> usize {
        self.config.steps_per_node * nodes.max(1)
    }

    pub(crate) fn capacity_of(&self, edge_type: usize) -> f64 {
        self.realization.capacity_bins[edge_type]
    }

    pub(crate) fn unit_cost<R: Rng>(&self, rng: &mut R) -> f64 {
        let [lo, hi] = self.realization.cost_range;
        if self.config.sample_cost && hi > lo {
            rng.random_range(lo..hi)
        } else {
            0.5 * (lo + hi)
        }
    }
}

fn build_parts<R: Rng>(
    config: &GeneratorConfig,
    profile: &Profile,
    params: &mut ParamSet,
    rng: Option<&mut R>,
) -> Result<Parts> {
    let d = config.latent_dim;
    let h = config.hidden;
    let c = profile.class_count();
    let f = profile.feature_count();
    let w = d + c;
    let phi = 4 * w + 1;
    let mut b = Builder { params, rng };
    let tanh = Activation::Tanh;
    let id = Activation::Identity;
    Ok(Parts {
        enc_in: b.mlp("enc.in", MlpSpec::new(&[f, d], tanh, tanh))?,
        enc_msg: b.matrix("enc.msg", d, d)?,
        enc_gru: b.gru(
            "enc.gru",
            GruCellSpec {
                input_width: d,
                state_width: d,
            },
        )?,
        enc_mu: b.mlp("enc.mu", MlpSpec::new(&[d, d], id, id))?,
        enc_log_sigma: b.mlp("enc.log_sigma", MlpSpec::new(&[d, d], id, id))?,
        classifier: b.mlp("node_type", MlpSpec::new(&[d, h, h, c], tanh, id))?,
        edge: b.mlp("edge", MlpSpec::new(&[phi, h, 1], tanh, id))?,
        types: (0..profile.edge_types)
            .map(|l| b.mlp(&format!("edge_type{l}"), MlpSpec::new(&[phi, h, 1], tanh, id)))
            .collect::<Result<_>>()?,
        stop: b.mlp("stop", MlpSpec::new(&[3 * w, h, 1], tanh, id))?,
        upd_msg: b.matrix("update.msg", w, w)?,
        upd_gru: b.gru(
            "update.gru",
            GruCellSpec {
                input_width: w,
                state_width: w,
            },
        )?,
        f1: b.mlp("head.f1", MlpSpec::new(&[d, h, 1], tanh, id))?,
        f2: b.mlp("head.f2", MlpSpec::new(&[d, h, 1], tanh, id))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::SYNTHETIC_PROFILE;

    #[test]
    fn checkpoint_round_trip() {
        let model = GeneratorModel::new(
            GeneratorConfig::default(),
            SYNTHETIC_PROFILE,
            Objective::Maximize,
            SynthConfig::default(),
            4,
        )
        .unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let back = GeneratorModel::load(buf.as_slice()).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.config, model.config);
        assert_eq!(back.edge_feature_width(), 4 * 19 + 1);
    }

    #[test]
    fn bins_must_match_edge_types() {
        let realization = SynthConfig {
            capacity_bins: vec![1.0, 2.0],
            ..SynthConfig::default()
        };
        assert!(GeneratorModel::new(
            GeneratorConfig::default(),
            SYNTHETIC_PROFILE,
            Objective::Maximize,
            realization,
            0
        )
        .is_err());
    }
}
