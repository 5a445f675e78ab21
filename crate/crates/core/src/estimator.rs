//! Graph-convolutional surrogate for the design metric.
//!
//! Two or more propagation layers `relu(D^-1/2 A D^-1/2 X Θ)` over the
//! capacity-weighted adjacency, mean pooling over nodes, then an MLP readout.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diff::{
    read_checkpoint, write_checkpoint, Activation, Gradients, Mlp, MlpSpec, Optimizer, OptimizerRule, ParamId,
    ParamSet, Tape, Tensor, Var,
};
use crate::error::{Error, Result};
use crate::flow::Objective;
use crate::graph::{adjacency, degree, feature_matrix, DegreeMatrix, DesignGraph, Profile, WeightedAdjacency};
use crate::seed::{derived_rng, stream};

const CHECKPOINT_KIND: &str = "estimator";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    /// `[f, h1, h2, ..]`; at least two propagation layers.
    pub gcn_widths: Vec<usize>,
    pub readout: MlpSpec,
    pub add_self_loops: bool,
}

impl EstimatorSpec {
    pub fn default_for(feature_count: usize) -> Self {
        EstimatorSpec {
            gcn_widths: vec![feature_count, 32, 32],
            readout: MlpSpec::new(&[32, 16, 1], Activation::Relu, Activation::Identity),
            add_self_loops: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.gcn_widths.len() < 3 || self.gcn_widths.contains(&0) {
            return Err(Error::Config(
                "the estimator needs at least two propagation layers with positive widths".into(),
            ));
        }
        self.readout.validate()?;
        if self.readout.input_width() != *self.gcn_widths.last().expect("checked") {
            return Err(Error::Config("readout input width differs from last GCN width".into()));
        }
        if self.readout.output_width() != 1 {
            return Err(Error::Config("readout must produce a single value".into()));
        }
        Ok(())
    }
}

/// Affine standardization of node features and labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub label_mean: f64,
    pub label_std: f64,
}

impl Scaler {
    pub fn identity(feature_count: usize) -> Self {
        Scaler {
            feature_mean: vec![0.0; feature_count],
            feature_std: vec![1.0; feature_count],
            label_mean: 0.0,
            label_std: 1.0,
        }
    }

    /// Fits column statistics over all node rows and the label statistics.
    /// Constant columns keep unit scale.
    pub fn fit(graphs: &[DesignGraph], labels: &[f64], feature_count: usize) -> Result<Self> {
        let mut sum = vec![0.0; feature_count];
        let mut sq = vec![0.0; feature_count];
        let mut rows = 0usize;
        for g in graphs {
            let x = feature_matrix(g)?.values;
            for i in 0..x.rows() {
                for (j, &v) in x.row_slice(i).iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
            }
            rows += x.rows();
        }
        let stats = |s: f64, q: f64, n: usize| {
            if n == 0 {
                return (0.0, 1.0);
            }
            let mean = s / n as f64;
            let var = (q / n as f64 - mean * mean).max(0.0);
            let std = var.sqrt();
            (mean, if std > 1e-12 { std } else { 1.0 })
        };
        let (feature_mean, feature_std) = (0..feature_count).map(|j| stats(sum[j], sq[j], rows)).unzip();
        let (ls, lq) = labels.iter().fold((0.0, 0.0), |(s, q), &y| (s + y, q + y * y));
        let (label_mean, label_std) = stats(ls, lq, labels.len());
        Ok(Scaler {
            feature_mean,
            feature_std,
            label_mean,
            label_std,
        })
    }

    pub fn scale_label(&self, y: f64) -> f64 {
        (y - self.label_mean) / self.label_std
    }

    pub fn unscale_label(&self, y: f64) -> f64 {
        y * self.label_std + self.label_mean
    }
}

/// `act(D^-1/2 A D^-1/2 X Θ)`; rows with zero degree propagate zeros.
pub fn gcn_layer(
    adj: &WeightedAdjacency,
    deg: &DegreeMatrix,
    x: &Tensor,
    theta: &Tensor,
    activation: Activation,
) -> Result<Tensor> {
    let op = normalized_operator(adj, deg)?;
    let mut tape = Tape::new();
    let (o, xv, t) = (tape.constant(op), tape.constant(x.clone()), tape.constant(theta.clone()));
    let xt = tape.matmul(xv, t)?;
    let pre = tape.matmul(o, xt)?;
    let out = activation.apply(&mut tape, pre);
    Ok(tape.value(out).clone())
}

/// `D^-1/2 A D^-1/2` with `D_ii^-1/2 = 0` where `D_ii = 0`.
pub fn normalized_operator(adj: &WeightedAdjacency, deg: &DegreeMatrix) -> Result<Tensor> {
    let a = &adj.0;
    let d = &deg.0;
    let n = a.rows();
    if a.shape() != [n, n] || d.shape() != [n, n] {
        return Err(Error::shape(
            "normalized_operator",
            format!("adjacency {:?}, degree {:?}", a.shape(), d.shape()),
        ));
    }
    let inv: Vec<f64> = (0..n)
        .map(|i| {
            let di = d.get(i, i);
            if di > 0.0 {
                1.0 / di.sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let mut out = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j);
            if v != 0.0 {
                out.set(i, j, inv[i] * v * inv[j]);
            }
        }
    }
    Ok(out)
}

/// Per-graph tensors that stay fixed during training.
#[derive(Clone, Debug)]
pub struct PreparedGraph {
    pub operator: Tensor,
    pub features: Tensor,
}

#[derive(Clone, Debug)]
pub struct EstimatorModel {
    pub spec: EstimatorSpec,
    pub params: ParamSet,
    pub profile: String,
    pub objective: Objective,
    pub scaler: Scaler,
    thetas: Vec<ParamId>,
    readout: Mlp,
}

#[derive(Serialize, Deserialize)]
struct Metadata {
    kind: String,
    spec: EstimatorSpec,
    profile: String,
    objective: Objective,
    scaler: Scaler,
}

impl EstimatorModel {
    pub fn new(spec: EstimatorSpec, profile: &str, objective: Objective, seed: u64) -> Result<Self> {
        spec.validate()?;
        let f = Profile::lookup(profile)?.feature_count();
        if spec.gcn_widths[0] != f {
            return Err(Error::Config(format!(
                "first GCN width {} differs from feature count {f}",
                spec.gcn_widths[0]
            )));
        }
        let mut rng = derived_rng(seed, stream::INIT, 0);
        let mut params = ParamSet::new();
        let thetas = spec
            .gcn_widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| params.add_glorot(format!("gcn.theta{i}"), w[0], w[1], &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let readout = Mlp::new(&mut params, "readout", spec.readout.clone(), &mut rng)?;
        Ok(EstimatorModel {
            scaler: Scaler::identity(f),
            spec,
            params,
            profile: profile.to_string(),
            objective,
            thetas,
            readout,
        })
    }

    fn bind(spec: EstimatorSpec, params: ParamSet, profile: String, objective: Objective, scaler: Scaler) -> Result<Self> {
        spec.validate()?;
        let thetas = (0..spec.gcn_widths.len() - 1)
            .map(|i| {
                params
                    .id(&format!("gcn.theta{i}"))
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter `gcn.theta{i}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let readout = Mlp::bind(&params, "readout", spec.readout.clone())?;
        Ok(EstimatorModel {
            spec,
            params,
            profile,
            objective,
            scaler,
            thetas,
            readout,
        })
    }

    pub fn prepare(&self, graph: &DesignGraph) -> Result<PreparedGraph> {
        if graph.profile != self.profile {
            return Err(Error::Config(format!(
                "graph profile `{}` does not match estimator profile `{}`",
                graph.profile, self.profile
            )));
        }
        let mut adj = adjacency(graph);
        if self.spec.add_self_loops {
            for i in 0..graph.node_count() {
                let v = adj.0.get(i, i);
                adj.0.set(i, i, v + 1.0);
            }
        }
        let deg = degree(&adj);
        let operator = normalized_operator(&adj, &deg)?;
        let mut features = feature_matrix(graph)?.values;
        let f = features.cols();
        for (k, v) in features.data_mut().iter_mut().enumerate() {
            let j = k % f;
            *v = (*v - self.scaler.feature_mean[j]) / self.scaler.feature_std[j];
        }
        Ok(PreparedGraph { operator, features })
    }

    /// Standardized-scale prediction as a `1 x 1` variable.
    fn forward(&self, tape: &mut Tape, params: &ParamSet, g: &PreparedGraph) -> Result<Var> {
        let op = tape.constant(g.operator.clone());
        let mut h = tape.constant(g.features.clone());
        for &theta in &self.thetas {
            let t = tape.param(params, theta);
            let ht = tape.matmul(h, t)?;
            let pre = tape.matmul(op, ht)?;
            h = tape.relu(pre);
        }
        let pooled = tape.mean_rows(h);
        self.readout.forward(tape, params, pooled)
    }

    /// Mean squared error in standardized label units over `batch`.
    pub fn batch_loss(&self, params: &ParamSet, batch: &[(&PreparedGraph, f64)]) -> Result<f64> {
        Ok(self.batch_loss_tape(params, batch)?.0)
    }

    /// Loss plus gradients with respect to `params`.
    pub fn batch_loss_grad(&self, params: &ParamSet, batch: &[(&PreparedGraph, f64)]) -> Result<(f64, Gradients)> {
        let (loss, tape, out) = self.batch_loss_tape(params, batch)?;
        Ok((loss, tape.backward(out)))
    }

    fn batch_loss_tape(&self, params: &ParamSet, batch: &[(&PreparedGraph, f64)]) -> Result<(f64, Tape, Var)> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let mut tape = Tape::new();
        let preds = batch
            .iter()
            .map(|(g, _)| self.forward(&mut tape, params, g))
            .collect::<Result<Vec<_>>>()?;
        let pred = tape.concat_rows(&preds)?;
        let target = Tensor::col(batch.iter().map(|&(_, y)| self.scaler.scale_label(y)).collect());
        let target = tape.constant(target);
        let loss = tape.mse(pred, target)?;
        Ok((tape.scalar(loss), tape, loss))
    }

    pub fn estimate_prepared(&self, g: &PreparedGraph) -> Result<f64> {
        let mut tape = Tape::new();
        let q = self.forward(&mut tape, &self.params, g)?;
        Ok(self.scaler.unscale_label(tape.scalar(q)))
    }

    pub fn save<W: Write>(&self, out: W) -> Result<()> {
        let meta = serde_json::to_string(&Metadata {
            kind: CHECKPOINT_KIND.into(),
            spec: self.spec.clone(),
            profile: self.profile.clone(),
            objective: self.objective,
            scaler: self.scaler.clone(),
        })?;
        write_checkpoint(out, &self.params, &meta)
    }

    pub fn load<R: Read>(input: R) -> Result<Self> {
        let (params, meta) = read_checkpoint(input)?;
        let meta: Metadata = serde_json::from_str(&meta)?;
        if meta.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!("expected an estimator checkpoint, found `{}`", meta.kind)));
        }
        Self::bind(meta.spec, params, meta.profile, meta.objective, meta.scaler)
    }
}

pub fn estimate(model: &EstimatorModel, graph: &DesignGraph) -> Result<f64> {
    model.estimate_prepared(&model.prepare(graph)?)
}

/// Estimates a batch of designs in parallel; results keep input order.
pub fn estimate_batch(model: &EstimatorModel, graphs: &[DesignGraph]) -> Result<Vec<f64>> {
    use rayon::prelude::*;
    graphs.par_iter().map(|g| estimate(model, g)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub rule: OptimizerRule,
    pub batch_size: usize,
    /// Fraction of the data used for training; the rest is validation.
    pub split: f64,
    /// Refit the scaler on the training split before training.
    pub fit_scaler: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            rule: OptimizerRule::adam(1e-3),
            batch_size: 32,
            split: 0.9,
            fit_scaler: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

/// Per-epoch losses in label units, plus the epoch whose parameters were kept.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == self.best_epoch)
    }
}

/// Deterministic train/validation index split.
pub fn split_indices(count: usize, split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..count).collect();
    idx.shuffle(&mut derived_rng(seed, stream::SHUFFLE, 0));
    let n_train = ((count as f64 * split).round() as usize).clamp(1.min(count), count);
    let val = idx.split_off(n_train);
    (idx, val)
}

fn mean_loss(model: &EstimatorModel, data: &[(&PreparedGraph, f64)]) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in data.chunks(64) {
        total += model.batch_loss(&model.params, chunk)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64 * model.scaler.label_std.powi(2))
}

/// Minimizes MSE on the training split with minibatch updates. After each
/// epoch both splits are scored; the parameters with the lowest validation
/// MSE (training MSE when there is no validation split) are retained.
pub fn train_estimator(
    mut model: EstimatorModel,
    graphs: &[DesignGraph],
    labels: &[f64],
    config: &TrainConfig,
) -> Result<(EstimatorModel, History)> {
    if graphs.len() != labels.len() || graphs.is_empty() {
        return Err(Error::Config("estimator training needs one label per graph".into()));
    }
    if !(config.split > 0.0 && config.split <= 1.0) || config.batch_size == 0 {
        return Err(Error::Config("split must lie in (0, 1] and batch size be positive".into()));
    }
    let (train_idx, val_idx) = split_indices(graphs.len(), config.split, config.seed);
    if config.fit_scaler {
        let tg: Vec<DesignGraph> = train_idx.iter().map(|&i| graphs[i].clone()).collect();
        let tl: Vec<f64> = train_idx.iter().map(|&i| labels[i]).collect();
        model.scaler = Scaler::fit(&tg, &tl, model.spec.gcn_widths[0])?;
    }
    let prepared = graphs.iter().map(|g| model.prepare(g)).collect::<Result<Vec<_>>>()?;
    let train: Vec<(&PreparedGraph, f64)> = train_idx.iter().map(|&i| (&prepared[i], labels[i])).collect();
    let val: Vec<(&PreparedGraph, f64)> = val_idx.iter().map(|&i| (&prepared[i], labels[i])).collect();

    let mut opt = Optimizer::new(config.rule);
    let mut history = History::default();
    let mut best: Option<(f64, ParamSet)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut derived_rng(config.seed, stream::SHUFFLE, epoch as u64));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&PreparedGraph, f64)> = chunk.iter().map(|&i| train[i]).collect();
            let (loss, grads) = model.batch_loss_grad(&model.params, &batch)?;
            grads.accumulate_into(&mut model.params);
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    detail: format!("batch loss {loss}"),
                });
            }
            opt.step(&mut model.params).map_err(|e| Error::TrainingDiverged {
                epoch,
                detail: e.to_string(),
            })?;
        }
        let train_mse = mean_loss(&model, &train)?;
        let val_mse = mean_loss(&model, &val)?;
        if !train_mse.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                detail: format!("training MSE {train_mse}"),
            });
        }
        history.records.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
        });
        let score = if val.is_empty() { train_mse } else { val_mse };
        if best.as_ref().is_none_or(|(b, _)| score < *b) {
            history.best_epoch = epoch;
            best = Some((score, model.params.clone()));
        }
    }
    if let Some((_, params)) = best {
        model.params.copy_values_from(&params)?;
    }
    model.params.zero_grad();
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{NodeClass, SYNTHETIC_PROFILE};
    use crate::synth::{generate_design, SynthConfig};

    fn adj(rows: &[Vec<f64>]) -> WeightedAdjacency {
        WeightedAdjacency(Tensor::from_rows(rows).unwrap())
    }

    #[test]
    fn self_loop_single_node_is_plain_product() {
        let a = adj(&[vec![1.0]]);
        let x = Tensor::row(vec![2.0, -1.0]);
        let theta = Tensor::from_rows(&[vec![1.0, 3.0], vec![4.0, 0.5]]).unwrap();
        let out = gcn_layer(&a, &degree(&a), &x, &theta, Activation::Identity).unwrap();
        assert_eq!(out, x.matmul(&theta).unwrap());
    }

    #[test]
    fn two_nodes_swap_rows() {
        let a = adj(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let out = gcn_layer(&a, &degree(&a), &x, &Tensor::identity(2), Activation::Identity).unwrap();
        assert_eq!(out, Tensor::from_rows(&[vec![3.0, 4.0], vec![1.0, 2.0]]).unwrap());
    }

    #[test]
    fn isolated_node_row_is_zero() {
        let a = adj(&[vec![0.0, 2.0, 0.0], vec![2.0, 0.0, 0.0], vec![0.0, 0.0, 0.0]]);
        let x = Tensor::filled(&[3, 2], 1.5);
        let out = gcn_layer(&a, &degree(&a), &x, &Tensor::identity(2), Activation::Identity).unwrap();
        assert_eq!(out.row_slice(2), &[0.0, 0.0]);
    }

    #[test]
    fn zero_features_give_readout_of_zero() {
        let model = EstimatorModel::new(
            EstimatorSpec::default_for(6),
            SYNTHETIC_PROFILE,
            Objective::Maximize,
            3,
        )
        .unwrap();
        let mut g = DesignGraph::new(SYNTHETIC_PROFILE);
        // Transfer nodes still carry a one-hot entry, so zero it directly.
        for _ in 0..3 {
            g.add_node(NodeClass::TRANSFER, 0.0, [0.5, 0.5]);
        }
        let mut p = model.prepare(&g).unwrap();
        p.features = Tensor::zeros(p.features.shape());
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(&[1, 32]));
        let expect = model.readout.forward(&mut tape, &model.params, zero).unwrap();
        let expect = tape.scalar(expect);
        assert_eq!(model.estimate_prepared(&p).unwrap(), expect);
    }

    #[test]
    fn schema_mismatch_is_config_error() {
        let model =
            EstimatorModel::new(EstimatorSpec::default_for(6), SYNTHETIC_PROFILE, Objective::Maximize, 0).unwrap();
        let g = DesignGraph::new("other");
        assert!(matches!(estimate(&model, &g), Err(Error::Config(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model =
            EstimatorModel::new(EstimatorSpec::default_for(6), SYNTHETIC_PROFILE, Objective::Maximize, 9).unwrap();
        model.scaler.label_mean = 4.0;
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let back = EstimatorModel::load(buf.as_slice()).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.scaler, model.scaler);
        let g = generate_design(&SynthConfig::default(), 1).unwrap();
        assert_eq!(estimate(&back, &g).unwrap(), estimate(&model, &g).unwrap());
    }

    #[test]
    fn constant_labels_fit_to_constant() {
        let cfg = SynthConfig {
            n: 8,
            ..SynthConfig::default()
        };
        let graphs: Vec<_> = (0..20).map(|s| generate_design(&cfg, s).unwrap()).collect();
        let labels = vec![7.0; graphs.len()];
        let model =
            EstimatorModel::new(EstimatorSpec::default_for(6), SYNTHETIC_PROFILE, Objective::Maximize, 0).unwrap();
        let config = TrainConfig {
            epochs: 150,
            rule: OptimizerRule::adam(1e-2),
            ..TrainConfig::default()
        };
        let (model, history) = train_estimator(model, &graphs, &labels, &config).unwrap();
        assert!(history.best().unwrap().train_mse < 1e-3, "{:?}", history.best());
        assert!((estimate(&model, &graphs[0]).unwrap() - 7.0).abs() < 0.05);
    }
}
