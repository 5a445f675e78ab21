//! Neural building blocks on top of the tape.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::masked_softmax;
use super::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Identity => x,
        }
    }
}

/// Layer widths `[in, hidden.., out]` with one activation per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activations: Vec<Activation>,
}

impl MlpSpec {
    /// `hidden` activation on every layer but the last, which gets `output`.
    pub fn new(widths: &[usize], hidden: Activation, output: Activation) -> Self {
        let layers = widths.len().saturating_sub(1);
        let activations = (0..layers)
            .map(|i| if i + 1 == layers { output } else { hidden })
            .collect();
        MlpSpec {
            widths: widths.to_vec(),
            activations,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.activations.len() + 1 != self.widths.len() {
            return Err(Error::Config(
                "an MLP needs at least one layer and one activation per layer".into(),
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config("MLP widths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub name: String,
    layers: Vec<(ParamId, ParamId)>,
}

impl Mlp {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::with_capacity(spec.activations.len());
        for (i, w) in spec.widths.windows(2).enumerate() {
            let wid = params.add_glorot(format!("{name}.w{i}"), w[0], w[1], rng)?;
            let bid = params.add_zeros(format!("{name}.b{i}"), &[1, w[1]])?;
            layers.push((wid, bid));
        }
        Ok(Mlp {
            spec,
            name: name.to_string(),
            layers,
        })
    }

    /// Re-attaches to parameters created earlier under the same name.
    pub fn bind(params: &ParamSet, name: &str, spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        for (i, w) in spec.widths.windows(2).enumerate() {
            let find = |n: String, shape: [usize; 2]| {
                let id = params
                    .id(&n)
                    .ok_or_else(|| Error::Config(format!("missing parameter `{n}`")))?;
                if params.get(id).value.shape() != shape {
                    return Err(Error::shape(n, "checkpoint shape differs from spec"));
                }
                Ok(id)
            };
            layers.push((
                find(format!("{name}.w{i}"), [w[0], w[1]])?,
                find(format!("{name}.b{i}"), [1, w[1]])?,
            ));
        }
        Ok(Mlp {
            spec,
            name: name.to_string(),
            layers,
        })
    }

    pub fn layer_params(&self, layer: usize) -> (ParamId, ParamId) {
        self.layers[layer]
    }

    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, input: Var) -> Result<Var> {
        let mut x = input;
        for (i, (&(w, b), act)) in self.layers.iter().zip(&self.spec.activations).enumerate() {
            let width = tape.value(x).cols();
            if width != self.spec.widths[i] {
                return Err(Error::shape(
                    format!("{} layer {i}", self.name),
                    format!("input width {width}, expected {}", self.spec.widths[i]),
                ));
            }
            let wv = tape.param(params, w);
            let bv = tape.param(params, b);
            let pre = tape.affine(x, wv, bv)?;
            x = act.apply(tape, pre);
        }
        Ok(x)
    }

    /// Continues a forward pass whose first-layer pre-activation was computed
    /// by the caller (used when the first layer is evaluated in pieces).
    pub fn forward_from_first_preactivation(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        pre: Var,
    ) -> Result<Var> {
        let mut x = self.spec.activations[0].apply(tape, pre);
        for (&(w, b), act) in self.layers.iter().zip(&self.spec.activations).skip(1) {
            let wv = tape.param(params, w);
            let bv = tape.param(params, b);
            let pre = tape.affine(x, wv, bv)?;
            x = act.apply(tape, pre);
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruCellSpec {
    pub input_width: usize,
    pub state_width: usize,
}

/// Gated recurrent update `h' = h + u * (c - h)` with reset gate `r`,
/// update gate `u` and candidate `c = tanh(x Wc + (r * h) Uc + bc)`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub spec: GruCellSpec,
    /// Input weights for reset, update and candidate, stacked as columns.
    w: ParamId,
    /// Recurrent weights for reset and update.
    u_gates: ParamId,
    u_cand: ParamId,
    /// Biases for reset, update and candidate.
    b: ParamId,
}

impl GruCell {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, spec: GruCellSpec, rng: &mut R) -> Result<Self> {
        if spec.input_width == 0 || spec.state_width == 0 {
            return Err(Error::Config("GRU widths must be positive".into()));
        }
        let s = spec.state_width;
        let w = params.add_glorot(format!("{name}.w"), spec.input_width, 3 * s, rng)?;
        let u_gates = params.add_glorot(format!("{name}.u_gates"), s, 2 * s, rng)?;
        let u_cand = params.add_glorot(format!("{name}.u_cand"), s, s, rng)?;
        let b = params.add_zeros(format!("{name}.b"), &[1, 3 * s])?;
        Ok(GruCell {
            spec,
            w,
            u_gates,
            u_cand,
            b,
        })
    }

    pub fn bind(params: &ParamSet, name: &str, spec: GruCellSpec) -> Result<Self> {
        let find = |n: &str| {
            params
                .id(&format!("{name}.{n}"))
                .ok_or_else(|| Error::Config(format!("missing parameter `{name}.{n}`")))
        };
        Ok(GruCell {
            spec,
            w: find("w")?,
            u_gates: find("u_gates")?,
            u_cand: find("u_cand")?,
            b: find("b")?,
        })
    }

    pub fn bias_id(&self) -> ParamId {
        self.b
    }

    /// `state` is `n x state_width`, `message` is `n x input_width`.
    pub fn forward(&self, tape: &mut Tape, params: &ParamSet, state: Var, message: Var) -> Result<Var> {
        let s = self.spec.state_width;
        let (sv, mv) = (tape.value(state), tape.value(message));
        if sv.cols() != s || mv.cols() != self.spec.input_width || sv.rows() != mv.rows() {
            return Err(Error::shape(
                "gru_cell",
                format!(
                    "state {:?}, message {:?}, expected widths {s} and {}",
                    sv.shape(),
                    mv.shape(),
                    self.spec.input_width
                ),
            ));
        }
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        let ug = tape.param(params, self.u_gates);
        let uc = tape.param(params, self.u_cand);

        let xw = tape.affine(message, w, b)?;
        let hu = tape.matmul(state, ug)?;
        let x_gates = tape.slice_cols(xw, 0, 2 * s)?;
        let gates_pre = tape.add(x_gates, hu)?;
        let gates = tape.sigmoid(gates_pre);
        let reset = tape.slice_cols(gates, 0, s)?;
        let update = tape.slice_cols(gates, s, 2 * s)?;
        let rh = tape.mul(reset, state)?;
        let rhu = tape.matmul(rh, uc)?;
        let x_cand = tape.slice_cols(xw, 2 * s, 3 * s)?;
        let cand_pre = tape.add(x_cand, rhu)?;
        let cand = tape.tanh(cand_pre);
        let delta = tape.sub(cand, state)?;
        let step = tape.mul(update, delta)?;
        tape.add(state, step)
    }
}

/// Masked softmax over all entries of `logits`; masked entries are exactly 0.
pub fn softmax(logits: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if !logits.same_shape(mask) {
        return Err(Error::shape(
            "softmax",
            format!("logits {:?}, mask {:?}", logits.shape(), mask.shape()),
        ));
    }
    let m: Vec<bool> = mask.data().iter().map(|&v| v != 0.0).collect();
    Tensor::new(logits.shape().to_vec(), masked_softmax(logits.data(), &m)?)
}

pub fn kl_standard_normal(mu: &Tensor, sigma: &Tensor) -> Result<f64> {
    if !mu.same_shape(sigma) {
        return Err(Error::shape(
            "kl_standard_normal",
            format!("mu {:?}, sigma {:?}", mu.shape(), sigma.shape()),
        ));
    }
    if sigma.data().iter().any(|&s| !(s > 0.0)) {
        return Err(Error::Domain("sigma must be strictly positive".into()));
    }
    Ok(mu
        .data()
        .iter()
        .zip(sigma.data())
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
        .sum())
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::shape(
            "mse",
            format!("pred {:?}, target {:?}", pred.shape(), target.shape()),
        ));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / pred.len() as f64)
}
