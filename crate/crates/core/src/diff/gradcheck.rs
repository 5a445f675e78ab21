//! Central finite-difference verification of analytic gradients.

use rand::seq::index::sample;

use super::{ParamSet, Tensor};
use crate::error::Result;
use crate::seed::rng_from;

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name (or `input`) and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub tolerance: f64,
    /// Check at most this many coordinates per tensor, chosen at random.
    pub max_coords_per_tensor: Option<usize>,
    pub seed: u64,
}

impl CheckOptions {
    pub fn new(tolerance: f64) -> Self {
        CheckOptions {
            tolerance,
            max_coords_per_tensor: None,
            seed: 0,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor scales with the loss so that
/// coordinates with negligible gradient are judged on absolute error.
fn rel_error(analytic: f64, numeric: f64, loss_scale: f64) -> f64 {
    let floor = 1e-4 * loss_scale.abs().max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

struct Tracker {
    worst: f64,
    at: Option<(String, usize)>,
    checked: usize,
}

impl Tracker {
    fn record(&mut self, err: f64, name: &str, i: usize) {
        self.checked += 1;
        if err > self.worst || err.is_nan() {
            self.worst = if err.is_nan() { f64::INFINITY } else { err };
            self.at = Some((name.to_string(), i));
        }
    }

    fn report(self, tolerance: f64) -> GradCheckReport {
        GradCheckReport {
            passed: self.worst < tolerance,
            max_rel_error: self.worst,
            worst: self.at,
            checked: self.checked,
            tolerance,
        }
    }
}

fn coords(len: usize, opts: &CheckOptions, salt: u64) -> Vec<usize> {
    match opts.max_coords_per_tensor {
        Some(m) if m < len => {
            let mut rng = rng_from(opts.seed ^ salt.wrapping_mul(0x9E37_79B9));
            let mut picked = sample(&mut rng, len, m).into_vec();
            picked.sort_unstable();
            picked
        }
        _ => (0..len).collect(),
    }
}

/// Compares `params.grad` (already filled by a backward pass) against central
/// differences of `loss`.
pub fn gradient_check<F>(params: &ParamSet, mut loss: F, opts: &CheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    let base = loss(params)?;
    let mut probe = params.clone();
    let mut t = Tracker {
        worst: 0.0,
        at: None,
        checked: 0,
    };
    for (pi, p) in params.iter().enumerate() {
        for i in coords(p.value.len(), opts, pi as u64) {
            let x0 = p.value.data()[i];
            let set = |probe: &mut ParamSet, v: f64| {
                probe.get_mut(super::ParamId(pi)).value.data_mut()[i] = v;
            };
            set(&mut probe, x0 + FD_STEP);
            let up = loss(&probe)?;
            set(&mut probe, x0 - FD_STEP);
            let down = loss(&probe)?;
            set(&mut probe, x0);
            let numeric = (up - down) / (2.0 * FD_STEP);
            t.record(rel_error(p.grad.data()[i], numeric, base), &p.name, i);
        }
    }
    Ok(t.report(opts.tolerance))
}

/// Same check for the gradient with respect to an input tensor.
pub fn check_input_gradient<F>(
    input: &Tensor,
    analytic: &Tensor,
    mut loss: F,
    opts: &CheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let base = loss(input)?;
    let mut probe = input.clone();
    let mut t = Tracker {
        worst: 0.0,
        at: None,
        checked: 0,
    };
    for i in coords(input.len(), opts, u64::MAX) {
        let x0 = input.data()[i];
        probe.data_mut()[i] = x0 + FD_STEP;
        let up = loss(&probe)?;
        probe.data_mut()[i] = x0 - FD_STEP;
        let down = loss(&probe)?;
        probe.data_mut()[i] = x0;
        let numeric = (up - down) / (2.0 * FD_STEP);
        t.record(rel_error(analytic.data()[i], numeric, base), "input", i);
    }
    Ok(t.report(opts.tolerance))
}
