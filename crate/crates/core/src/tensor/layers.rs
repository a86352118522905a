use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::tape::dot;
use super::{ParamId, ParamSet, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Affine map `W·x + b` with `W: [out × in]`, `b: [out]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl LinearLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), xavier_uniform(output, input, rng));
        let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[output]));
        Self {
            weight,
            bias,
            input,
            output,
        }
    }

    /// Applies the layer to every row of `x: [r × in]`.
    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let xw = tape.matmul_t(x, w);
        tape.add_row(xw, b)
    }

    pub fn zero(&self, params: &mut ParamSet) {
        params.get_mut(self.weight).fill(0.0);
        params.get_mut(self.bias).fill(0.0);
    }
}

/// `W·x + b` on a single vector.
pub fn linear_forward(x: &[f64], layer: &LinearLayer, params: &ParamSet) -> Result<Vec<f64>> {
    if x.len() != layer.input {
        return Err(Error::shape("linear_forward", layer.input, x.len()));
    }
    let w = params.get(layer.weight);
    let b = params.get(layer.bias);
    Ok((0..layer.output).map(|o| dot(w.row(o), x) + b.data()[o]).collect())
}

/// Gain and shift of a layer normalization.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl LayerNormParams {
    pub fn new(params: &mut ParamSet, name: &str, width: usize) -> Self {
        let gain = params.add(format!("{name}.gain"), Tensor::vector(vec![1.0; width]));
        let shift = params.add(format!("{name}.shift"), Tensor::zeros(&[width]));
        Self {
            gain,
            shift,
            eps: LAYER_NORM_EPS,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Var {
        let g = tape.param(self.gain);
        let s = tape.param(self.shift);
        tape.layer_norm(x, g, s, self.eps)
    }
}

/// `(z − mean) / sqrt(popvar + eps) · gain + shift`.
pub fn layer_norm(z: &[f64], gain: &[f64], shift: &[f64], eps: f64) -> Result<Vec<f64>> {
    if gain.len() != z.len() || shift.len() != z.len() {
        return Err(Error::shape(
            "layer_norm",
            z.len(),
            format!("gain {} / shift {}", gain.len(), shift.len()),
        ));
    }
    if !(eps > 0.0) {
        return Err(Error::InvalidInput(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let mut xhat = vec![0.0; z.len()];
    let mut out = vec![0.0; z.len()];
    layer_norm_row(z, gain, shift, eps, &mut xhat, &mut out);
    Ok(out)
}

/// Normalizes one row into `out`, leaving the standardized values in
/// `xhat`. Returns `1/sqrt(popvar + eps)`.
pub(crate) fn layer_norm_row(
    z: &[f64],
    gain: &[f64],
    shift: &[f64],
    eps: f64,
    xhat: &mut [f64],
    out: &mut [f64],
) -> f64 {
    let c = z.len() as f64;
    let mean = z.iter().sum::<f64>() / c;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
    let inv_std = 1.0 / (var + eps).sqrt();
    for k in 0..z.len() {
        xhat[k] = (z[k] - mean) * inv_std;
        out[k] = xhat[k] * gain[k] + shift[k];
    }
    inv_std
}

/// Inverted dropout on a single vector.
pub fn dropout<R: Rng + ?Sized>(z: &[f64], rate: f64, mode: Mode, rng: &mut R) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::config("dropout", format!("rate must be in [0, 1), got {rate}")));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(z.to_vec());
    }
    let mask = dropout_mask(z.len(), rate, rng);
    Ok(z.iter().zip(&mask).map(|(v, m)| v * m).collect())
}

pub(crate) fn dropout_mask<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect()
}

pub fn softmax(s: &[f64]) -> Vec<f64> {
    let mut out = s.to_vec();
    softmax_in_place(&mut out);
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Log-sum-exp with max subtraction.
pub(crate) fn log_sum_exp(s: &[f64]) -> f64 {
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + s.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Uniform(−a, a) with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(out: usize, input: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (input + out).max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("finite bound");
    let data = (0..out * input).map(|_| dist.sample(rng)).collect();
    Tensor {
        shape: vec![out, input],
        data,
    }
}
