//! Multi-positive ranking losses and their click/order combination.
//!
//! Both losses normalize by the number of positives `P_n` of the list so
//! that lists with many interactions do not dominate a batch.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::log_sum_exp;
use crate::tensor::{Tape, Var};

/// Binary relevance labels of one list with a cached positive count.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct LabelVector {
    labels: Vec<u8>,
    positives: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<u8>) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidInput(format!("label {bad} is not binary")));
        }
        let positives = labels.iter().filter(|&&v| v == 1).count();
        Ok(Self { labels, positives })
    }

    pub fn from_bools(labels: &[bool]) -> Self {
        Self::new(labels.iter().map(|&b| u8::from(b)).collect()).expect("binary")
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            labels: vec![0; n],
            positives: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.positives
    }

    pub fn negatives(&self) -> usize {
        self.labels.len() - self.positives
    }

    pub fn get(&self, i: usize) -> bool {
        self.labels[i] == 1
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.labels
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.labels.iter().map(|&v| f64::from(v)).collect()
    }
}

impl TryFrom<Vec<u8>> for LabelVector {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<LabelVector> for Vec<u8> {
    fn from(v: LabelVector) -> Self {
        v.labels
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Pairwise RankNet divided by the positive count.
    Rn,
    /// Softmax cross-entropy against positive-normalized labels.
    Ce,
}

impl LossKind {
    pub fn label(self) -> &'static str {
        match self {
            LossKind::Rn => "RN",
            LossKind::Ce => "CE",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: LossKind,
    pub alpha: f64,
}

impl LossConfig {
    pub fn new(kind: LossKind, alpha: f64) -> Result<Self> {
        let cfg = Self { kind, alpha };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::config("loss.alpha", format!("must lie in (0, 1), got {}", self.alpha)));
        }
        Ok(())
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Ce,
            alpha: 0.5,
        }
    }
}

/// `softplus(x) = log(1 + exp(x))` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_lengths(s: &[f64], y: &LabelVector) -> Result<()> {
    if s.len() != y.len() {
        return Err(Error::shape("loss", y.len(), s.len()));
    }
    Ok(())
}

/// `(1/P_n) · Σ_{i pos, j neg} log(1 + exp(−(s_i − s_j)))`; zero when the
/// list has no positive or no negative.
pub fn ranknet_loss(s: &[f64], y: &LabelVector) -> Result<f64> {
    check_lengths(s, y)?;
    Ok(ranknet_value(s, &y.to_f64()))
}

/// `−Σ ỹ_i log softmax(s)_i` with `ỹ = y / P_n`.
pub fn softmax_ce_loss(s: &[f64], y: &LabelVector) -> Result<f64> {
    check_lengths(s, y)?;
    softmax_ce_value(s, &y.to_f64())
        .ok_or_else(|| Error::InvalidInput("softmax CE requires at least one positive".into()))
}

/// `α · L(s, y_c) + (1 − α) · L(s, y_o)`; a channel without positives
/// contributes zero.
pub fn combined_loss(s: &[f64], y_c: &LabelVector, y_o: &LabelVector, config: &LossConfig) -> Result<f64> {
    config.validate()?;
    check_lengths(s, y_c)?;
    check_lengths(s, y_o)?;
    let term = |y: &LabelVector| -> Result<f64> {
        match config.kind {
            LossKind::Rn => ranknet_loss(s, y),
            LossKind::Ce if y.positives() == 0 => Ok(0.0),
            LossKind::Ce => softmax_ce_loss(s, y),
        }
    };
    Ok(config.alpha * term(y_c)? + (1.0 - config.alpha) * term(y_o)?)
}

/// Mean combined loss over a batch of equal-length lists stacked in `s`
/// (`[B·n × 1]`); `y_c`/`y_o` are the concatenated label vectors.
pub fn combined_loss_on_tape(
    tape: &mut Tape<'_>,
    s: Var,
    y_c: Vec<f64>,
    y_o: Vec<f64>,
    n: usize,
    config: &LossConfig,
) -> Var {
    let (lc, lo) = match config.kind {
        LossKind::Rn => (tape.ranknet_lists(s, y_c, n), tape.ranknet_lists(s, y_o, n)),
        LossKind::Ce => (tape.softmax_ce_lists(s, y_c, n), tape.softmax_ce_lists(s, y_o, n)),
    };
    let lc = tape.scale(lc, config.alpha);
    let lo = tape.scale(lo, 1.0 - config.alpha);
    let per_list = tape.add(lc, lo);
    tape.mean(per_list)
}

pub(crate) fn ranknet_value(s: &[f64], y: &[f64]) -> f64 {
    let positives = y.iter().filter(|&&v| v > 0.5).count();
    if positives == 0 || positives == y.len() {
        return 0.0;
    }
    let mut total = 0.0;
    for (i, &si) in s.iter().enumerate() {
        if y[i] <= 0.5 {
            continue;
        }
        for (j, &sj) in s.iter().enumerate() {
            if y[j] <= 0.5 {
                total += softplus(-(si - sj));
            }
        }
    }
    total / positives as f64
}

pub(crate) fn ranknet_grad(s: &[f64], y: &[f64], upstream: f64, ds: &mut [f64]) {
    let positives = y.iter().filter(|&&v| v > 0.5).count();
    if positives == 0 || positives == y.len() {
        return;
    }
    let scale = upstream / positives as f64;
    for i in 0..s.len() {
        if y[i] <= 0.5 {
            continue;
        }
        for j in 0..s.len() {
            if y[j] <= 0.5 {
                // d/dΔ softplus(−Δ) = −sigmoid(−Δ)
                let rho = sigmoid(-(s[i] - s[j]));
                ds[i] -= scale * rho;
                ds[j] += scale * rho;
            }
        }
    }
}

pub(crate) fn softmax_ce_value(s: &[f64], y: &[f64]) -> Option<f64> {
    let positives: f64 = y.iter().sum();
    if positives == 0.0 {
        return None;
    }
    let lse = log_sum_exp(s);
    Some(
        s.iter()
            .zip(y)
            .filter(|(_, &yy)| yy > 0.0)
            .map(|(&si, &yy)| -(yy / positives) * (si - lse))
            .sum(),
    )
}

pub(crate) fn softmax_ce_grad(s: &[f64], y: &[f64], upstream: f64, ds: &mut [f64]) {
    let positives: f64 = y.iter().sum();
    if positives == 0.0 {
        return;
    }
    let lse = log_sum_exp(s);
    for i in 0..s.len() {
        ds[i] += upstream * ((s[i] - lse).exp() - y[i] / positives);
    }
}
