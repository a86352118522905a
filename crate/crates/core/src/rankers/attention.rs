use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{LinearLayer, ParamSet, Tape, Tensor, Var};

/// Single-head scaled dot-product self-attention over each list, without
/// positional encoding or masking, followed by an output projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfAttention {
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub output: LinearLayer,
    pub hidden: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, hidden: usize, rng: &mut R) -> Self {
        Self {
            query: LinearLayer::new(params, &format!("{name}.query"), hidden, hidden, rng),
            key: LinearLayer::new(params, &format!("{name}.key"), hidden, hidden, rng),
            value: LinearLayer::new(params, &format!("{name}.value"), hidden, hidden, rng),
            output: LinearLayer::new(params, &format!("{name}.output"), hidden, hidden, rng),
            hidden,
        }
    }

    /// `inputs` holds consecutive lists of `n` rows each; attention never
    /// crosses list boundaries.
    pub fn forward(&self, tape: &mut Tape<'_>, inputs: Var, n: usize) -> Var {
        let q = self.query.forward(tape, inputs);
        let k = self.key.forward(tape, inputs);
        let v = self.value.forward(tape, inputs);
        let logits = tape.block_scores(q, k, n);
        let logits = tape.scale(logits, 1.0 / (self.hidden as f64).sqrt());
        let weights = tape.softmax_rows(logits);
        let mixed = tape.block_mix(weights, v, n);
        self.output.forward(tape, mixed)
    }

    pub fn zero_value_output(&self, params: &mut ParamSet) {
        self.value.zero(params);
        self.output.zero(params);
    }
}

/// Attention over one list `[n × h]`.
pub fn self_attention(inputs: &Tensor, attention: &SelfAttention, params: &ParamSet) -> Tensor {
    let n = inputs.rows();
    let mut tape = Tape::new(params);
    let x = tape.constant(inputs.clone());
    let out = attention.forward(&mut tape, x, n);
    tape.value(out).clone()
}
