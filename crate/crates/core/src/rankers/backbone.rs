use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{LayerNormParams, LinearLayer, Mode, ParamSet, Tape, Var};

/// `B(z) = LayerNorm(ReLU(Dropout(W·z + b)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualBlock {
    pub linear: LinearLayer,
    pub norm: LayerNormParams,
    pub dropout: f64,
}

/// Input projection followed by `K` skip-connected residual blocks:
/// `z_0 = P·x`, `z_k = z_{k−1} + B_k(z_{k−1})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub projection: LinearLayer,
    pub blocks: Vec<ResidualBlock>,
    pub hidden: usize,
}

impl Backbone {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        input: usize,
        hidden: usize,
        num_blocks: usize,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        assert!(num_blocks >= 1, "backbone needs at least one block");
        let projection = LinearLayer::new(params, &format!("{name}.proj"), input, hidden, rng);
        let blocks = (0..num_blocks)
            .map(|k| ResidualBlock {
                linear: LinearLayer::new(params, &format!("{name}.block{k}.linear"), hidden, hidden, rng),
                norm: LayerNormParams::new(params, &format!("{name}.block{k}.norm"), hidden),
                dropout,
            })
            .collect();
        Self {
            projection,
            blocks,
            hidden,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.projection.input
    }

    pub fn forward<R: Rng + ?Sized>(&self, tape: &mut Tape<'_>, x: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let mut z = self.projection.forward(tape, x);
        for block in &self.blocks {
            let a = block.linear.forward(tape, z);
            let d = tape.dropout(a, block.dropout, mode, rng)?;
            let r = tape.relu(d);
            let n = block.norm.forward(tape, r);
            z = tape.add(z, n);
        }
        Ok(z)
    }

    /// Zeroes every block's affine map and norm shift, making the backbone
    /// equal to its input projection.
    pub fn zero_blocks(&self, params: &mut ParamSet) {
        for b in &self.blocks {
            b.linear.zero(params);
            params.get_mut(b.norm.shift).fill(0.0);
        }
    }
}
