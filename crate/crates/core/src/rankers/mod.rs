//! Deep scoring architectures over embedded features.
//!
//! All three share the skip-connected [`Backbone`]:
//!
//! - Two-Tower: `s_i = (W·x_c + b) · f_b(x_p_i)`; product vectors can be
//!   precomputed (see [`ItemEmbeddingStore`]).
//! - Cross-Encoder: `s_i = f_s(f_b([x_p_i, x_c]))`.
//! - Listwise Transformer: `s_i = f_g((1 + h_t_i) ⊙ h_z_i)` where `h_t` is
//!   single-head self-attention over the projected candidate list and `h_z`
//!   the Cross-Encoder backbone output.

mod attention;
mod backbone;
mod store;

pub use attention::{self_attention, SelfAttention};
pub use backbone::{Backbone, ResidualBlock};
pub use store::{precompute_item_embeddings, ItemEmbeddingStore};

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ContextFeatures, FeatureEmbedder, FeatureSchema, ProductFeatures};
use crate::tensor::{LinearLayer, Mode, ParamSet, Tape, Var};

/// Relevance scores aligned with the candidate order of one list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector(Vec<f64>);

impl ScoreVector {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if let Some(i) = scores.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("score {i} is not finite")));
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl std::ops::Deref for ScoreVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureKind {
    TwoTower,
    CrossEncoder,
    Transformer,
}

impl ArchitectureKind {
    pub const ALL: [ArchitectureKind; 3] = [Self::TwoTower, Self::CrossEncoder, Self::Transformer];

    /// Short column label used in comparison tables.
    pub fn short(self) -> &'static str {
        match self {
            Self::TwoTower => "TT",
            Self::CrossEncoder => "CR",
            Self::Transformer => "TR",
        }
    }
}

impl fmt::Display for ArchitectureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TwoTower => "two_tower",
            Self::CrossEncoder => "cross_encoder",
            Self::Transformer => "transformer",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuralConfig {
    pub architecture: ArchitectureKind,
    pub hidden: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub d_cat: usize,
    pub d_text: usize,
}

impl NeuralConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("model.hidden", "must be >= 1"));
        }
        if self.blocks == 0 {
            return Err(Error::config("model.blocks", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", format!("must lie in [0, 1), got {}", self.dropout)));
        }
        if self.d_cat == 0 || self.d_text == 0 {
            return Err(Error::config("model.d_cat/d_text", "embedding widths must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TwoTower {
    pub product: Backbone,
    pub context: LinearLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossEncoder {
    pub backbone: Backbone,
    pub head: LinearLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ListwiseTransformer {
    pub backbone: Backbone,
    pub attention_input: LinearLayer,
    pub attention: SelfAttention,
    pub head: LinearLayer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    TwoTower(TwoTower),
    CrossEncoder(CrossEncoder),
    Transformer(ListwiseTransformer),
}

impl Architecture {
    pub fn kind(&self) -> ArchitectureKind {
        match self {
            Architecture::TwoTower(_) => ArchitectureKind::TwoTower,
            Architecture::CrossEncoder(_) => ArchitectureKind::CrossEncoder,
            Architecture::Transformer(_) => ArchitectureKind::Transformer,
        }
    }
}

/// Embedded inputs of a batch of equal-length lists.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddedBatch {
    /// `[B·n × D_product]`
    pub products: Var,
    /// `[B × D_context]`
    pub contexts: Var,
    pub list_len: usize,
    pub lists: usize,
}

impl EmbeddedBatch {
    fn repeat_index(&self) -> Vec<usize> {
        (0..self.lists * self.list_len).map(|r| r / self.list_len).collect()
    }
}

impl TwoTower {
    /// `[B·n × 1]` scores of `h_c · h_p`.
    pub fn score<R: Rng + ?Sized>(&self, tape: &mut Tape<'_>, batch: &EmbeddedBatch, mode: Mode, rng: &mut R) -> Result<Var> {
        let hp = self.product.forward(tape, batch.products, mode, rng)?;
        let hc = self.context.forward(tape, batch.contexts);
        let hc = tape.index_rows(hc, batch.repeat_index());
        let prod = tape.mul(hc, hp);
        Ok(tape.row_sum(prod))
    }
}

impl CrossEncoder {
    pub fn score<R: Rng + ?Sized>(&self, tape: &mut Tape<'_>, batch: &EmbeddedBatch, mode: Mode, rng: &mut R) -> Result<Var> {
        let joint = joint_input(tape, batch);
        let hz = self.backbone.forward(tape, joint, mode, rng)?;
        Ok(self.head.forward(tape, hz))
    }
}

impl ListwiseTransformer {
    pub fn score<R: Rng + ?Sized>(&self, tape: &mut Tape<'_>, batch: &EmbeddedBatch, mode: Mode, rng: &mut R) -> Result<Var> {
        let joint = joint_input(tape, batch);
        let hz = self.backbone.forward(tape, joint, mode, rng)?;
        let u = self.attention_input.forward(tape, joint);
        let ht = self.attention.forward(tape, u, batch.list_len);
        let gate = tape.add_scalar(ht, 1.0);
        let crossed = tape.mul(gate, hz);
        Ok(self.head.forward(tape, crossed))
    }

    /// `f_g(h_z)`: the score the model reduces to when `h_t = 0`.
    pub fn score_without_attention<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        batch: &EmbeddedBatch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let joint = joint_input(tape, batch);
        let hz = self.backbone.forward(tape, joint, mode, rng)?;
        Ok(self.head.forward(tape, hz))
    }
}

/// `concat([x_p, x_c])` with the context row repeated for every candidate.
fn joint_input(tape: &mut Tape<'_>, batch: &EmbeddedBatch) -> Var {
    let ctx = tape.index_rows(batch.contexts, batch.repeat_index());
    tape.concat_cols(&[batch.products, ctx])
}

/// A deep ranker: fitted feature embedder, architecture and all parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralRanker {
    pub config: NeuralConfig,
    pub embedder: FeatureEmbedder,
    pub architecture: Architecture,
    pub params: ParamSet,
}

impl NeuralRanker {
    /// Fresh model with seeded initialization. `schema` must have fitted
    /// numeric statistics; its embedding widths are overridden by the config.
    pub fn new(schema: FeatureSchema, config: NeuralConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let schema = schema.with_widths(config.d_cat, config.d_text);
        let embedder = FeatureEmbedder::new(schema, &mut params, &mut rng)?;
        let dp = embedder.product_dim();
        let dc = embedder.context_dim();
        let h = config.hidden;
        let architecture = match config.architecture {
            ArchitectureKind::TwoTower => Architecture::TwoTower(TwoTower {
                product: Backbone::new(&mut params, "product_tower", dp, h, config.blocks, config.dropout, &mut rng),
                context: LinearLayer::new(&mut params, "context_tower", dc, h, &mut rng),
            }),
            ArchitectureKind::CrossEncoder => Architecture::CrossEncoder(CrossEncoder {
                backbone: Backbone::new(&mut params, "backbone", dp + dc, h, config.blocks, config.dropout, &mut rng),
                head: LinearLayer::new(&mut params, "score_head", h, 1, &mut rng),
            }),
            ArchitectureKind::Transformer => Architecture::Transformer(ListwiseTransformer {
                backbone: Backbone::new(&mut params, "backbone", dp + dc, h, config.blocks, config.dropout, &mut rng),
                attention_input: LinearLayer::new(&mut params, "attention_input", dp + dc, h, &mut rng),
                attention: SelfAttention::new(&mut params, "attention", h, &mut rng),
                head: LinearLayer::new(&mut params, "score_head", h, 1, &mut rng),
            }),
        };
        Ok(Self {
            config,
            embedder,
            architecture,
            params,
        })
    }

    pub fn kind(&self) -> ArchitectureKind {
        self.architecture.kind()
    }

    /// Embeds a batch of equal-length lists onto `tape`.
    pub fn embed_batch(
        &self,
        tape: &mut Tape<'_>,
        contexts: &[&ContextFeatures],
        lists: &[&[ProductFeatures]],
    ) -> Result<EmbeddedBatch> {
        if contexts.len() != lists.len() || lists.is_empty() {
            return Err(Error::InvalidInput(format!(
                "batch needs one context per list, got {} contexts for {} lists",
                contexts.len(),
                lists.len()
            )));
        }
        let n = lists[0].len();
        if n == 0 {
            return Err(Error::InvalidInput("candidate list is empty".into()));
        }
        if let Some(bad) = lists.iter().find(|l| l.len() != n) {
            return Err(Error::InvalidInput(format!(
                "batch mixes list lengths {n} and {}",
                bad.len()
            )));
        }
        let flat: Vec<&ProductFeatures> = lists.iter().flat_map(|l| l.iter()).collect();
        let products = self.embedder.embed_products(tape, &flat)?;
        let contexts = self.embedder.embed_contexts(tape, contexts)?;
        Ok(EmbeddedBatch {
            products,
            contexts,
            list_len: n,
            lists: lists.len(),
        })
    }

    /// `[B·n × 1]` scores for a batch of equal-length lists.
    pub fn score_batch<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        contexts: &[&ContextFeatures],
        lists: &[&[ProductFeatures]],
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let batch = self.embed_batch(tape, contexts, lists)?;
        self.score_embedded(tape, &batch, mode, rng)
    }

    pub fn score_embedded<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        batch: &EmbeddedBatch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        match &self.architecture {
            Architecture::TwoTower(m) => m.score(tape, batch, mode, rng),
            Architecture::CrossEncoder(m) => m.score(tape, batch, mode, rng),
            Architecture::Transformer(m) => m.score(tape, batch, mode, rng),
        }
    }

    /// Eval-mode scores for one list.
    pub fn score(&self, context: &ContextFeatures, products: &[ProductFeatures]) -> Result<ScoreVector> {
        let mut tape = Tape::new(&self.params);
        // Eval mode never draws from the generator.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = self.score_batch(&mut tape, &[context], &[products], Mode::Eval, &mut rng)?;
        ScoreVector::new(tape.value(s).data().to_vec())
    }
}
