use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Architecture, NeuralRanker, ScoreVector};
use crate::artifact;
use crate::error::{Error, Result};
use crate::features::{ContextFeatures, ProductFeatures};
use crate::tensor::{linear_forward, Mode, Tape};

const CHUNK: usize = 1024;

/// Precomputed Two-Tower product vectors `h_p`, keyed by product id.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemEmbeddingStore {
    pub hidden: usize,
    embeddings: BTreeMap<u64, Vec<f64>>,
}

impl ItemEmbeddingStore {
    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn get(&self, id: u64) -> Result<&[f64]> {
        self.embeddings.get(&id).map(Vec::as_slice).ok_or(Error::NotFound(id))
    }

    /// Scores candidates by id: `h_c · h_p` with `h_c` computed on the fly.
    pub fn score(&self, model: &NeuralRanker, context: &ContextFeatures, ids: &[u64]) -> Result<ScoreVector> {
        let Architecture::TwoTower(tt) = &model.architecture else {
            return Err(Error::InvalidInput("embedding store scoring needs a two-tower model".into()));
        };
        let xc = crate::features::build_context_embedding(context, &model.embedder, &model.params)?;
        let hc = linear_forward(&xc, &tt.context, &model.params)?;
        let scores = ids
            .iter()
            .map(|&id| Ok(self.get(id)?.iter().zip(&hc).map(|(a, b)| a * b).sum()))
            .collect::<Result<Vec<f64>>>()?;
        ScoreVector::new(scores)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        artifact::write_file(path, artifact::Kind::EmbeddingStore, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        artifact::read_file(path, artifact::Kind::EmbeddingStore)
    }
}

/// Runs the product tower in eval mode over `products`; duplicate ids keep
/// the first occurrence.
pub fn precompute_item_embeddings<'a>(
    products: impl IntoIterator<Item = &'a ProductFeatures>,
    model: &NeuralRanker,
) -> Result<ItemEmbeddingStore> {
    let Architecture::TwoTower(tt) = &model.architecture else {
        return Err(Error::InvalidInput("item embeddings can only be precomputed for a two-tower model".into()));
    };
    let mut unique: BTreeMap<u64, &ProductFeatures> = BTreeMap::new();
    for p in products {
        unique.entry(p.id).or_insert(p);
    }
    let all: Vec<&ProductFeatures> = unique.values().copied().collect();
    let mut store = ItemEmbeddingStore {
        hidden: tt.product.hidden,
        embeddings: BTreeMap::new(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in all.chunks(CHUNK) {
        let mut tape = Tape::new(&model.params);
        let x = model.embedder.embed_products(&mut tape, chunk)?;
        let h = tt.product.forward(&mut tape, x, Mode::Eval, &mut rng)?;
        let hv = tape.value(h);
        for (r, p) in chunk.iter().enumerate() {
            store.embeddings.insert(p.id, hv.row(r).to_vec());
        }
    }
    Ok(store)
}
