//! Dense embeddings of raw product and context features.
//!
//! A product becomes `concat(normalized numerics, categorical embeddings,
//! bag-of-words text embeddings)`; a context is built the same way without
//! the numeric block. Every categorical and textual slot owns its own table
//! and row 0 of every table is the unknown-id row.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NumericKind {
    /// `log(1 + x)` followed by z-scoring in log space.
    PowerLaw,
    Zscore,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NumericStats {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericFeature {
    pub name: String,
    pub kind: NumericKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<NumericStats>,
}

/// A categorical or textual slot: vocabulary size (including the reserved
/// unknown id 0) and embedding width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddedFeature {
    pub name: String,
    pub vocab: usize,
    pub width: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub numeric: Vec<NumericFeature>,
    pub product_categorical: Vec<EmbeddedFeature>,
    pub product_textual: Vec<EmbeddedFeature>,
    pub context_categorical: Vec<EmbeddedFeature>,
    pub context_textual: Vec<EmbeddedFeature>,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        let slots = self
            .product_categorical
            .iter()
            .chain(&self.product_textual)
            .chain(&self.context_categorical)
            .chain(&self.context_textual);
        for f in slots {
            if f.width < 1 {
                return Err(Error::config(format!("schema.{}.width", f.name), "must be >= 1"));
            }
            if f.vocab < 2 {
                return Err(Error::config(
                    format!("schema.{}.vocab", f.name),
                    "must be >= 2 (id 0 is reserved for unknown)",
                ));
            }
        }
        Ok(())
    }

    /// `N + Σ d_cat + Σ d_text` over product slots.
    pub fn product_dim(&self) -> usize {
        self.numeric.len()
            + self.product_categorical.iter().map(|f| f.width).sum::<usize>()
            + self.product_textual.iter().map(|f| f.width).sum::<usize>()
    }

    pub fn context_dim(&self) -> usize {
        self.context_categorical.iter().map(|f| f.width).sum::<usize>()
            + self.context_textual.iter().map(|f| f.width).sum::<usize>()
    }

    /// Overrides every categorical width with `d_cat` and every textual
    /// width with `d_text`.
    pub fn with_widths(mut self, d_cat: usize, d_text: usize) -> Self {
        for f in self.product_categorical.iter_mut().chain(&mut self.context_categorical) {
            f.width = d_cat;
        }
        for f in self.product_textual.iter_mut().chain(&mut self.context_textual) {
            f.width = d_text;
        }
        self
    }

    pub fn is_fitted(&self) -> bool {
        self.numeric.iter().all(|f| f.stats.is_some())
    }

    /// Fits every numeric feature on the given (training) products.
    pub fn fit_numeric<'a>(&mut self, products: impl Iterator<Item = &'a ProductFeatures>) -> Result<()> {
        let mut columns = vec![Vec::new(); self.numeric.len()];
        for p in products {
            if p.numeric.len() != self.numeric.len() {
                return Err(Error::shape("fit_numeric", self.numeric.len(), p.numeric.len()));
            }
            for (col, v) in columns.iter_mut().zip(&p.numeric) {
                col.push(*v);
            }
        }
        for (f, col) in self.numeric.iter_mut().zip(&columns) {
            f.stats = Some(fit_numeric_stats(col, f.kind).map_err(|e| match e {
                Error::InvalidInput(m) => Error::InvalidInput(format!("numeric feature `{}`: {m}", f.name)),
                other => other,
            })?);
        }
        Ok(())
    }

    /// Checks that two schemas describe the same feature layout; fitted
    /// statistics and embedding widths are ignored.
    pub fn check_compatible(&self, other: &FeatureSchema) -> Result<()> {
        fn names<'a>(fs: impl Iterator<Item = (&'a str, usize)>) -> Vec<(&'a str, usize)> {
            fs.collect()
        }
        let pairs = [
            (
                "numeric",
                names(self.numeric.iter().map(|f| (f.name.as_str(), 0))),
                names(other.numeric.iter().map(|f| (f.name.as_str(), 0))),
            ),
            (
                "product_categorical",
                names(self.product_categorical.iter().map(|f| (f.name.as_str(), f.vocab))),
                names(other.product_categorical.iter().map(|f| (f.name.as_str(), f.vocab))),
            ),
            (
                "product_textual",
                names(self.product_textual.iter().map(|f| (f.name.as_str(), f.vocab))),
                names(other.product_textual.iter().map(|f| (f.name.as_str(), f.vocab))),
            ),
            (
                "context_categorical",
                names(self.context_categorical.iter().map(|f| (f.name.as_str(), f.vocab))),
                names(other.context_categorical.iter().map(|f| (f.name.as_str(), f.vocab))),
            ),
            (
                "context_textual",
                names(self.context_textual.iter().map(|f| (f.name.as_str(), f.vocab))),
                names(other.context_textual.iter().map(|f| (f.name.as_str(), f.vocab))),
            ),
        ];
        for (slot, a, b) in pairs {
            if a != b {
                return Err(Error::InvalidInput(format!(
                    "schema mismatch in {slot}: model has {a:?}, data has {b:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProductFeatures {
    #[serde(default)]
    pub id: u64,
    #[serde(rename = "num")]
    pub numeric: Vec<f64>,
    #[serde(rename = "cat")]
    pub categorical: Vec<u32>,
    #[serde(rename = "text")]
    pub textual: Vec<Vec<u32>>,
    pub price: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ContextFeatures {
    #[serde(rename = "cat")]
    pub categorical: Vec<u32>,
    #[serde(rename = "text")]
    pub textual: Vec<Vec<u32>>,
}

/// Population mean/std of one training column. Power-law features are
/// measured on `log(1 + x)`.
pub fn fit_numeric_stats(values: &[f64], kind: NumericKind) -> Result<NumericStats> {
    if values.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "at least 2 samples are needed to fit statistics, got {}",
            values.len()
        )));
    }
    let transformed: Vec<f64> = match kind {
        NumericKind::Zscore => values.to_vec(),
        NumericKind::PowerLaw => values.iter().map(|&x| power_law(x)).collect::<Result<_>>()?,
    };
    let n = transformed.len() as f64;
    let mean = transformed.iter().sum::<f64>() / n;
    let var = transformed.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let mut std = var.sqrt();
    if !(std > 0.0) {
        log::warn!("numeric feature has zero variance; clamping std to 1");
        std = 1.0;
    }
    Ok(NumericStats { mean, std })
}

fn power_law(x: f64) -> Result<f64> {
    if x < 0.0 || x.is_nan() {
        return Err(Error::InvalidInput(format!("power-law feature value must be >= 0, got {x}")));
    }
    Ok(x.ln_1p())
}

pub fn normalize_numeric(x: f64, kind: NumericKind, stats: &NumericStats) -> Result<f64> {
    let v = match kind {
        NumericKind::Zscore => x,
        NumericKind::PowerLaw => power_law(x)?,
    };
    Ok((v - stats.mean) / stats.std)
}

/// Embedding matrix `[vocab × width]` stored in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    pub param: ParamId,
    pub vocab: usize,
    pub width: usize,
}

impl EmbeddingTable {
    /// Rows drawn from N(0, 0.01²).
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, name: &str, vocab: usize, width: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        let data = (0..vocab * width).map(|_| normal.sample(rng)).collect();
        let param = params.add(
            format!("{name}.embedding"),
            Tensor::matrix(vocab, width, data).expect("shape"),
        );
        Self { param, vocab, width }
    }

    /// Row index for `id`; out-of-range ids map to the unknown row 0.
    pub fn row_index(&self, id: u32) -> usize {
        let id = id as usize;
        if id < self.vocab {
            id
        } else {
            0
        }
    }
}

pub fn embed_categorical(id: u32, table: &EmbeddingTable, params: &ParamSet) -> Vec<f64> {
    params.get(table.param).row(table.row_index(id)).to_vec()
}

/// Sum of word rows with multiplicity; the empty bag is the zero vector.
pub fn embed_text_bow(bag: &[u32], table: &EmbeddingTable, params: &ParamSet) -> Vec<f64> {
    let t = params.get(table.param);
    let mut out = vec![0.0; table.width];
    for &w in bag {
        for (o, v) in out.iter_mut().zip(t.row(table.row_index(w))) {
            *o += v;
        }
    }
    out
}

/// Fitted schema plus the embedding tables of every slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureEmbedder {
    pub schema: FeatureSchema,
    pub product_categorical: Vec<EmbeddingTable>,
    pub product_textual: Vec<EmbeddingTable>,
    pub context_categorical: Vec<EmbeddingTable>,
    pub context_textual: Vec<EmbeddingTable>,
}

impl FeatureEmbedder {
    pub fn new<R: Rng + ?Sized>(schema: FeatureSchema, params: &mut ParamSet, rng: &mut R) -> Result<Self> {
        schema.validate()?;
        if !schema.is_fitted() {
            return Err(Error::InvalidInput("feature schema has unfitted numeric statistics".into()));
        }
        let mut tables = |slots: &[EmbeddedFeature], prefix: &str| -> Vec<EmbeddingTable> {
            slots
                .iter()
                .map(|f| EmbeddingTable::new(params, &format!("{prefix}.{}", f.name), f.vocab, f.width, rng))
                .collect()
        };
        let product_categorical = tables(&schema.product_categorical, "product.cat");
        let product_textual = tables(&schema.product_textual, "product.text");
        let context_categorical = tables(&schema.context_categorical, "context.cat");
        let context_textual = tables(&schema.context_textual, "context.text");
        Ok(Self {
            schema,
            product_categorical,
            product_textual,
            context_categorical,
            context_textual,
        })
    }

    pub fn product_dim(&self) -> usize {
        self.schema.product_dim()
    }

    pub fn context_dim(&self) -> usize {
        self.schema.context_dim()
    }

    pub fn check_product(&self, p: &ProductFeatures) -> Result<()> {
        let s = &self.schema;
        if p.numeric.len() != s.numeric.len() {
            return Err(Error::shape("product numeric features", s.numeric.len(), p.numeric.len()));
        }
        if p.categorical.len() != s.product_categorical.len() {
            return Err(Error::shape(
                "product categorical features",
                s.product_categorical.len(),
                p.categorical.len(),
            ));
        }
        if p.textual.len() != s.product_textual.len() {
            return Err(Error::shape("product textual features", s.product_textual.len(), p.textual.len()));
        }
        Ok(())
    }

    pub fn check_context(&self, c: &ContextFeatures) -> Result<()> {
        let s = &self.schema;
        if c.categorical.len() != s.context_categorical.len() {
            return Err(Error::shape(
                "context categorical features",
                s.context_categorical.len(),
                c.categorical.len(),
            ));
        }
        if c.textual.len() != s.context_textual.len() {
            return Err(Error::shape("context textual features", s.context_textual.len(), c.textual.len()));
        }
        Ok(())
    }

    /// Normalized numeric block of one product.
    pub fn normalized_numeric(&self, p: &ProductFeatures) -> Result<Vec<f64>> {
        self.schema
            .numeric
            .iter()
            .zip(&p.numeric)
            .map(|(f, &x)| {
                let stats = f
                    .stats
                    .as_ref()
                    .ok_or_else(|| Error::InvalidInput(format!("numeric feature `{}` is not fitted", f.name)))?;
                normalize_numeric(x, f.kind, stats)
            })
            .collect()
    }

    /// `[rows × D_product]` block, one row per product.
    pub fn embed_products(&self, tape: &mut Tape<'_>, products: &[&ProductFeatures]) -> Result<Var> {
        let mut parts = Vec::new();
        if !self.schema.numeric.is_empty() {
            let mut data = Vec::with_capacity(products.len() * self.schema.numeric.len());
            for p in products {
                self.check_product(p)?;
                data.extend(self.normalized_numeric(p)?);
            }
            parts.push(tape.constant(Tensor::matrix(products.len(), self.schema.numeric.len(), data)?));
        } else {
            for p in products {
                self.check_product(p)?;
            }
        }
        for (j, table) in self.product_categorical.iter().enumerate() {
            let idx = products.iter().map(|p| table.row_index(p.categorical[j])).collect();
            let t = tape.param(table.param);
            parts.push(tape.index_rows(t, idx));
        }
        for (j, table) in self.product_textual.iter().enumerate() {
            let bags: Vec<Vec<usize>> = products
                .iter()
                .map(|p| p.textual[j].iter().map(|&w| table.row_index(w)).collect())
                .collect();
            let t = tape.param(table.param);
            parts.push(tape.bag_sum(t, &bags));
        }
        if parts.is_empty() {
            return Err(Error::InvalidInput("schema declares no product features".into()));
        }
        Ok(if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts) })
    }

    /// `[rows × D_context]` block, one row per context.
    pub fn embed_contexts(&self, tape: &mut Tape<'_>, contexts: &[&ContextFeatures]) -> Result<Var> {
        for c in contexts {
            self.check_context(c)?;
        }
        let mut parts = Vec::new();
        for (j, table) in self.context_categorical.iter().enumerate() {
            let idx = contexts.iter().map(|c| table.row_index(c.categorical[j])).collect();
            let t = tape.param(table.param);
            parts.push(tape.index_rows(t, idx));
        }
        for (j, table) in self.context_textual.iter().enumerate() {
            let bags: Vec<Vec<usize>> = contexts
                .iter()
                .map(|c| c.textual[j].iter().map(|&w| table.row_index(w)).collect())
                .collect();
            let t = tape.param(table.param);
            parts.push(tape.bag_sum(t, &bags));
        }
        if parts.is_empty() {
            return Err(Error::InvalidInput("schema declares no context features".into()));
        }
        Ok(if parts.len() == 1 { parts[0] } else { tape.concat_cols(&parts) })
    }
}

/// `x_p` for a single product.
pub fn build_product_embedding(p: &ProductFeatures, embedder: &FeatureEmbedder, params: &ParamSet) -> Result<Vec<f64>> {
    let mut tape = Tape::new(params);
    let v = embedder.embed_products(&mut tape, &[p])?;
    Ok(tape.value(v).data().to_vec())
}

/// `x_c` for a single context.
pub fn build_context_embedding(c: &ContextFeatures, embedder: &FeatureEmbedder, params: &ParamSet) -> Result<Vec<f64>> {
    let mut tape = Tape::new(params);
    let v = embedder.embed_contexts(&mut tape, &[c])?;
    Ok(tape.value(v).data().to_vec())
}
