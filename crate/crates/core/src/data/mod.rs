//! Interaction lists, datasets, the temporal split and the line-delimited
//! JSON file format.
//!
//! A dataset lives in two files: `<name>.jsonl` with one list per line and
//! `<name>.schema.json` holding the [`FeatureSchema`] and provenance.
//!
//! ```text
//! {"context":{"cat":[3,1],"text":[[12,40]]},
//!  "products":[{"id":17,"num":[2.0,0.4,-1.1,0.3],"cat":[3,9],"text":[[12,7,88]],"price":24.9}, ...],
//!  "y_c":[1,0,...],"y_o":[0,0,...],"ts":1600000123}
//! ```

mod io;
mod synthetic;

pub use io::{load_dataset, read_schema_file, save_dataset, schema_path, DATA_FORMAT_VERSION};
pub use synthetic::{generate_synthetic_dataset, GeneratorConfig, PlantedUtility, GENERATOR_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ContextFeatures, FeatureSchema, ProductFeatures};
use crate::losses::LabelVector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InteractionList {
    pub context: ContextFeatures,
    pub products: Vec<ProductFeatures>,
    pub y_c: LabelVector,
    pub y_o: LabelVector,
    pub ts: i64,
}

impl InteractionList {
    pub fn len(&self) -> usize {
        self.products.len()
    }

    pub fn is_empty(&self) -> bool {
        self.products.is_empty()
    }

    pub fn prices(&self) -> Vec<f64> {
        self.products.iter().map(|p| p.price).collect()
    }

    pub fn has_positive(&self) -> bool {
        self.y_c.positives() > 0 || self.y_o.positives() > 0
    }

    /// Hard shape checks against `schema`. Soft contract violations (no
    /// positives, an order without a click) are returned as warnings.
    pub fn validate(&self, schema: &FeatureSchema) -> Result<Vec<String>> {
        let n = self.products.len();
        if n < 2 {
            return Err(Error::InvalidInput(format!("list has {n} products, at least 2 are required")));
        }
        if self.y_c.len() != n {
            return Err(Error::shape("y_c", n, self.y_c.len()));
        }
        if self.y_o.len() != n {
            return Err(Error::shape("y_o", n, self.y_o.len()));
        }
        if self.context.categorical.len() != schema.context_categorical.len() {
            return Err(Error::shape(
                "context.cat",
                schema.context_categorical.len(),
                self.context.categorical.len(),
            ));
        }
        if self.context.textual.len() != schema.context_textual.len() {
            return Err(Error::shape("context.text", schema.context_textual.len(), self.context.textual.len()));
        }
        for p in &self.products {
            if p.numeric.len() != schema.numeric.len() {
                return Err(Error::shape("products.num", schema.numeric.len(), p.numeric.len()));
            }
            if p.categorical.len() != schema.product_categorical.len() {
                return Err(Error::shape("products.cat", schema.product_categorical.len(), p.categorical.len()));
            }
            if p.textual.len() != schema.product_textual.len() {
                return Err(Error::shape("products.text", schema.product_textual.len(), p.textual.len()));
            }
            if !p.price.is_finite() || p.price < 0.0 {
                return Err(Error::InvalidInput(format!("product {} has invalid price {}", p.id, p.price)));
            }
            if let Some(x) = p.numeric.iter().find(|x| !x.is_finite()) {
                return Err(Error::InvalidInput(format!("product {} has non-finite feature {x}", p.id)));
            }
        }
        let mut warnings = Vec::new();
        if !self.has_positive() {
            warnings.push("list has no click or order".to_string());
        }
        if (0..n).any(|i| self.y_o.get(i) && !self.y_c.get(i)) {
            warnings.push("an order without a click".to_string());
        }
        Ok(warnings)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub generator_version: Option<String>,
    pub generator: Option<GeneratorConfig>,
    /// Free-form note such as which split this file holds.
    #[serde(default)]
    pub note: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub lists: Vec<InteractionList>,
    pub schema: FeatureSchema,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn products(&self) -> impl Iterator<Item = &ProductFeatures> {
        self.lists.iter().flat_map(|l| l.products.iter())
    }

    /// Validates every list; warnings are logged, shape errors name the list.
    pub fn validate(&self) -> Result<usize> {
        self.schema.validate()?;
        let mut warned = 0;
        for (i, list) in self.lists.iter().enumerate() {
            let warnings = list
                .validate(&self.schema)
                .map_err(|e| Error::InvalidInput(format!("list {i}: {e}")))?;
            for w in &warnings {
                log::warn!("list {i}: {w}");
            }
            warned += usize::from(!warnings.is_empty());
        }
        Ok(warned)
    }
}

/// Number of training lists for a split fraction; the small slack keeps
/// exact ratios such as 61/62 of 62 000 from rounding up by one.
fn train_count(count: usize, fraction: f64) -> usize {
    ((fraction * count as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Orders lists by timestamp and cuts at the timestamp of the
/// `⌈fraction·count⌉`-th list. Lists sharing the boundary timestamp stay in
/// train, so every test list is strictly later than every train list.
/// Numeric normalization statistics are fitted on the train part and
/// copied into both schemas.
pub fn temporal_split(dataset: &Dataset, train_fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::config(
            "data.train_fraction",
            format!("must lie strictly between 0 and 1, got {train_fraction}"),
        ));
    }
    if dataset.lists.len() < 2 {
        return Err(Error::InvalidInput("temporal split needs at least 2 lists".into()));
    }
    let mut order: Vec<usize> = (0..dataset.lists.len()).collect();
    order.sort_by_key(|&i| dataset.lists[i].ts);
    let first = dataset.lists[order[0]].ts;
    let last = dataset.lists[order[order.len() - 1]].ts;
    if first == last {
        return Err(Error::InvalidInput(
            "all lists share one timestamp, so no temporal boundary exists; \
             use distinct timestamps or split the data by another key before loading"
                .into(),
        ));
    }
    let k = train_count(order.len(), train_fraction).clamp(1, order.len());
    let boundary = dataset.lists[order[k - 1]].ts;
    let (train_idx, test_idx): (Vec<usize>, Vec<usize>) =
        order.into_iter().partition(|&i| dataset.lists[i].ts <= boundary);
    if test_idx.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no list is later than the boundary timestamp {boundary}; lower the train fraction"
        )));
    }

    let mut schema = dataset.schema.clone();
    schema.fit_numeric(train_idx.iter().flat_map(|&i| dataset.lists[i].products.iter()))?;
    let part = |idx: Vec<usize>, note: &str| Dataset {
        lists: idx.into_iter().map(|i| dataset.lists[i].clone()).collect(),
        schema: schema.clone(),
        provenance: Provenance {
            note: note.to_string(),
            ..dataset.provenance.clone()
        },
    };
    Ok((part(train_idx, "train"), part(test_idx, "test")))
}
