//! LambdaMART-lite: gradient-boosted regression trees fitted to LambdaRank
//! gradients. Trees read raw numeric features and integer categorical ids
//! directly (no embeddings); categorical ids are split ordinally.

mod tree;

pub use tree::{fit_presorted, fit_regression_tree, presort, RegressionTree, TreeNode, TreeParams, LEAF_RIDGE};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::InteractionList;
use crate::error::{Error, Result};
use crate::features::FeatureSchema;
use crate::losses::LabelVector;
use crate::metrics::{ndcg_with_gains, rank_order};
use crate::rankers::ScoreVector;
use crate::tensor::Tensor;

/// Per-document first- and second-order LambdaRank accumulators.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaGrad {
    pub lambdas: Vec<f64>,
    pub hessians: Vec<f64>,
}

fn truncated_discount(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// LambdaRank gradients for arbitrary gains. For every pair with
/// `g_i > g_j`: `ρ = 1/(1 + exp(s_i − s_j))`, `w = |ΔNDCG@k|` of swapping
/// the two, `λ_i += ρw`, `λ_j −= ρw`, and both hessians grow by `ρ(1−ρ)w`.
/// Positive lambdas push a score up.
pub fn lambda_gradients_with_gains(scores: &[f64], gains: &[f64], k: usize) -> LambdaGrad {
    let n = scores.len();
    let mut out = LambdaGrad {
        lambdas: vec![0.0; n],
        hessians: vec![0.0; n],
    };
    let mut ideal = gains.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg: f64 = ideal.iter().enumerate().map(|(r, g)| g * truncated_discount(r + 1, k)).sum();
    if idcg <= 0.0 {
        return out;
    }
    let mut rank = vec![0usize; n];
    for (r, &i) in rank_order(scores).iter().enumerate() {
        rank[i] = r + 1;
    }
    for i in 0..n {
        for j in 0..n {
            if gains[i] <= gains[j] {
                continue;
            }
            let w = ((gains[i] - gains[j])
                * (truncated_discount(rank[i], k) - truncated_discount(rank[j], k)))
            .abs()
                / idcg;
            if w == 0.0 {
                continue;
            }
            let rho = 1.0 / (1.0 + (scores[i] - scores[j]).exp());
            out.lambdas[i] += rho * w;
            out.lambdas[j] -= rho * w;
            let h = rho * (1.0 - rho) * w;
            out.hessians[i] += h;
            out.hessians[j] += h;
        }
    }
    out
}

pub fn compute_lambda_gradients(scores: &[f64], labels: &LabelVector, k: usize) -> Result<LambdaGrad> {
    if scores.len() != labels.len() {
        return Err(Error::shape("compute_lambda_gradients", labels.len(), scores.len()));
    }
    Ok(lambda_gradients_with_gains(scores, &labels.to_f64(), k))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GbdtLabel {
    /// Binary click labels.
    #[default]
    Clicks,
    /// Graded relevance `g = 2·y_o + y_c` with gain `2^g − 1`.
    Graded,
}

impl GbdtLabel {
    pub fn gains(self, list: &InteractionList) -> Vec<f64> {
        match self {
            GbdtLabel::Clicks => list.y_c.to_f64(),
            GbdtLabel::Graded => (0..list.len())
                .map(|i| {
                    let g = 2 * u32::from(list.y_o.get(i)) + u32::from(list.y_c.get(i));
                    f64::from((1u32 << g) - 1)
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaMartConfig {
    pub trees: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub num_leaves: usize,
    pub min_samples_leaf: usize,
    pub cutoff: usize,
    pub label: GbdtLabel,
}

impl Default for LambdaMartConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl LambdaMartConfig {
    pub fn desk() -> Self {
        Self {
            trees: 100,
            learning_rate: 0.1,
            max_depth: 6,
            num_leaves: 25,
            min_samples_leaf: 20,
            cutoff: 15,
            label: GbdtLabel::Clicks,
        }
    }

    pub fn paper() -> Self {
        Self {
            trees: 400,
            max_depth: 12,
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("gbdt.learning_rate", "must be a finite value >= 0"));
        }
        if self.cutoff == 0 {
            return Err(Error::config("gbdt.cutoff", "must be >= 1"));
        }
        self.tree_params().validate()
    }

    fn tree_params(&self) -> TreeParams {
        TreeParams {
            max_depth: self.max_depth,
            num_leaves: self.num_leaves,
            min_samples_leaf: self.min_samples_leaf,
        }
    }
}

/// `prediction = base + lr · Σ tree(x)` with base 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtEnsemble {
    pub trees: Vec<RegressionTree>,
    pub learning_rate: f64,
    pub base_score: f64,
    pub num_features: usize,
}

impl GbdtEnsemble {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.base_score + self.learning_rate * self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
    }
}

/// Scores each row of `x`.
pub fn predict(ensemble: &GbdtEnsemble, x: &Tensor) -> Result<ScoreVector> {
    if x.shape().len() != 2 || x.cols() != ensemble.num_features {
        return Err(Error::shape("gbdt predict", ensemble.num_features, x.shape().last().copied().unwrap_or(0)));
    }
    ScoreVector::new((0..x.rows()).map(|r| ensemble.predict_row(x.row(r))).collect())
}

/// Raw numeric features, then product categorical ids, then context
/// categorical ids.
pub fn feature_count(schema: &FeatureSchema) -> usize {
    schema.numeric.len() + schema.product_categorical.len() + schema.context_categorical.len()
}

pub fn feature_names(schema: &FeatureSchema) -> Vec<String> {
    schema
        .numeric
        .iter()
        .map(|f| f.name.clone())
        .chain(schema.product_categorical.iter().map(|f| f.name.clone()))
        .chain(schema.context_categorical.iter().map(|f| f.name.clone()))
        .collect()
}

fn push_rows(list: &InteractionList, out: &mut Vec<f64>) {
    for p in &list.products {
        out.extend(&p.numeric);
        out.extend(p.categorical.iter().map(|&c| f64::from(c)));
        out.extend(list.context.categorical.iter().map(|&c| f64::from(c)));
    }
}

pub fn list_features(list: &InteractionList, schema: &FeatureSchema) -> Result<Tensor> {
    list.validate(schema)?;
    let mut data = Vec::with_capacity(list.len() * feature_count(schema));
    push_rows(list, &mut data);
    Tensor::matrix(list.len(), feature_count(schema), data)
}

/// Per-round training diagnostics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BoostingLog {
    /// Mean training NDCG_c@k after each round (index 0 is before any tree).
    pub train_ndcg: Vec<f64>,
}

fn mean_click_ndcg(lists: &[InteractionList], offsets: &[usize], scores: &[f64], k: usize) -> f64 {
    let vals: Vec<f64> = lists
        .par_iter()
        .enumerate()
        .filter_map(|(i, l)| ndcg_with_gains(&scores[offsets[i]..offsets[i + 1]], &l.y_c.to_f64(), k))
        .collect();
    vals.iter().sum::<f64>() / vals.len().max(1) as f64
}

/// Boosting loop: score all lists, compute per-list lambdas, fit one tree
/// on the pooled rows and add it with shrinkage. Fully deterministic.
pub fn train_lambdamart(
    lists: &[InteractionList],
    schema: &FeatureSchema,
    config: &LambdaMartConfig,
) -> Result<(GbdtEnsemble, BoostingLog)> {
    config.validate()?;
    if lists.is_empty() {
        return Err(Error::InvalidInput("LambdaMART needs a non-empty training set".into()));
    }
    let cols = feature_count(schema);
    let mut offsets = Vec::with_capacity(lists.len() + 1);
    offsets.push(0);
    let mut data = Vec::new();
    for (i, l) in lists.iter().enumerate() {
        l.validate(schema).map_err(|e| Error::InvalidInput(format!("training list {i}: {e}")))?;
        push_rows(l, &mut data);
        offsets.push(offsets[i] + l.len());
    }
    let rows = offsets[lists.len()];
    let x = Tensor::matrix(rows, cols, data)?;
    let gains: Vec<Vec<f64>> = lists.iter().map(|l| config.label.gains(l)).collect();

    let mut ensemble = GbdtEnsemble {
        trees: Vec::with_capacity(config.trees),
        learning_rate: config.learning_rate,
        base_score: 0.0,
        num_features: cols,
    };
    let mut scores = vec![0.0; rows];
    let mut log = BoostingLog {
        train_ndcg: vec![mean_click_ndcg(lists, &offsets, &scores, config.cutoff)],
    };
    let params = config.tree_params();
    let order = presort(&x);
    for round in 0..config.trees {
        let grads: Vec<LambdaGrad> = (0..lists.len())
            .into_par_iter()
            .map(|i| lambda_gradients_with_gains(&scores[offsets[i]..offsets[i + 1]], &gains[i], config.cutoff))
            .collect();
        let mut lambdas = Vec::with_capacity(rows);
        let mut hessians = Vec::with_capacity(rows);
        for g in grads {
            lambdas.extend(g.lambdas);
            hessians.extend(g.hessians);
        }
        let tree = fit_presorted(&x, &order, &lambdas, &hessians, &params)?;
        for (r, s) in scores.iter_mut().enumerate() {
            *s += config.learning_rate * tree.predict_row(x.row(r));
        }
        ensemble.trees.push(tree);
        let ndcg = mean_click_ndcg(lists, &offsets, &scores, config.cutoff);
        log::debug!("round {}: train NDCG_c@{} = {ndcg:.5}", round + 1, config.cutoff);
        log.train_ndcg.push(ndcg);
    }
    Ok((ensemble, log))
}

/// A trained ensemble together with the feature layout it was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub ensemble: GbdtEnsemble,
    pub schema: FeatureSchema,
    pub config: LambdaMartConfig,
}

impl GbdtModel {
    pub fn score(&self, list: &InteractionList) -> Result<ScoreVector> {
        predict(&self.ensemble, &list_features(list, &self.schema)?)
    }
}
