use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, InteractionList, Provenance};
use crate::error::{Error, Result};
use crate::features::{
    ContextFeatures, EmbeddedFeature, FeatureSchema, NumericFeature, NumericKind, ProductFeatures,
};
use crate::losses::LabelVector;
use crate::rankers::ScoreVector;

pub const GENERATOR_VERSION: &str = "planted-v1";

const CATALOG_STREAM: u64 = 0x00ca_7a10;
const LIST_STREAM: u64 = 0x0011_5700;
const LABEL_STREAM: u64 = 0x001a_be10;
const DEVICES: u32 = 4;
const POOL_SIZE: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub lists: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub catalog_size: usize,
    pub numeric_features: usize,
    pub categories: u32,
    pub brands: u32,
    pub vocab: u32,
    pub title_words: usize,
    pub query_words: usize,
    /// Probability that a candidate comes from the query's category.
    pub on_topic: f64,
    pub click_rate: f64,
    pub order_rate: f64,
    /// Slope `a` of the click model `sigmoid(a·u + b)`.
    pub click_sharpness: f64,
    pub affinity_strength: f64,
    pub text_weight: f64,
    pub utility_seed: u64,
    pub start_ts: i64,
    pub span_seconds: i64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            lists: 62_000,
            min_len: 10,
            max_len: 30,
            catalog_size: 5_000,
            numeric_features: 4,
            categories: 20,
            brands: 50,
            vocab: 300,
            title_words: 6,
            query_words: 3,
            on_topic: 0.4,
            click_rate: 0.15,
            order_rate: 0.3,
            click_sharpness: 8.0,
            affinity_strength: 1.0,
            text_weight: 0.6,
            utility_seed: 7,
            start_ts: 1_600_000_000,
            span_seconds: 90 * 86_400,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |key: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("data.generator.{key}"), "must be >= 1"))
            } else {
                Ok(())
            }
        };
        positive("lists", self.lists)?;
        positive("catalog_size", self.catalog_size)?;
        positive("numeric_features", self.numeric_features)?;
        positive("categories", self.categories as usize)?;
        positive("brands", self.brands as usize)?;
        positive("vocab", self.vocab as usize)?;
        positive("title_words", self.title_words)?;
        positive("query_words", self.query_words)?;
        if self.min_len < 2 {
            return Err(Error::config("data.generator.min_len", "lists need at least 2 products"));
        }
        if self.max_len < self.min_len {
            return Err(Error::config("data.generator.max_len", "must be >= min_len"));
        }
        for (key, v) in [
            ("click_rate", self.click_rate),
            ("order_rate", self.order_rate),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::config(
                    format!("data.generator.{key}"),
                    format!("must lie strictly between 0 and 1, got {v}"),
                ));
            }
        }
        if !(0.0..=1.0).contains(&self.on_topic) {
            return Err(Error::config("data.generator.on_topic", "must lie in [0, 1]"));
        }
        if !(self.click_sharpness > 0.0 && self.click_sharpness.is_finite()) {
            return Err(Error::config("data.generator.click_sharpness", "must be positive"));
        }
        if self.span_seconds < 1 {
            return Err(Error::config("data.generator.span_seconds", "must be >= 1"));
        }
        Ok(())
    }

    pub fn schema(&self) -> FeatureSchema {
        let slot = |name: &str, vocab: u32| EmbeddedFeature {
            name: name.into(),
            vocab: vocab as usize + 1,
            width: 8,
        };
        FeatureSchema {
            numeric: (0..self.numeric_features)
                .map(|j| NumericFeature {
                    name: format!("num{j}"),
                    kind: numeric_kind(j),
                    stats: None,
                })
                .collect(),
            product_categorical: vec![slot("category", self.categories), slot("brand", self.brands)],
            product_textual: vec![slot("title", self.vocab)],
            context_categorical: vec![slot("query_category", self.categories), slot("device", DEVICES)],
            context_textual: vec![slot("query", self.vocab)],
        }
    }
}

fn numeric_kind(j: usize) -> NumericKind {
    if j % 2 == 0 {
        NumericKind::PowerLaw
    } else {
        NumericKind::Zscore
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NumericLaw {
    kind: NumericKind,
    /// Location and scale of the feature (of `log(1 + x)` for power-law).
    mean: f64,
    std: f64,
    weight: f64,
}

/// The hidden relevance function `u(c, p)` behind the generated clicks:
/// a linear term over standardized numeric features, a query-category ×
/// product-category affinity, and query/title word overlap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedUtility {
    numeric: Vec<NumericLaw>,
    categories: usize,
    affinity: Vec<f64>,
    text_weight: f64,
}

impl PlantedUtility {
    pub fn from_config(config: &GeneratorConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.utility_seed);
        let mut numeric: Vec<NumericLaw> = (0..config.numeric_features)
            .map(|j| {
                let kind = numeric_kind(j);
                let (mean, std) = match kind {
                    NumericKind::PowerLaw => (rng.random_range(0.5..2.5), rng.random_range(0.6..1.4)),
                    NumericKind::Zscore => (rng.random_range(-3.0..5.0), rng.random_range(0.5..3.0)),
                };
                let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                NumericLaw {
                    kind,
                    mean,
                    std,
                    weight: sign * rng.random_range(0.5..1.0),
                }
            })
            .collect();
        let norm = numeric.iter().map(|l| l.weight * l.weight).sum::<f64>().sqrt();
        for l in &mut numeric {
            l.weight /= norm;
        }
        let c = config.categories as usize + 1;
        let noise = Normal::new(0.0, 0.25 * config.affinity_strength).expect("finite std");
        let mut affinity = vec![0.0; c * c];
        for q in 1..c {
            for p in 1..c {
                affinity[q * c + p] = if q == p {
                    config.affinity_strength
                } else {
                    noise.sample(&mut rng)
                };
            }
        }
        Self {
            numeric,
            categories: c,
            affinity,
            text_weight: config.text_weight,
        }
    }

    pub fn utility(&self, context: &ContextFeatures, product: &ProductFeatures) -> f64 {
        let numeric: f64 = self
            .numeric
            .iter()
            .zip(&product.numeric)
            .map(|(law, &x)| {
                let v = match law.kind {
                    NumericKind::PowerLaw => x.max(0.0).ln_1p(),
                    NumericKind::Zscore => x,
                };
                law.weight * (v - law.mean) / law.std
            })
            .sum();
        let q = context.categorical.first().map_or(0, |&v| v as usize);
        let p = product.categorical.first().map_or(0, |&v| v as usize);
        let affinity = if q < self.categories && p < self.categories {
            self.affinity[q * self.categories + p]
        } else {
            0.0
        };
        let text = match (context.textual.first(), product.textual.first()) {
            (Some(query), Some(title)) if !query.is_empty() => {
                let hits = query.iter().filter(|w| title.contains(w)).count();
                self.text_weight * hits as f64 / query.len() as f64
            }
            _ => 0.0,
        };
        numeric + affinity + text
    }

    /// Oracle scores: the planted utility of every candidate.
    pub fn score(&self, list: &InteractionList) -> ScoreVector {
        ScoreVector::new(list.products.iter().map(|p| self.utility(&list.context, p)).collect())
            .expect("utility is finite for finite features")
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn stream_rng(seed: u64, salt: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    rng.set_stream(stream);
    rng
}

struct Catalog {
    products: Vec<ProductFeatures>,
    by_category: Vec<Vec<usize>>,
    pools: Vec<Vec<u32>>,
}

fn draw_word<R: Rng + ?Sized>(rng: &mut R, pool: &[u32], vocab: u32, topical: f64) -> u32 {
    if rng.random_bool(topical) {
        *pool.choose(rng).expect("non-empty pool")
    } else {
        rng.random_range(1..=vocab)
    }
}

fn build_catalog(config: &GeneratorConfig, law: &PlantedUtility, seed: u64) -> Catalog {
    let mut rng = stream_rng(seed, CATALOG_STREAM, 0);
    let pools: Vec<Vec<u32>> = (0..=config.categories)
        .map(|_| (0..POOL_SIZE).map(|_| rng.random_range(1..=config.vocab)).collect())
        .collect();
    let price_offset: Vec<f64> = (0..=config.categories).map(|_| rng.random_range(-0.7..0.7)).collect();
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut by_category = vec![Vec::new(); config.categories as usize + 1];
    let products = (0..config.catalog_size)
        .map(|i| {
            let category = rng.random_range(1..=config.categories);
            by_category[category as usize].push(i);
            let numeric = law
                .numeric
                .iter()
                .map(|l| {
                    let v = l.mean + l.std * std_normal.sample(&mut rng);
                    match l.kind {
                        NumericKind::PowerLaw => v.exp_m1().max(0.0),
                        NumericKind::Zscore => v,
                    }
                })
                .collect();
            let words = rng.random_range(2..=config.title_words.max(2));
            let title = (0..words)
                .map(|_| draw_word(&mut rng, &pools[category as usize], config.vocab, 0.7))
                .collect();
            let price = (3.0 + price_offset[category as usize] + 0.6 * std_normal.sample(&mut rng)).exp();
            ProductFeatures {
                id: i as u64 + 1,
                numeric,
                categorical: vec![category, rng.random_range(1..=config.brands)],
                textual: vec![title],
                price: (price * 100.0).round() / 100.0,
            }
        })
        .collect();
    Catalog {
        products,
        by_category,
        pools,
    }
}

fn draw_list(config: &GeneratorConfig, catalog: &Catalog, seed: u64, index: usize) -> (ContextFeatures, Vec<ProductFeatures>, i64) {
    let mut rng = stream_rng(seed, LIST_STREAM, index as u64);
    let query_category = rng.random_range(1..=config.categories);
    let qwords = rng.random_range(1..=config.query_words);
    let pool = &catalog.pools[query_category as usize];
    let query: Vec<u32> = (0..qwords).map(|_| draw_word(&mut rng, pool, config.vocab, 0.8)).collect();
    let context = ContextFeatures {
        categorical: vec![query_category, rng.random_range(1..=DEVICES)],
        textual: vec![query],
    };

    let n = rng.random_range(config.min_len..=config.max_len);
    let on_topic = &catalog.by_category[query_category as usize];
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    while chosen.len() < n {
        let mut pick = 0;
        for _ in 0..8 {
            pick = if !on_topic.is_empty() && rng.random_bool(config.on_topic) {
                *on_topic.choose(&mut rng).expect("non-empty")
            } else {
                rng.random_range(0..catalog.products.len())
            };
            if !chosen.contains(&pick) {
                break;
            }
        }
        chosen.push(pick);
    }
    let products = chosen.into_iter().map(|i| catalog.products[i].clone()).collect();

    let step = config.span_seconds as f64 / config.lists as f64;
    let ts = config.start_ts + ((index as f64 + rng.random::<f64>()) * step).floor() as i64;
    (context, products, ts)
}

/// Expected click count of a list conditioned on at least one click.
fn conditional_clicks(logits: &[f64], bias: f64) -> f64 {
    let probs: Vec<f64> = logits.iter().map(|&l| sigmoid(l + bias)).collect();
    let log_none: f64 = probs.iter().map(|p| (-p).ln_1p()).sum();
    let any = -log_none.exp_m1();
    if any < 1e-300 {
        1.0
    } else {
        probs.iter().sum::<f64>() / any
    }
}

/// Bias `b` that makes the realized click rate, after enforcing at least
/// one click per list, equal `target`.
fn calibrate_bias(logits: &[Vec<f64>], target: f64) -> Result<f64> {
    let items: usize = logits.iter().map(Vec::len).sum();
    let rate = |b: f64| logits.iter().map(|l| conditional_clicks(l, b)).sum::<f64>() / items as f64;
    let (mut lo, mut hi) = (-200.0, 200.0);
    let (rlo, rhi) = (rate(lo), rate(hi));
    if target < rlo || target > rhi {
        return Err(Error::Generation(format!(
            "click rate {target} is infeasible: with at least one click per list the rate lies in [{rlo:.4}, {rhi:.4}]"
        )));
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Click vector drawn from independent Bernoulli(`probs`) conditioned on at
/// least one success: the first click position is drawn from its exact
/// conditional law and later positions stay independent. This has the same
/// distribution as redrawing until a click appears.
fn conditional_clicks_sample<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> Vec<u8> {
    let log_none: f64 = probs.iter().map(|p| (-p).ln_1p()).sum();
    let any = -log_none.exp_m1();
    let mut y = vec![0u8; probs.len()];
    let first = if any < 1e-300 {
        probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .expect("non-empty list")
    } else {
        let mut u = rng.random::<f64>() * any;
        let mut survive = 1.0;
        let mut pick = probs.len() - 1;
        for (i, &p) in probs.iter().enumerate() {
            let mass = survive * p;
            if u < mass {
                pick = i;
                break;
            }
            u -= mass;
            survive *= 1.0 - p;
        }
        pick
    };
    y[first] = 1;
    for i in first + 1..probs.len() {
        y[i] = u8::from(rng.random_bool(probs[i]));
    }
    y
}

/// Deterministic in `(config, seed)`: lists are drawn on independent
/// per-index streams, so the parallel fan-out does not affect the output.
pub fn generate_synthetic_dataset(config: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let law = PlantedUtility::from_config(config);
    let catalog = build_catalog(config, &law, seed);

    let drawn: Vec<(ContextFeatures, Vec<ProductFeatures>, i64)> = (0..config.lists)
        .into_par_iter()
        .map(|i| draw_list(config, &catalog, seed, i))
        .collect();
    let utilities: Vec<Vec<f64>> = drawn
        .par_iter()
        .map(|(c, ps, _)| ps.iter().map(|p| law.utility(c, p)).collect())
        .collect();
    let logits: Vec<Vec<f64>> = utilities
        .iter()
        .map(|u| u.iter().map(|v| config.click_sharpness * v).collect())
        .collect();
    let bias = calibrate_bias(&logits, config.click_rate)?;
    log::debug!("click bias calibrated to {bias:.4}");

    let lists: Vec<InteractionList> = drawn
        .into_par_iter()
        .zip(utilities.into_par_iter())
        .enumerate()
        .map(|(i, ((context, products, ts), u))| {
            let mut rng = stream_rng(seed, LABEL_STREAM, i as u64);
            let probs: Vec<f64> = u.iter().map(|&v| sigmoid(config.click_sharpness * v + bias)).collect();
            let y_c = conditional_clicks_sample(&mut rng, &probs);
            let y_o: Vec<u8> = y_c
                .iter()
                .zip(&u)
                .map(|(&c, &v)| u8::from(c == 1 && rng.random_bool(config.order_rate * sigmoid(v))))
                .collect();
            Ok(InteractionList {
                context,
                products,
                y_c: LabelVector::new(y_c)?,
                y_o: LabelVector::new(y_o)?,
                ts,
            })
        })
        .collect::<Result<_>>()?;

    let mut schema = config.schema();
    schema.fit_numeric(lists.iter().flat_map(|l| l.products.iter()))?;
    Ok(Dataset {
        lists,
        schema,
        provenance: Provenance {
            seed: Some(seed),
            generator_version: Some(GENERATOR_VERSION.to_string()),
            generator: Some(config.clone()),
            note: String::new(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(lists: usize) -> GeneratorConfig {
        GeneratorConfig {
            lists,
            ..GeneratorConfig::default()
        }
    }

    #[test]
    fn deterministic_bytes() {
        let a = generate_synthetic_dataset(&cfg(300), 11).unwrap();
        let b = generate_synthetic_dataset(&cfg(300), 11).unwrap();
        let bytes = |d: &Dataset| serde_json::to_vec(&d.lists).unwrap();
        assert_eq!(bytes(&a), bytes(&b));
        let c = generate_synthetic_dataset(&cfg(300), 12).unwrap();
        assert_ne!(bytes(&a), bytes(&c));
    }

    #[test]
    fn contract_holds() {
        let ds = generate_synthetic_dataset(&cfg(2000), 3).unwrap();
        assert_eq!(ds.len(), 2000);
        for l in &ds.lists {
            assert!(l.len() >= 10 && l.len() <= 30);
            assert!(l.y_c.positives() >= 1);
            assert!((0..l.len()).all(|i| !l.y_o.get(i) || l.y_c.get(i)));
            assert!(l.validate(&ds.schema).unwrap().is_empty());
        }
        assert!(ds.lists.windows(2).all(|w| w[0].ts <= w[1].ts));
        assert!(ds.schema.is_fitted());
    }

    #[test]
    fn click_rate_is_calibrated() {
        let config = GeneratorConfig {
            lists: 10_000,
            min_len: 20,
            max_len: 20,
            click_rate: 0.15,
            ..GeneratorConfig::default()
        };
        let ds = generate_synthetic_dataset(&config, 21).unwrap();
        let clicks: usize = ds.lists.iter().map(|l| l.y_c.positives()).sum();
        let rate = clicks as f64 / (10_000.0 * 20.0);
        assert!((rate - 0.15).abs() <= 0.01, "realized rate {rate}");
    }

    #[test]
    fn infeasible_rate_is_a_generation_error() {
        let config = GeneratorConfig {
            lists: 200,
            min_len: 2,
            max_len: 2,
            click_rate: 0.1,
            ..GeneratorConfig::default()
        };
        assert!(matches!(generate_synthetic_dataset(&config, 1), Err(Error::Generation(_))));
    }

    #[test]
    fn invalid_config_names_key() {
        let bad = GeneratorConfig {
            click_rate: 1.5,
            ..GeneratorConfig::default()
        };
        match generate_synthetic_dataset(&bad, 1) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "data.generator.click_rate"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn conditional_sampler_matches_rejection_frequencies() {
        let probs = [0.05, 0.2, 0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut direct = [0usize; 8];
        let mut rejected = [0usize; 8];
        let code = |y: &[u8]| y.iter().enumerate().map(|(i, &b)| (b as usize) << i).sum::<usize>();
        let draws = 200_000;
        for _ in 0..draws {
            direct[code(&conditional_clicks_sample(&mut rng, &probs))] += 1;
            loop {
                let y: Vec<u8> = probs.iter().map(|&p| u8::from(rng.random_bool(p))).collect();
                if y.contains(&1) {
                    rejected[code(&y)] += 1;
                    break;
                }
            }
        }
        assert_eq!(direct[0], 0);
        for k in 1..8 {
            let a = direct[k] as f64 / draws as f64;
            let b = rejected[k] as f64 / draws as f64;
            assert!((a - b).abs() < 0.01, "pattern {k}: {a} vs {b}");
        }
    }

    #[test]
    fn utility_is_reconstructable() {
        let config = cfg(50);
        let ds = generate_synthetic_dataset(&config, 9).unwrap();
        let stored = ds.provenance.generator.clone().unwrap();
        let law = PlantedUtility::from_config(&stored);
        assert_eq!(law, PlantedUtility::from_config(&config));
        let s = law.score(&ds.lists[0]);
        assert_eq!(s.len(), ds.lists[0].len());
    }
}
