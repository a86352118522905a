//! Gradient-check suite covering layer primitives, both losses and every
//! architecture end to end, plus the tiny seeded fixtures it runs on.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::features::{
    ContextFeatures, EmbeddedFeature, EmbeddingTable, FeatureSchema, NumericFeature, NumericKind, NumericStats,
    ProductFeatures,
};
use crate::losses::{combined_loss_on_tape, LabelVector, LossConfig, LossKind};
use crate::rankers::{ArchitectureKind, NeuralConfig, NeuralRanker, SelfAttention};
use crate::tensor::{grad_check, LayerNormParams, LinearLayer, Mode, ParamSet, Tape, Tensor, Var};

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub passed: bool,
}

/// A small schema with every feature kind, fitted with unit statistics.
pub fn tiny_schema() -> FeatureSchema {
    let slot = |name: &str, vocab| EmbeddedFeature {
        name: name.into(),
        vocab,
        width: 2,
    };
    FeatureSchema {
        numeric: vec![
            NumericFeature {
                name: "popularity".into(),
                kind: NumericKind::PowerLaw,
                stats: Some(NumericStats { mean: 1.0, std: 0.8 }),
            },
            NumericFeature {
                name: "rating".into(),
                kind: NumericKind::Zscore,
                stats: Some(NumericStats { mean: 0.0, std: 1.0 }),
            },
        ],
        product_categorical: vec![slot("category", 6)],
        product_textual: vec![slot("title", 9)],
        context_categorical: vec![slot("query_category", 6)],
        context_textual: vec![slot("query", 9)],
    }
}

pub fn random_product<R: Rng + ?Sized>(rng: &mut R, id: u64) -> ProductFeatures {
    let words = rng.random_range(0..4);
    ProductFeatures {
        id,
        numeric: vec![rng.random_range(0.0..20.0), rng.random_range(-2.0..2.0)],
        categorical: vec![rng.random_range(0..7)],
        textual: vec![(0..words).map(|_| rng.random_range(1..9)).collect()],
        price: rng.random_range(1.0..100.0),
    }
}

pub fn random_context<R: Rng + ?Sized>(rng: &mut R) -> ContextFeatures {
    let words = rng.random_range(1..3);
    ContextFeatures {
        categorical: vec![rng.random_range(1..6)],
        textual: vec![(0..words).map(|_| rng.random_range(1..9)).collect()],
    }
}

/// Model with small widths suitable for finite-difference checks.
pub fn tiny_model(kind: ArchitectureKind, dropout: f64, seed: u64) -> Result<NeuralRanker> {
    NeuralRanker::new(
        tiny_schema(),
        NeuralConfig {
            architecture: kind,
            hidden: 4,
            blocks: 2,
            dropout,
            d_cat: 2,
            d_text: 3,
        },
        seed,
    )
}

fn outcome(name: impl Into<String>, report: crate::tensor::GradCheckReport) -> CheckOutcome {
    CheckOutcome {
        name: name.into(),
        max_rel_error: report.max_rel_error,
        coordinates: report.coordinates,
        passed: report.passed(GRADCHECK_TOLERANCE),
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("shape")
}

/// Projects a block onto fixed random weights so every output coordinate
/// influences the scalar being checked.
fn weighted_sum(tape: &mut Tape<'_>, x: Var, weights: &Tensor) -> Var {
    let w = tape.constant(weights.clone());
    let p = tape.mul(x, w);
    tape.sum(p)
}

/// Runs every check with fixed seeds.
pub fn gradcheck_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Layer primitives. Inputs are parameters so input gradients are checked too.
    {
        let mut params = ParamSet::new();
        let x = params.add("x", random_tensor(&mut rng, 3, 5));
        let layer = LinearLayer::new(&mut params, "linear", 5, 4, &mut rng);
        params.get_mut(layer.bias).data_mut().iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
        let w = random_tensor(&mut rng, 3, 4);
        let r = grad_check(
            |t| {
                let xv = t.param(x);
                let y = layer.forward(t, xv);
                weighted_sum(t, y, &w)
            },
            &params,
            GRADCHECK_EPS,
        );
        out.push(outcome("linear", r));
    }
    {
        let mut params = ParamSet::new();
        // keep entries away from the kink
        let data = (0..12)
            .map(|_| {
                let v: f64 = rng.random_range(0.05..1.0);
                if rng.random_bool(0.5) { v } else { -v }
            })
            .collect();
        let x = params.add("x", Tensor::matrix(3, 4, data)?);
        let w = random_tensor(&mut rng, 3, 4);
        let r = grad_check(
            |t| {
                let xv = t.param(x);
                let y = t.relu(xv);
                weighted_sum(t, y, &w)
            },
            &params,
            GRADCHECK_EPS,
        );
        out.push(outcome("relu", r));
    }
    {
        let mut params = ParamSet::new();
        let x = params.add("x", random_tensor(&mut rng, 3, 6));
        let w = random_tensor(&mut rng, 3, 6);
        let r = grad_check(
            |t| {
                let mut local = ChaCha8Rng::seed_from_u64(seed ^ 0xd50);
                let xv = t.param(x);
                let y = t.dropout(xv, 0.4, Mode::Train, &mut local).expect("valid rate");
                weighted_sum(t, y, &w)
            },
            &params,
            GRADCHECK_EPS,
        );
        out.push(outcome("dropout", r));
    }
    {
        let mut params = ParamSet::new();
        let x = params.add("x", random_tensor(&mut rng, 4, 5));
        let norm = LayerNormParams::new(&mut params, "norm", 5);
        for id in [norm.gain, norm.shift] {
            params.get_mut(id).data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.5..0.5));
        }
        let w = random_tensor(&mut rng, 4, 5);
        let r = grad_check(
            |t| {
                let xv = t.param(x);
                let y = norm.forward(t, xv);
                weighted_sum(t, y, &w)
            },
            &params,
            GRADCHECK_EPS,
        );
        out.push(outcome("layer_norm", r));
    }
    {
        let mut params = ParamSet::new();
        let x = params.add("x", random_tensor(&mut rng, 3, 5));
        let w = random_tensor(&mut rng, 3, 5);
        let r = grad_check(
            |t| {
                let xv = t.param(x);
                let y = t.softmax_rows(xv);
                weighted_sum(t, y, &w)
            },
            &params,
            GRADCHECK_EPS,
        );
        out.push(outcome("softmax", r));
    }
    {
        let mut params = ParamSet::new();
        let cat = EmbeddingTable::new(&mut params, "cat", 5, 3, &mut rng);
        let text = EmbeddingTable::new(&mut params, "text", 7, 3, &mut rng);
        let w = random_tensor(&mut rng, 3, 6);
        let r = grad_check(
            |t| {
                let c = t.param(cat.param);
                let c = t.index_rows(c, vec![1, 4, 1]);
                let tx = t.param(text.param);
                let b = t.bag_sum(tx, &[vec![2, 2, 5], vec![], vec![6]]);
                let joined = t.concat_cols(&[c, b]);
                weighted_sum(t, joined, &w)
            },
            &params,
            GRADCHECK_EPS,
        );
        out.push(outcome("embedding", r));
    }
    {
        let mut params = ParamSet::new();
        let x = params.add("x", random_tensor(&mut rng, 6, 4));
        let att = SelfAttention::new(&mut params, "attention", 4, &mut rng);
        let w = random_tensor(&mut rng, 6, 4);
        let r = grad_check(
            |t| {
                let xv = t.param(x);
                let y = att.forward(t, xv, 3);
                weighted_sum(t, y, &w)
            },
            &params,
            GRADCHECK_EPS,
        );
        out.push(outcome("self_attention", r));
    }

    // Losses on a batch of two 5-product lists.
    let y_c = vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let y_o = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
    for kind in [LossKind::Rn, LossKind::Ce] {
        let mut params = ParamSet::new();
        let s = params.add("scores", random_tensor(&mut rng, 10, 1));
        let cfg = LossConfig::new(kind, 0.5)?;
        let r = grad_check(
            |t| {
                let sv = t.param(s);
                combined_loss_on_tape(t, sv, y_c.clone(), y_o.clone(), 5, &cfg)
            },
            &params,
            GRADCHECK_EPS,
        );
        out.push(outcome(format!("loss_{}", kind.label().to_lowercase()), r));
    }

    // Every architecture × loss, end to end on a 5-product list, in train mode.
    let ctx = random_context(&mut rng);
    let products: Vec<ProductFeatures> = (0..5).map(|i| random_product(&mut rng, i)).collect();
    let yc = LabelVector::new(vec![0, 1, 0, 1, 0])?.to_f64();
    let yo = LabelVector::new(vec![0, 1, 0, 0, 0])?.to_f64();
    for kind in ArchitectureKind::ALL {
        for loss in [LossKind::Ce, LossKind::Rn] {
            let model = tiny_model(kind, 0.3, seed.wrapping_add(kind as u64))?;
            let cfg = LossConfig::new(loss, 0.5)?;
            let r = grad_check(
                |t| {
                    let mut local = ChaCha8Rng::seed_from_u64(seed ^ 0xa11);
                    let s = model
                        .score_batch(t, &[&ctx], &[&products], Mode::Train, &mut local)
                        .expect("fixture is well-formed");
                    combined_loss_on_tape(t, s, yc.clone(), yo.clone(), 5, &cfg)
                },
                &model.params,
                GRADCHECK_EPS,
            );
            out.push(outcome(format!("{kind}_{}", loss.label().to_lowercase()), r));
        }
    }
    Ok(out)
}
