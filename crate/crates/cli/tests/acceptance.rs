//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Reference values come from oracles written here,
//! independently of the library code under test.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use ltr_cli::manifest::RunManifest;
use ltr_core::data::{load_dataset, Dataset, InteractionList};
use ltr_core::features::ProductFeatures;
use ltr_core::gbdt::{compute_lambda_gradients, fit_regression_tree, RegressionTree, TreeNode, TreeParams, LEAF_RIDGE};
use ltr_core::losses::{ranknet_loss, softmax_ce_loss, LabelVector};
use ltr_core::metrics::{ndcg_at_k, welch_t_test};
use ltr_core::model::RankingModel;
use ltr_core::rankers::{precompute_item_embeddings, Architecture, ItemEmbeddingStore};
use ltr_core::tensor::{Mode, Tape, Tensor};

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn cli(args: &[&str]) -> Result<ltr_cli::Outcome, String> {
    let mut full = vec!["ltr"];
    full.extend_from_slice(args);
    ltr_cli::run_from_args(full).map_err(|e| format!("`ltr {}` failed: {e:#}", args.join(" ")))
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().to_path_buf();
        Self { _dir: dir, root }
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// Small dataset plus a trained two-tower and transformer, shared by the
/// model-level criteria.
struct Tiny {
    data: PathBuf,
    test: Dataset,
    two_tower: PathBuf,
    transformer: PathBuf,
}

fn tiny(ws: &Workspace) -> Result<Tiny, String> {
    let out = ws.dir("tiny");
    let o = s(&out);
    cli(&["generate", "--preset", "tiny", "--seed", "3", "--out", &o])?;
    let train = s(&out.join("train.jsonl"));
    let test = s(&out.join("test.jsonl"));
    for arch in ["two_tower", "transformer"] {
        cli(&[
            "train", "--preset", "tiny", "--out", &o, "--train", &train, "--valid", &test, "--architecture", arch,
        ])?;
    }
    Ok(Tiny {
        data: out.join("test.jsonl"),
        test: load_dataset(&out.join("test.jsonl")).map_err(|e| e.to_string())?,
        two_tower: out.join("ce_tt.ltr"),
        transformer: out.join("ce_tr.ltr"),
    })
}

// 1 ---------------------------------------------------------------------

fn gradient_integrity(ws: &Workspace) -> Check {
    let t = Instant::now();
    let out = ws.dir("gradcheck");
    let outcome = cli(&["gradcheck", "--seed", "1", "--out", &s(&out)])?;
    let elapsed = t.elapsed();
    let m = &outcome.manifest.metrics;
    let errors: BTreeMap<&str, f64> = m
        .iter()
        .filter_map(|(k, v)| Some((k.strip_suffix(".max_rel_error")?, v.as_f64()?)))
        .collect();
    for required in ["linear", "relu", "dropout", "layer_norm", "softmax", "embedding", "self_attention", "loss_rn", "loss_ce"] {
        ensure!(errors.contains_key(required), "no `{required}` check in the suite");
    }
    for arch in ["two_tower", "cross_encoder", "transformer"] {
        ensure!(errors.keys().any(|k| k.contains(arch)), "no end-to-end `{arch}` check");
    }
    let (worst, max) = errors.iter().fold(("", 0.0f64), |a, (k, &v)| if v > a.1 { (k, v) } else { a });
    ensure!(outcome.exit_code == 0, "gradcheck exited {}", outcome.exit_code);
    ensure!(max < 1e-4, "`{worst}` max relative error {max:e} >= 1e-4");
    let report = std::fs::read_to_string(out.join("gradcheck.txt")).map_err(|e| e.to_string())?;
    ensure!(
        report.lines().filter(|l| l.starts_with("PASS")).count() == errors.len(),
        "report does not list one PASS line per check"
    );
    ensure!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    Ok(format!("{} checks, worst {worst} = {max:.2e}, {:.1}s", errors.len(), elapsed.as_secs_f64()))
}

// 2 ---------------------------------------------------------------------

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for at in 0..=p.len() {
            let mut q = p.clone();
            q.insert(at, n - 1);
            out.push(q);
        }
    }
    out
}

/// DCG of every item at its tie-broken rank, normalized by the best DCG
/// over all orderings of the list.
fn brute_ndcg(scores: &[f64], labels: &[u8], k: usize, perms: &[Vec<usize>]) -> Option<f64> {
    let dcg_of = |rank: usize, gain: u8| if rank < k { f64::from(gain) / (rank as f64 + 2.0).log2() } else { 0.0 };
    let n = scores.len();
    let mut dcg = 0.0;
    for i in 0..n {
        let rank = (0..n).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count();
        dcg += dcg_of(rank, labels[i]);
    }
    let ideal = perms
        .iter()
        .map(|p| p.iter().enumerate().map(|(r, &i)| dcg_of(r, labels[i])).sum::<f64>())
        .fold(0.0, f64::max);
    (ideal > 0.0).then(|| dcg / ideal)
}

fn ndcg_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut compared = 0usize;
    let mut worst = 0.0f64;
    for n in 1..=6usize {
        let perms = permutations(n);
        let score_sets: Vec<Vec<f64>> = (0..200)
            .map(|i| {
                (0..n)
                    .map(|_| if i % 4 == 0 { f64::from(rng.random_range(0..3)) } else { rng.random_range(-3.0..3.0) })
                    .collect()
            })
            .collect();
        for mask in 0..(1u32 << n) {
            let labels: Vec<u8> = (0..n).map(|i| ((mask >> i) & 1) as u8).collect();
            let lv = LabelVector::new(labels.clone()).map_err(|e| e.to_string())?;
            for scores in &score_sets {
                for k in [1, 2, 3, n, 15] {
                    let got = ndcg_at_k(scores, &lv, k).map_err(|e| e.to_string())?;
                    let want = brute_ndcg(scores, &labels, k, &perms);
                    match (got, want) {
                        (None, None) => {}
                        (Some(g), Some(w)) => {
                            worst = worst.max((g - w).abs());
                            ensure!((g - w).abs() <= 1e-12, "n={n} labels={labels:?} k={k} scores={scores:?}: {g} vs {w}");
                        }
                        _ => return Err(format!("defined-ness differs for labels {labels:?}: {got:?} vs {want:?}")),
                    }
                    compared += 1;
                }
            }
        }
    }
    let lv = LabelVector::new(vec![0, 1, 0]).unwrap();
    let v = ndcg_at_k(&[3.0, 2.0, 1.0], &lv, 15).unwrap().unwrap();
    ensure!((v - 1.0 / 3f64.log2()).abs() <= 1e-12 && (v - 0.63093).abs() < 5e-6, "rank-2 single positive gave {v}");
    Ok(format!("{compared} comparisons, max |diff| {worst:.1e}, rank-2 value {v:.5}"))
}

// 3 ---------------------------------------------------------------------

fn loss_closed_forms() -> Check {
    let mut worst = 0.0f64;
    for p in 1..=8usize {
        for n in 1..=8usize {
            let labels = LabelVector::new([vec![1; p], vec![0; n]].concat()).unwrap();
            for c in [0.0, 1.7] {
                let l = ranknet_loss(&vec![c; p + n], &labels).map_err(|e| e.to_string())?;
                let want = n as f64 * std::f64::consts::LN_2;
                worst = worst.max((l - want).abs());
                ensure!((l - want).abs() <= 1e-9, "RankNet P={p} N={n}: {l} vs {want}");
            }
        }
    }
    for n in 2..=50usize {
        let mut y = vec![0u8; n];
        y[n / 2] = 1;
        let l = softmax_ce_loss(&vec![0.3; n], &LabelVector::new(y).unwrap()).map_err(|e| e.to_string())?;
        worst = worst.max((l - (n as f64).ln()).abs());
        ensure!((l - (n as f64).ln()).abs() <= 1e-9, "CE n={n}: {l} vs ln n");
    }
    let mut gaps = Vec::new();
    for labels in [vec![1u8, 1, 0, 0, 0], vec![1, 0, 1, 1, 0, 0, 0, 1], vec![0, 0, 1]] {
        let positives = labels.iter().filter(|&&v| v == 1).count() as f64;
        let target: Vec<f64> = labels.iter().map(|&v| f64::from(v) / positives).collect();
        let entropy: f64 = target.iter().filter(|&&t| t > 0.0).map(|t| -t * t.ln()).sum();
        let lv = LabelVector::new(labels.clone()).unwrap();
        let mut s = vec![0.0; labels.len()];
        for _ in 0..20_000 {
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
            for (i, v) in s.clone().iter().enumerate() {
                let softmax = (v - m).exp() / z;
                s[i] -= 2.0 * (softmax - target[i]);
            }
        }
        let l = softmax_ce_loss(&s, &lv).map_err(|e| e.to_string())?;
        ensure!((l - entropy).abs() < 1e-3, "CE minimum for {labels:?}: {l} vs entropy {entropy}");
        gaps.push(l - entropy);
    }
    Ok(format!(
        "closed forms within {worst:.1e}; CE minimum minus entropy {}",
        gaps.iter().map(|g| format!("{g:.1e}")).collect::<Vec<_>>().join(", ")
    ))
}

// 4 ---------------------------------------------------------------------

fn random_lists(rng: &mut ChaCha8Rng, data: &Dataset, count: usize, min: usize, max: usize) -> Vec<InteractionList> {
    let pool: Vec<&ProductFeatures> = data.lists.iter().flat_map(|l| l.products.iter()).collect();
    (0..count)
        .map(|_| {
            let base = &data.lists[rng.random_range(0..data.lists.len())];
            let n = rng.random_range(min..=max);
            let mut products: Vec<ProductFeatures> = Vec::with_capacity(n);
            while products.len() < n {
                let p = pool[rng.random_range(0..pool.len())];
                if products.iter().all(|q| q.id != p.id) {
                    products.push(p.clone());
                }
            }
            InteractionList {
                context: base.context.clone(),
                y_c: LabelVector::zeros(n),
                y_o: LabelVector::zeros(n),
                products,
                ts: base.ts,
            }
        })
        .collect()
}

fn two_tower_serving(ws: &Workspace, tiny: &Tiny) -> Check {
    let model = RankingModel::load(&tiny.two_tower).map_err(|e| e.to_string())?;
    let RankingModel::Neural(nm) = &model else { return Err("expected a neural model".into()) };
    let path = ws.dir("serving").join("model_copy.ltr");
    model.save(&path).map_err(|e| e.to_string())?;
    let RankingModel::Neural(reloaded) = RankingModel::load(&path).map_err(|e| e.to_string())? else {
        return Err("reloaded model changed family".into());
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let lists = random_lists(&mut rng, &tiny.test, 100, 2, 30);
    let store = precompute_item_embeddings(lists.iter().flat_map(|l| l.products.iter()), &nm.ranker)
        .map_err(|e| e.to_string())?;
    let store_path = ws.dir("serving").join("items.store");
    store.save(&store_path).map_err(|e| e.to_string())?;
    let store_back = ItemEmbeddingStore::load(&store_path).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for list in &lists {
        let ids: Vec<u64> = list.products.iter().map(|p| p.id).collect();
        let direct = nm.ranker.score(&list.context, &list.products).map_err(|e| e.to_string())?;
        for (ranker, st) in [(&nm.ranker, &store), (&reloaded.ranker, &store_back), (&reloaded.ranker, &store)] {
            let via = st.score(ranker, &list.context, &ids).map_err(|e| e.to_string())?;
            for (a, b) in direct.iter().zip(via.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    ensure!(worst <= 1e-6, "max |store - direct| = {worst:e}");
    Ok(format!("100 lists, {} stored items, max |diff| {worst:.1e} incl. round trip", store.len()))
}

// 5 ---------------------------------------------------------------------

fn transformer_equivariance(tiny: &Tiny) -> Check {
    let RankingModel::Neural(nm) = RankingModel::load(&tiny.transformer).map_err(|e| e.to_string())? else {
        return Err("expected a neural model".into());
    };
    let mut ranker = nm.ranker;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let lists = random_lists(&mut rng, &tiny.test, 50, 2, 30);
    let mut worst = 0.0f64;
    for list in &lists {
        let base = ranker.score(&list.context, &list.products).map_err(|e| e.to_string())?;
        let mut perm: Vec<usize> = (0..list.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled: Vec<ProductFeatures> = perm.iter().map(|&i| list.products[i].clone()).collect();
        let got = ranker.score(&list.context, &shuffled).map_err(|e| e.to_string())?;
        for (pos, &i) in perm.iter().enumerate() {
            worst = worst.max((got[pos] - base[i]).abs());
        }
    }
    ensure!(worst <= 1e-9, "shuffled scores differ by {worst:e}");

    let Architecture::Transformer(tr) = ranker.architecture.clone() else {
        return Err("expected a transformer".into());
    };
    tr.attention.zero_value_output(&mut ranker.params);
    let mut exact = 0;
    for list in &lists {
        let full = ranker.score(&list.context, &list.products).map_err(|e| e.to_string())?;
        let mut tape = Tape::new(&ranker.params);
        let batch = ranker
            .embed_batch(&mut tape, &[&list.context], &[&list.products])
            .map_err(|e| e.to_string())?;
        let plain = tr
            .score_without_attention(&mut tape, &batch, Mode::Eval, &mut rng)
            .map_err(|e| e.to_string())?;
        ensure!(full.as_slice() == tape.value(plain).data(), "zeroed attention is not the plain path");
        exact += 1;
    }
    Ok(format!("50 lists, max permutation error {worst:.1e}; {exact}/50 exact without attention"))
}

// 6 and 10 --------------------------------------------------------------

struct Grid {
    out: PathBuf,
    metrics: BTreeMap<String, Value>,
    train_seconds: f64,
    lambdamart_rounds: Vec<f64>,
    lines: (usize, usize),
    compare_outcome: RunManifest,
}

fn count_lines(path: &Path) -> Result<usize, String> {
    Ok(std::fs::read_to_string(path).map_err(|e| e.to_string())?.lines().count())
}

fn run_grid(ws: &Workspace) -> Result<Grid, String> {
    let out = ws.dir("grid");
    let o = s(&out);
    cli(&["generate", "--preset", "paper-ratio", "--seed", "42", "--out", &o])?;
    let lines = (count_lines(&out.join("train.jsonl"))?, count_lines(&out.join("test.jsonl"))?);
    let train = s(&out.join("train.jsonl"));
    let test = s(&out.join("test.jsonl"));
    let mut train_seconds = 0.0;
    let mut models = Vec::new();
    for loss in ["ce", "rn"] {
        for arch in ["two_tower", "cross_encoder", "transformer"] {
            let r = cli(&[
                "train", "--preset", "paper-ratio", "--out", &o, "--train", &train, "--valid", &test, "--loss", loss,
                "--architecture", arch,
            ])?;
            train_seconds += r.manifest.timings["train"];
            models.push(r.manifest.outputs.keys().find(|k| k.ends_with(".ltr")).cloned().unwrap());
        }
    }
    let r = cli(&["train", "--preset", "paper-ratio", "--out", &o, "--train", &train, "--family", "lambdamart"])?;
    train_seconds += r.manifest.timings["train"];
    let lambdamart_rounds: Vec<f64> = serde_json::from_value(r.manifest.metrics["train_ndcg_by_round"].clone())
        .map_err(|e| e.to_string())?;
    models.insert(0, s(&out.join("lambdamart.ltr")));

    let mut args = vec!["compare", "--preset", "paper-ratio", "--out", &o, "--data", &test, "--baseline", "lambdamart"];
    for m in &models {
        args.push("--model");
        args.push(m);
    }
    args.extend(["--model", "@oracle", "--model", "@random"]);
    let compare = cli(&args)?;
    Ok(Grid {
        out,
        metrics: compare.manifest.metrics.clone(),
        train_seconds,
        lambdamart_rounds,
        lines,
        compare_outcome: compare.manifest,
    })
}

fn synthetic_learning(grid: &Grid) -> Check {
    ensure!(grid.lines == (61_000, 1_000), "split produced {:?} lists", grid.lines);
    let get = |name: &str| grid.metrics.get(&format!("{name}.ndcg_c")).and_then(Value::as_f64);
    let random = get("@random").ok_or("no random baseline")?;
    let oracle = get("@oracle").ok_or("no oracle")?;
    let mut parts = vec![format!("random {random:.3}"), format!("oracle {oracle:.3}")];
    let mut failures = Vec::new();
    if oracle < 0.95 {
        failures.push(format!("oracle {oracle:.4} < 0.95"));
    }
    for name in ["ce_tt", "ce_cr", "ce_tr", "rn_tt", "rn_cr", "rn_tr", "lambdamart"] {
        let v = get(name).ok_or(format!("no result for {name}"))?;
        parts.push(format!("{name} {v:.3}"));
        if v < random + 0.15 {
            failures.push(format!("{name} {v:.4} < random + 0.15"));
        }
    }
    let minutes = grid.train_seconds / 60.0;
    parts.push(format!("grid trained in {minutes:.1} min"));
    if minutes >= 60.0 {
        failures.push(format!("training took {minutes:.1} min"));
    }
    ensure!(failures.is_empty(), "{}", failures.join("; "));
    Ok(parts.join(", "))
}

fn is_signed_percent(cell: &str) -> bool {
    let body = match cell {
        "0.00%" => return true,
        c if c.starts_with('+') || c.starts_with('-') => &c[1..],
        _ => return false,
    };
    let Some(num) = body.strip_suffix('%') else { return false };
    let Some((int, frac)) = num.split_once('.') else { return false };
    !int.is_empty() && int.chars().all(|c| c.is_ascii_digit()) && frac.len() == 2 && frac.chars().all(|c| c.is_ascii_digit())
}

fn report_fidelity(grid: &Grid) -> Check {
    let table = std::fs::read_to_string(grid.out.join("comparison.txt")).map_err(|e| e.to_string())?;
    let lines: Vec<&str> = table.lines().collect();
    ensure!(lines.len() == 6, "expected 2 header lines, a rule and 3 metric rows:\n{table}");
    let groups: Vec<&str> = lines[0].split('|').map(str::trim).collect();
    ensure!(groups.len() >= 3 && groups[0] == "Metric" && groups[1] == "CE loss" && groups[2] == "RN loss", "header groups {groups:?}");
    let labels: Vec<Vec<&str>> = lines[1].split('|').skip(1).map(|g| g.split_whitespace().collect()).collect();
    ensure!(labels[0] == ["TT", "CR", "TR"] && labels[1] == ["TT", "CR", "TR"], "architecture labels {labels:?}");
    for (row, metric) in lines[3..].iter().zip(["NDCG_c", "NDCG_o", "AIV"]) {
        let cells: Vec<&str> = row.split('|').collect();
        ensure!(cells[0].trim() == metric, "row label `{}`", cells[0].trim());
        let grid_cells: Vec<&str> = cells[1..3].iter().flat_map(|c| c.split_whitespace()).collect();
        ensure!(grid_cells.len() == 6, "{metric} row has {} grid cells", grid_cells.len());
        for c in cells[1..].iter().flat_map(|c| c.split_whitespace()) {
            ensure!(is_signed_percent(c), "cell `{c}` is not a signed two-decimal percentage");
        }
    }
    let csv_rows = count_lines(&grid.out.join("comparison.csv"))? - 1;
    let models = grid.compare_outcome.config.eval.models.len();
    ensure!(csv_rows == models * 3, "CSV has {csv_rows} rows for {models} models x 3 metrics");
    let sample = lines[3].split('|').nth(1).unwrap_or("").split_whitespace().next().unwrap_or("");
    Ok(format!("2-loss x 3-architecture layout, {csv_rows} CSV rows, e.g. NDCG_c CE/TT {sample}"))
}

// 7 ---------------------------------------------------------------------

/// Exhaustive best split of `rows`: every midpoint of every feature,
/// partitioning explicitly. Ties within 1e-12 relative keep the earlier
/// (lower feature, lower threshold) candidate.
fn brute_best_split(x: &Tensor, grad: &[f64], rows: &[usize], min_leaf: usize) -> Option<(usize, f64)> {
    if rows.len() < 2 * min_leaf {
        return None;
    }
    let total: f64 = rows.iter().map(|&r| grad[r]).sum();
    let sum_sq: f64 = rows.iter().map(|&r| grad[r] * grad[r]).sum();
    let mut best: Option<(usize, f64, f64)> = None;
    for f in 0..x.cols() {
        let mut values: Vec<f64> = rows.iter().map(|&r| x.get(r, f)).collect();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let t = 0.5 * (w[0] + w[1]);
            let left: Vec<usize> = rows.iter().copied().filter(|&r| x.get(r, f) <= t).collect();
            let nl = left.len();
            let nr = rows.len() - nl;
            if nl < min_leaf || nr < min_leaf {
                continue;
            }
            let sl: f64 = left.iter().map(|&r| grad[r]).sum();
            let sr = total - sl;
            let gain = sl * sl / nl as f64 + sr * sr / nr as f64 - total * total / rows.len() as f64;
            let better = match best {
                None => gain > 0.0,
                Some((_, _, g)) => gain > g + 1e-12 * g.abs().max(1e-300),
            };
            if better {
                best = Some((f, t, gain));
            }
        }
    }
    let floor = 1e-12 * sum_sq.max(total * total).max(1e-300);
    best.filter(|b| b.2 > floor).map(|(f, t, _)| (f, t))
}

/// Walks the fitted tree and checks every split against the exhaustive
/// search over the rows reaching it, and every leaf value against
/// `Σg / (Σh + ridge)`.
fn check_tree(tree: &RegressionTree, x: &Tensor, g: &[f64], h: &[f64], p: &TreeParams) -> Result<usize, String> {
    let mut stack = vec![(0usize, (0..x.rows()).collect::<Vec<_>>())];
    let mut splits = 0;
    while let Some((node, rows)) = stack.pop() {
        match &tree.nodes[node] {
            TreeNode::Split { feature, threshold, left, right } => {
                let want = brute_best_split(x, g, &rows, p.min_samples_leaf);
                ensure!(want == Some((*feature, *threshold)), "node {node}: split ({feature}, {threshold}) but oracle {want:?}");
                let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| x.get(i, *feature) <= *threshold);
                stack.push((*left, l));
                stack.push((*right, r));
                splits += 1;
            }
            TreeNode::Leaf { value } => {
                let mut sorted = rows.clone();
                sorted.sort_unstable();
                let sg: f64 = sorted.iter().map(|&i| g[i]).sum();
                let sh: f64 = sorted.iter().map(|&i| h[i]).sum();
                let want = sg / (sh + LEAF_RIDGE);
                ensure!(*value == want, "leaf {node}: {value} vs {want}");
            }
        }
    }
    Ok(splits)
}

fn lambdamart_correctness(grid: &Grid) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_sum = 0.0f64;
    for _ in 0..500 {
        let n = rng.random_range(1..=30);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels = LabelVector::new((0..n).map(|_| u8::from(rng.random_bool(0.3))).collect()).unwrap();
        let lg = compute_lambda_gradients(&scores, &labels, 15).map_err(|e| e.to_string())?;
        let sum: f64 = lg.lambdas.iter().sum();
        worst_sum = worst_sum.max(sum.abs());
    }
    ensure!(worst_sum <= 1e-9, "lambda sum {worst_sum:e}");

    let mut splits = 0;
    for case in 0..50 {
        let rows = rng.random_range(2..=200);
        let cols = rng.random_range(1..=4);
        let data = (0..rows * cols)
            .map(|_| if case % 3 == 0 { f64::from(rng.random_range(0..5)) } else { rng.random_range(-4.0..4.0) })
            .collect();
        let x = Tensor::matrix(rows, cols, data).map_err(|e| e.to_string())?;
        let g: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..0.25)).collect();
        let p = TreeParams {
            max_depth: rng.random_range(1..6),
            num_leaves: rng.random_range(2..26),
            min_samples_leaf: rng.random_range(1..6),
        };
        let tree = fit_regression_tree(&x, &g, &h, &p).map_err(|e| e.to_string())?;
        splits += check_tree(&tree, &x, &g, &h, &p).map_err(|e| format!("case {case}: {e}"))?;
    }

    let rounds = &grid.lambdamart_rounds;
    ensure!(rounds.len() >= 11, "only {} rounds logged", rounds.len());
    let worst_drop = rounds[..11].windows(2).map(|w| w[0] - w[1]).fold(0.0f64, f64::max);
    ensure!(worst_drop <= 0.005, "training NDCG fell by {worst_drop} within the first 10 rounds");
    Ok(format!(
        "lambda sums <= {worst_sum:.1e}; {splits} splits match exhaustive search; NDCG {:.4} -> {:.4} over 10 rounds",
        rounds[0], rounds[10]
    ))
}

// 8 ---------------------------------------------------------------------

/// ln Γ by the Lanczos approximation (g = 7, 9 terms).
fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let t = x + 7.5;
    let a = C[0] + (1..9).map(|i| C[i] / (x + i as f64)).sum::<f64>();
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Regularized incomplete beta via the modified Lentz continued fraction.
fn inc_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    if x > (a + 1.0) / (a + b + 2.0) {
        return 1.0 - inc_beta(b, a, 1.0 - x);
    }
    let front = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp() / a;
    let tiny = 1e-300;
    let (mut c, mut d) = (1.0, 1.0 - (a + b) * x / (a + 1.0));
    if d.abs() < tiny {
        d = tiny;
    }
    d = 1.0 / d;
    let mut f = d;
    for m in 1..10_000 {
        let m = m as f64;
        for numerator in [
            m * (b - m) * x / ((a + 2.0 * m - 1.0) * (a + 2.0 * m)),
            -(a + m) * (a + b + m) * x / ((a + 2.0 * m) * (a + 2.0 * m + 1.0)),
        ] {
            d = 1.0 + numerator * d;
            if d.abs() < tiny {
                d = tiny;
            }
            c = 1.0 + numerator / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            f *= c * d;
        }
        if (c * d - 1.0).abs() < 1e-16 {
            break;
        }
    }
    front * f
}

fn t_two_sided_p(t: f64, dof: f64) -> f64 {
    inc_beta(dof / 2.0, 0.5, dof / (dof + t * t))
}

fn t_critical(level: f64, dof: f64) -> f64 {
    let target = 1.0 - level;
    let (mut lo, mut hi) = (0.0, 1.0);
    while t_two_sided_p(hi, dof) > target {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if t_two_sided_p(mid, dof) > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn welch_analysis(tiny: &Tiny, ws: &Workspace) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let na = rng.random_range(3..60);
        let nb = rng.random_range(3..60);
        let (ma, mb) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let (sa, sb) = (rng.random_range(0.1..2.0), rng.random_range(0.1..2.0));
        let a: Vec<f64> = (0..na).map(|_| ma + sa * rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..nb).map(|_| mb + sb * rng.random_range(-1.0..1.0)).collect();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| {
            let m = mean(v);
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        let (qa, qb) = (var(&a) / na as f64, var(&b) / nb as f64);
        let se = (qa + qb).sqrt();
        let diff = mean(&b) - mean(&a);
        let t = diff / se;
        let dof = (qa + qb).powi(2) / (qa * qa / (na as f64 - 1.0) + qb * qb / (nb as f64 - 1.0));
        let p = t_two_sided_p(t, dof);
        let half = t_critical(0.95, dof) * se;
        let r = welch_t_test(&a, &b).map_err(|e| e.to_string())?;
        let flip = if (r.diff - diff).abs() <= 1e-9 { 1.0 } else { -1.0 };
        let pairs = [
            ("t", r.t, flip * t),
            ("dof", r.dof, dof),
            ("p", r.p_value, p),
            ("ci_low", r.ci_low, if flip > 0.0 { diff - half } else { -diff - half }),
            ("ci_high", r.ci_high, if flip > 0.0 { diff + half } else { -diff + half }),
        ];
        for (name, got, want) in pairs {
            let err = (got - want).abs();
            worst = worst.max(err);
            ensure!(err <= 1e-6, "case {case} {name}: {got} vs oracle {want}");
        }
    }
    let same: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin()).collect();
    let r = welch_t_test(&same, &same).map_err(|e| e.to_string())?;
    ensure!(r.t == 0.0 && r.p_value == 1.0, "identical samples gave t={} p={}", r.t, r.p_value);

    let out = ws.dir("self_compare");
    let model = s(&tiny.two_tower);
    let outcome = cli(&[
        "compare", "--preset", "tiny", "--out", &s(&out), "--data", &s(&tiny.data), "--model", &format!("a={model}"),
        "--model", &format!("b={model}"), "--baseline", "a",
    ])?;
    let uplifts: Vec<&Value> = outcome
        .manifest
        .metrics
        .iter()
        .filter(|(k, _)| k.starts_with("b.") && k.ends_with(".uplift"))
        .map(|(_, v)| v)
        .collect();
    ensure!(uplifts.len() == 3, "expected 3 uplifts, got {}", uplifts.len());
    ensure!(uplifts.iter().all(|v| v.as_str() == Some("0.00%")), "self-comparison uplifts {uplifts:?}");
    let p_ones = outcome
        .manifest
        .metrics
        .iter()
        .filter(|(k, _)| k.starts_with("b.") && k.ends_with(".p_value"))
        .all(|(_, v)| v.as_f64() == Some(1.0));
    ensure!(p_ones, "self-comparison p-values are not all 1");
    Ok(format!("20 random pairs within {worst:.1e}; identical samples t=0 p=1; self-compare all 0.00%"))
}

// 9 ---------------------------------------------------------------------

fn numeric_leaves(v: &Value, prefix: String, out: &mut BTreeMap<String, f64>) {
    match v {
        Value::Number(n) => {
            out.insert(prefix, n.as_f64().unwrap_or(f64::NAN));
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                numeric_leaves(item, format!("{prefix}[{i}]"), out);
            }
        }
        Value::Object(map) => {
            for (k, item) in map {
                numeric_leaves(item, format!("{prefix}.{k}"), out);
            }
        }
        _ => {}
    }
}

fn same_metrics(a: &RunManifest, b: &RunManifest) -> Result<usize, String> {
    let (mut ma, mut mb) = (BTreeMap::new(), BTreeMap::new());
    numeric_leaves(&serde_json::to_value(&a.metrics).unwrap(), String::new(), &mut ma);
    numeric_leaves(&serde_json::to_value(&b.metrics).unwrap(), String::new(), &mut mb);
    ensure!(ma.keys().eq(mb.keys()), "{}: metric keys differ", a.command);
    ensure!(!ma.is_empty(), "{}: no numeric metrics", a.command);
    for (k, x) in &ma {
        let y = mb[k];
        ensure!((x - y).abs() <= 1e-10 || (x.is_nan() && y.is_nan()), "{} metric {k}: {x} vs {y}", a.command);
    }
    Ok(ma.len())
}

fn rerun(manifest: &Path, command: &str, out: &Path) -> Result<RunManifest, String> {
    Ok(cli(&[command, "--config", &s(manifest), "--out", &s(out)])?.manifest)
}

fn determinism(ws: &Workspace, grid: &Grid) -> Check {
    let first = ws.dir("det_a");
    let a = cli(&["generate", "--preset", "tiny", "--seed", "9", "--out", &s(&first)])?.manifest;
    let again = ws.dir("det_b");
    let b = rerun(&first.join("generate-manifest.json"), "generate", &again)?;
    for name in ["train.jsonl", "test.jsonl", "train.schema.json", "test.schema.json"] {
        let x = std::fs::read(first.join(name)).map_err(|e| e.to_string())?;
        let y = std::fs::read(again.join(name)).map_err(|e| e.to_string())?;
        ensure!(x == y, "{name} differs between generations");
    }
    let mut checked = same_metrics(&a, &b)?;

    let data = s(&first.join("train.jsonl"));
    let test = s(&first.join("test.jsonl"));
    let train_a = cli(&[
        "train", "--preset", "tiny", "--seed", "9", "--out", &s(&first), "--train", &data, "--valid", &test,
        "--architecture", "transformer", "--loss", "rn",
    ])?
    .manifest;
    let train_b = rerun(&first.join("train-manifest.json"), "train", &again)?;
    checked += same_metrics(&train_a, &train_b)?;
    let model_a = std::fs::read(first.join("rn_tr.ltr")).map_err(|e| e.to_string())?;
    let model_b = std::fs::read(again.join("rn_tr.ltr")).map_err(|e| e.to_string())?;
    ensure!(model_a == model_b, "retrained artifact differs");

    let gbdt_a = cli(&["train", "--preset", "tiny", "--seed", "9", "--out", &s(&first), "--train", &data, "--family", "lambdamart"])?.manifest;
    let gbdt_b = rerun(&first.join("train-manifest.json"), "train", &again)?;
    checked += same_metrics(&gbdt_a, &gbdt_b)?;

    let cmp_a = cli(&[
        "compare", "--preset", "tiny", "--out", &s(&first), "--data", &test, "--model", &s(&first.join("rn_tr.ltr")),
        "--model", &s(&first.join("lambdamart.ltr")), "--model", "@random",
    ])?
    .manifest;
    let cmp_b = rerun(&first.join("compare-manifest.json"), "compare", &again)?;
    checked += same_metrics(&cmp_a, &cmp_b)?;

    let grid_again = ws.dir("grid_rerun");
    let grid_b = rerun(&grid.out.join("compare-manifest.json"), "compare", &grid_again)?;
    checked += same_metrics(&grid.compare_outcome, &grid_b)?;
    Ok(format!("generate byte-identical; {checked} metrics reproduced across generate/train/compare reruns"))
}

// -----------------------------------------------------------------------

fn main() {
    let ws = Workspace::new();
    let started = Instant::now();
    let mut results: Vec<(u8, &str, Check, f64)> = Vec::new();
    let mut record = |id: u8, name: &'static str, f: &mut dyn FnMut() -> Check| {
        let t = Instant::now();
        let r = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|p| Err(format!("panicked: {}", p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())));
        let line = match &r {
            Ok(d) => format!("criterion {id:>2} PASS  {name}: {d}"),
            Err(e) => format!("criterion {id:>2} FAIL  {name}: {e}"),
        };
        println!("{line} [{:.1}s]", t.elapsed().as_secs_f64());
        results.push((id, name, r, t.elapsed().as_secs_f64()));
    };

    record(1, "gradient integrity", &mut || gradient_integrity(&ws));
    record(2, "NDCG oracle equivalence", &mut ndcg_oracle);
    record(3, "loss closed forms", &mut loss_closed_forms);
    let tiny = tiny(&ws);
    record(4, "two-tower serving equivalence", &mut || two_tower_serving(&ws, tiny.as_ref()?));
    record(5, "transformer permutation equivariance", &mut || transformer_equivariance(tiny.as_ref()?));
    let grid = run_grid(&ws);
    record(6, "synthetic learning", &mut || synthetic_learning(grid.as_ref()?));
    record(7, "LambdaMART correctness", &mut || lambdamart_correctness(grid.as_ref()?));
    record(8, "Welch analysis", &mut || welch_analysis(tiny.as_ref()?, &ws));
    record(9, "determinism and reproducibility", &mut || determinism(&ws, grid.as_ref()?));
    record(10, "report fidelity", &mut || report_fidelity(grid.as_ref()?));

    let failed: Vec<u8> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} criteria passed in {:.1} min",
        results.len() - failed.len(),
        results.len(),
        started.elapsed().as_secs_f64() / 60.0
    );
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
