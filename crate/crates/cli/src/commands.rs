use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use ltr_core::data::{
    generate_synthetic_dataset, load_dataset, save_dataset, schema_path, temporal_split, Dataset, InteractionList,
    PlantedUtility,
};
use ltr_core::diagnostics::{gradcheck_suite, GRADCHECK_TOLERANCE};
use ltr_core::gbdt::{train_lambdamart, GbdtModel};
use ltr_core::io_util::write_atomic;
use ltr_core::losses::LossKind;
use ltr_core::metrics::{
    compare_models, evaluate_scorer, format_comparison_table, format_percent, welch_t_test_at, EvalConfig,
    MetricReport, ModelMetrics, RandomScorer, Scorer, TableColumn,
};
use ltr_core::model::{NeuralModel, RankingModel};
use ltr_core::rankers::{ArchitectureKind, NeuralRanker, ScoreVector};
use ltr_core::train::train_neural;

use crate::config::{ModelFamily, RunConfig};
use crate::manifest::Recorder;
use crate::Outcome;

pub fn dispatch(command: &str, cfg: &RunConfig) -> Result<Outcome> {
    match command {
        "generate" => generate(cfg),
        "train" => train(cfg),
        "evaluate" => evaluate(cfg, false),
        "compare" => evaluate(cfg, true),
        "abtest" => abtest(cfg),
        "gradcheck" => gradcheck(cfg),
        other => bail!("unknown command `{other}`"),
    }
}

fn ok(rec: Recorder) -> Result<Outcome> {
    Ok(Outcome {
        exit_code: 0,
        manifest: rec.finish()?,
    })
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str, flag: &str) -> Result<&'a Path> {
    match value {
        Some(p) => Ok(p),
        None => bail!("`{key}` is not set; pass {flag} <file> or set it in the config"),
    }
}

fn load(rec: &mut Recorder, path: &Path) -> Result<Dataset> {
    let ds = load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))?;
    rec.input(path)?;
    rec.input(&schema_path(path))?;
    Ok(ds)
}

fn save(rec: &mut Recorder, ds: &Dataset, path: &Path) -> Result<()> {
    save_dataset(ds, path)?;
    rec.output(path)?;
    rec.output(&schema_path(path))
}

pub fn generate(cfg: &RunConfig) -> Result<Outcome> {
    let mut rec = Recorder::new("generate", cfg);
    rec.phase("generate");
    let ds = generate_synthetic_dataset(&cfg.data.generator, cfg.seed)?;
    let (train, test) = temporal_split(&ds, cfg.data.train_fraction)?;
    rec.phase("write");
    save(&mut rec, &train, &cfg.out.join("train.jsonl"))?;
    save(&mut rec, &test, &cfg.out.join("test.jsonl"))?;

    rec.phase("reference_scores");
    let eval = EvalConfig { cutoff: cfg.eval.cutoff };
    let oracle = evaluate_scorer("@oracle", &PlantedUtility::from_config(&cfg.data.generator), &test.lists, &eval)?;
    let random = evaluate_scorer("@random", &RandomScorer { seed: cfg.seed }, &test.lists, &eval)?;
    let items: usize = ds.lists.iter().map(|l| l.len()).sum();
    let clicks: usize = ds.lists.iter().map(|l| l.y_c.positives()).sum();
    rec.metric("train_lists", train.len())?;
    rec.metric("test_lists", test.len())?;
    rec.metric("click_rate", clicks as f64 / items as f64)?;
    rec.metric("test.oracle.ndcg_c", oracle.ndcg_c)?;
    rec.metric("test.random.ndcg_c", random.ndcg_c)?;
    println!(
        "generated {} lists ({} train / {} test) into {}",
        ds.len(),
        train.len(),
        test.len(),
        cfg.out.display()
    );
    println!("{}", oracle.summary_line());
    println!("{}", random.summary_line());
    ok(rec)
}

pub fn train(cfg: &RunConfig) -> Result<Outcome> {
    let mut rec = Recorder::new("train", cfg);
    rec.phase("load");
    let train = load(&mut rec, required(&cfg.data.train, "data.train", "--train")?)?;
    let valid = match &cfg.data.test {
        Some(p) => {
            let v = load(&mut rec, p)?;
            train.schema.check_compatible(&v.schema)?;
            Some(v)
        }
        None => None,
    };
    let name = cfg.model_name();

    rec.phase("train");
    let model = match cfg.model.family {
        ModelFamily::Neural => {
            let mut ranker = NeuralRanker::new(train.schema.clone(), cfg.neural_config(), cfg.seed)?;
            let logs = train_neural(
                &mut ranker,
                &train.lists,
                valid.as_ref().map(|v| v.lists.as_slice()),
                &cfg.loss,
                &cfg.train_config(),
            )?;
            rec.metric("final_train_loss", logs.last().and_then(|l| l.train_loss))?;
            rec.metric("epochs", &logs)?;
            RankingModel::Neural(NeuralModel {
                ranker,
                loss: cfg.loss.clone(),
            })
        }
        ModelFamily::Lambdamart => {
            let (ensemble, log) = train_lambdamart(&train.lists, &train.schema, &cfg.gbdt)?;
            rec.metric("train_ndcg_by_round", &log.train_ndcg)?;
            RankingModel::Gbdt(GbdtModel {
                ensemble,
                schema: train.schema.clone(),
                config: cfg.gbdt.clone(),
            })
        }
    };

    if let Some(v) = &valid {
        rec.phase("validate");
        let m = evaluate_scorer(&name, &model, &v.lists, &EvalConfig { cutoff: cfg.eval.cutoff })?;
        println!("{}", m.summary_line());
        record_summary(&mut rec, "validation", &m)?;
    }
    rec.phase("save");
    let path = cfg.out.join(format!("{name}.ltr"));
    model.save(&path)?;
    rec.output(&path)?;
    println!("trained {} -> {}", model.describe(), path.display());
    ok(rec)
}

fn record_summary(rec: &mut Recorder, prefix: &str, m: &ModelMetrics) -> Result<()> {
    rec.metric(format!("{prefix}.ndcg_c"), m.ndcg_c)?;
    rec.metric(format!("{prefix}.ndcg_o"), m.ndcg_o)?;
    rec.metric(format!("{prefix}.aiv"), m.aiv)
}

/// Ranks by the logged labels themselves (orders above clicks above the
/// rest), so every defined NDCG is exactly 1.
pub struct IdealScorer;

impl Scorer for IdealScorer {
    fn score_list(&self, _index: usize, list: &InteractionList) -> ltr_core::Result<ScoreVector> {
        let c = list.y_c.to_f64();
        let o = list.y_o.to_f64();
        ScoreVector::new(c.iter().zip(&o).map(|(c, o)| c + 2.0 * o).collect())
    }
}

enum Loaded {
    Model(RankingModel),
    Oracle(PlantedUtility),
    Random(RandomScorer),
    Ideal(IdealScorer),
}

impl Loaded {
    fn scorer(&self) -> &dyn Scorer {
        match self {
            Loaded::Model(m) => m,
            Loaded::Oracle(o) => o,
            Loaded::Random(r) => r,
            Loaded::Ideal(i) => i,
        }
    }

    fn grid_position(&self) -> Option<(LossKind, ArchitectureKind)> {
        match self {
            Loaded::Model(m) => m.grid_position(),
            _ => None,
        }
    }
}

fn load_model(spec: &str, data: &Dataset, cfg: &RunConfig, rec: &mut Recorder) -> Result<(String, Loaded)> {
    match spec {
        "@oracle" => {
            let Some(generator) = &data.provenance.generator else {
                bail!("@oracle needs a synthetic dataset whose schema file records its generator config");
            };
            return Ok((spec.to_string(), Loaded::Oracle(PlantedUtility::from_config(generator))));
        }
        "@random" => return Ok((spec.to_string(), Loaded::Random(RandomScorer { seed: cfg.seed }))),
        "@ideal" => return Ok((spec.to_string(), Loaded::Ideal(IdealScorer))),
        _ => {}
    }
    let (name, path) = match spec.split_once('=') {
        Some((n, p)) => (n.to_string(), PathBuf::from(p)),
        None => {
            let path = PathBuf::from(spec);
            let stem = path
                .file_stem()
                .with_context(|| format!("cannot name model `{spec}`; use name=path"))?
                .to_string_lossy()
                .into_owned();
            (stem, path)
        }
    };
    let model = RankingModel::load(&path).with_context(|| format!("loading model `{name}`"))?;
    model
        .check_schema(&data.schema)
        .with_context(|| format!("model `{name}` ({}) does not fit the dataset", path.display()))?;
    rec.input(&path)?;
    Ok((name, Loaded::Model(model)))
}

/// Table columns: the CE and RN groups over the three architectures when
/// the models form a complete grid, then any other model on its own.
pub fn table_columns(models: &[(String, Option<(LossKind, ArchitectureKind)>)], baseline: &str) -> Vec<TableColumn> {
    let mut columns = Vec::new();
    let mut placed = vec![false; models.len()];
    let complete = [LossKind::Ce, LossKind::Rn].iter().all(|&l| {
        ArchitectureKind::ALL
            .iter()
            .all(|&a| models.iter().filter(|(_, g)| *g == Some((l, a))).count() == 1)
    });
    if complete {
        for loss in [LossKind::Ce, LossKind::Rn] {
            for arch in ArchitectureKind::ALL {
                let i = models.iter().position(|(_, g)| *g == Some((loss, arch))).expect("complete grid");
                placed[i] = true;
                columns.push(TableColumn {
                    group: format!("{} loss", loss.label()),
                    label: arch.short().to_string(),
                    model: models[i].0.clone(),
                });
            }
        }
    }
    for (i, (name, _)) in models.iter().enumerate() {
        if !placed[i] && name != baseline {
            columns.push(TableColumn {
                group: name.clone(),
                label: name.clone(),
                model: name.clone(),
            });
        }
    }
    columns
}

fn per_list_csv(m: &ModelMetrics) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["list", "ndcg_c", "ndcg_o", "aiv"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (i, l) in m.per_list.iter().enumerate() {
        w.write_record([i.to_string(), opt(l.ndcg_c), opt(l.ndcg_o), l.aiv.to_string()])?;
    }
    Ok(w.into_inner()?)
}

fn write_output(rec: &mut Recorder, path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)?;
    rec.output(path)
}

pub fn evaluate(cfg: &RunConfig, compare: bool) -> Result<Outcome> {
    let command = if compare { "compare" } else { "evaluate" };
    let mut rec = Recorder::new(command, cfg);
    rec.phase("load");
    let data = load(&mut rec, required(&cfg.data.test, "data.test", "--data")?)?;
    if cfg.eval.models.is_empty() {
        bail!("`eval.models` is empty; pass --model <spec> at least once");
    }
    if compare && cfg.eval.models.len() < 2 {
        bail!("compare needs at least two models, got {}", cfg.eval.models.len());
    }
    let mut loaded = Vec::new();
    for spec in &cfg.eval.models {
        let (name, model) = load_model(spec, &data, cfg, &mut rec)?;
        if loaded.iter().any(|(n, _)| *n == name) {
            bail!("two models are named `{name}`; use name=path to tell them apart");
        }
        loaded.push((name, model));
    }

    rec.phase("score");
    let eval = EvalConfig { cutoff: cfg.eval.cutoff };
    let mut results = Vec::new();
    for (name, model) in &loaded {
        let m = evaluate_scorer(name, model.scorer(), &data.lists, &eval)?;
        println!("{}", m.summary_line());
        record_summary(&mut rec, name, &m)?;
        let stem = name.trim_start_matches('@');
        write_output(&mut rec, &cfg.out.join(format!("{stem}.metrics.txt")), m.to_key_value().as_bytes())?;
        write_output(&mut rec, &cfg.out.join(format!("{stem}.per_list.csv")), &per_list_csv(&m)?)?;
        results.push(m);
    }

    if results.len() >= 2 {
        rec.phase("compare");
        let baseline = cfg.eval.baseline.clone().unwrap_or_else(|| results[0].model.clone());
        let report = compare_models(&results, &baseline)?;
        let grid: Vec<_> = loaded.iter().map(|(n, m)| (n.clone(), m.grid_position())).collect();
        let table = format_comparison_table(&report, &table_columns(&grid, &baseline))?;
        println!("\nRelative improvement over {baseline}:\n{table}");
        record_report(&mut rec, &report)?;
        write_output(&mut rec, &cfg.out.join("comparison.txt"), table.as_bytes())?;
        write_output(&mut rec, &cfg.out.join("report.txt"), report.to_key_value().as_bytes())?;
        if compare {
            write_output(&mut rec, &cfg.out.join("comparison.csv"), report.to_csv()?.as_bytes())?;
        }
    }
    ok(rec)
}

fn record_report(rec: &mut Recorder, report: &MetricReport) -> Result<()> {
    for row in &report.rows {
        let key = format!("{}.{}", row.model, row.metric.label());
        rec.metric(format!("{key}.uplift"), row.formatted())?;
        rec.metric(format!("{key}.improvement_percent"), row.improvement_percent)?;
        rec.metric(format!("{key}.p_value"), row.ttest.p_value)?;
    }
    Ok(())
}

/// Reads samples from a file: one number per line, or the named column of
/// a CSV with a header. Blank cells are skipped; `#` starts a comment.
pub fn read_samples(path: &Path, column: Option<&str>) -> Result<Vec<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(column.is_some())
        .comment(Some(b'#'))
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("opening {}", path.display()))?;
    let index = match column {
        Some(name) => {
            let headers = reader.headers()?.clone();
            headers.iter().position(|h| h == name).with_context(|| {
                format!(
                    "{}: no column `{name}` (columns: {})",
                    path.display(),
                    headers.iter().collect::<Vec<_>>().join(", ")
                )
            })?
        }
        None => 0,
    };
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.with_context(|| format!("reading {}", path.display()))?;
        let line = record.position().map_or(0, |p| p.line());
        let Some(cell) = record.get(index).filter(|c| !c.is_empty()) else {
            continue;
        };
        let v: f64 = cell
            .parse()
            .with_context(|| format!("{}:{line}: `{cell}` is not a number", path.display()))?;
        out.push(v);
    }
    if out.len() < 2 {
        bail!("{}: need at least two samples, found {}", path.display(), out.len());
    }
    Ok(out)
}

pub fn abtest(cfg: &RunConfig) -> Result<Outcome> {
    let mut rec = Recorder::new("abtest", cfg);
    let a_path = required(&cfg.abtest.a, "abtest.a", "--a")?;
    let b_path = required(&cfg.abtest.b, "abtest.b", "--b")?;
    let column = cfg.abtest.column.as_deref();
    let a = read_samples(a_path, column)?;
    let b = read_samples(b_path, column)?;
    rec.input(a_path)?;
    rec.input(b_path)?;
    let t = welch_t_test_at(&a, &b, cfg.abtest.confidence)?;
    let uplift = t.uplift_percent.map_or_else(|| "n/a".to_string(), format_percent);
    let text = format!(
        "n_a = {}\nn_b = {}\nmean_a = {}\nmean_b = {}\ndiff = {}\nuplift = {uplift}\nt = {}\ndof = {}\np_value = {}\nci_{:.0} = [{}, {}]\n",
        a.len(),
        b.len(),
        t.mean_a,
        t.mean_b,
        t.diff,
        t.t,
        t.dof,
        t.p_value,
        t.confidence * 100.0,
        t.ci_low,
        t.ci_high
    );
    print!("{text}");
    write_output(&mut rec, &cfg.out.join("abtest.txt"), text.as_bytes())?;
    rec.metric("welch", &t)?;
    ok(rec)
}

pub fn gradcheck(cfg: &RunConfig) -> Result<Outcome> {
    let mut rec = Recorder::new("gradcheck", cfg);
    let outcomes = gradcheck_suite(cfg.seed)?;
    let width = outcomes.iter().map(|o| o.name.len()).max().unwrap_or(0);
    let mut text = String::new();
    for o in &outcomes {
        text.push_str(&format!(
            "{} {:<width$}  max_rel_error = {:.3e}  ({} coordinates)\n",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.max_rel_error,
            o.coordinates
        ));
        rec.metric(format!("{}.max_rel_error", o.name), o.max_rel_error)?;
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    text.push_str(&format!(
        "{} of {} checks within {GRADCHECK_TOLERANCE:e}\n",
        outcomes.len() - failed,
        outcomes.len()
    ));
    print!("{text}");
    write_output(&mut rec, &cfg.out.join("gradcheck.txt"), text.as_bytes())?;
    rec.metric("failed", failed)?;
    Ok(Outcome {
        exit_code: i32::from(failed > 0),
        manifest: rec.finish()?,
    })
}
