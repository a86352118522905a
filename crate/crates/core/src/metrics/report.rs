use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{aiv_at_k, format_percent, ndcg_at_k, relative_improvement, welch_t_test, EvalConfig, TTestResult};
use crate::data::{InteractionList, PlantedUtility};
use crate::error::{Error, Result};
use crate::rankers::ScoreVector;

/// Anything that assigns scores to the candidates of a list. `index` is
/// the list's position in the evaluated set.
pub trait Scorer: Sync {
    fn score_list(&self, index: usize, list: &InteractionList) -> Result<ScoreVector>;
}

impl Scorer for PlantedUtility {
    fn score_list(&self, _index: usize, list: &InteractionList) -> Result<ScoreVector> {
        Ok(self.score(list))
    }
}

/// Uniform random scores, reproducible per `(seed, index)`.
#[derive(Clone, Copy, Debug)]
pub struct RandomScorer {
    pub seed: u64,
}

impl Scorer for RandomScorer {
    fn score_list(&self, index: usize, list: &InteractionList) -> Result<ScoreVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        ScoreVector::new((0..list.len()).map(|_| rng.random::<f64>()).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "NDCG_c")]
    NdcgC,
    #[serde(rename = "NDCG_o")]
    NdcgO,
    #[serde(rename = "AIV")]
    Aiv,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::NdcgC, Metric::NdcgO, Metric::Aiv];

    pub fn label(self) -> &'static str {
        match self {
            Metric::NdcgC => "NDCG_c",
            Metric::NdcgO => "NDCG_o",
            Metric::Aiv => "AIV",
        }
    }

    fn key(self) -> &'static str {
        match self {
            Metric::NdcgC => "ndcg_c",
            Metric::NdcgO => "ndcg_o",
            Metric::Aiv => "aiv",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ListMetrics {
    pub ndcg_c: Option<f64>,
    pub ndcg_o: Option<f64>,
    pub aiv: f64,
}

impl ListMetrics {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::NdcgC => self.ndcg_c,
            Metric::NdcgO => self.ndcg_o,
            Metric::Aiv => Some(self.aiv),
        }
    }
}

/// Aggregates of one model over an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub model: String,
    pub cutoff: usize,
    pub lists: usize,
    /// Lists with at least one click (the NDCG_c denominator).
    pub click_lists: usize,
    pub order_lists: usize,
    pub ndcg_c: Option<f64>,
    pub ndcg_o: Option<f64>,
    pub aiv: f64,
    pub per_list: Vec<ListMetrics>,
}

impl ModelMetrics {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::NdcgC => self.ndcg_c,
            Metric::NdcgO => self.ndcg_o,
            Metric::Aiv => Some(self.aiv),
        }
    }

    pub fn samples(&self, metric: Metric) -> Vec<f64> {
        self.per_list.iter().filter_map(|m| m.get(metric)).collect()
    }

    /// `key=value` lines; floats use shortest round-trip formatting.
    pub fn to_key_value(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "none".to_string(), |x| x.to_string());
        let mut s = String::new();
        writeln!(s, "model={}", self.model).unwrap();
        writeln!(s, "cutoff={}", self.cutoff).unwrap();
        writeln!(s, "lists={}", self.lists).unwrap();
        writeln!(s, "ndcg_c={}", opt(self.ndcg_c)).unwrap();
        writeln!(s, "ndcg_c_lists={}", self.click_lists).unwrap();
        writeln!(s, "ndcg_c_excluded={}", self.lists - self.click_lists).unwrap();
        writeln!(s, "ndcg_o={}", opt(self.ndcg_o)).unwrap();
        writeln!(s, "ndcg_o_lists={}", self.order_lists).unwrap();
        writeln!(s, "ndcg_o_excluded={}", self.lists - self.order_lists).unwrap();
        writeln!(s, "aiv={}", self.aiv).unwrap();
        s
    }

    pub fn summary_line(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        format!(
            "{}: NDCG_c@{k}={} ({} lists)  NDCG_o@{k}={} ({} lists)  AIV@{k}={:.2}",
            self.model,
            opt(self.ndcg_c),
            self.click_lists,
            opt(self.ndcg_o),
            self.order_lists,
            self.aiv,
            k = self.cutoff
        )
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores every list (in parallel) and aggregates in list order, so the
/// result does not depend on thread scheduling.
pub fn evaluate_scorer(
    name: &str,
    scorer: &dyn Scorer,
    lists: &[InteractionList],
    config: &EvalConfig,
) -> Result<ModelMetrics> {
    config.validate()?;
    if lists.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate on an empty test set".into()));
    }
    let k = config.cutoff;
    let per_list = lists
        .par_iter()
        .enumerate()
        .map(|(i, list)| {
            let s = scorer.score_list(i, list)?;
            if s.len() != list.len() {
                return Err(Error::shape("scores", list.len(), s.len()));
            }
            Ok(ListMetrics {
                ndcg_c: ndcg_at_k(&s, &list.y_c, k)?,
                ndcg_o: ndcg_at_k(&s, &list.y_o, k)?,
                aiv: aiv_at_k(&list.prices(), &s, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelMetrics {
        model: name.to_string(),
        cutoff: k,
        lists: lists.len(),
        click_lists: per_list.iter().filter(|m| m.ndcg_c.is_some()).count(),
        order_lists: per_list.iter().filter(|m| m.ndcg_o.is_some()).count(),
        ndcg_c: mean_of(per_list.iter().filter_map(|m| m.ndcg_c)),
        ndcg_o: mean_of(per_list.iter().filter_map(|m| m.ndcg_o)),
        aiv: mean_of(per_list.iter().map(|m| m.aiv)).expect("non-empty"),
        per_list,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub model: String,
    pub metric: Metric,
    pub value: f64,
    pub baseline_value: f64,
    pub improvement_percent: f64,
    pub ttest: TTestResult,
}

impl ComparisonRow {
    pub fn formatted(&self) -> String {
        format_percent(self.improvement_percent)
    }

    /// Confidence bounds of the difference as a percentage of the baseline.
    pub fn ci_percent(&self) -> (f64, f64) {
        let scale = 100.0 / self.baseline_value;
        (self.ttest.ci_low * scale, self.ttest.ci_high * scale)
    }
}

/// Every model against a named baseline, with per-metric Welch tests over
/// the per-list samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub baseline: String,
    pub models: Vec<ModelMetrics>,
    pub rows: Vec<ComparisonRow>,
}

pub fn compare_models(models: &[ModelMetrics], baseline: &str) -> Result<MetricReport> {
    let base = models.iter().find(|m| m.model == baseline).ok_or_else(|| {
        let names: Vec<&str> = models.iter().map(|m| m.model.as_str()).collect();
        Error::InvalidInput(format!("baseline `{baseline}` is not among the models {names:?}"))
    })?;
    let mut rows = Vec::new();
    for m in models {
        if m.cutoff != base.cutoff || m.lists != base.lists {
            return Err(Error::InvalidInput(format!(
                "`{}` was evaluated on a different set or cutoff than the baseline",
                m.model
            )));
        }
        for metric in Metric::ALL {
            let (Some(value), Some(baseline_value)) = (m.get(metric), base.get(metric)) else {
                continue;
            };
            let improvement_percent = relative_improvement(value, baseline_value)
                .map_err(|e| Error::InvalidInput(format!("{} {}: {e}", m.model, metric.label())))?;
            let ttest = welch_t_test(&m.samples(metric), &base.samples(metric))?;
            rows.push(ComparisonRow {
                model: m.model.clone(),
                metric,
                value,
                baseline_value,
                improvement_percent,
                ttest,
            });
        }
    }
    Ok(MetricReport {
        baseline: baseline.to_string(),
        models: models.to_vec(),
        rows,
    })
}

/// Six significant digits.
fn sig6(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return x.to_string();
    }
    let mag = x.abs().log10().floor() as i32;
    if !(-4..6).contains(&mag) {
        format!("{x:.5e}")
    } else {
        format!("{x:.*}", (5 - mag).max(0) as usize)
    }
}

impl MetricReport {
    pub fn row(&self, model: &str, metric: Metric) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.model == model && r.metric == metric)
    }

    /// Machine-readable `key=value` lines, one block per model.
    pub fn to_key_value(&self) -> String {
        let mut s = format!("baseline={}\ntest=welch\n", self.baseline);
        for m in &self.models {
            s.push('\n');
            s.push_str(&m.to_key_value());
            for r in self.rows.iter().filter(|r| r.model == m.model) {
                let k = r.metric.key();
                let t = &r.ttest;
                writeln!(s, "{k}_uplift={}", r.formatted()).unwrap();
                writeln!(s, "{k}_t={}", sig6(t.t)).unwrap();
                writeln!(s, "{k}_dof={}", sig6(t.dof)).unwrap();
                writeln!(s, "{k}_p={}", sig6(t.p_value)).unwrap();
                writeln!(s, "{k}_ci_low={}", sig6(t.ci_low)).unwrap();
                writeln!(s, "{k}_ci_high={}", sig6(t.ci_high)).unwrap();
            }
        }
        s
    }

    /// Plot-ready CSV; uplift and interval bounds are percentages of the
    /// baseline value.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::InvalidInput(format!("csv: {e}"));
        w.write_record(["model", "metric", "uplift", "ci_low", "ci_high", "t", "dof", "p_value"])
            .map_err(csv_err)?;
        for r in &self.rows {
            let (lo, hi) = r.ci_percent();
            w.write_record([
                r.model.clone(),
                r.metric.label().to_string(),
                format!("{:.4}", r.improvement_percent),
                format!("{lo:.4}"),
                format!("{hi:.4}"),
                sig6(r.ttest.t),
                sig6(r.ttest.dof),
                sig6(r.ttest.p_value),
            ])
            .map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("utf-8"))
    }
}

/// One column of a comparison table: a group header (e.g. "CE loss"), a
/// column label (e.g. "TT") and the model it shows.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableColumn {
    pub group: String,
    pub label: String,
    pub model: String,
}

/// Aligned text table of signed relative improvements, grouped columns
/// first, one row per metric.
pub fn format_comparison_table(report: &MetricReport, columns: &[TableColumn]) -> Result<String> {
    let mut cells: Vec<Vec<String>> = Vec::new();
    for metric in Metric::ALL {
        let mut row = vec![metric.label().to_string()];
        for c in columns {
            let r = report.row(&c.model, metric).ok_or_else(|| {
                Error::InvalidInput(format!("no {} result for model `{}`", metric.label(), c.model))
            })?;
            row.push(r.formatted());
        }
        cells.push(row);
    }
    let first = cells.iter().map(|r| r[0].len()).max().unwrap_or(0).max("Metric".len());
    let mut widths: Vec<usize> = columns
        .iter()
        .enumerate()
        .map(|(j, c)| cells.iter().map(|r| r[j + 1].len()).max().unwrap_or(0).max(c.label.len()))
        .collect();

    // Consecutive columns with the same group share one header cell.
    let mut groups: Vec<(String, usize, usize)> = Vec::new();
    for (j, c) in columns.iter().enumerate() {
        match groups.last_mut() {
            Some((g, _, end)) if *g == c.group => *end = j + 1,
            _ => groups.push((c.group.clone(), j, j + 1)),
        }
    }
    for (g, start, end) in &groups {
        let span: usize = widths[*start..*end].iter().sum::<usize>() + 2 * (end - start - 1);
        if g.len() > span {
            widths[end - 1] += g.len() - span;
        }
    }

    let mut out = String::new();
    write!(out, "{:<first$}", "Metric").unwrap();
    for (g, start, end) in &groups {
        let span: usize = widths[*start..*end].iter().sum::<usize>() + 2 * (end - start - 1);
        write!(out, " | {g:<span$}").unwrap();
    }
    out.push('\n');
    write!(out, "{:<first$}", "").unwrap();
    for (_, start, end) in &groups {
        out.push_str(" |");
        for j in *start..*end {
            write!(out, " {:>w$}", columns[j].label, w = widths[j]).unwrap();
            if j + 1 < *end {
                out.push(' ');
            }
        }
    }
    out.push('\n');
    let total = out.lines().map(str::len).max().unwrap_or(0);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for row in &cells {
        write!(out, "{:<first$}", row[0]).unwrap();
        for (g, start, end) in &groups {
            let _ = g;
            out.push_str(" |");
            for j in *start..*end {
                write!(out, " {:>w$}", row[j + 1], w = widths[j]).unwrap();
                if j + 1 < *end {
                    out.push(' ');
                }
            }
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, GeneratorConfig};
    use crate::losses::LabelVector;

    fn data(lists: usize) -> Vec<InteractionList> {
        let cfg = GeneratorConfig {
            lists,
            ..GeneratorConfig::default()
        };
        generate_synthetic_dataset(&cfg, 2).unwrap().lists
    }

    struct LabelOracle;

    impl Scorer for LabelOracle {
        fn score_list(&self, _: usize, list: &InteractionList) -> Result<ScoreVector> {
            ScoreVector::new(list.y_c.to_f64())
        }
    }

    #[test]
    fn label_oracle_is_perfect() {
        let lists = data(300);
        let m = evaluate_scorer("oracle", &LabelOracle, &lists, &EvalConfig::default()).unwrap();
        assert_eq!(m.ndcg_c, Some(1.0));
        assert_eq!(m.click_lists, 300);
    }

    #[test]
    fn random_scorer_matches_monte_carlo_expectation() {
        let lists = data(2000);
        let cfg = EvalConfig::default();
        let m = evaluate_scorer("random", &RandomScorer { seed: 1 }, &lists, &cfg).unwrap();
        // Expected NDCG over uniformly random permutations, per list.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut total = 0.0;
        for l in &lists {
            let mut acc = 0.0;
            for _ in 0..200 {
                let s: Vec<f64> = (0..l.len()).map(|_| rng.random()).collect();
                acc += super::super::ndcg_at_k(&s, &l.y_c, 15).unwrap().unwrap();
            }
            total += acc / 200.0;
        }
        let expected = total / lists.len() as f64;
        assert!((m.ndcg_c.unwrap() - expected).abs() < 0.02, "{:?} vs {expected}", m.ndcg_c);
    }

    #[test]
    fn evaluation_is_deterministic_and_rejects_empty() {
        let lists = data(200);
        let cfg = EvalConfig::default();
        let a = evaluate_scorer("r", &RandomScorer { seed: 5 }, &lists, &cfg).unwrap();
        let b = evaluate_scorer("r", &RandomScorer { seed: 5 }, &lists, &cfg).unwrap();
        assert_eq!(a.to_key_value(), b.to_key_value());
        assert_eq!(a, b);
        assert!(evaluate_scorer("r", &RandomScorer { seed: 5 }, &[], &cfg).is_err());
    }

    #[test]
    fn constant_prices_give_constant_aiv() {
        let mut lists = data(50);
        for l in &mut lists {
            for p in &mut l.products {
                p.price = 12.5;
            }
        }
        let m = evaluate_scorer("r", &RandomScorer { seed: 0 }, &lists, &EvalConfig::default()).unwrap();
        assert!((m.aiv - 12.5).abs() < 1e-12);
    }

    #[test]
    fn self_comparison_is_zero_uplift() {
        let lists = data(100);
        let cfg = EvalConfig::default();
        let a = evaluate_scorer("a", &RandomScorer { seed: 3 }, &lists, &cfg).unwrap();
        let mut b = a.clone();
        b.model = "b".into();
        let report = compare_models(&[a, b], "a").unwrap();
        assert_eq!(report.rows.len(), 6);
        for r in &report.rows {
            assert_eq!(r.formatted(), "0.00%");
            assert_eq!(r.ttest.p_value, 1.0);
        }
        assert_eq!(report.to_csv().unwrap().lines().count(), 7);
        assert!(compare_models(&report.models, "missing").is_err());
    }

    #[test]
    fn grid_table_layout() {
        let lists = data(60);
        let cfg = EvalConfig::default();
        let mut models = vec![evaluate_scorer("lgbm", &RandomScorer { seed: 0 }, &lists, &cfg).unwrap()];
        let mut columns = Vec::new();
        for (g, loss) in [("CE loss", "ce"), ("RN loss", "rn")] {
            for (i, arch) in ["TT", "CR", "TR"].iter().enumerate() {
                let name = format!("{arch}-{loss}");
                models.push(evaluate_scorer(&name, &RandomScorer { seed: 1 + i as u64 }, &lists, &cfg).unwrap());
                columns.push(TableColumn {
                    group: g.into(),
                    label: arch.to_string(),
                    model: name,
                });
            }
        }
        let report = compare_models(&models, "lgbm").unwrap();
        let table = format_comparison_table(&report, &columns).unwrap();
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].contains("CE loss") && lines[0].contains("RN loss"));
        assert!(lines[0].find("CE loss") < lines[0].find("RN loss"));
        assert_eq!(lines[1].matches("TT").count(), 2);
        assert!(lines[3].starts_with("NDCG_c"));
        assert!(lines[4].starts_with("NDCG_o"));
        assert!(lines[5].starts_with("AIV"));
        let pct = regex_like_percent_count(lines[3]);
        assert_eq!(pct, 6);
        assert!(lines.iter().all(|l| l.len() == lines[0].len() || l.len() <= lines[2].len()));
    }

    fn regex_like_percent_count(line: &str) -> usize {
        line.split_whitespace()
            .filter(|t| {
                let body = t.trim_end_matches('%');
                t.ends_with('%')
                    && (body == "0.00"
                        || ((body.starts_with('+') || body.starts_with('-'))
                            && body[1..].split_once('.').is_some_and(|(_, d)| d.len() == 2)))
            })
            .count()
    }

    #[test]
    fn missing_positives_are_excluded_and_counted() {
        let mut lists = data(20);
        lists[0].y_o = LabelVector::zeros(lists[0].len());
        let m = evaluate_scorer("r", &RandomScorer { seed: 0 }, &lists, &EvalConfig::default()).unwrap();
        assert!(m.order_lists < 20);
        assert!(m.to_key_value().contains(&format!("ndcg_o_excluded={}", 20 - m.order_lists)));
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(1.0), "1.00000");
        assert_eq!(sig6(-12.3456789), "-12.3457");
        assert_eq!(sig6(0.000012345678), "1.23457e-5");
    }
}
