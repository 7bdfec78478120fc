use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Corpus;
use crate::domain::{Scanpath, TrialRecord};
use crate::engine::derive_seed;
use crate::metrics::{mean_rows, score, MetricConfig, METRIC_NAMES};

const STREAM_EVAL: u64 = 5;

/// Draws one scanpath per seed for a record.
pub type Sampler<'a> = Box<dyn Fn(&TrialRecord, &[u64]) -> Result<Vec<Scanpath>, String> + 'a>;

pub enum Source<'a> {
    /// Predictions scored against every human scanpath of the record.
    Sampler(Sampler<'a>),
    /// Each human scanpath scored against itself.
    GtReplay,
}

impl<'a> Source<'a> {
    /// Wraps a per-seed generator such as a baseline.
    pub fn per_seed<F>(f: F) -> Self
    where
        F: Fn(&TrialRecord, u64) -> Result<Scanpath, String> + 'a,
    {
        Source::Sampler(Box::new(move |r, seeds| seeds.iter().map(|&s| f(r, s)).collect()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Scanpaths drawn per record.
    pub samples: usize,
    pub seed: u64,
    pub metrics: MetricConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples: 10, seed: 0, metrics: MetricConfig::default() }
    }
}

/// Mean and population standard deviation of per-record values over the
/// `n` records where the metric is defined.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordFailure {
    pub trial_id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub source: String,
    /// In [`METRIC_NAMES`] order.
    pub cells: Vec<Cell>,
    pub failures: Vec<RecordFailure>,
}

impl EvalRow {
    pub fn cell(&self, metric: &str) -> Option<&Cell> {
        METRIC_NAMES.iter().position(|m| *m == metric).map(|i| &self.cells[i])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub metrics: Vec<String>,
    pub records: usize,
    pub rows: Vec<EvalRow>,
}

/// Scores every source on every record.
///
/// A record's value is the mean over its human scanpaths of the metrics of
/// `samples` draws against that human; rows report mean ± std of these
/// values over records. Sample seeds depend only on the config seed and the
/// record position, so every source sees the same seeds. A failing source
/// or metric leaves that record out of the row and is listed in
/// `failures`.
pub fn evaluate(sources: &[(&str, &Source<'_>)], corpus: &Corpus, cfg: &EvalConfig) -> Result<EvalReport, String> {
    if cfg.samples == 0 {
        return Err("samples must be positive".into());
    }
    let rows = sources
        .iter()
        .map(|(name, source)| {
            let mut per_record: Vec<[Option<f64>; 10]> = Vec::new();
            let mut failures = Vec::new();
            for (ri, r) in corpus.records.iter().enumerate() {
                let seeds: Vec<u64> =
                    (0..cfg.samples).map(|i| derive_seed(cfg.seed, STREAM_EVAL, ((ri as u64) << 32) | i as u64)).collect();
                match record_values(source, r, &seeds, &cfg.metrics) {
                    Ok(v) => per_record.push(v),
                    Err(error) => failures.push(RecordFailure { trial_id: r.trial_id.clone(), error }),
                }
            }
            EvalRow { source: name.to_string(), cells: summarize(&per_record), failures }
        })
        .collect();
    Ok(EvalReport {
        config: *cfg,
        metrics: METRIC_NAMES.iter().map(|m| m.to_string()).collect(),
        records: corpus.len(),
        rows,
    })
}

fn record_values(
    source: &Source<'_>,
    r: &TrialRecord,
    seeds: &[u64],
    metrics: &MetricConfig,
) -> Result<[Option<f64>; 10], String> {
    if r.human_scanpaths.is_empty() {
        return Err("record has no human scanpaths".into());
    }
    let rows = match source {
        Source::GtReplay => r
            .human_scanpaths
            .iter()
            .map(|h| score(std::slice::from_ref(&h.scanpath), &h.scanpath, r.image, metrics))
            .collect::<Result<Vec<_>, _>>(),
        Source::Sampler(f) => {
            let preds = f(r, seeds)?;
            if preds.is_empty() {
                return Err("source produced no scanpaths".into());
            }
            r.human_scanpaths.iter().map(|h| score(&preds, &h.scanpath, r.image, metrics)).collect()
        }
    }
    .map_err(|e| e.to_string())?;
    Ok(mean_rows(&rows))
}

fn summarize(per_record: &[[Option<f64>; 10]]) -> Vec<Cell> {
    (0..METRIC_NAMES.len())
        .map(|k| {
            let vals: Vec<f64> = per_record.iter().filter_map(|v| v[k]).collect();
            if vals.is_empty() {
                return Cell { mean: None, std: None, n: 0 };
            }
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            Cell { mean: Some(mean), std: Some(var.sqrt()), n: vals.len() }
        })
        .collect()
}

fn fmt3(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.3}"))
}

impl EvalReport {
    /// One line per source: `mean ± std` per metric, 3 decimals, `-` where
    /// undefined.
    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.source.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:width$}", "source");
        for m in &self.metrics {
            let _ = write!(out, " {m:>15}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:width$}", row.source);
            for c in &row.cells {
                let s = match (c.mean, c.std) {
                    (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
                    _ => "-".into(),
                };
                let _ = write!(out, " {s:>15}");
            }
            out.push('\n');
        }
        out
    }

    /// `source,metric,mean,std,n`; empty fields where undefined.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,metric,mean,std,n\n");
        for row in &self.rows {
            for (m, c) in self.metrics.iter().zip(&row.cells) {
                let _ = writeln!(out, "{},{m},{},{},{}", csv_field(&row.source), fmt3(c.mean), fmt3(c.std), c.n);
            }
        }
        out
    }

    /// JSON with every number rounded to 3 decimals.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("report serializes");
        round_numbers(&mut v);
        v
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn round_numbers(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Number(n) if n.is_f64() => {
            let r = (n.as_f64().expect("f64") * 1000.0).round() / 1000.0;
            *v = serde_json::json!(r);
        }
        serde_json::Value::Array(a) => a.iter_mut().for_each(round_numbers),
        serde_json::Value::Object(o) => o.values_mut().for_each(round_numbers),
        _ => {}
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_corpus, SynthConfig};
    use crate::harness::{random_baseline, BaselineConfig};

    fn corpus() -> Corpus {
        synthesize_corpus(&SynthConfig { n_records: 6, seed: 4, ..Default::default() }).unwrap()
    }

    #[test]
    fn replay_is_optimal_and_baseline_is_worse() {
        let c = corpus();
        let base = BaselineConfig { duration_ms: c.mean_fixation_ms().unwrap().round() as u32, ..Default::default() };
        let random = Source::per_seed(|r, s| Ok(random_baseline(r, s, &base)));
        let report = evaluate(&[("gt", &Source::GtReplay), ("random", &random)], &c, &EvalConfig::default()).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert!(report.rows.iter().all(|r| r.cells.len() >= 6 && r.failures.is_empty()));
        let gt = &report.rows[0];
        assert!((gt.cell("SS").unwrap().mean.unwrap() - 1.0).abs() < 1e-9);
        assert!(gt.cell("FED").unwrap().mean.unwrap().abs() < 1e-9);
        assert!((gt.cell("CC_pack").unwrap().mean.unwrap() - 1.0).abs() < 1e-6);
        let rnd = &report.rows[1];
        assert!(rnd.cell("SS_pack").unwrap().mean.unwrap() < gt.cell("SS_pack").unwrap().mean.unwrap());
        let again = evaluate(&[("gt", &Source::GtReplay), ("random", &random)], &c, &EvalConfig::default()).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn failures_leave_cells_missing() {
        let c = corpus();
        let flaky = Source::per_seed(|r, s| {
            if r.trial_id == c.records[1].trial_id {
                Err("boom".into())
            } else {
                Ok(random_baseline(r, s, &BaselineConfig::default()))
            }
        });
        let report = evaluate(&[("flaky", &flaky)], &c, &EvalConfig { samples: 2, ..Default::default() }).unwrap();
        let row = &report.rows[0];
        assert_eq!(row.failures, vec![RecordFailure { trial_id: c.records[1].trial_id.clone(), error: "boom".into() }]);
        assert_eq!(row.cell("SS").unwrap().n, c.len() - 1);
    }

    #[test]
    fn formatting_uses_three_decimals() {
        let c = corpus();
        let report = evaluate(&[("gt", &Source::GtReplay)], &c, &EvalConfig::default()).unwrap();
        assert!(report.to_csv().lines().any(|l| l == format!("gt,SS,1.000,0.000,{}", c.len())));
        assert!(report.to_table().contains("1.000 ± 0.000"));
        let j = report.to_json();
        assert_eq!(j["rows"][0]["cells"][0]["mean"], serde_json::json!(1.0));
    }
}
