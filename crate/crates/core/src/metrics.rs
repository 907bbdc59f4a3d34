//! Edit-distance scoring of predicted annotations and distribution reports.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field_forge::AnnotatedRecord;
use crate::neural::{Checkpoint, Decoding};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("reference length must be positive")]
    ZeroLength,
    #[error("cannot summarize an empty sample")]
    EmptySample,
    #[error("cannot evaluate an empty corpus")]
    EmptyCorpus,
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Levenshtein distance between `a` and `b`, counted in characters.
///
/// Two-row dynamic programme over the shorter string.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let (long, short) = if a.len() >= b.len() { (&a, &b) } else { (&b, &a) };
    if short.is_empty() {
        return long.len();
    }
    let mut row: Vec<usize> = (0..=short.len()).collect();
    for (i, lc) in long.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, sc) in short.iter().enumerate() {
            let above = row[j + 1];
            row[j + 1] = (diag + usize::from(lc != sc)).min(above + 1).min(row[j] + 1);
            diag = above;
        }
    }
    row[short.len()]
}

pub fn relative_distance(d_a: usize, reference_length: usize) -> Result<f64, MetricsError> {
    if reference_length == 0 {
        return Err(MetricsError::ZeroLength);
    }
    Ok(d_a as f64 / reference_length as f64)
}

/// Quantile probabilities reported in every summary.
pub const QUANTILES: [f64; 5] = [0.50, 0.75, 0.90, 0.95, 0.99];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub min: f64,
    pub avg: f64,
    pub q50: f64,
    pub q75: f64,
    pub q90: f64,
    pub q95: f64,
    pub q99: f64,
    pub max: f64,
}

impl Summary {
    /// Values in report column order.
    pub fn columns(&self) -> [f64; 8] {
        [self.min, self.avg, self.q50, self.q75, self.q90, self.q95, self.q99, self.max]
    }

    pub fn is_monotone(&self) -> bool {
        let q = [self.min, self.q50, self.q75, self.q90, self.q95, self.q99, self.max];
        q.windows(2).all(|w| w[0] <= w[1]) && self.min <= self.avg && self.avg <= self.max
    }
}

/// Sample quantile with linear interpolation between order statistics at
/// rank `1 + p (n - 1)`. `sorted` must be ascending and non-empty.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(values: &[f64]) -> Result<Summary, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p| quantile_sorted(&sorted, p);
    let avg = (sorted.iter().sum::<f64>() / sorted.len() as f64)
        .clamp(sorted[0], sorted[sorted.len() - 1]);
    Ok(Summary {
        min: sorted[0],
        avg,
        q50: q(0.50),
        q75: q(0.75),
        q90: q(0.90),
        q95: q(0.95),
        q99: q(0.99),
        max: sorted[sorted.len() - 1],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecordResult {
    pub index: usize,
    pub ref_len: usize,
    pub da: usize,
    pub dr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub da: Summary,
    pub dr: Summary,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub records: Vec<EvalRecordResult>,
    pub summary: EvalSummary,
    /// Fraction of raw characters the model's source vocabulary does not know.
    pub unk_fraction: f64,
}

/// Scores predictions from `predict` against every record's annotation.
pub fn evaluate_with<P>(records: &[AnnotatedRecord], mut predict: P) -> Result<Evaluation, MetricsError>
where
    P: FnMut(&str) -> String,
{
    if records.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut results = Vec::with_capacity(records.len());
    for (index, record) in records.iter().enumerate() {
        let prediction = predict(&record.raw);
        let ref_len = record.ann.chars().count();
        let da = levenshtein(&prediction, &record.ann);
        let dr = relative_distance(da, ref_len)?;
        results.push(EvalRecordResult { index, ref_len, da, dr });
    }
    let da: Vec<f64> = results.iter().map(|r| r.da as f64).collect();
    let dr: Vec<f64> = results.iter().map(|r| r.dr).collect();
    Ok(Evaluation {
        summary: EvalSummary { da: summarize(&da)?, dr: summarize(&dr)? },
        records: results,
        unk_fraction: 0.0,
    })
}

/// Translates every record with `checkpoint` and scores the predictions.
pub fn evaluate_corpus(
    checkpoint: &Checkpoint,
    records: &[AnnotatedRecord],
    decoding: Decoding,
) -> Result<Evaluation, MetricsError> {
    let translator = checkpoint.translator();
    let mut eval = evaluate_with(records, |raw| translator.translate(raw, decoding))?;
    let (unknown, total) = records.iter().fold((0usize, 0usize), |(u, t), r| {
        (u + checkpoint.source_vocab.count_unknown(&r.raw), t + r.raw.chars().count())
    });
    eval.unk_fraction = if total == 0 { 0.0 } else { unknown as f64 / total as f64 };
    if eval.unk_fraction > 0.0 {
        log::warn!(
            "{:.4}% of source characters are outside the model vocabulary",
            100.0 * eval.unk_fraction
        );
    }
    Ok(eval)
}

pub const HISTOGRAM_BINS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct Bin {
    pub low: f64,
    pub high: f64,
    pub count: usize,
}

/// Equal-width histogram over `[min, max]`; the top edge is inclusive.
pub fn histogram(values: &[f64], bins: usize) -> Vec<Bin> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let mut hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi <= lo {
        hi = lo + 1.0;
    }
    let width = (hi - lo) / bins as f64;
    let mut out: Vec<Bin> = (0..bins)
        .map(|i| Bin {
            low: lo + width * i as f64,
            high: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
            count: 0,
        })
        .collect();
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}

/// One evaluated dataset in a report.
pub struct ReportEntry<'a> {
    pub dataset: &'a str,
    pub evaluation: &'a Evaluation,
}

/// Files written by [`emit_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub summary: PathBuf,
    pub records: Vec<PathBuf>,
    pub histograms: Vec<PathBuf>,
}

fn file_safe(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `summary.csv`, then per dataset `<dataset>_records.csv` and one
/// histogram file per metric.
pub fn emit_report(entries: &[ReportEntry<'_>], dir: &Path) -> Result<ReportFiles, MetricsError> {
    fs::create_dir_all(dir).map_err(|source| MetricsError::Io { path: dir.to_path_buf(), source })?;
    let summary_path = dir.join("summary.csv");
    let mut summary = csv::Writer::from_path(&summary_path)?;
    summary.write_record(["metric", "dataset", "min", "avg", "q50", "q75", "q90", "q95", "q99", "max"])?;
    let mut files = ReportFiles { summary: summary_path, records: Vec::new(), histograms: Vec::new() };
    for entry in entries {
        let eval = entry.evaluation;
        for (metric, s) in [("DA", eval.summary.da), ("DR", eval.summary.dr)] {
            let mut row = vec![metric.to_string(), entry.dataset.to_string()];
            row.extend(s.columns().iter().map(f64::to_string));
            summary.write_record(&row)?;
        }

        let stem = file_safe(entry.dataset);
        let path = dir.join(format!("{stem}_records.csv"));
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["index", "ref_len", "da", "dr"])?;
        for r in &eval.records {
            w.write_record([r.index.to_string(), r.ref_len.to_string(), r.da.to_string(), r.dr.to_string()])?;
        }
        w.flush().map_err(|source| MetricsError::Io { path: path.clone(), source })?;
        files.records.push(path);

        let da: Vec<f64> = eval.records.iter().map(|r| r.da as f64).collect();
        let dr: Vec<f64> = eval.records.iter().map(|r| r.dr).collect();
        for (metric, values) in [("da", da), ("dr", dr)] {
            let path = dir.join(format!("{stem}_{metric}_histogram.csv"));
            let mut w = csv::Writer::from_path(&path)?;
            w.write_record(["bin_low", "bin_high", "count"])?;
            for bin in histogram(&values, HISTOGRAM_BINS) {
                w.write_record([bin.low.to_string(), bin.high.to_string(), bin.count.to_string()])?;
            }
            w.flush().map_err(|source| MetricsError::Io { path: path.clone(), source })?;
            files.histograms.push(path);
        }
    }
    summary.flush().map_err(|source| MetricsError::Io { path: files.summary.clone(), source })?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_examples() {
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("abc", ""), 3);
        assert_eq!(levenshtein("kitten", "sitting"), 3);
        assert_eq!(levenshtein("sitting", "kitten"), 3);
        assert_eq!(levenshtein("hhh_l", "hhh_l"), 0);
        assert_eq!(levenshtein("ü", "u"), 1);
    }

    #[test]
    fn relative_examples() {
        assert_eq!(relative_distance(0, 238).unwrap(), 0.0);
        assert_eq!(relative_distance(59, 238).unwrap(), 59.0 / 238.0);
        assert!((relative_distance(59, 238).unwrap() - 0.24789).abs() < 1e-5);
        assert!(relative_distance(30, 10).unwrap() > 1.0);
        assert!(matches!(relative_distance(1, 0), Err(MetricsError::ZeroLength)));
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&(0..=10).map(f64::from).collect::<Vec<_>>()).unwrap();
        assert_eq!((s.min, s.q50, s.max, s.avg), (0.0, 5.0, 10.0, 5.0));
        let s = summarize(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((s.q75 - 3.25).abs() < 1e-12);
        let s = summarize(&[7.0]).unwrap();
        assert!(s.columns().iter().all(|&v| v == 7.0));
        assert!(matches!(summarize(&[]), Err(MetricsError::EmptySample)));
    }

    #[test]
    fn oracle_and_empty_predictors() {
        let records = vec![
            AnnotatedRecord::new("GET HTTP/2", "mmm_HHHHHH").unwrap(),
            AnnotatedRecord::new("1.2.3.4", "hhhhhhh").unwrap(),
        ];
        let truth: std::collections::HashMap<_, _> =
            records.iter().map(|r| (r.raw.clone(), r.ann.clone())).collect();
        let perfect = evaluate_with(&records, |raw| truth[raw].clone()).unwrap();
        assert!(perfect.summary.da.columns().iter().all(|&v| v == 0.0));
        assert!(perfect.summary.dr.columns().iter().all(|&v| v == 0.0));
        let empty = evaluate_with(&records, |_| String::new()).unwrap();
        assert_eq!(empty.records[0].da, 10);
        assert_eq!(empty.records[1].da, 7);
        assert!(empty.records.iter().all(|r| r.dr == 1.0));
        assert!(matches!(evaluate_with(&[], |_| String::new()), Err(MetricsError::EmptyCorpus)));
    }

    #[test]
    fn histogram_partitions_values() {
        let values: Vec<f64> = (0..137).map(|i| (i * i % 97) as f64 / 7.0).collect();
        let bins = histogram(&values, HISTOGRAM_BINS);
        assert_eq!(bins.len(), 50);
        assert_eq!(bins.iter().map(|b| b.count).sum::<usize>(), values.len());
        let flat = histogram(&[2.0, 2.0], HISTOGRAM_BINS);
        assert_eq!(flat.iter().map(|b| b.count).sum::<usize>(), 2);
    }
}
