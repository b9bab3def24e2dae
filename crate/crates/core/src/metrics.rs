//! Word- and sentence-level evaluation.
//!
//! Word metrics treat the *incorrect* class as positive: predictions
//! `p ≥ threshold` mean "correct", and both predictions and labels are
//! inverted before counting. Only valid (`m_i = 1`) words are counted.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::featio::Severity;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("no valid words to score")]
    NoValidWords,
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("need at least one utterance")]
    Empty,
}

/// Confusion counts with "incorrect" as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn add(&mut self, predicted_incorrect: bool, actually_incorrect: bool) {
        match (predicted_incorrect, actually_incorrect) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// `(f1, degenerate)`; with no positive predictions and no positive
    /// labels, F1 is 1 by convention.
    pub fn f1(&self) -> (f64, bool) {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            (1.0, true)
        } else {
            ((2 * self.tp) as f64 / denom as f64, false)
        }
    }

    /// `(mcc, degenerate)`; a zero denominator yields 0.
    pub fn mcc(&self) -> (f64, bool) {
        let (tp, fp, tn, fn_) = (self.tp as f64, self.fp as f64, self.tn as f64, self.fn_ as f64);
        let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if denom == 0.0 {
            (0.0, true)
        } else {
            ((tp * tn - fp * fn_) / denom.sqrt(), false)
        }
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WordMetrics {
    pub f1: f64,
    pub mcc: f64,
    pub accuracy: f64,
    pub exact_match: f64,
    pub f1_degenerate: bool,
    pub mcc_degenerate: bool,
    pub confusion: Confusion,
    /// Utterances that count toward exact match.
    pub utterances: usize,
    /// Utterances dropped because no word was valid.
    pub excluded_utterances: usize,
}

/// Word labels and predictions of one utterance.
#[derive(Debug, Clone, Copy)]
pub struct WordBatch<'a> {
    pub probabilities: &'a [f64],
    pub correct: &'a [u8],
    pub valid: &'a [u8],
}

pub fn word_metrics(utterances: &[WordBatch<'_>], threshold: f64) -> Result<WordMetrics, MetricsError> {
    let mut confusion = Confusion::default();
    let mut exact = 0usize;
    let mut scored = 0usize;
    let mut excluded = 0usize;
    for (k, u) in utterances.iter().enumerate() {
        if u.probabilities.len() != u.correct.len() || u.correct.len() != u.valid.len() {
            return Err(MetricsError::LengthMismatch(format!(
                "utterance {k}: {} probabilities, {} labels, {} mask entries",
                u.probabilities.len(),
                u.correct.len(),
                u.valid.len()
            )));
        }
        let mut any = false;
        let mut all_right = true;
        for ((p, c), m) in u.probabilities.iter().zip(u.correct).zip(u.valid) {
            if *m == 0 {
                continue;
            }
            any = true;
            let predicted_incorrect = *p < threshold;
            let actually_incorrect = *c == 0;
            all_right &= predicted_incorrect == actually_incorrect;
            confusion.add(predicted_incorrect, actually_incorrect);
        }
        if any {
            scored += 1;
            exact += usize::from(all_right);
        } else {
            excluded += 1;
        }
    }
    if confusion.total() == 0 {
        return Err(MetricsError::NoValidWords);
    }
    let (f1, f1_degenerate) = confusion.f1();
    let (mcc, mcc_degenerate) = confusion.mcc();
    Ok(WordMetrics {
        f1,
        mcc,
        accuracy: confusion.accuracy(),
        exact_match: exact as f64 / scored as f64,
        f1_degenerate,
        mcc_degenerate,
        confusion,
        utterances: scored,
        excluded_utterances: excluded,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SentenceMetrics {
    pub rmse: f64,
    /// `None` when either side has zero variance or fewer than 2 items.
    pub pearson: Option<f64>,
}

pub fn sentence_metrics(predicted: &[f64], target: &[f64]) -> Result<SentenceMetrics, MetricsError> {
    if predicted.len() != target.len() {
        return Err(MetricsError::LengthMismatch(format!(
            "{} predictions for {} targets",
            predicted.len(),
            target.len()
        )));
    }
    if predicted.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = predicted.len() as f64;
    let mse = predicted.iter().zip(target).map(|(p, y)| (p - y) * (p - y)).sum::<f64>() / n;
    Ok(SentenceMetrics {
        rmse: mse.sqrt(),
        pearson: pearson(predicted, target),
    })
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// One utterance's prediction joined with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredUtterance {
    pub utterance_id: String,
    pub seed: u64,
    pub probabilities: Vec<f64>,
    pub score: f64,
    pub correct: Vec<u8>,
    pub valid: Vec<u8>,
    pub target: f64,
    pub severity: Severity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub f1: f64,
    pub mcc: f64,
    pub accuracy: f64,
    pub exact_match: f64,
    pub pearson: Option<f64>,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub values: MetricValues,
    pub f1_degenerate: bool,
    pub mcc_degenerate: bool,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub per_seed: Vec<SeedMetrics>,
    pub mean: MetricValues,
    /// Sample standard deviation across seeds (0 for a single seed).
    pub std: MetricValues,
    pub words: u64,
    pub utterances: usize,
    pub excluded_utterances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub system: String,
    pub threshold: f64,
    pub overall: Summary,
    pub per_severity: BTreeMap<Severity, Summary>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn summarize(records: &[&ScoredUtterance], threshold: f64) -> Result<Summary, MetricsError> {
    let mut seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let mut per_seed = Vec::with_capacity(seeds.len());
    for seed in &seeds {
        let rows: Vec<&&ScoredUtterance> = records.iter().filter(|r| r.seed == *seed).collect();
        let batches: Vec<WordBatch<'_>> = rows
            .iter()
            .map(|r| WordBatch {
                probabilities: &r.probabilities,
                correct: &r.correct,
                valid: &r.valid,
            })
            .collect();
        let w = word_metrics(&batches, threshold)?;
        let scored: Vec<&&&ScoredUtterance> = rows.iter().filter(|r| r.valid.iter().any(|m| *m != 0)).collect();
        let pred: Vec<f64> = scored.iter().map(|r| r.score).collect();
        let target: Vec<f64> = scored.iter().map(|r| r.target).collect();
        let s = sentence_metrics(&pred, &target)?;
        per_seed.push(SeedMetrics {
            seed: *seed,
            values: MetricValues {
                f1: w.f1,
                mcc: w.mcc,
                accuracy: w.accuracy,
                exact_match: w.exact_match,
                pearson: s.pearson,
                rmse: s.rmse,
            },
            f1_degenerate: w.f1_degenerate,
            mcc_degenerate: w.mcc_degenerate,
            confusion: w.confusion,
        });
    }
    let column = |f: &dyn Fn(&MetricValues) -> f64| -> (f64, f64) {
        mean_std(&per_seed.iter().map(|s| f(&s.values)).collect::<Vec<_>>())
    };
    let (f1, f1_sd) = column(&|v| v.f1);
    let (mcc, mcc_sd) = column(&|v| v.mcc);
    let (acc, acc_sd) = column(&|v| v.accuracy);
    let (em, em_sd) = column(&|v| v.exact_match);
    let (rmse, rmse_sd) = column(&|v| v.rmse);
    let pearsons: Option<Vec<f64>> = per_seed.iter().map(|s| s.values.pearson).collect();
    let (corr, corr_sd) = match pearsons {
        Some(p) => {
            let (m, s) = mean_std(&p);
            (Some(m), Some(s))
        }
        None => (None, None),
    };
    let first = &per_seed[0];
    Ok(Summary {
        mean: MetricValues {
            f1,
            mcc,
            accuracy: acc,
            exact_match: em,
            pearson: corr,
            rmse,
        },
        std: MetricValues {
            f1: f1_sd,
            mcc: mcc_sd,
            accuracy: acc_sd,
            exact_match: em_sd,
            pearson: corr_sd,
            rmse: rmse_sd,
        },
        words: first.confusion.total(),
        utterances: records.iter().filter(|r| r.seed == first.seed).count(),
        excluded_utterances: records
            .iter()
            .filter(|r| r.seed == first.seed && r.valid.iter().all(|m| *m == 0))
            .count(),
        per_seed,
    })
}

/// Full-population metrics plus one summary per severity present.
pub fn stratified_report(system: &str, records: &[ScoredUtterance], threshold: f64) -> Result<MetricsReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let all: Vec<&ScoredUtterance> = records.iter().collect();
    let overall = summarize(&all, threshold)?;
    let mut per_severity = BTreeMap::new();
    for sev in Severity::ALL {
        let subset: Vec<&ScoredUtterance> = records.iter().filter(|r| r.severity == sev).collect();
        if subset.iter().any(|r| r.valid.iter().any(|m| *m != 0)) {
            per_severity.insert(sev, summarize(&subset, threshold)?);
        }
    }
    Ok(MetricsReport {
        system: system.to_owned(),
        threshold,
        overall,
        per_severity,
    })
}

fn fmt_pm(out: &mut String, mean: f64, sd: f64, digits: usize) {
    let _ = write!(out, " {mean:>8.digits$} ± {sd:<7.4}");
}

fn fmt_opt(out: &mut String, mean: Option<f64>, sd: Option<f64>) {
    match (mean, sd) {
        (Some(m), Some(s)) => fmt_pm(out, m, s, 3),
        _ => {
            let _ = write!(out, " {:>8} ± {:<7}", "n/a", "n/a");
        }
    }
}

/// Plain-text tables: a main comparison (one row per system, five-seed mean
/// ± sd) and a severity-wise comparison (severity × system).
pub fn render_tables(reports: &[MetricsReport]) -> String {
    let mut out = String::new();
    let width = reports.iter().map(|r| r.system.len()).max().unwrap_or(6).max(6);
    let _ = writeln!(
        out,
        "{:<width$} {:>18} {:>18} {:>18} {:>18} {:>18} {:>18}",
        "System", "F1", "MCC", "Acc.", "Exact", "Corr.", "RMSE"
    );
    for r in reports {
        let m = &r.overall.mean;
        let s = &r.overall.std;
        let _ = write!(out, "{:<width$}", r.system);
        fmt_pm(&mut out, m.f1, s.f1, 3);
        fmt_pm(&mut out, m.mcc, s.mcc, 3);
        fmt_pm(&mut out, m.accuracy, s.accuracy, 3);
        fmt_pm(&mut out, m.exact_match, s.exact_match, 3);
        fmt_opt(&mut out, m.pearson, s.pearson);
        fmt_pm(&mut out, m.rmse, s.rmse, 2);
        out.push('\n');
    }
    out.push('\n');
    let _ = writeln!(
        out,
        "{:<18} {:<width$} {:>8} {:>8} {:>8} {:>8} {:>7}",
        "Severity", "System", "F1", "MCC", "Corr.", "RMSE", "Words"
    );
    for sev in Severity::ALL {
        let mut first = true;
        for r in reports {
            let Some(sub) = r.per_severity.get(&sev) else { continue };
            let label = if first { sev.as_str() } else { "" };
            first = false;
            let corr = sub.mean.pearson.map_or_else(|| "n/a".to_owned(), |c| format!("{c:.3}"));
            let _ = writeln!(
                out,
                "{:<18} {:<width$} {:>8.3} {:>8.3} {:>8} {:>8.2} {:>7}",
                label, r.system, sub.mean.f1, sub.mean.mcc, corr, sub.mean.rmse, sub.words
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch<'a>(p: &'a [f64], c: &'a [u8], m: &'a [u8]) -> WordBatch<'a> {
        WordBatch {
            probabilities: p,
            correct: c,
            valid: m,
        }
    }

    #[test]
    fn perfect_predictions() {
        let p = [0.9, 0.1, 0.7];
        let c = [1, 0, 1];
        let w = word_metrics(&[batch(&p, &c, &[1, 1, 1])], 0.5).unwrap();
        assert_eq!((w.f1, w.mcc, w.accuracy, w.exact_match), (1.0, 1.0, 1.0, 1.0));
        assert!(!w.f1_degenerate && !w.mcc_degenerate);
    }

    #[test]
    fn degenerate_mcc_when_single_class() {
        let p = [0.9, 0.8];
        let c = [1, 1];
        let w = word_metrics(&[batch(&p, &c, &[1, 1])], 0.5).unwrap();
        assert_eq!(w.mcc, 0.0);
        assert!(w.mcc_degenerate);
        assert_eq!(w.f1, 1.0);
        assert!(w.f1_degenerate);
    }

    #[test]
    fn threshold_is_inclusive_for_correct() {
        let w = word_metrics(&[batch(&[0.5], &[1], &[1])], 0.5).unwrap();
        assert_eq!(w.confusion.tn, 1);
    }

    #[test]
    fn masks_and_empty_utterances() {
        let a = batch(&[0.1, 0.9], &[1, 1], &[0, 1]);
        let b = batch(&[0.3], &[0], &[0]);
        let w = word_metrics(&[a, b], 0.5).unwrap();
        assert_eq!(w.confusion.total(), 1);
        assert_eq!(w.utterances, 1);
        assert_eq!(w.excluded_utterances, 1);
        assert_eq!(word_metrics(&[b], 0.5), Err(MetricsError::NoValidWords));
        assert!(matches!(
            word_metrics(&[batch(&[0.1], &[1, 0], &[1, 1])], 0.5),
            Err(MetricsError::LengthMismatch(_))
        ));
    }

    #[test]
    fn sentence_examples() {
        let y = [10.0, 40.0, 100.0];
        let off: Vec<f64> = y.iter().map(|v| v + 10.0).collect();
        let s = sentence_metrics(&off, &y).unwrap();
        assert!((s.rmse - 10.0).abs() < 1e-12);
        assert!((s.pearson.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(sentence_metrics(&y, &y).unwrap().rmse, 0.0);

        let s = sentence_metrics(&[0.0, 50.0, 100.0], &y).unwrap();
        assert!((s.rmse - 8.164_965_809_277_26).abs() < 1e-12);
        // 4500 / sqrt(5000 · 4200)
        assert!((s.pearson.unwrap() - 0.981_980_506_061_965_7).abs() < 1e-12);

        let flat = sentence_metrics(&[50.0, 50.0], &[10.0, 30.0]).unwrap();
        assert_eq!(flat.pearson, None);
        assert!((flat.rmse - 1000f64.sqrt()).abs() < 1e-12);
        assert_eq!(sentence_metrics(&[], &[]), Err(MetricsError::Empty));
    }

    fn rec(id: &str, seed: u64, sev: Severity, p: Vec<f64>, c: Vec<u8>) -> ScoredUtterance {
        let n = p.len();
        let score = 100.0 * p.iter().sum::<f64>() / n as f64;
        let target = 100.0 * c.iter().map(|v| f64::from(*v)).sum::<f64>() / n as f64;
        ScoredUtterance {
            utterance_id: id.into(),
            seed,
            probabilities: p,
            score,
            correct: c,
            valid: vec![1; n],
            target,
            severity: sev,
        }
    }

    #[test]
    fn stratification_partitions_words() {
        let records = vec![
            rec("a", 0, Severity::Mild, vec![0.9, 0.2], vec![1, 0]),
            rec("b", 0, Severity::Moderate, vec![0.6, 0.4, 0.1], vec![1, 1, 0]),
            rec("c", 0, Severity::Mild, vec![0.3], vec![1]),
        ];
        let r = stratified_report("joint", &records, 0.5).unwrap();
        let sum: u64 = r.per_severity.values().map(|s| s.words).sum();
        assert_eq!(sum, r.overall.words);
        assert_eq!(r.per_severity.len(), 2);

        let single: Vec<_> = records.iter().filter(|r| r.severity == Severity::Mild).cloned().collect();
        let r = stratified_report("joint", &single, 0.5).unwrap();
        assert_eq!(r.per_severity[&Severity::Mild], r.overall);
    }

    #[test]
    fn seeds_are_averaged_at_metric_level() {
        let records = vec![
            rec("a", 1, Severity::Mild, vec![0.9, 0.2], vec![1, 0]),
            rec("b", 1, Severity::Mild, vec![0.6, 0.7], vec![1, 0]),
            rec("a", 2, Severity::Mild, vec![0.1, 0.2], vec![1, 0]),
            rec("b", 2, Severity::Mild, vec![0.6, 0.3], vec![1, 0]),
        ];
        let r = stratified_report("x", &records, 0.5).unwrap();
        assert_eq!(r.overall.per_seed.len(), 2);
        let accs: Vec<f64> = r.overall.per_seed.iter().map(|s| s.values.accuracy).collect();
        assert_eq!(accs, vec![0.75, 0.75]);
        assert_eq!(r.overall.mean.accuracy, 0.75);
        assert_eq!(r.overall.std.accuracy, 0.0);
        assert_eq!(r.overall.utterances, 2);
        let table = render_tables(&[r]);
        assert!(table.contains("System"));
        assert!(table.contains("mild"));
    }
}
