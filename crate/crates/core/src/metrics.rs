//! Evaluation statistics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::{parse_judgment, ParsedJudgment};
use crate::scalar::{sign, Scalar};
use crate::schema::{GroundTruth, MosVector, PreferenceLabel, TaskKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} samples, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("correlation is undefined for constant input")]
    ConstantInput,
    #[error("non-finite value {0}")]
    NonFinite(f64),
    #[error("records mix tasks {0} and {1}")]
    MixedTasks(TaskKind, TaskKind),
    #[error("{0} has no dimension-wise pairwise scores")]
    NotPairwise(TaskKind),
    #[error("EG score {0} is outside {{0, 1, 2}}")]
    EgOutOfRange(u8),
}

pub fn accuracy<T: Scalar>(preds: &[PreferenceLabel], truths: &[PreferenceLabel]) -> Result<T, MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch(preds.len(), truths.len()));
    }
    if preds.is_empty() {
        return Err(MetricsError::TooFew { needed: 1, got: 0 });
    }
    let hits = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    Ok(T::from_count(hits) / T::from_count(preds.len()))
}

/// Sample Pearson correlation. Errors when either series is constant.
pub fn pearson<T: Scalar>(x: &[T], y: &[T]) -> Result<T, MetricsError> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricsError::TooFew { needed: 2, got: x.len() });
    }
    if let Some(v) = x.iter().chain(y).find(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite(v.to_f64_lossy()));
    }
    let n = T::from_count(x.len());
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let (mut sxy, mut sxx, mut syy) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == T::zero() || syy == T::zero() {
        return Err(MetricsError::ConstantInput);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).max(-T::one()).min(T::one()))
}

/// Rounds half up to the nearest integer, then clamps to `range`.
pub fn bin_mos<T: Scalar>(score: T, range: (i64, i64)) -> i64 {
    let rounded = (score + T::lit(0.5)).floor().to_f64_lossy();
    (rounded.max(range.0 as f64).min(range.1 as f64)) as i64
}

pub fn eg_mean<T: Scalar>(scores: &[u8]) -> Result<T, MetricsError> {
    if scores.is_empty() {
        return Err(MetricsError::TooFew { needed: 1, got: 0 });
    }
    if let Some(&s) = scores.iter().find(|&&s| s > 2) {
        return Err(MetricsError::EgOutOfRange(s));
    }
    let sum: usize = scores.iter().map(|&s| s as usize).sum();
    Ok(T::from_count(sum) / T::from_count(scores.len()))
}

/// Per-dimension sign agreement between predicted and reference score gaps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimAccuracy {
    pub dimensions: Vec<String>,
    /// `None` when no record contributed to that dimension.
    pub per_dim: Vec<Option<f64>>,
    pub n_per_dim: Vec<usize>,
    /// Macro average over the dimensions that are present.
    pub avg: Option<f64>,
}

pub fn dim_accuracy(records: &[(ParsedJudgment, GroundTruth)]) -> Result<DimAccuracy, MetricsError> {
    let task = match records.first() {
        Some((j, _)) => j.task,
        None => return Err(MetricsError::TooFew { needed: 1, got: 0 }),
    };
    if !task.is_pairwise() {
        return Err(MetricsError::NotPairwise(task));
    }
    let dims = task.schema().dimensions;
    let mut hits = vec![0usize; dims.len()];
    let mut counts = vec![0usize; dims.len()];
    for (j, truth) in records {
        for t in [j.task, truth.task()] {
            if t != task {
                return Err(MetricsError::MixedTasks(task, t));
            }
        }
        let (Some(a), Some(b), Some(gt)) = (&j.candidate_a, &j.candidate_b, truth.as_pairwise()) else {
            continue;
        };
        let pred = a.scores.values().iter().zip(b.scores.values());
        let refr = gt.a_star.values().iter().zip(gt.b_star.values());
        for (k, ((&pa, &pb), (&ra, &rb))) in pred.zip(refr).enumerate() {
            counts[k] += 1;
            if sign(pa - pb) == sign(ra - rb) {
                hits[k] += 1;
            }
        }
    }
    let per_dim: Vec<Option<f64>> = hits
        .iter()
        .zip(&counts)
        .map(|(&h, &n)| (n > 0).then(|| h as f64 / n as f64))
        .collect();
    let present: Vec<f64> = per_dim.iter().flatten().copied().collect();
    let avg = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    Ok(DimAccuracy {
        dimensions: dims.iter().map(|d| d.to_string()).collect(),
        per_dim,
        n_per_dim: counts,
        avg,
    })
}

/// One evaluated prediction: a raw model output or an already parsed
/// judgment, plus its reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub task: TaskKind,
    pub truth: GroundTruth,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsed: Option<ParsedJudgment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eg_score: Option<u8>,
}

impl EvalRecord {
    /// The parsed judgment, parsing `raw` when needed. `None` on parse failure.
    pub fn judgment(&self) -> Option<ParsedJudgment> {
        match (&self.parsed, &self.raw) {
            (Some(p), _) => (p.task == self.task && p.validate().is_ok()).then(|| p.clone()),
            (None, Some(raw)) => parse_judgment(raw, self.task).ok(),
            (None, None) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub n: usize,
    pub parse_failures: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pcc_overall: Option<f64>,
    /// Aspect order follows [`MosVector::KEYS`]; `None` where undefined.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pcc_per_aspect: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pcc_n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dim_accuracy: Option<DimAccuracy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eg_mean: Option<f64>,
}

fn defined(r: Result<f64, MetricsError>) -> Result<Option<f64>, MetricsError> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(MetricsError::ConstantInput | MetricsError::TooFew { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Aggregates a homogeneous batch. Unparseable predictions count as wrong for
/// accuracy and are left out of correlations.
pub fn eval_report(records: &[EvalRecord], task: TaskKind) -> Result<EvalReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::TooFew { needed: 1, got: 0 });
    }
    for r in records {
        for t in [r.task, r.truth.task()] {
            if t != task {
                return Err(MetricsError::MixedTasks(task, t));
            }
        }
    }
    let judgments: Vec<Option<ParsedJudgment>> = records.iter().map(EvalRecord::judgment).collect();
    let parse_failures = judgments.iter().filter(|j| j.is_none()).count();
    let mut report = EvalReport {
        task,
        n: records.len(),
        parse_failures,
        accuracy: None,
        pcc_overall: None,
        pcc_per_aspect: None,
        pcc_n: None,
        dim_accuracy: None,
        eg_mean: None,
    };

    if task.is_pairwise() {
        let hits = records
            .iter()
            .zip(&judgments)
            .filter(|(r, j)| match (j, r.truth.as_pairwise()) {
                (Some(j), Some(t)) => j.answer_pref == Some(t.label),
                _ => false,
            })
            .count();
        report.accuracy = Some(hits as f64 / records.len() as f64);
        let pairs: Vec<(ParsedJudgment, GroundTruth)> = records
            .iter()
            .zip(&judgments)
            .filter_map(|(r, j)| j.clone().map(|j| (j, r.truth.clone())))
            .collect();
        if !pairs.is_empty() {
            report.dim_accuracy = Some(dim_accuracy(&pairs)?);
        }
    } else {
        let mut pred: Vec<MosVector> = Vec::new();
        let mut truth: Vec<MosVector> = Vec::new();
        let mut hits = 0usize;
        for (r, j) in records.iter().zip(&judgments) {
            if let (Some(p), Some(t)) = (j.as_ref().and_then(|j| j.answer_mos), r.truth.as_mos()) {
                if bin_mos(p.overall as f64, (1, 5)) == bin_mos(t.overall as f64, (1, 5)) {
                    hits += 1;
                }
                pred.push(p);
                truth.push(*t);
            }
        }
        report.accuracy = Some(hits as f64 / records.len() as f64);
        let column = |v: &[MosVector], k: usize| -> Vec<f64> { v.iter().map(|m| m.to_array()[k] as f64).collect() };
        let overall = MosVector::KEYS.len() - 1;
        report.pcc_overall = defined(pearson(&column(&pred, overall), &column(&truth, overall)))?;
        report.pcc_per_aspect = Some(
            (0..MosVector::KEYS.len())
                .map(|k| defined(pearson(&column(&pred, k), &column(&truth, k))))
                .collect::<Result<_, _>>()?,
        );
        report.pcc_n = Some(pred.len());
    }

    let eg: Vec<u8> = records.iter().filter_map(|r| r.eg_score).collect();
    if !eg.is_empty() {
        report.eg_mean = Some(eg_mean(&eg)?);
    }
    Ok(report)
}

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.digits$}"))
}

impl EvalReport {
    /// Aligned two-row table: a header and the values. Accuracies are
    /// percentages, correlations three decimals, EG_mean two decimals.
    pub fn to_table(&self) -> String {
        let mut cols: Vec<(String, String)> = vec![
            ("Task".into(), self.task.code().to_string()),
            ("N".into(), self.n.to_string()),
            ("Fail".into(), self.parse_failures.to_string()),
            ("ACC".into(), cell(self.accuracy.map(|a| a * 100.0), 2)),
        ];
        if let Some(p) = self.pcc_overall.map(Some).or(self.pcc_per_aspect.as_ref().map(|_| None)) {
            cols.push(("PCC".into(), cell(p, 3)));
        }
        if let Some(per) = &self.pcc_per_aspect {
            for (k, v) in MosVector::KEYS.iter().zip(per) {
                cols.push((format!("PCC.{k}"), cell(*v, 3)));
            }
        }
        if let Some(d) = &self.dim_accuracy {
            for (i, v) in d.per_dim.iter().enumerate() {
                cols.push((format!("D{}", i + 1), cell(v.map(|a| a * 100.0), 2)));
            }
            cols.push(("AVG".into(), cell(d.avg.map(|a| a * 100.0), 2)));
        }
        if let Some(eg) = self.eg_mean {
            cols.push(("EG_mean".into(), format!("{eg:.2}")));
        }
        let widths: Vec<usize> = cols.iter().map(|(h, v)| h.len().max(v.len())).collect();
        let mut out = String::new();
        for row in 0..2 {
            let line: Vec<String> = cols
                .iter()
                .zip(&widths)
                .map(|((h, v), &w)| format!("{:>w$}", if row == 0 { h } else { v }))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}
