//! Format, accuracy and reasoning-consistency rewards and their weighted total.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::{parse_judgment, FormatError, FormatErrorKind, ParsedJudgment};
use crate::scalar::{clamp_unit, sign, Scalar};
use crate::schema::{DimScores, GroundTruth, MosVector, PreferenceLabel, TaskKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("degenerate score range ({min}, {max}): need max > min")]
    DegenerateRange { min: f64, max: f64 },
    #[error("score vectors differ in length: {0:?}")]
    LengthMismatch([usize; 4]),
    #[error("ground truth is for {truth} but the rollout is scored as {task}")]
    TaskMismatch { task: TaskKind, truth: TaskKind },
    #[error("reward weights must be finite")]
    NonFiniteWeight,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights<T> {
    pub lambda_fmt: T,
    pub lambda_acc: T,
    pub lambda_rc: T,
}

impl<T: Scalar> Default for RewardWeights<T> {
    fn default() -> Self {
        RewardWeights {
            lambda_fmt: T::one(),
            lambda_acc: T::one(),
            lambda_rc: T::one(),
        }
    }
}

impl<T: Scalar> RewardWeights<T> {
    pub fn new(lambda_fmt: T, lambda_acc: T, lambda_rc: T) -> Result<Self, RewardError> {
        let w = RewardWeights { lambda_fmt, lambda_acc, lambda_rc };
        if [lambda_fmt, lambda_acc, lambda_rc].iter().all(|x| x.is_finite()) {
            Ok(w)
        } else {
            Err(RewardError::NonFiniteWeight)
        }
    }
}

/// One rollout's reward components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown<T> {
    pub r_fmt: T,
    pub r_acc: T,
    pub r_rc: T,
    pub total: T,
    pub parse_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format_error: Option<FormatErrorKind>,
}

impl<T: Scalar> RewardBreakdown<T> {
    fn compose(weights: &RewardWeights<T>, r_fmt: T, r_acc: T, r_rc: T) -> Self {
        RewardBreakdown {
            r_fmt,
            r_acc,
            r_rc,
            total: weights.lambda_fmt * r_fmt + weights.lambda_acc * r_acc + weights.lambda_rc * r_rc,
            parse_ok: true,
            format_error: None,
        }
    }

    fn failed(weights: &RewardWeights<T>, kind: FormatErrorKind) -> Self {
        RewardBreakdown {
            format_error: Some(kind),
            parse_ok: false,
            ..Self::compose(weights, -T::one(), T::zero(), T::zero())
        }
    }
}

/// 0 for a well-formed output, -1 otherwise.
pub fn format_reward<T: Scalar>(parse_result: &Result<ParsedJudgment, FormatError>) -> T {
    match parse_result {
        Ok(_) => T::zero(),
        Err(_) => -T::one(),
    }
}

pub fn accuracy_reward_pairwise<T: Scalar>(pred: PreferenceLabel, truth: PreferenceLabel) -> T {
    if pred == truth {
        T::one()
    } else {
        T::zero()
    }
}

fn check_range<T: Scalar>(range: (T, T)) -> Result<T, RewardError> {
    let (lo, hi) = range;
    let span = hi - lo;
    if !(span > T::zero()) || !span.is_finite() {
        return Err(RewardError::DegenerateRange {
            min: lo.to_f64_lossy(),
            max: hi.to_f64_lossy(),
        });
    }
    Ok(span)
}

/// `clamp(1 - |pred - truth| / (max - min), 0, 1)` on the overall score.
pub fn accuracy_reward_mos<T: Scalar>(pred_overall: T, truth_overall: T, range: (T, T)) -> Result<T, RewardError> {
    let span = check_range(range)?;
    Ok(clamp_unit(T::one() - (pred_overall - truth_overall).abs() / span))
}

/// Fraction of dimensions where the predicted A-vs-B ordering has the same
/// sign as the reference ordering.
pub fn rc_reward_pairwise<T: Scalar>(a: &[T], b: &[T], a_star: &[T], b_star: &[T]) -> Result<T, RewardError> {
    let lens = [a.len(), b.len(), a_star.len(), b_star.len()];
    if lens.iter().any(|&l| l != lens[0]) || lens[0] == 0 {
        return Err(RewardError::LengthMismatch(lens));
    }
    let agree = (0..a.len())
        .filter(|&i| sign(a[i] - b[i]) == sign(a_star[i] - b_star[i]))
        .count();
    Ok(T::from_count(agree) / T::from_count(a.len()))
}

/// `clamp(1 - mean_k |pred_k - truth_k| / (max - min), 0, 1)` over all seven aspects.
pub fn rc_reward_mos<T: Scalar>(pred: &MosVector, truth: &MosVector, range: (T, T)) -> Result<T, RewardError> {
    let span = check_range(range)?;
    let p = pred.to_array();
    let t = truth.to_array();
    let sum: T = p
        .iter()
        .zip(t.iter())
        .map(|(&x, &y)| (T::lit(x as f64) - T::lit(y as f64)).abs() / span)
        .sum();
    Ok(clamp_unit(T::one() - sum / T::from_count(p.len())))
}

/// MOS range used by the quality-assessment rewards.
pub fn default_mos_range<T: Scalar>() -> (T, T) {
    (T::lit(MosVector::MIN as f64), T::lit(MosVector::MAX as f64))
}

fn to_scalars<T: Scalar>(s: &DimScores) -> Vec<T> {
    s.values().iter().map(|&v| T::lit(v)).collect()
}

/// Scores an already-parsed rollout against its ground truth.
pub fn score_parsed<T: Scalar>(
    parsed: &Result<ParsedJudgment, FormatError>,
    truth: &GroundTruth,
    task: TaskKind,
    weights: &RewardWeights<T>,
) -> Result<RewardBreakdown<T>, RewardError> {
    if truth.task() != task {
        return Err(RewardError::TaskMismatch { task, truth: truth.task() });
    }
    let j = match parsed {
        Ok(j) if j.task == task => j,
        Ok(_) => return Err(RewardError::TaskMismatch { task, truth: truth.task() }),
        Err(e) => return Ok(RewardBreakdown::failed(weights, e.kind)),
    };
    let r_fmt = format_reward::<T>(parsed);
    if let Some(t) = truth.as_pairwise() {
        let a = j.candidate_a.as_ref().expect("parsed pairwise judgment has candidate A");
        let b = j.candidate_b.as_ref().expect("parsed pairwise judgment has candidate B");
        let label = j.answer_pref.expect("parsed pairwise judgment has an answer");
        let r_acc = accuracy_reward_pairwise::<T>(label, t.label);
        let r_rc = rc_reward_pairwise(
            &to_scalars::<T>(&a.scores),
            &to_scalars::<T>(&b.scores),
            &to_scalars::<T>(&t.a_star),
            &to_scalars::<T>(&t.b_star),
        )?;
        Ok(RewardBreakdown::compose(weights, r_fmt, r_acc, r_rc))
    } else {
        let m = truth.as_mos().expect("non-pairwise truth carries MOS");
        let pred = j.answer_mos.expect("parsed quality judgment has MOS");
        let range = default_mos_range::<T>();
        let r_acc = accuracy_reward_mos(T::lit(pred.overall as f64), T::lit(m.overall as f64), range)?;
        let r_rc = rc_reward_mos(&pred, m, range)?;
        Ok(RewardBreakdown::compose(weights, r_fmt, r_acc, r_rc))
    }
}

/// Parses `raw` and returns its weighted reward. A parse failure yields
/// `(-1, 0, 0)` so every rollout in a group gets a defined reward.
pub fn judge_reward<T: Scalar>(
    raw: &str,
    truth: &GroundTruth,
    task: TaskKind,
    weights: &RewardWeights<T>,
) -> Result<RewardBreakdown<T>, RewardError> {
    if truth.task() != task {
        return Err(RewardError::TaskMismatch { task, truth: truth.task() });
    }
    score_parsed(&parse_judgment(raw, task), truth, task, weights)
}
