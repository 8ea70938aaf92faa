//! Task kinds, dimension schemas and the two scoring rules that turn
//! per-dimension scores into a preference label.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SchemaError {
    #[error("{task}: expected {expected} dimension scores, got {got}")]
    LengthMismatch {
        task: TaskKind,
        expected: usize,
        got: usize,
    },
    #[error("{task}: score {value} for dimension {index} outside [{min}, {max}]")]
    OutOfRange {
        task: TaskKind,
        index: usize,
        value: f64,
        min: f64,
        max: f64,
    },
    #[error("{task}: score {value} for dimension {index} must be an integer")]
    NonInteger {
        task: TaskKind,
        index: usize,
        value: f64,
    },
    #[error("non-finite total ({0})")]
    NonFinite(f64),
    #[error("ground truth does not match task {task}: {detail}")]
    TruthMismatch { task: TaskKind, detail: String },
    #[error("unknown task `{0}` (expected t1, t2, t3 or t4)")]
    UnknownTask(String),
    #[error("{0}")]
    Invalid(String),
}

/// The four evaluation tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskKind {
    /// Utterance-level A/B preference.
    T1PairwisePreference,
    /// Seven-aspect MOS quality assessment of a single utterance.
    T2QualityAssessment,
    /// Scenario-aware style coherency conditioned on textual context.
    T3ScenarioPreference,
    /// Multi-turn dialogue preference conditioned on dialogue history.
    T4DialoguePreference,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [
        TaskKind::T1PairwisePreference,
        TaskKind::T2QualityAssessment,
        TaskKind::T3ScenarioPreference,
        TaskKind::T4DialoguePreference,
    ];

    pub fn is_pairwise(self) -> bool {
        !matches!(self, TaskKind::T2QualityAssessment)
    }

    /// Short code used on the command line and in JSON: `t1`..`t4`.
    pub fn code(self) -> &'static str {
        match self {
            TaskKind::T1PairwisePreference => "t1",
            TaskKind::T2QualityAssessment => "t2",
            TaskKind::T3ScenarioPreference => "t3",
            TaskKind::T4DialoguePreference => "t4",
        }
    }

    pub fn schema(self) -> &'static DimensionSchema {
        match self {
            TaskKind::T1PairwisePreference => &T1_SCHEMA,
            TaskKind::T2QualityAssessment => &T2_SCHEMA,
            TaskKind::T3ScenarioPreference => &T3_SCHEMA,
            TaskKind::T4DialoguePreference => &T4_SCHEMA,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for TaskKind {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "t1" => Ok(TaskKind::T1PairwisePreference),
            "t2" => Ok(TaskKind::T2QualityAssessment),
            "t3" => Ok(TaskKind::T3ScenarioPreference),
            "t4" => Ok(TaskKind::T4DialoguePreference),
            _ => Err(SchemaError::UnknownTask(s.to_string())),
        }
    }
}

impl Serialize for TaskKind {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for TaskKind {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Ordered evaluation dimensions of one task and their admissible score range.
#[derive(Debug, PartialEq)]
pub struct DimensionSchema {
    pub task: TaskKind,
    pub dimensions: &'static [&'static str],
    pub score_min: f64,
    pub score_max: f64,
    pub integer_only: bool,
}

impl DimensionSchema {
    pub fn count(&self) -> usize {
        self.dimensions.len()
    }

    pub fn validate(&self, scores: &DimScores) -> Result<(), SchemaError> {
        if scores.len() != self.count() {
            return Err(SchemaError::LengthMismatch {
                task: self.task,
                expected: self.count(),
                got: scores.len(),
            });
        }
        for (index, &value) in scores.values().iter().enumerate() {
            if !(value >= self.score_min && value <= self.score_max) {
                return Err(SchemaError::OutOfRange {
                    task: self.task,
                    index,
                    value,
                    min: self.score_min,
                    max: self.score_max,
                });
            }
            if self.integer_only && value.fract() != 0.0 {
                return Err(SchemaError::NonInteger {
                    task: self.task,
                    index,
                    value,
                });
            }
        }
        Ok(())
    }

    /// Sum of the dimension scores after validating them against this schema.
    pub fn total_score(&self, scores: &DimScores) -> Result<f64, SchemaError> {
        self.validate(scores)?;
        Ok(scores.sum())
    }
}

pub static T1_SCHEMA: DimensionSchema = DimensionSchema {
    task: TaskKind::T1PairwisePreference,
    dimensions: &[
        "Text Fidelity & Intelligibility",
        "Speaker Similarity to Prompt Speech",
        "Prosody & Expressiveness Appropriateness",
        "Naturalness & Audio Quality",
    ],
    score_min: 0.0,
    score_max: 10.0,
    integer_only: false,
};

pub static T2_SCHEMA: DimensionSchema = DimensionSchema {
    task: TaskKind::T2QualityAssessment,
    dimensions: &[
        "Noise",
        "Distortion",
        "Speed (speaking rate)",
        "Continuity (smoothness / discontinuity)",
        "Naturalness",
        "Listening effort",
        "Overall quality",
    ],
    score_min: 1.0,
    score_max: 5.0,
    integer_only: true,
};

pub static T3_SCHEMA: DimensionSchema = DimensionSchema {
    task: TaskKind::T3ScenarioPreference,
    dimensions: &[
        "Text Fidelity & Intelligibility",
        "Scenario Style Match",
        "Naturalness & Audio Quality",
    ],
    score_min: 0.0,
    score_max: 10.0,
    integer_only: false,
};

pub static T4_SCHEMA: DimensionSchema = DimensionSchema {
    task: TaskKind::T4DialoguePreference,
    dimensions: &[
        "Intent Matching & Dialogue Act",
        "Speaker Consistency",
        "Contextual Consistency",
        "Emotion & Prosody Match",
        "Overall Naturalness",
    ],
    score_min: 0.0,
    score_max: 10.0,
    integer_only: false,
};

/// One score per dimension, in schema order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DimScores(Vec<f64>);

impl DimScores {
    pub fn new(values: Vec<f64>) -> Self {
        DimScores(values)
    }

    /// Builds scores and validates them against `task`'s schema.
    pub fn for_task(task: TaskKind, values: Vec<f64>) -> Result<Self, SchemaError> {
        let scores = DimScores(values);
        task.schema().validate(&scores)?;
        Ok(scores)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl From<Vec<f64>> for DimScores {
    fn from(values: Vec<f64>) -> Self {
        DimScores(values)
    }
}

/// Sum of all dimension values, checked against `task`'s schema.
pub fn total_score(task: TaskKind, scores: &DimScores) -> Result<f64, SchemaError> {
    task.schema().total_score(scores)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PreferenceLabel {
    SpeechA,
    SpeechB,
}

impl PreferenceLabel {
    pub fn code(self) -> &'static str {
        match self {
            PreferenceLabel::SpeechA => "A",
            PreferenceLabel::SpeechB => "B",
        }
    }

    /// Exact `<answer>` literal.
    pub fn answer_literal(self) -> &'static str {
        match self {
            PreferenceLabel::SpeechA => "Speech A is better",
            PreferenceLabel::SpeechB => "Speech B is better",
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            PreferenceLabel::SpeechA => PreferenceLabel::SpeechB,
            PreferenceLabel::SpeechB => PreferenceLabel::SpeechA,
        }
    }
}

impl Serialize for PreferenceLabel {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.code())
    }
}

impl<'de> Deserialize<'de> for PreferenceLabel {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        match s.as_str() {
            "A" => Ok(PreferenceLabel::SpeechA),
            "B" => Ok(PreferenceLabel::SpeechB),
            other => Err(serde::de::Error::custom(format!(
                "preference label must be \"A\" or \"B\", got {other:?}"
            ))),
        }
    }
}

/// Label rule over candidate totals: A wins only on a strict inequality,
/// so equal totals go to B.
pub fn label_from_totals(total_a: f64, total_b: f64) -> Result<PreferenceLabel, SchemaError> {
    for t in [total_a, total_b] {
        if !t.is_finite() {
            return Err(SchemaError::NonFinite(t));
        }
    }
    Ok(if total_a > total_b {
        PreferenceLabel::SpeechA
    } else {
        PreferenceLabel::SpeechB
    })
}

/// [`label_from_totals`] plus whether the totals tied.
pub fn label_with_tie_flag(
    total_a: f64,
    total_b: f64,
) -> Result<(PreferenceLabel, bool), SchemaError> {
    let label = label_from_totals(total_a, total_b)?;
    Ok((label, total_a == total_b))
}

/// Seven MOS aspects, each an integer in 1..=5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "MosRepr", into = "MosRepr")]
pub struct MosVector {
    pub noise: u8,
    pub distortion: u8,
    pub speed: u8,
    pub continuity: u8,
    pub naturalness: u8,
    pub listening_effort: u8,
    pub overall: u8,
}

impl MosVector {
    /// Answer keys in their fixed serialization order.
    pub const KEYS: [&'static str; 7] = [
        "noise",
        "distortion",
        "speed",
        "continuity",
        "naturalness",
        "listening_effort",
        "overall",
    ];
    pub const MIN: u8 = 1;
    pub const MAX: u8 = 5;

    pub fn from_array(v: [u8; 7]) -> Result<Self, SchemaError> {
        for (index, &x) in v.iter().enumerate() {
            if !(Self::MIN..=Self::MAX).contains(&x) {
                return Err(SchemaError::OutOfRange {
                    task: TaskKind::T2QualityAssessment,
                    index,
                    value: x as f64,
                    min: Self::MIN as f64,
                    max: Self::MAX as f64,
                });
            }
        }
        Ok(MosVector {
            noise: v[0],
            distortion: v[1],
            speed: v[2],
            continuity: v[3],
            naturalness: v[4],
            listening_effort: v[5],
            overall: v[6],
        })
    }

    pub fn to_array(self) -> [u8; 7] {
        [
            self.noise,
            self.distortion,
            self.speed,
            self.continuity,
            self.naturalness,
            self.listening_effort,
            self.overall,
        ]
    }

    /// `noise=4; distortion=3; ...; overall=4;`
    pub fn answer_string(self) -> String {
        let mut out = String::new();
        for (i, (key, v)) in Self::KEYS.iter().zip(self.to_array()).enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(key);
            out.push('=');
            out.push_str(&v.to_string());
            out.push(';');
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct MosRepr {
    noise: u8,
    distortion: u8,
    speed: u8,
    continuity: u8,
    naturalness: u8,
    listening_effort: u8,
    overall: u8,
}

impl TryFrom<MosRepr> for MosVector {
    type Error = SchemaError;

    fn try_from(r: MosRepr) -> Result<Self, Self::Error> {
        MosVector::from_array([
            r.noise,
            r.distortion,
            r.speed,
            r.continuity,
            r.naturalness,
            r.listening_effort,
            r.overall,
        ])
    }
}

impl From<MosVector> for MosRepr {
    fn from(m: MosVector) -> Self {
        MosRepr {
            noise: m.noise,
            distortion: m.distortion,
            speed: m.speed,
            continuity: m.continuity,
            naturalness: m.naturalness,
            listening_effort: m.listening_effort,
            overall: m.overall,
        }
    }
}

/// Pairwise target: reference dimension scores for both candidates and the label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseTruth {
    pub a_star: DimScores,
    pub b_star: DimScores,
    pub label: PreferenceLabel,
}

/// Per-task target. Exactly one of `pairwise`/`mos` is set, matching the task family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TruthRepr", into = "TruthRepr")]
pub struct GroundTruth {
    task: TaskKind,
    pairwise: Option<PairwiseTruth>,
    mos: Option<MosVector>,
}

impl GroundTruth {
    pub fn pairwise(
        task: TaskKind,
        a_star: DimScores,
        b_star: DimScores,
        label: PreferenceLabel,
    ) -> Result<Self, SchemaError> {
        if !task.is_pairwise() {
            return Err(SchemaError::TruthMismatch {
                task,
                detail: "pairwise truth given for the MOS task".into(),
            });
        }
        let schema = task.schema();
        schema.validate(&a_star)?;
        schema.validate(&b_star)?;
        Ok(GroundTruth {
            task,
            pairwise: Some(PairwiseTruth {
                a_star,
                b_star,
                label,
            }),
            mos: None,
        })
    }

    /// Pairwise truth whose label follows from the reference totals.
    pub fn pairwise_from_scores(
        task: TaskKind,
        a_star: DimScores,
        b_star: DimScores,
    ) -> Result<Self, SchemaError> {
        let label = label_from_totals(a_star.sum(), b_star.sum())?;
        Self::pairwise(task, a_star, b_star, label)
    }

    pub fn mos(mos: MosVector) -> Self {
        GroundTruth {
            task: TaskKind::T2QualityAssessment,
            pairwise: None,
            mos: Some(mos),
        }
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn as_pairwise(&self) -> Option<&PairwiseTruth> {
        self.pairwise.as_ref()
    }

    pub fn as_mos(&self) -> Option<&MosVector> {
        self.mos.as_ref()
    }
}

#[derive(Serialize, Deserialize)]
struct TruthRepr {
    task: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pairwise: Option<PairwiseTruth>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mos: Option<MosVector>,
}

impl TryFrom<TruthRepr> for GroundTruth {
    type Error = SchemaError;

    fn try_from(r: TruthRepr) -> Result<Self, Self::Error> {
        match (r.pairwise, r.mos) {
            (Some(p), None) => GroundTruth::pairwise(r.task, p.a_star, p.b_star, p.label),
            (None, Some(m)) if r.task == TaskKind::T2QualityAssessment => Ok(GroundTruth::mos(m)),
            (None, Some(_)) => Err(SchemaError::TruthMismatch {
                task: r.task,
                detail: "MOS truth given for a pairwise task".into(),
            }),
            (Some(_), Some(_)) => Err(SchemaError::TruthMismatch {
                task: r.task,
                detail: "both pairwise and mos targets present".into(),
            }),
            (None, None) => Err(SchemaError::TruthMismatch {
                task: r.task,
                detail: "neither pairwise nor mos target present".into(),
            }),
        }
    }
}

impl From<GroundTruth> for TruthRepr {
    fn from(t: GroundTruth) -> Self {
        TruthRepr {
            task: t.task,
            pairwise: t.pairwise,
            mos: t.mos,
        }
    }
}

/// Candidate outputs synthesized for one target text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub text_id: String,
    pub candidates: Vec<Candidate>,
    #[serde(default)]
    pub includes_ground_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: String,
    #[serde(default)]
    pub source: String,
    /// Judge-assigned dimension scores, when already annotated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dims: Option<DimScores>,
}

impl CandidateSet {
    pub fn validate(&self) -> Result<(), SchemaError> {
        let mut seen = std::collections::HashSet::new();
        for c in &self.candidates {
            if !seen.insert(c.id.as_str()) {
                return Err(SchemaError::Invalid(format!(
                    "duplicate candidate id `{}` in text group `{}`",
                    c.id, self.text_id
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schema_counts_and_ranges() {
        let expect = [(4, 0.0, 10.0), (7, 1.0, 5.0), (3, 0.0, 10.0), (5, 0.0, 10.0)];
        for (task, (d, lo, hi)) in TaskKind::ALL.iter().zip(expect) {
            let s = task.schema();
            assert_eq!(s.task, *task);
            assert_eq!(s.count(), d);
            assert_eq!((s.score_min, s.score_max), (lo, hi));
        }
        assert!(T2_SCHEMA.integer_only);
        assert_eq!(T1_SCHEMA.dimensions[1], "Speaker Similarity to Prompt Speech");
    }

    #[test]
    fn total_score_examples() {
        let t1 = TaskKind::T1PairwisePreference;
        assert_eq!(total_score(t1, &vec![8.0, 7.0, 6.0, 9.0].into()).unwrap(), 30.0);
        assert_eq!(total_score(t1, &vec![0.0; 4].into()).unwrap(), 0.0);
        assert_eq!(total_score(t1, &vec![10.0; 4].into()).unwrap(), 40.0);
    }

    #[test]
    fn total_score_rejects_bad_vectors() {
        let t1 = TaskKind::T1PairwisePreference;
        assert!(matches!(
            total_score(t1, &vec![1.0, 2.0, 3.0].into()),
            Err(SchemaError::LengthMismatch { expected: 4, got: 3, .. })
        ));
        assert!(matches!(
            total_score(t1, &vec![1.0, 2.0, 3.0, 10.5].into()),
            Err(SchemaError::OutOfRange { index: 3, .. })
        ));
        let t2 = TaskKind::T2QualityAssessment;
        assert!(matches!(
            total_score(t2, &vec![1.0, 2.0, 3.0, 4.0, 5.0, 4.5, 3.0].into()),
            Err(SchemaError::NonInteger { index: 5, .. })
        ));
    }

    #[test]
    fn label_rule() {
        use PreferenceLabel::*;
        assert_eq!(label_from_totals(32.0, 28.0).unwrap(), SpeechA);
        assert_eq!(label_from_totals(28.0, 32.0).unwrap(), SpeechB);
        assert_eq!(label_from_totals(28.0, 28.0).unwrap(), SpeechB);
        assert_eq!(label_with_tie_flag(28.0, 28.0).unwrap(), (SpeechB, true));
        assert!(label_from_totals(f64::NAN, 1.0).is_err());
        assert!(label_from_totals(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn mos_answer_string_order() {
        let m = MosVector::from_array([4, 3, 4, 5, 4, 4, 4]).unwrap();
        assert_eq!(
            m.answer_string(),
            "noise=4; distortion=3; speed=4; continuity=5; naturalness=4; listening_effort=4; overall=4;"
        );
        assert!(MosVector::from_array([0, 3, 4, 5, 4, 4, 4]).is_err());
        assert!(MosVector::from_array([1, 3, 4, 5, 4, 4, 6]).is_err());
    }

    #[test]
    fn ground_truth_json_shape() {
        let t = GroundTruth::pairwise(
            TaskKind::T3ScenarioPreference,
            vec![8.0, 7.0, 6.0].into(),
            vec![5.0, 7.0, 7.0].into(),
            PreferenceLabel::SpeechA,
        )
        .unwrap();
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(
            json,
            r#"{"task":"t3","pairwise":{"a_star":[8.0,7.0,6.0],"b_star":[5.0,7.0,7.0],"label":"A"}}"#
        );
        assert_eq!(serde_json::from_str::<GroundTruth>(&json).unwrap(), t);

        let bad = r#"{"task":"t2","pairwise":{"a_star":[1],"b_star":[1],"label":"A"}}"#;
        assert!(serde_json::from_str::<GroundTruth>(bad).is_err());
        let bad = r#"{"task":"t1","mos":{"noise":1,"distortion":1,"speed":1,"continuity":1,"naturalness":1,"listening_effort":1,"overall":1}}"#;
        assert!(serde_json::from_str::<GroundTruth>(bad).is_err());
        let bad_range = r#"{"task":"t2","mos":{"noise":9,"distortion":1,"speed":1,"continuity":1,"naturalness":1,"listening_effort":1,"overall":1}}"#;
        assert!(serde_json::from_str::<GroundTruth>(bad_range).is_err());
    }

    #[test]
    fn candidate_ids_unique() {
        let set = CandidateSet {
            text_id: "x".into(),
            candidates: vec![
                Candidate { id: "gt".into(), source: "GT".into(), dims: None },
                Candidate { id: "gt".into(), source: "tts".into(), dims: None },
            ],
            includes_ground_truth: true,
        };
        assert!(set.validate().is_err());
    }
}
