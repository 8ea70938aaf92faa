//! Judgment parsing, reasoning-consistent rewards, a GRPO kernel over an
//! enumerable toy policy, and preference-data tooling for speech reward models.
//!
//! Numeric kernels are generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the scalar for the common case.

pub mod datapipe;
pub mod grpo;
pub mod metrics;
pub mod parser;
pub mod rewards;
pub mod scalar;
pub mod schema;

pub use datapipe::{
    filter_cycles, form_pairs, read_records, split_dataset, vote_filter, write_records, AnnotatorVote, DataError,
    DiscardReason, FilterReport, PairRecord, ReadMode, Split, SplitRatios, VoteDecision,
};
pub use grpo::{grad_check, train_toy, GrpoError, TrainConfig, ToyTask};
pub use metrics::{accuracy, bin_mos, eg_mean, eval_report, pearson, EvalRecord, EvalReport, MetricsError};
pub use parser::{extract_answer, parse_judgment, render_judgment, Answer, FormatError, FormatErrorKind, ParsedJudgment};
pub use rewards::{judge_reward, score_parsed, RewardError};
pub use scalar::Scalar;
pub use schema::{
    CandidateSet, DimScores, DimensionSchema, GroundTruth, MosVector, PreferenceLabel, SchemaError, TaskKind,
};

pub type Hyperparams = grpo::Hyperparams<f64>;
pub type RewardWeights = rewards::RewardWeights<f64>;
pub type RewardBreakdown = rewards::RewardBreakdown<f64>;
pub type ToyPolicy = grpo::ToyPolicy<f64>;
pub type Rollout = grpo::Rollout<f64>;
pub type Group = grpo::Group<f64>;
pub type ToyTrainOutcome = grpo::ToyTrainOutcome<f64>;

pub type Hyperparams32 = grpo::Hyperparams<f32>;
pub type RewardWeights32 = rewards::RewardWeights<f32>;
pub type RewardBreakdown32 = rewards::RewardBreakdown<f32>;
pub type ToyPolicy32 = grpo::ToyPolicy<f32>;
pub type ToyTrainOutcome32 = grpo::ToyTrainOutcome<f32>;
