//! Group-relative policy optimization over an enumerable softmax policy.
//!
//! The policy is a table of logits, one row per prompt, over a finite
//! vocabulary of complete outputs (rendered judgments). Everything is exact:
//! KL terms are summed over the full support and gradients come from the
//! softmax Jacobian, so they can be checked against finite differences.
//!
//! ```text
//! A_g     = (R_g - mean(R)) / (std(R) + eps_adv)          population std
//! rho_g   = pi(o_g | x) / pi_old(o_g | x)
//! J       = mean_x mean_g min(rho_g A_g, clip(rho_g, 1-eps, 1+eps) A_g)
//! L       = -J + beta * mean_x KL(pi(.|x) || pi_ref(.|x))
//! ```

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::parser::{render_judgment, CandidateBlock, ParsedJudgment};
use crate::rewards::{judge_reward, RewardBreakdown, RewardError, RewardWeights};
use crate::scalar::Scalar;
use crate::schema::{GroundTruth, PreferenceLabel, SchemaError, TaskKind};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("empty group")]
    EmptyGroup,
    #[error("no groups")]
    NoGroups,
    #[error("importance ratio must be positive, got {0}")]
    NonPositiveRatio(f64),
    #[error("distributions have different support sizes ({0} vs {1})")]
    SupportMismatch(usize, usize),
    #[error("q is zero where p is positive at index {0}")]
    NotAbsolutelyContinuous(usize),
    #[error("unknown prompt `{0}`")]
    UnknownPrompt(String),
    #[error("output id {0} is outside the vocabulary")]
    UnknownOutput(usize),
    #[error("policies disagree on prompts or vocabulary")]
    PolicyShapeMismatch,
    #[error("parameter vector has length {got}, expected {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("invalid hyperparameter: {0}")]
    Hyperparam(String),
    #[error("loss is not finite at coordinate {coordinate:?}")]
    NonFiniteLoss { coordinate: Option<usize> },
    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams<T> {
    pub group_size: usize,
    pub clip_epsilon: T,
    pub adv_epsilon: T,
    pub kl_beta: T,
    pub weights: RewardWeights<T>,
    pub sft_lr: T,
    pub rl_lr: T,
}

impl<T: Scalar> Default for Hyperparams<T> {
    /// Full-scale training configuration: G=8, beta=0.04, unit reward weights,
    /// learning rates 1e-5 (SFT) and 1e-6 (RL).
    fn default() -> Self {
        Hyperparams {
            group_size: 8,
            clip_epsilon: T::lit(0.2),
            adv_epsilon: T::lit(1e-8),
            kl_beta: T::lit(0.04),
            weights: RewardWeights::default(),
            sft_lr: T::lit(1e-5),
            rl_lr: T::lit(1e-6),
        }
    }
}

impl<T: Scalar> Hyperparams<T> {
    /// Default hyperparameters with step sizes suited to plain gradient
    /// descent on a logit table.
    pub fn toy() -> Self {
        Hyperparams {
            sft_lr: T::lit(0.5),
            rl_lr: T::one(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GrpoError> {
        let bad = |m: &str| Err(GrpoError::Hyperparam(m.to_string()));
        if self.group_size < 2 {
            return bad("group_size must be at least 2");
        }
        if !(self.clip_epsilon > T::zero() && self.clip_epsilon < T::one()) {
            return bad("clip_epsilon must lie in (0, 1)");
        }
        if !(self.adv_epsilon > T::zero()) {
            return bad("adv_epsilon must be positive");
        }
        if !self.kl_beta.is_finite() || self.kl_beta < T::zero() {
            return bad("kl_beta must be finite and non-negative");
        }
        if !(self.rl_lr > T::zero()) || !(self.sft_lr > T::zero()) {
            return bad("learning rates must be positive");
        }
        RewardWeights::new(self.weights.lambda_fmt, self.weights.lambda_acc, self.weights.lambda_rc)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Elementary pieces

/// Standardizes rewards within one group with the population standard
/// deviation. An all-equal group gets exactly zero advantages.
pub fn normalize_advantages<T: Scalar>(rewards: &[T], adv_epsilon: T) -> Result<Vec<T>, GrpoError> {
    if rewards.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![T::zero(); rewards.len()]);
    }
    let n = T::from_count(rewards.len());
    let mean = rewards.iter().copied().sum::<T>() / n;
    let var = rewards.iter().map(|&r| (r - mean) * (r - mean)).sum::<T>() / n;
    let denom = var.sqrt() + adv_epsilon;
    Ok(rewards.iter().map(|&r| (r - mean) / denom).collect())
}

pub fn clipped_surrogate<T: Scalar>(ratio: T, advantage: T, clip_epsilon: T) -> Result<T, GrpoError> {
    if !(ratio > T::zero()) {
        return Err(GrpoError::NonPositiveRatio(ratio.to_f64_lossy()));
    }
    Ok(surrogate_parts(ratio, advantage, clip_epsilon).0)
}

/// (surrogate value, d surrogate / d ratio)
fn surrogate_parts<T: Scalar>(ratio: T, advantage: T, eps: T) -> (T, T) {
    let clipped_ratio = ratio.max(T::one() - eps).min(T::one() + eps);
    let unclipped = ratio * advantage;
    let clipped = clipped_ratio * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else {
        (clipped, T::zero())
    }
}

/// `sum_i p_i ln(p_i / q_i)` over a shared finite support.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T, GrpoError> {
    if p.len() != q.len() {
        return Err(GrpoError::SupportMismatch(p.len(), q.len()));
    }
    let mut kl = T::zero();
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > T::zero() {
            if !(qi > T::zero()) {
                return Err(GrpoError::NotAbsolutelyContinuous(i));
            }
            kl += pi * (pi / qi).ln();
        }
    }
    Ok(kl.max(T::zero()))
}

fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

// ---------------------------------------------------------------------------
// Toy policy

/// Softmax policy over a finite vocabulary of complete outputs, one logit
/// row per prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy<T> {
    prompts: Vec<String>,
    vocabulary: Vec<String>,
    logits: Vec<T>,
}

impl<T: Scalar> ToyPolicy<T> {
    pub fn uniform(prompts: Vec<String>, vocabulary: Vec<String>) -> Self {
        let logits = vec![T::zero(); prompts.len() * vocabulary.len()];
        ToyPolicy { prompts, vocabulary, logits }
    }

    pub fn from_params(prompts: Vec<String>, vocabulary: Vec<String>, logits: Vec<T>) -> Result<Self, GrpoError> {
        let expected = prompts.len() * vocabulary.len();
        if logits.len() != expected {
            return Err(GrpoError::ParamLength { expected, got: logits.len() });
        }
        Ok(ToyPolicy { prompts, vocabulary, logits })
    }

    /// Same prompts and vocabulary, new logits.
    pub fn with_params(&self, logits: Vec<T>) -> Result<Self, GrpoError> {
        Self::from_params(self.prompts.clone(), self.vocabulary.clone(), logits)
    }

    pub fn params(&self) -> &[T] {
        &self.logits
    }

    pub fn prompts(&self) -> &[String] {
        &self.prompts
    }

    pub fn vocabulary(&self) -> &[String] {
        &self.vocabulary
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn prompt_index(&self, id: &str) -> Result<usize, GrpoError> {
        self.prompts
            .iter()
            .position(|p| p == id)
            .ok_or_else(|| GrpoError::UnknownPrompt(id.to_string()))
    }

    fn row(&self, prompt: usize) -> &[T] {
        let v = self.vocab_size();
        &self.logits[prompt * v..(prompt + 1) * v]
    }

    pub fn log_probs(&self, prompt: usize) -> Vec<T> {
        log_softmax(self.row(prompt))
    }

    pub fn probs(&self, prompt: usize) -> Vec<T> {
        self.log_probs(prompt).into_iter().map(T::exp).collect()
    }

    pub fn logprob(&self, prompt: usize, output: usize) -> Result<T, GrpoError> {
        if output >= self.vocab_size() {
            return Err(GrpoError::UnknownOutput(output));
        }
        Ok(self.log_probs(prompt)[output])
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.prompts == other.prompts && self.vocabulary == other.vocabulary
    }

    /// Total-variation distance, maximized over prompts.
    pub fn max_total_variation(&self, other: &Self) -> Result<T, GrpoError> {
        if !self.same_shape(other) {
            return Err(GrpoError::PolicyShapeMismatch);
        }
        let half = T::lit(0.5);
        Ok((0..self.prompts.len())
            .map(|p| {
                self.probs(p)
                    .iter()
                    .zip(other.probs(p))
                    .map(|(&a, b)| (a - b).abs())
                    .sum::<T>()
                    * half
            })
            .fold(T::zero(), T::max))
    }

    /// Mean over prompts of KL(self || reference).
    pub fn mean_kl(&self, reference: &Self) -> Result<T, GrpoError> {
        if !self.same_shape(reference) {
            return Err(GrpoError::PolicyShapeMismatch);
        }
        let mut total = T::zero();
        for p in 0..self.prompts.len() {
            total += kl_divergence(&self.probs(p), &reference.probs(p))?;
        }
        Ok(total / T::from_count(self.prompts.len().max(1)))
    }
}

// ---------------------------------------------------------------------------
// Rollouts and the GRPO loss

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout<T> {
    pub output_id: usize,
    pub output_text: String,
    pub logprob_current: T,
    pub logprob_old: T,
    pub reward: RewardBreakdown<T>,
    pub advantage: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group<T> {
    pub prompt_id: String,
    pub rollouts: Vec<Rollout<T>>,
}

impl<T: Scalar> Group<T> {
    /// Fills every rollout's advantage from the group's total rewards.
    pub fn assign_advantages(&mut self, adv_epsilon: T) -> Result<(), GrpoError> {
        let rewards: Vec<T> = self.rollouts.iter().map(|r| r.reward.total).collect();
        let adv = normalize_advantages(&rewards, adv_epsilon)?;
        for (r, a) in self.rollouts.iter_mut().zip(adv) {
            r.advantage = Some(a);
        }
        Ok(())
    }

    fn advantages(&self, adv_epsilon: T) -> Result<Vec<T>, GrpoError> {
        match self.rollouts.iter().map(|r| r.advantage).collect::<Option<Vec<T>>>() {
            Some(a) => Ok(a),
            None => {
                let rewards: Vec<T> = self.rollouts.iter().map(|r| r.reward.total).collect();
                normalize_advantages(&rewards, adv_epsilon)
            }
        }
    }
}

/// GRPO loss and its gradient with respect to `policy`'s logits.
pub fn grpo_loss_and_grad<T: Scalar>(
    groups: &[Group<T>],
    policy: &ToyPolicy<T>,
    old_policy: &ToyPolicy<T>,
    ref_policy: &ToyPolicy<T>,
    h: &Hyperparams<T>,
) -> Result<(T, Vec<T>), GrpoError> {
    if groups.is_empty() {
        return Err(GrpoError::NoGroups);
    }
    if !policy.same_shape(old_policy) || !policy.same_shape(ref_policy) {
        return Err(GrpoError::PolicyShapeMismatch);
    }
    let v = policy.vocab_size();
    let n_groups = T::from_count(groups.len());
    let mut grad = vec![T::zero(); policy.logits.len()];
    let mut surrogate_mean = T::zero();
    let mut kl_mean = T::zero();

    for group in groups {
        if group.rollouts.is_empty() {
            return Err(GrpoError::EmptyGroup);
        }
        let p = policy.prompt_index(&group.prompt_id)?;
        let logp = policy.log_probs(p);
        let probs: Vec<T> = logp.iter().map(|&l| l.exp()).collect();
        let logp_old = old_policy.log_probs(p);
        let logp_ref = ref_policy.log_probs(p);
        let adv = group.advantages(h.adv_epsilon)?;
        let g_count = T::from_count(group.rollouts.len());
        let row = &mut grad[p * v..(p + 1) * v];

        let mut group_surrogate = T::zero();
        for (r, &a) in group.rollouts.iter().zip(&adv) {
            let o = r.output_id;
            if o >= v {
                return Err(GrpoError::UnknownOutput(o));
            }
            let ratio = (logp[o] - logp_old[o]).exp();
            let (s, ds_dratio) = surrogate_parts(ratio, a, h.clip_epsilon);
            group_surrogate += s;
            if ds_dratio != T::zero() {
                // d ratio / d z = ratio * (e_o - pi); the loss carries -J.
                let scale = ds_dratio * ratio / (g_count * n_groups);
                for (j, gj) in row.iter_mut().enumerate() {
                    let indicator = if j == o { T::one() } else { T::zero() };
                    *gj -= scale * (indicator - probs[j]);
                }
            }
        }
        surrogate_mean += group_surrogate / g_count;

        let kl = kl_divergence(&probs, &logp_ref.iter().map(|l| l.exp()).collect::<Vec<_>>())?;
        // Exact log-space KL for the gradient, consistent with `kl`.
        let kl_exact: T = probs.iter().zip(&logp).zip(&logp_ref).map(|((&pi, &lp), &lr)| pi * (lp - lr)).sum();
        kl_mean += kl;
        let scale = h.kl_beta / n_groups;
        for j in 0..v {
            row[j] += scale * probs[j] * (logp[j] - logp_ref[j] - kl_exact);
        }
    }
    let loss = -surrogate_mean / n_groups + h.kl_beta * kl_mean / n_groups;
    Ok((loss, grad))
}

pub fn grpo_loss<T: Scalar>(
    groups: &[Group<T>],
    policy: &ToyPolicy<T>,
    old_policy: &ToyPolicy<T>,
    ref_policy: &ToyPolicy<T>,
    h: &Hyperparams<T>,
) -> Result<T, GrpoError> {
    grpo_loss_and_grad(groups, policy, old_policy, ref_policy, h).map(|(l, _)| l)
}

// ---------------------------------------------------------------------------
// Supervised NLL

/// Mean negative log-likelihood of whole target outputs, with its gradient.
pub fn sft_nll_and_grad<T: Scalar>(policy: &ToyPolicy<T>, dataset: &[(String, usize)]) -> Result<(T, Vec<T>), GrpoError> {
    if dataset.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    let v = policy.vocab_size();
    let n = T::from_count(dataset.len());
    let mut grad = vec![T::zero(); policy.logits.len()];
    let mut nll = T::zero();
    for (prompt, target) in dataset {
        let p = policy.prompt_index(prompt)?;
        if *target >= v {
            return Err(GrpoError::UnknownOutput(*target));
        }
        let logp = policy.log_probs(p);
        nll -= logp[*target];
        for (j, gj) in grad[p * v..(p + 1) * v].iter_mut().enumerate() {
            let indicator = if j == *target { T::one() } else { T::zero() };
            *gj += (logp[j].exp() - indicator) / n;
        }
    }
    Ok((nll / n, grad))
}

pub fn sft_nll<T: Scalar>(policy: &ToyPolicy<T>, dataset: &[(String, usize)]) -> Result<T, GrpoError> {
    sft_nll_and_grad(policy, dataset).map(|(l, _)| l)
}

/// Token-factored policy: each output is a fixed-length token sequence and
/// every position has its own softmax, conditioned on the prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencePolicy<T> {
    prompts: Vec<String>,
    tokens: Vec<String>,
    length: usize,
    logits: Vec<T>,
}

impl<T: Scalar> SequencePolicy<T> {
    pub fn from_params(prompts: Vec<String>, tokens: Vec<String>, length: usize, logits: Vec<T>) -> Result<Self, GrpoError> {
        let expected = prompts.len() * length * tokens.len();
        if logits.len() != expected {
            return Err(GrpoError::ParamLength { expected, got: logits.len() });
        }
        Ok(SequencePolicy { prompts, tokens, length, logits })
    }

    pub fn params(&self) -> &[T] {
        &self.logits
    }

    fn offset(&self, prompt: usize, position: usize) -> usize {
        (prompt * self.length + position) * self.tokens.len()
    }

    pub fn sequence_logprob(&self, prompt: usize, seq: &[usize]) -> Result<T, GrpoError> {
        let v = self.tokens.len();
        let mut total = T::zero();
        for (t, &tok) in seq.iter().enumerate() {
            if tok >= v || t >= self.length {
                return Err(GrpoError::UnknownOutput(tok));
            }
            let off = self.offset(prompt, t);
            total += log_softmax(&self.logits[off..off + v])[tok];
        }
        Ok(total)
    }
}

/// Mean over examples of the summed per-position negative log-likelihood.
pub fn sft_nll_tokens_and_grad<T: Scalar>(policy: &SequencePolicy<T>, dataset: &[(String, Vec<usize>)]) -> Result<(T, Vec<T>), GrpoError> {
    if dataset.is_empty() {
        return Err(GrpoError::EmptyGroup);
    }
    let v = policy.tokens.len();
    let n = T::from_count(dataset.len());
    let mut grad = vec![T::zero(); policy.logits.len()];
    let mut nll = T::zero();
    for (prompt, seq) in dataset {
        let p = policy
            .prompts
            .iter()
            .position(|x| x == prompt)
            .ok_or_else(|| GrpoError::UnknownPrompt(prompt.clone()))?;
        if seq.len() != policy.length {
            return Err(GrpoError::ParamLength { expected: policy.length, got: seq.len() });
        }
        for (t, &tok) in seq.iter().enumerate() {
            if tok >= v {
                return Err(GrpoError::UnknownOutput(tok));
            }
            let off = policy.offset(p, t);
            let logp = log_softmax(&policy.logits[off..off + v]);
            nll -= logp[tok];
            for j in 0..v {
                let indicator = if j == tok { T::one() } else { T::zero() };
                grad[off + j] += (logp[j].exp() - indicator) / n;
            }
        }
    }
    Ok((nll / n, grad))
}

// ---------------------------------------------------------------------------
// Gradient check

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub n_params: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_coordinate: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Magnitude below which gradient components are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Compares `grad(params)` with central differences of `loss`.
///
/// Per coordinate the error is `|g - fd| / max(|g|, |fd|, GRAD_CHECK_FLOOR)`;
/// the check passes iff the maximum is within `tol`.
pub fn grad_check<T, F, G>(loss: F, grad: G, params: &[T], h: T, tol: f64) -> Result<GradCheckReport, GrpoError>
where
    T: Scalar,
    F: Fn(&[T]) -> T,
    G: Fn(&[T]) -> Vec<T>,
{
    if !loss(params).is_finite() {
        return Err(GrpoError::NonFiniteLoss { coordinate: None });
    }
    let analytic = grad(params);
    if analytic.len() != params.len() {
        return Err(GrpoError::ParamLength { expected: params.len(), got: analytic.len() });
    }
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        n_params: params.len(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst_coordinate: 0,
        tolerance: tol,
        passed: false,
    };
    let two_h = (h + h).to_f64_lossy();
    for i in 0..params.len() {
        x[i] = params[i] + h;
        let up = loss(&x);
        x[i] = params[i] - h;
        let down = loss(&x);
        x[i] = params[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(GrpoError::NonFiniteLoss { coordinate: Some(i) });
        }
        let fd = (up.to_f64_lossy() - down.to_f64_lossy()) / two_h;
        let an = analytic[i].to_f64_lossy();
        let abs = (an - fd).abs();
        let rel = abs / an.abs().max(fd.abs()).max(GRAD_CHECK_FLOOR);
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_coordinate = i;
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObjectiveAudit {
    pub objective: String,
    pub draws: usize,
    pub max_rel_error: f64,
    pub worst_draw: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientAudit {
    pub h: f64,
    pub tolerance: f64,
    pub seed: u64,
    pub objectives: Vec<ObjectiveAudit>,
    pub passed: bool,
}

/// Gradient checks of the whole-output NLL, the token-factored NLL and the
/// GRPO loss (default hyperparameters) on `draws` random toy policies each.
pub fn gradient_audit(seed: u64, draws: usize, h: f64, tol: f64) -> Result<GradientAudit, GrpoError> {
    const PROMPTS: usize = 3;
    const VOCAB: usize = 6;
    const LEN: usize = 3;
    let names = |p: &str, n: usize| (0..n).map(|i| format!("{p}{i}")).collect::<Vec<_>>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random_policy = |rng: &mut ChaCha8Rng, scale: f64| {
        let logits = (0..PROMPTS * VOCAB).map(|_| rng.random_range(-scale..scale)).collect();
        ToyPolicy::from_params(names("p", PROMPTS), names("o", VOCAB), logits)
    };
    let hyper = Hyperparams::<f64>::default();
    let mut audits: Vec<ObjectiveAudit> = ["sft_nll", "sft_nll_tokens", "grpo_loss"]
        .iter()
        .map(|o| ObjectiveAudit { objective: o.to_string(), draws, max_rel_error: 0.0, worst_draw: 0, passed: true })
        .collect();
    let note = |audit: &mut ObjectiveAudit, draw: usize, r: GradCheckReport| {
        if r.max_rel_error > audit.max_rel_error {
            audit.max_rel_error = r.max_rel_error;
            audit.worst_draw = draw;
        }
        audit.passed &= r.passed;
    };
    for draw in 0..draws {
        let pi = random_policy(&mut rng, 2.0)?;
        let data: Vec<(String, usize)> = (0..6)
            .map(|_| (format!("p{}", rng.random_range(0..PROMPTS)), rng.random_range(0..VOCAB)))
            .collect();
        let r = grad_check(
            |x: &[f64]| pi.with_params(x.to_vec()).and_then(|p| sft_nll(&p, &data)).unwrap_or(f64::NAN),
            |x: &[f64]| sft_nll_and_grad(&pi.with_params(x.to_vec()).expect("shape"), &data).expect("valid").1,
            pi.params(),
            h,
            tol,
        )?;
        note(&mut audits[0], draw, r);

        let logits: Vec<f64> = (0..PROMPTS * LEN * VOCAB).map(|_| rng.random_range(-2.0..2.0)).collect();
        let seqs: Vec<(String, Vec<usize>)> = (0..4)
            .map(|_| (format!("p{}", rng.random_range(0..PROMPTS)), (0..LEN).map(|_| rng.random_range(0..VOCAB)).collect()))
            .collect();
        let seq_policy = |x: &[f64]| SequencePolicy::from_params(names("p", PROMPTS), names("t", VOCAB), LEN, x.to_vec());
        let r = grad_check(
            |x: &[f64]| seq_policy(x).and_then(|p| sft_nll_tokens_and_grad(&p, &seqs)).map_or(f64::NAN, |v| v.0),
            |x: &[f64]| sft_nll_tokens_and_grad(&seq_policy(x).expect("shape"), &seqs).expect("valid").1,
            &logits,
            h,
            tol,
        )?;
        note(&mut audits[1], draw, r);

        let pi = random_policy(&mut rng, 0.3)?;
        let old = random_policy(&mut rng, 0.3)?;
        let reference = random_policy(&mut rng, 1.0)?;
        let groups: Vec<Group<f64>> = (0..PROMPTS)
            .map(|p| {
                let rollouts = (0..hyper.group_size)
                    .map(|_| {
                        let total = rng.random_range(-1.0..2.0);
                        Rollout {
                            output_id: rng.random_range(0..VOCAB),
                            output_text: String::new(),
                            logprob_current: 0.0,
                            logprob_old: 0.0,
                            reward: RewardBreakdown { r_fmt: 0.0, r_acc: 0.0, r_rc: 0.0, total, parse_ok: true, format_error: None },
                            advantage: None,
                        }
                    })
                    .collect();
                Group { prompt_id: format!("p{p}"), rollouts }
            })
            .collect();
        let r = grad_check(
            |x: &[f64]| {
                pi.with_params(x.to_vec())
                    .and_then(|p| grpo_loss(&groups, &p, &old, &reference, &hyper))
                    .unwrap_or(f64::NAN)
            },
            |x: &[f64]| {
                grpo_loss_and_grad(&groups, &pi.with_params(x.to_vec()).expect("shape"), &old, &reference, &hyper)
                    .expect("valid")
                    .1
            },
            pi.params(),
            h,
            tol,
        )?;
        note(&mut audits[2], draw, r);
    }
    let passed = audits.iter().all(|a| a.passed);
    Ok(GradientAudit { h, tolerance: tol, seed, objectives: audits, passed })
}

// ---------------------------------------------------------------------------
// Toy training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPrompt {
    pub id: String,
    pub truth: GroundTruth,
}

/// A synthetic judgment task: prompts with ground truth and a finite
/// vocabulary of candidate raw outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub task: TaskKind,
    pub prompts: Vec<ToyPrompt>,
    pub vocabulary: Vec<String>,
}

fn render_t1(a: [f64; 4], b: [f64; 4], answer: PreferenceLabel) -> String {
    let block = |s: [f64; 4]| CandidateBlock::new(s.to_vec().into(), vec!["Judged by ear.".to_string(); 4]);
    let j = ParsedJudgment::pairwise(
        TaskKind::T1PairwisePreference,
        block(a),
        block(b),
        Some("The winner is clearer overall.".to_string()),
        answer,
    )
    .expect("static toy judgment is valid");
    render_judgment(&j).expect("static toy judgment renders").text
}

impl ToyTask {
    /// Two utterance-preference prompts; each has exactly one vocabulary entry
    /// that is well-formed, picks the right label and matches every
    /// dimension-wise ordering (reward 2). Half the vocabulary is malformed.
    pub fn planted() -> Self {
        use PreferenceLabel::*;
        let t1 = TaskKind::T1PairwisePreference;
        let truth = |a: [f64; 4], b: [f64; 4]| {
            GroundTruth::pairwise_from_scores(t1, a.to_vec().into(), b.to_vec().into()).expect("static truth")
        };
        let prompts = vec![
            // orderings (+,+,-,0), label A
            ToyPrompt { id: "utt-0".into(), truth: truth([9.0, 8.0, 5.0, 8.0], [4.0, 6.0, 7.0, 8.0]) },
            // orderings (-,0,+,-), label B
            ToyPrompt { id: "utt-1".into(), truth: truth([3.0, 5.0, 6.0, 2.0], [7.0, 5.0, 4.0, 6.0]) },
        ];
        let good = render_t1([8.0, 7.0, 4.0, 9.0], [5.0, 6.0, 6.0, 9.0], SpeechA);
        let vocabulary = vec![
            good.clone(),
            render_t1([4.0, 6.0, 7.0, 3.0], [8.0, 6.0, 5.0, 7.0], SpeechB),
            render_t1([7.0; 4], [6.0; 4], SpeechA),
            render_t1([5.0; 4], [6.0; 4], SpeechB),
            good.replace("</answer>", ""),
            good.replace("Speech A is better", "speech a is better"),
            good.replace("= 28", "= 29"),
            good.replace("score=8/10", "score=18/10").replacen("8+7", "18+7", 1).replacen("= 28", "= 38", 1),
        ];
        ToyTask { task: t1, prompts, vocabulary }
    }

    /// Every vocabulary entry earns the same reward, so all advantages vanish.
    pub fn flat() -> Self {
        let mut task = Self::planted();
        let bad = task.vocabulary[4].clone();
        task.vocabulary = vec![bad.clone(), bad.replace("<think>", ""), format!("{bad} trailing"), String::new()];
        task
    }

    pub fn prompt_ids(&self) -> Vec<String> {
        self.prompts.iter().map(|p| p.id.clone()).collect()
    }

    pub fn uniform_policy<T: Scalar>(&self) -> ToyPolicy<T> {
        ToyPolicy::uniform(self.prompt_ids(), self.vocabulary.clone())
    }

    /// `table[p][v]`: reward of vocabulary entry `v` for prompt `p`.
    pub fn reward_table<T: Scalar>(&self, weights: &RewardWeights<T>) -> Result<Vec<Vec<RewardBreakdown<T>>>, GrpoError> {
        self.prompts
            .iter()
            .map(|p| {
                self.vocabulary
                    .iter()
                    .map(|raw| judge_reward(raw, &p.truth, self.task, weights).map_err(GrpoError::from))
                    .collect()
            })
            .collect()
    }

    /// Mean over prompts of the exact expected total reward under `policy`.
    pub fn expected_reward<T: Scalar>(&self, policy: &ToyPolicy<T>, weights: &RewardWeights<T>) -> Result<T, GrpoError> {
        let table = self.reward_table(weights)?;
        let mut total = T::zero();
        for (p, row) in table.iter().enumerate() {
            total += policy.probs(p).iter().zip(row).map(|(&pi, r)| pi * r.total).sum::<T>();
        }
        Ok(total / T::from_count(table.len()))
    }

    /// Largest achievable expected reward: every prompt puts all mass on its best entry.
    pub fn max_expected_reward<T: Scalar>(&self, weights: &RewardWeights<T>) -> Result<T, GrpoError> {
        let table = self.reward_table(weights)?;
        let best: T = table
            .iter()
            .map(|row| row.iter().map(|r| r.total).fold(T::neg_infinity(), T::max))
            .sum();
        Ok(best / T::from_count(table.len()))
    }

    /// Highest-reward vocabulary entry per prompt, as an SFT dataset.
    pub fn best_targets<T: Scalar>(&self, weights: &RewardWeights<T>) -> Result<Vec<(String, usize)>, GrpoError> {
        let table = self.reward_table(weights)?;
        Ok(table
            .iter()
            .zip(&self.prompts)
            .map(|(row, p)| {
                let best = (0..row.len())
                    .fold(0, |b, v| if row[v].total > row[b].total { v } else { b });
                (p.id.clone(), best)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Gradient steps on each batch of sampled groups.
    pub inner_steps: usize,
    /// Supervised warm-up steps before RL; the warmed-up policy becomes the reference.
    pub sft_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { iterations: 150, inner_steps: 2, sft_steps: 0, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint<T> {
    pub iteration: usize,
    pub mean_total_reward: T,
    pub mean_kl: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainOutcome<T> {
    pub policy: ToyPolicy<T>,
    pub reference: ToyPolicy<T>,
    pub curve: Vec<CurvePoint<T>>,
}

const ARMIJO_C: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;

/// Gradient step with Armijo backtracking from `lr`. Returns `None` when no
/// tried step decreases the loss enough.
fn backtracking_step<T: Scalar>(
    params: &[T],
    loss: T,
    grad: &[T],
    lr: T,
    objective: &dyn Fn(&[T]) -> Result<T, GrpoError>,
) -> Result<Option<Vec<T>>, GrpoError> {
    let g2: T = grad.iter().map(|&g| g * g).sum();
    if g2 == T::zero() {
        return Ok(None);
    }
    let mut step = lr;
    for _ in 0..MAX_HALVINGS {
        let cand: Vec<T> = params.iter().zip(grad).map(|(&p, &g)| p - step * g).collect();
        let l = objective(&cand)?;
        if l.is_finite() && l <= loss - T::lit(ARMIJO_C) * step * g2 {
            return Ok(Some(cand));
        }
        step = step * T::lit(0.5);
    }
    Ok(None)
}

fn sample_groups<T: Scalar>(
    policy: &ToyPolicy<T>,
    table: &[Vec<RewardBreakdown<T>>],
    h: &Hyperparams<T>,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Group<T>>, GrpoError> {
    let mut groups = Vec::with_capacity(policy.prompts.len());
    for (p, prompt_id) in policy.prompts.iter().enumerate() {
        let logp = policy.log_probs(p);
        let weights: Vec<f64> = logp.iter().map(|l| l.exp().to_f64_lossy()).collect();
        let dist = WeightedIndex::new(&weights).map_err(|_| GrpoError::NonFiniteLoss { coordinate: None })?;
        let rollouts = (0..h.group_size)
            .map(|_| {
                let o = dist.sample(rng);
                Rollout {
                    output_id: o,
                    output_text: policy.vocabulary[o].clone(),
                    logprob_current: logp[o],
                    logprob_old: logp[o],
                    reward: table[p][o].clone(),
                    advantage: None,
                }
            })
            .collect();
        let mut group = Group { prompt_id: prompt_id.clone(), rollouts };
        group.assign_advantages(h.adv_epsilon)?;
        groups.push(group);
    }
    Ok(groups)
}

/// Runs GRPO on `task` from a uniform policy (optionally after supervised
/// warm-up). Each iteration samples `group_size` rollouts per prompt from a
/// frozen snapshot, scores them, normalizes advantages within each group and
/// takes `inner_steps` backtracking gradient steps on the GRPO loss.
///
/// Deterministic for a fixed seed.
pub fn train_toy<T: Scalar>(task: &ToyTask, h: &Hyperparams<T>, cfg: &TrainConfig) -> Result<ToyTrainOutcome<T>, GrpoError> {
    h.validate()?;
    let table = task.reward_table(&h.weights)?;
    let mut policy = task.uniform_policy::<T>();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    if cfg.sft_steps > 0 {
        let data = task.best_targets(&h.weights)?;
        for _ in 0..cfg.sft_steps {
            let (loss, grad) = sft_nll_and_grad(&policy, &data)?;
            let objective = |x: &[T]| sft_nll(&policy.with_params(x.to_vec())?, &data);
            if let Some(next) = backtracking_step(policy.params(), loss, &grad, h.sft_lr, &objective)? {
                policy = policy.with_params(next)?;
            }
        }
    }
    let reference = policy.clone();

    let mut curve = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let old = policy.clone();
        let groups = sample_groups(&old, &table, h, &mut rng)?;
        for _ in 0..cfg.inner_steps.max(1) {
            let (loss, grad) = grpo_loss_and_grad(&groups, &policy, &old, &reference, h)?;
            if !loss.is_finite() {
                return Err(GrpoError::Diverged { iteration, loss: loss.to_f64_lossy() });
            }
            let objective = |x: &[T]| grpo_loss(&groups, &policy.with_params(x.to_vec())?, &old, &reference, h);
            match backtracking_step(policy.params(), loss, &grad, h.rl_lr, &objective)? {
                Some(next) => policy = policy.with_params(next)?,
                None => break,
            }
        }
        if policy.params().iter().any(|x| !x.is_finite()) {
            return Err(GrpoError::Diverged { iteration, loss: f64::NAN });
        }
        let n_rollouts: usize = groups.iter().map(|g| g.rollouts.len()).sum();
        let reward_sum: T = groups.iter().flat_map(|g| g.rollouts.iter().map(|r| r.reward.total)).sum();
        curve.push(CurvePoint {
            iteration,
            mean_total_reward: reward_sum / T::from_count(n_rollouts),
            mean_kl: policy.mean_kl(&reference)?,
        });
    }
    Ok(ToyTrainOutcome { policy, reference, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn advantages_examples() {
        let a = normalize_advantages(&[1.0, 0.0, 1.0, 0.0], 1e-8).unwrap();
        let s = 0.5 / (0.5 + 1e-8);
        for (x, e) in a.iter().zip([s, -s, s, -s]) {
            assert_abs_diff_eq!(*x, e, epsilon = 1e-15);
        }
        assert_eq!(normalize_advantages(&[3.0; 5], 1e-8).unwrap(), vec![0.0; 5]);
        let a = normalize_advantages(&[2.0, 0.0], 1e-8).unwrap();
        assert_abs_diff_eq!(a[0], 1.0, epsilon = 1e-7);
        assert_abs_diff_eq!(a[1], -1.0, epsilon = 1e-7);
        assert!(normalize_advantages::<f64>(&[], 1e-8).is_err());
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(clipped_surrogate(1.0, 0.7, 0.2).unwrap(), 0.7);
        assert_abs_diff_eq!(clipped_surrogate(1.5, 2.0, 0.2).unwrap(), 2.4, epsilon = 1e-12);
        assert_abs_diff_eq!(clipped_surrogate(0.5, -1.0, 0.2).unwrap(), -0.8, epsilon = 1e-12);
        assert!(clipped_surrogate(0.0, 1.0, 0.2).is_err());
        assert!(clipped_surrogate(-1.0, 1.0, 0.2).is_err());
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let expect = 0.7 * 1.4f64.ln() + 0.3 * 0.6f64.ln();
        assert_abs_diff_eq!(kl_divergence(&[0.7, 0.3], &[0.5, 0.5]).unwrap(), expect, epsilon = 1e-15);
        assert_abs_diff_eq!(expect, 0.08228, epsilon = 1e-5);
        assert_abs_diff_eq!(kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 2f64.ln(), epsilon = 1e-15);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0]).is_err());
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    }

    fn two_prompt_policy(logits: Vec<f64>) -> ToyPolicy<f64> {
        ToyPolicy::from_params(vec!["x".into(), "y".into()], vec!["o0".into(), "o1".into(), "o2".into(), "o3".into()], logits).unwrap()
    }

    #[test]
    fn sft_nll_examples() {
        let uniform = two_prompt_policy(vec![0.0; 8]);
        let data = vec![("x".to_string(), 2)];
        assert_abs_diff_eq!(sft_nll(&uniform, &data).unwrap(), 4f64.ln(), epsilon = 1e-15);
        let peaked = two_prompt_policy(vec![2.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let data = vec![("x".to_string(), 0)];
        let expect = (2f64.exp() + 3.0).ln() - 2.0;
        assert_abs_diff_eq!(sft_nll(&peaked, &data).unwrap(), expect, epsilon = 1e-15);
        assert_abs_diff_eq!(expect, 0.34075, epsilon = 1e-5);
        let sharp = two_prompt_policy(vec![800.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(sft_nll(&sharp, &data).unwrap(), 0.0);
        assert!(sft_nll(&uniform, &[("x".to_string(), 9)]).is_err());
        assert!(sft_nll(&uniform, &[("z".to_string(), 0)]).is_err());
    }

    #[test]
    fn quadratic_grad_check_is_exact() {
        let theta = [0.3, -1.2, 2.5, 0.01];
        let r = grad_check(|x: &[f64]| x.iter().map(|v| v * v).sum(), |x: &[f64]| x.iter().map(|v| 2.0 * v).collect(), &theta, 1e-5, 1e-4).unwrap();
        assert!(r.passed);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn grad_check_flags_wrong_gradient() {
        let r = grad_check(|x: &[f64]| x[0] * x[0], |x: &[f64]| vec![3.0 * x[0]], &[1.0], 1e-5, 1e-4).unwrap();
        assert!(!r.passed);
        assert!(grad_check(|_: &[f64]| f64::NAN, |_: &[f64]| vec![0.0], &[1.0], 1e-5, 1e-4).is_err());
    }

    #[test]
    fn on_policy_loss_is_negative_mean_advantage() {
        let policy = two_prompt_policy(vec![0.1, 0.4, -0.3, 0.0, 1.0, -1.0, 0.5, 0.2]);
        let mk = |prompt: &str, outs: &[(usize, f64)]| Group {
            prompt_id: prompt.to_string(),
            rollouts: outs
                .iter()
                .map(|&(o, a)| Rollout {
                    output_id: o,
                    output_text: String::new(),
                    logprob_current: 0.0,
                    logprob_old: 0.0,
                    reward: RewardBreakdown { r_fmt: 0.0, r_acc: 0.0, r_rc: 0.0, total: 0.0, parse_ok: true, format_error: None },
                    advantage: Some(a),
                })
                .collect(),
        };
        let groups = vec![mk("x", &[(0, 0.5), (1, -1.5)]), mk("y", &[(2, 2.0), (3, 0.25)])];
        let h = Hyperparams { kl_beta: 0.0, ..Hyperparams::<f64>::default() };
        let loss = grpo_loss(&groups, &policy, &policy, &policy, &h).unwrap();
        assert_abs_diff_eq!(loss, -(0.5 - 1.5 + 2.0 + 0.25) / 4.0, epsilon = 1e-15);

        let zero = vec![mk("x", &[(0, 0.0), (1, 0.0)])];
        let h = Hyperparams::<f64>::default();
        assert_eq!(grpo_loss(&zero, &policy, &policy, &policy, &h).unwrap(), 0.0);
    }

    #[test]
    fn planted_task_shape() {
        let task = ToyTask::planted();
        let w = RewardWeights::<f64>::default();
        let table = task.reward_table(&w).unwrap();
        let totals: Vec<Vec<f64>> = table.iter().map(|r| r.iter().map(|b| b.total).collect()).collect();
        assert_eq!(totals[0], vec![2.0, 0.0, 1.5, 0.25, -1.0, -1.0, -1.0, -1.0]);
        assert_eq!(totals[1], vec![0.0, 2.0, 0.25, 1.5, -1.0, -1.0, -1.0, -1.0]);
        assert_eq!(task.max_expected_reward(&w).unwrap(), 2.0);
        let uniform = task.uniform_policy::<f64>();
        assert_abs_diff_eq!(task.expected_reward(&uniform, &w).unwrap(), -0.03125, epsilon = 1e-15);
        let flat = ToyTask::flat().reward_table(&w).unwrap();
        assert!(flat.iter().flatten().all(|r| r.total == -1.0));
    }

    #[test]
    fn hyperparams_validation() {
        assert!(Hyperparams::<f64>::default().validate().is_ok());
        let bad = Hyperparams { group_size: 1, ..Hyperparams::<f64>::default() };
        assert!(bad.validate().is_err());
        let bad = Hyperparams { clip_epsilon: 1.0, ..Hyperparams::<f64>::default() };
        assert!(bad.validate().is_err());
        let bad = Hyperparams { adv_epsilon: 0.0, ..Hyperparams::<f64>::default() };
        assert!(bad.validate().is_err());
    }
}
