//! Supervised and preference objectives expressed over sequence
//! log-probabilities.
//!
//! All logarithms are natural. Losses are plain `f64` scalars; the gradients
//! are with respect to per-token policy log-probabilities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("log-probability sequence is empty")]
    EmptySequence,
    #[error("token {index} has log-probability {value}, expected a finite value <= 0")]
    InvalidLogProb { index: usize, value: f64 },
    #[error("policy and reference sequences differ in length ({policy} vs {reference})")]
    LengthMismatch { policy: usize, reference: usize },
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("batch is empty")]
    EmptyBatch,
}

/// Per-token natural-log probabilities of one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SequenceLogProb(Vec<f64>);

impl TryFrom<Vec<f64>> for SequenceLogProb {
    type Error = ObjectiveError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<SequenceLogProb> for Vec<f64> {
    fn from(s: SequenceLogProb) -> Self {
        s.0
    }
}

impl SequenceLogProb {
    pub fn new(token_logprobs: Vec<f64>) -> Result<Self, ObjectiveError> {
        if token_logprobs.is_empty() {
            return Err(ObjectiveError::EmptySequence);
        }
        if let Some((index, &value)) = token_logprobs
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite() || **v > 0.0)
        {
            return Err(ObjectiveError::InvalidLogProb { index, value });
        }
        Ok(Self(token_logprobs))
    }

    pub fn tokens(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sequence log-probability, summed with Neumaier compensation.
    pub fn total(&self) -> f64 {
        compensated_sum(self.0.iter().copied())
    }
}

/// Neumaier-compensated summation.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Log-probabilities of the chosen (`w`) and rejected (`l`) responses under
/// the trained policy and the frozen reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPair")]
pub struct PolicyPairLogProbs {
    pub policy_w: SequenceLogProb,
    pub ref_w: SequenceLogProb,
    pub policy_l: SequenceLogProb,
    pub ref_l: SequenceLogProb,
}

#[derive(Deserialize)]
struct RawPair {
    policy_w: SequenceLogProb,
    ref_w: SequenceLogProb,
    policy_l: SequenceLogProb,
    ref_l: SequenceLogProb,
}

impl TryFrom<RawPair> for PolicyPairLogProbs {
    type Error = ObjectiveError;

    fn try_from(r: RawPair) -> Result<Self, Self::Error> {
        Self::new(r.policy_w, r.ref_w, r.policy_l, r.ref_l)
    }
}

fn check_lengths(policy: &SequenceLogProb, reference: &SequenceLogProb) -> Result<(), ObjectiveError> {
    if policy.len() != reference.len() {
        return Err(ObjectiveError::LengthMismatch {
            policy: policy.len(),
            reference: reference.len(),
        });
    }
    Ok(())
}

impl PolicyPairLogProbs {
    pub fn new(
        policy_w: SequenceLogProb,
        ref_w: SequenceLogProb,
        policy_l: SequenceLogProb,
        ref_l: SequenceLogProb,
    ) -> Result<Self, ObjectiveError> {
        check_lengths(&policy_w, &ref_w)?;
        check_lengths(&policy_l, &ref_l)?;
        Ok(Self {
            policy_w,
            ref_w,
            policy_l,
            ref_l,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DpoConfig {
    pub beta: f64,
}

impl Default for DpoConfig {
    fn default() -> Self {
        Self { beta: 0.2 }
    }
}

impl DpoConfig {
    pub fn new(beta: f64) -> Result<Self, ObjectiveError> {
        let cfg = Self { beta };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ObjectiveError> {
        if self.beta.is_finite() && self.beta > 0.0 {
            Ok(())
        } else {
            Err(ObjectiveError::InvalidBeta(self.beta))
        }
    }
}

/// Cross-entropy of the target response, with sum reduction over tokens.
pub fn sft_loss(target: &SequenceLogProb) -> f64 {
    // -0.0 would leak through for an all-zero sequence.
    0.0 - target.total()
}

/// Token-averaged variant of [`sft_loss`].
pub fn sft_loss_token_mean(target: &SequenceLogProb) -> f64 {
    sft_loss(target) / target.len() as f64
}

/// `beta * (log pi(y|x) - log pi_ref(y|x))`.
pub fn implicit_reward(
    policy: &SequenceLogProb,
    reference: &SequenceLogProb,
    cfg: &DpoConfig,
) -> Result<f64, ObjectiveError> {
    check_lengths(policy, reference)?;
    let diff = compensated_sum(
        policy
            .tokens()
            .iter()
            .copied()
            .chain(reference.tokens().iter().map(|v| -v)),
    );
    Ok(cfg.beta * diff)
}

/// `log(1 + e^x)` without overflow or cancellation.
pub fn softplus(x: f64) -> f64 {
    if x > 35.0 {
        x + (-x).exp()
    } else if x < -35.0 {
        x.exp()
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Logistic function, evaluated from the side that cannot overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Reward margin between chosen and rejected responses.
pub fn reward_margin(pair: &PolicyPairLogProbs, cfg: &DpoConfig) -> Result<f64, ObjectiveError> {
    let rw = implicit_reward(&pair.policy_w, &pair.ref_w, cfg)?;
    let rl = implicit_reward(&pair.policy_l, &pair.ref_l, cfg)?;
    Ok(rw - rl)
}

/// `-log sigmoid(margin)` computed as `softplus(-margin)`.
pub fn dpo_loss(pair: &PolicyPairLogProbs, cfg: &DpoConfig) -> Result<f64, ObjectiveError> {
    Ok(softplus(-reward_margin(pair, cfg)?))
}

/// Loss gradient with respect to each policy token log-probability.
/// Reference tokens receive no gradient and are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoGradient {
    pub policy_w: Vec<f64>,
    pub policy_l: Vec<f64>,
}

impl DpoGradient {
    pub fn total(&self) -> f64 {
        compensated_sum(self.policy_w.iter().chain(&self.policy_l).copied())
    }
}

pub fn dpo_gradient(pair: &PolicyPairLogProbs, cfg: &DpoConfig) -> Result<DpoGradient, ObjectiveError> {
    let g = cfg.beta * sigmoid(-reward_margin(pair, cfg)?);
    Ok(DpoGradient {
        policy_w: vec![-g; pair.policy_w.len()],
        policy_l: vec![g; pair.policy_l.len()],
    })
}

/// Arithmetic mean of per-sample losses.
pub fn batch_mean(losses: &[f64]) -> Result<f64, ObjectiveError> {
    if losses.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    Ok(compensated_sum(losses.iter().copied()) / losses.len() as f64)
}

/// Result of comparing the analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradientCheck {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

impl GradientCheck {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_rel_error <= rel_tol
    }
}

fn perturbed(seq: &SequenceLogProb, i: usize, delta: f64) -> SequenceLogProb {
    let mut v = seq.tokens().to_vec();
    v[i] += delta;
    // Bypass the <= 0 check: a token a hair above zero is still a valid
    // evaluation point for the finite difference.
    SequenceLogProb(v)
}

/// Central finite differences with step `h` over every policy token.
///
/// The relative error uses `max(|analytic|, |numeric|, 1e-12)` as the scale so
/// vanishing gradients are compared absolutely.
pub fn check_dpo_gradient(pair: &PolicyPairLogProbs, cfg: &DpoConfig, h: f64) -> Result<GradientCheck, ObjectiveError> {
    let grad = dpo_gradient(pair, cfg)?;
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut n = 0;
    for (winner, analytic) in [(true, &grad.policy_w), (false, &grad.policy_l)] {
        for (i, &a) in analytic.iter().enumerate() {
            let shift = |d: f64| {
                let mut p = pair.clone();
                if winner {
                    p.policy_w = perturbed(&pair.policy_w, i, d);
                } else {
                    p.policy_l = perturbed(&pair.policy_l, i, d);
                }
                dpo_loss(&p, cfg)
            };
            let numeric = (shift(h)? - shift(-h)?) / (2.0 * h);
            let abs = (numeric - a).abs();
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(abs / a.abs().max(numeric.abs()).max(1e-12));
            n += 1;
        }
    }
    Ok(GradientCheck {
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        coordinates: n,
    })
}

/// One line of a log-probability audit file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogProbRecord {
    pub pair_id: String,
    #[serde(flatten)]
    pub pair: PolicyPairLogProbs,
}
