//! Per-example scalar math shared by every preference loss.
//!
//! Everything here works on sequence-level log-probabilities. Reference
//! index 0 is always the initializing reference: the one the trained policy
//! starts from, and the anchor every other reference is clipped toward.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::log_sum_exp;

/// Tolerance on `sum(alpha) == 1`.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

/// A natural-log probability: finite and `<= 0`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct LogProb(f64);

impl LogProb {
    pub fn new(value: f64) -> Result<Self> {
        check_log_prob(value)?;
        Ok(LogProb(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for LogProb {
    type Error = Error;

    fn try_from(value: f64) -> Result<Self> {
        LogProb::new(value)
    }
}

impl From<LogProb> for f64 {
    fn from(lp: LogProb) -> f64 {
        lp.0
    }
}

pub(crate) fn check_log_prob(value: f64) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::NumericInput(format!("log-probability {value} is not finite")));
    }
    if value > 0.0 {
        return Err(Error::NumericInput(format!("log-probability {value} is positive")));
    }
    Ok(())
}

/// Mixing coefficients over K references: non-negative, summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ReferenceWeights(Vec<f64>);

impl ReferenceWeights {
    pub fn new(alphas: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::InvalidWeights("need at least one weight".into()));
        }
        if let Some(bad) = alphas.iter().find(|a| !a.is_finite() || **a < 0.0) {
            return Err(Error::InvalidWeights(format!("weight {bad} is negative or not finite")));
        }
        let sum: f64 = alphas.iter().sum();
        if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
            return Err(Error::InvalidWeights(format!("weights sum to {sum}, not 1")));
        }
        Ok(ReferenceWeights(alphas))
    }

    /// `k` equal weights of `1/k`.
    pub fn uniform(k: usize) -> Result<Self> {
        uniform_weights(k)
    }

    pub fn one_hot(k: usize, index: usize) -> Result<Self> {
        if index >= k {
            return Err(Error::InvalidArgument(format!("index {index} out of range for K={k}")));
        }
        let mut alphas = vec![0.0; k];
        alphas[index] = 1.0;
        ReferenceWeights::new(alphas)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for ReferenceWeights {
    type Error = Error;

    fn try_from(alphas: Vec<f64>) -> Result<Self> {
        ReferenceWeights::new(alphas)
    }
}

impl From<ReferenceWeights> for Vec<f64> {
    fn from(w: ReferenceWeights) -> Vec<f64> {
        w.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// No trust region; references are used as-is.
    None,
    /// The same epsilon (`eps_max`) for both outputs.
    Fixed,
    /// Epsilon split between the two outputs by their summed reference log-probabilities.
    Adaptive,
}

/// Trust-region settings for non-initializing references.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub eps_max: f64,
    pub mode: ClipMode,
}

impl ClipConfig {
    pub fn new(eps_max: f64, mode: ClipMode) -> Result<Self> {
        let cfg = ClipConfig { eps_max, mode };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn none() -> Self {
        ClipConfig {
            eps_max: 0.0,
            mode: ClipMode::None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.eps_max.is_finite() || self.eps_max < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "eps_max must be finite and >= 0, got {}",
                self.eps_max
            )));
        }
        Ok(())
    }

    /// Per-output epsilon `(chosen, rejected)`, or `None` when clipping is off.
    /// Inputs are the raw (unclipped) reference log-probabilities.
    pub fn epsilons(&self, refs: &PairRefLogProbs) -> Option<(f64, f64)> {
        match self.mode {
            ClipMode::None => None,
            ClipMode::Fixed => Some((self.eps_max, self.eps_max)),
            ClipMode::Adaptive => Some(adaptive_epsilon(
                refs.chosen.iter().sum(),
                refs.rejected.iter().sum(),
                self.eps_max,
            )),
        }
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        ClipConfig {
            eps_max: 0.1,
            mode: ClipMode::Adaptive,
        }
    }
}

/// Reference log-probabilities of the chosen and rejected outputs of one example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRefLogProbs {
    chosen: Vec<f64>,
    rejected: Vec<f64>,
}

impl PairRefLogProbs {
    pub fn new(chosen: Vec<f64>, rejected: Vec<f64>) -> Result<Self> {
        if chosen.is_empty() {
            return Err(Error::InvalidArgument("need at least one reference".into()));
        }
        if chosen.len() != rejected.len() {
            return Err(Error::InvalidArgument(format!(
                "chosen has {} references but rejected has {}",
                chosen.len(),
                rejected.len()
            )));
        }
        for &v in chosen.iter().chain(&rejected) {
            check_log_prob(v)?;
        }
        Ok(PairRefLogProbs { chosen, rejected })
    }

    pub fn single(chosen: f64, rejected: f64) -> Result<Self> {
        PairRefLogProbs::new(vec![chosen], vec![rejected])
    }

    pub fn k(&self) -> usize {
        self.chosen.len()
    }

    pub fn chosen(&self) -> &[f64] {
        &self.chosen
    }

    pub fn rejected(&self) -> &[f64] {
        &self.rejected
    }

    /// Clip references `k > 0` toward reference 0, each output with its own epsilon.
    pub fn clipped(&self, eps: (f64, f64)) -> Result<PairRefLogProbs> {
        Ok(PairRefLogProbs {
            chosen: clip_toward_first(&self.chosen, eps.0)?,
            rejected: clip_toward_first(&self.rejected, eps.1)?,
        })
    }
}

fn clip_toward_first(values: &[f64], eps: f64) -> Result<Vec<f64>> {
    let anchor = values[0];
    let mut out = Vec::with_capacity(values.len());
    out.push(anchor);
    for &v in &values[1..] {
        out.push(clip_reference_logprob(v, anchor, eps)?);
    }
    Ok(out)
}

/// Log-probability of the virtual reference, the weighted harmonic mean
/// `(sum_k alpha_k / p_k)^-1`, computed as `-LSE_k(log alpha_k - log p_k)`.
///
/// References with zero weight are skipped. The result is clamped into the
/// range spanned by the included references, which it can only leave through
/// rounding.
pub fn log_virtual_reference(log_refs: &[f64], weights: &ReferenceWeights) -> Result<f64> {
    if log_refs.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} reference log-probabilities but {} weights",
            log_refs.len(),
            weights.len()
        )));
    }
    let mut terms = Vec::with_capacity(log_refs.len());
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (&lp, &alpha) in log_refs.iter().zip(weights.as_slice()) {
        if alpha > 0.0 {
            terms.push(alpha.ln() - lp);
            lo = lo.min(lp);
            hi = hi.max(lp);
        }
    }
    if terms.is_empty() {
        return Err(Error::InvalidWeights("all weights are zero".into()));
    }
    let v = -log_sum_exp(&terms);
    Ok(v.clamp(lo, hi))
}

/// Clamp a non-initializing reference's log-probability into
/// `[(1 + eps) * anchor, (1 - eps) * anchor]`, where `anchor` is the
/// initializing reference's log-probability for the same output.
pub fn clip_reference_logprob(log_ref_k: f64, anchor: f64, eps: f64) -> Result<f64> {
    if !(eps >= 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be >= 0, got {eps}")));
    }
    check_log_prob(anchor)?;
    let lower = (1.0 + eps) * anchor;
    let upper = (1.0 - eps) * anchor;
    Ok(log_ref_k.max(lower).min(upper))
}

/// Split `eps_max` between the chosen and rejected outputs in proportion to
/// the magnitude of each output's summed reference log-probability. Less
/// likely outputs get a wider trust region.
///
/// Falls back to an even split when both sums are zero.
pub fn adaptive_epsilon(sum_chosen: f64, sum_rejected: f64, eps_max: f64) -> (f64, f64) {
    let denom = sum_chosen.abs() + sum_rejected.abs();
    if denom == 0.0 {
        return (eps_max / 2.0, eps_max / 2.0);
    }
    (eps_max * sum_chosen.abs() / denom, eps_max * sum_rejected.abs() / denom)
}

/// Weights proportional to each reference's confidence, measured as the
/// absolute log-probability gap between the chosen and rejected outputs.
/// Uniform when no reference separates the two.
pub fn reference_weights_arwc(refs: &PairRefLogProbs) -> ReferenceWeights {
    let gaps: Vec<f64> = refs
        .chosen
        .iter()
        .zip(&refs.rejected)
        .map(|(c, r)| (c - r).abs())
        .collect();
    let total: f64 = gaps.iter().sum();
    if total == 0.0 || !total.is_finite() {
        return uniform_weights(gaps.len()).expect("PairRefLogProbs has K >= 1");
    }
    ReferenceWeights(gaps.iter().map(|g| g / total).collect())
}

pub fn uniform_weights(k: usize) -> Result<ReferenceWeights> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be at least 1".into()));
    }
    Ok(ReferenceWeights(vec![1.0 / k as f64; k]))
}

/// `beta * (log_policy - log_ref)`.
pub fn implicit_reward(log_policy: f64, log_ref: f64, beta: f64) -> f64 {
    beta * (log_policy - log_ref)
}
