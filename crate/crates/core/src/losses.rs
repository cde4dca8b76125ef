//! DPO, Multi-DPO and MRPO pair losses.
//!
//! Each loss is a function of the two policy log-probabilities of one example
//! (chosen and rejected output) and of frozen reference log-probabilities.
//! Alongside the loss value every [`PairLoss`] carries the derivative of the
//! loss with respect to both policy log-probabilities; chaining those through
//! a policy's gradient tape yields the parameter gradient.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{neg_log_sigmoid, sigmoid};
use crate::prefmath::{
    implicit_reward, log_virtual_reference, reference_weights_arwc, uniform_weights, ClipConfig, PairRefLogProbs,
    ReferenceWeights,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Dpo,
    MultiDpo,
    Mrpo,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Dpo => "dpo",
            LossKind::MultiDpo => "multi_dpo",
            LossKind::Mrpo => "mrpo",
        })
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dpo" => Ok(LossKind::Dpo),
            "multi_dpo" | "multi-dpo" => Ok(LossKind::MultiDpo),
            "mrpo" => Ok(LossKind::Mrpo),
            other => Err(Error::InvalidConfig(format!("unknown loss kind {other:?}"))),
        }
    }
}

/// How the per-example reference weights are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Uniform,
    Arwc,
    Fixed(ReferenceWeights),
}

/// All hyperparameters that enter a pair loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub beta: f64,
    pub kind: LossKind,
    pub clip: ClipConfig,
    pub weight_mode: WeightMode,
}

impl LossConfig {
    pub fn dpo(beta: f64) -> Self {
        LossConfig {
            beta,
            kind: LossKind::Dpo,
            clip: ClipConfig::none(),
            weight_mode: WeightMode::Uniform,
        }
    }

    pub fn with_kind(mut self, kind: LossKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidConfig(format!("beta must be > 0, got {}", self.beta)));
        }
        self.clip.validate()
    }

    fn weights_for(&self, refs: &PairRefLogProbs) -> Result<ReferenceWeights> {
        match &self.weight_mode {
            WeightMode::Uniform => uniform_weights(refs.k()),
            WeightMode::Arwc => Ok(reference_weights_arwc(refs)),
            WeightMode::Fixed(w) if w.len() == refs.k() => Ok(w.clone()),
            WeightMode::Fixed(w) => Err(Error::InvalidConfig(format!(
                "{} fixed weights for {} references",
                w.len(),
                refs.k()
            ))),
        }
    }
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta: 0.1,
            kind: LossKind::Mrpo,
            clip: ClipConfig::default(),
            weight_mode: WeightMode::Arwc,
        }
    }
}

/// Loss value and diagnostics for one preference pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLoss {
    pub loss: f64,
    pub reward_chosen: f64,
    pub reward_rejected: f64,
    /// `reward_chosen - reward_rejected`.
    pub margin: f64,
    /// The reward error that scales the likelihood gradient: `sigmoid(-margin)`
    /// for DPO and MRPO, `sum_k alpha_k sigmoid(-h_k)` for Multi-DPO.
    pub grad_scale: f64,
    pub weights_used: ReferenceWeights,
    pub eps_used: (f64, f64),
    /// Reference log-probabilities the rewards were measured against.
    pub virtual_ref: (f64, f64),
    /// d loss / d log pi(chosen).
    pub d_chosen: f64,
    /// d loss / d log pi(rejected).
    pub d_rejected: f64,
}

fn check_finite(values: &[f64]) -> Result<()> {
    match values.iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::NumericInput(format!("{v} is not finite"))),
        None => Ok(()),
    }
}

/// Loss shared by DPO and MRPO: a Bradley-Terry likelihood of the implicit
/// reward margin against a single (possibly virtual) reference.
fn single_reference_loss(
    log_policy: (f64, f64),
    log_ref: (f64, f64),
    beta: f64,
    weights_used: ReferenceWeights,
    eps_used: (f64, f64),
) -> PairLoss {
    let reward_chosen = implicit_reward(log_policy.0, log_ref.0, beta);
    let reward_rejected = implicit_reward(log_policy.1, log_ref.1, beta);
    let margin = reward_chosen - reward_rejected;
    let grad_scale = sigmoid(reward_rejected - reward_chosen);
    PairLoss {
        loss: neg_log_sigmoid(margin),
        reward_chosen,
        reward_rejected,
        margin,
        grad_scale,
        weights_used,
        eps_used,
        virtual_ref: log_ref,
        d_chosen: -beta * grad_scale,
        d_rejected: beta * grad_scale,
    }
}

pub fn dpo_pair_loss(
    log_policy_chosen: f64,
    log_policy_rejected: f64,
    log_ref_chosen: f64,
    log_ref_rejected: f64,
    beta: f64,
) -> Result<PairLoss> {
    check_finite(&[log_policy_chosen, log_policy_rejected, log_ref_chosen, log_ref_rejected])?;
    if !(beta > 0.0) {
        return Err(Error::InvalidConfig(format!("beta must be > 0, got {beta}")));
    }
    Ok(single_reference_loss(
        (log_policy_chosen, log_policy_rejected),
        (log_ref_chosen, log_ref_rejected),
        beta,
        ReferenceWeights::one_hot(1, 0)?,
        (0.0, 0.0),
    ))
}

/// Weights and trust-region-clipped references for one example. Weights and
/// epsilons are computed from the raw references; only references `k > 0`
/// are clipped.
fn prepare_references(
    refs: &PairRefLogProbs,
    config: &LossConfig,
) -> Result<(ReferenceWeights, (f64, f64), PairRefLogProbs)> {
    config.validate()?;
    let weights = config.weights_for(refs)?;
    match config.clip.epsilons(refs) {
        Some(eps) => Ok((weights, eps, refs.clipped(eps)?)),
        None => Ok((weights, (0.0, 0.0), refs.clone())),
    }
}

pub fn mrpo_pair_loss(log_policy: (f64, f64), refs: &PairRefLogProbs, config: &LossConfig) -> Result<PairLoss> {
    check_finite(&[log_policy.0, log_policy.1])?;
    let (weights, eps, clipped) = prepare_references(refs, config)?;
    let virtual_ref = (
        log_virtual_reference(clipped.chosen(), &weights)?,
        log_virtual_reference(clipped.rejected(), &weights)?,
    );
    Ok(single_reference_loss(
        log_policy,
        virtual_ref,
        config.beta,
        weights,
        eps,
    ))
}

pub fn multi_dpo_pair_loss(log_policy: (f64, f64), refs: &PairRefLogProbs, config: &LossConfig) -> Result<PairLoss> {
    check_finite(&[log_policy.0, log_policy.1])?;
    let (weights, eps, clipped) = prepare_references(refs, config)?;
    let beta = config.beta;

    let (mut loss, mut reward_chosen, mut reward_rejected, mut grad_scale) = (0.0, 0.0, 0.0, 0.0);
    for ((&alpha, &ref_c), &ref_r) in weights.as_slice().iter().zip(clipped.chosen()).zip(clipped.rejected()) {
        let rc = implicit_reward(log_policy.0, ref_c, beta);
        let rr = implicit_reward(log_policy.1, ref_r, beta);
        let h = rc - rr;
        loss += alpha * neg_log_sigmoid(h);
        reward_chosen += alpha * rc;
        reward_rejected += alpha * rr;
        grad_scale += alpha * sigmoid(-h);
    }
    Ok(PairLoss {
        loss,
        reward_chosen,
        reward_rejected,
        margin: reward_chosen - reward_rejected,
        grad_scale,
        virtual_ref: (clipped.chosen()[0], clipped.rejected()[0]),
        weights_used: weights,
        eps_used: eps,
        d_chosen: -beta * grad_scale,
        d_rejected: beta * grad_scale,
    })
}

/// Dispatch on `config.kind`. DPO uses reference 0 only.
pub fn pair_loss(log_policy: (f64, f64), refs: &PairRefLogProbs, config: &LossConfig) -> Result<PairLoss> {
    match config.kind {
        LossKind::Dpo => dpo_pair_loss(
            log_policy.0,
            log_policy.1,
            refs.chosen()[0],
            refs.rejected()[0],
            config.beta,
        ),
        LossKind::MultiDpo => multi_dpo_pair_loss(log_policy, refs, config),
        LossKind::Mrpo => mrpo_pair_loss(log_policy, refs, config),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub mean_loss: f64,
    pub per_example: Vec<PairLoss>,
}

/// Unweighted mean of per-example losses, diagnostics kept in input order.
pub fn batch_loss(examples: &[((f64, f64), PairRefLogProbs)], config: &LossConfig) -> Result<BatchLoss> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let per_example = examples
        .iter()
        .map(|(lp, refs)| pair_loss(*lp, refs, config))
        .collect::<Result<Vec<_>>>()?;
    let mean_loss = per_example.iter().map(|p| p.loss).sum::<f64>() / per_example.len() as f64;
    Ok(BatchLoss { mean_loss, per_example })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefmath::{ClipMode, ReferenceWeights};
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    // -ln sigmoid(0.1), -ln sigmoid(-0.1), and the Multi-DPO mixture, from a
    // 30-digit mpmath evaluation.
    const NLS_POS: f64 = 0.644_396_660_073_570_9;
    const NLS_NEG: f64 = 0.744_396_660_073_570_9;
    const MULTI_MIX: f64 = 0.610_168_039_976_207_2;

    fn cfg(kind: LossKind, clip: ClipConfig, weight_mode: WeightMode) -> LossConfig {
        LossConfig {
            beta: 0.1,
            kind,
            clip,
            weight_mode,
        }
    }

    #[test]
    fn dpo_at_reference_is_ln2() {
        for beta in [0.01, 0.1, 1.0, 5.0] {
            let l = dpo_pair_loss(-3.0, -4.0, -3.0, -4.0, beta).unwrap();
            assert!((l.loss - LN_2).abs() < 1e-15);
            assert_eq!(l.margin, 0.0);
        }
    }

    #[test]
    fn dpo_examples() {
        let l = dpo_pair_loss(-1.0, -2.0, -1.5, -1.5, 0.1).unwrap();
        assert!((l.loss - NLS_POS).abs() < 1e-12);
        assert!((l.margin - 0.1).abs() < 1e-15);
        let l = dpo_pair_loss(-2.0, -1.0, -1.5, -1.5, 0.1).unwrap();
        assert!((l.loss - NLS_NEG).abs() < 1e-12);
        assert!((l.margin + 0.1).abs() < 1e-15);
        assert!(l.loss > LN_2);
    }

    #[test]
    fn dpo_rejects_non_finite() {
        assert!(matches!(
            dpo_pair_loss(f64::NAN, -1.0, -1.0, -1.0, 0.1),
            Err(Error::NumericInput(_))
        ));
        assert!(dpo_pair_loss(-1.0, -1.0, f64::NEG_INFINITY, -1.0, 0.1).is_err());
        assert!(dpo_pair_loss(-1.0, -1.0, -1.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn mrpo_examples() {
        let refs = PairRefLogProbs::single(-1.5, -1.5).unwrap();
        let c = LossConfig::default();
        let m = mrpo_pair_loss((-1.0, -2.0), &refs, &c).unwrap();
        let d = dpo_pair_loss(-1.0, -2.0, -1.5, -1.5, 0.1).unwrap();
        assert!((m.loss - d.loss).abs() < 1e-12);

        let refs = PairRefLogProbs::new(vec![-1.5, -1.5], vec![-1.5, -1.5]).unwrap();
        let m = mrpo_pair_loss((-1.0, -2.0), &refs, &c).unwrap();
        assert!((m.loss - NLS_POS).abs() < 1e-12);

        let refs = PairRefLogProbs::new(vec![-1.0, -3.0], vec![-1.0, -3.0]).unwrap();
        let c = cfg(LossKind::Mrpo, ClipConfig::none(), WeightMode::Uniform);
        let m = mrpo_pair_loss((-2.433781, -2.433781), &refs, &c).unwrap();
        assert!((m.virtual_ref.0 - -2.433_780_830_483_027).abs() < 1e-12);
        assert_eq!(m.margin, 0.0);
        assert!((m.loss - LN_2).abs() < 1e-15);
    }

    #[test]
    fn mrpo_records_pipeline() {
        // Raw refs feed both the weights and epsilon; only ref 1 is clipped.
        let refs = PairRefLogProbs::new(vec![-6.0, -20.0], vec![-10.0, -2.0]).unwrap();
        let c = LossConfig::default();
        let m = mrpo_pair_loss((-6.0, -10.0), &refs, &c).unwrap();
        let (ec, er) = (0.1 * 26.0 / 38.0, 0.1 * 12.0 / 38.0);
        assert!((m.eps_used.0 - ec).abs() < 1e-15 && (m.eps_used.1 - er).abs() < 1e-15);
        assert!((m.weights_used.as_slice()[0] - 4.0 / 22.0).abs() < 1e-15);
        // clipped ref 1 chosen = (1+ec)*-6, rejected = (1-er)*-10
        let w = m.weights_used.as_slice();
        let clipped_c = (1.0 + ec) * -6.0;
        let expected_c = -f64::ln(w[0] / f64::exp(-6.0) + w[1] / f64::exp(clipped_c));
        assert!((m.virtual_ref.0 - expected_c).abs() < 1e-12);
        let clipped_r = (1.0 - er) * -10.0;
        let expected_r = -f64::ln(w[0] / f64::exp(-10.0) + w[1] / f64::exp(clipped_r));
        assert!((m.virtual_ref.1 - expected_r).abs() < 1e-12);
    }

    #[test]
    fn fixed_weights_must_match_k() {
        let refs = PairRefLogProbs::new(vec![-1.0, -2.0], vec![-2.0, -1.0]).unwrap();
        let c = cfg(
            LossKind::Mrpo,
            ClipConfig::none(),
            WeightMode::Fixed(ReferenceWeights::new(vec![0.2, 0.3, 0.5]).unwrap()),
        );
        assert!(matches!(
            mrpo_pair_loss((-1.0, -1.0), &refs, &c),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn multi_dpo_examples() {
        let refs = PairRefLogProbs::single(-1.5, -2.5).unwrap();
        let c = cfg(LossKind::MultiDpo, ClipConfig::default(), WeightMode::Arwc);
        let m = multi_dpo_pair_loss((-1.0, -2.0), &refs, &c).unwrap();
        let d = dpo_pair_loss(-1.0, -2.0, -1.5, -2.5, 0.1).unwrap();
        assert!((m.loss - d.loss).abs() < 1e-12);

        let refs = PairRefLogProbs::new(vec![-1.5, -2.5], vec![-1.5, -1.0]).unwrap();
        let c = cfg(LossKind::MultiDpo, ClipConfig::none(), WeightMode::Uniform);
        let m = multi_dpo_pair_loss((-1.0, -2.0), &refs, &c).unwrap();
        assert!((m.loss - MULTI_MIX).abs() < 1e-12, "{}", m.loss);
        assert!((m.margin - 0.175).abs() < 1e-12);

        let refs = PairRefLogProbs::new(vec![-3.0; 3], vec![-4.0; 3]).unwrap();
        let m = multi_dpo_pair_loss((-3.0, -4.0), &refs, &c).unwrap();
        assert!((m.loss - LN_2).abs() < 1e-15);
    }

    #[test]
    fn batch_examples() {
        let c = LossConfig::dpo(0.1);
        let a = ((-1.0, -2.0), PairRefLogProbs::single(-1.5, -1.5).unwrap());
        let b = ((-1.0, -1.0), PairRefLogProbs::single(-1.0, -1.0).unwrap());
        let one = batch_loss(std::slice::from_ref(&a), &c).unwrap();
        assert_eq!(one.mean_loss, one.per_example[0].loss);
        let two = batch_loss(&[a.clone(), a.clone()], &c).unwrap();
        assert!((two.mean_loss - one.mean_loss).abs() < 1e-15);
        let mixed = batch_loss(&[b, a], &c).unwrap();
        assert!((mixed.mean_loss - 0.668_771_920_316_758_1).abs() < 1e-12);
        assert!((mixed.per_example[0].loss - LN_2).abs() < 1e-15);
        assert!(matches!(batch_loss(&[], &c), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let refs = PairRefLogProbs::new(vec![-5.0, -9.0, -4.0], vec![-7.0, -3.0, -8.0]).unwrap();
        for kind in [LossKind::Dpo, LossKind::MultiDpo, LossKind::Mrpo] {
            let c = LossConfig::default().with_kind(kind);
            let lp = (-6.0, -5.5);
            let l = pair_loss(lp, &refs, &c).unwrap();
            let h = 1e-6;
            let num_c = (pair_loss((lp.0 + h, lp.1), &refs, &c).unwrap().loss
                - pair_loss((lp.0 - h, lp.1), &refs, &c).unwrap().loss)
                / (2.0 * h);
            let num_r = (pair_loss((lp.0, lp.1 + h), &refs, &c).unwrap().loss
                - pair_loss((lp.0, lp.1 - h), &refs, &c).unwrap().loss)
                / (2.0 * h);
            assert!((num_c - l.d_chosen).abs() < 1e-8, "{kind}");
            assert!((num_r - l.d_rejected).abs() < 1e-8, "{kind}");
        }
    }

    fn refs_strategy() -> impl Strategy<Value = PairRefLogProbs> {
        (1usize..=4).prop_flat_map(|k| {
            (
                prop::collection::vec(-40.0f64..-0.01, k),
                prop::collection::vec(-40.0f64..-0.01, k),
            )
                .prop_map(|(c, r)| PairRefLogProbs::new(c, r).unwrap())
        })
    }

    fn any_config() -> impl Strategy<Value = LossConfig> {
        (
            prop_oneof![Just(LossKind::Dpo), Just(LossKind::MultiDpo), Just(LossKind::Mrpo)],
            prop_oneof![Just(ClipMode::None), Just(ClipMode::Fixed), Just(ClipMode::Adaptive)],
            0.0f64..0.5,
            prop_oneof![Just(WeightMode::Uniform), Just(WeightMode::Arwc)],
            prop_oneof![Just(0.1), Just(1.0)],
        )
            .prop_map(|(kind, mode, eps_max, weight_mode, beta)| LossConfig {
                beta,
                kind,
                clip: ClipConfig { eps_max, mode },
                weight_mode,
            })
    }

    proptest! {
        #[test]
        fn reduction_at_k1(lp in (-40.0f64..0.0, -40.0f64..0.0), rc in -40.0f64..0.0, rr in -40.0f64..0.0, config in any_config()) {
            let refs = PairRefLogProbs::single(rc, rr).unwrap();
            let d = dpo_pair_loss(lp.0, lp.1, rc, rr, config.beta).unwrap();
            let m = mrpo_pair_loss(lp, &refs, &config).unwrap();
            let md = multi_dpo_pair_loss(lp, &refs, &config).unwrap();
            prop_assert!((m.loss - d.loss).abs() <= 1e-12);
            prop_assert!((md.loss - d.loss).abs() <= 1e-12);
        }

        #[test]
        fn pair_loss_invariants(lp in (-40.0f64..0.0, -40.0f64..0.0), refs in refs_strategy(), config in any_config()) {
            let l = pair_loss(lp, &refs, &config).unwrap();
            prop_assert_eq!(l.margin, l.reward_chosen - l.reward_rejected);
            prop_assert!(l.loss > 0.0);
            prop_assert!((0.0..=1.0).contains(&l.grad_scale));
            if config.kind != LossKind::MultiDpo {
                prop_assert!((l.grad_scale - sigmoid(l.reward_rejected - l.reward_chosen)).abs() <= 1e-12);
                prop_assert!((l.loss - neg_log_sigmoid(l.margin)).abs() <= 1e-9);
                prop_assert_eq!(l.margin == 0.0, l.loss == LN_2);
            }
        }

        #[test]
        fn monotone_in_policy(lp in (-30.0f64..-1.0, -30.0f64..-1.0), refs in refs_strategy(), config in any_config(), step in 0.05f64..1.0) {
            let base = pair_loss(lp, &refs, &config).unwrap().loss;
            let up_c = pair_loss((lp.0 + step, lp.1), &refs, &config).unwrap().loss;
            let up_r = pair_loss((lp.0, lp.1 + step), &refs, &config).unwrap().loss;
            prop_assert!(up_c < base, "{up_c} !< {base}");
            prop_assert!(up_r > base, "{up_r} !> {base}");
        }

        #[test]
        fn translation_invariance(lp in (-20.0f64..0.0, -20.0f64..0.0), shift in -10.0f64..0.0, refs in refs_strategy(), config in any_config()) {
            let a = pair_loss(lp, &refs, &config).unwrap().loss;
            let b = pair_loss((lp.0 + shift, lp.1 + shift), &refs, &config).unwrap().loss;
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1.0), "{a} vs {b}");
        }
    }
}
