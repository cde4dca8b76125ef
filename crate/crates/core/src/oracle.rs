//! Brute-force checks over finite output sets.
//!
//! With a finite response set every expectation is an exact sum, so the
//! closed-form optimum of the multi-reference objective, its upper-bound
//! surrogate and the gradient-scale comparison against Multi-DPO can all be
//! verified numerically. Everything here is computed in linear probability
//! space where the loss code works in log space, so the two routes are
//! independent.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, sigmoid};
use crate::prefmath::ReferenceWeights;

const DISTRIBUTION_TOLERANCE: f64 = 1e-12;
const POLICY_TOLERANCE: f64 = 1e-9;
/// Slack allowed on inequalities that hold exactly in real arithmetic.
pub const INEQUALITY_SLACK: f64 = 1e-12;
/// Tolerance on `surrogate(pi) - surrogate(pi*) = KL(pi || pi*)`.
pub const IDENTITY_TOLERANCE: f64 = 1e-8;

/// One prompt's worth of the multi-reference objective: K reference
/// distributions over a finite output set, their weights, a reward per output
/// and the regularization strength.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteInstance {
    refs: Vec<Vec<f64>>,
    weights: ReferenceWeights,
    rewards: Vec<f64>,
    beta: f64,
}

impl FiniteInstance {
    pub fn new(refs: Vec<Vec<f64>>, weights: ReferenceWeights, rewards: Vec<f64>, beta: f64) -> Result<Self> {
        if refs.is_empty() || refs.len() != weights.len() {
            return Err(Error::InvalidArgument(format!(
                "{} references but {} weights",
                refs.len(),
                weights.len()
            )));
        }
        let n = rewards.len();
        if n == 0 {
            return Err(Error::InvalidArgument("output set is empty".into()));
        }
        for (k, r) in refs.iter().enumerate() {
            if r.len() != n {
                return Err(Error::InvalidArgument(format!(
                    "reference {k} has {} entries, expected {n}",
                    r.len()
                )));
            }
            if r.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "reference {k} has a non-positive entry"
                )));
            }
            let total: f64 = r.iter().sum();
            if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
                return Err(Error::InvalidArgument(format!("reference {k} sums to {total}")));
            }
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::NumericInput("reward is not finite".into()));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidConfig(format!("beta must be > 0, got {beta}")));
        }
        Ok(FiniteInstance {
            refs,
            weights,
            rewards,
            beta,
        })
    }

    /// A random instance: 2..=max_outputs outputs, 1..=max_refs references
    /// drawn from a flat Dirichlet, Dirichlet weights, standard normal
    /// rewards and beta from {0.1, 1}.
    pub fn random<R: Rng>(rng: &mut R, max_outputs: usize, max_refs: usize) -> Self {
        let n = rng.random_range(2..=max_outputs.max(2));
        let k = rng.random_range(1..=max_refs.max(1));
        Self::random_sized(rng, n, k)
    }

    pub fn random_sized<R: Rng>(rng: &mut R, n: usize, k: usize) -> Self {
        let refs = (0..k).map(|_| dirichlet(rng, n)).collect();
        let weights = ReferenceWeights::new(dirichlet(rng, k)).expect("dirichlet weights are valid");
        let rewards = (0..n).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
        let beta = if rng.random_bool(0.5) { 0.1 } else { 1.0 };
        FiniteInstance::new(refs, weights, rewards, beta).expect("generated instance is valid")
    }

    pub fn n_outputs(&self) -> usize {
        self.rewards.len()
    }

    pub fn k(&self) -> usize {
        self.refs.len()
    }

    pub fn refs(&self) -> &[Vec<f64>] {
        &self.refs
    }

    pub fn weights(&self) -> &ReferenceWeights {
        &self.weights
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `sum_k alpha_k pi(y) / ref_k(y)`, the argument of the surrogate's log.
    fn weighted_ratio(&self, y: usize, p: f64) -> f64 {
        self.refs
            .iter()
            .zip(self.weights.as_slice())
            .map(|(r, a)| a * p / r[y])
            .sum()
    }

    fn check_policy(&self, pi: &[f64]) -> Result<()> {
        if pi.len() != self.n_outputs() {
            return Err(Error::InvalidArgument(format!(
                "policy has {} entries, instance has {} outputs",
                pi.len(),
                self.n_outputs()
            )));
        }
        if pi.iter().any(|&p| !(p > 0.0) || !p.is_finite()) {
            return Err(Error::InvalidArgument("policy must be strictly positive".into()));
        }
        let total: f64 = pi.iter().sum();
        if (total - 1.0).abs() > POLICY_TOLERANCE {
            return Err(Error::InvalidArgument(format!("policy sums to {total}")));
        }
        Ok(())
    }
}

fn dirichlet<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        let v: Vec<f64> = draws.iter().map(|d| d / total).collect();
        if v.iter().all(|&p| p > 1e-300) {
            return v;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSolution {
    pub pi_star: Vec<f64>,
    pub z: f64,
    pub log_z: f64,
    pub surrogate_value: f64,
    pub original_value: f64,
}

/// The exact minimizer of the surrogate: `pi*(y) = pi~(y) exp(r(y)/beta) / Z`,
/// where `pi~` is the (unnormalized) weighted harmonic mean of the references.
pub fn solve_closed_form(inst: &FiniteInstance) -> OracleSolution {
    let log_unnorm: Vec<f64> = (0..inst.n_outputs())
        .map(|y| -inst.weighted_ratio(y, 1.0).ln() + inst.rewards[y] / inst.beta)
        .collect();
    let log_z = log_sum_exp(&log_unnorm);
    let pi_star: Vec<f64> = log_unnorm.iter().map(|l| (l - log_z).exp()).collect();
    let surrogate_value = surrogate_objective(&pi_star, inst).expect("pi* is a distribution");
    let original_value = original_objective(&pi_star, inst).expect("pi* is a distribution");
    OracleSolution {
        pi_star,
        z: log_z.exp(),
        log_z,
        surrogate_value,
        original_value,
    }
}

/// `sum_y pi(y) [log(sum_k alpha_k pi(y) / ref_k(y)) - r(y) / beta]`.
pub fn surrogate_objective(pi: &[f64], inst: &FiniteInstance) -> Result<f64> {
    inst.check_policy(pi)?;
    Ok(pi
        .iter()
        .enumerate()
        .map(|(y, &p)| p * (inst.weighted_ratio(y, p).ln() - inst.rewards[y] / inst.beta))
        .sum())
}

/// `sum_y pi(y) [sum_k alpha_k log(pi(y) / ref_k(y)) - r(y) / beta]`.
pub fn original_objective(pi: &[f64], inst: &FiniteInstance) -> Result<f64> {
    inst.check_policy(pi)?;
    Ok(pi
        .iter()
        .enumerate()
        .map(|(y, &p)| p * (original_term(inst, y, p) - inst.rewards[y] / inst.beta))
        .sum())
}

fn original_term(inst: &FiniteInstance, y: usize, p: f64) -> f64 {
    inst.refs
        .iter()
        .zip(inst.weights.as_slice())
        .map(|(r, a)| a * (p / r[y]).ln())
        .sum()
}

/// `sum p log(p / q)` with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidArgument(format!(
            "lengths {} and {} differ",
            p.len(),
            q.len()
        )));
    }
    let mut total = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi < 0.0 || qi < 0.0 {
            return Err(Error::InvalidArgument("negative probability".into()));
        }
        if pi == 0.0 {
            continue;
        }
        if qi == 0.0 {
            return Err(Error::InvalidArgument("q is zero where p is positive".into()));
        }
        total += pi * (pi / qi).ln();
    }
    Ok(total)
}

/// Outcome of one verification suite, in the shape the CLI prints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub suite: String,
    pub trials: usize,
    pub failures: usize,
    pub max_deviation: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl std::fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<10} trials={} failures={} max_deviation={:.3e} {}",
            self.suite,
            self.trials,
            self.failures,
            self.max_deviation,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

/// Independent RNG stream per (suite, trial): reports do not depend on how
/// trials are scheduled across threads.
fn trial_rng(seed: u64, suite: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ suite.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(trial as u64);
    rng
}

fn check_trials(trials: usize) -> Result<()> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be at least 1".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Report {
    pub trials: usize,
    pub policies_per_trial: usize,
    /// Policies where `surrogate(pi) - surrogate(pi*)` missed `KL(pi || pi*)`.
    pub identity_failures: usize,
    /// Policies that scored strictly below pi* on the surrogate.
    pub minimum_failures: usize,
    /// Policies where the original objective exceeded the surrogate.
    pub bound_failures: usize,
    pub max_identity_error: f64,
}

impl Prop1Report {
    pub fn failures(&self) -> usize {
        self.identity_failures + self.minimum_failures + self.bound_failures
    }

    pub fn summary(&self) -> SuiteReport {
        SuiteReport {
            suite: "prop1".into(),
            trials: self.trials,
            failures: self.failures(),
            max_deviation: self.max_identity_error,
        }
    }
}

pub const PROP1_POLICIES: usize = 10;
const MAX_OUTPUTS: usize = 16;
const MAX_REFS: usize = 4;

/// Test policies for one instance: half flat-Dirichlet draws, half small
/// perturbations of pi* at scales 1e-1 .. 1e-5.
fn test_policies<R: Rng>(rng: &mut R, pi_star: &[f64], count: usize) -> Vec<Vec<f64>> {
    (0..count)
        .map(|i| {
            let noise = dirichlet(rng, pi_star.len());
            if i % 2 == 0 {
                noise
            } else {
                let lambda = 10f64.powi(-((i / 2) as i32 % 5 + 1));
                let mixed: Vec<f64> = pi_star
                    .iter()
                    .zip(&noise)
                    .map(|(p, q)| (1.0 - lambda) * p + lambda * q)
                    .collect();
                let total: f64 = mixed.iter().sum();
                mixed.iter().map(|m| m / total).collect()
            }
        })
        .collect()
}

/// For random instances, check that the surrogate gap to pi* equals the KL
/// divergence to pi*, that pi* beats every tested policy, and that the
/// original objective never exceeds the surrogate.
pub fn verify_prop1(seed: u64, trials: usize) -> Result<Prop1Report> {
    check_trials(trials)?;
    let per_trial: Vec<(usize, usize, usize, f64)> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, 1, t);
            let inst = FiniteInstance::random(&mut rng, MAX_OUTPUTS, MAX_REFS);
            let sol = solve_closed_form(&inst);
            let (mut identity, mut minimum, mut bound, mut worst) = (0, 0, 0, 0.0f64);
            for pi in test_policies(&mut rng, &sol.pi_star, PROP1_POLICIES) {
                let s = surrogate_objective(&pi, &inst).expect("valid policy");
                let o = original_objective(&pi, &inst).expect("valid policy");
                let kl = kl_divergence(&pi, &sol.pi_star).expect("pi* has full support");
                let err = ((s - sol.surrogate_value) - kl).abs();
                worst = worst.max(err);
                identity += usize::from(!(err <= IDENTITY_TOLERANCE));
                minimum += usize::from(!(s >= sol.surrogate_value - INEQUALITY_SLACK));
                bound += usize::from(!(o <= s + INEQUALITY_SLACK));
            }
            (identity, minimum, bound, worst)
        })
        .collect();
    let mut report = Prop1Report {
        trials,
        policies_per_trial: PROP1_POLICIES,
        identity_failures: 0,
        minimum_failures: 0,
        bound_failures: 0,
        max_identity_error: 0.0,
    };
    for (i, m, b, w) in per_trial {
        report.identity_failures += i;
        report.minimum_failures += m;
        report.bound_failures += b;
        report.max_identity_error = report.max_identity_error.max(w);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JensenReport {
    pub draws: usize,
    pub violations: usize,
    /// Smallest observed `surrogate term - original term`; never below
    /// `-INEQUALITY_SLACK` when the bound holds.
    pub min_slack: f64,
}

impl JensenReport {
    pub fn summary(&self) -> SuiteReport {
        SuiteReport {
            suite: "jensen".into(),
            trials: self.draws,
            failures: self.violations,
            max_deviation: (-self.min_slack).max(0.0),
        }
    }
}

/// Pointwise bound: for a random instance, random policy and random output
/// `y`, `sum_k alpha_k log(pi/ref_k) <= log sum_k alpha_k pi/ref_k`.
pub fn verify_jensen(seed: u64, draws: usize) -> Result<JensenReport> {
    check_trials(draws)?;
    let slacks: Vec<f64> = (0..draws)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, 2, t);
            let inst = FiniteInstance::random(&mut rng, MAX_OUTPUTS, MAX_REFS);
            let pi = dirichlet(&mut rng, inst.n_outputs());
            let y = rng.random_range(0..inst.n_outputs());
            inst.weighted_ratio(y, pi[y]).ln() - original_term(&inst, y, pi[y])
        })
        .collect();
    Ok(JensenReport {
        draws,
        violations: slacks.iter().filter(|&&s| !(s >= -INEQUALITY_SLACK)).count(),
        min_slack: slacks.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// A pair-level instance for the gradient-scale comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Instance {
    pub log_policy: (f64, f64),
    pub ref_chosen: Vec<f64>,
    pub ref_rejected: Vec<f64>,
    pub weights: Vec<f64>,
    pub beta: f64,
}

impl Prop2Instance {
    /// `d_k = r(y_l | ref_k) - r(y_w | ref_k)`.
    pub fn d(&self) -> Vec<f64> {
        self.ref_chosen
            .iter()
            .zip(&self.ref_rejected)
            .map(|(c, r)| self.beta * ((self.log_policy.1 - r) - (self.log_policy.0 - c)))
            .collect()
    }

    /// Reward error under the virtual reference (the MRPO gradient scale).
    pub fn mrpo_scale(&self) -> f64 {
        let virt = |logs: &[f64]| -> f64 {
            let inv: f64 = logs.iter().zip(&self.weights).map(|(l, a)| a * (-l).exp()).sum();
            -inv.ln()
        };
        let (vc, vr) = (virt(&self.ref_chosen), virt(&self.ref_rejected));
        sigmoid(self.beta * ((self.log_policy.1 - vr) - (self.log_policy.0 - vc)))
    }

    /// Weighted per-reference reward error (the Multi-DPO gradient scale).
    pub fn multi_dpo_scale(&self) -> f64 {
        self.d().iter().zip(&self.weights).map(|(d, a)| a * sigmoid(*d)).sum()
    }

    /// Signed slack of the claimed inequality: `mrpo - multi` when every
    /// `d_k >= 0`, `multi - mrpo` when every `d_k <= 0`. Non-negative when
    /// the claim holds.
    pub fn slack(&self, sign: Sign) -> f64 {
        let gap = self.mrpo_scale() - self.multi_dpo_scale();
        match sign {
            Sign::NonNegative => gap,
            Sign::NonPositive => -gap,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    NonNegative,
    NonPositive,
}

/// Rejection-sample an instance whose `d_k` all carry `sign`. References and
/// policy log-probabilities are uniform on [-30, -0.1].
pub fn random_prop2_instance<R: Rng>(rng: &mut R, k: usize, sign: Sign) -> Prop2Instance {
    let lp = |rng: &mut R| -rng.random_range(0.1..30.0);
    loop {
        let inst = Prop2Instance {
            log_policy: (lp(rng), lp(rng)),
            ref_chosen: (0..k).map(|_| lp(rng)).collect(),
            ref_rejected: (0..k).map(|_| lp(rng)).collect(),
            weights: dirichlet(rng, k),
            beta: if rng.random_bool(0.5) { 0.1 } else { 1.0 },
        };
        let ok = match sign {
            Sign::NonNegative => inst.d().iter().all(|&d| d >= 0.0),
            Sign::NonPositive => inst.d().iter().all(|&d| d <= 0.0),
        };
        if ok {
            return inst;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2SignStats {
    pub trials: usize,
    pub violations: usize,
    /// Instances where the inequality held with slack above the tolerance.
    pub strict: usize,
    pub min_slack: f64,
    /// The instance with the smallest slack.
    pub worst: Option<Prop2Instance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Report {
    pub non_negative: Prop2SignStats,
    pub non_positive: Prop2SignStats,
}

impl Prop2Report {
    /// Violations plus one per sign with no strict instance (a vacuous pass).
    pub fn failures(&self) -> usize {
        [&self.non_negative, &self.non_positive]
            .iter()
            .map(|s| s.violations + usize::from(s.strict == 0))
            .sum()
    }

    pub fn summary(&self) -> SuiteReport {
        SuiteReport {
            suite: "prop2".into(),
            trials: self.non_negative.trials + self.non_positive.trials,
            failures: self.failures(),
            max_deviation: (-self.non_negative.min_slack.min(self.non_positive.min_slack)).max(0.0),
        }
    }
}

/// Compare the MRPO and Multi-DPO gradient scales on `trials` instances per
/// sign, with K drawn from {2, 3, 4}.
pub fn verify_prop2(seed: u64, trials: usize) -> Result<Prop2Report> {
    check_trials(trials)?;
    let run = |sign: Sign, tag: u64| {
        let results: Vec<(f64, Prop2Instance)> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = trial_rng(seed, tag, t);
                let k = rng.random_range(2..=4);
                let inst = random_prop2_instance(&mut rng, k, sign);
                (inst.slack(sign), inst)
            })
            .collect();
        let worst = results
            .iter()
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(s, i)| (*s, i.clone()));
        Prop2SignStats {
            trials,
            violations: results.iter().filter(|(s, _)| !(*s >= -INEQUALITY_SLACK)).count(),
            strict: results.iter().filter(|(s, _)| *s > INEQUALITY_SLACK).count(),
            min_slack: worst.as_ref().map_or(f64::INFINITY, |w| w.0),
            worst: worst.map(|w| w.1),
        }
    };
    Ok(Prop2Report {
        non_negative: run(Sign::NonNegative, 3),
        non_positive: run(Sign::NonPositive, 4),
    })
}

/// Largest relative error between `analytic` and central differences of `f`
/// around `params` on `coords` coordinates sampled without replacement.
/// Relative error uses the denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(
    params: &[f64],
    analytic: &[f64],
    mut f: F,
    coords: usize,
    h: f64,
    seed: u64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::InvalidArgument(format!("step {h} outside [1e-7, 1e-3]")));
    }
    if params.len() != analytic.len() {
        return Err(Error::InvalidArgument(
            "gradient length differs from parameter count".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = index::sample(&mut rng, params.len(), coords.min(params.len()));
    let mut theta = params.to_vec();
    let mut worst = 0.0f64;
    for i in picks.iter() {
        theta[i] = params[i] + h;
        let up = f(&theta)?;
        theta[i] = params[i] - h;
        let down = f(&theta)?;
        theta[i] = params[i];
        let numeric = (up - down) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(refs: Vec<Vec<f64>>, alphas: Vec<f64>, rewards: Vec<f64>, beta: f64) -> FiniteInstance {
        FiniteInstance::new(refs, ReferenceWeights::new(alphas).unwrap(), rewards, beta).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((kl_divergence(&[0.75, 0.25], &[0.5, 0.5]).unwrap() - 0.130812035941137).abs() < 1e-14);
        assert!(kl_divergence(&[0.5, 0.5], &[1.0, 0.0]).is_err());
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn single_reference_without_reward_returns_reference() {
        for beta in [0.1, 1.0, 7.0] {
            let i = inst(vec![vec![0.2, 0.3, 0.5]], vec![1.0], vec![0.0; 3], beta);
            let sol = solve_closed_form(&i);
            for (a, b) in sol.pi_star.iter().zip([0.2, 0.3, 0.5]) {
                assert!((a - b).abs() < 1e-15);
            }
            assert!((sol.z - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn reward_tilts_uniform_reference() {
        let i = inst(vec![vec![0.5, 0.5]], vec![1.0], vec![3f64.ln(), 0.0], 1.0);
        let sol = solve_closed_form(&i);
        assert!((sol.pi_star[0] - 0.75).abs() < 1e-15);
        assert!((sol.pi_star[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn two_reference_hand_example() {
        let i = inst(
            vec![vec![0.5, 0.5], vec![0.8, 0.2]],
            vec![0.5, 0.5],
            vec![0.0, 0.0],
            1.0,
        );
        let sol = solve_closed_form(&i);
        assert!((sol.pi_star[0] - 0.6829268292682927).abs() < 1e-12);
        assert!((sol.pi_star[1] - 0.3170731707317073).abs() < 1e-12);
        assert!((sol.z - 0.9010989010989011).abs() < 1e-12);
        assert!((sol.pi_star.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn surrogate_at_optimum_is_minus_log_z() {
        let i = inst(
            vec![vec![0.5, 0.5], vec![0.8, 0.2]],
            vec![0.5, 0.5],
            vec![0.3, -1.0],
            0.1,
        );
        let sol = solve_closed_form(&i);
        assert!((sol.surrogate_value + sol.log_z).abs() < 1e-10);
    }

    #[test]
    fn surrogate_gap_is_kl_on_hand_example() {
        let i = inst(
            vec![vec![0.5, 0.5], vec![0.8, 0.2]],
            vec![0.5, 0.5],
            vec![0.0, 0.0],
            1.0,
        );
        let sol = solve_closed_form(&i);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let pi = dirichlet(&mut rng, 2);
            let gap = surrogate_objective(&pi, &i).unwrap() - sol.surrogate_value;
            assert!((gap - kl_divergence(&pi, &sol.pi_star).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn single_reference_surrogate_is_kl_minus_reward() {
        let r = vec![0.1, 0.6, 0.3];
        let rewards = vec![0.4, -0.2, 1.1];
        let i = inst(vec![r.clone()], vec![1.0], rewards.clone(), 0.5);
        let pi = [0.2, 0.5, 0.3];
        let expected = kl_divergence(&pi, &r).unwrap() - pi.iter().zip(&rewards).map(|(p, x)| p * x).sum::<f64>() / 0.5;
        assert!((surrogate_objective(&pi, &i).unwrap() - expected).abs() < 1e-15);
        assert!((original_objective(&pi, &i).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn original_objective_examples() {
        let i = inst(vec![vec![0.4, 0.6]], vec![1.0], vec![0.0; 2], 1.0);
        assert_eq!(original_objective(&[0.4, 0.6], &i).unwrap(), 0.0);
        // Symmetric refs (0.2, 0.8) and (0.8, 0.2): each KL(uniform || ref) is
        // -0.5 ln(0.64) - ln 2 = ln(1.25) = 0.22314355131420976.
        let i = inst(vec![vec![0.2, 0.8], vec![0.8, 0.2]], vec![0.5, 0.5], vec![0.0; 2], 1.0);
        assert!((original_objective(&[0.5, 0.5], &i).unwrap() - 0.22314355131420976).abs() < 1e-15);
    }

    #[test]
    fn single_reference_optimum_also_minimizes_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.random_range(2..=8);
            let i = FiniteInstance::random_sized(&mut rng, n, 1);
            let sol = solve_closed_form(&i);
            assert!((sol.original_value - sol.surrogate_value).abs() < 1e-12);
            for pi in test_policies(&mut rng, &sol.pi_star, 10) {
                assert!(original_objective(&pi, &i).unwrap() >= sol.original_value - 1e-12);
            }
        }
    }

    #[test]
    fn objectives_reject_non_distributions() {
        let i = inst(vec![vec![0.5, 0.5]], vec![1.0], vec![0.0; 2], 1.0);
        assert!(surrogate_objective(&[0.6, 0.6], &i).is_err());
        assert!(surrogate_objective(&[1.0, 0.0], &i).is_err());
        assert!(original_objective(&[1.0], &i).is_err());
    }

    #[test]
    fn instance_invariants() {
        let w = ReferenceWeights::new(vec![1.0]).unwrap();
        assert!(FiniteInstance::new(vec![vec![0.5, 0.6]], w.clone(), vec![0.0; 2], 1.0).is_err());
        assert!(FiniteInstance::new(vec![vec![1.0, 0.0]], w.clone(), vec![0.0; 2], 1.0).is_err());
        assert!(FiniteInstance::new(vec![vec![0.5, 0.5]], w, vec![0.0; 2], 0.0).is_err());
    }

    #[test]
    fn prop1_small_run_passes() {
        let r = verify_prop1(1, 50).unwrap();
        assert_eq!(r.failures(), 0, "{r:?}");
        assert!(verify_prop1(1, 0).is_err());
    }

    #[test]
    fn reports_are_seed_deterministic() {
        assert_eq!(verify_prop1(3, 20).unwrap(), verify_prop1(3, 20).unwrap());
        assert_eq!(verify_prop2(3, 20).unwrap(), verify_prop2(3, 20).unwrap());
        assert_eq!(verify_jensen(3, 20).unwrap(), verify_jensen(3, 20).unwrap());
    }

    #[test]
    fn jensen_small_run_passes() {
        let r = verify_jensen(2, 500).unwrap();
        assert_eq!(r.violations, 0);
    }

    #[test]
    fn prop2_single_reference_is_tight() {
        let i = Prop2Instance {
            log_policy: (-3.0, -4.0),
            ref_chosen: vec![-2.5],
            ref_rejected: vec![-6.0],
            weights: vec![1.0],
            beta: 0.1,
        };
        assert!((i.mrpo_scale() - i.multi_dpo_scale()).abs() < 1e-12);
    }

    #[test]
    fn prop2_identical_references_are_tight() {
        let i = Prop2Instance {
            log_policy: (-3.0, -4.0),
            ref_chosen: vec![-2.5; 3],
            ref_rejected: vec![-6.0; 3],
            weights: vec![0.2, 0.3, 0.5],
            beta: 1.0,
        };
        assert!((i.mrpo_scale() - i.multi_dpo_scale()).abs() < 1e-12);
    }

    #[test]
    fn prop2_detects_known_counterexample() {
        // d = (8, 0): both non-negative. The second reference puts ~e^-30 on
        // both outputs, so it dominates the harmonic mean for both and the
        // virtual reference sees no preference (scale ~0.5), while the
        // weighted per-reference scale is ~0.9 * sigmoid(8) + 0.1 * 0.5.
        let i = Prop2Instance {
            log_policy: (-10.0, -10.0),
            ref_chosen: vec![-4.0, -30.0],
            ref_rejected: vec![-12.0, -30.0],
            weights: vec![0.9, 0.1],
            beta: 1.0,
        };
        assert!(i.d().iter().all(|&d| d >= 0.0));
        assert!(i.slack(Sign::NonNegative) < -0.4, "{}", i.slack(Sign::NonNegative));
    }

    #[test]
    fn prop2_generator_respects_sign() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for sign in [Sign::NonNegative, Sign::NonPositive] {
            for k in 2..=4 {
                let i = random_prop2_instance(&mut rng, k, sign);
                assert_eq!(i.weights.len(), k);
                let d = i.d();
                assert!(d
                    .iter()
                    .all(|&x| if sign == Sign::NonNegative { x >= 0.0 } else { x <= 0.0 }));
            }
        }
    }

    #[test]
    fn finite_differences_of_a_quadratic() {
        let params = [1.0, -2.0, 0.5];
        let analytic = [2.0, -4.0, 1.0];
        let err =
            finite_difference_check(&params, &analytic, |p| Ok(p.iter().map(|x| x * x).sum()), 3, 1e-5, 0).unwrap();
        assert!(err < 1e-9, "{err}");
        let wrong = [2.0, -4.0, 1.5];
        let err = finite_difference_check(&params, &wrong, |p| Ok(p.iter().map(|x| x * x).sum()), 3, 1e-5, 0).unwrap();
        assert!(err > 0.3);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = finite_difference_check(&[0.1; 5], &[0.0; 5], |_| Ok(0.7), 5, 1e-5, 1).unwrap();
        assert_eq!(err, 0.0);
        assert!(finite_difference_check(&[0.1], &[0.0], |_| Ok(0.7), 1, 1e-2, 1).is_err());
    }
}
