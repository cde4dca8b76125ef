//! Minibatch training on preference pairs, evaluation metrics, and the
//! method comparison harness.
//!
//! Reference log-probabilities always come from a [`RefLogProbCache`]; only the
//! policy's own log-probabilities carry gradients.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, score_references, PreferenceExample, RefLogProbCache, SyntheticSpec};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::losses::{pair_loss, LossConfig, LossKind, PairLoss, WeightMode};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::oracle::finite_difference_check;
use crate::policy::{make_reference_family, PolicyDims, TokenId, ToyPolicy, Vocab};
use crate::prefmath::{implicit_reward, ClipConfig, ClipMode, PairRefLogProbs, ReferenceWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub lr: f64,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Emit a metrics record every this many optimizer steps; 0 records only
    /// the baseline and the final state.
    pub eval_every: usize,
    /// A batch whose mean loss exceeds this (or is not finite) aborts the run.
    pub divergence_threshold: f64,
    /// Wall time is left out of records by default so histories are
    /// reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            lr: 1e-3,
            optimizer: OptimizerConfig::default(),
            epochs: 3,
            batch_size: 8,
            seed: 0,
            eval_every: 0,
            divergence_threshold: 10.0,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be > 0, got {}",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be at least 1".into()));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::InvalidConfig("divergence threshold must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    /// Mean batch loss since the previous record; the full training-set loss
    /// for the baseline record at step 0.
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
    pub test_margin: Option<f64>,
    pub test_tie_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub threshold: f64,
}

impl std::fmt::Display for DivergenceReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "training diverged at step {} (epoch {}): batch loss {} exceeds {}",
            self.step, self.epoch, self.loss, self.threshold
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub policy: ToyPolicy,
    pub history: Vec<MetricsRecord>,
    pub diverged: Option<DivergenceReport>,
}

/// One preference pair, tokenized, with its frozen reference log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPair {
    pub prompt: Vec<TokenId>,
    pub chosen: Vec<TokenId>,
    pub rejected: Vec<TokenId>,
    pub refs: PairRefLogProbs,
}

/// Tokenize `examples` and attach their cached reference values. Fails with
/// an integrity error if the cache was built for different data.
pub fn prepare_split(
    vocab: &Vocab,
    examples: &[PreferenceExample],
    cache: &RefLogProbCache,
) -> Result<Vec<EncodedPair>> {
    cache.check_dataset(examples)?;
    examples
        .iter()
        .enumerate()
        .map(|(i, ex)| {
            Ok(EncodedPair {
                prompt: vocab.encode(&ex.prompt)?,
                chosen: vocab.encode_output(&ex.chosen)?,
                rejected: vocab.encode_output(&ex.rejected)?,
                refs: cache.pair_refs(i),
            })
        })
        .collect()
}

fn policy_logprobs(policy: &ToyPolicy, pair: &EncodedPair) -> Result<(f64, f64)> {
    Ok((
        policy.logprob(&pair.prompt, &pair.chosen)?,
        policy.logprob(&pair.prompt, &pair.rejected)?,
    ))
}

/// Mean loss over `batch` and its gradient with respect to the policy
/// parameters. Per-example work runs in parallel; gradients are summed in
/// batch order so the result does not depend on scheduling.
pub fn loss_and_grad(policy: &ToyPolicy, batch: &[&EncodedPair], config: &LossConfig) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let n = batch.len() as f64;
    let parts: Vec<(f64, Vec<f64>)> = batch
        .par_iter()
        .map(|pair| {
            let (lw, tw) = policy.sequence_logprob(&pair.prompt, &pair.chosen)?;
            let (ll, tl) = policy.sequence_logprob(&pair.prompt, &pair.rejected)?;
            let loss = pair_loss((lw, ll), &pair.refs, config)?;
            let mut tape = tw.scaled(loss.d_chosen / n);
            tape.merge(tl.scaled(loss.d_rejected / n))?;
            Ok((loss.loss, tape.backward()?))
        })
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; policy.param_count()];
    let mut total = 0.0;
    for (loss, g) in parts {
        total += loss;
        for (acc, v) in grad.iter_mut().zip(&g) {
            *acc += v;
        }
    }
    Ok((total / n, grad))
}

/// Mean loss over `pairs` without gradients.
pub fn mean_loss(policy: &ToyPolicy, pairs: &[EncodedPair], config: &LossConfig) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty data".into()));
    }
    let losses: Vec<f64> = pairs
        .par_iter()
        .map(|p| Ok(pair_loss(policy_logprobs(policy, p)?, &p.refs, config)?.loss))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Fraction of pairs with reward(chosen) strictly above reward(rejected).
    pub accuracy: f64,
    pub mean_margin: f64,
    /// Fraction of exact reward ties; these count as incorrect.
    pub tie_rate: f64,
}

/// Implicit rewards of one pair under the reference matching the loss: the
/// virtual reference for MRPO, reference 0 otherwise.
fn pair_rewards(lp: (f64, f64), refs: &PairRefLogProbs, config: &LossConfig) -> Result<(f64, f64)> {
    match config.kind {
        LossKind::Mrpo => {
            let l: PairLoss = pair_loss(lp, refs, config)?;
            Ok((l.reward_chosen, l.reward_rejected))
        }
        LossKind::Dpo | LossKind::MultiDpo => Ok((
            implicit_reward(lp.0, refs.chosen()[0], config.beta),
            implicit_reward(lp.1, refs.rejected()[0], config.beta),
        )),
    }
}

pub fn evaluate(policy: &ToyPolicy, pairs: &[EncodedPair], config: &LossConfig) -> Result<EvalResult> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let rewards: Vec<(f64, f64)> = pairs
        .par_iter()
        .map(|p| pair_rewards(policy_logprobs(policy, p)?, &p.refs, config))
        .collect::<Result<_>>()?;
    let n = rewards.len() as f64;
    Ok(EvalResult {
        accuracy: rewards.iter().filter(|(w, l)| w > l).count() as f64 / n,
        mean_margin: rewards.iter().map(|(w, l)| w - l).sum::<f64>() / n,
        tie_rate: rewards.iter().filter(|(w, l)| w == l).count() as f64 / n,
    })
}

/// Fraction of pairs where the policy itself assigns the chosen output a
/// strictly higher likelihood than the rejected one.
pub fn likelihood_accuracy(policy: &ToyPolicy, pairs: &[EncodedPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let hits: Vec<bool> = pairs
        .par_iter()
        .map(|p| policy_logprobs(policy, p).map(|(w, l)| w > l))
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Train `policy` on `train` with the configured loss, evaluating on `test`
/// at the configured cadence. A divergence abort is reported in the outcome,
/// not as an error; the returned policy is the state before the bad step.
pub fn train(
    policy: &ToyPolicy,
    train: &[EncodedPair],
    test: Option<&[EncodedPair]>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let k = train[0].refs.k();
    if config.loss.kind != LossKind::Dpo && train.iter().chain(test.into_iter().flatten()).any(|p| p.refs.k() != k) {
        return Err(Error::Integrity("examples disagree on the number of references".into()));
    }
    let start = Instant::now();
    let mut policy = policy.clone();
    let mut opt = Optimizer::new(config.optimizer, config.lr, policy.param_count())?;
    let record = |policy: &ToyPolicy, step: usize, epoch: usize, train_loss: f64| -> Result<MetricsRecord> {
        let eval = test.map(|t| evaluate(policy, t, &config.loss)).transpose()?;
        Ok(MetricsRecord {
            step,
            epoch,
            train_loss,
            test_accuracy: eval.map(|e| e.accuracy),
            test_margin: eval.map(|e| e.mean_margin),
            test_tie_rate: eval.map(|e| e.tie_rate),
            wall_time_s: config.record_wall_time.then(|| start.elapsed().as_secs_f64()),
        })
    };

    let mut history = vec![record(&policy, 0, 0, mean_loss(&policy, train, &config.loss)?)?];
    let (mut step, mut since_sum, mut since_n) = (0usize, 0.0, 0usize);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.epochs {
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(config.seed, epoch));
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&EncodedPair> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grad) = loss_and_grad(&policy, &batch, &config.loss)?;
            if !loss.is_finite() || loss > config.divergence_threshold {
                return Ok(TrainOutcome {
                    policy,
                    history,
                    diverged: Some(DivergenceReport {
                        step: step + 1,
                        epoch,
                        loss,
                        threshold: config.divergence_threshold,
                    }),
                });
            }
            opt.step(policy.params_mut(), &grad);
            step += 1;
            since_sum += loss;
            since_n += 1;
            if config.eval_every > 0 && step % config.eval_every == 0 {
                history.push(record(&policy, step, epoch, since_sum / since_n as f64)?);
                (since_sum, since_n) = (0.0, 0);
            }
        }
    }
    if since_n > 0 {
        history.push(record(
            &policy,
            step,
            config.epochs.saturating_sub(1),
            since_sum / since_n as f64,
        )?);
    }
    Ok(TrainOutcome {
        policy,
        history,
        diverged: None,
    })
}

/// Write a metrics history as JSON Lines, one record per line.
pub fn write_metrics(path: &Path, history: &[MetricsRecord]) -> Result<()> {
    let mut out = Vec::new();
    for r in history {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    fsutil::write_atomic(path, &out)
}

/// Compare backpropagated gradients of the mean batch loss with central
/// differences on `coords` random parameters.
pub fn gradient_check(
    policy: &ToyPolicy,
    pairs: &[EncodedPair],
    config: &LossConfig,
    coords: usize,
    h: f64,
    seed: u64,
) -> Result<f64> {
    let batch: Vec<&EncodedPair> = pairs.iter().collect();
    let (_, analytic) = loss_and_grad(policy, &batch, config)?;
    let mut probe = policy.clone();
    finite_difference_check(
        policy.params(),
        &analytic,
        |theta| {
            probe.params_mut().copy_from_slice(theta);
            mean_loss(&probe, pairs, config)
        },
        coords,
        h,
        seed,
    )
}

/// Relative-error bound used by [`verify_gradients`].
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// Gradient check of every loss kind at K = 3 with adaptive clipping and
/// ARWC weights, on a random policy scored against three random references.
/// One trial per loss kind; a trial fails when its relative error reaches
/// [`GRADCHECK_TOLERANCE`].
pub fn verify_gradients(seed: u64, coords: usize, h: f64) -> Result<crate::oracle::SuiteReport> {
    let vocab = Vocab::printable();
    let dims = PolicyDims::default();
    let policy = ToyPolicy::random(vocab.clone(), dims, seed)?;
    let refs = (1..=3)
        .map(|k| ToyPolicy::random(vocab.clone(), dims, reference_seed(seed, k)))
        .collect::<Result<Vec<_>>>()?;
    let named: Vec<(String, &ToyPolicy)> = refs.iter().enumerate().map(|(k, p)| (format!("r{k}"), p)).collect();
    let data = generate_synthetic(&SyntheticSpec::toy(seed, 8, 0.0))?.train;
    let pairs = prepare_split(&vocab, &data, &score_references(&data, &named)?)?;
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for kind in [LossKind::Dpo, LossKind::MultiDpo, LossKind::Mrpo] {
        let config = LossConfig::default().with_kind(kind);
        let err = gradient_check(&policy, &pairs, &config, coords, h, seed)?;
        if !(err < GRADCHECK_TOLERANCE) {
            failures += 1;
        }
        worst = worst.max(err);
    }
    Ok(crate::oracle::SuiteReport {
        suite: "gradcheck".into(),
        trials: 3,
        failures,
        max_deviation: worst,
    })
}

/// One method in a comparison: a label and its loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub label: String,
    pub loss: LossConfig,
}

/// A multi-seed comparison on planted-reward data. For each seed, the base
/// policy (reference 0, also the initialization) and the additional
/// references are built from the reference family at the given qualities,
/// then every method is trained from the same start on the same caches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub data: SyntheticSpec,
    pub base_quality: f64,
    pub reference_qualities: Vec<f64>,
    pub dims: PolicyDims,
    pub methods: Vec<MethodSpec>,
    pub seeds: Vec<u64>,
    /// Shared training settings; each method's loss replaces `train.loss`.
    pub train: TrainConfig,
}

impl ExperimentSpec {
    /// Weak base (quality 0.2) plus one strong reference (quality 0.9) on
    /// 5000 train / 500 test pairs with 10% label noise, default training
    /// settings, comparing dpo, multi_dpo and mrpo plus the fixed-epsilon and
    /// fixed-alpha ablations of mrpo. `mrpo_a{w}` puts weight `w` on the base.
    pub fn weak_base_strong_reference(seeds: Vec<u64>) -> Self {
        let mut data = SyntheticSpec::toy(1, 5500, 0.1);
        data.train_fraction = 5000.0 / 5500.0;
        let method = |label: &str, loss: LossConfig| MethodSpec {
            label: label.into(),
            loss,
        };
        let mrpo = LossConfig::default();
        let fixed_alpha = |w: f64| {
            let weights = ReferenceWeights::new(vec![w, 1.0 - w]).expect("weights sum to one");
            LossConfig {
                weight_mode: WeightMode::Fixed(weights),
                ..mrpo.clone()
            }
        };
        let methods = vec![
            method("dpo", mrpo.clone().with_kind(LossKind::Dpo)),
            method("multi_dpo", mrpo.clone().with_kind(LossKind::MultiDpo)),
            method("mrpo", mrpo.clone()),
            method(
                "mrpo_fixed_eps",
                LossConfig {
                    clip: ClipConfig::new(0.1, ClipMode::Fixed).expect("valid clip"),
                    ..mrpo.clone()
                },
            ),
            method("mrpo_a0.1", fixed_alpha(0.1)),
            method("mrpo_a0.5", fixed_alpha(0.5)),
            method("mrpo_a0.9", fixed_alpha(0.9)),
        ];
        ExperimentSpec {
            data,
            base_quality: 0.2,
            reference_qualities: vec![0.9],
            dims: PolicyDims::default(),
            methods,
            seeds,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentCell {
    pub method: String,
    pub seed: u64,
    pub accuracy: f64,
    pub margin: f64,
    pub tie_rate: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_margin: f64,
    pub std_margin: f64,
    pub diverged_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub method_a: String,
    pub method_b: String,
    /// Cohen's d of accuracy, positive when `method_a` is better.
    pub cohens_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub cells: Vec<ExperimentCell>,
    pub summaries: Vec<MethodSummary>,
    pub effect_sizes: Vec<EffectSize>,
    /// Per-seed likelihood-ranking accuracy of the base policy on the test set.
    pub base_accuracy: Vec<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Cohen's d with pooled sample standard deviation. Equal means give 0 even
/// when both samples are constant.
pub fn cohens_d(a: &[f64], b: &[f64]) -> f64 {
    let ((ma, sa), (mb, sb)) = (mean_std(a), mean_std(b));
    if ma == mb {
        return 0.0;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let dof = na + nb - 2.0;
    let pooled = if dof > 0.0 {
        (((na - 1.0) * sa * sa + (nb - 1.0) * sb * sb) / dof).sqrt()
    } else {
        0.0
    };
    if pooled == 0.0 {
        return if ma > mb { f64::INFINITY } else { f64::NEG_INFINITY };
    }
    (ma - mb) / pooled
}

/// Seed of reference `k` (0 = base) for experiment seed `seed`.
pub fn reference_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(k as u64)
}

pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    if spec.methods.is_empty() || spec.seeds.is_empty() {
        return Err(Error::InvalidConfig(
            "experiment needs at least one method and one seed".into(),
        ));
    }
    let data = generate_synthetic(&spec.data)?;
    if data.test.is_empty() {
        return Err(Error::InvalidConfig("experiment needs a non-empty test split".into()));
    }
    let vocab = Vocab::printable();
    let mut cells = Vec::new();
    let mut base_accuracy = Vec::new();
    for &seed in &spec.seeds {
        let qualities: Vec<f64> = std::iter::once(spec.base_quality)
            .chain(spec.reference_qualities.iter().copied())
            .collect();
        let refs: Vec<ToyPolicy> = qualities
            .iter()
            .enumerate()
            .map(|(k, &q)| {
                make_reference_family(reference_seed(seed, k), q, &spec.data.reward, vocab.clone(), spec.dims)
            })
            .collect::<Result<_>>()?;
        let named: Vec<(String, &ToyPolicy)> = refs
            .iter()
            .zip(&qualities)
            .enumerate()
            .map(|(k, (p, q))| (format!("ref{k}-q{q}"), p))
            .collect();
        let train_split = prepare_split(&vocab, &data.train, &score_references(&data.train, &named)?)?;
        let test_split = prepare_split(&vocab, &data.test, &score_references(&data.test, &named)?)?;
        base_accuracy.push(likelihood_accuracy(&refs[0], &test_split)?);
        for method in &spec.methods {
            let config = TrainConfig {
                loss: method.loss.clone(),
                seed,
                eval_every: 0,
                ..spec.train.clone()
            };
            let outcome = train(&refs[0], &train_split, None, &config)?;
            let eval = evaluate(&outcome.policy, &test_split, &method.loss)?;
            cells.push(ExperimentCell {
                method: method.label.clone(),
                seed,
                accuracy: eval.accuracy,
                margin: eval.mean_margin,
                tie_rate: eval.tie_rate,
                diverged: outcome.diverged.is_some(),
            });
        }
    }
    let column = |label: &str, f: fn(&ExperimentCell) -> f64| -> Vec<f64> {
        cells.iter().filter(|c| c.method == label).map(f).collect()
    };
    let summaries: Vec<MethodSummary> = spec
        .methods
        .iter()
        .map(|m| {
            let (mean_accuracy, std_accuracy) = mean_std(&column(&m.label, |c| c.accuracy));
            let (mean_margin, std_margin) = mean_std(&column(&m.label, |c| c.margin));
            MethodSummary {
                method: m.label.clone(),
                mean_accuracy,
                std_accuracy,
                mean_margin,
                std_margin,
                diverged_runs: cells.iter().filter(|c| c.method == m.label && c.diverged).count(),
            }
        })
        .collect();
    let mut effect_sizes = Vec::new();
    for (i, a) in spec.methods.iter().enumerate() {
        for b in &spec.methods[i + 1..] {
            effect_sizes.push(EffectSize {
                method_a: a.label.clone(),
                method_b: b.label.clone(),
                cohens_d: cohens_d(&column(&a.label, |c| c.accuracy), &column(&b.label, |c| c.accuracy)),
            });
        }
    }
    Ok(ExperimentReport {
        cells,
        summaries,
        effect_sizes,
        base_accuracy,
    })
}

impl ExperimentReport {
    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn mean_base_accuracy(&self) -> f64 {
        mean_std(&self.base_accuracy).0
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,seed,accuracy,margin,tie_rate,diverged\n");
        for c in &self.cells {
            out += &format!(
                "{},{},{},{},{},{}\n",
                c.method, c.seed, c.accuracy, c.margin, c.tie_rate, c.diverged
            );
        }
        for s in &self.summaries {
            out += &format!("{},mean,{},{},,\n", s.method, s.mean_accuracy, s.mean_margin);
            out += &format!("{},std,{},{},,\n", s.method, s.std_accuracy, s.std_margin);
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut w = |s: String| out.push_str(&s);
        w(format!(
            "{:<16} {:>6} {:>9} {:>10} {:>8}\n",
            "method", "seed", "accuracy", "margin", "diverged"
        ));
        for c in &self.cells {
            w(format!(
                "{:<16} {:>6} {:>9.4} {:>10.4} {:>8}\n",
                c.method, c.seed, c.accuracy, c.margin, c.diverged
            ));
        }
        w("\n".into());
        for s in &self.summaries {
            w(format!(
                "{:<16} accuracy {:.4} ± {:.4}  margin {:.4} ± {:.4}  diverged {}\n",
                s.method, s.mean_accuracy, s.std_accuracy, s.mean_margin, s.std_margin, s.diverged_runs
            ));
        }
        w(format!(
            "base policy likelihood accuracy {:.4}\n",
            self.mean_base_accuracy()
        ));
        for e in &self.effect_sizes {
            w(format!(
                "cohen's d {} vs {}: {:.3}\n",
                e.method_a, e.method_b, e.cohens_d
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_csv().as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_pairs(policy: &ToyPolicy, refs: &[&ToyPolicy]) -> Vec<EncodedPair> {
        let data = generate_synthetic(&SyntheticSpec::toy(2, 24, 0.0)).unwrap().train;
        let named: Vec<(String, &ToyPolicy)> = refs.iter().enumerate().map(|(k, p)| (format!("r{k}"), *p)).collect();
        let cache = score_references(&data, &named).unwrap();
        prepare_split(policy.vocab(), &data, &cache).unwrap()
    }

    fn policy(seed: u64) -> ToyPolicy {
        ToyPolicy::random(Vocab::printable(), PolicyDims::default(), seed).unwrap()
    }

    #[test]
    fn cohens_d_examples() {
        assert_eq!(cohens_d(&[0.5, 0.6], &[0.5, 0.6]), 0.0);
        // means 2 and 1, both sample sds 1 => d = 1.
        assert!((cohens_d(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0]) - 1.0).abs() < 1e-15);
        assert_eq!(cohens_d(&[1.0], &[0.0]), f64::INFINITY);
    }

    #[test]
    fn policy_equal_to_reference_has_all_ties() {
        let p = policy(1);
        let pairs = tiny_pairs(&p, &[&p]);
        for kind in [LossKind::Dpo, LossKind::MultiDpo, LossKind::Mrpo] {
            let e = evaluate(&p, &pairs, &LossConfig::default().with_kind(kind)).unwrap();
            assert_eq!((e.accuracy, e.mean_margin, e.tie_rate), (0.0, 0.0, 1.0));
        }
    }

    #[test]
    fn single_correct_pair_is_fully_accurate() {
        let p = policy(1);
        let mut pairs = tiny_pairs(&p, &[&p]);
        pairs.truncate(1);
        pairs[0].refs = PairRefLogProbs::single(-100.0, -0.01).unwrap();
        let e = evaluate(&p, &pairs, &LossConfig::dpo(0.1)).unwrap();
        assert_eq!(e.accuracy, 1.0);
    }

    #[test]
    fn zero_epochs_keeps_policy_and_records_baseline() {
        let p = policy(3);
        let pairs = tiny_pairs(&p, &[&p]);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train(&p, &pairs, Some(&pairs), &cfg).unwrap();
        assert_eq!(out.policy.params(), p.params());
        assert_eq!(out.history.len(), 1);
        assert!((out.history[0].train_loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn training_is_deterministic() {
        let p = policy(3);
        let other = policy(4);
        let pairs = tiny_pairs(&p, &[&p, &other]);
        let cfg = TrainConfig {
            eval_every: 2,
            ..TrainConfig::default()
        };
        let a = train(&p, &pairs, Some(&pairs), &cfg).unwrap();
        let b = train(&p, &pairs, Some(&pairs), &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.policy.params(), b.policy.params());
        assert!(a.history.windows(2).all(|w| w[0].step < w[1].step));
    }

    #[test]
    fn single_reference_mrpo_follows_dpo_trajectory() {
        let p = policy(5);
        let pairs = tiny_pairs(&p, &[&p]);
        let dpo = TrainConfig {
            loss: LossConfig::dpo(0.1),
            ..TrainConfig::default()
        };
        let mrpo = TrainConfig {
            loss: LossConfig::default(),
            ..TrainConfig::default()
        };
        let a = train(&p, &pairs, None, &dpo).unwrap();
        let b = train(&p, &pairs, None, &mrpo).unwrap();
        let max = a
            .policy
            .params()
            .iter()
            .zip(b.policy.params())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        assert!(max <= 1e-10, "{max}");
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = policy(6);
        let (r1, r2) = (policy(7), policy(8));
        let pairs = tiny_pairs(&p, &[&p, &r1, &r2]);
        let cfg = LossConfig {
            clip: ClipConfig::new(0.1, ClipMode::Adaptive).unwrap(),
            ..LossConfig::default()
        };
        for kind in [LossKind::Dpo, LossKind::MultiDpo, LossKind::Mrpo] {
            let err = gradient_check(&p, &pairs[..4], &cfg.clone().with_kind(kind), 64, 1e-5, 9).unwrap();
            assert!(err < 1e-4, "{kind}: {err}");
        }
    }

    #[test]
    fn gradient_suite_passes() {
        let r = verify_gradients(3, 64, 1e-5).unwrap();
        assert!(r.passed(), "{r}");
        assert_eq!(r.trials, 3);
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let p = policy(1);
        let data = generate_synthetic(&SyntheticSpec::toy(2, 10, 0.0)).unwrap().train;
        let cache = score_references(&data, &[("r".into(), &p)]).unwrap();
        let mut changed = data.clone();
        changed[0].chosen.push('a');
        assert!(matches!(
            prepare_split(p.vocab(), &changed, &cache),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        let p = policy(1);
        let pairs = tiny_pairs(&p, &[&p]);
        for cfg in [
            TrainConfig {
                lr: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(train(&p, &pairs, None, &cfg), Err(Error::InvalidConfig(_))));
        }
    }
}
