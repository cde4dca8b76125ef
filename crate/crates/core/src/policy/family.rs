//! Reference policies of controllable quality for a planted-reward task.
//!
//! A family member starts from the random initialization for its seed and is
//! fit by maximum likelihood to outputs drawn from `softmax(r(x, ·) / τ)`.
//! `quality` scales the number of optimizer steps, so `quality = 0` is the bare
//! random init and higher qualities rank outputs more like the planted reward.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedIndex;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use super::{GradTape, PolicyDims, TokenId, ToyPolicy, Vocab};
use crate::data::PlantedReward;
use crate::error::{Error, Result};
use crate::numerics::log_sum_exp;
use crate::optim::{Optimizer, OptimizerConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FamilyConfig {
    /// Steps taken at `quality = 1`.
    pub max_steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Temperature of the target distribution over outputs.
    pub temperature: f64,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        FamilyConfig {
            max_steps: 400,
            batch: 16,
            lr: 1e-2,
            temperature: 0.5,
        }
    }
}

/// Build the reference policy for `(seed, quality)` with default settings.
pub fn make_reference_family(
    seed: u64,
    quality: f64,
    reward: &PlantedReward,
    vocab: Vocab,
    dims: PolicyDims,
) -> Result<ToyPolicy> {
    make_reference_family_with(seed, quality, reward, vocab, dims, &FamilyConfig::default())
}

pub fn make_reference_family_with(
    seed: u64,
    quality: f64,
    reward: &PlantedReward,
    vocab: Vocab,
    dims: PolicyDims,
    config: &FamilyConfig,
) -> Result<ToyPolicy> {
    if !(0.0..=1.0).contains(&quality) {
        return Err(Error::InvalidArgument(format!(
            "quality must be in [0, 1], got {quality}"
        )));
    }
    if config.batch == 0 || !(config.temperature > 0.0) {
        return Err(Error::InvalidConfig(
            "family batch must be ≥ 1 and temperature > 0".into(),
        ));
    }
    let mut policy = ToyPolicy::random(vocab, dims, seed)?;
    let steps = (quality * config.max_steps as f64).round() as usize;
    if steps == 0 {
        return Ok(policy);
    }

    let prompts = reward.all_prompts()?;
    let outputs = reward.all_outputs()?;
    let vocab = policy.vocab().clone();
    let prompt_ids: Vec<Vec<TokenId>> = prompts.iter().map(|p| vocab.encode(p)).collect::<Result<_>>()?;
    let output_ids: Vec<Vec<TokenId>> = outputs.iter().map(|o| vocab.encode_output(o)).collect::<Result<_>>()?;
    let mut samplers = Vec::with_capacity(prompts.len());
    for p in &prompts {
        let logits: Vec<f64> = outputs
            .iter()
            .map(|o| reward.score(p, o).map(|r| r / config.temperature))
            .collect::<Result<_>>()?;
        let lse = log_sum_exp(&logits);
        let probs = logits.iter().map(|l| (l - lse).exp());
        samplers.push(WeightedIndex::new(probs).expect("softmax weights are positive"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xFA31_11E5);
    let mut opt = Optimizer::new(OptimizerConfig::default(), config.lr, policy.param_count())?;
    let scale = -1.0 / config.batch as f64;
    let mut grad = vec![0.0; policy.param_count()];
    for _ in 0..steps {
        let mut tape = GradTape::constant(&policy);
        for _ in 0..config.batch {
            let xi = rand::Rng::random_range(&mut rng, 0..prompts.len());
            let yi = samplers[xi].sample(&mut rng);
            let (_, t) = policy.sequence_logprob(&prompt_ids[xi], &output_ids[yi])?;
            tape.merge(t.scaled(scale))?;
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        tape.backward_into(&mut grad)?;
        drop(tape);
        opt.step(policy.params_mut(), &grad);
    }
    Ok(policy)
}
