//! Planted-reward preference data.
//!
//! Prompts and outputs are short strings over a small alphabet. A fixed
//! random table scores each (prompt, output): output character `t` earns
//! `table[t][prompt[t % prompt_len]][output[t]]`. Pairs are labeled by that
//! score, then flipped with probability `noise`.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::PreferenceExample;
use crate::error::{Error, Result};

const MAX_ENUMERATION: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedReward {
    alphabet: Vec<char>,
    prompt_len: usize,
    output_len: usize,
    seed: u64,
    table: Vec<f64>,
}

impl PlantedReward {
    pub fn new(alphabet: &str, prompt_len: usize, output_len: usize, seed: u64) -> Result<Self> {
        let alphabet: Vec<char> = alphabet.chars().collect();
        let mut sorted = alphabet.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if alphabet.len() < 2 || sorted.len() != alphabet.len() {
            return Err(Error::InvalidConfig(
                "alphabet needs at least two distinct symbols".into(),
            ));
        }
        if prompt_len == 0 || output_len == 0 {
            return Err(Error::InvalidConfig(
                "prompt and output lengths must be positive".into(),
            ));
        }
        let a = alphabet.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let table = (0..output_len * a * a)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(PlantedReward {
            alphabet,
            prompt_len,
            output_len,
            seed,
            table,
        })
    }

    /// Default toy task: 8 symbols, 2-character prompts, 3-character outputs.
    pub fn toy(seed: u64) -> Self {
        PlantedReward::new("abcdefgh", 2, 3, seed).expect("valid toy task")
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    fn symbol_index(&self, c: char) -> Result<usize> {
        self.alphabet
            .iter()
            .position(|&s| s == c)
            .ok_or_else(|| Error::InvalidArgument(format!("symbol {c:?} not in the task alphabet")))
    }

    pub fn score(&self, prompt: &str, output: &str) -> Result<f64> {
        let x: Vec<usize> = prompt.chars().map(|c| self.symbol_index(c)).collect::<Result<_>>()?;
        let y: Vec<usize> = output.chars().map(|c| self.symbol_index(c)).collect::<Result<_>>()?;
        if x.len() != self.prompt_len || y.len() != self.output_len {
            return Err(Error::InvalidArgument(format!(
                "expected prompt/output lengths {}/{}, got {}/{}",
                self.prompt_len,
                self.output_len,
                x.len(),
                y.len()
            )));
        }
        let a = self.alphabet.len();
        Ok(y.iter()
            .enumerate()
            .map(|(t, &yt)| self.table[(t * a + x[t % self.prompt_len]) * a + yt])
            .sum())
    }

    fn all_strings(&self, len: usize) -> Result<Vec<String>> {
        let a = self.alphabet.len();
        let count = a
            .checked_pow(len as u32)
            .filter(|&n| n <= MAX_ENUMERATION)
            .ok_or_else(|| Error::InvalidConfig(format!("{a}^{len} strings is too many to enumerate")))?;
        Ok((0..count)
            .map(|mut n| {
                let mut s = vec![' '; len];
                for slot in s.iter_mut().rev() {
                    *slot = self.alphabet[n % a];
                    n /= a;
                }
                s.into_iter().collect()
            })
            .collect())
    }

    pub fn all_prompts(&self) -> Result<Vec<String>> {
        self.all_strings(self.prompt_len)
    }

    pub fn all_outputs(&self) -> Result<Vec<String>> {
        self.all_strings(self.output_len)
    }

    pub fn sample_prompt<R: Rng>(&self, rng: &mut R) -> String {
        self.sample_string(rng, self.prompt_len)
    }

    pub fn sample_output<R: Rng>(&self, rng: &mut R) -> String {
        self.sample_string(rng, self.output_len)
    }

    fn sample_string<R: Rng>(&self, rng: &mut R, len: usize) -> String {
        (0..len)
            .map(|_| *self.alphabet.choose(rng).expect("non-empty alphabet"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub reward: PlantedReward,
    pub pairs: usize,
    /// Probability of swapping chosen and rejected; must be below 0.5.
    pub noise: f64,
    pub train_fraction: f64,
}

impl SyntheticSpec {
    /// Toy task whose reward table is drawn from the same seed.
    pub fn toy(seed: u64, pairs: usize, noise: f64) -> Self {
        SyntheticSpec {
            seed,
            reward: PlantedReward::toy(seed),
            pairs,
            noise,
            train_fraction: 0.9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::InvalidConfig(format!(
                "label noise must be in [0, 0.5), got {}",
                self.noise
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "train fraction must be in (0, 1], got {}",
                self.train_fraction
            )));
        }
        let a = self.reward.alphabet.len();
        if (a as f64).powi(self.reward.output_len as i32) < 2.0 {
            return Err(Error::InvalidConfig("output space has fewer than two outputs".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub train: Vec<PreferenceExample>,
    pub test: Vec<PreferenceExample>,
}

/// Sample labeled pairs and split them into train and test.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let reward = &spec.reward;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_DA7A);
    let mut all = Vec::with_capacity(spec.pairs);
    for i in 0..spec.pairs {
        let prompt = reward.sample_prompt(&mut rng);
        let (a, b, ra, rb) = loop {
            let a = reward.sample_output(&mut rng);
            let b = reward.sample_output(&mut rng);
            let (ra, rb) = (reward.score(&prompt, &a)?, reward.score(&prompt, &b)?);
            if a != b && ra != rb {
                break (a, b, ra, rb);
            }
        };
        let (mut chosen, mut rejected) = if ra > rb { (a, b) } else { (b, a) };
        if rng.random::<f64>() < spec.noise {
            std::mem::swap(&mut chosen, &mut rejected);
        }
        all.push(PreferenceExample {
            id: format!("s{}-{i:06}", spec.seed),
            prompt,
            chosen,
            rejected,
        });
    }
    let n_train = ((spec.pairs as f64) * spec.train_fraction).round() as usize;
    let test = all.split_off(n_train.min(all.len()));
    Ok(SyntheticData { train: all, test })
}
