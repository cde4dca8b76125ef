//! A tiny autoregressive categorical policy over characters.
//!
//! Each next-token distribution is conditioned on a fixed window of the
//! previous `context` tokens: the window's embeddings are concatenated, passed
//! through one tanh layer and projected to vocabulary logits. The model is
//! small enough that every gradient can be checked against finite
//! differences, and its sequence log-probabilities are exact.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

mod family;
pub use family::{make_reference_family, make_reference_family_with, FamilyConfig};

pub type TokenId = usize;

/// Ordered symbol set plus two reserved ids for begin- and end-of-sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    symbols: Vec<char>,
    index: HashMap<char, TokenId>,
}

impl Vocab {
    pub fn new(symbols: Vec<char>) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::InvalidArgument("vocabulary needs at least one symbol".into()));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, &c) in symbols.iter().enumerate() {
            if index.insert(c, i).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate symbol {c:?}")));
            }
        }
        Ok(Vocab { symbols, index })
    }

    /// Printable ASCII, `' '..='~'`.
    pub fn printable() -> Self {
        Vocab::new((' '..='~').collect()).expect("printable ASCII is a valid vocabulary")
    }

    pub fn size(&self) -> usize {
        self.symbols.len() + 2
    }

    pub fn bos(&self) -> TokenId {
        self.symbols.len()
    }

    pub fn eos(&self) -> TokenId {
        self.symbols.len() + 1
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars()
            .map(|c| {
                self.index.get(&c).copied().ok_or_else(|| Error::Encoding {
                    text: text.to_string(),
                    symbol: c,
                })
            })
            .collect()
    }

    /// Encode an output and append end-of-sequence if absent.
    pub fn encode_output(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = self.encode(text)?;
        if ids.last() != Some(&self.eos()) {
            ids.push(self.eos());
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().filter_map(|&i| self.symbols.get(i)).collect()
    }

    pub fn hash(&self) -> String {
        let s: String = self.symbols.iter().collect();
        fsutil::sha256_hex(format!("{s}\u{0}bos\u{0}eos").as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub embed: usize,
    pub hidden: usize,
    pub context: usize,
}

impl Default for PolicyDims {
    fn default() -> Self {
        PolicyDims {
            embed: 16,
            hidden: 32,
            context: 4,
        }
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    vocab: usize,
    embed: usize,
    hidden: usize,
    context: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl Layout {
    fn new(vocab: usize, dims: PolicyDims) -> Self {
        let input = dims.context * dims.embed;
        let w1 = vocab * dims.embed;
        let b1 = w1 + dims.hidden * input;
        let w2 = b1 + dims.hidden;
        let b2 = w2 + vocab * dims.hidden;
        Layout {
            vocab,
            embed: dims.embed,
            hidden: dims.hidden,
            context: dims.context,
            w1,
            b1,
            w2,
            b2,
            total: b2 + vocab,
        }
    }

    fn input(&self) -> usize {
        self.context * self.embed
    }
}

/// Number of parameters for a vocabulary size and dimensions.
pub fn parameter_count(vocab_size: usize, dims: PolicyDims) -> usize {
    Layout::new(vocab_size, dims).total
}

#[derive(Debug, Clone)]
pub struct ToyPolicy {
    vocab: Vocab,
    dims: PolicyDims,
    seed: u64,
    layout: Layout,
    params: Arc<Vec<f64>>,
}

impl PartialEq for ToyPolicy {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab && self.dims == other.dims && self.seed == other.seed && self.params == other.params
    }
}

impl ToyPolicy {
    pub fn zeros(vocab: Vocab, dims: PolicyDims) -> Result<Self> {
        Self::validate_dims(dims)?;
        let layout = Layout::new(vocab.size(), dims);
        Ok(ToyPolicy {
            vocab,
            dims,
            seed: 0,
            params: Arc::new(vec![0.0; layout.total]),
            layout,
        })
    }

    /// Gaussian initialization, scaled by fan-in.
    pub fn random(vocab: Vocab, dims: PolicyDims, seed: u64) -> Result<Self> {
        let mut policy = Self::zeros(vocab, dims)?;
        policy.seed = seed;
        let l = policy.layout;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        let params = Arc::make_mut(&mut policy.params);
        let w1_scale = 1.0 / (l.input() as f64).sqrt();
        let w2_scale = 1.0 / (l.hidden as f64).sqrt();
        for (i, p) in params.iter_mut().enumerate() {
            let scale = if i < l.w1 {
                1.0
            } else if i < l.b1 {
                w1_scale
            } else if i < l.w2 || i >= l.b2 {
                0.0
            } else {
                w2_scale
            };
            let draw: f64 = unit.sample(&mut rng);
            *p = scale * draw;
        }
        Ok(policy)
    }

    fn validate_dims(dims: PolicyDims) -> Result<()> {
        if dims.embed == 0 || dims.hidden == 0 || dims.context == 0 {
            return Err(Error::InvalidConfig(format!(
                "policy dimensions must be positive: {dims:?}"
            )));
        }
        Ok(())
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dims(&self) -> PolicyDims {
        self.dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters. Copies the buffer first if a live tape still
    /// references it, so recorded tapes stay valid.
    pub fn params_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.params).as_mut_slice()
    }

    /// Log-probability of `output` following `prompt`, with a tape for
    /// [`GradTape::backward`]. Prompt positions are conditioned on but not scored.
    pub fn sequence_logprob(&self, prompt: &[TokenId], output: &[TokenId]) -> Result<(f64, GradTape)> {
        let mut trace = SeqTrace::default();
        let lp = self.forward(prompt, output, Some(&mut trace))?;
        let tape = GradTape {
            params: Arc::clone(&self.params),
            layout: self.layout,
            terms: vec![(1.0, trace)],
            consumed: false,
        };
        Ok((lp, tape))
    }

    /// Forward pass only.
    pub fn logprob(&self, prompt: &[TokenId], output: &[TokenId]) -> Result<f64> {
        self.forward(prompt, output, None)
    }

    /// Score text: the output gets end-of-sequence appended if absent.
    pub fn logprob_text(&self, prompt: &str, output: &str) -> Result<f64> {
        let p = self.vocab.encode(prompt)?;
        let o = self.vocab.encode_output(output)?;
        self.logprob(&p, &o)
    }

    /// Next-token log-probabilities after `prefix` (already including any prompt).
    pub fn next_token_logprobs(&self, prefix: &[TokenId]) -> Result<Vec<f64>> {
        self.check_tokens(prefix)?;
        let stream = self.stream(prefix, &[]);
        let mut scratch = Scratch::new(&self.layout);
        self.position(&stream, stream.len(), &mut scratch);
        Ok(scratch.logp)
    }

    fn check_tokens(&self, ids: &[TokenId]) -> Result<()> {
        match ids.iter().find(|&&t| t >= self.vocab.size()) {
            Some(t) => Err(Error::InvalidArgument(format!(
                "token id {t} outside vocabulary of size {}",
                self.vocab.size()
            ))),
            None => Ok(()),
        }
    }

    fn stream(&self, prompt: &[TokenId], output: &[TokenId]) -> Vec<TokenId> {
        let mut s = Vec::with_capacity(1 + prompt.len() + output.len());
        s.push(self.vocab.bos());
        s.extend_from_slice(prompt);
        s.extend_from_slice(output);
        s
    }

    fn forward(&self, prompt: &[TokenId], output: &[TokenId], mut trace: Option<&mut SeqTrace>) -> Result<f64> {
        if output.is_empty() {
            return Err(Error::InvalidArgument("output must be non-empty".into()));
        }
        self.check_tokens(prompt)?;
        self.check_tokens(output)?;
        let stream = self.stream(prompt, output);
        let first = 1 + prompt.len();
        let mut scratch = Scratch::new(&self.layout);
        let mut total = 0.0;
        for i in first..stream.len() {
            self.position(&stream, i, &mut scratch);
            let target = stream[i];
            total += scratch.logp[target];
            if let Some(t) = trace.as_deref_mut() {
                t.contexts.extend_from_slice(&scratch.context);
                t.hidden.extend_from_slice(&scratch.hidden);
                t.probs.extend(scratch.logp.iter().map(|l| l.exp()));
                t.targets.push(target);
            }
        }
        Ok(total)
    }

    /// Fill `scratch` with the next-token distribution at stream index `i`.
    fn position(&self, stream: &[TokenId], i: usize, s: &mut Scratch) {
        let l = &self.layout;
        let p = &self.params[..];
        let bos = self.vocab.bos();
        for j in 0..l.context {
            // window covers stream[i - context .. i], padded with bos on the left
            let src = (i + j).checked_sub(l.context);
            s.context[j] = src.map_or(bos, |k| stream[k]);
        }
        for (j, &tok) in s.context.iter().enumerate() {
            let row = &p[tok * l.embed..(tok + 1) * l.embed];
            s.input[j * l.embed..(j + 1) * l.embed].copy_from_slice(row);
        }
        let n_in = l.input();
        for h in 0..l.hidden {
            let w = &p[l.w1 + h * n_in..l.w1 + (h + 1) * n_in];
            let a: f64 = w.iter().zip(&s.input).map(|(w, x)| w * x).sum::<f64>() + p[l.b1 + h];
            s.hidden[h] = a.tanh();
        }
        let mut max = f64::NEG_INFINITY;
        for v in 0..l.vocab {
            let w = &p[l.w2 + v * l.hidden..l.w2 + (v + 1) * l.hidden];
            let z: f64 = w.iter().zip(&s.hidden).map(|(w, h)| w * h).sum::<f64>() + p[l.b2 + v];
            s.logp[v] = z;
            max = max.max(z);
        }
        let norm = max + s.logp.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        for z in s.logp.iter_mut() {
            *z -= norm;
        }
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.checkpoint_bytes())
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            format: CHECKPOINT_FORMAT.into(),
            format_version: CHECKPOINT_VERSION,
            vocab_hash: self.vocab.hash(),
            vocab: self.vocab.symbols.iter().collect(),
            dims: self.dims,
            seed: self.seed,
            param_count: self.param_count(),
            byte_order: "little".into(),
        };
        let mut bytes = serde_json::to_vec(&header).expect("header serializes");
        bytes.push(b'\n');
        bytes.extend(fsutil::f64s_to_le(&self.params));
        bytes
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        Self::from_checkpoint_bytes(&bytes, path)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (head, body) = fsutil::split_header(bytes, path)?;
        let header: CheckpointHeader = serde_json::from_slice(&head)
            .map_err(|e| Error::Format(format!("{}: bad checkpoint header: {e}", path.display())))?;
        if header.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("{}: not a policy checkpoint", path.display())));
        }
        if header.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "{}: checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                path.display(),
                header.format_version
            )));
        }
        if header.byte_order != "little" {
            return Err(Error::Format(format!("{}: unsupported byte order", path.display())));
        }
        let vocab = Vocab::new(header.vocab.chars().collect())?;
        if vocab.hash() != header.vocab_hash {
            return Err(Error::Integrity(format!(
                "{}: vocabulary hash mismatch",
                path.display()
            )));
        }
        let mut policy = ToyPolicy::zeros(vocab, header.dims)?;
        let params = fsutil::le_to_f64s(&body, path)?;
        if params.len() != policy.param_count() || header.param_count != params.len() {
            return Err(Error::Integrity(format!(
                "{}: expected {} parameters, found {}",
                path.display(),
                policy.param_count(),
                params.len()
            )));
        }
        policy.seed = header.seed;
        policy.params = Arc::new(params);
        Ok(policy)
    }
}

const CHECKPOINT_FORMAT: &str = "mrpo-policy";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    format_version: u32,
    vocab_hash: String,
    vocab: String,
    dims: PolicyDims,
    seed: u64,
    param_count: usize,
    byte_order: String,
}

struct Scratch {
    context: Vec<TokenId>,
    input: Vec<f64>,
    hidden: Vec<f64>,
    logp: Vec<f64>,
}

impl Scratch {
    fn new(l: &Layout) -> Self {
        Scratch {
            context: vec![0; l.context],
            input: vec![0.0; l.input()],
            hidden: vec![0.0; l.hidden],
            logp: vec![0.0; l.vocab],
        }
    }
}

/// Activations recorded for every scored position of one sequence.
#[derive(Debug, Clone, Default)]
struct SeqTrace {
    contexts: Vec<TokenId>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
    targets: Vec<TokenId>,
}

/// Reverse-mode record of a scalar that is a linear combination of sequence
/// log-probabilities, `sum_i c_i * log pi(y_i | x_i)`.
///
/// Tapes hold the parameters they were recorded against, so later updates to
/// the policy do not invalidate them. A tape can be replayed once.
#[derive(Debug, Clone)]
pub struct GradTape {
    params: Arc<Vec<f64>>,
    layout: Layout,
    terms: Vec<(f64, SeqTrace)>,
    consumed: bool,
}

impl GradTape {
    /// Tape of a constant: its gradient is zero.
    pub fn constant(policy: &ToyPolicy) -> Self {
        GradTape {
            params: Arc::clone(&policy.params),
            layout: policy.layout,
            terms: Vec::new(),
            consumed: false,
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    pub fn scale(&mut self, c: f64) {
        for (coef, _) in &mut self.terms {
            *coef *= c;
        }
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.scale(c);
        self
    }

    /// Add another tape's terms. Both must be recorded against the same parameters.
    pub fn merge(&mut self, other: GradTape) -> Result<()> {
        if !Arc::ptr_eq(&self.params, &other.params) && self.params != other.params {
            return Err(Error::InvalidArgument(
                "cannot merge tapes recorded against different parameters".into(),
            ));
        }
        if self.consumed || other.consumed {
            return Err(Error::TapeConsumed);
        }
        self.terms.extend(other.terms);
        Ok(())
    }

    /// Gradient of the recorded scalar with respect to every parameter.
    pub fn backward(&mut self) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.layout.total];
        self.backward_into(&mut grad)?;
        Ok(grad)
    }

    /// Accumulate the gradient into `grad`.
    pub fn backward_into(&mut self, grad: &mut [f64]) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if grad.len() != self.layout.total {
            return Err(Error::InvalidArgument(format!(
                "gradient buffer has {} entries, expected {}",
                grad.len(),
                self.layout.total
            )));
        }
        self.consumed = true;
        let terms = std::mem::take(&mut self.terms);
        let l = self.layout;
        let p = &self.params[..];
        let n_in = l.input();
        let mut dz = vec![0.0; l.vocab];
        let mut da = vec![0.0; l.hidden];
        let mut input = vec![0.0; n_in];
        let mut dinput = vec![0.0; n_in];
        for (coef, trace) in terms {
            if coef == 0.0 {
                continue;
            }
            for (pos, &target) in trace.targets.iter().enumerate() {
                let ctx = &trace.contexts[pos * l.context..(pos + 1) * l.context];
                let hidden = &trace.hidden[pos * l.hidden..(pos + 1) * l.hidden];
                let probs = &trace.probs[pos * l.vocab..(pos + 1) * l.vocab];

                // d log softmax[target] / d logits = onehot - probs
                for (v, d) in dz.iter_mut().enumerate() {
                    *d = -coef * probs[v];
                }
                dz[target] += coef;

                da.iter_mut().for_each(|d| *d = 0.0);
                for v in 0..l.vocab {
                    let g = dz[v];
                    let row = l.w2 + v * l.hidden;
                    for h in 0..l.hidden {
                        grad[row + h] += g * hidden[h];
                        da[h] += g * p[row + h];
                    }
                    grad[l.b2 + v] += g;
                }
                for (h, d) in da.iter_mut().enumerate() {
                    *d *= 1.0 - hidden[h] * hidden[h];
                }

                for (j, &tok) in ctx.iter().enumerate() {
                    input[j * l.embed..(j + 1) * l.embed].copy_from_slice(&p[tok * l.embed..(tok + 1) * l.embed]);
                }
                dinput.iter_mut().for_each(|d| *d = 0.0);
                for h in 0..l.hidden {
                    let g = da[h];
                    let row = l.w1 + h * n_in;
                    for k in 0..n_in {
                        grad[row + k] += g * input[k];
                        dinput[k] += g * p[row + k];
                    }
                    grad[l.b1 + h] += g;
                }
                for (j, &tok) in ctx.iter().enumerate() {
                    for e in 0..l.embed {
                        grad[tok * l.embed + e] += dinput[j * l.embed + e];
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::log_sum_exp;

    fn small_vocab() -> Vocab {
        Vocab::new(vec!['a', 'b']).unwrap()
    }

    #[test]
    fn vocab_roundtrip_and_errors() {
        let v = Vocab::printable();
        assert_eq!(v.size(), 97);
        assert_ne!(v.bos(), v.eos());
        let ids = v.encode("Hello, world!").unwrap();
        assert_eq!(v.decode(&ids), "Hello, world!");
        assert!(matches!(
            v.encode("tab\there"),
            Err(Error::Encoding { symbol: '\t', .. })
        ));
        assert!(Vocab::new(vec!['a', 'a']).is_err());
        assert_eq!(v.encode_output("ab").unwrap().last(), Some(&v.eos()));
        let with_eos = v.encode_output("ab").unwrap();
        assert_eq!(with_eos.len(), 3);
    }

    #[test]
    fn parameter_count_is_deterministic() {
        let dims = PolicyDims::default();
        let n = parameter_count(97, dims);
        assert_eq!(n, 97 * 16 + 32 * 64 + 32 + 97 * 32 + 97);
        assert!(n < 50_000);
        let p = ToyPolicy::random(Vocab::printable(), dims, 3).unwrap();
        assert_eq!(p.param_count(), n);
    }

    #[test]
    fn zero_policy_is_uniform() {
        let vocab = small_vocab(); // size 4 with bos/eos
        let p = ToyPolicy::zeros(vocab, PolicyDims::default()).unwrap();
        let lp = p.logprob(&[0], &[1]).unwrap();
        assert!((lp - (0.25f64).ln()).abs() < 1e-15);
        let lp2 = p.logprob(&[0, 1], &[1, 0]).unwrap();
        assert!((lp2 - -2.772_588_722_239_781).abs() < 1e-12);
    }

    #[test]
    fn single_token_outputs_normalize() {
        let p = ToyPolicy::random(Vocab::printable(), PolicyDims::default(), 11).unwrap();
        let prompt = p.vocab().encode("hi").unwrap();
        let all: Vec<f64> = (0..p.vocab().size())
            .map(|t| p.logprob(&prompt, &[t]).unwrap())
            .collect();
        let total: f64 = all.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-10);
        assert!(log_sum_exp(&all).abs() < 1e-10);
    }

    #[test]
    fn logprob_is_additive_over_concatenation() {
        let p = ToyPolicy::random(Vocab::printable(), PolicyDims::default(), 5).unwrap();
        let v = p.vocab();
        let prompt = v.encode("ab").unwrap();
        let a = v.encode("cde").unwrap();
        let b = v.encode("fg").unwrap();
        let whole: Vec<_> = a.iter().chain(&b).copied().collect();
        let joined_prompt: Vec<_> = prompt.iter().chain(&a).copied().collect();
        let lhs = p.logprob(&prompt, &whole).unwrap();
        let rhs = p.logprob(&prompt, &a).unwrap() + p.logprob(&joined_prompt, &b).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn empty_output_and_bad_tokens_rejected() {
        let p = ToyPolicy::zeros(small_vocab(), PolicyDims::default()).unwrap();
        assert!(p.logprob(&[0], &[]).is_err());
        assert!(p.logprob(&[0], &[9]).is_err());
        assert!(p.logprob_text("a", "z").is_err());
    }

    #[test]
    fn tape_of_constant_is_zero() {
        let p = ToyPolicy::random(Vocab::printable(), PolicyDims::default(), 1).unwrap();
        let g = GradTape::constant(&p).backward().unwrap();
        assert_eq!(g.len(), p.param_count());
        assert!(g.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn tape_is_single_use() {
        let p = ToyPolicy::random(Vocab::printable(), PolicyDims::default(), 1).unwrap();
        let (_, mut tape) = p.sequence_logprob(&[1, 2], &[3, 4]).unwrap();
        tape.backward().unwrap();
        assert!(matches!(tape.backward(), Err(Error::TapeConsumed)));
    }

    #[test]
    fn scaling_tape_scales_gradient() {
        let p = ToyPolicy::random(Vocab::printable(), PolicyDims::default(), 2).unwrap();
        let (_, t) = p.sequence_logprob(&[1, 2], &[3, 4]).unwrap();
        let plain = t.clone().backward().unwrap();
        let scaled = t.scaled(0.1).backward().unwrap();
        for (a, b) in plain.iter().zip(&scaled) {
            assert!((0.1 * a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut p = ToyPolicy::random(Vocab::printable(), PolicyDims::default(), 9).unwrap();
        let prompt = [10, 20, 30];
        let output = [40, 50, p.vocab().eos()];
        let (_, mut tape) = p.sequence_logprob(&prompt, &output).unwrap();
        let grad = tape.backward().unwrap();
        let h = 1e-5;
        let step = p.param_count() / 61;
        let mut worst: f64 = 0.0;
        for i in (0..p.param_count()).step_by(step) {
            let orig = p.params()[i];
            p.params_mut()[i] = orig + h;
            let up = p.logprob(&prompt, &output).unwrap();
            p.params_mut()[i] = orig - h;
            let down = p.logprob(&prompt, &output).unwrap();
            p.params_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let denom = grad[i].abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((grad[i] - numeric).abs() / denom);
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn tapes_survive_parameter_updates() {
        let mut p = ToyPolicy::random(Vocab::printable(), PolicyDims::default(), 4).unwrap();
        let (_, t) = p.sequence_logprob(&[1], &[2, 3]).unwrap();
        let before = t.clone().backward().unwrap();
        p.params_mut()[0] += 1.0;
        let mut t = t;
        assert_eq!(t.backward().unwrap(), before);
    }

    #[test]
    fn clone_is_deep() {
        let mut original = ToyPolicy::random(Vocab::printable(), PolicyDims::default(), 8).unwrap();
        let copy = original.clone();
        let prompt = [5, 6];
        let out = [7, 8];
        let before = copy.logprob(&prompt, &out).unwrap();
        assert_eq!(before.to_bits(), original.logprob(&prompt, &out).unwrap().to_bits());
        for x in original.params_mut() {
            *x += 0.01;
        }
        assert_eq!(copy.logprob(&prompt, &out).unwrap().to_bits(), before.to_bits());
        assert_ne!(original.logprob(&prompt, &out).unwrap(), before);
        let twice = copy.clone().clone();
        assert_eq!(twice, copy);
    }

    #[test]
    fn determinism_across_constructions() {
        let a = ToyPolicy::random(Vocab::printable(), PolicyDims::default(), 77).unwrap();
        let b = ToyPolicy::random(Vocab::printable(), PolicyDims::default(), 77).unwrap();
        assert_eq!(a, b);
        let (la, ta) = a.sequence_logprob(&[1, 2], &[3]).unwrap();
        let (lb, tb) = b.sequence_logprob(&[1, 2], &[3]).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        assert_eq!(ta.clone().backward().unwrap(), tb.clone().backward().unwrap());
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let p = ToyPolicy::random(Vocab::printable(), PolicyDims::default(), 21).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        p.write_checkpoint(&path).unwrap();
        let q = ToyPolicy::read_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.checkpoint_bytes(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn checkpoint_rejects_future_versions() {
        let p = ToyPolicy::zeros(small_vocab(), PolicyDims::default()).unwrap();
        let bytes = p.checkpoint_bytes();
        let text = String::from_utf8_lossy(&bytes).replacen("\"format_version\":1", "\"format_version\":2", 1);
        let err = ToyPolicy::from_checkpoint_bytes(text.as_bytes(), Path::new("x")).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }
}
