use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{TokenId, Vocab};
use crate::rng::{self, Domain};
use crate::{Error, Result};

/// Dimensions and support of a tabular policy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyShape {
    pub vocab_size: usize,
    /// Number of distinct prompt buckets the policy conditions on.
    pub prompts: usize,
    /// Number of previously generated tokens in the context.
    pub order: usize,
    /// Tokens the policy may emit. Others have probability exactly zero.
    pub allowed: Vec<TokenId>,
    pub vocab_hash: u64,
}

impl PolicyShape {
    /// A shape over `vocab` that can only emit response tokens.
    pub fn for_vocab(vocab: &Vocab, prompts: usize, order: usize) -> Self {
        Self {
            vocab_size: vocab.size(),
            prompts,
            order,
            allowed: vocab.response_tokens(),
            vocab_hash: vocab.fingerprint(),
        }
    }

    /// A shape with every token allowed and no vocabulary binding.
    pub fn dense(vocab_size: usize, prompts: usize, order: usize) -> Self {
        Self {
            vocab_size,
            prompts,
            order,
            allowed: (0..vocab_size).collect(),
            vocab_hash: 0,
        }
    }
}

/// Conditioning context of one next-token decision: the prompt bucket and the
/// last `order` generated tokens, most recent first. Missing history is
/// padded with [`ContextKey::BEGIN`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ContextKey {
    pub prompt: usize,
    pub recent: Vec<usize>,
}

impl ContextKey {
    pub const BEGIN: usize = usize::MAX;

    pub fn new(prompt: usize, prefix: &[TokenId], order: usize) -> Self {
        let recent = (0..order)
            .map(|j| prefix.len().checked_sub(j + 1).map_or(Self::BEGIN, |i| prefix[i]))
            .collect();
        Self { prompt, recent }
    }
}

/// Logit table of a tabular autoregressive categorical policy.
///
/// Rows are indexed by [`ContextKey`]; each row holds one logit per token.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    prompts: usize,
    order: usize,
    vocab_hash: u64,
    allowed: Vec<bool>,
    logits: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(shape: &PolicyShape) -> Result<Self> {
        if shape.vocab_size < 2 {
            return Err(Error::config("policy needs at least two tokens"));
        }
        if shape.prompts == 0 {
            return Err(Error::config("policy needs at least one prompt bucket"));
        }
        let mut allowed = vec![false; shape.vocab_size];
        for &t in &shape.allowed {
            if t >= shape.vocab_size {
                return Err(Error::config(format!("allowed token {t} out of range")));
            }
            allowed[t] = true;
        }
        if allowed.iter().filter(|&&a| a).count() < 2 {
            return Err(Error::config("policy needs at least two allowed tokens"));
        }
        let rows = shape.prompts * (shape.vocab_size + 1).pow(shape.order as u32);
        Ok(Self {
            vocab_size: shape.vocab_size,
            prompts: shape.prompts,
            order: shape.order,
            vocab_hash: shape.vocab_hash,
            allowed,
            logits: vec![0.0; rows * shape.vocab_size],
        })
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random(shape: &PolicyShape, scale: f64, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(shape)?;
        let mut rng = rng::stream(seed, Domain::Init, 0, 0);
        for x in params.logits.iter_mut() {
            *x = if scale > 0.0 {
                rng.gen_range(-scale..=scale)
            } else {
                0.0
            };
        }
        Ok(params)
    }

    pub(crate) fn from_raw(shape: &PolicyShape, logits: Vec<f64>) -> Result<Self> {
        let mut params = Self::zeros(shape)?;
        if logits.len() != params.logits.len() {
            return Err(Error::Format(format!(
                "expected {} logits, found {}",
                params.logits.len(),
                logits.len()
            )));
        }
        if logits.iter().any(|x| !x.is_finite()) {
            return Err(Error::Format("non-finite logit".into()));
        }
        params.logits = logits;
        Ok(params)
    }

    pub fn shape(&self) -> PolicyShape {
        PolicyShape {
            vocab_size: self.vocab_size,
            prompts: self.prompts,
            order: self.order,
            allowed: self.allowed_tokens().collect(),
            vocab_hash: self.vocab_hash,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn prompts(&self) -> usize {
        self.prompts
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    pub fn row_count(&self) -> usize {
        self.logits.len() / self.vocab_size
    }

    pub fn is_allowed(&self, token: TokenId) -> bool {
        self.allowed.get(token).copied().unwrap_or(false)
    }

    pub fn allowed_tokens(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.allowed.iter().enumerate().filter_map(|(t, &a)| a.then_some(t))
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.logits[row * self.vocab_size..(row + 1) * self.vocab_size]
    }

    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        let v = self.vocab_size;
        &mut self.logits[row * v..(row + 1) * v]
    }

    /// Frozen copy used as the sampling or reference policy.
    pub fn snapshot(&self) -> PolicyParams {
        self.clone()
    }

    /// True when both tables have the same layout and vocabulary binding.
    pub fn is_compatible(&self, other: &PolicyParams) -> bool {
        self.vocab_size == other.vocab_size
            && self.prompts == other.prompts
            && self.order == other.order
            && self.vocab_hash == other.vocab_hash
            && self.allowed == other.allowed
    }

    pub(crate) fn check_compatible(&self, other: &PolicyParams, what: &str) -> Result<()> {
        if self.is_compatible(other) {
            Ok(())
        } else {
            Err(Error::config(format!("{what} does not share the policy layout")))
        }
    }

    fn radix(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn row_index(&self, ctx: &ContextKey) -> Result<usize> {
        if ctx.prompt >= self.prompts {
            return Err(Error::input(format!("prompt bucket {} out of range", ctx.prompt)));
        }
        if ctx.recent.len() != self.order {
            return Err(Error::input("context length does not match policy order"));
        }
        let mut row = 0;
        for &t in ctx.recent.iter().rev() {
            let digit = if t == ContextKey::BEGIN {
                self.vocab_size
            } else if t < self.vocab_size {
                t
            } else {
                return Err(Error::input(format!("context token {t} out of range")));
            };
            row = row * self.radix() + digit;
        }
        Ok(ctx.prompt * self.radix().pow(self.order as u32) + row)
    }

    /// Row index for every position of `tokens` (position `t` conditions on
    /// `tokens[..t]`). Tokens must already be range-checked.
    pub(crate) fn context_rows(&self, prompt: usize, tokens: &[TokenId]) -> Vec<usize> {
        let radix = self.radix();
        let window = radix.pow(self.order as u32);
        let base = prompt * window;
        // History digits, most recent first, start as all-BEGIN.
        let mut hist = 0usize;
        for _ in 0..self.order {
            hist = hist * radix + self.vocab_size;
        }
        let mut rows = Vec::with_capacity(tokens.len());
        for &tok in tokens {
            rows.push(base + hist);
            if self.order > 0 {
                // Oldest digit drops off the top; newest becomes the lowest.
                hist = (hist * radix) % window + tok;
            }
        }
        rows
    }

    /// Log-probabilities of one row at the given temperature. Disallowed
    /// tokens get negative infinity.
    pub fn log_probs_row(&self, row: usize, temperature: f64) -> Vec<f64> {
        let logits = self.row(row);
        let mut max = f64::NEG_INFINITY;
        for (t, &x) in logits.iter().enumerate() {
            if self.allowed[t] {
                max = max.max(x / temperature);
            }
        }
        let mut sum = 0.0;
        for (t, &x) in logits.iter().enumerate() {
            if self.allowed[t] {
                sum += (x / temperature - max).exp();
            }
        }
        let log_z = max + sum.ln();
        logits
            .iter()
            .enumerate()
            .map(|(t, &x)| {
                if self.allowed[t] {
                    x / temperature - log_z
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect()
    }

    pub fn probs_row(&self, row: usize, temperature: f64) -> Vec<f64> {
        self.log_probs_row(row, temperature).into_iter().map(f64::exp).collect()
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<()> {
        for &t in tokens {
            if t >= self.vocab_size {
                return Err(Error::input(format!(
                    "token id {t} out of range for vocabulary of {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    /// Gradient ascent update `logits += lr * grad`. Entries with an exactly
    /// zero gradient are left untouched.
    pub fn apply(&mut self, grad: &SparseGrad, lr: f64) {
        for (&row, values) in &grad.rows {
            let target = self.row_mut(row);
            for (x, &g) in target.iter_mut().zip(values) {
                if g != 0.0 {
                    *x += lr * g;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.logits.iter().all(|x| x.is_finite())
    }
}

/// Gradient over a subset of logit rows, kept in row order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseGrad {
    pub rows: BTreeMap<usize, Vec<f64>>,
}

impl SparseGrad {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn row_mut(&mut self, row: usize, width: usize) -> &mut Vec<f64> {
        self.rows.entry(row).or_insert_with(|| vec![0.0; width])
    }

    pub fn get(&self, row: usize, token: TokenId) -> f64 {
        self.rows.get(&row).map_or(0.0, |r| r[token])
    }

    pub fn norm(&self) -> f64 {
        self.rows
            .values()
            .flat_map(|r| r.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.rows.values().flat_map(|r| r.iter()).all(|&g| g == 0.0)
    }
}

/// Sampling parameters for one response.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub temperature: f64,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            max_len: 64,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub const MIN_MAX_LEN: usize = 8;

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config("temperature must be positive"));
        }
        if self.max_len < Self::MIN_MAX_LEN {
            return Err(Error::config(format!("max_len must be at least {}", Self::MIN_MAX_LEN)));
        }
        Ok(())
    }
}

/// Identifies the random stream a rollout was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamId {
    pub step: u64,
    pub index: u64,
}

/// One sampled response with the log-probabilities it was drawn with.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<TokenId>,
    pub logprobs_old: Vec<f64>,
    pub task_id: u64,
    pub prompt: usize,
    pub stream: StreamId,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Draws one response autoregressively from `softmax(logits / temperature)`.
///
/// Generation stops after emitting `eos` (when given) or at `max_len` tokens.
/// The rng stream is `(cfg.seed, step, index)`.
pub fn sample_response(
    params: &PolicyParams,
    prompt: usize,
    task_id: u64,
    cfg: &SamplerConfig,
    eos: Option<TokenId>,
    stream: StreamId,
) -> Rollout {
    let mut rng = rng::stream(cfg.seed, Domain::Rollout, stream.step, stream.index);
    let (tokens, logprobs_old) = sample_with(params, prompt, cfg.temperature, cfg.max_len, eos, &mut rng);
    Rollout {
        tokens,
        logprobs_old,
        task_id,
        prompt,
        stream,
    }
}

pub(crate) fn sample_with<R: Rng>(
    params: &PolicyParams,
    prompt: usize,
    temperature: f64,
    max_len: usize,
    eos: Option<TokenId>,
    rng: &mut R,
) -> (Vec<TokenId>, Vec<f64>) {
    let mut tokens = Vec::with_capacity(max_len);
    let mut logprobs = Vec::with_capacity(max_len);
    while tokens.len() < max_len {
        let ctx = ContextKey::new(prompt, &tokens, params.order);
        let row = params.row_index(&ctx).expect("sampled context is in range");
        let lp = params.log_probs_row(row, temperature);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut choice = None;
        for (t, &l) in lp.iter().enumerate() {
            if l == f64::NEG_INFINITY {
                continue;
            }
            let p = l.exp();
            if p == 0.0 {
                continue;
            }
            acc += p;
            choice = Some(t);
            if u < acc {
                break;
            }
        }
        let tok = choice.expect("at least one allowed token");
        tokens.push(tok);
        logprobs.push(lp[tok]);
        if Some(tok) == eos {
            break;
        }
    }
    (tokens, logprobs)
}

/// Argmax decode; ties go to the lowest token id.
pub fn greedy_response(params: &PolicyParams, prompt: usize, max_len: usize, eos: Option<TokenId>) -> Vec<TokenId> {
    let mut tokens = Vec::with_capacity(max_len);
    while tokens.len() < max_len {
        let ctx = ContextKey::new(prompt, &tokens, params.order);
        let row = params.row_index(&ctx).expect("decoded context is in range");
        let logits = params.row(row);
        let mut best: Option<(TokenId, f64)> = None;
        for t in params.allowed_tokens() {
            if best.is_none_or(|(_, b)| logits[t] > b) {
                best = Some((t, logits[t]));
            }
        }
        let tok = best.expect("at least one allowed token").0;
        tokens.push(tok);
        if Some(tok) == eos {
            break;
        }
    }
    tokens
}

/// Per-token log-probabilities of `tokens` under `params` at `temperature`.
pub fn logprob_sequence(
    params: &PolicyParams,
    prompt: usize,
    tokens: &[TokenId],
    temperature: f64,
) -> Result<Vec<f64>> {
    params.check_tokens(tokens)?;
    if prompt >= params.prompts {
        return Err(Error::input(format!("prompt bucket {prompt} out of range")));
    }
    let rows = params.context_rows(prompt, tokens);
    Ok(rows
        .iter()
        .zip(tokens)
        .map(|(&r, &t)| params.log_probs_row(r, temperature)[t])
        .collect())
}

/// Gradient of one row's logits for a single token decision.
#[derive(Debug, Clone, PartialEq)]
pub struct RowGrad {
    pub row: usize,
    pub values: Vec<f64>,
}

/// Gradient of `log pi(token | ctx)` with respect to the logits of the
/// context's row: `one_hot(token) - softmax(row)` over allowed tokens.
pub fn grad_logprob(params: &PolicyParams, ctx: &ContextKey, token: TokenId) -> Result<RowGrad> {
    params.check_tokens(&[token])?;
    let row = params.row_index(ctx)?;
    let mut values = params.probs_row(row, 1.0);
    for v in values.iter_mut() {
        *v = -*v;
    }
    values[token] += 1.0;
    Ok(RowGrad { row, values })
}
