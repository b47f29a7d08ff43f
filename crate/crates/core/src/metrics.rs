//! Evaluation metrics: accuracy, thinking length, thinking reward and
//! lightweight stand-ins for similarity and perplexity scoring.
//!
//! Similarity is the Jaccard overlap between the think-block token set and
//! the task's reference rationale. Perplexity is measured under a frozen
//! add-one-smoothed bigram model fitted on reference rationales. Neither is
//! numerically comparable to scores from pretrained scorer models.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rewards::{self, Judge, Verdict};
use crate::rng::{self, Domain};
use crate::taskgen::{Dataset, TaskSpec};
use crate::toy_lm::{greedy_response, sample_with, Letter, PolicyParams, TokenId, Vocab};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Decode {
    Greedy,
    /// `samples` draws per task from rng streams keyed by `(seed, task id)`.
    Sampled {
        samples: usize,
        seed: u64,
        temperature: f64,
    },
}

impl Decode {
    pub fn label(&self) -> &'static str {
        match self {
            Decode::Greedy => "greedy",
            Decode::Sampled { .. } => "sampled",
        }
    }
}

/// Responses for every task, in dataset order (all samples of a task are
/// adjacent).
pub fn decode_all(
    policy: &PolicyParams,
    dataset: &Dataset,
    decode: &Decode,
    max_len: usize,
) -> Result<Vec<(usize, Vec<TokenId>)>> {
    if dataset.is_empty() {
        return Err(Error::input("evaluation dataset is empty"));
    }
    if let Decode::Sampled {
        samples, temperature, ..
    } = decode
    {
        if *samples == 0 || temperature.is_nan() || *temperature <= 0.0 {
            return Err(Error::config("sampled decode needs samples >= 1 and temperature > 0"));
        }
    }
    let per_task: Vec<Vec<(usize, Vec<TokenId>)>> = dataset
        .tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| match *decode {
            Decode::Greedy => vec![(i, greedy_response(policy, task.prompt_id(), max_len, Some(Vocab::EOS)))],
            Decode::Sampled {
                samples,
                seed,
                temperature,
            } => (0..samples as u64)
                .map(|j| {
                    let mut rng = rng::stream(seed, Domain::EvalSample, task.id, j);
                    let (tokens, _) = sample_with(
                        policy,
                        task.prompt_id(),
                        temperature,
                        max_len,
                        Some(Vocab::EOS),
                        &mut rng,
                    );
                    (i, tokens)
                })
                .collect(),
        })
        .collect();
    Ok(per_task.into_iter().flatten().collect())
}

/// Fraction of responses whose extracted answer matches the gold letter.
pub fn accuracy(policy: &PolicyParams, dataset: &Dataset, decode: &Decode, max_len: usize) -> Result<f64> {
    let responses = decode_all(policy, dataset, decode, max_len)?;
    let correct = responses
        .iter()
        .filter(|(i, r)| rewards::answer_reward(r, &dataset.tasks[*i]) == 1)
        .count();
    Ok(correct as f64 / responses.len() as f64)
}

/// Tokens strictly inside the first well-formed think block; 0 without one.
pub fn think_token_length(tokens: &[TokenId]) -> usize {
    rewards::think_block(tokens).map_or(0, <[TokenId]>::len)
}

/// Jaccard overlap of token sets with the reference rationale.
pub fn similarity_proxy(think: &[TokenId], task: &TaskSpec) -> f64 {
    let a: BTreeSet<TokenId> = think.iter().copied().collect();
    let b: BTreeSet<TokenId> = task.reference_rationale.iter().copied().collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Frozen bigram language model with add-one smoothing.
#[derive(Debug, Clone, PartialEq)]
pub struct BigramModel {
    /// Token id to alphabet index.
    index: Vec<Option<usize>>,
    alphabet: usize,
    /// `(alphabet + 1) x alphabet` counts; the last row is the start context.
    counts: Vec<f64>,
    totals: Vec<f64>,
}

impl BigramModel {
    pub fn uniform(alphabet: &[TokenId], vocab_size: usize) -> Result<Self> {
        if alphabet.is_empty() {
            return Err(Error::config("bigram alphabet is empty"));
        }
        let mut index = vec![None; vocab_size];
        for (i, &t) in alphabet.iter().enumerate() {
            if t >= vocab_size {
                return Err(Error::config(format!("alphabet token {t} out of range")));
            }
            index[t] = Some(i);
        }
        let n = alphabet.len();
        Ok(Self {
            index,
            alphabet: n,
            counts: vec![0.0; (n + 1) * n],
            totals: vec![0.0; n + 1],
        })
    }

    pub fn fit<'a>(
        sequences: impl IntoIterator<Item = &'a [TokenId]>,
        alphabet: &[TokenId],
        vocab_size: usize,
    ) -> Result<Self> {
        let mut model = Self::uniform(alphabet, vocab_size)?;
        for seq in sequences {
            let mut prev = model.alphabet;
            for &t in seq {
                let next = model.index.get(t).copied().flatten();
                if let Some(j) = next {
                    model.counts[prev * model.alphabet + j] += 1.0;
                    model.totals[prev] += 1.0;
                }
                prev = next.unwrap_or(model.alphabet);
            }
        }
        Ok(model)
    }

    /// Perplexity of a uniform guess over the alphabet, the largest value
    /// [`BigramModel::perplexity`] returns.
    pub fn ceiling(&self) -> f64 {
        self.alphabet as f64
    }

    pub fn log_prob(&self, prev: Option<TokenId>, next: TokenId) -> f64 {
        let row = prev
            .and_then(|p| self.index.get(p).copied().flatten())
            .unwrap_or(self.alphabet);
        let count = self
            .index
            .get(next)
            .copied()
            .flatten()
            .map_or(0.0, |j| self.counts[row * self.alphabet + j]);
        ((count + 1.0) / (self.totals[row] + self.alphabet as f64)).ln()
    }

    /// `exp(mean NLL)` capped at [`BigramModel::ceiling`]; the ceiling for an
    /// empty sequence.
    pub fn perplexity(&self, tokens: &[TokenId]) -> f64 {
        if tokens.is_empty() {
            return self.ceiling();
        }
        let mut nll = 0.0;
        let mut prev = None;
        for &t in tokens {
            nll -= self.log_prob(prev, t);
            prev = Some(t);
        }
        (nll / tokens.len() as f64).exp().clamp(1.0, self.ceiling())
    }
}

pub fn perplexity_proxy(think: &[TokenId], reference_lm: &BigramModel) -> f64 {
    reference_lm.perplexity(think)
}

pub fn thinking_reward(question: &TaskSpec, think: &[TokenId], gold: Letter, judge: Option<&dyn Judge>) -> Result<u8> {
    let judge = judge.ok_or_else(|| Error::config("thinking reward requires a bound judge"))?;
    Ok(judge.score(question, think, gold))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub decode: Decode,
    pub max_len: usize,
}

/// Aggregate evaluation of a policy on a dataset.
///
/// The first five metric groups follow the column order accuracy,
/// similarity, perplexity, thinking reward, thinking length. Standard
/// deviations are population values over all decoded responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub similarity_mean: f64,
    pub similarity_std: f64,
    pub perplexity_mean: f64,
    pub perplexity_std: f64,
    pub thinking_reward_mean: f64,
    pub thinking_reward_std: f64,
    pub think_len_mean: f64,
    pub think_len_std: f64,
    pub n: usize,
    pub decode: String,
    pub format_rate: f64,
    /// Fraction of responses with a well-formed think block.
    pub think_block_rate: f64,
    pub semantic_pass_rate: f64,
    pub response_len_mean: f64,
    pub incorrect_count: usize,
    pub incorrect_len_mean: Option<f64>,
    pub incorrect_len_median: Option<f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        0.5 * (v[mid - 1] + v[mid])
    })
}

pub const CSV_HEADER: &str = "accuracy,similarity_mean,similarity_std,perplexity_mean,perplexity_std,\
thinking_reward_mean,thinking_reward_std,think_len_mean,think_len_std,n,decode,format_rate,\
think_block_rate,semantic_pass_rate,response_len_mean,incorrect_count,incorrect_len_mean,incorrect_len_median";

impl EvalReport {
    pub fn csv_row(&self) -> String {
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.accuracy,
            self.similarity_mean,
            self.similarity_std,
            self.perplexity_mean,
            self.perplexity_std,
            self.thinking_reward_mean,
            self.thinking_reward_std,
            self.think_len_mean,
            self.think_len_std,
            self.n,
            self.decode,
            self.format_rate,
            self.think_block_rate,
            self.semantic_pass_rate,
            self.response_len_mean,
            self.incorrect_count,
            opt(self.incorrect_len_mean),
            opt(self.incorrect_len_median),
        )
    }

    /// Numeric fields by name, in serialization order.
    pub fn metric_values(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("accuracy", Some(self.accuracy)),
            ("similarity_mean", Some(self.similarity_mean)),
            ("similarity_std", Some(self.similarity_std)),
            ("perplexity_mean", Some(self.perplexity_mean)),
            ("perplexity_std", Some(self.perplexity_std)),
            ("thinking_reward_mean", Some(self.thinking_reward_mean)),
            ("thinking_reward_std", Some(self.thinking_reward_std)),
            ("think_len_mean", Some(self.think_len_mean)),
            ("think_len_std", Some(self.think_len_std)),
            ("n", Some(self.n as f64)),
            ("format_rate", Some(self.format_rate)),
            ("think_block_rate", Some(self.think_block_rate)),
            ("semantic_pass_rate", Some(self.semantic_pass_rate)),
            ("response_len_mean", Some(self.response_len_mean)),
            ("incorrect_count", Some(self.incorrect_count as f64)),
            ("incorrect_len_mean", self.incorrect_len_mean),
            ("incorrect_len_median", self.incorrect_len_median),
        ]
    }

    pub fn to_csv(&self) -> String {
        format!("{CSV_HEADER}\n{}\n", self.csv_row())
    }
}

/// Scores every decoded response of `dataset` and aggregates.
pub fn evaluate(
    policy: &PolicyParams,
    dataset: &Dataset,
    judge: Option<&dyn Judge>,
    reference_lm: &BigramModel,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let judge = judge.ok_or_else(|| Error::config("evaluation requires a bound judge"))?;
    let responses = decode_all(policy, dataset, &cfg.decode, cfg.max_len)?;
    let n = responses.len();
    let mut correct = 0usize;
    let mut formatted = 0usize;
    let mut with_think = 0usize;
    let mut grounded = 0usize;
    let mut sim = Vec::with_capacity(n);
    let mut ppl = Vec::with_capacity(n);
    let mut score = Vec::with_capacity(n);
    let mut think_len = Vec::with_capacity(n);
    let mut resp_len = Vec::with_capacity(n);
    let mut incorrect_len = Vec::new();
    for (i, tokens) in &responses {
        let task = &dataset.tasks[*i];
        let block = rewards::think_block(tokens);
        let think = block.unwrap_or(&[]);
        let right = rewards::answer_reward(tokens, task) == 1;
        correct += right as usize;
        formatted += rewards::format_reward(tokens) as usize;
        with_think += block.is_some() as usize;
        grounded += (judge.assess(think, task) == Verdict::Yes) as usize;
        sim.push(similarity_proxy(think, task));
        ppl.push(reference_lm.perplexity(think));
        score.push(judge.score(task, think, task.gold) as f64);
        think_len.push(think.len() as f64);
        resp_len.push(tokens.len() as f64);
        if !right {
            incorrect_len.push(tokens.len() as f64);
        }
    }
    let nf = n as f64;
    let (similarity_mean, similarity_std) = mean_std(&sim);
    let (perplexity_mean, perplexity_std) = mean_std(&ppl);
    let (thinking_reward_mean, thinking_reward_std) = mean_std(&score);
    let (think_len_mean, think_len_std) = mean_std(&think_len);
    Ok(EvalReport {
        accuracy: correct as f64 / nf,
        similarity_mean,
        similarity_std,
        perplexity_mean,
        perplexity_std,
        thinking_reward_mean,
        thinking_reward_std,
        think_len_mean,
        think_len_std,
        n,
        decode: cfg.decode.label().to_string(),
        format_rate: formatted as f64 / nf,
        think_block_rate: with_think as f64 / nf,
        semantic_pass_rate: grounded as f64 / nf,
        response_len_mean: mean_std(&resp_len).0,
        incorrect_count: incorrect_len.len(),
        incorrect_len_mean: (!incorrect_len.is_empty()).then(|| mean_std(&incorrect_len).0),
        incorrect_len_median: median(&incorrect_len),
    })
}
