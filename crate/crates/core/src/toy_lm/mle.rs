use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::PolicyParams;
use crate::rng::{self, Domain};
use crate::taskgen::Demonstration;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MleMode {
    /// Exact gradient of the corpus log-likelihood every step.
    FullBatch,
    /// Demonstrations resampled with replacement each step.
    Stochastic { batch_size: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleConfig {
    pub lr: f64,
    pub steps: u64,
    pub mode: MleMode,
}

#[derive(Debug, Clone)]
pub struct MleOutcome {
    pub params: PolicyParams,
    /// Mean per-token negative log-likelihood of the full corpus before each
    /// step, followed by the final value (`steps + 1` entries).
    pub nll: Vec<f64>,
}

/// Token counts per context row for a set of demonstrations.
struct RowCounts {
    rows: BTreeMap<usize, (f64, Vec<f64>)>,
    tokens: f64,
}

impl RowCounts {
    fn collect<'a>(params: &PolicyParams, demos: impl Iterator<Item = &'a Demonstration>) -> Result<Self> {
        let mut rows: BTreeMap<usize, (f64, Vec<f64>)> = BTreeMap::new();
        let mut tokens = 0.0;
        for demo in demos {
            params.check_tokens(&demo.target_tokens)?;
            if demo.prompt >= params.prompts() {
                return Err(Error::input(format!("demo prompt {} out of range", demo.prompt)));
            }
            for (&tok, row) in demo
                .target_tokens
                .iter()
                .zip(params.context_rows(demo.prompt, &demo.target_tokens))
            {
                if !params.is_allowed(tok) {
                    return Err(Error::input(format!(
                        "demonstration for task {} uses token {tok} outside the policy support",
                        demo.task_id
                    )));
                }
                let entry = rows.entry(row).or_insert_with(|| (0.0, vec![0.0; params.vocab_size()]));
                entry.0 += 1.0;
                entry.1[tok] += 1.0;
                tokens += 1.0;
            }
        }
        Ok(Self { rows, tokens })
    }

    fn nll(&self, params: &PolicyParams) -> f64 {
        let mut total = 0.0;
        for (&row, (_, counts)) in &self.rows {
            let lp = params.log_probs_row(row, 1.0);
            for (c, l) in counts.iter().zip(lp) {
                if *c > 0.0 {
                    total -= c * l;
                }
            }
        }
        total / self.tokens
    }

    fn ascend(&self, params: &mut PolicyParams, lr: f64) {
        for (&row, (n, counts)) in &self.rows {
            let probs = params.probs_row(row, 1.0);
            let target = params.row_mut(row);
            for t in 0..target.len() {
                let g = (counts[t] - n * probs[t]) / self.tokens;
                if g != 0.0 {
                    target[t] += lr * g;
                }
            }
        }
    }
}

/// Mean per-token negative log-likelihood of `demos` under `params`.
pub fn mean_nll(params: &PolicyParams, demos: &[Demonstration]) -> Result<f64> {
    if demos.is_empty() {
        return Err(Error::input("no demonstrations"));
    }
    Ok(RowCounts::collect(params, demos.iter())?.nll(params))
}

/// Maximum-likelihood training on demonstrations by plain gradient ascent on
/// the mean per-token log-likelihood.
pub fn train_mle(params: &PolicyParams, demos: &[Demonstration], cfg: &MleConfig) -> Result<MleOutcome> {
    if demos.is_empty() {
        return Err(Error::input("train_mle needs at least one demonstration"));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::config("MLE learning rate must be positive"));
    }
    let full = RowCounts::collect(params, demos.iter())?;
    let mut current = params.snapshot();
    let mut nll = Vec::with_capacity(cfg.steps as usize + 1);
    for step in 0..cfg.steps {
        nll.push(full.nll(&current));
        match cfg.mode {
            MleMode::FullBatch => full.ascend(&mut current, cfg.lr),
            MleMode::Stochastic { batch_size, seed } => {
                if batch_size == 0 {
                    return Err(Error::config("MLE batch size must be positive"));
                }
                let mut rng = rng::stream(seed, Domain::MleBatch, step, 0);
                let batch: Vec<&Demonstration> =
                    (0..batch_size).map(|_| &demos[rng.gen_range(0..demos.len())]).collect();
                RowCounts::collect(&current, batch.into_iter())?.ascend(&mut current, cfg.lr);
            }
        }
    }
    nll.push(full.nll(&current));
    Ok(MleOutcome { params: current, nll })
}
