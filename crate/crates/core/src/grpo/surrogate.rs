use serde::{Deserialize, Serialize};

use crate::rewards::RewardBreakdown;
use crate::toy_lm::{PolicyParams, Rollout, SparseGrad};
use crate::{Error, Result};

/// How per-token terms of one response are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Divide each response's token sum by its length.
    TokenMean,
    /// Plain token sum.
    TokenSum,
}

/// Nonnegative per-token KL estimate `rho - ln(rho) - 1` with
/// `rho = pi_ref / pi_theta`.
pub fn kl_token(logp_theta: f64, logp_ref: f64) -> f64 {
    let d = logp_ref - logp_theta;
    d.exp() - d - 1.0
}

/// The G responses drawn for one question, with rewards and advantages.
#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub task_id: u64,
    pub rollouts: Vec<Rollout>,
    pub breakdowns: Vec<RewardBreakdown>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub beta: f64,
    pub epsilon: f64,
    pub temperature: f64,
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone)]
pub struct SurrogateOutput {
    pub value: f64,
    pub grad: SparseGrad,
    /// Mean per-token KL estimate against the reference.
    pub mean_kl: f64,
    /// Fraction of tokens on the clipped branch.
    pub clipped_fraction: f64,
}

/// Deliberate gradient defects used as negative controls for the checker.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradFault {
    /// Negates the gradient of tokens whose ratio lies outside the clip
    /// interval while the unclipped branch is active.
    ClipBranchSign,
}

/// Clipped surrogate with KL penalty and its exact gradient.
///
/// The denominator of every probability ratio is the log-probability
/// recorded when the rollout was sampled. Clipped tokens contribute zero
/// gradient through the ratio.
pub fn surrogate_objective(
    group: &Group,
    params: &PolicyParams,
    reference: &PolicyParams,
    cfg: &ObjectiveConfig,
) -> Result<SurrogateOutput> {
    surrogate_objective_with_fault(group, params, reference, cfg, None)
}

#[doc(hidden)]
pub fn surrogate_objective_with_fault(
    group: &Group,
    params: &PolicyParams,
    reference: &PolicyParams,
    cfg: &ObjectiveConfig,
    fault: Option<GradFault>,
) -> Result<SurrogateOutput> {
    params.check_compatible(reference, "reference policy")?;
    if group.rollouts.is_empty() || group.rollouts.len() != group.advantages.len() {
        return Err(Error::input("group needs one advantage per rollout"));
    }
    let g = group.rollouts.len() as f64;
    let (lo, hi) = (1.0 - cfg.epsilon, 1.0 + cfg.epsilon);
    let t_inv = 1.0 / cfg.temperature;

    let mut value = 0.0;
    let mut grad = SparseGrad::new();
    let mut kl_sum = 0.0;
    let mut clipped = 0usize;
    let mut token_count = 0usize;

    for (rollout, &adv) in group.rollouts.iter().zip(&group.advantages) {
        if rollout.tokens.is_empty() {
            continue;
        }
        if rollout.tokens.len() != rollout.logprobs_old.len() {
            return Err(Error::input("rollout log-probabilities do not match its tokens"));
        }
        params.check_tokens(&rollout.tokens)?;
        let weight = match cfg.aggregation {
            Aggregation::TokenMean => 1.0 / rollout.tokens.len() as f64,
            Aggregation::TokenSum => 1.0,
        } / g;
        let rows = params.context_rows(rollout.prompt, &rollout.tokens);
        for ((&row, &tok), &lp_old) in rows.iter().zip(&rollout.tokens).zip(&rollout.logprobs_old) {
            if !params.is_allowed(tok) {
                return Err(Error::input(format!("token {tok} is outside the policy support")));
            }
            let lp = params.log_probs_row(row, cfg.temperature);
            let lp_theta = lp[tok];
            let lp_ref = reference.log_probs_row(row, cfg.temperature)[tok];
            let ratio = (lp_theta - lp_old).exp();

            let unclipped = ratio * adv;
            let clipped_v = ratio.clamp(lo, hi) * adv;
            let (surr, mut d_surr) = if unclipped <= clipped_v {
                (unclipped, ratio * adv)
            } else {
                clipped += 1;
                (clipped_v, 0.0)
            };
            if fault == Some(GradFault::ClipBranchSign) && !(lo..=hi).contains(&ratio) {
                d_surr = -d_surr;
            }

            let kl = kl_token(lp_theta, lp_ref);
            let d_kl = 1.0 - (lp_ref - lp_theta).exp();
            kl_sum += kl;
            token_count += 1;

            value += weight * (surr - cfg.beta * kl);
            let coeff = weight * (d_surr - cfg.beta * d_kl) * t_inv;
            if coeff != 0.0 {
                let out = grad.row_mut(row, params.vocab_size());
                for (u, &l) in lp.iter().enumerate() {
                    if l != f64::NEG_INFINITY {
                        out[u] -= coeff * l.exp();
                    }
                }
                out[tok] += coeff;
            }
        }
    }
    let denom = token_count.max(1) as f64;
    Ok(SurrogateOutput {
        value,
        grad,
        mean_kl: kl_sum / denom,
        clipped_fraction: clipped as f64 / denom,
    })
}
