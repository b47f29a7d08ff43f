//! Randomized finite-difference check of the surrogate gradient.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::grpo::{
    compute_advantages, surrogate_objective_with_fault, AdvantageMode, Aggregation, GradFault, Group, ObjectiveConfig,
};
use crate::rewards::RewardBreakdown;
use crate::rng::{self, Domain};
use crate::toy_lm::{logprob_sequence, PolicyParams, PolicyShape, Rollout, StreamId};

pub const DEFAULT_TRIALS: usize = 100;
pub const TOLERANCE: f64 = 1e-6;
const STEP: f64 = 1e-5;
/// Instances with a ratio this close to a clip boundary are redrawn.
const KINK_MARGIN: f64 = 1e-4;
const EPSILON: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub trial: usize,
    pub advantage_mode: AdvantageMode,
    pub aggregation: Aggregation,
    pub beta: f64,
    pub group_size: usize,
    pub vocab_size: usize,
    pub clipped_tokens: usize,
    pub unclipped_tokens: usize,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub trials: usize,
    pub seed: u64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub worst_trial: Option<usize>,
    /// Tokens on the clipped branch summed over all trials.
    pub clipped_tokens: usize,
    pub unclipped_tokens: usize,
    pub passed: bool,
    pub warnings: Vec<String>,
    pub results: Vec<TrialResult>,
}

impl GradcheckReport {
    pub fn summary(&self) -> String {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        format!(
            "gradcheck {verdict}: {} trials, max relative error {:.3e} (tolerance {:.0e}), \
             {} clipped / {} unclipped tokens",
            self.trials, self.max_rel_error, self.tolerance, self.clipped_tokens, self.unclipped_tokens
        )
    }
}

struct Instance {
    group: Group,
    params: PolicyParams,
    reference: PolicyParams,
    cfg: ObjectiveConfig,
    mode: AdvantageMode,
}

fn draw_instance(seed: u64, trial: usize, attempt: u64) -> Instance {
    let mut rng = rng::stream(seed, Domain::Fixture, trial as u64, attempt);
    let vocab = rng.gen_range(4..=6);
    let prompts = rng.gen_range(1..=2);
    let order = rng.gen_range(0..=2);
    let shape = PolicyShape::dense(vocab, prompts, order);
    let base = rng.gen::<u64>();
    let old = PolicyParams::random(&shape, 1.0, base).expect("valid shape");
    let reference = PolicyParams::random(&shape, 1.0, base ^ 1).expect("valid shape");
    let mut params = old.snapshot();
    for x in params.logits_mut() {
        *x += rng.gen_range(-0.4..0.4);
    }

    // Cycle through every combination of mode, aggregation and beta.
    let mode = if trial.is_multiple_of(2) {
        AdvantageMode::Grpo
    } else {
        AdvantageMode::DrGrpo
    };
    let aggregation = if (trial / 2).is_multiple_of(2) {
        Aggregation::TokenMean
    } else {
        Aggregation::TokenSum
    };
    let beta = if (trial / 4).is_multiple_of(2) { 0.0 } else { 0.04 };

    let g = rng.gen_range(2..=4);
    let rollouts: Vec<Rollout> = (0..g)
        .map(|i| {
            let prompt = rng.gen_range(0..prompts);
            let len = rng.gen_range(1..=3);
            let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..vocab)).collect();
            let logprobs_old = logprob_sequence(&old, prompt, &tokens, 1.0).expect("tokens in range");
            Rollout {
                tokens,
                logprobs_old,
                task_id: 0,
                prompt,
                stream: StreamId {
                    step: 0,
                    index: i as u64,
                },
            }
        })
        .collect();
    let mut rewards: Vec<f64> = (0..g).map(|_| rng.gen_range(0.0..3.0)).collect();
    if rewards.iter().all(|&r| r == rewards[0]) {
        rewards[0] += 1.0;
    }
    let advantages = compute_advantages(&rewards, mode).expect("valid rewards");
    Instance {
        group: Group {
            task_id: 0,
            breakdowns: vec![RewardBreakdown::default(); g],
            rollouts,
            rewards,
            advantages,
        },
        params,
        reference,
        cfg: ObjectiveConfig {
            beta,
            epsilon: EPSILON,
            temperature: 1.0,
            aggregation,
        },
        mode,
    }
}

/// Ratio counts `(clipped, unclipped)` or `None` when some ratio sits too
/// close to a kink for finite differences.
fn branch_counts(inst: &Instance) -> Option<(usize, usize)> {
    let (lo, hi) = (1.0 - EPSILON, 1.0 + EPSILON);
    let mut clipped = 0;
    let mut unclipped = 0;
    for (r, &adv) in inst.group.rollouts.iter().zip(&inst.group.advantages) {
        let lp = logprob_sequence(&inst.params, r.prompt, &r.tokens, 1.0).ok()?;
        for (l, old) in lp.iter().zip(&r.logprobs_old) {
            let ratio = (l - old).exp();
            if (ratio - lo).abs() < KINK_MARGIN || (ratio - hi).abs() < KINK_MARGIN {
                return None;
            }
            if adv == 0.0 {
                continue;
            }
            if (adv > 0.0 && ratio > hi) || (adv < 0.0 && ratio < lo) {
                clipped += 1;
            } else {
                unclipped += 1;
            }
        }
    }
    Some((clipped, unclipped))
}

fn value(inst: &Instance, params: &PolicyParams) -> f64 {
    surrogate_objective_with_fault(&inst.group, params, &inst.reference, &inst.cfg, None)
        .expect("valid instance")
        .value
}

fn relative_error(inst: &Instance, fault: Option<GradFault>) -> f64 {
    let analytic = surrogate_objective_with_fault(&inst.group, &inst.params, &inst.reference, &inst.cfg, fault)
        .expect("valid instance")
        .grad;
    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    let mut probe = inst.params.snapshot();
    for i in 0..probe.logits().len() {
        let x = probe.logits()[i];
        probe.logits_mut()[i] = x + STEP;
        let up = value(inst, &probe);
        probe.logits_mut()[i] = x - STEP;
        let down = value(inst, &probe);
        probe.logits_mut()[i] = x;
        let numeric = (up - down) / (2.0 * STEP);
        let width = probe.vocab_size();
        let a = analytic.get(i / width, i % width);
        diff2 += (a - numeric) * (a - numeric);
        a2 += a * a;
        n2 += numeric * numeric;
    }
    let scale = a2.sqrt().max(n2.sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff2.sqrt() / scale
    }
}

/// Compares the analytic surrogate gradient with central differences on
/// `trials` random instances.
pub fn gradcheck(trials: usize, seed: u64) -> GradcheckReport {
    gradcheck_with_fault(trials, seed, None)
}

/// Same as [`gradcheck`] with a deliberate defect injected into the analytic
/// gradient; used to confirm the checker can fail.
#[doc(hidden)]
pub fn gradcheck_with_fault(trials: usize, seed: u64, fault: Option<GradFault>) -> GradcheckReport {
    let mut results = Vec::with_capacity(trials);
    let mut warnings = Vec::new();
    if trials == 0 {
        warnings.push("no trials requested; the check passes vacuously".to_string());
    }
    for trial in 0..trials {
        let (inst, (clipped, unclipped)) = (0..)
            .find_map(|attempt| {
                let inst = draw_instance(seed, trial, attempt);
                branch_counts(&inst).map(|c| (inst, c))
            })
            .expect("some draw avoids the kinks");
        let rel_error = relative_error(&inst, fault);
        results.push(TrialResult {
            trial,
            advantage_mode: inst.mode,
            aggregation: inst.cfg.aggregation,
            beta: inst.cfg.beta,
            group_size: inst.group.rollouts.len(),
            vocab_size: inst.params.vocab_size(),
            clipped_tokens: clipped,
            unclipped_tokens: unclipped,
            rel_error,
        });
    }
    let worst = results.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error));
    let max_rel_error = worst.map_or(0.0, |r| r.rel_error);
    let clipped_tokens = results.iter().map(|r| r.clipped_tokens).sum();
    let unclipped_tokens = results.iter().map(|r| r.unclipped_tokens).sum();
    if trials > 0 && clipped_tokens == 0 {
        warnings.push("no trial exercised the clipped branch".to_string());
    }
    GradcheckReport {
        trials,
        seed,
        tolerance: TOLERANCE,
        worst_trial: worst.map(|r| r.trial),
        max_rel_error,
        clipped_tokens,
        unclipped_tokens,
        passed: max_rel_error < TOLERANCE,
        warnings,
        results,
    }
}
