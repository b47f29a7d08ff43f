//! Exhaustive expected-reward oracle and its Monte Carlo cross-check.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rewards::{total_reward, Judge, RewardSpec, SyntheticJudge};
use crate::rng::{self, Domain};
use crate::taskgen::{TaskFamily, TaskSpec};
use crate::toy_lm::{sample_with, ContextKey, Letter, PolicyParams, PolicyShape, TokenId, Vocab};
use crate::{Error, Result};

pub const MAX_SUPPORT: usize = 8;
pub const MAX_ORACLE_LEN: usize = 8;
pub const MAX_SEQUENCES: u64 = 1 << 24;

/// `E[R]` and `E[R^2]` over every response the policy can emit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardMoments {
    pub mean: f64,
    pub second: f64,
    /// Total probability mass visited; 1 up to rounding.
    pub mass: f64,
    pub sequences: u64,
}

impl RewardMoments {
    pub fn variance(&self) -> f64 {
        (self.second - self.mean * self.mean).max(0.0)
    }
}

fn check_bounds(policy: &PolicyParams, max_len: usize) -> Result<()> {
    let support = policy.allowed_tokens().count();
    if support > MAX_SUPPORT {
        return Err(Error::input(format!(
            "oracle needs at most {MAX_SUPPORT} emittable tokens, policy has {support}"
        )));
    }
    if max_len == 0 || max_len > MAX_ORACLE_LEN {
        return Err(Error::input(format!("oracle max_len must lie in 1..={MAX_ORACLE_LEN}")));
    }
    let bound = (support as u64).checked_pow(max_len as u32).unwrap_or(u64::MAX);
    if bound > MAX_SEQUENCES {
        return Err(Error::input(format!(
            "enumeration bound {support}^{max_len} exceeds 2^24"
        )));
    }
    Ok(())
}

/// Depth-first enumeration of every sequence with its probability.
///
/// Sequences end at EOS or after `max_len` tokens, matching the sampler at
/// temperature 1.
pub fn exact_reward_moments(
    policy: &PolicyParams,
    task: &TaskSpec,
    spec: &RewardSpec,
    judge: Option<&dyn Judge>,
    max_len: usize,
) -> Result<RewardMoments> {
    check_bounds(policy, max_len)?;
    spec.validate()?;
    let mut acc = RewardMoments {
        mean: 0.0,
        second: 0.0,
        mass: 0.0,
        sequences: 0,
    };
    let mut prefix = Vec::with_capacity(max_len);
    visit(policy, task, spec, judge, max_len, &mut prefix, 1.0, &mut acc)?;
    Ok(acc)
}

#[allow(clippy::too_many_arguments)]
fn visit(
    policy: &PolicyParams,
    task: &TaskSpec,
    spec: &RewardSpec,
    judge: Option<&dyn Judge>,
    max_len: usize,
    prefix: &mut Vec<TokenId>,
    prob: f64,
    acc: &mut RewardMoments,
) -> Result<()> {
    let done = prefix.len() == max_len || prefix.last() == Some(&Vocab::EOS);
    if done {
        let r = total_reward(prefix, task, spec, judge)?.total;
        acc.mean += prob * r;
        acc.second += prob * r * r;
        acc.mass += prob;
        acc.sequences += 1;
        return Ok(());
    }
    let row = policy.row_index(&ContextKey::new(task.prompt_id(), prefix, policy.order()))?;
    let lp = policy.log_probs_row(row, 1.0);
    for tok in policy.allowed_tokens().collect::<Vec<_>>() {
        let p = lp[tok].exp();
        if p == 0.0 {
            continue;
        }
        prefix.push(tok);
        visit(policy, task, spec, judge, max_len, prefix, prob * p, acc)?;
        prefix.pop();
    }
    Ok(())
}

/// Expected total reward of one response, by exhaustive enumeration.
pub fn exact_expected_reward(
    policy: &PolicyParams,
    task: &TaskSpec,
    spec: &RewardSpec,
    judge: Option<&dyn Judge>,
    max_len: usize,
) -> Result<f64> {
    Ok(exact_reward_moments(policy, task, spec, judge, max_len)?.mean)
}

/// Sample mean of the total reward over `samples` independent responses.
pub fn monte_carlo_reward(
    policy: &PolicyParams,
    task: &TaskSpec,
    spec: &RewardSpec,
    judge: Option<&dyn Judge>,
    max_len: usize,
    samples: usize,
    seed: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::input("monte carlo estimate needs at least one sample"));
    }
    let mut rng = rng::stream(seed, Domain::Fixture, task.id, 1);
    let mut sum = 0.0;
    for _ in 0..samples {
        let (tokens, _) = sample_with(policy, task.prompt_id(), 1.0, max_len, Some(Vocab::EOS), &mut rng);
        sum += total_reward(&tokens, task, spec, judge)?.total;
    }
    Ok(sum / samples as f64)
}

/// A tiny policy/task/reward combination small enough to enumerate.
#[derive(Debug, Clone)]
pub struct OracleFixture {
    pub name: String,
    pub policy: PolicyParams,
    pub task: TaskSpec,
    pub spec: RewardSpec,
    pub judge: SyntheticJudge,
    pub max_len: usize,
}

/// Randomized fixtures over an 8-token support: the four tags, EOS, the gold
/// letter, one distractor letter and one evidence token. Logits are random
/// plus a random-strength bias toward the well-formed path.
pub fn oracle_fixtures(count: usize, seed: u64) -> Result<Vec<OracleFixture>> {
    let family = TaskFamily::with_classes(2)?;
    let vocab = family.vocab().clone();
    let data = family.generate(seed, 4 * count.max(1), 4)?;
    (0..count)
        .map(|k| {
            let mut rng = rng::stream(seed, Domain::Fixture, k as u64, 0);
            let task = data.train.tasks[k].clone();
            let other = Letter::ALL[(task.gold.index() + 1 + rng.gen_range(0..3)) % 4];
            let evidence = if rng.gen_bool(0.5) {
                task.evidence_set[0]
            } else {
                task.contradiction_set[rng.gen_range(0..task.contradiction_set.len())]
            };
            let gold = Vocab::letter(task.gold);
            let allowed = vec![
                Vocab::THINK_OPEN,
                Vocab::THINK_CLOSE,
                Vocab::ANSWER_OPEN,
                Vocab::ANSWER_CLOSE,
                Vocab::letter(other),
                gold,
                Vocab::EOS,
                evidence,
            ];
            let mut shape = PolicyShape::for_vocab(&vocab, family.prompt_count(), 1);
            shape.allowed = allowed;
            let mut policy = PolicyParams::random(&shape, 1.0, seed ^ ((k as u64) << 32))?;
            let strength = rng.gen_range(0.0..3.0);
            let answer = if rng.gen_bool(0.7) { gold } else { Vocab::letter(other) };
            let path = [
                (ContextKey::BEGIN, Vocab::THINK_OPEN),
                (Vocab::THINK_OPEN, evidence),
                (evidence, Vocab::THINK_CLOSE),
                (Vocab::THINK_CLOSE, Vocab::ANSWER_OPEN),
                (Vocab::ANSWER_OPEN, answer),
                (answer, Vocab::ANSWER_CLOSE),
                (Vocab::ANSWER_CLOSE, Vocab::EOS),
            ];
            for (prev, next) in path {
                let row = policy.row_index(&ContextKey {
                    prompt: task.prompt_id(),
                    recent: vec![prev],
                })?;
                policy.row_mut(row)[next] += strength;
            }
            let weights: Vec<f64> = (0..5).map(|_| rng.gen_range(0.0..1.5)).collect();
            let spec = RewardSpec {
                w_format: weights[0],
                w_answer: weights[1],
                w_semantic: weights[2],
                w_ecr: weights[3],
                w_cwr: weights[4],
                ecr_lambda: 0.5,
                ecr_target_len: rng.gen_range(1..=3),
            };
            Ok(OracleFixture {
                name: format!("fixture-{k}"),
                judge: SyntheticJudge::for_target_len(spec.ecr_target_len),
                max_len: rng.gen_range(4..=6),
                policy,
                task,
                spec,
            })
        })
        .collect()
}

/// Exact value against a Monte Carlo estimate on one fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    pub name: String,
    pub exact: f64,
    pub monte_carlo: f64,
    /// Standard error of the Monte Carlo mean from the exact variance.
    pub sigma: f64,
    pub z: f64,
    pub sequences: u64,
    pub passed: bool,
}

pub fn check_fixture(fixture: &OracleFixture, samples: usize, seed: u64, z_max: f64) -> Result<OracleCheck> {
    let judge: &dyn Judge = &fixture.judge;
    let m = exact_reward_moments(
        &fixture.policy,
        &fixture.task,
        &fixture.spec,
        Some(judge),
        fixture.max_len,
    )?;
    let mc = monte_carlo_reward(
        &fixture.policy,
        &fixture.task,
        &fixture.spec,
        Some(judge),
        fixture.max_len,
        samples,
        seed,
    )?;
    let sigma = (m.variance() / samples as f64).sqrt();
    let diff = (mc - m.mean).abs();
    let z = if sigma > 0.0 {
        diff / sigma
    } else if diff < 1e-12 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(OracleCheck {
        name: fixture.name.clone(),
        exact: m.mean,
        monte_carlo: mc,
        sigma,
        z,
        sequences: m.sequences,
        passed: z <= z_max,
    })
}

/// Runs the exact-versus-sampled comparison on `count` random fixtures.
pub fn oracle_suite(count: usize, samples: usize, seed: u64) -> Result<Vec<OracleCheck>> {
    use rayon::prelude::*;
    let fixtures = oracle_fixtures(count, seed)?;
    fixtures
        .par_iter()
        .map(|f| check_fixture(f, samples, seed, 3.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> OracleFixture {
        oracle_fixtures(1, 3).unwrap().remove(0)
    }

    #[test]
    fn deterministic_policy_gives_its_single_reward() {
        let mut f = fixture();
        let think = f
            .policy
            .allowed_tokens()
            .find(|&t| Vocab::as_letter(t).is_none() && !Vocab::is_tag(t) && t != Vocab::EOS)
            .unwrap();
        let seq = [
            Vocab::THINK_OPEN,
            think,
            Vocab::THINK_CLOSE,
            Vocab::ANSWER_OPEN,
            Vocab::letter(f.task.gold),
            Vocab::ANSWER_CLOSE,
        ];
        for logit in f.policy.logits_mut() {
            *logit = 0.0;
        }
        for i in 0..seq.len() {
            let row = f
                .policy
                .row_index(&ContextKey::new(f.task.prompt_id(), &seq[..i], 1))
                .unwrap();
            f.policy.row_mut(row)[seq[i]] = 800.0;
        }
        let judge: &dyn Judge = &f.judge;
        let exact = exact_expected_reward(&f.policy, &f.task, &f.spec, Some(judge), 6).unwrap();
        let direct = total_reward(&seq, &f.task, &f.spec, Some(judge)).unwrap().total;
        assert_eq!(exact, direct);
    }

    #[test]
    fn unreachable_reward_gives_zero() {
        // Answer-only reward with the gold letter outside the support.
        let f = fixture();
        let gold = Vocab::letter(f.task.gold);
        let mut shape = f.policy.shape();
        shape.allowed.retain(|&t| t != gold);
        let policy = PolicyParams::random(&shape, 1.0, 5).unwrap();
        let spec = RewardSpec {
            w_format: 0.0,
            w_answer: 1.0,
            ..RewardSpec::default()
        };
        assert_eq!(exact_expected_reward(&policy, &f.task, &spec, None, 6).unwrap(), 0.0);
    }

    #[test]
    fn mass_sums_to_one() {
        let f = fixture();
        let judge: &dyn Judge = &f.judge;
        let m = exact_reward_moments(&f.policy, &f.task, &f.spec, Some(judge), f.max_len).unwrap();
        assert!((m.mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bounds_are_enforced() {
        let f = fixture();
        assert!(matches!(
            exact_expected_reward(&f.policy, &f.task, &f.spec, None, 9),
            Err(Error::Input(_))
        ));
        let family = TaskFamily::with_classes(2).unwrap();
        let wide = PolicyParams::zeros(&PolicyShape::for_vocab(family.vocab(), family.prompt_count(), 1)).unwrap();
        assert!(matches!(
            exact_expected_reward(&wide, &f.task, &f.spec, None, 3),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn uniform_format_only_matches_monte_carlo() {
        let mut f = fixture();
        for logit in f.policy.logits_mut() {
            *logit = 0.0;
        }
        f.spec = RewardSpec {
            w_format: 1.0,
            w_answer: 0.0,
            ..RewardSpec::default()
        };
        f.max_len = 6;
        let check = check_fixture(&f, 100_000, 11, 3.0).unwrap();
        assert!(check.passed, "{check:?}");
    }
}
