//! Rule-based rewards, the judge interface and reward composition.

use serde::{Deserialize, Serialize};

use crate::taskgen::TaskSpec;
use crate::toy_lm::{Letter, TokenId, Vocab};
use crate::{Error, Result};

/// Body of the first think block, or `None` when there is no well-formed one.
///
/// Only the first `<think>` opener is considered. The block is malformed if
/// it is never closed or if any tag token appears before `</think>`.
pub fn think_block(tokens: &[TokenId]) -> Option<&[TokenId]> {
    let open = tokens.iter().position(|&t| t == Vocab::THINK_OPEN)?;
    let rest = &tokens[open + 1..];
    let close = rest.iter().position(|&t| Vocab::is_tag(t) || t == Vocab::EOS)?;
    (rest[close] == Vocab::THINK_CLOSE).then(|| &rest[..close])
}

/// 1 iff the response is exactly one think block followed by exactly one
/// answer block holding a single option letter, optionally ended by `<eos>`.
pub fn format_reward(tokens: &[TokenId]) -> u8 {
    let body = match tokens.split_last() {
        Some((&Vocab::EOS, head)) => head,
        _ => tokens,
    };
    if body.first() != Some(&Vocab::THINK_OPEN) {
        return 0;
    }
    let Some(think) = think_block(body) else {
        return 0;
    };
    let after = &body[think.len() + 2..];
    match after {
        [Vocab::ANSWER_OPEN, letter, Vocab::ANSWER_CLOSE] if Vocab::as_letter(*letter).is_some() => 1,
        _ => 0,
    }
}

/// Letter inside the first well-formed `<answer> L </answer>` block.
pub fn extract_answer(tokens: &[TokenId]) -> Option<Letter> {
    tokens.windows(3).find_map(|w| match w {
        [Vocab::ANSWER_OPEN, l, Vocab::ANSWER_CLOSE] => Vocab::as_letter(*l),
        _ => None,
    })
}

pub fn answer_reward(tokens: &[TokenId], task: &TaskSpec) -> u8 {
    (extract_answer(tokens) == Some(task.gold)) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Yes,
    No,
}

/// A yes/no and 1-10 assessor of reasoning.
pub trait Judge: Send + Sync {
    /// Whether the reasoning is grounded for this task.
    fn assess(&self, think: &[TokenId], task: &TaskSpec) -> Verdict;

    /// Reasoning quality from 1 to 10.
    fn score(&self, question: &TaskSpec, think: &[TokenId], gold: Letter) -> u8;
}

/// Deterministic judge over evidence and contradiction tokens.
///
/// `assess` says yes iff the rationale cites at least one evidence token and
/// no contradiction token. `score` starts at 1 and adds 3 for citing
/// evidence, 3 more if evidence is cited without any contradiction, 2 if
/// gold evidence outnumbers contradictions, and 1 if the length lies in
/// `length_band`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticJudge {
    pub length_band: (usize, usize),
}

impl SyntheticJudge {
    pub fn for_target_len(ecr_target_len: usize) -> Self {
        Self {
            length_band: (4, 2 * ecr_target_len),
        }
    }
}

impl Default for SyntheticJudge {
    fn default() -> Self {
        Self::for_target_len(RewardSpec::default().ecr_target_len)
    }
}

fn cite_counts(think: &[TokenId], task: &TaskSpec) -> (usize, usize) {
    let evidence = think.iter().filter(|t| task.evidence_set.contains(t)).count();
    let contra = think.iter().filter(|t| task.contradiction_set.contains(t)).count();
    (evidence, contra)
}

impl Judge for SyntheticJudge {
    fn assess(&self, think: &[TokenId], task: &TaskSpec) -> Verdict {
        match cite_counts(think, task) {
            (e, 0) if e > 0 => Verdict::Yes,
            _ => Verdict::No,
        }
    }

    fn score(&self, question: &TaskSpec, think: &[TokenId], gold: Letter) -> u8 {
        debug_assert_eq!(question.gold, gold);
        let (evidence, contra) = cite_counts(think, question);
        let mut score = 1;
        if evidence > 0 {
            score += 3;
            if contra == 0 {
                score += 3;
            }
        }
        if evidence > contra {
            score += 2;
        }
        let (lo, hi) = self.length_band;
        if (lo..=hi).contains(&think.len()) {
            score += 1;
        }
        score
    }
}

pub fn semantic_reward(think: &[TokenId], task: &TaskSpec, judge: Option<&dyn Judge>) -> Result<u8> {
    let judge = judge.ok_or_else(|| Error::config("semantic reward requires a bound judge"))?;
    Ok((judge.assess(think, task) == Verdict::Yes) as u8)
}

/// Length reward: `lambda * min(think_len / target, 1)`.
pub fn ecr(think_len: usize, spec: &RewardSpec) -> f64 {
    spec.ecr_lambda * (think_len as f64 / spec.ecr_target_len as f64).min(1.0)
}

/// Length reward paid only for a correct answer.
pub fn cwr(think_len: usize, answer_correct: u8, spec: &RewardSpec) -> f64 {
    if answer_correct == 1 {
        ecr(think_len, spec)
    } else {
        0.0
    }
}

/// Weights of the five reward components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub w_format: f64,
    pub w_answer: f64,
    pub w_semantic: f64,
    pub w_ecr: f64,
    pub w_cwr: f64,
    pub ecr_lambda: f64,
    pub ecr_target_len: usize,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            w_format: 1.0,
            w_answer: 1.0,
            w_semantic: 0.0,
            w_ecr: 0.0,
            w_cwr: 0.0,
            ecr_lambda: 0.5,
            ecr_target_len: 32,
        }
    }
}

impl RewardSpec {
    pub fn weights(&self) -> [f64; 5] {
        [self.w_format, self.w_answer, self.w_semantic, self.w_ecr, self.w_cwr]
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.weights();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::config("reward weights must be finite and nonnegative"));
        }
        if w.iter().all(|&x| x == 0.0) {
            return Err(Error::config("at least one reward weight must be positive"));
        }
        if !(self.ecr_lambda > 0.0 && self.ecr_lambda.is_finite()) {
            return Err(Error::config("ecr_lambda must be positive"));
        }
        if self.ecr_target_len == 0 {
            return Err(Error::config("ecr_target_len must be positive"));
        }
        Ok(())
    }

    /// Largest total a response can earn.
    pub fn max_total(&self) -> f64 {
        self.w_format + self.w_answer + self.w_semantic + self.ecr_lambda * (self.w_ecr + self.w_cwr)
    }
}

/// Per-component rewards of one response and their weighted total.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: u8,
    pub answer: u8,
    pub semantic: u8,
    pub ecr: f64,
    pub cwr: f64,
    pub total: f64,
}

/// Scores a response. The judge is only consulted when the semantic weight
/// is positive; a missing judge is then a configuration error.
pub fn total_reward(
    tokens: &[TokenId],
    task: &TaskSpec,
    spec: &RewardSpec,
    judge: Option<&dyn Judge>,
) -> Result<RewardBreakdown> {
    let format = format_reward(tokens);
    let answer = answer_reward(tokens, task);
    let think = think_block(tokens);
    let think_len = think.map_or(0, <[TokenId]>::len);
    let semantic = if spec.w_semantic > 0.0 {
        semantic_reward(think.unwrap_or(&[]), task, judge)?
    } else {
        match judge {
            Some(j) => semantic_reward(think.unwrap_or(&[]), task, Some(j))?,
            None => 0,
        }
    };
    let ecr_v = ecr(think_len, spec);
    let cwr_v = cwr(think_len, answer, spec);
    let total = spec.w_format * format as f64
        + spec.w_answer * answer as f64
        + spec.w_semantic * semantic as f64
        + spec.w_ecr * ecr_v
        + spec.w_cwr * cwr_v;
    Ok(RewardBreakdown {
        format,
        answer,
        semantic,
        ecr: ecr_v,
        cwr: cwr_v,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{reasoned_response, TaskFamily};
    use proptest::prelude::*;

    const T: TokenId = Vocab::THINK_OPEN;
    const TC: TokenId = Vocab::THINK_CLOSE;
    const AO: TokenId = Vocab::ANSWER_OPEN;
    const AC: TokenId = Vocab::ANSWER_CLOSE;
    const EOS: TokenId = Vocab::EOS;

    fn fixture() -> (TaskFamily, TaskSpec) {
        let fam = TaskFamily::with_classes(8).unwrap();
        let data = fam.generate(7, 8, 8).unwrap();
        let task = data.train.tasks.iter().find(|t| t.gold == Letter::B).unwrap().clone();
        (fam, task)
    }

    fn l(letter: Letter) -> TokenId {
        Vocab::letter(letter)
    }

    #[test]
    fn format_cases() {
        let (fam, _) = fixture();
        let e1 = fam.vocab().evidence(Letter::A, 0);
        assert_eq!(format_reward(&[T, e1, TC, AO, l(Letter::A), AC]), 1);
        assert_eq!(format_reward(&[T, e1, TC, AO, l(Letter::A), AC, EOS]), 1);
        assert_eq!(format_reward(&[T, TC, AO, l(Letter::D), AC]), 1);
        // missing </think>
        assert_eq!(format_reward(&[T, e1, AO, l(Letter::A), AC]), 0);
        // two answer blocks
        assert_eq!(
            format_reward(&[T, e1, TC, AO, l(Letter::A), AC, AO, l(Letter::B), AC]),
            0
        );
        // no think block
        assert_eq!(format_reward(&[AO, l(Letter::A), AC, EOS]), 0);
        // prefix junk, trailing junk, bad answer content
        assert_eq!(format_reward(&[e1, T, TC, AO, l(Letter::A), AC]), 0);
        assert_eq!(format_reward(&[T, TC, AO, l(Letter::A), AC, e1]), 0);
        assert_eq!(format_reward(&[T, TC, AO, e1, AC]), 0);
        assert_eq!(format_reward(&[T, TC, AO, l(Letter::A), l(Letter::B), AC]), 0);
        assert_eq!(format_reward(&[T, T, TC, AO, l(Letter::A), AC]), 0);
        assert_eq!(format_reward(&[]), 0);
    }

    #[test]
    fn answer_extraction_cases() {
        let (fam, task) = fixture();
        let f = fam.vocab().filler(0);
        assert_eq!(extract_answer(&[f, AO, l(Letter::B), AC]), Some(Letter::B));
        assert_eq!(extract_answer(&[T, f, TC]), None);
        // malformed then well-formed
        assert_eq!(
            extract_answer(&[AO, l(Letter::A), l(Letter::C), AC, AO, l(Letter::D), AC]),
            Some(Letter::D)
        );
        assert_eq!(extract_answer(&[AO, f, AC, AO, l(Letter::C), AC]), Some(Letter::C));
        assert_eq!(extract_answer(&[AO, l(Letter::A)]), None);
        assert_eq!(
            extract_answer(&[AO, l(Letter::A), AC, AO, l(Letter::B), AC]),
            Some(Letter::A)
        );
        assert_eq!(answer_reward(&[AO, l(Letter::B), AC], &task), 1);
        assert_eq!(answer_reward(&[AO, l(Letter::A), AC], &task), 0);
        assert_eq!(answer_reward(&[T, TC], &task), 0);
    }

    #[test]
    fn think_block_cases() {
        let (fam, _) = fixture();
        let (a, b, c) = (fam.vocab().filler(0), fam.vocab().filler(1), fam.vocab().filler(2));
        assert_eq!(think_block(&[T, a, b, c, TC, AO]).map(|x| x.len()), Some(3));
        assert_eq!(think_block(&[AO, l(Letter::A), AC]), None);
        assert_eq!(think_block(&[T, T, a, TC, TC]), None);
        assert_eq!(think_block(&[T, a, b]), None);
        assert_eq!(think_block(&[T, a, AO, TC]), None);
        assert_eq!(think_block(&[T, a, EOS]), None);
        assert_eq!(think_block(&[TC, T, a, TC]).map(|x| x.len()), Some(1));
    }

    #[test]
    fn semantic_oracle_cases() {
        let (fam, task) = fixture();
        let judge = SyntheticJudge::default();
        let ev = task.evidence_set[0];
        let contra = task.contradiction_set[0];
        let f = fam.vocab().filler(0);
        assert_eq!(semantic_reward(&[ev, f], &task, Some(&judge)).unwrap(), 1);
        assert_eq!(semantic_reward(&[ev, contra], &task, Some(&judge)).unwrap(), 0);
        assert_eq!(semantic_reward(&[contra], &task, Some(&judge)).unwrap(), 0);
        assert_eq!(semantic_reward(&[], &task, Some(&judge)).unwrap(), 0);
        assert!(matches!(semantic_reward(&[ev], &task, None), Err(Error::Config(_))));
    }

    #[test]
    fn judge_score_rubric() {
        let (fam, task) = fixture();
        let judge = SyntheticJudge::default();
        let g = task.gold;
        assert_eq!(judge.score(&task, &task.reference_rationale, g), 10);
        assert_eq!(judge.score(&task, &[], g), 1);
        let ev = task.evidence_set[0];
        let ev2 = task.evidence_set[1];
        let contra = task.contradiction_set[0];
        let f = fam.vocab().filler(0);
        // Rubric table: (think, expected)
        let table: Vec<(Vec<TokenId>, u8)> = vec![
            (vec![ev, contra, f, f], 1 + 3 + 1),
            (vec![ev, ev2, contra, f], 1 + 3 + 2 + 1),
            (vec![ev, contra], 1 + 3),
            (vec![ev], 1 + 3 + 3 + 2),
            (vec![contra, f, f, f], 1 + 1),
            (vec![f; 4], 1 + 1),
            (vec![f; 65], 1),
            (vec![f; 64], 2),
        ];
        for (think, want) in table {
            assert_eq!(judge.score(&task, &think, g), want, "{think:?}");
        }
    }

    #[test]
    fn length_rewards() {
        let spec = RewardSpec::default();
        assert_eq!(ecr(0, &spec), 0.0);
        assert_eq!(ecr(spec.ecr_target_len, &spec), spec.ecr_lambda);
        assert_eq!(ecr(2 * spec.ecr_target_len, &spec), spec.ecr_lambda);
        assert_eq!(cwr(17, 0, &spec), 0.0);
        assert_eq!(cwr(spec.ecr_target_len, 1, &spec), spec.ecr_lambda);
        assert_eq!(cwr(0, 1, &spec), 0.0);
    }

    #[test]
    fn totals() {
        let (fam, task) = fixture();
        let judge = SyntheticJudge::default();
        let j: Option<&dyn Judge> = Some(&judge);
        let spec = RewardSpec {
            w_semantic: 1.0,
            ..RewardSpec::default()
        };
        let perfect = total_reward(&reasoned_response(&task), &task, &spec, j).unwrap();
        assert_eq!(perfect.total, 3.0);
        let answer_only = [AO, l(task.gold), AC, EOS];
        let b = total_reward(&answer_only, &task, &spec, j).unwrap();
        assert_eq!((b.format, b.answer, b.semantic, b.total), (0, 1, 0, 1.0));

        let full = RewardSpec { w_ecr: 1.0, ..spec };
        let mut long = vec![T];
        long.push(task.evidence_set[0]);
        long.extend(std::iter::repeat_n(fam.vocab().filler(0), 31));
        long.extend([TC, AO, l(task.gold), AC, EOS]);
        let r = total_reward(&long, &task, &full, j).unwrap();
        assert_eq!(r.ecr, 0.5);
        assert_eq!(r.total, 3.5);

        let needs_judge = total_reward(&long, &task, &full, None);
        assert!(matches!(needs_judge, Err(Error::Config(_))));
        assert!(total_reward(&long, &task, &RewardSpec::default(), None).is_ok());
    }

    #[test]
    fn spec_validation() {
        assert!(RewardSpec::default().validate().is_ok());
        let zero = RewardSpec {
            w_format: 0.0,
            w_answer: 0.0,
            ..RewardSpec::default()
        };
        assert!(zero.validate().is_err());
        let neg = RewardSpec {
            w_ecr: -1.0,
            ..RewardSpec::default()
        };
        assert!(neg.validate().is_err());
    }

    fn weights() -> impl Strategy<Value = RewardSpec> {
        (
            0.0f64..3.0,
            0.0f64..3.0,
            0.0f64..3.0,
            0.0f64..3.0,
            0.0f64..3.0,
            0.01f64..2.0,
            1usize..40,
        )
            .prop_map(|(a, b, c, d, e, lambda, target)| RewardSpec {
                w_format: a,
                w_answer: b,
                w_semantic: c,
                w_ecr: d,
                w_cwr: e,
                ecr_lambda: lambda,
                ecr_target_len: target,
            })
    }

    proptest! {
        #[test]
        fn breakdown_invariants(spec in weights(), raw in proptest::collection::vec(0usize..37, 0..20)) {
            let (fam, task) = fixture();
            let judge = SyntheticJudge::default();
            let tokens: Vec<TokenId> = raw.into_iter().filter(|&t| t < fam.vocab().size()).collect();
            let r = total_reward(&tokens, &task, &spec, Some(&judge)).unwrap();
            let w = spec.weights();
            let sum = w[0] * r.format as f64 + w[1] * r.answer as f64 + w[2] * r.semantic as f64
                + w[3] * r.ecr + w[4] * r.cwr;
            prop_assert!((r.total - sum).abs() <= 1e-12);
            prop_assert!(r.format <= 1 && r.answer <= 1 && r.semantic <= 1);
            prop_assert!((0.0..=spec.ecr_lambda).contains(&r.ecr));
            prop_assert!((0.0..=spec.ecr_lambda).contains(&r.cwr));
            prop_assert!(r.cwr <= r.ecr);
            if r.cwr > 0.0 { prop_assert_eq!(r.answer, 1); }
            prop_assert!(r.total >= 0.0 && r.total <= spec.max_total() + 1e-12);
            let again = total_reward(&tokens, &task, &spec, Some(&judge)).unwrap();
            prop_assert_eq!(r, again);
        }

        #[test]
        fn ecr_is_monotone(spec in weights(), a in 0usize..100, b in 0usize..100) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(ecr(lo, &spec) <= ecr(hi, &spec));
            prop_assert!(cwr(lo, 1, &spec) <= ecr(lo, &spec));
            prop_assert!(cwr(lo, 0, &spec) <= ecr(lo, &spec));
        }
    }
}
