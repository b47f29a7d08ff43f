//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use grpo_lab::grpo::{
    compute_advantages, kl_token, surrogate_objective, train_step, AdvantageMode, Aggregation, Group, ObjectiveConfig,
    TrainConfig,
};
use grpo_lab::harness::compare::steps_to_accuracy;
use grpo_lab::harness::oracle::{check_fixture, oracle_fixtures};
use grpo_lab::harness::{self, gradcheck, Preset, RunConfig, RunOutcome};
use grpo_lab::metrics::median;
use grpo_lab::rewards::{RewardBreakdown, RewardSpec};
use grpo_lab::rng::{self, Domain};
use grpo_lab::taskgen::TaskFamily;
use grpo_lab::toy_lm::{logprob_sequence, PolicyParams, PolicyShape, Rollout, StreamId};
use rand::Rng;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        passed,
        detail: detail.into(),
    }
}

fn fmt_list<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn fmt_f(xs: &[f64]) -> String {
    xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(" ")
}

fn config(preset: Preset, seed: u64) -> RunConfig {
    RunConfig::resolve(None, Some(preset), &[("seed".into(), seed.to_string())]).expect("preset config")
}

/// Seed families, run on demand and cached.
#[derive(Default)]
struct Runs {
    cache: BTreeMap<&'static str, Vec<RunOutcome>>,
    seconds: BTreeMap<&'static str, f64>,
}

impl Runs {
    fn family(&mut self, preset: Preset) -> &[RunOutcome] {
        if !self.cache.contains_key(preset.name()) {
            let start = Instant::now();
            let runs = SEEDS
                .iter()
                .map(|&s| harness::run_in_memory(&config(preset, s)).expect("run succeeds"))
                .collect();
            self.seconds.insert(preset.name(), start.elapsed().as_secs_f64());
            self.cache.insert(preset.name(), runs);
        }
        &self.cache[preset.name()]
    }

    fn greedy_accuracy(&mut self, preset: Preset) -> Vec<f64> {
        self.family(preset).iter().map(|r| r.greedy.accuracy).collect()
    }

    fn sampled<F: Fn(&grpo_lab::metrics::EvalReport) -> f64>(&mut self, preset: Preset, f: F) -> Vec<f64> {
        self.family(preset)
            .iter()
            .map(|r| f(r.sampled.as_ref().expect("sampled eval")))
            .collect()
    }
}

fn med(xs: &[f64]) -> f64 {
    median(xs).unwrap_or(f64::NAN)
}

fn gradient_fidelity() -> Verdict {
    let start = Instant::now();
    let report = gradcheck(100, 0);
    let secs = start.elapsed().as_secs_f64();
    let mut combos = 0;
    for mode in [AdvantageMode::Grpo, AdvantageMode::DrGrpo] {
        for agg in [Aggregation::TokenMean, Aggregation::TokenSum] {
            for beta in [0.0, 0.04] {
                combos += report
                    .results
                    .iter()
                    .any(|r| r.advantage_mode == mode && r.aggregation == agg && r.beta == beta)
                    as usize;
            }
        }
    }
    let ok = report.passed
        && report.trials >= 100
        && combos == 8
        && report.clipped_tokens > 0
        && report.unclipped_tokens > 0
        && secs < 60.0;
    verdict(
        ok,
        format!(
            "max rel err {:.2e} over {} trials, {combos}/8 combos, {} clipped / {} unclipped tokens, {secs:.1}s",
            report.max_rel_error, report.trials, report.clipped_tokens, report.unclipped_tokens
        ),
    )
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pop_std(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn equal_reward_update_is_noop() -> bool {
    let family = TaskFamily::with_classes(8).unwrap();
    let data = family.generate(1, 32, 8).unwrap();
    let policy = PolicyParams::zeros(&PolicyShape::for_vocab(family.vocab(), family.prompt_count(), 1)).unwrap();
    let cfg = TrainConfig {
        beta: 0.0,
        max_len: 12,
        ..TrainConfig::default()
    };
    let spec = RewardSpec::default();
    let mut degenerate = 0;
    for step in 0..40 {
        let (next, report) = train_step(&policy, &policy, &data.train, &cfg, None, &spec, step).unwrap();
        let totals: Vec<f64> = report.rollouts.iter().map(|r| r.reward.total).collect();
        if totals.iter().all(|&t| t == totals[0]) {
            degenerate += 1;
            let same = next
                .logits()
                .iter()
                .zip(policy.logits())
                .all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return false;
            }
        }
    }
    degenerate > 0
}

fn advantage_invariants() -> Verdict {
    let mut rng = rng::stream(11, Domain::Fixture, 2, 0);
    let (mut worst_mean, mut worst_std, mut worst_affine, mut worst_shift, mut worst_scale) =
        (0.0f64, 0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let n = rng.gen_range(2..=16);
        let r: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let a = rng.gen_range(0.1..10.0);
        let b = rng.gen_range(-10.0..10.0);
        let g = compute_advantages(&r, AdvantageMode::Grpo).unwrap();
        let d = compute_advantages(&r, AdvantageMode::DrGrpo).unwrap();
        worst_mean = worst_mean.max(mean(&g).abs()).max(mean(&d).abs());
        if pop_std(&r) > 0.0 {
            worst_std = worst_std.max((pop_std(&g) - 1.0).abs());
        }
        let affine: Vec<f64> = r.iter().map(|x| a * x + b).collect();
        worst_affine = worst_affine.max(max_diff(&g, &compute_advantages(&affine, AdvantageMode::Grpo).unwrap()));
        let shifted: Vec<f64> = r.iter().map(|x| x + b).collect();
        worst_shift = worst_shift.max(max_diff(
            &d,
            &compute_advantages(&shifted, AdvantageMode::DrGrpo).unwrap(),
        ));
        let scaled: Vec<f64> = r.iter().map(|x| a * x).collect();
        let expected: Vec<f64> = d.iter().map(|x| a * x).collect();
        worst_scale = worst_scale.max(max_diff(
            &expected,
            &compute_advantages(&scaled, AdvantageMode::DrGrpo).unwrap(),
        ));
    }
    let degenerate_zero = (2..=16).all(|n| {
        [AdvantageMode::Grpo, AdvantageMode::DrGrpo]
            .iter()
            .all(|&m| compute_advantages(&vec![0.3; n], m).unwrap() == vec![0.0; n])
    });
    let noop = equal_reward_update_is_noop();
    let ok = worst_mean < 1e-12
        && worst_std < 1e-9
        && worst_affine < 1e-9
        && worst_shift < 1e-12
        && worst_scale < 1e-12
        && degenerate_zero
        && noop;
    verdict(
        ok,
        format!(
            "1000 vectors: |mean| {worst_mean:.1e}, |std-1| {worst_std:.1e}, affine {worst_affine:.1e}, \
             shift {worst_shift:.1e}, scale {worst_scale:.1e}; degenerate zero {degenerate_zero}, no-op {noop}"
        ),
    )
}

fn kl_estimator() -> Verdict {
    let mut rng = rng::stream(12, Domain::Fixture, 3, 0);
    let p = PolicyParams::random(&PolicyShape::dense(6, 2, 1), 2.0, 1).unwrap();
    let q = PolicyParams::random(&PolicyShape::dense(6, 2, 1), 2.0, 2).unwrap();
    let mut negative = 0;
    for _ in 0..10_000 {
        let prompt = rng.gen_range(0..2);
        let tokens: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(0..6)).collect();
        let lp = logprob_sequence(&p, prompt, &tokens, 1.0).unwrap();
        let lq = logprob_sequence(&q, prompt, &tokens, 1.0).unwrap();
        let (a, b) = (*lp.last().unwrap(), *lq.last().unwrap());
        negative += (kl_token(a, b) < 0.0) as usize;
    }
    let rollouts: Vec<Rollout> = (0..4)
        .map(|i| {
            let tokens = vec![i % 6, (i + 2) % 6, 5];
            Rollout {
                logprobs_old: logprob_sequence(&p, 0, &tokens, 1.0).unwrap(),
                tokens,
                task_id: 0,
                prompt: 0,
                stream: StreamId {
                    step: 0,
                    index: i as u64,
                },
            }
        })
        .collect();
    let group = Group {
        task_id: 0,
        breakdowns: vec![RewardBreakdown::default(); 4],
        rollouts,
        rewards: vec![0.0, 1.0, 2.0, 0.5],
        advantages: compute_advantages(&[0.0, 1.0, 2.0, 0.5], AdvantageMode::Grpo).unwrap(),
    };
    let cfg = ObjectiveConfig {
        beta: 0.04,
        epsilon: 0.2,
        temperature: 1.0,
        aggregation: Aggregation::TokenMean,
    };
    let at_ref = surrogate_objective(&group, &p, &p.snapshot(), &cfg).unwrap().mean_kl;
    let lt = -0.9;
    let at_two = kl_token(lt, lt + 2f64.ln());
    let err = (at_two - (2.0 - 2f64.ln() - 1.0)).abs();
    verdict(
        negative == 0 && at_ref == 0.0 && err < 1e-12,
        format!("{negative} negative of 10000, KL at ref {at_ref}, |kl(rho=2) - (1 - ln 2)| = {err:.1e}"),
    )
}

fn oracle_equivalence() -> Verdict {
    let fixtures = oracle_fixtures(10, 0).unwrap();
    let mut zs = Vec::new();
    let mut ok = fixtures.len() >= 10;
    for f in &fixtures {
        let support = f.policy.allowed_tokens().count();
        ok &= support <= 8 && f.max_len <= 6;
        let check = check_fixture(f, 100_000, 0, 3.0).unwrap();
        ok &= check.passed;
        zs.push(check.z);
    }
    verdict(ok, format!("{} fixtures, z = {}", fixtures.len(), fmt_f(&zs)))
}

fn learning_efficacy(runs: &mut Runs) -> Verdict {
    let acc = runs.greedy_accuracy(Preset::GrpoBase);
    let secs = runs.seconds[Preset::GrpoBase.name()];
    let steps = runs.family(Preset::GrpoBase)[0].config.steps;
    let m = med(&acc);
    verdict(
        m >= 0.9 && steps >= 2000 && secs < 600.0,
        format!(
            "{steps} steps, accuracy {} (median {m:.3}, uniform 0.25), {secs:.1}s",
            fmt_f(&acc)
        ),
    )
}

fn steps_label(x: Option<u64>) -> String {
    x.map_or("never".to_string(), |s| s.to_string())
}

fn init_comparison(runs: &mut Runs) -> Verdict {
    let t = |rs: &[RunOutcome]| rs.iter().map(|r| steps_to_accuracy(&r.steps, 0.6)).collect::<Vec<_>>();
    let pre = t(runs.family(Preset::GrpoBase));
    let scratch = t(runs.family(Preset::ScratchVsInit));
    let slower = pre
        .iter()
        .zip(&scratch)
        .filter(|(p, s)| match (p, s) {
            (Some(p), Some(s)) => s > p,
            (Some(_), None) => true,
            _ => false,
        })
        .count();
    verdict(
        slower >= 4,
        format!(
            "steps to 0.6: pretrained [{}] scratch [{}]; scratch slower in {slower}/5",
            pre.iter().map(|x| steps_label(*x)).collect::<Vec<_>>().join(" "),
            scratch.iter().map(|x| steps_label(*x)).collect::<Vec<_>>().join(" ")
        ),
    )
}

fn length_pathology(runs: &mut Runs) -> Verdict {
    let base_len = runs.sampled(Preset::GrpoBase, |r| r.think_len_mean);
    let ecr_len = runs.sampled(Preset::Ecr, |r| r.think_len_mean);
    let cwr_len = runs.sampled(Preset::Cwr, |r| r.think_len_mean);
    let base_acc = runs.greedy_accuracy(Preset::GrpoBase);
    let ecr_acc = runs.greedy_accuracy(Preset::Ecr);
    let ecr_wins = (0..5)
        .filter(|&i| ecr_len[i] >= 2.0 * base_len[i] && ecr_acc[i] <= base_acc[i] + 0.02)
        .count();
    let cwr_between = (0..5)
        .filter(|&i| base_len[i] < cwr_len[i] && cwr_len[i] < ecr_len[i])
        .count();
    verdict(
        ecr_wins >= 4 && cwr_between >= 3,
        format!(
            "think len base [{}] ecr [{}] cwr [{}]; accuracy base [{}] ecr [{}]; ecr {ecr_wins}/5, cwr between {cwr_between}/5",
            fmt_f(&base_len),
            fmt_f(&ecr_len),
            fmt_f(&cwr_len),
            fmt_f(&base_acc),
            fmt_f(&ecr_acc)
        ),
    )
}

/// Median length of training rollouts that did not earn the answer reward.
fn incorrect_len_median(run: &RunOutcome) -> Option<f64> {
    let lens: Vec<f64> = run
        .steps
        .iter()
        .flat_map(|s| s.rollouts.iter())
        .filter(|r| r.reward.answer == 0)
        .map(|r| r.len as f64)
        .collect();
    median(&lens)
}

fn drgrpo_bias(runs: &mut Runs) -> Verdict {
    let inc = |rs: &[RunOutcome]| {
        rs.iter()
            .map(|r| incorrect_len_median(r).unwrap_or(f64::NAN))
            .collect::<Vec<_>>()
    };
    let grpo = inc(runs.family(Preset::GrpoBase));
    let dr = inc(runs.family(Preset::Drgrpo));
    let base_acc = med(&runs.greedy_accuracy(Preset::GrpoBase));
    let dr_acc = med(&runs.greedy_accuracy(Preset::Drgrpo));
    let shorter = (0..5).filter(|&i| dr[i] <= grpo[i]).count();
    verdict(
        shorter >= 4 && dr_acc >= base_acc - 0.02,
        format!(
            "incorrect-response median length grpo [{}] drgrpo [{}], drgrpo <= grpo in {shorter}/5; median accuracy {base_acc:.3} vs {dr_acc:.3}",
            fmt_f(&grpo),
            fmt_f(&dr)
        ),
    )
}

fn semantic_alignment(runs: &mut Runs) -> Verdict {
    let base = runs.sampled(Preset::GrpoBase, |r| r.semantic_pass_rate);
    let sem = runs.sampled(Preset::SemanticAlignment, |r| r.semantic_pass_rate);
    let wins = (0..5).filter(|&i| sem[i] > base[i]).count();
    verdict(
        wins >= 4,
        format!(
            "semantic pass rate base [{}] aligned [{}]; higher in {wins}/5",
            fmt_f(&base),
            fmt_f(&sem)
        ),
    )
}

fn sft_vs_rl(runs: &mut Runs) -> Verdict {
    let sft_think: Vec<f64> = runs
        .family(Preset::SftAnswerOnly)
        .iter()
        .map(|r| r.greedy.think_block_rate)
        .collect();
    let rl_think: Vec<f64> = runs
        .family(Preset::GrpoBase)
        .iter()
        .map(|r| r.greedy.think_block_rate)
        .collect();
    let sft_acc = med(&runs.greedy_accuracy(Preset::SftAnswerOnly));
    let rl_acc = med(&runs.greedy_accuracy(Preset::GrpoBase));
    let ok = sft_think.iter().all(|&x| x < 0.05) && rl_think.iter().all(|&x| x >= 0.95) && rl_acc >= sft_acc;
    verdict(
        ok,
        format!(
            "think-block rate sft [{}] rl [{}]; median accuracy rl {rl_acc:.3} vs sft {sft_acc:.3}",
            fmt_f(&sft_think),
            fmt_f(&rl_think)
        ),
    )
}

fn determinism() -> Verdict {
    let tmp = tempfile::TempDir::new().unwrap();
    let mut identical = Vec::new();
    for preset in [Preset::GrpoBase, Preset::Drgrpo, Preset::SftFull] {
        let cfg = config(preset, 0);
        let (a, b) = (
            tmp.path().join(format!("{preset}-a")),
            tmp.path().join(format!("{preset}-b")),
        );
        harness::run(&cfg, &a).unwrap();
        harness::run(&cfg, &b).unwrap();
        let names: &[&str] = match cfg.method {
            harness::Method::Grpo => &["steps.jsonl", "eval.json", "eval_sampled.json", "eval.csv"],
            harness::Method::Sft => &["mle.jsonl", "eval.json", "eval_sampled.json", "eval.csv"],
        };
        let same = names
            .iter()
            .all(|n| fs::read(a.join(n)).unwrap() == fs::read(b.join(n)).unwrap());
        identical.push(format!("{preset}={same}"));
    }
    verdict(
        identical.iter().all(|s| s.ends_with("true")),
        format!("byte-identical reruns: {}", fmt_list(&identical)),
    )
}

type Check = Box<dyn FnOnce(&mut Runs) -> Verdict>;

fn main() -> ExitCode {
    let start = Instant::now();
    let mut runs = Runs::default();
    let criteria: Vec<(&str, Check)> = vec![
        ("gradient fidelity", Box::new(|_| gradient_fidelity())),
        ("advantage invariants", Box::new(|_| advantage_invariants())),
        ("KL estimator", Box::new(|_| kl_estimator())),
        ("oracle equivalence", Box::new(|_| oracle_equivalence())),
        ("learning efficacy", Box::new(learning_efficacy)),
        ("init comparison", Box::new(init_comparison)),
        ("length-reward pathology", Box::new(length_pathology)),
        ("Dr.GRPO length bias", Box::new(drgrpo_bias)),
        ("semantic alignment", Box::new(semantic_alignment)),
        ("SFT vs RL", Box::new(sft_vs_rl)),
        ("determinism", Box::new(|_| determinism())),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let v = check(&mut runs);
        let tag = if v.passed { "PASS" } else { "FAIL" };
        println!("acceptance {:>2} {tag} {name}: {}", i + 1, v.detail);
        failed += (!v.passed) as usize;
    }
    println!(
        "acceptance: {} of 11 criteria passed in {:.1}s",
        11 - failed,
        start.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
