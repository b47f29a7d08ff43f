use serde::{Deserialize, Serialize};

use super::advantage::{compute_advantages, AdvantageMode};
use super::surrogate::{surrogate_objective, Aggregation, Group, ObjectiveConfig};
use crate::metrics::{self, Decode};
use crate::rewards::{self, Judge, RewardBreakdown, RewardSpec};
use crate::taskgen::Dataset;
use crate::toy_lm::{self, sample_response, PolicyParams, Rollout, SamplerConfig, StreamId, Vocab};
use crate::{Error, Result};

/// Optimization settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub group_size: usize,
    pub beta: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub steps: u64,
    pub temperature: f64,
    pub max_len: usize,
    pub advantage_mode: AdvantageMode,
    pub aggregation: Aggregation,
    /// Permits GRPO with token sums or Dr.GRPO with token means.
    pub allow_mode_mismatch: bool,
    /// Replace the reference policy with the current one every N steps.
    pub ref_refresh_every: Option<u64>,
    pub checkpoint_every: Option<u64>,
    /// Greedy eval-split accuracy is logged every N steps.
    pub eval_every: Option<u64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            beta: 0.04,
            epsilon: 0.2,
            lr: 0.05,
            steps: 1500,
            temperature: 1.0,
            max_len: 64,
            advantage_mode: AdvantageMode::Grpo,
            aggregation: Aggregation::TokenMean,
            allow_mode_mismatch: false,
            ref_refresh_every: None,
            checkpoint_every: Some(100),
            eval_every: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::config("group_size must be at least 2"));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::config("epsilon must lie in (0, 1)"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::config("beta must be nonnegative"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        self.sampler().validate()?;
        let coupled = matches!(
            (self.advantage_mode, self.aggregation),
            (AdvantageMode::Grpo, Aggregation::TokenMean) | (AdvantageMode::DrGrpo, Aggregation::TokenSum)
        );
        if !coupled && !self.allow_mode_mismatch {
            return Err(Error::config(format!(
                "{:?} advantages with {:?} aggregation requires allow_mode_mismatch",
                self.advantage_mode, self.aggregation
            )));
        }
        for (name, v) in [
            ("ref_refresh_every", self.ref_refresh_every),
            ("checkpoint_every", self.checkpoint_every),
            ("eval_every", self.eval_every),
        ] {
            if v == Some(0) {
                return Err(Error::config(format!("{name} must be positive when set")));
            }
        }
        Ok(())
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            temperature: self.temperature,
            max_len: self.max_len,
            seed: self.seed,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            beta: self.beta,
            epsilon: self.epsilon,
            temperature: self.temperature,
            aggregation: self.aggregation,
        }
    }
}

/// Telemetry for one optimization step. Serialized field order is stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub task_id: u64,
    pub objective: f64,
    pub mean_reward: f64,
    pub mean_kl: f64,
    pub mean_len: f64,
    pub mean_think_len: f64,
    pub grad_norm: f64,
    pub format_mean: f64,
    pub answer_mean: f64,
    pub semantic_mean: f64,
    pub ecr_mean: f64,
    pub cwr_mean: f64,
    /// Mean length of the rollouts with a wrong or missing answer.
    pub incorrect_len_mean: Option<f64>,
    pub eval_accuracy: Option<f64>,
    pub rollouts: Vec<RolloutLog>,
}

/// Per-response record inside a [`StepReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLog {
    pub len: usize,
    pub think_len: usize,
    pub advantage: f64,
    pub reward: RewardBreakdown,
}

/// Everything needed to continue a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Index of the next step to run.
    pub step: u64,
    pub policy: PolicyParams,
    pub reference: PolicyParams,
}

impl TrainState {
    /// Fresh state whose reference is a frozen copy of `init`.
    pub fn new(init: PolicyParams) -> Self {
        Self {
            step: 0,
            reference: init.snapshot(),
            policy: init,
        }
    }
}

/// Draws and scores the group for `task` at `step`.
pub fn sample_group(
    policy: &PolicyParams,
    task: &crate::taskgen::TaskSpec,
    cfg: &TrainConfig,
    judge: Option<&dyn Judge>,
    reward_spec: &RewardSpec,
    step: u64,
) -> Result<Group> {
    let sampler = cfg.sampler();
    let rollouts: Vec<Rollout> = (0..cfg.group_size as u64)
        .map(|index| {
            sample_response(
                policy,
                task.prompt_id(),
                task.id,
                &sampler,
                Some(Vocab::EOS),
                StreamId { step, index },
            )
        })
        .collect();
    let breakdowns = rollouts
        .iter()
        .map(|r| rewards::total_reward(&r.tokens, task, reward_spec, judge))
        .collect::<Result<Vec<RewardBreakdown>>>()?;
    let rewards: Vec<f64> = breakdowns.iter().map(|b| b.total).collect();
    let advantages = compute_advantages(&rewards, cfg.advantage_mode)?;
    Ok(Group {
        task_id: task.id,
        rollouts,
        breakdowns,
        rewards,
        advantages,
    })
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// One GRPO update on the task chosen round-robin by `step`.
///
/// The sampling policy is a snapshot of `params`; the update is one plain
/// gradient-ascent step of size `cfg.lr` on the surrogate.
pub fn train_step(
    params: &PolicyParams,
    reference: &PolicyParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    judge: Option<&dyn Judge>,
    reward_spec: &RewardSpec,
    step: u64,
) -> Result<(PolicyParams, StepReport)> {
    if dataset.is_empty() {
        return Err(Error::input("training dataset is empty"));
    }
    let task = &dataset.tasks[(step % dataset.len() as u64) as usize];
    let old = params.snapshot();
    let group = sample_group(&old, task, cfg, judge, reward_spec, step)?;
    let out = surrogate_objective(&group, &old, reference, &cfg.objective())?;
    let mut next = old;
    next.apply(&out.grad, cfg.lr);

    let b = &group.breakdowns;
    let incorrect: Vec<f64> = group
        .rollouts
        .iter()
        .zip(b)
        .filter(|(_, b)| b.answer == 0)
        .map(|(r, _)| r.len() as f64)
        .collect();
    let report = StepReport {
        step,
        task_id: task.id,
        objective: out.value,
        mean_reward: mean(group.rewards.iter().copied()),
        mean_kl: out.mean_kl,
        mean_len: mean(group.rollouts.iter().map(|r| r.len() as f64)),
        mean_think_len: mean(
            group
                .rollouts
                .iter()
                .map(|r| metrics::think_token_length(&r.tokens) as f64),
        ),
        grad_norm: out.grad.norm(),
        format_mean: mean(b.iter().map(|x| x.format as f64)),
        answer_mean: mean(b.iter().map(|x| x.answer as f64)),
        semantic_mean: mean(b.iter().map(|x| x.semantic as f64)),
        ecr_mean: mean(b.iter().map(|x| x.ecr)),
        cwr_mean: mean(b.iter().map(|x| x.cwr)),
        incorrect_len_mean: (!incorrect.is_empty()).then(|| mean(incorrect.into_iter())),
        eval_accuracy: None,
        rollouts: group
            .rollouts
            .iter()
            .zip(b)
            .zip(&group.advantages)
            .map(|((r, &reward), &advantage)| RolloutLog {
                len: r.len(),
                think_len: metrics::think_token_length(&r.tokens),
                advantage,
                reward,
            })
            .collect(),
    };
    Ok((next, report))
}

/// Receives telemetry and checkpoints from [`train_loop`].
pub trait TrainObserver {
    fn on_step(&mut self, report: &StepReport) -> Result<()>;

    fn on_checkpoint(&mut self, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for Vec<StepReport> {
    fn on_step(&mut self, report: &StepReport) -> Result<()> {
        self.push(report.clone());
        Ok(())
    }
}

/// Runs steps `state.step..cfg.steps`.
///
/// The reference policy is refreshed from the current policy at the start of
/// every step that is a positive multiple of `ref_refresh_every`.
pub fn train_loop(
    mut state: TrainState,
    train: &Dataset,
    eval: Option<&Dataset>,
    cfg: &TrainConfig,
    judge: Option<&dyn Judge>,
    reward_spec: &RewardSpec,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    cfg.validate()?;
    reward_spec.validate()?;
    state.policy.check_compatible(&state.reference, "reference policy")?;
    while state.step < cfg.steps {
        let step = state.step;
        if let Some(every) = cfg.ref_refresh_every {
            if step > 0 && step.is_multiple_of(every) {
                state.reference = state.policy.snapshot();
            }
        }
        let (next, mut report) = train_step(&state.policy, &state.reference, train, cfg, judge, reward_spec, step)?;
        state.policy = next;
        state.step = step + 1;
        if let (Some(every), Some(eval)) = (cfg.eval_every, eval) {
            if state.step.is_multiple_of(every) {
                report.eval_accuracy = Some(metrics::accuracy(&state.policy, eval, &Decode::Greedy, cfg.max_len)?);
            }
        }
        observer.on_step(&report)?;
        if let Some(every) = cfg.checkpoint_every {
            if state.step.is_multiple_of(every) {
                observer.on_checkpoint(&state)?;
            }
        }
    }
    Ok(state)
}

const STATE_MAGIC: &[u8; 8] = b"GRPOCKPT";
const STATE_VERSION: u32 = 1;

impl TrainState {
    /// `GRPOCKPT`, version, next step, then the policy and reference tables.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        toy_lm::encode_params(&self.policy, &mut out);
        toy_lm::encode_params(&self.reference, &mut out);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut input = bytes;
        if toy_lm::take(&mut input, 8)? != STATE_MAGIC {
            return Err(Error::Format("not a training checkpoint".into()));
        }
        let version = toy_lm::read_u32(&mut input)?;
        if version != STATE_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let step = toy_lm::read_u64(&mut input)?;
        let policy = toy_lm::decode_params(&mut input)?;
        let reference = toy_lm::decode_params(&mut input)?;
        if !input.is_empty() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        policy.check_compatible(&reference, "checkpoint reference")?;
        Ok(Self {
            step,
            policy,
            reference,
        })
    }

    /// Fails unless the checkpoint was written for `vocab`.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        if self.policy.vocab_hash() != vocab.fingerprint() {
            return Err(Error::config("checkpoint was written for a different vocabulary"));
        }
        Ok(())
    }
}
