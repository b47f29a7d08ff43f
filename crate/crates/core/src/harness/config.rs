//! Run configuration and experiment presets.
//!
//! A configuration file is flat TOML. Keys not given in the file are taken
//! from the preset named by `preset` (default `grpo_base`); unknown keys are
//! rejected.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::grpo::{AdvantageMode, Aggregation, TrainConfig};
use crate::metrics::Decode;
use crate::rewards::{RewardSpec, SyntheticJudge};
use crate::taskgen::{DemoStyle, TaskFamily};
use crate::toy_lm::{MleConfig, MleMode, VocabLayout};
use crate::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// GRPO from a randomly initialized policy.
    ScratchVsInit,
    /// GRPO with format and answer rewards from the format-pretrained policy.
    GrpoBase,
    SemanticAlignment,
    /// Semantic alignment plus the unconditional length reward.
    Ecr,
    /// Semantic alignment plus the correctness-gated length reward.
    Cwr,
    Drgrpo,
    /// Maximum likelihood on reasoned demonstrations.
    SftFull,
    /// Maximum likelihood on answer-only demonstrations.
    SftAnswerOnly,
}

impl Preset {
    pub const ALL: [Preset; 8] = [
        Preset::ScratchVsInit,
        Preset::GrpoBase,
        Preset::SemanticAlignment,
        Preset::Ecr,
        Preset::Cwr,
        Preset::Drgrpo,
        Preset::SftFull,
        Preset::SftAnswerOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ScratchVsInit => "scratch_vs_init",
            Preset::GrpoBase => "grpo_base",
            Preset::SemanticAlignment => "semantic_alignment",
            Preset::Ecr => "ecr",
            Preset::Cwr => "cwr",
            Preset::Drgrpo => "drgrpo",
            Preset::SftFull => "sft_full",
            Preset::SftAnswerOnly => "sft_answer_only",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown preset `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Small uniform random logits.
    Random,
    /// Random logits followed by maximum likelihood on format demonstrations.
    FormatPretrained,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Grpo,
    Sft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    None,
    Synthetic,
}

/// Everything a run depends on. A run is a pure function of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub preset: Preset,
    pub seed: u64,

    pub data_seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub classes: usize,
    pub observation_len: usize,
    pub evidence_per_letter: usize,
    pub fillers: usize,

    pub context_order: usize,
    pub init: InitKind,
    pub init_scale: f64,
    pub init_mle_steps: u64,
    pub init_mle_lr: f64,
    pub init_max_think: usize,

    pub method: Method,
    pub group_size: usize,
    pub beta: f64,
    pub epsilon: f64,
    pub lr: f64,
    pub steps: u64,
    /// Passes over the train split; 0 leaves `steps` as the only bound.
    pub epochs: u64,
    pub temperature: f64,
    pub max_len: usize,
    pub advantage_mode: AdvantageMode,
    pub aggregation: Aggregation,
    pub allow_mode_mismatch: bool,
    /// 0 keeps the reference fixed at the initial policy.
    pub ref_refresh_every: u64,
    /// 0 disables periodic checkpoints.
    pub checkpoint_every: u64,
    /// 0 disables periodic greedy accuracy.
    pub eval_every: u64,

    pub sft_style: DemoStyle,
    pub sft_lr: f64,
    pub sft_steps: u64,

    pub w_format: f64,
    pub w_answer: f64,
    pub w_semantic: f64,
    pub w_ecr: f64,
    pub w_cwr: f64,
    pub ecr_lambda: f64,
    pub ecr_target_len: usize,
    pub judge: JudgeKind,

    /// Sampled responses per eval task for the sampled report; 0 skips it.
    pub eval_samples: usize,
    pub eval_seed: u64,
}

fn nonzero(x: u64) -> Option<u64> {
    (x != 0).then_some(x)
}

impl RunConfig {
    /// Shared defaults of every preset.
    fn base() -> Self {
        let train = TrainConfig::default();
        let reward = RewardSpec::default();
        Self {
            schema_version: SCHEMA_VERSION,
            preset: Preset::GrpoBase,
            seed: 0,
            data_seed: 7,
            n_train: 1000,
            n_eval: 700,
            classes: 8,
            observation_len: TaskFamily::DEFAULT_OBSERVATION_LEN,
            evidence_per_letter: VocabLayout::default().evidence_per_letter,
            fillers: VocabLayout::default().fillers,
            context_order: 1,
            init: InitKind::FormatPretrained,
            init_scale: 0.1,
            init_mle_steps: 300,
            init_mle_lr: 200.0,
            init_max_think: 6,
            method: Method::Grpo,
            group_size: train.group_size,
            beta: train.beta,
            epsilon: train.epsilon,
            lr: 10.0,
            steps: 2000,
            epochs: 0,
            temperature: train.temperature,
            max_len: 12,
            advantage_mode: AdvantageMode::Grpo,
            aggregation: Aggregation::TokenMean,
            allow_mode_mismatch: false,
            ref_refresh_every: 0,
            checkpoint_every: 100,
            eval_every: 10,
            sft_style: DemoStyle::Reasoned,
            sft_lr: 200.0,
            sft_steps: 300,
            w_format: reward.w_format,
            w_answer: reward.w_answer,
            w_semantic: 0.0,
            w_ecr: 0.0,
            w_cwr: 0.0,
            ecr_lambda: reward.ecr_lambda,
            ecr_target_len: 8,
            judge: JudgeKind::Synthetic,
            eval_samples: 4,
            eval_seed: 1234,
        }
    }

    pub fn preset(preset: Preset) -> Self {
        let mut c = Self::base();
        c.preset = preset;
        match preset {
            Preset::GrpoBase => {}
            Preset::ScratchVsInit => c.init = InitKind::Random,
            Preset::SemanticAlignment => c.w_semantic = 1.0,
            Preset::Ecr => {
                c.w_semantic = 1.0;
                c.w_ecr = 8.0;
            }
            Preset::Cwr => {
                c.w_semantic = 1.0;
                c.w_cwr = 8.0;
            }
            Preset::Drgrpo => {
                c.advantage_mode = AdvantageMode::DrGrpo;
                c.aggregation = Aggregation::TokenSum;
                // Token sums make the raw gradient several times larger than
                // token means at these response lengths.
                c.lr = 4.0;
            }
            Preset::SftFull => {
                c.method = Method::Sft;
                c.sft_style = DemoStyle::Reasoned;
            }
            Preset::SftAnswerOnly => {
                c.method = Method::Sft;
                c.sft_style = DemoStyle::AnswerOnly;
            }
        }
        c
    }

    /// Parses a possibly partial TOML document on top of its preset.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::resolve(Some(text), None, &[])
    }

    /// Layers, lowest first: the preset's values, the TOML document, the
    /// explicit preset choice, then `key=value` overrides whose values are
    /// TOML literals (bare words are read as strings).
    pub fn resolve(text: Option<&str>, preset: Option<Preset>, overrides: &[(String, String)]) -> Result<Self> {
        let mut user: toml::Table = match text {
            Some(t) => toml::from_str(t).map_err(|e| Error::config(format!("invalid TOML: {e}")))?,
            None => toml::Table::new(),
        };
        if let Some(p) = preset {
            user.insert("preset".into(), toml::Value::String(p.name().into()));
        }
        for (key, raw) in overrides {
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.clone()));
            user.insert(key.clone(), value);
        }
        let preset = match user.get("preset") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::config("`preset` must be a string")),
            None => Preset::GrpoBase,
        };
        let mut merged = toml::Table::try_from(Self::preset(preset))
            .map_err(|e| Error::config(format!("cannot encode preset: {e}")))?;
        for (k, v) in user {
            merged.insert(k, v);
        }
        let cfg: RunConfig = merged.try_into().map_err(|e| Error::config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config always encodes")
    }

    /// SHA-256 of the canonical TOML encoding, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.context_order > 3 {
            return Err(Error::config("context_order above 3 is not supported"));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::config("init_scale must be nonnegative"));
        }
        if self.init == InitKind::FormatPretrained && (self.init_mle_steps == 0 || self.init_max_think == 0) {
            return Err(Error::config(
                "format pretraining needs init_mle_steps and init_max_think",
            ));
        }
        if self.judge == JudgeKind::None && self.w_semantic > 0.0 {
            return Err(Error::config("w_semantic > 0 requires judge = \"synthetic\""));
        }
        let _ = self.family()?;
        self.train_config().validate()?;
        self.reward_spec().validate()?;
        if self.method == Method::Sft && self.sft_style == DemoStyle::FormatOnly {
            return Err(Error::config("sft_style must be reasoned or answer_only"));
        }
        if self.method == Method::Sft && (self.sft_lr.is_nan() || self.sft_lr <= 0.0) {
            return Err(Error::config("sft_lr must be positive"));
        }
        Ok(())
    }

    pub fn family(&self) -> Result<TaskFamily> {
        TaskFamily::new(
            VocabLayout {
                classes: self.classes,
                evidence_per_letter: self.evidence_per_letter,
                fillers: self.fillers,
            },
            self.observation_len,
        )
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            group_size: self.group_size,
            beta: self.beta,
            epsilon: self.epsilon,
            lr: self.lr,
            steps: self.effective_steps(),
            temperature: self.temperature,
            max_len: self.max_len,
            advantage_mode: self.advantage_mode,
            aggregation: self.aggregation,
            allow_mode_mismatch: self.allow_mode_mismatch,
            ref_refresh_every: nonzero(self.ref_refresh_every),
            checkpoint_every: nonzero(self.checkpoint_every),
            eval_every: nonzero(self.eval_every),
            seed: self.seed,
        }
    }

    /// Optimization steps after applying the epoch bound (one task per step).
    pub fn effective_steps(&self) -> u64 {
        if self.epochs == 0 {
            self.steps
        } else {
            self.steps.min(self.epochs.saturating_mul(self.n_train as u64))
        }
    }

    pub fn reward_spec(&self) -> RewardSpec {
        RewardSpec {
            w_format: self.w_format,
            w_answer: self.w_answer,
            w_semantic: self.w_semantic,
            w_ecr: self.w_ecr,
            w_cwr: self.w_cwr,
            ecr_lambda: self.ecr_lambda,
            ecr_target_len: self.ecr_target_len,
        }
    }

    pub fn judge(&self) -> Option<SyntheticJudge> {
        match self.judge {
            JudgeKind::None => None,
            JudgeKind::Synthetic => Some(SyntheticJudge::for_target_len(self.ecr_target_len)),
        }
    }

    pub fn init_mle(&self) -> MleConfig {
        MleConfig {
            lr: self.init_mle_lr,
            steps: self.init_mle_steps,
            mode: MleMode::FullBatch,
        }
    }

    pub fn sft_mle(&self) -> MleConfig {
        MleConfig {
            lr: self.sft_lr,
            steps: self.sft_steps,
            mode: MleMode::FullBatch,
        }
    }

    pub fn sampled_decode(&self) -> Option<Decode> {
        (self.eval_samples > 0).then_some(Decode::Sampled {
            samples: self.eval_samples,
            seed: self.eval_seed,
            temperature: self.temperature,
        })
    }
}
