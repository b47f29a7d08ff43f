//! Executing a [`RunConfig`] into a run directory.
//!
//! Layout of a finished run:
//!
//! ```text
//! config.toml          resolved configuration
//! dataset.json         content hashes of both splits
//! steps.jsonl          one StepReport per line (GRPO runs)
//! mle.jsonl            per-step corpus NLL (SFT runs)
//! checkpoints/         step_NNNNNN.ckpt and final.ckpt
//! eval.json, eval.csv  greedy EvalReport
//! eval_sampled.json, eval_sampled.csv
//! manifest.json        written last; its presence marks a complete run
//! ```

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{InitKind, Method, RunConfig};
use crate::grpo::{train_loop, StepReport, TrainObserver, TrainState};
use crate::metrics::{evaluate, BigramModel, Decode, EvalConfig, EvalReport};
use crate::rewards::Judge;
use crate::taskgen::{Dataset, DatasetPair, TaskFamily};
use crate::toy_lm::{train_mle, PolicyParams, PolicyShape};
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const STEP_LOG: &str = "steps.jsonl";
pub const MLE_LOG: &str = "mle.jsonl";
pub const CONFIG_FILE: &str = "config.toml";
pub const GREEDY_EVAL: &str = "eval.json";
pub const SAMPLED_EVAL: &str = "eval_sampled.json";

/// Summary written last into a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub preset: String,
    pub seed: u64,
    pub config_hash: String,
    pub dataset_hash: String,
    pub steps: u64,
    pub greedy_accuracy: f64,
}

/// Data, initial policy and scorers derived from a configuration.
pub struct Prepared {
    pub family: TaskFamily,
    pub data: DatasetPair,
    pub init: PolicyParams,
    pub reference_lm: BigramModel,
}

/// SHA-256 over both split hashes.
pub fn dataset_hash(data: &DatasetPair) -> String {
    let mut h = Sha256::new();
    h.update(data.train.content_hash().as_bytes());
    h.update(b"\n");
    h.update(data.eval.content_hash().as_bytes());
    hex::encode(h.finalize())
}

pub fn policy_shape(cfg: &RunConfig, family: &TaskFamily) -> PolicyShape {
    PolicyShape::for_vocab(family.vocab(), family.prompt_count(), cfg.context_order)
}

/// The policy a run starts from.
pub fn initial_policy(cfg: &RunConfig, family: &TaskFamily, train: &Dataset) -> Result<PolicyParams> {
    let shape = policy_shape(cfg, family);
    let random = PolicyParams::random(&shape, cfg.init_scale, cfg.seed)?;
    match cfg.init {
        InitKind::Random => Ok(random),
        InitKind::FormatPretrained => {
            let demos = family.make_format_demonstrations(train, cfg.seed, cfg.init_max_think)?;
            Ok(train_mle(&random, &demos, &cfg.init_mle())?.params)
        }
    }
}

/// Bigram reference model fitted on the reference rationales of `train`.
pub fn reference_lm(family: &TaskFamily, train: &Dataset) -> Result<BigramModel> {
    BigramModel::fit(
        train.tasks.iter().map(|t| t.reference_rationale.as_slice()),
        &family.vocab().think_alphabet(),
        family.vocab().size(),
    )
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let family = cfg.family()?;
    let data = family.generate(cfg.data_seed, cfg.n_train, cfg.n_eval)?;
    let init = initial_policy(cfg, &family, &data.train)?;
    let reference_lm = reference_lm(&family, &data.train)?;
    Ok(Prepared {
        family,
        data,
        init,
        reference_lm,
    })
}

/// Greedy and (if configured) sampled reports on the eval split.
pub fn evaluate_policy(
    cfg: &RunConfig,
    policy: &PolicyParams,
    eval: &Dataset,
    reference_lm: &BigramModel,
) -> Result<(EvalReport, Option<EvalReport>)> {
    let judge = cfg.judge().unwrap_or_default();
    let judge: &dyn Judge = &judge;
    let greedy = evaluate(
        policy,
        eval,
        Some(judge),
        reference_lm,
        &EvalConfig {
            decode: Decode::Greedy,
            max_len: cfg.max_len,
        },
    )?;
    let sampled = cfg
        .sampled_decode()
        .map(|decode| {
            evaluate(
                policy,
                eval,
                Some(judge),
                reference_lm,
                &EvalConfig {
                    decode,
                    max_len: cfg.max_len,
                },
            )
        })
        .transpose()?;
    Ok((greedy, sampled))
}

/// In-memory result of a run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub config: RunConfig,
    pub dataset_hash: String,
    pub steps: Vec<StepReport>,
    pub mle_nll: Vec<f64>,
    pub greedy: EvalReport,
    pub sampled: Option<EvalReport>,
    pub state: TrainState,
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join("checkpoints").join(format!("step_{step:06}.ckpt"))
}

/// Streams step reports to `steps.jsonl` and checkpoints to disk.
struct DirObserver {
    dir: Option<PathBuf>,
    log: Option<BufWriter<File>>,
    reports: Vec<StepReport>,
}

impl TrainObserver for DirObserver {
    fn on_step(&mut self, report: &StepReport) -> Result<()> {
        if let Some(log) = &mut self.log {
            let line = serde_json::to_string(report)?;
            writeln!(log, "{line}").map_err(|e| Error::io(STEP_LOG, e))?;
        }
        self.reports.push(report.clone());
        Ok(())
    }

    fn on_checkpoint(&mut self, state: &TrainState) -> Result<()> {
        if let Some(dir) = &self.dir {
            write_file(&checkpoint_path(dir, state.step), &state.to_bytes())?;
        }
        Ok(())
    }
}

fn execute(cfg: &RunConfig, out: Option<&Path>) -> Result<RunOutcome> {
    let prepared = prepare(cfg)?;
    let dataset_hash = dataset_hash(&prepared.data);
    if let Some(dir) = out {
        create_dir(&dir.join("checkpoints"))?;
        let manifest = dir.join(MANIFEST);
        if manifest.exists() {
            fs::remove_file(&manifest).map_err(|e| Error::io(&manifest, e))?;
        }
        write_file(&dir.join(CONFIG_FILE), cfg.to_toml_string().as_bytes())?;
        write_json(
            &dir.join("dataset.json"),
            &serde_json::json!({
                "data_seed": cfg.data_seed,
                "train": prepared.data.train.content_hash(),
                "eval": prepared.data.eval.content_hash(),
                "combined": dataset_hash,
            }),
        )?;
    }

    let mut mle_nll = Vec::new();
    let mut steps = Vec::new();
    let state = match cfg.method {
        Method::Sft => {
            let demos = prepared
                .family
                .make_demonstrations(&prepared.data.train, cfg.sft_style)?;
            let outcome = train_mle(&prepared.init, &demos, &cfg.sft_mle())?;
            mle_nll = outcome.nll;
            if let Some(dir) = out {
                let mut text = String::new();
                for (step, nll) in mle_nll.iter().enumerate() {
                    text.push_str(&serde_json::to_string(
                        &serde_json::json!({ "step": step, "nll": nll }),
                    )?);
                    text.push('\n');
                }
                write_file(&dir.join(MLE_LOG), text.as_bytes())?;
            }
            TrainState {
                step: cfg.sft_steps,
                reference: prepared.init,
                policy: outcome.params,
            }
        }
        Method::Grpo => {
            let log = match out {
                Some(dir) => {
                    let path = dir.join(STEP_LOG);
                    Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
                }
                None => None,
            };
            let mut observer = DirObserver {
                dir: out.map(Path::to_path_buf),
                log,
                reports: Vec::new(),
            };
            let judge = cfg.judge();
            let state = train_loop(
                TrainState::new(prepared.init),
                &prepared.data.train,
                Some(&prepared.data.eval),
                &cfg.train_config(),
                judge.as_ref().map(|j| j as &dyn Judge),
                &cfg.reward_spec(),
                &mut observer,
            )?;
            if let Some(mut log) = observer.log.take() {
                log.flush().map_err(|e| Error::io(STEP_LOG, e))?;
            }
            steps = observer.reports;
            state
        }
    };

    let (greedy, sampled) = evaluate_policy(cfg, &state.policy, &prepared.data.eval, &prepared.reference_lm)?;
    if let Some(dir) = out {
        write_file(&dir.join("checkpoints").join("final.ckpt"), &state.to_bytes())?;
        write_json(&dir.join(GREEDY_EVAL), &greedy)?;
        write_file(&dir.join("eval.csv"), greedy.to_csv().as_bytes())?;
        if let Some(s) = &sampled {
            write_json(&dir.join(SAMPLED_EVAL), s)?;
            write_file(&dir.join("eval_sampled.csv"), s.to_csv().as_bytes())?;
        }
        write_json(
            &dir.join(MANIFEST),
            &Manifest {
                preset: cfg.preset.name().to_string(),
                seed: cfg.seed,
                config_hash: cfg.hash(),
                dataset_hash: dataset_hash.clone(),
                steps: state.step,
                greedy_accuracy: greedy.accuracy,
            },
        )?;
    }
    Ok(RunOutcome {
        config: cfg.clone(),
        dataset_hash,
        steps,
        mle_nll,
        greedy,
        sampled,
        state,
    })
}

/// Executes `cfg` and writes every artifact under `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<RunOutcome> {
    execute(cfg, Some(out))
}

/// Executes `cfg` without touching the filesystem.
pub fn run_in_memory(cfg: &RunConfig) -> Result<RunOutcome> {
    execute(cfg, None)
}

/// Re-evaluates a saved training state against the configuration's eval split.
pub fn evaluate_checkpoint(cfg: &RunConfig, checkpoint: &Path) -> Result<(EvalReport, Option<EvalReport>)> {
    let bytes = fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let state = TrainState::from_bytes(&bytes)?;
    let family = cfg.family()?;
    state.check_vocab(family.vocab())?;
    let data = family.generate(cfg.data_seed, cfg.n_train, cfg.n_eval)?;
    let lm = reference_lm(&family, &data.train)?;
    evaluate_policy(cfg, &state.policy, &data.eval, &lm)
}
