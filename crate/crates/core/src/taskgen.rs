//! Synthetic multiple-choice tasks with gradable rationales.
//!
//! Each task has a question class and a short run of observation tokens that
//! encodes the gold option. A grounded rationale cites the evidence tokens of
//! the gold option and none of the evidence tokens of the other options.
//! Correctness is decidable from a four-token rationale, so longer reasoning
//! never carries extra information.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::rng::{self, Domain};
use crate::toy_lm::{Letter, TokenId, Vocab, VocabLayout, OBSERVATION_KINDS};
use crate::{Error, Result};

/// One synthetic question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub id: u64,
    pub question_class: usize,
    pub observation_tokens: Vec<TokenId>,
    pub options: [Letter; 4],
    pub gold: Letter,
    pub evidence_set: Vec<TokenId>,
    pub contradiction_set: Vec<TokenId>,
    pub reference_rationale: Vec<TokenId>,
}

/// Index of the observation token that leads a task's observation run.
pub fn observation_pattern(question_class: usize, gold: Letter) -> usize {
    (gold.index() + question_class) % OBSERVATION_KINDS
}

impl TaskSpec {
    /// Conditioning bucket the policy sees: question class and observation
    /// pattern. Injective in the gold letter for a fixed class.
    pub fn prompt_id(&self) -> usize {
        self.question_class * OBSERVATION_KINDS + observation_pattern(self.question_class, self.gold)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub seed: u64,
    pub split: Split,
    pub tasks: Vec<TaskSpec>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for task in &self.tasks {
            serde_json::to_writer(&mut out, task)?;
            out.write_all(b"\n").map_err(|e| Error::io("<dataset stream>", e))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_jsonl<R: BufRead>(input: R, seed: u64, split: Split) -> Result<Self> {
        let mut tasks = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line.map_err(|e| Error::io("<dataset stream>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let task: TaskSpec =
                serde_json::from_str(&line).map_err(|e| Error::Format(format!("dataset line {}: {e}", i + 1)))?;
            tasks.push(task);
        }
        Ok(Self { seed, split, tasks })
    }

    /// SHA-256 of the JSONL export, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl()))
    }

    pub fn letter_shares(&self) -> [f64; 4] {
        let mut counts = [0usize; 4];
        for t in &self.tasks {
            counts[t.gold.index()] += 1;
        }
        let n = self.tasks.len().max(1) as f64;
        counts.map(|c| c as f64 / n)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPair {
    pub train: Dataset,
    pub eval: Dataset,
}

/// Vocabulary and prompt shape shared by a family of tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskFamily {
    vocab: Vocab,
    observation_len: usize,
}

impl TaskFamily {
    pub const DEFAULT_OBSERVATION_LEN: usize = 2;

    pub fn new(layout: VocabLayout, observation_len: usize) -> Result<Self> {
        if layout.classes < 2 {
            return Err(Error::config("at least two question classes are required"));
        }
        if observation_len == 0 {
            return Err(Error::config("observation_len must be at least 1"));
        }
        Ok(Self {
            vocab: Vocab::new(layout)?,
            observation_len,
        })
    }

    pub fn with_classes(classes: usize) -> Result<Self> {
        Self::new(
            VocabLayout {
                classes,
                ..VocabLayout::default()
            },
            Self::DEFAULT_OBSERVATION_LEN,
        )
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn classes(&self) -> usize {
        self.vocab.layout().classes
    }

    pub fn prompt_count(&self) -> usize {
        self.classes() * OBSERVATION_KINDS
    }

    pub fn observation_len(&self) -> usize {
        self.observation_len
    }

    pub fn prompt_len(&self) -> usize {
        self.observation_len + 1
    }

    fn make_task(&self, id: u64, class: usize, gold: Letter) -> TaskSpec {
        let v = &self.vocab;
        let layout = v.layout();
        let pattern = observation_pattern(class, gold);
        let observation_tokens = (0..self.observation_len)
            .map(|j| v.observation((pattern + j) % OBSERVATION_KINDS))
            .collect();
        let evidence_set = (0..layout.evidence_per_letter).map(|j| v.evidence(gold, j)).collect();
        let contradiction_set = Letter::ALL
            .iter()
            .filter(|&&l| l != gold)
            .flat_map(|&l| (0..layout.evidence_per_letter).map(move |j| v.evidence(l, j)))
            .collect();
        let e = layout.evidence_per_letter;
        let f = layout.fillers;
        let reference_rationale = vec![
            v.evidence(gold, 0),
            v.filler(class % f),
            v.evidence(gold, 1 % e),
            v.filler((class + 1) % f),
        ];
        TaskSpec {
            id,
            question_class: class,
            observation_tokens,
            options: Letter::ALL,
            gold,
            evidence_set,
            contradiction_set,
            reference_rationale,
        }
    }

    fn make_split(&self, seed: u64, split: Split, first_id: u64, n: usize) -> Dataset {
        let split_key = match split {
            Split::Train => 0,
            Split::Eval => 1,
        };
        let mut rng = rng::stream(seed, Domain::Dataset, split_key, 0);
        let mut golds: Vec<Letter> = (0..n).map(|i| Letter::ALL[i % 4]).collect();
        golds.shuffle(&mut rng);
        let tasks = golds
            .into_iter()
            .enumerate()
            .map(|(i, gold)| {
                let class = rng.gen_range(0..self.classes());
                self.make_task(first_id + i as u64, class, gold)
            })
            .collect();
        Dataset { seed, split, tasks }
    }

    /// Deterministic train and eval splits with disjoint task ids and
    /// balanced gold letters.
    pub fn generate(&self, seed: u64, n_train: usize, n_eval: usize) -> Result<DatasetPair> {
        if n_train < 4 || n_eval < 4 {
            return Err(Error::config(format!(
                "dataset splits need at least 4 tasks each (got train={n_train}, eval={n_eval})"
            )));
        }
        Ok(DatasetPair {
            train: self.make_split(seed, Split::Train, 0, n_train),
            eval: self.make_split(seed, Split::Eval, n_train as u64, n_eval),
        })
    }

    /// Prompt tokens: the observation run followed by the class marker.
    pub fn render_prompt(&self, task: &TaskSpec) -> Vec<TokenId> {
        let mut out = task.observation_tokens.clone();
        out.push(self.vocab.class_marker(task.question_class));
        out
    }

    /// One demonstration per task in the requested style.
    pub fn make_demonstrations(&self, dataset: &Dataset, style: DemoStyle) -> Result<Vec<Demonstration>> {
        if dataset.is_empty() {
            return Err(Error::input("cannot build demonstrations for an empty dataset"));
        }
        if style == DemoStyle::FormatOnly {
            return Err(Error::config(
                "format-only demonstrations are built by make_format_demonstrations",
            ));
        }
        Ok(dataset
            .tasks
            .iter()
            .map(|task| {
                let target_tokens = match style {
                    DemoStyle::Reasoned => reasoned_response(task),
                    _ => answer_block(task.gold, true),
                };
                Demonstration {
                    task_id: task.id,
                    prompt: task.prompt_id(),
                    target_tokens,
                    style,
                }
            })
            .collect())
    }

    /// Demonstrations with correct tag structure but uninformative content:
    /// the think block holds `1..=max_think` random content tokens and the
    /// answer letter is drawn uniformly. Used to teach the response format
    /// without teaching the task.
    pub fn make_format_demonstrations(
        &self,
        dataset: &Dataset,
        seed: u64,
        max_think: usize,
    ) -> Result<Vec<Demonstration>> {
        if dataset.is_empty() {
            return Err(Error::input("cannot build demonstrations for an empty dataset"));
        }
        if max_think == 0 {
            return Err(Error::config("format demonstrations need max_think >= 1"));
        }
        let content = self.vocab.content_tokens();
        Ok(dataset
            .tasks
            .iter()
            .map(|task| {
                let mut rng = rng::stream(seed, Domain::Demonstration, task.id, 0);
                let len = rng.gen_range(1..=max_think);
                let mut target_tokens = vec![Vocab::THINK_OPEN];
                target_tokens.extend((0..len).map(|_| content[rng.gen_range(0..content.len())]));
                target_tokens.push(Vocab::THINK_CLOSE);
                let letter = Letter::ALL[rng.gen_range(0..4)];
                target_tokens.extend(answer_block(letter, true));
                Demonstration {
                    task_id: task.id,
                    prompt: task.prompt_id(),
                    target_tokens,
                    style: DemoStyle::FormatOnly,
                }
            })
            .collect())
    }
}

fn answer_block(letter: Letter, eos: bool) -> Vec<TokenId> {
    let mut out = vec![Vocab::ANSWER_OPEN, Vocab::letter(letter), Vocab::ANSWER_CLOSE];
    if eos {
        out.push(Vocab::EOS);
    }
    out
}

/// `<think> rationale </think> <answer> gold </answer> <eos>`.
pub fn reasoned_response(task: &TaskSpec) -> Vec<TokenId> {
    let mut out = vec![Vocab::THINK_OPEN];
    out.extend_from_slice(&task.reference_rationale);
    out.push(Vocab::THINK_CLOSE);
    out.extend(answer_block(task.gold, true));
    out
}

/// Convenience wrapper over the default task family.
pub fn generate_dataset(seed: u64, n_train: usize, n_eval: usize, classes: usize) -> Result<DatasetPair> {
    let evidence = VocabLayout::default().evidence_per_letter;
    let fillers = VocabLayout::default().fillers;
    if classes > Vocab::class_capacity(evidence, fillers) {
        return Err(Error::config(format!(
            "{classes} classes exceed the vocabulary capacity of {}",
            Vocab::class_capacity(evidence, fillers)
        )));
    }
    TaskFamily::with_classes(classes)?.generate(seed, n_train, n_eval)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoStyle {
    /// Grounded rationale then the gold answer.
    Reasoned,
    /// Gold answer block with no think block.
    AnswerOnly,
    /// Well-formed structure with random rationale and random letter.
    FormatOnly,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Demonstration {
    pub task_id: u64,
    pub prompt: usize,
    pub target_tokens: Vec<TokenId>,
    pub style: DemoStyle,
}
