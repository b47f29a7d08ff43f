//! Side-by-side comparison of finished runs.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::run::{Manifest, CONFIG_FILE, GREEDY_EVAL, MANIFEST, SAMPLED_EVAL, STEP_LOG};
use crate::grpo::StepReport;
use crate::metrics::{median, EvalReport};
use crate::{Error, Result};

/// Everything a finished run directory holds that comparisons need.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub config: RunConfig,
    pub greedy: EvalReport,
    pub sampled: Option<EvalReport>,
    /// Empty for runs without a step log.
    pub steps: Vec<StepReport>,
}

fn incomplete(dir: &Path, reason: impl Into<String>) -> Error {
    Error::IncompleteRun {
        path: dir.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T> {
    let path = dir.join(name);
    let text = fs::read_to_string(&path).map_err(|e| incomplete(dir, format!("cannot read {name}: {e}")))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_step_log(path: &Path) -> Result<Vec<StepReport>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

impl RunSummary {
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.join(MANIFEST).is_file() {
            return Err(incomplete(dir, "no manifest.json (run did not finish)"));
        }
        let manifest: Manifest = read_json(dir, MANIFEST)?;
        let config_text = fs::read_to_string(dir.join(CONFIG_FILE))
            .map_err(|e| incomplete(dir, format!("cannot read {CONFIG_FILE}: {e}")))?;
        let config = RunConfig::from_toml_str(&config_text)?;
        let greedy = read_json(dir, GREEDY_EVAL)?;
        let sampled = if dir.join(SAMPLED_EVAL).is_file() {
            Some(read_json(dir, SAMPLED_EVAL)?)
        } else {
            None
        };
        let log = dir.join(STEP_LOG);
        let steps = if log.is_file() {
            read_step_log(&log)?
        } else {
            Vec::new()
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            config,
            greedy,
            sampled,
            steps,
        })
    }

    /// Named metrics: greedy report fields, then sampled ones prefixed
    /// `sampled.`.
    pub fn metrics(&self) -> Vec<(String, Option<f64>)> {
        let mut out: Vec<(String, Option<f64>)> = self
            .greedy
            .metric_values()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        if let Some(s) = &self.sampled {
            out.extend(s.metric_values().into_iter().map(|(k, v)| (format!("sampled.{k}"), v)));
        }
        out
    }

    /// First logged step (1-based count of completed steps) whose periodic
    /// eval accuracy reaches `threshold`.
    pub fn steps_to_accuracy(&self, threshold: f64) -> Option<u64> {
        steps_to_accuracy(&self.steps, threshold)
    }
}

pub fn steps_to_accuracy(steps: &[StepReport], threshold: f64) -> Option<u64> {
    steps
        .iter()
        .find(|r| r.eval_accuracy.is_some_and(|a| a >= threshold))
        .map(|r| r.step + 1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub a: Option<f64>,
    pub b: Option<f64>,
    /// `b - a` when both are present.
    pub delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub run_a: PathBuf,
    pub run_b: PathBuf,
    pub rows: Vec<MetricDelta>,
}

fn check_hashes(a: &RunSummary, b: &RunSummary) -> Result<()> {
    if a.manifest.dataset_hash != b.manifest.dataset_hash {
        return Err(Error::input(format!(
            "dataset hashes differ: {} has {}, {} has {}",
            a.dir.display(),
            a.manifest.dataset_hash,
            b.dir.display(),
            b.manifest.dataset_hash
        )));
    }
    Ok(())
}

fn lookup(metrics: &[(String, Option<f64>)], name: &str) -> Option<f64> {
    metrics.iter().find(|(k, _)| k == name).and_then(|(_, v)| *v)
}

pub fn compare_summaries(a: &RunSummary, b: &RunSummary) -> Result<Comparison> {
    check_hashes(a, b)?;
    let mb = b.metrics();
    let rows = a
        .metrics()
        .into_iter()
        .filter(|(k, _)| mb.iter().any(|(kb, _)| kb == k))
        .map(|(metric, va)| {
            let vb = lookup(&mb, &metric);
            MetricDelta {
                delta: va.zip(vb).map(|(x, y)| y - x),
                a: va,
                b: vb,
                metric,
            }
        })
        .collect();
    Ok(Comparison {
        run_a: a.dir.clone(),
        run_b: b.dir.clone(),
        rows,
    })
}

/// Paired table of two finished runs. Refuses runs built on different data.
pub fn compare(run_a: &Path, run_b: &Path) -> Result<Comparison> {
    compare_summaries(&RunSummary::load(run_a)?, &RunSummary::load(run_b)?)
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or("-".to_string(), |v| format!("{v:.4}"))
}

impl Comparison {
    pub fn to_text(&self) -> String {
        let mut out = format!("a: {}\nb: {}\n", self.run_a.display(), self.run_b.display());
        let _ = writeln!(out, "{:<34} {:>12} {:>12} {:>12}", "metric", "a", "b", "b - a");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<34} {:>12} {:>12} {:>12}",
                r.metric,
                fmt_opt(r.a),
                fmt_opt(r.b),
                fmt_opt(r.delta)
            );
        }
        out
    }
}

/// Median values and per-seed win counts for one metric across paired runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyRow {
    pub metric: String,
    pub median_a: Option<f64>,
    pub median_b: Option<f64>,
    pub median_delta: Option<f64>,
    /// Pairs where `b > a`.
    pub wins_b: usize,
    /// Pairs where `a > b`.
    pub wins_a: usize,
    pub ties: usize,
    /// Pairs where the metric is missing on either side.
    pub missing: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyComparison {
    pub pairs: usize,
    pub rows: Vec<FamilyRow>,
}

/// Compares two seed families pairwise by position.
pub fn compare_families(family_a: &[PathBuf], family_b: &[PathBuf]) -> Result<FamilyComparison> {
    if family_a.is_empty() || family_a.len() != family_b.len() {
        return Err(Error::input("seed families must be nonempty and of equal size"));
    }
    let a = family_a
        .iter()
        .map(|d| RunSummary::load(d))
        .collect::<Result<Vec<_>>>()?;
    let b = family_b
        .iter()
        .map(|d| RunSummary::load(d))
        .collect::<Result<Vec<_>>>()?;
    compare_family_summaries(&a, &b)
}

pub fn compare_family_summaries(a: &[RunSummary], b: &[RunSummary]) -> Result<FamilyComparison> {
    if a.is_empty() || a.len() != b.len() {
        return Err(Error::input("seed families must be nonempty and of equal size"));
    }
    let pairs = a
        .iter()
        .zip(b)
        .map(|(x, y)| compare_summaries(x, y))
        .collect::<Result<Vec<_>>>()?;
    let rows = pairs[0]
        .rows
        .iter()
        .map(|r| r.metric.clone())
        .map(|metric| {
            let mut va = Vec::new();
            let mut vb = Vec::new();
            let mut deltas = Vec::new();
            let (mut wins_a, mut wins_b, mut ties, mut missing) = (0, 0, 0, 0);
            for p in &pairs {
                let row = p.rows.iter().find(|r| r.metric == metric);
                let (x, y) = row.map_or((None, None), |r| (r.a, r.b));
                if let Some(x) = x {
                    va.push(x);
                }
                if let Some(y) = y {
                    vb.push(y);
                }
                match x.zip(y) {
                    Some((x, y)) => {
                        deltas.push(y - x);
                        if y > x {
                            wins_b += 1;
                        } else if x > y {
                            wins_a += 1;
                        } else {
                            ties += 1;
                        }
                    }
                    None => missing += 1,
                }
            }
            FamilyRow {
                metric,
                median_a: median(&va),
                median_b: median(&vb),
                median_delta: median(&deltas),
                wins_b,
                wins_a,
                ties,
                missing,
            }
        })
        .collect();
    Ok(FamilyComparison {
        pairs: pairs.len(),
        rows,
    })
}

impl FamilyComparison {
    pub fn to_text(&self) -> String {
        let mut out = format!("{} seed pairs\n", self.pairs);
        let _ = writeln!(
            out,
            "{:<34} {:>12} {:>12} {:>12} {:>6} {:>6} {:>6}",
            "metric", "median a", "median b", "median b-a", "b>a", "a>b", "tie"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<34} {:>12} {:>12} {:>12} {:>6} {:>6} {:>6}",
                r.metric,
                fmt_opt(r.median_a),
                fmt_opt(r.median_b),
                fmt_opt(r.median_delta),
                r.wins_b,
                r.wins_a,
                r.ties
            );
        }
        out
    }
}
