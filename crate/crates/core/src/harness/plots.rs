//! Training curves as CSV files.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use super::compare::read_step_log;
use super::run::STEP_LOG;
use crate::grpo::StepReport;
use crate::{Error, Result};

type Column = (&'static str, fn(&StepReport) -> Option<f64>);

/// Curve file name and its per-run columns.
const CURVES: [(&str, &[Column]); 3] = [
    (
        "reward.csv",
        &[
            ("mean_reward", |r| Some(r.mean_reward)),
            ("format_mean", |r| Some(r.format_mean)),
            ("answer_mean", |r| Some(r.answer_mean)),
            ("mean_kl", |r| Some(r.mean_kl)),
        ],
    ),
    (
        "length.csv",
        &[
            ("mean_len", |r| Some(r.mean_len)),
            ("mean_think_len", |r| Some(r.mean_think_len)),
            ("incorrect_len_mean", |r| r.incorrect_len_mean),
        ],
    ),
    ("accuracy.csv", &[("eval_accuracy", |r| r.eval_accuracy)]),
];

fn run_label(index: usize, dir: &Path) -> String {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let clean: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("r{index}_{clean}")
}

/// Renders one curve over several runs. Rows are the union of logged steps;
/// cells are empty where a run has no value.
pub fn curve_csv(runs: &[(String, Vec<StepReport>)], columns: &[Column]) -> String {
    let steps: BTreeSet<u64> = runs.iter().flat_map(|(_, log)| log.iter().map(|r| r.step)).collect();
    let mut out = String::from("step");
    for (label, _) in runs {
        for (name, _) in columns {
            out.push(',');
            out.push_str(name);
            out.push_str("__");
            out.push_str(label);
        }
    }
    out.push('\n');
    for step in steps {
        out.push_str(&step.to_string());
        for (_, log) in runs {
            let report = log.iter().find(|r| r.step == step);
            for (_, get) in columns {
                out.push(',');
                if let Some(v) = report.and_then(get) {
                    out.push_str(&v.to_string());
                }
            }
        }
        out.push('\n');
    }
    out
}

/// Writes `reward.csv`, `length.csv` and `accuracy.csv` into `out` from the
/// step logs of `run_dirs`. Returns the written paths.
pub fn emit_plots(run_dirs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if run_dirs.is_empty() {
        return Err(Error::input("no run directories given"));
    }
    let runs = run_dirs
        .iter()
        .enumerate()
        .map(|(i, dir)| {
            let log = dir.join(STEP_LOG);
            if !log.is_file() {
                return Err(Error::IncompleteRun {
                    path: dir.clone(),
                    reason: format!("missing {STEP_LOG}"),
                });
            }
            Ok((run_label(i, dir), read_step_log(&log)?))
        })
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for (file, columns) in CURVES {
        let path = out.join(file);
        fs::write(&path, curve_csv(&runs, columns)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}
