use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use grpo_lab::harness::{self, oracle, Preset, RunConfig};
use grpo_lab::taskgen::Split;

#[derive(Parser)]
#[command(name = "grpo-lab", version, about = "Desk-scale GRPO / Dr.GRPO laboratory")]
struct Cli {
    /// Run configuration (flat TOML). Missing keys come from the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the train and eval splits as JSONL.
    GenData {
        /// Named preset supplying defaults for every key.
        #[arg(long)]
        preset: Option<Preset>,
        /// `key=value` configuration override (repeatable).
        #[arg(long = "set", value_parser = parse_kv)]
        set: Vec<(String, String)>,
    },
    /// Run a preset or configuration into a run directory.
    Train {
        /// Named preset supplying defaults for every key.
        #[arg(long)]
        preset: Option<Preset>,
        /// `key=value` configuration override (repeatable).
        #[arg(long = "set", value_parser = parse_kv)]
        set: Vec<(String, String)>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint on the configuration's eval split.
    Eval {
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Named preset supplying defaults for every key.
        #[arg(long)]
        preset: Option<Preset>,
        /// `key=value` configuration override (repeatable).
        #[arg(long = "set", value_parser = parse_kv)]
        set: Vec<(String, String)>,
    },
    /// Compare two runs, or two seed families with --family.
    Compare {
        /// Run directories: `A B`, or `A1 .. An B1 .. Bn` with --family.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Treat the runs as two equally sized seed families.
        #[arg(long)]
        family: bool,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Finite-difference check of the surrogate gradient.
    Gradcheck {
        /// Random parameter draws per configuration.
        #[arg(long, default_value_t = harness::gradcheck::DEFAULT_TRIALS)]
        trials: usize,
        /// Print JSON instead of a table.
        #[arg(long)]
        json: bool,
    },
    /// Exhaustive expected reward against Monte Carlo on tiny fixtures.
    Oracle {
        /// Number of random tiny fixtures.
        #[arg(long, default_value_t = 10)]
        fixtures: usize,
        /// Monte Carlo samples per fixture.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
    /// Write reward, length and accuracy curves from run step logs.
    Plots {
        /// Completed run directories.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

fn parse_kv(s: &str) -> std::result::Result<(String, String), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl Cli {
    fn resolve(&self, preset: Option<Preset>, set: &[(String, String)]) -> Result<RunConfig> {
        let text = match &self.config {
            Some(path) => Some(fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?),
            None => None,
        };
        let mut overrides = set.to_vec();
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        Ok(RunConfig::resolve(text.as_deref(), preset, &overrides)?)
    }

    fn out_or(&self, default: impl AsRef<Path>) -> PathBuf {
        self.out.clone().unwrap_or_else(|| default.as_ref().to_path_buf())
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn execute(cli: &Cli) -> Result<bool> {
    match &cli.command {
        Command::GenData { preset, set } => {
            let cfg = cli.resolve(*preset, set)?;
            let family = cfg.family()?;
            let data = family.generate(cfg.data_seed, cfg.n_train, cfg.n_eval)?;
            let out = cli.out_or("data");
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (split, ds) in [(Split::Train, &data.train), (Split::Eval, &data.eval)] {
                let name = match split {
                    Split::Train => "train.jsonl",
                    Split::Eval => "eval.jsonl",
                };
                write(&out.join(name), ds.to_jsonl())?;
                println!(
                    "{} tasks -> {} (sha256 {})",
                    ds.len(),
                    out.join(name).display(),
                    ds.content_hash()
                );
            }
            Ok(true)
        }
        Command::Train { preset, set, dry_run } => {
            let cfg = cli.resolve(*preset, set)?;
            if *dry_run {
                print!("{}", cfg.to_toml_string());
                return Ok(true);
            }
            let out = cli.out_or(format!("runs/{}-s{}", cfg.preset, cfg.seed));
            let outcome = harness::run(&cfg, &out)?;
            println!("run written to {}", out.display());
            println!("config sha256 {}", cfg.hash());
            println!(
                "greedy accuracy {:.4}  think length {:.2}  think-block rate {:.4}",
                outcome.greedy.accuracy, outcome.greedy.think_len_mean, outcome.greedy.think_block_rate
            );
            if let Some(s) = &outcome.sampled {
                println!(
                    "sampled accuracy {:.4}  think length {:.2}  semantic pass rate {:.4}",
                    s.accuracy, s.think_len_mean, s.semantic_pass_rate
                );
            }
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            preset,
            set,
        } => {
            let cfg = cli.resolve(*preset, set)?;
            let (greedy, sampled) = harness::evaluate_checkpoint(&cfg, checkpoint)?;
            let json = serde_json::to_string_pretty(&serde_json::json!({
                "greedy": greedy,
                "sampled": sampled,
            }))?;
            match &cli.out {
                Some(out) => {
                    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
                    write(&out.join("eval.json"), format!("{json}\n"))?;
                    write(&out.join("eval.csv"), greedy.to_csv())?;
                    if let Some(s) = &sampled {
                        write(&out.join("eval_sampled.csv"), s.to_csv())?;
                    }
                }
                None => println!("{json}"),
            }
            Ok(true)
        }
        Command::Compare { runs, family, json } => {
            let text = if *family {
                if runs.len() % 2 != 0 {
                    bail!("--family needs an even number of run directories");
                }
                let (a, b) = runs.split_at(runs.len() / 2);
                let cmp = harness::compare_families(a, b)?;
                if *json {
                    serde_json::to_string_pretty(&cmp)? + "\n"
                } else {
                    cmp.to_text()
                }
            } else {
                let [a, b] = runs.as_slice() else {
                    bail!("compare takes exactly two run directories (or --family)");
                };
                let cmp = harness::compare(a, b)?;
                if *json {
                    serde_json::to_string_pretty(&cmp)? + "\n"
                } else {
                    cmp.to_text()
                }
            };
            match &cli.out {
                Some(out) => write(out, text)?,
                None => print!("{text}"),
            }
            Ok(true)
        }
        Command::Gradcheck { trials, json } => {
            let report = harness::gradcheck(*trials, cli.seed.unwrap_or(0));
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            if *json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                println!("{}", report.summary());
            }
            Ok(report.passed)
        }
        Command::Oracle { fixtures, samples } => {
            let checks = oracle::oracle_suite(*fixtures, *samples, cli.seed.unwrap_or(0))?;
            println!(
                "{:<12} {:>10} {:>12} {:>12} {:>10} {:>6} {:>6}",
                "fixture", "sequences", "exact", "monte carlo", "sigma", "z", "ok"
            );
            for c in &checks {
                println!(
                    "{:<12} {:>10} {:>12.6} {:>12.6} {:>10.2e} {:>6.2} {:>6}",
                    c.name, c.sequences, c.exact, c.monte_carlo, c.sigma, c.z, c.passed
                );
            }
            Ok(checks.iter().all(|c| c.passed))
        }
        Command::Plots { runs } => {
            let out = cli.out_or("plots");
            for path in harness::emit_plots(runs, &out)? {
                println!("{}", path.display());
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
