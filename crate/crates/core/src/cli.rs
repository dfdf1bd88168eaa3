//! Stage-by-stage command-line front end. Every stage reads and writes the
//! run directory given by `--out`; `run` chains all stages and `compare`
//! ranks finished runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::artifacts::{self, *};
use crate::config::{RunConfig, Variant};
use crate::cpl::{shuffle_schedule, CurriculumScheduler};
use crate::error::{Error, Result};
use crate::orchestrator::{self, evaluate_policy, Prepared, RunResult};
use crate::pairs::build_buffer;
use crate::policy::{LinearSoftmaxPolicy, Policy};
use crate::seed::{self, Stream};
use crate::value::ValueModel;
use crate::{prompt_map, PromptMap};

#[derive(Debug, Parser)]
#[command(name = "cpl", version, about = "Tree-search preference mining with curriculum-ordered DPO")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize train and eval prompts -> prompts.jsonl
    Synth(Common),
    /// Search every train prompt with the base policy -> trees.jsonl
    Search(Common),
    /// Mine preference pairs from saved trees -> buffer.jsonl
    Extract(Common),
    /// Rank the buffer for one epoch -> schedule_epoch_1.csv
    Schedule(Common),
    /// Fine-tune on best trajectories, then run the preference epochs
    Train(Common),
    /// Greedy accuracy of policy.json (or --policy) on the eval prompts
    Eval(EvalArgs),
    /// All stages end to end -> result.json
    Run(Common),
    /// Rank several result.json files
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value = "runs/default")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub policy: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    /// result.json files (or run directories containing one)
    #[arg(required = true)]
    pub results: Vec<PathBuf>,
    #[arg(long, default_value = "runs/compare")]
    pub out: PathBuf,
}

impl clap::builder::ValueParserFactory for Variant {
    type Parser = clap::builder::ValueParser;
    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<Variant>().map_err(|e| e.to_string()))
    }
}

impl Common {
    /// Config from `--config`, else the one echoed in the run directory,
    /// else defaults; flag overrides win. A `--seed` that disagrees with
    /// artifacts already in the run directory is a conflict.
    pub fn resolve(&self) -> Result<RunConfig> {
        let echoed = self.out.join(CONFIG_FILE);
        let mut config = match &self.config {
            Some(path) => {
                if !path.exists() {
                    return Err(Error::MissingInput(path.clone()));
                }
                RunConfig::from_toml(&fs::read_to_string(path)?)?
            }
            None if echoed.exists() => RunConfig::from_toml(&fs::read_to_string(&echoed)?)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            if echoed.exists() && self.out.join(PROMPTS_FILE).exists() {
                let prior = RunConfig::from_toml(&fs::read_to_string(&echoed)?)?;
                if prior.run.seed != seed {
                    return Err(Error::SeedConflict(format!(
                        "--seed {seed} but artifacts in {} were produced with seed {}",
                        self.out.display(),
                        prior.run.seed
                    )));
                }
            }
            config.run.seed = seed;
        }
        if let Some(v) = self.variant {
            config.run.variant = v;
        }
        if let Some(k) = self.epochs {
            config.run.epochs = k;
        }
        if let Some(t) = self.tau {
            config.pairs.tau = t;
        }
        if let Some(a) = self.alpha {
            config.cpl.alpha = a;
        }
        config.validate()?;
        Ok(config)
    }
}

fn echo_config(out: &Path, config: &RunConfig) -> Result<()> {
    ensure_dir(out)?;
    fs::write(out.join(CONFIG_FILE), config.to_toml())?;
    Ok(())
}

fn split_prompts(config: &RunConfig, out: &Path) -> Result<(Vec<crate::env::Prompt>, Vec<crate::env::Prompt>)> {
    let all = read_prompts(&out.join(PROMPTS_FILE))?;
    let n = config.run.num_train_prompts as u64;
    Ok(all.into_iter().partition(|p| p.id < n))
}

/// Trees must have been searched under this run's seed.
fn check_tree_seeds(config: &RunConfig, trees: &[crate::mcts::SearchTree]) -> Result<()> {
    for t in trees {
        if t.config.seed != config.mcts_config(t.prompt_id).seed {
            return Err(Error::SeedConflict(format!(
                "tree for prompt {} was searched under a different master seed",
                t.prompt_id
            )));
        }
    }
    Ok(())
}

fn load_policy(path: &Path, vocab: usize) -> Result<LinearSoftmaxPolicy> {
    if path.exists() {
        LinearSoftmaxPolicy::new(read_params(path)?)
    } else {
        Ok(LinearSoftmaxPolicy::uniform(vocab))
    }
}

pub fn synth(common: &Common) -> Result<PathBuf> {
    let config = common.resolve()?;
    let (mut train, eval) = orchestrator::synthesize_split(&config)?;
    train.extend(eval);
    echo_config(&common.out, &config)?;
    let path = common.out.join(PROMPTS_FILE);
    fs::write(&path, prompts_to_jsonl(&train)?)?;
    Ok(path)
}

pub fn search(common: &Common) -> Result<PathBuf> {
    let config = common.resolve()?;
    let (train, _) = split_prompts(&config, &common.out)?;
    let value = ValueModel::new(config.value_config())?;
    let base = LinearSoftmaxPolicy::uniform(config.env.op_vocab.len());
    let trees = orchestrator::search_all(&config, &train, &base, &value)?;
    echo_config(&common.out, &config)?;
    let path = common.out.join(TREES_FILE);
    fs::write(&path, trees_to_jsonl(&trees)?)?;
    Ok(path)
}

pub fn extract(common: &Common) -> Result<PathBuf> {
    let config = common.resolve()?;
    let trees = read_trees(&common.out.join(TREES_FILE))?;
    check_tree_seeds(&config, &trees)?;
    let buffer = build_buffer(&trees, config.pairs.tau, config.buffer_mode())?;
    echo_config(&common.out, &config)?;
    let path = common.out.join(BUFFER_FILE);
    fs::write(&path, buffer_to_jsonl(&buffer)?)?;
    Ok(path)
}

pub fn schedule(common: &Common) -> Result<PathBuf> {
    let config = common.resolve()?;
    let (train, _) = split_prompts(&config, &common.out)?;
    let prompts = prompt_map(&train);
    let buffer = read_buffer(&common.out.join(BUFFER_FILE), &prompts)?;
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer { tau: config.pairs.tau });
    }
    let policy = load_policy(&common.out.join(SFT_POLICY_FILE), config.env.op_vocab.len())?;
    let value = ValueModel::new(config.value_config())?;
    let mut scheduler = CurriculumScheduler::new(config.curriculum_config())?;
    let schedule = match config.run.variant {
        Variant::Cpl => scheduler.schedule_epoch(&buffer, &prompts, &policy, &value, 1)?,
        _ => {
            let weights = scheduler.weigh(&buffer, &prompts, &policy, &value)?;
            shuffle_schedule(&buffer, weights, seed::derive(config.run.seed, Stream::Shuffle, 0), 1)?
        }
    };
    let path = common.out.join(schedule_file(1));
    write_schedule(&path, &schedule)?;
    Ok(path)
}

/// Rebuilds the shared stages from saved prompts and trees.
fn prepared_from_disk(config: &RunConfig, out: &Path) -> Result<Prepared> {
    let (train, eval) = split_prompts(config, out)?;
    let trees = read_trees(&out.join(TREES_FILE))?;
    check_tree_seeds(config, &trees)?;
    let prompts: PromptMap = prompt_map(&train);
    let base = LinearSoftmaxPolicy::uniform(config.env.op_vocab.len());
    let (sft, losses) = orchestrator::supervised_stage(config, &base, &trees, &prompts)?;
    let mut all = train.clone();
    all.extend(eval.iter().cloned());
    let digests = orchestrator::ArtifactDigests {
        prompts: orchestrator::sha256_hex(&prompts_to_jsonl(&all)?),
        trees: orchestrator::sha256_hex(&trees_to_jsonl(&trees)?),
        sft_policy: sft.params().checksum(),
    };
    Ok(Prepared {
        base_accuracy: evaluate_policy(&base, &eval)?,
        sft_accuracy: evaluate_policy(&sft, &eval)?,
        train_prompts: train,
        eval_prompts: eval,
        trees,
        base_policy: base,
        sft_policy: sft,
        sft_losses: losses,
        digests,
    })
}

/// Writes every per-variant output of a run directory.
pub fn write_variant_outputs(out: &Path, prepared: &Prepared, run: &orchestrator::VariantRun) -> Result<()> {
    write_params(&out.join(SFT_POLICY_FILE), prepared.sft_policy.params())?;
    write_params(&out.join(POLICY_FILE), run.policy.params())?;
    fs::write(out.join(BUFFER_FILE), buffer_to_jsonl(&run.buffer)?)?;
    for s in &run.schedules {
        write_schedule(&out.join(schedule_file(s.epoch)), s)?;
    }
    write_train_report(&out.join(TRAIN_REPORT_FILE), &run.report)?;
    write_result(&out.join(RESULT_FILE), &run.result)?;
    Ok(())
}

pub fn train(common: &Common) -> Result<PathBuf> {
    let config = common.resolve()?;
    let prepared = prepared_from_disk(&config, &common.out)?;
    let run = orchestrator::run_variant(&config, &prepared, config.run.variant)?;
    echo_config(&common.out, &config)?;
    write_variant_outputs(&common.out, &prepared, &run)?;
    Ok(common.out.join(POLICY_FILE))
}

#[derive(Debug, Serialize)]
struct EvalSummary {
    policy: String,
    num_prompts: usize,
    accuracy: f64,
}

pub fn eval(args: &EvalArgs) -> Result<f64> {
    let config = args.common.resolve()?;
    let (_, eval) = split_prompts(&config, &args.common.out)?;
    let path = args.policy.clone().unwrap_or_else(|| args.common.out.join(POLICY_FILE));
    if !path.exists() {
        return Err(Error::MissingInput(path));
    }
    let policy = load_policy(&path, config.env.op_vocab.len())?;
    let accuracy = evaluate_policy(&policy, &eval)?;
    let summary = EvalSummary {
        policy: path.display().to_string(),
        num_prompts: eval.len(),
        accuracy,
    };
    fs::write(args.common.out.join("eval.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(accuracy)
}

pub fn run(common: &Common) -> Result<RunResult> {
    let config = common.resolve()?;
    let out = ensure_dir(&common.out)?;
    let prepared = orchestrator::prepare(&config)?;
    echo_config(&out, &config)?;
    let mut all = prepared.train_prompts.clone();
    all.extend(prepared.eval_prompts.iter().cloned());
    fs::write(out.join(PROMPTS_FILE), prompts_to_jsonl(&all)?)?;
    fs::write(out.join(TREES_FILE), trees_to_jsonl(&prepared.trees)?)?;
    let run = orchestrator::run_variant(&config, &prepared, config.run.variant)?;
    write_variant_outputs(&out, &prepared, &run)?;
    Ok(run.result)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub rank: usize,
    pub source: String,
    pub variant: Variant,
    pub seed: u64,
    pub alpha: f64,
    pub base_accuracy: f64,
    pub sft_accuracy: f64,
    pub final_accuracy: f64,
    pub best_checkpoint_accuracy: f64,
    pub pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub source: String,
    pub step: usize,
    pub accuracy: f64,
}

/// Rows sorted by best checkpoint accuracy, descending; ties keep input
/// order.
pub fn comparison_table(results: &[(String, RunResult)]) -> Vec<ComparisonRow> {
    let mut rows: Vec<ComparisonRow> = results
        .iter()
        .map(|(source, r)| ComparisonRow {
            rank: 0,
            source: source.clone(),
            variant: r.variant,
            seed: r.seed,
            alpha: r.alpha,
            base_accuracy: r.base_accuracy,
            sft_accuracy: r.sft_accuracy,
            final_accuracy: r.epoch_accuracies.last().copied().unwrap_or(r.sft_accuracy),
            best_checkpoint_accuracy: r.best_checkpoint_accuracy,
            pairs: r.buffer.total,
        })
        .collect();
    rows.sort_by(|a, b| b.best_checkpoint_accuracy.total_cmp(&a.best_checkpoint_accuracy));
    for (i, row) in rows.iter_mut().enumerate() {
        row.rank = i + 1;
    }
    rows
}

pub fn accuracy_curves(results: &[(String, RunResult)]) -> Vec<CurvePoint> {
    results
        .iter()
        .flat_map(|(source, r)| {
            std::iter::once(CurvePoint {
                source: source.clone(),
                step: 0,
                accuracy: r.sft_accuracy,
            })
            .chain(r.checkpoints.iter().map(move |c| CurvePoint {
                source: source.clone(),
                step: c.step,
                accuracy: c.accuracy,
            }))
        })
        .collect()
}

pub fn render_table(rows: &[ComparisonRow]) -> String {
    let mut s = format!(
        "{:<4} {:<28} {:<14} {:>6} {:>6} {:>7} {:>7} {:>7} {:>7}\n",
        "rank", "source", "variant", "alpha", "base", "sft", "final", "best", "pairs"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<4} {:<28} {:<14} {:>6.2} {:>6.3} {:>7.3} {:>7.3} {:>7.3} {:>7}\n",
            r.rank, r.source, r.variant, r.alpha, r.base_accuracy, r.sft_accuracy, r.final_accuracy, r.best_checkpoint_accuracy, r.pairs
        ));
    }
    s
}

/// Writes `comparison.csv` and `accuracy_vs_step.csv`; returns the rows.
pub fn write_comparison(out: &Path, results: &[(String, RunResult)]) -> Result<Vec<ComparisonRow>> {
    ensure_dir(out)?;
    let rows = comparison_table(results);
    write_csv(&out.join("comparison.csv"), &rows)?;
    write_csv(&out.join("accuracy_vs_step.csv"), accuracy_curves(results))?;
    Ok(rows)
}

pub fn compare(args: &CompareArgs) -> Result<Vec<ComparisonRow>> {
    let mut results = Vec::new();
    let mut names: BTreeMap<String, usize> = BTreeMap::new();
    for p in &args.results {
        let path = if p.is_dir() { p.join(RESULT_FILE) } else { p.clone() };
        let result = artifacts::read_result(&path)?;
        let mut label = path
            .parent()
            .and_then(|d| d.file_name())
            .map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        let count = names.entry(label.clone()).or_default();
        *count += 1;
        if *count > 1 {
            label = format!("{label}#{count}");
        }
        results.push((label, result));
    }
    write_comparison(&args.out, &results)
}

/// Dispatches one invocation and prints a short summary.
pub fn run_cli(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(c) => println!("wrote {}", synth(&c)?.display()),
        Command::Search(c) => println!("wrote {}", search(&c)?.display()),
        Command::Extract(c) => println!("wrote {}", extract(&c)?.display()),
        Command::Schedule(c) => println!("wrote {}", schedule(&c)?.display()),
        Command::Train(c) => println!("wrote {}", train(&c)?.display()),
        Command::Eval(a) => println!("accuracy {:.4}", eval(&a)?),
        Command::Run(c) => {
            let r = run(&c)?;
            println!(
                "{}: base {:.3} -> sft {:.3} -> epochs {:?} (best {:.3}) in {:.1}s",
                r.variant, r.base_accuracy, r.sft_accuracy, r.epoch_accuracies, r.best_checkpoint_accuracy, r.wall_time_secs
            );
        }
        Command::Compare(a) => print!("{}", render_table(&compare(&a)?)),
    }
    Ok(())
}

/// Parses `args` (program name first) and dispatches; usage errors come
/// back as [`Error::InvalidInput`] instead of exiting the process.
pub fn run_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| Error::InvalidInput(e.to_string()))?;
    run_cli(cli)
}
