//! `judgekit`: every pipeline stage as a deterministic subcommand.
//!
//! Exit codes: 0 success, 1 validation failure, 2 usage error. Data goes to
//! files or standard output; diagnostics go to standard error.

mod io;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use judgekit_core::datapipe::{apply_split, attach_votes, filter_cycles, form_pairs, split_dataset, vote_filter_all, VoteSheet};
use judgekit_core::grpo::{gradient_audit, train_toy, CurvePoint, Hyperparams, TrainConfig, ToyTask};
use judgekit_core::metrics::{eval_report, EvalRecord};
use judgekit_core::parser::{parse_judgment, FormatError, ParsedJudgment};
use judgekit_core::rewards::{judge_reward, RewardBreakdown, RewardWeights};
use judgekit_core::schema::{CandidateSet, GroundTruth, TaskKind};
use judgekit_core::{DataError, PairRecord, Scalar, Split, SplitRatios};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "judgekit", version, about = "Judgment parsing, rewards, toy GRPO and preference-data tooling")]
struct Cli {
    /// Worker threads for per-record stages.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    jobs: u16,
    /// Skip malformed input lines (reported on stderr) instead of failing.
    #[arg(long, global = true)]
    lenient: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Validate raw judge outputs against a task's template.
    Parse(ParseArgs),
    /// Form ordered pairs from candidate sets.
    Pairs(PairsArgs),
    /// Drop pairs that lie on a preference cycle within their text group.
    FilterCycles(FilterCyclesArgs),
    /// Keep pairs whose annotator votes confirm the automatic label.
    VoteFilter(VoteFilterArgs),
    /// Assign sft/rl/bench splits by text group.
    Split(SplitArgs),
    /// Score raw outputs against ground truth.
    Reward(RewardArgs),
    /// Aggregate accuracy, correlation and explanation metrics.
    Eval(EvalArgs),
    /// Train a logit-table policy with GRPO on a planted task.
    TrainToy(TrainToyArgs),
    /// Compare analytic and finite-difference gradients of every objective.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
struct Io {
    /// Input file (`-` or omitted for stdin).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output file (`-` or omitted for stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ParseArgs {
    #[arg(long, value_parser = parse_task)]
    task: TaskKind,
    #[command(flatten)]
    io: Io,
    /// Treat the whole input as one raw output instead of JSONL records.
    #[arg(long)]
    text: bool,
}

#[derive(Debug, Args)]
struct PairsArgs {
    #[arg(long, value_parser = parse_task)]
    task: TaskKind,
    #[command(flatten)]
    io: Io,
    #[arg(long)]
    seed: u64,
}

#[derive(Debug, Args)]
struct FilterCyclesArgs {
    #[command(flatten)]
    io: Io,
    /// Write removed pairs here.
    #[arg(long)]
    removed: Option<PathBuf>,
    /// Write the filter report (JSON) here.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct VoteFilterArgs {
    #[command(flatten)]
    io: Io,
    /// JSONL vote sheets to attach before filtering.
    #[arg(long)]
    votes: Option<PathBuf>,
    /// Write removed pairs, each with its discard reason, here.
    #[arg(long)]
    removed: Option<PathBuf>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SplitArgs {
    #[command(flatten)]
    io: Io,
    /// sft,rl,bench fractions summing to 1.
    #[arg(long, value_parser = parse_ratios, default_value = "0.8,0.1,0.1")]
    ratios: SplitRatios,
    #[arg(long)]
    seed: u64,
    /// Write the text_id to split assignment (JSON) here.
    #[arg(long)]
    assignment: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WeightArgs {
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    lambda_fmt: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    lambda_acc: f64,
    #[arg(long, default_value_t = 1.0, allow_negative_numbers = true)]
    lambda_rc: f64,
}

impl WeightArgs {
    fn weights<T: Scalar>(&self) -> Result<RewardWeights<T>> {
        Ok(RewardWeights::new(T::lit(self.lambda_fmt), T::lit(self.lambda_acc), T::lit(self.lambda_rc))?)
    }
}

#[derive(Debug, Args)]
struct RewardArgs {
    #[arg(long, value_parser = parse_task)]
    task: TaskKind,
    #[command(flatten)]
    io: Io,
    #[command(flatten)]
    weights: WeightArgs,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, value_parser = parse_task)]
    task: TaskKind,
    /// Evaluation records (JSONL).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the text table here instead of stdout.
    #[arg(long)]
    table: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ToyKind {
    /// Two prompts with distinct best outputs.
    Planted,
    /// Every output scores the same.
    Flat,
}

#[derive(Debug, Args)]
struct TrainToyArgs {
    /// Reward curve CSV (stdout when omitted).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the trained policy and reference (JSON) here.
    #[arg(long)]
    policy_out: Option<PathBuf>,
    #[arg(long)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = ToyKind::Planted)]
    toy: ToyKind,
    #[arg(long, default_value_t = 150)]
    iterations: usize,
    #[arg(long, default_value_t = 2)]
    inner_steps: usize,
    #[arg(long, default_value_t = 0)]
    sft_steps: usize,
    #[arg(long, default_value_t = 8)]
    group_size: usize,
    #[arg(long, default_value_t = 0.04)]
    kl_beta: f64,
    #[arg(long, default_value_t = 0.2)]
    clip_epsilon: f64,
    #[arg(long, default_value_t = 1e-8)]
    adv_epsilon: f64,
    /// Initial step size of each RL update (backtracked).
    #[arg(long, default_value_t = 1.0)]
    rl_lr: f64,
    /// Initial step size of each SFT warm-up update (backtracked).
    #[arg(long, default_value_t = 0.5)]
    sft_lr: f64,
    #[command(flatten)]
    weights: WeightArgs,
    #[arg(long, value_enum, default_value_t = Precision::F64)]
    precision: Precision,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
    #[arg(long, default_value_t = 100)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_task(s: &str) -> Result<TaskKind, String> {
    s.parse::<TaskKind>().map_err(|e| e.to_string())
}

fn parse_ratios(s: &str) -> Result<SplitRatios, String> {
    s.parse::<SplitRatios>().map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code().clamp(0, 255) as u8);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs as usize).build()?;
    let lenient = cli.lenient;
    pool.install(|| match cli.command {
        Command::Parse(a) => cmd_parse(a, lenient),
        Command::Pairs(a) => cmd_pairs(a, lenient),
        Command::FilterCycles(a) => cmd_filter_cycles(a, lenient),
        Command::VoteFilter(a) => cmd_vote_filter(a, lenient),
        Command::Split(a) => cmd_split(a, lenient),
        Command::Reward(a) => cmd_reward(a, lenient),
        Command::Eval(a) => cmd_eval(a, lenient),
        Command::TrainToy(a) => cmd_train_toy(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    })
}

fn ok() -> Result<ExitCode> {
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// parse

#[derive(Debug, Deserialize)]
struct RawRecord {
    raw: String,
    #[serde(default)]
    id: Option<serde_json::Value>,
}

#[derive(Debug, Serialize)]
struct ParseReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    id: Option<serde_json::Value>,
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    judgment: Option<ParsedJudgment>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<FormatError>,
}

impl ParseReport {
    fn new(id: Option<serde_json::Value>, result: Result<ParsedJudgment, FormatError>) -> Self {
        match result {
            Ok(j) => ParseReport { id, ok: true, judgment: Some(j), error: None },
            Err(e) => ParseReport { id, ok: false, judgment: None, error: Some(e) },
        }
    }
}

fn cmd_parse(a: ParseArgs, lenient: bool) -> Result<ExitCode> {
    io::check_paths(&[&a.io.input], &[&a.io.out])?;
    let reports: Vec<ParseReport> = if a.text {
        let raw = io::read_all(&a.io.input)?;
        vec![ParseReport::new(None, parse_judgment(&raw, a.task))]
    } else {
        let records: Vec<RawRecord> = io::read_records(&a.io.input, lenient, |_| Ok(()))?;
        records.into_par_iter().map(|r| ParseReport::new(r.id, parse_judgment(&r.raw, a.task))).collect()
    };
    let failures = reports.iter().filter(|r| !r.ok).count();
    io::write_records(&a.io.out, &reports)?;
    eprintln!("parsed {} output(s): {} valid, {} invalid", reports.len(), reports.len() - failures, failures);
    if a.text && failures > 0 {
        return Ok(ExitCode::from(1));
    }
    ok()
}

// ---------------------------------------------------------------------------
// datapipe stages

fn cmd_pairs(a: PairsArgs, lenient: bool) -> Result<ExitCode> {
    io::check_paths(&[&a.io.input], &[&a.io.out])?;
    let sets: Vec<CandidateSet> =
        io::read_records(&a.io.input, lenient, |s: &CandidateSet| s.validate().map_err(DataError::from))?;
    let mut seen = std::collections::HashSet::new();
    for s in &sets {
        if !seen.insert(s.text_id.as_str()) {
            bail!("duplicate candidate set for text_id {}", s.text_id);
        }
    }
    let per_set: Vec<Vec<PairRecord>> =
        sets.par_iter().map(|s| form_pairs(s, a.task, a.seed)).collect::<Result<_, _>>()?;
    let pairs: Vec<PairRecord> = per_set.into_iter().flatten().collect();
    io::write_records(&a.io.out, &pairs)?;
    eprintln!("formed {} pair(s) from {} candidate set(s)", pairs.len(), sets.len());
    ok()
}

fn read_pairs(path: &Option<PathBuf>, lenient: bool) -> Result<Vec<PairRecord>> {
    io::read_records(path, lenient, PairRecord::validate)
}

fn cmd_filter_cycles(a: FilterCyclesArgs, lenient: bool) -> Result<ExitCode> {
    io::check_paths(&[&a.io.input], &[&a.io.out, &a.removed, &a.report])?;
    let records = read_pairs(&a.io.input, lenient)?;
    let (kept, removed, report) = filter_cycles(records)?;
    io::write_records(&a.io.out, &kept)?;
    if a.removed.is_some() {
        io::write_records(&a.removed, &removed)?;
    }
    if a.report.is_some() {
        io::write_json(&a.report, &report)?;
    }
    eprintln!("kept {} of {} pair(s); {} on cycles", report.kept, report.input, report.removed_cycles);
    ok()
}

#[derive(Serialize)]
struct Discarded {
    #[serde(flatten)]
    record: PairRecord,
    discard_reason: judgekit_core::DiscardReason,
}

fn cmd_vote_filter(a: VoteFilterArgs, lenient: bool) -> Result<ExitCode> {
    io::check_paths(&[&a.io.input, &a.votes], &[&a.io.out, &a.removed, &a.report])?;
    let mut records = read_pairs(&a.io.input, lenient)?;
    if a.votes.is_some() {
        let sheets: Vec<VoteSheet> = io::read_records(&a.votes, lenient, |_| Ok(()))?;
        let n = attach_votes(&mut records, &sheets);
        eprintln!("attached votes to {n} pair(s)");
    }
    let (kept, removed, report) = vote_filter_all(records)?;
    io::write_records(&a.io.out, &kept)?;
    if a.removed.is_some() {
        let removed: Vec<Discarded> =
            removed.into_iter().map(|(record, discard_reason)| Discarded { record, discard_reason }).collect();
        io::write_records(&a.removed, &removed)?;
    }
    if a.report.is_some() {
        io::write_json(&a.report, &report)?;
    }
    eprintln!("kept {} of {} pair(s)", report.kept, report.input);
    ok()
}

fn cmd_split(a: SplitArgs, lenient: bool) -> Result<ExitCode> {
    io::check_paths(&[&a.io.input], &[&a.io.out, &a.assignment])?;
    let mut records = read_pairs(&a.io.input, lenient)?;
    let assignment = split_dataset(&records, &a.ratios, a.seed)?;
    apply_split(&mut records, &assignment);
    io::write_records(&a.io.out, &records)?;
    if a.assignment.is_some() {
        io::write_json(&a.assignment, &assignment)?;
    }
    let count = |s| assignment.values().filter(|&&v| v == s).count();
    eprintln!(
        "split {} text group(s): sft {}, rl {}, bench {}",
        assignment.len(),
        count(Split::Sft),
        count(Split::Rl),
        count(Split::Bench)
    );
    ok()
}

// ---------------------------------------------------------------------------
// reward / eval

#[derive(Debug, Deserialize)]
struct RewardInput {
    raw: String,
    truth: GroundTruth,
    #[serde(default)]
    task: Option<TaskKind>,
}

fn cmd_reward(a: RewardArgs, lenient: bool) -> Result<ExitCode> {
    io::check_paths(&[&a.io.input], &[&a.io.out])?;
    let weights = a.weights.weights::<f64>()?;
    let task = a.task;
    let records: Vec<RewardInput> = io::read_records(&a.io.input, lenient, |r: &RewardInput| {
        let found = r.task.unwrap_or(r.truth.task());
        if found != task || r.truth.task() != task {
            return Err(DataError::InvalidRecord(format!("record is for task {found}, expected {task}")));
        }
        Ok(())
    })?;
    let out: Vec<RewardBreakdown<f64>> = records
        .par_iter()
        .map(|r| judge_reward(&r.raw, &r.truth, task, &weights))
        .collect::<Result<_, _>>()?;
    io::write_records(&a.io.out, &out)?;
    let failed = out.iter().filter(|b| !b.parse_ok).count();
    eprintln!("scored {} output(s); {} failed to parse", out.len(), failed);
    ok()
}

fn cmd_eval(a: EvalArgs, lenient: bool) -> Result<ExitCode> {
    io::check_paths(&[&a.input], &[&a.out, &a.table])?;
    let records: Vec<EvalRecord> = io::read_records(&a.input, lenient, |_| Ok(()))?;
    let report = eval_report(&records, a.task)?;
    if a.out.is_some() {
        io::write_json(&a.out, &report)?;
    }
    let mut w = io::writer(&a.table)?;
    w.write_all(report.to_table().as_bytes())?;
    w.flush()?;
    ok()
}

// ---------------------------------------------------------------------------
// train-toy / gradcheck

fn cmd_train_toy(a: TrainToyArgs) -> Result<ExitCode> {
    io::check_paths(&[], &[&a.out, &a.policy_out])?;
    match a.precision {
        Precision::F64 => train_and_write::<f64>(&a),
        Precision::F32 => train_and_write::<f32>(&a),
    }
}

fn train_and_write<T: Scalar + Serialize>(a: &TrainToyArgs) -> Result<ExitCode> {
    let h = Hyperparams::<T> {
        group_size: a.group_size,
        clip_epsilon: T::lit(a.clip_epsilon),
        adv_epsilon: T::lit(a.adv_epsilon),
        kl_beta: T::lit(a.kl_beta),
        weights: a.weights.weights()?,
        sft_lr: T::lit(a.sft_lr),
        rl_lr: T::lit(a.rl_lr),
    };
    let task = match a.toy {
        ToyKind::Planted => ToyTask::planted(),
        ToyKind::Flat => ToyTask::flat(),
    };
    let cfg = TrainConfig { iterations: a.iterations, inner_steps: a.inner_steps, sft_steps: a.sft_steps, seed: a.seed };
    let outcome = train_toy(&task, &h, &cfg).context("training failed")?;

    let mut w = io::writer(&a.out)?;
    writeln!(w, "iteration,mean_total_reward,mean_kl")?;
    for CurvePoint { iteration, mean_total_reward, mean_kl } in &outcome.curve {
        writeln!(w, "{iteration},{mean_total_reward},{mean_kl}")?;
    }
    w.flush()?;
    if a.policy_out.is_some() {
        io::write_json(&a.policy_out, &outcome)?;
    }
    let start = task.expected_reward(&task.uniform_policy::<T>(), &h.weights)?;
    let end = task.expected_reward(&outcome.policy, &h.weights)?;
    let max = task.max_expected_reward(&h.weights)?;
    eprintln!("expected reward {start} -> {end} (max {max})");
    ok()
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    io::check_paths(&[], &[&a.out])?;
    let audit = gradient_audit(a.seed, a.draws, a.h, a.tol)?;
    io::write_json(&a.out, &audit)?;
    for o in &audit.objectives {
        eprintln!(
            "{}: max relative error {:.3e} over {} draw(s) [{}]",
            o.objective,
            o.max_rel_error,
            o.draws,
            if o.passed { "pass" } else { "FAIL" }
        );
    }
    Ok(if audit.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
