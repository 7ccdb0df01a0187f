use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use epibench_core::analysis::{analyze_cells, analyze_records, project_costs, CostScenario, View};
use epibench_core::backend::{
    Backend, HttpBackend, HttpConfig, MockBackend, Provider, ReplayBackend,
};
use epibench_core::epi::{CostConcern, Crossover, TechniqueSummary};
use epibench_core::grading::summarize_all;
use epibench_core::report::{self, ReportFormat};
use epibench_core::runner::{read_records, run, RunPlan};
use epibench_core::Report;

#[derive(Parser)]
#[command(
    name = "epibench",
    version,
    about = "Cost-aware evaluation of prompting techniques"
)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute a plan file against a backend; writes transcripts and records.
    Run(RunArgs),
    /// Summarize graded records into per-cell accuracy and token means.
    Score(ScoreArgs),
    /// Aggregate, compute index curves, slopes, crossovers and significance.
    Analyze(AnalyzeArgs),
    /// Project spend for switching from a baseline technique to a candidate.
    WhatIf(WhatIfArgs),
    /// Render a saved analysis as a table, CSV files or everything.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    /// Answers every prompt with a fixed response.
    Mock,
    /// Serves responses from a recorded transcript file only.
    Replay,
    /// OpenAI-style chat completions endpoint.
    Openai,
    /// Anthropic messages endpoint.
    Anthropic,
}

#[derive(Args)]
struct RunArgs {
    /// Plan file.
    #[arg(long)]
    plan: PathBuf,
    #[arg(long, value_enum, default_value = "replay")]
    backend: BackendKind,
    /// Transcript file for the replay backend.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Endpoint URL for live backends.
    #[arg(long)]
    endpoint: Option<String>,
    /// Response text for the mock backend.
    #[arg(long, default_value = "Final Answer = (A)")]
    mock_response: String,
    /// Reported input and output tokens for the mock backend.
    #[arg(long, default_value = "0,0", value_parser = parse_pair::<u64>)]
    mock_tokens: (u64, u64),
    /// Concurrent requests; overrides the plan.
    #[arg(long)]
    parallelism: Option<usize>,
    /// Sampling seed; overrides the plan.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the plan.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// records.jsonl written by `run`.
    #[arg(long)]
    records: PathBuf,
    /// Where to write cells.csv; defaults next to the records.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    /// Per dataset, averaged across models.
    Agnostic,
    /// Per model, averaged across datasets.
    Specific,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Graded records; enables significance tests.
    #[arg(long, conflicts_with = "cells", required_unless_present = "cells")]
    records: Option<PathBuf>,
    /// cells.csv from `score`.
    #[arg(long)]
    cells: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "agnostic")]
    view: ViewArg,
    /// Extra cost weight to tabulate, e.g. 0.0001. Repeatable.
    #[arg(long = "concern")]
    concerns: Vec<f64>,
    #[arg(long, default_value = "full")]
    format: ReportFormat,
    /// Output directory.
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json written by `analyze`.
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value = "table")]
    format: ReportFormat,
    /// Output directory; without it the table is printed.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct WhatIfArgs {
    /// Price per one million tokens.
    #[arg(long)]
    price: f64,
    /// Queries per day.
    #[arg(long)]
    volume: f64,
    /// Horizon in days.
    #[arg(long, default_value_t = 365.0)]
    days: f64,
    /// Baseline accuracy and mean tokens, e.g. 0.89,257.
    #[arg(long, value_parser = parse_pair::<f64>)]
    baseline: (f64, f64),
    /// Candidate accuracy and mean tokens.
    #[arg(long, value_parser = parse_pair::<f64>)]
    candidate: (f64, f64),
    /// Print JSON instead of text.
    #[arg(long)]
    json: bool,
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> Result<(T, T), String> {
    let (a, b) = s
        .split_once(',')
        .ok_or_else(|| format!("expected two comma-separated values, got {s:?}"))?;
    let p = |v: &str| {
        v.trim()
            .parse::<T>()
            .map_err(|_| format!("not a number: {v:?}"))
    };
    Ok((p(a)?, p(b)?))
}

fn main() {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Score(a) => cmd_score(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::WhatIf(a) => cmd_what_if(a),
        Command::Report(a) => cmd_report(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn backend(args: &RunArgs) -> Result<Box<dyn Backend>> {
    Ok(match args.backend {
        BackendKind::Mock => {
            let (i, o) = args.mock_tokens;
            Box::new(MockBackend::fixed(args.mock_response.clone(), i, o))
        }
        BackendKind::Replay => {
            let path = args
                .replay
                .as_ref()
                .context("--backend replay needs --replay <transcripts>")?;
            Box::new(
                ReplayBackend::open(path).with_context(|| format!("loading {}", path.display()))?,
            )
        }
        BackendKind::Openai | BackendKind::Anthropic => {
            let (name, provider, default_url) = match args.backend {
                BackendKind::Openai => (
                    "openai",
                    Provider::OpenAi,
                    "https://api.openai.com/v1/chat/completions",
                ),
                _ => (
                    "anthropic",
                    Provider::Anthropic,
                    "https://api.anthropic.com/v1/messages",
                ),
            };
            let endpoint = args.endpoint.as_deref().unwrap_or(default_url);
            Box::new(HttpBackend::new(HttpConfig::from_env(
                name, endpoint, provider,
            )?))
        }
    })
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut plan = RunPlan::load(&args.plan)
        .with_context(|| format!("reading plan {}", args.plan.display()))?;
    if let Some(k) = args.parallelism {
        plan.parallelism = k;
    }
    if let Some(s) = args.seed {
        plan.seed = s;
    }
    if let Some(out) = &args.out {
        plan.out_dir = out.clone();
    }
    let outcome = run(&plan, Arc::new(backend(&args)?))?;
    println!(
        "{} records in {}; {} requests, {} sent to the backend",
        outcome.records.len(),
        plan.records_path().display(),
        outcome.requests,
        outcome.fresh_requests
    );
    if outcome.failed_queries() > 0 {
        println!(
            "warning: {} failed queries excluded",
            outcome.failed_queries()
        );
    }
    Ok(())
}

fn cmd_score(args: ScoreArgs) -> Result<()> {
    let records = read_records(&args.records)?;
    let cells = summarize_all(&records)?;
    let out = args
        .out
        .unwrap_or_else(|| args.records.with_file_name(report::CELLS_CSV));
    fs::write(&out, report::cells_csv(&cells))
        .with_context(|| format!("writing {}", out.display()))?;
    for c in &cells {
        println!(
            "{:<40} A={:.2} T={:.2} n={} ({})",
            c.key.to_string(),
            c.summary.accuracy(),
            c.summary.mean_tokens(),
            c.summary.n(),
            c.usage.as_str()
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let view = match args.view {
        ViewArg::Agnostic => View::ModelAgnostic,
        ViewArg::Specific => View::ModelSpecific,
    };
    let extra = args
        .concerns
        .iter()
        .map(|&c| CostConcern::custom(c))
        .collect::<Result<Vec<_>, _>>()?;
    let report = match (&args.records, &args.cells) {
        (Some(r), _) => analyze_records(&read_records(r)?, view, &extra)?,
        (None, Some(c)) => {
            let file = fs::File::open(c).with_context(|| format!("opening {}", c.display()))?;
            analyze_cells(&report::read_cells_csv(file)?, view, &extra)?
        }
        (None, None) => bail!("pass --records or --cells"),
    };
    // the saved analysis is what `report` renders from
    let mut written = report::emit(&report, args.format, &args.out)?;
    if args.format != ReportFormat::Full {
        let path = args.out.join(report::REPORT_JSON);
        fs::write(&path, report::report_json(&report))?;
        written.push(path);
    }
    print!("{}", report::summary_table(&report));
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let bytes =
        fs::read(&args.report).with_context(|| format!("reading {}", args.report.display()))?;
    let report: Report = serde_json::from_slice(&bytes).context("parsing report")?;
    match &args.out {
        Some(dir) => {
            for p in report::emit(&report, args.format, dir)? {
                println!("wrote {}", p.display());
            }
        }
        None if args.format == ReportFormat::Table => print!("{}", report::summary_table(&report)),
        None => bail!("--format csv and full write several files; pass --out"),
    }
    Ok(())
}

fn cmd_what_if(args: WhatIfArgs) -> Result<()> {
    let summary = |(a, t): (f64, f64)| TechniqueSummary::new(a, t, 1);
    let scenario = CostScenario {
        price_per_million: args.price,
        volume: args.volume,
        days: args.days,
        baseline: summary(args.baseline)?,
        candidate: summary(args.candidate)?,
    };
    let p = project_costs(&scenario)?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&p)?);
        return Ok(());
    }
    let crossover = match p.crossover {
        Crossover::At(c) => format!("{c:.4e}"),
        Crossover::Origin => "0 (equal accuracy)".into(),
        Crossover::Never => "none".into(),
    };
    println!("token change      {:+.2}%", p.token_delta_pct);
    println!(
        "accuracy change   {:+.4} ({:+.2}%)",
        p.accuracy_delta, p.accuracy_delta_pct
    );
    println!(
        "daily spend       {:.2} -> {:.2}",
        p.baseline_daily_spend, p.candidate_daily_spend
    );
    println!(
        "{} day spend    {:.2} -> {:.2}",
        args.days, p.baseline_horizon_spend, p.candidate_horizon_spend
    );
    println!("savings           {:.2}", p.savings);
    println!("crossover c       {crossover}");
    Ok(())
}
