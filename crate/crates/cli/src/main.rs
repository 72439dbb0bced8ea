use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use coflowforge::heuristics::{Heuristic, HeuristicKind};
use coflowforge::model::Job;
use coflowforge::policy::{PolicyAgent, PolicyKind, PolicyNet};
use coflowforge::sim::{run_simulation, Scheduler, SimConfig, SimReport};
use coflowforge::trainer::{curve_csv, train_with, TrainConfig};
use coflowforge::workload::{
    generate_workload, ingest_trace, inject_noise, load_templates, load_workload, parse_trace, save_templates,
    save_workload, split_workload, synthetic_trace, CoflowTemplate, WorkloadSpec, TEMPLATES_HEADER, WORKLOAD_HEADER,
};

/// Online multi-stage coflow scheduling: workloads, training, simulation.
#[derive(Parser)]
#[command(name = "coflowforge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a workload of multi-stage jobs.
    Gen(GenArgs),
    /// Convert a coflow trace into a templates file.
    Ingest(IngestArgs),
    /// Split a workload or templates file into train/val/test parts.
    Split(SplitArgs),
    /// Train a learned scheduler with REINFORCE.
    Train(TrainArgs),
    /// Simulate one scheduler on a workload.
    Simulate(SimulateArgs),
    /// Compare schedulers over batches of jobs.
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, default_value_t = 20)]
    ports: usize,
    #[arg(long, default_value_t = 100)]
    jobs: usize,
    /// Jobs per 100 time units.
    #[arg(long, default_value_t = 20.0)]
    lambda: f64,
    #[arg(long, default_value_t = 8)]
    mean_coflows: usize,
    /// Uniform weight range as LO,HI.
    #[arg(long, default_value = "1,5")]
    weights: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Templates file from `ingest`.
    #[arg(long, conflicts_with = "trace")]
    templates: Option<PathBuf>,
    /// Raw coflow trace; a synthetic one is used when neither source is given.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value = "8,1,1")]
    ratios: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Writes PRE.train, PRE.val and PRE.test.
    #[arg(long)]
    out_prefix: String,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    workload: PathBuf,
    #[arg(long)]
    val: PathBuf,
    /// JSON training config; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// attention, no-attention or flat.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    workload: PathBuf,
    #[arg(long)]
    scheduler: String,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to 1.5 x last arrival + 500.
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    ports: Option<usize>,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    workload: PathBuf,
    /// Comma-separated scheduler names.
    #[arg(long)]
    schedulers: String,
    /// NAME=PATH for each learned scheduler; may repeat.
    #[arg(long)]
    checkpoint: Vec<String>,
    #[arg(long, default_value_t = 10)]
    batches: usize,
    #[arg(long, default_value_t = 100)]
    batch_size: usize,
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    ports: Option<usize>,
    #[arg(long)]
    cdf: PathBuf,
    /// Per-batch metrics CSV; printed to stdout when omitted.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

/// Bad arguments that clap cannot catch on its own.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Choice {
    Learned(PolicyFamily),
    Heuristic(HeuristicKind),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum PolicyFamily {
    Drl,
    DrlNoAttn,
    DrlFlat,
}

impl PolicyFamily {
    fn matches(self, kind: PolicyKind) -> bool {
        matches!(
            (self, kind),
            (Self::Drl, PolicyKind::Attention)
                | (Self::DrlNoAttn, PolicyKind::NoAttention)
                | (Self::DrlFlat, PolicyKind::Flat { .. })
        )
    }
}

fn parse_choice(name: &str) -> Result<Choice> {
    Ok(match name {
        "drl" => Choice::Learned(PolicyFamily::Drl),
        "drl_noattn" => Choice::Learned(PolicyFamily::DrlNoAttn),
        "drl_flat" => Choice::Learned(PolicyFamily::DrlFlat),
        other => Choice::Heuristic(other.parse().map_err(|_| usage(format!("unknown scheduler {other:?}")))?),
    })
}

fn load_policy(family: PolicyFamily, path: Option<&Path>, name: &str) -> Result<PolicyNet> {
    let path = path.ok_or_else(|| usage(format!("scheduler {name} needs a checkpoint")))?;
    let net = PolicyNet::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    if !family.matches(net.config.kind) {
        return Err(usage(format!("checkpoint {} holds a {:?} model, not {name}", path.display(), net.config.kind)));
    }
    Ok(net)
}

fn parse_pair<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|p| p.trim().parse::<T>().map_err(|_| usage(format!("bad {what}: {s:?}"))))
        .collect()
}

fn default_horizon(jobs: &[Job]) -> f64 {
    let last = jobs.iter().map(|j| j.arrival_time).fold(0.0, f64::max);
    1.5 * last + 500.0
}

fn simulate_with(jobs: &[Job], scheduler: &mut dyn Scheduler, horizon: f64, ports: Option<usize>) -> Result<SimReport> {
    let cfg = SimConfig { port_count: ports, horizon, record_events: false, ..SimConfig::default() };
    Ok(run_simulation(jobs, scheduler, &cfg)?.report)
}

fn run_choice(choice: Choice, net: Option<&PolicyNet>, jobs: &[Job], seed: u64, horizon: f64, ports: Option<usize>) -> Result<SimReport> {
    match choice {
        Choice::Heuristic(kind) => simulate_with(jobs, &mut Heuristic::new(kind, seed), horizon, ports),
        Choice::Learned(_) => {
            let net = net.expect("learned scheduler has a loaded model");
            simulate_with(jobs, &mut PolicyAgent::greedy(net), horizon, ports)
        }
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let w: Vec<f64> = parse_pair(&a.weights, "weights")?;
    if w.len() != 2 {
        return Err(usage("--weights takes LO,HI"));
    }
    let spec = WorkloadSpec {
        port_count: a.ports,
        arrival_rate: a.lambda,
        mean_coflows: a.mean_coflows,
        weight_low: w[0],
        weight_high: w[1],
        job_count: a.jobs,
        rng_seed: a.seed,
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let templates: Vec<CoflowTemplate> = match (&a.templates, &a.trace) {
        (Some(t), _) => load_templates(t)?,
        (None, Some(t)) => ingest_trace(t)?,
        (None, None) => parse_trace(&synthetic_trace(526, 150, a.seed))?,
    };
    let jobs = generate_workload(&spec, &templates)?;
    save_workload(&jobs, &a.out)?;
    println!("wrote {} jobs to {}", jobs.len(), a.out.display());
    Ok(())
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let templates = ingest_trace(&a.trace)?;
    save_templates(&templates, &a.out)?;
    println!("wrote {} templates to {}", templates.len(), a.out.display());
    Ok(())
}

fn cmd_split(a: SplitArgs) -> Result<()> {
    let r: Vec<u32> = parse_pair(&a.ratios, "ratios")?;
    if r.len() != 3 || r.iter().sum::<u32>() == 0 {
        return Err(usage("--ratios takes three nonnegative integers, e.g. 8,1,1"));
    }
    let ratios = (r[0], r[1], r[2]);
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let header = text.lines().next().unwrap_or("").trim();
    let names = ["train", "val", "test"];
    let out = |name: &str| PathBuf::from(format!("{}.{name}", a.out_prefix));
    if header == WORKLOAD_HEADER {
        let jobs = load_workload(&a.input)?;
        let (x, y, z) = split_workload(&jobs, ratios, a.seed);
        for (name, part) in names.iter().zip([x, y, z]) {
            save_workload(&part, &out(name))?;
            println!("{}: {} jobs", out(name).display(), part.len());
        }
    } else if header == TEMPLATES_HEADER {
        let templates = load_templates(&a.input)?;
        let (x, y, z) = split_workload(&templates, ratios, a.seed);
        for (name, part) in names.iter().zip([x, y, z]) {
            save_templates(&part, &out(name))?;
            println!("{}: {} templates", out(name).display(), part.len());
        }
    } else {
        bail!("{} is neither a workload nor a templates file", a.input.display());
    }
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(n) = a.iterations {
        cfg.iterations = n;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = &a.model {
        cfg.policy.kind = match m.as_str() {
            "attention" => PolicyKind::Attention,
            "no-attention" => PolicyKind::NoAttention,
            "flat" => PolicyKind::Flat { max_nodes: 128 },
            other => return Err(usage(format!("unknown model {other:?}"))),
        };
    }
    let train_jobs = load_workload(&a.workload)?;
    let val_jobs = load_workload(&a.val)?;
    let every = cfg.validation_every;
    let outcome = train_with(&cfg, &train_jobs, &val_jobs, |it, s| {
        if it % every == 0 {
            eprintln!("iteration {it}: mean return {:.3}", s.mean_return);
        }
    })?;
    outcome.best.save(&a.out_checkpoint)?;
    if let Some(c) = &a.curve {
        fs::write(c, curve_csv(&outcome.curve))?;
    }
    println!(
        "initial_val={} best_val={} checkpoint={}",
        outcome.initial_score,
        outcome.best_score,
        a.out_checkpoint.display()
    );
    Ok(())
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let choice = parse_choice(&a.scheduler)?;
    let net = match choice {
        Choice::Learned(f) => Some(load_policy(f, a.checkpoint.as_deref(), &a.scheduler)?),
        Choice::Heuristic(_) => None,
    };
    let jobs = inject_noise(&load_workload(&a.workload)?, a.noise, a.seed);
    let horizon = a.horizon.unwrap_or_else(|| default_horizon(&jobs));
    let report = run_choice(choice, net.as_ref(), &jobs, a.seed, horizon, a.ports)?;
    if let Some(p) = &a.report {
        fs::write(p, report.to_csv())?;
    }
    println!("{}", report.summary_line());
    Ok(())
}

/// Empirical CDF rows `(value, cumulative fraction)` over sorted values.
fn empirical_cdf(values: &mut [f64]) -> Vec<(f64, f64)> {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    values.iter().enumerate().map(|(i, &v)| (v, (i + 1) as f64 / n)).collect()
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    if a.batches == 0 || a.batch_size == 0 {
        return Err(usage("--batches and --batch-size must be positive"));
    }
    let mut ckpts = std::collections::HashMap::new();
    for spec in &a.checkpoint {
        let (name, path) = spec.split_once('=').ok_or_else(|| usage(format!("--checkpoint takes NAME=PATH, got {spec:?}")))?;
        ckpts.insert(name.to_string(), PathBuf::from(path));
    }
    let mut schedulers = Vec::new();
    for name in a.schedulers.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let choice = parse_choice(name)?;
        let net = match choice {
            Choice::Learned(f) => Some(load_policy(f, ckpts.get(name).map(PathBuf::as_path), name)?),
            Choice::Heuristic(_) => None,
        };
        schedulers.push((name.to_string(), choice, net));
    }
    if schedulers.is_empty() {
        return Err(usage("--schedulers is empty"));
    }
    let jobs = inject_noise(&load_workload(&a.workload)?, a.noise, a.seed);
    let batches: Vec<&[Job]> = jobs.chunks(a.batch_size).take(a.batches).collect();
    if batches.is_empty() {
        bail!("workload has no jobs");
    }

    let mut metrics = String::from("scheduler,batch,jobs,completed,avg_jct,avg_weighted_jct\n");
    let mut cdf = String::from("scheduler,jct,cdf\n");
    for (name, choice, net) in &schedulers {
        let mut jcts = Vec::new();
        for (b, batch) in batches.iter().enumerate() {
            let report = run_choice(*choice, net.as_ref(), batch, a.seed, default_horizon(batch), a.ports)?;
            writeln!(
                metrics,
                "{name},{b},{},{},{},{}",
                report.total, report.completed, report.avg_jct, report.avg_weighted_jct
            )?;
            jcts.extend(report.rows.iter().filter_map(|r| r.jct()));
        }
        for (v, c) in empirical_cdf(&mut jcts) {
            writeln!(cdf, "{name},{v},{c}")?;
        }
    }
    fs::write(&a.cdf, cdf)?;
    match &a.metrics {
        Some(p) => fs::write(p, &metrics)?,
        None => print!("{metrics}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Ingest(a) => cmd_ingest(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<UsageError>() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
