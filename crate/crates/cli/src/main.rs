//! `owm`: demonstration generation, training, closed-loop evaluation,
//! ablation sweeps, representation analysis, and gradient verification
//! from one binary.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error (bad flag
//! combinations, malformed config text, unknown axis or task names).
//! Every command is deterministic under a fixed `--seed`: reruns produce
//! byte-identical artifacts.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use owm_core::analysis::{
    fisher_ratio, inference_token_count, pca_project, probe_features, scatter_svg, sweep,
    BudgetConfig, SweepAxis,
};
use owm_core::config::RunConfig;
use owm_core::envsim::{
    evaluate, generate_dataset, oracle_policy, Dataset, EvalObs, EvalReport, TaskId, ACTION_DIM,
};
use owm_core::model::obs_policy;
use owm_core::numerics::{GradCheckSettings, GradReport};
use owm_core::probes::{flow_loss_probe, generator_probe, pooling_probe};
use owm_core::train::{load_policy, train};
use owm_core::{OwmError, Result};

#[derive(Parser)]
#[command(name = "owm", version, about = "World-model policy toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate successful scripted-expert episodes into one container.
    GenData(GenDataArgs),
    /// Train a policy; writes checkpoint.owm and metrics.csv.
    Train(TrainArgs),
    /// Closed-loop evaluation of a checkpoint or the scripted oracle.
    Eval(EvalArgs),
    /// Train and evaluate a config grid along one ablation axis.
    Sweep(SweepArgs),
    /// Representation separability and token-budget reports.
    Analyze(AnalyzeArgs),
    /// Check reverse-mode gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Comma-separated task names.
    #[arg(long, value_delimiter = ',', default_value = "push")]
    tasks: Vec<String>,
    /// Successful episodes per task.
    #[arg(long, default_value_t = 200)]
    episodes: usize,
    /// Step cap per episode attempt.
    #[arg(long, default_value_t = 120)]
    max_steps: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output container path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Demonstration container from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// key = value config file; documented defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for checkpoint.owm and metrics.csv.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Continue from this checkpoint; the run seed comes from it and the
    /// config digest must match.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint to evaluate; not needed with --oracle.
    #[arg(long, required_unless_present = "oracle")]
    ckpt: Option<PathBuf>,
    /// Config the checkpoint was trained under (digest is verified).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated tasks; defaults to the config's task list.
    #[arg(long, value_delimiter = ',')]
    tasks: Option<Vec<String>>,
    /// Episodes per task; defaults to the config's eval_episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Actions requested per query; defaults to the config's infer_ah.
    #[arg(long)]
    infer_ah: Option<usize>,
    /// Actions executed before re-observing; defaults to the config's replan.
    #[arg(long)]
    replan_step: Option<usize>,
    /// Step cap per episode; defaults to the config's max_steps.
    #[arg(long)]
    max_steps: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the per-episode table as CSV.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate the scripted expert instead of a checkpoint.
    #[arg(long)]
    oracle: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Ablation axis; see the config keys of the same names.
    #[arg(long)]
    axis: String,
    /// Comma-separated grid values for the axis.
    #[arg(long, value_delimiter = ',', required = true)]
    grid: Vec<String>,
    /// Base config every cell starts from.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated training seeds; one run per (value, seed) cell.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    /// Demonstration container shared by every cell.
    #[arg(long)]
    data: PathBuf,
    /// Report CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum AnalyzeMode {
    Fisher,
    Pca,
    Tokens,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_enum)]
    mode: AnalyzeMode,
    /// Trained checkpoint (fisher and pca modes).
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Demonstration container to probe (fisher and pca modes).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Config the checkpoint was trained under.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for the report files.
    #[arg(long)]
    out: PathBuf,
    /// Relative episode timestep of the probe frame.
    #[arg(long, default_value_t = 0.5)]
    at: f64,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Scope {
    All,
    Pooling,
    Flow,
    Generator,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = Scope::All)]
    scope: Scope,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one gradient on purpose so the checker must trip; exists to
    /// prove the harness catches faults.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<OwmError> for Failure {
    fn from(e: OwmError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Sweep(a) => run_sweep(a),
        Cmd::Analyze(a) => run_analyze(a),
        Cmd::Gradcheck(a) => run_gradcheck(a),
    }
}

/// Config text errors are the user's input, so they exit 2; an unreadable
/// file is a runtime failure.
fn load_config(path: &Option<PathBuf>) -> std::result::Result<RunConfig, Failure> {
    match path {
        None => Ok(RunConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Runtime(format!("read {}: {e}", p.display())))?;
            RunConfig::parse_str(&text)
                .map_err(|e| usage(format!("config {}: {e}", p.display())))
        }
    }
}

fn parse_tasks(names: &[String]) -> std::result::Result<Vec<TaskId>, Failure> {
    names
        .iter()
        .map(|n| TaskId::from_name(n))
        .collect::<Result<_>>()
        .map_err(|e| usage(e.to_string()))
}

fn gen_data(a: GenDataArgs) -> std::result::Result<(), Failure> {
    let tasks = parse_tasks(&a.tasks)?;
    let data = generate_dataset(&tasks, a.episodes, a.max_steps, a.seed, &a.out)?;
    println!(
        "wrote {} episodes ({} per task x {} tasks) to {}",
        data.episodes.len(),
        a.episodes,
        tasks.len(),
        a.out.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> std::result::Result<(), Failure> {
    let cfg = load_config(&a.config)?;
    let data = Dataset::read_from(&a.data)?;
    std::fs::create_dir_all(&a.out)?;
    let ckpt = a.out.join("checkpoint.owm");
    let metrics = a.out.join("metrics.csv");
    let outcome = train(&data, &cfg, a.seed, &ckpt, &metrics, a.resume.as_deref())?;
    match outcome.metrics.last() {
        Some(row) => println!(
            "step {}: total {:.6} action {:.6} (ran {} steps); checkpoint {}",
            row.step,
            row.total,
            row.action,
            outcome.steps_run,
            ckpt.display()
        ),
        None => println!(
            "checkpoint already at {} steps; nothing to do ({})",
            cfg.steps,
            ckpt.display()
        ),
    }
    Ok(())
}

fn print_report(report: &EvalReport, tasks: &[TaskId], episodes: usize) {
    for &t in tasks {
        let rows = report.rows.iter().filter(|r| r.task == t);
        let wins = rows.clone().filter(|r| r.success).count();
        let steps: u32 = rows.clone().map(|r| r.steps).sum();
        let n = rows.count().max(1);
        println!(
            "{:<12} {:>3}/{:<3} success {:>6.1}%  mean steps {:.1}",
            t.name(),
            wins,
            episodes,
            100.0 * wins as f64 / n as f64,
            steps as f64 / n as f64
        );
    }
    println!(
        "overall      success {:.1}% over {} episodes",
        100.0 * report.success_rate(None),
        report.rows.len()
    );
}

fn run_eval(a: EvalArgs) -> std::result::Result<(), Failure> {
    let cfg = load_config(&a.config)?;
    let infer_ah = a.infer_ah.unwrap_or(cfg.infer_ah);
    let replan = a.replan_step.unwrap_or(cfg.replan);
    let episodes = a.episodes.unwrap_or(cfg.eval_episodes);
    let max_steps = a.max_steps.unwrap_or(cfg.max_steps as u32);
    if replan < 1 || replan > infer_ah {
        return Err(usage(format!(
            "replan-step {replan} must satisfy 1 <= replan-step <= infer-ah ({infer_ah})"
        )));
    }
    let task_names = a.tasks.clone().unwrap_or_else(|| cfg.tasks.clone());
    let tasks = parse_tasks(&task_names)?;

    let policy_fn: Box<dyn Fn(&EvalObs) -> Result<Vec<[f64; ACTION_DIM]>> + Sync>;
    let label;
    if a.oracle {
        policy_fn = Box::new(oracle_policy(infer_ah));
        label = "oracle expert".to_string();
    } else {
        let path = a.ckpt.as_ref().expect("clap requires --ckpt without --oracle");
        if infer_ah > cfg.horizon {
            return Err(usage(format!(
                "infer-ah {infer_ah} exceeds the config horizon {}",
                cfg.horizon
            )));
        }
        let policy = load_policy(path, &cfg)?;
        label = format!("checkpoint {}", path.display());
        policy_fn = Box::new(move |obs: &EvalObs| {
            obs_policy(&policy, infer_ah, a.seed)(obs)
        });
    }

    let report = evaluate(policy_fn, &tasks, episodes, infer_ah, replan, max_steps, a.seed)?;
    println!(
        "{label}: infer-ah {infer_ah}, replan-step {replan}, seed {}",
        a.seed
    );
    print_report(&report, &tasks, episodes);
    if let Some(out) = &a.out {
        std::fs::write(out, report.to_csv())?;
        println!("per-episode table: {}", out.display());
    }
    Ok(())
}

fn run_sweep(a: SweepArgs) -> std::result::Result<(), Failure> {
    let axis = SweepAxis::from_name(&a.axis).map_err(|e| usage(e.to_string()))?;
    let base = load_config(&a.config)?;
    for v in &a.grid {
        axis.apply(&base, v).map_err(|e| usage(format!("grid value {v:?}: {e}")))?;
    }
    let data = Dataset::read_from(&a.data)?;
    let rows = sweep(axis, &a.grid, &base, &a.seeds, &data, &a.out)?;
    for row in &rows {
        println!(
            "{} = {:<10} seed {}: success {:>6}  loss {:<10} tokens {:>6}  [{}]",
            row.axis,
            row.value,
            row.seed,
            format_rate(row.success_overall),
            format_loss(row.final_loss),
            row.inference_tokens,
            row.status
        );
    }
    println!("{} rows -> {}", rows.len(), a.out.display());
    Ok(())
}

fn format_rate(v: f64) -> String {
    if v.is_finite() {
        format!("{:.1}%", 100.0 * v)
    } else {
        "-".to_string()
    }
}

fn format_loss(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.5}")
    } else {
        "-".to_string()
    }
}

fn write_out(path: &Path, text: &str) -> std::result::Result<(), Failure> {
    std::fs::write(path, text)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn run_analyze(a: AnalyzeArgs) -> std::result::Result<(), Failure> {
    std::fs::create_dir_all(&a.out)?;
    if a.mode == AnalyzeMode::Tokens {
        let mut csv = String::from("tokens_per_view,inference_tokens\n");
        for k in [1, 3, 6, 12, 256] {
            let n = inference_token_count(&BudgetConfig::paper_default(k))?;
            csv.push_str(&format!("{k},{n}\n"));
            println!("k = {k:>3}: {n} tokens per query");
        }
        return write_out(&a.out.join("tokens.csv"), &csv);
    }

    let (ckpt, data_path) = match (&a.ckpt, &a.data) {
        (Some(c), Some(d)) => (c, d),
        _ => {
            return Err(usage("--mode fisher/pca requires --ckpt and --data"));
        }
    };
    let cfg = load_config(&a.config)?;
    let policy = load_policy(ckpt, &cfg)?;
    let data = Dataset::read_from(data_path)?;
    let probe = probe_features(&policy, &data, a.at)?;

    match a.mode {
        AnalyzeMode::Fisher => {
            let mut csv = String::from("regime,fisher_ratio,trace_between,trace_within\n");
            for (regime, feats) in [("before_pooling", &probe.before), ("after_pooling", &probe.after)] {
                let s = fisher_ratio(feats)?;
                csv.push_str(&format!(
                    "{regime},{},{},{}\n",
                    s.fisher_ratio, s.trace_between, s.trace_within
                ));
                println!("{regime:<15} F = {:.4}", s.fisher_ratio);
            }
            write_out(&a.out.join("fisher.csv"), &csv)
        }
        AnalyzeMode::Pca => {
            for (regime, feats) in [("before", &probe.before), ("after", &probe.after)] {
                let mut distinct: Vec<usize> = feats.labels.clone();
                distinct.sort_unstable();
                distinct.dedup();
                let pca = pca_project(&feats.features, 2)?;
                let mut csv = String::from("pc1,pc2,label,task\n");
                let p = pca.projected.data();
                for (i, &label) in feats.labels.iter().enumerate() {
                    let slot = distinct.iter().position(|&l| l == label).expect("label present");
                    csv.push_str(&format!(
                        "{},{},{label},{}\n",
                        p[i * 2],
                        p[i * 2 + 1],
                        probe.class_names[slot]
                    ));
                }
                write_out(&a.out.join(format!("pca_{regime}.csv")), &csv)?;
                let svg = scatter_svg(
                    &pca.projected,
                    &feats.labels,
                    &format!("{regime} pooling, PC1/PC2"),
                )?;
                write_out(&a.out.join(format!("pca_{regime}.svg")), &svg)?;
            }
            Ok(())
        }
        AnalyzeMode::Tokens => unreachable!("handled above"),
    }
}

fn run_gradcheck(a: GradcheckArgs) -> std::result::Result<(), Failure> {
    let settings = GradCheckSettings::default();
    let mut reports: Vec<GradReport> = Vec::new();
    let run_scope = |s: Scope| a.scope == Scope::All || a.scope == s;
    if run_scope(Scope::Pooling) {
        reports.push(pooling_probe(&settings, a.seed, a.inject_fault)?);
    }
    if run_scope(Scope::Flow) {
        reports.push(flow_loss_probe(&settings, a.seed, a.inject_fault)?);
    }
    if run_scope(Scope::Generator) {
        reports.push(generator_probe(&settings, a.seed, a.inject_fault)?);
    }
    for r in &reports {
        println!("{r}");
    }
    let worst = reports
        .iter()
        .filter(|r| !r.pass())
        .max_by(|x, y| x.max_rel_err.total_cmp(&y.max_rel_err));
    match worst {
        Some(r) => Err(Failure::Runtime(format!("gradient check failed: {r}"))),
        None => Ok(()),
    }
}
