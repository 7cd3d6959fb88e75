use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use maskrl::applicability::{ClassifierSource, KnowledgeSource};
use maskrl::experiment::{
    compare_modes, emit_heatmaps, epsilon_sweep, load_experiment, pruning_report, run_experiment, summarize,
    write_comparison, Comparison, ExperimentConfig, Mode, ModeRuns, DEFAULT_PSI,
};
use maskrl::gridworld::Task;
use maskrl::trainer::EpsilonSchedule;
use maskrl::transfer::{classifier_for_task, load_checkpoint};
use maskrl::Error;

#[derive(Parser)]
#[command(
    name = "maskrl",
    version,
    about = "Train and compare PPO agents with action-applicability masks"
)]
struct Cli {
    /// Log progress per iteration.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one mode over several seeds.
    Run(RunArgs),
    /// Summarize finished experiment directories.
    Compare {
        dirs: Vec<PathBuf>,
        /// Write the summary table here as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Learn the classifier at several constant epsilon values.
    Sweep {
        #[arg(long)]
        task: Task,
        /// Comma-separated epsilon values.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.25, 0.5, 0.75])]
        epsilon: Vec<f64>,
        #[arg(long, value_parser = parse_seeds)]
        seeds: Option<Seeds>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export applicability heatmaps with oracle ground truth.
    Heatmap {
        #[arg(long)]
        task: Task,
        /// Classifier checkpoint; the oracle is used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pruned fraction of every task.
    PruneReport {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a transfer mode from a checkpoint.
    Transfer(TransferArgs),
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    BaselinePpo,
    FullKnowledge,
    PartialKnowledge,
    LearnClassifier,
    TransferClassifier,
    WarmStart,
    PolicyReuse,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum TransferMode {
    TransferClassifier,
    WarmStart,
    PolicyReuse,
}

#[derive(Clone, Debug)]
struct Seeds(Vec<u64>);

/// `0,1,2` or a half-open range `0..5`.
fn parse_seeds(s: &str) -> Result<Seeds, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
        if a >= b {
            return Err(format!("empty seed range {s}"));
        }
        return Ok(Seeds((a..b).collect()));
    }
    s.split(',')
        .map(|p| p.trim().parse::<u64>().map_err(|e| format!("bad seed `{p}`: {e}")))
        .collect::<Result<_, _>>()
        .map(Seeds)
}

#[derive(Args)]
struct Overrides {
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<Seeds>,
    /// Constant mask-gate epsilon.
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    /// Env-step budget per seed.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment TOML; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<Task>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Expert probability for policy_reuse.
    #[arg(long)]
    psi: Option<f64>,
    /// Covered actions for partial_knowledge, comma separated.
    #[arg(long, value_delimiter = ',')]
    partial_actions: Vec<String>,
    /// Learn the uncovered actions in partial_knowledge.
    #[arg(long)]
    with_classifier: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    task: Task,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "transfer_classifier")]
    mode: TransferMode,
    /// Keep the transferred classifier fixed.
    #[arg(long)]
    freeze: bool,
    /// Map policy heads by action name when the action sets differ.
    #[arg(long)]
    share_actions: bool,
    #[arg(long, default_value_t = DEFAULT_PSI)]
    psi: f64,
    #[command(flatten)]
    overrides: Overrides,
}

fn config_error(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn build_mode(args: &RunArgs, mode: ModeArg) -> Result<Mode, Error> {
    let ckpt = || {
        args.checkpoint
            .clone()
            .ok_or_else(|| config_error("this mode needs --checkpoint"))
    };
    Ok(match mode {
        ModeArg::BaselinePpo => Mode::BaselinePpo,
        ModeArg::FullKnowledge => Mode::FullKnowledge,
        ModeArg::PartialKnowledge => Mode::PartialKnowledge {
            actions: if args.partial_actions.is_empty() {
                maskrl::gridworld::Action::MOVES
                    .iter()
                    .map(|a| a.name().to_string())
                    .collect()
            } else {
                args.partial_actions.clone()
            },
            with_classifier: args.with_classifier,
        },
        ModeArg::LearnClassifier => Mode::LearnClassifier,
        ModeArg::TransferClassifier => Mode::TransferClassifier {
            checkpoint: ckpt()?,
            freeze: false,
        },
        ModeArg::WarmStart => Mode::WarmStart {
            checkpoint: ckpt()?,
            share_actions: false,
        },
        ModeArg::PolicyReuse => Mode::PolicyReuse {
            checkpoint: ckpt()?,
            psi: args.psi.unwrap_or(DEFAULT_PSI),
        },
    })
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &Overrides) -> Result<(), Error> {
    if let Some(Seeds(s)) = &o.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(e) = o.epsilon {
        cfg.trainer.epsilon = EpsilonSchedule::constant(e);
    }
    if let Some(t) = o.tau {
        cfg.trainer.tau = t;
    }
    if let Some(s) = o.steps {
        cfg.trainer.max_env_steps = s;
    }
    if let Some(out) = &o.out {
        cfg.out = out.clone();
    }
    cfg.validate()
}

fn run_config(args: &RunArgs) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => {
            let mut cfg = ExperimentConfig::load(path)?;
            if let Some(task) = args.task {
                cfg.task = task;
            }
            if let Some(m) = args.mode {
                cfg.mode = build_mode(args, m)?;
            }
            cfg
        }
        None => {
            let task = args
                .task
                .ok_or_else(|| config_error("--task or --config is required"))?;
            let mode = args
                .mode
                .ok_or_else(|| config_error("--mode or --config is required"))?;
            let mode = build_mode(args, mode)?;
            let out = ExperimentConfig::default_out(task, &mode);
            ExperimentConfig::new(task, mode, (0..5).collect(), out)?
        }
    };
    apply_overrides(&mut cfg, &args.overrides)?;
    Ok(cfg)
}

fn print_comparison(cmp: &Comparison) {
    println!("task {} budget {}", cmp.task, cmp.budget);
    println!(
        "{:<28} {:>10} {:>8} {:>12} {:>12} {:>5}",
        "mode", "steps@0.9", "reached", "final_reward", "final_inapp", "rank"
    );
    for m in &cmp.modes {
        println!(
            "{:<28} {:>10.0} {:>5}/{:<2} {:>12.4} {:>12.3} {:>5}",
            m.label,
            m.median_steps_to_threshold,
            m.seeds_reached,
            m.seeds,
            m.final_reward,
            m.final_inapplicable,
            m.rank
        );
    }
}

fn execute(cfg: ExperimentConfig) -> Result<(), Error> {
    eprintln!(
        "running {} on {} with seeds {:?} into {}",
        cfg.mode.name(),
        cfg.task,
        cfg.seeds,
        cfg.out.display()
    );
    let result = run_experiment(&cfg)?;
    let summary = summarize(cfg.mode.name(), &result.metrics(), cfg.trainer.max_env_steps)?;
    print_comparison(&Comparison {
        task: cfg.task.name().to_string(),
        budget: cfg.trainer.max_env_steps,
        modes: vec![summary],
    });
    Ok(())
}

fn compare(dirs: &[PathBuf], out: Option<&Path>) -> Result<(), Error> {
    if dirs.is_empty() {
        return Err(Error::Usage("compare needs at least one experiment directory".into()));
    }
    let mut results = Vec::new();
    for dir in dirs {
        let (cfg, runs) = load_experiment(dir)?;
        let label = dir
            .file_name()
            .map_or_else(|| cfg.mode.name().to_string(), |n| n.to_string_lossy().into_owned());
        results.push(ModeRuns::new(label, cfg.task, cfg.trainer.max_env_steps, runs));
    }
    let cmp = compare_modes(&results)?;
    print_comparison(&cmp);
    if let Some(path) = out {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        write_comparison(&cmp, file)?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Run(args) => execute(run_config(&args)?).map(|_| true),
        Command::Compare { dirs, out } => compare(&dirs, out.as_deref()).map(|_| true),
        Command::Sweep {
            task,
            epsilon,
            seeds,
            tau,
            steps,
            out,
        } => {
            let mut cfg = ExperimentConfig::new(task, Mode::LearnClassifier, (0..5).collect(), out.clone())?;
            apply_overrides(
                &mut cfg,
                &Overrides {
                    seeds,
                    epsilon: None,
                    tau,
                    steps,
                    out: Some(out),
                },
            )?;
            let report = epsilon_sweep(&cfg, &epsilon)?;
            println!(
                "{:>8} {:>10} {:>8} {:>12} {:>8}",
                "epsilon", "steps@0.9", "reached", "final_reward", "flag"
            );
            for r in &report.rows {
                println!(
                    "{:>8} {:>10.0} {:>8} {:>12.4} {:>8}",
                    r.epsilon,
                    r.median_steps_to_threshold,
                    r.seeds_reached,
                    r.final_reward,
                    if r.flagged { "LOW" } else { "" }
                );
            }
            Ok(true)
        }
        Command::Heatmap {
            task,
            checkpoint,
            tau,
            out,
        } => {
            let spec = task.spec();
            let source = match checkpoint {
                Some(path) => {
                    let ckpt = load_checkpoint(&path)?;
                    KnowledgeSource::Classifier(ClassifierSource::new(classifier_for_task(&ckpt, &spec.actions)?))
                }
                None => KnowledgeSource::Oracle(spec.clone()),
            };
            let reports = emit_heatmaps(&spec, &source, tau, &out)?;
            let total: usize = reports.iter().map(|r| r.mismatches).sum();
            for r in &reports {
                println!("{:<8} {:<12} mismatches {}", r.action, r.context, r.mismatches);
            }
            println!("total mismatches {total}");
            Ok(true)
        }
        Command::PruneReport { out } => {
            let report = pruning_report(out.as_deref())?;
            for r in &report.rows {
                println!("{:<10} {:.4}", r.task, r.pruned_fraction);
            }
            if !report.doorkey_exceeds_xisland {
                eprintln!("doorkey1 does not prune more than xisland1");
            }
            if !report.maze_in_band {
                eprintln!("maze pruned fraction is outside [0.4, 0.6]");
            }
            Ok(report.holds())
        }
        Command::Transfer(args) => {
            let mode = match args.mode {
                TransferMode::TransferClassifier => Mode::TransferClassifier {
                    checkpoint: args.checkpoint,
                    freeze: args.freeze,
                },
                TransferMode::WarmStart => Mode::WarmStart {
                    checkpoint: args.checkpoint,
                    share_actions: args.share_actions,
                },
                TransferMode::PolicyReuse => Mode::PolicyReuse {
                    checkpoint: args.checkpoint,
                    psi: args.psi,
                },
            };
            let out = ExperimentConfig::default_out(args.task, &mode);
            let mut cfg = ExperimentConfig::new(args.task, mode, (0..5).collect(), out)?;
            apply_overrides(&mut cfg, &args.overrides)?;
            execute(cfg).map(|_| true)
        }
    }
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_) | Error::Parse { .. } | Error::Usage(_) | Error::ActionSetMismatch { .. }
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}
