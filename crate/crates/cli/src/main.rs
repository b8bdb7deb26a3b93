//! `moc`: run checkpointing scenarios, compare regimes, dump save plans and
//! crash-test the checkpoint store.

mod compare;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use moc_core::engine::crash_trials;
use moc_core::planner::plan_for;
use moc_core::simulator::{adaptive_configure, Simulator};
use moc_core::topology::build_layout;
use moc_core::{PecConfig, Scenario, Strategy};

const STORE_ENV: &str = "MOC_STORE_ROOT";

#[derive(Parser)]
#[command(name = "moc", version, about = "MoE checkpointing planner and fault-injecting simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write its report and timeline.
    Run(RunArgs),
    /// Compare blocking full, async full and async partial checkpointing.
    Compare(CompareArgs),
    /// Print the per-phase save plan of a scenario as JSON.
    DumpPlan(DumpPlanArgs),
    /// Pick snapshot/persist expert counts and the interval from cluster timings.
    Configure(ConfigureArgs),
    /// Interrupt store writes at random offsets and check recovery.
    Crashtest(CrashtestArgs),
}

#[derive(Args, Clone)]
struct Overrides {
    /// Scenario JSON file.
    config: PathBuf,
    /// Override `rng_seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Override `i_ckpt`.
    #[arg(long = "i-ckpt")]
    i_ckpt: Option<u64>,
    /// Override every PEC expert count (`k_pec`, `k_snapshot`, `k_persist`).
    #[arg(long = "k-pec")]
    k_pec: Option<u64>,
    /// Override `strategy` (baseline, equal_sharded_full, equal_sharded_pec, adaptive_pec).
    #[arg(long)]
    strategy: Option<Strategy>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: Overrides,
    /// Report path; defaults to `output.report_path` or `<config>.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Timeline CSV path; defaults to `output.timeline_path` or `<config>.timeline.csv`.
    #[arg(long)]
    timeline: Option<PathBuf>,
    /// Also write the save plan next to the report.
    #[arg(long = "dump-plan")]
    dump_plan: bool,
    /// Persist real checkpoint files under this directory.
    #[arg(long = "store-root", env = STORE_ENV)]
    store_root: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    scenario: Overrides,
    /// Print the table as JSON.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct DumpPlanArgs {
    #[command(flatten)]
    scenario: Overrides,
    /// Write to a file instead of stdout.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct ConfigureArgs {
    #[command(flatten)]
    scenario: Overrides,
    /// Persist-time budget in seconds.
    #[arg(long = "persist-target")]
    persist_target: Option<f64>,
}

#[derive(Args)]
struct CrashtestArgs {
    /// Scratch directory for the trials.
    #[arg(long, env = STORE_ENV)]
    root: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    trials: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure classes and their exit codes.
enum Failure {
    /// Unreadable, malformed or invalid input: exit 2.
    Input(anyhow::Error),
    /// The simulation or store failed: exit 3.
    Simulation(anyhow::Error),
    /// A check ran and found problems: exit 1.
    Check(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Check(_) => 1,
            Failure::Input(_) => 2,
            Failure::Simulation(_) => 3,
        }
    }
}

type Outcome = Result<(), Failure>;

fn input<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Input(e.into())
}

fn simulation<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Simulation(e.into())
}

fn load(o: &Overrides) -> Result<Scenario, Failure> {
    let text = fs::read_to_string(&o.config)
        .with_context(|| format!("reading {}", o.config.display()))
        .map_err(input)?;
    let mut sc = Scenario::from_json(&text)
        .with_context(|| format!("parsing {}", o.config.display()))
        .map_err(input)?;
    if let Some(seed) = o.seed {
        sc.rng_seed = seed;
    }
    if let Some(i) = o.i_ckpt {
        sc.i_ckpt = i;
    }
    if let Some(k) = o.k_pec {
        let selection = sc.pec.as_ref().map(|p| p.selection).unwrap_or_default();
        sc.pec = Some(PecConfig::uniform(k, selection));
    }
    if let Some(s) = o.strategy {
        sc.strategy = s;
    }
    sc.validate()
        .with_context(|| format!("invalid scenario {}", o.config.display()))
        .map_err(input)?;
    Ok(sc)
}

fn beside(config: &Path, suffix: &str) -> PathBuf {
    let stem = config
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "scenario".into());
    config.with_file_name(format!("{stem}.{suffix}"))
}

/// Prints to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Outcome {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(simulation(e)),
        _ => Ok(()),
    }
}

fn write(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)
            .with_context(|| format!("creating {}", dir.display()))
            .map_err(simulation)?;
    }
    fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .map_err(simulation)
}

fn cmd_run(args: RunArgs) -> Outcome {
    let mut sc = load(&args.scenario)?;
    if sc.output.store_root.is_none() {
        sc.output.store_root = args.store_root.clone();
    }
    let cfg = &args.scenario.config;
    let report_path = args
        .report
        .or_else(|| sc.output.report_path.clone())
        .unwrap_or_else(|| beside(cfg, "report.json"));
    let timeline_path = args
        .timeline
        .or_else(|| sc.output.timeline_path.clone())
        .unwrap_or_else(|| beside(cfg, "timeline.csv"));

    let sim = Simulator::new(&sc).map_err(input)?;
    let plan_json = (args.dump_plan || sc.output.dump_plan).then(|| sim.plan().to_json());
    let report = sim.run().map_err(simulation)?;
    write(&report_path, &report.to_json())?;
    write(&timeline_path, &report.timeline_csv())?;
    if let Some(plan) = plan_json {
        write(&report_path.with_extension("plan.json"), &plan)?;
    }
    println!(
        "{} {}: {} iterations executed, {} checkpoints, {} faults",
        report.strategy.name(),
        match report.mode {
            moc_core::Mode::Blocking => "blocking",
            moc_core::Mode::Async => "async",
        },
        report.iterations_executed,
        report.checkpoints.len(),
        report.faults.len()
    );
    println!(
        "O_ckpt {:.6} s (save {:.6}, restart {:.6}, lost {:.6} s / {} iterations)",
        report.o_ckpt_s, report.o_save_s, report.o_restart_s, report.o_lost_s, report.o_lost_iterations
    );
    println!("PLT {:.6}%", report.plt.average * 100.0);
    println!("report: {}", report_path.display());
    println!("timeline: {}", timeline_path.display());
    Ok(())
}

fn cmd_dump_plan(args: DumpPlanArgs) -> Outcome {
    let sc = load(&args.scenario)?;
    let layout = build_layout(&sc.model, &sc.parallel, &sc.cluster).map_err(input)?;
    let plan = plan_for(&layout, sc.strategy, sc.effective_pec().k_snapshot).to_json();
    match args.output {
        Some(path) => write(&path, &plan),
        None => emit(&plan),
    }
}

fn cmd_configure(args: ConfigureArgs) -> Outcome {
    let sc = load(&args.scenario)?;
    let out = adaptive_configure(&sc, args.persist_target).map_err(input)?;
    emit(&serde_json::to_string_pretty(&out).map_err(simulation)?)?;
    if out.snapshot_infeasible {
        eprintln!("warning: even one expert per layer cannot be snapshotted within fb_time");
    }
    if out.persist_target_missed {
        eprintln!("warning: persisting one expert per layer exceeds the persist target");
    }
    Ok(())
}

fn cmd_crashtest(args: CrashtestArgs) -> Outcome {
    let root = args.root.ok_or_else(|| {
        input(anyhow!("no scratch directory: pass --root or set {STORE_ENV}"))
    })?;
    fs::create_dir_all(&root)
        .with_context(|| format!("creating {}", root.display()))
        .map_err(input)?;
    let summary = crash_trials(&root, args.trials, args.seed).map_err(simulation)?;
    println!("{} trials, {} failures", summary.trials, summary.failures.len());
    for f in &summary.failures {
        println!(
            "trial {}: crash at {}/{} bytes: {}",
            f.trial,
            f.crash_offset,
            f.write_cost,
            f.failure.as_deref().unwrap_or("")
        );
    }
    if summary.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!("{} crash trials failed", summary.failures.len())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => load(&a.scenario).and_then(|sc| compare::cmd_compare(&sc, a.json)),
        Command::DumpPlan(a) => cmd_dump_plan(a),
        Command::Configure(a) => cmd_configure(a),
        Command::Crashtest(a) => cmd_crashtest(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Input(e) | Failure::Simulation(e) => eprintln!("error: {e:#}"),
                Failure::Check(msg) => eprintln!("error: {msg}"),
            }
            ExitCode::from(f.code())
        }
    }
}
