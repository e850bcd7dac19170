use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use avc_core::barrier::BarrierShape;
use avc_core::eval::{
    format_report_table, read_records, report_by_controller, run_eval, write_records, write_report_csv, ControllerSpec,
    EvalConfig,
};
use avc_core::powerflow::{solve_traced, SolverOptions};
use avc_core::profiles::load_bundle;
use avc_core::profiles::synthetic::{write_bundle, SyntheticOptions};
use avc_core::{DroopParams, EnvConfig, InjectionSet, NetworkCase, OpfSettings};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

/// Input problems map to exit code 1; everything else is a runtime failure.
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    anyhow::Error::new(Invalid(msg.into()))
}

#[derive(Parser)]
#[command(
    name = "avc",
    version,
    about = "Active voltage control simulator for radial distribution networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one power flow and print the grid state as JSON.
    Pf(PfArgs),
    /// Evaluate a controller over random episodes and write records plus a report.
    Run(RunArgs),
    /// Summarize episode records.
    Report(ReportArgs),
    /// Write a synthetic profile bundle for a case.
    Synth(SynthArgs),
}

#[derive(clap::Args)]
struct PfArgs {
    /// Case file, or the name of a bundled case (case33, case141).
    #[arg(long)]
    case: String,
    /// JSON file with p_pv, q_pv, p_load, q_load (MW / MVAr).
    #[arg(long)]
    injections: PathBuf,
    /// Also print the per-iteration residuals.
    #[arg(long)]
    trace: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ControllerKind {
    None,
    Droop,
    Opf,
    Random,
}

#[derive(clap::Args, Default)]
struct RunArgs {
    /// TOML file with the same keys as the flags; flags win.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    case: Option<String>,
    /// Profile bundle directory (manifest.json plus CSV files).
    #[arg(long)]
    profiles: Option<PathBuf>,
    #[arg(long, value_enum)]
    controller: Option<ControllerKind>,
    #[arg(long, value_parser = parse_barrier)]
    barrier: Option<BarrierShape>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    episode_length: Option<usize>,
    #[arg(long)]
    obs_noise: Option<f64>,
    #[arg(long)]
    profile_noise: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Droop: iterate droop and power flow to a fixed point within each step.
    #[arg(long)]
    droop_fixed_point: bool,
}

fn parse_barrier(s: &str) -> Result<BarrierShape, String> {
    s.parse().map_err(|e: avc_core::Error| e.to_string())
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunFile {
    case: Option<String>,
    profiles: Option<PathBuf>,
    controller: Option<ControllerKind>,
    barrier: Option<BarrierShape>,
    episodes: Option<usize>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    env: Option<EnvConfig>,
    droop: Option<DroopParams>,
    opf: Option<OpfSettings>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Table,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// A records directory or a single .jsonl file.
    #[arg(long)]
    records: PathBuf,
    #[arg(long, value_enum, default_value = "table")]
    format: Format,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    case: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 28)]
    days: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Rated PV generation over rated load.
    #[arg(long, default_value_t = 2.5)]
    penetration: f64,
    /// Peak total load in MW; defaults to the case's nominal total.
    #[arg(long)]
    rated_load: Option<f64>,
}

fn load_case(spec: &str) -> anyhow::Result<NetworkCase> {
    let path = Path::new(spec);
    if path.exists() {
        Ok(NetworkCase::from_path(path)?)
    } else if !spec.contains(['/', '\\', '.']) {
        Ok(NetworkCase::bundled(spec)?)
    } else {
        Err(invalid(format!("case file {spec} does not exist")))
    }
}

fn pf(args: PfArgs) -> anyhow::Result<()> {
    let case = load_case(&args.case)?;
    let text = fs::read_to_string(&args.injections)
        .map_err(|e| invalid(format!("cannot read {}: {e}", args.injections.display())))?;
    let inj: InjectionSet = serde_json::from_str(&text).map_err(|e| invalid(format!("injections: {e}")))?;
    let (state, trace) = solve_traced(&case, &inj, &SolverOptions::default())?;
    let mut out = io::stdout().lock();
    if args.trace {
        for it in &trace {
            writeln!(out, "{}", serde_json::to_string(it)?)?;
        }
    }
    writeln!(out, "{}", serde_json::to_string_pretty(&state)?)?;
    if !state.converged {
        bail!("power flow did not converge after {} iterations", state.iterations);
    }
    Ok(())
}

struct RunPlan {
    case: NetworkCase,
    profiles: PathBuf,
    eval: EvalConfig,
    out: PathBuf,
}

fn plan_run(args: RunArgs) -> anyhow::Result<RunPlan> {
    let file: RunFile = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?
        }
        None => RunFile::default(),
    };
    let need = |what: &str| invalid(format!("missing --{what} (or `{what}` in the config file)"));
    let case = load_case(&args.case.or(file.case).ok_or_else(|| need("case"))?)?;
    let profiles = args.profiles.or(file.profiles).ok_or_else(|| need("profiles"))?;
    let out = args.out.or(file.out).ok_or_else(|| need("out"))?;

    let mut env = file.env.unwrap_or_default();
    if let Some(b) = args.barrier.or(file.barrier) {
        env.barrier = b;
    }
    if let Some(n) = args.episode_length {
        env.episode_length = n;
    }
    if let Some(s) = args.obs_noise {
        env.obs_noise_sigma = s;
    }
    if let Some(s) = args.profile_noise {
        env.profile_noise_sigma = s;
    }
    if let Some(a) = args.alpha {
        env.alpha = a;
    }
    let mut droop = file.droop.unwrap_or_default();
    droop.fixed_point |= args.droop_fixed_point;
    let controller = match args.controller.or(file.controller).unwrap_or(ControllerKind::None) {
        ControllerKind::None => ControllerSpec::None,
        ControllerKind::Droop => ControllerSpec::Droop(droop),
        ControllerKind::Opf => ControllerSpec::Opf(file.opf.unwrap_or_default()),
        ControllerKind::Random => ControllerSpec::Random,
    };
    let eval = EvalConfig {
        env,
        controller,
        episodes: args.episodes.or(file.episodes).unwrap_or(10),
        seed: args.seed.or(file.seed).unwrap_or(0),
    };
    Ok(RunPlan {
        case,
        profiles,
        eval,
        out,
    })
}

fn run(args: RunArgs) -> anyhow::Result<()> {
    let plan = plan_run(args)?;
    let store = load_bundle(&plan.profiles, &plan.case)?;
    let output = run_eval(Arc::new(plan.case), Arc::new(store), &plan.eval)?;

    let records_dir = plan.out.join("records");
    if records_dir.exists() {
        // stale episodes from a larger earlier run would otherwise be mixed in
        fs::remove_dir_all(&records_dir).with_context(|| format!("clearing {}", records_dir.display()))?;
    }
    write_records(&records_dir, &output.records)?;
    let rows = vec![(plan.eval.controller.name().to_owned(), output.aggregate.clone())];
    let mut csv = Vec::new();
    write_report_csv(&mut csv, &rows)?;
    fs::write(plan.out.join("report.csv"), csv)?;
    let summary = serde_json::json!({
        "config": plan.eval,
        "aggregate": output.aggregate,
        "episodes": output.reports,
    });
    fs::write(plan.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    print!("{}", format_report_table(&rows));
    Ok(())
}

fn report(args: ReportArgs) -> anyhow::Result<()> {
    if !args.records.exists() {
        return Err(invalid(format!("{} does not exist", args.records.display())));
    }
    let records = read_records(&args.records)?;
    if records.is_empty() {
        return Err(invalid(format!("no records found in {}", args.records.display())));
    }
    let rows = report_by_controller(&records)?;
    match args.format {
        Format::Csv => write_report_csv(io::stdout().lock(), &rows)?,
        Format::Table => print!("{}", format_report_table(&rows)),
    }
    Ok(())
}

fn synth(args: SynthArgs) -> anyhow::Result<()> {
    let case = load_case(&args.case)?;
    if args.days == 0 {
        return Err(invalid("--days must be positive"));
    }
    let opts = SyntheticOptions {
        days: args.days,
        seed: args.seed,
        penetration_ratio: args.penetration,
        rated_load_mw: args.rated_load,
        ..Default::default()
    };
    let manifest = write_bundle(&args.out, &case, &opts)?;
    // the bundle must load back through the full pipeline
    load_bundle(&args.out, &case)?;
    println!(
        "wrote {} days for {} to {} ({})",
        args.days,
        case.name(),
        args.out.display(),
        manifest.files.join(", ")
    );
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Invalid>().is_some() {
        return 1;
    }
    match err.downcast_ref::<avc_core::Error>() {
        Some(e) if e.is_validation() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Pf(a) => pf(a),
        Command::Run(a) => run(a),
        Command::Report(a) => report(a),
        Command::Synth(a) => synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
