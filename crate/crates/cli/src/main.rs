use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use ldg_core::io::{export_surface, read_state};
use ldg_core::scenario::{manufactured_study, preset, run_scenario, study_csv, ScenarioConfig, StudyKind, PRESETS};

/// Isometric bilayer plate bending by an LDG gradient flow.
#[derive(Parser, Debug)]
#[command(name = "ldg", version, about)]
struct Cli {
    /// Worker threads for assembly (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Run single-threaded so repeated runs are bitwise reproducible.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a gradient flow scenario.
    Run(RunArgs),
    /// Run a manufactured-solution study and print its CSV.
    Study(StudyArgs),
    /// Export a saved state as a VTK surface.
    Export(ExportArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// TOML scenario file.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in scenario: flat, cylinder, cigar, helix, climate, origami.
    #[arg(long)]
    preset: Option<String>,
    /// Override a config entry, e.g. `flow.tau=1e-3` (repeatable).
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args, Debug)]
struct StudyArgs {
    /// hessian_convergence, interpolation or cg_scaling.
    kind: String,
    #[arg(long, default_value_t = 3)]
    levels: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// A `final_state.bin` written by `run`.
    #[arg(long)]
    state: PathBuf,
    /// Destination `.vtk` file.
    #[arg(long)]
    out: PathBuf,
}

fn resolve_config(args: &RunArgs) -> Result<ScenarioConfig> {
    let mut config = match (&args.config, &args.preset) {
        (Some(path), None) => ScenarioConfig::from_file(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => bail!("either --config or --preset is required (presets: {})", PRESETS.join(", ")),
        (Some(_), Some(_)) => unreachable!("clap rejects both"),
    };
    for o in &args.overrides {
        config.apply_override(o)?;
    }
    if let Some(out) = &args.out {
        config.output.dir = out.clone();
    }
    Ok(config)
}

fn run(args: RunArgs) -> Result<()> {
    let config = resolve_config(&args)?;
    if args.dry_run {
        print!("{}", config.to_toml_string()?);
        return Ok(());
    }
    info!("running '{}' into {}", config.name, config.output.dir.display());
    let outcome = run_scenario(&config).with_context(|| format!("scenario '{}' failed", config.name))?;
    let last = outcome.state.last().expect("at least the initial record");
    println!(
        "{}: {} steps, converged {}, E_h {:.6}, E_full {:.6}, max defect {:.3e}, output {}",
        config.name,
        outcome.state.step,
        outcome.state.converged,
        last.energy,
        last.energy_full,
        last.max_defect,
        outcome.out_dir.display()
    );
    Ok(())
}

fn study(args: StudyArgs) -> Result<()> {
    let kind: StudyKind = args.kind.parse()?;
    let rows = manufactured_study(kind, args.levels)?;
    let csv = study_csv(kind, &rows);
    match args.out {
        Some(path) => std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn export(args: ExportArgs) -> Result<()> {
    let y = read_state(&args.state).with_context(|| format!("reading {}", args.state.display()))?;
    export_surface(&y, &args.out).with_context(|| format!("writing {}", args.out.display()))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let threads = if cli.deterministic { Some(1) } else { cli.threads };
    if let Some(n) = threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: could not configure {n} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Study(a) => study(a),
        Command::Export(a) => export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
