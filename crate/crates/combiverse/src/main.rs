use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use combiverse::stages::{read_ablation_report, read_placements};
use combiverse::{examples, exit_code, Options, Pipeline, RunConfig, Stage};
use combiverse_core::combiner::AblationMode;
use combiverse_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "combiverse",
    version,
    about = "Assemble multi-object 3D scenes from a single image"
)]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG overrides.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Re-run stages even when their outputs are current.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Falls back to the config's `run_dir`, then to COMBIVERSE_RUN_DIR.
    #[arg(long)]
    run_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Segment, noise and inpaint every object.
    Decompose(RunArgs),
    /// Per-object meshes and the scene depth map.
    Reconstruct(RunArgs),
    /// Initialize and optimize the placements, then export.
    Combine(RunArgs),
    /// All stages in order, resuming where a previous run stopped.
    RunAll(RunArgs),
    /// One combine run per guidance mode with shared seeds.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated modes, e.g. base,depth,sds,ssds-full.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<AblationMode>>,
    },
    /// Print the default configuration.
    DefaultConfig {
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Write a bundled example scene and config.
    Example {
        #[arg(value_parser = examples::NAMES)]
        name: String,
        dir: PathBuf,
    },
    /// Serve a mock backend over the external-program protocol.
    #[command(hide = true)]
    Adapter {
        role: String,
        model: String,
        operation: String,
        dir: PathBuf,
    },
}

fn open(args: &RunArgs) -> Result<Pipeline> {
    let config = RunConfig::load(&args.config)?;
    Pipeline::open(
        config,
        &Options {
            force: args.force,
            seed: args.seed,
            run_dir: args.run_dir.clone(),
        },
    )
}

fn print_placements(p: &Pipeline) -> Result<()> {
    let report = read_placements(p.run_dir())?;
    for (name, q) in report.names.iter().zip(&report.final_params) {
        let t = q.translation;
        let r = q.rotation;
        println!(
            "{name}: scale {:.4}  rotation [{:.4}, {:.4}, {:.4}]  translation [{:.4}, {:.4}, {:.4}]",
            q.scale, r[0], r[1], r[2], t[0], t[1], t[2]
        );
    }
    if let Some(e) = report.relation_error_px {
        println!("relation error: {e:.3} px");
    }
    println!(
        "exported {}",
        p.run_dir().join("combine").join("composition.gltf").display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Decompose(a) => {
            open(&a)?.run(Stage::Decompose)?;
        }
        Command::Reconstruct(a) => {
            open(&a)?.run(Stage::Reconstruct)?;
        }
        Command::Combine(a) => {
            let mut p = open(&a)?;
            p.run(Stage::Combine)?;
            print_placements(&p)?;
        }
        Command::RunAll(a) => {
            let mut p = open(&a)?;
            p.run_all()?;
            print_placements(&p)?;
        }
        Command::Ablate { run, modes } => {
            let mut p = open(&run)?;
            if let Some(m) = modes {
                p.set_ablation_modes(m)?;
            }
            p.run(Stage::Ablate)?;
            println!(
                "{:<14} {:>14} {:>14} {:>14}",
                "mode", "reference", "guidance", "relation px"
            );
            for row in read_ablation_report(p.run_dir())? {
                let (r, g) = row
                    .final_losses
                    .map(|l| (l.reference, l.guidance))
                    .unwrap_or((f64::NAN, f64::NAN));
                let e = row.relation_error_px.map_or("-".to_string(), |e| format!("{e:.3}"));
                println!("{:<14} {:>14.6} {:>14.6} {:>14}", row.mode.name(), r, g, e);
            }
        }
        Command::DefaultConfig { output } => {
            let text = RunConfig::default().to_toml()?;
            match output {
                Some(path) => std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?,
                None => print!("{text}"),
            }
        }
        Command::Example { name, dir } => {
            for p in examples::by_name(&name)?.write(&dir)? {
                println!("{}", p.display());
            }
        }
        Command::Adapter {
            role,
            model,
            operation,
            dir,
        } => combiverse::backends::serve_mock(&role, &model, &operation, &dir)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
