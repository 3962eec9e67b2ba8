use clap::{Parser, Subcommand};
use lidarseg::scan_io::{benchmark_scene, SceneConfig};
use lidarseg_cli::config::{Command, Mode, PipelineConfig};
use lidarseg_cli::{dataset, exit_code, pipeline, report, run};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "lidarseg",
    version,
    about = "Pointwise movable / dynamic classification of LiDAR scan sequences"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config modes; `all` runs exp1, exp2 and exp3.
    #[arg(long)]
    mode: Option<String>,
    /// Overrides the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Range images of every scan as PGM files.
    Project(RunArgs),
    /// Train the pixel scorer on labeled scans.
    Train(RunArgs),
    /// Per-point labels for every frame.
    Classify(RunArgs),
    /// Metrics, PR curves and plots for classified frames.
    Eval(RunArgs),
    /// Write a synthetic sequence with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Scene description (TOML); the built-in benchmark scene if omitted.
        #[arg(long, conflicts_with = "training")]
        scene: Option<PathBuf>,
        /// Write this many independent single-frame training scenes instead.
        #[arg(long)]
        training: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load(args: &RunArgs) -> lidarseg::Result<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = &args.mode {
        cfg.modes = if mode == "all" {
            Mode::ALL.to_vec()
        } else {
            vec![mode.parse().map_err(lidarseg::Error::Config)?]
        };
    }
    if let Some(out) = &args.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn execute(cmd: Cmd) -> lidarseg::Result<()> {
    let (command, args) = match cmd {
        Cmd::Synth {
            out,
            scene,
            training,
            seed,
        } => {
            return match training {
                Some(n) => dataset::write_training_set(&out, n, seed),
                None => {
                    let scene = match scene {
                        Some(path) => SceneConfig::load(&path)?,
                        None => benchmark_scene(seed),
                    };
                    dataset::write_scene(&out, &scene)
                }
            };
        }
        Cmd::Project(a) => (Command::Project, a),
        Cmd::Train(a) => (Command::Train, a),
        Cmd::Classify(a) => (Command::Classify, a),
        Cmd::Eval(a) => (Command::Eval, a),
    };
    let cfg = load(&args)?;
    let (manifest, result) = match command {
        Command::Project => run(command, &cfg, pipeline::project_scans),
        Command::Train => {
            let (m, r) = run(command, &cfg, pipeline::train);
            (m, r.map(|_| ()))
        }
        Command::Classify => run(command, &cfg, pipeline::classify),
        Command::Eval => {
            let (m, r) = run(command, &cfg, report::evaluate);
            if let Ok(rep) = &r {
                print!("{}", rep.comparison_csv());
            }
            (m, r.map(|_| ()))
        }
    };
    log::info!(
        "{} finished in {:.2} s with {} warnings",
        command.name(),
        manifest.total_seconds,
        manifest.warnings.len()
    );
    result
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
