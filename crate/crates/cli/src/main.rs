mod commands;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use chamelion_core::config::PipelineConfig;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

/// LiDAR change detection and long-term map maintenance.
#[derive(Parser, Debug)]
#[command(name = "chamelion", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Pipeline configuration (`key = value` lines); built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "CHAMELION_THREADS", default_value_t = 0)]
    threads: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Dualhead,
    Occupancy,
    Visibility,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AxisArg {
    Voxel,
    Noise,
    TauScan,
    TauMap,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Raycast a synthetic world into prior and current sessions.
    Synth {
        /// World description to raycast instead of a generated one.
        #[arg(long)]
        world: Option<PathBuf>,
        /// Seed of the generated world.
        #[arg(long, default_value_t = 1)]
        world_seed: u64,
        /// Generated world keeps every object in both sessions.
        #[arg(long)]
        no_change: bool,
        /// Moving objects per session in the generated world.
        #[arg(long, default_value_t = 0)]
        movers: usize,
        /// Range noise standard deviation, m.
        #[arg(long, default_value_t = 0.01)]
        sensor_noise: f64,
        /// Output directory; receives world.txt, prior/ and current/.
        #[arg(long)]
        out: PathBuf,
    },
    /// Accumulate a session into a deduplicated prior map.
    BuildMap {
        /// Session manifest.
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate augmented training pairs from one labelled session.
    Augment {
        #[arg(long)]
        session: PathBuf,
        /// Output directory; one pair_NNNN/ per pair.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the dual-head classifier on augmented pairs.
    Train {
        /// Directory written by `augment`.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Label every current scan against a prior map.
    Detect {
        #[arg(long)]
        map: PathBuf,
        /// Current session manifest.
        #[arg(long)]
        current: PathBuf,
        /// Detector; defaults to the configured method.
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        /// Trained model, required by the dual-head method.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Output directory for labelled scans and detect.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fuse every current scan into the prior map and write the maintained map.
    Update {
        #[arg(long)]
        map: PathBuf,
        #[arg(long)]
        current: PathBuf,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        model: Option<PathBuf>,
        /// Maintained map (PLY).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score one configuration on a session pair and write a one-row report.
    Eval {
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        current: PathBuf,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Vary one setting over a grid and write the report.
    Sweep {
        #[arg(long)]
        prior: PathBuf,
        #[arg(long)]
        current: PathBuf,
        #[arg(long, value_enum)]
        method: Option<MethodArg>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Comma-separated grid values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Record measured per-scan timings (non-deterministic column).
        #[arg(long)]
        timing: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a copy of a session with perturbed scan poses.
    Perturb {
        #[arg(long)]
        session: PathBuf,
        /// Noise level; defaults to the configured level.
        #[arg(long)]
        level: Option<f64>,
        /// Output manifest.
        #[arg(long)]
        out: PathBuf,
    },
}

/// Failure with its exit status.
#[derive(Debug)]
pub enum Failure {
    /// A required input is missing (exit 2).
    Missing(String),
    /// The configuration cannot be parsed or is invalid (exit 3).
    Config(String),
    Other(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        let e = e.into();
        let not_found = e.chain().any(|c| {
            c.downcast_ref::<std::io::Error>().is_some_and(|io| io.kind() == std::io::ErrorKind::NotFound)
                || matches!(c.downcast_ref::<chamelion_core::Error>(), Some(chamelion_core::Error::Io(io)) if io.kind() == std::io::ErrorKind::NotFound)
        });
        if not_found {
            Failure::Missing(format!("{e:#}"))
        } else {
            Failure::Other(e)
        }
    }
}

/// Fails with exit status 2 unless `p` exists.
pub fn input(p: &Path) -> Result<&Path, Failure> {
    if p.exists() {
        Ok(p)
    } else {
        Err(Failure::Missing(format!("input not found: {}", p.display())))
    }
}

fn load_config(g: &Global) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &g.config {
        Some(p) => {
            let text = std::fs::read_to_string(input(p)?).map_err(Failure::from)?;
            PipelineConfig::parse(&text).map_err(|e| Failure::Config(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn config_help() -> String {
    let mut s = String::from("Configuration keys and defaults (override with --config):\n");
    for (k, v) in PipelineConfig::default().entries() {
        s.push_str(&format!("  {k} = {v}\n"));
    }
    s
}

fn run(cli: Cli) -> Result<(), Failure> {
    if cli.global.threads > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(cli.global.threads).build_global().map_err(anyhow::Error::from)?;
    }
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Synth { world, world_seed, no_change, movers, sensor_noise, out } => {
            commands::synth(&cfg, world.as_deref(), world_seed, no_change, movers, sensor_noise, &out)
        }
        Command::BuildMap { session, out } => commands::build_map(&cfg, &session, &out),
        Command::Augment { session, out } => commands::augment(&cfg, &session, &out),
        Command::Train { pairs, out } => commands::train(&cfg, &pairs, &out),
        Command::Detect { map, current, method, model, out } => commands::detect(&cfg, &map, &current, method, model.as_deref(), &out),
        Command::Update { map, current, method, model, out } => commands::update(&cfg, &map, &current, method, model.as_deref(), &out),
        Command::Eval { prior, current, method, model, out } => commands::eval(&cfg, &prior, &current, method, model.as_deref(), &out),
        Command::Sweep { prior, current, method, model, axis, values, timing, out } => {
            commands::sweep(&cfg, &prior, &current, method, model.as_deref(), axis, &values, timing, &out)
        }
        Command::Perturb { session, level, out } => commands::perturb(&cfg, &session, level, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let help = config_help();
    let cmd = Cli::command().after_help(help.clone()).mut_subcommands(|s| s.after_help(help.clone()));
    let cli = match Cli::from_arg_matches(&cmd.get_matches()) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Missing(m) => (2, m),
                Failure::Config(m) => (3, m),
                Failure::Other(e) => (1, format!("{e:#}")),
            };
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::from(code)
        }
    }
}
