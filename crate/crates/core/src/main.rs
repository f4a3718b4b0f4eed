use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use metaloc::experiment::{self, ExperimentConfig, Layout, RunManifest};
use metaloc::report::{write_report, ReportInputs};
use metaloc::Error;

#[derive(Parser)]
#[command(name = "metaloc", version, about = "CSI positioning with shared-trunk multi-environment training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Global seed; overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one dataset per environment.
    GenData(Common),
    /// Joint training of the shared trunk over all source environments.
    MetaTrain(Common),
    /// Separate training per source environment.
    Train(Common),
    /// Transfer the joint trunks to the target environment.
    Transfer(Common),
    /// Full learning-curve grid over source counts and target sample counts.
    Curve(Common),
    /// Summary tables and plots from result CSVs.
    Report {
        #[command(flatten)]
        common: Common,
        /// CSVs to summarize; defaults to every result CSV under the output
        /// directory.
        inputs: Vec<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Json(_) | Error::InvalidGeometry(_) => 1,
        _ => 2,
    }
}

fn load_config(common: &Common) -> metaloc::Result<(ExperimentConfig, String)> {
    let bytes = std::fs::read(&common.config).map_err(|e| {
        Error::Config(format!("cannot read config {}: {e}", common.config.display()))
    })?;
    let mut cfg = ExperimentConfig::from_json(&bytes)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok((cfg, experiment::config_hash(&bytes)))
}

fn default_inputs(layout: &Layout) -> Vec<PathBuf> {
    [
        layout.train_dir().join(experiment::SOURCE_EVAL_FILE),
        layout.meta_dir().join(experiment::SOURCE_EVAL_FILE),
        layout.curve_dir().join(experiment::EVAL_REPORT_FILE),
    ]
    .into_iter()
    .filter(|p| p.exists())
    .collect()
}

fn run(cli: Cli) -> metaloc::Result<()> {
    let (common, stage) = match &cli.command {
        Command::GenData(c) => (c, "gen-data"),
        Command::MetaTrain(c) => (c, "meta-train"),
        Command::Train(c) => (c, "train"),
        Command::Transfer(c) => (c, "transfer"),
        Command::Curve(c) => (c, "curve"),
        Command::Report { common, .. } => (common, "report"),
    };
    if let Some(jobs) = common.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))?;
    }
    let (cfg, hash) = load_config(common)?;
    let layout = Layout::new(&cfg.output_dir);
    std::fs::create_dir_all(&layout.root).map_err(|e| {
        Error::Config(format!("output directory {} is not writable: {e}", layout.root.display()))
    })?;
    let mut manifest = RunManifest::open(&layout.root, &hash, common.seed);
    let started = experiment::unix_now();
    info!("{stage}: writing under {}", layout.root.display());
    let artifacts = match &cli.command {
        Command::GenData(_) => experiment::gen_data(&cfg, &layout)?,
        Command::MetaTrain(_) => experiment::cmd_meta_train(&cfg, &layout)?,
        Command::Train(_) => experiment::cmd_train(&cfg, &layout)?,
        Command::Transfer(_) => experiment::cmd_transfer(&cfg, &layout)?,
        Command::Curve(_) => experiment::cmd_curve(&cfg, &layout)?,
        Command::Report { inputs, .. } => {
            let paths = if inputs.is_empty() {
                default_inputs(&layout)
            } else {
                inputs.clone()
            };
            let loaded = ReportInputs::load(&paths)?;
            write_report(&loaded, &layout.report_dir())?
        }
    };
    for a in &artifacts {
        info!("wrote {}", display_rel(a, &layout.root));
    }
    manifest.record(&layout.root, stage, started, artifacts)?;
    Ok(())
}

fn display_rel(p: &Path, root: &Path) -> String {
    p.strip_prefix(root).unwrap_or(p).display().to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
