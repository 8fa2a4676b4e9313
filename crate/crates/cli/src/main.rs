//! `cusum-ac`: runs experiment files or the canned figure reproductions.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;
use cusum_ac::experiment::{figure_spec, run_file, ExperimentFile, Figure, OutputFile, RunStamp};

const MANIFEST: &str = "manifest.toml";

#[derive(Debug, Parser)]
#[command(
    name = "cusum-ac",
    version,
    about = "CuSum / CuSum-AC change detection experiments"
)]
struct Args {
    /// Experiment file (TOML).
    #[arg(
        long,
        conflicts_with = "reproduce",
        required_unless_present = "reproduce"
    )]
    config: Option<PathBuf>,

    /// Top-level seed; overrides the file's seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Replications per estimate; overrides every experiment's n_reps.
    #[arg(long)]
    reps: Option<u64>,

    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,

    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,

    /// Run a canned figure: fig4, fig5 or fig6.
    #[arg(long)]
    reproduce: Option<Figure>,
}

fn write_outputs(dir: &Path, files: &[OutputFile], manifest: &str) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for f in files {
        fs::write(dir.join(&f.name), &f.contents)?;
    }
    fs::write(dir.join(MANIFEST), manifest)
}

fn run(args: Args) -> Result<(), String> {
    let file = match (&args.config, args.reproduce) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            ExperimentFile::parse(&text).map_err(|e| format!("{}: {e}", path.display()))?
        }
        (None, Some(fig)) => figure_spec(fig),
        (None, None) => unreachable!("clap enforces one of --config/--reproduce"),
    };
    if file.experiments.is_empty() {
        return Ok(());
    }
    let mut resolved = file
        .resolve(args.seed, args.reps)
        .map_err(|e| e.to_string())?;

    let threads = args.threads.unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| e.to_string())?;
    let start = Instant::now();
    let outputs = pool
        .install(|| run_file(&resolved))
        .map_err(|e| e.to_string())?;

    resolved.run = Some(RunStamp {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        wall_time_s: start.elapsed().as_secs_f64(),
        threads: pool.current_num_threads(),
    });
    let manifest = resolved.to_toml().map_err(|e| e.to_string())?;
    write_outputs(&args.out, &outputs, &manifest)
        .map_err(|e| format!("{}: {e}", args.out.display()))
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
