use clap::{Parser, Subcommand, ValueEnum};
use stackcheck::cli::{analyze, Config, GroundTruth};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "stackcheck", version, about = "Detect, patch and validate stack buffer overflows in x86-64 disassembly listings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Analyse listings (files or directories of `.s` files).
    Analyze(AnalyzeArgs),
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    #[arg(required = true)]
    paths: Vec<PathBuf>,
    /// Extra property file; same-named properties replace bundled ones.
    #[arg(long)]
    props: Option<PathBuf>,
    /// Directory of extra patch templates (`*.toml`).
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Extra library-function specifications.
    #[arg(long = "libc-db")]
    libc_db: Option<PathBuf>,
    /// Buffer-size metadata.
    #[arg(long)]
    buffers: Option<PathBuf>,
    #[arg(long = "max-loop-iters", default_value_t = 64)]
    max_loop_iters: usize,
    #[arg(long = "max-input-len", default_value_t = 4096)]
    max_input_len: usize,
    #[arg(long = "max-states", default_value_t = 100_000)]
    max_states: usize,
    #[arg(long = "step-budget", default_value_t = 1_000_000)]
    step_budget: u64,
    /// One Write transition per byte instead of per instruction.
    #[arg(long = "atomic-writes")]
    atomic_writes: bool,
    /// Directory for state-space exports (JSON and DOT).
    #[arg(long = "export-memstace")]
    export_memstace: Option<PathBuf>,
    /// Write patched listings to `--out`.
    #[arg(long, requires = "out")]
    patch: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run original and patched images before and after patching.
    #[arg(long)]
    validate: bool,
    #[arg(long, value_enum, default_value = "text")]
    report: Format,
    /// Seconds per binary.
    #[arg(long)]
    timeout: Option<f64>,
    /// Root function; `main` by default.
    #[arg(long)]
    entry: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "random-trials", default_value_t = 16)]
    random_trials: usize,
    #[arg(long = "enable-scanf-patch")]
    enable_scanf_patch: bool,
    /// Corpus manifest with labels; adds detection metrics to the report.
    #[arg(long = "ground-truth")]
    ground_truth: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let Command::Analyze(a) = Cli::parse().command;
    let cfg = Config {
        max_states: a.max_states,
        max_loop_iters: a.max_loop_iters,
        max_input_len: a.max_input_len,
        step_budget: a.step_budget,
        atomic_writes: a.atomic_writes,
        timeout: a.timeout,
        props: a.props,
        templates: a.templates,
        libc_db: a.libc_db,
        buffers: a.buffers,
        random_trials: a.random_trials,
        seed: a.seed,
        entry: a.entry,
        patch: a.patch,
        out: a.out,
        validate: a.validate,
        export_memstace: a.export_memstace,
        enable_scanf_patch: a.enable_scanf_patch,
    };
    let truth = match a.ground_truth.as_deref().map(GroundTruth::load).transpose() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    match analyze(&a.paths, &cfg, truth.as_ref()) {
        Ok(report) => {
            match a.report {
                Format::Json => println!("{}", report.to_json()),
                Format::Text => print!("{}", report.to_text()),
            }
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
