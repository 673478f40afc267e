//! Command-line front end.
//!
//! Exit codes: 0 success, 1 failed validation, 2 configuration or usage
//! error, 3 data ingestion error, 4 divergence, 5 I/O error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use crate::compress::{validate_contractive, validate_unbiased, CompressorSpec, Partition};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::harness::{
    compare_runs, grid_search, provenance_path, read_trajectory_csv, run_experiment, Selection,
    DEFAULT_GRID,
};
use crate::rng::RngStream;

pub const OUTPUT_DIR_ENV: &str = "FEDCC_OUTPUT_DIR";

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION_FAILED: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_INGESTION: u8 = 3;
pub const EXIT_DIVERGED: u8 = 4;
pub const EXIT_IO: u8 = 5;

#[derive(Debug, Parser)]
#[command(name = "fedcc", version, about = "Compressed federated learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its trajectory CSV.
    Run {
        #[arg(short, long)]
        config: PathBuf,
        /// Output CSV; defaults to the config's output.path or `<config stem>.csv`.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Run participating clients concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Run several configs with the same schedule and align their metrics.
    Compare {
        #[arg(short, long, required = true, num_args = 1..)]
        config: Vec<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Monte Carlo check of a compressor against its defining inequality.
    CheckCompressor {
        #[arg(long, value_enum)]
        kind: CompressorKind,
        #[arg(long)]
        s: Option<usize>,
        #[arg(long)]
        bits: Option<u32>,
        #[arg(long)]
        r: Option<f64>,
        /// Number of contiguous groups for grouped-sign.
        #[arg(long)]
        groups: Option<usize>,
        /// Wrap an unbiased operator with the 1/(1+ω) scaling.
        #[arg(long)]
        scaled: bool,
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Tune (η_g, η_l) over a grid.
    Grid {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        eta_g: Vec<f64>,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        eta_l: Vec<f64>,
        #[arg(long, value_enum, default_value_t = SelectArg::Auto)]
        select: SelectArg,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Summarize a trajectory CSV.
    Inspect { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CompressorKind {
    Identity,
    RandomSparsify,
    RandomDither,
    TopR,
    GroupedSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SelectArg {
    Auto,
    Accuracy,
    GradNorm,
}

/// Exit code for an error, by its root cause.
pub fn exit_code(err: &Error) -> u8 {
    match err.root() {
        Error::Ingestion { .. } | Error::MalformedMessage(_) => EXIT_INGESTION,
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_CONFIG,
    }
}

fn error_class(err: &Error) -> &'static str {
    match exit_code(err) {
        EXIT_INGESTION => "ingestion",
        EXIT_DIVERGED => "divergence",
        EXIT_IO => "io",
        _ => "config",
    }
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    ExitCode::from(dispatch(cli.command))
}

/// Runs a parsed command, printing results to stdout and errors to stderr.
pub fn dispatch(command: Command) -> u8 {
    let env_dir = std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from);
    match execute(command, env_dir.as_deref()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {e}", error_class(&e));
            exit_code(&e)
        }
    }
}

/// Where an output file goes: an explicit path verbatim, otherwise the
/// configured or default name, under `dir` when relative.
pub fn resolve_output(explicit: Option<&Path>, configured: Option<&Path>, default: &str, dir: Option<&Path>) -> PathBuf {
    if let Some(p) = explicit {
        return p.to_path_buf();
    }
    let p = configured.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(default));
    match dir {
        Some(d) if p.is_relative() => d.join(p),
        _ => p,
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "run".into())
}

fn execute(command: Command, env_dir: Option<&Path>) -> Result<u8> {
    match command {
        Command::Run {
            config,
            output,
            parallel,
        } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            cfg.parallel |= parallel;
            let path = resolve_output(
                output.as_deref(),
                cfg.output.as_deref(),
                &format!("{}.csv", stem(&config)),
                env_dir,
            );
            cfg.output = Some(path.clone());
            let tr = run_experiment(&cfg)?;
            let last = tr.last();
            println!("wrote {} ({} rows)", path.display(), tr.records.len());
            println!("algo                {}", tr.algo);
            println!("round               {}", last.round);
            println!("grad_norm_sq        {:e}", last.grad_norm_sq);
            println!("train_loss          {:e}", last.train_loss);
            if let Some(acc) = last.test_accuracy {
                println!("test_acc            {acc:.4}");
            }
            println!("uplink_bytes_cum    {}", last.uplink_bytes_cum);
            println!("downlink_bytes_cum  {}", last.downlink_bytes_cum);
            if let Some(t) = tr.diverged_at {
                eprintln!("error[divergence]: {}", Error::Diverged { round: t });
                return Ok(EXIT_DIVERGED);
            }
            Ok(EXIT_OK)
        }
        Command::Compare { config, output } => {
            let configs = config
                .iter()
                .map(ExperimentConfig::from_path)
                .collect::<Result<Vec<_>>>()?;
            let path = resolve_output(output.as_deref(), None, "compare.csv", env_dir);
            let cmp = compare_runs(&configs)?;
            write_text(&path, &cmp.to_csv())?;
            println!("wrote {} ({} rows)", path.display(), cmp.rounds.len());
            let mut code = EXIT_OK;
            for (label, tr) in cmp.labels.iter().zip(&cmp.trajectories) {
                let last = tr.last();
                print!(
                    "{label}: grad_norm_sq {:e}, uplink {} B",
                    last.grad_norm_sq, last.uplink_bytes_cum
                );
                if let Some(acc) = last.test_accuracy {
                    print!(", test_acc {acc:.4}");
                }
                println!();
                if let Some(t) = tr.diverged_at {
                    eprintln!("error[divergence]: {label} diverged at round {t}");
                    code = EXIT_DIVERGED;
                }
            }
            Ok(code)
        }
        Command::CheckCompressor {
            kind,
            s,
            bits,
            r,
            groups,
            scaled,
            dim,
            trials,
            seed,
        } => check_compressor(kind, s, bits, r, groups, scaled, dim, trials, seed),
        Command::Grid {
            config,
            eta_g,
            eta_l,
            select,
            output,
        } => {
            let cfg = ExperimentConfig::from_path(&config)?;
            let eta_g = if eta_g.is_empty() { DEFAULT_GRID.to_vec() } else { eta_g };
            let eta_l = if eta_l.is_empty() { DEFAULT_GRID.to_vec() } else { eta_l };
            let selection = match select {
                SelectArg::Auto => Selection::Auto,
                SelectArg::Accuracy => Selection::TestAccuracy,
                SelectArg::GradNorm => Selection::GradNorm,
            };
            let grid = grid_search(&cfg, &eta_g, &eta_l, selection)?;
            let path = resolve_output(
                output.as_deref(),
                None,
                &format!("{}.grid.csv", stem(&config)),
                env_dir,
            );
            write_text(&path, &grid.to_csv())?;
            let flagged = grid.cells.iter().filter(|c| c.diverged).count();
            println!(
                "wrote {} ({} cells, {flagged} divergent)",
                path.display(),
                grid.cells.len()
            );
            match grid.best {
                Some(k) => {
                    let c = &grid.cells[k];
                    println!("best eta_g = {}, eta_l = {}", c.eta_g, c.eta_l);
                    Ok(EXIT_OK)
                }
                None => {
                    eprintln!("error[divergence]: every grid cell diverged");
                    Ok(EXIT_DIVERGED)
                }
            }
        }
        Command::Inspect { path } => {
            let rows = read_trajectory_csv(&path)?;
            let Some(last) = rows.last() else {
                println!("{}: no records", path.display());
                return Ok(EXIT_OK);
            };
            println!("file                {}", path.display());
            println!("algo                {}", last.algo);
            println!("seed                {}", last.seed);
            println!("records             {}", rows.len());
            println!("last round          {}", last.round);
            println!("grad_norm_sq        {:e}", last.grad_norm_sq);
            println!("train_loss          {:e}", last.train_loss);
            let best_grad = rows.iter().map(|r| r.grad_norm_sq).fold(f64::INFINITY, f64::min);
            println!("min grad_norm_sq    {best_grad:e}");
            if let Some(acc) = last.test_accuracy {
                let best = rows.iter().filter_map(|r| r.test_accuracy).fold(0.0, f64::max);
                println!("test_acc            {acc:.4} (best {best:.4})");
            }
            println!("uplink_bytes_cum    {}", last.uplink_bytes_cum);
            println!("downlink_bytes_cum  {}", last.downlink_bytes_cum);
            let echo = provenance_path(&path);
            if echo.exists() {
                println!("provenance          {}", echo.display());
            }
            if rows.iter().any(|r| !r.grad_norm_sq.is_finite()) {
                println!("status              diverged");
            }
            Ok(EXIT_OK)
        }
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Builds the compressor a `check-compressor` invocation describes.
pub fn compressor_from_flags(
    kind: CompressorKind,
    s: Option<usize>,
    bits: Option<u32>,
    r: Option<f64>,
    groups: Option<usize>,
    scaled: bool,
    dim: usize,
) -> Result<CompressorSpec> {
    let need = |flag: &str| Error::config(format!("--{flag}"), "required for this kind");
    let stray = |flag: &str, set: bool| {
        if set {
            Err(Error::config(format!("--{flag}"), "not a parameter of this kind"))
        } else {
            Ok(())
        }
    };
    stray("s", s.is_some() && kind != CompressorKind::RandomSparsify)?;
    stray("bits", bits.is_some() && kind != CompressorKind::RandomDither)?;
    stray("r", r.is_some() && kind != CompressorKind::TopR)?;
    stray("groups", groups.is_some() && kind != CompressorKind::GroupedSign)?;
    let spec = match kind {
        CompressorKind::Identity => CompressorSpec::Identity,
        CompressorKind::RandomSparsify => CompressorSpec::RandomSparsify {
            s: s.ok_or_else(|| need("s"))?,
        },
        CompressorKind::RandomDither => CompressorSpec::RandomDither {
            bits: bits.ok_or_else(|| need("bits"))?,
        },
        CompressorKind::TopR => CompressorSpec::TopR {
            r: r.ok_or_else(|| need("r"))?,
        },
        CompressorKind::GroupedSign => CompressorSpec::GroupedSign {
            partition: Partition::contiguous(dim, groups.unwrap_or(1))?,
        },
    };
    let spec = if scaled { CompressorSpec::scaled(spec) } else { spec };
    spec.validate(dim)?;
    Ok(spec)
}

#[allow(clippy::too_many_arguments)]
fn check_compressor(
    kind: CompressorKind,
    s: Option<usize>,
    bits: Option<u32>,
    r: Option<f64>,
    groups: Option<usize>,
    scaled: bool,
    dim: usize,
    trials: usize,
    seed: u64,
) -> Result<u8> {
    let spec = compressor_from_flags(kind, s, bits, r, groups, scaled, dim)?;
    let mut rng = RngStream::from_seed(seed);
    println!("compressor          {}", spec.name());
    println!("dim                 {dim}");
    println!("trials              {trials}");
    println!("seed                {seed}");
    let passed = if spec.is_unbiased() {
        let rep = validate_unbiased(&spec, dim, trials, &mut rng)?;
        println!("omega               {}", rep.omega);
        println!("mean_error          {:e}", rep.mean_error);
        println!("worst_band_frac     {:.4}", rep.worst_band_fraction);
        println!("variance_ratio      {:.6}", rep.variance_ratio);
        println!("variance_bound      {:.6}", rep.variance_bound);
        rep.passed()
    } else {
        let rep = validate_contractive(&spec, dim, trials, &mut rng)?;
        println!("q2                  {}", rep.q2);
        println!("max_ratio           {:.6}", rep.max_ratio);
        println!("mean_ratio          {:.6}", rep.mean_ratio);
        let rule = if rep.deterministic { "every vector" } else { "mean" };
        println!("bound               {:.6} ({rule})", rep.bound);
        rep.passed
    };
    println!("result              {}", if passed { "PASS" } else { "FAIL" });
    Ok(if passed { EXIT_OK } else { EXIT_VALIDATION_FAILED })
}
