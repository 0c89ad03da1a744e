use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::CliError;

/// Magic squares with prime entries: bases, complexity, Ehrhart counts,
/// local factors and singular constants.
#[derive(Debug, Parser)]
#[command(name = "magic-primes", version)]
pub struct Cli {
    /// Output format.
    #[arg(long, value_enum, default_value_t = Format::Pretty, global = true)]
    pub format: Format,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Directory for cached lattice-point counts.
    #[arg(long, env = "MAGIC_PRIMES_CACHE", global = true)]
    pub cache_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
    Pretty,
}

#[derive(Debug, Args, Clone)]
pub struct SystemArgs {
    /// Side length of the square.
    #[arg(long)]
    pub n: Option<usize>,
    /// Read the form system from a JSON file written by `basis --format json`.
    #[arg(long, conflicts_with = "n")]
    pub system: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Linear forms of the ℤ-basis and their verification.
    Basis(SystemArgs),
    /// Cauchy–Schwarz complexity with certificates.
    Complexity(SystemArgs),
    /// Vertices of K(1) and their denominator lcm.
    Vertices(SystemArgs),
    /// Lattice-point counts and the Ehrhart quasipolynomial.
    Ehrhart {
        #[command(flatten)]
        system: SystemArgs,
        /// Period of the quasipolynomial; defaults to the vertex denominator lcm.
        #[arg(long)]
        period: Option<usize>,
        /// Only print E(0..=TO).
        #[arg(long, requires = "to")]
        values_only: bool,
        #[arg(long)]
        to: Option<u64>,
        /// Largest N for which a direct count may be run.
        #[arg(long)]
        budget: Option<u64>,
    },
    /// Local factors β_p for the primes in a range.
    LocalFactors {
        #[command(flatten)]
        system: SystemArgs,
        /// Inclusive range `LO..HI`.
        #[arg(long, default_value = "2..13")]
        p: String,
    },
    /// The singular constant 𝔖.
    Constant {
        #[command(flatten)]
        system: SystemArgs,
        /// Last prime multiplied exactly.
        #[arg(long, default_value_t = 100_000)]
        p_max: u64,
        /// Decimal digits reported.
        #[arg(long, default_value_t = 12)]
        precision: u32,
    },
    /// Magic squares with prime entries in [0, N].
    Census {
        #[command(flatten)]
        system: SystemArgs,
        /// Upper bound N on the entries.
        #[arg(long = "bound", short = 'N')]
        bound: Option<u64>,
        /// Search nodes allowed before stopping with a resume token.
        #[arg(long)]
        budget: Option<u64>,
        /// Resume token file written by an interrupted run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Where to write the resume token when the budget runs out.
        #[arg(long)]
        token_out: Option<PathBuf>,
        /// Singular constant for the asymptotic prediction.
        #[arg(long)]
        constant: Option<f64>,
    },
}

/// Validated settings for one run.
#[derive(Debug)]
pub struct RunConfig {
    pub command: Command,
    pub format: Format,
    pub jobs: usize,
    pub cache_dir: Option<PathBuf>,
}

pub const MAX_SIDE: usize = 40;
pub const MAX_LOCAL_PRIME: u64 = 1_000_000;

impl RunConfig {
    pub fn from_cli(cli: Cli) -> Result<Self, CliError> {
        let jobs = match cli.jobs {
            Some(0) => return Err(CliError::Validation("--jobs must be at least 1".into())),
            Some(j) => j,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        let system = match &cli.command {
            Command::Basis(s) | Command::Complexity(s) | Command::Vertices(s) => s,
            Command::Ehrhart { system, .. }
            | Command::LocalFactors { system, .. }
            | Command::Constant { system, .. }
            | Command::Census { system, .. } => system,
        };
        match (system.n, &system.system) {
            (None, None) => return Err(CliError::Validation("one of --n or --system is required".into())),
            (Some(n), _) if !(3..=MAX_SIDE).contains(&n) => {
                return Err(CliError::Validation(format!("--n must lie in 3..={MAX_SIDE}, got {n}")))
            }
            _ => {}
        }
        match &cli.command {
            Command::Ehrhart { period: Some(0), .. } => {
                return Err(CliError::Validation("--period must be positive".into()))
            }
            Command::LocalFactors { p, .. } => {
                parse_prime_range(p)?;
            }
            Command::Constant { precision, .. } if *precision == 0 || *precision > 200 => {
                return Err(CliError::Validation("--precision must lie in 1..=200".into()))
            }
            Command::Census { bound: None, resume: None, .. } => {
                return Err(CliError::Validation("census needs --bound or --resume".into()))
            }
            _ => {}
        }
        Ok(RunConfig { command: cli.command, format: cli.format, jobs, cache_dir: cli.cache_dir })
    }
}

/// Parses an inclusive range `LO..HI` with `2 ≤ LO ≤ HI ≤ 10^6`.
pub fn parse_prime_range(s: &str) -> Result<(u64, u64), CliError> {
    let bad = || CliError::Validation(format!("expected a range LO..HI, got {s:?}"));
    let (lo, hi) = s.split_once("..").ok_or_else(bad)?;
    let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
    let hi: u64 = hi.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
    if lo < 2 || lo > hi || hi > MAX_LOCAL_PRIME {
        return Err(CliError::Validation(format!("prime range must satisfy 2 <= LO <= HI <= {MAX_LOCAL_PRIME}")));
    }
    Ok((lo, hi))
}
