use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use surrogacy::data::{Outcome, SurrogateScale, TimepointPolicy};
use surrogacy::model::{Covariate, ModelKind, PsiPrior};
use surrogacy::report::RunConfig;
use surrogacy::SurrogacyError;

mod commands;

#[derive(Parser)]
#[command(
    name = "surrogacy",
    version,
    about = "Bayesian evaluation of trial-level surrogate endpoints"
)]
struct Cli {
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse and check a contrast CSV.
    Validate {
        #[arg(long)]
        input: PathBuf,
    },
    /// Convert surrogate effects to one scale, flagging converted rows.
    Convert {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target: SurrogateScale,
        /// Defaults to standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fit a surrogacy model and write report and plot data.
    Fit(RunArgs),
    /// Leave-one-study-out cross-validation.
    Loo(RunArgs),
    /// Write a synthetic dataset.
    Simulate(SimArgs),
    /// Simulation-based calibration of the pooled model.
    Sbc(SbcArgs),
    /// Rebuild report and plot data from a previous `fit` output directory.
    Report {
        #[arg(long)]
        output_dir: PathBuf,
        #[arg(long)]
        psi2_threshold: Option<f64>,
    },
}

/// Flags shared by `fit` and `loo`; each overrides the config file.
#[derive(Args, Clone, Default)]
pub struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    treatment: Option<String>,
    #[arg(long)]
    outcome: Option<Outcome>,
    #[arg(long)]
    scale: Option<SurrogateScale>,
    #[arg(long)]
    timepoints: Option<TimepointPolicy>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    psi_prior: Option<PsiPrior>,
    #[arg(long)]
    default_rho: Option<f64>,
    #[arg(long)]
    shared_control_rho: Option<f64>,
    #[arg(long)]
    covariate: Option<Covariate>,
    #[arg(long)]
    psi2_threshold: Option<f64>,
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
                RunConfig::from_toml(&text)?
            }
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:ident => $target:expr) => {
                if let Some(v) = self.$field.clone() {
                    $target = v;
                }
            };
        }
        if self.input.is_some() {
            c.input = self.input.clone();
        }
        if self.treatment.is_some() {
            c.treatment = self.treatment.clone();
        }
        set!(output_dir => c.output_dir);
        set!(model => c.model);
        set!(outcome => c.outcome);
        set!(scale => c.scale);
        set!(timepoints => c.timepoints);
        set!(iterations => c.mcmc.iterations);
        set!(burnin => c.mcmc.burn_in);
        set!(thin => c.mcmc.thin);
        set!(chains => c.mcmc.chains);
        set!(seed => c.mcmc.seed);
        set!(psi_prior => c.priors.psi);
        set!(default_rho => c.default_rho);
        set!(shared_control_rho => c.shared_control_rho);
        set!(covariate => c.covariate);
        set!(psi2_threshold => c.psi2_threshold);
        c.mcmc.validate()?;
        match &c.input {
            None => {
                return Err(usage(
                    "no input dataset (use --input or `input` in the config)",
                ))
            }
            Some(p) if !p.is_file() => {
                return Err(usage(format!("input file {} does not exist", p.display())))
            }
            _ => {}
        }
        Ok(c)
    }
}

#[derive(Args)]
pub struct SimArgs {
    /// TOML simulation design; the reference design when absent.
    #[arg(long)]
    design: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Defaults to standard output.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
pub struct SbcArgs {
    /// TOML file with optional `[design]`, `[priors]` and `[mcmc]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    #[arg(long, default_value = "pooled")]
    model: ModelKind,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burnin: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: PathBuf,
}

/// Problems with the invocation itself (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<SurrogacyError>() {
            return if e.is_data_error() { 1 } else { 2 };
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Validate { input } => commands::validate(&input),
        Command::Convert {
            input,
            target,
            output,
        } => commands::convert(&input, target, output.as_deref()),
        Command::Fit(args) => args.resolve().and_then(|c| commands::fit(&c)),
        Command::Loo(args) => args.resolve().and_then(|c| commands::loo(&c)),
        Command::Simulate(args) => commands::simulate(&args),
        Command::Sbc(args) => commands::sbc(&args),
        Command::Report {
            output_dir,
            psi2_threshold,
        } => commands::report(&output_dir, psi2_threshold)
            .with_context(|| format!("rebuilding report in {}", output_dir.display())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
