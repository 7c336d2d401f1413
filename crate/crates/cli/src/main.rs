//! `fracimp`: fractional imputation for survey data from the command line.

mod commands;
mod config;
mod error;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fracimp::variance::ReplicateMethod;

use crate::config::{Config, DataConfig, ImputeMethod};
use crate::error::CliError;

const DEFAULT_SEED: u64 = 1;

#[derive(Debug, Parser)]
#[command(name = "fracimp", version, about = "Fractional imputation for survey data with item nonresponse")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Only report warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Impute and write the fractional dataset, parameters and estimates.
    Impute(ImputeArgs),
    /// PFI with jackknife variance estimates of the targets.
    Variance(VarianceArgs),
    /// Monte Carlo comparison of full-sample, MI and PFI estimators.
    Simulate(SimulateArgs),
    /// Two-phase sampling FI (FEFI, or reduced-m with --m).
    Twophase(TwoPhaseArgs),
}

/// Input data given on the command line instead of a `[data]` section.
#[derive(Debug, Args)]
struct DataArgs {
    /// Input CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Design-weight column.
    #[arg(long)]
    weight: Option<String>,
    /// Unit id column.
    #[arg(long)]
    id: Option<String>,
    /// Design stratum column.
    #[arg(long)]
    stratum: Option<String>,
    /// Item columns, comma-separated.
    #[arg(long, value_delimiter = ',')]
    items: Option<Vec<String>>,
    /// Categorical item columns, comma-separated.
    #[arg(long, value_delimiter = ',')]
    categorical: Option<Vec<String>>,
    /// Token marking a missing value.
    #[arg(long)]
    missing: Option<String>,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Imputed item.
    #[arg(long)]
    target: Option<String>,
    /// Model covariates, comma-separated.
    #[arg(long, value_delimiter = ',')]
    covariates: Option<Vec<String>>,
    /// Imputations per unit (PFI M, or MI m).
    #[arg(long)]
    m: Option<usize>,
    /// EM convergence tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// EM iteration cap.
    #[arg(long)]
    max_iter: Option<usize>,
}

#[derive(Debug, Args)]
struct ImputeArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// pfi, fhdi, kernel, sfi, dr or mi.
    #[arg(long)]
    method: Option<ImputeMethod>,
    /// Fixed kernel bandwidth.
    #[arg(long)]
    bandwidth: Option<f64>,
    /// Categories per continuous item for FHDI.
    #[arg(long)]
    k: Option<usize>,
    /// Donors per cell for FHDI.
    #[arg(long)]
    donors: Option<usize>,
}

#[derive(Debug, Args)]
struct VarianceArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Recompute replicates by full EM instead of one Newton step.
    #[arg(long)]
    full_em: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Monte Carlo replicates.
    #[arg(long)]
    replicates: Option<usize>,
    /// MI imputations.
    #[arg(long)]
    mi_m: Option<usize>,
    /// PFI imputations per unit.
    #[arg(long)]
    pfi_m: Option<usize>,
}

#[derive(Debug, Args)]
struct TwoPhaseArgs {
    /// Imputations per unit; FEFI when absent.
    #[arg(long)]
    m: Option<usize>,
}

fn apply_data(cfg: &mut Config, a: &DataArgs) -> Result<(), CliError> {
    let given = a.weight.is_some() || a.items.is_some();
    match (cfg.data.as_mut(), &a.input) {
        (Some(d), input) => {
            if let Some(p) = input {
                d.path = p.clone();
            }
        }
        (None, Some(p)) if given => {
            cfg.data = Some(DataConfig {
                path: p.clone(),
                weight: a.weight.clone().unwrap_or_else(|| "weight".into()),
                id: None,
                stratum: None,
                missing: fracimp::dataset::DEFAULT_MISSING_TOKEN.into(),
                items: a.items.clone().unwrap_or_default(),
                categorical: Vec::new(),
            });
        }
        (None, Some(p)) => {
            if !p.exists() {
                return Err(CliError::Input {
                    path: p.clone(),
                    source: std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
                });
            }
            return Err(CliError::Config("--input needs --weight and --items, or a [data] section".into()));
        }
        (None, None) => return Ok(()),
    }
    let d = cfg.data.as_mut().expect("set above");
    if let Some(w) = &a.weight {
        d.weight = w.clone();
    }
    if let Some(v) = &a.items {
        d.items = v.clone();
    }
    if a.id.is_some() {
        d.id = a.id.clone();
    }
    if a.stratum.is_some() {
        d.stratum = a.stratum.clone();
    }
    if let Some(v) = &a.categorical {
        d.categorical = v.clone();
    }
    if let Some(m) = &a.missing {
        d.missing = m.clone();
    }
    Ok(())
}

fn apply_model(cfg: &mut Config, a: &ModelArgs) {
    let ic = &mut cfg.impute;
    if a.target.is_some() {
        ic.model.target = a.target.clone();
    }
    if let Some(c) = &a.covariates {
        ic.model.covariates = c.clone();
    }
    if let Some(m) = a.m {
        ic.pfi.m = m;
        ic.pfi.sir_pool = ic.pfi.sir_pool.max(m);
        ic.mi.m = m;
    }
    if let Some(t) = a.tol {
        ic.pfi.em_tol = t;
        ic.fhdi.tol = t;
        ic.sfi.tol = t;
    }
    if let Some(n) = a.max_iter {
        ic.pfi.max_em_iter = n;
        ic.fhdi.max_iter = n;
        ic.sfi.max_iter = n;
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    let quiet = cli.quiet || cfg.quiet.unwrap_or(false);
    env_logger::Builder::new()
        .filter_level(if quiet { log::LevelFilter::Warn } else { log::LevelFilter::Info })
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();

    let seed = cli.seed.or(cfg.seed).unwrap_or(DEFAULT_SEED);
    let out_dir = cli.out.clone().or(cfg.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
    if let Some(n) = cli.threads.or(cfg.threads) {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot start the thread pool: {e}")))?;
    }

    let outputs = match &cli.command {
        Command::Impute(a) => {
            apply_data(&mut cfg, &a.data)?;
            apply_model(&mut cfg, &a.model);
            if let Some(m) = a.method {
                cfg.impute.method = m;
            }
            if a.bandwidth.is_some() {
                cfg.impute.kernel.bandwidth = a.bandwidth;
            }
            if let Some(k) = a.k {
                cfg.impute.fhdi.k = k;
            }
            if let Some(d) = a.donors {
                cfg.impute.fhdi.donors = d;
            }
            commands::impute(&cfg, seed)?
        }
        Command::Variance(a) => {
            apply_data(&mut cfg, &a.data)?;
            apply_model(&mut cfg, &a.model);
            if a.full_em {
                cfg.variance.replicate_method = ReplicateMethod::Em;
            }
            commands::variance(&cfg, seed)?
        }
        Command::Simulate(a) => {
            let s = &mut cfg.simulate;
            if let Some(r) = a.replicates {
                s.replicates = r;
            }
            if let Some(m) = a.mi_m {
                s.mi_m = m;
            }
            if let Some(m) = a.pfi_m {
                s.pfi.m = m;
                s.pfi.sir_pool = s.pfi.sir_pool.max(m);
            }
            commands::simulate(&cfg, seed)?
        }
        Command::Twophase(a) => {
            if let (Some(tp), Some(m)) = (cfg.twophase.as_mut(), a.m) {
                tp.m = Some(m);
            }
            commands::twophase(&cfg, seed)?
        }
    };
    let written = outputs.commit(&out_dir)?;
    for p in written {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
