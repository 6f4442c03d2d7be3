//! The `cleanloop` command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.

use std::net::{Ipv4Addr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cleanloop::eval::format_table;
use cleanloop::experiment::{cmd_perturb, cmd_run, Method, RunArgs};

use crate::service::{serve, ServiceConfig, ServiceError};

#[derive(Debug, Parser)]
#[command(name = "cleanloop", version, about = "Find and fix label errors with training dynamics and an active correction loop")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Inject uniform label noise, keeping the original labels as gold.
    Perturb(PerturbArgs),
    /// Run a detection method over several seeds and write reports.
    Run(RunCmd),
    /// Start the annotation session service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    /// Input dataset (JSONL).
    pub input: PathBuf,
    /// Fraction of annotations to resample, in (0, 1).
    #[arg(long)]
    pub rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunCmd {
    /// Dataset with gold labels (JSONL).
    pub dataset: PathBuf,
    /// One of cu, dm, aum_prob, aum_logit, ensemble, active.
    #[arg(long, default_value = "active")]
    pub method: String,
    #[arg(long, default_value_t = 10)]
    pub folds: usize,
    #[arg(long, default_value_t = 10)]
    pub epochs: usize,
    #[arg(long, default_value_t = 50)]
    pub k: usize,
    #[arg(long = "max-iters", default_value_t = 40)]
    pub max_iters: usize,
    /// Number of seeds; seed i is seed-base + i.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    #[arg(long = "seed-base", default_value_t = 0)]
    pub seed_base: u64,
    #[arg(long = "no-train-ens")]
    pub no_train_ens: bool,
    #[arg(long = "no-test-ens")]
    pub no_test_ens: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[arg(long, default_value_t = Ipv4Addr::LOCALHOST.into())]
    pub host: std::net::IpAddr,
    /// Default dataset for sessions that name none.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Default batch size.
    #[arg(long)]
    pub k: Option<usize>,
    /// Directory for session checkpoints.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

const USAGE_HINT: &str = "run `cleanloop --help` for usage";

fn fail(err: &cleanloop::Error) -> ExitCode {
    eprintln!("error: {err}");
    if err.is_validation() {
        eprintln!("{USAGE_HINT}");
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

pub fn run(cli: Cli) -> ExitCode {
    match cli.command {
        Command::Perturb(args) => match cmd_perturb(&args.input, args.rate, args.seed, &args.out) {
            Ok(ds) => {
                let errors = cleanloop::dataset::annotation_error_count(&ds).unwrap_or(0);
                println!("wrote {} ({} of {} annotations perturbed)", args.out.display(), errors, ds.annotation_count());
                ExitCode::SUCCESS
            }
            Err(e) => fail(&e),
        },
        Command::Run(args) => {
            let method: Method = match args.method.parse() {
                Ok(m) => m,
                Err(e) => return fail(&e),
            };
            let run_args = RunArgs {
                dataset: args.dataset,
                method,
                folds: args.folds,
                epochs: args.epochs,
                k: args.k,
                max_iters: args.max_iters,
                seeds: args.seeds,
                seed_base: args.seed_base,
                no_train_ens: args.no_train_ens,
                no_test_ens: args.no_test_ens,
                out: args.out,
            };
            match cmd_run(&run_args) {
                Ok(result) => {
                    print!("{}", format_table(&[(method.to_string(), result.aggregate)]));
                    println!("outputs in {}", run_args.out.display());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::Serve(args) => {
            let config = ServiceConfig { default_dataset: args.dataset, default_k: args.k, checkpoint_dir: args.checkpoint };
            if config.default_k == Some(0) {
                eprintln!("error: --k must be >= 1\n{USAGE_HINT}");
                return ExitCode::from(2);
            }
            let addr = SocketAddr::new(args.host, args.port);
            let runtime = match tokio::runtime::Runtime::new() {
                Ok(rt) => rt,
                Err(e) => {
                    eprintln!("error: {e}");
                    return ExitCode::from(1);
                }
            };
            match runtime.block_on(serve(config, addr)) {
                Ok(()) => ExitCode::SUCCESS,
                Err(e @ (ServiceError::Bind { .. } | ServiceError::Checkpoint { .. } | ServiceError::Io(_))) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            }
        }
    }
}
