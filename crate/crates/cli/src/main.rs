use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mongeflow_cli::{cmd_fit, cmd_info, cmd_prior_error, cmd_sample, cmd_verify, CliError, Overrides, RunConfig};

/// Semi-discrete OT priors for probability-flow sampling.
#[derive(Debug, Parser)]
#[command(name = "mongeflow", version)]
struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Output directory [default: $MONGEFLOW_OUT/<command> or mongeflow-out/<command>]
    #[arg(long, global = true)]
    out: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the OT potential and build the latent complex.
    Fit {
        #[arg(long)]
        t_prime: Option<f64>,
    },
    /// Draw samples through the latent complex.
    Sample {
        #[arg(long)]
        label: Option<u32>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        t_prime: Option<f64>,
    },
    /// Run the verification experiments.
    Verify(VerifyArgs),
    /// W2 between a prior and a reference sample source.
    PriorError {
        #[arg(long)]
        t_prime: Option<f64>,
    },
    /// Print version, fixtures and the resolved config.
    Info,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    /// Comma-separated subset; all experiments when omitted.
    #[arg(long, value_delimiter = ',')]
    experiments: Option<Vec<String>>,
    /// Run none of the experiments.
    #[arg(long, conflicts_with = "experiments")]
    none: bool,
    #[arg(long)]
    t_prime: Option<f64>,
}

fn run(cli: Cli) -> Result<bool, CliError> {
    let mut o = Overrides {
        seed: cli.seed,
        workers: cli.workers,
        out: cli.out,
        ..Default::default()
    };
    match &cli.command {
        Command::Fit { t_prime } | Command::PriorError { t_prime } => o.t_prime = *t_prime,
        Command::Sample { label, count, t_prime } => {
            o.label = *label;
            o.count = *count;
            o.t_prime = *t_prime;
        }
        Command::Verify(a) => {
            o.t_prime = a.t_prime;
            o.experiments = if a.none {
                Some(Vec::new())
            } else {
                a.experiments.clone()
            };
        }
        Command::Info => {}
    }
    let mut cfg = RunConfig::resolve(cli.config.as_deref(), &o)?;
    match cli.command {
        Command::Fit { .. } => println!("{}", cmd_fit(&cfg)?.display()),
        Command::Sample { .. } => println!("{}", cmd_sample(&cfg)?.display()),
        Command::Verify(a) => {
            if !a.none && a.experiments.is_none() && cfg.experiments.is_empty() {
                cfg.experiments = mongeflow_cli::config::EXPERIMENTS
                    .iter()
                    .map(|s| s.to_string())
                    .collect();
            }
            let outcome = cmd_verify(&cfg)?;
            for r in &outcome.reports {
                println!("{:<24} {:?}", r.id, r.verdict);
            }
            println!("{}", outcome.dir.display());
            return Ok(!outcome.any_fail());
        }
        Command::PriorError { .. } => {
            let (dir, e) = cmd_prior_error(&cfg)?;
            println!("{:?} {:.6e}", e.method, e.value);
            println!("{}", dir.display());
        }
        Command::Info => {
            let v = cmd_info(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&v).expect("info serializes"));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
