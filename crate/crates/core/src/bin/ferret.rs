use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, ExitCode};
use std::time::Duration;

use clap::{Parser, Subcommand};

use ferret_core::bench::{self, config::ExperimentConfig, repro, verify};
use ferret_core::error::FerretError;
use ferret_core::net;
use ferret_core::rand_basis::RandomSeed;

/// Federated full-parameter tuning with shared-randomness projections.
#[derive(Parser)]
#[command(name = "ferret", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run an experiment file and write the metrics CSV and JSON summary.
    ///
    /// Exit status: 0 on success, 2 on a config error, 3 on divergence.
    Run {
        config: PathBuf,
        /// Run clients in this many worker processes over loopback TCP
        /// instead of in process. Records are identical either way.
        #[arg(long, default_value_t = 0)]
        workers: usize,
    },
    /// Worker half of `run --workers`. Not meant to be started by hand.
    #[command(hide = true)]
    Worker {
        #[arg(long)]
        connect: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        id: u32,
    },
    /// Check a theoretical property and print measured value vs bound.
    ///
    /// Exit status: 0 if every check passes, 1 otherwise, 2 on bad input.
    Verify {
        /// One of unbiased, error-bound, zo-connection, rho-rate,
        /// reconstruction-vs-k, drift, block-speedup, allocation,
        /// convergence, accounting; or `all` for the default suite.
        #[arg(default_value = "all")]
        check: String,
        /// TOML file with a check configuration (overrides the defaults).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the data series behind a desk-scale figure as CSV.
    Repro {
        /// fig6, fig7a, fig4-analogue or rounds-curve.
        figure: String,
        #[arg(long, default_value = "repro")]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Print the frozen PRNG, basis and wire constants.
    ProtocolDump,
}

fn exit_code(e: &FerretError) -> u8 {
    if e.is_divergence() {
        return 3;
    }
    match e.root_cause() {
        FerretError::Config(_) | FerretError::InvalidDimension(_) | FerretError::InfeasibleBudget { .. } => 2,
        _ => 1,
    }
}

fn fail(e: FerretError) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(&e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Cmd::Run { config, workers } => cmd_run(&config, workers),
        Cmd::Worker { connect, config, id } => cmd_worker(&connect, &config, id).map(|_| ExitCode::SUCCESS),
        Cmd::Verify {
            check,
            config,
            trials,
            seed,
        } => cmd_verify(&check, config.as_deref(), trials, seed),
        Cmd::Repro { figure, out, seed } => repro::repro(&figure, &out, RandomSeed(seed)).map(|p| {
            println!("{}", p.display());
            ExitCode::SUCCESS
        }),
        Cmd::ProtocolDump => {
            print!("{}", bench::protocol_dump());
            Ok(ExitCode::SUCCESS)
        }
    };
    result.unwrap_or_else(fail)
}

fn cmd_run(path: &Path, workers: usize) -> Result<ExitCode, FerretError> {
    let cfg = ExperimentConfig::load(path)?;
    let records = if workers == 0 {
        bench::run_in_process(&cfg)?
    } else {
        let digest = net::config_digest(&std::fs::read(path)?);
        let mut fed = bench::build_federation(&cfg)?;
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?.to_string();
        let exe = std::env::current_exe()?;
        let mut children: Vec<Child> = (0..workers)
            .map(|i| {
                Command::new(&exe)
                    .args(["worker", "--connect", &addr, "--id", &i.to_string(), "--config"])
                    .arg(path)
                    .spawn()
            })
            .collect::<Result<_, _>>()?;
        let result = net::run_server(&mut fed, &listener, workers, digest);
        for c in &mut children {
            let _ = c.wait();
        }
        let records = result?;
        bench::write_outputs(&cfg, &fed, &records)?;
        records
    };
    if let Some(last) = records.last() {
        println!(
            "{} rounds, loss {:.6}, metric {:.6}, upload {}",
            records.len(),
            last.loss,
            last.metric,
            last.cumulative_upload
        );
    } else {
        println!("0 rounds");
    }
    println!("wrote {} and {}", cfg.csv_path().display(), cfg.summary_path().display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_worker(addr: &str, path: &Path, id: u32) -> Result<(), FerretError> {
    let digest = net::config_digest(&std::fs::read(path)?);
    let cfg = ExperimentConfig::load(path)?;
    let fed = bench::build_federation(&cfg)?;
    let stream = net::connect_with_retry(addr, Duration::from_secs(30))?;
    net::run_worker(stream, &fed, id, digest)
}

fn cmd_verify(
    name: &str,
    config: Option<&Path>,
    trials: Option<usize>,
    seed: Option<u64>,
) -> Result<ExitCode, FerretError> {
    let mut cfgs = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            let cfg: verify::TheoryCheckConfig = toml::from_str(&text)
                .map_err(|e| FerretError::Config(format!("{}: {}", p.display(), e.message())))?;
            vec![cfg]
        }
        None if name == "all" => verify::Check::ALL
            .into_iter()
            .map(verify::TheoryCheckConfig::default_for)
            .collect(),
        None => {
            let which = verify::Check::parse(name)
                .ok_or_else(|| FerretError::Config(format!("unknown check {name:?}")))?;
            vec![verify::TheoryCheckConfig::default_for(which)]
        }
    };
    let mut all_passed = true;
    for cfg in &mut cfgs {
        if let Some(t) = trials {
            cfg.trials = t;
        }
        if let Some(s) = seed {
            cfg.seed = RandomSeed(s);
        }
        let report = verify::run_check(cfg)?;
        println!("{report}");
        all_passed &= report.passed;
    }
    Ok(if all_passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}
