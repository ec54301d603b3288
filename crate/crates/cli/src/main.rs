use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use qcert::certbounds::{self, CertInputs, Mode};
use qcert::qstate;
use qcert::runner::{self, SessionOutcome, TcpTransport};
use qcert::simkit::{self, SimulationOptions, SummaryRow};
use qcert::tomography;
use qcert_cli::config::{self, RunnerConfig, SimulationConfig};
use qcert_cli::figures::{self, FigureId};
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "qcert",
    version,
    about = "Certified transmission fidelity over untrusted lossy channels"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certified fidelity for given inputs (JSON to stdout).
    Certify(CertifyArgs),
    /// Simulate one protocol session.
    Simulate(SimulateArgs),
    /// Write a figure dataset as CSV.
    Figure {
        id: FigureId,
        /// JSON object overriding the figure's parameters.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// State tomography tools.
    Tomo {
        #[command(subcommand)]
        command: TomoCommand,
    },
    /// Run one side of a networked session.
    Runner {
        #[command(subcommand)]
        role: RunnerRole,
    },
}

#[derive(Args)]
struct CertifyArgs {
    /// JSON file with CertInputs; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "f-i")]
    f_i: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long = "k")]
    k: Option<u64>,
    #[arg(long = "eta-s")]
    eta_s: Option<f64>,
    #[arg(long = "lambda-c")]
    lambda_c: Option<f64>,
    #[arg(long)]
    x: Option<f64>,
    /// `1sDI` or `DI`.
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long = "eta-in")]
    eta_in: Option<f64>,
    #[arg(long = "m")]
    m: Option<u64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    seed: u64,
    /// JSON simulation config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `params.K`.
    #[arg(long = "k")]
    k: Option<u64>,
    /// Transcript JSONL output; implies keeping rounds.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Summary CSV output.
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Subcommand)]
enum TomoCommand {
    /// Reconstruct a simulated Werner state and report F_i with error bars.
    Demo {
        #[arg(long, default_value_t = 0.99)]
        visibility: f64,
        #[arg(long, default_value_t = 100_000)]
        shots: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        trials: usize,
        /// Basis misalignment in radians applied during simulation.
        #[arg(long, default_value_t = 0.0)]
        misalignment: f64,
        /// Also write the simulated dataset as JSON.
        #[arg(long)]
        dataset_out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum RunnerRole {
    Alice {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        config: PathBuf,
    },
    Bob {
        #[arg(long)]
        connect: String,
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(u8::from(e.use_stderr()));
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) if is_broken_pipe(&e) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|cause| {
        cause
            .downcast_ref::<std::io::Error>()
            .is_some_and(|io| io.kind() == std::io::ErrorKind::BrokenPipe)
            || cause.downcast_ref::<csv::Error>().is_some_and(|c| match c.kind() {
                csv::ErrorKind::Io(io) => io.kind() == std::io::ErrorKind::BrokenPipe,
                _ => false,
            })
    })
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| path.display().to_string())?,
    ))
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Certify(args) => {
            let mut map = config::load_object(args.config.as_deref())?;
            config::override_field(&mut map, "F_i", args.f_i)?;
            config::override_field(&mut map, "eps", args.eps)?;
            config::override_field(&mut map, "K", args.k)?;
            config::override_field(&mut map, "eta_s", args.eta_s)?;
            config::override_field(&mut map, "lambda_c", args.lambda_c)?;
            config::override_field(&mut map, "x", args.x)?;
            config::override_field(&mut map, "mode", args.mode)?;
            config::override_field(&mut map, "eta_in", args.eta_in)?;
            config::override_field(&mut map, "M", args.m)?;
            let inputs: CertInputs = serde_json::from_value(map.into()).context("certification inputs")?;
            print_json(&certbounds::certify(&inputs)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate(args) => simulate(args),
        Command::Figure { id, config, out } => {
            let overrides = config.as_deref().map(config::read_json).transpose()?;
            let table = figures::figure_table(id, overrides)?;
            match out {
                Some(path) => table.write_csv(create(&path)?)?,
                None => table.write_csv(std::io::stdout().lock())?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Tomo {
            command:
                TomoCommand::Demo {
                    visibility,
                    shots,
                    seed,
                    trials,
                    misalignment,
                    dataset_out,
                },
        } => {
            let truth = qstate::werner(visibility)?;
            let dataset =
                tomography::simulate_counts(&truth, &tomography::pauli_settings(), shots, seed, misalignment)?;
            if let Some(path) = dataset_out {
                serde_json::to_writer(create(&path)?, &dataset)?;
            }
            let report = tomography::state_report(&dataset, trials, seed)?;
            let rho = tomography::reconstruct_state(&dataset)?;
            #[derive(Serialize)]
            struct Demo {
                #[serde(flatten)]
                report: tomography::StateReport,
                fidelity_to_truth: f64,
            }
            print_json(&Demo {
                report,
                fidelity_to_truth: qstate::fidelity(&rho, &truth)?,
            })?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Runner { role } => run_peer(role),
    }
}

fn simulate(args: SimulateArgs) -> anyhow::Result<ExitCode> {
    let map = config::load_object(args.config.as_deref())?;
    let mut cfg: SimulationConfig = serde_json::from_value(map.into()).context("simulation config")?;
    if let Some(k) = args.k {
        cfg.params.k = k;
    }
    let source = config::source_model(cfg.probe, cfg.message)?;
    let options = SimulationOptions {
        keep_rounds: cfg.keep_rounds || args.transcript.is_some(),
    };
    let transcript = simkit::simulate_protocol(&source, &cfg.strategy, &cfg.detector, &cfg.params, args.seed, options)?;
    let verdict = transcript.verdict(cfg.f_i);
    if let Some(path) = &args.transcript {
        let mut w = create(path)?;
        transcript.write_jsonl(&mut w)?;
        w.flush()?;
    }
    if let Some(path) = &args.summary {
        simkit::write_summary_csv(&[SummaryRow::new(&transcript, &verdict)], create(path)?)?;
    }
    print_json(&verdict)?;
    Ok(ExitCode::SUCCESS)
}

fn exit_for(outcome: &SessionOutcome) -> ExitCode {
    if outcome.verdict.certified {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn run_peer(role: RunnerRole) -> anyhow::Result<ExitCode> {
    match role {
        RunnerRole::Alice { listen, config } => {
            let cfg: RunnerConfig = serde_json::from_value(config::read_json(&config)?)?;
            let source = config::source_model(cfg.probe, cfg.message)?;
            let listener = TcpListener::bind(&listen).with_context(|| format!("bind {listen}"))?;
            eprintln!("alice listening on {}", listener.local_addr()?);
            let transport = TcpTransport::accept(&listener)?;
            let outcome = runner::alice_session(&cfg.session, &source, &cfg.strategy, &cfg.detector, transport)?;
            print_json(&outcome)?;
            Ok(exit_for(&outcome))
        }
        RunnerRole::Bob { connect, config } => {
            let cfg: RunnerConfig = serde_json::from_value(config::read_json(&config)?)?;
            let deadline = Instant::now() + Duration::from_secs(10);
            let transport = loop {
                match TcpTransport::connect(&connect) {
                    Ok(t) => break t,
                    Err(e) if Instant::now() < deadline => {
                        let _ = e;
                        std::thread::sleep(Duration::from_millis(100));
                    }
                    Err(e) => return Err(e).with_context(|| format!("connect {connect}")),
                }
            };
            let outcome = runner::bob_session(&cfg.session, &cfg.detector, transport)?;
            print_json(&outcome)?;
            Ok(exit_for(&outcome))
        }
    }
}
