use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ioconsent::beacon::{BeaconEndpoint, RadioBus};
use ioconsent::registry::{serve, Registry, TokenTable};
use ioconsent::scenario::{self, ScenarioScript, Transport};
use ioconsent::semantics::{verify_trace, Trace, TraceError};

mod session;

#[derive(Parser)]
#[command(name = "ioconsent", version, about = "Information and consent for IoT data collection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario script and write its trace.
    Simulate(SimulateArgs),
    /// Registry service.
    Registry {
        #[command(subcommand)]
        action: RegistryAction,
    },
    /// Emulated beacon endpoints.
    Beacon {
        #[command(subcommand)]
        action: BeaconAction,
    },
    /// Interactive consent custodian session.
    Pdc(session::PdcArgs),
    /// Replay a trace file and check P1-P4.
    Verify {
        #[arg(long, env = "IOCONSENT_TRACE")]
        trace: PathBuf,
    },
}

#[derive(Args)]
struct SimulateArgs {
    /// Script path or bundled script name.
    #[arg(long, env = "IOCONSENT_SCENARIO")]
    scenario: String,
    /// Defaults to the seed in the script.
    #[arg(long, env = "IOCONSENT_SEED")]
    seed: Option<u64>,
    /// Defaults to the transport in the script.
    #[arg(long, env = "IOCONSENT_TRANSPORT", value_parser = parse_transport)]
    transport: Option<Transport>,
    /// Trace output (JSON lines).
    #[arg(long, env = "IOCONSENT_OUT")]
    out: Option<PathBuf>,
    /// Report output (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Subcommand)]
enum RegistryAction {
    /// Serve the registry API until interrupted.
    Serve {
        #[arg(long, env = "IOCONSENT_BIND", default_value = "127.0.0.1:8080")]
        bind: String,
        /// JSON token table: {"tokens": [{"token", "principal", "role"}]}.
        #[arg(long, env = "IOCONSENT_TOKENS")]
        tokens: PathBuf,
    },
}

#[derive(Subcommand)]
enum BeaconAction {
    /// Print the advertisement frames a scenario device emits.
    Emulate {
        #[arg(long, env = "IOCONSENT_SCENARIO")]
        scenario: String,
        /// Device name; defaults to the first device in the script.
        #[arg(long)]
        device: Option<String>,
        #[arg(long, default_value_t = 8)]
        ticks: u64,
        #[arg(long, default_value_t = ioconsent::beacon::DEFAULT_INTERVAL_MS)]
        interval: u64,
    },
}

pub(crate) fn parse_transport(text: &str) -> Result<Transport, String> {
    text.parse()
}

/// A script file, or a bundled script when no such file exists.
pub(crate) fn load_script(name: &str) -> Result<ScenarioScript> {
    let path = Path::new(name);
    if path.exists() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {name}"))?;
        return ScenarioScript::from_json(&text).with_context(|| format!("loading {name}"));
    }
    scenario::bundled(name).ok_or_else(|| anyhow!("no script file or bundled script named {name:?}"))
}

fn simulate(args: SimulateArgs) -> Result<ExitCode> {
    let script = load_script(&args.scenario)?;
    let seed = args.seed.unwrap_or(script.seed);
    let transport = args.transport.unwrap_or(script.transport);
    let report = scenario::run(&script, seed, transport)?;
    if let Some(out) = &args.out {
        std::fs::write(out, report.trace.to_jsonl()).with_context(|| format!("writing {}", out.display()))?;
    }
    if let Some(path) = &args.report {
        let text = serde_json::to_string_pretty(&report)?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }

    let applied = report.trace.applied_operations().len();
    println!("scenario {} seed {} transport {:?}", report.name, seed, transport);
    println!("trace: {} entries, {} applied", report.trace.len(), applied);
    for (device, receipts) in &report.receipts {
        println!("receipts {device}: {}", receipts.len());
    }
    if !report.gate.is_empty() {
        let spans: Vec<String> = report
            .gate_intervals()
            .iter()
            .map(|(a, b)| match b {
                Some(b) => format!("[{a}, {b})"),
                None => format!("[{a}, end)"),
            })
            .collect();
        println!("gate enabled: {}", spans.join(" "));
    }
    for note in &report.notes {
        println!("note: {note}");
    }
    let violations = verify_trace(&report.trace)?;
    for v in &violations {
        println!("{v}");
    }
    println!("violations: {}", violations.len());
    Ok(if violations.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn verify(path: &Path) -> Result<ExitCode> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let trace = match Trace::from_jsonl(&text) {
        Err(TraceError::Empty) => bail!("{}: trace is empty", path.display()),
        other => other?,
    };
    let violations = verify_trace(&trace).with_context(|| format!("replaying {}", path.display()))?;
    for v in &violations {
        println!("{v}");
    }
    if violations.is_empty() {
        println!("ok: {} entries, no violations", trace.len());
        Ok(ExitCode::SUCCESS)
    } else {
        println!("violations: {}", violations.len());
        Ok(ExitCode::from(1))
    }
}

fn registry_serve(bind: &str, tokens: &Path) -> Result<ExitCode> {
    let table = TokenTable::load(tokens).with_context(|| format!("loading {}", tokens.display()))?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind)
            .await
            .with_context(|| format!("binding {bind}"))?;
        println!("listening on http://{}", listener.local_addr()?);
        std::io::stdout().flush()?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        serve(listener, Arc::new(Registry::new(table)), shutdown).await?;
        Ok(ExitCode::SUCCESS)
    })
}

fn beacon_emulate(script: &str, device: Option<&str>, ticks: u64, interval: u64) -> Result<ExitCode> {
    let script = load_script(script)?;
    let spec = match device {
        Some(name) => script
            .devices
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| anyhow!("no device {name:?} in {}", script.name))?,
        None => script.devices.first().ok_or_else(|| anyhow!("{} has no devices", script.name))?,
    };
    let mut beacon = BeaconEndpoint::new(spec.declaration(), 0)?.with_interval(interval);
    println!(
        "{} id {} fragments {}",
        spec.name,
        spec.declaration().device_id.to_hex(),
        beacon.fragment_count()
    );
    // one scanner at the device position records each frame on the air
    let mut bus = RadioBus::new();
    let scanner = bus.add_scanner(Some(spec.position));
    for _ in 0..ticks {
        let now = beacon.next_due();
        beacon.tick(now, &mut bus);
        for (at, frame) in bus.take_inbox(scanner) {
            println!("{at:>8} ms  {}", hex::encode(&frame));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Registry { action: RegistryAction::Serve { bind, tokens } } => registry_serve(&bind, &tokens),
        Command::Beacon { action: BeaconAction::Emulate { scenario, device, ticks, interval } } => {
            beacon_emulate(&scenario, device.as_deref(), ticks, interval)
        }
        Command::Pdc(args) => session::run(args),
        Command::Verify { trace } => verify(&trace),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            // library errors already embed their source in the message
            let mut msg = e.to_string();
            for cause in e.chain().skip(1) {
                let text = cause.to_string();
                if !msg.contains(&text) {
                    msg = format!("{msg}: {text}");
                }
            }
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
