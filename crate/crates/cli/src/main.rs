use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use promises_core::harness::{self, CatalogSource, ClockMode, FuzzOptions, RunReport, ScenarioScript, Transport};
use promises_core::service::{self, WallClock};
use promises_core::ServiceConfig;

#[derive(Parser)]
#[command(name = "promises", version, about = "Promise manager and scenario harness")]
struct Cli {
    /// Log more (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Tcp,
    InProcess,
}

impl From<TransportArg> for Transport {
    fn from(t: TransportArg) -> Self {
        match t {
            TransportArg::Tcp => Transport::Tcp,
            TransportArg::InProcess => Transport::InProcess,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario script, or a bundled one as `bundled:NAME`.
    Run {
        script: String,
        /// Use this catalog file instead of the one the script names.
        #[arg(long)]
        catalog: Option<PathBuf>,
        /// Write the full JSON report here.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "tcp")]
        transport: TransportArg,
    },
    /// List the bundled scenarios.
    List,
    /// Run a randomly generated scenario.
    Fuzz {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 4)]
        clients: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        /// Probability that a step carries an injected fault.
        #[arg(long, default_value_t = 0.0)]
        faults: f64,
        /// Run clients concurrently against the wall clock instead of on a
        /// seeded logical schedule.
        #[arg(long)]
        wall: bool,
        #[arg(long, value_enum, default_value = "tcp")]
        transport: TransportArg,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Where to write the shrunk scenario when an invariant fails
        /// (printed to stdout otherwise).
        #[arg(long)]
        minimize_to: Option<PathBuf>,
    },
    /// Serve the promise protocol over TCP until interrupted.
    Serve {
        /// Config file; the PROMISE_MANAGER_CONFIG variable takes precedence.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<bool> {
    match command {
        Command::Run {
            script,
            catalog,
            report,
            transport,
        } => {
            let (mut script, mut base) = load_script(&script)?;
            if let Some(path) = catalog {
                // resolved against the working directory like any other argument
                script.catalog = CatalogSource::Path(std::path::absolute(&path)?);
                base = PathBuf::from(".");
            }
            let r = harness::run_script(&script, &base, transport.into())?;
            finish(&r, report.as_deref())
        }
        Command::List => {
            for (name, _) in harness::BUNDLED {
                println!("{name}");
            }
            Ok(true)
        }
        Command::Fuzz {
            seed,
            clients,
            steps,
            faults,
            wall,
            transport,
            report,
            minimize_to,
        } => {
            if !(0.0..=1.0).contains(&faults) {
                bail!("--faults must be between 0 and 1");
            }
            let opts = FuzzOptions {
                seed,
                clients,
                steps,
                fault_rate: faults,
                clock: if wall { ClockMode::Wall } else { ClockMode::Logical },
            };
            let (script, r) = harness::fuzz(&opts, transport.into())?;
            let ok = finish(&r, report.as_deref())?;
            if !r.invariants_held() {
                let small = harness::minimize(&script, Path::new("."), |r| !r.invariants_held())?;
                let text = small.to_toml()?;
                match minimize_to {
                    Some(path) => {
                        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
                        println!("minimized scenario ({} steps) written to {}", small.step_count(), path.display());
                    }
                    None => println!("minimized scenario ({} steps):\n{text}", small.step_count()),
                }
            }
            Ok(ok)
        }
        Command::Serve { config } => serve(config),
    }
}

fn load_script(arg: &str) -> Result<(ScenarioScript, PathBuf)> {
    if let Some(name) = arg.strip_prefix("bundled:") {
        let Some(script) = harness::bundled(name) else {
            bail!("no bundled scenario `{name}` (try `promises list`)");
        };
        return Ok((script?, PathBuf::from(".")));
    }
    Ok(ScenarioScript::load(Path::new(arg))?)
}

fn finish(r: &RunReport, report: Option<&Path>) -> Result<bool> {
    print!("{}", r.summary());
    if let Some(path) = report {
        let json = serde_json::to_string_pretty(r)?;
        std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(r.passed())
}

fn serve(config: Option<PathBuf>) -> Result<bool> {
    let path = ServiceConfig::resolve_path(config)
        .context("no config given; pass --config or set PROMISE_MANAGER_CONFIG")?;
    let cfg = ServiceConfig::load(&path)?;
    let manager = Arc::new(Mutex::new(cfg.build_manager()?));
    let clock = Arc::new(WallClock::new(Duration::from_millis(cfg.tick_millis)));
    let handle = service::serve(cfg.endpoint.as_str(), manager, clock)?;
    println!("serving on {}", handle.local_addr());
    handle.wait();
    Ok(true)
}
