use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ftdc::acceptance;
use ftdc::batch::{self, Execution};
use ftdc::report::{self, GainsReport};
use ftdc::runtime::{self, ClosedLoopTrace};
use ftdc::scenario::{self, Scenario, ScenarioConfig};

#[derive(Parser)]
#[command(name = "ftdc", version, about = "Distributed estimation and control with finite-time average consensus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the initialization only and print m̄, D′, the leader and the gains.
    Init {
        #[command(flatten)]
        common: Common,
        /// Also write the scenario config (JSON) to this path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the closed loop and print a summary; `--out` writes the trace CSV.
    Simulate(RunArgs),
    /// Run the acceptance checks; exits nonzero if any fails.
    Verify {
        #[command(flatten)]
        common: Common,
        /// Run batch work on one thread.
        #[arg(long)]
        sequential: bool,
    },
    /// Write the trace CSV (default) or the gains document.
    Export(RunArgs),
}

#[derive(Args)]
struct Common {
    /// Built-in scenario name or path to a JSON config.
    #[arg(long, default_value = scenario::PAPER_4NODE)]
    scenario: String,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Consensus round duration; repeat for a sweep. Defaults to the config list.
    #[arg(long)]
    tau: Vec<f64>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Output path. With several τ values, `_tau<τ>` is inserted before the extension.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long)]
    sequential: bool,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn load(common: &Common) -> Result<Scenario, String> {
    let mut cfg = ScenarioConfig::resolve(&common.scenario).map_err(|e| e.to_string())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.build().map_err(|e| e.to_string())
}

fn execution(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn run(cli: Cli) -> Result<ExitCode, String> {
    match cli.command {
        Command::Init { common, out } => {
            let sc = load(&common)?;
            let init = runtime::initialize(&sc.setup).map_err(|e| e.to_string())?;
            print!("{}", GainsReport::new(&sc.config.name, &init).to_text());
            if let Some(path) = out {
                std::fs::write(&path, sc.config.to_json()).map_err(|e| format!("{}: {e}", path.display()))?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate(args) => {
            let (sc, traces) = simulate(&args)?;
            for t in &traces {
                let last = t.rows.last().expect("trace has the initial row");
                println!(
                    "τ = {}: {} steps, m̄ = {}, t_end = {}, ‖x‖ = {:.3e}, ‖ē‖ = {:.3e}, max rounds used {}",
                    t.tau,
                    last.k,
                    t.m_bar,
                    last.t,
                    last.norm_x,
                    last.norm_ebar,
                    t.rows.iter().map(|r| r.rounds_used).max().unwrap_or(0)
                );
            }
            if let Some(out) = &args.out {
                write_traces(out, &traces, sc.setup.graph.node_count())?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Export(args) => match args.format {
            Format::Json => {
                let sc = load(&args.common)?;
                let init = runtime::initialize(&sc.setup).map_err(|e| e.to_string())?;
                let text = GainsReport::new(&sc.config.name, &init).to_json();
                match &args.out {
                    Some(path) => std::fs::write(path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))?,
                    None => println!("{text}"),
                }
                Ok(ExitCode::SUCCESS)
            }
            Format::Csv => {
                let (sc, traces) = simulate(&args)?;
                let nodes = sc.setup.graph.node_count();
                match &args.out {
                    Some(out) => write_traces(out, &traces, nodes)?,
                    None => {
                        for t in &traces {
                            report::write_trace_csv(t, nodes, io::stdout().lock()).map_err(|e| e.to_string())?;
                        }
                    }
                }
                Ok(ExitCode::SUCCESS)
            }
        },
        Command::Verify { common, sequential } => {
            let exec = execution(sequential);
            let results = if common.scenario == scenario::PAPER_4NODE {
                acceptance::run_suite(common.seed.unwrap_or(0), exec)
            } else {
                acceptance::scenario_checks(load(&common)?, exec)
            };
            let mut stdout = io::stdout().lock();
            for r in &results {
                writeln!(stdout, "{r}").map_err(|e| e.to_string())?;
            }
            let passed = results.iter().filter(|r| r.passed).count();
            writeln!(stdout, "{passed}/{} checks passed", results.len()).map_err(|e| e.to_string())?;
            Ok(if acceptance::all_passed(&results) { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn simulate(args: &RunArgs) -> Result<(Scenario, Vec<ClosedLoopTrace>), String> {
    let sc = load(&args.common)?;
    let taus = if args.tau.is_empty() { sc.config.taus.clone() } else { args.tau.clone() };
    if taus.is_empty() {
        return Err("no τ given and the config lists none".into());
    }
    let horizon = args.horizon.unwrap_or(sc.config.horizon);
    let init = runtime::initialize(&sc.setup).map_err(|e| e.to_string())?;
    let traces = batch::map(&taus, execution(args.sequential), |&tau| {
        runtime::run_closed_loop(&sc.setup, &init, &sc.x0, &sc.x_hat0, horizon, tau)
    })
    .into_iter()
    .collect::<Result<Vec<_>, _>>()
    .map_err(|e| e.to_string())?;
    Ok((sc, traces))
}

fn tau_path(out: &Path, tau: f64) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}_tau{tau}.{}", ext.to_string_lossy()),
        None => format!("{stem}_tau{tau}"),
    };
    out.with_file_name(name)
}

fn write_traces(out: &Path, traces: &[ClosedLoopTrace], nodes: usize) -> Result<(), String> {
    for t in traces {
        let path = if traces.len() == 1 { out.to_path_buf() } else { tau_path(out, t.tau) };
        let file = File::create(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        report::write_trace_csv(t, nodes, BufWriter::new(file)).map_err(|e| format!("{}: {e}", path.display()))?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}
