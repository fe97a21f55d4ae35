use std::io::Write;
use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use gridloop::chainrunner::{
    load_scenario, run_ladder, run_stage_via, single_report, write_outputs, ChainError, LadderReport, Scenario,
};
use gridloop::powersim::Plant;
use gridloop::stagelink::{serve_connection, ControllerEndpoint, ControllerHost, StageKind, TcpEndpoint};

#[derive(Parser)]
#[command(name = "gridloop", version, about = "Staged closed-loop testing of microgrid controllers")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one stage and write its trace and report.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        stage: u8,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Address of a controller started with `serve-controller`.
        #[arg(long)]
        controller: Option<String>,
    },
    /// Run several stages with one seed and compare them.
    Ladder {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4",
              value_parser = clap::value_parser!(u8).range(1..=4))]
        stages: Vec<u8>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Check a scenario and print it with all defaults filled in.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Host the scenario's controller for out-of-process runs.
    ServeController {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, default_value = "127.0.0.1:5020")]
        listen: String,
        /// Exit after the first connection closes.
        #[arg(long)]
        once: bool,
    },
}

enum Failure {
    Tolerance,
    Usage(String),
}

impl From<ChainError> for Failure {
    fn from(e: ChainError) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn stage_kind(n: u8) -> StageKind {
    StageKind::from_number(n).expect("range-checked by clap")
}

fn summarize(report: &LadderReport) {
    for m in &report.stages {
        println!(
            "stage {}: {} steps, {} cycles, time below ratio {:.3} s, dropped {}{}",
            m.stage,
            m.steps,
            m.cycles,
            m.time_below_ratio_s,
            m.messages_dropped,
            m.aborted.as_deref().map(|a| format!(", aborted: {a}")).unwrap_or_default()
        );
    }
    for d in &report.deviations {
        println!(
            "stages {}-{}: max power RMS deviation {:.3e}, command edit distance {}",
            d.stage_a, d.stage_b, d.max_power_rms_rel, d.command_edit_distance
        );
    }
    for f in &report.failures {
        println!("FAIL {f}");
    }
    println!("{}", if report.pass { "PASS" } else { "FAIL" });
}

fn finish(report: &LadderReport) -> Result<(), Failure> {
    summarize(report);
    if report.pass {
        Ok(())
    } else {
        Err(Failure::Tolerance)
    }
}

fn serve(scenario: &Scenario, listen: &str, once: bool) -> Result<(), Failure> {
    let listener = TcpListener::bind(listen).map_err(|e| Failure::Usage(format!("{listen}: {e}")))?;
    let addr = listener.local_addr().map_err(|e| Failure::Usage(e.to_string()))?;
    println!("listening on {addr}");
    std::io::stdout().flush().ok();
    for stream in listener.incoming() {
        let stream = stream.map_err(|e| Failure::Usage(e.to_string()))?;
        // each connection is a fresh run: fresh controller, plant-initial registers
        let plant = Plant::new(&scenario.grid, &scenario.sim).map_err(|e| Failure::Usage(e.to_string()))?;
        let controller = scenario.controller.build().map_err(Failure::Usage)?;
        let mut host = ControllerHost::new(controller, plant.command_registers());
        if let Err(e) = serve_connection(&mut host, stream) {
            eprintln!("connection ended: {e}");
        }
        if once {
            break;
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Run { scenario, stage, seed, out, controller } => {
            let sc = load_scenario(&scenario)?;
            let seed = seed.unwrap_or(sc.sim.seed);
            let endpoint = match controller {
                Some(addr) => Some(Box::new(
                    TcpEndpoint::connect(&addr).map_err(|e| Failure::Usage(format!("{addr}: {e}")))?,
                ) as Box<dyn ControllerEndpoint>),
                None => None,
            };
            let run = run_stage_via(&sc, stage_kind(stage), seed, endpoint)?;
            let report = single_report(&sc, seed, &run);
            write_outputs(&out, &report, std::slice::from_ref(&run))?;
            finish(&report)
        }
        Cmd::Ladder { scenario, stages, seed, out } => {
            let sc = load_scenario(&scenario)?;
            let seed = seed.unwrap_or(sc.sim.seed);
            let kinds: Vec<StageKind> = stages.into_iter().map(stage_kind).collect();
            let (report, runs) = run_ladder(&sc, &kinds, seed)?;
            write_outputs(&out, &report, &runs)?;
            finish(&report)
        }
        Cmd::Validate { scenario } => {
            let sc = load_scenario(&scenario)?;
            println!("{}", sc.normalized_dump());
            Ok(())
        }
        Cmd::ServeController { scenario, listen, once } => {
            let sc = load_scenario(&scenario)?;
            serve(&sc, &listen, once)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Tolerance) => ExitCode::from(1),
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
