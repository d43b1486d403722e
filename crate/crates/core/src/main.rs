use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};

use handover_mpc::bridge::{self, ScenarioDir, ServerMessage, Session, StateMessage};
use handover_mpc::config::Scenario;
use handover_mpc::error::{Error, Result};
use handover_mpc::gpr::{HandoverModel, SavedModel};
use handover_mpc::logfile::{hand_stream_to_csv, parse_hand_stream, read_log, write_log};
use handover_mpc::sim::{generate_training_data, run_stream_with, run_with_stream, scripted_stream, SimLog, Simulation};

#[derive(Parser)]
#[command(name = "handover", version, about = "MPC handover planner and closed-loop simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ScenarioArgs {
    /// Scenario file (TOML). Built-in defaults when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Overrides the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

impl ScenarioArgs {
    fn load(&self) -> Result<Scenario> {
        let mut s = match &self.scenario {
            Some(p) => Scenario::load(p)?,
            None => Scenario::default(),
        };
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        Ok(s)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic reaching data, fit the GP models and save them.
    TrainGp {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a scenario in closed loop and write the log.
    Run {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Saved model from `train-gp`; trained from the scenario otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Record wall-clock solve times in the log (breaks byte-identity).
        #[arg(long)]
        timing: bool,
    },
    /// Serve interactive planner sessions over WebSocket.
    Serve {
        #[command(flatten)]
        scenario: ScenarioArgs,
        #[arg(long, default_value_t = bridge::DEFAULT_PORT)]
        port: u16,
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Re-run the planner on a recorded hand stream, or re-emit a log for the UI.
    Replay {
        #[command(flatten)]
        scenario: ScenarioArgs,
        /// Recorded hand stream (CSV) to feed the planner.
        #[arg(long, conflicts_with = "log", required_unless_present = "log")]
        hand_stream: Option<PathBuf>,
        /// Log CSV to stream as state messages.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value_t = bridge::DEFAULT_PORT)]
        port: u16,
        /// Print state messages as JSON lines instead of serving them.
        #[arg(long)]
        stdout: bool,
    },
}

fn load_model(path: Option<&Path>, scenario: &Scenario) -> Result<HandoverModel> {
    match path {
        Some(p) => SavedModel::load(p)?.fit(),
        None => {
            let set = generate_training_data(&scenario.training, scenario.seed)?;
            HandoverModel::fit(&set, &scenario.gp)
        }
    }
}

fn report(log: &SimLog, csv: &Path) {
    let outcome = match log.grasp_time {
        Some(t) => format!("grasp at {t:.2} s"),
        None => "no grasp".to_string(),
    };
    println!("{}: {} rows, {outcome}, log {}", log.scenario, log.rows.len(), csv.display());
}

fn train_gp(scenario: &Scenario, out: &Path) -> Result<()> {
    let set = generate_training_data(&scenario.training, scenario.seed)?;
    std::fs::create_dir_all(out)?;
    let saved = SavedModel { hyperparameters: scenario.gp.clone(), training: set };
    saved.fit()?;
    let path = out.join("model.json");
    saved.save(&path)?;
    saved.training.write_csv(&out.join("training.csv"))?;
    println!("{} training samples, model {}", saved.training.len(), path.display());
    Ok(())
}

/// Batch run. The scripted hand motion goes through the recorded-stream
/// format so `replay --hand-stream` of the written file is bit-identical.
fn run(scenario: &Scenario, out: &Path, model: Option<&Path>, timing: bool) -> Result<()> {
    let model = load_model(model, scenario)?;
    let sim = Simulation::new(scenario, model)?;
    let stream_csv = hand_stream_to_csv(&scripted_stream(scenario, &sim.hand_rotation(&scenario.hand.rpy)))?;
    std::fs::create_dir_all(out)?;
    let stream_path = out.join(format!("{}.hand.csv", scenario.name));
    std::fs::write(&stream_path, &stream_csv)?;
    let stream = parse_hand_stream(&stream_csv, &stream_path.display().to_string())?;
    let log = run_stream_with(scenario, sim.with_timing(timing), &stream)?;
    let csv = write_log(&log, scenario, out)?;
    report(&log, &csv);
    Ok(())
}

fn replay_stream(scenario: &Scenario, stream_path: &Path, out: &Path, model: Option<&Path>) -> Result<()> {
    let text = std::fs::read_to_string(stream_path).map_err(|e| Error::Io(format!("{}: {e}", stream_path.display())))?;
    let stream = parse_hand_stream(&text, &stream_path.display().to_string())?;
    let log = run_with_stream(scenario, load_model(model, scenario)?, &stream)?;
    let csv = write_log(&log, scenario, out)?;
    report(&log, &csv);
    Ok(())
}

fn replay_log(path: &Path, port: u16, stdout: bool) -> Result<()> {
    let rows = read_log(path)?;
    if stdout {
        let mut out = std::io::stdout().lock();
        for row in &rows {
            if let Err(e) = writeln!(out, "{}", ServerMessage::State(StateMessage::from_row(row)).to_json()) {
                // A closed pipe (e.g. `| head`) just ends the stream.
                if e.kind() == std::io::ErrorKind::BrokenPipe {
                    return Ok(());
                }
                return Err(e.into());
            }
        }
        return Ok(());
    }
    let period = match rows.as_slice() {
        [a, b, ..] if b.t > a.t => b.t - a.t,
        _ => 0.1,
    };
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
        log::info!("replaying {} rows on port {}", rows.len(), listener.local_addr()?.port());
        bridge::serve_replay(listener, Arc::new(rows), Duration::from_secs_f64(period)).await
    })
}

fn serve(scenario: Scenario, scenario_path: Option<&Path>, port: u16, model: Option<&Path>) -> Result<()> {
    let model = load_model(model, &scenario)?;
    let dir = scenario_path.and_then(Path::parent).map(|d| {
        let d = if d.as_os_str().is_empty() { Path::new(".") } else { d };
        ScenarioDir(d.to_path_buf())
    });
    let factory: Arc<bridge::SessionFactory> = Arc::new(move || Session::new(scenario.clone(), model.clone(), dir.clone()));
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
        log::info!("serving planner sessions on port {}", listener.local_addr()?.port());
        bridge::serve(listener, factory).await
    })
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(Error::from)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainGp { scenario, out } => train_gp(&scenario.load()?, &out),
        Command::Run { scenario, out, model, timing } => run(&scenario.load()?, &out, model.as_deref(), timing),
        Command::Serve { scenario, port, model } => serve(scenario.load()?, scenario.scenario.as_deref(), port, model.as_deref()),
        Command::Replay { scenario, hand_stream, log, out, model, port, stdout } => match (hand_stream, log) {
            (Some(stream), _) => replay_stream(&scenario.load()?, &stream, &out, model.as_deref()),
            (None, Some(log)) => replay_log(&log, port, stdout),
            (None, None) => unreachable!("clap requires one of --hand-stream or --log"),
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("HANDOVER_LOG_LEVEL", "info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
