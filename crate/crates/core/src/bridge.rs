//! WebSocket session service for the interactive console.
//!
//! A [`Session`] is the synchronous core: it owns one simulation, accepts
//! client messages and produces one state message per control cycle. The
//! server wraps it in a dedicated planner thread per connection and moves
//! JSON text frames between the socket and that thread over channels.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::mpsc;
use std::time::{Duration, Instant};

use futures_util::{SinkExt, StreamExt};
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc as tokio_mpsc;
use tokio_tungstenite::tungstenite::Message;

use crate::config::Scenario;
use crate::error::{Error, Result};
use crate::gpr::HandoverModel;
use crate::ocp::PlanStatus;
use crate::predictor::HumanObservation;
use crate::sim::{generate_training_data, LogRow, Simulation};
use crate::so3::RpyAngles;

pub const DEFAULT_PORT: u16 = 8732;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlAction {
    Start,
    Pause,
    Reset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    /// Hand position (m) and world roll-pitch-yaw (rad) at client time `t`.
    HandPose { t: f64, p: [f64; 3], rpy: [f64; 3] },
    Control {
        action: ControlAction,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        scenario: Option<String>,
    },
}

/// `[lower, upper]` of each bounded error at the robot's path parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundsMessage {
    pub p1: [f64; 2],
    pub p2: [f64; 2],
    pub o1: [f64; 2],
    pub o2: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    pub t: f64,
    pub q: Vec<f64>,
    pub p_r: [f64; 3],
    pub rpy_r: [f64; 3],
    pub phi_c: f64,
    pub phi_h: f64,
    pub phi_ho: f64,
    pub w_pred: f64,
    pub bounds: BoundsMessage,
    pub e_orth: [f64; 4],
    pub status: PlanStatus,
}

impl StateMessage {
    pub fn from_row(row: &LogRow) -> Self {
        let b = |i: usize| [row.bounds[i].0, row.bounds[i].1];
        Self {
            t: row.t,
            q: row.q.clone(),
            p_r: row.p_r,
            rpy_r: row.rpy_r,
            phi_c: row.phi_c,
            phi_h: row.phi_h,
            phi_ho: row.phi_ho,
            w_pred: row.w_pred,
            bounds: BoundsMessage { p1: b(0), p2: b(1), o1: b(2), o2: b(3) },
            e_orth: row.e_orth,
            status: row.status,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    State(StateMessage),
    Error { t: f64, code: String, detail: String },
}

impl ServerMessage {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("server messages serialize")
    }

    pub fn t(&self) -> f64 {
        match self {
            ServerMessage::State(s) => s.t,
            ServerMessage::Error { t, .. } => *t,
        }
    }
}

const KNOWN_TYPES: [&str; 2] = ["hand_pose", "control"];

/// Parses a client frame, distinguishing malformed JSON from unknown types.
pub fn parse_client_message(text: &str) -> std::result::Result<ClientMessage, (&'static str, String)> {
    let value: serde_json::Value = serde_json::from_str(text).map_err(|e| ("parse", e.to_string()))?;
    match value.get("type").and_then(|t| t.as_str()) {
        None => return Err(("parse", "missing \"type\"".into())),
        Some(t) if !KNOWN_TYPES.contains(&t) => return Err(("unknown_type", format!("unknown message type {t:?}"))),
        Some(_) => {}
    }
    serde_json::from_value(value).map_err(|e| ("parse", e.to_string()))
}

/// Resolves scenario names sent by clients to files in one directory.
#[derive(Debug, Clone)]
pub struct ScenarioDir(pub PathBuf);

impl ScenarioDir {
    pub fn load(&self, name: &str) -> Result<Scenario> {
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(Error::Validation { field: "scenario".into(), message: format!("invalid scenario name {name:?}") });
        }
        Scenario::load(&self.0.join(format!("{name}.toml")))
    }
}

#[derive(Debug, Clone, Copy)]
struct HandSample {
    t: f64,
    position: Vector3<f64>,
    rotation: Matrix3<f64>,
}

/// One interactive planner session.
pub struct Session {
    scenario: Scenario,
    model: HandoverModel,
    sim: Simulation,
    scenarios: Option<ScenarioDir>,
    running: bool,
    grasped: bool,
    steps: u64,
    /// Session time at the last reset; keeps outgoing `t` nondecreasing.
    epoch: f64,
    latest: Option<HandSample>,
    velocity: Vector3<f64>,
}

fn train(scenario: &Scenario) -> Result<HandoverModel> {
    let set = generate_training_data(&scenario.training, scenario.seed)?;
    HandoverModel::fit(&set, &scenario.gp)
}

impl Session {
    pub fn new(scenario: Scenario, model: HandoverModel, scenarios: Option<ScenarioDir>) -> Result<Self> {
        let sim = Simulation::new(&scenario, model.clone())?;
        Ok(Self {
            scenario,
            model,
            sim,
            scenarios,
            running: false,
            grasped: false,
            steps: 0,
            epoch: 0.0,
            latest: None,
            velocity: Vector3::zeros(),
        })
    }

    /// Session with a model trained from the scenario's own settings.
    pub fn from_scenario(scenario: Scenario, scenarios: Option<ScenarioDir>) -> Result<Self> {
        let model = train(&scenario)?;
        Self::new(scenario, model, scenarios)
    }

    pub fn sample_time(&self) -> f64 {
        self.scenario.ocp.sample_time
    }

    pub fn is_running(&self) -> bool {
        self.running
    }

    pub fn grasped(&self) -> bool {
        self.grasped
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    /// Time stamp of the next state message.
    pub fn now(&self) -> f64 {
        self.epoch + self.steps as f64 * self.sample_time()
    }

    fn error(&self, code: &str, detail: impl Into<String>) -> ServerMessage {
        ServerMessage::Error { t: self.now(), code: code.into(), detail: detail.into() }
    }

    pub fn handle_text(&mut self, text: &str) -> Vec<ServerMessage> {
        match parse_client_message(text) {
            Ok(msg) => self.handle(msg),
            Err((code, detail)) => vec![self.error(code, detail)],
        }
    }

    pub fn handle(&mut self, msg: ClientMessage) -> Vec<ServerMessage> {
        match msg {
            ClientMessage::HandPose { t, p, rpy } => {
                if !(t.is_finite() && p.iter().chain(rpy.iter()).all(|v| v.is_finite())) {
                    return vec![self.error("invalid", "non-finite hand pose")];
                }
                self.accept_pose(t, Vector3::from(p), RpyAngles::new(rpy[0], rpy[1], rpy[2]).to_rotation());
                Vec::new()
            }
            ClientMessage::Control { action: ControlAction::Start, .. } => {
                self.running = !self.grasped;
                Vec::new()
            }
            ClientMessage::Control { action: ControlAction::Pause, .. } => {
                self.running = false;
                Vec::new()
            }
            ClientMessage::Control { action: ControlAction::Reset, scenario } => match self.reset(scenario.as_deref()) {
                Ok(()) => Vec::new(),
                Err(e) => vec![self.error("scenario", e.to_string())],
            },
        }
    }

    /// Latest-wins: poses older than the newest accepted one are dropped.
    fn accept_pose(&mut self, t: f64, position: Vector3<f64>, rotation: Matrix3<f64>) {
        if let Some(prev) = self.latest {
            if t < prev.t {
                return;
            }
            if t > prev.t {
                self.velocity = (position - prev.position) / (t - prev.t);
            }
        }
        self.latest = Some(HandSample { t, position, rotation });
    }

    fn reset(&mut self, name: Option<&str>) -> Result<()> {
        if let Some(name) = name {
            let dir = self.scenarios.as_ref().ok_or_else(|| Error::Validation {
                field: "scenario".into(),
                message: "this server does not load scenarios by name".into(),
            })?;
            let scenario = dir.load(name)?;
            let model = if scenario.training == self.scenario.training
                && scenario.gp == self.scenario.gp
                && scenario.seed == self.scenario.seed
            {
                self.model.clone()
            } else {
                train(&scenario)?
            };
            self.scenario = scenario;
            self.model = model;
        }
        let epoch = self.now();
        self.sim = Simulation::new(&self.scenario, self.model.clone())?;
        self.epoch = epoch;
        self.steps = 0;
        self.running = false;
        self.grasped = false;
        self.latest = None;
        self.velocity = Vector3::zeros();
        Ok(())
    }

    fn observation(&self) -> HumanObservation {
        let t = self.steps as f64 * self.sample_time();
        match self.latest {
            Some(h) => HumanObservation { position: h.position, velocity: self.velocity, rotation: h.rotation, t },
            None => HumanObservation {
                position: Vector3::from(self.scenario.hand.start),
                velocity: Vector3::zeros(),
                rotation: self.sim.hand_rotation(&self.scenario.hand.rpy),
                t,
            },
        }
    }

    /// Runs one control cycle when started; returns the state message.
    pub fn tick(&mut self) -> Option<ServerMessage> {
        if !self.running {
            return None;
        }
        let obs = self.observation();
        match self.sim.step(&obs) {
            Ok((mut row, extras)) => {
                row.t = self.now();
                self.steps += 1;
                if extras.grasped {
                    self.grasped = true;
                    self.running = false;
                }
                Some(ServerMessage::State(StateMessage::from_row(&row)))
            }
            Err(e) => {
                self.running = false;
                Some(self.error("planner", e.to_string()))
            }
        }
    }
}

/// Builds a fresh session for every connection.
pub type SessionFactory = dyn Fn() -> Result<Session> + Send + Sync;

/// Planner loop for one connection: drains client frames, ticks at the
/// sample time and forwards replies until the client side hangs up.
fn planner_loop(mut session: Session, inbox: mpsc::Receiver<String>, outbox: tokio_mpsc::UnboundedSender<String>) {
    let period = Duration::from_secs_f64(session.sample_time());
    let mut deadline = Instant::now() + period;
    loop {
        loop {
            match inbox.try_recv() {
                Ok(text) => {
                    for reply in session.handle_text(&text) {
                        if outbox.send(reply.to_json()).is_err() {
                            return;
                        }
                    }
                }
                Err(mpsc::TryRecvError::Empty) => break,
                Err(mpsc::TryRecvError::Disconnected) => {
                    log::info!("client disconnected; session discarded");
                    return;
                }
            }
        }
        if let Some(msg) = session.tick() {
            if outbox.send(msg.to_json()).is_err() {
                return;
            }
        }
        let now = Instant::now();
        if deadline > now {
            std::thread::sleep(deadline - now);
            deadline += period;
        } else {
            // Overran the cycle; restart the schedule instead of bursting.
            deadline = now + period;
        }
    }
}

async fn handle_connection(stream: TcpStream, peer: SocketAddr, session: Session) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("handshake with {peer} failed: {e}");
            return;
        }
    };
    log::info!("session opened for {peer}");
    let (mut sink, mut source) = ws.split();
    let (in_tx, in_rx) = mpsc::channel::<String>();
    let (out_tx, mut out_rx) = tokio_mpsc::unbounded_channel::<String>();
    let planner = std::thread::spawn(move || planner_loop(session, in_rx, out_tx));

    let writer = async {
        while let Some(text) = out_rx.recv().await {
            if sink.send(Message::Text(text)).await.is_err() {
                break;
            }
        }
    };
    let reader = async {
        while let Some(frame) = source.next().await {
            match frame {
                Ok(Message::Text(text)) => {
                    if in_tx.send(text).is_err() {
                        break;
                    }
                }
                Ok(Message::Binary(data)) => {
                    if in_tx.send(String::from_utf8_lossy(&data).into_owned()).is_err() {
                        break;
                    }
                }
                Ok(Message::Close(_)) | Err(_) => break,
                Ok(_) => {}
            }
        }
        drop(in_tx);
    };
    tokio::select! {
        _ = reader => {}
        _ = writer => {}
    }
    let _ = tokio::task::spawn_blocking(move || planner.join()).await;
    log::info!("session closed for {peer}");
}

/// Accepts connections until the listener fails.
pub async fn serve(listener: TcpListener, factory: std::sync::Arc<SessionFactory>) -> Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        match factory() {
            Ok(session) => {
                tokio::spawn(handle_connection(stream, peer, session));
            }
            Err(e) => log::error!("could not create a session for {peer}: {e}"),
        }
    }
}

/// Streams a recorded log to every client that connects, one state message
/// per `period`, then closes the connection.
pub async fn serve_replay(listener: TcpListener, rows: std::sync::Arc<Vec<LogRow>>, period: Duration) -> Result<()> {
    loop {
        let (stream, peer) = listener.accept().await?;
        let rows = rows.clone();
        tokio::spawn(async move {
            let mut ws = match tokio_tungstenite::accept_async(stream).await {
                Ok(ws) => ws,
                Err(e) => {
                    log::warn!("handshake with {peer} failed: {e}");
                    return;
                }
            };
            let mut ticker = tokio::time::interval(period);
            for row in rows.iter() {
                ticker.tick().await;
                let msg = ServerMessage::State(StateMessage::from_row(row)).to_json();
                if ws.send(Message::Text(msg)).await.is_err() {
                    return;
                }
            }
            let _ = ws.close(None).await;
        });
    }
}
