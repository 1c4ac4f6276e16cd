//! Telemanipulation session: wire protocol, mode machine, telemetry fan-out,
//! session recording and a TCP server.
//!
//! The wire format is newline-delimited JSON. Every message carries the
//! protocol version `v`, a per-sender sequence number `seq` and a `type`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::Config;
use crate::geometry::Point;
use crate::kinematics::BendState;
use crate::planner::{raster_path, RasterPath};
use crate::thermal::{self, ActuationNoise, PowerCommand};
use crate::twin::{plane_inverse_kinematics, ScanExecutor, Scene, SessionMode, TelemetryRecord, Twin, TwinCommand, TwinError};

pub const PROTOCOL_VERSION: u32 = 1;
/// Format version of recorded session logs.
pub const SESSION_LOG_VERSION: u32 = 1;
/// Quiet time after the last coarse command before the pose counts as settled, s.
pub const SETTLE_TIME_S: f64 = 1.0;
/// Plane-point wander tolerated while settling, mm.
pub const SETTLE_MOTION_MM: f64 = 0.05;
pub const MIN_STREAM_RATE_HZ: f64 = 1.0;
pub const MAX_STREAM_RATE_HZ: f64 = 50.0;
pub const DEFAULT_STREAM_RATE_HZ: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Operator,
    Observer,
}

/// Payload of a client message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientBody {
    Hello {
        role: Role,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rate_hz: Option<f64>,
    },
    Insert {
        depth_mm: f64,
    },
    Jog {
        dx_mm: f64,
        dy_mm: f64,
    },
    Goto {
        x_mm: f64,
        y_mm: f64,
    },
    Raster {
        width_mm: f64,
        height_mm: f64,
        pitch_mm: f64,
        speed_mm_s: f64,
    },
    Laser {
        on: bool,
    },
    Estop,
    Reset,
}

/// Message kinds, used by the mode table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    Hello,
    Insert,
    Jog,
    Goto,
    Raster,
    Laser,
    Estop,
    Reset,
}

impl MessageKind {
    pub const ALL: [MessageKind; 8] = [
        MessageKind::Hello,
        MessageKind::Insert,
        MessageKind::Jog,
        MessageKind::Goto,
        MessageKind::Raster,
        MessageKind::Laser,
        MessageKind::Estop,
        MessageKind::Reset,
    ];
}

impl ClientBody {
    pub fn kind(&self) -> MessageKind {
        match self {
            ClientBody::Hello { .. } => MessageKind::Hello,
            ClientBody::Insert { .. } => MessageKind::Insert,
            ClientBody::Jog { .. } => MessageKind::Jog,
            ClientBody::Goto { .. } => MessageKind::Goto,
            ClientBody::Raster { .. } => MessageKind::Raster,
            ClientBody::Laser { .. } => MessageKind::Laser,
            ClientBody::Estop => MessageKind::Estop,
            ClientBody::Reset => MessageKind::Reset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientMessage {
    pub v: u32,
    pub seq: u64,
    #[serde(flatten)]
    pub body: ClientBody,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadMessage,
    UnsupportedVersion,
    IllegalMode,
    OutOfReach,
    InvalidArgument,
    EmptyPath,
    ObserverReadOnly,
    Fault,
}

/// Payload of a server message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerBody {
    State(TelemetryRecord),
    Event {
        code: String,
        #[serde(default)]
        detail: String,
    },
    Error {
        code: ErrorCode,
        detail: String,
        #[serde(default)]
        ref_seq: Option<u64>,
    },
}

impl ServerBody {
    fn event(code: &str, detail: impl Into<String>) -> ServerBody {
        ServerBody::Event {
            code: code.to_string(),
            detail: detail.into(),
        }
    }

    pub fn is_error(&self) -> bool {
        matches!(self, ServerBody::Error { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerMessage {
    pub v: u32,
    pub seq: u64,
    #[serde(flatten)]
    pub body: ServerBody,
}

impl ServerMessage {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("server message serializes")
    }
}

/// A message rejected before it reached the session.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{code:?}: {detail}")]
pub struct ProtocolError {
    pub code: ErrorCode,
    pub detail: String,
    pub seq: Option<u64>,
}

impl ProtocolError {
    pub fn to_body(&self) -> ServerBody {
        ServerBody::Error {
            code: self.code,
            detail: self.detail.clone(),
            ref_seq: self.seq,
        }
    }
}

impl ClientMessage {
    pub fn new(seq: u64, body: ClientBody) -> ClientMessage {
        ClientMessage {
            v: PROTOCOL_VERSION,
            seq,
            body,
        }
    }

    /// Strict parse of one wire line.
    pub fn parse(line: &str) -> Result<ClientMessage, ProtocolError> {
        let value: Value = serde_json::from_str(line).map_err(|e| ProtocolError {
            code: ErrorCode::BadMessage,
            detail: e.to_string(),
            seq: None,
        })?;
        Self::from_value(value)
    }

    pub fn from_value(mut value: Value) -> Result<ClientMessage, ProtocolError> {
        let bad = |detail: String, seq: Option<u64>| ProtocolError {
            code: ErrorCode::BadMessage,
            detail,
            seq,
        };
        let obj = value
            .as_object_mut()
            .ok_or_else(|| bad("message must be a JSON object".into(), None))?;
        let seq = obj.remove("seq").and_then(|s| s.as_u64());
        let Some(seq) = seq else {
            return Err(bad("missing or invalid `seq`".into(), None));
        };
        let v = obj
            .remove("v")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| bad("missing or invalid `v`".into(), Some(seq)))?;
        if v != PROTOCOL_VERSION as u64 {
            return Err(ProtocolError {
                code: ErrorCode::UnsupportedVersion,
                detail: format!("protocol version {v} not supported, expected {PROTOCOL_VERSION}"),
                seq: Some(seq),
            });
        }
        let body: ClientBody = serde_json::from_value(value).map_err(|e| bad(e.to_string(), Some(seq)))?;
        Ok(ClientMessage { v: v as u32, seq, body })
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("client message serializes")
    }
}

/// Mode reached by a legal message, `None` when the message is illegal in
/// `mode`. A legal message can still be rejected for its arguments, in
/// which case the mode does not change.
pub fn transition(mode: SessionMode, kind: MessageKind) -> Option<SessionMode> {
    use MessageKind as K;
    use SessionMode as M;
    match (mode, kind) {
        (_, K::Estop) => Some(M::Safe),
        (M::Idle, K::Insert) => Some(M::Inserted),
        (M::Inserted | M::CoarseNav | M::Settled, K::Jog | K::Goto) => Some(M::CoarseNav),
        (M::Settled, K::Raster) => Some(M::Scanning),
        (M::Scanning, K::Laser) => Some(M::Scanning),
        (M::Safe, K::Reset) => Some(M::Idle),
        _ => None,
    }
}

/// Transitions made by the session itself rather than by a message.
pub const AUTOMATIC_TRANSITIONS: [(SessionMode, SessionMode, &str); 2] = [
    (SessionMode::CoarseNav, SessionMode::Settled, "settled"),
    (SessionMode::Scanning, SessionMode::Settled, "scan_finished"),
];

#[derive(Serialize)]
struct TableRow {
    from: SessionMode,
    message: MessageKind,
    to: SessionMode,
}

#[derive(Serialize)]
struct AutoRow {
    from: SessionMode,
    to: SessionMode,
    event: &'static str,
}

#[derive(Serialize)]
struct ModeTable {
    version: u32,
    modes: Vec<SessionMode>,
    messages: Vec<MessageKind>,
    transitions: Vec<TableRow>,
    automatic: Vec<AutoRow>,
    fault: SessionMode,
    laser_allowed: Vec<SessionMode>,
}

/// The mode table as pretty JSON, the fixture consumed by the console.
pub fn mode_table_json() -> String {
    let transitions = SessionMode::ALL
        .iter()
        .flat_map(|&from| {
            MessageKind::ALL
                .iter()
                .filter_map(move |&message| transition(from, message).map(|to| TableRow { from, message, to }))
        })
        .collect();
    let table = ModeTable {
        version: PROTOCOL_VERSION,
        modes: SessionMode::ALL.to_vec(),
        messages: MessageKind::ALL.to_vec(),
        transitions,
        automatic: AUTOMATIC_TRANSITIONS
            .iter()
            .map(|&(from, to, event)| AutoRow { from, to, event })
            .collect(),
        fault: SessionMode::Safe,
        laser_allowed: vec![SessionMode::Scanning],
    };
    let mut s = serde_json::to_string_pretty(&table).expect("mode table serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{code:?}: {detail}")]
pub struct Rejection {
    pub code: ErrorCode,
    pub detail: String,
}

fn reject(code: ErrorCode, detail: impl Into<String>) -> Rejection {
    Rejection {
        code,
        detail: detail.into(),
    }
}

/// Session options fixed for its lifetime.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SessionParams {
    pub seed: u64,
    pub dt: f64,
    pub noise: ActuationNoise,
}

impl Default for SessionParams {
    fn default() -> Self {
        Self {
            seed: 0,
            dt: crate::twin::DEFAULT_DT,
            noise: ActuationNoise { sigma: 0.0 },
        }
    }
}

/// Mode machine wrapped around a twin. Feed it messages with
/// [`Session::handle_message`] and advance it with [`Session::step`].
#[derive(Debug, Clone)]
pub struct Session {
    twin: Twin,
    params: SessionParams,
    mode: SessionMode,
    depth: f64,
    bend: BendState,
    plane_target: Point,
    hold: Point,
    executor: Option<ScanExecutor>,
    auto_laser: bool,
    laser: bool,
    still_since: f64,
    still_anchor: Point,
    last_seq: Option<u64>,
    events: Vec<ServerBody>,
    ticks: u64,
}

impl Session {
    pub fn new(config: Config, scene: Scene, params: SessionParams) -> Result<Session, TwinError> {
        if !(params.dt > 0.0 && params.dt <= crate::twin::MAX_DT) {
            return Err(TwinError::InvalidDt(params.dt));
        }
        let twin = Twin::new(config, scene, params.seed, params.noise);
        let anchor = twin.state().plane_point;
        Ok(Session {
            twin,
            params,
            mode: SessionMode::Idle,
            depth: 0.0,
            bend: BendState::STRAIGHT,
            plane_target: Point::zeros(),
            hold: Point::zeros(),
            executor: None,
            auto_laser: false,
            laser: false,
            still_since: 0.0,
            still_anchor: anchor,
            last_seq: None,
            events: Vec::new(),
            ticks: 0,
        })
    }

    pub fn mode(&self) -> SessionMode {
        self.mode
    }

    pub fn twin(&self) -> &Twin {
        &self.twin
    }

    pub fn params(&self) -> &SessionParams {
        &self.params
    }

    pub fn ticks(&self) -> u64 {
        self.ticks
    }

    /// Coarse plane target of the tendon section.
    pub fn plane_target(&self) -> Point {
        self.plane_target
    }

    /// Events raised while stepping since the last call.
    pub fn take_events(&mut self) -> Vec<ServerBody> {
        std::mem::take(&mut self.events)
    }

    /// Applies one message and returns the replies for its sender.
    pub fn handle_message(&mut self, msg: &ClientMessage) -> Vec<ServerBody> {
        let error = |code, detail: String| {
            vec![ServerBody::Error {
                code,
                detail,
                ref_seq: Some(msg.seq),
            }]
        };
        if msg.v != PROTOCOL_VERSION {
            return error(ErrorCode::UnsupportedVersion, format!("protocol version {} not supported", msg.v));
        }
        if let Some(last) = self.last_seq {
            if msg.seq <= last {
                return error(ErrorCode::BadMessage, format!("seq {} not after {}", msg.seq, last));
            }
        }
        self.last_seq = Some(msg.seq);
        match self.apply(&msg.body) {
            Ok(events) => events,
            Err(r) => error(r.code, r.detail),
        }
    }

    /// Parses and applies one wire line.
    pub fn handle_line(&mut self, line: &str) -> Vec<ServerBody> {
        match ClientMessage::parse(line) {
            Ok(msg) => self.handle_message(&msg),
            Err(e) => vec![e.to_body()],
        }
    }

    fn apply(&mut self, body: &ClientBody) -> Result<Vec<ServerBody>, Rejection> {
        let kind = body.kind();
        if kind == MessageKind::Hello {
            return Err(reject(ErrorCode::BadMessage, "hello is only valid as the first message of a connection"));
        }
        if transition(self.mode, kind).is_none() {
            return Err(reject(ErrorCode::IllegalMode, format!("{kind:?} not allowed in {:?}", self.mode)));
        }
        match *body {
            ClientBody::Insert { depth_mm } => {
                let plane = self.twin.scene().target_plane_z;
                if !(depth_mm.is_finite() && depth_mm >= 0.0 && depth_mm < plane) {
                    return Err(reject(
                        ErrorCode::InvalidArgument,
                        format!("depth must be in [0, {plane}) mm, got {depth_mm}"),
                    ));
                }
                self.depth = depth_mm;
                self.mode = SessionMode::Inserted;
                Ok(vec![ServerBody::event("inserted", format!("{depth_mm} mm"))])
            }
            ClientBody::Jog { dx_mm, dy_mm } => self.goto(self.plane_target + Point::new(dx_mm, dy_mm)),
            ClientBody::Goto { x_mm, y_mm } => self.goto(Point::new(x_mm, y_mm)),
            ClientBody::Raster {
                width_mm,
                height_mm,
                pitch_mm,
                speed_mm_s,
            } => {
                let path = raster_path(width_mm, height_mm, pitch_mm, speed_mm_s, self.twin.workspace()).map_err(|e| {
                    let code = match e {
                        crate::planner::PlanError::EmptyPath => ErrorCode::EmptyPath,
                        _ => ErrorCode::InvalidArgument,
                    };
                    reject(code, e.to_string())
                })?;
                self.start_raster(path, false)
            }
            ClientBody::Laser { on } => {
                self.laser = on;
                Ok(vec![ServerBody::event(if on { "laser_on" } else { "laser_off" }, "")])
            }
            ClientBody::Estop => Ok(vec![self.estop("operator")]),
            ClientBody::Reset => {
                self.mode = SessionMode::Idle;
                self.depth = 0.0;
                self.bend = BendState::STRAIGHT;
                self.plane_target = Point::zeros();
                self.hold = Point::zeros();
                Ok(vec![ServerBody::event("reset", "")])
            }
            ClientBody::Hello { .. } => unreachable!(),
        }
    }

    /// Tendon move that puts the undeflected spot at `target`; the thermal
    /// section is released to its rest position.
    pub fn goto(&mut self, target: Point) -> Result<Vec<ServerBody>, Rejection> {
        if !(matches!(self.mode, SessionMode::Inserted | SessionMode::CoarseNav | SessionMode::Settled)) {
            return Err(reject(ErrorCode::IllegalMode, format!("coarse move not allowed in {:?}", self.mode)));
        }
        if !(target.x.is_finite() && target.y.is_finite()) {
            return Err(reject(ErrorCode::InvalidArgument, "target must be finite"));
        }
        let bend = plane_inverse_kinematics(self.twin.config(), self.twin.scene(), self.depth, &target)
            .map_err(|e| reject(ErrorCode::OutOfReach, e.to_string()))?;
        self.bend = bend;
        self.plane_target = target;
        self.hold = Point::zeros();
        self.mode = SessionMode::CoarseNav;
        self.still_since = self.twin.state().t;
        self.still_anchor = self.twin.state().plane_point;
        Ok(vec![ServerBody::event("moving", format!("{:.4} {:.4}", target.x, target.y))])
    }

    /// Starts a thermal raster from the settled pose. With `auto_laser` the
    /// laser turns on once the first waypoint is reached; otherwise the
    /// operator switches it.
    pub fn start_raster(&mut self, path: RasterPath, auto_laser: bool) -> Result<Vec<ServerBody>, Rejection> {
        if self.mode != SessionMode::Settled {
            return Err(reject(ErrorCode::IllegalMode, format!("raster not allowed in {:?}", self.mode)));
        }
        if path.is_empty() {
            return Err(reject(ErrorCode::EmptyPath, "raster has no waypoints"));
        }
        let ws = self.twin.workspace();
        if let Some(p) = path.waypoints.iter().find(|p| !ws.contains(p, thermal::WORKSPACE_TOLERANCE_MM)) {
            return Err(reject(
                ErrorCode::OutOfReach,
                format!("waypoint ({:.3}, {:.3}) outside the thermal workspace", p.x, p.y),
            ));
        }
        self.executor = Some(ScanExecutor::new(path.waypoints, path.speed));
        self.auto_laser = auto_laser;
        self.laser = auto_laser;
        self.mode = SessionMode::Scanning;
        let pass = self.twin.state().scan_pass_index + 1;
        Ok(vec![ServerBody::event("scan_started", format!("pass {pass}"))])
    }

    /// Sets the thermal setpoint used while not scanning.
    pub fn hold_deflection(&mut self, target: Point) -> Result<(), Rejection> {
        if !self.twin.workspace().contains(&target, thermal::WORKSPACE_TOLERANCE_MM) {
            return Err(reject(ErrorCode::OutOfReach, "hold point outside the thermal workspace"));
        }
        self.hold = target;
        Ok(())
    }

    /// The operator went away: stop unless already safe, and accept the
    /// next operator's sequence numbers from scratch.
    pub fn operator_lost(&mut self) -> Option<ServerBody> {
        self.last_seq = None;
        (self.mode != SessionMode::Safe).then(|| self.estop("operator connection lost"))
    }

    fn estop(&mut self, why: &str) -> ServerBody {
        self.mode = SessionMode::Safe;
        self.executor = None;
        self.laser = false;
        self.hold = Point::zeros();
        ServerBody::event("estopped", why)
    }

    /// Advances one tick. A twin fault puts the session in
    /// [`SessionMode::Safe`] and is returned.
    pub fn step(&mut self) -> Result<TelemetryRecord, TwinError> {
        let cfg = *self.twin.config();
        let x = self.twin.state().thermal.deflection;
        let mut setpoint = self.hold;
        let mut laser = false;
        if self.mode == SessionMode::Scanning {
            let ex = self.executor.as_mut().expect("scanning has an executor");
            match ex.setpoint(&x, cfg.thermal.time_constant) {
                Some(s) => {
                    setpoint = s;
                    laser = self.laser && (!self.auto_laser || ex.on_path());
                }
                None => {
                    self.hold = ex.last_waypoint().unwrap_or(x);
                    setpoint = self.hold;
                    self.executor = None;
                    self.laser = false;
                    self.mode = SessionMode::Settled;
                    let pass = self.twin.state().scan_pass_index;
                    self.events.push(ServerBody::event("scan_finished", format!("pass {pass}")));
                }
            }
        }
        let powers = if self.mode == SessionMode::Safe {
            PowerCommand::ZERO
        } else {
            thermal::allocate_powers(&cfg.thermal, &cfg.limits, &cfg.geometry.heater_angles, &setpoint)
                .map_err(|e| self.fault(TwinError::Thermal(e)))?
        };
        let cmd = TwinCommand {
            bend: (self.bend.theta(), self.bend.phi()),
            powers: powers.powers(),
            laser_on: laser,
            mode: self.mode,
            insertion_depth: self.depth,
        };
        let rec = self.twin.tick(&cmd, self.params.dt).map_err(|e| self.fault(e))?;
        self.ticks += 1;
        if self.mode == SessionMode::CoarseNav {
            let p = self.twin.state().plane_point;
            let t = self.twin.state().t;
            if (p - self.still_anchor).norm() > SETTLE_MOTION_MM {
                self.still_anchor = p;
                self.still_since = t;
            } else if t - self.still_since >= SETTLE_TIME_S - 1e-9 {
                self.mode = SessionMode::Settled;
                self.events.push(ServerBody::event("settled", format!("{:.4} {:.4}", p.x, p.y)));
            }
        }
        Ok(rec)
    }

    fn fault(&mut self, e: TwinError) -> TwinError {
        let ev = self.estop(&format!("fault: {e}"));
        self.events.push(ev);
        e
    }
}

/// Decides which records go out at a fixed rate in simulated time.
#[derive(Debug, Clone, PartialEq)]
pub struct RateLimiter {
    interval: f64,
    next: Option<f64>,
}

impl RateLimiter {
    pub fn new(rate_hz: f64) -> Result<RateLimiter, ProtocolError> {
        if !(MIN_STREAM_RATE_HZ..=MAX_STREAM_RATE_HZ).contains(&rate_hz) {
            return Err(ProtocolError {
                code: ErrorCode::InvalidArgument,
                detail: format!("rate must be in [{MIN_STREAM_RATE_HZ}, {MAX_STREAM_RATE_HZ}] Hz, got {rate_hz}"),
                seq: None,
            });
        }
        Ok(RateLimiter {
            interval: 1.0 / rate_hz,
            next: None,
        })
    }

    pub fn admit(&mut self, t: f64) -> bool {
        match self.next {
            Some(n) if t < n - 1e-9 => false,
            Some(n) => {
                let next = n + self.interval;
                self.next = Some(if next <= t { t + self.interval } else { next });
                true
            }
            None => {
                self.next = Some(t + self.interval);
                true
            }
        }
    }
}

/// Runs `session` for `duration` simulated seconds and collects the state
/// frames a subscriber at `rate_hz` receives, interleaved with events.
pub fn stream_telemetry(session: &mut Session, rate_hz: f64, duration: f64) -> Result<Vec<ServerBody>, ProtocolError> {
    let mut limiter = RateLimiter::new(rate_hz)?;
    let mut out = Vec::new();
    let end = session.twin().state().t + duration;
    while session.twin().state().t < end - 1e-9 {
        let rec = session.step();
        out.extend(session.take_events());
        match rec {
            Ok(rec) if limiter.admit(rec.t) => out.push(ServerBody::State(rec)),
            Ok(_) => {}
            Err(_) => break,
        }
    }
    Ok(out)
}

/// Single-value mailbox where a newer value replaces an unread older one.
#[derive(Debug, Default)]
pub struct LatestSlot<T> {
    value: Mutex<Option<T>>,
    ready: Condvar,
}

impl<T> LatestSlot<T> {
    pub fn new() -> Self {
        LatestSlot {
            value: Mutex::new(None),
            ready: Condvar::new(),
        }
    }

    pub fn publish(&self, v: T) {
        *self.value.lock().expect("slot lock") = Some(v);
        self.ready.notify_all();
    }

    pub fn take(&self) -> Option<T> {
        self.value.lock().expect("slot lock").take()
    }

    pub fn wait_timeout(&self, timeout: Duration) -> Option<T> {
        let guard = self.value.lock().expect("slot lock");
        let (mut guard, _) = self
            .ready
            .wait_timeout_while(guard, timeout, |v| v.is_none())
            .expect("slot lock");
        guard.take()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum LogLine {
    Session {
        version: u32,
        seed: u64,
        dt: f64,
        noise_sigma_mm: f64,
        /// Configuration document, TOML.
        config: String,
        scene: Scene,
    },
    Message {
        tick: u64,
        msg: ClientMessage,
    },
    /// The operator connection closed before this tick.
    Disconnect {
        tick: u64,
    },
    End {
        ticks: u64,
        sha256: String,
    },
}

/// Accumulates a replayable session log.
#[derive(Debug, Clone)]
pub struct SessionRecorder {
    hasher: Sha256,
    text: String,
}

impl SessionRecorder {
    pub fn new(config: &Config, scene: &Scene, params: &SessionParams) -> SessionRecorder {
        let mut r = SessionRecorder {
            hasher: Sha256::new(),
            text: String::new(),
        };
        r.push(&LogLine::Session {
            version: SESSION_LOG_VERSION,
            seed: params.seed,
            dt: params.dt,
            noise_sigma_mm: params.noise.sigma,
            config: config.to_toml_string(),
            scene: scene.clone(),
        });
        r
    }

    fn push(&mut self, line: &LogLine) -> String {
        let mut s = serde_json::to_string(line).expect("log line serializes");
        s.push('\n');
        self.hasher.update(s.as_bytes());
        self.text.push_str(&s);
        s
    }

    /// Records `msg` as handled before tick number `tick` (zero-based).
    /// Returns the appended line.
    pub fn record(&mut self, tick: u64, msg: &ClientMessage) -> String {
        self.push(&LogLine::Message { tick, msg: msg.clone() })
    }

    pub fn record_disconnect(&mut self, tick: u64) -> String {
        self.push(&LogLine::Disconnect { tick })
    }

    /// Text written so far, without the trailer.
    pub fn text(&self) -> &str {
        &self.text
    }

    /// Trailer line closing a log that ran `ticks` ticks.
    pub fn trailer(&self, ticks: u64) -> String {
        let sha256 = hex::encode(self.hasher.clone().finalize());
        let mut s = serde_json::to_string(&LogLine::End { ticks, sha256 }).expect("log line serializes");
        s.push('\n');
        s
    }

    pub fn finish(self, ticks: u64) -> String {
        let tail = self.trailer(ticks);
        self.text + &tail
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("session log version {found} not supported, expected {SESSION_LOG_VERSION}")]
    UnsupportedVersion { found: u32 },
    #[error("checksum mismatch: log says {expected}, content hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("session log has no end line")]
    Truncated,
    #[error("invalid session: {0}")]
    Session(String),
}

/// Result of replaying a session log.
#[derive(Debug, Clone)]
pub struct Replay {
    pub session: Session,
    pub telemetry: Vec<TelemetryRecord>,
}

impl Replay {
    pub fn telemetry_jsonl(&self) -> String {
        telemetry_jsonl(&self.telemetry)
    }
}

pub fn telemetry_jsonl(records: &[TelemetryRecord]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&r.to_json_line());
        s.push('\n');
    }
    s
}

/// Re-runs a recorded session. The checksum and version are verified before
/// anything is executed.
pub fn replay_session(text: &str) -> Result<Replay, ReplayError> {
    let mut hasher = Sha256::new();
    let mut header = None;
    // `None` marks an operator disconnect
    let mut messages: Vec<(u64, Option<ClientMessage>)> = Vec::new();
    let mut end = None;
    for (i, raw) in text.split_inclusive('\n').enumerate() {
        let lineno = i + 1;
        if end.is_some() {
            if raw.trim().is_empty() {
                continue;
            }
            return Err(ReplayError::Malformed {
                line: lineno,
                reason: "content after end line".into(),
            });
        }
        let line: LogLine = serde_json::from_str(raw.trim_end()).map_err(|e| {
            // a future version may add fields; report the version before the schema
            if let Ok(Value::Object(o)) = serde_json::from_str::<Value>(raw) {
                if let Some(v) = o.get("version").and_then(Value::as_u64) {
                    if v != SESSION_LOG_VERSION as u64 {
                        return ReplayError::UnsupportedVersion { found: v as u32 };
                    }
                }
            }
            ReplayError::Malformed {
                line: lineno,
                reason: e.to_string(),
            }
        })?;
        match line {
            LogLine::Session { version, .. } if version != SESSION_LOG_VERSION => {
                return Err(ReplayError::UnsupportedVersion { found: version });
            }
            LogLine::Session { .. } if lineno != 1 => {
                return Err(ReplayError::Malformed {
                    line: lineno,
                    reason: "session header must be the first line".into(),
                });
            }
            LogLine::Session { .. } => header = Some(line),
            _ if header.is_none() => {
                return Err(ReplayError::Malformed {
                    line: lineno,
                    reason: "missing session header".into(),
                });
            }
            LogLine::Message { tick, .. } | LogLine::Disconnect { tick }
                if messages.last().is_some_and(|(t, _)| *t > tick) =>
            {
                return Err(ReplayError::Malformed {
                    line: lineno,
                    reason: "message ticks go backwards".into(),
                });
            }
            LogLine::Message { tick, msg } => messages.push((tick, Some(msg))),
            LogLine::Disconnect { tick } => messages.push((tick, None)),
            LogLine::End { ticks, sha256 } => {
                end = Some((ticks, sha256));
                continue;
            }
        }
        hasher.update(raw.as_bytes());
    }
    let (ticks, expected) = end.ok_or(ReplayError::Truncated)?;
    let actual = hex::encode(hasher.finalize());
    if actual != expected {
        return Err(ReplayError::ChecksumMismatch { expected, actual });
    }
    let Some(LogLine::Session {
        seed,
        dt,
        noise_sigma_mm,
        config,
        scene,
        ..
    }) = header
    else {
        return Err(ReplayError::Truncated);
    };
    let (config, _) = Config::from_toml_str(&config).map_err(|e| ReplayError::Session(e.to_string()))?;
    scene.validate().map_err(|e| ReplayError::Session(e.to_string()))?;
    let params = SessionParams {
        seed,
        dt,
        noise: ActuationNoise { sigma: noise_sigma_mm },
    };
    let mut session = Session::new(config, scene, params).map_err(|e| ReplayError::Session(e.to_string()))?;
    let mut telemetry = Vec::with_capacity(ticks as usize);
    let mut pending = messages.into_iter().peekable();
    for tick in 0..=ticks {
        while let Some((_, msg)) = pending.next_if(|(t, _)| *t == tick) {
            match msg {
                Some(msg) => drop(session.handle_message(&msg)),
                None => drop(session.operator_lost()),
            }
        }
        if tick == ticks {
            break;
        }
        match session.step() {
            Ok(rec) => telemetry.push(rec),
            // a faulted tick is not logged; the session is now safe
            Err(_) => {}
        }
    }
    if let Some((t, _)) = pending.next() {
        return Err(ReplayError::Malformed {
            line: 0,
            reason: format!("message at tick {t} beyond the {ticks} recorded ticks"),
        });
    }
    Ok(Replay { session, telemetry })
}

/// Server settings.
#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub bind: SocketAddr,
    pub params: SessionParams,
    /// Simulated seconds per wall-clock second; `0` runs unthrottled.
    pub speed: f64,
    /// Stop after this many ticks.
    pub max_ticks: Option<u64>,
    /// Directory that receives `session.jsonl` and `telemetry.jsonl`.
    pub log_dir: Option<PathBuf>,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], 0)),
            params: SessionParams::default(),
            speed: 1.0,
            max_ticks: None,
            log_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServeSummary {
    pub ticks: u64,
    pub final_mode: SessionMode,
}

struct Client {
    role: Role,
    events: mpsc::Sender<ServerBody>,
    state: Arc<LatestSlot<ServerBody>>,
    limiter: RateLimiter,
}

enum Inbound {
    Joined(u64, Client),
    Message(u64, Result<ClientMessage, ProtocolError>),
    Left(u64),
}

/// Handle to a running server.
pub struct ServerHandle {
    addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    join: Option<JoinHandle<std::io::Result<ServeSummary>>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(&self) {
        self.shutdown.store(true, Ordering::SeqCst);
    }

    /// Waits for the session loop to stop, flushing the logs.
    pub fn join(mut self) -> std::io::Result<ServeSummary> {
        self.join
            .take()
            .expect("joined once")
            .join()
            .unwrap_or_else(|_| Err(std::io::Error::other("server thread panicked")))
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

/// Starts the TCP server. The first client to say hello as operator gets
/// control; everyone else observes. Losing the operator connection
/// triggers an emergency stop.
pub fn serve(config: Config, scene: Scene, opts: ServeOptions) -> std::io::Result<ServerHandle> {
    let session = Session::new(config, scene.clone(), opts.params).map_err(std::io::Error::other)?;
    let listener = TcpListener::bind(opts.bind)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel::<Inbound>();

    let accept_stop = shutdown.clone();
    thread::spawn(move || accept_loop(listener, tx, accept_stop));

    let loop_stop = shutdown.clone();
    let join = thread::spawn(move || session_loop(session, config, scene, opts, rx, loop_stop));
    Ok(ServerHandle {
        addr,
        shutdown,
        join: Some(join),
    })
}

fn accept_loop(listener: TcpListener, tx: mpsc::Sender<Inbound>, stop: Arc<AtomicBool>) {
    let mut next_id = 0u64;
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("connection from {peer}");
                let _ = stream.set_nonblocking(false);
                let id = next_id;
                next_id += 1;
                let tx = tx.clone();
                let stop = stop.clone();
                thread::spawn(move || connection(id, stream, tx, stop));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn connection(id: u64, stream: TcpStream, tx: mpsc::Sender<Inbound>, stop: Arc<AtomicBool>) {
    let Ok(write_half) = stream.try_clone() else { return };
    let _ = stream.set_read_timeout(Some(Duration::from_millis(100)));
    let (ev_tx, ev_rx) = mpsc::channel::<ServerBody>();
    let slot = Arc::new(LatestSlot::new());
    let writer_slot = slot.clone();
    let writer_stop = stop.clone();
    let writer_done = Arc::new(AtomicBool::new(false));
    let writer_flag = writer_done.clone();
    let writer = thread::spawn(move || {
        let mut out = std::io::BufWriter::new(write_half);
        let mut seq = 0u64;
        let mut send = |body: ServerBody, out: &mut std::io::BufWriter<TcpStream>| -> std::io::Result<()> {
            let line = ServerMessage {
                v: PROTOCOL_VERSION,
                seq,
                body,
            }
            .to_line();
            seq += 1;
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")
        };
        while !writer_stop.load(Ordering::SeqCst) && !writer_flag.load(Ordering::SeqCst) {
            let mut result = Ok(());
            while let Ok(ev) = ev_rx.try_recv() {
                result = result.and_then(|_| send(ev, &mut out));
            }
            if let Some(st) = writer_slot.wait_timeout(Duration::from_millis(10)) {
                result = result.and_then(|_| send(st, &mut out));
            }
            if result.and_then(|_| out.flush()).is_err() {
                break;
            }
        }
        while let Ok(ev) = ev_rx.try_recv() {
            let _ = send(ev, &mut out);
        }
        let _ = out.flush();
    });

    let mut reader = BufReader::new(stream);
    let mut joined = false;
    let mut line = String::new();
    while !stop.load(Ordering::SeqCst) {
        match reader.read_line(&mut line) {
            Ok(0) => break,
            Ok(_) => {}
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                // partial input stays in `line`; keep it for the next read
                continue;
            }
            Err(_) => break,
        }
        let text = std::mem::take(&mut line);
        if text.trim().is_empty() {
            continue;
        }
        let parsed = ClientMessage::parse(text.trim_end());
        if !joined {
            match parsed {
                Ok(ClientMessage {
                    body: ClientBody::Hello { role, rate_hz },
                    ..
                }) => match RateLimiter::new(rate_hz.unwrap_or(DEFAULT_STREAM_RATE_HZ)) {
                    Ok(limiter) => {
                        joined = true;
                        let client = Client {
                            role,
                            events: ev_tx.clone(),
                            state: slot.clone(),
                            limiter,
                        };
                        if tx.send(Inbound::Joined(id, client)).is_err() {
                            break;
                        }
                    }
                    Err(e) => {
                        let _ = ev_tx.send(e.to_body());
                    }
                },
                Ok(msg) => {
                    let _ = ev_tx.send(ServerBody::Error {
                        code: ErrorCode::BadMessage,
                        detail: "expected hello".into(),
                        ref_seq: Some(msg.seq),
                    });
                }
                Err(e) => {
                    let _ = ev_tx.send(e.to_body());
                }
            }
            continue;
        }
        if tx.send(Inbound::Message(id, parsed)).is_err() {
            break;
        }
    }
    let _ = tx.send(Inbound::Left(id));
    writer_done.store(true, Ordering::SeqCst);
    let _ = writer.join();
}

fn session_loop(
    mut session: Session,
    config: Config,
    scene: Scene,
    opts: ServeOptions,
    rx: mpsc::Receiver<Inbound>,
    stop: Arc<AtomicBool>,
) -> std::io::Result<ServeSummary> {
    let mut recorder = SessionRecorder::new(&config, &scene, &opts.params);
    let mut session_file = None;
    let mut telemetry_file = None;
    if let Some(dir) = &opts.log_dir {
        std::fs::create_dir_all(dir)?;
        let mut f = std::fs::File::create(dir.join("session.jsonl"))?;
        f.write_all(recorder.text().as_bytes())?;
        session_file = Some(f);
        telemetry_file = Some(std::io::BufWriter::new(std::fs::File::create(dir.join("telemetry.jsonl"))?));
    }

    let mut clients: HashMap<u64, Client> = HashMap::new();
    let mut operator: Option<u64> = None;
    let started = Instant::now();
    let broadcast = |clients: &HashMap<u64, Client>, body: &ServerBody| {
        for c in clients.values() {
            let _ = c.events.send(body.clone());
        }
    };

    while !stop.load(Ordering::SeqCst) && opts.max_ticks.is_none_or(|m| session.ticks() < m) {
        while let Ok(inbound) = rx.try_recv() {
            match inbound {
                Inbound::Joined(id, mut client) => {
                    if client.role == Role::Operator && operator.is_none() {
                        operator = Some(id);
                    } else {
                        client.role = Role::Observer;
                    }
                    let role = if client.role == Role::Operator { "operator" } else { "observer" };
                    let _ = client.events.send(ServerBody::event("welcome", role));
                    clients.insert(id, client);
                }
                Inbound::Left(id) => {
                    clients.remove(&id);
                    if operator == Some(id) {
                        operator = None;
                        let line = recorder.record_disconnect(session.ticks());
                        if let Some(f) = session_file.as_mut() {
                            f.write_all(line.as_bytes())?;
                        }
                        if let Some(ev) = session.operator_lost() {
                            broadcast(&clients, &ev);
                            log::warn!("operator left, estop");
                        }
                    }
                }
                Inbound::Message(id, parsed) => {
                    let Some(client) = clients.get(&id) else { continue };
                    let replies = match parsed {
                        Err(e) => vec![e.to_body()],
                        Ok(msg) if operator != Some(id) => vec![ServerBody::Error {
                            code: ErrorCode::ObserverReadOnly,
                            detail: "only the operator may send commands".into(),
                            ref_seq: Some(msg.seq),
                        }],
                        Ok(msg) => {
                            let line = recorder.record(session.ticks(), &msg);
                            if let Some(f) = session_file.as_mut() {
                                f.write_all(line.as_bytes())?;
                            }
                            session.handle_message(&msg)
                        }
                    };
                    for r in replies {
                        if r.is_error() {
                            let _ = client.events.send(r);
                        } else {
                            broadcast(&clients, &r);
                        }
                    }
                }
            }
        }

        let rec = session.step();
        for ev in session.take_events() {
            broadcast(&clients, &ev);
        }
        if let Ok(rec) = rec {
            if let Some(f) = telemetry_file.as_mut() {
                writeln!(f, "{}", rec.to_json_line())?;
            }
            for c in clients.values_mut() {
                if c.limiter.admit(rec.t) {
                    c.state.publish(ServerBody::State(rec.clone()));
                }
            }
            if opts.speed > 0.0 {
                let due = Duration::from_secs_f64(rec.t / opts.speed);
                if let Some(wait) = due.checked_sub(started.elapsed()) {
                    thread::sleep(wait);
                }
            }
        }
    }
    if let Some(f) = session_file.as_mut() {
        f.write_all(recorder.trailer(session.ticks()).as_bytes())?;
    }
    if let Some(f) = telemetry_file.as_mut() {
        f.flush()?;
    }
    stop.store(true, Ordering::SeqCst);
    Ok(ServeSummary {
        ticks: session.ticks(),
        final_mode: session.mode(),
    })
}
