//! The teleoperation loop.
//!
//! [`Master`] and [`Slave`] are independent actors that only talk through
//! encoded wire messages. [`CoSim`] runs both in lock step over a pair of
//! [`Channel`]s, and [`run_session`] drives the master with a scripted
//! operator ([`Pilot`]) through a [`Scenario`].

use nalgebra::{UnitQuaternion, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::kinematics::{clamp_to_workspace, step_toward, FineStageLimits, MotionLimits, Pose, Workspace};
use crate::netchannel::{Channel, ChannelError, ChannelParams, ChannelStats};
use crate::phantom::{measure_ap, read_vessel, render_frame, surface_height, PhantomConfig, UsFrame};
use crate::protocol::{
    advance_link, decode, encode, filter_stale, ControlOp, FramePayload, LinkEvent, LinkState, LinkStatus, Message,
    ProtocolViolation, Verdict, HEARTBEAT_PERIOD_US, PIXEL_FORMAT_GRAY8,
};
use crate::scenario::{Measure, Scenario};

/// Peak force the haptic device can render, newtons.
pub const FORCE_CAP: f64 = 6.4;

/// The slave only freezes once the commanded pose has held this long.
pub const FREEZE_SETTLE_US: u64 = 100_000;

const STATUS_PERIOD_US: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("invalid session config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Protocol(#[from] ProtocolViolation),
    #[error(transparent)]
    Channel(#[from] ChannelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SessionConfig {
    /// Seconds.
    pub tick: f64,
    pub limits: MotionLimits,
    pub force_cap: f64,
    /// Seconds between streamed frames.
    pub frame_period: f64,
    pub workspace: Workspace,
    pub fine: FineStageLimits,
    /// How long the operator waits for a lost link before giving up, seconds.
    pub reconnect_timeout: f64,
    /// Hard stop on simulated time, seconds.
    pub max_duration: f64,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            tick: 0.01,
            limits: MotionLimits::default(),
            force_cap: FORCE_CAP,
            frame_period: 0.05,
            workspace: Workspace::default(),
            fine: FineStageLimits::default(),
            reconnect_timeout: 5.0,
            max_duration: 1800.0,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        if !(self.tick > 0.0) || !self.tick.is_finite() || self.tick_us() == 0 {
            return Err(SessionError::InvalidConfig("tick must be positive"));
        }
        if self.force_cap != FORCE_CAP {
            return Err(SessionError::InvalidConfig("force_cap is fixed by the haptic device"));
        }
        if !(self.frame_period > 0.0) || !(self.limits.v_max > 0.0) || !(self.limits.w_max > 0.0) {
            return Err(SessionError::InvalidConfig("rates must be positive"));
        }
        if !(self.reconnect_timeout >= 0.0) || !(self.max_duration > 0.0) {
            return Err(SessionError::InvalidConfig("timeouts must be positive"));
        }
        Ok(())
    }

    pub fn tick_us(&self) -> u64 {
        (self.tick * 1e6).round() as u64
    }

    fn frame_period_us(&self) -> u64 {
        (self.frame_period * 1e6).round() as u64
    }
}

/// Scales `f` down to magnitude `cap` if it exceeds it.
pub fn cap_force(f: Vector3<f64>, cap: f64) -> Vector3<f64> {
    let n = f.norm();
    if n <= cap {
        return f;
    }
    let mut g = f * (cap / n);
    while g.norm() > cap {
        g *= 1.0 - f64::EPSILON;
    }
    g
}

pub fn frame_to_payload(f: &UsFrame) -> FramePayload {
    FramePayload {
        width: f.width as u16,
        height: f.height as u16,
        pixel_format: PIXEL_FORMAT_GRAY8,
        frame_id: f.frame_id,
        pixel_spacing_um: (f.pixel_spacing * 1e6).round() as u32,
        frozen: f.frozen,
        pixels: f.intensities.clone(),
    }
}

/// The wire carries no pose; the receiver supplies the one it believes in.
pub fn payload_to_frame(p: &FramePayload, pose: Pose) -> UsFrame {
    UsFrame {
        width: usize::from(p.width),
        height: usize::from(p.height),
        pixel_spacing: f64::from(p.pixel_spacing_um) / 1e6,
        intensities: p.pixels.clone(),
        pose,
        frame_id: p.frame_id,
        frozen: p.frozen,
    }
}

/// Link bookkeeping shared by both ends: handshake retries, heartbeats,
/// sequence numbers and liveness.
#[derive(Debug, Clone, Default)]
pub struct Endpoint {
    pub link: LinkState,
    seq: u32,
    next_hello: u64,
    next_heartbeat: u64,
    pub decode_errors: u64,
    pub stale_dropped: u64,
    pub rx_bytes: u64,
    pub tx_bytes: u64,
}

/// What an endpoint made of an incoming datagram.
enum Inbound {
    Ignored,
    Accepted(Message, u64),
}

impl Endpoint {
    fn step(&mut self, event: LinkEvent) -> Result<(), ProtocolViolation> {
        self.link = advance_link(&self.link, event)?;
        Ok(())
    }

    /// Encodes with the next sequence number.
    pub fn wrap(&mut self, m: &Message, now: u64) -> Vec<u8> {
        let bytes = encode(m, self.seq, now).expect("session messages fit the payload limit");
        self.seq = self.seq.wrapping_add(1);
        self.tx_bytes += bytes.len() as u64;
        bytes
    }

    /// Returns the state the watchdog left the link in, before any hello retry.
    fn tick(&mut self, now: u64, out: &mut Vec<Message>) -> LinkStatus {
        // Tick is accepted in every state.
        let _ = self.step(LinkEvent::Tick { now });
        let watched = self.link.state;
        let retry = matches!(self.link.state, LinkStatus::HelloSent | LinkStatus::SafeStop) && now >= self.next_hello;
        if self.link.state == LinkStatus::Idle || retry {
            out.push(Message::SessionControl(ControlOp::Hello));
            self.step(LinkEvent::HelloSent).expect("hello allowed from idle, hello-sent and safe-stop");
            self.next_hello = now + HEARTBEAT_PERIOD_US;
        }
        if self.link.is_live() && now >= self.next_heartbeat {
            out.push(Message::Heartbeat);
            self.next_heartbeat = now + HEARTBEAT_PERIOD_US;
        }
        watched
    }

    /// Decodes, filters and runs the link machine. Replies (hello
    /// acknowledgements) are appended to `out`.
    fn receive(&mut self, bytes: &[u8], now: u64, out: &mut Vec<Message>) -> Result<Inbound, ProtocolViolation> {
        self.rx_bytes += bytes.len() as u64;
        let (header, msg) = match decode(bytes) {
            Ok(v) => v,
            Err(e) => {
                log::debug!("dropping undecodable message: {e}");
                self.decode_errors += 1;
                return Ok(Inbound::Ignored);
            }
        };
        if self.link.state == LinkStatus::Closed {
            return Ok(Inbound::Ignored);
        }
        if filter_stale(&mut self.link, &header) == Verdict::Drop {
            self.stale_dropped += 1;
            return Ok(Inbound::Ignored);
        }
        match msg {
            Message::SessionControl(ControlOp::Hello) => {
                if self.link.state == LinkStatus::Idle {
                    out.push(Message::SessionControl(ControlOp::Hello));
                    self.step(LinkEvent::HelloSent)?;
                    self.next_hello = now + HEARTBEAT_PERIOD_US;
                }
                let was_safe_stop = self.link.state == LinkStatus::SafeStop;
                self.step(LinkEvent::HelloReceived { now })?;
                if !was_safe_stop {
                    out.push(Message::SessionControl(ControlOp::Start));
                }
            }
            Message::SessionControl(ControlOp::Start) => self.step(LinkEvent::HelloReceived { now })?,
            Message::SessionControl(ControlOp::Bye) => self.step(LinkEvent::Bye)?,
            _ => self.step(LinkEvent::Heartbeat { now })?,
        }
        Ok(Inbound::Accepted(msg, header.timestamp_us))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Motion {
    Hold,
    /// Relative move of the virtual probe.
    Delta { translation: Vector3<f64>, rotation: UnitQuaternion<f64> },
    /// Absolute placement of the virtual probe.
    Place(Pose),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatorInput {
    pub motion: Motion,
    /// `Some(true)` asks for freeze, `Some(false)` for unfreeze.
    pub freeze: Option<bool>,
}

impl OperatorInput {
    pub const HOLD: OperatorInput = OperatorInput { motion: Motion::Hold, freeze: None };

    pub fn place(p: Pose) -> Self {
        OperatorInput { motion: Motion::Place(p), freeze: None }
    }
}

/// Expert-side station.
#[derive(Debug, Clone)]
pub struct Master {
    pub virtual_probe: Pose,
    pub last_rendered_force: Vector3<f64>,
    pub frame_buffer: Option<UsFrame>,
    pub frozen: bool,
    pub last_status: Option<Message>,
    pub endpoint: Endpoint,
    cfg: SessionConfig,
}

impl Master {
    pub fn new(start: Pose, cfg: SessionConfig) -> Self {
        Master {
            virtual_probe: start,
            last_rendered_force: Vector3::zeros(),
            frame_buffer: None,
            frozen: false,
            last_status: None,
            endpoint: Endpoint::default(),
            cfg,
        }
    }

    pub fn link(&self) -> &LinkState {
        &self.endpoint.link
    }

    pub fn tick(&mut self, input: OperatorInput, now: u64) -> Vec<Message> {
        let mut out = Vec::new();
        if self.endpoint.link.state == LinkStatus::Closed {
            return out;
        }
        self.endpoint.tick(now, &mut out);
        let wanted = match input.motion {
            Motion::Hold => self.virtual_probe,
            Motion::Delta { translation, rotation } => Pose {
                position: self.virtual_probe.position + translation,
                orientation: rotation * self.virtual_probe.orientation,
            },
            Motion::Place(p) => p,
        };
        if let Ok(p) = clamp_to_workspace(&wanted, &self.cfg.workspace, &self.cfg.fine) {
            self.virtual_probe = p;
        }
        let live = self.endpoint.link.is_live();
        if let Some(f) = input.freeze {
            self.frozen = f;
            if live {
                let op = if f { ControlOp::Freeze } else { ControlOp::Unfreeze };
                out.push(Message::SessionControl(op));
            }
        }
        if live {
            out.push(Message::PoseCommand(self.virtual_probe));
        }
        out
    }

    pub fn receive(&mut self, bytes: &[u8], now: u64) -> Result<Vec<Message>, ProtocolViolation> {
        let mut out = Vec::new();
        if let Inbound::Accepted(msg, _) = self.endpoint.receive(bytes, now, &mut out)? {
            match msg {
                Message::ForceSample(f) => self.last_rendered_force = cap_force(f, self.cfg.force_cap),
                Message::UsFrame(p) => self.frame_buffer = Some(payload_to_frame(&p, self.virtual_probe)),
                m @ Message::StatusReport { .. } => self.last_status = Some(m),
                _ => {}
            }
        }
        Ok(out)
    }

    /// Ends the session from the master side.
    pub fn bye(&mut self) -> Vec<Message> {
        if self.endpoint.link.state == LinkStatus::Closed {
            return Vec::new();
        }
        let _ = self.endpoint.step(LinkEvent::Bye);
        vec![Message::SessionControl(ControlOp::Bye)]
    }
}

/// Patient-side station: robot, ultrasound scanner and their controller.
#[derive(Debug, Clone)]
pub struct Slave {
    pub actual_probe: Pose,
    pub commanded_probe: Pose,
    pub contact_force: Vector3<f64>,
    pub halted: bool,
    pub freeze_requested: bool,
    pub frozen_frame: Option<UsFrame>,
    pub endpoint: Endpoint,
    pub frames_rendered: u32,
    commanded_since: u64,
    next_frame: u64,
    next_status: u64,
    window: (u64, u64),
    one_way_us: Option<f64>,
    cfg: SessionConfig,
    phantom: PhantomConfig,
}

impl Slave {
    pub fn new(start: Pose, cfg: SessionConfig, phantom: PhantomConfig) -> Self {
        let mut s = Slave {
            actual_probe: start,
            commanded_probe: start,
            contact_force: Vector3::zeros(),
            halted: false,
            freeze_requested: false,
            frozen_frame: None,
            endpoint: Endpoint::default(),
            frames_rendered: 0,
            commanded_since: 0,
            next_frame: 0,
            next_status: STATUS_PERIOD_US,
            window: (0, 0),
            one_way_us: None,
            cfg,
            phantom,
        };
        s.contact_force = s.force_at(&start);
        s
    }

    pub fn link(&self) -> &LinkState {
        &self.endpoint.link
    }

    pub fn phantom(&self) -> &PhantomConfig {
        &self.phantom
    }

    /// Drops the connection: the probe halts where it is and a fresh
    /// handshake is needed before it moves again.
    pub fn reset_link(&mut self, now: u64) {
        self.endpoint = Endpoint::default();
        self.halted = true;
        self.commanded_probe = self.actual_probe;
        self.commanded_since = now;
        self.window = (0, 0);
        self.one_way_us = None;
    }

    /// Penetration below the skin, meters (negative when above).
    fn penetration(&self, p: &Pose) -> f64 {
        surface_height(&self.phantom, &p.position.xy()) - p.position.z
    }

    /// Linear normal spring against the skin.
    fn force_at(&self, p: &Pose) -> Vector3<f64> {
        Vector3::new(0.0, 0.0, self.phantom.stiffness * self.penetration(p).max(0.0))
    }

    pub fn in_contact(&self) -> bool {
        self.penetration(&self.actual_probe) >= 0.0
    }

    fn render(&mut self, frozen: bool) -> Option<UsFrame> {
        let id = self.frames_rendered;
        let mut f = render_frame(&self.phantom, &self.actual_probe, id).ok()?;
        self.frames_rendered = self.frames_rendered.wrapping_add(1);
        f.frozen = frozen;
        Some(f)
    }

    pub fn tick(&mut self, now: u64) -> Vec<Message> {
        let mut out = Vec::new();
        if self.endpoint.link.state == LinkStatus::Closed {
            return out;
        }
        let watched = self.endpoint.tick(now, &mut out);
        if watched == LinkStatus::SafeStop && !self.halted {
            log::info!("slave watchdog: halting at t = {now} us");
            self.halted = true;
        }
        let live = self.endpoint.link.is_live();
        if live && !self.halted {
            if let Ok(p) = step_toward(
                &self.actual_probe,
                &self.commanded_probe,
                self.cfg.tick,
                &self.cfg.limits,
                &self.cfg.workspace,
                &self.cfg.fine,
            ) {
                self.actual_probe = p;
            }
        }
        self.contact_force = self.force_at(&self.actual_probe);
        if !live {
            return out;
        }
        out.push(Message::ForceSample(self.contact_force));

        let settled = self.actual_probe == self.commanded_probe
            && now.saturating_sub(self.commanded_since) >= FREEZE_SETTLE_US;
        if self.freeze_requested && self.frozen_frame.is_none() && settled && self.in_contact() {
            self.frozen_frame = self.render(true);
        }
        if now >= self.next_frame {
            self.next_frame = now + self.cfg.frame_period_us();
            let frame = match &self.frozen_frame {
                Some(f) => Some(f.clone()),
                None if self.in_contact() => self.render(false),
                None => None,
            };
            if let Some(f) = frame {
                out.push(Message::UsFrame(frame_to_payload(&f)));
            }
        }
        if now >= self.next_status {
            self.next_status = now + STATUS_PERIOD_US;
            let (rx0, tx0) = self.window;
            let secs = STATUS_PERIOD_US as f64 / 1e6;
            out.push(Message::StatusReport {
                rx_bytes_per_s: (self.endpoint.rx_bytes.saturating_sub(rx0) as f64 / secs) as u64,
                tx_bytes_per_s: (self.endpoint.tx_bytes.saturating_sub(tx0) as f64 / secs) as u64,
                rtt_estimate_us: self.one_way_us.map_or(0, |d| (2.0 * d).round() as u64),
            });
            self.window = (self.endpoint.rx_bytes, self.endpoint.tx_bytes);
        }
        out
    }

    pub fn receive(&mut self, bytes: &[u8], now: u64) -> Result<Vec<Message>, ProtocolViolation> {
        let mut out = Vec::new();
        let before = self.endpoint.link.state;
        let Inbound::Accepted(msg, sent_at) = self.endpoint.receive(bytes, now, &mut out)? else {
            return Ok(out);
        };
        // Assumes both ends share a clock, as they do in the co-simulation.
        let d = now.saturating_sub(sent_at) as f64;
        self.one_way_us = Some(self.one_way_us.map_or(d, |e| 0.9 * e + 0.1 * d));
        let state = self.endpoint.link.state;
        if self.halted && state == LinkStatus::Active && before != LinkStatus::Active {
            // Fresh handshake after a watchdog stop: resume, holding position.
            self.halted = false;
            self.commanded_probe = self.actual_probe;
            self.commanded_since = now;
        }
        if !self.endpoint.link.is_live() || self.halted {
            return Ok(out);
        }
        match msg {
            Message::PoseCommand(p) => {
                if let Ok(p) = clamp_to_workspace(&p, &self.cfg.workspace, &self.cfg.fine) {
                    if p != self.commanded_probe {
                        self.commanded_probe = p;
                        self.commanded_since = now;
                    }
                }
            }
            Message::SessionControl(ControlOp::Freeze) => self.freeze_requested = true,
            Message::SessionControl(ControlOp::Unfreeze) => {
                self.freeze_requested = false;
                self.frozen_frame = None;
            }
            Message::SessionControl(ControlOp::Stop) => {
                self.commanded_probe = self.actual_probe;
                self.commanded_since = now;
            }
            _ => {}
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Actor {
    Master,
    Slave,
    Operator,
    Channel,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    pub t_us: u64,
    pub actor: Actor,
    pub event: String,
    pub detail: String,
}

/// State of both ends at the end of one tick.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceSample {
    pub t_us: u64,
    pub master_link: LinkStatus,
    pub slave_link: LinkStatus,
    pub virtual_probe: Pose,
    pub slave_probe: Pose,
    /// As measured at the slave, uncapped.
    pub contact_force: Vector3<f64>,
    pub rendered_force: Vector3<f64>,
    pub halted: bool,
    /// When the slave last heard anything live from the master.
    pub slave_last_rx: u64,
}

/// Lock-step co-simulation of master, slave and both link directions.
#[derive(Debug, Clone)]
pub struct CoSim {
    pub master: Master,
    pub slave: Slave,
    /// Master to slave.
    pub uplink: Channel,
    /// Slave to master.
    pub downlink: Channel,
    pub now: u64,
    pub cfg: SessionConfig,
    pub samples: Vec<TraceSample>,
    pub events: Vec<TraceEvent>,
    blackout: bool,
}

impl CoSim {
    /// Channel seeds are derived from `seed`, one per direction.
    pub fn new(
        cfg: SessionConfig,
        phantom: PhantomConfig,
        params: ChannelParams,
        seed: u64,
        start: Pose,
    ) -> Result<Self, SessionError> {
        cfg.validate()?;
        let uplink = Channel::new(params.with_seed(seed))?;
        let downlink = Channel::new(params.with_seed(seed ^ 0x9e37_79b9_7f4a_7c15))?;
        Ok(CoSim {
            master: Master::new(start, cfg),
            slave: Slave::new(start, cfg, phantom),
            uplink,
            downlink,
            now: 0,
            cfg,
            samples: Vec::new(),
            events: Vec::new(),
            blackout: false,
        })
    }

    pub fn note(&mut self, actor: Actor, event: &str, detail: impl Into<String>) {
        self.events.push(TraceEvent { t_us: self.now, actor, event: event.into(), detail: detail.into() });
    }

    /// Drops everything sent in either direction while `on`.
    pub fn set_blackout(&mut self, on: bool) -> Result<(), SessionError> {
        if on == self.blackout {
            return Ok(());
        }
        self.blackout = on;
        for ch in [&mut self.uplink, &mut self.downlink] {
            let p = *ch.params();
            ch.set_conditions(p.base_delay, p.jitter, if on { 1.0 } else { 0.0 })?;
        }
        Ok(())
    }

    fn send_up(&mut self, msgs: Vec<Message>) {
        for m in msgs {
            let b = self.master.endpoint.wrap(&m, self.now);
            self.uplink.send(b, self.now);
        }
    }

    fn send_down(&mut self, msgs: Vec<Message>) {
        for m in msgs {
            let b = self.slave.endpoint.wrap(&m, self.now);
            self.downlink.send(b, self.now);
        }
    }

    /// Advances one tick: deliveries, then the master, then the slave.
    pub fn step(&mut self, input: OperatorInput) -> Result<(), SessionError> {
        let now = self.now;
        let links = (self.master.link().state, self.slave.link().state, self.slave.halted);

        for bytes in self.uplink.poll(now) {
            let replies = self.slave.receive(&bytes, now)?;
            self.send_down(replies);
        }
        for bytes in self.downlink.poll(now) {
            let replies = self.master.receive(&bytes, now)?;
            self.send_up(replies);
        }
        let out = self.master.tick(input, now);
        self.send_up(out);
        let out = self.slave.tick(now);
        self.send_down(out);

        let (m, s) = (self.master.link().state, self.slave.link().state);
        if m != links.0 {
            self.note(Actor::Master, "link", format!("{:?} -> {m:?}", links.0));
        }
        if s != links.1 {
            self.note(Actor::Slave, "link", format!("{:?} -> {s:?}", links.1));
        }
        if self.slave.halted != links.2 {
            let what = if self.slave.halted { "halted" } else { "resumed" };
            self.note(Actor::Slave, what, String::new());
        }
        self.samples.push(TraceSample {
            t_us: now,
            master_link: m,
            slave_link: s,
            virtual_probe: self.master.virtual_probe,
            slave_probe: self.slave.actual_probe,
            contact_force: self.slave.contact_force,
            rendered_force: self.master.last_rendered_force,
            halted: self.slave.halted,
            slave_last_rx: self.slave.link().last_heartbeat_rx,
        });
        self.now += self.cfg.tick_us();
        Ok(())
    }

    /// Sends bye from the master and lets it reach the slave.
    pub fn close(&mut self) -> Result<(), SessionError> {
        let bye = self.master.bye();
        self.send_up(bye);
        self.note(Actor::Master, "bye", String::new());
        Ok(())
    }
}

/// A frozen frame captured by the operator at a station.
#[derive(Debug, Clone, PartialEq)]
pub struct Capture {
    pub station: usize,
    pub t_us: u64,
    pub frame: UsFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeasurementResult {
    pub station: usize,
    pub measure: Measure,
    /// Caliper reading, meters; `None` if no vessel was found.
    pub value: Option<f64>,
    pub t_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Connect,
    Approach,
    Dwell { left: u32 },
    Freeze { retry_at: u64 },
    Unfreeze { retry_at: u64 },
    Finished,
}

/// Scripted operator: visits each station, freezes, captures, unfreezes.
#[derive(Debug, Clone)]
pub struct Pilot {
    targets: Vec<Pose>,
    dwell: Vec<u32>,
    index: usize,
    phase: Phase,
    lost_since: Option<u64>,
    pub captures: Vec<Capture>,
    pub failure: Option<String>,
}

impl Pilot {
    pub fn new(scenario: &Scenario, cfg: &SessionConfig) -> Self {
        Pilot {
            targets: scenario
                .stations
                .iter()
                .map(|s| clamp_to_workspace(&s.pose(), &cfg.workspace, &cfg.fine).unwrap_or_else(|_| s.pose()))
                .collect(),
            dwell: scenario.stations.iter().map(|s| s.dwell_ticks).collect(),
            index: 0,
            phase: Phase::Connect,
            lost_since: None,
            captures: Vec::new(),
            failure: None,
        }
    }

    pub fn done(&self) -> bool {
        self.phase == Phase::Finished
    }

    /// Decides the operator's next input after looking at the master screen.
    pub fn input(&mut self, master: &Master, now: u64, cfg: &SessionConfig, log: &mut Vec<TraceEvent>) -> OperatorInput {
        if self.phase == Phase::Finished {
            return OperatorInput::HOLD;
        }
        if !master.link().is_live() {
            if self.phase != Phase::Connect {
                let since = *self.lost_since.get_or_insert(now);
                if now - since > (cfg.reconnect_timeout * 1e6) as u64 {
                    self.failure =
                        Some(format!("link lost at {:.3} s and not recovered within {} s", since as f64 / 1e6, cfg.reconnect_timeout));
                    self.phase = Phase::Finished;
                }
            }
            return OperatorInput::HOLD;
        }
        self.lost_since = None;
        let retry = HEARTBEAT_PERIOD_US;
        let mut event = |e: &str, d: String| log.push(TraceEvent { t_us: now, actor: Actor::Operator, event: e.into(), detail: d });
        match self.phase {
            Phase::Connect | Phase::Approach if self.index >= self.targets.len() => {
                self.phase = Phase::Finished;
                OperatorInput::HOLD
            }
            Phase::Connect => {
                self.phase = Phase::Approach;
                self.input(master, now, cfg, log)
            }
            Phase::Approach => {
                let target = self.targets[self.index];
                let next = step_toward(&master.virtual_probe, &target, cfg.tick, &cfg.limits, &cfg.workspace, &cfg.fine)
                    .unwrap_or(target);
                if next == target {
                    event("arrive", format!("station {}", self.index));
                    self.phase = Phase::Dwell { left: self.dwell[self.index] };
                }
                OperatorInput::place(next)
            }
            Phase::Dwell { left } => {
                if left == 0 {
                    self.phase = Phase::Freeze { retry_at: now + retry };
                    OperatorInput { motion: Motion::Hold, freeze: Some(true) }
                } else {
                    self.phase = Phase::Dwell { left: left - 1 };
                    OperatorInput::HOLD
                }
            }
            Phase::Freeze { retry_at } => match &master.frame_buffer {
                Some(f) if f.frozen => {
                    let mut frame = f.clone();
                    frame.pose = self.targets[self.index];
                    event("capture", format!("station {} frame {}", self.index, frame.frame_id));
                    self.captures.push(Capture { station: self.index, t_us: now, frame });
                    self.phase = Phase::Unfreeze { retry_at: now + retry };
                    OperatorInput { motion: Motion::Hold, freeze: Some(false) }
                }
                _ if now >= retry_at => {
                    self.phase = Phase::Freeze { retry_at: now + retry };
                    OperatorInput { motion: Motion::Hold, freeze: Some(true) }
                }
                _ => OperatorInput::HOLD,
            },
            Phase::Unfreeze { retry_at } => match &master.frame_buffer {
                Some(f) if !f.frozen => {
                    self.index += 1;
                    self.phase = Phase::Approach;
                    self.input(master, now, cfg, log)
                }
                _ if now >= retry_at => {
                    self.phase = Phase::Unfreeze { retry_at: now + retry };
                    OperatorInput { motion: Motion::Hold, freeze: Some(false) }
                }
                _ => OperatorInput::HOLD,
            },
            Phase::Finished => OperatorInput::HOLD,
        }
    }
}

/// Everything a session run produced.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SessionTrace {
    pub scenario: String,
    pub seed: u64,
    pub channel: ChannelParams,
    pub samples: Vec<TraceSample>,
    pub events: Vec<TraceEvent>,
    #[serde(skip)]
    pub captures: Vec<Capture>,
    pub measurements: Vec<MeasurementResult>,
    /// Session start to last measurement, seconds.
    pub duration_s: f64,
    /// Total simulated time, seconds.
    pub simulated_s: f64,
    pub uplink: ChannelStats,
    pub downlink: ChannelStats,
    /// Why the exam could not be completed, if it could not.
    pub failure: Option<String>,
}

impl SessionTrace {
    pub fn completed(&self) -> bool {
        self.failure.is_none()
    }

    pub fn measurement(&self, measure: Measure) -> impl Iterator<Item = &MeasurementResult> {
        self.measurements.iter().filter(move |m| m.measure == measure)
    }

    /// One JSON object per line: tick state and events interleaved in time
    /// order, then a summary line.
    pub fn to_jsonl(&self) -> String {
        use serde_json::json;
        let mut out = String::new();
        let mut push = |v: serde_json::Value| {
            out.push_str(&v.to_string());
            out.push('\n');
        };
        let mut ev = self.events.iter().peekable();
        for s in &self.samples {
            while let Some(e) = ev.next_if(|e| e.t_us <= s.t_us) {
                push(json!({"t_us": e.t_us, "actor": e.actor, "event": e.event, "payload": e.detail}));
            }
            push(json!({"t_us": s.t_us, "actor": "cosim", "event": "state", "payload": s}));
        }
        for e in ev {
            push(json!({"t_us": e.t_us, "actor": e.actor, "event": e.event, "payload": e.detail}));
        }
        push(json!({
            "t_us": (self.simulated_s * 1e6).round() as u64,
            "actor": "cosim",
            "event": "summary",
            "payload": {
                "scenario": self.scenario,
                "seed": self.seed,
                "channel": self.channel,
                "duration_s": self.duration_s,
                "simulated_s": self.simulated_s,
                "measurements": self.measurements,
                "uplink": self.uplink,
                "downlink": self.downlink,
                "failure": self.failure,
            }
        }));
        out
    }
}

/// Probe start: hovering 2 cm above the workspace center.
pub fn start_pose() -> Pose {
    Pose::at(0.0, 0.0, 0.02)
}

/// Runs the remote arm of a scenario over `params`.
pub fn run_session(scenario: &Scenario, params: ChannelParams, seed: u64) -> Result<SessionTrace, SessionError> {
    run_session_with(scenario, params, seed, SessionConfig::default())
}

pub fn run_session_with(
    scenario: &Scenario,
    params: ChannelParams,
    seed: u64,
    cfg: SessionConfig,
) -> Result<SessionTrace, SessionError> {
    let mut sim = CoSim::new(cfg, scenario.phantom.clone(), params, seed, start_pose())?;
    let mut pilot = Pilot::new(scenario, &cfg);
    let limit = (cfg.max_duration * 1e6) as u64;
    let outage = scenario
        .outage
        .map(|o| ((o.start_s * 1e6).round() as u64, ((o.start_s + o.duration_s) * 1e6).round() as u64));

    while !pilot.done() {
        if sim.now > limit {
            pilot.failure = Some(format!("exam did not finish within {} s", cfg.max_duration));
            break;
        }
        if let Some((a, b)) = outage {
            let on = sim.now >= a && sim.now < b;
            if on != sim.blackout {
                sim.set_blackout(on)?;
                sim.note(Actor::Channel, if on { "outage" } else { "restored" }, String::new());
            }
        }
        let input = pilot.input(&sim.master, sim.now, &cfg, &mut sim.events);
        sim.step(input)?;
    }
    if pilot.failure.is_none() {
        sim.close()?;
    } else {
        let reason = pilot.failure.clone().unwrap_or_default();
        sim.note(Actor::Operator, "abort", reason);
    }

    let measurements: Vec<MeasurementResult> = scenario
        .measurements
        .iter()
        .filter_map(|m| {
            let c = pilot.captures.iter().find(|c| c.station == m.station)?;
            Some(MeasurementResult { station: m.station, measure: m.measure, value: measure_ap(&c.frame), t_us: c.t_us })
        })
        .collect();
    let last = measurements.iter().map(|m| m.t_us).max().unwrap_or(0);
    for m in &measurements {
        let reading = pilot.captures.iter().find(|c| c.station == m.station).and_then(|c| read_vessel(&c.frame));
        log::debug!("station {} {:?}: {:?} ({:?})", m.station, m.measure, m.value, reading.map(|r| r.column));
    }
    Ok(SessionTrace {
        scenario: scenario.name.clone(),
        seed,
        channel: params,
        samples: sim.samples,
        events: sim.events,
        captures: pilot.captures,
        measurements,
        duration_s: last as f64 / 1e6,
        simulated_s: sim.now as f64 / 1e6,
        uplink: sim.uplink.stats(),
        downlink: sim.downlink.stats(),
        failure: pilot.failure,
    })
}
