//! Binary wire protocol between master and slave, and the link state machine.
//!
//! Frame layout (all multi-byte fields little-endian):
//!
//! ```text
//! 0   2  magic "TR" (0x54 0x52)
//! 2   1  version (1)
//! 3   1  msg_type
//! 4   4  seq
//! 8   8  timestamp_us
//! 16  4  payload_len
//! 20  n  payload
//! 20+n 4 CRC32 (IEEE) over bytes [0, 20+n)
//! ```

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::Serialize;
use thiserror::Error;

use crate::kinematics::Pose;

pub const MAGIC: [u8; 2] = [0x54, 0x52];
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 20;
pub const CRC_LEN: usize = 4;
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;

/// Decoded quaternions within this of unit norm are re-normalized.
pub const QUAT_TOLERANCE: f64 = 1e-6;

pub const HEARTBEAT_PERIOD_US: u64 = 100_000;
pub const DEGRADED_AFTER_US: u64 = 250_000;
pub const SAFE_STOP_AFTER_US: u64 = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    Oversize(usize),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecodeError {
    #[error("not a message (bad magic)")]
    NotAMessage,
    #[error("corrupt message (CRC mismatch)")]
    Corrupt,
    #[error("unsupported version {version} or message type {msg_type}")]
    Unsupported { version: u8, msg_type: u8 },
    #[error("truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    /// Integrity checks passed but the payload does not fit its type.
    #[error("malformed payload: {0}")]
    Malformed(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[repr(u8)]
pub enum MsgType {
    PoseCommand = 1,
    ForceSample = 2,
    UsFrame = 3,
    Heartbeat = 4,
    SessionControl = 5,
    StatusReport = 6,
}

impl MsgType {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => MsgType::PoseCommand,
            2 => MsgType::ForceSample,
            3 => MsgType::UsFrame,
            4 => MsgType::Heartbeat,
            5 => MsgType::SessionControl,
            6 => MsgType::StatusReport,
            _ => return None,
        })
    }

    fn slot(self) -> usize {
        self as usize - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[repr(u8)]
pub enum ControlOp {
    Hello = 0,
    /// Session start; also acknowledges a hello.
    Start = 1,
    Stop = 2,
    Freeze = 3,
    Unfreeze = 4,
    Bye = 5,
}

impl ControlOp {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => ControlOp::Hello,
            1 => ControlOp::Start,
            2 => ControlOp::Stop,
            3 => ControlOp::Freeze,
            4 => ControlOp::Unfreeze,
            5 => ControlOp::Bye,
            _ => return None,
        })
    }
}

/// Ultrasound frame as carried on the wire (gray8 only).
#[derive(Debug, Clone, PartialEq)]
pub struct FramePayload {
    pub width: u16,
    pub height: u16,
    pub pixel_format: u8,
    pub frame_id: u32,
    pub pixel_spacing_um: u32,
    pub frozen: bool,
    pub pixels: Vec<u8>,
}

pub const PIXEL_FORMAT_GRAY8: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    PoseCommand(Pose),
    ForceSample(Vector3<f64>),
    UsFrame(FramePayload),
    Heartbeat,
    SessionControl(ControlOp),
    StatusReport { rx_bytes_per_s: u64, tx_bytes_per_s: u64, rtt_estimate_us: u64 },
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::PoseCommand(_) => MsgType::PoseCommand,
            Message::ForceSample(_) => MsgType::ForceSample,
            Message::UsFrame(_) => MsgType::UsFrame,
            Message::Heartbeat => MsgType::Heartbeat,
            Message::SessionControl(_) => MsgType::SessionControl,
            Message::StatusReport { .. } => MsgType::StatusReport,
        }
    }

    fn payload_len(&self) -> usize {
        match self {
            Message::PoseCommand(_) => 7 * 8,
            Message::ForceSample(_) => 3 * 8,
            Message::UsFrame(f) => 2 + 2 + 1 + 4 + 4 + 1 + f.pixels.len(),
            Message::Heartbeat => 0,
            Message::SessionControl(_) => 1,
            Message::StatusReport { .. } => 3 * 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub msg_type: MsgType,
    pub seq: u32,
    pub timestamp_us: u64,
    pub payload_len: u32,
}

pub fn encode(m: &Message, seq: u32, timestamp_us: u64) -> Result<Vec<u8>, EncodeError> {
    let payload_len = m.payload_len();
    if payload_len > MAX_PAYLOAD {
        return Err(EncodeError::Oversize(payload_len));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + payload_len + CRC_LEN);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.push(m.msg_type() as u8);
    out.extend_from_slice(&seq.to_le_bytes());
    out.extend_from_slice(&timestamp_us.to_le_bytes());
    out.extend_from_slice(&(payload_len as u32).to_le_bytes());
    match m {
        Message::PoseCommand(p) => {
            for v in p.position.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
            let q = p.orientation.quaternion();
            for v in [q.w, q.i, q.j, q.k] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Message::ForceSample(f) => {
            for v in f.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Message::UsFrame(f) => {
            out.extend_from_slice(&f.width.to_le_bytes());
            out.extend_from_slice(&f.height.to_le_bytes());
            out.push(f.pixel_format);
            out.extend_from_slice(&f.frame_id.to_le_bytes());
            out.extend_from_slice(&f.pixel_spacing_um.to_le_bytes());
            out.push(u8::from(f.frozen));
            out.extend_from_slice(&f.pixels);
        }
        Message::Heartbeat => {}
        Message::SessionControl(op) => out.push(*op as u8),
        Message::StatusReport { rx_bytes_per_s, tx_bytes_per_s, rtt_estimate_us } => {
            out.extend_from_slice(&rx_bytes_per_s.to_le_bytes());
            out.extend_from_slice(&tx_bytes_per_s.to_le_bytes());
            out.extend_from_slice(&rtt_estimate_us.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or(DecodeError::Malformed("payload too short for its type"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, DecodeError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn finish(&self) -> Result<(), DecodeError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(DecodeError::Malformed("trailing payload bytes"))
        }
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Header, Message), DecodeError> {
    if bytes.len() < 2 {
        return Err(DecodeError::Truncated { needed: HEADER_LEN + CRC_LEN, have: bytes.len() });
    }
    if bytes[..2] != MAGIC {
        return Err(DecodeError::NotAMessage);
    }
    if bytes.len() < HEADER_LEN {
        return Err(DecodeError::Truncated { needed: HEADER_LEN + CRC_LEN, have: bytes.len() });
    }
    let payload_len = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let total = HEADER_LEN + payload_len + CRC_LEN;
    if bytes.len() < total {
        return Err(DecodeError::Truncated { needed: total, have: bytes.len() });
    }
    let body = &bytes[..HEADER_LEN + payload_len];
    let crc = u32::from_le_bytes(bytes[HEADER_LEN + payload_len..total].try_into().unwrap());
    if crc32fast::hash(body) != crc {
        return Err(DecodeError::Corrupt);
    }
    if bytes.len() > total {
        return Err(DecodeError::Malformed("bytes beyond the declared frame"));
    }
    let (version, raw_type) = (bytes[2], bytes[3]);
    let msg_type = match MsgType::from_u8(raw_type) {
        Some(t) if version == VERSION => t,
        _ => return Err(DecodeError::Unsupported { version, msg_type: raw_type }),
    };
    let header = Header {
        msg_type,
        seq: u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
        timestamp_us: u64::from_le_bytes(bytes[8..16].try_into().unwrap()),
        payload_len: payload_len as u32,
    };

    let mut r = Reader { buf: &bytes[HEADER_LEN..HEADER_LEN + payload_len], pos: 0 };
    let msg = match msg_type {
        MsgType::PoseCommand => {
            let position = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
            let (w, i, j, k) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
            let q = Quaternion::new(w, i, j, k);
            if !position.iter().chain(q.coords.iter()).all(|v| v.is_finite()) {
                return Err(DecodeError::Malformed("non-finite pose"));
            }
            let norm = q.norm();
            if (norm - 1.0).abs() > QUAT_TOLERANCE {
                return Err(DecodeError::Malformed("orientation is not a unit quaternion"));
            }
            // Already unit to working precision: keep the bits.
            let orientation = if (norm - 1.0).abs() <= 4.0 * f64::EPSILON {
                UnitQuaternion::new_unchecked(q)
            } else {
                UnitQuaternion::new_normalize(q)
            };
            Message::PoseCommand(Pose { position, orientation })
        }
        MsgType::ForceSample => {
            let f = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
            if !f.iter().all(|v| v.is_finite()) {
                return Err(DecodeError::Malformed("non-finite force"));
            }
            Message::ForceSample(f)
        }
        MsgType::UsFrame => {
            let width = r.u16()?;
            let height = r.u16()?;
            let pixel_format = r.u8()?;
            let frame_id = r.u32()?;
            let pixel_spacing_um = r.u32()?;
            let frozen = match r.u8()? {
                0 => false,
                1 => true,
                _ => return Err(DecodeError::Malformed("frozen flag must be 0 or 1")),
            };
            if pixel_format != PIXEL_FORMAT_GRAY8 {
                return Err(DecodeError::Malformed("unknown pixel format"));
            }
            if pixel_spacing_um == 0 {
                return Err(DecodeError::Malformed("zero pixel spacing"));
            }
            let n = usize::from(width) * usize::from(height);
            if r.buf.len() - r.pos != n {
                return Err(DecodeError::Malformed("pixel data length does not match width x height"));
            }
            let pixels = r.take(n)?.to_vec();
            Message::UsFrame(FramePayload { width, height, pixel_format, frame_id, pixel_spacing_um, frozen, pixels })
        }
        MsgType::Heartbeat => Message::Heartbeat,
        MsgType::SessionControl => {
            let raw = r.u8()?;
            Message::SessionControl(ControlOp::from_u8(raw).ok_or(DecodeError::Malformed("unknown session op"))?)
        }
        MsgType::StatusReport => Message::StatusReport {
            rx_bytes_per_s: r.u64()?,
            tx_bytes_per_s: r.u64()?,
            rtt_estimate_us: r.u64()?,
        },
    };
    r.finish()?;
    Ok((header, msg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum LinkStatus {
    Idle,
    HelloSent,
    Active,
    Degraded,
    SafeStop,
    Closed,
}

impl LinkStatus {
    pub const ALL: [LinkStatus; 6] = [
        LinkStatus::Idle,
        LinkStatus::HelloSent,
        LinkStatus::Active,
        LinkStatus::Degraded,
        LinkStatus::SafeStop,
        LinkStatus::Closed,
    ];
}

/// Inputs to [`advance_link`]. Times are the owner's monotonic clock in µs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LinkEvent {
    /// We sent (or re-sent) a hello.
    HelloSent,
    /// The peer's hello or hello acknowledgement arrived.
    HelloReceived { now: u64 },
    /// Any other liveness-bearing message arrived from the peer.
    Heartbeat { now: u64 },
    /// Clock advance; evaluates the silence thresholds.
    Tick { now: u64 },
    Bye,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("protocol violation: {event:?} in state {state:?}")]
pub struct ProtocolViolation {
    pub state: LinkStatus,
    pub event: LinkEvent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LinkState {
    pub state: LinkStatus,
    pub last_heartbeat_rx: u64,
    /// Highest accepted seq per message type (indexed by type - 1).
    pub highest_seq_rx: [Option<u32>; 6],
}

impl Default for LinkState {
    fn default() -> Self {
        LinkState { state: LinkStatus::Idle, last_heartbeat_rx: 0, highest_seq_rx: [None; 6] }
    }
}

impl LinkState {
    pub fn is_live(&self) -> bool {
        matches!(self.state, LinkStatus::Active | LinkStatus::Degraded)
    }
}

/// One step of the connection state machine.
///
/// | state      | HelloSent | HelloReceived | Heartbeat | Tick           | Bye    |
/// |------------|-----------|---------------|-----------|----------------|--------|
/// | Idle       | HelloSent | -             | -         | Idle           | Closed |
/// | HelloSent  | HelloSent | Active        | HelloSent | HelloSent      | Closed |
/// | Active     | -         | Active        | Active    | Active/Degr/SS | Closed |
/// | Degraded   | -         | Active        | Active    | Degraded/SS    | Closed |
/// | SafeStop   | HelloSent | SafeStop      | SafeStop  | SafeStop       | Closed |
/// | Closed     | -         | -             | -         | Closed         | Closed |
///
/// `-` is a protocol violation. Heartbeats before the handshake completes
/// carry no liveness; in SafeStop only a locally initiated handshake resumes.
pub fn advance_link(s: &LinkState, event: LinkEvent) -> Result<LinkState, ProtocolViolation> {
    use LinkStatus::*;
    let violation = || ProtocolViolation { state: s.state, event };
    let mut next = s.clone();
    match (s.state, event) {
        (_, LinkEvent::Bye) => next.state = Closed,
        (Idle | HelloSent | SafeStop, LinkEvent::HelloSent) => next.state = HelloSent,
        (HelloSent | Active | Degraded, LinkEvent::HelloReceived { now }) => {
            next.state = Active;
            next.last_heartbeat_rx = now;
        }
        (Active | Degraded, LinkEvent::Heartbeat { now }) => {
            next.state = Active;
            next.last_heartbeat_rx = now;
        }
        (HelloSent, LinkEvent::Heartbeat { .. }) => {}
        (SafeStop, LinkEvent::HelloReceived { .. } | LinkEvent::Heartbeat { .. }) => {}
        (Active | Degraded, LinkEvent::Tick { now }) => {
            let gap = now.saturating_sub(s.last_heartbeat_rx);
            if gap > SAFE_STOP_AFTER_US {
                next.state = SafeStop;
            } else if gap > DEGRADED_AFTER_US {
                next.state = Degraded;
            }
        }
        (Idle | HelloSent | SafeStop | Closed, LinkEvent::Tick { .. }) => {}
        _ => return Err(violation()),
    }
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Accept,
    Drop,
}

/// Latest-wins freshness filter for streamed message types.
pub fn filter_stale(s: &mut LinkState, header: &Header) -> Verdict {
    match header.msg_type {
        MsgType::Heartbeat | MsgType::SessionControl => Verdict::Accept,
        t => {
            let slot = &mut s.highest_seq_rx[t.slot()];
            match *slot {
                Some(high) if header.seq <= high => Verdict::Drop,
                _ => {
                    *slot = Some(header.seq);
                    Verdict::Accept
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heartbeat_layout() {
        let b = encode(&Message::Heartbeat, 0, 0).unwrap();
        assert_eq!(b.len(), 24);
        assert_eq!(&b[..8], &[0x54, 0x52, 0x01, 0x04, 0x00, 0x00, 0x00, 0x00]);
        // Independent byte builder.
        let mut expect = vec![0x54, 0x52, 1, 4];
        expect.extend([0u8; 4 + 8 + 4]);
        let crc = crc32_bitwise(&expect);
        expect.extend(crc.to_le_bytes());
        assert_eq!(b, expect);
        assert_eq!(decode(&b).unwrap().1, Message::Heartbeat);
    }

    /// Reflected CRC-32 (poly 0xEDB88320), one bit at a time.
    fn crc32_bitwise(data: &[u8]) -> u32 {
        let mut crc = 0xFFFF_FFFFu32;
        for &b in data {
            crc ^= u32::from(b);
            for _ in 0..8 {
                crc = if crc & 1 != 0 { (crc >> 1) ^ 0xEDB8_8320 } else { crc >> 1 };
            }
        }
        !crc
    }

    #[test]
    fn pose_roundtrip() {
        let pose = Pose {
            position: Vector3::new(0.01, -0.02, 0.003),
            orientation: UnitQuaternion::from_euler_angles(0.1, -0.3, 1.2),
        };
        let b = encode(&Message::PoseCommand(pose), 42, 123_456).unwrap();
        let (h, m) = decode(&b).unwrap();
        assert_eq!(h.seq, 42);
        assert_eq!(h.timestamp_us, 123_456);
        assert_eq!(m, Message::PoseCommand(pose));
    }

    #[test]
    fn quaternion_renormalized_or_rejected() {
        let mut raw = encode(&Message::PoseCommand(Pose::default()), 0, 0).unwrap();
        let w_off = HEADER_LEN + 24;
        let fix_crc = |raw: &mut Vec<u8>| {
            let n = raw.len() - CRC_LEN;
            let crc = crc32fast::hash(&raw[..n]);
            raw[n..].copy_from_slice(&crc.to_le_bytes());
        };
        raw[w_off..w_off + 8].copy_from_slice(&(1.0 + 5e-7f64).to_le_bytes());
        fix_crc(&mut raw);
        let (_, m) = decode(&raw).unwrap();
        let Message::PoseCommand(p) = m else { panic!() };
        assert!((p.orientation.norm() - 1.0).abs() < 1e-12);

        raw[w_off..w_off + 8].copy_from_slice(&1.1f64.to_le_bytes());
        fix_crc(&mut raw);
        assert!(matches!(decode(&raw), Err(DecodeError::Malformed(_))));
    }

    #[test]
    fn frame_length_mismatch() {
        // 300x300 16-bit samples declared as gray8.
        let f = FramePayload {
            width: 300,
            height: 300,
            pixel_format: PIXEL_FORMAT_GRAY8,
            frame_id: 1,
            pixel_spacing_um: 500,
            frozen: false,
            pixels: vec![7; 300 * 300 * 2],
        };
        let b = encode(&Message::UsFrame(f), 1, 1).unwrap();
        assert!(matches!(decode(&b), Err(DecodeError::Malformed(_))));
    }

    #[test]
    fn oversize_rejected() {
        let f = FramePayload {
            width: 0,
            height: 0,
            pixel_format: 0,
            frame_id: 0,
            pixel_spacing_um: 500,
            frozen: false,
            pixels: vec![0; MAX_PAYLOAD],
        };
        assert!(matches!(encode(&Message::UsFrame(f), 0, 0), Err(EncodeError::Oversize(_))));
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(decode(&[]), Err(DecodeError::Truncated { .. })));
        let mut b = encode(&Message::ForceSample(Vector3::new(1.0, 2.0, 3.0)), 3, 9).unwrap();
        b[HEADER_LEN + 5] ^= 0x10;
        assert_eq!(decode(&b), Err(DecodeError::Corrupt));
        let b = encode(&Message::Heartbeat, 0, 0).unwrap();
        assert!(matches!(decode(&b[..23]), Err(DecodeError::Truncated { .. })));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert_eq!(decode(&bad), Err(DecodeError::NotAMessage));
        let mut v2 = b.clone();
        v2[2] = 2;
        let crc = crc32fast::hash(&v2[..20]);
        v2[20..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(decode(&v2), Err(DecodeError::Unsupported { version: 2, .. })));
    }

    fn at(now_ms: u64) -> u64 {
        now_ms * 1000
    }

    fn active() -> LinkState {
        let s = advance_link(&LinkState::default(), LinkEvent::HelloSent).unwrap();
        advance_link(&s, LinkEvent::HelloReceived { now: 0 }).unwrap()
    }

    #[test]
    fn handshake_and_heartbeat() {
        let s = active();
        assert_eq!(s.state, LinkStatus::Active);
        let s = advance_link(&s, LinkEvent::Heartbeat { now: at(90) }).unwrap();
        assert_eq!(s.state, LinkStatus::Active);
        assert_eq!(s.last_heartbeat_rx, at(90));
    }

    #[test]
    fn silence_degrades_then_stops() {
        let s = active();
        let s = advance_link(&s, LinkEvent::Tick { now: at(300) }).unwrap();
        assert_eq!(s.state, LinkStatus::Degraded);
        let s = advance_link(&s, LinkEvent::Tick { now: at(1200) }).unwrap();
        assert_eq!(s.state, LinkStatus::SafeStop);
        // Heartbeats no longer resurrect the link.
        let s = advance_link(&s, LinkEvent::Heartbeat { now: at(1210) }).unwrap();
        assert_eq!(s.state, LinkStatus::SafeStop);
        let s = advance_link(&s, LinkEvent::HelloSent).unwrap();
        let s = advance_link(&s, LinkEvent::HelloReceived { now: at(1300) }).unwrap();
        assert_eq!(s.state, LinkStatus::Active);
    }

    #[test]
    fn degraded_recovers_on_heartbeat() {
        let s = advance_link(&active(), LinkEvent::Tick { now: at(260) }).unwrap();
        let s = advance_link(&s, LinkEvent::Heartbeat { now: at(270) }).unwrap();
        assert_eq!(s.state, LinkStatus::Active);
    }

    #[test]
    fn thresholds_are_strict() {
        let s = advance_link(&active(), LinkEvent::Tick { now: at(250) }).unwrap();
        assert_eq!(s.state, LinkStatus::Active);
        let s = advance_link(&s, LinkEvent::Tick { now: at(1000) }).unwrap();
        assert_eq!(s.state, LinkStatus::Degraded);
    }

    #[test]
    fn violations() {
        let idle = LinkState::default();
        assert!(advance_link(&idle, LinkEvent::Heartbeat { now: 0 }).is_err());
        assert!(advance_link(&idle, LinkEvent::HelloReceived { now: 0 }).is_err());
        assert!(advance_link(&active(), LinkEvent::HelloSent).is_err());
        let closed = advance_link(&active(), LinkEvent::Bye).unwrap();
        assert_eq!(closed.state, LinkStatus::Closed);
        assert!(advance_link(&closed, LinkEvent::HelloSent).is_err());
    }

    fn hdr(t: MsgType, seq: u32) -> Header {
        Header { msg_type: t, seq, timestamp_us: 0, payload_len: 0 }
    }

    #[test]
    fn stale_filter() {
        let mut s = LinkState::default();
        assert_eq!(filter_stale(&mut s, &hdr(MsgType::PoseCommand, 7)), Verdict::Accept);
        assert_eq!(filter_stale(&mut s, &hdr(MsgType::PoseCommand, 5)), Verdict::Drop);
        assert_eq!(filter_stale(&mut s, &hdr(MsgType::PoseCommand, 8)), Verdict::Accept);
        assert_eq!(filter_stale(&mut s, &hdr(MsgType::ForceSample, 1)), Verdict::Accept);
        assert_eq!(filter_stale(&mut s, &hdr(MsgType::Heartbeat, 0)), Verdict::Accept);
        assert_eq!(filter_stale(&mut s, &hdr(MsgType::Heartbeat, 0)), Verdict::Accept);
    }
}
