//! Binary wire format, its JSON mirror, and the session handshake.
//!
//! Frame layout (little-endian):
//!
//! | bytes | field |
//! |-------|-------|
//! | 2 | magic `0x7E1E` |
//! | 1 | message type |
//! | 2 | payload length (≤ 4096) |
//! | n | payload |
//! | 4 | CRC32 (IEEE) of the payload |

use crate::device::Phase;
use crate::geometry::Pose;
use crate::task::TaskStep;
use serde::{Deserialize, Serialize};
use std::fmt;

pub const MAGIC: u16 = 0x7E1E;
pub const PROTOCOL_VERSION: u16 = 1;
pub const MAX_PAYLOAD: usize = 4096;
pub const HEADER_LEN: usize = 5;
pub const TRAILER_LEN: usize = 4;
pub const MAX_FRAME: usize = HEADER_LEN + MAX_PAYLOAD + TRAILER_LEN;
/// Seconds a dropped session stays resumable.
pub const DEFAULT_SESSION_TIMEOUT_US: u64 = 120_000_000;
pub const MAX_OPERATOR_ID: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    #[error("truncated frame: need {needed} bytes, have {got}")]
    Truncated { needed: usize, got: usize },
    #[error("bad magic {0:#06x}")]
    BadMagic(u16),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("declared payload length {0} exceeds the cap")]
    TooLong(usize),
    #[error("length mismatch: declared {declared}, actual {actual}")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("crc mismatch: frame says {expected:#010x}, payload hashes to {actual:#010x}")]
    BadCrc { expected: u32, actual: u32 },
    #[error("invalid field `{0}`")]
    InvalidField(&'static str),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgType {
    Waypoint = 1,
    MotionCmd = 2,
    Feedback = 3,
    Hello = 4,
    Resume = 5,
    SessionReply = 6,
    Bye = 7,
    State = 8,
}

impl MsgType {
    pub const ALL: [MsgType; 8] = [
        MsgType::Waypoint,
        MsgType::MotionCmd,
        MsgType::Feedback,
        MsgType::Hello,
        MsgType::Resume,
        MsgType::SessionReply,
        MsgType::Bye,
        MsgType::State,
    ];

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|t| *t as u8 == c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gripper {
    Open,
    Close,
    Hold,
}

impl Gripper {
    fn code(self) -> u8 {
        self as u8
    }

    fn from_code(c: u8) -> Option<Self> {
        [Gripper::Open, Gripper::Close, Gripper::Hold]
            .get(c as usize)
            .copied()
    }
}

/// Button bitfield carried with each waypoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Buttons(pub u8);

impl Buttons {
    pub const DEVICE_START: u8 = 1 << 0;
    pub const DEVICE_RESET: u8 = 1 << 1;
    pub const ESTOP: u8 = 1 << 2;
    const MASK: u8 = 0b111;

    pub fn start(self) -> bool {
        self.0 & Self::DEVICE_START != 0
    }

    pub fn reset(self) -> bool {
        self.0 & Self::DEVICE_RESET != 0
    }

    pub fn estop(self) -> bool {
        self.0 & Self::ESTOP != 0
    }
}

/// Session token, shown as 32 lowercase hex digits in JSON.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Token(pub [u8; 16]);

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.0 {
            write!(f, "{b:02x}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for Token {
    type Err = DecodeError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.len() != 32 || !s.is_ascii() {
            return Err(DecodeError::InvalidField("token"));
        }
        let mut out = [0u8; 16];
        for (i, b) in out.iter_mut().enumerate() {
            *b = u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|_| DecodeError::InvalidField("token"))?;
        }
        Ok(Token(out))
    }
}

impl Serialize for Token {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Token {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

mod pose_json {
    use super::Pose;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Raw {
        position: [f64; 3],
        orientation: [f64; 4],
    }

    pub fn serialize<S: Serializer>(p: &Pose, s: S) -> Result<S::Ok, S::Error> {
        Raw {
            position: p.xyz(),
            orientation: p.wxyz(),
        }
        .serialize(s)
    }

    /// Exact components are kept when already canonical; otherwise a
    /// near-unit quaternion (within 1e-6) is normalized.
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Pose, D::Error> {
        let raw = Raw::deserialize(d)?;
        if let Ok(p) = Pose::try_from_raw(raw.position, raw.orientation) {
            return Ok(p);
        }
        let [w, x, y, z] = raw.orientation;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        let finite = raw.position.iter().chain(&raw.orientation).all(|v| v.is_finite());
        if !finite || (n - 1.0).abs() > 1e-6 {
            return Err(serde::de::Error::custom("pose must be finite with a unit quaternion"));
        }
        Ok(Pose::new(
            nalgebra::Vector3::from(raw.position),
            nalgebra::Quaternion::new(w, x, y, z),
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaypointMsg {
    pub seq: u32,
    /// µs since session epoch
    pub send_time: u64,
    #[serde(with = "pose_json")]
    pub pose: Pose,
    pub clutch: bool,
    pub gripper: Gripper,
    pub buttons: Buttons,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionCmd {
    pub seq: u32,
    pub send_time: u64,
    pub q_target: [f64; 6],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackMsg {
    pub seq_echo: u32,
    pub q_actual: [f64; 6],
    pub arm_time: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionHello {
    pub protocol_version: u16,
    #[serde(default)]
    pub operator_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionResume {
    pub protocol_version: u16,
    pub token: Token,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "decision")]
pub enum SessionReply {
    Accept { token: Token, protocol_version: u16 },
    Busy,
    Expired,
    InvalidToken,
    IncompatibleVersion { protocol_version: u16 },
}

/// Telemetry snapshot pushed to the operator after each processed waypoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateMsg {
    pub server_time: u64,
    pub ack_seq: u32,
    pub q: [f64; 6],
    #[serde(with = "pose_json")]
    pub tcp: Pose,
    pub clutch_engaged: bool,
    pub clamped: bool,
    pub lock_orientation: bool,
    pub degraded: bool,
    pub estop: bool,
    /// Command stream has stopped moving and the arm has caught up.
    pub settled: bool,
    pub task_step: TaskStep,
    pub tester_phase: Phase,
    pub last_yield: Option<f64>,
    pub cycles: u32,
    pub degraded_events: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Waypoint(WaypointMsg),
    MotionCmd(MotionCmd),
    Feedback(FeedbackMsg),
    Hello(SessionHello),
    Resume(SessionResume),
    SessionReply(SessionReply),
    Bye,
    State(StateMsg),
}

impl Message {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Message::Waypoint(_) => MsgType::Waypoint,
            Message::MotionCmd(_) => MsgType::MotionCmd,
            Message::Feedback(_) => MsgType::Feedback,
            Message::Hello(_) => MsgType::Hello,
            Message::Resume(_) => MsgType::Resume,
            Message::SessionReply(_) => MsgType::SessionReply,
            Message::Bye => MsgType::Bye,
            Message::State(_) => MsgType::State,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("messages always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|x| self.f64(*x));
    }
    fn pose(&mut self, p: &Pose) {
        self.f64s(&p.xyz());
        self.f64s(&p.wxyz());
    }
}

/// Cursor over a payload whose total length was already checked.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        out.copy_from_slice(&self.buf[self.pos..self.pos + N]);
        self.pos += N;
        out
    }
    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
    fn f64x6(&mut self, field: &'static str) -> Result<[f64; 6], DecodeError> {
        let mut out = [0.0; 6];
        for v in &mut out {
            *v = self.f64();
            if !v.is_finite() {
                return Err(DecodeError::InvalidField(field));
            }
        }
        Ok(out)
    }
    fn pose(&mut self, field: &'static str) -> Result<Pose, DecodeError> {
        let p = [self.f64(), self.f64(), self.f64()];
        let q = [self.f64(), self.f64(), self.f64(), self.f64()];
        Pose::try_from_raw(p, q).map_err(|_| DecodeError::InvalidField(field))
    }
    fn bool(&mut self, field: &'static str) -> Result<bool, DecodeError> {
        match self.u8() {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(DecodeError::InvalidField(field)),
        }
    }
}

const WAYPOINT_LEN: usize = 4 + 8 + 56 + 3;
const MOTION_LEN: usize = 4 + 8 + 48;
const FEEDBACK_LEN: usize = 4 + 48 + 8;
const RESUME_LEN: usize = 2 + 16;
const REPLY_LEN: usize = 1 + 16 + 2;
const STATE_LEN: usize = 8 + 4 + 48 + 56 + 1 + 1 + 1 + 8 + 4 + 4;

const FLAG_CLUTCH: u8 = 1 << 0;
const FLAG_CLAMPED: u8 = 1 << 1;
const FLAG_LOCK: u8 = 1 << 2;
const FLAG_DEGRADED: u8 = 1 << 3;
const FLAG_ESTOP: u8 = 1 << 4;
const FLAG_YIELD: u8 = 1 << 5;
const FLAG_SETTLED: u8 = 1 << 6;

fn encode_payload(msg: &Message, w: &mut Writer) {
    match msg {
        Message::Waypoint(m) => {
            w.u32(m.seq);
            w.u64(m.send_time);
            w.pose(&m.pose);
            w.u8(m.clutch as u8);
            w.u8(m.gripper.code());
            w.u8(m.buttons.0);
        }
        Message::MotionCmd(m) => {
            w.u32(m.seq);
            w.u64(m.send_time);
            w.f64s(&m.q_target);
        }
        Message::Feedback(m) => {
            w.u32(m.seq_echo);
            w.f64s(&m.q_actual);
            w.u64(m.arm_time);
        }
        Message::Hello(m) => {
            w.u16(m.protocol_version);
            let id = truncate_utf8(&m.operator_id, MAX_OPERATOR_ID);
            w.u8(id.len() as u8);
            w.0.extend_from_slice(id.as_bytes());
        }
        Message::Resume(m) => {
            w.u16(m.protocol_version);
            w.0.extend_from_slice(&m.token.0);
        }
        Message::SessionReply(r) => {
            let (kind, token, version) = match r {
                SessionReply::Accept {
                    token,
                    protocol_version,
                } => (0, *token, *protocol_version),
                SessionReply::Busy => (1, Token::default(), 0),
                SessionReply::Expired => (2, Token::default(), 0),
                SessionReply::InvalidToken => (3, Token::default(), 0),
                SessionReply::IncompatibleVersion { protocol_version } => {
                    (4, Token::default(), *protocol_version)
                }
            };
            w.u8(kind);
            w.0.extend_from_slice(&token.0);
            w.u16(version);
        }
        Message::Bye => {}
        Message::State(s) => {
            w.u64(s.server_time);
            w.u32(s.ack_seq);
            w.f64s(&s.q);
            w.pose(&s.tcp);
            let mut flags = 0;
            for (on, bit) in [
                (s.clutch_engaged, FLAG_CLUTCH),
                (s.clamped, FLAG_CLAMPED),
                (s.lock_orientation, FLAG_LOCK),
                (s.degraded, FLAG_DEGRADED),
                (s.estop, FLAG_ESTOP),
                (s.last_yield.is_some(), FLAG_YIELD),
                (s.settled, FLAG_SETTLED),
            ] {
                if on {
                    flags |= bit;
                }
            }
            w.u8(flags);
            w.u8(s.task_step.code());
            w.u8(s.tester_phase.code());
            w.f64(s.last_yield.unwrap_or(0.0));
            w.u32(s.cycles);
            w.u32(s.degraded_events);
        }
    }
}

fn truncate_utf8(s: &str, max: usize) -> &str {
    if s.len() <= max {
        return s;
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    &s[..end]
}

/// Encodes one framed message. Operator ids longer than 64 bytes are
/// truncated at a character boundary.
pub fn encode(msg: &Message) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(HEADER_LEN + STATE_LEN + TRAILER_LEN));
    w.u16(MAGIC);
    w.u8(msg.msg_type() as u8);
    w.u16(0);
    encode_payload(msg, &mut w);
    let len = w.0.len() - HEADER_LEN;
    debug_assert!(len <= MAX_PAYLOAD);
    w.0[3..5].copy_from_slice(&(len as u16).to_le_bytes());
    let crc = crc32fast::hash(&w.0[HEADER_LEN..]);
    w.u32(crc);
    w.0
}

/// Checks a frame header and returns the total frame length it declares.
/// Needs at least [`HEADER_LEN`] bytes.
pub fn frame_len(header: &[u8]) -> Result<usize, DecodeError> {
    if header.len() < HEADER_LEN {
        return Err(DecodeError::Truncated {
            needed: HEADER_LEN,
            got: header.len(),
        });
    }
    let magic = u16::from_le_bytes([header[0], header[1]]);
    if magic != MAGIC {
        return Err(DecodeError::BadMagic(magic));
    }
    if MsgType::from_code(header[2]).is_none() {
        return Err(DecodeError::UnknownType(header[2]));
    }
    let len = u16::from_le_bytes([header[3], header[4]]) as usize;
    if len > MAX_PAYLOAD {
        return Err(DecodeError::TooLong(len));
    }
    Ok(HEADER_LEN + len + TRAILER_LEN)
}

/// Decodes exactly one frame; trailing bytes are a length mismatch.
pub fn decode(bytes: &[u8]) -> Result<Message, DecodeError> {
    let total = frame_len(bytes)?;
    if bytes.len() < total {
        return Err(DecodeError::Truncated {
            needed: total,
            got: bytes.len(),
        });
    }
    if bytes.len() > total {
        return Err(DecodeError::LengthMismatch {
            declared: total - HEADER_LEN - TRAILER_LEN,
            actual: bytes.len() - HEADER_LEN - TRAILER_LEN,
        });
    }
    let payload = &bytes[HEADER_LEN..total - TRAILER_LEN];
    let expected = u32::from_le_bytes(bytes[total - TRAILER_LEN..].try_into().unwrap());
    let actual = crc32fast::hash(payload);
    if expected != actual {
        return Err(DecodeError::BadCrc { expected, actual });
    }
    let ty = MsgType::from_code(bytes[2]).expect("checked by frame_len");
    decode_payload(ty, payload)
}

fn need(payload: &[u8], len: usize) -> Result<(), DecodeError> {
    if payload.len() == len {
        Ok(())
    } else {
        Err(DecodeError::LengthMismatch {
            declared: payload.len(),
            actual: len,
        })
    }
}

fn decode_payload(ty: MsgType, payload: &[u8]) -> Result<Message, DecodeError> {
    let mut r = Reader {
        buf: payload,
        pos: 0,
    };
    Ok(match ty {
        MsgType::Waypoint => {
            need(payload, WAYPOINT_LEN)?;
            let seq = r.u32();
            let send_time = r.u64();
            let pose = r.pose("pose")?;
            let clutch = r.bool("clutch")?;
            let gripper = Gripper::from_code(r.u8()).ok_or(DecodeError::InvalidField("gripper"))?;
            let buttons = r.u8();
            if buttons & !Buttons::MASK != 0 {
                return Err(DecodeError::InvalidField("buttons"));
            }
            Message::Waypoint(WaypointMsg {
                seq,
                send_time,
                pose,
                clutch,
                gripper,
                buttons: Buttons(buttons),
            })
        }
        MsgType::MotionCmd => {
            need(payload, MOTION_LEN)?;
            Message::MotionCmd(MotionCmd {
                seq: r.u32(),
                send_time: r.u64(),
                q_target: r.f64x6("q_target")?,
            })
        }
        MsgType::Feedback => {
            need(payload, FEEDBACK_LEN)?;
            Message::Feedback(FeedbackMsg {
                seq_echo: r.u32(),
                q_actual: r.f64x6("q_actual")?,
                arm_time: r.u64(),
            })
        }
        MsgType::Hello => {
            if payload.len() < 3 {
                return Err(DecodeError::LengthMismatch {
                    declared: payload.len(),
                    actual: 3,
                });
            }
            let protocol_version = r.u16();
            let n = r.u8() as usize;
            need(payload, 3 + n)?;
            if n > MAX_OPERATOR_ID {
                return Err(DecodeError::InvalidField("operator_id"));
            }
            let operator_id = std::str::from_utf8(&payload[3..])
                .map_err(|_| DecodeError::InvalidField("operator_id"))?
                .to_string();
            Message::Hello(SessionHello {
                protocol_version,
                operator_id,
            })
        }
        MsgType::Resume => {
            need(payload, RESUME_LEN)?;
            Message::Resume(SessionResume {
                protocol_version: r.u16(),
                token: Token(r.take()),
            })
        }
        MsgType::SessionReply => {
            need(payload, REPLY_LEN)?;
            let kind = r.u8();
            let token = Token(r.take());
            let version = r.u16();
            let blank = token == Token::default() && version == 0;
            Message::SessionReply(match kind {
                0 => SessionReply::Accept {
                    token,
                    protocol_version: version,
                },
                1 if blank => SessionReply::Busy,
                2 if blank => SessionReply::Expired,
                3 if blank => SessionReply::InvalidToken,
                4 if token == Token::default() => SessionReply::IncompatibleVersion {
                    protocol_version: version,
                },
                _ => return Err(DecodeError::InvalidField("session_reply")),
            })
        }
        MsgType::Bye => {
            need(payload, 0)?;
            Message::Bye
        }
        MsgType::State => {
            need(payload, STATE_LEN)?;
            let server_time = r.u64();
            let ack_seq = r.u32();
            let q = r.f64x6("q")?;
            let tcp = r.pose("tcp")?;
            let flags = r.u8();
            if flags >> 7 != 0 {
                return Err(DecodeError::InvalidField("flags"));
            }
            let task_step = TaskStep::from_code(r.u8()).ok_or(DecodeError::InvalidField("task_step"))?;
            let tester_phase =
                Phase::from_code(r.u8()).ok_or(DecodeError::InvalidField("tester_phase"))?;
            let y = r.f64();
            let last_yield = if flags & FLAG_YIELD != 0 {
                if !y.is_finite() {
                    return Err(DecodeError::InvalidField("last_yield"));
                }
                Some(y)
            } else if y.to_bits() == 0 {
                None
            } else {
                return Err(DecodeError::InvalidField("last_yield"));
            };
            Message::State(StateMsg {
                server_time,
                ack_seq,
                q,
                tcp,
                clutch_engaged: flags & FLAG_CLUTCH != 0,
                clamped: flags & FLAG_CLAMPED != 0,
                lock_orientation: flags & FLAG_LOCK != 0,
                degraded: flags & FLAG_DEGRADED != 0,
                estop: flags & FLAG_ESTOP != 0,
                settled: flags & FLAG_SETTLED != 0,
                task_step,
                tester_phase,
                last_yield,
                cycles: r.u32(),
                degraded_events: r.u32(),
            })
        }
    })
}

/// Incremental frame splitter for the reliable stream.
#[derive(Default, Debug)]
pub struct FrameBuffer {
    buf: Vec<u8>,
}

impl FrameBuffer {
    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Next complete message, `None` if more bytes are needed. A framing
    /// error poisons the stream; the caller should drop the connection.
    pub fn next_message(&mut self) -> Result<Option<Message>, DecodeError> {
        if self.buf.len() < HEADER_LEN {
            return Ok(None);
        }
        let total = frame_len(&self.buf)?;
        if self.buf.len() < total {
            return Ok(None);
        }
        let msg = decode(&self.buf[..total]);
        self.buf.drain(..total);
        msg.map(Some)
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

/// Drops stale and duplicate sequence numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SeqGate {
    last: Option<u32>,
    dropped: u64,
}

impl SeqGate {
    pub fn accept(&mut self, seq: u32) -> bool {
        if self.last.is_some_and(|l| seq <= l) {
            self.dropped += 1;
            return false;
        }
        self.last = Some(seq);
        true
    }

    pub fn last(&self) -> Option<u32> {
        self.last
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum HandshakeRequest {
    Hello(SessionHello),
    Resume(SessionResume),
}

/// What the server should do with the connection after a handshake.
#[derive(Clone, Debug, PartialEq)]
pub enum SessionDecision {
    /// A new session was created.
    Created(SessionReply),
    /// An existing session was reattached; its clutch must be released.
    Reattached(SessionReply),
    Rejected(SessionReply),
}

impl SessionDecision {
    pub fn reply(&self) -> &SessionReply {
        match self {
            SessionDecision::Created(r)
            | SessionDecision::Reattached(r)
            | SessionDecision::Rejected(r) => r,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActiveSession {
    pub token: Token,
    pub operator_id: String,
    pub last_seen: u64,
    pub attached: bool,
}

/// Single-operator session authority.
#[derive(Clone, Debug)]
pub struct SessionTable {
    active: Option<ActiveSession>,
    /// Token of the last session dropped for inactivity, so a late resume
    /// gets `Expired` rather than `InvalidToken`.
    last_expired: Option<Token>,
    timeout_us: u64,
    version: u16,
}

impl Default for SessionTable {
    fn default() -> Self {
        Self::new(DEFAULT_SESSION_TIMEOUT_US)
    }
}

impl SessionTable {
    pub fn new(timeout_us: u64) -> Self {
        Self {
            active: None,
            last_expired: None,
            timeout_us,
            version: PROTOCOL_VERSION,
        }
    }

    pub fn active(&self) -> Option<&ActiveSession> {
        self.active.as_ref()
    }

    /// Drops the active session if it has been silent past the timeout.
    pub fn expire(&mut self, now: u64) {
        if let Some(s) = &self.active {
            if now.saturating_sub(s.last_seen) > self.timeout_us {
                self.last_expired = Some(s.token);
                self.active = None;
            }
        }
    }

    /// Records traffic on the active session.
    pub fn touch(&mut self, token: &Token, now: u64) {
        if let Some(s) = self.active.as_mut().filter(|s| s.token == *token) {
            s.last_seen = s.last_seen.max(now);
        }
    }

    /// Marks the session's connection as lost; it stays resumable.
    pub fn detach(&mut self, token: &Token, now: u64) {
        if let Some(s) = self.active.as_mut().filter(|s| s.token == *token) {
            s.attached = false;
            s.last_seen = s.last_seen.max(now);
        }
    }

    /// Ends the session for good (operator said goodbye).
    pub fn end(&mut self, token: &Token) {
        if self.active.as_ref().is_some_and(|s| s.token == *token) {
            self.active = None;
        }
    }

    /// Decides a Hello or Resume at time `now` (µs). `fresh_token` is
    /// called only when a new session is created.
    pub fn handshake(
        &mut self,
        req: &HandshakeRequest,
        now: u64,
        fresh_token: impl FnOnce() -> Token,
    ) -> SessionDecision {
        let version = match req {
            HandshakeRequest::Hello(h) => h.protocol_version,
            HandshakeRequest::Resume(r) => r.protocol_version,
        };
        if version != self.version {
            return SessionDecision::Rejected(SessionReply::IncompatibleVersion {
                protocol_version: self.version,
            });
        }
        self.expire(now);
        match req {
            HandshakeRequest::Hello(h) => {
                if self.active.is_some() {
                    return SessionDecision::Rejected(SessionReply::Busy);
                }
                let token = fresh_token();
                self.active = Some(ActiveSession {
                    token,
                    operator_id: truncate_utf8(&h.operator_id, MAX_OPERATOR_ID).to_string(),
                    last_seen: now,
                    attached: true,
                });
                SessionDecision::Created(SessionReply::Accept {
                    token,
                    protocol_version: self.version,
                })
            }
            HandshakeRequest::Resume(r) => match &mut self.active {
                Some(s) if s.token == r.token => {
                    s.last_seen = now;
                    s.attached = true;
                    SessionDecision::Reattached(SessionReply::Accept {
                        token: s.token,
                        protocol_version: self.version,
                    })
                }
                _ if self.last_expired == Some(r.token) => {
                    SessionDecision::Rejected(SessionReply::Expired)
                }
                _ => SessionDecision::Rejected(SessionReply::InvalidToken),
            },
        }
    }
}
