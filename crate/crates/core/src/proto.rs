//! Client/server acquisition protocol between the operator and the
//! per-sensor devices.
//!
//! Every message is a 10-byte header followed by the payload:
//!
//! ```text
//! "HSCN" | version (1) | kind (1) | payload length (u32, big-endian) | payload
//! ```
//!
//! Control payloads are JSON. `FETCH` carries a big-endian frame id and
//! `FRAME` carries `frame id | depth length | depth PGM | color PPM` with
//! both integers big-endian. `ERROR` is a code byte followed by UTF-8 text.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::geometry::CameraIntrinsics;
use crate::io::{encode_depth_pgm, encode_ppm};
use crate::sim::{InterferenceModel, Scene, SensorModel};
use crate::sync::{build_schedule, capture_device, CaptureSchedule};

pub const MAGIC: [u8; 4] = *b"HSCN";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
/// Largest payload accepted from the wire (a full-size frame is ~2 MB).
pub const MAX_PAYLOAD_LEN: usize = 64 << 20;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("need {HEADER_LEN} header bytes, got {0}")]
    ShortHeader(usize),
    #[error("bad magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unsupported protocol version {0}")]
    BadVersion(u8),
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("payload truncated: header says {expected} bytes, {available} present")]
    Truncated { expected: usize, available: usize },
    #[error("{0} bytes follow the declared payload")]
    TrailingBytes(usize),
    #[error("payload of {0} bytes exceeds the protocol limit")]
    PayloadTooLarge(usize),
    #[error("malformed {kind:?} payload: {reason}")]
    MalformedPayload { kind: Kind, reason: String },
    #[error("device replied with error {code}: {reason}")]
    Remote { code: u8, reason: String },
    #[error("expected {expected:?}, device sent {got:?}")]
    UnexpectedReply { expected: Kind, got: Kind },
    #[error("frame from device {device} failed its checksum")]
    Integrity { device: u32 },
    #[error("session {0} is incomplete")]
    IncompleteSession(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Kind {
    Hello = 1,
    HelloAck = 2,
    Configure = 3,
    ConfigureAck = 4,
    Trigger = 5,
    TriggerAck = 6,
    Fetch = 7,
    Frame = 8,
    Status = 9,
    StatusAck = 10,
    Error = 15,
}

impl Kind {
    pub const ALL: [Kind; 11] = [
        Kind::Hello,
        Kind::HelloAck,
        Kind::Configure,
        Kind::ConfigureAck,
        Kind::Trigger,
        Kind::TriggerAck,
        Kind::Fetch,
        Kind::Frame,
        Kind::Status,
        Kind::StatusAck,
        Kind::Error,
    ];
}

impl TryFrom<u8> for Kind {
    type Error = ProtocolError;

    fn try_from(b: u8) -> Result<Self, ProtocolError> {
        Kind::ALL.into_iter().find(|k| *k as u8 == b).ok_or(ProtocolError::UnknownKind(b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub kind: Kind,
    pub payload: Vec<u8>,
}

impl Message {
    pub fn new(kind: Kind, payload: Vec<u8>) -> Self {
        Message { kind, payload }
    }

    pub fn empty(kind: Kind) -> Self {
        Message { kind, payload: Vec::new() }
    }
}

fn header(kind: Kind, len: usize) -> [u8; HEADER_LEN] {
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(&MAGIC);
    h[4] = VERSION;
    h[5] = kind as u8;
    h[6..].copy_from_slice(&(len as u32).to_be_bytes());
    h
}

pub fn encode_message(m: &Message) -> Vec<u8> {
    assert!(m.payload.len() <= u32::MAX as usize, "payload does not fit the length field");
    let mut out = Vec::with_capacity(HEADER_LEN + m.payload.len());
    out.extend_from_slice(&header(m.kind, m.payload.len()));
    out.extend_from_slice(&m.payload);
    out
}

/// Validated header: kind and payload length.
fn parse_header(h: &[u8]) -> Result<(Kind, usize), ProtocolError> {
    if h.len() < HEADER_LEN {
        return Err(ProtocolError::ShortHeader(h.len()));
    }
    let magic: [u8; 4] = h[..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    if h[4] != VERSION {
        return Err(ProtocolError::BadVersion(h[4]));
    }
    let kind = Kind::try_from(h[5])?;
    let len = u32::from_be_bytes(h[6..10].try_into().expect("4 bytes")) as usize;
    Ok((kind, len))
}

pub fn decode_message(b: &[u8]) -> Result<Message, ProtocolError> {
    let (kind, len) = parse_header(b)?;
    let available = b.len() - HEADER_LEN;
    if available < len {
        return Err(ProtocolError::Truncated { expected: len, available });
    }
    if available > len {
        return Err(ProtocolError::TrailingBytes(available - len));
    }
    Ok(Message { kind, payload: b[HEADER_LEN..].to_vec() })
}

pub fn write_message(w: &mut impl Write, m: &Message) -> Result<(), ProtocolError> {
    w.write_all(&header(m.kind, m.payload.len()))?;
    w.write_all(&m.payload)?;
    w.flush()?;
    Ok(())
}

/// Reads one message. `Ok(None)` on a clean end of stream before a header.
pub fn read_message(r: &mut impl Read) -> Result<Option<Message>, ProtocolError> {
    let mut h = [0u8; HEADER_LEN];
    let mut got = 0;
    while got < HEADER_LEN {
        match r.read(&mut h[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(ProtocolError::ShortHeader(got)),
            Ok(n) => got += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let (kind, len) = parse_header(&h)?;
    if len > MAX_PAYLOAD_LEN {
        return Err(ProtocolError::PayloadTooLarge(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => ProtocolError::Truncated { expected: len, available: 0 },
        _ => e.into(),
    })?;
    Ok(Some(Message { kind, payload }))
}

/// Reason codes carried by `ERROR`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[repr(u8)]
pub enum ErrorCode {
    Malformed = 1,
    BadState = 2,
    UnknownFrame = 3,
    CaptureFailed = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviceState {
    Idle,
    Configured,
    Captured,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloAck {
    pub device_id: u32,
    pub intrinsics: CameraIntrinsics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Configure {
    pub schedule: CaptureSchedule,
    pub seed: u64,
    #[serde(default)]
    pub interference: InterferenceModel,
    /// Replaces the scene the device was started with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<Scene>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trigger {
    pub session_id: String,
    pub frame_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerAck {
    pub device_id: u32,
    pub frame_id: u32,
    /// Exposure start relative to the trigger.
    pub start_us: u64,
    pub depth_bytes: u64,
    pub color_bytes: u64,
    pub crc32: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusAck {
    pub device_id: u32,
    pub state: DeviceState,
    pub frames: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FramePayload {
    pub frame_id: u32,
    pub depth_pgm: Vec<u8>,
    pub color_ppm: Vec<u8>,
}

impl FramePayload {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + self.depth_pgm.len() + self.color_ppm.len());
        out.extend_from_slice(&self.frame_id.to_be_bytes());
        out.extend_from_slice(&(self.depth_pgm.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.depth_pgm);
        out.extend_from_slice(&self.color_ppm);
        out
    }

    pub fn decode(b: &[u8]) -> Result<Self, ProtocolError> {
        let bad = |reason: &str| ProtocolError::MalformedPayload { kind: Kind::Frame, reason: reason.to_string() };
        if b.len() < 8 {
            return Err(bad("shorter than its 8-byte prefix"));
        }
        let frame_id = u32::from_be_bytes(b[..4].try_into().expect("4 bytes"));
        let depth_len = u32::from_be_bytes(b[4..8].try_into().expect("4 bytes")) as usize;
        if b.len() - 8 < depth_len {
            return Err(bad("depth length exceeds payload"));
        }
        Ok(FramePayload {
            frame_id,
            depth_pgm: b[8..8 + depth_len].to_vec(),
            color_ppm: b[8 + depth_len..].to_vec(),
        })
    }

    /// CRC-32 over the depth bytes followed by the color bytes.
    pub fn checksum(&self) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.depth_pgm);
        h.update(&self.color_ppm);
        h.finalize()
    }
}

fn json_payload<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("protocol bodies serialize")
}

fn parse_json<T: for<'de> Deserialize<'de>>(m: &Message) -> Result<T, ProtocolError> {
    serde_json::from_slice(&m.payload).map_err(|e| ProtocolError::MalformedPayload { kind: m.kind, reason: e.to_string() })
}

pub fn error_message(code: ErrorCode, reason: &str) -> Message {
    let mut payload = vec![code as u8];
    payload.extend_from_slice(reason.as_bytes());
    Message::new(Kind::Error, payload)
}

/// `(code, reason)` of an `ERROR` message.
pub fn parse_error(m: &Message) -> (u8, String) {
    match m.payload.split_first() {
        Some((code, rest)) => (*code, String::from_utf8_lossy(rest).into_owned()),
        None => (0, String::new()),
    }
}

pub fn fetch_message(frame_id: u32) -> Message {
    Message::new(Kind::Fetch, frame_id.to_be_bytes().to_vec())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Flip one payload byte of every FRAME after computing the checksum.
    CorruptFrames,
}

#[derive(Debug, Clone)]
struct StoredFrame {
    payload: FramePayload,
    crc32: u32,
}

/// Simulated embedded device: one sensor of a rig plus the scene it sees.
#[derive(Debug, Clone)]
pub struct DeviceServer {
    pub device_id: u32,
    rig: Vec<SensorModel>,
    scene: Scene,
    state: DeviceState,
    config: Option<Configure>,
    frames: BTreeMap<u32, StoredFrame>,
    fault: Option<Fault>,
}

impl DeviceServer {
    /// `rig` lists every sensor so interference from the others can be
    /// simulated; it must contain `device_id`.
    pub fn new(device_id: u32, rig: Vec<SensorModel>, scene: Scene) -> Result<Self, ProtocolError> {
        if !rig.iter().any(|s| s.id == device_id) {
            return Err(ProtocolError::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidInput,
                format!("device {device_id} is not part of the rig"),
            )));
        }
        Ok(DeviceServer { device_id, rig, scene, state: DeviceState::Idle, config: None, frames: BTreeMap::new(), fault: None })
    }

    pub fn state(&self) -> DeviceState {
        self.state
    }

    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    fn sensor(&self) -> &SensorModel {
        self.rig.iter().find(|s| s.id == self.device_id).expect("checked in new")
    }

    /// Response to one request. Invalid requests produce `ERROR` and leave
    /// the state unchanged.
    pub fn handle(&mut self, m: &Message) -> Message {
        match m.kind {
            Kind::Hello => Message::new(
                Kind::HelloAck,
                json_payload(&HelloAck { device_id: self.device_id, intrinsics: self.sensor().intrinsics }),
            ),
            Kind::Configure => match parse_json::<Configure>(m) {
                Ok(cfg) => {
                    if let Err(e) = cfg.interference.validate() {
                        return error_message(ErrorCode::Malformed, &e.to_string());
                    }
                    self.config = Some(cfg);
                    self.state = DeviceState::Configured;
                    Message::empty(Kind::ConfigureAck)
                }
                Err(e) => error_message(ErrorCode::Malformed, &e.to_string()),
            },
            Kind::Trigger => {
                if self.state != DeviceState::Configured {
                    return error_message(ErrorCode::BadState, &format!("TRIGGER in state {:?}", self.state));
                }
                let trigger = match parse_json::<Trigger>(m) {
                    Ok(t) => t,
                    Err(e) => return error_message(ErrorCode::Malformed, &e.to_string()),
                };
                match self.capture(&trigger) {
                    Ok(ack) => {
                        self.state = DeviceState::Captured;
                        Message::new(Kind::TriggerAck, json_payload(&ack))
                    }
                    Err(reason) => error_message(ErrorCode::CaptureFailed, &reason),
                }
            }
            Kind::Fetch => {
                if self.state != DeviceState::Captured {
                    return error_message(ErrorCode::BadState, &format!("FETCH in state {:?}", self.state));
                }
                let Ok(bytes) = <[u8; 4]>::try_from(m.payload.as_slice()) else {
                    return error_message(ErrorCode::Malformed, "FETCH carries a 4-byte frame id");
                };
                let frame_id = u32::from_be_bytes(bytes);
                match self.frames.get(&frame_id) {
                    Some(f) => {
                        let mut payload = f.payload.encode();
                        if self.fault == Some(Fault::CorruptFrames) {
                            let last = payload.len() - 1;
                            payload[last] ^= 0x01;
                        }
                        Message::new(Kind::Frame, payload)
                    }
                    None => error_message(ErrorCode::UnknownFrame, &format!("no frame {frame_id}")),
                }
            }
            Kind::Status => Message::new(
                Kind::StatusAck,
                json_payload(&StatusAck {
                    device_id: self.device_id,
                    state: self.state,
                    frames: self.frames.keys().copied().collect(),
                }),
            ),
            other => error_message(ErrorCode::Malformed, &format!("{other:?} is not a request")),
        }
    }

    fn capture(&mut self, trigger: &Trigger) -> Result<TriggerAck, String> {
        let cfg = self.config.as_ref().ok_or("not configured")?;
        let scene = cfg.scene.as_ref().unwrap_or(&self.scene);
        // only devices named in the schedule take part in this scan
        let rig: Vec<SensorModel> =
            self.rig.iter().filter(|s| cfg.schedule.device_order.contains(&s.id)).cloned().collect();
        let (capture, _) = capture_device(scene, &rig, &cfg.schedule, self.device_id, &cfg.interference, cfg.seed)
            .map_err(|e| e.to_string())?;
        let start_us = cfg
            .schedule
            .windows()
            .iter()
            .find(|w| w.device == self.device_id)
            .map(|w| w.start_us)
            .unwrap_or(0);
        let payload = FramePayload {
            frame_id: trigger.frame_id,
            depth_pgm: encode_depth_pgm(&capture.frame.depth),
            color_ppm: encode_ppm(&capture.frame.color),
        };
        let crc32 = payload.checksum();
        let ack = TriggerAck {
            device_id: self.device_id,
            frame_id: trigger.frame_id,
            start_us,
            depth_bytes: payload.depth_pgm.len() as u64,
            color_bytes: payload.color_ppm.len() as u64,
            crc32,
        };
        self.frames.insert(trigger.frame_id, StoredFrame { payload, crc32 });
        debug_assert_eq!(self.frames[&trigger.frame_id].crc32, crc32);
        Ok(ack)
    }

    /// Serves one connection until the peer closes it.
    pub fn serve_connection(&mut self, stream: &mut TcpStream) -> Result<(), ProtocolError> {
        loop {
            match read_message(stream) {
                Ok(Some(m)) => {
                    let reply = self.handle(&m);
                    write_message(stream, &reply)?;
                }
                Ok(None) => return Ok(()),
                Err(ProtocolError::Io(e)) => return Err(e.into()),
                Err(e) => {
                    // framing is lost after a bad header: report and drop the connection
                    let _ = write_message(stream, &error_message(ErrorCode::Malformed, &e.to_string()));
                    return Err(e);
                }
            }
        }
    }
}

/// Accepts connections one at a time until `stop` is set.
pub fn serve(mut device: DeviceServer, listener: TcpListener, stop: Arc<AtomicBool>) -> Result<(), ProtocolError> {
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let mut stream = match stream {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        if let Err(e) = device.serve_connection(&mut stream) {
            log::warn!("device {}: connection ended with {e}", device.device_id);
        }
        let _ = stream.shutdown(Shutdown::Both);
    }
    Ok(())
}

/// A device served on a background thread.
pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<Result<(), ProtocolError>>>,
}

impl ServerHandle {
    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // unblock accept
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_millis(200));
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

pub fn spawn_server(device: DeviceServer, addr: impl ToSocketAddrs) -> Result<ServerHandle, ProtocolError> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = std::thread::spawn(move || serve(device, listener, flag));
    Ok(ServerHandle { addr, stop, thread: Some(thread) })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: u32,
    pub frame_id: u32,
    pub depth_bytes: u64,
    pub color_bytes: u64,
    pub crc32: u32,
    pub endpoint: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceFailure {
    pub endpoint: String,
    pub device: Option<u32>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSession {
    pub session_id: String,
    pub cattle_id: String,
    pub schedule: Option<CaptureSchedule>,
    pub devices: Vec<ManifestEntry>,
    pub failed: Vec<DeviceFailure>,
    pub complete: bool,
}

/// Options of a scan beyond the endpoint list.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanOptions {
    pub delay_us: u64,
    pub exposure_us: u64,
    pub seed: u64,
    pub interference: InterferenceModel,
    pub scene: Option<Scene>,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions {
            delay_us: crate::sync::DEFAULT_DELAY_US,
            exposure_us: crate::sync::DEFAULT_EXPOSURE_US,
            seed: 0,
            interference: InterferenceModel::default(),
            scene: None,
        }
    }
}

struct Link {
    stream: TcpStream,
}

impl Link {
    fn connect(endpoint: &str, timeout: Duration) -> Result<Link, ProtocolError> {
        let mut last = None;
        for addr in endpoint.to_socket_addrs()? {
            match TcpStream::connect_timeout(&addr, timeout) {
                Ok(stream) => {
                    stream.set_read_timeout(Some(timeout))?;
                    stream.set_write_timeout(Some(timeout))?;
                    stream.set_nodelay(true)?;
                    return Ok(Link { stream });
                }
                Err(e) => last = Some(e),
            }
        }
        Err(last
            .unwrap_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, format!("{endpoint} resolves to nothing")))
            .into())
    }

    fn request(&mut self, m: &Message, expected: Kind) -> Result<Message, ProtocolError> {
        write_message(&mut self.stream, m)?;
        let reply = read_message(&mut self.stream)?
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "device closed the connection"))?;
        if reply.kind == Kind::Error {
            let (code, reason) = parse_error(&reply);
            return Err(ProtocolError::Remote { code, reason });
        }
        if reply.kind != expected {
            return Err(ProtocolError::UnexpectedReply { expected, got: reply.kind });
        }
        Ok(reply)
    }
}

/// Operator-side client. Session and automatic cattle ids count up across
/// the scans of one client.
#[derive(Debug, Clone)]
pub struct Client {
    pub timeout: Duration,
    next_session: u64,
    next_cattle: u64,
}

impl Default for Client {
    fn default() -> Self {
        Client { timeout: DEFAULT_TIMEOUT, next_session: 1, next_cattle: 1 }
    }
}

impl Client {
    pub fn new(timeout: Duration) -> Self {
        Client { timeout, ..Client::default() }
    }

    /// Connects to every endpoint, configures the reachable devices with a
    /// daisy-chain schedule in endpoint order and triggers them. Devices
    /// that fail are listed in the session instead of aborting the scan.
    pub fn trigger_scan(&mut self, endpoints: &[String], cattle_id: Option<&str>, opts: &ScanOptions) -> ScanSession {
        let n = self.next_session;
        self.next_session += 1;
        let cattle_id = match cattle_id {
            Some(id) => id.to_string(),
            None => {
                let id = self.next_cattle;
                self.next_cattle += 1;
                id.to_string()
            }
        };
        let session_id = format!("session_{n:04}");
        let frame_id = n as u32;
        let timeout = self.timeout;

        let hellos: Vec<Result<(Link, u32), ProtocolError>> = std::thread::scope(|s| {
            let handles: Vec<_> = endpoints
                .iter()
                .map(|ep| {
                    s.spawn(move || {
                        let mut link = Link::connect(ep, timeout)?;
                        let reply = link.request(&Message::empty(Kind::Hello), Kind::HelloAck)?;
                        let ack: HelloAck = parse_json(&reply)?;
                        Ok((link, ack.device_id))
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("hello thread")).collect()
        });
        let mut failed = Vec::new();
        let mut links: Vec<(String, Link, u32)> = Vec::new();
        for (ep, r) in endpoints.iter().zip(hellos) {
            match r {
                Ok((link, id)) if links.iter().any(|(_, _, other)| *other == id) => {
                    drop(link);
                    failed.push(DeviceFailure { endpoint: ep.clone(), device: Some(id), reason: "duplicate device id".into() });
                }
                Ok((link, id)) => links.push((ep.clone(), link, id)),
                Err(e) => failed.push(DeviceFailure { endpoint: ep.clone(), device: None, reason: e.to_string() }),
            }
        }
        let ids: Vec<u32> = links.iter().map(|l| l.2).collect();
        let schedule = build_schedule(&ids, opts.delay_us, opts.exposure_us).ok();
        let mut devices = Vec::new();
        if let Some(schedule) = &schedule {
            let configure = Message::new(
                Kind::Configure,
                json_payload(&Configure {
                    schedule: schedule.clone(),
                    seed: opts.seed,
                    interference: opts.interference,
                    scene: opts.scene.clone(),
                }),
            );
            let trigger = Message::new(Kind::Trigger, json_payload(&Trigger { session_id: session_id.clone(), frame_id }));
            let acks: Vec<Result<TriggerAck, ProtocolError>> = std::thread::scope(|s| {
                let handles: Vec<_> = links
                    .iter_mut()
                    .map(|(_, link, _)| {
                        let (configure, trigger) = (&configure, &trigger);
                        s.spawn(move || {
                            link.request(configure, Kind::ConfigureAck)?;
                            let reply = link.request(trigger, Kind::TriggerAck)?;
                            parse_json::<TriggerAck>(&reply)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("trigger thread")).collect()
            });
            for ((ep, _, id), ack) in links.iter().zip(acks) {
                match ack {
                    Ok(a) => devices.push(ManifestEntry {
                        id: *id,
                        frame_id: a.frame_id,
                        depth_bytes: a.depth_bytes,
                        color_bytes: a.color_bytes,
                        crc32: a.crc32,
                        endpoint: ep.clone(),
                    }),
                    Err(e) => failed.push(DeviceFailure { endpoint: ep.clone(), device: Some(*id), reason: e.to_string() }),
                }
            }
        }
        let complete = failed.is_empty() && !devices.is_empty();
        ScanSession { session_id, cattle_id, schedule, devices, failed, complete }
    }

    /// Downloads every frame of a complete session into
    /// `<out>/<session>/<device>_depth.pgm` and `_color.ppm`, verifying the
    /// checksums, and writes `manifest.json` next to them.
    pub fn fetch_frames(&self, session: &ScanSession, out: &Path) -> Result<Vec<PathBuf>, ProtocolError> {
        if !session.complete {
            return Err(ProtocolError::IncompleteSession(session.session_id.clone()));
        }
        let dir = out.join(&session.session_id);
        std::fs::create_dir_all(&dir)?;
        let timeout = self.timeout;
        let fetched: Vec<Result<FramePayload, ProtocolError>> = std::thread::scope(|s| {
            let handles: Vec<_> = session
                .devices
                .iter()
                .map(|entry| {
                    s.spawn(move || {
                        let mut link = Link::connect(&entry.endpoint, timeout)?;
                        let reply = link.request(&fetch_message(entry.frame_id), Kind::Frame)?;
                        let frame = FramePayload::decode(&reply.payload)?;
                        verify_frame(entry, &frame)?;
                        Ok(frame)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("fetch thread")).collect()
        });
        let mut paths = Vec::new();
        for (entry, frame) in session.devices.iter().zip(fetched) {
            let frame = frame?;
            let depth = dir.join(format!("{}_depth.pgm", entry.id));
            let color = dir.join(format!("{}_color.ppm", entry.id));
            std::fs::write(&depth, &frame.depth_pgm)?;
            std::fs::write(&color, &frame.color_ppm)?;
            paths.push(depth);
            paths.push(color);
        }
        std::fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(session).expect("manifest serializes"))?;
        Ok(paths)
    }

    /// STATUS of one device.
    pub fn status(&self, endpoint: &str) -> Result<StatusAck, ProtocolError> {
        let mut link = Link::connect(endpoint, self.timeout)?;
        let reply = link.request(&Message::empty(Kind::Status), Kind::StatusAck)?;
        parse_json(&reply)
    }
}

pub fn verify_frame(entry: &ManifestEntry, frame: &FramePayload) -> Result<(), ProtocolError> {
    let sizes_match = frame.depth_pgm.len() as u64 == entry.depth_bytes && frame.color_ppm.len() as u64 == entry.color_bytes;
    if !sizes_match || frame.frame_id != entry.frame_id || frame.checksum() != entry.crc32 {
        return Err(ProtocolError::Integrity { device: entry.id });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{RigidTransform, Vec3};
    use crate::io::decode_depth_pgm;
    use crate::sim::box_object;
    use proptest::prelude::*;

    #[test]
    fn hello_header_layout() {
        let bytes = encode_message(&Message::empty(Kind::Hello));
        assert_eq!(bytes, [0x48, 0x53, 0x43, 0x4E, 0x01, 0x01, 0x00, 0x00, 0x00, 0x00]);
    }

    #[test]
    fn length_is_big_endian() {
        let bytes = encode_message(&Message::new(Kind::Frame, vec![7; 0x0102_03]));
        assert_eq!(&bytes[6..10], &[0x00, 0x01, 0x02, 0x03]);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let good = encode_message(&Message::new(Kind::Status, vec![1, 2, 3]));
        assert!(matches!(decode_message(&good[..5]), Err(ProtocolError::ShortHeader(5))));
        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_message(&bad), Err(ProtocolError::BadMagic(m)) if &m == b"XXXX"));
        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_message(&bad), Err(ProtocolError::BadVersion(2))));
        let mut bad = good.clone();
        bad[5] = 11;
        assert!(matches!(decode_message(&bad), Err(ProtocolError::UnknownKind(11))));
        assert!(matches!(
            decode_message(&good[..good.len() - 1]),
            Err(ProtocolError::Truncated { expected: 3, available: 2 })
        ));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(decode_message(&long), Err(ProtocolError::TrailingBytes(1))));
    }

    #[test]
    fn large_frame_round_trips() {
        let payload: Vec<u8> = (0..1 << 20).map(|i| (i * 31 % 251) as u8).collect();
        let m = Message::new(Kind::Frame, payload);
        assert_eq!(decode_message(&encode_message(&m)).unwrap(), m);
    }

    #[test]
    fn maximum_payload_round_trips_over_a_stream() {
        let m = Message::new(Kind::Frame, vec![0xA5; MAX_PAYLOAD_LEN]);
        let bytes = encode_message(&m);
        let back = read_message(&mut bytes.as_slice()).unwrap().unwrap();
        assert_eq!(back, m);
        let mut over = header(Kind::Frame, MAX_PAYLOAD_LEN + 1).to_vec();
        over.push(0);
        assert!(matches!(read_message(&mut over.as_slice()), Err(ProtocolError::PayloadTooLarge(_))));
    }

    fn kind_strategy() -> impl Strategy<Value = Kind> {
        proptest::sample::select(Kind::ALL.to_vec())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn encode_decode_round_trip(kind in kind_strategy(), payload in proptest::collection::vec(any::<u8>(), 0..512)) {
            let m = Message::new(kind, payload);
            let bytes = encode_message(&m);
            prop_assert_eq!(bytes.len(), HEADER_LEN + m.payload.len());
            prop_assert_eq!(&decode_message(&bytes).unwrap(), &m);
            prop_assert_eq!(&read_message(&mut bytes.as_slice()).unwrap().unwrap(), &m);
        }
    }

    #[test]
    fn frame_payload_round_trip() {
        let f = FramePayload { frame_id: 9, depth_pgm: vec![1, 2, 3], color_ppm: vec![4, 5] };
        assert_eq!(FramePayload::decode(&f.encode()).unwrap(), f);
        assert!(FramePayload::decode(&[0, 0, 0, 1, 0, 0, 0, 9, 1]).is_err());
    }

    pub(crate) fn tiny_device(id: u32, n: u32) -> DeviceServer {
        let intr = CameraIntrinsics::new(8.0, 8.0, 4.0, 3.0, 8, 6).unwrap();
        let rig = crate::sim::ring_rig(n as usize, &[10.0], 1.5, Vec3::new(0.0, 0.0, 0.5), intr);
        let scene = Scene::new(vec![box_object(
            [0.2, 0.2, 0.2],
            RigidTransform::from_translation(Vec3::new(0.0, 0.0, 0.5)),
            [0.5, 0.5, 0.5],
        )]);
        DeviceServer::new(id, rig, scene).unwrap()
    }

    fn configure_msg(ids: &[u32]) -> Message {
        Message::new(
            Kind::Configure,
            json_payload(&Configure {
                schedule: build_schedule(ids, 160, 125).unwrap(),
                seed: 1,
                interference: InterferenceModel::default(),
                scene: None,
            }),
        )
    }

    fn trigger_msg(frame_id: u32) -> Message {
        Message::new(Kind::Trigger, json_payload(&Trigger { session_id: "s".into(), frame_id }))
    }

    #[test]
    fn hello_reports_device_id() {
        let mut d = tiny_device(2, 3);
        let reply = d.handle(&Message::empty(Kind::Hello));
        assert_eq!(reply.kind, Kind::HelloAck);
        let ack: HelloAck = parse_json(&reply).unwrap();
        assert_eq!(ack.device_id, 2);
        assert_eq!(ack.intrinsics.width, 8);
    }

    #[test]
    fn out_of_order_requests_get_bad_state() {
        let mut d = tiny_device(0, 2);
        let r = d.handle(&trigger_msg(1));
        assert_eq!((r.kind, parse_error(&r).0), (Kind::Error, ErrorCode::BadState as u8));
        let r = d.handle(&fetch_message(1));
        assert_eq!(parse_error(&r).0, ErrorCode::BadState as u8);
        assert_eq!(d.state(), DeviceState::Idle);
        assert_eq!(d.handle(&configure_msg(&[0, 1])).kind, Kind::ConfigureAck);
        let r = d.handle(&fetch_message(1));
        assert_eq!(parse_error(&r).0, ErrorCode::BadState as u8);
        assert_eq!(d.handle(&trigger_msg(1)).kind, Kind::TriggerAck);
        let r = d.handle(&trigger_msg(2));
        assert_eq!(parse_error(&r).0, ErrorCode::BadState as u8);
        let r = d.handle(&fetch_message(5));
        assert_eq!(parse_error(&r).0, ErrorCode::UnknownFrame as u8);
        let r = d.handle(&fetch_message(1));
        assert_eq!(r.kind, Kind::Frame);
        let frame = FramePayload::decode(&r.payload).unwrap();
        let depth = decode_depth_pgm(&frame.depth_pgm).unwrap();
        assert_eq!((depth.width, depth.height), (8, 6));
    }

    #[test]
    fn malformed_and_non_request_messages() {
        let mut d = tiny_device(0, 1);
        let r = d.handle(&Message::new(Kind::Configure, b"{".to_vec()));
        assert_eq!(parse_error(&r).0, ErrorCode::Malformed as u8);
        let r = d.handle(&Message::empty(Kind::HelloAck));
        assert_eq!(parse_error(&r).0, ErrorCode::Malformed as u8);
        d.handle(&configure_msg(&[0]));
        d.handle(&trigger_msg(1));
        let r = d.handle(&Message::new(Kind::Fetch, vec![1, 2]));
        assert_eq!(parse_error(&r).0, ErrorCode::Malformed as u8);
    }

    /// Every request sequence up to length 5: FRAME is only ever returned
    /// after a successful TRIGGER with no CONFIGURE since.
    #[test]
    fn state_machine_model_check() {
        let requests = [
            Message::empty(Kind::Hello),
            configure_msg(&[0]),
            trigger_msg(1),
            fetch_message(1),
            Message::empty(Kind::Status),
        ];
        let mut checked = 0;
        for len in 1..=5u32 {
            for code in 0..5usize.pow(len) {
                let mut d = tiny_device(0, 1);
                let mut triggered = false;
                let mut c = code;
                for _ in 0..len {
                    let req = &requests[c % 5];
                    c /= 5;
                    let before = d.state();
                    let reply = d.handle(req);
                    match req.kind {
                        Kind::Configure => triggered = false,
                        Kind::Trigger if reply.kind == Kind::TriggerAck => {
                            assert_eq!(before, DeviceState::Configured);
                            triggered = true;
                        }
                        Kind::Trigger => assert_ne!(before, DeviceState::Configured),
                        Kind::Fetch => assert_eq!(reply.kind == Kind::Frame, triggered),
                        _ => {}
                    }
                    if reply.kind == Kind::Error {
                        assert_eq!(d.state(), before, "errors leave the state alone");
                    }
                }
                checked += 1;
            }
        }
        assert_eq!(checked, 5 + 25 + 125 + 625 + 3125);
    }

    #[test]
    fn loopback_scan_and_fetch() {
        let servers: Vec<ServerHandle> = (0..3).map(|id| spawn_server(tiny_device(id, 3), "127.0.0.1:0").unwrap()).collect();
        let endpoints: Vec<String> = servers.iter().map(|s| s.addr.to_string()).collect();
        let mut client = Client::new(Duration::from_secs(5));
        let session = client.trigger_scan(&endpoints, None, &ScanOptions::default());
        assert!(session.complete, "{:?}", session.failed);
        assert_eq!(session.cattle_id, "1");
        let ids: Vec<u32> = session.devices.iter().map(|d| d.id).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        let dir = tempfile::tempdir().unwrap();
        let files = client.fetch_frames(&session, dir.path()).unwrap();
        assert_eq!(files.len(), 6);
        let first: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
        let again = client.fetch_frames(&session, dir.path()).unwrap();
        assert_eq!(again, files);
        let second: Vec<Vec<u8>> = files.iter().map(|f| std::fs::read(f).unwrap()).collect();
        assert_eq!(first, second);
        assert_eq!(client.status(&endpoints[1]).unwrap().state, DeviceState::Captured);
        let next = client.trigger_scan(&endpoints, None, &ScanOptions::default());
        assert_eq!(next.cattle_id, "2");
        let named = client.trigger_scan(&endpoints, Some("cow-17"), &ScanOptions::default());
        assert_eq!(named.cattle_id, "cow-17");
        assert_ne!(named.session_id, next.session_id);
    }

    #[test]
    fn corrupted_frame_fails_integrity() {
        let mut d = tiny_device(0, 1);
        d.inject_fault(Some(Fault::CorruptFrames));
        let server = spawn_server(d, "127.0.0.1:0").unwrap();
        let mut client = Client::default();
        let session = client.trigger_scan(&[server.addr.to_string()], Some("x"), &ScanOptions::default());
        assert!(session.complete);
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(client.fetch_frames(&session, dir.path()), Err(ProtocolError::Integrity { device: 0 })));
    }

    #[test]
    fn unreachable_devices_are_recorded() {
        // bind then drop to get a port nobody listens on
        let dead = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().to_string();
        let mut client = Client::new(Duration::from_millis(500));
        let none = client.trigger_scan(&[dead.clone()], Some("a"), &ScanOptions::default());
        assert!(!none.complete);
        assert!(none.devices.is_empty());
        assert_eq!(none.failed.len(), 1);
        let server = spawn_server(tiny_device(0, 2), "127.0.0.1:0").unwrap();
        let partial = client.trigger_scan(&[server.addr.to_string(), dead], Some("b"), &ScanOptions::default());
        assert!(!partial.complete);
        assert_eq!(partial.devices.len(), 1);
        assert_eq!(partial.failed.len(), 1);
        assert!(client.fetch_frames(&partial, tempfile::tempdir().unwrap().path()).is_err());
    }
}
