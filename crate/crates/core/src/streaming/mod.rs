//! Topic messages, their wire framing and payload schemas.
//!
//! A frame is `"AMBP"`, `u8` version, `u8` topic, `u16` reserved, `u64`
//! timestamp (ns), `u32` header length, `u32` payload length, a compact JSON
//! header and the raw payload. Integers are little-endian.

use std::fmt;
use std::io::{self, Read, Write};
use std::path::PathBuf;

use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::camera::CameraInfo;
use crate::pose::{Pose, Vec3};
use crate::render::PointCloud;
use crate::volume::{EditDecodeError, VoxelEdit};

mod publish;
mod recording;
mod serve;

pub use publish::*;
pub use recording::*;
pub use serve::*;

pub const FRAME_MAGIC: [u8; 4] = *b"AMBP";
pub const FRAME_VERSION: u8 = 1;
pub const FRAME_PREFIX_LEN: usize = 24;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StreamError {
    #[error("i/o error: {0}")]
    Io(String),
    #[error("corrupt recording at byte {offset}: {reason}")]
    CorruptRecording { offset: u64, reason: String },
    #[error("recording truncated at byte {offset} after {messages} complete messages")]
    TruncatedFile { offset: u64, messages: u64 },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u8),
    #[error("unknown topic id {0}")]
    UnknownTopic(u8),
    #[error("bad frame: {0}")]
    BadFrame(String),
    #[error("{topic} payload is {found} bytes, expected {expected}")]
    PayloadLength { topic: Topic, expected: usize, found: usize },
    #[error("{} exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),
    #[error("cannot bind {addr}: {message}")]
    Bind { addr: String, message: String },
    #[error("handshake failed: {0}")]
    Handshake(String),
}

impl From<io::Error> for StreamError {
    fn from(e: io::Error) -> Self {
        StreamError::Io(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum Topic {
    ColorLeft = 1,
    ColorRight = 2,
    Depth = 3,
    Seg = 4,
    PointCloud = 5,
    Pose = 6,
    CameraInfo = 7,
    VoxelEdit = 8,
    Force = 9,
    ControlDrill = 16,
    ControlCamera = 17,
}

impl Topic {
    pub const ALL: [Topic; 11] = [
        Topic::ColorLeft,
        Topic::ColorRight,
        Topic::Depth,
        Topic::Seg,
        Topic::PointCloud,
        Topic::Pose,
        Topic::CameraInfo,
        Topic::VoxelEdit,
        Topic::Force,
        Topic::ControlDrill,
        Topic::ControlCamera,
    ];

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Topic, StreamError> {
        Topic::ALL
            .iter()
            .copied()
            .find(|t| t.id() == id)
            .ok_or(StreamError::UnknownTopic(id))
    }

    pub fn name(self) -> &'static str {
        match self {
            Topic::ColorLeft => "color_left",
            Topic::ColorRight => "color_right",
            Topic::Depth => "depth",
            Topic::Seg => "seg",
            Topic::PointCloud => "point_cloud",
            Topic::Pose => "pose",
            Topic::CameraInfo => "camera_info",
            Topic::VoxelEdit => "voxel_edit",
            Topic::Force => "force",
            Topic::ControlDrill => "control_drill",
            Topic::ControlCamera => "control_camera",
        }
    }

    pub fn from_name(s: &str) -> Option<Topic> {
        Topic::ALL.iter().copied().find(|t| t.name() == s)
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopicMessage {
    pub topic: Topic,
    pub timestamp_ns: u64,
    /// Compact JSON object.
    pub header: String,
    pub payload: Vec<u8>,
}

fn header_string(v: Value) -> String {
    serde_json::to_string(&v).expect("json values always serialize")
}

impl TopicMessage {
    pub fn new(topic: Topic, timestamp_ns: u64, header: Value, payload: Vec<u8>) -> Self {
        Self {
            topic,
            timestamp_ns,
            header: header_string(header),
            payload,
        }
    }

    pub fn header_json(&self) -> Result<Map<String, Value>, StreamError> {
        match serde_json::from_str(&self.header) {
            Ok(Value::Object(m)) => Ok(m),
            Ok(_) => Err(StreamError::BadFrame("header is not a JSON object".into())),
            Err(e) => Err(StreamError::BadFrame(format!("header: {e}"))),
        }
    }

    pub fn header_u64(&self, key: &str) -> Option<u64> {
        self.header_json().ok()?.get(key)?.as_u64()
    }

    pub fn header_str(&self, key: &str) -> Option<String> {
        Some(self.header_json().ok()?.get(key)?.as_str()?.to_string())
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_PREFIX_LEN + self.header.len() + self.payload.len()
    }

    pub fn write_to<W: Write + ?Sized>(&self, w: &mut W) -> io::Result<()> {
        let mut prefix = [0u8; FRAME_PREFIX_LEN];
        prefix[..4].copy_from_slice(&FRAME_MAGIC);
        prefix[4] = FRAME_VERSION;
        prefix[5] = self.topic.id();
        prefix[8..16].copy_from_slice(&self.timestamp_ns.to_le_bytes());
        prefix[16..20].copy_from_slice(&(self.header.len() as u32).to_le_bytes());
        prefix[20..24].copy_from_slice(&(self.payload.len() as u32).to_le_bytes());
        w.write_all(&prefix)?;
        w.write_all(self.header.as_bytes())?;
        w.write_all(&self.payload)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut v = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut v).expect("writing to a Vec cannot fail");
        v
    }

    /// Decodes one frame from the start of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(TopicMessage, usize), StreamError> {
        let mut cur = io::Cursor::new(bytes);
        match read_frame(&mut cur)? {
            Some(m) => Ok((m, cur.position() as usize)),
            None => Err(StreamError::BadFrame("empty input".into())),
        }
    }
}

struct Prefix {
    topic: Topic,
    timestamp_ns: u64,
    header_len: usize,
    payload_len: usize,
}

fn parse_prefix(p: &[u8; FRAME_PREFIX_LEN]) -> Result<Prefix, StreamError> {
    if p[..4] != FRAME_MAGIC {
        return Err(StreamError::BadFrame(format!("bad magic {:?}", &p[..4])));
    }
    if p[4] != FRAME_VERSION {
        return Err(StreamError::UnsupportedVersion(p[4]));
    }
    if p[6..8] != [0, 0] {
        return Err(StreamError::BadFrame("reserved bytes are not zero".into()));
    }
    Ok(Prefix {
        topic: Topic::from_id(p[5])?,
        timestamp_ns: u64::from_le_bytes(p[8..16].try_into().unwrap()),
        header_len: u32::from_le_bytes(p[16..20].try_into().unwrap()) as usize,
        payload_len: u32::from_le_bytes(p[20..24].try_into().unwrap()) as usize,
    })
}

/// Reads until `buf` is full; returns how many bytes were read before EOF.
pub(crate) fn read_full<R: Read + ?Sized>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

/// Reads one frame from a stream. `Ok(None)` at a clean end of stream; a
/// frame cut short is a [`StreamError::TruncatedFile`] with offset 0.
pub fn read_frame<R: Read + ?Sized>(r: &mut R) -> Result<Option<TopicMessage>, StreamError> {
    let mut prefix = [0u8; FRAME_PREFIX_LEN];
    match read_full(r, &mut prefix)? {
        0 => return Ok(None),
        FRAME_PREFIX_LEN => {}
        _ => return Err(StreamError::TruncatedFile { offset: 0, messages: 0 }),
    }
    let p = parse_prefix(&prefix)?;
    read_frame_body(r, p).map(Some)
}

fn read_frame_body<R: Read + ?Sized>(r: &mut R, p: Prefix) -> Result<TopicMessage, StreamError> {
    let mut header = vec![0u8; p.header_len];
    let mut payload = vec![0u8; p.payload_len];
    if read_full(r, &mut header)? != p.header_len || read_full(r, &mut payload)? != p.payload_len {
        return Err(StreamError::TruncatedFile { offset: 0, messages: 0 });
    }
    let header = String::from_utf8(header).map_err(|_| StreamError::BadFrame("header is not UTF-8".into()))?;
    let msg = TopicMessage {
        topic: p.topic,
        timestamp_ns: p.timestamp_ns,
        header,
        payload,
    };
    msg.header_json()?;
    check_payload(&msg)?;
    Ok(msg)
}

fn expect_len(topic: Topic, expected: usize, found: usize) -> Result<(), StreamError> {
    if expected == found {
        Ok(())
    } else {
        Err(StreamError::PayloadLength { topic, expected, found })
    }
}

/// Checks a payload against its topic schema.
pub fn check_payload(m: &TopicMessage) -> Result<(), StreamError> {
    let n = m.payload.len();
    let dims = || -> Result<usize, StreamError> {
        let w = m.header_u64("width").ok_or_else(|| StreamError::BadFrame(format!("{} header lacks width", m.topic)))?;
        let h = m.header_u64("height").ok_or_else(|| StreamError::BadFrame(format!("{} header lacks height", m.topic)))?;
        Ok((w * h) as usize)
    };
    match m.topic {
        Topic::ColorLeft | Topic::ColorRight => expect_len(m.topic, 3 * dims()?, n),
        Topic::Depth => expect_len(m.topic, 4 * dims()?, n),
        Topic::Seg => expect_len(m.topic, dims()?, n),
        Topic::PointCloud => {
            if n < 4 {
                return expect_len(m.topic, 4, n);
            }
            let count = u32::from_le_bytes(m.payload[..4].try_into().unwrap()) as usize;
            expect_len(m.topic, 4 + CLOUD_POINT_BYTES * count, n)
        }
        Topic::Pose | Topic::ControlCamera => expect_len(m.topic, POSE_BYTES, n),
        Topic::CameraInfo => expect_len(m.topic, CAMERA_INFO_BYTES, n),
        Topic::Force => expect_len(m.topic, FORCE_BYTES, n),
        Topic::ControlDrill => expect_len(m.topic, POSE_BYTES + 1, n),
        Topic::VoxelEdit => VoxelEdit::decode(&m.payload)
            .map(|_| ())
            .map_err(|e: EditDecodeError| StreamError::BadFrame(format!("voxel_edit: {e}"))),
    }
}

pub const POSE_BYTES: usize = 56;
pub const CAMERA_INFO_BYTES: usize = 8 + 8 * 8 + POSE_BYTES;
pub const FORCE_BYTES: usize = 8 + 12 + 2;
pub const CLOUD_POINT_BYTES: usize = 16;

struct Rd<'a>(&'a [u8]);

impl Rd<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let (a, b) = self.0.split_at(N);
        self.0 = b;
        a.try_into().unwrap()
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }
    fn pose(&mut self) -> Pose {
        let mut a = [0.0; 7];
        for v in &mut a {
            *v = self.f64();
        }
        Pose::from_array(a)
    }
}

fn put_pose(out: &mut Vec<u8>, p: &Pose) {
    for v in p.to_array() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// `x, y, z, qw, qx, qy, qz` as f64.
pub fn encode_pose(p: &Pose) -> Vec<u8> {
    let mut out = Vec::with_capacity(POSE_BYTES);
    put_pose(&mut out, p);
    out
}

pub fn decode_pose(b: &[u8]) -> Result<Pose, StreamError> {
    expect_len(Topic::Pose, POSE_BYTES, b.len())?;
    Ok(Rd(b).pose())
}

/// `u32 width, u32 height`, then `fx fy cx cy near far fva baseline` as
/// f64, then the world pose of the camera the message describes.
pub fn encode_camera_info(info: &CameraInfo, camera_pose: &Pose) -> Vec<u8> {
    let mut out = Vec::with_capacity(CAMERA_INFO_BYTES);
    out.extend_from_slice(&info.width.to_le_bytes());
    out.extend_from_slice(&info.height.to_le_bytes());
    for v in [info.fx, info.fy, info.cx, info.cy, info.near, info.far, info.fva, info.baseline] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_pose(&mut out, camera_pose);
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraInfoMsg {
    pub width: u32,
    pub height: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
    pub far: f64,
    pub fva: f64,
    pub baseline: f64,
    pub pose: Pose,
}

pub fn decode_camera_info(b: &[u8]) -> Result<CameraInfoMsg, StreamError> {
    expect_len(Topic::CameraInfo, CAMERA_INFO_BYTES, b.len())?;
    let mut r = Rd(b);
    Ok(CameraInfoMsg {
        width: r.u32(),
        height: r.u32(),
        fx: r.f64(),
        fy: r.f64(),
        cx: r.f64(),
        cy: r.f64(),
        near: r.f64(),
        far: r.f64(),
        fva: r.f64(),
        baseline: r.f64(),
        pose: r.pose(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForceMsg {
    pub tick: u64,
    pub force: [f32; 3],
    pub contact: bool,
    /// Index of the cursor that set the drill pose.
    pub s_max: u8,
}

/// `u64 tick`, force as three f32, `u8 contact`, `u8 s_max`.
pub fn encode_force(tick: u64, force: &Vec3, contact: bool, s_max: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(FORCE_BYTES);
    out.extend_from_slice(&tick.to_le_bytes());
    for v in force.iter() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out.push(contact as u8);
    out.push(s_max.min(255) as u8);
    out
}

pub fn decode_force(b: &[u8]) -> Result<ForceMsg, StreamError> {
    expect_len(Topic::Force, FORCE_BYTES, b.len())?;
    let mut r = Rd(b);
    Ok(ForceMsg {
        tick: r.u64(),
        force: [r.f32(), r.f32(), r.f32()],
        contact: r.u8() != 0,
        s_max: r.u8(),
    })
}

/// Little-endian f32 meters per pixel, `+inf` where nothing was hit.
pub fn encode_depth(depth: &[f32]) -> Vec<u8> {
    depth.iter().flat_map(|d| d.to_le_bytes()).collect()
}

pub fn decode_depth(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

/// `u32 count`, then per point three f32 (camera frame, meters), RGB and
/// the label.
pub fn encode_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + CLOUD_POINT_BYTES * cloud.points.len());
    out.extend_from_slice(&(cloud.points.len() as u32).to_le_bytes());
    for p in &cloud.points {
        for v in p.xyz {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&p.rgb);
        out.push(p.label);
    }
    out
}

/// Points as `(xyz, rgb, label)`.
pub fn decode_cloud(b: &[u8]) -> Result<Vec<([f32; 3], [u8; 3], u8)>, StreamError> {
    if b.len() < 4 {
        return Err(StreamError::PayloadLength {
            topic: Topic::PointCloud,
            expected: 4,
            found: b.len(),
        });
    }
    let mut r = Rd(b);
    let n = r.u32() as usize;
    expect_len(Topic::PointCloud, 4 + CLOUD_POINT_BYTES * n, b.len())?;
    Ok((0..n)
        .map(|_| {
            let xyz = [r.f32(), r.f32(), r.f32()];
            let rgb = [r.u8(), r.u8(), r.u8()];
            (xyz, rgb, r.u8())
        })
        .collect())
}

/// Inbound control messages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ControlMessage {
    Drill { pose: Pose, drilling: bool },
    Camera { pose: Pose },
}

impl ControlMessage {
    pub fn to_message(&self, timestamp_ns: u64) -> TopicMessage {
        match self {
            ControlMessage::Drill { pose, drilling } => {
                let mut p = encode_pose(pose);
                p.push(*drilling as u8);
                TopicMessage::new(Topic::ControlDrill, timestamp_ns, json!({}), p)
            }
            ControlMessage::Camera { pose } => {
                TopicMessage::new(Topic::ControlCamera, timestamp_ns, json!({}), encode_pose(pose))
            }
        }
    }

    pub fn from_message(m: &TopicMessage) -> Result<ControlMessage, StreamError> {
        match m.topic {
            Topic::ControlDrill => {
                expect_len(m.topic, POSE_BYTES + 1, m.payload.len())?;
                let pose = Rd(&m.payload[..POSE_BYTES]).pose();
                Ok(ControlMessage::Drill {
                    pose,
                    drilling: m.payload[POSE_BYTES] != 0,
                })
            }
            Topic::ControlCamera => Ok(ControlMessage::Camera {
                pose: {
                    expect_len(m.topic, POSE_BYTES, m.payload.len())?;
                    Rd(&m.payload).pose()
                },
            }),
            t => Err(StreamError::BadFrame(format!("{t} is not a control topic"))),
        }
    }

    pub fn to_update(&self) -> crate::sim::InputUpdate {
        match *self {
            ControlMessage::Drill { pose, drilling } => crate::sim::InputUpdate {
                drill_pose: Some(pose),
                drilling: Some(drilling),
                camera_pose: None,
            },
            ControlMessage::Camera { pose } => crate::sim::InputUpdate {
                camera_pose: Some(pose),
                ..Default::default()
            },
        }
    }
}
