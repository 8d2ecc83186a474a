//! Error metrics for pose and depth estimates against recorded ground truth.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::pose::{Pose, Vec3};
use crate::streaming::{decode_camera_info, decode_depth, decode_pose, read_topics, StreamError, Topic, TopicMessage};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("no frames matched between ground truth and estimate")]
    NoMatchedFrames,
    #[error("resolution mismatch: {}x{} vs {}x{}", .a.0, .a.1, .b.0, .b.1)]
    ResolutionMismatch { a: (u32, u32), b: (u32, u32) },
    #[error("{file}:{line}: {message}")]
    Parse { file: String, line: usize, message: String },
    #[error("object `{0}` not found in recording")]
    MissingObject(String),
    #[error("{}: {message}", .path.display())]
    Io { path: PathBuf, message: String },
    #[error(transparent)]
    Recording(#[from] StreamError),
}

/// Poses keyed by frame index.
pub type PoseTrack = BTreeMap<u64, Pose>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    #[default]
    None,
    /// Maps the first matched estimate onto the first ground-truth pose.
    FirstFrame,
}

impl std::str::FromStr for Alignment {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "none" => Ok(Alignment::None),
            "first_frame" => Ok(Alignment::FirstFrame),
            _ => Err(format!("unknown alignment `{s}` (expected none or first_frame)")),
        }
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Stats {
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Stats {
        if values.is_empty() {
            return Stats::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Stats { mean, std: var.sqrt() }
    }
}

impl fmt::Display for Stats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        // avoid printing "-0.00"
        let clean = |v: f64| if v.abs() < 0.005 { 0.0 } else { v };
        write!(f, "{:.2} ± {:.2}", clean(self.mean), clean(self.std))
    }
}

/// Sum of absolute coordinate differences, millimeters.
pub fn translation_l1_mm(a: &Pose, b: &Pose) -> f64 {
    (a.position - b.position).abs().sum() * 1e3
}

/// Euclidean distance, millimeters.
pub fn translation_l2_mm(a: &Pose, b: &Pose) -> f64 {
    (a.position - b.position).norm() * 1e3
}

/// Angle of the relative rotation, degrees.
pub fn rotation_geodesic_deg(a: &Pose, b: &Pose) -> f64 {
    let q = (a.orientation.inverse() * b.orientation).into_inner();
    (2.0 * q.imag().norm().atan2(q.w.abs())).to_degrees()
}

/// Sum of absolute roll, pitch and yaw of the relative rotation, degrees.
pub fn rotation_euler_sum_deg(a: &Pose, b: &Pose) -> f64 {
    let (r, p, y) = (a.orientation.inverse() * b.orientation).euler_angles();
    (r.abs() + p.abs() + y.abs()).to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct FramePoseError {
    pub frame: u64,
    pub translation_l1_mm: f64,
    pub translation_l2_mm: f64,
    pub rotation_geodesic_deg: f64,
    pub rotation_euler_sum_deg: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PoseErrorReport {
    pub matched: usize,
    pub alignment: Alignment,
    pub translation_l1_mm: Stats,
    pub translation_l2_mm: Stats,
    pub rotation_geodesic_deg: Stats,
    pub rotation_euler_sum_deg: Stats,
    pub frames: Vec<FramePoseError>,
}

impl fmt::Display for PoseErrorReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "matched frames: {}", self.matched)?;
        writeln!(f, "translation L1 (mm): {}", self.translation_l1_mm)?;
        writeln!(f, "translation L2 (mm): {}", self.translation_l2_mm)?;
        writeln!(f, "rotation geodesic (deg): {}", self.rotation_geodesic_deg)?;
        writeln!(f, "rotation euler sum (deg): {}", self.rotation_euler_sum_deg)
    }
}

/// Compares estimates to ground truth on the frames present in both.
pub fn pose_error(gt: &PoseTrack, est: &PoseTrack, alignment: Alignment) -> Result<PoseErrorReport, EvalError> {
    let pairs: Vec<(u64, &Pose, &Pose)> = gt
        .iter()
        .filter_map(|(k, g)| est.get(k).map(|e| (*k, g, e)))
        .collect();
    let Some(&(_, g0, e0)) = pairs.first() else {
        return Err(EvalError::NoMatchedFrames);
    };
    let align = match alignment {
        Alignment::None => Pose::identity(),
        Alignment::FirstFrame => g0.compose(&e0.inverse()),
    };
    let frames: Vec<FramePoseError> = pairs
        .iter()
        .map(|&(frame, g, e)| {
            let e = align.compose(e);
            FramePoseError {
                frame,
                translation_l1_mm: translation_l1_mm(g, &e),
                translation_l2_mm: translation_l2_mm(g, &e),
                rotation_geodesic_deg: rotation_geodesic_deg(g, &e),
                rotation_euler_sum_deg: rotation_euler_sum_deg(g, &e),
            }
        })
        .collect();
    let stat = |f: fn(&FramePoseError) -> f64| Stats::of(&frames.iter().map(f).collect::<Vec<_>>());
    Ok(PoseErrorReport {
        matched: frames.len(),
        alignment,
        translation_l1_mm: stat(|e| e.translation_l1_mm),
        translation_l2_mm: stat(|e| e.translation_l2_mm),
        rotation_geodesic_deg: stat(|e| e.rotation_geodesic_deg),
        rotation_euler_sum_deg: stat(|e| e.rotation_euler_sum_deg),
        frames,
    })
}

/// Parses `frame_id tx ty tz qw qx qy qz` lines. Blank lines and `#`
/// comments are skipped; quaternions are normalized.
pub fn parse_estimates(text: &str, file: &str) -> Result<PoseTrack, EvalError> {
    let mut out = PoseTrack::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Parse {
            file: file.to_string(),
            line: i + 1,
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", fields.len())));
        }
        let frame: u64 = fields[0].parse().map_err(|_| err(format!("bad frame id `{}`", fields[0])))?;
        let mut v = [0.0f64; 7];
        for (slot, s) in v.iter_mut().zip(&fields[1..]) {
            *slot = s.parse().map_err(|_| err(format!("bad number `{s}`")))?;
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(err("non-finite value".into()));
        }
        if v[3..].iter().map(|x| x * x).sum::<f64>() < 1e-12 {
            return Err(err("zero quaternion".into()));
        }
        if out.insert(frame, Pose::from_array(v)).is_some() {
            return Err(err(format!("duplicate frame {frame}")));
        }
    }
    Ok(out)
}

pub fn format_estimates(track: &PoseTrack) -> String {
    let mut s = String::new();
    for (k, p) in track {
        let a = p.to_array();
        s.push_str(&format!(
            "{k} {:?} {:?} {:?} {:?} {:?} {:?} {:?}\n",
            a[0], a[1], a[2], a[3], a[4], a[5], a[6]
        ));
    }
    s
}

pub fn load_estimates(path: &Path) -> Result<PoseTrack, EvalError> {
    let text = fs::read_to_string(path).map_err(|e| EvalError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    parse_estimates(&text, &path.display().to_string())
}

/// Name under which the left and right stereo cameras can be tracked.
pub const LEFT_CAMERA: &str = "left_camera";
pub const RIGHT_CAMERA: &str = "right_camera";

/// Every per-frame pose in a recording: tracked objects from the pose topic
/// (render rate, or physics rate matched to frames by tick) and both stereo
/// cameras from the camera-info topic.
pub fn frame_poses(path: &Path) -> Result<BTreeMap<String, PoseTrack>, EvalError> {
    let msgs = read_topics(path, &[Topic::Pose, Topic::CameraInfo])?;
    let mut tick_to_frame = BTreeMap::new();
    for m in msgs.iter().filter(|m| m.topic == Topic::CameraInfo) {
        if let (Some(f), Some(t)) = (m.header_u64("frame"), m.header_u64("tick")) {
            tick_to_frame.insert(t, f);
        }
    }
    let mut out: BTreeMap<String, PoseTrack> = BTreeMap::new();
    let frame_of = |m: &TopicMessage| {
        m.header_u64("frame")
            .or_else(|| m.header_u64("tick").and_then(|t| tick_to_frame.get(&t).copied()))
    };
    for m in &msgs {
        let Some(frame) = frame_of(m) else { continue };
        let (name, pose) = match m.topic {
            Topic::Pose => match m.header_str("object") {
                Some(n) => (n, decode_pose(&m.payload)?),
                None => continue,
            },
            _ => {
                let side = m.header_str("camera").unwrap_or_default();
                let name = if side == "right" { RIGHT_CAMERA } else { LEFT_CAMERA };
                (name.to_string(), decode_camera_info(&m.payload)?.pose)
            }
        };
        out.entry(name).or_default().insert(frame, pose);
    }
    Ok(out)
}

/// Ground-truth track of `object`, optionally expressed in the frame of
/// `relative_to`.
pub fn ground_truth(path: &Path, object: &str, relative_to: Option<&str>) -> Result<PoseTrack, EvalError> {
    let mut all = frame_poses(path)?;
    let track = all.remove(object).ok_or_else(|| EvalError::MissingObject(object.into()))?;
    let Some(r) = relative_to else { return Ok(track) };
    let reference = if r == object {
        track.clone()
    } else {
        all.remove(r).ok_or_else(|| EvalError::MissingObject(r.into()))?
    };
    Ok(track
        .into_iter()
        .filter_map(|(k, p)| reference.get(&k).map(|r| (k, r.inverse().compose(&p))))
        .collect())
}

/// Depth map in meters; non-finite or non-positive values mean no depth.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), (width * height) as usize, "depth buffer size");
        Self { width, height, data }
    }

    pub fn valid(&self, i: usize) -> bool {
        let d = self.data[i];
        d.is_finite() && d > 0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DepthErrorReport {
    /// Mean absolute difference over pixels valid in both, millimeters;
    /// `None` when no pixel is.
    pub mean_abs_mm: Option<f64>,
    /// Fraction of all pixels valid in both.
    pub coverage: f64,
    pub pixels: usize,
}

pub fn depth_error(a: &DepthImage, b: &DepthImage) -> Result<DepthErrorReport, EvalError> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(EvalError::ResolutionMismatch {
            a: (a.width, a.height),
            b: (b.width, b.height),
        });
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..a.data.len() {
        if a.valid(i) && b.valid(i) {
            sum += (a.data[i] as f64 - b.data[i] as f64).abs();
            n += 1;
        }
    }
    let total = a.data.len().max(1);
    Ok(DepthErrorReport {
        mean_abs_mm: (n > 0).then(|| sum / n as f64 * 1e3),
        coverage: n as f64 / total as f64,
        pixels: n,
    })
}

/// Left depth images of a recording, by frame.
pub fn recorded_depth(path: &Path) -> Result<BTreeMap<u64, DepthImage>, EvalError> {
    let mut out = BTreeMap::new();
    for m in read_topics(path, &[Topic::Depth])? {
        let (Some(f), Some(w), Some(h)) = (m.header_u64("frame"), m.header_u64("width"), m.header_u64("height")) else {
            continue;
        };
        out.insert(f, DepthImage::new(w as u32, h as u32, decode_depth(&m.payload)));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DepthSeriesReport {
    pub matched: usize,
    pub mean_abs_mm: Stats,
    pub coverage: Stats,
    pub frames: Vec<(u64, DepthErrorReport)>,
}

impl fmt::Display for DepthSeriesReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "matched frames: {}", self.matched)?;
        writeln!(f, "depth error (mm): {}", self.mean_abs_mm)?;
        writeln!(f, "depth coverage: {}", self.coverage)
    }
}

/// Per-frame depth error over frames present in both series. Frames with
/// no overlapping valid pixels count toward coverage only.
pub fn depth_series_error(
    gt: &BTreeMap<u64, DepthImage>,
    est: &BTreeMap<u64, DepthImage>,
) -> Result<DepthSeriesReport, EvalError> {
    let mut frames = Vec::new();
    for (k, g) in gt {
        if let Some(e) = est.get(k) {
            frames.push((*k, depth_error(g, e)?));
        }
    }
    if frames.is_empty() {
        return Err(EvalError::NoMatchedFrames);
    }
    let means: Vec<f64> = frames.iter().filter_map(|(_, r)| r.mean_abs_mm).collect();
    let cov: Vec<f64> = frames.iter().map(|(_, r)| r.coverage).collect();
    Ok(DepthSeriesReport {
        matched: frames.len(),
        mean_abs_mm: Stats::of(&means),
        coverage: Stats::of(&cov),
        frames,
    })
}

fn pfm_err(path: &Path, message: impl Into<String>) -> EvalError {
    EvalError::Io {
        path: path.to_path_buf(),
        message: message.into(),
    }
}

/// Writes a single-channel little-endian PFM (rows stored bottom to top).
pub fn write_pfm(path: &Path, img: &DepthImage) -> Result<(), EvalError> {
    let mut out = format!("Pf\n{} {}\n-1.0\n", img.width, img.height).into_bytes();
    let w = img.width as usize;
    for row in img.data.chunks_exact(w.max(1)).rev() {
        for v in row {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| pfm_err(path, e.to_string()))
}

pub fn read_pfm(path: &Path) -> Result<DepthImage, EvalError> {
    let bytes = fs::read(path).map_err(|e| pfm_err(path, e.to_string()))?;
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(pfm_err(path, "truncated PFM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    match tokens[0].as_str() {
        "Pf" => {}
        "PF" => return Err(pfm_err(path, "color PFM is not a depth map")),
        _ => return Err(pfm_err(path, "not a PFM file")),
    }
    let parse = |s: &str| s.parse::<u32>().map_err(|_| pfm_err(path, format!("bad PFM size `{s}`")));
    let (w, h) = (parse(&tokens[1])?, parse(&tokens[2])?);
    let scale: f64 = tokens[3].parse().map_err(|_| pfm_err(path, "bad PFM scale"))?;
    let n = (w as usize) * (h as usize);
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != 4 * n {
        return Err(pfm_err(path, format!("PFM data is {} bytes, expected {}", body.len(), 4 * n)));
    }
    let little = scale < 0.0;
    let mut data = vec![0f32; n];
    for (i, c) in body.chunks_exact(4).enumerate() {
        let b: [u8; 4] = c.try_into().unwrap();
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let (row, col) = (i / w as usize, i % w as usize);
        data[(h as usize - 1 - row) * w as usize + col] = v;
    }
    Ok(DepthImage::new(w, h, data))
}

/// Depth estimates from a recording, a directory of `<frame>.pfm` files or
/// a single PFM taken as frame `single_frame`.
pub fn load_depth_estimates(path: &Path, single_frame: u64) -> Result<BTreeMap<u64, DepthImage>, EvalError> {
    if path.is_dir() {
        let mut out = BTreeMap::new();
        let entries = fs::read_dir(path).map_err(|e| pfm_err(path, e.to_string()))?;
        for e in entries.flatten() {
            let p = e.path();
            if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pfm")) {
                if let Some(frame) = p.file_stem().and_then(|s| s.to_str()).and_then(|s| s.parse::<u64>().ok()) {
                    out.insert(frame, read_pfm(&p)?);
                }
            }
        }
        return Ok(out);
    }
    if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("pfm")) {
        return Ok(BTreeMap::from([(single_frame, read_pfm(path)?)]));
    }
    recorded_depth(path)
}

/// Translation offset applied to every pose, for synthetic estimates.
pub fn offset_track(track: &PoseTrack, offset: &Vec3) -> PoseTrack {
    track
        .iter()
        .map(|(k, p)| (*k, Pose::new(p.position + offset, p.orientation)))
        .collect()
}
