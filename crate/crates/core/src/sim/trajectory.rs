//! Scripted input: time-stamped camera and drill targets.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::UnitQuaternion;
use serde::{Deserialize, Serialize};

use super::{InputUpdate, SimError, Simulation};
use crate::pose::{Pose, Vec3};
use crate::render::volume_first_hit;
use crate::scene::{pose_doc, pose_from_doc, PoseDoc};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Zero-order hold of the latest sample.
    Hold,
    /// Linear position and spherical rotation interpolation.
    #[default]
    #[serde(alias = "linear+slerp")]
    Linear,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrajectorySample {
    /// Seconds from the start of the run.
    pub t: f64,
    pub camera_pose: Option<Pose>,
    pub drill_pose: Option<Pose>,
    pub drilling: Option<bool>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    samples: Vec<TrajectorySample>,
    interpolation: Interpolation,
}

/// Value of one channel at time `t`, `None` before its first sample.
fn channel_at<T: Copy>(
    samples: &[TrajectorySample],
    t: f64,
    get: impl Fn(&TrajectorySample) -> Option<T>,
    lerp: Option<&dyn Fn(&T, &T, f64) -> T>,
) -> Option<T> {
    let idx = samples.partition_point(|s| s.t <= t);
    let (ta, a) = samples[..idx].iter().rev().find_map(|s| get(s).map(|v| (s.t, v)))?;
    let Some(lerp) = lerp else { return Some(a) };
    match samples[idx..].iter().find_map(|s| get(s).map(|v| (s.t, v))) {
        Some((tb, b)) => Some(lerp(&a, &b, (t - ta) / (tb - ta))),
        None => Some(a),
    }
}

impl Trajectory {
    pub fn new(samples: Vec<TrajectorySample>, interpolation: Interpolation) -> Result<Self, SimError> {
        for w in samples.windows(2) {
            if !(w[1].t > w[0].t) {
                return Err(SimError::Trajectory(format!(
                    "sample times must strictly increase ({} then {})",
                    w[0].t, w[1].t
                )));
            }
        }
        for s in &samples {
            if !s.t.is_finite() || s.t < 0.0 {
                return Err(SimError::Trajectory(format!("bad sample time {}", s.t)));
            }
            if s.camera_pose.iter().chain(s.drill_pose.iter()).any(|p| !p.is_finite()) {
                return Err(SimError::Trajectory(format!("non-finite pose at t={}", s.t)));
            }
        }
        Ok(Self { samples, interpolation })
    }

    pub fn samples(&self) -> &[TrajectorySample] {
        &self.samples
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    /// Time of the last sample, zero when empty.
    pub fn duration(&self) -> f64 {
        self.samples.last().map_or(0.0, |s| s.t)
    }

    /// Input at time `t`. Channels without a sample at or before `t` are
    /// left unset so the simulation keeps its latched value.
    pub fn state_at(&self, t: f64) -> InputUpdate {
        let slerp = |a: &Pose, b: &Pose, u: f64| a.interpolate(b, u);
        let lerp: Option<&dyn Fn(&Pose, &Pose, f64) -> Pose> = match self.interpolation {
            Interpolation::Hold => None,
            Interpolation::Linear => Some(&slerp),
        };
        InputUpdate {
            camera_pose: channel_at(&self.samples, t, |s| s.camera_pose, lerp),
            drill_pose: channel_at(&self.samples, t, |s| s.drill_pose, lerp),
            drilling: channel_at(&self.samples, t, |s| s.drilling, None),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SampleDoc {
    t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    camera_pose: Option<PoseDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    drill_pose: Option<PoseDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    drilling_enabled: Option<bool>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryDoc {
    #[serde(default)]
    interpolation: Interpolation,
    samples: Vec<SampleDoc>,
}

pub fn parse_trajectory(text: &str) -> Result<Trajectory, SimError> {
    let doc: TrajectoryDoc = serde_yaml::from_str(text).map_err(|e| SimError::Trajectory(e.to_string()))?;
    let here = Path::new("trajectory");
    let pose = |d: &Option<PoseDoc>| -> Result<Option<Pose>, SimError> {
        d.as_ref()
            .map(|d| pose_from_doc(d, here).map_err(|e| SimError::Trajectory(e.to_string())))
            .transpose()
    };
    let samples = doc
        .samples
        .iter()
        .map(|s| {
            Ok(TrajectorySample {
                t: s.t,
                camera_pose: pose(&s.camera_pose)?,
                drill_pose: pose(&s.drill_pose)?,
                drilling: s.drilling_enabled,
            })
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    Trajectory::new(samples, doc.interpolation)
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory, SimError> {
    let text = std::fs::read_to_string(path).map_err(|e| SimError::Trajectory(format!("{}: {e}", path.display())))?;
    parse_trajectory(&text)
}

pub fn trajectory_to_yaml(t: &Trajectory) -> String {
    let doc = TrajectoryDoc {
        interpolation: t.interpolation,
        samples: t
            .samples
            .iter()
            .map(|s| SampleDoc {
                t: s.t,
                camera_pose: s.camera_pose.as_ref().map(pose_doc),
                drill_pose: s.drill_pose.as_ref().map(pose_doc),
                drilling_enabled: s.drilling,
            })
            .collect(),
    };
    serde_yaml::to_string(&doc).expect("trajectory documents always serialize")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BuiltinTrajectory {
    /// Camera orbits the anatomy, drill parked.
    MovingCamera,
    /// Camera fixed, drill plunges into the anatomy and sweeps with drilling on.
    MovingDrill,
}

impl FromStr for BuiltinTrajectory {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "moving_camera" => Ok(Self::MovingCamera),
            "moving_drill" => Ok(Self::MovingDrill),
            _ => Err(format!("unknown built-in trajectory `{s}`")),
        }
    }
}

impl fmt::Display for BuiltinTrajectory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::MovingCamera => "moving_camera",
            Self::MovingDrill => "moving_drill",
        })
    }
}

/// Total camera orbit angle of the moving-camera setting.
pub const ORBIT_ANGLE: f64 = FRAC_PI_2;
/// Lateral sweep amplitude of the moving-drill setting, meters.
pub const SWEEP_AMPLITUDE: f64 = 0.004;

/// Ticks needed to emit `frames` frames.
pub fn ticks_for_frames(frames: u64, render_every: u64) -> u64 {
    frames * render_every
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Distance along `dir` from `from` to the first occupied voxel, if any.
pub fn distance_to_surface(sim: &Simulation, from: &Vec3, dir: &Vec3) -> Option<f64> {
    let v = sim.volume()?;
    let o = v.world_to_voxel(from);
    let d = v.world_to_voxel(&(from + dir)) - o;
    volume_first_hit(v, &o, &d, 0.0, 10.0).map(|(t, _, _)| t)
}

/// One sample per frame, timed at the frame's tick, so frame 1 shows the
/// start of the path and frame `frames` its end.
pub fn builtin_trajectory(kind: BuiltinTrajectory, frames: u64, sim: &Simulation) -> Trajectory {
    let cfg = sim.config();
    let frames = frames.max(1);
    let time = |i: u64| (i * cfg.render_every) as f64 / cfg.physics_hz;
    let param = |i: u64| if frames == 1 { 0.0 } else { (i - 1) as f64 / (frames - 1) as f64 };
    let drill0 = sim.latched().drill_target;
    let mut samples = Vec::with_capacity(frames as usize);
    match kind {
        BuiltinTrajectory::MovingCamera => {
            let cam0 = sim.camera_pose();
            let c = sim.volume().map(|v| v.center_world()).unwrap_or_else(Vec3::zeros);
            for i in 1..=frames {
                let rot = UnitQuaternion::from_axis_angle(&Vec3::z_axis(), ORBIT_ANGLE * param(i));
                let pose = Pose::new(c + rot * (cam0.position - c), rot * cam0.orientation);
                samples.push(TrajectorySample {
                    t: time(i),
                    camera_pose: Some(pose),
                    drill_pose: (i == 1).then_some(drill0),
                    drilling: (i == 1).then_some(false),
                });
            }
        }
        BuiltinTrajectory::MovingDrill => {
            let down = drill0.rotate(&-Vec3::z());
            let side = drill0.rotate(&Vec3::x());
            let r = sim.drill_state().map_or(0.002, |d| d.config.tip_radius);
            let depth = match distance_to_surface(sim, &drill0.position, &down) {
                // tip center ends one diameter past first contact
                Some(t) => t + r,
                None => 0.01,
            };
            for i in 1..=frames {
                let s = param(i);
                let (plunge, lateral) = if s < 0.4 {
                    (depth * smoothstep(s / 0.4), 0.0)
                } else if s < 0.85 {
                    (depth, SWEEP_AMPLITUDE * (2.0 * PI * (s - 0.4) / 0.45).sin())
                } else {
                    (depth * (1.0 - smoothstep((s - 0.85) / 0.15)), 0.0)
                };
                let pose = Pose::new(drill0.position + down * plunge + side * lateral, drill0.orientation);
                samples.push(TrajectorySample {
                    t: time(i),
                    camera_pose: None,
                    drill_pose: Some(pose),
                    drilling: Some(true),
                });
            }
        }
    }
    Trajectory::new(samples, Interpolation::Linear).expect("built-in samples are ordered and finite")
}
