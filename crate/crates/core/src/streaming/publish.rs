//! Turning simulation output into topic messages.

use serde_json::json;

use super::*;
use crate::render::RenderedView;
use crate::scene::{ObjectKind, SceneDescription};
use crate::sim::{FrameBundle, TickRecord};

/// How often object poses are published.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PoseRate {
    /// With every published frame.
    #[default]
    Render,
    /// Every physics tick.
    Physics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PublishConfig {
    /// Publish every n-th frame bundle, starting with the first.
    pub frame_every: u64,
    pub pose_rate: PoseRate,
    /// Objects whose poses go out on the pose topic.
    pub tracked: Vec<String>,
}

impl Default for PublishConfig {
    fn default() -> Self {
        Self {
            frame_every: 1,
            pose_rate: PoseRate::Render,
            tracked: Vec::new(),
        }
    }
}

/// Frame decimation for a requested publish rate. Zero or a rate at or
/// above the frame rate publishes every frame.
pub fn frame_decimation(physics_hz: f64, render_every: u64, publish_hz: f64) -> u64 {
    let frame_hz = physics_hz / render_every.max(1) as f64;
    if !(publish_hz > 0.0) || publish_hz >= frame_hz {
        1
    } else {
        (frame_hz / publish_hz).round().max(1.0) as u64
    }
}

/// Objects tracked on the pose topic by default: everything except cameras
/// and lights.
pub fn default_tracked(scene: &SceneDescription) -> Vec<String> {
    scene
        .objects
        .values()
        .filter(|o| !matches!(o.kind, ObjectKind::Camera | ObjectKind::Light))
        .map(|o| o.name.clone())
        .collect()
}

fn image_messages(side: &str, topic: Topic, v: &RenderedView, bundle: &FrameBundle) -> TopicMessage {
    let b = &v.buffers;
    TopicMessage::new(
        topic,
        bundle.timestamp_ns,
        json!({"frame": bundle.index, "tick": bundle.tick, "camera": side, "width": b.width, "height": b.height, "encoding": "rgb8"}),
        b.color.clone(),
    )
}

/// Messages for one frame bundle, in order: both color images, left depth,
/// left segmentation, left point cloud, both camera infos, then one pose per
/// tracked object (when poses go out at render rate).
pub fn frame_messages(bundle: &FrameBundle, tracked: &[String], with_poses: bool) -> Vec<TopicMessage> {
    let ts = bundle.timestamp_ns;
    let left = &bundle.stereo.left;
    let (w, h) = (left.buffers.width, left.buffers.height);
    let mut out = vec![
        image_messages("left", Topic::ColorLeft, left, bundle),
        image_messages("right", Topic::ColorRight, &bundle.stereo.right, bundle),
        TopicMessage::new(
            Topic::Depth,
            ts,
            json!({"frame": bundle.index, "tick": bundle.tick, "camera": "left", "width": w, "height": h, "encoding": "32FC1", "unit": "m"}),
            encode_depth(&left.depth),
        ),
        TopicMessage::new(
            Topic::Seg,
            ts,
            json!({"frame": bundle.index, "tick": bundle.tick, "camera": "left", "width": w, "height": h, "encoding": "mono8"}),
            left.buffers.seg.clone(),
        ),
        TopicMessage::new(
            Topic::PointCloud,
            ts,
            json!({"frame": bundle.index, "tick": bundle.tick, "camera": "left", "count": left.cloud.points.len()}),
            encode_cloud(&left.cloud),
        ),
    ];
    for (side, pose) in [("left", &bundle.left_pose), ("right", &bundle.right_pose)] {
        out.push(TopicMessage::new(
            Topic::CameraInfo,
            ts,
            json!({"frame": bundle.index, "tick": bundle.tick, "camera": side}),
            encode_camera_info(&bundle.camera_info, pose),
        ));
    }
    if with_poses {
        for name in tracked {
            if let Some(p) = bundle.poses.get(name) {
                out.push(TopicMessage::new(
                    Topic::Pose,
                    ts,
                    json!({"frame": bundle.index, "tick": bundle.tick, "object": name}),
                    encode_pose(p),
                ));
            }
        }
    }
    out
}

/// Stateless mapping from tick records to messages.
#[derive(Clone, Debug, Default)]
pub struct Publisher {
    pub config: PublishConfig,
}

impl Publisher {
    pub fn new(config: PublishConfig) -> Self {
        Self { config }
    }

    pub fn publishes_frame(&self, index: u64) -> bool {
        (index.max(1) - 1) % self.config.frame_every.max(1) == 0
    }

    /// Force every tick, the voxel edit when there is one, per-tick poses
    /// at physics rate, then the frame messages when a published frame was
    /// rendered.
    pub fn messages(&self, rec: &TickRecord) -> Vec<TopicMessage> {
        let ts = rec.timestamp_ns;
        let mut out = vec![TopicMessage::new(
            Topic::Force,
            ts,
            json!({"tick": rec.tick}),
            encode_force(rec.tick, &rec.force, rec.contact, rec.s_max),
        )];
        if let Some(e) = &rec.edit {
            out.push(TopicMessage::new(
                Topic::VoxelEdit,
                ts,
                json!({"tick": rec.tick, "count": e.removed.len()}),
                e.encode(),
            ));
        }
        let physics_poses = self.config.pose_rate == PoseRate::Physics;
        if physics_poses {
            for name in &self.config.tracked {
                if let Some(p) = rec.poses.get(name) {
                    out.push(TopicMessage::new(
                        Topic::Pose,
                        ts,
                        json!({"tick": rec.tick, "object": name}),
                        encode_pose(p),
                    ));
                }
            }
        }
        if let Some(f) = rec.frame.as_deref().filter(|f| self.publishes_frame(f.index)) {
            out.extend(frame_messages(f, &self.config.tracked, !physics_poses));
        }
        out
    }
}
