//! On-disk YAML document shapes. Every map carries an `extra` catch-all so
//! unknown keys can be reported as warnings instead of failing the parse.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::plugin::{Params, ScopeKind};

pub type Extra = BTreeMap<String, serde_yaml::Value>;

fn is_empty<T>(v: &[T]) -> bool {
    v.is_empty()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3Doc {
    #[serde(default)]
    pub x: f64,
    #[serde(default)]
    pub y: f64,
    #[serde(default)]
    pub z: f64,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuatDoc {
    #[serde(default = "one")]
    pub w: f64,
    #[serde(default)]
    pub x: f64,
    #[serde(default)]
    pub y: f64,
    #[serde(default)]
    pub z: f64,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RpyDoc {
    #[serde(default)]
    pub r: f64,
    #[serde(default)]
    pub p: f64,
    #[serde(default)]
    pub y: f64,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub position: Option<Vec3Doc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<QuatDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rpy: Option<RpyDoc>,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PluginDoc {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<ScopeKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: Params,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleDoc {
    pub style: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scope: Option<ScopeKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: Params,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaunchDoc {
    #[serde(default)]
    pub world: Option<String>,
    #[serde(default)]
    pub input_devices: Option<String>,
    #[serde(default)]
    pub models: Vec<String>,
    #[serde(default, skip_serializing_if = "is_empty")]
    pub plugins: Vec<PluginDoc>,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraDoc {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default)]
    pub pose: PoseDoc,
    #[serde(default = "default_near")]
    pub near: f64,
    #[serde(default = "default_far")]
    pub far: f64,
    #[serde(default = "default_fva")]
    pub fva: f64,
    #[serde(default = "default_width")]
    pub width: u32,
    #[serde(default = "default_height")]
    pub height: u32,
    #[serde(default = "default_baseline")]
    pub stereo_baseline: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<StyleDoc>,
    #[serde(default, skip_serializing_if = "is_empty")]
    pub plugins: Vec<PluginDoc>,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

pub fn default_near() -> f64 {
    0.01
}
pub fn default_far() -> f64 {
    1.0
}
pub fn default_fva() -> f64 {
    std::f64::consts::FRAC_PI_4
}
pub fn default_width() -> u32 {
    640
}
pub fn default_height() -> u32 {
    480
}
pub fn default_baseline() -> f64 {
    0.065
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightDoc {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default)]
    pub pose: PoseDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Vec3Doc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<StyleDoc>,
    #[serde(default, skip_serializing_if = "is_empty")]
    pub plugins: Vec<PluginDoc>,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gravity: Option<Vec3Doc>,
    #[serde(default)]
    pub cameras: Vec<CameraDoc>,
    #[serde(default)]
    pub lights: Vec<LightDoc>,
    #[serde(default, alias = "shaders")]
    pub styles: Vec<StyleDoc>,
    #[serde(default, skip_serializing_if = "is_empty")]
    pub plugins: Vec<PluginDoc>,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeDoc {
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tip_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shaft_radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shaft_length: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shaft_cursors: Option<u32>,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HapticsDoc {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stiffness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_force: Option<f64>,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BodyDoc {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default)]
    pub pose: PoseDoc,
    pub shape: ShapeDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub haptics: Option<HapticsDoc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<StyleDoc>,
    #[serde(default, skip_serializing_if = "is_empty")]
    pub plugins: Vec<PluginDoc>,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelDoc {
    pub id: u8,
    pub name: String,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SourceDoc {
    pub prefix: String,
    pub count: i64,
    pub format: String,
    pub spacing: Vec3Doc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<PoseDoc>,
    #[serde(default)]
    pub label_map: BTreeMap<String, LabelDoc>,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SourceRef {
    Path(String),
    Inline(SourceDoc),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeDoc {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default)]
    pub pose: PoseDoc,
    pub source: SourceRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<StyleDoc>,
    #[serde(default, skip_serializing_if = "is_empty")]
    pub plugins: Vec<PluginDoc>,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenericDoc {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    #[serde(default)]
    pub pose: PoseDoc,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: Params,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<StyleDoc>,
    #[serde(default, skip_serializing_if = "is_empty")]
    pub plugins: Vec<PluginDoc>,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointDoc {
    pub name: String,
    pub parent: String,
    pub child: String,
    #[serde(rename = "type", default = "default_joint")]
    pub kind: String,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

fn default_joint() -> String {
    "fixed".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDoc {
    pub name: String,
    #[serde(default, skip_serializing_if = "is_empty")]
    pub bodies: Vec<BodyDoc>,
    #[serde(default, skip_serializing_if = "is_empty")]
    pub volumes: Vec<VolumeDoc>,
    #[serde(default, skip_serializing_if = "is_empty")]
    pub sensors: Vec<GenericDoc>,
    #[serde(default, skip_serializing_if = "is_empty")]
    pub actuators: Vec<GenericDoc>,
    #[serde(default, skip_serializing_if = "is_empty")]
    pub joints: Vec<JointDoc>,
    #[serde(default, alias = "shaders", skip_serializing_if = "is_empty")]
    pub styles: Vec<StyleDoc>,
    #[serde(default, skip_serializing_if = "is_empty")]
    pub plugins: Vec<PluginDoc>,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceDoc {
    pub name: String,
    pub channel: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controls: Option<String>,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InputDevicesDoc {
    #[serde(default)]
    pub devices: Vec<DeviceDoc>,
    #[serde(default, skip_serializing_if = "is_empty")]
    pub plugins: Vec<PluginDoc>,
    #[serde(flatten, skip_serializing)]
    pub extra: Extra,
}
