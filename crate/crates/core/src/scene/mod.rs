//! Modular scene description: a launch file names one world file, one
//! input-devices file and any number of model files. Files are parsed
//! independently, then merged; parent links are resolved only after every
//! file is loaded, so a parent may live in a different file than its child.

mod docs;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use thiserror::Error;

use crate::camera::Frustum;
use crate::haptics::DrillConfig;
use crate::plugin::{self, Params, ScopeKind};
use crate::pose::{Pose, Vec3};
use crate::volume::{format_hex_color, parse_hex_color, LabelEntry, SliceFormat, VolumeSource};

pub use docs::*;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SceneError {
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("{}: key `{key}` declared more than once", .file.display())]
    DuplicateKey { file: PathBuf, key: String },
    #[error("{}:{line}:{column}: {message}", .file.display())]
    MalformedDocument {
        file: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{}: missing required field `{field}`", .file.display())]
    MissingRequiredField { file: PathBuf, field: String },
    #[error("{}: {message}", .file.display())]
    InvalidValue { file: PathBuf, message: String },
    #[error("object `{child}` names parent `{parent}`, which does not exist")]
    UnresolvedParent { child: String, parent: String },
    #[error("cyclic parent chain: {}", .0.join(" -> "))]
    CyclicParent(Vec<String>),
    #[error("object name `{0}` is declared more than once")]
    DuplicateObjectName(String),
    #[error("model name `{0}` is declared more than once")]
    DuplicateModelName(String),
    #[error("unknown plugin `{0}`")]
    UnknownPlugin(String),
    #[error("{}: {message}", .file.display())]
    Io { file: PathBuf, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Severity {
    Warning,
    Error,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub severity: Severity,
    pub object: Option<String>,
    pub message: String,
}

impl Diagnostic {
    pub fn error(object: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Error,
            object: object.map(str::to_string),
            message: message.into(),
        }
    }
    pub fn warning(object: Option<&str>, message: impl Into<String>) -> Self {
        Self {
            severity: Severity::Warning,
            object: object.map(str::to_string),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Warning => "warning",
            Severity::Error => "error",
        };
        match &self.object {
            Some(o) => write!(f, "{sev}: {o}: {}", self.message),
            None => write!(f, "{sev}: {}", self.message),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PluginSpec {
    pub name: String,
    pub scope: ScopeKind,
    pub target: Option<String>,
    pub params: Params,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum StyleScope {
    World,
    Model,
    Object,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderStyleSpec {
    pub scope: StyleScope,
    pub style_name: String,
    /// Model name for model scope, object name for object scope.
    pub target: Option<String>,
    pub params: Params,
}

/// The style an object is rendered with after precedence resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct EffectiveStyle {
    pub style_name: String,
    /// Scope the style came from; `None` for the built-in default.
    pub scope: Option<StyleScope>,
    pub params: Params,
}

impl EffectiveStyle {
    pub fn default_style() -> Self {
        Self {
            style_name: "default".into(),
            scope: None,
            params: Params::new(),
        }
    }

    /// Segmentation id from the `label` parameter.
    pub fn label(&self) -> Option<u8> {
        self.params.get("label").and_then(|v| v.as_u64()).and_then(|v| u8::try_from(v).ok())
    }

    pub fn color(&self) -> Option<[u8; 3]> {
        self.params.get("color").and_then(|v| v.as_str()).and_then(parse_hex_color)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LaunchFile {
    pub dir: PathBuf,
    pub world_path: PathBuf,
    pub input_devices_path: PathBuf,
    pub model_paths: Vec<PathBuf>,
    pub plugins: Vec<PluginSpec>,
    pub warnings: Vec<Diagnostic>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObjectKind {
    Camera,
    Light,
    RigidBody,
    Volume,
    Sensor,
    Actuator,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraSpec {
    pub near: f64,
    pub far: f64,
    pub fva: f64,
    pub width: u32,
    pub height: u32,
    pub baseline: f64,
}

impl CameraSpec {
    pub fn frustum(&self) -> Result<Frustum, crate::camera::CameraError> {
        Frustum::new(self.near, self.far, self.fva, self.width, self.height)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrillShape {
    pub tip_radius: f64,
    pub shaft_radius: f64,
    pub shaft_length: f64,
    pub shaft_cursors: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    Sphere { radius: f64 },
    /// Along the body's +z axis from its origin.
    Capsule { radius: f64, length: f64 },
    Drill(DrillShape),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BodySpec {
    pub shape: Shape,
    pub stiffness: Option<f64>,
    pub max_force: Option<f64>,
}

impl BodySpec {
    /// Haptic configuration for a drill-shaped body.
    pub fn drill_config(&self) -> Option<DrillConfig> {
        let Shape::Drill(d) = self.shape else { return None };
        let base = DrillConfig::default();
        Some(DrillConfig {
            tip_radius: d.tip_radius,
            shaft_radius: d.shaft_radius,
            shaft_length: d.shaft_length,
            shaft_cursors: d.shaft_cursors as usize,
            stiffness: self.stiffness.unwrap_or(base.stiffness),
            max_force: self.max_force.unwrap_or(base.max_force),
            epsilon: base.epsilon,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ObjectPayload {
    Camera(CameraSpec),
    Light { direction: Vec3 },
    Body(BodySpec),
    Volume(VolumeSource),
    Generic(Params),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectSpec {
    pub name: String,
    pub kind: ObjectKind,
    pub parent: Option<String>,
    /// Relative to the parent, or to the world without one.
    pub pose: Pose,
    /// Owning model; world objects have none.
    pub model: Option<String>,
    pub payload: ObjectPayload,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointSpec {
    pub name: String,
    pub parent: String,
    pub child: String,
    pub kind: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    /// Member objects in declaration order.
    pub objects: Vec<String>,
    pub joints: Vec<JointSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputDeviceSpec {
    pub name: String,
    pub channel: String,
    pub controls: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDescription {
    pub objects: BTreeMap<String, ObjectSpec>,
    pub parent_edges: BTreeMap<String, String>,
    pub models: BTreeMap<String, ModelSpec>,
    pub plugins: Vec<PluginSpec>,
    /// Every declared style with explicit scope and target, in load order.
    pub declared_styles: Vec<RenderStyleSpec>,
    pub styles: BTreeMap<String, EffectiveStyle>,
    pub gravity: Vec3,
    pub input_devices: Vec<InputDeviceSpec>,
    pub warnings: Vec<Diagnostic>,
}

impl SceneDescription {
    /// World pose of an object, composing the parent chain.
    pub fn world_pose(&self, name: &str) -> Option<Pose> {
        let mut pose = self.objects.get(name)?.pose;
        let mut cur = name;
        let mut guard = 0;
        while let Some(p) = self.parent_edges.get(cur) {
            pose = self.objects.get(p)?.pose.compose(&pose);
            cur = p;
            guard += 1;
            if guard > self.objects.len() {
                return None;
            }
        }
        Some(pose)
    }

    pub fn objects_of_kind(&self, kind: ObjectKind) -> impl Iterator<Item = &ObjectSpec> {
        self.objects.values().filter(move |o| o.kind == kind)
    }

    /// The first camera in name order, unless one is called `main_camera`.
    pub fn main_camera(&self) -> Option<(&ObjectSpec, &CameraSpec)> {
        let pick = self
            .objects
            .get("main_camera")
            .filter(|o| o.kind == ObjectKind::Camera)
            .or_else(|| self.objects_of_kind(ObjectKind::Camera).next())?;
        match &pick.payload {
            ObjectPayload::Camera(c) => Some((pick, c)),
            _ => None,
        }
    }

    pub fn drill(&self) -> Option<(&ObjectSpec, &BodySpec)> {
        self.objects.values().find_map(|o| match &o.payload {
            ObjectPayload::Body(b) if matches!(b.shape, Shape::Drill(_)) => Some((o, b)),
            _ => None,
        })
    }

    pub fn volumes(&self) -> impl Iterator<Item = (&ObjectSpec, &VolumeSource)> {
        self.objects.values().filter_map(|o| match &o.payload {
            ObjectPayload::Volume(v) => Some((o, v)),
            _ => None,
        })
    }

    pub fn style_of(&self, name: &str) -> EffectiveStyle {
        self.styles.get(name).cloned().unwrap_or_else(EffectiveStyle::default_style)
    }
}

fn read_text(path: &Path) -> Result<String, SceneError> {
    if !path.is_file() {
        return Err(SceneError::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| SceneError::Io {
        file: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Top-level keys (unindented `key:` lines) that appear more than once.
fn duplicate_top_level_key(text: &str) -> Option<String> {
    let mut seen = BTreeSet::new();
    for line in text.lines() {
        if line.starts_with([' ', '\t', '#', '-']) {
            continue;
        }
        if let Some((k, _)) = line.split_once(':') {
            let k = k.trim().trim_matches(['"', '\'']);
            if !k.is_empty() && !seen.insert(k.to_string()) {
                return Some(k.to_string());
            }
        }
    }
    None
}

fn parse_doc<T: DeserializeOwned>(text: &str, file: &Path) -> Result<T, SceneError> {
    if let Some(key) = duplicate_top_level_key(text) {
        return Err(SceneError::DuplicateKey {
            file: file.to_path_buf(),
            key,
        });
    }
    serde_yaml::from_str(text).map_err(|e| {
        let msg = e.to_string();
        for (marker, close) in [("duplicate field `", '`'), ("duplicate entry with key \"", '"')] {
            if let Some(rest) = msg.split(marker).nth(1) {
                return SceneError::DuplicateKey {
                    file: file.to_path_buf(),
                    key: rest.split(close).next().unwrap_or_default().to_string(),
                };
            }
        }
        if let Some(rest) = msg.strip_prefix("missing field `") {
            return SceneError::MissingRequiredField {
                file: file.to_path_buf(),
                field: rest.split('`').next().unwrap_or_default().to_string(),
            };
        }
        let (line, column) = e.location().map(|l| (l.line(), l.column())).unwrap_or((0, 0));
        SceneError::MalformedDocument {
            file: file.to_path_buf(),
            line,
            column,
            message: msg,
        }
    })
}

fn parse_file<T: DeserializeOwned>(path: &Path) -> Result<T, SceneError> {
    parse_doc(&read_text(path)?, path)
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

/// Collects unknown keys as warnings.
struct Warn<'a> {
    out: &'a mut Vec<Diagnostic>,
}

impl Warn<'_> {
    fn extra(&mut self, object: Option<&str>, context: &str, extra: &Extra) {
        for k in extra.keys() {
            self.out.push(Diagnostic::warning(
                object,
                format!("unknown key `{k}` in {context} ignored"),
            ));
        }
    }

    fn pose(&mut self, object: Option<&str>, p: &PoseDoc) {
        self.extra(object, "pose", &p.extra);
        if let Some(v) = &p.position {
            self.extra(object, "pose.position", &v.extra);
        }
        if let Some(q) = &p.orientation {
            self.extra(object, "pose.orientation", &q.extra);
        }
        if let Some(r) = &p.rpy {
            self.extra(object, "pose.rpy", &r.extra);
        }
        if p.orientation.is_some() && p.rpy.is_some() {
            self.out.push(Diagnostic::warning(
                object,
                "both orientation and rpy given; using the quaternion",
            ));
        }
    }
}

fn vec3(d: &Vec3Doc) -> Vec3 {
    Vec3::new(d.x, d.y, d.z)
}

fn vec3_doc(v: &Vec3) -> Vec3Doc {
    Vec3Doc {
        x: v.x,
        y: v.y,
        z: v.z,
        extra: Extra::new(),
    }
}

pub(crate) fn pose_from_doc(d: &PoseDoc, file: &Path) -> Result<Pose, SceneError> {
    let position = d.position.as_ref().map(vec3).unwrap_or_else(Vec3::zeros);
    let pose = match (&d.orientation, &d.rpy) {
        (Some(q), _) => {
            let n = (q.w * q.w + q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
            if !(n > 1e-12 && n.is_finite()) {
                return Err(SceneError::InvalidValue {
                    file: file.to_path_buf(),
                    message: "orientation quaternion has zero or non-finite norm".into(),
                });
            }
            Pose::from_wxyz(position, q.w, q.x, q.y, q.z)
        }
        (None, Some(r)) => Pose::from_euler_xyz(position, r.r, r.p, r.y),
        (None, None) => Pose::from_translation(position),
    };
    if !pose.is_finite() {
        return Err(SceneError::InvalidValue {
            file: file.to_path_buf(),
            message: "pose is not finite".into(),
        });
    }
    Ok(pose)
}

pub(crate) fn pose_doc(p: &Pose) -> PoseDoc {
    let q = p.orientation.quaternion();
    PoseDoc {
        position: Some(vec3_doc(&p.position)),
        orientation: Some(QuatDoc {
            w: q.w,
            x: q.i,
            y: q.j,
            z: q.k,
            extra: Extra::new(),
        }),
        rpy: None,
        extra: Extra::new(),
    }
}

fn plugin_from_doc(d: &PluginDoc, default_scope: ScopeKind, default_target: Option<&str>) -> PluginSpec {
    let scope = d.scope.unwrap_or(default_scope);
    let target = d.target.clone().or_else(|| match scope {
        ScopeKind::Object | ScopeKind::Model => default_target.map(str::to_string),
        _ => None,
    });
    PluginSpec {
        name: d.name.clone(),
        scope,
        target,
        params: d.params.clone(),
    }
}

fn plugin_doc(p: &PluginSpec) -> PluginDoc {
    PluginDoc {
        name: p.name.clone(),
        scope: Some(p.scope),
        target: p.target.clone(),
        params: p.params.clone(),
        extra: Extra::new(),
    }
}

fn style_scope(k: ScopeKind, file: &Path) -> Result<StyleScope, SceneError> {
    match k {
        ScopeKind::World => Ok(StyleScope::World),
        ScopeKind::Model => Ok(StyleScope::Model),
        ScopeKind::Object => Ok(StyleScope::Object),
        ScopeKind::Simulator => Err(SceneError::InvalidValue {
            file: file.to_path_buf(),
            message: "render styles cannot have simulator scope".into(),
        }),
    }
}

fn style_from_doc(
    d: &StyleDoc,
    default_scope: StyleScope,
    default_target: Option<&str>,
    file: &Path,
) -> Result<RenderStyleSpec, SceneError> {
    let scope = match d.scope {
        Some(k) => style_scope(k, file)?,
        // a targeted style without an explicit scope applies to one object
        None if d.target.is_some() && default_scope != StyleScope::Object => StyleScope::Object,
        None => default_scope,
    };
    let target = match scope {
        StyleScope::World => None,
        StyleScope::Model if d.target.is_none() && default_scope == StyleScope::Model => {
            default_target.map(str::to_string)
        }
        _ => d.target.clone().or_else(|| default_target.map(str::to_string)),
    };
    Ok(RenderStyleSpec {
        scope,
        style_name: d.style.clone(),
        target,
        params: d.params.clone(),
    })
}

fn style_doc(s: &RenderStyleSpec) -> StyleDoc {
    StyleDoc {
        style: s.style_name.clone(),
        scope: Some(match s.scope {
            StyleScope::World => ScopeKind::World,
            StyleScope::Model => ScopeKind::Model,
            StyleScope::Object => ScopeKind::Object,
        }),
        target: s.target.clone(),
        params: s.params.clone(),
        extra: Extra::new(),
    }
}

fn invalid(file: &Path, message: impl Into<String>) -> SceneError {
    SceneError::InvalidValue {
        file: file.to_path_buf(),
        message: message.into(),
    }
}

/// Converts a descriptor whose relative paths are anchored at `dir`.
pub fn volume_source_from_doc(d: &SourceDoc, dir: &Path, w: &mut Vec<Diagnostic>, object: Option<&str>) -> Result<VolumeSource, SceneError> {
    let file = dir;
    let mut warn = Warn { out: w };
    warn.extra(object, "volume source", &d.extra);
    warn.extra(object, "volume source spacing", &d.spacing.extra);
    let format = match d.format.to_ascii_lowercase().as_str() {
        "png" => SliceFormat::Png,
        "jpeg" | "jpg" => SliceFormat::Jpeg,
        other => return Err(invalid(file, format!("unsupported slice format `{other}`"))),
    };
    if d.count < 0 {
        return Err(invalid(file, format!("slice count {} is negative", d.count)));
    }
    let mut label_map = BTreeMap::new();
    for (hex, l) in &d.label_map {
        warn.extra(object, "label_map entry", &l.extra);
        let c = parse_hex_color(hex).ok_or_else(|| invalid(file, format!("bad color `{hex}`")))?;
        label_map.insert(c, LabelEntry { id: l.id, name: l.name.clone() });
    }
    let origin = match &d.origin {
        Some(p) => {
            warn.pose(object, p);
            pose_from_doc(p, file)?
        }
        None => Pose::identity(),
    };
    let full = dir.join(&d.prefix);
    let (base_dir, prefix) = if d.prefix.is_empty() || d.prefix.ends_with('/') {
        (full, String::new())
    } else {
        (
            full.parent().map(Path::to_path_buf).unwrap_or_else(|| dir.to_path_buf()),
            full.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        )
    };
    Ok(VolumeSource {
        base_dir: absolute(&base_dir),
        prefix,
        count: d.count as usize,
        format,
        spacing: vec3(&d.spacing),
        origin,
        label_map,
    })
}

/// Descriptor document for a source. Paths are written relative to `dir`
/// when the slices live under it, absolute otherwise.
pub fn volume_source_doc(s: &VolumeSource, dir: Option<&Path>) -> SourceDoc {
    let base = absolute(&s.base_dir);
    let rel = dir.and_then(|d| base.strip_prefix(absolute(d)).ok().map(Path::to_path_buf));
    let prefix = match rel {
        Some(r) if r.as_os_str().is_empty() => s.prefix.clone(),
        Some(r) => format!("{}/{}", r.to_string_lossy(), s.prefix),
        None => {
            let mut p = base.to_string_lossy().into_owned();
            if !p.ends_with('/') {
                p.push('/');
            }
            p + &s.prefix
        }
    };
    SourceDoc {
        prefix,
        count: s.count as i64,
        format: s.format.extension().to_string(),
        spacing: vec3_doc(&s.spacing),
        origin: Some(pose_doc(&s.origin)),
        label_map: s
            .label_map
            .iter()
            .map(|(c, e)| {
                (
                    format_hex_color(*c),
                    LabelDoc {
                        id: e.id,
                        name: e.name.clone(),
                        extra: Extra::new(),
                    },
                )
            })
            .collect(),
        extra: Extra::new(),
    }
}

pub fn parse_volume_descriptor(path: &Path) -> Result<VolumeSource, SceneError> {
    let doc: SourceDoc = parse_file(path)?;
    let dir = absolute(path.parent().unwrap_or(Path::new(".")));
    volume_source_from_doc(&doc, &dir, &mut Vec::new(), None)
}

pub fn write_volume_descriptor(path: &Path, s: &VolumeSource) -> Result<(), SceneError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    write_yaml(path, &volume_source_doc(s, Some(dir)))
}

fn write_yaml<T: serde::Serialize>(path: &Path, v: &T) -> Result<(), SceneError> {
    let text = serde_yaml::to_string(v).map_err(|e| invalid(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| SceneError::Io {
        file: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn parse_launch(path: &Path) -> Result<LaunchFile, SceneError> {
    let doc: LaunchDoc = parse_file(path)?;
    let dir = absolute(path.parent().unwrap_or(Path::new(".")));
    let mut warnings = Vec::new();
    let mut warn = Warn { out: &mut warnings };
    warn.extra(None, "launch file", &doc.extra);
    for p in &doc.plugins {
        warn.extra(None, &format!("plugin `{}`", p.name), &p.extra);
    }
    let world = doc.world.ok_or_else(|| SceneError::MissingRequiredField {
        file: path.to_path_buf(),
        field: "world".into(),
    })?;
    let input = doc.input_devices.ok_or_else(|| SceneError::MissingRequiredField {
        file: path.to_path_buf(),
        field: "input_devices".into(),
    })?;
    Ok(LaunchFile {
        world_path: dir.join(world),
        input_devices_path: dir.join(input),
        model_paths: doc.models.iter().map(|m| dir.join(m)).collect(),
        plugins: doc
            .plugins
            .iter()
            .map(|p| plugin_from_doc(p, ScopeKind::Simulator, None))
            .collect(),
        dir,
        warnings,
    })
}

struct Collector {
    objects: BTreeMap<String, ObjectSpec>,
    plugins: Vec<PluginSpec>,
    styles: Vec<RenderStyleSpec>,
    warnings: Vec<Diagnostic>,
}

impl Collector {
    fn add(&mut self, spec: ObjectSpec) -> Result<(), SceneError> {
        if self.objects.contains_key(&spec.name) {
            return Err(SceneError::DuplicateObjectName(spec.name));
        }
        self.objects.insert(spec.name.clone(), spec);
        Ok(())
    }

    fn inline(&mut self, name: &str, style: &Option<StyleDoc>, plugins: &[PluginDoc], file: &Path) -> Result<(), SceneError> {
        if let Some(s) = style {
            Warn { out: &mut self.warnings }.extra(Some(name), "style", &s.extra);
            let mut spec = style_from_doc(s, StyleScope::Object, Some(name), file)?;
            spec.scope = StyleScope::Object;
            spec.target = Some(name.to_string());
            self.styles.push(spec);
        }
        for p in plugins {
            Warn { out: &mut self.warnings }.extra(Some(name), &format!("plugin `{}`", p.name), &p.extra);
            self.plugins.push(plugin_from_doc(p, ScopeKind::Object, Some(name)));
        }
        Ok(())
    }
}

fn shape_from_doc(d: &ShapeDoc, file: &Path, name: &str) -> Result<Shape, SceneError> {
    let need = |v: Option<f64>, key: &str| {
        v.ok_or_else(|| invalid(file, format!("body `{name}`: shape `{}` needs `{key}`", d.kind)))
    };
    match d.kind.as_str() {
        "sphere" => Ok(Shape::Sphere { radius: need(d.radius, "radius")? }),
        "capsule" => Ok(Shape::Capsule {
            radius: need(d.radius, "radius")?,
            length: need(d.length, "length")?,
        }),
        "drill" => {
            let base = DrillConfig::default();
            Ok(Shape::Drill(DrillShape {
                tip_radius: d.tip_radius.unwrap_or(base.tip_radius),
                shaft_radius: d.shaft_radius.unwrap_or(base.shaft_radius),
                shaft_length: d.shaft_length.unwrap_or(base.shaft_length),
                shaft_cursors: d.shaft_cursors.unwrap_or(base.shaft_cursors as u32),
            }))
        }
        other => Err(invalid(file, format!("body `{name}`: unknown shape type `{other}`"))),
    }
}

fn shape_doc(s: &Shape) -> ShapeDoc {
    let mut d = ShapeDoc {
        kind: String::new(),
        radius: None,
        length: None,
        tip_radius: None,
        shaft_radius: None,
        shaft_length: None,
        shaft_cursors: None,
        extra: Extra::new(),
    };
    match *s {
        Shape::Sphere { radius } => {
            d.kind = "sphere".into();
            d.radius = Some(radius);
        }
        Shape::Capsule { radius, length } => {
            d.kind = "capsule".into();
            d.radius = Some(radius);
            d.length = Some(length);
        }
        Shape::Drill(x) => {
            d.kind = "drill".into();
            d.tip_radius = Some(x.tip_radius);
            d.shaft_radius = Some(x.shaft_radius);
            d.shaft_length = Some(x.shaft_length);
            d.shaft_cursors = Some(x.shaft_cursors);
        }
    }
    d
}

fn load_model(path: &Path, c: &mut Collector) -> Result<ModelSpec, SceneError> {
    let doc: ModelDoc = parse_file(path)?;
    let dir = absolute(path.parent().unwrap_or(Path::new(".")));
    let model = doc.name.clone();
    let ctx = format!("model `{model}`");
    Warn { out: &mut c.warnings }.extra(None, &ctx, &doc.extra);
    let mut members = Vec::new();

    for b in &doc.bodies {
        let mut w = Warn { out: &mut c.warnings };
        w.extra(Some(&b.name), "body", &b.extra);
        w.pose(Some(&b.name), &b.pose);
        w.extra(Some(&b.name), "shape", &b.shape.extra);
        if let Some(h) = &b.haptics {
            w.extra(Some(&b.name), "haptics", &h.extra);
        }
        let spec = ObjectSpec {
            name: b.name.clone(),
            kind: ObjectKind::RigidBody,
            parent: b.parent.clone(),
            pose: pose_from_doc(&b.pose, path)?,
            model: Some(model.clone()),
            payload: ObjectPayload::Body(BodySpec {
                shape: shape_from_doc(&b.shape, path, &b.name)?,
                stiffness: b.haptics.as_ref().and_then(|h| h.stiffness),
                max_force: b.haptics.as_ref().and_then(|h| h.max_force),
            }),
        };
        c.add(spec)?;
        c.inline(&b.name, &b.style, &b.plugins, path)?;
        members.push(b.name.clone());
    }
    for v in &doc.volumes {
        let mut w = Warn { out: &mut c.warnings };
        w.extra(Some(&v.name), "volume", &v.extra);
        w.pose(Some(&v.name), &v.pose);
        let source = match &v.source {
            SourceRef::Inline(s) => volume_source_from_doc(s, &dir, &mut c.warnings, Some(&v.name))?,
            SourceRef::Path(p) => {
                let p = dir.join(p);
                let doc: SourceDoc = parse_file(&p)?;
                let pdir = absolute(p.parent().unwrap_or(Path::new(".")));
                volume_source_from_doc(&doc, &pdir, &mut c.warnings, Some(&v.name))?
            }
        };
        c.add(ObjectSpec {
            name: v.name.clone(),
            kind: ObjectKind::Volume,
            parent: v.parent.clone(),
            pose: pose_from_doc(&v.pose, path)?,
            model: Some(model.clone()),
            payload: ObjectPayload::Volume(source),
        })?;
        c.inline(&v.name, &v.style, &v.plugins, path)?;
        members.push(v.name.clone());
    }
    for (list, kind) in [(&doc.sensors, ObjectKind::Sensor), (&doc.actuators, ObjectKind::Actuator)] {
        for g in list {
            let mut w = Warn { out: &mut c.warnings };
            w.extra(Some(&g.name), "object", &g.extra);
            w.pose(Some(&g.name), &g.pose);
            c.add(ObjectSpec {
                name: g.name.clone(),
                kind,
                parent: g.parent.clone(),
                pose: pose_from_doc(&g.pose, path)?,
                model: Some(model.clone()),
                payload: ObjectPayload::Generic(g.params.clone()),
            })?;
            c.inline(&g.name, &g.style, &g.plugins, path)?;
            members.push(g.name.clone());
        }
    }
    for s in &doc.styles {
        Warn { out: &mut c.warnings }.extra(None, &format!("{ctx} style"), &s.extra);
        c.styles.push(style_from_doc(s, StyleScope::Model, Some(&model), path)?);
    }
    for p in &doc.plugins {
        Warn { out: &mut c.warnings }.extra(None, &format!("{ctx} plugin `{}`", p.name), &p.extra);
        c.plugins.push(plugin_from_doc(p, ScopeKind::Model, Some(&model)));
    }
    let joints = doc
        .joints
        .iter()
        .map(|j| {
            Warn { out: &mut c.warnings }.extra(None, &format!("joint `{}`", j.name), &j.extra);
            JointSpec {
                name: j.name.clone(),
                parent: j.parent.clone(),
                child: j.child.clone(),
                kind: j.kind.clone(),
            }
        })
        .collect();
    Ok(ModelSpec {
        name: model,
        objects: members,
        joints,
    })
}

/// Walks parent edges and reports the first cycle found.
fn find_cycle(edges: &BTreeMap<String, String>) -> Option<Vec<String>> {
    for start in edges.keys() {
        let mut path = vec![start.clone()];
        let mut cur = start;
        while let Some(p) = edges.get(cur) {
            if let Some(i) = path.iter().position(|x| x == p) {
                let mut cycle = path[i..].to_vec();
                cycle.push(p.clone());
                return Some(cycle);
            }
            path.push(p.clone());
            cur = p;
        }
    }
    None
}

/// Effective style per object: object scope, then model, then world, then
/// the default style. Later declarations at the same scope win.
pub fn resolve_styles(
    objects: &BTreeMap<String, ObjectSpec>,
    declared: &[RenderStyleSpec],
) -> BTreeMap<String, EffectiveStyle> {
    let mut out = BTreeMap::new();
    for (name, o) in objects {
        let pick = |scope: StyleScope, target: Option<&str>| {
            declared
                .iter()
                .rev()
                .find(|s| s.scope == scope && (scope == StyleScope::World || s.target.as_deref() == target))
        };
        let chosen = pick(StyleScope::Object, Some(name))
            .or_else(|| o.model.as_deref().and_then(|m| pick(StyleScope::Model, Some(m))))
            .or_else(|| pick(StyleScope::World, None));
        out.insert(
            name.clone(),
            match chosen {
                Some(s) => EffectiveStyle {
                    style_name: s.style_name.clone(),
                    scope: Some(s.scope),
                    params: s.params.clone(),
                },
                None => EffectiveStyle::default_style(),
            },
        );
    }
    out
}

pub fn load_scene(launch: &LaunchFile) -> Result<SceneDescription, SceneError> {
    let mut c = Collector {
        objects: BTreeMap::new(),
        plugins: launch.plugins.clone(),
        styles: Vec::new(),
        warnings: launch.warnings.clone(),
    };

    let world: WorldDoc = parse_file(&launch.world_path)?;
    Warn { out: &mut c.warnings }.extra(None, "world file", &world.extra);
    let gravity = match &world.gravity {
        Some(g) => {
            Warn { out: &mut c.warnings }.extra(None, "gravity", &g.extra);
            vec3(g)
        }
        None => Vec3::new(0.0, 0.0, -9.81),
    };
    let wpath = &launch.world_path;
    for cam in &world.cameras {
        let mut w = Warn { out: &mut c.warnings };
        w.extra(Some(&cam.name), "camera", &cam.extra);
        w.pose(Some(&cam.name), &cam.pose);
        c.add(ObjectSpec {
            name: cam.name.clone(),
            kind: ObjectKind::Camera,
            parent: cam.parent.clone(),
            pose: pose_from_doc(&cam.pose, wpath)?,
            model: None,
            payload: ObjectPayload::Camera(CameraSpec {
                near: cam.near,
                far: cam.far,
                fva: cam.fva,
                width: cam.width,
                height: cam.height,
                baseline: cam.stereo_baseline,
            }),
        })?;
        c.inline(&cam.name, &cam.style, &cam.plugins, wpath)?;
    }
    for l in &world.lights {
        let mut w = Warn { out: &mut c.warnings };
        w.extra(Some(&l.name), "light", &l.extra);
        w.pose(Some(&l.name), &l.pose);
        let pose = pose_from_doc(&l.pose, wpath)?;
        let direction = match &l.direction {
            Some(d) => vec3(d),
            None => pose.rotate(&-Vec3::z()),
        };
        c.add(ObjectSpec {
            name: l.name.clone(),
            kind: ObjectKind::Light,
            parent: l.parent.clone(),
            pose,
            model: None,
            payload: ObjectPayload::Light { direction },
        })?;
        c.inline(&l.name, &l.style, &l.plugins, wpath)?;
    }
    let mut world_styles = Vec::new();
    for s in &world.styles {
        Warn { out: &mut c.warnings }.extra(None, "world style", &s.extra);
        world_styles.push(style_from_doc(s, StyleScope::World, None, wpath)?);
    }
    let mut world_plugins = Vec::new();
    for p in &world.plugins {
        Warn { out: &mut c.warnings }.extra(None, &format!("world plugin `{}`", p.name), &p.extra);
        world_plugins.push(plugin_from_doc(p, ScopeKind::World, None));
    }
    // world-file styles and plugins come before model-declared ones
    let inline_styles = std::mem::take(&mut c.styles);
    c.styles = world_styles.into_iter().chain(inline_styles).collect();
    let inline_plugins = std::mem::take(&mut c.plugins);
    c.plugins = inline_plugins.into_iter().chain(world_plugins).collect();

    let input: InputDevicesDoc = parse_file(&launch.input_devices_path)?;
    Warn { out: &mut c.warnings }.extra(None, "input devices file", &input.extra);
    let input_devices = input
        .devices
        .iter()
        .map(|d| {
            Warn { out: &mut c.warnings }.extra(Some(&d.name), "input device", &d.extra);
            InputDeviceSpec {
                name: d.name.clone(),
                channel: d.channel.clone(),
                controls: d.controls.clone(),
            }
        })
        .collect();
    for p in &input.plugins {
        c.warnings.push(Diagnostic::warning(
            None,
            format!("plugin `{}` in the input devices file is not loaded", p.name),
        ));
    }

    let mut models = BTreeMap::new();
    for path in &launch.model_paths {
        let m = load_model(path, &mut c)?;
        if models.contains_key(&m.name) {
            return Err(SceneError::DuplicateModelName(m.name));
        }
        models.insert(m.name.clone(), m);
    }

    // second phase: link parents now that every file is loaded
    let mut parent_edges = BTreeMap::new();
    for o in c.objects.values() {
        if let Some(p) = &o.parent {
            if !c.objects.contains_key(p) {
                return Err(SceneError::UnresolvedParent {
                    child: o.name.clone(),
                    parent: p.clone(),
                });
            }
            parent_edges.insert(o.name.clone(), p.clone());
        }
    }
    if let Some(cycle) = find_cycle(&parent_edges) {
        return Err(SceneError::CyclicParent(cycle));
    }
    for p in &c.plugins {
        if !plugin::is_registered(&p.name) {
            return Err(SceneError::UnknownPlugin(p.name.clone()));
        }
    }
    let styles = resolve_styles(&c.objects, &c.styles);
    Ok(SceneDescription {
        objects: c.objects,
        parent_edges,
        models,
        plugins: c.plugins,
        declared_styles: c.styles,
        styles,
        gravity,
        input_devices,
        warnings: c.warnings,
    })
}

/// Parses a launch file and everything it references.
pub fn load_scene_file(path: &Path) -> Result<SceneDescription, SceneError> {
    load_scene(&parse_launch(path)?)
}

/// Checks scene invariants; an empty list means the scene is usable.
pub fn validate_scene(scene: &SceneDescription) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    for o in scene.objects.values() {
        let name = Some(o.name.as_str());
        if let Some(p) = &o.parent {
            if !scene.objects.contains_key(p) {
                out.push(Diagnostic::error(name, format!("parent `{p}` does not exist")));
            }
        }
        match &o.payload {
            ObjectPayload::Volume(src) => {
                if src.count == 0 {
                    out.push(Diagnostic::error(name, "volume has no slices"));
                }
                if src.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
                    out.push(Diagnostic::error(name, "volume spacing must be positive"));
                }
                let mut ids = BTreeSet::new();
                for e in src.label_map.values() {
                    if e.id == 0 {
                        out.push(Diagnostic::error(name, format!("label `{}` uses reserved id 0", e.name)));
                    } else if !ids.insert(e.id) {
                        out.push(Diagnostic::error(name, format!("label id {} mapped more than once", e.id)));
                    }
                }
            }
            ObjectPayload::Camera(c) => {
                if let Err(e) = c.frustum() {
                    out.push(Diagnostic::error(name, e.to_string()));
                }
                if !(c.baseline >= 0.0) {
                    out.push(Diagnostic::error(name, "stereo baseline must be >= 0"));
                }
            }
            ObjectPayload::Body(b) => {
                let ok = match b.shape {
                    Shape::Sphere { radius } => radius > 0.0,
                    Shape::Capsule { radius, length } => radius > 0.0 && length >= 0.0,
                    Shape::Drill(d) => d.tip_radius > 0.0 && d.shaft_radius > 0.0 && d.shaft_length > 0.0,
                };
                if !ok {
                    out.push(Diagnostic::error(name, "body dimensions must be positive"));
                }
                if b.stiffness.is_some_and(|k| !(k > 0.0)) || b.max_force.is_some_and(|f| !(f > 0.0)) {
                    out.push(Diagnostic::error(name, "haptic stiffness and max_force must be positive"));
                }
                if scene.style_of(&o.name).label().is_none() {
                    out.push(Diagnostic::error(name, "no segmentation label in effective style"));
                }
            }
            _ => {}
        }
    }
    if let Some(cycle) = find_cycle(&scene.parent_edges) {
        out.push(Diagnostic::error(None, format!("cyclic parent chain: {}", cycle.join(" -> "))));
    }
    for p in &scene.plugins {
        let who = Some(p.name.as_str());
        if !plugin::is_registered(&p.name) {
            out.push(Diagnostic::error(who, "unknown plugin"));
        }
        match (p.scope, p.target.as_deref()) {
            (ScopeKind::Object | ScopeKind::Model, None | Some("")) => {
                out.push(Diagnostic::error(who, "plugin target required"));
            }
            (ScopeKind::Object, Some(t)) if !scene.objects.contains_key(t) => {
                out.push(Diagnostic::error(who, format!("plugin target `{t}` is not an object")));
            }
            (ScopeKind::Model, Some(t)) if !scene.models.contains_key(t) => {
                out.push(Diagnostic::error(who, format!("plugin target `{t}` is not a model")));
            }
            _ => {}
        }
        if let Some(native) = plugin::native_scope(&p.name) {
            if p.scope < native {
                out.push(Diagnostic::error(who, format!("plugin requires {native} scope")));
            }
        }
    }
    for s in &scene.declared_styles {
        match (s.scope, s.target.as_deref()) {
            (StyleScope::Object, Some(t)) if !scene.objects.contains_key(t) => {
                out.push(Diagnostic::error(Some(t), format!("style `{}` targets a missing object", s.style_name)));
            }
            (StyleScope::Model, Some(t)) if !scene.models.contains_key(t) => {
                out.push(Diagnostic::error(Some(t), format!("style `{}` targets a missing model", s.style_name)));
            }
            (StyleScope::Object | StyleScope::Model, None) => {
                out.push(Diagnostic::error(None, format!("style `{}` needs a target", s.style_name)));
            }
            _ => {}
        }
        if let Some(c) = s.params.get("color") {
            if c.as_str().and_then(parse_hex_color).is_none() {
                out.push(Diagnostic::error(s.target.as_deref(), format!("style `{}` has a bad color", s.style_name)));
            }
        }
    }
    for d in &scene.input_devices {
        if !matches!(d.channel.as_str(), "control_drill" | "control_camera") {
            out.push(Diagnostic::error(Some(&d.name), format!("unknown control channel `{}`", d.channel)));
        }
        if let Some(t) = &d.controls {
            if !scene.objects.contains_key(t) {
                out.push(Diagnostic::error(Some(&d.name), format!("controlled object `{t}` does not exist")));
            }
        }
    }
    out
}

/// Writes the scene as a launch file plus world, input-devices and one
/// model file per model into `dir`. Unknown keys from the original
/// documents are not preserved.
pub fn write_scene(scene: &SceneDescription, dir: &Path) -> Result<PathBuf, SceneError> {
    fs::create_dir_all(dir).map_err(|e| SceneError::Io {
        file: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut world = WorldDoc {
        gravity: Some(vec3_doc(&scene.gravity)),
        cameras: Vec::new(),
        lights: Vec::new(),
        styles: scene.declared_styles.iter().map(style_doc).collect(),
        plugins: Vec::new(),
        extra: Extra::new(),
    };
    for o in scene.objects.values().filter(|o| o.model.is_none()) {
        match &o.payload {
            ObjectPayload::Camera(c) => world.cameras.push(CameraDoc {
                name: o.name.clone(),
                parent: o.parent.clone(),
                pose: pose_doc(&o.pose),
                near: c.near,
                far: c.far,
                fva: c.fva,
                width: c.width,
                height: c.height,
                stereo_baseline: c.baseline,
                style: None,
                plugins: Vec::new(),
                extra: Extra::new(),
            }),
            ObjectPayload::Light { direction } => world.lights.push(LightDoc {
                name: o.name.clone(),
                parent: o.parent.clone(),
                pose: pose_doc(&o.pose),
                direction: Some(vec3_doc(direction)),
                style: None,
                plugins: Vec::new(),
                extra: Extra::new(),
            }),
            _ => {
                return Err(invalid(dir, format!("object `{}` must belong to a model", o.name)));
            }
        }
    }
    write_yaml(&dir.join("world.yaml"), &world)?;

    let input = InputDevicesDoc {
        devices: scene
            .input_devices
            .iter()
            .map(|d| DeviceDoc {
                name: d.name.clone(),
                channel: d.channel.clone(),
                controls: d.controls.clone(),
                extra: Extra::new(),
            })
            .collect(),
        plugins: Vec::new(),
        extra: Extra::new(),
    };
    write_yaml(&dir.join("input_devices.yaml"), &input)?;

    let mut model_files = Vec::new();
    for (i, m) in scene.models.values().enumerate() {
        let mut doc = ModelDoc {
            name: m.name.clone(),
            bodies: Vec::new(),
            volumes: Vec::new(),
            sensors: Vec::new(),
            actuators: Vec::new(),
            joints: m
                .joints
                .iter()
                .map(|j| JointDoc {
                    name: j.name.clone(),
                    parent: j.parent.clone(),
                    child: j.child.clone(),
                    kind: j.kind.clone(),
                    extra: Extra::new(),
                })
                .collect(),
            styles: Vec::new(),
            plugins: Vec::new(),
            extra: Extra::new(),
        };
        for name in &m.objects {
            let o = &scene.objects[name];
            match &o.payload {
                ObjectPayload::Body(b) => doc.bodies.push(BodyDoc {
                    name: o.name.clone(),
                    parent: o.parent.clone(),
                    pose: pose_doc(&o.pose),
                    shape: shape_doc(&b.shape),
                    haptics: (b.stiffness.is_some() || b.max_force.is_some()).then(|| HapticsDoc {
                        stiffness: b.stiffness,
                        max_force: b.max_force,
                        extra: Extra::new(),
                    }),
                    style: None,
                    plugins: Vec::new(),
                    extra: Extra::new(),
                }),
                ObjectPayload::Volume(src) => doc.volumes.push(VolumeDoc {
                    name: o.name.clone(),
                    parent: o.parent.clone(),
                    pose: pose_doc(&o.pose),
                    source: SourceRef::Inline(volume_source_doc(src, None)),
                    style: None,
                    plugins: Vec::new(),
                    extra: Extra::new(),
                }),
                ObjectPayload::Generic(params) => {
                    let g = GenericDoc {
                        name: o.name.clone(),
                        parent: o.parent.clone(),
                        pose: pose_doc(&o.pose),
                        params: params.clone(),
                        style: None,
                        plugins: Vec::new(),
                        extra: Extra::new(),
                    };
                    if o.kind == ObjectKind::Actuator {
                        doc.actuators.push(g);
                    } else {
                        doc.sensors.push(g);
                    }
                }
                _ => return Err(invalid(dir, format!("object `{}` cannot belong to a model", o.name))),
            }
        }
        let file = format!("model_{i}.yaml");
        write_yaml(&dir.join(&file), &doc)?;
        model_files.push(file);
    }

    let launch = LaunchDoc {
        world: Some("world.yaml".into()),
        input_devices: Some("input_devices.yaml".into()),
        models: model_files,
        plugins: scene.plugins.iter().map(plugin_doc).collect(),
        extra: Extra::new(),
    };
    let path = dir.join("launch.yaml");
    write_yaml(&path, &launch)?;
    Ok(path)
}
