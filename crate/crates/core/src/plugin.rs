//! Scoped plugins.
//!
//! Plugins bind to one of four nested scopes (object ⊂ model ⊂ world ⊂
//! simulator). Each scope grants a capability set that contains every
//! capability of the scopes below it. Every state access goes through a
//! [`PluginContext`] that checks the plugin's scope at call time.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::{Pose, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScopeKind {
    Object,
    Model,
    World,
    Simulator,
}

impl fmt::Display for ScopeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScopeKind::Object => "object",
            ScopeKind::Model => "model",
            ScopeKind::World => "world",
            ScopeKind::Simulator => "simulator",
        })
    }
}

/// Something a plugin may try to do.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Action {
    ReadPose(String),
    SetPose(String),
    SetGravity,
    ObserveFrames,
    RequestStop,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PluginError {
    #[error("plugin `{plugin}` ({scope} scope) may not perform {action}")]
    ScopeViolation {
        plugin: String,
        scope: ScopeKind,
        action: String,
    },
    #[error("unknown plugin `{0}`")]
    UnknownPlugin(String),
    #[error("plugin `{plugin}`: {message}")]
    Failed { plugin: String, message: String },
    #[error("plugin `{0}` needs a target")]
    MissingTarget(String),
}

/// The scope a plugin is bound to and what it may touch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScopeHandle {
    pub kind: ScopeKind,
    /// Object or model name for the two lower scopes.
    pub name: String,
    /// Objects belonging to the bound model (model scope only).
    pub members: Vec<String>,
}

impl ScopeHandle {
    pub fn allows(&self, action: &Action) -> bool {
        match self.kind {
            ScopeKind::Simulator => true,
            ScopeKind::World => !matches!(action, Action::ObserveFrames | Action::RequestStop),
            ScopeKind::Model => match action {
                Action::ReadPose(o) | Action::SetPose(o) => *o == self.name || self.members.contains(o),
                _ => false,
            },
            ScopeKind::Object => match action {
                Action::ReadPose(o) | Action::SetPose(o) => *o == self.name,
                _ => false,
            },
        }
    }
}

/// Simulation state visible to plugins.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WorldState {
    pub poses: BTreeMap<String, Pose>,
    pub gravity: Vec3,
    pub stop_requested: bool,
}

/// Per-frame facts handed to graphics callbacks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameInfo {
    pub index: u64,
    pub tick: u64,
    pub timestamp_ns: u64,
}

pub struct PluginContext<'a> {
    plugin: &'a str,
    scope: &'a ScopeHandle,
    world: &'a mut WorldState,
    pub tick: u64,
}

impl<'a> PluginContext<'a> {
    pub fn new(plugin: &'a str, scope: &'a ScopeHandle, world: &'a mut WorldState, tick: u64) -> Self {
        Self { plugin, scope, world, tick }
    }

    pub fn scope(&self) -> &ScopeHandle {
        self.scope
    }

    fn check(&self, action: Action) -> Result<(), PluginError> {
        if self.scope.allows(&action) {
            Ok(())
        } else {
            Err(PluginError::ScopeViolation {
                plugin: self.plugin.to_string(),
                scope: self.scope.kind,
                action: format!("{action:?}"),
            })
        }
    }

    pub fn pose(&self, object: &str) -> Result<Option<Pose>, PluginError> {
        self.check(Action::ReadPose(object.to_string()))?;
        Ok(self.world.poses.get(object).copied())
    }

    pub fn set_pose(&mut self, object: &str, pose: Pose) -> Result<(), PluginError> {
        self.check(Action::SetPose(object.to_string()))?;
        self.world.poses.insert(object.to_string(), pose);
        Ok(())
    }

    pub fn set_gravity(&mut self, g: Vec3) -> Result<(), PluginError> {
        self.check(Action::SetGravity)?;
        self.world.gravity = g;
        Ok(())
    }

    pub fn gravity(&self) -> Vec3 {
        self.world.gravity
    }

    pub fn observe_frames(&self) -> Result<(), PluginError> {
        self.check(Action::ObserveFrames)
    }

    pub fn request_stop(&mut self) -> Result<(), PluginError> {
        self.check(Action::RequestStop)?;
        self.world.stop_requested = true;
        Ok(())
    }
}

/// Lifecycle callbacks. Physics callbacks always receive the fixed step.
pub trait Plugin: Send {
    fn on_init(&mut self, _ctx: &mut PluginContext) -> Result<(), PluginError> {
        Ok(())
    }
    fn on_physics_update(&mut self, _ctx: &mut PluginContext, _dt: f64) -> Result<(), PluginError> {
        Ok(())
    }
    fn on_graphics_update(&mut self, _ctx: &mut PluginContext, _frame: &FrameInfo, _dt: f64) -> Result<(), PluginError> {
        Ok(())
    }
    fn on_shutdown(&mut self, _ctx: &mut PluginContext) {}
    /// Short machine-readable status, e.g. counters.
    fn summary(&self) -> String {
        String::new()
    }
}

pub type Params = BTreeMap<String, serde_yaml::Value>;

type Factory = fn(&Params) -> Result<Box<dyn Plugin>, String>;

struct Entry {
    name: &'static str,
    scope: ScopeKind,
    factory: Factory,
}

const REGISTRY: &[Entry] = &[
    Entry { name: "data_recorder", scope: ScopeKind::Simulator, factory: DataRecorder::create },
    Entry { name: "gravity", scope: ScopeKind::World, factory: GravityControl::create },
    Entry { name: "object_animator", scope: ScopeKind::Object, factory: ObjectAnimator::create },
];

pub fn is_registered(name: &str) -> bool {
    REGISTRY.iter().any(|e| e.name == name)
}

pub fn registered_names() -> Vec<&'static str> {
    REGISTRY.iter().map(|e| e.name).collect()
}

/// Scope the plugin was written for; binding it at a lower scope fails.
pub fn native_scope(name: &str) -> Option<ScopeKind> {
    REGISTRY.iter().find(|e| e.name == name).map(|e| e.scope)
}

pub fn instantiate(name: &str, params: &Params) -> Result<Box<dyn Plugin>, PluginError> {
    let e = REGISTRY
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| PluginError::UnknownPlugin(name.to_string()))?;
    (e.factory)(params).map_err(|message| PluginError::Failed {
        plugin: name.to_string(),
        message,
    })
}

fn param_f64(p: &Params, key: &str) -> Result<Option<f64>, String> {
    match p.get(key) {
        None => Ok(None),
        Some(v) => v.as_f64().map(Some).ok_or_else(|| format!("`{key}` must be a number")),
    }
}

fn param_vec3(p: &Params, key: &str) -> Result<Option<Vec3>, String> {
    let Some(v) = p.get(key) else { return Ok(None) };
    let get = |k: &str| v.get(k).and_then(|x| x.as_f64()).ok_or_else(|| format!("`{key}.{k}` must be a number"));
    Ok(Some(Vec3::new(get("x")?, get("y")?, get("z")?)))
}

/// Simulator scope: counts ticks and observed frames.
#[derive(Default)]
pub struct DataRecorder {
    pub ticks: u64,
    pub frames: u64,
    pub last_timestamp_ns: u64,
}

impl DataRecorder {
    fn create(_: &Params) -> Result<Box<dyn Plugin>, String> {
        Ok(Box::new(DataRecorder::default()))
    }
}

impl Plugin for DataRecorder {
    fn on_physics_update(&mut self, _ctx: &mut PluginContext, _dt: f64) -> Result<(), PluginError> {
        self.ticks += 1;
        Ok(())
    }
    fn on_graphics_update(&mut self, ctx: &mut PluginContext, frame: &FrameInfo, _dt: f64) -> Result<(), PluginError> {
        ctx.observe_frames()?;
        self.frames += 1;
        self.last_timestamp_ns = frame.timestamp_ns;
        Ok(())
    }
    fn summary(&self) -> String {
        format!("ticks={} frames={}", self.ticks, self.frames)
    }
}

/// World scope: sets or disables gravity at init.
pub struct GravityControl {
    gravity: Option<Vec3>,
    enabled: bool,
}

impl GravityControl {
    fn create(p: &Params) -> Result<Box<dyn Plugin>, String> {
        let enabled = match p.get("enabled") {
            None => true,
            Some(v) => v.as_bool().ok_or("`enabled` must be a boolean")?,
        };
        Ok(Box::new(GravityControl {
            gravity: param_vec3(p, "gravity")?,
            enabled,
        }))
    }
}

impl Plugin for GravityControl {
    fn on_init(&mut self, ctx: &mut PluginContext) -> Result<(), PluginError> {
        let g = if self.enabled {
            self.gravity.unwrap_or(ctx.gravity())
        } else {
            Vec3::zeros()
        };
        ctx.set_gravity(g)
    }
    fn summary(&self) -> String {
        format!("enabled={}", self.enabled)
    }
}

/// Object scope: translates an object at constant velocity. `object`
/// defaults to the plugin's own target.
pub struct ObjectAnimator {
    object: Option<String>,
    velocity: Vec3,
    angular_velocity: Vec3,
}

impl ObjectAnimator {
    fn create(p: &Params) -> Result<Box<dyn Plugin>, String> {
        let object = match p.get("object") {
            None => None,
            Some(v) => Some(v.as_str().ok_or("`object` must be a string")?.to_string()),
        };
        let speed = param_f64(p, "speed")?;
        let velocity = param_vec3(p, "velocity")?
            .or(speed.map(|s| Vec3::new(s, 0.0, 0.0)))
            .unwrap_or_else(Vec3::zeros);
        Ok(Box::new(ObjectAnimator {
            object,
            velocity,
            angular_velocity: param_vec3(p, "angular_velocity")?.unwrap_or_else(Vec3::zeros),
        }))
    }
}

impl Plugin for ObjectAnimator {
    fn on_physics_update(&mut self, ctx: &mut PluginContext, dt: f64) -> Result<(), PluginError> {
        let name = self.object.clone().unwrap_or_else(|| ctx.scope().name.clone());
        let Some(p) = ctx.pose(&name)? else { return Ok(()) };
        let rot = nalgebra::UnitQuaternion::from_scaled_axis(self.angular_velocity * dt);
        ctx.set_pose(&name, Pose::new(p.position + self.velocity * dt, rot * p.orientation))
    }
}

/// A plugin bound to its scope, with failure isolation.
pub struct BoundPlugin {
    pub name: String,
    pub scope: ScopeHandle,
    pub plugin: Box<dyn Plugin>,
    pub failure: Option<PluginError>,
}

impl BoundPlugin {
    pub fn active(&self) -> bool {
        self.failure.is_none()
    }
}

/// Instantiates a plugin at `scope`; plugins cannot be bound below their
/// native scope.
pub fn bind(name: &str, params: &Params, scope: ScopeHandle) -> Result<BoundPlugin, PluginError> {
    let native = native_scope(name).ok_or_else(|| PluginError::UnknownPlugin(name.to_string()))?;
    if scope.kind < native {
        return Err(PluginError::ScopeViolation {
            plugin: name.to_string(),
            scope: scope.kind,
            action: format!("bind (requires {native} scope)"),
        });
    }
    if matches!(scope.kind, ScopeKind::Object | ScopeKind::Model) && scope.name.is_empty() {
        return Err(PluginError::MissingTarget(name.to_string()));
    }
    Ok(BoundPlugin {
        name: name.to_string(),
        plugin: instantiate(name, params)?,
        scope,
        failure: None,
    })
}
