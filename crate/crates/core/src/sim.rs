//! Fixed-step simulation loop.
//!
//! Every tick latches the newest control input, steps the drill haptics,
//! applies the resulting voxel edit and runs physics plugins. Every
//! `render_every` ticks the stereo pipeline runs and a [`FrameBundle`] is
//! attached to the tick's record. Nothing here reads the wall clock, so a
//! scene, an input sequence, a config and a seed fully determine the output.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::camera::{build_stereo_rig, CameraError, CameraInfo, Frustum, StereoRig};
use crate::haptics::{self, DrillState};
use crate::plugin::{self, BoundPlugin, FrameInfo, PluginContext, PluginError, ScopeHandle, ScopeKind, WorldState};
use crate::pose::{Pose, Vec3};
use crate::render::{render_stereo, Lighting, Primitive, RenderBody, RenderError, RenderScene, StereoFrame};
use crate::scene::{ObjectKind, ObjectPayload, SceneDescription, Shape};
use crate::volume::{load_volume, VolumeError, VoxelEdit, VoxelVolume};

mod trajectory;

pub use trajectory::*;

pub const DEFAULT_PHYSICS_HZ: f64 = 1000.0;
pub const DEFAULT_RENDER_EVERY: u64 = 33;
pub const DEFAULT_TREMOR: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("scene has no camera")]
    NoCamera,
    #[error("camera `{camera}`: {source}")]
    Camera {
        camera: String,
        #[source]
        source: CameraError,
    },
    #[error("volume `{object}`: {source}")]
    Volume {
        object: String,
        #[source]
        source: VolumeError,
    },
    #[error("scene has more than one volume ({0} found)")]
    MultipleVolumes(usize),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid trajectory: {0}")]
    Trajectory(String),
    #[error("input stream closed")]
    InputStreamClosed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConfig {
    pub physics_hz: f64,
    /// Render one frame every this many ticks.
    pub render_every: u64,
    /// Overrides the camera image size.
    pub size: Option<(u32, u32)>,
    /// Overrides the camera stereo baseline, meters.
    pub baseline: Option<f64>,
    pub seed: u64,
    /// Standard deviation of the hand tremor added to drill input, meters.
    pub tremor: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            physics_hz: DEFAULT_PHYSICS_HZ,
            render_every: DEFAULT_RENDER_EVERY,
            size: None,
            baseline: None,
            seed: 0,
            tremor: DEFAULT_TREMOR,
        }
    }
}

impl SimConfig {
    pub fn dt(&self) -> f64 {
        1.0 / self.physics_hz
    }

    /// Simulated time of a tick in nanoseconds.
    pub fn timestamp_ns(&self, tick: u64) -> u64 {
        (tick as f64 * 1e9 / self.physics_hz).round() as u64
    }

    fn validate(&self) -> Result<(), SimError> {
        if !(self.physics_hz > 0.0 && self.physics_hz.is_finite()) {
            return Err(SimError::Config(format!("physics rate {} must be positive", self.physics_hz)));
        }
        if self.render_every == 0 {
            return Err(SimError::Config("render_every must be at least 1".into()));
        }
        if !(self.tremor >= 0.0 && self.tremor.is_finite()) {
            return Err(SimError::Config("tremor must be >= 0".into()));
        }
        Ok(())
    }
}

/// New control input for one tick; `None` fields keep the latched value.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct InputUpdate {
    pub drill_pose: Option<Pose>,
    pub drilling: Option<bool>,
    pub camera_pose: Option<Pose>,
}

impl InputUpdate {
    pub fn is_empty(&self) -> bool {
        self.drill_pose.is_none() && self.drilling.is_none() && self.camera_pose.is_none()
    }

    /// Later fields win.
    pub fn merge(&mut self, other: &InputUpdate) {
        self.drill_pose = other.drill_pose.or(self.drill_pose);
        self.drilling = other.drilling.or(self.drilling);
        self.camera_pose = other.camera_pose.or(self.camera_pose);
    }
}

/// Input held between control messages.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatchedInput {
    pub drill_target: Pose,
    pub drilling: bool,
    pub camera_pose: Pose,
}

/// All per-frame outputs sharing one timestamp.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    /// 1-based; frame `i` is rendered at tick `i * render_every`.
    pub index: u64,
    pub tick: u64,
    pub timestamp_ns: u64,
    pub stereo: StereoFrame,
    pub camera_info: CameraInfo,
    pub left_pose: Pose,
    pub right_pose: Pose,
    /// World poses of every object.
    pub poses: BTreeMap<String, Pose>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TickRecord {
    pub tick: u64,
    pub timestamp_ns: u64,
    /// World poses of every object after this tick.
    pub poses: BTreeMap<String, Pose>,
    pub input: LatchedInput,
    pub force: Vec3,
    pub contact: bool,
    pub s_max: usize,
    pub edit: Option<VoxelEdit>,
    pub frame: Option<Box<FrameBundle>>,
    /// Plugins disabled during this tick.
    pub plugin_failures: Vec<PluginError>,
    pub stop_requested: bool,
}

struct CameraRig {
    name: String,
    frustum: Frustum,
    baseline: f64,
}

struct Drill {
    name: String,
    state: DrillState,
}

struct VolumeSlot {
    name: String,
    source_origin: Pose,
    volume: VoxelVolume,
}

pub struct Simulation {
    scene: SceneDescription,
    config: SimConfig,
    camera: CameraRig,
    drill: Option<Drill>,
    volume: Option<VolumeSlot>,
    local: BTreeMap<String, Pose>,
    order: Vec<String>,
    world: WorldState,
    plugins: Vec<BoundPlugin>,
    latched: LatchedInput,
    tick: u64,
    frames: u64,
    rng: ChaCha8Rng,
    tremor: Option<Normal<f64>>,
    lighting: Lighting,
    failures: Vec<(u64, PluginError)>,
}

/// Objects ordered so that parents come before children.
fn topo_order(scene: &SceneDescription) -> Vec<String> {
    fn visit(n: &str, scene: &SceneDescription, seen: &mut BTreeMap<String, ()>, out: &mut Vec<String>) {
        if seen.contains_key(n) {
            return;
        }
        seen.insert(n.to_string(), ());
        if let Some(p) = scene.parent_edges.get(n) {
            visit(p, scene, seen, out);
        }
        out.push(n.to_string());
    }
    let mut seen = BTreeMap::new();
    let mut out = Vec::new();
    for n in scene.objects.keys() {
        visit(n, scene, &mut seen, &mut out);
    }
    out
}

impl Simulation {
    pub fn new(scene: SceneDescription, config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let (cam_obj, cam_spec) = scene.main_camera().ok_or(SimError::NoCamera)?;
        let mut frustum = cam_spec.frustum().map_err(|source| SimError::Camera {
            camera: cam_obj.name.clone(),
            source,
        })?;
        if let Some((w, h)) = config.size {
            frustum = frustum.with_size(w, h).map_err(|source| SimError::Camera {
                camera: cam_obj.name.clone(),
                source,
            })?;
        }
        let baseline = config.baseline.unwrap_or(cam_spec.baseline);
        if !(baseline >= 0.0 && baseline.is_finite()) {
            return Err(SimError::Camera {
                camera: cam_obj.name.clone(),
                source: CameraError::NegativeBaseline(baseline),
            });
        }
        let camera = CameraRig {
            name: cam_obj.name.clone(),
            frustum,
            baseline,
        };

        let vols: Vec<_> = scene.volumes().collect();
        if vols.len() > 1 {
            return Err(SimError::MultipleVolumes(vols.len()));
        }
        let volume = match vols.first() {
            Some((obj, src)) => {
                let mut v = load_volume(src).map_err(|source| SimError::Volume {
                    object: obj.name.clone(),
                    source,
                })?;
                let wp = scene.world_pose(&obj.name).unwrap_or(obj.pose);
                v.set_origin(wp.compose(&src.origin));
                Some(VolumeSlot {
                    name: obj.name.clone(),
                    source_origin: src.origin,
                    volume: v,
                })
            }
            None => None,
        };

        let drill = scene.drill().map(|(obj, body)| {
            let cfg = body.drill_config().unwrap_or_default();
            let pose = scene.world_pose(&obj.name).unwrap_or(obj.pose);
            Drill {
                name: obj.name.clone(),
                state: DrillState::new(cfg, pose),
            }
        });

        let lighting = scene
            .objects_of_kind(ObjectKind::Light)
            .find_map(|o| match &o.payload {
                ObjectPayload::Light { direction } if direction.norm() > 0.0 => Some(Lighting::Directional(-direction)),
                _ => None,
            })
            .unwrap_or(Lighting::Headlight);

        let local = scene.objects.iter().map(|(n, o)| (n.clone(), o.pose)).collect();
        let order = topo_order(&scene);
        let camera_pose = scene.world_pose(&camera.name).unwrap_or_default();
        let latched = LatchedInput {
            drill_target: drill.as_ref().map(|d| d.state.pose).unwrap_or_default(),
            drilling: false,
            camera_pose,
        };
        let tremor = (config.tremor > 0.0).then(|| Normal::new(0.0, config.tremor).expect("finite std"));

        let mut sim = Self {
            world: WorldState {
                poses: BTreeMap::new(),
                gravity: scene.gravity,
                stop_requested: false,
            },
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            scene,
            config,
            camera,
            drill,
            volume,
            local,
            order,
            plugins: Vec::new(),
            latched,
            tick: 0,
            frames: 0,
            tremor,
            lighting,
            failures: Vec::new(),
        };
        sim.refresh_world_poses();
        sim.render_scene_bodies().iter().try_for_each(|b| {
            b.label.map(|_| ()).ok_or_else(|| RenderError::MissingStyle(b.name.clone()))
        })?;
        if let Some(v) = &sim.volume {
            RenderScene::new(Some(&v.volume), &[]).check_styles()?;
        }
        sim.bind_plugins();
        Ok(sim)
    }

    fn scope_for(&self, kind: ScopeKind, target: Option<&str>) -> ScopeHandle {
        let name = match kind {
            ScopeKind::Simulator => "simulator".to_string(),
            ScopeKind::World => "world".to_string(),
            _ => target.unwrap_or_default().to_string(),
        };
        let members = match kind {
            ScopeKind::Model => self.scene.models.get(&name).map(|m| m.objects.clone()).unwrap_or_default(),
            _ => Vec::new(),
        };
        ScopeHandle { kind, name, members }
    }

    fn bind_plugins(&mut self) {
        let specs = self.scene.plugins.clone();
        for spec in &specs {
            let scope = self.scope_for(spec.scope, spec.target.as_deref());
            match plugin::bind(&spec.name, &spec.params, scope) {
                Ok(mut bound) => {
                    let mut ctx = PluginContext::new(&bound.name, &bound.scope, &mut self.world, 0);
                    if let Err(e) = bound.plugin.on_init(&mut ctx) {
                        log::warn!("plugin `{}` disabled: {e}", bound.name);
                        self.failures.push((0, e.clone()));
                        bound.failure = Some(e);
                    }
                    self.plugins.push(bound);
                }
                Err(e) => {
                    log::warn!("plugin `{}` not loaded: {e}", spec.name);
                    self.failures.push((0, e));
                }
            }
        }
        self.absorb_plugin_pose_changes();
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn scene(&self) -> &SceneDescription {
        &self.scene
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn frames_emitted(&self) -> u64 {
        self.frames
    }

    pub fn latched(&self) -> &LatchedInput {
        &self.latched
    }

    pub fn volume(&self) -> Option<&VoxelVolume> {
        self.volume.as_ref().map(|v| &v.volume)
    }

    pub fn volume_name(&self) -> Option<&str> {
        self.volume.as_ref().map(|v| v.name.as_str())
    }

    pub fn drill_state(&self) -> Option<&DrillState> {
        self.drill.as_ref().map(|d| &d.state)
    }

    pub fn drill_name(&self) -> Option<&str> {
        self.drill.as_ref().map(|d| d.name.as_str())
    }

    pub fn camera_name(&self) -> &str {
        &self.camera.name
    }

    pub fn camera_pose(&self) -> Pose {
        self.latched.camera_pose
    }

    pub fn frustum(&self) -> &Frustum {
        &self.camera.frustum
    }

    pub fn baseline(&self) -> f64 {
        self.camera.baseline
    }

    pub fn world_poses(&self) -> &BTreeMap<String, Pose> {
        &self.world.poses
    }

    pub fn gravity(&self) -> Vec3 {
        self.world.gravity
    }

    pub fn plugins(&self) -> &[BoundPlugin] {
        &self.plugins
    }

    /// Every plugin failure so far, with the tick it happened on.
    pub fn plugin_failures(&self) -> &[(u64, PluginError)] {
        &self.failures
    }

    pub fn stop_requested(&self) -> bool {
        self.world.stop_requested
    }

    pub fn rig(&self) -> StereoRig {
        build_stereo_rig(&self.latched.camera_pose, &self.camera.frustum, self.camera.baseline)
            .expect("baseline validated at construction")
    }

    pub fn camera_info(&self) -> CameraInfo {
        CameraInfo::from_rig(&self.rig())
    }

    fn driven_pose(&self, name: &str) -> Option<Pose> {
        if name == self.camera.name {
            return Some(self.latched.camera_pose);
        }
        match &self.drill {
            Some(d) if d.name == name => Some(d.state.pose),
            _ => None,
        }
    }

    fn refresh_world_poses(&mut self) {
        for name in &self.order {
            let pose = self.driven_pose(name).unwrap_or_else(|| {
                let local = self.local[name];
                match self.scene.parent_edges.get(name).and_then(|p| self.world.poses.get(p)) {
                    Some(parent) => parent.compose(&local),
                    None => local,
                }
            });
            self.world.poses.insert(name.clone(), pose);
        }
        if let Some(v) = &mut self.volume {
            let wp = self.world.poses[&v.name];
            let origin = wp.compose(&v.source_origin);
            if *v.volume.origin() != origin {
                v.volume.set_origin(origin);
            }
        }
    }

    /// Folds pose writes made by plugins back into the local poses or the
    /// latched input, then recomputes the world poses.
    fn absorb_plugin_pose_changes(&mut self) {
        let modified = self.world.poses.clone();
        self.refresh_world_poses();
        let clean = self.world.poses.clone();
        let mut changed = false;
        for name in &self.order {
            let (Some(new), Some(old)) = (modified.get(name), clean.get(name)) else { continue };
            if new == old {
                continue;
            }
            changed = true;
            if name == &self.camera.name {
                self.latched.camera_pose = *new;
            } else if self.drill.as_ref().is_some_and(|d| &d.name == name) {
                self.latched.drill_target = *new;
            } else {
                let local = match self.scene.parent_edges.get(name).and_then(|p| clean.get(p)) {
                    Some(p) => p.inverse().compose(new),
                    None => *new,
                };
                self.local.insert(name.clone(), local);
            }
        }
        if changed {
            self.refresh_world_poses();
        }
    }

    fn apply_input(&mut self, update: &InputUpdate) {
        if let Some(p) = update.drill_pose {
            self.latched.drill_target = p;
        }
        if let Some(d) = update.drilling {
            self.latched.drilling = d;
        }
        if let Some(p) = update.camera_pose {
            self.latched.camera_pose = p;
        }
    }

    /// Bodies drawn by the renderer at their current world poses.
    pub fn render_scene_bodies(&self) -> Vec<RenderBody> {
        let mut out = Vec::new();
        for o in self.scene.objects.values() {
            let ObjectPayload::Body(body) = &o.payload else { continue };
            let pose = self.world.poses.get(&o.name).copied().unwrap_or(o.pose);
            let primitives = match body.shape {
                Shape::Sphere { radius } => vec![Primitive::Sphere {
                    center: pose.position,
                    radius,
                }],
                Shape::Capsule { radius, length } => vec![Primitive::Capsule {
                    a: pose.position,
                    b: pose.transform_point(&Vec3::new(0.0, 0.0, length)),
                    radius,
                }],
                Shape::Drill(_) => body.drill_config().unwrap_or_default().primitives(&pose),
            };
            let style = self.scene.style_of(&o.name);
            out.push(RenderBody {
                name: o.name.clone(),
                primitives,
                color: style.color().unwrap_or([180, 180, 180]),
                label: style.label(),
            });
        }
        out
    }

    fn run_plugins(&mut self, frame: Option<&FrameInfo>) -> Vec<PluginError> {
        let dt = match frame {
            Some(_) => self.config.dt() * self.config.render_every as f64,
            None => self.config.dt(),
        };
        let mut failed = Vec::new();
        for b in self.plugins.iter_mut().filter(|b| b.active()) {
            let mut ctx = PluginContext::new(&b.name, &b.scope, &mut self.world, self.tick);
            let r = match frame {
                Some(f) => b.plugin.on_graphics_update(&mut ctx, f, dt),
                None => b.plugin.on_physics_update(&mut ctx, dt),
            };
            if let Err(e) = r {
                log::warn!("plugin `{}` disabled at tick {}: {e}", b.name, self.tick);
                b.failure = Some(e.clone());
                failed.push(e);
            }
        }
        for e in &failed {
            self.failures.push((self.tick, e.clone()));
        }
        failed
    }

    fn render_frame(&mut self) -> Result<FrameBundle, SimError> {
        let bodies = self.render_scene_bodies();
        let mut rs = RenderScene::new(self.volume.as_ref().map(|v| &v.volume), &bodies);
        rs.lighting = self.lighting;
        let rig = self.rig();
        let stereo = render_stereo(&rs, &rig)?;
        Ok(FrameBundle {
            index: self.frames,
            tick: self.tick,
            timestamp_ns: self.config.timestamp_ns(self.tick),
            stereo,
            camera_info: CameraInfo::from_rig(&rig),
            left_pose: rig.left.pose,
            right_pose: rig.right.pose,
            poses: self.world.poses.clone(),
        })
    }

    /// Advances one physics tick.
    pub fn step(&mut self, update: &InputUpdate) -> Result<TickRecord, SimError> {
        self.tick += 1;
        self.apply_input(update);

        let mut force = Vec3::zeros();
        let mut contact = false;
        let mut s_max = 0;
        let mut edit = None;
        if let Some(d) = &mut self.drill {
            let mut target = self.latched.drill_target;
            if let Some(n) = &self.tremor {
                let jitter = Vec3::new(n.sample(&mut self.rng), n.sample(&mut self.rng), n.sample(&mut self.rng));
                target.position += jitter;
            }
            d.state.drilling_enabled = self.latched.drilling;
            let (pr, out) = match &mut self.volume {
                Some(v) => haptics::step(&mut d.state, &target, &mut v.volume, self.tick),
                None => {
                    let mut empty = VoxelVolume::new([1, 1, 1], Vec3::repeat(1.0), Pose::identity(), BTreeMap::new())
                        .expect("unit volume");
                    haptics::step(&mut d.state, &target, &mut empty, self.tick)
                }
            };
            force = out.force;
            contact = pr.contact;
            s_max = pr.s_max;
            edit = out.edit.filter(|e| !e.removed.is_empty());
        }
        self.refresh_world_poses();

        let mut failures = self.run_plugins(None);
        self.absorb_plugin_pose_changes();

        let mut frame = None;
        if self.tick % self.config.render_every == 0 {
            self.frames += 1;
            let bundle = self.render_frame()?;
            let info = FrameInfo {
                index: bundle.index,
                tick: bundle.tick,
                timestamp_ns: bundle.timestamp_ns,
            };
            failures.extend(self.run_plugins(Some(&info)));
            self.absorb_plugin_pose_changes();
            frame = Some(Box::new(bundle));
        }

        Ok(TickRecord {
            tick: self.tick,
            timestamp_ns: self.config.timestamp_ns(self.tick),
            poses: self.world.poses.clone(),
            input: self.latched,
            force,
            contact,
            s_max,
            edit,
            frame,
            plugin_failures: failures,
            stop_requested: self.world.stop_requested,
        })
    }

    /// Calls `on_shutdown` on every active plugin.
    pub fn shutdown(&mut self) {
        for b in self.plugins.iter_mut().filter(|b| b.active()) {
            let mut ctx = PluginContext::new(&b.name, &b.scope, &mut self.world, self.tick);
            b.plugin.on_shutdown(&mut ctx);
        }
    }

    /// Plugin summaries keyed by plugin name.
    pub fn plugin_summaries(&self) -> Vec<(String, String)> {
        self.plugins.iter().map(|b| (b.name.clone(), b.plugin.summary())).collect()
    }
}

/// Drives the simulation with a trajectory for `ticks` ticks, handing each
/// record to `sink`. Stops early when a plugin requests it.
pub fn run_trajectory<E>(
    sim: &mut Simulation,
    trajectory: &Trajectory,
    ticks: u64,
    mut sink: impl FnMut(TickRecord) -> Result<(), E>,
) -> Result<(), E>
where
    E: From<SimError>,
{
    for _ in 0..ticks {
        let t = (sim.tick() + 1) as f64 / sim.config().physics_hz;
        let rec = sim.step(&trajectory.state_at(t))?;
        let stop = rec.stop_requested;
        sink(rec)?;
        if stop {
            break;
        }
    }
    sim.shutdown();
    Ok(())
}

/// Re-derives a volume by applying recorded edits in order.
pub fn replay_edits<'a>(initial: &VoxelVolume, edits: impl IntoIterator<Item = &'a VoxelEdit>) -> VoxelVolume {
    let mut v = initial.clone();
    for e in edits {
        v.apply_edit(e);
    }
    v
}

#[cfg(test)]
mod tests;
