//! Finger-proxy collision for the drill and the tip/shaft resolution step.
//!
//! Each tool cursor is a proxy/goal sphere pair. The goal follows the input
//! pose rigidly; the proxy chases it but stops on the occupied voxel set
//! (inflated by the cursor radius) and slides along the surface. The error
//! `δp = proxy − goal` points out of the surface, so the spring force
//! `F = k·δp` pushes the user back.

use crate::pose::{Pose, Vec3};
use crate::render::Primitive;
use crate::volume::{VoxelEdit, VoxelVolume};

/// Penetration tolerance for proxy placement, meters.
pub const CONTACT_TOLERANCE: f64 = 1e-7;
const SLIDE_ITERATIONS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CursorRole {
    Tip,
    Shaft,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToolCursor {
    pub role: CursorRole,
    pub radius: f64,
    /// Position in the drill frame (the tip sits at the origin).
    pub offset: Vec3,
    pub proxy: Vec3,
    pub goal: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DrillConfig {
    pub tip_radius: f64,
    pub shaft_radius: f64,
    pub shaft_length: f64,
    pub shaft_cursors: usize,
    pub stiffness: f64,
    pub max_force: f64,
    pub epsilon: f64,
}

impl Default for DrillConfig {
    fn default() -> Self {
        Self {
            tip_radius: 0.002,
            shaft_radius: 0.001,
            shaft_length: 0.03,
            shaft_cursors: 5,
            stiffness: 500.0,
            max_force: 5.0,
            epsilon: 1e-6,
        }
    }
}

impl DrillConfig {
    /// Cursor offsets in the drill frame: the tip at the origin, then the
    /// shaft cursors evenly spaced along +z up to `shaft_length`.
    pub fn cursor_offsets(&self) -> Vec<(CursorRole, f64, Vec3)> {
        let mut v = vec![(CursorRole::Tip, self.tip_radius, Vec3::zeros())];
        for i in 0..self.shaft_cursors {
            let z = self.shaft_length * (i + 1) as f64 / self.shaft_cursors as f64;
            v.push((CursorRole::Shaft, self.shaft_radius, Vec3::new(0.0, 0.0, z)));
        }
        v
    }

    /// Render primitives for a drill at `pose`: burr sphere plus shaft capsule.
    pub fn primitives(&self, pose: &Pose) -> Vec<Primitive> {
        vec![
            Primitive::Sphere {
                center: pose.position,
                radius: self.tip_radius,
            },
            Primitive::Capsule {
                a: pose.transform_point(&Vec3::new(0.0, 0.0, self.tip_radius)),
                b: pose.transform_point(&Vec3::new(0.0, 0.0, self.shaft_length)),
                radius: self.shaft_radius,
            },
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrillState {
    pub config: DrillConfig,
    /// Resolved drill pose.
    pub pose: Pose,
    /// Tip first, then shaft cursors.
    pub cursors: Vec<ToolCursor>,
    pub force: Vec3,
    pub drilling_enabled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyResult {
    /// `proxy − goal` per cursor.
    pub errors: Vec<Vec3>,
    pub e_max: Vec3,
    pub s_max: usize,
    /// Some cursor touched the surface during this update.
    pub contact: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DrillOutput {
    pub pose: Pose,
    pub force: Vec3,
    pub edit: Option<VoxelEdit>,
}

impl DrillState {
    /// All proxies start on their goals.
    pub fn new(config: DrillConfig, pose: Pose) -> Self {
        let cursors = config
            .cursor_offsets()
            .into_iter()
            .map(|(role, radius, offset)| {
                let p = pose.transform_point(&offset);
                ToolCursor {
                    role,
                    radius,
                    offset,
                    proxy: p,
                    goal: p,
                }
            })
            .collect();
        Self {
            config,
            pose,
            cursors,
            force: Vec3::zeros(),
            drilling_enabled: false,
        }
    }

    pub fn tip(&self) -> &ToolCursor {
        &self.cursors[0]
    }
}

/// Linear spring with magnitude clamp.
pub fn control_law(e: &Vec3, k: f64, max_force: f64) -> Vec3 {
    let f = e * k;
    let n = f.norm();
    if n > max_force {
        f * (max_force / n)
    } else {
        f
    }
}

fn blocked(v: &VoxelVolume, c: &Vec3, r: f64) -> bool {
    v.closest_occupied(c, r)
        .is_some_and(|h| h.distance < r - CONTACT_TOLERANCE)
}

/// Moves a free sphere from `from` toward `to`, stopping at first contact.
/// Returns the reached center and, on contact, the closest surface point.
fn sweep(v: &VoxelVolume, from: Vec3, to: Vec3, r: f64) -> (Vec3, Option<Vec3>) {
    let delta = to - from;
    let len = delta.norm();
    if len == 0.0 {
        return (from, None);
    }
    let h = 0.25 * v.min_spacing().min(r);
    let steps = (len / h).ceil().max(1.0) as usize;
    let mut free = from;
    for s in 1..=steps {
        let cand = if s == steps { to } else { from + delta * (s as f64 / steps as f64) };
        if blocked(v, &cand, r) {
            let (mut a, mut b) = (free, cand);
            while (b - a).norm() > CONTACT_TOLERANCE / 2.0 {
                let m = (a + b) / 2.0;
                if blocked(v, &m, r) {
                    b = m;
                } else {
                    a = m;
                }
            }
            let touch = v
                .closest_occupied(&a, r + 2.0 * CONTACT_TOLERANCE)
                .map(|c| c.point);
            return (a, touch.or(Some(b)));
        }
        free = cand;
    }
    (to, None)
}

/// Advances one proxy toward its goal with up to three sliding attempts.
/// Returns the new proxy position and whether contact occurred.
pub fn move_proxy(v: &VoxelVolume, proxy: Vec3, goal: Vec3, r: f64) -> (Vec3, bool) {
    if blocked(v, &proxy, r) {
        // already embedded (e.g. spawned inside tissue): follow the goal
        return (goal, true);
    }
    let mut p = proxy;
    let mut target = goal;
    let mut contact = false;
    for _ in 0..SLIDE_ITERATIONS {
        let (reached, touch) = sweep(v, p, target, r);
        p = reached;
        let Some(q) = touch else { break };
        contact = true;
        let geometric = (p - q).try_normalize(1e-15).unwrap_or((proxy - goal).normalize());
        let n = v.gradient_normal(&q, geometric);
        let rem = target - p;
        let into = rem.dot(&n);
        if into >= 0.0 {
            break;
        }
        let slide = rem - n * into;
        if slide.norm() < CONTACT_TOLERANCE {
            break;
        }
        target = p + slide;
    }
    (p, contact)
}

/// Index of the largest error norm; the lowest index wins ties.
pub fn argmax_error(errors: &[Vec3]) -> usize {
    let mut best = 0;
    for (i, e) in errors.iter().enumerate() {
        if e.norm() > errors[best].norm() {
            best = i;
        }
    }
    best
}

/// Recomputes every goal from the input pose and moves every proxy.
pub fn update_proxies(input: &Pose, v: &VoxelVolume, state: &mut DrillState) -> ProxyResult {
    let mut errors = Vec::with_capacity(state.cursors.len());
    let mut contact = false;
    for c in state.cursors.iter_mut() {
        c.goal = input.transform_point(&c.offset);
        let (p, hit) = move_proxy(v, c.proxy, c.goal, c.radius);
        c.proxy = p;
        contact |= hit;
        errors.push(c.proxy - c.goal);
    }
    let s_max = argmax_error(&errors);
    ProxyResult {
        e_max: errors[s_max],
        s_max,
        contact,
        errors,
    }
}

/// Chooses the drill pose and force; only the tip branch may drill.
pub fn resolve_drill(
    state: &mut DrillState,
    input: &Pose,
    pr: &ProxyResult,
    v: &mut VoxelVolume,
    tick: u64,
) -> DrillOutput {
    let cfg = state.config;
    let out = if pr.e_max.norm() > cfg.epsilon && pr.s_max != 0 {
        let s = &state.cursors[pr.s_max];
        let position = s.proxy - input.rotate(&s.offset);
        DrillOutput {
            pose: Pose::new(position, input.orientation),
            force: control_law(&pr.e_max, cfg.stiffness, cfg.max_force),
            edit: None,
        }
    } else {
        let tip = state.cursors[0];
        let edit = state
            .drilling_enabled
            .then(|| v.remove_colliding_voxels(&tip.goal, tip.radius, tick));
        DrillOutput {
            pose: Pose::new(tip.proxy, input.orientation),
            force: control_law(&pr.errors[0], cfg.stiffness, cfg.max_force),
            edit,
        }
    };
    state.pose = out.pose;
    state.force = out.force;
    out
}

/// One haptic tick: proxies, then resolution.
pub fn step(state: &mut DrillState, input: &Pose, v: &mut VoxelVolume, tick: u64) -> (ProxyResult, DrillOutput) {
    let pr = update_proxies(input, v, state);
    let out = resolve_drill(state, input, &pr, v, tick);
    (pr, out)
}
