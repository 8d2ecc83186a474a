//! Software raycasting pipeline.
//!
//! Passes 1 and 2 share one traversal per pixel: the first hit along the
//! pixel ray (volume or body primitive) fills the color, packed depth,
//! segmentation and validity planes together. Pass 3 linearizes the packed
//! depth back into normalized camera coordinates and pass 4 rescales those
//! into a labeled, colored point cloud.
//!
//! Volume traversal is an exact two-level grid walk: a coarse walk over
//! occupancy bricks skips empty space and a fine walk inside non-empty
//! bricks returns the entry point of the first occupied voxel cell.

use rayon::prelude::*;
use thiserror::Error;

use crate::camera::{
    pack_depth, rescale_point, unpack_depth, CameraModel, NormalizedPoint, PackedDepth, StereoRig,
    Unprojector,
};
use crate::pose::Vec3;
use crate::volume::{VoxelVolume, BRICK};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RenderError {
    #[error("object `{0}` has no segmentation label color")]
    MissingStyle(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Sphere { center: Vec3, radius: f64 },
    Capsule { a: Vec3, b: Vec3, radius: f64 },
}

/// A rigid body drawn as a union of analytic primitives.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderBody {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub color: [u8; 3],
    /// Segmentation id; `None` means the body has no resolved style.
    pub label: Option<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Lighting {
    /// Light travels along the view ray.
    Headlight,
    /// World-space direction pointing toward the light.
    Directional(Vec3),
}

#[derive(Clone, Copy, Debug)]
pub struct RenderScene<'a> {
    pub volume: Option<&'a VoxelVolume>,
    pub bodies: &'a [RenderBody],
    pub lighting: Lighting,
    pub background: [u8; 3],
    pub ambient: f64,
}

impl<'a> RenderScene<'a> {
    pub fn new(volume: Option<&'a VoxelVolume>, bodies: &'a [RenderBody]) -> Self {
        Self {
            volume,
            bodies,
            lighting: Lighting::Headlight,
            background: [0, 0, 0],
            ambient: 0.25,
        }
    }

    /// Every body and every label that can appear in the volume must carry a
    /// segmentation color before anything is rendered.
    pub fn check_styles(&self) -> Result<(), RenderError> {
        for b in self.bodies {
            if b.label.is_none() {
                return Err(RenderError::MissingStyle(b.name.clone()));
            }
        }
        if let Some(v) = self.volume {
            let mut present = [false; 256];
            for &l in v.labels() {
                present[l as usize] = true;
            }
            for (l, &p) in present.iter().enumerate().skip(1) {
                if p && !v.label_table().contains_key(&(l as u8)) {
                    return Err(RenderError::MissingStyle(format!("volume label {l}")));
                }
            }
        }
        Ok(())
    }
}

/// First surface hit along a ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    /// Ray parameter; equals camera depth for camera pixel rays.
    pub t: f64,
    pub label: u8,
    pub color: [u8; 3],
    /// World-space outward normal.
    pub normal: Vec3,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrameBuffers {
    pub width: u32,
    pub height: u32,
    /// RGB8, row-major.
    pub color: Vec<u8>,
    pub packed_depth: Vec<PackedDepth>,
    pub seg: Vec<u8>,
    pub valid: Vec<bool>,
}

impl FrameBuffers {
    pub fn pixel_count(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CloudPoint {
    /// Camera frame, x right, y up, z forward (distance), meters.
    pub xyz: [f32; 3],
    pub rgb: [u8; 3],
    pub label: u8,
    pub pixel: (u32, u32),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<CloudPoint>,
}

/// Output of the full pipeline for one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub buffers: FrameBuffers,
    /// Linear camera depth in meters, `+inf` where nothing was hit.
    pub depth: Vec<f32>,
    pub cloud: PointCloud,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StereoFrame {
    pub left: RenderedView,
    pub right: RenderedView,
}

fn ray_sphere(o: &Vec3, d: &Vec3, c: &Vec3, r: f64, t0: f64, t1: f64) -> Option<(f64, Vec3)> {
    let oc = o - c;
    let a = d.norm_squared();
    let b = oc.dot(d);
    let cc = oc.norm_squared() - r * r;
    let disc = b * b - a * cc;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let near = (-b - sq) / a;
    let far = (-b + sq) / a;
    let t = if near >= t0 {
        near
    } else if far >= t0 {
        // ray starts inside: visible at the near clip plane
        t0
    } else {
        return None;
    };
    if t > t1 {
        return None;
    }
    let p = o + d * t;
    let n = (p - c).try_normalize(1e-15).unwrap_or(-d.normalize());
    Some((t, n))
}

fn ray_capsule(o: &Vec3, d: &Vec3, a: &Vec3, b: &Vec3, r: f64, t0: f64, t1: f64) -> Option<(f64, Vec3)> {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 < 1e-30 {
        return ray_sphere(o, d, a, r, t0, t1);
    }
    let mut best: Option<(f64, Vec3)> = None;
    let mut consider = |h: Option<(f64, Vec3)>| {
        if let Some((t, n)) = h {
            if best.is_none_or(|(bt, _)| t < bt) {
                best = Some((t, n));
            }
        }
    };
    consider(ray_sphere(o, d, a, r, t0, t1));
    consider(ray_sphere(o, d, b, r, t0, t1));
    // infinite cylinder about the segment, clipped to the segment span
    let axis = ab / len2.sqrt();
    let ao = o - a;
    let dp = d - axis * d.dot(&axis);
    let op = ao - axis * ao.dot(&axis);
    let qa = dp.norm_squared();
    if qa > 1e-30 {
        let qb = op.dot(&dp);
        let qc = op.norm_squared() - r * r;
        let disc = qb * qb - qa * qc;
        if disc >= 0.0 {
            let sq = disc.sqrt();
            let tn = (-qb - sq) / qa;
            let tf = (-qb + sq) / qa;
            let t = if tn >= t0 { Some(tn) } else if tf >= t0 { Some(t0) } else { None };
            if let Some(t) = t.filter(|&t| t <= t1) {
                let p = o + d * t;
                let s = (p - a).dot(&axis);
                if (0.0..=len2.sqrt()).contains(&s) {
                    let foot = a + axis * s;
                    let n = (p - foot).try_normalize(1e-15).unwrap_or(-d.normalize());
                    consider(Some((t, n)));
                }
            }
        }
    }
    best
}

pub fn intersect_primitive(p: &Primitive, o: &Vec3, d: &Vec3, t0: f64, t1: f64) -> Option<(f64, Vec3)> {
    match p {
        Primitive::Sphere { center, radius } => ray_sphere(o, d, center, *radius, t0, t1),
        Primitive::Capsule { a, b, radius } => ray_capsule(o, d, a, b, *radius, t0, t1),
    }
}

/// Uniform-grid walker (cells of edge `cell` in voxel units).
struct GridWalk {
    cell: [i64; 3],
    step: [i64; 3],
    t_max: [f64; 3],
    t_delta: [f64; 3],
    n: [i64; 3],
    t: f64,
    /// Axis crossed to enter the current cell.
    axis: usize,
}

impl GridWalk {
    fn new(o: &Vec3, d: &Vec3, t_start: f64, entry_axis: usize, cell_size: f64, n: [usize; 3]) -> Self {
        let p = o + d * t_start;
        let mut w = GridWalk {
            cell: [0; 3],
            step: [0; 3],
            t_max: [f64::INFINITY; 3],
            t_delta: [f64::INFINITY; 3],
            n: n.map(|v| v as i64),
            t: t_start,
            axis: entry_axis,
        };
        for a in 0..3 {
            let c = ((p[a] / cell_size).floor() as i64).clamp(0, w.n[a] - 1);
            w.cell[a] = c;
            if d[a] > 0.0 {
                w.step[a] = 1;
                w.t_max[a] = ((c + 1) as f64 * cell_size - o[a]) / d[a];
                w.t_delta[a] = cell_size / d[a];
            } else if d[a] < 0.0 {
                w.step[a] = -1;
                w.t_max[a] = (c as f64 * cell_size - o[a]) / d[a];
                w.t_delta[a] = -cell_size / d[a];
            }
        }
        w
    }

    /// Exit parameter of the current cell.
    fn t_exit(&self) -> f64 {
        self.t_max[0].min(self.t_max[1]).min(self.t_max[2])
    }

    /// Moves to the next cell; returns false when leaving the grid.
    fn advance(&mut self) -> bool {
        let mut a = 0;
        for k in 1..3 {
            if self.t_max[k] < self.t_max[a] {
                a = k;
            }
        }
        self.t = self.t_max[a];
        self.cell[a] += self.step[a];
        self.t_max[a] += self.t_delta[a];
        self.axis = a;
        self.cell[a] >= 0 && self.cell[a] < self.n[a]
    }
}

/// Slab test against the box `[0, dims]` in voxel coordinates. Returns the
/// clipped parameter interval and the axis of the entry face.
fn clip_to_grid(o: &Vec3, d: &Vec3, dims: [usize; 3], t0: f64, t1: f64) -> Option<(f64, f64, usize)> {
    let mut lo = t0;
    let mut hi = t1;
    let mut axis = 2;
    let mut best_enter = f64::NEG_INFINITY;
    for a in 0..3 {
        let max = dims[a] as f64;
        if d[a] == 0.0 {
            if o[a] < 0.0 || o[a] > max {
                return None;
            }
            continue;
        }
        let ta = (0.0 - o[a]) / d[a];
        let tb = (max - o[a]) / d[a];
        let (en, ex) = if ta < tb { (ta, tb) } else { (tb, ta) };
        if en > best_enter {
            best_enter = en;
            axis = a;
        }
        lo = lo.max(en);
        hi = hi.min(ex);
    }
    (lo <= hi).then_some((lo, hi, axis))
}

/// First occupied voxel cell along `o + t·d` (voxel coordinates) with `t`
/// in `[t0, t1]`. Returns the entry parameter, voxel index and entry axis.
pub fn volume_first_hit(v: &VoxelVolume, o: &Vec3, d: &Vec3, t0: f64, t1: f64) -> Option<(f64, [usize; 3], usize)> {
    let dims = v.dims();
    let (lo, hi, entry_axis) = clip_to_grid(o, d, dims, t0, t1)?;
    let mut bricks = GridWalk::new(o, d, lo, entry_axis, BRICK as f64, v.brick_dims());
    loop {
        let b = bricks.cell.map(|c| c as usize);
        let b_enter = bricks.t.max(lo);
        let b_exit = bricks.t_exit().min(hi);
        if b_enter > hi {
            return None;
        }
        if v.brick_occupied(b[0], b[1], b[2]) {
            let mut vox = GridWalk::new(o, d, b_enter, bricks.axis, 1.0, dims);
            loop {
                let c = vox.cell;
                let enter = vox.t.max(b_enter);
                if enter > b_exit {
                    break;
                }
                if v.is_occupied(c[0] as usize, c[1] as usize, c[2] as usize) {
                    return Some((enter, c.map(|x| x as usize), vox.axis));
                }
                if !vox.advance() {
                    break;
                }
            }
        }
        if !bricks.advance() {
            return None;
        }
    }
}

/// Nearest surface along a world-space ray within `[t0, t1]`.
pub fn trace(scene: &RenderScene, o: &Vec3, d: &Vec3, t0: f64, t1: f64) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    let mut t_limit = t1;
    for body in scene.bodies {
        for prim in &body.primitives {
            if let Some((t, n)) = intersect_primitive(prim, o, d, t0, t_limit) {
                if best.is_none_or(|h| t < h.t) {
                    t_limit = t;
                    best = Some(Hit {
                        t,
                        label: body.label.unwrap_or(0),
                        color: body.color,
                        normal: n,
                    });
                }
            }
        }
    }
    if let Some(v) = scene.volume {
        let origin = v.origin();
        let ov = v.world_to_voxel(o);
        let dv = origin.orientation.inverse_transform_vector(d).component_div(&v.spacing());
        // strict: a body at exactly the same depth wins
        let limit = if best.is_some() { t_limit.next_down() } else { t_limit };
        if let Some((t, [i, j, k], axis)) = volume_first_hit(v, &ov, &dv, t0, limit) {
            let label = v.label_at(i, j, k);
            let mut face = Vec3::zeros();
            face[axis] = -dv[axis].signum();
            let fallback = origin.rotate(&face);
            let p = o + d * t;
            best = Some(Hit {
                t,
                label,
                color: v.label_table().get(&label).map(|l| l.color).unwrap_or([255, 255, 255]),
                normal: v.gradient_normal(&p, fallback),
            });
        }
    }
    best
}

fn shade(scene: &RenderScene, hit: &Hit, d: &Vec3) -> [u8; 3] {
    let l = match scene.lighting {
        Lighting::Headlight => -d.normalize(),
        Lighting::Directional(dir) => dir.normalize(),
    };
    let lambert = hit.normal.dot(&l).max(0.0);
    let k = scene.ambient + (1.0 - scene.ambient) * lambert;
    hit.color.map(|c| (c as f64 * k).round().clamp(0.0, 255.0) as u8)
}

/// Passes 1 and 2: color, packed depth, segmentation and validity planes
/// from a single traversal per pixel, parallel over rows.
pub fn render_buffers(scene: &RenderScene, cam: &CameraModel) -> Result<FrameBuffers, RenderError> {
    scene.check_styles()?;
    let fr = &cam.frustum;
    let (w, h) = (fr.width() as usize, fr.height() as usize);
    let (near, far) = (fr.near(), fr.far());
    struct Px {
        color: [u8; 3],
        depth: PackedDepth,
        seg: u8,
        valid: bool,
    }
    let rows: Vec<Vec<Px>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let (o, d) = cam.pixel_ray_world(x as f64, y as f64);
                    match trace(scene, &o, &d, near, far) {
                        Some(hit) => Px {
                            color: shade(scene, &hit, &d),
                            depth: pack_depth(fr.window_depth(hit.t).min(1.0 - f64::EPSILON))
                                .expect("window depth of an in-frustum hit is in [0, 1)"),
                            seg: hit.label,
                            valid: true,
                        },
                        None => Px {
                            color: scene.background,
                            depth: PackedDepth([255, 255, 255, 0]),
                            seg: 0,
                            valid: false,
                        },
                    }
                })
                .collect()
        })
        .collect();
    let n = w * h;
    let mut fb = FrameBuffers {
        width: w as u32,
        height: h as u32,
        color: Vec::with_capacity(3 * n),
        packed_depth: Vec::with_capacity(n),
        seg: Vec::with_capacity(n),
        valid: Vec::with_capacity(n),
    };
    for px in rows.into_iter().flatten() {
        fb.color.extend_from_slice(&px.color);
        fb.packed_depth.push(px.depth);
        fb.seg.push(px.seg);
        fb.valid.push(px.valid);
    }
    Ok(fb)
}

/// Color pass: the shaded image and its packed depth.
pub fn render_color(scene: &RenderScene, cam: &CameraModel) -> Result<(Vec<u8>, Vec<PackedDepth>), RenderError> {
    let fb = render_buffers(scene, cam)?;
    Ok((fb.color, fb.packed_depth))
}

/// Segmentation pass: flat labels, no lighting, same visibility as color.
pub fn render_segmentation(scene: &RenderScene, cam: &CameraModel) -> Result<Vec<u8>, RenderError> {
    Ok(render_buffers(scene, cam)?.seg)
}

/// Pass 3: unpack each depth sample and unproject it to normalized camera
/// coordinates. Pixels without a hit get [`NormalizedPoint::INVALID`].
pub fn depth_linearize_pass(fb: &FrameBuffers, cam: &CameraModel) -> Vec<NormalizedPoint> {
    let un = Unprojector::new(&cam.frustum);
    let w = fb.width as usize;
    fb.packed_depth
        .par_iter()
        .zip(fb.valid.par_iter())
        .enumerate()
        .map(|(idx, (p, &valid))| {
            if !valid {
                return NormalizedPoint::INVALID;
            }
            let (x, y) = ((idx % w) as f64, (idx / w) as f64);
            un.unproject(x, y, unpack_depth(*p))
                .unwrap_or(NormalizedPoint::INVALID)
        })
        .collect()
}

/// Linear camera depth (meters) per pixel from normalized points.
pub fn linear_depth(normalized: &[NormalizedPoint], cam: &CameraModel) -> Vec<f32> {
    let fr = &cam.frustum;
    normalized
        .iter()
        .map(|np| match rescale_point(np, fr) {
            Some(p) => p.z as f32,
            None => f32::INFINITY,
        })
        .collect()
}

/// Pass 4: rescale normalized points to meters and attach color and label.
pub fn assemble_point_cloud(fb: &FrameBuffers, normalized: &[NormalizedPoint], cam: &CameraModel) -> PointCloud {
    let w = fb.width as usize;
    let points = normalized
        .iter()
        .enumerate()
        .filter(|(idx, _)| fb.valid[*idx])
        .filter_map(|(idx, np)| {
            let p = rescale_point(np, &cam.frustum)?;
            Some(CloudPoint {
                xyz: [p.x as f32, p.y as f32, p.z as f32],
                rgb: [fb.color[3 * idx], fb.color[3 * idx + 1], fb.color[3 * idx + 2]],
                label: fb.seg[idx],
                pixel: ((idx % w) as u32, (idx / w) as u32),
            })
        })
        .collect();
    PointCloud { points }
}

/// All four passes for one camera.
pub fn render_view(scene: &RenderScene, cam: &CameraModel) -> Result<RenderedView, RenderError> {
    let buffers = render_buffers(scene, cam)?;
    let normalized = depth_linearize_pass(&buffers, cam);
    let depth = linear_depth(&normalized, cam);
    let cloud = assemble_point_cloud(&buffers, &normalized, cam);
    Ok(RenderedView { buffers, depth, cloud })
}

pub fn render_stereo(scene: &RenderScene, rig: &StereoRig) -> Result<StereoFrame, RenderError> {
    Ok(StereoFrame {
        left: render_view(scene, &rig.left)?,
        right: render_view(scene, &rig.right)?,
    })
}
