//! The drillable patient model: a dense labeled voxel grid.
//!
//! Voxel `(i, j, k)` covers the continuous voxel-coordinate cell
//! `[i, i+1) × [j, j+1) × [k, k+1)`; continuous coordinates scale by the
//! per-axis spacing into the volume frame, and `origin` places the volume
//! frame (the corner of voxel `(0, 0, 0)`) in the world. Storage is flat,
//! x fastest.

mod edit;
pub mod nrrd;
mod source;

use std::collections::BTreeMap;

pub use edit::{EditDecodeError, RemovedVoxel, VoxelEdit};
pub use source::{format_hex_color, load_volume, parse_hex_color, LabelEntry, SliceFormat, VolumeError, VolumeSource};

use crate::pose::{Pose, Vec3};

/// Edge length of the occupancy bricks used for empty-space skipping.
pub const BRICK: usize = 8;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelInfo {
    pub name: String,
    pub color: [u8; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub occupied: bool,
    pub label: u8,
}

/// Result of a closest-occupied-voxel query around a sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Contact {
    /// Closest point of the occupied set, world frame.
    pub point: Vec3,
    /// Distance from the query center to `point`.
    pub distance: f64,
}

#[derive(Clone, Debug)]
pub struct VoxelVolume {
    dims: [usize; 3],
    spacing: Vec3,
    origin: Pose,
    intensity: Vec<u8>,
    label: Vec<u8>,
    label_table: BTreeMap<u8, LabelInfo>,
    brick_dims: [usize; 3],
    brick_counts: Vec<u16>,
    occupied: usize,
}

impl PartialEq for VoxelVolume {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.spacing == other.spacing
            && self.origin == other.origin
            && self.intensity == other.intensity
            && self.label == other.label
            && self.label_table == other.label_table
    }
}

impl VoxelVolume {
    /// An all-empty volume.
    pub fn new(
        dims: [usize; 3],
        spacing: Vec3,
        origin: Pose,
        label_table: BTreeMap<u8, LabelInfo>,
    ) -> Result<Self, VolumeError> {
        if dims.iter().any(|&d| d == 0) {
            return Err(VolumeError::InvalidGeometry(format!("dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(VolumeError::InvalidGeometry(format!(
                "spacing must be > 0, got {:?}",
                spacing.as_slice()
            )));
        }
        let n = dims[0]
            .checked_mul(dims[1])
            .and_then(|v| v.checked_mul(dims[2]))
            .ok_or_else(|| VolumeError::InvalidGeometry("volume too large".into()))?;
        let brick_dims = dims.map(|d| d.div_ceil(BRICK));
        Ok(Self {
            dims,
            spacing,
            origin,
            intensity: vec![0; n],
            label: vec![0; n],
            label_table,
            brick_dims,
            brick_counts: vec![0; brick_dims[0] * brick_dims[1] * brick_dims[2]],
            occupied: 0,
        })
    }

    /// Builds a volume from a label grid (x fastest); labeled voxels get full
    /// intensity.
    pub fn from_labels(
        dims: [usize; 3],
        spacing: Vec3,
        origin: Pose,
        labels: &[u8],
        label_table: BTreeMap<u8, LabelInfo>,
    ) -> Result<Self, VolumeError> {
        let mut v = Self::new(dims, spacing, origin, label_table)?;
        if labels.len() != v.label.len() {
            return Err(VolumeError::InvalidGeometry(format!(
                "label grid has {} entries, expected {}",
                labels.len(),
                v.label.len()
            )));
        }
        for (idx, &l) in labels.iter().enumerate() {
            if l != 0 {
                v.write(idx, 255, l);
            }
        }
        Ok(v)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
    pub fn spacing(&self) -> Vec3 {
        self.spacing
    }
    pub fn origin(&self) -> &Pose {
        &self.origin
    }
    pub fn label_table(&self) -> &BTreeMap<u8, LabelInfo> {
        &self.label_table
    }
    pub fn labels(&self) -> &[u8] {
        &self.label
    }
    pub fn intensities(&self) -> &[u8] {
        &self.intensity
    }
    pub fn occupied_count(&self) -> usize {
        self.occupied
    }
    pub fn min_spacing(&self) -> f64 {
        self.spacing.min()
    }

    /// Size of the volume in its own frame, meters.
    pub fn extent(&self) -> Vec3 {
        Vec3::new(
            self.dims[0] as f64 * self.spacing.x,
            self.dims[1] as f64 * self.spacing.y,
            self.dims[2] as f64 * self.spacing.z,
        )
    }

    pub fn center_world(&self) -> Vec3 {
        self.origin.transform_point(&(self.extent() / 2.0))
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn label_at(&self, i: usize, j: usize, k: usize) -> u8 {
        self.label[self.index(i, j, k)]
    }

    #[inline]
    pub fn intensity_at(&self, i: usize, j: usize, k: usize) -> u8 {
        self.intensity[self.index(i, j, k)]
    }

    #[inline]
    pub fn is_occupied(&self, i: usize, j: usize, k: usize) -> bool {
        self.intensity[self.index(i, j, k)] > 0
    }

    /// Occupancy with out-of-range (including negative) indices treated as empty.
    #[inline]
    pub fn occupied_signed(&self, i: i64, j: i64, k: i64) -> bool {
        self.in_bounds(i, j, k) && self.is_occupied(i as usize, j as usize, k as usize)
    }

    #[inline]
    pub fn in_bounds(&self, i: i64, j: i64, k: i64) -> bool {
        i >= 0
            && j >= 0
            && k >= 0
            && (i as usize) < self.dims[0]
            && (j as usize) < self.dims[1]
            && (k as usize) < self.dims[2]
    }

    pub fn set_voxel(&mut self, i: usize, j: usize, k: usize, intensity: u8, label: u8) {
        let idx = self.index(i, j, k);
        self.write(idx, intensity, label);
    }

    /// Single write path; keeps the brick counts and occupied total in sync
    /// and enforces `intensity == 0 <=> label == 0`.
    fn write(&mut self, idx: usize, intensity: u8, label: u8) {
        let (intensity, label) = if intensity == 0 || label == 0 { (0, 0) } else { (intensity, label) };
        let was = self.intensity[idx] > 0;
        let now = intensity > 0;
        self.intensity[idx] = intensity;
        self.label[idx] = label;
        if was != now {
            let b = self.brick_of_index(idx);
            if now {
                self.brick_counts[b] += 1;
                self.occupied += 1;
            } else {
                self.brick_counts[b] -= 1;
                self.occupied -= 1;
            }
        }
    }

    fn brick_of_index(&self, idx: usize) -> usize {
        let i = idx % self.dims[0];
        let j = (idx / self.dims[0]) % self.dims[1];
        let k = idx / (self.dims[0] * self.dims[1]);
        self.brick_index(i / BRICK, j / BRICK, k / BRICK)
    }

    pub fn brick_dims(&self) -> [usize; 3] {
        self.brick_dims
    }

    #[inline]
    fn brick_index(&self, bi: usize, bj: usize, bk: usize) -> usize {
        bi + self.brick_dims[0] * (bj + self.brick_dims[1] * bk)
    }

    #[inline]
    pub fn brick_occupied(&self, bi: usize, bj: usize, bk: usize) -> bool {
        self.brick_counts[self.brick_index(bi, bj, bk)] > 0
    }

    /// World point to continuous voxel coordinates.
    pub fn world_to_voxel(&self, p: &Vec3) -> Vec3 {
        self.origin.inverse_transform_point(p).component_div(&self.spacing)
    }

    pub fn voxel_to_world(&self, c: &Vec3) -> Vec3 {
        self.origin.transform_point(&c.component_mul(&self.spacing))
    }

    pub fn voxel_center_world(&self, i: usize, j: usize, k: usize) -> Vec3 {
        self.voxel_to_world(&Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5))
    }

    /// Nearest voxel to a world point. A point exactly between two voxel
    /// centers resolves to the lower index.
    pub fn nearest_voxel(&self, p: &Vec3) -> [i64; 3] {
        let c = self.world_to_voxel(p);
        [c.x, c.y, c.z].map(|v| (v - 1.0).ceil() as i64)
    }

    pub fn sample(&self, p: &Vec3) -> Sample {
        let [i, j, k] = self.nearest_voxel(p);
        if !self.in_bounds(i, j, k) {
            return Sample { occupied: false, label: 0 };
        }
        let idx = self.index(i as usize, j as usize, k as usize);
        Sample {
            occupied: self.intensity[idx] > 0,
            label: self.label[idx],
        }
    }

    fn intensity_signed(&self, i: i64, j: i64, k: i64) -> f64 {
        if self.in_bounds(i, j, k) {
            self.intensity[self.index(i as usize, j as usize, k as usize)] as f64 / 255.0
        } else {
            0.0
        }
    }

    /// Trilinear interpolation of intensity between voxel centers, in
    /// continuous voxel coordinates. Outside the grid intensity is 0.
    pub fn trilinear(&self, c: &Vec3) -> f64 {
        let u = c - Vec3::repeat(0.5);
        let base = u.map(f64::floor);
        let t = u - base;
        let (i, j, k) = (base.x as i64, base.y as i64, base.z as i64);
        let mut acc = 0.0;
        for dk in 0..2 {
            let wz = if dk == 0 { 1.0 - t.z } else { t.z };
            for dj in 0..2 {
                let wy = if dj == 0 { 1.0 - t.y } else { t.y };
                for di in 0..2 {
                    let wx = if di == 0 { 1.0 - t.x } else { t.x };
                    let w = wx * wy * wz;
                    if w != 0.0 {
                        acc += w * self.intensity_signed(i + di, j + dj, k + dk);
                    }
                }
            }
        }
        acc
    }

    /// Outward surface normal at a world point: the negated, normalized
    /// central-difference gradient of interpolated intensity. Falls back to
    /// `fallback` where the gradient vanishes.
    pub fn gradient_normal(&self, p: &Vec3, fallback: Vec3) -> Vec3 {
        let c = self.world_to_voxel(p);
        let mut g = Vec3::zeros();
        for axis in 0..3 {
            let mut step = Vec3::zeros();
            step[axis] = 1.0;
            let d = self.trilinear(&(c + step)) - self.trilinear(&(c - step));
            // d/dx in meters: two voxel steps of spacing each
            g[axis] = d / (2.0 * self.spacing[axis]);
        }
        let n = g.norm();
        if n < 1e-9 {
            return fallback;
        }
        self.origin.rotate(&(-g / n))
    }

    /// Inclusive voxel index range whose cells may intersect the world-space
    /// ball `(center, radius)`, clamped to the grid. `None` if disjoint.
    fn ball_voxel_range(&self, center_local: &Vec3, radius: f64) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let min = ((center_local[a] - radius) / self.spacing[a]).floor() as i64;
            let max = ((center_local[a] + radius) / self.spacing[a]).floor() as i64;
            let min = min.max(0);
            let max = max.min(self.dims[a] as i64 - 1);
            if min > max {
                return None;
            }
            lo[a] = min as usize;
            hi[a] = max as usize;
        }
        Some((lo, hi))
    }

    fn any_brick_occupied(&self, lo: [usize; 3], hi: [usize; 3]) -> bool {
        for bk in lo[2] / BRICK..=hi[2] / BRICK {
            for bj in lo[1] / BRICK..=hi[1] / BRICK {
                for bi in lo[0] / BRICK..=hi[0] / BRICK {
                    if self.brick_occupied(bi, bj, bk) {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Closest point of the occupied voxel set within `radius` of `center`
    /// (voxels treated as solid boxes).
    pub fn closest_occupied(&self, center: &Vec3, radius: f64) -> Option<Contact> {
        let local = self.origin.inverse_transform_point(center);
        let (lo, hi) = self.ball_voxel_range(&local, radius)?;
        if !self.any_brick_occupied(lo, hi) {
            return None;
        }
        let mut best: Option<(f64, Vec3)> = None;
        let r2 = radius * radius;
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    if !self.is_occupied(i, j, k) {
                        continue;
                    }
                    let idx = [i, j, k];
                    let mut q = Vec3::zeros();
                    for a in 0..3 {
                        let lo_a = idx[a] as f64 * self.spacing[a];
                        q[a] = local[a].clamp(lo_a, lo_a + self.spacing[a]);
                    }
                    let d2 = (q - local).norm_squared();
                    if d2 <= r2 && best.is_none_or(|(b, _)| d2 < b) {
                        best = Some((d2, q));
                    }
                }
            }
        }
        best.map(|(d2, q)| Contact {
            point: self.origin.transform_point(&q),
            distance: d2.sqrt(),
        })
    }

    /// True if the open ball overlaps any occupied voxel cell.
    pub fn ball_overlaps(&self, center: &Vec3, radius: f64) -> bool {
        self.closest_occupied(center, radius)
            .is_some_and(|c| c.distance < radius)
    }

    /// Clears every occupied voxel whose center lies within `radius` of
    /// `center` and returns what was removed, in z, y, x scan order.
    pub fn remove_colliding_voxels(&mut self, center: &Vec3, radius: f64, tick: u64) -> VoxelEdit {
        let mut edit = VoxelEdit {
            tick,
            removed: Vec::new(),
        };
        let local = self.origin.inverse_transform_point(center);
        let Some((lo, hi)) = self.ball_voxel_range(&local, radius) else {
            return edit;
        };
        if !self.any_brick_occupied(lo, hi) {
            return edit;
        }
        let r2 = radius * radius * (1.0 + 1e-9);
        for k in lo[2]..=hi[2] {
            for j in lo[1]..=hi[1] {
                for i in lo[0]..=hi[0] {
                    let idx = self.index(i, j, k);
                    if self.intensity[idx] == 0 {
                        continue;
                    }
                    let c = Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5)
                        .component_mul(&self.spacing);
                    if (c - local).norm_squared() <= r2 {
                        edit.removed.push(RemovedVoxel {
                            index: [i as u32, j as u32, k as u32],
                            prior_intensity: self.intensity[idx],
                            prior_label: self.label[idx],
                        });
                        self.write(idx, 0, 0);
                    }
                }
            }
        }
        edit
    }

    /// Re-applies a recorded removal (used when replaying edits).
    pub fn apply_edit(&mut self, edit: &VoxelEdit) {
        for v in &edit.removed {
            let [i, j, k] = v.index.map(|x| x as usize);
            self.set_voxel(i, j, k, 0, 0);
        }
    }

    /// Restores the voxels an edit removed.
    pub fn revert_edit(&mut self, edit: &VoxelEdit) {
        for v in edit.removed.iter().rev() {
            let [i, j, k] = v.index.map(|x| x as usize);
            self.set_voxel(i, j, k, v.prior_intensity, v.prior_label);
        }
    }
}
