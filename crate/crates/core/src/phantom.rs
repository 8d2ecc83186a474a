//! Synthetic temporal-bone phantom: a labeled volume with a domed bone
//! block, embedded critical structures and air cells, plus a ready-to-run
//! scene around it.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::pose::{Pose, Vec3};
use crate::scene::{write_volume_descriptor, SceneError};
use crate::volume::nrrd::{palette_color, write_slice_stack, NrrdError};
use crate::volume::{LabelInfo, VoxelVolume};

pub const BONE: u8 = 1;
pub const FACIAL_NERVE: u8 = 2;
pub const SIGMOID_SINUS: u8 = 3;
pub const COCHLEA: u8 = 4;
/// Segmentation id of the drill in the generated scene.
pub const DRILL_LABEL: u8 = 10;

/// Edge length of the phantom cube, meters.
pub const DEFAULT_EXTENT: f64 = 0.064;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("phantom size must be at least 8 voxels, got {0}")]
    TooSmall(usize),
    #[error(transparent)]
    Nrrd(#[from] NrrdError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error("{}: {message}", .path.display())]
    Io { path: PathBuf, message: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomOptions {
    /// Voxels per edge.
    pub size: usize,
    pub extent: f64,
    pub width: u32,
    pub height: u32,
    pub baseline: f64,
}

impl Default for PhantomOptions {
    fn default() -> Self {
        Self {
            size: 128,
            extent: DEFAULT_EXTENT,
            width: 640,
            height: 480,
            baseline: 0.065,
        }
    }
}

/// Height of the bone surface over the unit square, in unit coordinates.
fn dome(x: f64, y: f64) -> f64 {
    0.70 + 0.08 * (std::f64::consts::PI * (x - 0.5)).cos() * (std::f64::consts::PI * (y - 0.5)).cos()
}

const AIR_CELLS: [([f64; 3], f64); 4] = [
    ([0.30, 0.65, 0.62], 0.05),
    ([0.42, 0.72, 0.58], 0.035),
    ([0.65, 0.30, 0.60], 0.045),
    ([0.55, 0.40, 0.50], 0.03),
];

/// Label at unit coordinates `u` in `[0, 1]^3`.
pub fn phantom_label(u: [f64; 3]) -> u8 {
    let [x, y, z] = u;
    let d2 = |c: [f64; 3]| (x - c[0]).powi(2) + (y - c[1]).powi(2) + (z - c[2]).powi(2);
    if (x - 0.25).powi(2) + (z - 0.45).powi(2) < 0.06f64.powi(2) && z < dome(x, y) {
        return SIGMOID_SINUS;
    }
    let nerve_x = 0.6 + 0.1 * (std::f64::consts::PI * y).sin();
    if (x - nerve_x).powi(2) + (z - 0.40).powi(2) < 0.02f64.powi(2) && (0.1..0.9).contains(&y) {
        return FACIAL_NERVE;
    }
    if d2([0.72, 0.70, 0.30]) < 0.06f64.powi(2) {
        return COCHLEA;
    }
    if z >= dome(x, y) || AIR_CELLS.iter().any(|(c, r)| d2(*c) < r * r) {
        return 0;
    }
    BONE
}

pub fn label_table() -> BTreeMap<u8, LabelInfo> {
    [
        (BONE, "bone"),
        (FACIAL_NERVE, "facial_nerve"),
        (SIGMOID_SINUS, "sigmoid_sinus"),
        (COCHLEA, "cochlea"),
    ]
    .into_iter()
    .map(|(id, name)| {
        (
            id,
            LabelInfo {
                name: name.into(),
                color: palette_color(id),
            },
        )
    })
    .collect()
}

/// The phantom as an `n³` volume spanning `extent` meters, origin at the
/// volume corner.
pub fn phantom_volume(n: usize, extent: f64) -> Result<VoxelVolume, PhantomError> {
    if n < 8 {
        return Err(PhantomError::TooSmall(n));
    }
    let plane = n * n;
    let mut labels = vec![0u8; n * n * n];
    labels.par_chunks_mut(plane).enumerate().for_each(|(k, slab)| {
        let z = (k as f64 + 0.5) / n as f64;
        for j in 0..n {
            let y = (j as f64 + 0.5) / n as f64;
            for i in 0..n {
                slab[i + n * j] = phantom_label([(i as f64 + 0.5) / n as f64, y, z]);
            }
        }
    });
    let spacing = Vec3::repeat(extent / n as f64);
    VoxelVolume::from_labels([n, n, n], spacing, Pose::identity(), &labels, label_table())
        .map_err(|e| PhantomError::Io {
            path: PathBuf::new(),
            message: e.to_string(),
        })
}

/// World placement of the phantom: centered on x/y with the dome top near
/// `z = 0`.
pub fn phantom_pose(extent: f64) -> Pose {
    Pose::from_translation(Vec3::new(-extent / 2.0, -extent / 2.0, -0.75 * extent))
}

fn write(path: &Path, text: &str) -> Result<(), PhantomError> {
    fs::write(path, text).map_err(|e| PhantomError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn pose_yaml(p: &Pose) -> String {
    let a = p.to_array();
    format!(
        "{{position: {{x: {:?}, y: {:?}, z: {:?}}}, orientation: {{w: {:?}, x: {:?}, y: {:?}, z: {:?}}}}}",
        a[0], a[1], a[2], a[3], a[4], a[5], a[6]
    )
}

/// Writes slices, a volume descriptor and a complete scene into `dir`;
/// returns the launch file path.
pub fn write_phantom_scene(dir: &Path, opts: &PhantomOptions) -> Result<PathBuf, PhantomError> {
    fs::create_dir_all(dir).map_err(|e| PhantomError::Io {
        path: dir.to_path_buf(),
        message: e.to_string(),
    })?;
    let v = phantom_volume(opts.size, opts.extent)?;
    let src = write_slice_stack(&v, &dir.join("slices"), "slice_")?;
    write_volume_descriptor(&dir.join("volume.yaml"), &src)?;

    let e = opts.extent;
    let camera = Pose::look_at(Vec3::new(0.0, -1.6 * e, 1.9 * e), Vec3::new(0.0, 0.0, 0.0), Vec3::z());
    let drill = Pose::from_translation(Vec3::new(0.15 * e, 0.08 * e, 0.45 * e));

    write(
        &dir.join("world.yaml"),
        &format!(
            "gravity: {{x: 0.0, y: 0.0, z: -9.81}}
cameras:
  - name: main_camera
    pose: {}
    near: 0.01
    far: 1.0
    fva: 0.7853981633974483
    width: {}
    height: {}
    stereo_baseline: {:?}
lights:
  - name: key_light
    direction: {{x: 0.3, y: 0.2, z: -1.0}}
",
            pose_yaml(&camera),
            opts.width,
            opts.height,
            opts.baseline
        ),
    )?;
    write(
        &dir.join("input_devices.yaml"),
        "devices:
  - name: drill_input
    channel: control_drill
    controls: drill
  - name: camera_input
    channel: control_camera
    controls: main_camera
",
    )?;
    write(
        &dir.join("anatomy.yaml"),
        &format!(
            "name: anatomy
volumes:
  - name: temporal_bone
    pose: {}
    source: volume.yaml
",
            pose_yaml(&phantom_pose(e))
        ),
    )?;
    write(
        &dir.join("tool.yaml"),
        &format!(
            "name: tool
bodies:
  - name: drill
    pose: {}
    shape: {{type: drill, tip_radius: 0.002, shaft_radius: 0.001, shaft_length: 0.03, shaft_cursors: 5}}
    haptics: {{stiffness: 500.0, max_force: 5.0}}
    style: {{style: steel, params: {{label: {DRILL_LABEL}, color: '#b4b4be'}}}}
",
            pose_yaml(&drill)
        ),
    )?;
    let launch = dir.join("launch.yaml");
    write(
        &launch,
        "world: world.yaml
input_devices: input_devices.yaml
models:
  - anatomy.yaml
  - tool.yaml
plugins:
  - name: data_recorder
",
    )?;
    Ok(launch)
}
