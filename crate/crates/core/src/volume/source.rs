use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{LabelInfo, VoxelVolume};
use crate::pose::{Pose, Vec3};

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("invalid volume geometry: {0}")]
    InvalidGeometry(String),
    #[error("volume source lists no slices")]
    EmptyStack,
    #[error("slice {0} is missing")]
    MissingSlice(usize),
    #[error("slice {slice} is {found:?} pixels, expected {expected:?}")]
    InconsistentSliceSize {
        slice: usize,
        expected: (u32, u32),
        found: (u32, u32),
    },
    #[error("color {} at slice {slice}, pixel {pixel:?} is not in the label map", format_hex_color(*.color))]
    UnmappedColor {
        color: [u8; 3],
        slice: usize,
        pixel: (u32, u32),
    },
    #[error("invalid label map: {0}")]
    InvalidLabelMap(String),
    #[error("cannot decode slice {slice}: {message}")]
    Image { slice: usize, message: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SliceFormat {
    Png,
    Jpeg,
}

impl SliceFormat {
    pub fn extension(self) -> &'static str {
        match self {
            SliceFormat::Png => "png",
            SliceFormat::Jpeg => "jpeg",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelEntry {
    pub id: u8,
    pub name: String,
}

/// Where a segmented volume's slice images live and how to interpret them.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSource {
    /// Directory that `prefix` is relative to.
    pub base_dir: PathBuf,
    pub prefix: String,
    pub count: usize,
    pub format: SliceFormat,
    pub spacing: Vec3,
    /// Pose of the voxel (0,0,0) corner relative to the owning object.
    pub origin: Pose,
    pub label_map: BTreeMap<[u8; 3], LabelEntry>,
}

impl VolumeSource {
    /// Slice `k` is `<base_dir>/<prefix><k>.<ext>`; slice index is volume +z.
    pub fn slice_path(&self, k: usize) -> PathBuf {
        self.base_dir
            .join(format!("{}{}.{}", self.prefix, k, self.format.extension()))
    }
}

pub fn parse_hex_color(s: &str) -> Option<[u8; 3]> {
    let h = s.trim().trim_start_matches('#');
    if h.len() != 6 || !h.is_ascii() {
        return None;
    }
    let byte = |i: usize| u8::from_str_radix(&h[i..i + 2], 16).ok();
    Some([byte(0)?, byte(2)?, byte(4)?])
}

pub fn format_hex_color(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

// Per-channel tolerance for lossy (JPEG) slices.
const JPEG_TOLERANCE: i32 = 40;

struct ColorMatcher {
    exact: BTreeMap<[u8; 3], u8>,
    entries: Vec<([u8; 3], u8)>,
    lossy: bool,
}

impl ColorMatcher {
    fn new(label_map: &BTreeMap<[u8; 3], LabelEntry>, lossy: bool) -> Self {
        let mut exact: BTreeMap<[u8; 3], u8> =
            label_map.iter().map(|(c, e)| (*c, e.id)).collect();
        // black is background unless the map says otherwise
        exact.entry([0, 0, 0]).or_insert(0);
        let entries = exact.iter().map(|(c, id)| (*c, *id)).collect();
        Self { exact, entries, lossy }
    }

    fn label(&self, c: [u8; 3]) -> Option<u8> {
        if let Some(&id) = self.exact.get(&c) {
            return Some(id);
        }
        if !self.lossy {
            return None;
        }
        let dist = |a: [u8; 3]| {
            (0..3)
                .map(|i| (a[i] as i32 - c[i] as i32).abs())
                .max()
                .unwrap()
        };
        self.entries
            .iter()
            .map(|&(col, id)| (dist(col), id))
            .filter(|&(d, _)| d <= JPEG_TOLERANCE)
            .min()
            .map(|(_, id)| id)
    }
}

/// Loads a segmented slice stack. Slice `k` fills the `z = k` plane, image
/// column is x and image row is y. Each pixel color is looked up in the label
/// map; labeled voxels get full intensity, background voxels stay empty.
pub fn load_volume(source: &VolumeSource) -> Result<VoxelVolume, VolumeError> {
    if source.count == 0 {
        return Err(VolumeError::EmptyStack);
    }
    let mut seen = BTreeMap::new();
    for (color, e) in &source.label_map {
        if let Some(prev) = seen.insert(e.id, color) {
            if e.id != 0 {
                return Err(VolumeError::InvalidLabelMap(format!(
                    "label {} mapped from both {} and {}",
                    e.id,
                    format_hex_color(*prev),
                    format_hex_color(*color)
                )));
            }
        }
    }
    let matcher = ColorMatcher::new(&source.label_map, source.format == SliceFormat::Jpeg);
    let label_table: BTreeMap<u8, LabelInfo> = source
        .label_map
        .iter()
        .filter(|(_, e)| e.id != 0)
        .map(|(c, e)| {
            (
                e.id,
                LabelInfo {
                    name: e.name.clone(),
                    color: *c,
                },
            )
        })
        .collect();

    let mut volume: Option<VoxelVolume> = None;
    let mut expected = (0, 0);
    for k in 0..source.count {
        let path = source.slice_path(k);
        let img = read_rgb(&path, k)?;
        let size = img.dimensions();
        let vol = match volume.as_mut() {
            Some(v) => {
                if size != expected {
                    return Err(VolumeError::InconsistentSliceSize {
                        slice: k,
                        expected,
                        found: size,
                    });
                }
                v
            }
            None => {
                expected = size;
                volume.insert(VoxelVolume::new(
                    [size.0 as usize, size.1 as usize, source.count],
                    source.spacing,
                    source.origin,
                    label_table.clone(),
                )?)
            }
        };
        for (x, y, px) in img.enumerate_pixels() {
            let label = matcher.label(px.0).ok_or(VolumeError::UnmappedColor {
                color: px.0,
                slice: k,
                pixel: (x, y),
            })?;
            if label != 0 {
                vol.set_voxel(x as usize, y as usize, k, 255, label);
            }
        }
    }
    Ok(volume.expect("count > 0"))
}

fn read_rgb(path: &Path, slice: usize) -> Result<image::RgbImage, VolumeError> {
    if !path.is_file() {
        return Err(VolumeError::MissingSlice(slice));
    }
    let img = image::open(path).map_err(|e| VolumeError::Image {
        slice,
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

impl VoxelVolume {
    pub fn set_origin(&mut self, origin: Pose) {
        self.origin = origin;
    }
}
