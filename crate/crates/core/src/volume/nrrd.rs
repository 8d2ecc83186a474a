//! Minimal NRRD support for 8-bit label volumes (raw or gzip encoded), plus
//! conversion to and from segmented slice stacks.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use super::{LabelEntry, LabelInfo, SliceFormat, VolumeSource, VoxelVolume};
use crate::pose::{Pose, Vec3};

#[derive(Debug, Error)]
pub enum NrrdError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed NRRD: {0}")]
    Malformed(String),
    #[error("unsupported NRRD encoding: {0}")]
    UnsupportedEncoding(String),
    #[error("cannot write slice {slice}: {message}")]
    Slice { slice: usize, message: String },
}

/// A 3-D uchar label grid, x fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct NrrdVolume {
    pub dims: [usize; 3],
    pub spacing: Vec3,
    pub origin: Vec3,
    pub data: Vec<u8>,
    /// `label<N>` key/value pairs, if present.
    pub label_names: BTreeMap<u8, String>,
}

impl NrrdVolume {
    pub fn from_volume(v: &VoxelVolume) -> Self {
        Self {
            dims: v.dims(),
            spacing: v.spacing(),
            origin: v.origin().position,
            data: v.labels().to_vec(),
            label_names: v
                .label_table()
                .iter()
                .map(|(id, l)| (*id, l.name.clone()))
                .collect(),
        }
    }
}

fn malformed(msg: impl Into<String>) -> NrrdError {
    NrrdError::Malformed(msg.into())
}

fn parse_floats(v: &str) -> Result<Vec<f64>, NrrdError> {
    v.split(|c: char| c.is_whitespace() || c == ',' || c == '(' || c == ')')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().map_err(|_| malformed(format!("bad number `{s}`"))))
        .collect()
}

fn parse_vectors(v: &str) -> Result<Vec<Vec<f64>>, NrrdError> {
    v.split(')')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            let s = s.trim_start_matches('(');
            if s == "none" {
                Ok(Vec::new())
            } else {
                parse_floats(s)
            }
        })
        .collect()
}

pub fn read_nrrd(path: &Path) -> Result<NrrdVolume, NrrdError> {
    let bytes = fs::read(path)?;
    parse_nrrd(&bytes, path.parent().unwrap_or(Path::new(".")))
}

/// Parses an in-memory NRRD. `base_dir` resolves a detached `data file`.
pub fn parse_nrrd(bytes: &[u8], base_dir: &Path) -> Result<NrrdVolume, NrrdError> {
    if !bytes.starts_with(b"NRRD000") {
        return Err(malformed("missing NRRD magic"));
    }
    let mut pos = 0;
    let mut fields: BTreeMap<String, String> = BTreeMap::new();
    let mut label_names = BTreeMap::new();
    let mut first = true;
    loop {
        let end = bytes[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|e| pos + e)
            .ok_or_else(|| malformed("header not terminated"))?;
        let line = std::str::from_utf8(&bytes[pos..end])
            .map_err(|_| malformed("header is not UTF-8"))?
            .trim_end_matches('\r');
        pos = end + 1;
        if first {
            first = false;
            continue;
        }
        if line.is_empty() {
            break;
        }
        if line.starts_with('#') {
            continue;
        }
        if let Some((k, v)) = line.split_once(":=") {
            if let Some(id) = k.trim().strip_prefix("label").and_then(|n| n.parse::<u8>().ok()) {
                label_names.insert(id, v.trim().to_string());
            }
            continue;
        }
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| malformed(format!("bad header line `{line}`")))?;
        fields.insert(k.trim().to_ascii_lowercase(), v.trim().to_string());
        if k.trim().eq_ignore_ascii_case("data file") || k.trim().eq_ignore_ascii_case("datafile") {
            break;
        }
    }
    let field = |k: &str| fields.get(k).map(String::as_str);

    let ty = field("type").ok_or_else(|| malformed("missing `type`"))?;
    if !matches!(ty, "uchar" | "unsigned char" | "uint8" | "uint8_t") {
        return Err(NrrdError::UnsupportedEncoding(format!("type {ty}")));
    }
    let dim: usize = field("dimension")
        .ok_or_else(|| malformed("missing `dimension`"))?
        .parse()
        .map_err(|_| malformed("bad dimension"))?;
    if dim != 3 {
        return Err(NrrdError::UnsupportedEncoding(format!("dimension {dim}")));
    }
    let sizes: Vec<usize> = field("sizes")
        .ok_or_else(|| malformed("missing `sizes`"))?
        .split_whitespace()
        .map(|s| s.parse().map_err(|_| malformed("bad sizes")))
        .collect::<Result<_, _>>()?;
    if sizes.len() != 3 || sizes.contains(&0) {
        return Err(malformed("sizes must list three positive values"));
    }
    let dims = [sizes[0], sizes[1], sizes[2]];

    let mut spacing = Vec3::repeat(1.0);
    if let Some(s) = field("spacings") {
        let v = parse_floats(s)?;
        if v.len() != 3 {
            return Err(malformed("spacings must list three values"));
        }
        spacing = Vec3::new(v[0], v[1], v[2]);
    } else if let Some(s) = field("space directions") {
        let dirs = parse_vectors(s)?;
        if dirs.len() != 3 || dirs.iter().any(|d| d.len() != 3) {
            return Err(malformed("space directions must list three 3-vectors"));
        }
        for (a, d) in dirs.iter().enumerate() {
            spacing[a] = Vec3::new(d[0], d[1], d[2]).norm();
        }
    }
    let mut origin = Vec3::zeros();
    if let Some(s) = field("space origin") {
        let v = parse_floats(s)?;
        if v.len() != 3 {
            return Err(malformed("space origin must be a 3-vector"));
        }
        origin = Vec3::new(v[0], v[1], v[2]);
    }

    let raw = match field("data file").or(field("datafile")) {
        Some(f) => fs::read(base_dir.join(f))?,
        None => bytes[pos..].to_vec(),
    };
    let encoding = field("encoding").ok_or_else(|| malformed("missing `encoding`"))?;
    let mut data = match encoding {
        "raw" => raw,
        "gzip" | "gz" => {
            let mut out = Vec::new();
            GzDecoder::new(raw.as_slice())
                .read_to_end(&mut out)
                .map_err(|e| malformed(format!("gzip: {e}")))?;
            out
        }
        other => return Err(NrrdError::UnsupportedEncoding(other.to_string())),
    };
    let n = dims[0] * dims[1] * dims[2];
    if data.len() < n {
        return Err(malformed(format!("expected {n} data bytes, found {}", data.len())));
    }
    data.truncate(n);
    Ok(NrrdVolume {
        dims,
        spacing,
        origin,
        data,
        label_names,
    })
}

pub fn write_nrrd(path: &Path, v: &NrrdVolume, gzip: bool) -> Result<(), NrrdError> {
    let mut out = Vec::new();
    writeln!(out, "NRRD0004")?;
    writeln!(out, "type: uchar")?;
    writeln!(out, "dimension: 3")?;
    writeln!(out, "sizes: {} {} {}", v.dims[0], v.dims[1], v.dims[2])?;
    writeln!(out, "spacings: {} {} {}", v.spacing.x, v.spacing.y, v.spacing.z)?;
    writeln!(out, "space origin: ({},{},{})", v.origin.x, v.origin.y, v.origin.z)?;
    writeln!(out, "encoding: {}", if gzip { "gzip" } else { "raw" })?;
    for (id, name) in &v.label_names {
        writeln!(out, "label{id}:={name}")?;
    }
    writeln!(out)?;
    if gzip {
        let mut enc = GzEncoder::new(out, Compression::default());
        enc.write_all(&v.data)?;
        out = enc.finish()?;
    } else {
        out.extend_from_slice(&v.data);
    }
    fs::write(path, out)?;
    Ok(())
}

const PALETTE: [[u8; 3]; 8] = [
    [230, 214, 200],
    [220, 60, 60],
    [70, 130, 220],
    [240, 200, 60],
    [90, 190, 110],
    [180, 90, 200],
    [60, 200, 200],
    [240, 140, 40],
];

/// Display color used when converting label `id` to an image slice. Label 0
/// is black (background); every other id gets a distinct non-black color.
pub fn palette_color(id: u8) -> [u8; 3] {
    match id {
        0 => [0, 0, 0],
        1..=8 => PALETTE[id as usize - 1],
        // red channel carries the id, so these never collide with each other;
        // blue = 1 keeps them off the table above
        _ => [id, 255 - id, 1],
    }
}

/// Builds a volume from NRRD labels, naming unnamed labels `label_<id>`.
pub fn nrrd_to_volume(n: &NrrdVolume) -> Result<VoxelVolume, super::VolumeError> {
    let mut table = BTreeMap::new();
    for &l in &n.data {
        if l != 0 && !table.contains_key(&l) {
            table.insert(
                l,
                LabelInfo {
                    name: n.label_names.get(&l).cloned().unwrap_or_else(|| format!("label_{l}")),
                    color: palette_color(l),
                },
            );
        }
    }
    VoxelVolume::from_labels(
        n.dims,
        n.spacing,
        Pose::from_translation(n.origin),
        &n.data,
        table,
    )
}

/// Writes one PNG per z plane (`<dir>/<prefix><k>.png`) and returns the
/// descriptor that reloads the volume. Labels keep their table colors.
pub fn write_slice_stack(v: &VoxelVolume, dir: &Path, prefix: &str) -> Result<VolumeSource, NrrdError> {
    fs::create_dir_all(dir)?;
    let [nx, ny, nz] = v.dims();
    let color_of = |l: u8| -> [u8; 3] {
        if l == 0 {
            [0, 0, 0]
        } else {
            v.label_table().get(&l).map(|i| i.color).unwrap_or_else(|| palette_color(l))
        }
    };
    let mut names: BTreeMap<u8, String> = v
        .label_table()
        .iter()
        .map(|(id, info)| (*id, info.name.clone()))
        .collect();
    for &l in v.labels() {
        if l != 0 {
            names.entry(l).or_insert_with(|| format!("label_{l}"));
        }
    }
    let mut label_map = BTreeMap::new();
    for (id, name) in names {
        let color = color_of(id);
        if color == [0, 0, 0] || label_map.contains_key(&color) {
            return Err(malformed(format!("label {id} has a black or shared display color")));
        }
        label_map.insert(color, LabelEntry { id, name });
    }
    for k in 0..nz {
        let mut img = image::RgbImage::new(nx as u32, ny as u32);
        for j in 0..ny {
            for i in 0..nx {
                img.put_pixel(i as u32, j as u32, image::Rgb(color_of(v.label_at(i, j, k))));
            }
        }
        let path: PathBuf = dir.join(format!("{prefix}{k}.png"));
        img.save(&path).map_err(|e| NrrdError::Slice {
            slice: k,
            message: e.to_string(),
        })?;
    }
    Ok(VolumeSource {
        base_dir: dir.to_path_buf(),
        prefix: prefix.to_string(),
        count: nz,
        format: SliceFormat::Png,
        spacing: v.spacing(),
        origin: *v.origin(),
        label_map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::load_volume;
    use std::collections::BTreeSet;

    fn sample(n: usize) -> NrrdVolume {
        let mut data = vec![0u8; n * n * n];
        for (idx, d) in data.iter_mut().enumerate() {
            let (i, j, k) = (idx % n, (idx / n) % n, idx / (n * n));
            if (i + j + k) % 5 == 0 {
                *d = 1 + ((i * 7 + k) % 3) as u8;
            }
        }
        NrrdVolume {
            dims: [n, n, n],
            spacing: Vec3::new(0.0005, 0.0005, 0.001),
            origin: Vec3::new(0.01, -0.02, 0.0),
            data,
            label_names: BTreeMap::from([(1, "bone".to_string())]),
        }
    }

    #[test]
    fn palette_is_unique_and_non_black() {
        let colors: BTreeSet<[u8; 3]> = (1..=255).map(palette_color).collect();
        assert_eq!(colors.len(), 255);
        assert!(!colors.contains(&[0, 0, 0]));
    }

    #[test]
    fn raw_and_gzip_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = sample(9);
        for gzip in [false, true] {
            let p = dir.path().join(format!("v{gzip}.nrrd"));
            write_nrrd(&p, &v, gzip).unwrap();
            assert_eq!(read_nrrd(&p).unwrap(), v);
        }
    }

    #[test]
    fn float_type_is_unsupported() {
        let bytes = b"NRRD0004\ntype: float\ndimension: 3\nsizes: 1 1 1\nencoding: raw\n\n\0\0\0\0";
        assert!(matches!(
            parse_nrrd(bytes, Path::new(".")),
            Err(NrrdError::UnsupportedEncoding(_))
        ));
    }

    #[test]
    fn space_directions_give_spacing() {
        let mut bytes = b"NRRD0005\ntype: uint8\ndimension: 3\nsizes: 2 1 1\nspace: left-posterior-superior\nspace directions: (0.5,0,0) (0,0.25,0) (0,0,2)\nspace origin: (1,2,3)\nencoding: raw\n\n".to_vec();
        bytes.extend_from_slice(&[3, 0]);
        let v = parse_nrrd(&bytes, Path::new(".")).unwrap();
        assert_eq!(v.spacing, Vec3::new(0.5, 0.25, 2.0));
        assert_eq!(v.origin, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(v.data, vec![3, 0]);
    }

    #[test]
    fn truncated_data_is_malformed() {
        let bytes = b"NRRD0004\ntype: uchar\ndimension: 3\nsizes: 2 2 2\nencoding: raw\n\n\0\0";
        assert!(matches!(parse_nrrd(bytes, Path::new(".")), Err(NrrdError::Malformed(_))));
    }

    #[test]
    fn stack_round_trip_is_voxel_exact() {
        let dir = tempfile::tempdir().unwrap();
        let n = sample(10);
        let vol = nrrd_to_volume(&n).unwrap();
        let src = write_slice_stack(&vol, &dir.path().join("stack"), "slice_").unwrap();
        assert_eq!(src.count, 10);
        let back = load_volume(&src).unwrap();
        assert_eq!(back.labels(), n.data.as_slice());
        assert_eq!(back, vol);
        assert_eq!(NrrdVolume::from_volume(&back).data, n.data);
    }

    #[test]
    fn empty_volume_converts() {
        let dir = tempfile::tempdir().unwrap();
        let mut n = sample(4);
        n.data.iter_mut().for_each(|d| *d = 0);
        n.label_names.clear();
        let vol = nrrd_to_volume(&n).unwrap();
        let src = write_slice_stack(&vol, dir.path(), "s").unwrap();
        assert!(src.label_map.is_empty());
        assert_eq!(load_volume(&src).unwrap().occupied_count(), 0);
    }
}
