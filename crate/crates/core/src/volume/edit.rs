use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RemovedVoxel {
    pub index: [u32; 3],
    pub prior_intensity: u8,
    pub prior_label: u8,
}

/// Voxels cleared during one simulation tick.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct VoxelEdit {
    pub tick: u64,
    pub removed: Vec<RemovedVoxel>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EditDecodeError {
    #[error("voxel edit payload too short ({0} bytes)")]
    Truncated(usize),
    #[error("voxel edit declares {count} voxels but payload holds {len} bytes")]
    LengthMismatch { count: u32, len: usize },
}

const HEADER: usize = 12;
const PER_VOXEL: usize = 14;

impl VoxelEdit {
    pub fn is_empty(&self) -> bool {
        self.removed.is_empty()
    }

    pub fn encoded_len(count: usize) -> usize {
        HEADER + PER_VOXEL * count
    }

    /// `tick u64, count u32`, then per voxel `x, y, z: u32, intensity: u8,
    /// label: u8`; little-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_len(self.removed.len()));
        out.extend_from_slice(&self.tick.to_le_bytes());
        out.extend_from_slice(&(self.removed.len() as u32).to_le_bytes());
        for v in &self.removed {
            for c in v.index {
                out.extend_from_slice(&c.to_le_bytes());
            }
            out.push(v.prior_intensity);
            out.push(v.prior_label);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, EditDecodeError> {
        if bytes.len() < HEADER {
            return Err(EditDecodeError::Truncated(bytes.len()));
        }
        let tick = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if bytes.len() != Self::encoded_len(count as usize) {
            return Err(EditDecodeError::LengthMismatch {
                count,
                len: bytes.len(),
            });
        }
        let removed = bytes[HEADER..]
            .chunks_exact(PER_VOXEL)
            .map(|c| RemovedVoxel {
                index: [0, 4, 8].map(|o| u32::from_le_bytes(c[o..o + 4].try_into().unwrap())),
                prior_intensity: c[12],
                prior_label: c[13],
            })
            .collect();
        Ok(Self { tick, removed })
    }
}
