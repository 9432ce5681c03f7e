//! Minimal read-only NIfTI-1 support, just enough to pull clinical tissue
//! maps and segmentations into the native container.
//!
//! Only uncompressed single-file (.nii, magic "n+1\0") little-endian volumes
//! with dtype uint8/int16/float32 and exactly three dimensions are accepted.
//! Orientation and affine fields are deliberately ignored: dims and spacing
//! are taken at face value and the origin is set to zero, so downstream
//! coordinates are voxel-grid millimeters, not scanner space.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{GridMeta, Volume};

const HEADER_LEN: usize = 348;
const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;

fn i16_at(bytes: &[u8], offset: usize) -> i16 {
    i16::from_le_bytes([bytes[offset], bytes[offset + 1]])
}

fn f32_at(bytes: &[u8], offset: usize) -> f32 {
    f32::from_le_bytes([
        bytes[offset],
        bytes[offset + 1],
        bytes[offset + 2],
        bytes[offset + 3],
    ])
}

/// Reads the subset of NIfTI-1 described in the module docs.
pub fn read_nifti_subset(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "file shorter than the 348-byte header"));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::format(path, "wrong magic (expected \"n+1\\0\")"));
    }

    let ndim = i16_at(&bytes, 40);
    if ndim != 3 {
        return Err(Error::format(
            path,
            format!("unsupported dimensionality {ndim} (only 3D volumes)"),
        ));
    }
    let dims = [
        i16_at(&bytes, 42) as i64,
        i16_at(&bytes, 44) as i64,
        i16_at(&bytes, 46) as i64,
    ];
    if dims.iter().any(|&d| d < 1) {
        return Err(Error::format(path, format!("non-positive dims {dims:?}")));
    }
    let dims = [dims[0] as usize, dims[1] as usize, dims[2] as usize];

    let datatype = i16_at(&bytes, 70);
    let spacing = [
        f32_at(&bytes, 80) as f64,
        f32_at(&bytes, 84) as f64,
        f32_at(&bytes, 88) as f64,
    ];
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::format(path, format!("non-positive pixdim {spacing:?}")));
    }
    let vox_offset = f32_at(&bytes, 108);
    if !(vox_offset >= HEADER_LEN as f32) || vox_offset.fract() != 0.0 {
        return Err(Error::format(path, format!("bad vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;

    let meta = GridMeta::new(dims, spacing, [0.0; 3]).map_err(|e| Error::format(path, e.to_string()))?;
    let n = meta.voxel_count();
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_FLOAT32 => 4,
        other => {
            return Err(Error::format(
                path,
                format!("unsupported datatype code {other} (only uint8/int16/float32)"),
            ))
        }
    };
    let need = offset + n * elem;
    if bytes.len() < need {
        return Err(Error::format(
            path,
            format!("payload truncated: {} bytes, need {}", bytes.len(), need),
        ));
    }
    let payload = &bytes[offset..need];
    let data: Vec<f32> = match datatype {
        DT_UINT8 => payload.iter().map(|&b| b as f32).collect(),
        DT_INT16 => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        DT_FLOAT32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        _ => unreachable!(),
    };
    Volume::new(meta, data)
}
