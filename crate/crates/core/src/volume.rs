//! The scalar-volume container every other module exchanges.
//!
//! On disk a volume is a small JSON header plus an adjacent raw payload of
//! little-endian f32 values in x-fastest order. The format is fixed
//! little-endian regardless of host, so files are byte-identical across
//! platforms and round-trips are bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a voxel grid. Voxel (i, j, k) sits at
/// `origin_mm + (i·sx, j·sy, k·sz)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub dims: [usize; 3],
    pub spacing_mm: [f64; 3],
    pub origin_mm: [f64; 3],
}

impl GridMeta {
    pub fn new(dims: [usize; 3], spacing_mm: [f64; 3], origin_mm: [f64; 3]) -> Result<Self> {
        let meta = GridMeta {
            dims,
            spacing_mm,
            origin_mm,
        };
        meta.validate()?;
        Ok(meta)
    }

    /// Isotropic grid at the given spacing, origin zero.
    pub fn isotropic(dims: [usize; 3], spacing_mm: f64) -> Result<Self> {
        Self::new(dims, [spacing_mm; 3], [0.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument(format!(
                "dims must all be >= 1, got {:?}",
                self.dims
            )));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "spacing must be positive, got {:?}",
                self.spacing_mm
            )));
        }
        self.dims[0]
            .checked_mul(self.dims[1])
            .and_then(|p| p.checked_mul(self.dims[2]))
            .and_then(|p| p.checked_mul(4))
            .ok_or_else(|| {
                Error::InvalidArgument(format!("voxel count overflows for dims {:?}", self.dims))
            })?;
        Ok(())
    }

    #[inline]
    pub fn voxel_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Flat index of voxel (x, y, z); x varies fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.dims[0] && y < self.dims[1] && z < self.dims[2]);
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Physical position of a voxel center in mm.
    #[inline]
    pub fn position(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin_mm[0] + x as f64 * self.spacing_mm[0],
            self.origin_mm[1] + y as f64 * self.spacing_mm[1],
            self.origin_mm[2] + z as f64 * self.spacing_mm[2],
        ]
    }
}

/// A 3D scalar field on a [`GridMeta`] grid, flat x-fastest storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub meta: GridMeta,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(meta: GridMeta, data: Vec<f32>) -> Result<Self> {
        meta.validate()?;
        if data.len() != meta.voxel_count() {
            return Err(Error::GridMismatch(format!(
                "data length {} does not match dims {:?} ({} voxels)",
                data.len(),
                meta.dims,
                meta.voxel_count()
            )));
        }
        Ok(Volume { meta, data })
    }

    pub fn zeros(meta: GridMeta) -> Self {
        let n = meta.voxel_count();
        Volume {
            meta,
            data: vec![0.0; n],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.meta.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f32) {
        let i = self.meta.index(x, y, z);
        self.data[i] = v;
    }

    /// Errors unless `other` lives on the identical grid.
    pub fn check_same_grid(&self, other: &Volume) -> Result<()> {
        if self.meta != other.meta {
            return Err(Error::GridMismatch(format!(
                "{:?} vs {:?}",
                self.meta, other.meta
            )));
        }
        Ok(())
    }
}

/// Converts a boolean mask into a 0/1-valued volume for storage.
pub fn volume_from_mask(meta: GridMeta, mask: &[bool]) -> Result<Volume> {
    Volume::new(meta, mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect())
}

/// Reads a 0/1 volume back into a boolean mask (cut at 0.5).
pub fn mask_from_volume(v: &Volume) -> Vec<bool> {
    v.data.iter().map(|&x| x >= 0.5).collect()
}

#[derive(Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing_mm: [f64; 3],
    origin_mm: [f64; 3],
    dtype: String,
    raw: String,
}

/// Writes `v` as `<path>` (JSON header) plus `<path>.raw` (payload).
pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw_name = match path.file_name() {
        Some(name) => format!("{}.raw", name.to_string_lossy()),
        None => {
            return Err(Error::InvalidArgument(format!(
                "not a file path: {}",
                path.display()
            )))
        }
    };
    let header = Header {
        dims: v.meta.dims,
        spacing_mm: v.meta.spacing_mm,
        origin_mm: v.meta.origin_mm,
        dtype: "f32".to_string(),
        raw: raw_name.clone(),
    };
    let text = serde_json::to_string_pretty(&header)
        .map_err(|e| Error::Format { path: path.into(), reason: e.to_string() })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))?;

    let mut bytes = Vec::with_capacity(v.data.len() * 4);
    for x in &v.data {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    let raw_path = path.with_file_name(raw_name);
    fs::write(&raw_path, bytes).map_err(|e| Error::io(raw_path, e))
}

/// Reads a volume written by [`write_volume`].
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    if header.dtype != "f32" {
        return Err(Error::format(
            path,
            format!("unsupported dtype {:?}", header.dtype),
        ));
    }
    let meta = GridMeta::new(header.dims, header.spacing_mm, header.origin_mm)
        .map_err(|e| Error::format(path, e.to_string()))?;

    let raw_path = path.with_file_name(&header.raw);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = meta.voxel_count() * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            &raw_path,
            format!(
                "payload is {} bytes, dims {:?} require {}",
                bytes.len(),
                meta.dims,
                expected
            ),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Volume::new(meta, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn smallest_volume_reads_back() {
        let dir = tempfile::tempdir().unwrap();
        let header = dir.path().join("one.vol");
        std::fs::write(
            &header,
            r#"{"dims":[1,1,1],"spacing_mm":[1.0,1.0,1.0],"origin_mm":[0.0,0.0,0.0],"dtype":"f32","raw":"one.vol.raw"}"#,
        )
        .unwrap();
        std::fs::write(dir.path().join("one.vol.raw"), 0.0f32.to_le_bytes()).unwrap();
        let v = read_volume(&header).unwrap();
        assert_eq!(v.meta.dims, [1, 1, 1]);
        assert_eq!(v.data, vec![0.0]);
    }

    #[test]
    fn round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let meta = GridMeta::new([16, 16, 16], [1.0, 1.25, 0.5], [-3.0, 0.0, 7.5]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut data: Vec<f32> = (0..meta.voxel_count())
            .map(|_| rng.gen_range(-10.0..10.0))
            .collect();
        // Exercise the payload with values JSON could not carry.
        data[0] = f32::NAN;
        data[1] = -0.0;
        data[2] = f32::MIN_POSITIVE / 8.0; // subnormal
        let v = Volume::new(meta, data).unwrap();
        let path = dir.path().join("rt.vol");
        write_volume(&v, &path).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.meta, v.meta);
        let bits = |xs: &[f32]| xs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.data), bits(&v.data));
    }

    #[test]
    fn rewrite_produces_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let meta = GridMeta::isotropic([4, 3, 2], 2.0).unwrap();
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.3).collect();
        let v = Volume::new(meta, data).unwrap();
        let a = dir.path().join("a.vol");
        let b = dir.path().join("b.vol");
        write_volume(&v, &a).unwrap();
        write_volume(&read_volume(&a).unwrap(), &b).unwrap();
        assert_eq!(std::fs::read(&a.with_file_name("a.vol.raw")).unwrap(),
                   std::fs::read(&b.with_file_name("b.vol.raw")).unwrap());
        // Headers differ only in the raw file name they point at.
        let ha = std::fs::read_to_string(&a).unwrap().replace("a.vol.raw", "X");
        let hb = std::fs::read_to_string(&b).unwrap().replace("b.vol.raw", "X");
        assert_eq!(ha, hb);
    }

    #[test]
    fn payload_size_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let header = dir.path().join("bad.vol");
        std::fs::write(
            &header,
            r#"{"dims":[4,4,4],"spacing_mm":[1.0,1.0,1.0],"origin_mm":[0.0,0.0,0.0],"dtype":"f32","raw":"bad.vol.raw"}"#,
        )
        .unwrap();
        std::fs::write(dir.path().join("bad.vol.raw"), vec![0u8; 255]).unwrap();
        let err = read_volume(&header).unwrap_err().to_string();
        assert!(err.contains("255"), "got: {err}");
        assert!(err.contains("256"), "got: {err}");
    }

    #[test]
    fn bad_headers_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            (r#"{"dims":[0,1,1],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"dtype":"f32","raw":"x.raw"}"#, "dims"),
            (r#"{"dims":[1,1,1],"spacing_mm":[0.0,1,1],"origin_mm":[0,0,0],"dtype":"f32","raw":"x.raw"}"#, "spacing"),
            (r#"{"dims":[1,1,1],"spacing_mm":[1,1,1],"origin_mm":[0,0,0],"dtype":"f64","raw":"x.raw"}"#, "dtype"),
        ];
        for (text, what) in cases {
            let header = dir.path().join("h.vol");
            std::fs::write(&header, text).unwrap();
            std::fs::write(dir.path().join("x.raw"), 0.0f32.to_le_bytes()).unwrap();
            let err = read_volume(&header).unwrap_err().to_string();
            assert!(err.contains(what), "case {what}: {err}");
        }
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_volume("/nonexistent/path.vol").unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn wrong_length_rejected_at_construction() {
        let meta = GridMeta::isotropic([2, 2, 2], 1.0).unwrap();
        assert!(Volume::new(meta, vec![0.0; 7]).is_err());
    }

    #[test]
    fn positions_follow_origin_and_spacing() {
        let meta = GridMeta::new([4, 4, 4], [1.0, 2.0, 0.5], [10.0, -4.0, 0.0]).unwrap();
        assert_eq!(meta.position(0, 0, 0), [10.0, -4.0, 0.0]);
        assert_eq!(meta.position(3, 1, 2), [13.0, -2.0, 1.0]);
    }

    #[test]
    fn mask_round_trip() {
        let meta = GridMeta::isotropic([3, 1, 1], 1.0).unwrap();
        let mask = vec![true, false, true];
        let v = volume_from_mask(meta, &mask).unwrap();
        assert_eq!(mask_from_volume(&v), mask);
    }

    proptest! {
        #[test]
        fn round_trip_arbitrary_bits(
            nx in 1usize..6, ny in 1usize..6, nz in 1usize..6,
            seed in any::<u64>(),
        ) {
            let dir = tempfile::tempdir().unwrap();
            let meta = GridMeta::isotropic([nx, ny, nz], 1.0).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f32> = (0..meta.voxel_count())
                .map(|_| f32::from_bits(rng.gen::<u32>()))
                .collect();
            let v = Volume::new(meta, data).unwrap();
            let path = dir.path().join("p.vol");
            write_volume(&v, &path).unwrap();
            let back = read_volume(&path).unwrap();
            prop_assert_eq!(back.meta, v.meta);
            let a: Vec<u32> = v.data.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = back.data.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
