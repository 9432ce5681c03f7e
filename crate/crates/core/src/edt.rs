//! Exact Euclidean distance transform on the voxel grid (squared distances,
//! millimeters) via the separable lower-envelope-of-parabolas algorithm, one
//! pass per axis with anisotropic spacing weights. Used for margin dilation,
//! the healthy-tissue mask, and PET ROI construction.

use crate::volume::GridMeta;

/// Finite stand-in for "no source anywhere": far larger than any squared
/// distance a real grid can produce, small enough to stay exact in f64
/// arithmetic through the envelope updates.
pub const UNREACHABLE: f64 = 1e20;

/// One-dimensional squared distance transform (lower envelope of parabolas).
/// `f` holds squared distances so far, `w` the squared spacing of this axis;
/// `v`/`z`/`out` are scratch of length ≥ n (z needs n+1).
fn dt1d(f: &[f64], w: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s;
        loop {
            let p = v[k];
            s = ((f[q] - f[p]) / w + ((q * q - p * p) as f64)) / (2.0 * (q - p) as f64);
            if s <= z[k] {
                debug_assert!(k > 0);
                k -= 1;
            } else {
                break;
            }
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, o) in out.iter_mut().enumerate().take(n) {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = w * d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (mm²) from every voxel center to the nearest
/// `true` voxel center. Voxels on an empty mask all get [`UNREACHABLE`] or
/// more.
pub fn squared_edt(meta: &GridMeta, mask: &[bool]) -> Vec<f64> {
    assert_eq!(mask.len(), meta.voxel_count(), "mask length mismatch");
    let [nx, ny, nz] = meta.dims;
    let [hx, hy, hz] = meta.spacing_mm;
    let mut d: Vec<f64> = mask
        .iter()
        .map(|&m| if m { 0.0 } else { UNREACHABLE })
        .collect();

    let nmax = nx.max(ny).max(nz);
    let mut f = vec![0.0f64; nmax];
    let mut out = vec![0.0f64; nmax];
    let mut v = vec![0usize; nmax];
    let mut z = vec![0.0f64; nmax + 1];

    // x pass
    for zz in 0..nz {
        for yy in 0..ny {
            let row = meta.index(0, yy, zz);
            f[..nx].copy_from_slice(&d[row..row + nx]);
            dt1d(&f[..nx], hx * hx, &mut out[..nx], &mut v, &mut z);
            d[row..row + nx].copy_from_slice(&out[..nx]);
        }
    }
    // y pass
    for zz in 0..nz {
        for xx in 0..nx {
            for yy in 0..ny {
                f[yy] = d[meta.index(xx, yy, zz)];
            }
            dt1d(&f[..ny], hy * hy, &mut out[..ny], &mut v, &mut z);
            for yy in 0..ny {
                d[meta.index(xx, yy, zz)] = out[yy];
            }
        }
    }
    // z pass
    for yy in 0..ny {
        for xx in 0..nx {
            for zz in 0..nz {
                f[zz] = d[meta.index(xx, yy, zz)];
            }
            dt1d(&f[..nz], hz * hz, &mut out[..nz], &mut v, &mut z);
            for zz in 0..nz {
                d[meta.index(xx, yy, zz)] = out[zz];
            }
        }
    }
    d
}

/// Morphological dilation by a Euclidean radius: all voxels whose center lies
/// within `radius_mm` of a masked voxel center.
pub fn dilate_mm(meta: &GridMeta, mask: &[bool], radius_mm: f64) -> Vec<bool> {
    assert!(radius_mm >= 0.0, "radius must be nonnegative");
    let r2 = radius_mm * radius_mm;
    squared_edt(meta, mask).iter().map(|&d| d <= r2).collect()
}
