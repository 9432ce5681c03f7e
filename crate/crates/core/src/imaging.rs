//! Stochastic imaging model: how a simulated cell density u explains binary
//! MRI segmentations (Bernoulli voxel model through a double-logistic
//! detection probability) and a normalized FET-PET signal (Gaussian noise on
//! u/b over a sparse stencil of weakly correlated voxels).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{GridMeta, Volume};

/// Probability floor/ceiling before logs; the detection sigmoid saturates to
/// exactly 0/1, which must stay finite in the likelihood.
pub const PROB_EPS: f64 = 1e-12;

/// Imaging-model parameters (segmentation thresholds shared-variance sigmoid,
/// PET proportionality and noise).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ImagingParams {
    pub uc_t1gd: f64,
    pub uc_flair: f64,
    pub sigma2_alpha: f64,
    pub b: f64,
    pub sigma: f64,
}

impl ImagingParams {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x < 1.0;
        if !in_unit(self.uc_t1gd) || !in_unit(self.uc_flair) {
            return Err(Error::InvalidArgument(format!(
                "thresholds must lie in (0,1): t1gd {}, flair {}",
                self.uc_t1gd, self.uc_flair
            )));
        }
        if self.uc_flair >= self.uc_t1gd {
            return Err(Error::InvalidArgument(format!(
                "FLAIR threshold {} must be below T1Gd threshold {}",
                self.uc_flair, self.uc_t1gd
            )));
        }
        if !(self.sigma2_alpha > 0.0) || !(self.b > 0.0) || !(self.sigma > 0.0) {
            return Err(Error::InvalidArgument(
                "sigma2_alpha, b, sigma must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One patient's observed data on the anatomy grid.
#[derive(Debug, Clone)]
pub struct Observations {
    pub seg_t1gd: Volume,
    pub seg_flair: Volume,
    /// Normalized FET signal in [0,1].
    pub fet: Volume,
    /// Flat voxel indices the FET likelihood sums over; pairwise ≥ 4 mm
    /// apart. Empty means "no usable PET": the FET term is skipped.
    pub fet_stencil: Vec<usize>,
}

impl Observations {
    pub fn check_grids(&self, meta: &GridMeta) -> Result<()> {
        for (name, v) in [
            ("seg_t1gd", &self.seg_t1gd),
            ("seg_flair", &self.seg_flair),
            ("fet", &self.fet),
        ] {
            if v.meta != *meta {
                return Err(Error::GridMismatch(format!(
                    "{name} grid differs from anatomy grid"
                )));
            }
        }
        if let Some(&i) = self.fet_stencil.iter().max() {
            if i >= meta.voxel_count() {
                return Err(Error::GridMismatch(format!(
                    "stencil index {i} out of range"
                )));
            }
        }
        Ok(())
    }
}

/// Detection probability: a double logistic sigmoid centered at the
/// threshold, `0.5 + 0.5·sign(u−u_c)·(1 − exp(−(u−u_c)²/σ²_α))`.
/// Saturates to exactly 0/1 far from u_c; clamp before taking logs.
#[inline]
pub fn alpha(u_i: f64, u_c: f64, sigma2_alpha: f64) -> f64 {
    let d = u_i - u_c;
    // s vanishes at d = 0, so signum's value there never matters.
    let s = 1.0 - (-(d * d) / sigma2_alpha).exp();
    0.5 + 0.5 * d.signum() * s
}

/// Bernoulli log-likelihood of one binary segmentation over the domain mask.
pub fn loglik_segmentation(
    u: &Volume,
    seg: &Volume,
    u_c: f64,
    sigma2_alpha: f64,
    domain_mask: &[bool],
) -> Result<f64> {
    u.check_same_grid(seg)?;
    if domain_mask.len() != u.data.len() {
        return Err(Error::GridMismatch("domain mask length differs".into()));
    }
    let mut total = 0.0f64;
    for i in 0..u.data.len() {
        if !domain_mask[i] {
            continue;
        }
        let a = alpha(u.data[i] as f64, u_c, sigma2_alpha).clamp(PROB_EPS, 1.0 - PROB_EPS);
        total += if seg.data[i] >= 0.5 {
            a.ln()
        } else {
            (1.0 - a).ln()
        };
    }
    Ok(total)
}

/// Gaussian log-likelihood of the normalized FET signal over the stencil:
/// `Σ [−½·ln(2πσ²) − (y − u/b)²/(2σ²)]`.
pub fn loglik_fet(u: &Volume, fet: &Volume, stencil: &[usize], b: f64, sigma: f64) -> Result<f64> {
    u.check_same_grid(fet)?;
    if stencil.is_empty() {
        return Err(Error::InvalidArgument("empty FET stencil".into()));
    }
    if !(b > 0.0) || !(sigma > 0.0) {
        return Err(Error::InvalidArgument("b and sigma must be positive".into()));
    }
    let norm = -0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln();
    let inv_2s2 = 1.0 / (2.0 * sigma * sigma);
    let mut total = 0.0f64;
    for &i in stencil {
        let r = fet.data[i] as f64 - u.data[i] as f64 / b;
        total += norm - r * r * inv_2s2;
    }
    Ok(total)
}

/// Converts a raw PET volume to the normalized signal: subtract the median
/// over healthy tissue, divide by the peak residual, clamp to [0,1]. Returns
/// the volume plus a degenerate-input flag (peak ≤ baseline → all zeros).
pub fn normalize_fet(raw: &Volume, healthy_mask: &[bool]) -> Result<(Volume, bool)> {
    if healthy_mask.len() != raw.data.len() {
        return Err(Error::GridMismatch("healthy mask length differs".into()));
    }
    if raw.data.iter().any(|&x| !x.is_finite() || x < 0.0) {
        return Err(Error::InvalidArgument(
            "raw PET values must be finite and nonnegative".into(),
        ));
    }
    let mut healthy: Vec<f32> = raw
        .data
        .iter()
        .zip(healthy_mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .collect();
    if healthy.is_empty() {
        return Err(Error::InvalidArgument("healthy mask is empty".into()));
    }
    healthy.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = healthy.len();
    let baseline = if n % 2 == 1 {
        healthy[n / 2] as f64
    } else {
        0.5 * (healthy[n / 2 - 1] as f64 + healthy[n / 2] as f64)
    };

    let peak = raw
        .data
        .iter()
        .map(|&x| x as f64 - baseline)
        .fold(f64::NEG_INFINITY, f64::max);
    if peak <= 0.0 {
        return Ok((Volume::zeros(raw.meta), true));
    }
    let data = raw
        .data
        .iter()
        .map(|&x| (((x as f64 - baseline) / peak).clamp(0.0, 1.0)) as f32)
        .collect();
    Ok((Volume::new(raw.meta, data)?, false))
}

/// Deterministic sparse stencil: the regular subgrid with per-axis stride
/// `ceil(min_sep_mm / spacing)`, anchored at index 0, restricted to the ROI.
pub fn build_stencil(meta: &GridMeta, roi_mask: &[bool], min_sep_mm: f64) -> Vec<usize> {
    assert_eq!(roi_mask.len(), meta.voxel_count(), "roi mask length mismatch");
    let stride: [usize; 3] = std::array::from_fn(|k| {
        ((min_sep_mm / meta.spacing_mm[k]).ceil() as usize).max(1)
    });
    let mut out = Vec::new();
    let mut z = 0;
    while z < meta.dims[2] {
        let mut y = 0;
        while y < meta.dims[1] {
            let mut x = 0;
            while x < meta.dims[0] {
                let i = meta.index(x, y, z);
                if roi_mask[i] {
                    out.push(i);
                }
                x += stride[0];
            }
            y += stride[1];
        }
        z += stride[2];
    }
    out
}

/// Combined log-likelihood: both segmentations plus — when the stencil is
/// nonempty — the FET term.
pub fn loglik_total(
    u: &Volume,
    obs: &Observations,
    params: &ImagingParams,
    domain_mask: &[bool],
) -> Result<f64> {
    params.validate()?;
    let mut total = loglik_segmentation(
        u,
        &obs.seg_t1gd,
        params.uc_t1gd,
        params.sigma2_alpha,
        domain_mask,
    )?;
    total += loglik_segmentation(
        u,
        &obs.seg_flair,
        params.uc_flair,
        params.sigma2_alpha,
        domain_mask,
    )?;
    if !obs.fet_stencil.is_empty() {
        total += loglik_fet(u, &obs.fet, &obs.fet_stencil, params.b, params.sigma)?;
    }
    Ok(total)
}
