//! Prior over the 11 calibration parameters: independent log-uniform
//! densities with fixed ranges for the dynamics/imaging parameters and
//! data-driven ranges for T and the seed location.
//!
//! Sampling and MCMC proposals act in "sampling space": ln θ for the
//! log-uniform parameters, where the prior is a flat box. Seed coordinates
//! are kept in absolute grid millimeters with a plain uniform prior — a
//! log-uniform density on coordinates would depend on the frame origin.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::growth::GrowthParams;
use crate::imaging::ImagingParams;
use crate::volume::Volume;

/// Slowest front speed the dynamics prior admits, `2·√(min D_w · min ρ)`;
/// bounds how long a visible tumor of radius r can have grown.
pub fn v_min() -> f64 {
    2.0 * (0.013f64 * 0.0027).sqrt()
}

/// One parameter's prior range. `log_scale` selects log-uniform (the default
/// for all magnitude-like parameters) versus plain uniform (seed coords).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub min: f64,
    pub max: f64,
    pub log_scale: bool,
}

impl ParamRange {
    fn log_uniform(min: f64, max: f64) -> Self {
        ParamRange {
            min,
            max,
            log_scale: true,
        }
    }

    fn uniform(min: f64, max: f64) -> Self {
        ParamRange {
            min,
            max,
            log_scale: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.min < self.max
            && self.min.is_finite()
            && self.max.is_finite()
            && (!self.log_scale || self.min > 0.0);
        if !ok {
            return Err(Error::InvalidArgument(format!(
                "bad prior range [{}, {}] (log_scale {})",
                self.min, self.max, self.log_scale
            )));
        }
        Ok(())
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.min && x <= self.max
    }

    /// Log-density of this range's (proper) uniform law at any in-range point.
    pub fn log_density(&self) -> f64 {
        if self.log_scale {
            -(self.max.ln() - self.min.ln()).ln()
        } else {
            -(self.max - self.min).ln()
        }
    }

    /// Bounds in sampling space (ln θ for log-scale ranges).
    pub fn sampling_bounds(&self) -> (f64, f64) {
        if self.log_scale {
            (self.min.ln(), self.max.ln())
        } else {
            (self.min, self.max)
        }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        let (lo, hi) = self.sampling_bounds();
        let s = rng.gen_range(lo..hi);
        if self.log_scale {
            s.exp()
        } else {
            s
        }
    }
}

/// The full 11-dimensional prior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub d_w: ParamRange,
    pub rho: ParamRange,
    pub t_days: ParamRange,
    pub ic: [ParamRange; 3],
    pub uc_t1gd: ParamRange,
    pub uc_flair: ParamRange,
    pub sigma2_alpha: ParamRange,
    pub b: ParamRange,
    pub sigma: ParamRange,
    /// Diagnostics recorded by [`default_prior`].
    pub r_max_mm: f64,
    pub com_mm: [f64; 3],
}

/// One draw of all calibrated parameters, in natural units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThetaSample {
    pub d_w: f64,
    pub rho: f64,
    pub t_days: f64,
    pub ic_mm: [f64; 3],
    pub uc_t1gd: f64,
    pub uc_flair: f64,
    pub sigma2_alpha: f64,
    pub b: f64,
    pub sigma: f64,
}

/// CSV/vector column order used everywhere.
pub const THETA_COLUMNS: [&str; 11] = [
    "d_w",
    "rho",
    "t_days",
    "ic_x",
    "ic_y",
    "ic_z",
    "uc_t1gd",
    "uc_flair",
    "sigma2_alpha",
    "b",
    "sigma",
];

impl ThetaSample {
    pub fn growth_params(&self) -> GrowthParams {
        GrowthParams {
            d_w: self.d_w,
            rho: self.rho,
            t_days: self.t_days,
            ic_mm: self.ic_mm,
        }
    }

    pub fn imaging_params(&self) -> ImagingParams {
        ImagingParams {
            uc_t1gd: self.uc_t1gd,
            uc_flair: self.uc_flair,
            sigma2_alpha: self.sigma2_alpha,
            b: self.b,
            sigma: self.sigma,
        }
    }

    pub fn to_array(&self) -> [f64; 11] {
        [
            self.d_w,
            self.rho,
            self.t_days,
            self.ic_mm[0],
            self.ic_mm[1],
            self.ic_mm[2],
            self.uc_t1gd,
            self.uc_flair,
            self.sigma2_alpha,
            self.b,
            self.sigma,
        ]
    }

    pub fn from_array(a: [f64; 11]) -> Self {
        ThetaSample {
            d_w: a[0],
            rho: a[1],
            t_days: a[2],
            ic_mm: [a[3], a[4], a[5]],
            uc_t1gd: a[6],
            uc_flair: a[7],
            sigma2_alpha: a[8],
            b: a[9],
            sigma: a[10],
        }
    }
}

impl PriorSpec {
    pub fn ranges(&self) -> [&ParamRange; 11] {
        [
            &self.d_w,
            &self.rho,
            &self.t_days,
            &self.ic[0],
            &self.ic[1],
            &self.ic[2],
            &self.uc_t1gd,
            &self.uc_flair,
            &self.sigma2_alpha,
            &self.b,
            &self.sigma,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for r in self.ranges() {
            r.validate()?;
        }
        Ok(())
    }

    /// θ → sampling space (ln for log-scale parameters).
    pub fn to_sampling(&self, theta: &ThetaSample) -> [f64; 11] {
        let a = theta.to_array();
        let mut out = [0.0; 11];
        for (k, r) in self.ranges().iter().enumerate() {
            out[k] = if r.log_scale { a[k].ln() } else { a[k] };
        }
        out
    }

    /// Sampling space → θ.
    pub fn from_sampling(&self, phi: &[f64]) -> ThetaSample {
        assert_eq!(phi.len(), 11);
        let mut a = [0.0; 11];
        for (k, r) in self.ranges().iter().enumerate() {
            a[k] = if r.log_scale { phi[k].exp() } else { phi[k] };
        }
        ThetaSample::from_array(a)
    }

    /// Prior log-density in sampling space: a flat box (the log-uniform
    /// Jacobian is absorbed by the coordinate change). −∞ off-support.
    pub fn log_prior_sampling(&self, phi: &[f64]) -> f64 {
        assert_eq!(phi.len(), 11);
        let mut total = 0.0;
        for (k, r) in self.ranges().iter().enumerate() {
            let (lo, hi) = r.sampling_bounds();
            if !(phi[k] >= lo && phi[k] <= hi) {
                return f64::NEG_INFINITY;
            }
            total += r.log_density();
        }
        total
    }

    /// Prior log-density at θ (natural units). −∞ off-support.
    pub fn log_prior(&self, theta: &ThetaSample) -> f64 {
        let a = theta.to_array();
        let mut total = 0.0;
        for (k, r) in self.ranges().iter().enumerate() {
            if !r.contains(a[k]) {
                return f64::NEG_INFINITY;
            }
            total += r.log_density();
        }
        total
    }

    /// One prior draw.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> ThetaSample {
        let mut a = [0.0; 11];
        for (k, r) in self.ranges().iter().enumerate() {
            a[k] = r.sample(rng);
        }
        ThetaSample::from_array(a)
    }
}

/// Builds the default prior from the FLAIR segmentation: fixed literature
/// ranges for dynamics/imaging, T capped by the slowest admissible front
/// crossing the visible radius plus one year, and the seed confined to a
/// cube of side 2·r_max around the visible center of mass (clipped to the
/// grid).
pub fn default_prior(seg_flair: &Volume) -> Result<PriorSpec> {
    let meta = seg_flair.meta;
    let mut count = 0usize;
    let mut com = [0.0f64; 3];
    for z in 0..meta.dims[2] {
        for y in 0..meta.dims[1] {
            for x in 0..meta.dims[0] {
                if seg_flair.at(x, y, z) >= 0.5 {
                    let p = meta.position(x, y, z);
                    for k in 0..3 {
                        com[k] += p[k];
                    }
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "empty segmentation: cannot derive T and seed priors".into(),
        ));
    }
    for c in &mut com {
        *c /= count as f64;
    }
    let mut r_max2 = 0.0f64;
    for z in 0..meta.dims[2] {
        for y in 0..meta.dims[1] {
            for x in 0..meta.dims[0] {
                if seg_flair.at(x, y, z) >= 0.5 {
                    let p = meta.position(x, y, z);
                    let d2: f64 = (0..3).map(|k| (p[k] - com[k]).powi(2)).sum();
                    r_max2 = r_max2.max(d2);
                }
            }
        }
    }
    // A single-voxel segmentation would degenerate the seed cube; keep it at
    // least one voxel wide.
    let r_max = r_max2
        .sqrt()
        .max(meta.spacing_mm.iter().cloned().fold(0.0, f64::max));

    let t_max = r_max / v_min() + 365.0;
    let ic = std::array::from_fn(|k| {
        let lo = (com[k] - r_max).max(meta.origin_mm[k]);
        let hi = (com[k] + r_max)
            .min(meta.origin_mm[k] + (meta.dims[k] - 1) as f64 * meta.spacing_mm[k]);
        ParamRange::uniform(lo, hi)
    });

    let spec = PriorSpec {
        d_w: ParamRange::log_uniform(0.013, 3.8),
        rho: ParamRange::log_uniform(0.0027, 0.19),
        t_days: ParamRange::log_uniform(30.0, t_max),
        ic,
        uc_t1gd: ParamRange::log_uniform(0.5, 0.85),
        uc_flair: ParamRange::log_uniform(0.05, 0.5),
        sigma2_alpha: ParamRange::log_uniform(0.05, 0.1),
        b: ParamRange::log_uniform(0.5, 1.02),
        sigma: ParamRange::log_uniform(0.015, 0.2),
        r_max_mm: r_max,
        com_mm: com,
    };
    spec.validate()?;
    Ok(spec)
}
