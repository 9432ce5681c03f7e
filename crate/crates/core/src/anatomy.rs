//! Simulation domain: white/grey tissue fractions and the no-go region
//! (skull, ventricles), plus the diffusivity field they induce.

use crate::error::{Error, Result};
use crate::volume::{GridMeta, Volume};

/// Grey matter diffuses ten times slower than white matter; the model treats
/// this ratio as fixed rather than inferred.
pub const GREY_DIFFUSIVITY_RATIO: f64 = 0.1;

/// Tolerance for tissue fractions slightly outside [0,1].
const FRACTION_TOL: f32 = 1e-6;

/// Per-voxel tissue composition and the growth domain Ω.
#[derive(Debug, Clone)]
pub struct Anatomy {
    pub p_w: Volume,
    pub p_g: Volume,
    /// true ⇔ voxel belongs to Ω (tumor cells may occupy it).
    pub in_domain: Vec<bool>,
}

impl Anatomy {
    pub fn meta(&self) -> &GridMeta {
        &self.p_w.meta
    }

    pub fn domain_voxel_count(&self) -> usize {
        self.in_domain.iter().filter(|&&b| b).count()
    }

    /// The in-domain mask as a storable 0/1 volume.
    pub fn domain_volume(&self) -> Volume {
        crate::volume::volume_from_mask(*self.meta(), &self.in_domain)
            .expect("mask length matches meta by construction")
    }
}

fn check_unit_range(v: &Volume, name: &str) -> Result<()> {
    for (i, &x) in v.data.iter().enumerate() {
        if !x.is_finite() || x < -FRACTION_TOL || x > 1.0 + FRACTION_TOL {
            return Err(Error::InvalidArgument(format!(
                "{name} value {x} at voxel {i} is outside [0,1]"
            )));
        }
    }
    Ok(())
}

/// Builds the simulation domain from tissue-fraction maps.
///
/// A voxel joins Ω when it holds at least `threshold` total tissue and is not
/// majority CSF. Fractions are clamped to [0,1]; where they sum above 1 both
/// are scaled down proportionally so the residual (CSF/other) is nonnegative.
pub fn build_anatomy(p_w: &Volume, p_g: &Volume, csf: &Volume, threshold: f64) -> Result<Anatomy> {
    p_w.check_same_grid(p_g)?;
    p_w.check_same_grid(csf)?;
    check_unit_range(p_w, "p_w")?;
    check_unit_range(p_g, "p_g")?;
    check_unit_range(csf, "csf")?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::InvalidArgument(format!(
            "domain threshold {threshold} outside [0,1]"
        )));
    }

    let n = p_w.meta.voxel_count();
    let mut w = Vec::with_capacity(n);
    let mut g = Vec::with_capacity(n);
    let mut in_domain = Vec::with_capacity(n);
    for i in 0..n {
        let mut wi = p_w.data[i].clamp(0.0, 1.0);
        let mut gi = p_g.data[i].clamp(0.0, 1.0);
        let sum = wi + gi;
        if sum > 1.0 {
            wi /= sum;
            gi /= sum;
        }
        let total = wi + gi;
        in_domain.push(total as f64 >= threshold && total > 0.0 && csf.data[i] < 0.5);
        w.push(wi);
        g.push(gi);
    }
    Ok(Anatomy {
        p_w: Volume::new(p_w.meta, w)?,
        p_g: Volume::new(p_g.meta, g)?,
        in_domain,
    })
}

/// Voxelwise diffusivity: `p_w·D_w + p_g·D_w/10` inside Ω, zero outside.
pub fn diffusivity(anatomy: &Anatomy, d_w: f64) -> Result<Volume> {
    if !(d_w > 0.0) || !d_w.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "D_w must be positive and finite, got {d_w}"
        )));
    }
    let d_g = d_w * GREY_DIFFUSIVITY_RATIO;
    let data = anatomy
        .p_w
        .data
        .iter()
        .zip(&anatomy.p_g.data)
        .zip(&anatomy.in_domain)
        .map(|((&w, &g), &inside)| {
            if inside {
                (w as f64 * d_w + g as f64 * d_g) as f32
            } else {
                0.0
            }
        })
        .collect();
    Volume::new(*anatomy.meta(), data)
}

/// Procedural test-brain: a spherical "head" with a white-matter core, a grey
/// shell, and one off-center ventricle carved out. Isotropic 1 mm grid of
/// side `n`. Fractions ramp over one voxel at every interface so boundary
/// handling is exercised on non-binary tissue maps.
pub fn phantom_anatomy(n: usize) -> Result<Anatomy> {
    if n < 16 {
        return Err(Error::InvalidArgument(format!(
            "phantom needs n >= 16, got {n}"
        )));
    }
    let meta = GridMeta::isotropic([n, n, n], 1.0)?;
    let c = (n as f64 - 1.0) / 2.0;
    let r_brain = 0.45 * n as f64;
    let r_white = 0.35 * n as f64;
    let r_vent = 0.078 * n as f64;
    // Ventricle sits left of center, inside the white core.
    let vent = [c - 0.117 * n as f64, c, c];

    let ramp = |edge: f64, r: f64| (edge - r + 0.5).clamp(0.0, 1.0);

    let count = meta.voxel_count();
    let mut p_w = Vec::with_capacity(count);
    let mut p_g = Vec::with_capacity(count);
    let mut csf = Vec::with_capacity(count);
    for z in 0..n {
        for y in 0..n {
            for x in 0..n {
                let dx = x as f64 - c;
                let dy = y as f64 - c;
                let dz = z as f64 - c;
                let r = (dx * dx + dy * dy + dz * dz).sqrt();
                let brain = ramp(r_brain, r);
                let white = ramp(r_white, r);
                let dvx = x as f64 - vent[0];
                let dvy = y as f64 - vent[1];
                let dvz = z as f64 - vent[2];
                let rv = (dvx * dvx + dvy * dvy + dvz * dvz).sqrt();
                let vent_frac = ramp(r_vent, rv);
                let tissue = brain * (1.0 - vent_frac);
                p_w.push((white * tissue) as f32);
                p_g.push(((1.0 - white) * tissue) as f32);
                csf.push(vent_frac as f32);
            }
        }
    }
    build_anatomy(
        &Volume::new(meta, p_w)?,
        &Volume::new(meta, p_g)?,
        &Volume::new(meta, csf)?,
        0.1,
    )
}

/// Homogeneous all-white box, fully in-domain: the geometry used by the
/// travelling-wave and symmetry checks.
pub fn slab_anatomy(dims: [usize; 3], spacing_mm: f64) -> Result<Anatomy> {
    let meta = GridMeta::isotropic(dims, spacing_mm)?;
    let n = meta.voxel_count();
    Ok(Anatomy {
        p_w: Volume::new(meta, vec![1.0; n])?,
        p_g: Volume::new(meta, vec![0.0; n])?,
        in_domain: vec![true; n],
    })
}
