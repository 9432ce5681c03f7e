//! Forward tumor-growth model: Fisher-Kolmogorov reaction-diffusion on the
//! voxel grid with zero-flux boundaries on the domain Ω.
//!
//! Discretization: uniform-grid explicit finite differences. Diffusion uses
//! second-order central fluxes with the face diffusivity taken as the
//! harmonic mean of the two adjacent voxel values — zero whenever either side
//! lies outside Ω, which realizes the no-flux condition without ghost logic.
//! Each step applies the diffusion update and then the *exact* flow of the
//! logistic reaction over dt. With dt inside the stability bound the
//! diffusion update is a convex combination of values in [0,1] and the
//! logistic flow maps [0,1] onto itself, so the scheme preserves the unit
//! range by construction; a per-step clamp mops up floating-point dust and
//! its cumulative mass is tracked as a diagnostic.
//!
//! State is held in f64 on a one-voxel padded grid (branch-free stencils);
//! volumes cross the API as f32. All loops run in a fixed partition so
//! results are bitwise reproducible at any thread count.

use serde::{Deserialize, Serialize};

use crate::anatomy::{diffusivity, Anatomy};
use crate::error::{Error, Result};
use crate::par;
use crate::volume::{GridMeta, Volume};

/// Dynamics parameters of one simulated tumor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GrowthParams {
    /// White-matter diffusivity, mm²/day. Grey matter gets a tenth of it.
    #[serde(alias = "D_w")]
    pub d_w: f64,
    /// Proliferation rate, 1/day.
    pub rho: f64,
    /// Time from seeding to observation, days.
    #[serde(alias = "T")]
    pub t_days: f64,
    /// Seed center in grid millimeters.
    pub ic_mm: [f64; 3],
}

/// Discretization controls.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Fraction of the explicit stability limit actually used, in (0,1].
    pub cfl_safety: f64,
    /// Gaussian seed radius, mm (profile truncated at twice this).
    pub seed_radius_mm: f64,
    /// Peak density of the seed, in (0,1].
    pub seed_amplitude: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            cfl_safety: 0.9,
            seed_radius_mm: 1.0,
            seed_amplitude: 0.1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfl_safety > 0.0 && self.cfl_safety <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "cfl_safety must be in (0,1], got {}",
                self.cfl_safety
            )));
        }
        if !(self.seed_radius_mm > 0.0) || !self.seed_radius_mm.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "seed_radius_mm must be positive, got {}",
                self.seed_radius_mm
            )));
        }
        if !(self.seed_amplitude > 0.0 && self.seed_amplitude <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "seed_amplitude must be in (0,1], got {}",
                self.seed_amplitude
            )));
        }
        Ok(())
    }
}

/// Explicit-Euler stability bound for the diffusion term:
/// `1 / (2·D_max·(1/sx² + 1/sy² + 1/sz²))`. Returns +∞ for an all-zero
/// field; callers must then cap dt by the reaction timescale.
pub fn stable_dt(d_field: &Volume, spacing_mm: [f64; 3]) -> Result<f64> {
    let mut d_max = 0.0f64;
    for &d in &d_field.data {
        if !d.is_finite() || d < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "diffusivity must be finite and nonnegative, got {d}"
            )));
        }
        d_max = d_max.max(d as f64);
    }
    if d_max == 0.0 {
        return Ok(f64::INFINITY);
    }
    let inv_h2: f64 = spacing_mm.iter().map(|h| 1.0 / (h * h)).sum();
    Ok(1.0 / (2.0 * d_max * inv_h2))
}

/// Recheck interval (in steps) for tightening the active bounding box.
const TIGHTEN_INTERVAL: u32 = 16;

/// Low-level stepping engine on a fixed grid and diffusivity field.
///
/// Holds double-buffered padded f64 state. The update loop only visits an
/// "active box": the bounding box of the current support, grown by one voxel
/// per step (the exact reach of the 7-point stencil) and re-tightened
/// periodically, clipped to the domain bounding box. Values outside Ω stay
/// exactly zero forever.
pub struct Stepper {
    meta: GridMeta,
    /// Padded dims: meta.dims + 2 per axis.
    pdims: [usize; 3],
    /// Face coefficients D_face/h², padded layout. cx[i] couples i and i+1,
    /// cy[i] couples i and i+stride_y, cz[i] couples i and i+stride_z.
    cx: Vec<f32>,
    cy: Vec<f32>,
    cz: Vec<f32>,
    /// Per padded (y,z) row: inclusive in-domain x-range in padded coords;
    /// (1,0) marks an empty row.
    spans: Vec<(u32, u32)>,
    /// Ω membership in padded layout (spans are only row bounds).
    dom: Vec<bool>,
    /// Bounding box of Ω in padded coords, [x0,x1,y0,y1,z0,z1] inclusive.
    domain_box: [usize; 6],
    u: Vec<f64>,
    buf: Vec<f64>,
    active_box: Option<[usize; 6]>,
    steps_since_tighten: u32,
    max_stable_dt: f64,
    clamp_enabled: bool,
    clamp_mass: f64,
    voxel_volume: f64,
}

#[inline]
fn harmonic(a: f64, b: f64) -> f64 {
    if a > 0.0 && b > 0.0 {
        2.0 * a * b / (a + b)
    } else {
        0.0
    }
}

/// One fused diffusion + exact-logistic update of a contiguous row segment.
/// `i0` is the global padded index of the first voxel, `o0` the corresponding
/// index into `out` (a single z-plane slice). Returns the clamped-off mass.
#[allow(clippy::too_many_arguments)]
#[inline]
fn process_row<const CLAMP: bool>(
    out: &mut [f64],
    o0: usize,
    u: &[f64],
    cx: &[f32],
    cy: &[f32],
    cz: &[f32],
    i0: usize,
    len: usize,
    sy: usize,
    sz: usize,
    dt: f64,
    em1: f64,
) -> f64 {
    let uc = &u[i0..i0 + len];
    let uxm = &u[i0 - 1..i0 - 1 + len];
    let uxp = &u[i0 + 1..i0 + 1 + len];
    let uym = &u[i0 - sy..i0 - sy + len];
    let uyp = &u[i0 + sy..i0 + sy + len];
    let uzm = &u[i0 - sz..i0 - sz + len];
    let uzp = &u[i0 + sz..i0 + sz + len];
    let cxm = &cx[i0 - 1..i0 - 1 + len];
    let cxp = &cx[i0..i0 + len];
    let cym = &cy[i0 - sy..i0 - sy + len];
    let cyp = &cy[i0..i0 + len];
    let czm = &cz[i0 - sz..i0 - sz + len];
    let czp = &cz[i0..i0 + len];
    let o = &mut out[o0..o0 + len];
    let mut clamp_acc = 0.0;
    for k in 0..len {
        let ui = uc[k];
        let d = cxm[k] as f64 * (uxm[k] - ui)
            + cxp[k] as f64 * (uxp[k] - ui)
            + cym[k] as f64 * (uym[k] - ui)
            + cyp[k] as f64 * (uyp[k] - ui)
            + czm[k] as f64 * (uzm[k] - ui)
            + czp[k] as f64 * (uzp[k] - ui);
        let v = ui + dt * d;
        let t = v * em1;
        let w = (v + t) / (1.0 + t);
        if CLAMP {
            let c = w.clamp(0.0, 1.0);
            clamp_acc += (w - c).abs();
            o[k] = c;
        } else {
            o[k] = w;
        }
    }
    clamp_acc
}

struct PlaneJob<'a> {
    pz: usize,
    out: &'a mut [f64],
    clamp_acc: f64,
}

impl Stepper {
    /// Builds an engine for the given diffusivity field and domain mask.
    pub fn new(meta: GridMeta, d_field: &Volume, in_domain: &[bool]) -> Result<Self> {
        meta.validate()?;
        if d_field.meta != meta {
            return Err(Error::GridMismatch(
                "diffusivity grid differs from target grid".into(),
            ));
        }
        if in_domain.len() != meta.voxel_count() {
            return Err(Error::GridMismatch(format!(
                "domain mask has {} entries for {} voxels",
                in_domain.len(),
                meta.voxel_count()
            )));
        }
        let max_stable_dt = stable_dt(d_field, meta.spacing_mm)?;

        let [nx, ny, nz] = meta.dims;
        let pdims = [nx + 2, ny + 2, nz + 2];
        let pn = pdims[0] * pdims[1] * pdims[2];
        let sy = pdims[0];
        let sz = pdims[0] * pdims[1];

        // Padded copies of D and the Ω mask, zero/false in the shell.
        let mut d_pad = vec![0.0f64; pn];
        let mut dom = vec![false; pn];
        for z in 0..nz {
            for y in 0..ny {
                let row = meta.index(0, y, z);
                let prow = 1 + sy * (y + 1) + sz * (z + 1);
                for x in 0..nx {
                    if in_domain[row + x] {
                        d_pad[prow + x] = d_field.data[row + x] as f64;
                        dom[prow + x] = true;
                    }
                }
            }
        }

        let [hx, hy, hz] = meta.spacing_mm;
        let mut cx = vec![0.0f32; pn];
        let mut cy = vec![0.0f32; pn];
        let mut cz = vec![0.0f32; pn];
        for i in 0..pn - sz {
            if i % pdims[0] < pdims[0] - 1 {
                cx[i] = (harmonic(d_pad[i], d_pad[i + 1]) / (hx * hx)) as f32;
            }
            if (i / sy) % pdims[1] < pdims[1] - 1 {
                cy[i] = (harmonic(d_pad[i], d_pad[i + sy]) / (hy * hy)) as f32;
            }
            cz[i] = (harmonic(d_pad[i], d_pad[i + sz]) / (hz * hz)) as f32;
        }

        // In-domain x-span per padded row, and the domain bounding box.
        let mut spans = vec![(1u32, 0u32); pdims[1] * pdims[2]];
        let mut dbox: Option<[usize; 6]> = None;
        for z in 0..nz {
            for y in 0..ny {
                let row = meta.index(0, y, z);
                let mut lo = usize::MAX;
                let mut hi = 0;
                for x in 0..nx {
                    if in_domain[row + x] {
                        lo = lo.min(x);
                        hi = hi.max(x);
                    }
                }
                if lo != usize::MAX {
                    let (px0, px1) = (lo + 1, hi + 1);
                    spans[(z + 1) * pdims[1] + (y + 1)] = (px0 as u32, px1 as u32);
                    let (py, pz) = (y + 1, z + 1);
                    dbox = Some(match dbox {
                        None => [px0, px1, py, py, pz, pz],
                        Some(b) => [
                            b[0].min(px0),
                            b[1].max(px1),
                            b[2].min(py),
                            b[3].max(py),
                            b[4].min(pz),
                            b[5].max(pz),
                        ],
                    });
                }
            }
        }
        let domain_box = dbox.ok_or_else(|| {
            Error::InvalidArgument("domain mask is empty; nothing can grow".into())
        })?;

        Ok(Stepper {
            meta,
            pdims,
            cx,
            cy,
            cz,
            spans,
            dom,
            domain_box,
            u: vec![0.0; pn],
            buf: vec![0.0; pn],
            active_box: None,
            steps_since_tighten: 0,
            max_stable_dt,
            clamp_enabled: true,
            clamp_mass: 0.0,
            voxel_volume: hx * hy * hz,
        })
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    /// Hard stability limit for this field (may be +∞ when D ≡ 0).
    pub fn max_stable_dt(&self) -> f64 {
        self.max_stable_dt
    }

    /// Disables (or re-enables) the per-step range clamp; used by tests that
    /// verify the scheme preserves [0,1] on its own.
    pub fn set_clamping(&mut self, on: bool) {
        self.clamp_enabled = on;
    }

    /// Cumulative mass removed by clamping (in density·mm³).
    pub fn clamp_mass(&self) -> f64 {
        self.clamp_mass
    }

    /// Replaces the state. Values on voxels outside Ω are dropped (the
    /// zero-outside invariant cannot be broken from outside).
    pub fn set_state(&mut self, v: &Volume) -> Result<()> {
        if v.meta != self.meta {
            return Err(Error::GridMismatch("state grid differs".into()));
        }
        self.u.iter_mut().for_each(|x| *x = 0.0);
        self.buf.iter_mut().for_each(|x| *x = 0.0);
        let [nx, ny, nz] = self.meta.dims;
        let sy = self.pdims[0];
        let sz = self.pdims[0] * self.pdims[1];
        for z in 0..nz {
            for y in 0..ny {
                let row = self.meta.index(0, y, z);
                let prow = 1 + sy * (y + 1) + sz * (z + 1);
                for x in 0..nx {
                    if self.dom[prow + x] {
                        self.u[prow + x] = v.data[row + x] as f64;
                    }
                }
            }
        }
        self.clamp_mass = 0.0;
        self.steps_since_tighten = 0;
        self.active_box = None;
        self.active_box = self.support_box();
        Ok(())
    }

    /// Writes a value at one in-Ω voxel — seeding helper.
    pub fn deposit(&mut self, x: usize, y: usize, z: usize, value: f64) -> Result<()> {
        if x >= self.meta.dims[0] || y >= self.meta.dims[1] || z >= self.meta.dims[2] {
            return Err(Error::InvalidArgument("voxel out of grid".into()));
        }
        let (px, py, pz) = (x + 1, y + 1, z + 1);
        let pi = px + self.pdims[0] * (py + self.pdims[1] * pz);
        if !self.dom[pi] {
            return Err(Error::InvalidArgument(format!(
                "voxel ({x},{y},{z}) is outside the growth domain"
            )));
        }
        self.u[pi] = value;
        if value != 0.0 {
            self.grow_box_to(px, py, pz);
        }
        Ok(())
    }

    fn grow_box_to(&mut self, px: usize, py: usize, pz: usize) {
        self.active_box = Some(match self.active_box {
            None => [px, px, py, py, pz, pz],
            Some(b) => [
                b[0].min(px),
                b[1].max(px),
                b[2].min(py),
                b[3].max(py),
                b[4].min(pz),
                b[5].max(pz),
            ],
        });
    }

    /// Tight bounding box of the current support (padded coords).
    fn support_box(&self) -> Option<[usize; 6]> {
        let sy = self.pdims[0];
        let sz = self.pdims[0] * self.pdims[1];
        let scan = self.active_box.unwrap_or(self.domain_box);
        let mut b: Option<[usize; 6]> = None;
        for pz in scan[4]..=scan[5] {
            for py in scan[2]..=scan[3] {
                let row = pz * sz + py * sy;
                let mut lo = usize::MAX;
                let mut hi = 0;
                for px in scan[0]..=scan[1] {
                    if self.u[row + px] != 0.0 {
                        lo = lo.min(px);
                        hi = hi.max(px);
                    }
                }
                if lo != usize::MAX {
                    b = Some(match b {
                        None => [lo, hi, py, py, pz, pz],
                        Some(bb) => [
                            bb[0].min(lo),
                            bb[1].max(hi),
                            bb[2].min(py),
                            bb[3].max(py),
                            bb[4].min(pz),
                            bb[5].max(pz),
                        ],
                    });
                }
            }
        }
        b
    }

    /// Advances one explicit step of size dt. `rho` may be zero (pure
    /// diffusion). Errors if dt exceeds the stability bound.
    pub fn step(&mut self, rho: f64, dt: f64) -> Result<()> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if !(rho >= 0.0) || !rho.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "rho must be nonnegative, got {rho}"
            )));
        }
        if dt > self.max_stable_dt * (1.0 + 1e-9) {
            return Err(Error::Numerical(format!(
                "dt {dt} violates the stability bound {}",
                self.max_stable_dt
            )));
        }
        self.step_unchecked(rho, dt);
        Ok(())
    }

    fn step_unchecked(&mut self, rho: f64, dt: f64) {
        // Box maintenance: periodically re-tighten to the true support, then
        // grow by the one-voxel reach of this step, clipped to Ω's box.
        self.steps_since_tighten += 1;
        if self.steps_since_tighten >= TIGHTEN_INTERVAL {
            self.active_box = self.support_box();
            self.steps_since_tighten = 0;
        }
        let Some(b) = self.active_box else {
            return; // u ≡ 0 is a fixed point
        };
        let d = self.domain_box;
        let bx = [
            b[0].saturating_sub(1).max(d[0]),
            (b[1] + 1).min(d[1]),
            b[2].saturating_sub(1).max(d[2]),
            (b[3] + 1).min(d[3]),
            b[4].saturating_sub(1).max(d[4]),
            (b[5] + 1).min(d[5]),
        ];
        self.active_box = Some(bx);

        // exp(ρ·dt)−1, argument capped to keep the map finite for extreme
        // test inputs; the saturated map is the correct ρ·dt → ∞ limit.
        let em1 = ((rho * dt).min(700.0)).exp_m1();
        let sy = self.pdims[0];
        let sz = self.pdims[0] * self.pdims[1];
        let plane = sz;
        let clamp = self.clamp_enabled;

        let u = &self.u;
        let cx = &self.cx;
        let cy = &self.cy;
        let cz = &self.cz;
        let spans = &self.spans;
        let pdims1 = self.pdims[1];

        let mut jobs: Vec<PlaneJob> = self
            .buf
            .chunks_mut(plane)
            .enumerate()
            .filter(|(pz, _)| *pz >= bx[4] && *pz <= bx[5])
            .map(|(pz, out)| PlaneJob {
                pz,
                out,
                clamp_acc: 0.0,
            })
            .collect();

        par::for_each_indexed(&mut jobs, |_, job| {
            let pz = job.pz;
            let mut acc = 0.0;
            for py in bx[2]..=bx[3] {
                let (s0, s1) = spans[pz * pdims1 + py];
                let x0 = (s0 as usize).max(bx[0]);
                let x1 = (s1 as usize).min(bx[1]);
                if x0 > x1 {
                    continue;
                }
                let len = x1 - x0 + 1;
                let i0 = pz * plane + py * sy + x0;
                let o0 = py * sy + x0;
                acc += if clamp {
                    process_row::<true>(job.out, o0, u, cx, cy, cz, i0, len, sy, sz, dt, em1)
                } else {
                    process_row::<false>(job.out, o0, u, cx, cy, cz, i0, len, sy, sz, dt, em1)
                };
            }
            job.clamp_acc = acc;
        });

        // Fixed (ascending-z) reduction order for the diagnostic.
        let step_clamp: f64 = jobs.iter().map(|j| j.clamp_acc).sum();
        self.clamp_mass += step_clamp * self.voxel_volume;
        drop(jobs);
        std::mem::swap(&mut self.u, &mut self.buf);
    }

    /// Total mass ∫u dV, summed over Ω in a fixed order.
    pub fn mass(&self) -> f64 {
        let sy = self.pdims[0];
        let sz = self.pdims[0] * self.pdims[1];
        let mut total = 0.0;
        for pz in self.domain_box[4]..=self.domain_box[5] {
            for py in self.domain_box[2]..=self.domain_box[3] {
                let (s0, s1) = self.spans[pz * self.pdims[1] + py];
                if s0 > s1 {
                    continue;
                }
                let row = pz * sz + py * sy;
                for px in s0 as usize..=s1 as usize {
                    total += self.u[row + px];
                }
            }
        }
        total * self.voxel_volume
    }

    /// Current state as an f32 volume (outside-Ω voxels are exactly zero).
    pub fn state_volume(&self) -> Volume {
        let [nx, ny, nz] = self.meta.dims;
        let sy = self.pdims[0];
        let sz = self.pdims[0] * self.pdims[1];
        let mut data = vec![0.0f32; self.meta.voxel_count()];
        for z in 0..nz {
            for y in 0..ny {
                let row = self.meta.index(0, y, z);
                let prow = 1 + sy * (y + 1) + sz * (z + 1);
                for x in 0..nx {
                    data[row + x] = self.u[prow + x] as f32;
                }
            }
        }
        Volume {
            meta: self.meta,
            data,
        }
    }
}

/// One explicit step as a pure function on volumes; the low-overhead path for
/// repeated stepping is [`Stepper`].
pub fn step(u: &Volume, anatomy: &Anatomy, d_field: &Volume, rho: f64, dt: f64) -> Result<Volume> {
    u.check_same_grid(d_field)?;
    if anatomy.meta() != &u.meta {
        return Err(Error::GridMismatch("anatomy grid differs".into()));
    }
    let mut stepper = Stepper::new(u.meta, d_field, &anatomy.in_domain)?;
    stepper.set_state(u)?;
    stepper.step(rho, dt)?;
    Ok(stepper.state_volume())
}

/// A configured simulation from seed to observation time.
pub struct Simulation {
    stepper: Stepper,
    rho: f64,
    dt: f64,
    n_full_steps: u64,
    remainder_dt: f64,
    ran: bool,
}

impl Simulation {
    pub fn new(anatomy: &Anatomy, params: &GrowthParams, config: &SolverConfig) -> Result<Self> {
        config.validate()?;
        let finite = params.d_w.is_finite()
            && params.rho.is_finite()
            && params.t_days.is_finite()
            && params.ic_mm.iter().all(|c| c.is_finite());
        if !finite {
            return Err(Error::InvalidArgument(
                "growth parameters must be finite".into(),
            ));
        }
        if !(params.d_w > 0.0 && params.rho > 0.0 && params.t_days > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "D_w, rho, T must be positive (got {}, {}, {})",
                params.d_w, params.rho, params.t_days
            )));
        }
        let meta = *anatomy.meta();
        let min_extent = (0..3)
            .map(|k| (meta.dims[k] - 1) as f64 * meta.spacing_mm[k])
            .fold(f64::INFINITY, f64::min);
        if 4.0 * config.seed_radius_mm > min_extent {
            return Err(Error::InvalidArgument(format!(
                "grid extent {min_extent} mm too small for seed radius {} mm",
                config.seed_radius_mm
            )));
        }
        // Seed center must land on an in-domain voxel.
        let mut center = [0usize; 3];
        for k in 0..3 {
            let f = (params.ic_mm[k] - meta.origin_mm[k]) / meta.spacing_mm[k];
            let i = f.round();
            if i < 0.0 || i >= meta.dims[k] as f64 {
                return Err(Error::InvalidArgument(format!(
                    "seed center {:?} mm lies outside the grid",
                    params.ic_mm
                )));
            }
            center[k] = i as usize;
        }
        if !anatomy.in_domain[meta.index(center[0], center[1], center[2])] {
            return Err(Error::InvalidArgument(format!(
                "seed center {:?} mm maps to a voxel outside the growth domain",
                params.ic_mm
            )));
        }

        let d_field = diffusivity(anatomy, params.d_w)?;
        let mut stepper = Stepper::new(meta, &d_field, &anatomy.in_domain)?;

        // Mollified seed: amplitude·exp(−r²/R²), truncated at 2R, Ω-masked.
        let r2_cut = (2.0 * config.seed_radius_mm).powi(2);
        let inv_r2 = 1.0 / (config.seed_radius_mm * config.seed_radius_mm);
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for k in 0..3 {
            let a = (params.ic_mm[k] - 2.0 * config.seed_radius_mm - meta.origin_mm[k])
                / meta.spacing_mm[k];
            let b = (params.ic_mm[k] + 2.0 * config.seed_radius_mm - meta.origin_mm[k])
                / meta.spacing_mm[k];
            lo[k] = (a.ceil() as i64).clamp(0, meta.dims[k] as i64 - 1) as usize;
            hi[k] = (b.floor() as i64).clamp(0, meta.dims[k] as i64 - 1) as usize;
        }
        let mut seeded = false;
        for z in lo[2]..=hi[2] {
            for y in lo[1]..=hi[1] {
                for x in lo[0]..=hi[0] {
                    if !anatomy.in_domain[meta.index(x, y, z)] {
                        continue;
                    }
                    let p = meta.position(x, y, z);
                    let r2 = (0..3).map(|k| (p[k] - params.ic_mm[k]).powi(2)).sum::<f64>();
                    if r2 <= r2_cut {
                        stepper.deposit(x, y, z, config.seed_amplitude * (-r2 * inv_r2).exp())?;
                        seeded = true;
                    }
                }
            }
        }
        if !seeded {
            return Err(Error::InvalidArgument(
                "seed radius too small to reach any voxel center".into(),
            ));
        }

        // Fixed dt honoring both diffusion stability and reaction resolution,
        // plus a final partial step to land exactly on T.
        let cap = 0.1 / params.rho;
        let dt = config.cfl_safety * stepper.max_stable_dt().min(cap);
        let n_full = (params.t_days / dt).floor();
        let remainder = params.t_days - n_full * dt;
        let (n_full_steps, remainder_dt) = if remainder > dt * 1e-9 {
            (n_full as u64, remainder)
        } else {
            (n_full as u64, 0.0)
        };

        Ok(Simulation {
            stepper,
            rho: params.rho,
            dt,
            n_full_steps,
            remainder_dt,
            ran: false,
        })
    }

    /// Step size used for the full steps.
    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Number of steps run() will take (including any final partial one).
    pub fn planned_steps(&self) -> u64 {
        self.n_full_steps + (self.remainder_dt > 0.0) as u64
    }

    pub fn run(&mut self) -> Result<()> {
        if self.ran {
            return Err(Error::InvalidArgument("simulation already ran".into()));
        }
        for _ in 0..self.n_full_steps {
            self.stepper.step_unchecked(self.rho, self.dt);
        }
        if self.remainder_dt > 0.0 {
            self.stepper.step_unchecked(self.rho, self.remainder_dt);
        }
        self.ran = true;
        Ok(())
    }

    pub fn result_volume(&self) -> Volume {
        self.stepper.state_volume()
    }

    pub fn mass(&self) -> f64 {
        self.stepper.mass()
    }

    pub fn clamp_mass(&self) -> f64 {
        self.stepper.clamp_mass()
    }
}

/// Runs the forward model M_u: density after `t_days` of growth.
pub fn simulate(anatomy: &Anatomy, params: &GrowthParams, config: &SolverConfig) -> Result<Volume> {
    let mut sim = Simulation::new(anatomy, params, config)?;
    sim.run()?;
    Ok(sim.result_volume())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anatomy::{phantom_anatomy, slab_anatomy};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    /// Reference stepper: naive triple loop over the unpadded grid with the
    /// same arithmetic (term order, f32 coefficients, exact logistic map).
    /// No spans, no active box, no padding — the oracle for the fast path.
    fn reference_step(
        u: &[f64],
        d: &[f32],
        in_domain: &[bool],
        meta: &GridMeta,
        rho: f64,
        dt: f64,
        clamp: bool,
    ) -> Vec<f64> {
        let [nx, ny, nz] = meta.dims;
        let [hx, hy, hz] = meta.spacing_mm;
        let dd = |x: i64, y: i64, z: i64| -> f64 {
            if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                return 0.0;
            }
            let i = meta.index(x as usize, y as usize, z as usize);
            if in_domain[i] {
                d[i] as f64
            } else {
                0.0
            }
        };
        let uu = |x: i64, y: i64, z: i64| -> f64 {
            if x < 0 || y < 0 || z < 0 || x >= nx as i64 || y >= ny as i64 || z >= nz as i64 {
                return 0.0;
            }
            u[meta.index(x as usize, y as usize, z as usize)]
        };
        let em1 = ((rho * dt).min(700.0)).exp_m1();
        let mut out = vec![0.0; u.len()];
        for z in 0..nz as i64 {
            for y in 0..ny as i64 {
                for x in 0..nx as i64 {
                    let i = meta.index(x as usize, y as usize, z as usize);
                    if !in_domain[i] {
                        continue;
                    }
                    let ui = u[i];
                    let face = |a: f64, b: f64, h: f64| harmonic(a, b) / (h * h);
                    let here = dd(x, y, z);
                    let diff = (face(dd(x - 1, y, z), here, hx) as f32) as f64
                        * (uu(x - 1, y, z) - ui)
                        + (face(here, dd(x + 1, y, z), hx) as f32) as f64 * (uu(x + 1, y, z) - ui)
                        + (face(dd(x, y - 1, z), here, hy) as f32) as f64 * (uu(x, y - 1, z) - ui)
                        + (face(here, dd(x, y + 1, z), hy) as f32) as f64 * (uu(x, y + 1, z) - ui)
                        + (face(dd(x, y, z - 1), here, hz) as f32) as f64 * (uu(x, y, z - 1) - ui)
                        + (face(here, dd(x, y, z + 1), hz) as f32) as f64 * (uu(x, y, z + 1) - ui);
                    let v = ui + dt * diff;
                    let t = v * em1;
                    let w = (v + t) / (1.0 + t);
                    out[i] = if clamp { w.clamp(0.0, 1.0) } else { w };
                }
            }
        }
        out
    }

    /// Independent scalar RK4 integrator for du/dt = ρu(1−u).
    fn logistic_rk4(u0: f64, rho: f64, t: f64, n: usize) -> f64 {
        let h = t / n as f64;
        let f = |u: f64| rho * u * (1.0 - u);
        let mut u = u0;
        for _ in 0..n {
            let k1 = f(u);
            let k2 = f(u + 0.5 * h * k1);
            let k3 = f(u + 0.5 * h * k2);
            let k4 = f(u + h * k3);
            u += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        u
    }

    #[test]
    fn stable_dt_matches_formula() {
        let meta = GridMeta::isotropic([2, 2, 2], 1.0).unwrap();
        let d = Volume::new(meta, vec![0.13; 8]).unwrap();
        let dt = stable_dt(&d, meta.spacing_mm).unwrap();
        assert_relative_eq!(dt, 1.0 / (2.0 * 0.13 * 3.0), max_relative = 1e-9);
        assert_relative_eq!(dt, 1.282, max_relative = 1e-3);

        let d2 = Volume::new(meta, vec![0.26; 8]).unwrap();
        assert_relative_eq!(
            stable_dt(&d2, meta.spacing_mm).unwrap(),
            dt / 2.0,
            max_relative = 1e-12
        );
        // Doubling isotropic spacing quadruples the bound.
        assert_relative_eq!(
            stable_dt(&d, [2.0, 2.0, 2.0]).unwrap(),
            4.0 * dt,
            max_relative = 1e-12
        );
    }

    #[test]
    fn stable_dt_edge_cases() {
        let meta = GridMeta::isotropic([2, 1, 1], 1.0).unwrap();
        let zero = Volume::new(meta, vec![0.0; 2]).unwrap();
        assert!(stable_dt(&zero, meta.spacing_mm).unwrap().is_infinite());
        let neg = Volume::new(meta, vec![-0.1, 0.0]).unwrap();
        assert!(stable_dt(&neg, meta.spacing_mm).is_err());
        let nan = Volume::new(meta, vec![f32::NAN, 0.0]).unwrap();
        assert!(stable_dt(&nan, meta.spacing_mm).is_err());
    }

    #[test]
    fn zero_diffusion_zero_reaction_is_identity() {
        let a = phantom_anatomy(20).unwrap();
        let meta = *a.meta();
        let mut u = Volume::zeros(meta);
        for (i, x) in u.data.iter_mut().enumerate() {
            if a.in_domain[i] {
                *x = (i % 7) as f32 / 10.0;
            }
        }
        let d = Volume::new(meta, vec![0.0; meta.voxel_count()]).unwrap();
        let out = step(&u, &a, &d, 0.0, 0.5).unwrap();
        assert_eq!(out.data, u.data);
    }

    #[test]
    fn saturated_density_is_a_fixed_point() {
        let a = phantom_anatomy(20).unwrap();
        let meta = *a.meta();
        let mut u = Volume::zeros(meta);
        for (i, x) in u.data.iter_mut().enumerate() {
            if a.in_domain[i] {
                *x = 1.0;
            }
        }
        let d = diffusivity(&a, 0.13).unwrap();
        let dt = 0.9 * stable_dt(&d, meta.spacing_mm).unwrap();
        let out = step(&u, &a, &d, 0.05, dt).unwrap();
        assert_eq!(out.data, u.data, "u ≡ 1 on Ω must be stationary");
    }

    #[test]
    fn zero_state_stays_zero() {
        let a = phantom_anatomy(20).unwrap();
        let d = diffusivity(&a, 0.13).unwrap();
        let mut s = Stepper::new(*a.meta(), &d, &a.in_domain).unwrap();
        for _ in 0..5 {
            s.step(0.1, 1.0).unwrap();
        }
        assert!(s.state_volume().data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn logistic_growth_matches_closed_form_and_rk4() {
        // One in-domain voxel with D = 0: pure logistic ODE.
        let meta = GridMeta::isotropic([1, 1, 1], 1.0).unwrap();
        let d = Volume::new(meta, vec![0.0]).unwrap();
        let mut s = Stepper::new(meta, &d, &[true]).unwrap();
        s.set_state(&Volume::new(meta, vec![0.1]).unwrap()).unwrap();
        let (rho, t_days) = (0.1, 30.0);
        let dt = 0.9;
        let n_full = (t_days / dt).floor() as usize;
        for _ in 0..n_full {
            s.step(rho, dt).unwrap();
        }
        s.step(rho, t_days - n_full as f64 * dt).unwrap();
        let got = s.state_volume().data[0] as f64;

        let e = (rho * t_days).exp();
        let exact = 0.1 * e / (1.0 + 0.1 * (e - 1.0));
        assert_relative_eq!(exact, 0.6906, max_relative = 1e-4);
        assert_relative_eq!(got, exact, max_relative = 1e-6);
        let rk4 = logistic_rk4(0.1, rho, t_days, 4000);
        assert_relative_eq!(got, rk4, max_relative = 1e-8);
    }

    #[test]
    fn mass_conserved_without_reaction() {
        let a = phantom_anatomy(32).unwrap();
        let d = diffusivity(&a, 0.5).unwrap();
        let mut s = Stepper::new(*a.meta(), &d, &a.in_domain).unwrap();
        let meta = *a.meta();
        let mut u0 = Volume::zeros(meta);
        // Blob near the ventricle so flux skims the excluded notch.
        for z in 10..20 {
            for y in 10..20 {
                for x in 8..18 {
                    if a.in_domain[meta.index(x, y, z)] {
                        u0.set(x, y, z, 0.8);
                    }
                }
            }
        }
        s.set_state(&u0).unwrap();
        let m0 = s.mass();
        assert!(m0 > 0.0);
        let dt = 0.9 * s.max_stable_dt();
        for _ in 0..300 {
            s.step(0.0, dt).unwrap();
        }
        let m1 = s.mass();
        assert!(
            ((m1 - m0) / m0).abs() < 1e-6,
            "mass drifted: {m0} -> {m1}"
        );
    }

    #[test]
    fn mass_grows_monotonically_with_reaction() {
        let a = phantom_anatomy(24).unwrap();
        let d = diffusivity(&a, 0.2).unwrap();
        let mut s = Stepper::new(*a.meta(), &d, &a.in_domain).unwrap();
        let meta = *a.meta();
        let mut u0 = Volume::zeros(meta);
        u0.set(12, 12, 12, 0.3);
        s.set_state(&u0).unwrap();
        let dt = 0.9 * s.max_stable_dt();
        let mut prev = s.mass();
        for _ in 0..50 {
            s.step(0.05, dt).unwrap();
            let m = s.mass();
            assert!(m > prev, "mass must strictly increase ({prev} -> {m})");
            prev = m;
        }
    }

    #[test]
    fn fast_path_matches_reference_on_random_domains() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for trial in 0..4 {
            let dims = [
                rng.gen_range(5..12),
                rng.gen_range(5..12),
                rng.gen_range(5..12),
            ];
            let meta = GridMeta::new(
                dims,
                [
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.5..2.0),
                    rng.gen_range(0.5..2.0),
                ],
                [0.0; 3],
            )
            .unwrap();
            let n = meta.voxel_count();
            // Random blocky domain with guaranteed interior content.
            let mut in_domain: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
            in_domain[meta.index(dims[0] / 2, dims[1] / 2, dims[2] / 2)] = true;
            let d_data: Vec<f32> = (0..n).map(|_| rng.gen_range(0.0..0.5)).collect();
            let d = Volume::new(meta, d_data.clone()).unwrap();
            let mut u: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            for (i, v) in u.iter_mut().enumerate() {
                if !in_domain[i] {
                    *v = 0.0;
                }
            }

            let mut s = Stepper::new(meta, &d, &in_domain).unwrap();
            let u_volume =
                Volume::new(meta, u.iter().map(|&x| x as f32).collect()).unwrap();
            s.set_state(&u_volume).unwrap();
            // f32 state round-trip: mirror it in the reference input.
            let mut u_ref: Vec<f64> = u_volume.data.iter().map(|&x| x as f64).collect();
            for (i, v) in u_ref.iter_mut().enumerate() {
                if !in_domain[i] {
                    *v = 0.0;
                }
            }

            let dt = 0.9 * s.max_stable_dt().min(2.0);
            let rho = 0.04;
            // Many steps so the active box tightens at least once.
            for _ in 0..40 {
                s.step(rho, dt).unwrap();
                u_ref = reference_step(&u_ref, &d.data, &in_domain, &meta, rho, dt, true);
            }
            let got = s.state_volume();
            for i in 0..n {
                let want = u_ref[i] as f32;
                assert!(
                    got.data[i].to_bits() == want.to_bits(),
                    "trial {trial}: voxel {i}: {} vs {}",
                    got.data[i],
                    want
                );
            }
        }
    }

    #[test]
    fn range_preserved_without_clamping() {
        let a = phantom_anatomy(24).unwrap();
        let d = diffusivity(&a, 0.3).unwrap();
        let mut s = Stepper::new(*a.meta(), &d, &a.in_domain).unwrap();
        s.set_clamping(false);
        let meta = *a.meta();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut u0 = Volume::zeros(meta);
        for i in 0..meta.voxel_count() {
            if a.in_domain[i] {
                u0.data[i] = rng.gen_range(0.0..=1.0);
            }
        }
        s.set_state(&u0).unwrap();
        let dt = 0.99 * s.max_stable_dt();
        for _ in 0..200 {
            s.step(0.1, dt).unwrap();
        }
        let out = s.state_volume();
        for &x in &out.data {
            assert!(
                (-1e-9..=1.0 + 1e-9).contains(&(x as f64)),
                "value {x} escaped [0,1]"
            );
        }
        assert_eq!(s.clamp_mass(), 0.0, "clamping was disabled");
    }

    #[test]
    fn clamp_mass_negligible_in_normal_runs() {
        let a = phantom_anatomy(32).unwrap();
        let params = GrowthParams {
            d_w: 0.13,
            rho: 0.025,
            t_days: 120.0,
            ic_mm: [18.0, 16.0, 16.0],
        };
        let mut sim = Simulation::new(&a, &params, &SolverConfig::default()).unwrap();
        sim.run().unwrap();
        assert!(sim.mass() > 0.0);
        assert!(sim.clamp_mass() < 1e-6 * sim.mass());
    }

    #[test]
    fn cube_symmetry_preserved() {
        // Homogeneous cube, seed at the exact center: u must be invariant
        // under all 48 signed axis permutations.
        let n = 17;
        let a = slab_anatomy([n, n, n], 1.0).unwrap();
        let c = (n as f64 - 1.0) / 2.0;
        let params = GrowthParams {
            d_w: 0.2,
            rho: 0.05,
            t_days: 60.0,
            ic_mm: [c, c, c],
        };
        let u = simulate(&a, &params, &SolverConfig::default()).unwrap();
        let meta = u.meta;
        let perms = [
            [0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0],
        ];
        let mut worst = 0.0f64;
        for p in perms {
            for signs in 0..8u32 {
                for z in 0..n {
                    for y in 0..n {
                        for x in 0..n {
                            let idx = [x, y, z];
                            let mut m = [idx[p[0]], idx[p[1]], idx[p[2]]];
                            for k in 0..3 {
                                if signs >> k & 1 == 1 {
                                    m[k] = n - 1 - m[k];
                                }
                            }
                            let va = u.at(x, y, z) as f64;
                            let vb = u.at(m[0], m[1], m[2]) as f64;
                            worst = worst.max((va - vb).abs());
                        }
                    }
                }
            }
        }
        assert!(worst <= 1e-6, "symmetry violation {worst}");
    }

    #[test]
    fn simulate_is_deterministic_and_thread_count_invariant() {
        let a = phantom_anatomy(24).unwrap();
        let params = GrowthParams {
            d_w: 0.3,
            rho: 0.05,
            t_days: 40.0,
            ic_mm: [14.0, 12.0, 12.0],
        };
        let cfg = SolverConfig::default();
        crate::par::set_thread_limit(1);
        let serial = simulate(&a, &params, &cfg).unwrap();
        let serial2 = simulate(&a, &params, &cfg).unwrap();
        crate::par::set_thread_limit(3);
        let parallel = simulate(&a, &params, &cfg).unwrap();
        crate::par::set_thread_limit(0);
        let bits = |v: &Volume| v.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&serial), bits(&serial2));
        assert_eq!(bits(&serial), bits(&parallel));
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let a = phantom_anatomy(24).unwrap();
        let ok = GrowthParams {
            d_w: 0.1,
            rho: 0.02,
            t_days: 10.0,
            ic_mm: [12.0, 12.0, 12.0],
        };
        let cfg = SolverConfig::default();
        assert!(Simulation::new(&a, &GrowthParams { d_w: f64::NAN, ..ok }, &cfg).is_err());
        assert!(Simulation::new(&a, &GrowthParams { rho: 0.0, ..ok }, &cfg).is_err());
        assert!(Simulation::new(&a, &GrowthParams { t_days: -1.0, ..ok }, &cfg).is_err());
        // Outside the grid entirely.
        assert!(Simulation::new(
            &a,
            &GrowthParams { ic_mm: [-5.0, 0.0, 0.0], ..ok },
            &cfg
        )
        .is_err());
        // Inside the grid but outside Ω (corner voxel of the phantom).
        assert!(Simulation::new(
            &a,
            &GrowthParams { ic_mm: [0.0, 0.0, 0.0], ..ok },
            &cfg
        )
        .is_err());
        // Seed radius too large for a tiny grid.
        let tiny = slab_anatomy([5, 5, 5], 1.0).unwrap();
        assert!(Simulation::new(
            &tiny,
            &GrowthParams { ic_mm: [2.0, 2.0, 2.0], ..ok },
            &SolverConfig { seed_radius_mm: 2.0, ..SolverConfig::default() }
        )
        .is_err());
        // Stability bound enforced by the one-shot stepper.
        let d = diffusivity(&a, 1.0).unwrap();
        let meta = *a.meta();
        let u = Volume::zeros(meta);
        let bound = stable_dt(&d, meta.spacing_mm).unwrap();
        assert!(step(&u, &a, &d, 0.0, bound * 1.5).is_err());
        assert!(step(&u, &a, &d, 0.0, bound * 0.99).is_ok());
    }

    #[test]
    fn partial_final_step_lands_on_t() {
        let a = phantom_anatomy(24).unwrap();
        let params = GrowthParams {
            d_w: 0.3,
            rho: 0.05,
            t_days: 10.0,
            ic_mm: [12.0, 12.0, 12.0],
        };
        let sim = Simulation::new(&a, &params, &SolverConfig::default()).unwrap();
        let dt = sim.dt();
        let planned = sim.planned_steps();
        // Full steps plus remainder must cover T exactly.
        let covered = dt * (planned as f64 - 1.0);
        assert!(covered < params.t_days && dt * planned as f64 >= params.t_days - 1e-9);
    }
}
