//! Sparse-view tomography on areal-density maps: per-view dose scaling, a parallel-beam
//! line-integral projector with exact intersection lengths, and per-isotope
//! smoothness-regularized nonnegative reconstruction.

use log::debug;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decompose::{reconstruct_from_stacks, ArealDensityMap};
use crate::error::{Error, Result};
use crate::estimate::{fit_nuisance, NuisanceEstimate};
use crate::fluxbg::{expected_open, BackgroundBasis};
use crate::forward::{open_average, region_average, ForwardModel, RegionMasks, ScanModel};
use crate::optim::{minimize, Bounds, SolveOptions};
use crate::simulate::{sample_poisson_matrix, ScenarioSpec};

/// Isotopes of the fuel-pellet stand-in.
pub const PELLET_ISOTOPES: [&str; 6] = ["Np-237", "U-238", "Pu-239", "Pu-240", "Am-241", "H-1"];
/// Reference volumetric densities of the fuel-pellet stand-in, mol/cm³.
pub const PELLET_X: [f64; 6] = [1.394e-3, 37.87e-3, 8.369e-3, 1.814e-3, 1.409e-3, 55.7e-3];

/// Acquisition time of each pellet view relative to the disk-phantom scan.
pub const PELLET_EXPOSURE: f64 = 10.0;

/// Measurement setting for the pellet stand-in: each view is a `slices × n_det` image.
pub fn pellet_scenario(geometry: &Geometry, n_toa: usize) -> ScenarioSpec {
    ScenarioSpec {
        exposure: PELLET_EXPOSURE,
        isotopes: PELLET_ISOTOPES.iter().map(|s| s.to_string()).collect(),
        ..ScenarioSpec::disk_phantom((geometry.slices, geometry.n_det), n_toa)
    }
}

/// `α1^(k) = (y_s0^(k)ᵀ 1) / ([ȳ_o + (α2 - 1) b]ᵀ 1)` for one view.
pub fn per_view_alpha1(
    y_s0_view: ArrayView1<f64>,
    y_open: ArrayView1<f64>,
    alpha2: f64,
    b: ArrayView1<f64>,
) -> Result<f64> {
    if y_s0_view.len() != y_open.len() || b.len() != y_open.len() {
        return Err(Error::Shape(format!(
            "view spectrum {}, open beam {}, background {}",
            y_s0_view.len(),
            y_open.len(),
            b.len()
        )));
    }
    let den: f64 = y_open.iter().zip(b.iter()).map(|(o, b)| o + (alpha2 - 1.0) * b).sum();
    if !(den > 0.0 && den.is_finite()) {
        return Err(Error::Degenerate(format!("per-view dose denominator is {den}")));
    }
    Ok(y_s0_view.sum() / den)
}

/// Stack of `slices` square `n × n` slices with cubic voxels, imaged by a parallel beam
/// onto `n_det` detector columns per slice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub image_size: usize,
    pub slices: usize,
    pub voxel_pitch_cm: f64,
    pub n_det: usize,
    pub det_pitch_cm: f64,
}

impl Geometry {
    /// Detector matched to the slice: one column per voxel column.
    pub fn square(image_size: usize, slices: usize, voxel_pitch_cm: f64) -> Result<Self> {
        let g = Self {
            image_size,
            slices,
            voxel_pitch_cm,
            n_det: image_size,
            det_pitch_cm: voxel_pitch_cm,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.slices == 0 || self.n_det == 0 {
            return Err(Error::Config("tomography geometry needs non-zero sizes".into()));
        }
        if !(self.voxel_pitch_cm > 0.0 && self.det_pitch_cm > 0.0) {
            return Err(Error::Config("voxel and detector pitch must be positive".into()));
        }
        Ok(())
    }

    pub fn voxels_per_slice(&self) -> usize {
        self.image_size * self.image_size
    }

    pub fn n_voxels(&self) -> usize {
        self.slices * self.voxels_per_slice()
    }

    /// Center of voxel `(row, col)` in cm; row 0 is at the top (`+y`).
    pub fn voxel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let half = 0.5 * self.image_size as f64 * self.voxel_pitch_cm;
        (
            -half + (col as f64 + 0.5) * self.voxel_pitch_cm,
            half - (row as f64 + 0.5) * self.voxel_pitch_cm,
        )
    }

    pub fn det_offset(&self, d: usize) -> f64 {
        (d as f64 - 0.5 * (self.n_det as f64 - 1.0)) * self.det_pitch_cm
    }
}

/// Sparse `(views · n_det) × (n · n)` system matrix for one slice, values in cm.
#[derive(Clone, Debug)]
pub struct Projector {
    geometry: Geometry,
    angles_deg: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<u32>,
    vals: Vec<f64>,
    // transpose, for a row-parallel adjoint
    t_ptr: Vec<usize>,
    t_rows: Vec<u32>,
    t_vals: Vec<f64>,
}

impl Projector {
    pub fn new(geometry: Geometry, angles_deg: &[f64]) -> Result<Self> {
        geometry.validate()?;
        check_angles(angles_deg)?;
        let n = geometry.image_size;
        let mut row_ptr = vec![0];
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        for &a in angles_deg {
            let th = a.to_radians();
            for d in 0..geometry.n_det {
                for (pix, len) in ray_voxels(&geometry, th, geometry.det_offset(d)) {
                    cols.push(pix as u32);
                    vals.push(len);
                }
                row_ptr.push(cols.len());
            }
        }
        let n_rows = row_ptr.len() - 1;
        let n_cols = n * n;
        let mut counts = vec![0usize; n_cols + 1];
        for &c in &cols {
            counts[c as usize + 1] += 1;
        }
        for i in 0..n_cols {
            counts[i + 1] += counts[i];
        }
        let t_ptr = counts.clone();
        let mut fill = counts;
        let mut t_rows = vec![0u32; cols.len()];
        let mut t_vals = vec![0.0; cols.len()];
        for r in 0..n_rows {
            for k in row_ptr[r]..row_ptr[r + 1] {
                let c = cols[k] as usize;
                t_rows[fill[c]] = r as u32;
                t_vals[fill[c]] = vals[k];
                fill[c] += 1;
            }
        }
        Ok(Self {
            geometry,
            angles_deg: angles_deg.to_vec(),
            row_ptr,
            cols,
            vals,
            t_ptr,
            t_rows,
            t_vals,
        })
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn angles_deg(&self) -> &[f64] {
        &self.angles_deg
    }

    pub fn n_rays(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_pixels(&self) -> usize {
        self.geometry.voxels_per_slice()
    }

    /// `A x` for one slice.
    pub fn project_slice(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.n_pixels());
        debug_assert_eq!(out.len(), self.n_rays());
        for (r, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                s += self.vals[k] * x[self.cols[k] as usize];
            }
            *o = s;
        }
    }

    /// `Aᵀ y` for one slice.
    pub fn backproject_slice(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.n_rays());
        debug_assert_eq!(out.len(), self.n_pixels());
        for (c, o) in out.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.t_ptr[c]..self.t_ptr[c + 1] {
                s += self.t_vals[k] * y[self.t_rows[k] as usize];
            }
            *o = s;
        }
    }

    /// Projects a full volume (voxels in slice-major order) to a sinogram of
    /// `slices × (views · n_det)`.
    pub fn project(&self, x: ArrayView1<f64>) -> Result<Array2<f64>> {
        if x.len() != self.geometry.n_voxels() {
            return Err(Error::Shape(format!(
                "volume has {} voxels, geometry {}",
                x.len(),
                self.geometry.n_voxels()
            )));
        }
        let x = x.to_vec();
        let mut out = Array2::zeros((self.geometry.slices, self.n_rays()));
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.par_chunks(self.n_pixels()))
            .for_each(|(mut o, xs)| self.project_slice(xs, o.as_slice_mut().unwrap()));
        Ok(out)
    }

    /// Adjoint of [`Self::project`].
    pub fn backproject(&self, y: ArrayView2<f64>) -> Result<Array1<f64>> {
        if y.dim() != (self.geometry.slices, self.n_rays()) {
            return Err(Error::Shape(format!(
                "sinogram {:?} for {} slices of {} rays",
                y.dim(),
                self.geometry.slices,
                self.n_rays()
            )));
        }
        let mut out = vec![0.0; self.geometry.n_voxels()];
        out.par_chunks_mut(self.n_pixels())
            .zip(y.axis_iter(Axis(0)).into_par_iter())
            .for_each(|(o, ys)| self.backproject_slice(&ys.to_vec(), o));
        Ok(Array1::from(out))
    }

    /// Upper bound estimate of `||A||²` by power iteration.
    fn norm_sq(&self) -> f64 {
        let mut x = vec![1.0; self.n_pixels()];
        let mut y = vec![0.0; self.n_rays()];
        let mut lam = 0.0;
        for _ in 0..30 {
            self.project_slice(&x, &mut y);
            self.backproject_slice(&y, &mut x);
            lam = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            if lam == 0.0 {
                return 0.0;
            }
            x.iter_mut().for_each(|v| *v /= lam);
        }
        lam
    }
}

fn check_angles(angles_deg: &[f64]) -> Result<()> {
    if angles_deg.iter().any(|a| !a.is_finite()) {
        return Err(Error::Config("view angles must be finite".into()));
    }
    for (i, a) in angles_deg.iter().enumerate() {
        for b in &angles_deg[..i] {
            let d = (a - b).rem_euclid(180.0);
            if d < 1e-9 || 180.0 - d < 1e-9 {
                return Err(Error::Config(format!(
                    "view angles {b} and {a} coincide modulo 180 degrees"
                )));
            }
        }
    }
    Ok(())
}

/// Voxels crossed by the line `x cos θ + y sin θ = s` with their chord lengths.
fn ray_voxels(g: &Geometry, theta: f64, s: f64) -> Vec<(usize, f64)> {
    let n = g.image_size;
    let pitch = g.voxel_pitch_cm;
    let half = 0.5 * n as f64 * pitch;
    let (c, sn) = (theta.cos(), theta.sin());
    let (p0x, p0y) = (s * c, s * sn);
    let (dx, dy) = (-sn, c);
    let eps = 1e-12 * pitch;
    let mut t_lo = f64::NEG_INFINITY;
    let mut t_hi = f64::INFINITY;
    for (p0, d) in [(p0x, dx), (p0y, dy)] {
        if d.abs() < 1e-15 {
            if p0.abs() >= half {
                return Vec::new();
            }
        } else {
            let (a, b) = ((-half - p0) / d, (half - p0) / d);
            t_lo = t_lo.max(a.min(b));
            t_hi = t_hi.min(a.max(b));
        }
    }
    if t_hi - t_lo <= eps {
        return Vec::new();
    }
    let mut ts = vec![t_lo, t_hi];
    for (p0, d) in [(p0x, dx), (p0y, dy)] {
        if d.abs() < 1e-15 {
            continue;
        }
        for k in 0..=n {
            let t = (-half + k as f64 * pitch - p0) / d;
            if t > t_lo && t < t_hi {
                ts.push(t);
            }
        }
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out: Vec<(usize, f64)> = Vec::with_capacity(ts.len());
    for w in ts.windows(2) {
        let len = w[1] - w[0];
        if len <= eps {
            continue;
        }
        let tm = 0.5 * (w[0] + w[1]);
        let (x, y) = (p0x + tm * dx, p0y + tm * dy);
        let col = (((x + half) / pitch).floor() as isize).clamp(0, n as isize - 1) as usize;
        let row = (((half - y) / pitch).floor() as isize).clamp(0, n as isize - 1) as usize;
        let pix = row * n + col;
        match out.last_mut() {
            Some((p, l)) if *p == pix => *l += len,
            _ => out.push((pix, len)),
        }
    }
    out
}

/// `Σ` squared differences between 4-neighbours, and its gradient (`2 L x`).
fn smoothness(x: &[f64], n: usize, grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut s = 0.0;
    for r in 0..n {
        for c in 0..n {
            let i = r * n + c;
            if c + 1 < n {
                let d = x[i + 1] - x[i];
                s += d * d;
                grad[i + 1] += 2.0 * d;
                grad[i] -= 2.0 * d;
            }
            if r + 1 < n {
                let d = x[i + n] - x[i];
                s += d * d;
                grad[i + n] += 2.0 * d;
                grad[i] -= 2.0 * d;
            }
        }
    }
    s
}

/// Areal-density maps of every view, each `slices × n_det` pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewSet {
    pub views: Vec<ArealDensityMap>,
    pub angles_deg: Vec<f64>,
    pub alpha1_per_view: Vec<f64>,
}

impl ViewSet {
    pub fn validate(&self, geometry: &Geometry) -> Result<()> {
        if self.views.len() < 2 {
            return Err(Error::Config(format!(
                "tomography needs at least 2 views, got {}",
                self.views.len()
            )));
        }
        if self.angles_deg.len() != self.views.len() || self.alpha1_per_view.len() != self.views.len() {
            return Err(Error::Shape(format!(
                "{} views with {} angles and {} dose factors",
                self.views.len(),
                self.angles_deg.len(),
                self.alpha1_per_view.len()
            )));
        }
        check_angles(&self.angles_deg)?;
        let first = &self.views[0];
        for (k, v) in self.views.iter().enumerate() {
            if v.image_shape != (geometry.slices, geometry.n_det) {
                return Err(Error::Shape(format!(
                    "view {k} is {:?}, geometry expects {} slices x {} detector columns",
                    v.image_shape, geometry.slices, geometry.n_det
                )));
            }
            if v.isotopes != first.isotopes {
                return Err(Error::Config(format!("view {k} has a different isotope list")));
            }
        }
        Ok(())
    }

    pub fn isotopes(&self) -> &[String] {
        &self.views[0].isotopes
    }

    /// Sinogram of isotope `m`: `slices × (views · n_det)`.
    pub fn sinogram(&self, m: usize, geometry: &Geometry) -> Array2<f64> {
        let nd = geometry.n_det;
        let mut out = Array2::zeros((geometry.slices, self.views.len() * nd));
        for (k, v) in self.views.iter().enumerate() {
            for sl in 0..geometry.slices {
                for d in 0..nd {
                    out[[sl, k * nd + d]] = v.z[[sl * nd + d, m]];
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Regularization {
    /// Explicit `λ_m` per isotope, in units of `||A||² / 8`.
    Fixed(Vec<f64>),
    /// Largest `λ` on a decade ladder whose residual stays within the noise level
    /// estimated from the sinogram.
    Discrepancy,
}

/// Relative `λ` candidates tried by the discrepancy rule, largest first.
pub const DISCREPANCY_LADDER: [f64; 7] = [1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumetricDensityMap {
    /// `N_v × N_m` in mol/cm³, voxels slice-major then row-major.
    pub x: Array2<f64>,
    pub isotopes: Vec<String>,
    pub geometry: Geometry,
    /// Relative `λ` used for each isotope.
    pub lambda: Vec<f64>,
}

/// Robust white-noise level of a sinogram from second differences along the detector.
pub fn sinogram_noise(sino: ArrayView2<f64>, n_det: usize) -> f64 {
    let mut d2: Vec<f64> = Vec::new();
    for row in sino.outer_iter() {
        for view in row.as_slice().unwrap().chunks(n_det) {
            for w in view.windows(3) {
                d2.push((w[0] - 2.0 * w[1] + w[2]).abs());
            }
        }
    }
    if d2.is_empty() {
        return 0.0;
    }
    d2.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = d2[d2.len() / 2];
    1.4826 * med / 6f64.sqrt()
}

fn solve_slice(proj: &Projector, z: &[f64], lambda: f64, x0: &[f64], opts: &SolveOptions) -> Result<(Vec<f64>, f64)> {
    let np = proj.n_pixels();
    let n = proj.geometry().image_size;
    let mut ax = vec![0.0; proj.n_rays()];
    let mut gs = vec![0.0; np];
    let f = |x: &[f64], g: &mut [f64]| {
        proj.project_slice(x, &mut ax);
        let mut fit = 0.0;
        for (a, zi) in ax.iter_mut().zip(z) {
            *a -= zi;
            fit += *a * *a;
        }
        proj.backproject_slice(&ax, g);
        let reg = smoothness(x, n, &mut gs);
        for (gi, si) in g.iter_mut().zip(&gs) {
            *gi = 2.0 * *gi + lambda * si;
        }
        fit + lambda * reg
    };
    let res = minimize(f, &Bounds::nonnegative(np), x0, opts)?;
    let mut r = vec![0.0; proj.n_rays()];
    proj.project_slice(&res.x, &mut r);
    let resid: f64 = r.iter().zip(z).map(|(a, b)| (a - b).powi(2)).sum();
    Ok((res.x, resid))
}

fn reconstruct_channel(
    proj: &Projector,
    sino: ArrayView2<f64>,
    reg: Option<f64>,
    opts: &SolveOptions,
) -> Result<(Array1<f64>, f64)> {
    let g = proj.geometry();
    let np = g.voxels_per_slice();
    // work in units of the largest projection value so tolerances are meaningful
    let scale = sino.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut x = Array1::zeros(g.n_voxels());
    if scale == 0.0 {
        return Ok((x, reg.unwrap_or(DISCREPANCY_LADDER[DISCREPANCY_LADDER.len() - 1])));
    }
    let norm = proj.norm_sq() / 8.0;
    let zs = sino.mapv(|v| v / scale);
    let sigma = sinogram_noise(zs.view(), g.n_det);
    let target = zs.len() as f64 * sigma * sigma;
    let ladder: Vec<f64> = match reg {
        Some(l) => vec![l],
        None => DISCREPANCY_LADDER.to_vec(),
    };
    let mut chosen = ladder[ladder.len() - 1];
    let mut prev = vec![vec![0.0; np]; g.slices];
    let mut best: Option<Vec<Vec<f64>>> = None;
    for &rel in &ladder {
        let mut sols = Vec::with_capacity(g.slices);
        let mut resid = 0.0;
        for (sl, x0) in prev.iter().enumerate() {
            let z = zs.row(sl).to_vec();
            let (xs, r) = solve_slice(proj, &z, rel * norm, x0, opts)?;
            resid += r;
            sols.push(xs);
        }
        debug!("lambda {rel:e}: residual {resid:.3e} vs target {target:.3e}");
        prev = sols.clone();
        best = Some(sols);
        chosen = rel;
        if reg.is_none() && resid <= target {
            break;
        }
    }
    for (sl, xs) in best.expect("ladder is non-empty").iter().enumerate() {
        for (i, v) in xs.iter().enumerate() {
            x[sl * np + i] = v * scale;
        }
    }
    Ok((x, chosen))
}

/// Solves `min_{x >= 0} ||A x - z_m||² + λ_m ||∇x||²` independently for each isotope.
pub fn reconstruct_volume(
    views: &ViewSet,
    geometry: &Geometry,
    reg: &Regularization,
    opts: &SolveOptions,
) -> Result<VolumetricDensityMap> {
    views.validate(geometry)?;
    let n_m = views.isotopes().len();
    let lambdas: Vec<Option<f64>> = match reg {
        Regularization::Fixed(l) => {
            if l.len() != n_m || l.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::Config(format!("need {n_m} non-negative regularization weights")));
            }
            l.iter().map(|v| Some(*v)).collect()
        }
        Regularization::Discrepancy => vec![None; n_m],
    };
    let proj = Projector::new(geometry.clone(), &views.angles_deg)?;
    let channels: Vec<Result<(Array1<f64>, f64)>> = (0..n_m)
        .into_par_iter()
        .map(|m| reconstruct_channel(&proj, views.sinogram(m, geometry).view(), lambdas[m], opts))
        .collect();
    let mut x = Array2::zeros((geometry.n_voxels(), n_m));
    let mut lambda = Vec::with_capacity(n_m);
    for (m, c) in channels.into_iter().enumerate() {
        let (xm, l) = c?;
        x.column_mut(m).assign(&xm);
        lambda.push(l);
    }
    Ok(VolumetricDensityMap {
        x,
        isotopes: views.isotopes().to_vec(),
        geometry: geometry.clone(),
        lambda,
    })
}

/// Voxels whose value in `channel` reaches `fraction` of its `percentile`-th percentile.
pub fn threshold_mask(channel: ArrayView1<f64>, fraction: f64, percentile: f64) -> Result<Vec<usize>> {
    if channel.is_empty() {
        return Err(Error::EmptyRegion("threshold mask over an empty channel".into()));
    }
    if !(0.0..=100.0).contains(&percentile) {
        return Err(Error::Config(format!("percentile {percentile} outside [0, 100]")));
    }
    let mut sorted = channel.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = percentile / 100.0 * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    let pct = sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo]);
    let thr = fraction * pct;
    let mask: Vec<usize> = channel
        .iter()
        .enumerate()
        .filter(|(_, v)| **v >= thr && **v > 0.0)
        .map(|(i, _)| i)
        .collect();
    if mask.is_empty() {
        return Err(Error::EmptyRegion("threshold mask selected no voxels".into()));
    }
    Ok(mask)
}

/// `ρ = x M` per isotope, g/cm³.
pub fn mass_density(x: ArrayView2<f64>, molar_mass: &[f64]) -> Result<Array2<f64>> {
    if molar_mass.len() != x.ncols() {
        return Err(Error::Config(format!(
            "{} molar masses for {} isotopes",
            molar_mass.len(),
            x.ncols()
        )));
    }
    if let Some(m) = molar_mass.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
        return Err(Error::Config(format!("molar mass must be positive, got {m}")));
    }
    let mut out = x.to_owned();
    for (mut c, m) in out.columns_mut().into_iter().zip(molar_mass) {
        c *= *m;
    }
    Ok(out)
}

/// Uniform cylinder (axis along the slice direction) of the given radius, centered.
pub fn cylinder_phantom(geometry: &Geometry, radius_cm: f64, densities: &[f64]) -> Array2<f64> {
    let n = geometry.image_size;
    let np = geometry.voxels_per_slice();
    let mut x = Array2::zeros((geometry.n_voxels(), densities.len()));
    for sl in 0..geometry.slices {
        for r in 0..n {
            for c in 0..n {
                let (px, py) = geometry.voxel_center(r, c);
                if px * px + py * py <= radius_cm * radius_cm {
                    for (m, d) in densities.iter().enumerate() {
                        x[[sl * np + r * n + c, m]] = *d;
                    }
                }
            }
        }
    }
    x
}

/// Voxels within `fraction` of the radius of a centered cylinder.
pub fn cylinder_interior(geometry: &Geometry, radius_cm: f64, fraction: f64) -> Vec<usize> {
    let n = geometry.image_size;
    let np = geometry.voxels_per_slice();
    let lim = fraction * radius_cm;
    let mut out = Vec::new();
    for sl in 0..geometry.slices {
        for r in 0..n {
            for c in 0..n {
                let (px, py) = geometry.voxel_center(r, c);
                if px * px + py * py <= lim * lim {
                    out.push(sl * np + r * n + c);
                }
            }
        }
    }
    out
}

/// Evenly spaced angles over `[0, 180)`.
pub fn uniform_angles(n_views: usize) -> Vec<f64> {
    (0..n_views).map(|k| 180.0 * k as f64 / n_views as f64).collect()
}

/// Areal densities seen by each view: `(slices · n_det) × N_m` per view.
pub fn project_views(proj: &Projector, x: ArrayView2<f64>) -> Result<Vec<Array2<f64>>> {
    let g = proj.geometry();
    let nd = g.n_det;
    let n_views = proj.angles_deg().len();
    let mut views = vec![Array2::zeros((g.slices * nd, x.ncols())); n_views];
    for m in 0..x.ncols() {
        let s = proj.project(x.column(m))?;
        for (k, v) in views.iter_mut().enumerate() {
            for sl in 0..g.slices {
                for d in 0..nd {
                    v[[sl * nd + d, m]] = s[[sl, k * nd + d]];
                }
            }
        }
    }
    Ok(views)
}

/// Detector regions for a centered cylinder: `Ω0` is every column farther than
/// `radius + margin` from the axis, `Ωz` the columns within `dense_half_width` of it.
pub fn cylinder_regions(
    geometry: &Geometry,
    radius_cm: f64,
    margin_cm: f64,
    dense_half_width_cm: f64,
) -> Result<RegionMasks> {
    let nd = geometry.n_det;
    let mut omega0 = Vec::new();
    let mut omegaz = Vec::new();
    for sl in 0..geometry.slices {
        for d in 0..nd {
            let s = geometry.det_offset(d).abs();
            if s > radius_cm + margin_cm {
                omega0.push(sl * nd + d);
            } else if s <= dense_half_width_cm {
                omegaz.push(sl * nd + d);
            }
        }
    }
    RegionMasks::new(omega0, omegaz, geometry.slices * nd)
}

/// Poisson sample stacks for every view with dose factors `dose[k]` applied to `α1`,
/// plus one shared open-beam stack.
pub fn simulate_views(
    z_views: &[Array2<f64>],
    scan: &ScanModel,
    model: &ForwardModel,
    dose: &[f64],
    seed: u64,
) -> Result<(Vec<Array2<f64>>, Array2<f64>)> {
    if dose.len() != z_views.len() {
        return Err(Error::Shape(format!(
            "{} dose factors for {} views",
            dose.len(),
            z_views.len()
        )));
    }
    let mean_o = expected_open(scan.v.view(), scan.phi.view(), scan.b.view())?;
    let yo = sample_poisson_matrix(mean_o.view(), seed, VIEW_STREAM_STRIDE)?;
    let mut ys = Vec::with_capacity(z_views.len());
    for (k, (z, d)) in z_views.iter().zip(dose).enumerate() {
        let view_scan = ScanModel {
            alpha1: scan.alpha1 * d,
            ..scan.clone()
        };
        let mean = model.forward_counts(z.view(), &view_scan)?;
        ys.push(sample_poisson_matrix(
            mean.view(),
            seed,
            (k as u64 + 2) * VIEW_STREAM_STRIDE,
        )?);
    }
    Ok((ys, yo))
}

/// Random-stream spacing between views; each view uses one stream per pixel row.
const VIEW_STREAM_STRIDE: u64 = 1 << 40;

/// Nuisance estimate from view 0 shared by all views, per-view `α1`, then the linear
/// baseline and maximum-likelihood areal densities of every view.
#[allow(clippy::too_many_arguments)]
pub fn reconstruct_views(
    ys: &[Array2<f64>],
    yo: ArrayView2<f64>,
    angles_deg: &[f64],
    masks: &RegionMasks,
    model: &ForwardModel,
    basis: &BackgroundBasis,
    image_shape: (usize, usize),
    beta: f64,
    nuisance_opts: &SolveOptions,
    density_opts: &SolveOptions,
) -> Result<(NuisanceEstimate, ViewSet)> {
    if ys.is_empty() || ys.len() != angles_deg.len() {
        return Err(Error::Shape(format!(
            "{} view stacks for {} angles",
            ys.len(),
            angles_deg.len()
        )));
    }
    if !masks.has_omega0() {
        return Err(Error::Config(
            "per-view dose estimation needs an open-beam region Ω0".into(),
        ));
    }
    let est = fit_nuisance(ys[0].view(), yo, masks, model, basis, beta, nuisance_opts)?;
    let y_open_avg = open_average(yo, est.v_hat.view())?;
    let mut views = Vec::with_capacity(ys.len());
    let mut alpha1 = Vec::with_capacity(ys.len());
    for (k, y) in ys.iter().enumerate() {
        let y_s0 = region_average(y.view(), est.v_hat.view(), masks.omega0())?;
        let a1 = per_view_alpha1(y_s0.view(), y_open_avg.view(), est.alpha2_hat, est.b_hat.view())?;
        debug!("view {k}: alpha1 = {a1}");
        let est_k = NuisanceEstimate {
            alpha1_hat: a1,
            ..est.clone()
        };
        let (_, rec) = reconstruct_from_stacks(y.view(), yo, &est_k, model, image_shape, density_opts)?;
        views.push(rec.map);
        alpha1.push(a1);
    }
    Ok((
        est,
        ViewSet {
            views,
            angles_deg: angles_deg.to_vec(),
            alpha1_per_view: alpha1,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn alpha1_examples() {
        let yo = array![10.0, 20.0, 30.0];
        let b = array![1.0, 1.0, 2.0];
        assert_relative_eq!(per_view_alpha1(yo.view(), yo.view(), 1.0, b.view()).unwrap(), 1.0);
        let ys = array![3.0, 4.0, 5.0];
        let a = per_view_alpha1(ys.view(), yo.view(), 0.7, b.view()).unwrap();
        let a2 = per_view_alpha1((&ys * 2.0).view(), yo.view(), 0.7, b.view()).unwrap();
        assert_relative_eq!(a2, 2.0 * a, max_relative = 1e-15);
        assert!(per_view_alpha1(ys.view(), yo.view(), -100.0, b.view()).is_err());
    }

    #[test]
    fn single_voxel_unit_chord() {
        let g = Geometry::square(1, 1, 1.0).unwrap();
        for a in [0.0, 90.0] {
            let p = Projector::new(g.clone(), &[a]).unwrap();
            let y = p.project(array![1.0].view()).unwrap();
            assert_relative_eq!(y[[0, 0]], 1.0, epsilon = 1e-12);
        }
        let p = Projector::new(g, &[45.0]).unwrap();
        let y = p.project(array![1.0].view()).unwrap();
        assert_relative_eq!(y[[0, 0]], 2f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn disk_projection_matches_analytic_chord() {
        let g = Geometry::square(128, 1, 0.01).unwrap();
        let r = 0.5;
        let x = cylinder_phantom(&g, r, &[1.0]);
        let p = Projector::new(g.clone(), &[0.0, 37.0, 90.0]).unwrap();
        let y = p.project(x.column(0)).unwrap();
        for v in 0..3 {
            for d in 0..g.n_det {
                let s = g.det_offset(d);
                if s.abs() < 0.5 * r {
                    let want = 2.0 * (r * r - s * s).sqrt();
                    let got = y[[0, v * g.n_det + d]];
                    assert!((got - want).abs() < 0.02 * want, "view {v} det {d}: {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn adjoint_identity_and_zero_image() {
        let g = Geometry {
            image_size: 17,
            slices: 2,
            voxel_pitch_cm: 0.03,
            n_det: 23,
            det_pitch_cm: 0.025,
        };
        let p = Projector::new(g.clone(), &uniform_angles(7)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array1::from_shape_fn(g.n_voxels(), |_| rng.random_range(-1.0..1.0));
        let y = Array2::from_shape_fn((2, p.n_rays()), |_| rng.random_range(-1.0..1.0));
        let lhs = (&p.project(x.view()).unwrap() * &y).sum();
        let rhs = x.dot(&p.backproject(y.view()).unwrap());
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
        let zero = p.project(Array1::zeros(g.n_voxels()).view()).unwrap();
        assert!(zero.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn duplicate_angles_rejected() {
        let g = Geometry::square(4, 1, 1.0).unwrap();
        assert!(Projector::new(g, &[0.0, 180.0]).is_err());
    }

    fn views_from_truth(g: &Geometry, angles: &[f64], x: &Array2<f64>) -> ViewSet {
        let p = Projector::new(g.clone(), angles).unwrap();
        let n_m = x.ncols();
        let nd = g.n_det;
        let mut views: Vec<Array2<f64>> = vec![Array2::zeros((g.slices * nd, n_m)); angles.len()];
        for m in 0..n_m {
            let s = p.project(x.column(m)).unwrap();
            for (k, v) in views.iter_mut().enumerate() {
                for sl in 0..g.slices {
                    for d in 0..nd {
                        v[[sl * nd + d, m]] = s[[sl, k * nd + d]];
                    }
                }
            }
        }
        ViewSet {
            views: views
                .into_iter()
                .map(|z| {
                    ArealDensityMap::new(
                        z,
                        (0..n_m).map(|m| format!("I{m}")).collect(),
                        (g.slices, nd),
                        String::new(),
                    )
                    .unwrap()
                })
                .collect(),
            angles_deg: angles.to_vec(),
            alpha1_per_view: vec![1.0; angles.len()],
        }
    }

    #[test]
    fn noiseless_cylinder_interior_mean() {
        let g = Geometry::square(32, 1, 0.02).unwrap();
        let r = 0.22;
        let truth = [0.03, 0.008];
        let x = cylinder_phantom(&g, r, &truth);
        let vs = views_from_truth(&g, &uniform_angles(36), &x);
        let rec = reconstruct_volume(&vs, &g, &Regularization::Discrepancy, &SolveOptions::tomography()).unwrap();
        let interior = cylinder_interior(&g, r, 0.7);
        for (m, t) in truth.iter().enumerate() {
            let mean = interior.iter().map(|&i| rec.x[[i, m]]).sum::<f64>() / interior.len() as f64;
            assert!((mean - t).abs() < 0.05 * t, "isotope {m}: {mean} vs {t}");
        }
        // isotopes are reconstructed independently
        let single = ViewSet {
            views: vs
                .views
                .iter()
                .map(|v| {
                    ArealDensityMap::new(
                        v.z.slice(ndarray::s![.., 1..2]).to_owned(),
                        vec!["I1".into()],
                        v.image_shape,
                        String::new(),
                    )
                    .unwrap()
                })
                .collect(),
            ..vs.clone()
        };
        let rec1 = reconstruct_volume(&single, &g, &Regularization::Discrepancy, &SolveOptions::tomography()).unwrap();
        assert_eq!(rec1.x.column(0), rec.x.column(1));
    }

    #[test]
    fn heavy_regularization_gives_flat_image() {
        let g = Geometry::square(12, 1, 0.05).unwrap();
        let x = cylinder_phantom(&g, 0.2, &[1.0]);
        let vs = views_from_truth(&g, &uniform_angles(6), &x);
        let rec = reconstruct_volume(&vs, &g, &Regularization::Fixed(vec![1e8]), &SolveOptions::tomography()).unwrap();
        let col = rec.x.column(0);
        let mean = col.mean().unwrap();
        let spread = col.iter().fold(0.0f64, |m, v| m.max((v - mean).abs()));
        assert!(mean > 0.0 && spread < 1e-3 * mean, "mean {mean}, spread {spread}");
    }

    #[test]
    fn mass_density_examples() {
        let rho = mass_density(array![[37.87e-3]].view(), &[238.05]).unwrap();
        assert!((rho[[0, 0]] - 9.014).abs() < 0.001 * 9.014, "{}", rho[[0, 0]]);
        assert_eq!(mass_density(array![[0.0]].view(), &[238.05]).unwrap()[[0, 0]], 0.0);
        assert!(mass_density(array![[1.0, 2.0]].view(), &[238.05]).is_err());
        let twice = mass_density(array![[2.0 * 37.87e-3]].view(), &[238.05]).unwrap();
        assert_relative_eq!(twice[[0, 0]], 2.0 * rho[[0, 0]], max_relative = 1e-15);
    }

    #[test]
    fn threshold_mask_examples() {
        let c = Array1::from_shape_fn(100, |i| i as f64);
        let m = threshold_mask(c.view(), 0.5, 99.0).unwrap();
        // 99th percentile is 98.01, threshold 49.005
        assert_eq!(m.first(), Some(&50));
        assert_eq!(m.len(), 50);
        assert!(threshold_mask(Array1::zeros(4).view(), 0.5, 99.0).is_err());
    }
}
