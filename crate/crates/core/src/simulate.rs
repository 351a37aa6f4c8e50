//! Monte-Carlo measurement pairs, the overlapping-disk phantom and the reference
//! simulation scenario.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fluxbg::{expected_open, normalize_profile, BackgroundBasis};
use crate::forward::{ForwardModel, RegionMasks, ScanModel};
use crate::grids::{FlightPath, TofGrid};
use crate::library;
use crate::resolution::{required_offset, PulseKernelSpec, ResolutionOperator};
use crate::xsdict::CrossSectionDict;

/// Stream offset separating open-beam rows from sample rows.
const OPEN_STREAM_BASE: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Disk {
    /// `(row, col)` in pixel units; pixel `(r, c)` has its center at `(r + 0.5, c + 0.5)`.
    pub center: (f64, f64),
    pub radius: f64,
    pub isotope: usize,
    /// mol/cm².
    pub density: f64,
}

impl Disk {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        let dr = r as f64 + 0.5 - self.center.0;
        let dc = c as f64 + 0.5 - self.center.1;
        dr * dr + dc * dc <= self.radius * self.radius
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiskPhantomSpec {
    pub image_shape: (usize, usize),
    pub n_isotopes: usize,
    pub disks: Vec<Disk>,
}

impl DiskPhantomSpec {
    /// One disk per density, radius `radius_frac * min(rows, cols)`, centers on a circle of
    /// radius `offset_frac * min(rows, cols)` at equal angular spacing, the first at the top.
    pub fn ring(image_shape: (usize, usize), densities: &[f64], radius_frac: f64, offset_frac: f64) -> Self {
        let size = image_shape.0.min(image_shape.1) as f64;
        let (cr, cc) = (image_shape.0 as f64 / 2.0, image_shape.1 as f64 / 2.0);
        let n = densities.len();
        let disks = densities
            .iter()
            .enumerate()
            .map(|(m, &density)| {
                let ang = 2.0 * std::f64::consts::PI * m as f64 / n as f64;
                Disk {
                    center: (cr - offset_frac * size * ang.cos(), cc + offset_frac * size * ang.sin()),
                    radius: radius_frac * size,
                    isotope: m,
                    density,
                }
            })
            .collect();
        Self {
            image_shape,
            n_isotopes: n,
            disks,
        }
    }

    /// Default layout: radius 0.28 and offset 0.18 of the image size, which keeps every
    /// disk inside the image while all of them overlap in the middle.
    pub fn default_layout(image_shape: (usize, usize), densities: &[f64]) -> Self {
        Self::ring(image_shape, densities, 0.28, 0.18)
    }

    pub fn validate(&self) -> Result<()> {
        let (rows, cols) = self.image_shape;
        let mut seen = vec![false; self.n_isotopes];
        for (i, d) in self.disks.iter().enumerate() {
            if d.isotope >= self.n_isotopes {
                return Err(Error::Config(format!(
                    "disk {i} names isotope {} of {}",
                    d.isotope, self.n_isotopes
                )));
            }
            if seen[d.isotope] {
                return Err(Error::Config(format!("isotope {} has more than one disk", d.isotope)));
            }
            seen[d.isotope] = true;
            if !(d.density > 0.0 && d.density.is_finite()) {
                return Err(Error::Config(format!(
                    "disk {i} density must be positive, got {}",
                    d.density
                )));
            }
            if !(d.radius >= 0.0) {
                return Err(Error::Config(format!("disk {i} radius must be non-negative")));
            }
            let inside = d.center.0 - d.radius >= 0.0
                && d.center.1 - d.radius >= 0.0
                && d.center.0 + d.radius <= rows as f64
                && d.center.1 + d.radius <= cols as f64;
            if !inside {
                return Err(Error::Config(format!(
                    "disk {i} extends beyond the {rows}x{cols} image"
                )));
            }
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.image_shape.0 * self.image_shape.1
    }

    /// Pixels covered by the disk of each isotope (empty when it has none).
    pub fn disk_pixels(&self) -> Vec<Vec<usize>> {
        let cols = self.image_shape.1;
        let mut out = vec![Vec::new(); self.n_isotopes];
        for d in &self.disks {
            out[d.isotope] = (0..self.n_pixels())
                .filter(|&p| d.contains(p / cols, p % cols))
                .collect();
        }
        out
    }

    /// `Ωz` = pixels inside every disk, `Ω0` = pixels outside all disks.
    pub fn regions(&self) -> Result<RegionMasks> {
        let cols = self.image_shape.1;
        let mut omega0 = Vec::new();
        let mut omegaz = Vec::new();
        for p in 0..self.n_pixels() {
            let (r, c) = (p / cols, p % cols);
            let hits = self.disks.iter().filter(|d| d.contains(r, c)).count();
            if hits == 0 {
                omega0.push(p);
            } else if hits == self.disks.len() {
                omegaz.push(p);
            }
        }
        RegionMasks::new(omega0, omegaz, self.n_pixels())
    }
}

/// Ground-truth areal densities, `N_p × N_m`.
pub fn make_disk_phantom(spec: &DiskPhantomSpec) -> Result<Array2<f64>> {
    spec.validate()?;
    let cols = spec.image_shape.1;
    let mut z = Array2::zeros((spec.n_pixels(), spec.n_isotopes));
    for d in &spec.disks {
        for p in 0..spec.n_pixels() {
            if d.contains(p / cols, p % cols) {
                z[[p, d.isotope]] = d.density;
            }
        }
    }
    Ok(z)
}

fn row_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Independent Poisson draws of every entry; row `p` uses stream `stream_base + p`, so
/// results do not depend on how rows are scheduled across threads.
pub fn sample_poisson_matrix(means: ArrayView2<f64>, seed: u64, stream_base: u64) -> Result<Array2<f64>> {
    if let Some(((p, j), m)) = means.indexed_iter().find(|(_, m)| !(m.is_finite() && **m >= 0.0)) {
        return Err(Error::Domain(format!("Poisson mean at pixel {p}, bin {j} is {m}")));
    }
    let mut out = Array2::zeros(means.dim());
    Zip::indexed(out.axis_iter_mut(Axis(0)))
        .and(means.axis_iter(Axis(0)))
        .par_for_each(|p, mut row, mrow| {
            let mut rng = row_rng(seed, stream_base + p as u64);
            for (o, &m) in row.iter_mut().zip(mrow.iter()) {
                *o = if m == 0.0 {
                    0.0
                } else {
                    Poisson::new(m).expect("validated mean").sample(&mut rng)
                };
            }
        });
    Ok(out)
}

/// `(Y_s, Y_o)` drawn with means `F(Z)` and `v (φ + b)^T`.
pub fn sample_poisson_pair(
    z_truth: ArrayView2<f64>,
    scan: &ScanModel,
    model: &ForwardModel,
    seed: u64,
) -> Result<(Array2<f64>, Array2<f64>)> {
    let mean_s = model.forward_counts(z_truth, scan)?;
    let mean_o = expected_open(scan.v.view(), scan.phi.view(), scan.b.view())?;
    Ok((
        sample_poisson_matrix(mean_s.view(), seed, 0)?,
        sample_poisson_matrix(mean_o.view(), seed, OPEN_STREAM_BASE)?,
    ))
}

/// Reference areal densities of the disk phantom, mol/cm².
pub const DISK_PHANTOM_Z: [f64; 5] = [5.00e-3, 3.00e-3, 0.200e-3, 4.00e-3, 0.500e-3];
pub const DISK_PHANTOM_ISOTOPES: [&str; 5] = ["U-238", "Pu-239", "Pu-240", "Ta-181", "Am-241"];
pub const DISK_PHANTOM_ALPHA: (f64, f64) = (0.483, 0.685);
/// Background coefficients for `N_A = 2260`.
pub const DISK_PHANTOM_THETA: [f64; 3] = [29.9, -56.1, 5.39];
pub const REFERENCE_N_TOA: usize = 2260;
pub const REFERENCE_FLIGHT_PATH_M: f64 = 10.4;
pub const REFERENCE_T_FIRST_S: f64 = 70.11e-6;
pub const REFERENCE_T_LAST_S: f64 = 739.1e-6;
/// Flux counts per arrival bin at the first bin of the reference grid.
pub const REFERENCE_FLUX_AMPLITUDE: f64 = 15.0;

/// Complete measurement setting: geometry, grid, resolution and nuisance truth.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub path: FlightPath,
    pub grid: TofGrid,
    pub kernel: PulseKernelSpec,
    pub n_kernels: usize,
    pub basis: BackgroundBasis,
    pub theta: Array1<f64>,
    pub scan: ScanModel,
    pub image_shape: (usize, usize),
    pub isotopes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub image_shape: (usize, usize),
    pub n_toa: usize,
    pub flight_path_m: f64,
    pub t_first_s: f64,
    pub t_last_s: f64,
    pub kernel: PulseKernelSpec,
    pub n_kernels: usize,
    /// Background coefficients referred to [`REFERENCE_N_TOA`] bins over the same span.
    pub theta_reference: Vec<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
    pub flux_amplitude_reference: f64,
    /// Acquisition-time multiplier applied to both flux and background counts.
    pub exposure: f64,
    pub isotopes: Vec<String>,
}

impl ScenarioSpec {
    /// Disk-phantom setting at the given image size and bin count.
    pub fn disk_phantom(image_shape: (usize, usize), n_toa: usize) -> Self {
        Self {
            image_shape,
            n_toa,
            flight_path_m: REFERENCE_FLIGHT_PATH_M,
            t_first_s: REFERENCE_T_FIRST_S,
            t_last_s: REFERENCE_T_LAST_S,
            kernel: PulseKernelSpec::default(),
            n_kernels: 5,
            theta_reference: DISK_PHANTOM_THETA.to_vec(),
            alpha1: DISK_PHANTOM_ALPHA.0,
            alpha2: DISK_PHANTOM_ALPHA.1,
            flux_amplitude_reference: REFERENCE_FLUX_AMPLITUDE,
            exposure: 1.0,
            isotopes: DISK_PHANTOM_ISOTOPES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn build(&self) -> Result<Scenario> {
        if !(self.exposure > 0.0 && self.exposure.is_finite()) {
            return Err(Error::Config(format!(
                "exposure must be positive, got {}",
                self.exposure
            )));
        }
        let path = FlightPath::new(self.flight_path_m)?;
        let base = TofGrid::spanning(self.t_first_s, self.t_last_s, self.n_toa, 0)?;
        let i0 = required_offset(&base, &path, &self.kernel, self.n_kernels)?;
        let grid = base.with_offset(i0)?;
        let n_b = self.theta_reference.len();
        let basis = BackgroundBasis::new(n_b, self.n_toa)?;
        let mut theta = rebin_theta(&self.theta_reference, REFERENCE_N_TOA, self.n_toa)?;
        theta[0] += self.exposure.ln() * basis.a_norms()[0];
        // counts per bin scale with bin width relative to the reference grid
        let ref_dt = (self.t_last_s - self.t_first_s) / (REFERENCE_N_TOA - 1) as f64;
        let width_ratio = grid.delta_t_s() / ref_dt;
        let t = grid.toa_times();
        let phi = t.mapv(|tj| self.exposure * self.flux_amplitude_reference * width_ratio * self.t_first_s / tj);
        let b = basis.b_of_theta(theta.view())?;
        let (rows, cols) = self.image_shape;
        let mut v = Array1::from_shape_fn(rows * cols, |p| {
            let (r, c) = ((p / cols) as f64 + 0.5, (p % cols) as f64 + 0.5);
            let (dr, dc) = (r / rows as f64 - 0.45, c / cols as f64 - 0.55);
            1.0 + 0.25 * (-(dr * dr + dc * dc) / 0.18).exp()
        });
        normalize_profile(&mut v)?;
        Ok(Scenario {
            path,
            grid,
            kernel: self.kernel,
            n_kernels: self.n_kernels,
            basis,
            theta,
            scan: ScanModel {
                v,
                phi,
                b,
                alpha1: self.alpha1,
                alpha2: self.alpha2,
            },
            image_shape: self.image_shape,
            isotopes: self.isotopes.clone(),
        })
    }
}

/// Coefficients that give the same background per unit time on `n_toa` bins as `theta`
/// gives on `n_ref` bins spanning the same interval.
pub fn rebin_theta(theta: &[f64], n_ref: usize, n_toa: usize) -> Result<Array1<f64>> {
    let a_ref = BackgroundBasis::new(theta.len(), n_ref)?.a_norms().to_owned();
    let a_new = BackgroundBasis::new(theta.len(), n_toa)?.a_norms().to_owned();
    let mut out: Array1<f64> = Array1::from_shape_fn(theta.len(), |n| theta[n] * a_new[n] / a_ref[n]);
    // wider bins collect proportionally more background counts
    let ratio = (n_ref - 1) as f64 / (n_toa - 1) as f64;
    out[0] += ratio.ln() * a_new[0];
    Ok(out)
}

impl Scenario {
    /// Dictionary from the built-in synthetic tables for this scenario's isotopes.
    pub fn dictionary(&self) -> Result<CrossSectionDict> {
        let labels: Vec<&str> = self.isotopes.iter().map(String::as_str).collect();
        CrossSectionDict::from_tables(&library::tables(&labels)?, &self.grid, &self.path)
    }

    pub fn resolution(&self) -> Result<ResolutionOperator> {
        ResolutionOperator::build(&self.grid, &self.path, &self.kernel, self.n_kernels)
    }

    pub fn forward_model(&self) -> Result<ForwardModel> {
        ForwardModel::new(self.dictionary()?, self.resolution()?)
    }

    pub fn n_pixels(&self) -> usize {
        self.image_shape.0 * self.image_shape.1
    }
}
