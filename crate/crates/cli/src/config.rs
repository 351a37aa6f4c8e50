//! Pipeline configuration: a TOML file with one table per pipeline block.
//!
//! Relative paths inside the file are resolved against the file's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tofrecon::fluxbg::BackgroundBasis;
use tofrecon::forward::{ForwardModel, RegionMasks};
use tofrecon::grids::{FlightPath, TofGrid};
use tofrecon::library;
use tofrecon::optim::SolveOptions;
use tofrecon::resolution::{read_kernel_file, required_offset, KernelFamily, PulseKernelSpec, ResolutionOperator};
use tofrecon::simulate::{
    Disk, DiskPhantomSpec, ScenarioSpec, DISK_PHANTOM_ALPHA, DISK_PHANTOM_THETA, REFERENCE_FLUX_AMPLITUDE,
};
use tofrecon::tomo::{Geometry, Regularization};
use tofrecon::xsdict::{CrossSectionDict, IsotopeTable};

use crate::error::{CliError, CliResult};
use crate::pgm;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default = "defaults::seed")]
    pub seed: u64,
    /// `[rows, cols]` of every image the pipeline handles.
    pub image_shape: Option<[usize; 2]>,
    #[serde(default)]
    pub grid: GridBlock,
    #[serde(default)]
    pub flight_path: FlightPathBlock,
    pub isotopes: IsotopesBlock,
    #[serde(default)]
    pub resolution: ResolutionBlock,
    #[serde(default)]
    pub regions: RegionsBlock,
    pub simulation: Option<SimulationBlock>,
    #[serde(default)]
    pub solver: SolverBlock,
    pub tomo: Option<TomoBlock>,
    /// Directory that relative paths are resolved against; not part of the file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridBlock {
    pub n_toa: usize,
    pub t_first_us: f64,
    pub t_last_us: f64,
    /// Number of background basis functions.
    pub n_background: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlightPathBlock {
    pub length_m: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IsotopesBlock {
    pub labels: Vec<String>,
    /// Cross-section tables `energy_eV,xs_cm2_per_mol`, one per label; the built-in
    /// synthetic library is used when absent.
    pub csv: Option<Vec<PathBuf>>,
    pub molar_mass_g_per_mol: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResolutionBlock {
    pub family: KernelFamily,
    pub shape: f64,
    pub tau0_us: f64,
    pub energy_exponent: f64,
    pub eref_ev: f64,
    pub epsilon_trunc: f64,
    pub n_kernels: usize,
    /// Explicit kernels `anchor_index,lag_bins,value`; overrides the parametric family.
    pub kernel_file: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegionsBlock {
    /// Open-beam rectangles `x0,y0,x1,y1` (half-open, x = column).
    pub omega0: Vec<String>,
    pub omegaz: Vec<String>,
    pub omega0_mask: Option<PathBuf>,
    pub omegaz_mask: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationBlock {
    /// Disk densities in mmol/cm², one per isotope, placed on a ring.
    pub densities_mmol_cm2: Vec<f64>,
    #[serde(default = "defaults::radius_frac")]
    pub radius_frac: f64,
    #[serde(default = "defaults::offset_frac")]
    pub offset_frac: f64,
    #[serde(default = "defaults::alpha1")]
    pub alpha1: f64,
    #[serde(default = "defaults::alpha2")]
    pub alpha2: f64,
    /// Background coefficients referred to the 2260-bin reference grid.
    #[serde(default = "defaults::theta")]
    pub theta_reference: Vec<f64>,
    #[serde(default = "defaults::flux")]
    pub flux_amplitude: f64,
    #[serde(default = "defaults::exposure")]
    pub exposure: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverBlock {
    pub beta: f64,
    pub nuisance_max_iters: usize,
    pub nuisance_grad_tol: f64,
    pub density_max_iters: usize,
    pub density_grad_tol: f64,
    pub tomo_max_iters: usize,
    pub tomo_grad_tol: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TomoBlock {
    pub voxel_pitch_cm: f64,
    pub image_size: usize,
    /// Fixed regularization weight relative to `||A||² / 8`; the discrepancy ladder is
    /// used when absent.
    pub lambda: Option<f64>,
    #[serde(default = "defaults::mask_fraction")]
    pub mask_fraction: f64,
    #[serde(default = "defaults::mask_percentile")]
    pub mask_percentile: f64,
    /// Channel whose threshold defines the object mask; defaults to the first isotope.
    pub mask_isotope: Option<String>,
}

mod defaults {
    use super::*;

    pub fn seed() -> u64 {
        1
    }
    pub fn radius_frac() -> f64 {
        0.28
    }
    pub fn offset_frac() -> f64 {
        0.18
    }
    pub fn alpha1() -> f64 {
        DISK_PHANTOM_ALPHA.0
    }
    pub fn alpha2() -> f64 {
        DISK_PHANTOM_ALPHA.1
    }
    pub fn theta() -> Vec<f64> {
        DISK_PHANTOM_THETA.to_vec()
    }
    pub fn flux() -> f64 {
        REFERENCE_FLUX_AMPLITUDE
    }
    pub fn exposure() -> f64 {
        1.0
    }
    pub fn mask_fraction() -> f64 {
        0.5
    }
    pub fn mask_percentile() -> f64 {
        99.0
    }
}

impl Default for GridBlock {
    fn default() -> Self {
        Self {
            n_toa: 600,
            t_first_us: 70.11,
            t_last_us: 739.1,
            n_background: 3,
        }
    }
}

impl Default for FlightPathBlock {
    fn default() -> Self {
        Self { length_m: 10.4 }
    }
}

impl Default for ResolutionBlock {
    fn default() -> Self {
        let k = PulseKernelSpec::default();
        Self {
            family: k.family,
            shape: k.shape,
            tau0_us: k.tau0_s * 1e6,
            energy_exponent: k.energy_exponent,
            eref_ev: k.eref_ev,
            epsilon_trunc: k.epsilon_trunc,
            n_kernels: 5,
            kernel_file: None,
        }
    }
}

impl Default for SolverBlock {
    fn default() -> Self {
        let (n, d, t) = (
            SolveOptions::nuisance(),
            SolveOptions::density(),
            SolveOptions::tomography(),
        );
        Self {
            beta: 1.0,
            nuisance_max_iters: n.max_iters,
            nuisance_grad_tol: n.grad_tol,
            density_max_iters: d.max_iters,
            density_grad_tol: d.grad_tol,
            tomo_max_iters: t.max_iters,
            tomo_grad_tol: t.grad_tol,
        }
    }
}

/// Everything the forward model needs, built once from a configuration.
pub struct Setup {
    pub path: FlightPath,
    pub grid: TofGrid,
    pub model: ForwardModel,
    pub basis: BackgroundBasis,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    /// Parses and validates; `source` names the text in error messages.
    pub fn parse(text: &str, source: &str) -> CliResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::config(source, e.to_string().trim_end()))?;
        cfg.validate()
            .map_err(|(field, msg)| CliError::config(format!("{source}, field `{field}`"), msg))?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), (&'static str, String)> {
        let positive = |field: &'static str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err((field, format!("must be positive, got {v}")))
            }
        };
        if let Some([r, c]) = self.image_shape {
            if r == 0 || c == 0 {
                return Err(("image_shape", "both dimensions must be non-zero".into()));
            }
        }
        if self.grid.n_toa < 2 {
            return Err(("grid.n_toa", format!("needs at least 2 bins, got {}", self.grid.n_toa)));
        }
        positive("grid.t_first_us", self.grid.t_first_us)?;
        if self.grid.t_last_us <= self.grid.t_first_us {
            return Err(("grid.t_last_us", "must exceed grid.t_first_us".into()));
        }
        if self.grid.n_background == 0 {
            return Err(("grid.n_background", "needs at least one basis function".into()));
        }
        positive("flight_path.length_m", self.flight_path.length_m)?;
        let m = self.isotopes.labels.len();
        if m == 0 {
            return Err(("isotopes.labels", "no isotopes listed".into()));
        }
        for (i, a) in self.isotopes.labels.iter().enumerate() {
            if self.isotopes.labels[..i].contains(a) {
                return Err(("isotopes.labels", format!("duplicate isotope {a}")));
            }
        }
        match &self.isotopes.csv {
            Some(csv) if csv.len() != m => {
                return Err(("isotopes.csv", format!("{} files for {m} isotopes", csv.len())));
            }
            None => {
                if let Some(l) = self.isotopes.labels.iter().find(|l| library::find(l).is_none()) {
                    return Err((
                        "isotopes.labels",
                        format!("{l} is not in the built-in library; provide isotopes.csv"),
                    ));
                }
            }
            _ => {}
        }
        if let Some(mm) = &self.isotopes.molar_mass_g_per_mol {
            if mm.len() != m {
                return Err((
                    "isotopes.molar_mass_g_per_mol",
                    format!("{} values for {m} isotopes", mm.len()),
                ));
            }
            if let Some(&v) = mm.iter().find(|v| !(**v > 0.0)) {
                return Err(("isotopes.molar_mass_g_per_mol", format!("must be positive, got {v}")));
            }
        }
        if self.resolution.n_kernels == 0 {
            return Err(("resolution.n_kernels", "must be at least 1".into()));
        }
        self.kernel_spec()
            .validate()
            .map_err(|e| ("resolution", e.to_string()))?;
        if let Some(sim) = &self.simulation {
            if sim.densities_mmol_cm2.len() != m {
                return Err((
                    "simulation.densities_mmol_cm2",
                    format!("{} densities for {m} isotopes", sim.densities_mmol_cm2.len()),
                ));
            }
            if self.image_shape.is_none() {
                return Err(("image_shape", "required by the simulation block".into()));
            }
            positive("simulation.alpha1", sim.alpha1)?;
            positive("simulation.alpha2", sim.alpha2)?;
            positive("simulation.flux_amplitude", sim.flux_amplitude)?;
            positive("simulation.exposure", sim.exposure)?;
            if sim.theta_reference.len() != self.grid.n_background {
                return Err((
                    "simulation.theta_reference",
                    format!(
                        "{} coefficients for grid.n_background = {}",
                        sim.theta_reference.len(),
                        self.grid.n_background
                    ),
                ));
            }
            self.phantom_spec()
                .validate()
                .map_err(|e| ("simulation", e.to_string()))?;
        }
        let s = &self.solver;
        if !(s.beta >= 0.0 && s.beta.is_finite()) {
            return Err(("solver.beta", format!("must be non-negative, got {}", s.beta)));
        }
        for (field, v) in [
            ("solver.nuisance_max_iters", s.nuisance_max_iters),
            ("solver.density_max_iters", s.density_max_iters),
            ("solver.tomo_max_iters", s.tomo_max_iters),
        ] {
            if v == 0 {
                return Err((field, "must be at least 1".into()));
            }
        }
        positive("solver.nuisance_grad_tol", s.nuisance_grad_tol)?;
        positive("solver.density_grad_tol", s.density_grad_tol)?;
        positive("solver.tomo_grad_tol", s.tomo_grad_tol)?;
        if let Some(t) = &self.tomo {
            positive("tomo.voxel_pitch_cm", t.voxel_pitch_cm)?;
            if t.image_size == 0 {
                return Err(("tomo.image_size", "must be at least 1".into()));
            }
            if let Some(l) = t.lambda {
                if !(l >= 0.0 && l.is_finite()) {
                    return Err(("tomo.lambda", format!("must be non-negative, got {l}")));
                }
            }
            if !(t.mask_fraction > 0.0 && t.mask_fraction <= 1.0) {
                return Err(("tomo.mask_fraction", "must lie in (0, 1]".into()));
            }
            if !(t.mask_percentile > 0.0 && t.mask_percentile <= 100.0) {
                return Err(("tomo.mask_percentile", "must lie in (0, 100]".into()));
            }
            if let Some(iso) = &t.mask_isotope {
                if !self.isotopes.labels.contains(iso) {
                    return Err(("tomo.mask_isotope", format!("{iso} is not a configured isotope")));
                }
            }
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// SHA-256 over the canonical JSON form, so formatting and comments do not matter.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("configuration serializes");
        hex::encode(Sha256::digest(canonical))
    }

    pub fn image_shape(&self) -> CliResult<(usize, usize)> {
        self.image_shape
            .map(|[r, c]| (r, c))
            .ok_or_else(|| CliError::config("configuration", "`image_shape` is required for this command"))
    }

    pub fn kernel_spec(&self) -> PulseKernelSpec {
        let r = &self.resolution;
        PulseKernelSpec {
            family: r.family,
            shape: r.shape,
            tau0_s: r.tau0_us * 1e-6,
            energy_exponent: r.energy_exponent,
            eref_ev: r.eref_ev,
            epsilon_trunc: r.epsilon_trunc,
        }
    }

    pub fn setup(&self) -> CliResult<Setup> {
        let g = &self.grid;
        let path = FlightPath::new(self.flight_path.length_m)?;
        let base = TofGrid::spanning(g.t_first_us * 1e-6, g.t_last_us * 1e-6, g.n_toa, 0)?;
        let (grid, res) = match &self.resolution.kernel_file {
            Some(file) => {
                let kernels = read_kernel_file(&self.resolve(file))?;
                let i0 = kernels.iter().map(|k| k.len().saturating_sub(1)).max().unwrap_or(0);
                let grid = base.with_offset(i0)?;
                let res = ResolutionOperator::from_kernels(&grid, kernels)?;
                (grid, res)
            }
            None => {
                let spec = self.kernel_spec();
                let i0 = required_offset(&base, &path, &spec, self.resolution.n_kernels)?;
                let grid = base.with_offset(i0)?;
                let res = ResolutionOperator::build(&grid, &path, &spec, self.resolution.n_kernels)?;
                (grid, res)
            }
        };
        let tables = self.tables()?;
        let dict = CrossSectionDict::from_tables(&tables, &grid, &path)?;
        Ok(Setup {
            path,
            grid,
            model: ForwardModel::new(dict, res)?,
            basis: BackgroundBasis::new(g.n_background, g.n_toa)?,
        })
    }

    pub fn tables(&self) -> CliResult<Vec<IsotopeTable>> {
        let labels = &self.isotopes.labels;
        match &self.isotopes.csv {
            Some(files) => labels
                .iter()
                .zip(files)
                .map(|(label, f)| {
                    let p = self.resolve(f);
                    let file = std::fs::File::open(&p).map_err(|e| CliError::io(&p, e))?;
                    Ok(IsotopeTable::read_csv(label.clone(), file)?)
                })
                .collect(),
            None => {
                let l: Vec<&str> = labels.iter().map(String::as_str).collect();
                Ok(library::tables(&l)?)
            }
        }
    }

    pub fn phantom_spec(&self) -> DiskPhantomSpec {
        let sim = self.simulation.as_ref().expect("caller checked the simulation block");
        let shape = self.image_shape.map(|[r, c]| (r, c)).unwrap_or((1, 1));
        let densities: Vec<f64> = sim.densities_mmol_cm2.iter().map(|d| d * 1e-3).collect();
        DiskPhantomSpec::ring(shape, &densities, sim.radius_frac, sim.offset_frac)
    }

    pub fn scenario_spec(&self) -> CliResult<ScenarioSpec> {
        let sim = self
            .simulation
            .as_ref()
            .ok_or_else(|| CliError::config("configuration", "a [simulation] block is required"))?;
        Ok(ScenarioSpec {
            image_shape: self.image_shape()?,
            n_toa: self.grid.n_toa,
            flight_path_m: self.flight_path.length_m,
            t_first_s: self.grid.t_first_us * 1e-6,
            t_last_s: self.grid.t_last_us * 1e-6,
            kernel: self.kernel_spec(),
            n_kernels: self.resolution.n_kernels,
            theta_reference: sim.theta_reference.clone(),
            alpha1: sim.alpha1,
            alpha2: sim.alpha2,
            flux_amplitude_reference: sim.flux_amplitude,
            exposure: sim.exposure,
            isotopes: self.isotopes.labels.clone(),
        })
    }

    /// Ω0/Ωz from rectangles and masks; falls back to the simulated phantom's layout
    /// when the block is empty.
    pub fn regions(&self) -> CliResult<RegionMasks> {
        let shape = self.image_shape()?;
        let r = &self.regions;
        let empty = r.omega0.is_empty() && r.omegaz.is_empty() && r.omega0_mask.is_none() && r.omegaz_mask.is_none();
        if empty {
            return match &self.simulation {
                Some(_) => Ok(self.phantom_spec().regions()?),
                None => Err(CliError::config("configuration", "[regions] must define omegaz")),
            };
        }
        let collect = |rects: &[String], mask: &Option<PathBuf>, field: &str| -> CliResult<Vec<usize>> {
            let mut px = Vec::new();
            for (k, s) in rects.iter().enumerate() {
                let rect: tofrecon::forward::Rect = s
                    .parse()
                    .map_err(|e: tofrecon::Error| CliError::config(format!("regions.{field}[{k}]"), e.to_string()))?;
                px.extend(
                    rect.pixels(shape)
                        .map_err(|e| CliError::config(format!("regions.{field}[{k}]"), e.to_string()))?,
                );
            }
            if let Some(m) = mask {
                px.extend(pgm::read_mask(&self.resolve(m), shape)?);
            }
            Ok(px)
        };
        let omega0 = collect(&r.omega0, &r.omega0_mask, "omega0")?;
        let omegaz = collect(&r.omegaz, &r.omegaz_mask, "omegaz")?;
        RegionMasks::new(omega0, omegaz, shape.0 * shape.1).map_err(|e| CliError::config("regions", e.to_string()))
    }

    pub fn nuisance_options(&self) -> SolveOptions {
        SolveOptions {
            max_iters: self.solver.nuisance_max_iters,
            grad_tol: self.solver.nuisance_grad_tol,
            ..SolveOptions::nuisance()
        }
    }

    pub fn density_options(&self) -> SolveOptions {
        SolveOptions {
            max_iters: self.solver.density_max_iters,
            grad_tol: self.solver.density_grad_tol,
            ..SolveOptions::density()
        }
    }

    pub fn tomo_options(&self) -> SolveOptions {
        SolveOptions {
            max_iters: self.solver.tomo_max_iters,
            grad_tol: self.solver.tomo_grad_tol,
            ..SolveOptions::tomography()
        }
    }

    pub fn tomo_block(&self) -> CliResult<&TomoBlock> {
        self.tomo
            .as_ref()
            .ok_or_else(|| CliError::config("configuration", "a [tomo] block is required"))
    }

    /// Geometry for views of `slices` rows; detector columns must equal `tomo.image_size`.
    pub fn geometry(&self, slices: usize) -> CliResult<Geometry> {
        let t = self.tomo_block()?;
        Ok(Geometry::square(t.image_size, slices, t.voxel_pitch_cm)?)
    }

    pub fn regularization(&self) -> CliResult<Regularization> {
        let t = self.tomo_block()?;
        Ok(match t.lambda {
            Some(l) => Regularization::Fixed(vec![l; self.isotopes.labels.len()]),
            None => Regularization::Discrepancy,
        })
    }

    /// Disks of the simulated phantom, if any.
    pub fn disks(&self) -> Vec<Disk> {
        match &self.simulation {
            Some(_) => self.phantom_spec().disks,
            None => Vec::new(),
        }
    }
}
