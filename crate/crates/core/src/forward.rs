//! Deterministic forward maps: transmission `q(z)`, the full-image count model `F(Z)`,
//! region averages and the averaged-spectrum operators used by nuisance fitting.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::grids::TofGrid;
use crate::resolution::ResolutionOperator;
use crate::xsdict::{precondition, CrossSectionDict, Preconditioner};

/// Lower bound on exponent arguments; `exp(-700)` is still a normal double.
pub const EXP_FLOOR: f64 = -700.0;

/// Counts matrix (pixels × arrival bins) together with its time grid and image shape.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementStack {
    pub counts: Array2<f64>,
    pub grid: TofGrid,
    pub image_shape: (usize, usize),
}

impl MeasurementStack {
    pub fn new(counts: Array2<f64>, grid: TofGrid, image_shape: (usize, usize)) -> Result<Self> {
        if counts.nrows() != image_shape.0 * image_shape.1 {
            return Err(Error::Shape(format!(
                "{} pixel rows for a {}x{} image",
                counts.nrows(),
                image_shape.0,
                image_shape.1
            )));
        }
        check_len("measurement columns", counts.ncols(), grid.n_toa())?;
        if let Some(((p, j), v)) = counts.indexed_iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::Domain(format!("count at pixel {p}, bin {j} is {v}")));
        }
        Ok(Self {
            counts,
            grid,
            image_shape,
        })
    }

    pub fn n_pixels(&self) -> usize {
        self.counts.nrows()
    }
}

/// Open-beam region `Ω0` (possibly empty) and uniformly dense region `Ωz`, as pixel
/// indices in row-major image order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionMasks {
    omega0: Vec<usize>,
    omegaz: Vec<usize>,
}

/// Half-open pixel rectangle `[x0, x1) × [y0, y1)`; `x` indexes columns, `y` rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl std::str::FromStr for Rect {
    type Err = Error;

    /// Parses `x0,y0,x1,y1`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let nums: Vec<usize> = parts
            .iter()
            .map(|p| p.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| {
                Error::Config(format!(
                    "rectangle `{s}` must be four non-negative integers x0,y0,x1,y1"
                ))
            })?;
        if nums.len() != 4 {
            return Err(Error::Config(format!("rectangle `{s}` must have exactly four fields")));
        }
        let r = Rect {
            x0: nums[0],
            y0: nums[1],
            x1: nums[2],
            y1: nums[3],
        };
        if r.x1 <= r.x0 || r.y1 <= r.y0 {
            return Err(Error::Config(format!("rectangle `{s}` is empty")));
        }
        Ok(r)
    }
}

impl Rect {
    pub fn pixels(&self, image_shape: (usize, usize)) -> Result<Vec<usize>> {
        let (rows, cols) = image_shape;
        if self.x1 > cols || self.y1 > rows {
            return Err(Error::Config(format!(
                "rectangle {},{},{},{} exceeds the {rows}x{cols} image",
                self.x0, self.y0, self.x1, self.y1
            )));
        }
        Ok((self.y0..self.y1)
            .flat_map(|y| (self.x0..self.x1).map(move |x| y * cols + x))
            .collect())
    }
}

impl RegionMasks {
    pub fn new(mut omega0: Vec<usize>, mut omegaz: Vec<usize>, n_pixels: usize) -> Result<Self> {
        omega0.sort_unstable();
        omega0.dedup();
        omegaz.sort_unstable();
        omegaz.dedup();
        if omegaz.is_empty() {
            return Err(Error::EmptyRegion("the dense region Ωz has no pixels".into()));
        }
        if let Some(&p) = omega0.iter().chain(omegaz.iter()).find(|&&p| p >= n_pixels) {
            return Err(Error::Shape(format!(
                "region pixel {p} outside an image of {n_pixels} pixels"
            )));
        }
        if let Some(p) = omega0.iter().find(|p| omegaz.binary_search(p).is_ok()) {
            return Err(Error::Config(format!("pixel {p} belongs to both Ω0 and Ωz")));
        }
        Ok(Self { omega0, omegaz })
    }

    pub fn from_rects(image_shape: (usize, usize), omega0: &[Rect], omegaz: &[Rect]) -> Result<Self> {
        let collect = |rects: &[Rect]| -> Result<Vec<usize>> {
            let mut v = Vec::new();
            for r in rects {
                v.extend(r.pixels(image_shape)?);
            }
            Ok(v)
        };
        Self::new(collect(omega0)?, collect(omegaz)?, image_shape.0 * image_shape.1)
    }

    pub fn omega0(&self) -> &[usize] {
        &self.omega0
    }

    pub fn omegaz(&self) -> &[usize] {
        &self.omegaz
    }

    pub fn has_omega0(&self) -> bool {
        !self.omega0.is_empty()
    }
}

/// Dose ratio `α1`, background ratio `α2` and loss weight `β`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanScalars {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
}

impl ScanScalars {
    pub fn new(alpha1: f64, alpha2: f64, beta: f64) -> Result<Self> {
        if !(alpha1 > 0.0 && alpha1.is_finite()) {
            return Err(Error::Domain(format!("alpha1 must be positive, got {alpha1}")));
        }
        if !(alpha2 >= 0.0 && alpha2.is_finite()) {
            return Err(Error::Domain(format!("alpha2 must be non-negative, got {alpha2}")));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Domain(format!("beta must be non-negative, got {beta}")));
        }
        Ok(Self { alpha1, alpha2, beta })
    }
}

/// Materialized rank-one model: `Φ = v φ^T`, `B = v b^T`, plus `α1`, `α2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanModel {
    pub v: Array1<f64>,
    pub phi: Array1<f64>,
    pub b: Array1<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl ScanModel {
    pub fn validate(&self, n_pixels: usize, n_toa: usize) -> Result<()> {
        check_len("pixel profile", self.v.len(), n_pixels)?;
        check_len("flux spectrum", self.phi.len(), n_toa)?;
        check_len("background spectrum", self.b.len(), n_toa)?;
        ScanScalars::new(self.alpha1, self.alpha2, 0.0)?;
        Ok(())
    }
}

/// Scratch buffers for one spectrum evaluation.
#[derive(Clone, Debug)]
pub struct Workspace {
    /// `exp(-z~^T D~)` over flight bins.
    pub expo: Vec<f64>,
    /// `q` over arrival bins.
    pub q: Vec<f64>,
    /// `R g` over flight bins (adjoint pass).
    pub back: Vec<f64>,
}

/// Dictionary in the preconditioned frame together with the resolution operator.
#[derive(Clone, Debug)]
pub struct ForwardModel {
    dict: CrossSectionDict,
    res: ResolutionOperator,
    precond: Preconditioner,
    d_tilde: Array2<f64>,
}

impl ForwardModel {
    pub fn new(dict: CrossSectionDict, res: ResolutionOperator) -> Result<Self> {
        if dict.grid() != res.grid() {
            return Err(Error::Shape(
                "dictionary and resolution operator use different grids".into(),
            ));
        }
        let (precond, d_tilde) = precondition(&dict)?;
        Ok(Self {
            dict,
            res,
            precond,
            d_tilde,
        })
    }

    pub fn dict(&self) -> &CrossSectionDict {
        &self.dict
    }

    pub fn resolution(&self) -> &ResolutionOperator {
        &self.res
    }

    pub fn preconditioner(&self) -> &Preconditioner {
        &self.precond
    }

    pub fn d_tilde(&self) -> ArrayView2<'_, f64> {
        self.d_tilde.view()
    }

    pub fn n_isotopes(&self) -> usize {
        self.d_tilde.nrows()
    }

    pub fn n_tof(&self) -> usize {
        self.res.n_tof()
    }

    pub fn n_toa(&self) -> usize {
        self.res.n_toa()
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            expo: vec![0.0; self.n_tof()],
            q: vec![0.0; self.n_toa()],
            back: vec![0.0; self.n_tof()],
        }
    }

    /// Fills `ws.expo` and `ws.q` with `exp(-z~^T D~)` and `q~(z~)`.
    pub fn transmission_tilde(&self, z_tilde: &[f64], ws: &mut Workspace) {
        debug_assert_eq!(z_tilde.len(), self.n_isotopes());
        if z_tilde.iter().all(|&z| z == 0.0) {
            // columns of R sum to one only up to rounding; an empty sample is exact
            ws.expo.iter_mut().for_each(|v| *v = 1.0);
            ws.q.iter_mut().for_each(|v| *v = 1.0);
            return;
        }
        ws.expo.iter_mut().for_each(|v| *v = 0.0);
        for (zm, row) in z_tilde.iter().zip(self.d_tilde.outer_iter()) {
            if *zm == 0.0 {
                continue;
            }
            for (a, d) in ws.expo.iter_mut().zip(row.iter()) {
                *a -= zm * d;
            }
        }
        ws.expo.iter_mut().for_each(|a| *a = a.max(EXP_FLOOR).exp());
        self.res.apply_slice(&ws.expo, &mut ws.q);
    }

    /// Given `g = ∂L/∂q` over arrival bins and a workspace filled by
    /// [`Self::transmission_tilde`], writes `∂L/∂z~` into `grad`.
    pub fn backprop_tilde(&self, g: &[f64], ws: &mut Workspace, grad: &mut [f64]) {
        self.res.apply_transpose_slice(g, &mut ws.back);
        for (gm, row) in grad.iter_mut().zip(self.d_tilde.outer_iter()) {
            let mut s = 0.0;
            for ((d, e), r) in row.iter().zip(&ws.expo).zip(&ws.back) {
                s += d * e * r;
            }
            *gm = -s;
        }
    }

    /// `q(z)^T = exp(-z^T D) R` for areal densities in mol/cm².
    pub fn q_of_z(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_len("areal density", z.len(), self.n_isotopes())?;
        check_nonneg(z.iter().copied(), "areal density")?;
        let zt = self.precond.precondition(z)?;
        let mut ws = self.workspace();
        self.transmission_tilde(zt.as_slice().unwrap(), &mut ws);
        Ok(Array1::from(ws.q))
    }

    /// `F(Z) = α1 [Φ ⊙ (exp(-Z D) R) + α2 B]`, computed row by row.
    pub fn forward_counts(&self, z: ArrayView2<f64>, model: &ScanModel) -> Result<Array2<f64>> {
        check_len("density columns", z.ncols(), self.n_isotopes())?;
        model.validate(z.nrows(), self.n_toa())?;
        check_nonneg(z.iter().copied(), "areal density")?;
        let zt = self.precond.precondition_rows(z)?;
        let mut out = Array2::zeros((z.nrows(), self.n_toa()));
        Zip::from(out.axis_iter_mut(Axis(0)))
            .and(zt.axis_iter(Axis(0)))
            .and(&model.v)
            .par_for_each(|mut row, zrow, &vp| {
                let mut ws = self.workspace();
                self.transmission_tilde(&zrow.to_vec(), &mut ws);
                for (((o, q), phi), b) in row.iter_mut().zip(&ws.q).zip(&model.phi).zip(&model.b) {
                    *o = model.alpha1 * vp * (phi * q + model.alpha2 * b);
                }
            });
        Ok(out)
    }

    /// `f(z) = α1 [(ȳ_o - b) ⊙ q(z) + α2 b]`.
    pub fn f_fit(
        &self,
        z: ArrayView1<f64>,
        alpha1: f64,
        alpha2: f64,
        b: ArrayView1<f64>,
        y_open: ArrayView1<f64>,
    ) -> Result<Array1<f64>> {
        check_len("background spectrum", b.len(), self.n_toa())?;
        check_len("open-beam average", y_open.len(), self.n_toa())?;
        let q = self.q_of_z(z)?;
        Ok(alpha1 * ((&y_open - &b) * &q + alpha2 * &b))
    }
}

/// `f(0) = α1 [ȳ_o + (α2 - 1) b]`: expected counts at full transmission.
pub fn f_zero(alpha1: f64, alpha2: f64, b: ArrayView1<f64>, y_open: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_len("background spectrum", b.len(), y_open.len())?;
    Ok(alpha1 * (&y_open + &((alpha2 - 1.0) * &b)))
}

/// `f(∞) = α1 α2 b`: expected counts at zero transmission.
pub fn f_background(alpha1: f64, alpha2: f64, b: ArrayView1<f64>) -> Array1<f64> {
    (alpha1 * alpha2) * &b
}

/// `q(z)` without first building a [`ForwardModel`].
pub fn q_of_z(z: ArrayView1<f64>, dict: &CrossSectionDict, res: &ResolutionOperator) -> Result<Array1<f64>> {
    ForwardModel::new(dict.clone(), res.clone())?.q_of_z(z)
}

/// `ȳ^T = (ω^T Y) / (ω^T v)` over the listed pixels.
pub fn region_average(y: ArrayView2<f64>, v: ArrayView1<f64>, pixels: &[usize]) -> Result<Array1<f64>> {
    check_len("pixel profile", v.len(), y.nrows())?;
    if pixels.is_empty() {
        return Err(Error::EmptyRegion("cannot average over an empty region".into()));
    }
    let mut acc = Array1::zeros(y.ncols());
    let mut vsum = 0.0;
    for &p in pixels {
        if p >= y.nrows() {
            return Err(Error::Shape(format!("region pixel {p} outside {} pixels", y.nrows())));
        }
        acc += &y.row(p);
        vsum += v[p];
    }
    if !(vsum > 0.0) {
        return Err(Error::Degenerate("pixel profile sums to zero over the region".into()));
    }
    Ok(acc / vsum)
}

/// `ȳ_o^T = 1^T Y_o / 1^T v`.
pub fn open_average(y_open: ArrayView2<f64>, v: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_len("pixel profile", v.len(), y_open.nrows())?;
    let vsum = v.sum();
    if !(vsum > 0.0) {
        return Err(Error::Degenerate("pixel profile sums to zero".into()));
    }
    Ok(y_open.sum_axis(Axis(0)) / vsum)
}

/// The three averaged spectra used by nuisance fitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionAverages {
    pub y_open: Array1<f64>,
    pub y_sz: Array1<f64>,
    /// `None` when `Ω0` is empty.
    pub y_s0: Option<Array1<f64>>,
}

pub fn region_averages(
    y_sample: ArrayView2<f64>,
    y_open: ArrayView2<f64>,
    v: ArrayView1<f64>,
    masks: &RegionMasks,
) -> Result<RegionAverages> {
    if y_sample.dim() != y_open.dim() {
        return Err(Error::Shape(format!(
            "sample stack {:?} and open beam {:?} differ in shape",
            y_sample.dim(),
            y_open.dim()
        )));
    }
    Ok(RegionAverages {
        y_open: open_average(y_open, v)?,
        y_sz: region_average(y_sample, v, masks.omegaz())?,
        y_s0: if masks.has_omega0() {
            Some(region_average(y_sample, v, masks.omega0())?)
        } else {
            None
        },
    })
}

pub(crate) fn check_nonneg(values: impl Iterator<Item = f64>, what: &str) -> Result<()> {
    for (i, v) in values.enumerate() {
        if !(v >= 0.0) {
            return Err(Error::Domain(format!("{what} entry {i} is {v}; must be non-negative")));
        }
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::grids::{FlightPath, TofGrid};
    use crate::resolution::{required_offset, PulseKernelSpec};
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Small random model with a genuine Gamma resolution.
    pub(crate) fn random_model(n_toa: usize, n_m: usize, seed: u64) -> ForwardModel {
        let path = FlightPath::new(10.4).unwrap();
        let spec = PulseKernelSpec {
            tau0_s: 1.0e-6,
            epsilon_trunc: 1e-4,
            ..PulseKernelSpec::default()
        };
        let base = TofGrid::new(1.0e-6, 80e-6, n_toa, 0).unwrap();
        let i0 = required_offset(&base, &path, &spec, 3).unwrap();
        let grid = base.with_offset(i0).unwrap();
        let res = ResolutionOperator::build(&grid, &path, &spec, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Array2::from_shape_fn((n_m, grid.n_tof()), |_| 100.0 + 2000.0 * rng.random::<f64>().powi(4));
        let labels = (0..n_m).map(|m| format!("iso{m}")).collect();
        ForwardModel::new(CrossSectionDict::new(labels, d, grid).unwrap(), res).unwrap()
    }

    fn identity_model(d_row: f64, n: usize) -> ForwardModel {
        let grid = TofGrid::new(1e-6, 100e-6, n, 0).unwrap();
        let res = ResolutionOperator::from_kernels(&grid, vec![vec![1.0]]).unwrap();
        let dict = CrossSectionDict::new(vec!["x".into()], Array2::from_elem((1, n), d_row), grid).unwrap();
        ForwardModel::new(dict, res).unwrap()
    }

    #[test]
    fn zero_density_gives_exact_unit_transmission() {
        let fm = random_model(60, 3, 1);
        let q = fm.q_of_z(Array1::zeros(3).view()).unwrap();
        assert!(q.iter().all(|&v| v == 1.0), "{q:?}");
    }

    #[test]
    fn constant_row_identity_resolution() {
        let fm = identity_model(800.0, 10);
        let q = fm.q_of_z(array![0.002].view()).unwrap();
        let want = (-0.002f64 * 800.0).exp();
        assert!(q.iter().all(|&v| (v - want).abs() < 1e-14));
    }

    #[test]
    fn q_matches_dense_oracle() {
        let fm = random_model(50, 3, 2);
        let z = array![0.001, 0.0005, 0.002];
        let q = fm.q_of_z(z.view()).unwrap();
        let dense = fm.resolution().to_dense();
        let e = z.dot(&fm.dict().matrix()).mapv(|a| (-a).exp());
        let want = e.dot(&dense);
        for (a, b) in q.iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(q.iter().all(|&v| v > 0.0 && v <= 1.0 + 1e-15));
    }

    #[test]
    fn negative_density_rejected() {
        let fm = random_model(30, 2, 3);
        assert!(matches!(fm.q_of_z(array![0.1, -1e-9].view()), Err(Error::Domain(_))));
    }

    fn scan(np: usize, na: usize) -> ScanModel {
        ScanModel {
            v: Array1::from_shape_fn(np, |i| 0.5 + i as f64 / np as f64),
            phi: Array1::from_shape_fn(na, |j| 10.0 + (j as f64 * 0.1).sin()),
            b: Array1::from_shape_fn(na, |j| 2.0 + 0.01 * j as f64),
            alpha1: 0.483,
            alpha2: 0.685,
        }
    }

    #[test]
    fn forward_zero_and_large_density() {
        let fm = random_model(40, 2, 4);
        let s = scan(3, 40);
        let f0 = fm.forward_counts(Array2::zeros((3, 2)).view(), &s).unwrap();
        let finf = fm.forward_counts(Array2::from_elem((3, 2), 1e3).view(), &s).unwrap();
        for p in 0..3 {
            for j in 0..40 {
                let want0 = s.alpha1 * s.v[p] * (s.phi[j] + s.alpha2 * s.b[j]);
                assert_relative_eq!(f0[[p, j]], want0, max_relative = 1e-14);
                let wantinf = s.alpha1 * s.alpha2 * s.v[p] * s.b[j];
                assert_relative_eq!(finf[[p, j]], wantinf, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn one_pixel_forward_equals_q_composition() {
        let fm = random_model(40, 2, 5);
        let s = scan(1, 40);
        let z = array![[0.003, 0.001]];
        let f = fm.forward_counts(z.view(), &s).unwrap();
        let q = fm.q_of_z(z.row(0)).unwrap();
        for j in 0..40 {
            let want = s.alpha1 * s.v[0] * (s.phi[j] * q[j] + s.alpha2 * s.b[j]);
            assert_relative_eq!(f[[0, j]], want, max_relative = 1e-13);
        }
    }

    #[test]
    fn forward_shape_errors() {
        let fm = random_model(40, 2, 6);
        let s = scan(3, 40);
        assert!(matches!(
            fm.forward_counts(Array2::zeros((3, 3)).view(), &s),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            fm.forward_counts(Array2::zeros((2, 2)).view(), &s),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            fm.forward_counts(Array2::from_elem((3, 2), -1.0).view(), &s),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn region_average_examples() {
        let v = array![1.0, 2.0, 0.5, 0.5];
        let c = array![3.0, 1.0, 7.0];
        let y = crate::fluxbg::outer(v.view(), c.view());
        let masks = RegionMasks::new(vec![0, 3], vec![1, 2], 4).unwrap();
        let avg = region_averages(y.view(), y.view(), v.view(), &masks).unwrap();
        for a in [&avg.y_open, &avg.y_sz, avg.y_s0.as_ref().unwrap()] {
            for (x, w) in a.iter().zip(c.iter()) {
                assert_relative_eq!(*x, *w, max_relative = 1e-14);
            }
        }
        let single = region_average(y.view(), v.view(), &[1]).unwrap();
        assert_eq!(single, y.row(1).mapv(|x| x / 2.0));
        assert!(matches!(
            region_average(y.view(), v.view(), &[]),
            Err(Error::EmptyRegion(_))
        ));
        assert!(matches!(
            region_average(y.view(), array![0.0, 0.0, 1.0, 1.0].view(), &[0, 1]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn masks_validate() {
        assert!(RegionMasks::new(vec![1], vec![], 4).is_err());
        assert!(RegionMasks::new(vec![1], vec![1, 2], 4).is_err());
        assert!(RegionMasks::new(vec![], vec![7], 4).is_err());
        let m = RegionMasks::new(vec![], vec![2, 2, 1], 4).unwrap();
        assert_eq!(m.omegaz(), &[1, 2]);
        assert!(!m.has_omega0());
    }

    #[test]
    fn rect_parsing_and_pixels() {
        let r: Rect = "1,0,3,2".parse().unwrap();
        assert_eq!(r.pixels((4, 4)).unwrap(), vec![1, 2, 5, 6]);
        assert!("1,2,3".parse::<Rect>().is_err());
        assert!("3,0,1,2".parse::<Rect>().is_err());
        assert!("a,0,1,2".parse::<Rect>().is_err());
        assert!(r.pixels((1, 4)).is_err());
        let masks = RegionMasks::from_rects((4, 4), &["0,0,1,1".parse().unwrap()], &[r]).unwrap();
        assert_eq!(masks.omega0(), &[0]);
    }

    #[test]
    fn f_operator_identities() {
        let fm = random_model(40, 2, 7);
        let b = Array1::from_shape_fn(40, |j| 1.0 + 0.05 * j as f64);
        let yo = Array1::from_shape_fn(40, |j| 12.0 - 0.1 * j as f64);
        let f0 = f_zero(0.7, 1.0, b.view(), yo.view()).unwrap();
        assert_eq!(f0, 0.7 * &yo);
        let fz = fm
            .f_fit(Array1::zeros(2).view(), 0.7, 0.4, b.view(), yo.view())
            .unwrap();
        let f0 = f_zero(0.7, 0.4, b.view(), yo.view()).unwrap();
        for (a, c) in fz.iter().zip(f0.iter()) {
            assert_relative_eq!(*a, *c, max_relative = 1e-14);
        }
        let fbig = fm
            .f_fit(array![1e3, 1e3].view(), 0.7, 0.4, b.view(), yo.view())
            .unwrap();
        let finf = f_background(0.7, 0.4, b.view());
        for (a, c) in fbig.iter().zip(finf.iter()) {
            assert_relative_eq!(*a, *c, max_relative = 1e-12);
        }
    }

    #[test]
    fn dense_region_average_matches_f_fit() {
        // Constant z over Ωz: the Ωz average of F(Z) equals f(z) built from ȳ_o.
        let fm = random_model(40, 2, 8);
        let np = 6;
        let mut s = scan(np, 40);
        crate::fluxbg::normalize_profile(&mut s.v).unwrap();
        let z = array![0.002, 0.0007];
        let zmat = Array2::from_shape_fn((np, 2), |(p, m)| if p < 3 { z[m] } else { 0.0 });
        let f = fm.forward_counts(zmat.view(), &s).unwrap();
        let open = crate::fluxbg::expected_open(s.v.view(), s.phi.view(), s.b.view()).unwrap();
        let masks = RegionMasks::new(vec![3, 4, 5], vec![0, 1, 2], np).unwrap();
        let avg = region_averages(f.view(), open.view(), s.v.view(), &masks).unwrap();
        let fz = fm
            .f_fit(z.view(), s.alpha1, s.alpha2, s.b.view(), avg.y_open.view())
            .unwrap();
        let f0 = f_zero(s.alpha1, s.alpha2, s.b.view(), avg.y_open.view()).unwrap();
        for j in 0..40 {
            assert!((avg.y_sz[j] - fz[j]).abs() < 1e-10 * fz[j]);
            assert!((avg.y_s0.as_ref().unwrap()[j] - f0[j]).abs() < 1e-10 * f0[j]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn flux_term_monotone_in_density(m in 0usize..2, dz in 1e-5f64..1e-2, seed in 0u64..50) {
            let fm = random_model(30, 2, seed);
            let z = array![0.001, 0.002];
            let mut z2 = z.clone();
            z2[m] += dz;
            let q1 = fm.q_of_z(z.view()).unwrap();
            let q2 = fm.q_of_z(z2.view()).unwrap();
            for (a, b) in q1.iter().zip(q2.iter()) {
                prop_assert!(*b <= *a);
            }
        }
    }
}
