//! Stage two: per-pixel Poisson maximum-likelihood areal densities and the linear
//! baseline used to start them.

use log::debug;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::estimate::{dictionary_through_resolution, NuisanceEstimate, Q_FLOOR};
use crate::forward::{check_nonneg, ForwardModel, ScanModel, Workspace};
use crate::linalg::{right_pinv, RIDGE};
use crate::optim::{minimize, Bounds, SolveOptions, Termination};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArealDensityMap {
    /// `N_p × N_m`, mol/cm².
    pub z: Array2<f64>,
    pub isotopes: Vec<String>,
    pub image_shape: (usize, usize),
    /// Hash of the nuisance estimate the map was reconstructed with.
    pub nuisance_fingerprint: String,
}

impl ArealDensityMap {
    pub fn new(
        z: Array2<f64>,
        isotopes: Vec<String>,
        image_shape: (usize, usize),
        nuisance_fingerprint: String,
    ) -> Result<Self> {
        if z.nrows() != image_shape.0 * image_shape.1 || z.ncols() != isotopes.len() {
            return Err(Error::Shape(format!(
                "density map {}x{} for a {}x{} image with {} isotopes",
                z.nrows(),
                z.ncols(),
                image_shape.0,
                image_shape.1,
                isotopes.len()
            )));
        }
        check_nonneg(z.iter().copied(), "areal density")?;
        Ok(Self {
            z,
            isotopes,
            image_shape,
            nuisance_fingerprint,
        })
    }
}

/// SHA-256 of the serialized nuisance estimate.
pub fn nuisance_fingerprint(est: &NuisanceEstimate) -> Result<String> {
    Ok(hex::encode(Sha256::digest(est.to_json()?.as_bytes())))
}

fn check_stack(y: ArrayView2<f64>, scan: &ScanModel, model: &ForwardModel, what: &str) -> Result<()> {
    if y.ncols() != model.n_toa() {
        return Err(Error::Shape(format!(
            "{what} has {} bins, expected {}",
            y.ncols(),
            model.n_toa()
        )));
    }
    scan.validate(y.nrows(), model.n_toa())?;
    check_nonneg(y.iter().copied(), what)
}

/// Per-pixel NLL in preconditioned coordinates, writing `∂/∂z~` into `grad`.
struct PixelObjective<'a> {
    model: &'a ForwardModel,
    scan: &'a ScanModel,
}

impl PixelObjective<'_> {
    /// `Σ_j F_j - y_j log F_j`; `Err` carries the offending bin.
    fn eval(
        &self,
        p: usize,
        y: ArrayView1<f64>,
        zt: &[f64],
        ws: &mut Workspace,
        grad: Option<&mut [f64]>,
    ) -> std::result::Result<f64, (usize, f64)> {
        self.model.transmission_tilde(zt, ws);
        let s = self.scan;
        let scale = s.alpha1 * s.v[p];
        let mut nll = 0.0;
        let want_grad = grad.is_some();
        for j in 0..ws.q.len() {
            let fj = scale * (s.phi[j] * ws.q[j] + s.alpha2 * s.b[j]);
            let yj = y[j];
            if fj > 0.0 {
                nll += fj - if yj > 0.0 { yj * fj.ln() } else { 0.0 };
            } else if yj > 0.0 {
                return Err((j, fj));
            }
            if want_grad {
                // reuse q as the sensitivity ∂L/∂q
                ws.q[j] = if fj > 0.0 {
                    (1.0 - yj / fj) * scale * s.phi[j]
                } else {
                    scale * s.phi[j]
                };
            }
        }
        if let Some(g) = grad {
            let q = std::mem::take(&mut ws.q);
            self.model.backprop_tilde(&q, ws, g);
            ws.q = q;
        }
        Ok(nll)
    }
}

impl PixelObjective<'_> {
    /// `1 / sqrt(I_mm)` from the diagonal of the Fisher information at `zt`
    /// (1 where a component carries no information).
    fn fisher_scaling(&self, p: usize, zt: &[f64], ws: &mut Workspace) -> Vec<f64> {
        self.model.transmission_tilde(zt, ws);
        let s = self.scan;
        let scale = s.alpha1 * s.v[p];
        let mut weighted = vec![0.0; ws.expo.len()];
        let mut dq = vec![0.0; ws.q.len()];
        self.model
            .d_tilde()
            .outer_iter()
            .map(|row| {
                for ((w, d), e) in weighted.iter_mut().zip(row.iter()).zip(&ws.expo) {
                    *w = d * e;
                }
                self.model.resolution().apply_slice(&weighted, &mut dq);
                let info: f64 = (0..dq.len())
                    .map(|j| {
                        let fj = scale * (s.phi[j] * ws.q[j] + s.alpha2 * s.b[j]);
                        let dfj = scale * s.phi[j] * dq[j];
                        if fj > 0.0 {
                            dfj * dfj / fj
                        } else {
                            0.0
                        }
                    })
                    .sum();
                if info > 0.0 && info.is_finite() {
                    1.0 / info.sqrt()
                } else {
                    1.0
                }
            })
            .collect()
    }
}

fn infinite(p: usize, (bin, mean): (usize, f64), y: ArrayView1<f64>) -> Error {
    Error::InfiniteLikelihood {
        pixel: p,
        bin,
        mean,
        count: y[bin],
    }
}

/// Per-pixel NLL values, in pixel order.
pub fn poisson_nll_per_pixel(
    z: ArrayView2<f64>,
    y_sample: ArrayView2<f64>,
    scan: &ScanModel,
    model: &ForwardModel,
) -> Result<Array1<f64>> {
    check_stack(y_sample, scan, model, "sample counts")?;
    if z.dim() != (y_sample.nrows(), model.n_isotopes()) {
        return Err(Error::Shape(format!(
            "density matrix {:?} for {} pixels",
            z.dim(),
            y_sample.nrows()
        )));
    }
    check_nonneg(z.iter().copied(), "areal density")?;
    let zt = model.preconditioner().precondition_rows(z)?;
    let obj = PixelObjective { model, scan };
    let values: Vec<Result<f64>> = (0..y_sample.nrows())
        .into_par_iter()
        .map_init(
            || model.workspace(),
            |ws, p| {
                let zrow = zt.row(p).to_vec();
                obj.eval(p, y_sample.row(p), &zrow, ws, None)
                    .map_err(|e| infinite(p, e, y_sample.row(p)))
            },
        )
        .collect();
    values.into_iter().collect::<Result<Vec<_>>>().map(Array1::from)
}

/// `Σ F(Z) - Y ⊙ log F(Z)` without the `log Y!` constant; summed in pixel order.
pub fn poisson_nll(
    z: ArrayView2<f64>,
    y_sample: ArrayView2<f64>,
    scan: &ScanModel,
    model: &ForwardModel,
) -> Result<f64> {
    Ok(poisson_nll_per_pixel(z, y_sample, scan, model)?.iter().sum())
}

/// `∂ NLL / ∂Z` in mol/cm² units.
pub fn poisson_nll_gradient(
    z: ArrayView2<f64>,
    y_sample: ArrayView2<f64>,
    scan: &ScanModel,
    model: &ForwardModel,
) -> Result<Array2<f64>> {
    check_stack(y_sample, scan, model, "sample counts")?;
    if z.dim() != (y_sample.nrows(), model.n_isotopes()) {
        return Err(Error::Shape(format!(
            "density matrix {:?} for {} pixels",
            z.dim(),
            y_sample.nrows()
        )));
    }
    check_nonneg(z.iter().copied(), "areal density")?;
    let zt = model.preconditioner().precondition_rows(z)?;
    let c = model.preconditioner().diag().to_owned();
    let obj = PixelObjective { model, scan };
    let mut grad = Array2::zeros(z.dim());
    let status: Vec<Result<()>> = grad
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .map_init(
            || model.workspace(),
            |ws, (p, mut g)| {
                let zrow = zt.row(p).to_vec();
                let mut gt = vec![0.0; c.len()];
                obj.eval(p, y_sample.row(p), &zrow, ws, Some(&mut gt))
                    .map_err(|e| infinite(p, e, y_sample.row(p)))?;
                // z~ = C z, so ∂/∂z = C ∂/∂z~
                for ((o, gm), cm) in g.iter_mut().zip(&gt).zip(c.iter()) {
                    *o = gm * cm;
                }
                Ok(())
            },
        )
        .collect();
    status.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(grad)
}

/// Measured transmission `|(Y_s/α1 - α2 B) / (Y_o - B)|` clipped to `[Q_FLOOR, 1]`.
pub fn measured_transmission(
    y_sample: ArrayView2<f64>,
    y_open: ArrayView2<f64>,
    est: &NuisanceEstimate,
) -> Result<Array2<f64>> {
    if y_sample.dim() != y_open.dim() {
        return Err(Error::Shape(format!(
            "sample {:?} and open-beam {:?} stacks differ",
            y_sample.dim(),
            y_open.dim()
        )));
    }
    let (n_p, n_a) = y_sample.dim();
    if est.v_hat.len() != n_p || est.b_hat.len() != n_a {
        return Err(Error::Shape(format!(
            "nuisance estimate for {}x{} does not fit {n_p}x{n_a} stacks",
            est.v_hat.len(),
            est.b_hat.len()
        )));
    }
    let mut q = Array2::zeros((n_p, n_a));
    for p in 0..n_p {
        let vp = est.v_hat[p];
        for j in 0..n_a {
            let bpj = vp * est.b_hat[j];
            let den = y_open[[p, j]] - bpj;
            if den == 0.0 {
                return Err(Error::ZeroDivision { pixel: p, bin: j });
            }
            let num = y_sample[[p, j]] / est.alpha1_hat - est.alpha2_hat * bpj;
            q[[p, j]] = (num / den).abs().clamp(Q_FLOOR, 1.0);
        }
    }
    Ok(q)
}

/// Linear estimate `-log(Q) (D R)^+`; deliberately not projected onto `Z ≥ 0`.
pub fn linear_baseline(
    y_sample: ArrayView2<f64>,
    y_open: ArrayView2<f64>,
    est: &NuisanceEstimate,
    model: &ForwardModel,
) -> Result<Array2<f64>> {
    est.verify(model)?;
    let q = measured_transmission(y_sample, y_open, est)?;
    let neglog = q.mapv(|v| -v.ln());
    let m = dictionary_through_resolution(model);
    let pinv = right_pinv(m.view(), RIDGE)?;
    let zt = neglog.dot(&pinv);
    model.preconditioner().unprecondition_rows(zt.view())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArealReconstruction {
    pub map: ArealDensityMap,
    /// `trace[k]` sums every pixel's accepted objective after `min(k, its last)` iterations.
    pub trace: Vec<f64>,
    pub max_iterations: usize,
    pub pixels_at_max_iters: usize,
}

/// Minimizes the NLL over `Z ≥ 0`, pixel by pixel, starting from `z_init` (projected
/// onto the nonnegative orthant).
pub fn reconstruct_areal(
    y_sample: ArrayView2<f64>,
    z_init: ArrayView2<f64>,
    est: &NuisanceEstimate,
    model: &ForwardModel,
    image_shape: (usize, usize),
    opts: &SolveOptions,
) -> Result<ArealReconstruction> {
    est.verify(model)?;
    let scan = est.scan_model();
    check_stack(y_sample, &scan, model, "sample counts")?;
    let n_p = y_sample.nrows();
    let n_m = model.n_isotopes();
    if z_init.dim() != (n_p, n_m) {
        return Err(Error::Shape(format!(
            "initial densities {:?}, expected ({n_p}, {n_m})",
            z_init.dim()
        )));
    }
    opts.validate()?;
    let start = z_init.mapv(|v| if v.is_finite() { v.max(0.0) } else { 0.0 });
    let zt0 = model.preconditioner().precondition_rows(start.view())?;
    let obj = PixelObjective { model, scan: &scan };

    let mut z_tilde = Array2::zeros((n_p, n_m));
    let results: Vec<Result<(Vec<f64>, Termination)>> = z_tilde
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .enumerate()
        .map_init(
            || model.workspace(),
            |ws, (p, mut out)| {
                let y = y_sample.row(p);
                let x0 = zt0.row(p).to_vec();
                let (x, trace, term) = solve_pixel(&obj, p, y, x0, opts, ws)?;
                out.assign(&ArrayView1::from(&x));
                Ok((trace, term))
            },
        )
        .collect();
    let mut traces = Vec::with_capacity(n_p);
    let mut at_max = 0;
    for r in results {
        let (trace, term) = r?;
        if term == Termination::MaxIters {
            at_max += 1;
        }
        traces.push(trace);
    }
    let max_iterations = traces.iter().map(|t| t.len() - 1).max().unwrap_or(0);
    let trace = aggregate_trace(&traces);
    debug!("stage two: {max_iterations} max iterations, {at_max} pixels hit the limit");
    let mut z = model.preconditioner().unprecondition_rows(z_tilde.view())?;
    z.mapv_inplace(|v| v.max(0.0));
    let map = ArealDensityMap::new(
        z,
        model.dict().isotopes().to_vec(),
        image_shape,
        nuisance_fingerprint(est)?,
    )?;
    Ok(ArealReconstruction {
        map,
        trace,
        max_iterations,
        pixels_at_max_iters: at_max,
    })
}

/// Rounds of diagonally rescaled projected gradient per pixel; the scaling is refreshed
/// from the Fisher information whenever a round exhausts its share of iterations.
const SCALING_ROUNDS: usize = 4;

fn solve_pixel(
    obj: &PixelObjective,
    p: usize,
    y: ArrayView1<f64>,
    x0: Vec<f64>,
    opts: &SolveOptions,
    ws: &mut Workspace,
) -> Result<(Vec<f64>, Vec<f64>, Termination)> {
    // The saturated-model constant makes the objective a deviance that is O(N_A) near
    // the optimum, so the relative stopping rule does not loosen with dose.
    let offset = saturated_nll(y);
    let n = x0.len();
    let bounds = Bounds::nonnegative(n);
    let per_round = opts.max_iters.div_ceil(SCALING_ROUNDS).max(1);
    let mut remaining = opts.max_iters;
    let mut x = x0;
    let mut trace: Vec<f64> = Vec::new();
    let mut xs = vec![0.0; n];
    loop {
        let scale = obj.fisher_scaling(p, &x, ws);
        let u0: Vec<f64> = x.iter().zip(&scale).map(|(v, s)| v / s).collect();
        let round = SolveOptions {
            max_iters: per_round.min(remaining),
            ..*opts
        };
        let mut failure = None;
        let f = |u: &[f64], g: &mut [f64]| {
            for i in 0..n {
                xs[i] = u[i] * scale[i];
            }
            match obj.eval(p, y, &xs, ws, Some(g)) {
                Ok(v) => {
                    for i in 0..n {
                        g[i] *= scale[i];
                    }
                    v - offset
                }
                Err(e) => {
                    failure.get_or_insert(e);
                    g.iter_mut().for_each(|v| *v = 0.0);
                    f64::INFINITY
                }
            }
        };
        let res = match minimize(f, &bounds, &u0, &round) {
            Ok(r) => r,
            Err(e) => {
                return Err(match failure {
                    Some(inf) => infinite(p, inf, y),
                    None => e,
                })
            }
        };
        let skip = usize::from(!trace.is_empty());
        trace.extend(res.trace[skip..].iter().map(|v| v + offset));
        x = res.x.iter().zip(&scale).map(|(u, s)| u * s).collect();
        remaining -= res.iterations;
        if res.termination != Termination::MaxIters || remaining == 0 {
            return Ok((x, trace, res.termination));
        }
    }
}

/// `Σ y - y log y`: the NLL of a model that reproduces every count exactly.
fn saturated_nll(y: ArrayView1<f64>) -> f64 {
    y.iter().map(|&v| if v > 0.0 { v - v * v.ln() } else { 0.0 }).sum()
}

/// Sum of per-pixel traces, each held at its final value once that pixel has stopped.
pub fn aggregate_trace(traces: &[Vec<f64>]) -> Vec<f64> {
    let len = traces.iter().map(Vec::len).max().unwrap_or(0);
    (0..len)
        .map(|k| traces.iter().map(|t| t[k.min(t.len() - 1)]).sum())
        .collect()
}

/// Linear baseline followed by the maximum-likelihood refinement.
pub fn reconstruct_from_stacks(
    y_sample: ArrayView2<f64>,
    y_open: ArrayView2<f64>,
    est: &NuisanceEstimate,
    model: &ForwardModel,
    image_shape: (usize, usize),
    opts: &SolveOptions,
) -> Result<(Array2<f64>, ArealReconstruction)> {
    let lin = linear_baseline(y_sample, y_open, est, model)?;
    let rec = reconstruct_areal(y_sample, lin.view(), est, model, image_shape, opts)?;
    Ok((lin, rec))
}

/// Mean and population standard deviation of each column over `pixels`.
pub fn region_stats(z: ArrayView2<f64>, pixels: &[usize]) -> Result<Vec<(f64, f64)>> {
    if pixels.is_empty() {
        return Err(Error::EmptyRegion("statistics region has no pixels".into()));
    }
    if let Some(&p) = pixels.iter().find(|&&p| p >= z.nrows()) {
        return Err(Error::Shape(format!("region pixel {p} outside {} rows", z.nrows())));
    }
    let sel = z.select(Axis(0), pixels);
    let mean = sel.mean_axis(Axis(0)).expect("non-empty");
    let std = sel.std_axis(Axis(0), 0.0);
    Ok(mean.iter().zip(std.iter()).map(|(m, s)| (*m, *s)).collect())
}

/// `Z diag(z_ref)^-1`: each isotope relative to a reference density.
pub fn normalized_maps(z: ArrayView2<f64>, z_ref: ArrayView1<f64>) -> Result<Array2<f64>> {
    if z_ref.len() != z.ncols() {
        return Err(Error::Shape(format!(
            "{} reference values for {} isotopes",
            z_ref.len(),
            z.ncols()
        )));
    }
    if z_ref.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Domain("reference densities must be positive".into()));
    }
    let mut out = z.to_owned();
    Zip::from(out.columns_mut()).and(&z_ref).for_each(|mut c, r| c /= *r);
    Ok(out)
}
