//! Stage one: nuisance-parameter estimation from region-averaged spectra.
//!
//! The fit minimizes `||ȳ_sz - f(z)||² + β ||ȳ_s0 - f(0)||²` jointly over
//! `(z >= 0, α1 >= 0, α2 >= 0, θ)`. Densities are handled in the preconditioned
//! frame `z~ = C z` internally.

use log::{debug, warn};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::fluxbg::{estimate_v, BackgroundBasis};
use crate::forward::{region_averages, ForwardModel, RegionAverages, RegionMasks, ScanModel, Workspace};
use crate::linalg::{solve_gram, RIDGE};
use crate::optim::{least_squares, Bounds, Residuals, SolveOptions, SolveResult, Termination};
use crate::xsdict::grid_fingerprint;

/// Floor applied to the transmission estimate before taking its logarithm.
pub const Q_FLOOR: f64 = 1e-6;
/// Background fraction of the open beam used when the min-ratio initializer fails.
pub const FALLBACK_BACKGROUND_FRACTION: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceEstimate {
    pub isotopes: Vec<String>,
    /// Areal densities over Ωz, mol/cm².
    pub z_hat: Array1<f64>,
    pub alpha1_hat: f64,
    pub alpha2_hat: f64,
    pub theta_hat: Array1<f64>,
    /// `ȳ_o - b(θ^)`; may hold negative entries, see `negative_flux_bins`.
    pub phi_hat: Array1<f64>,
    pub b_hat: Array1<f64>,
    pub v_hat: Array1<f64>,
    pub beta: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub termination: Termination,
    pub negative_flux_bins: usize,
    pub grid_fingerprint: String,
    pub dict_fingerprint: String,
}

impl NuisanceEstimate {
    /// Stage-two model `Φ^ = v^ φ^T`, `B^ = v^ b(θ^)^T` with negative flux clamped to 0.
    pub fn scan_model(&self) -> ScanModel {
        ScanModel {
            v: self.v_hat.clone(),
            phi: self.phi_hat.mapv(|p| p.max(0.0)),
            b: self.b_hat.clone(),
            alpha1: self.alpha1_hat,
            alpha2: self.alpha2_hat,
        }
    }

    /// Effective open beam `f(0) = α1 [ȳ_o + (α2 - 1) b]`.
    pub fn effective_open_beam(&self) -> Array1<f64> {
        let y_open = &self.phi_hat + &self.b_hat;
        self.alpha1_hat * (&y_open + &((self.alpha2_hat - 1.0) * &self.b_hat))
    }

    /// Effective background `α1 α2 b(θ)`.
    pub fn effective_background(&self) -> Array1<f64> {
        (self.alpha1_hat * self.alpha2_hat) * &self.b_hat
    }

    /// Refuses artifacts built against another grid or dictionary.
    pub fn verify(&self, model: &ForwardModel) -> Result<()> {
        let g = grid_fingerprint(model.dict().grid());
        if g != self.grid_fingerprint {
            return Err(Error::Fingerprint {
                what: "grid".into(),
                expected: g,
                found: self.grid_fingerprint.clone(),
            });
        }
        let d = model.dict().fingerprint();
        if d != self.dict_fingerprint {
            return Err(Error::Fingerprint {
                what: "cross-section dictionary".into(),
                expected: d,
                found: self.dict_fingerprint.clone(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Nuisance parameters in the unpreconditioned frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NuisanceParams {
    pub z: Array1<f64>,
    pub alpha1: f64,
    pub alpha2: f64,
    pub theta: Array1<f64>,
}

/// Loss over the packed vector `[z~, α1, α2, θ]`.
pub struct NuisanceProblem<'a> {
    model: &'a ForwardModel,
    basis: &'a BackgroundBasis,
    y_open: ArrayView1<'a, f64>,
    y_sz: ArrayView1<'a, f64>,
    y_s0: Option<ArrayView1<'a, f64>>,
    beta: f64,
}

pub struct ProblemScratch {
    ws: Workspace,
    b: Vec<f64>,
    dq: Vec<f64>,
    db: Vec<f64>,
}

impl<'a> NuisanceProblem<'a> {
    pub fn new(
        model: &'a ForwardModel,
        basis: &'a BackgroundBasis,
        avg: &'a RegionAverages,
        beta: f64,
    ) -> Result<Self> {
        let na = model.n_toa();
        check_len("open-beam average", avg.y_open.len(), na)?;
        check_len("dense-region average", avg.y_sz.len(), na)?;
        check_len("background basis", basis.n_toa(), na)?;
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be non-negative, got {beta}")));
        }
        let y_s0 = match (&avg.y_s0, beta > 0.0) {
            (Some(y), true) => {
                check_len("open-region average", y.len(), na)?;
                Some(y.view())
            }
            (None, true) => {
                return Err(Error::Config(
                    "beta > 0 requires an open-beam region Ω0; set beta = 0 when no such region exists".into(),
                ))
            }
            (_, false) => None,
        };
        Ok(Self {
            model,
            basis,
            y_open: avg.y_open.view(),
            y_sz: avg.y_sz.view(),
            y_s0,
            beta,
        })
    }

    pub fn n_vars(&self) -> usize {
        self.model.n_isotopes() + 2 + self.basis.n_b()
    }

    pub fn scratch(&self) -> ProblemScratch {
        let na = self.model.n_toa();
        ProblemScratch {
            ws: self.model.workspace(),
            b: vec![0.0; na],
            dq: vec![0.0; na],
            db: vec![0.0; na],
        }
    }

    pub fn bounds(&self) -> Bounds {
        let nm = self.model.n_isotopes();
        let mut lower = vec![0.0; nm + 2];
        lower.extend(std::iter::repeat_n(f64::NEG_INFINITY, self.basis.n_b()));
        Bounds::from_lower(lower)
    }

    pub fn pack(&self, p: &NuisanceParams) -> Result<Vec<f64>> {
        let zt = self.model.preconditioner().precondition(p.z.view())?;
        check_len("theta", p.theta.len(), self.basis.n_b())?;
        let mut x = zt.to_vec();
        x.push(p.alpha1);
        x.push(p.alpha2);
        x.extend(p.theta.iter());
        Ok(x)
    }

    pub fn unpack(&self, x: &[f64]) -> Result<NuisanceParams> {
        let nm = self.model.n_isotopes();
        let zt = Array1::from(x[..nm].to_vec());
        Ok(NuisanceParams {
            z: self.model.preconditioner().unprecondition(zt.view())?,
            alpha1: x[nm],
            alpha2: x[nm + 1],
            theta: Array1::from(x[nm + 2..].to_vec()),
        })
    }

    /// Loss at `x`; writes `∂L/∂x` into `grad`.
    pub fn loss_grad(&self, x: &[f64], grad: &mut [f64], s: &mut ProblemScratch) -> f64 {
        let nm = self.model.n_isotopes();
        let (zt, a1, a2, theta) = (&x[..nm], x[nm], x[nm + 1], &x[nm + 2..]);
        let p = self.basis.matrix();
        for (k, bk) in s.b.iter_mut().enumerate() {
            let mut e = 0.0;
            for (n, th) in theta.iter().enumerate() {
                e += th * p[[n, k]];
            }
            *bk = e.exp();
        }
        self.model.transmission_tilde(zt, &mut s.ws);
        let q = &s.ws.q;
        let (mut loss, mut ga1, mut ga2) = (0.0, 0.0, 0.0);
        for k in 0..q.len() {
            let (yo, b) = (self.y_open[k], s.b[k]);
            let flux = yo - b;
            let inner = flux * q[k] + a2 * b;
            let r = a1 * inner - self.y_sz[k];
            loss += r * r;
            s.dq[k] = 2.0 * r * a1 * flux;
            ga1 += 2.0 * r * inner;
            ga2 += 2.0 * r * a1 * b;
            s.db[k] = 2.0 * r * a1 * (a2 - q[k]);
        }
        if let Some(y0) = self.y_s0 {
            for k in 0..q.len() {
                let b = s.b[k];
                let inner = self.y_open[k] + (a2 - 1.0) * b;
                let r = a1 * inner - y0[k];
                loss += self.beta * r * r;
                ga1 += 2.0 * self.beta * r * inner;
                ga2 += 2.0 * self.beta * r * a1 * b;
                s.db[k] += 2.0 * self.beta * r * a1 * (a2 - 1.0);
            }
        }
        let dq = std::mem::take(&mut s.dq);
        self.model.backprop_tilde(&dq, &mut s.ws, &mut grad[..nm]);
        s.dq = dq;
        grad[nm] = ga1;
        grad[nm + 1] = ga2;
        for (n, g) in grad[nm + 2..].iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..s.b.len() {
                acc += s.db[k] * s.b[k] * p[[n, k]];
            }
            *g = acc;
        }
        loss
    }

    pub fn loss(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.loss_grad(x, &mut g, &mut self.scratch())
    }

    /// Closed-form starting point. Returns the packed vector and whether the
    /// background fallback was used.
    pub fn initialize(&self, y_s0_for_alpha: ArrayView1<f64>) -> Result<(NuisanceParams, bool)> {
        let alpha2 = 1.0;
        let so: f64 = self.y_open.sum();
        if !(so > 0.0) {
            return Err(Error::Degenerate("open-beam average has no counts".into()));
        }
        let alpha1 = y_s0_for_alpha.sum() / so;
        if !(alpha1 > 0.0) {
            return Err(Error::Degenerate(
                "sample average has no counts; cannot initialize alpha1".into(),
            ));
        }
        let min_ratio = self
            .y_sz
            .iter()
            .zip(self.y_open.iter())
            .filter(|(_, o)| **o > 0.0)
            .map(|(s, o)| s / o)
            .fold(f64::INFINITY, f64::min);
        let (target, fallback): (Array1<f64>, bool) = if min_ratio > 0.0 && min_ratio.is_finite() {
            (self.y_open.mapv(|o| min_ratio * o / (alpha1 * alpha2)), false)
        } else {
            (self.y_open.mapv(|o| FALLBACK_BACKGROUND_FRACTION * o), true)
        };
        if fallback {
            warn!("min-ratio background initializer is not positive; falling back to b = {FALLBACK_BACKGROUND_FRACTION} * ȳ_o");
        }
        Ok((
            self.initialize_from_background(alpha1, alpha2, target.view())?,
            fallback,
        ))
    }

    /// Starting point with `b(θ)` fitted to `target` in the log domain and `z` from the
    /// linearized transmission.
    pub fn initialize_from_background(
        &self,
        alpha1: f64,
        alpha2: f64,
        target: ArrayView1<f64>,
    ) -> Result<NuisanceParams> {
        let na = self.model.n_toa();
        check_len("background target", target.len(), na)?;
        let g = target.mapv(|t| t.max(f64::MIN_POSITIVE).ln());
        let p = self.basis.matrix();
        let theta = solve_gram(p.dot(&p.t()).view(), p.dot(&g).view(), RIDGE)?;
        let b = self.basis.b_of_theta(theta.view())?;

        let mut neglog = Array1::zeros(na);
        for k in 0..na {
            let num = self.y_sz[k] / alpha1 - alpha2 * b[k];
            let den = self.y_open[k] - b[k];
            let q = if den != 0.0 { (num / den).abs() } else { 1.0 };
            neglog[k] = -q.clamp(Q_FLOOR, 1.0).ln();
        }
        let m = dictionary_through_resolution(self.model);
        let zt = solve_gram(m.dot(&m.t()).view(), m.dot(&neglog).view(), RIDGE)?.mapv(|v| v.max(0.0));
        let z = self.model.preconditioner().unprecondition(zt.view())?;
        Ok(NuisanceParams {
            z,
            alpha1,
            alpha2,
            theta,
        })
    }
}

/// `D~ R` as an `N_m × N_A` matrix.
pub(crate) fn dictionary_through_resolution(model: &ForwardModel) -> Array2<f64> {
    let dt = model.d_tilde();
    let mut m = Array2::zeros((model.n_isotopes(), model.n_toa()));
    for (mut out, row) in m.outer_iter_mut().zip(dt.outer_iter()) {
        model.resolution().apply_slice(
            row.as_slice().expect("contiguous dictionary"),
            out.as_slice_mut().unwrap(),
        );
    }
    m
}

/// Averaged-spectrum loss in physical units.
#[allow(clippy::too_many_arguments)]
pub fn nuisance_loss(
    params: &NuisanceParams,
    avg: &RegionAverages,
    beta: f64,
    model: &ForwardModel,
    basis: &BackgroundBasis,
) -> Result<f64> {
    let problem = NuisanceProblem::new(model, basis, avg, beta)?;
    let x = problem.pack(params)?;
    Ok(problem.loss(&x))
}

/// Closed-form starting point; with no `Ω0` the dense-region average stands in for
/// the `α1` ratio.
pub fn initialize_nuisance(
    avg: &RegionAverages,
    model: &ForwardModel,
    basis: &BackgroundBasis,
) -> Result<NuisanceParams> {
    let beta = if avg.y_s0.is_some() { 1.0 } else { 0.0 };
    let problem = NuisanceProblem::new(model, basis, avg, beta)?;
    let ratio_source = avg.y_s0.as_ref().unwrap_or(&avg.y_sz);
    Ok(problem.initialize(ratio_source.view())?.0)
}

/// Fits the nuisance parameters to precomputed averages.
pub fn fit_nuisance_averages(
    avg: &RegionAverages,
    v_hat: Array1<f64>,
    model: &ForwardModel,
    basis: &BackgroundBasis,
    beta: f64,
    opts: &SolveOptions,
) -> Result<NuisanceEstimate> {
    let problem = NuisanceProblem::new(model, basis, avg, beta)?;
    let ratio_source = avg.y_s0.as_ref().unwrap_or(&avg.y_sz);
    let (init, fallback) = problem.initialize(ratio_source.view())?;
    let mut starts = vec![init];
    if !fallback {
        // The min-ratio rule assumes a nearly black resonance; without one it overstates
        // the background and the fit can settle in the b -> 0, α2 -> ∞ valley. A second
        // start from a faint background guards against that.
        let faint = avg.y_open.mapv(|o| FALLBACK_BACKGROUND_FRACTION * o);
        let a1 = starts[0].alpha1;
        starts.push(problem.initialize_from_background(a1, 1.0, faint.view())?);
    }
    let mut best: Option<SolveResult> = None;
    for (k, start) in starts.iter().enumerate() {
        debug!("nuisance start {k}: {start:?}");
        let x0 = problem.pack(start)?;
        let mut residuals = NuisanceResiduals {
            problem: &problem,
            scratch: problem.scratch(),
            dtilde_expo: vec![0.0; model.n_tof()],
            dq: vec![0.0; model.n_toa()],
        };
        let result = least_squares(&mut residuals, &problem.bounds(), &x0, opts)?;
        debug!(
            "nuisance start {k}: loss {} after {} iterations",
            result.objective, result.iterations
        );
        if best.as_ref().is_none_or(|b| result.objective < b.objective) {
            best = Some(result);
        }
    }
    let result = best.expect("at least one start");
    let params = problem.unpack(&result.x)?;
    let b_hat = basis.b_of_theta(params.theta.view())?;
    let phi_hat = &avg.y_open - &b_hat;
    let negative_flux_bins = phi_hat.iter().filter(|&&p| p < 0.0).count();
    if negative_flux_bins > 0 {
        warn!("estimated flux is negative in {negative_flux_bins} bins; clamping to zero for density reconstruction");
    }
    Ok(NuisanceEstimate {
        isotopes: model.dict().isotopes().to_vec(),
        z_hat: params.z,
        alpha1_hat: params.alpha1,
        alpha2_hat: params.alpha2,
        theta_hat: params.theta,
        phi_hat,
        b_hat,
        v_hat,
        beta,
        trace: result.trace,
        iterations: result.iterations,
        termination: result.termination,
        negative_flux_bins,
        grid_fingerprint: grid_fingerprint(model.dict().grid()),
        dict_fingerprint: model.dict().fingerprint(),
    })
}

/// Full stage one from the raw sample and open-beam stacks.
pub fn fit_nuisance(
    y_sample: ArrayView2<f64>,
    y_open: ArrayView2<f64>,
    masks: &RegionMasks,
    model: &ForwardModel,
    basis: &BackgroundBasis,
    beta: f64,
    opts: &SolveOptions,
) -> Result<NuisanceEstimate> {
    if beta > 0.0 && !masks.has_omega0() {
        return Err(Error::Config(
            "beta > 0 requires an open-beam region Ω0; set beta = 0 when no such region exists".into(),
        ));
    }
    let v_hat = estimate_v(y_open)?;
    let avg = region_averages(y_sample, y_open, v_hat.view(), masks)?;
    fit_nuisance_averages(&avg, v_hat, model, basis, beta, opts)
}

/// Residual vector `[f(z) - ȳ_sz ; sqrt(β) (f(0) - ȳ_s0)]` over the packed variables.
struct NuisanceResiduals<'p, 'a> {
    problem: &'p NuisanceProblem<'a>,
    scratch: ProblemScratch,
    dtilde_expo: Vec<f64>,
    dq: Vec<f64>,
}

impl Residuals for NuisanceResiduals<'_, '_> {
    fn n_residuals(&self) -> usize {
        let na = self.problem.model.n_toa();
        if self.problem.y_s0.is_some() {
            2 * na
        } else {
            na
        }
    }

    fn eval(&mut self, x: &[f64], r: &mut [f64], jac: Option<&mut [f64]>) {
        let pr = self.problem;
        let nm = pr.model.n_isotopes();
        let nb = pr.basis.n_b();
        let n = nm + 2 + nb;
        let na = pr.model.n_toa();
        let (zt, a1, a2, theta) = (&x[..nm], x[nm], x[nm + 1], &x[nm + 2..]);
        let p = pr.basis.matrix();
        let s = &mut self.scratch;
        for (k, bk) in s.b.iter_mut().enumerate() {
            *bk = theta
                .iter()
                .enumerate()
                .map(|(i, th)| th * p[[i, k]])
                .sum::<f64>()
                .exp();
        }
        pr.model.transmission_tilde(zt, &mut s.ws);
        for k in 0..na {
            let b = s.b[k];
            r[k] = a1 * ((pr.y_open[k] - b) * s.ws.q[k] + a2 * b) - pr.y_sz[k];
        }
        let sb = pr.beta.sqrt();
        if let Some(y0) = pr.y_s0 {
            for k in 0..na {
                let b = s.b[k];
                r[na + k] = sb * (a1 * (pr.y_open[k] + (a2 - 1.0) * b) - y0[k]);
            }
        }
        let Some(j) = jac else { return };
        for k in 0..na {
            let (b, q) = (s.b[k], s.ws.q[k]);
            let row = &mut j[k * n..(k + 1) * n];
            row[nm] = (pr.y_open[k] - b) * q + a2 * b;
            row[nm + 1] = a1 * b;
            for i in 0..nb {
                row[nm + 2 + i] = a1 * (a2 - q) * b * p[[i, k]];
            }
        }
        // ∂q/∂z~_m = -(D~_m ⊙ exp(-z~^T D~)) R
        for (m, drow) in pr.model.d_tilde().outer_iter().enumerate() {
            for ((o, d), e) in self.dtilde_expo.iter_mut().zip(drow.iter()).zip(&s.ws.expo) {
                *o = d * e;
            }
            pr.model.resolution().apply_slice(&self.dtilde_expo, &mut self.dq);
            for k in 0..na {
                j[k * n + m] = -a1 * (pr.y_open[k] - s.b[k]) * self.dq[k];
            }
        }
        if pr.y_s0.is_some() {
            for k in 0..na {
                let b = s.b[k];
                let row = &mut j[(na + k) * n..(na + k + 1) * n];
                row[..nm].iter_mut().for_each(|v| *v = 0.0);
                row[nm] = sb * (pr.y_open[k] + (a2 - 1.0) * b);
                row[nm + 1] = sb * a1 * b;
                for i in 0..nb {
                    row[nm + 2 + i] = sb * a1 * (a2 - 1.0) * b * p[[i, k]];
                }
            }
        }
    }
}
