//! Resolution operator `R` (flight bins → arrival bins).
//!
//! `R = sum_k R^k W^k` where `R^k` convolves with the causal source-pulse kernel
//! `r^k` taken at anchor flight bin `floor(k (N_F - 1) / (K - 1))` and `W^k` is a
//! diagonal blend over arrival bins. The blends are hat functions between adjacent
//! anchors, so they sum to one in every arrival bin; each kernel sums to one, so every
//! column of `R` sums to one.
//!
//! Arrival bin `j` collects flight bin `i` with lag `j + i0 - i >= 0`:
//! `R[i, j] = sum_k w^k[j] r^k[j + i0 - i]`.

use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::gamma_lr;

use crate::error::{check_len, Error, Result};
use crate::grids::{FlightPath, TofGrid};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// Gamma density (a scaled chi-squared) with shape `shape` and scale `tau(E)`.
    #[default]
    Gamma,
    /// Instantaneous pulse: every kernel is a unit impulse at lag 0.
    Delta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseKernelSpec {
    pub family: KernelFamily,
    pub shape: f64,
    /// Scale at `eref_ev`, seconds.
    pub tau0_s: f64,
    /// `p` in `tau(E) = tau0 (E / E_ref)^-p`.
    pub energy_exponent: f64,
    pub eref_ev: f64,
    /// Tail mass dropped before renormalizing.
    pub epsilon_trunc: f64,
}

impl Default for PulseKernelSpec {
    fn default() -> Self {
        Self {
            family: KernelFamily::Gamma,
            shape: 2.0,
            tau0_s: 0.3e-6,
            energy_exponent: 0.5,
            eref_ev: 10.0,
            epsilon_trunc: 1e-6,
        }
    }
}

impl PulseKernelSpec {
    pub fn delta() -> Self {
        Self {
            family: KernelFamily::Delta,
            tau0_s: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.family == KernelFamily::Delta {
            return Ok(());
        }
        let ok = self.shape > 0.0
            && self.tau0_s >= 0.0
            && self.eref_ev > 0.0
            && self.energy_exponent.is_finite()
            && self.epsilon_trunc > 0.0
            && self.epsilon_trunc < 1.0;
        if !ok {
            return Err(Error::Config(format!("invalid pulse kernel specification {self:?}")));
        }
        Ok(())
    }

    pub fn scale_at(&self, energy_ev: f64) -> f64 {
        self.tau0_s * (energy_ev / self.eref_ev).powf(-self.energy_exponent)
    }

    /// Kernel sampled on lag bins of width `dt_s`, truncated at mass `1 - eps` and
    /// renormalized to sum to one.
    pub fn discretize(&self, energy_ev: f64, dt_s: f64) -> Vec<f64> {
        let tau = self.scale_at(energy_ev);
        if self.family == KernelFamily::Delta || !(tau > 0.0) {
            return vec![1.0];
        }
        let target = 1.0 - self.epsilon_trunc;
        let mut kernel = Vec::new();
        let mut prev = 0.0;
        let mut lag = 0usize;
        loop {
            let cdf = gamma_lr(self.shape, (lag + 1) as f64 * dt_s / tau);
            kernel.push((cdf - prev).max(0.0));
            prev = cdf;
            lag += 1;
            if cdf >= target || lag > 1_000_000 {
                break;
            }
        }
        let total: f64 = kernel.iter().sum();
        kernel.iter_mut().for_each(|v| *v /= total);
        kernel
    }
}

/// Flight-bin anchor of each of the `k` kernels.
pub fn anchor_indices(n_tof: usize, k: usize) -> Vec<usize> {
    if k <= 1 {
        return vec![0];
    }
    (0..k).map(|i| i * (n_tof - 1) / (k - 1)).collect()
}

/// Smallest `i0` for which every kernel of `spec` fits in front of the first arrival
/// bin. Anchors move with `i0`, so iterate to a fixed point.
pub fn required_offset(grid: &TofGrid, path: &FlightPath, spec: &PulseKernelSpec, k: usize) -> Result<usize> {
    spec.validate()?;
    let mut i0 = 0usize;
    for _ in 0..32 {
        let g = grid.with_offset(i0)?;
        let need = anchor_indices(g.n_tof(), k)
            .into_iter()
            .map(|a| {
                let e = path.tof_to_energy(g.tof_time(a))?;
                Ok(spec.discretize(e, g.delta_t_s()).len() - 1)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap_or(0);
        if need <= i0 {
            return Ok(i0);
        }
        i0 = need;
    }
    Ok(i0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionOperator {
    grid: TofGrid,
    kernels: Vec<Vec<f64>>,
    /// Kernels stored back to front for contiguous dot products.
    reversed: Vec<Vec<f64>>,
    /// K × N_A blend weights.
    weights: Array2<f64>,
    anchors: Vec<usize>,
    active: Vec<Range<usize>>,
}

impl ResolutionOperator {
    /// Builds `R` from the analytic kernel family.
    pub fn build(grid: &TofGrid, path: &FlightPath, spec: &PulseKernelSpec, k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("resolution needs at least one kernel".into()));
        }
        spec.validate()?;
        let anchors = anchor_indices(grid.n_tof(), k);
        let kernels = anchors
            .iter()
            .map(|&a| Ok(spec.discretize(path.tof_to_energy(grid.tof_time(a))?, grid.delta_t_s())))
            .collect::<Result<Vec<_>>>()?;
        let longest = kernels.iter().map(|r| r.len() - 1).max().unwrap_or(0);
        if longest > grid.offset_i0() {
            return Err(Error::GridTooShort {
                i0: grid.offset_i0(),
                min_i0: required_offset(grid, path, spec, k)?,
            });
        }
        Self::from_kernels(grid, kernels)
    }

    /// Builds `R` from explicit kernels, one per anchor.
    pub fn from_kernels(grid: &TofGrid, kernels: Vec<Vec<f64>>) -> Result<Self> {
        let k = kernels.len();
        if k == 0 {
            return Err(Error::Config("resolution needs at least one kernel".into()));
        }
        for (idx, r) in kernels.iter().enumerate() {
            if r.is_empty() || r.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Config(format!(
                    "kernel {idx} must be non-empty and non-negative"
                )));
            }
            let s: f64 = r.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("kernel {idx} sums to {s}, expected 1")));
            }
        }
        let min_i0 = kernels.iter().map(|r| r.len() - 1).max().unwrap();
        if min_i0 > grid.offset_i0() {
            return Err(Error::GridTooShort {
                i0: grid.offset_i0(),
                min_i0,
            });
        }
        // exact renormalization so column sums stay at one
        let kernels: Vec<Vec<f64>> = kernels
            .into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|v| v / s).collect()
            })
            .collect();
        let anchors = anchor_indices(grid.n_tof(), k);
        let (weights, active) = blend_weights(grid, &anchors);
        let reversed = kernels.iter().map(|r| r.iter().rev().copied().collect()).collect();
        Ok(Self {
            grid: *grid,
            kernels,
            reversed,
            weights,
            anchors,
            active,
        })
    }

    /// Builds `R` from a kernel CSV, see [`read_kernel_file`].
    pub fn from_kernel_file(grid: &TofGrid, path: &Path) -> Result<Self> {
        Self::from_kernels(grid, read_kernel_file(path)?)
    }
}

/// Reads kernels from CSV rows `anchor_index,lag_bins,value` where `anchor_index`
/// numbers the kernels `0..K`; each kernel must sum to one.
pub fn read_kernel_file(path: &Path) -> Result<Vec<Vec<f64>>> {
    let name = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::io(path, e.into()))?;
    let mut kernels: Vec<Vec<f64>> = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let row = n + 1;
        let fail = |message: String| Error::Format {
            source_name: name.clone(),
            row,
            message,
        };
        let rec = rec.map_err(|e| fail(e.to_string()))?;
        if rec.len() != 3 {
            return Err(fail(format!("expected 3 fields, got {}", rec.len())));
        }
        let k: usize = rec[0].parse().map_err(|_| fail("bad anchor index".into()))?;
        let lag: usize = rec[1].parse().map_err(|_| fail("bad lag".into()))?;
        let v: f64 = rec[2].parse().map_err(|_| fail("bad value".into()))?;
        if !(v.is_finite() && v >= 0.0) {
            return Err(fail(format!("kernel value {v} must be non-negative")));
        }
        if kernels.len() <= k {
            kernels.resize(k + 1, Vec::new());
        }
        let r = &mut kernels[k];
        if r.len() <= lag {
            r.resize(lag + 1, 0.0);
        }
        r[lag] = v;
    }
    for (k, r) in kernels.iter().enumerate() {
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Format {
                source_name: name.clone(),
                row: 0,
                message: format!("kernel for anchor {k} sums to {s}, expected 1"),
            });
        }
    }
    Ok(kernels)
}

impl ResolutionOperator {
    pub fn grid(&self) -> &TofGrid {
        &self.grid
    }

    pub fn n_tof(&self) -> usize {
        self.grid.n_tof()
    }

    pub fn n_toa(&self) -> usize {
        self.grid.n_toa()
    }

    pub fn kernels(&self) -> &[Vec<f64>] {
        &self.kernels
    }

    pub fn weights(&self) -> ArrayView2<'_, f64> {
        self.weights.view()
    }

    pub fn anchor_indices(&self) -> &[usize] {
        &self.anchors
    }

    /// `s^T R` for one flight-domain spectrum.
    pub fn apply(&self, spectrum_tof: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_len("resolution input", spectrum_tof.len(), self.n_tof())?;
        let mut out = Array1::zeros(self.n_toa());
        match (spectrum_tof.as_slice(), out.as_slice_mut()) {
            (Some(s), Some(o)) => self.apply_slice(s, o),
            _ => {
                let s = spectrum_tof.to_vec();
                self.apply_slice(&s, out.as_slice_mut().unwrap());
            }
        }
        Ok(out)
    }

    /// `R g` for one arrival-domain vector (adjoint of [`Self::apply`]).
    pub fn apply_transpose(&self, g: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_len("resolution adjoint input", g.len(), self.n_toa())?;
        let mut out = Array1::zeros(self.n_tof());
        let g = g.to_vec();
        self.apply_transpose_slice(&g, out.as_slice_mut().unwrap());
        Ok(out)
    }

    /// Row-wise [`Self::apply`] on an `N_p × N_F` matrix.
    pub fn apply_rows(&self, spectra: ArrayView2<f64>) -> Result<Array2<f64>> {
        if spectra.ncols() != self.n_tof() {
            return Err(Error::Shape(format!(
                "resolution input has {} columns, expected {}",
                spectra.ncols(),
                self.n_tof()
            )));
        }
        let mut out = Array2::zeros((spectra.nrows(), self.n_toa()));
        Zip::from(out.axis_iter_mut(Axis(0)))
            .and(spectra.axis_iter(Axis(0)))
            .par_for_each(|mut o, s| {
                let s = s.to_vec();
                self.apply_slice(&s, o.as_slice_mut().unwrap());
            });
        Ok(out)
    }

    /// Allocation-free core of [`Self::apply`]; `out` is overwritten.
    pub fn apply_slice(&self, s: &[f64], out: &mut [f64]) {
        debug_assert_eq!(s.len(), self.n_tof());
        debug_assert_eq!(out.len(), self.n_toa());
        out.iter_mut().for_each(|v| *v = 0.0);
        let i0 = self.grid.offset_i0();
        for (k, rr) in self.reversed.iter().enumerate() {
            let len = rr.len();
            let w = self.weights.row(k);
            for j in self.active[k].clone() {
                let end = j + i0 + 1;
                let window = &s[end - len..end];
                let acc: f64 = rr.iter().zip(window).map(|(a, b)| a * b).sum();
                out[j] += w[j] * acc;
            }
        }
    }

    /// Allocation-free core of [`Self::apply_transpose`]; `out` is overwritten.
    pub fn apply_transpose_slice(&self, g: &[f64], out: &mut [f64]) {
        debug_assert_eq!(g.len(), self.n_toa());
        debug_assert_eq!(out.len(), self.n_tof());
        out.iter_mut().for_each(|v| *v = 0.0);
        let i0 = self.grid.offset_i0();
        for (k, rr) in self.reversed.iter().enumerate() {
            let len = rr.len();
            let w = self.weights.row(k);
            for j in self.active[k].clone() {
                let c = w[j] * g[j];
                if c == 0.0 {
                    continue;
                }
                let end = j + i0 + 1;
                for (o, r) in out[end - len..end].iter_mut().zip(rr) {
                    *o += c * r;
                }
            }
        }
    }

    /// Dense `N_F × N_A` matrix. Only sensible on small grids.
    pub fn to_dense(&self) -> Array2<f64> {
        let i0 = self.grid.offset_i0();
        let mut r = Array2::zeros((self.n_tof(), self.n_toa()));
        for (k, kernel) in self.kernels.iter().enumerate() {
            for j in 0..self.n_toa() {
                let w = self.weights[[k, j]];
                for (lag, &v) in kernel.iter().enumerate() {
                    r[[j + i0 - lag, j]] += w * v;
                }
            }
        }
        r
    }
}

fn blend_weights(grid: &TofGrid, anchors: &[usize]) -> (Array2<f64>, Vec<Range<usize>>) {
    let k = anchors.len();
    let n_toa = grid.n_toa();
    let i0 = grid.offset_i0();
    let mut w = Array2::zeros((k, n_toa));
    if k == 1 {
        w.fill(1.0);
        #[allow(clippy::single_range_in_vec_init)]
        return (w, vec![0..n_toa]);
    }
    let last = anchors[k - 1];
    for j in 0..n_toa {
        let p = j + i0;
        if p >= last {
            w[[k - 1, j]] = 1.0;
            continue;
        }
        let s = (0..k - 1)
            .find(|&s| anchors[s] <= p && p < anchors[s + 1])
            .expect("anchors start at flight bin 0");
        let t = (p - anchors[s]) as f64 / (anchors[s + 1] - anchors[s]) as f64;
        w[[s, j]] = 1.0 - t;
        w[[s + 1, j]] = t;
    }
    let active = (0..k)
        .map(|kk| {
            let row = w.row(kk);
            let first = row.iter().position(|&v| v > 0.0);
            let last = row.iter().rposition(|&v| v > 0.0);
            match (first, last) {
                (Some(a), Some(b)) => a..b + 1,
                _ => 0..0,
            }
        })
        .collect();
    (w, active)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_setup(n_toa: usize, k: usize) -> ResolutionOperator {
        let path = FlightPath::new(10.4).unwrap();
        let base = TofGrid::new(0.5e-6, 60e-6, n_toa, 0).unwrap();
        let spec = PulseKernelSpec {
            tau0_s: 0.6e-6,
            ..PulseKernelSpec::default()
        };
        let i0 = required_offset(&base, &path, &spec, k).unwrap();
        let grid = base.with_offset(i0).unwrap();
        ResolutionOperator::build(&grid, &path, &spec, k).unwrap()
    }

    // Oracle: dense R assembled straight from the defining sum, independent of to_dense.
    fn dense_oracle(op: &ResolutionOperator) -> Array2<f64> {
        let g = op.grid();
        let (nf, na, i0) = (g.n_tof(), g.n_toa(), g.offset_i0());
        Array2::from_shape_fn((nf, na), |(i, j)| {
            let mut s = 0.0;
            for k in 0..op.kernels().len() {
                let r = &op.kernels()[k];
                if j + i0 >= i {
                    let lag = j + i0 - i;
                    if lag < r.len() {
                        s += op.weights()[[k, j]] * r[lag];
                    }
                }
            }
            s
        })
    }

    #[test]
    fn anchors_for_reference_grid() {
        let a = anchor_indices(2260 + 40, 5);
        let nf = 2300usize;
        let want: Vec<usize> = (0..5).map(|k| (k * (nf - 1)) / 4).collect();
        assert_eq!(a, want);
        assert_eq!(a[4], nf - 1);
    }

    #[test]
    fn delta_kernel_is_shifted_identity() {
        let path = FlightPath::new(10.0).unwrap();
        let grid = TofGrid::new(1e-6, 100e-6, 8, 3).unwrap();
        let op = ResolutionOperator::build(&grid, &path, &PulseKernelSpec::delta(), 1).unwrap();
        let s = Array1::from_shape_fn(11, |i| (i as f64).sin() + 2.0);
        let out = op.apply(s.view()).unwrap();
        for j in 0..8 {
            assert_eq!(out[j], s[j + 3]);
        }
    }

    #[test]
    fn blend_weights_partition_unity() {
        let op = small_setup(300, 5);
        let w = op.weights();
        for j in 0..op.n_toa() {
            let s: f64 = w.column(j).sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(w.column(j).iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn column_sums_are_one() {
        for k in [1, 2, 3, 5] {
            let op = small_setup(300, k);
            assert!(op.n_tof() <= 400);
            let r = dense_oracle(&op);
            let worst = r
                .axis_iter(Axis(1))
                .map(|c| (c.sum() - 1.0).abs())
                .fold(0.0f64, f64::max);
            assert!(worst < 1e-10, "K={k}: {worst}");
            let ones = Array1::ones(op.n_tof());
            let out = op.apply(ones.view()).unwrap();
            assert!(out.iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
    }

    #[test]
    fn to_dense_matches_oracle() {
        let op = small_setup(120, 3);
        let diff = (&op.to_dense() - &dense_oracle(&op))
            .mapv(f64::abs)
            .fold(0.0f64, |a, &b| a.max(b));
        assert!(diff < 1e-15);
    }

    #[test]
    fn delta_spike_reproduces_kernel() {
        let op = small_setup(200, 5);
        let i0 = op.grid().offset_i0();
        // pick the anchor of kernel 2; its weight there is exactly one
        let k = 2;
        let a = op.anchor_indices()[k];
        assert_eq!(op.weights()[[k, a - i0]], 1.0);
        let mut s = Array1::zeros(op.n_tof());
        s[a] = 1.0;
        let out = op.apply(s.view()).unwrap();
        let r = &op.kernels()[k];
        // lag l lands in arrival bin a - i0 + l; only bins where w^k is still 1 are exact
        assert_relative_eq!(out[a - i0], r[0] * 1.0, max_relative = 1e-12);
        // the whole response must match row `a` of the dense operator
        let dense = dense_oracle(&op);
        for (x, y) in out.iter().zip(dense.row(a).iter()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn apply_matches_dense_product() {
        let path = FlightPath::new(10.0).unwrap();
        let grid = TofGrid::new(1e-6, 100e-6, 40, 10).unwrap();
        let op = ResolutionOperator::build(
            &grid,
            &path,
            &PulseKernelSpec {
                tau0_s: 1e-6,
                epsilon_trunc: 1e-3,
                ..PulseKernelSpec::default()
            },
            2,
        )
        .unwrap();
        assert_eq!(op.n_tof(), 50);
        let r = dense_oracle(&op);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Array1::from_shape_fn(50, |_| rng.random::<f64>());
        let direct = op.apply(s.view()).unwrap();
        let dense = s.dot(&r);
        for (a, b) in direct.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_identity() {
        let op = small_setup(150, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s = Array1::from_shape_fn(op.n_tof(), |_| rng.random::<f64>() - 0.5);
            let g = Array1::from_shape_fn(op.n_toa(), |_| rng.random::<f64>() - 0.5);
            let lhs = op.apply_transpose(g.view()).unwrap().dot(&s);
            let rhs = g.dot(&op.apply(s.view()).unwrap());
            assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn apply_rows_cases() {
        let op = small_setup(80, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = Array2::from_shape_fn((1, op.n_tof()), |_| rng.random::<f64>());
        let rows = op.apply_rows(m.view()).unwrap();
        assert_eq!(rows.row(0), op.apply(m.row(0)).unwrap());
        let z = Array2::zeros((3, op.n_tof()));
        assert!(op.apply_rows(z.view()).unwrap().iter().all(|&v| v == 0.0));
        assert!(op.apply_rows(Array2::zeros((2, 3)).view()).is_err());
        assert!(op.apply(Array1::zeros(3).view()).is_err());
    }

    #[test]
    fn kernel_longer_than_offset_is_rejected() {
        let path = FlightPath::new(10.4).unwrap();
        let grid = TofGrid::new(0.5e-6, 60e-6, 100, 2).unwrap();
        let err = ResolutionOperator::build(&grid, &path, &PulseKernelSpec::default(), 5).unwrap_err();
        match err {
            Error::GridTooShort { i0, min_i0 } => {
                assert_eq!(i0, 2);
                assert!(min_i0 > 2);
                let fixed = grid.with_offset(min_i0).unwrap();
                assert!(ResolutionOperator::build(&fixed, &path, &PulseKernelSpec::default(), 5).is_ok());
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn blur_grows_with_flight_time() {
        let op = small_setup(300, 5);
        let variance = |k: usize| {
            let r = &op.kernels()[k];
            let mean = r.iter().enumerate().map(|(l, v)| l as f64 * v).sum::<f64>();
            r.iter()
                .enumerate()
                .map(|(l, v)| (l as f64 - mean).powi(2) * v)
                .sum::<f64>()
        };
        for k in 1..5 {
            assert!(variance(k) > variance(k - 1), "kernel {k}");
        }
    }

    #[test]
    fn kernel_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("kernels.csv");
        std::fs::write(&path, "anchor_index,lag_bins,value\n0,0,0.5\n0,1,0.5\n1,0,1.0\n").unwrap();
        let grid = TofGrid::new(1e-6, 100e-6, 10, 2).unwrap();
        let op = ResolutionOperator::from_kernel_file(&grid, &path).unwrap();
        assert_eq!(op.kernels().len(), 2);
        std::fs::write(&path, "anchor_index,lag_bins,value\n0,0,0.5\n").unwrap();
        assert!(ResolutionOperator::from_kernel_file(&grid, &path).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn apply_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let op = small_setup(60, 3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s1 = Array1::from_shape_fn(op.n_tof(), |_| rng.random::<f64>());
            let s2 = Array1::from_shape_fn(op.n_tof(), |_| rng.random::<f64>());
            let lhs = op.apply((&s1 * a + &s2 * b).view()).unwrap();
            let rhs = op.apply(s1.view()).unwrap() * a + op.apply(s2.view()).unwrap() * b;
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
