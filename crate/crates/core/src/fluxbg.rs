//! Rank-one flux and background model: `Phi = v phi^T`, `B = v b(theta)^T` with
//! `b(theta)^T = exp(theta^T P)`.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Smooth log-polynomial background basis `P` (`N_b × N_A`) with unit-norm rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackgroundBasis {
    p_matrix: Array2<f64>,
    delta: f64,
    k0: f64,
    a_norms: Array1<f64>,
}

impl BackgroundBasis {
    /// `P[n, k] = (ln(k Δ + k0))^n / a_n` with `Δ = (e - 1/e) / (N_A - 1)`, `k0 = 1/e`.
    pub fn new(n_b: usize, n_toa: usize) -> Result<Self> {
        if n_b == 0 {
            return Err(Error::Config("background basis needs at least one function".into()));
        }
        if n_toa < 2 {
            return Err(Error::Config("background basis needs at least two arrival bins".into()));
        }
        let e = std::f64::consts::E;
        let delta = (e - 1.0 / e) / (n_toa - 1) as f64;
        let k0 = 1.0 / e;
        let mut p = Array2::from_shape_fn((n_b, n_toa), |(n, k)| (k as f64 * delta + k0).ln().powi(n as i32));
        let a_norms: Array1<f64> = p.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
        for (mut row, &a) in p.outer_iter_mut().zip(a_norms.iter()) {
            row.mapv_inplace(|v| v / a);
        }
        Ok(Self {
            p_matrix: p,
            delta,
            k0,
            a_norms,
        })
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.p_matrix.view()
    }

    pub fn n_b(&self) -> usize {
        self.p_matrix.nrows()
    }

    pub fn n_toa(&self) -> usize {
        self.p_matrix.ncols()
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn k0(&self) -> f64 {
        self.k0
    }

    pub fn a_norms(&self) -> ArrayView1<'_, f64> {
        self.a_norms.view()
    }

    /// Background spectrum `exp(theta^T P)`.
    pub fn b_of_theta(&self, theta: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_len("theta", theta.len(), self.n_b())?;
        Ok(theta.dot(&self.p_matrix).mapv(f64::exp))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FluxBackgroundParams {
    pub v: Array1<f64>,
    pub phi: Array1<f64>,
    pub theta: Array1<f64>,
}

impl FluxBackgroundParams {
    pub fn new(v: Array1<f64>, phi: Array1<f64>, theta: Array1<f64>) -> Result<Self> {
        let np = v.len() as f64;
        let sum = v.sum();
        if v.is_empty() || (sum - np).abs() > 1e-12 * np {
            return Err(Error::Domain(format!(
                "pixel profile must sum to N_p = {np}, sums to {sum}"
            )));
        }
        if v.iter().any(|&x| !(x >= 0.0)) || phi.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::Domain("pixel profile and flux must be non-negative".into()));
        }
        Ok(Self { v, phi, theta })
    }
}

/// Rescales `v` in place so its entries average to one.
pub fn normalize_profile(v: &mut Array1<f64>) -> Result<()> {
    let s = v.sum();
    if !(s > 0.0) {
        return Err(Error::Degenerate("pixel profile has no positive mass".into()));
    }
    let np = v.len() as f64;
    v.mapv_inplace(|x| x * np / s);
    Ok(())
}

/// `v^ = N_p (Y_o 1) / (1^T Y_o 1)`.
pub fn estimate_v(y_open: ArrayView2<f64>) -> Result<Array1<f64>> {
    let row_sums = y_open.sum_axis(Axis(1));
    let total: f64 = row_sums.sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("open-beam scan contains no counts".into()));
    }
    let np = y_open.nrows() as f64;
    Ok(row_sums.mapv(|r| np * r / total))
}

/// Expected open beam `v (phi + b)^T`.
pub fn expected_open(v: ArrayView1<f64>, phi: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<Array2<f64>> {
    check_len("background spectrum", b.len(), phi.len())?;
    let spec = &phi + &b;
    Ok(outer(v, spec.view()))
}

pub(crate) fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    &a2 * &b2
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rows_unit_norm_and_constant_first_row() {
        for (nb, na) in [(1, 2), (3, 2260), (5, 600), (5, 17)] {
            let basis = BackgroundBasis::new(nb, na).unwrap();
            for row in basis.matrix().outer_iter() {
                assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
            }
            let c = 1.0 / (na as f64).sqrt();
            assert!(basis.matrix().row(0).iter().all(|&v| (v - c).abs() < 1e-15));
        }
    }

    #[test]
    fn theta_zero_gives_ones() {
        let basis = BackgroundBasis::new(5, 100).unwrap();
        let b = basis.b_of_theta(Array1::zeros(5).view()).unwrap();
        assert!(b.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn first_coefficient_is_constant_level() {
        let basis = BackgroundBasis::new(3, 400).unwrap();
        let b = basis.b_of_theta(array![2.5, 0.0, 0.0].view()).unwrap();
        let want = (2.5 / 20.0f64).exp();
        assert!(b.iter().all(|&v| (v - want).abs() < 1e-12 * want));
    }

    #[test]
    fn reference_theta_matches_independent_formula() {
        let (nb, na) = (3usize, 2260usize);
        let theta = [29.9, -56.1, 5.39];
        let basis = BackgroundBasis::new(nb, na).unwrap();
        let b = basis.b_of_theta(Array1::from(theta.to_vec()).view()).unwrap();
        // independent evaluation straight from the closed form
        let e = std::f64::consts::E;
        let delta = (e - e.recip()) / (na - 1) as f64;
        let logs: Vec<f64> = (0..na).map(|k| (k as f64 * delta + e.recip()).ln()).collect();
        let norms: Vec<f64> = (0..nb)
            .map(|n| logs.iter().map(|l| l.powi(n as i32).powi(2)).sum::<f64>().sqrt())
            .collect();
        for k in 0..na {
            let expo: f64 = (0..nb).map(|n| theta[n] * logs[k].powi(n as i32) / norms[n]).sum();
            let want = expo.exp();
            assert!(b[k].is_finite() && b[k] > 0.0);
            assert!((b[k] - want).abs() <= 1e-12 * want, "bin {k}");
        }
    }

    #[test]
    fn b_of_theta_length_check() {
        let basis = BackgroundBasis::new(3, 10).unwrap();
        assert!(basis.b_of_theta(Array1::zeros(2).view()).is_err());
    }

    #[test]
    fn estimate_v_examples() {
        let y = Array2::from_elem((4, 6), 3.0);
        assert_eq!(estimate_v(y.view()).unwrap(), Array1::<f64>::ones(4));

        let mut y = Array2::from_elem((4, 6), 3.0);
        y.row_mut(2).mapv_inplace(|v| v * 2.0);
        let v = estimate_v(y.view()).unwrap();
        assert_relative_eq!(v[2], 2.0 * v[0], max_relative = 1e-14);
        assert_relative_eq!(v.sum(), 4.0, max_relative = 1e-14);

        assert!(matches!(
            estimate_v(Array2::zeros((3, 3)).view()),
            Err(Error::Degenerate(_))
        ));
    }

    fn sample_poisson(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
        // Knuth's product method; fine for the small means used here.
        let l = (-mean).exp();
        let (mut k, mut p) = (0.0, 1.0);
        loop {
            p *= rng.random::<f64>();
            if p <= l {
                return k;
            }
            k += 1.0;
        }
    }

    #[test]
    fn estimate_v_error_shrinks_with_more_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let np = 50;
        let mut v = Array1::from_shape_fn(np, |i| 0.5 + (i as f64 * 0.3).sin().abs());
        normalize_profile(&mut v).unwrap();
        let rmse = |na: usize, rng: &mut ChaCha8Rng| {
            let y = Array2::from_shape_fn((np, na), |(i, _)| sample_poisson(rng, 3.0 * v[i]));
            let vh = estimate_v(y.view()).unwrap();
            ((&vh - &v).mapv(|d| d * d).sum() / np as f64).sqrt()
        };
        assert!(rmse(1000, &mut rng) < rmse(10, &mut rng));
    }

    #[test]
    fn expected_open_examples() {
        let v = array![1.0, 2.0, 0.5];
        let phi = Array1::zeros(4);
        let b = array![1.0, 2.0, 3.0, 4.0];
        let y = expected_open(v.view(), phi.view(), b.view()).unwrap();
        assert_eq!(y, outer(v.view(), b.view()));
        let phi = array![4.0, 3.0, 2.0, 1.0];
        let y = expected_open(v.view(), phi.view(), b.view()).unwrap();
        let sums = y.sum_axis(Axis(1));
        assert_relative_eq!(sums[1] / sums[0], 2.0);
        assert_relative_eq!(sums[2] / sums[0], 0.5);
        assert!(expected_open(v.view(), phi.view(), array![1.0].view()).is_err());
    }

    proptest! {
        #[test]
        fn log_linear_in_theta(a in proptest::collection::vec(-5.0f64..5.0, 4), b in proptest::collection::vec(-5.0f64..5.0, 4)) {
            let basis = BackgroundBasis::new(4, 64).unwrap();
            let (a, b) = (Array1::from(a), Array1::from(b));
            let lhs = basis.b_of_theta((&a + &b).view()).unwrap().mapv(f64::ln);
            let rhs = basis.b_of_theta(a.view()).unwrap().mapv(f64::ln) + basis.b_of_theta(b.view()).unwrap().mapv(f64::ln);
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn estimate_v_scale_invariant(scale in 0.01f64..100.0, seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = Array2::from_shape_fn((5, 7), |_| rng.random_range(0.0..10.0) + 0.1);
            let v1 = estimate_v(y.view()).unwrap();
            let v2 = estimate_v((&y * scale).view()).unwrap();
            for (a, b) in v1.iter().zip(v2.iter()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
