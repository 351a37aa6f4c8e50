//! Time-of-flight / time-of-arrival grids and the energy relation of the flight path.
//!
//! Arrival bins sit at `t_A[j] = j*dt + t0`; flight bins at `t_F[i] = (i - i0)*dt + t0`,
//! so arrival bin `j` lines up with flight bin `j + i0`. The `i0` leading flight bins
//! hold neutrons that left the source early enough to be detected in the first
//! arrival bins after the source-pulse delay.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Neutron mass expressed in eV·s²/m².
pub const NEUTRON_MASS_EV_S2_PER_M2: f64 = 1.045e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlightPath {
    length_m: f64,
}

impl FlightPath {
    pub fn new(length_m: f64) -> Result<Self> {
        if !(length_m > 0.0 && length_m.is_finite()) {
            return Err(Error::Domain(format!(
                "flight path length must be positive, got {length_m}"
            )));
        }
        Ok(Self { length_m })
    }

    pub fn length_m(&self) -> f64 {
        self.length_m
    }

    pub fn neutron_mass(&self) -> f64 {
        NEUTRON_MASS_EV_S2_PER_M2
    }

    /// Kinetic energy in eV of a neutron with flight time `t_s` seconds.
    pub fn tof_to_energy(&self, t_s: f64) -> Result<f64> {
        if !(t_s > 0.0) {
            return Err(Error::Domain(format!("time of flight must be positive, got {t_s}")));
        }
        let v = self.length_m / t_s;
        Ok(0.5 * NEUTRON_MASS_EV_S2_PER_M2 * v * v)
    }

    /// Flight time in seconds of a neutron with energy `e_ev`.
    pub fn energy_to_tof(&self, e_ev: f64) -> Result<f64> {
        if !(e_ev > 0.0) {
            return Err(Error::Domain(format!("energy must be positive, got {e_ev}")));
        }
        Ok(self.length_m * (NEUTRON_MASS_EV_S2_PER_M2 / (2.0 * e_ev)).sqrt())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TofGrid {
    delta_t_s: f64,
    t0_s: f64,
    n_toa: usize,
    offset_i0: usize,
}

impl TofGrid {
    pub fn new(delta_t_s: f64, t0_s: f64, n_toa: usize, offset_i0: usize) -> Result<Self> {
        if !(delta_t_s > 0.0 && delta_t_s.is_finite()) {
            return Err(Error::Domain(format!("bin width must be positive, got {delta_t_s}")));
        }
        if !(t0_s > 0.0 && t0_s.is_finite()) {
            return Err(Error::Domain(format!("t0 must be positive, got {t0_s}")));
        }
        if n_toa == 0 {
            return Err(Error::Domain("grid needs at least one arrival bin".into()));
        }
        let first_tof = t0_s - offset_i0 as f64 * delta_t_s;
        if !(first_tof > 0.0) {
            return Err(Error::Domain(format!(
                "offset i0 = {offset_i0} pushes the first flight bin to {first_tof:.4e} s; it must stay positive"
            )));
        }
        Ok(Self {
            delta_t_s,
            t0_s,
            n_toa,
            offset_i0,
        })
    }

    /// Grid whose `n_toa` bins span `[t_first, t_last]` inclusive.
    pub fn spanning(t_first_s: f64, t_last_s: f64, n_toa: usize, offset_i0: usize) -> Result<Self> {
        if n_toa < 2 || !(t_last_s > t_first_s) {
            return Err(Error::Domain(
                "spanning grid needs n_toa >= 2 and t_last > t_first".into(),
            ));
        }
        Self::new((t_last_s - t_first_s) / (n_toa - 1) as f64, t_first_s, n_toa, offset_i0)
    }

    pub fn with_offset(&self, offset_i0: usize) -> Result<Self> {
        Self::new(self.delta_t_s, self.t0_s, self.n_toa, offset_i0)
    }

    pub fn delta_t_s(&self) -> f64 {
        self.delta_t_s
    }

    pub fn t0_s(&self) -> f64 {
        self.t0_s
    }

    pub fn n_toa(&self) -> usize {
        self.n_toa
    }

    pub fn offset_i0(&self) -> usize {
        self.offset_i0
    }

    pub fn n_tof(&self) -> usize {
        self.n_toa + self.offset_i0
    }

    pub fn toa_time(&self, j: usize) -> f64 {
        j as f64 * self.delta_t_s + self.t0_s
    }

    pub fn tof_time(&self, i: usize) -> f64 {
        (i as f64 - self.offset_i0 as f64) * self.delta_t_s + self.t0_s
    }

    pub fn toa_times(&self) -> Array1<f64> {
        Array1::from_shape_fn(self.n_toa, |j| self.toa_time(j))
    }

    pub fn tof_times(&self) -> Array1<f64> {
        Array1::from_shape_fn(self.n_tof(), |i| self.tof_time(i))
    }

    pub fn tof_energies(&self, path: &FlightPath) -> Array1<f64> {
        // Construction guarantees every flight time is positive.
        self.tof_times()
            .mapv(|t| path.tof_to_energy(t).expect("positive flight time"))
    }

    pub fn toa_energies(&self, path: &FlightPath) -> Array1<f64> {
        self.toa_times()
            .mapv(|t| path.tof_to_energy(t).expect("positive arrival time"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn energy_at_reference_flight_times() {
        let path = FlightPath::new(10.0).unwrap();
        let e1 = path.tof_to_energy(720e-6).unwrap();
        let e100 = path.tof_to_energy(72e-6).unwrap();
        assert!((e1 - 1.0).abs() < 0.01, "{e1}");
        assert!((e100 - 100.0).abs() < 1.0, "{e100}");
    }

    #[test]
    fn doubling_time_quarters_energy() {
        let path = FlightPath::new(10.0).unwrap();
        let t = 314.0e-6;
        let e = path.tof_to_energy(t).unwrap();
        let e2 = path.tof_to_energy(2.0 * t).unwrap();
        assert_eq!(e2, e / 4.0);
    }

    #[test]
    fn energy_to_tof_examples() {
        let path = FlightPath::new(10.0).unwrap();
        let t = 123.4e-6;
        let back = path.energy_to_tof(path.tof_to_energy(t).unwrap()).unwrap();
        assert_relative_eq!(back, t, max_relative = 1e-12);

        let lanl = FlightPath::new(10.4).unwrap();
        let t = lanl.energy_to_tof(1.04).unwrap();
        assert!((t - 739e-6).abs() < 7.39e-6, "{t}");

        let e = 3.7;
        let t1 = path.energy_to_tof(e).unwrap();
        let t4 = path.energy_to_tof(4.0 * e).unwrap();
        assert_relative_eq!(t4, t1 / 2.0, max_relative = 1e-15);
    }

    #[test]
    fn non_positive_arguments_are_domain_errors() {
        let path = FlightPath::new(10.0).unwrap();
        assert!(matches!(path.tof_to_energy(0.0), Err(Error::Domain(_))));
        assert!(matches!(path.tof_to_energy(-1e-6), Err(Error::Domain(_))));
        assert!(matches!(path.energy_to_tof(0.0), Err(Error::Domain(_))));
        assert!(FlightPath::new(0.0).is_err());
    }

    #[test]
    fn toa_times_example() {
        let grid = TofGrid::new(30e-9, 70.11e-6, 3, 0).unwrap();
        let t = grid.toa_times();
        let want = [70.11e-6, 70.14e-6, 70.17e-6];
        for (a, b) in t.iter().zip(want) {
            assert_relative_eq!(*a, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn offset_shifts_first_tof_bin() {
        let grid = TofGrid::new(30e-9, 70.11e-6, 3, 2).unwrap();
        assert_eq!(grid.n_tof(), 5);
        assert_relative_eq!(grid.tof_times()[0], 70.11e-6 - 2.0 * 30e-9, max_relative = 1e-12);
    }

    #[test]
    fn grid_rejects_nonpositive_first_tof() {
        assert!(TofGrid::new(1e-6, 2e-6, 10, 2).is_err());
        assert!(TofGrid::new(1e-6, 2.5e-6, 10, 2).is_ok());
    }

    proptest! {
        #[test]
        fn tof_and_toa_align(i0 in 0usize..50, n in 1usize..200) {
            let grid = TofGrid::new(0.3e-6, 70e-6, n, i0).unwrap();
            let toa = grid.toa_times();
            let tof = grid.tof_times();
            for j in 0..n {
                prop_assert_eq!(tof[i0 + j], toa[j]);
            }
        }

        #[test]
        fn grid_monotone(i0 in 0usize..20, n in 2usize..100) {
            let grid = TofGrid::new(0.3e-6, 70e-6, n, i0).unwrap();
            let path = FlightPath::new(10.4).unwrap();
            let t = grid.toa_times();
            let e = grid.tof_energies(&path);
            prop_assert!(t.windows(2).into_iter().all(|w| w[1] > w[0]));
            prop_assert!(e.windows(2).into_iter().all(|w| w[1] < w[0]));
        }
    }
}
