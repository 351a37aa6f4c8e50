//! Cross-section dictionary `D` (isotopes × flight bins, cm²/mol) and its row-norm
//! preconditioner.
//!
//! Tables are ingested as `energy_eV,xs_cm2_per_mol` CSV files, one per isotope, and
//! resampled onto the flight-time grid with log-log interpolation. Tables are taken
//! as already Doppler broadened.

use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grids::{FlightPath, TofGrid};

/// Validated `(energy, cross section)` samples for one isotope.
#[derive(Clone, Debug, PartialEq)]
pub struct IsotopeTable {
    label: String,
    energies_ev: Vec<f64>,
    xs: Vec<f64>,
}

impl IsotopeTable {
    pub fn from_pairs(label: impl Into<String>, pairs: &[(f64, f64)]) -> Result<Self> {
        let label = label.into();
        let fail = |row: usize, message: String| Error::Format {
            source_name: label.clone(),
            row,
            message,
        };
        if pairs.len() < 2 {
            return Err(fail(pairs.len(), format!("need at least 2 rows, got {}", pairs.len())));
        }
        for (k, &(e, s)) in pairs.iter().enumerate() {
            let row = k + 1;
            if !(e.is_finite() && e > 0.0) {
                return Err(fail(row, format!("energy {e} must be finite and positive")));
            }
            if !(s.is_finite() && s >= 0.0) {
                return Err(fail(row, format!("cross section {s} must be finite and non-negative")));
            }
            if k > 0 && !(e > pairs[k - 1].0) {
                return Err(fail(
                    row,
                    format!("energy {e} does not exceed previous energy {}", pairs[k - 1].0),
                ));
            }
        }
        Ok(Self {
            energies_ev: pairs.iter().map(|p| p.0).collect(),
            xs: pairs.iter().map(|p| p.1).collect(),
            label,
        })
    }

    /// Reads a CSV with header `energy_eV,xs_cm2_per_mol`. The label is the file stem.
    pub fn load_csv(path: &Path) -> Result<Self> {
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(label, file)
    }

    pub fn read_csv(label: impl Into<String>, reader: impl std::io::Read) -> Result<Self> {
        let label = label.into();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header_err = |message: String| Error::Format {
            source_name: label.clone(),
            row: 0,
            message,
        };
        let headers = rdr.headers().map_err(|e| header_err(e.to_string()))?.clone();
        if headers.len() != 2 || &headers[0] != "energy_eV" || &headers[1] != "xs_cm2_per_mol" {
            return Err(header_err(format!(
                "expected header `energy_eV,xs_cm2_per_mol`, got `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut pairs = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let row = k + 1;
            let rec = rec.map_err(|e| Error::Format {
                source_name: label.clone(),
                row,
                message: e.to_string(),
            })?;
            let parse = |idx: usize| -> Result<f64> {
                rec.get(idx)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::Format {
                        source_name: label.clone(),
                        row,
                        message: format!("field {} is not a number", idx + 1),
                    })
            };
            pairs.push((parse(0)?, parse(1)?));
        }
        Self::from_pairs(label, &pairs)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
        let io = |e: csv::Error| Error::io(path, e.into());
        w.write_record(["energy_eV", "xs_cm2_per_mol"]).map_err(io)?;
        for (e, s) in self.energies_ev.iter().zip(&self.xs) {
            w.write_record([format!("{e:e}"), format!("{s:e}")]).map_err(io)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn energies(&self) -> &[f64] {
        &self.energies_ev
    }

    pub fn values(&self) -> &[f64] {
        &self.xs
    }

    pub fn energy_range(&self) -> (f64, f64) {
        (self.energies_ev[0], *self.energies_ev.last().unwrap())
    }

    /// Interpolated cross section at `e_ev`, or `None` outside the table.
    ///
    /// Log-log interpolation inside each segment; a segment touching a zero sample
    /// falls back to linear interpolation.
    pub fn interpolate(&self, e_ev: f64) -> Option<f64> {
        let (lo, hi) = self.energy_range();
        if !(e_ev >= lo && e_ev <= hi) {
            return None;
        }
        let k = self.energies_ev.partition_point(|&x| x <= e_ev);
        if k > 0 && self.energies_ev[k - 1] == e_ev {
            return Some(self.xs[k - 1]);
        }
        // here energies[k-1] < e < energies[k]
        let (e0, e1) = (self.energies_ev[k - 1], self.energies_ev[k]);
        let (s0, s1) = (self.xs[k - 1], self.xs[k]);
        if s0 > 0.0 && s1 > 0.0 {
            let w = (e_ev / e0).ln() / (e1 / e0).ln();
            Some((s0.ln() + w * (s1 / s0).ln()).exp())
        } else {
            let w = (e_ev - e0) / (e1 - e0);
            Some(s0 + w * (s1 - s0))
        }
    }
}

/// One dictionary row: the table evaluated at the energy of every flight bin.
pub fn resample_to_grid(table: &IsotopeTable, grid: &TofGrid, path: &FlightPath) -> Result<Array1<f64>> {
    let energies = grid.tof_energies(path);
    let (min_ev, max_ev) = table.energy_range();
    let mut row = Array1::zeros(energies.len());
    for (bin, (&e, out)) in energies.iter().zip(row.iter_mut()).enumerate() {
        *out = table.interpolate(e).ok_or(Error::OutOfRange {
            bin,
            energy_ev: e,
            min_ev,
            max_ev,
        })?;
    }
    Ok(row)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossSectionDict {
    isotopes: Vec<String>,
    d_matrix: Array2<f64>,
    grid: TofGrid,
}

impl CrossSectionDict {
    pub fn new(isotopes: Vec<String>, d_matrix: Array2<f64>, grid: TofGrid) -> Result<Self> {
        if d_matrix.nrows() != isotopes.len() {
            return Err(Error::Shape(format!(
                "{} isotope labels for {} dictionary rows",
                isotopes.len(),
                d_matrix.nrows()
            )));
        }
        if d_matrix.ncols() != grid.n_tof() {
            return Err(Error::Shape(format!(
                "dictionary has {} columns, grid has {} flight bins",
                d_matrix.ncols(),
                grid.n_tof()
            )));
        }
        if isotopes.is_empty() {
            return Err(Error::Shape("dictionary needs at least one isotope".into()));
        }
        for (m, row) in d_matrix.outer_iter().enumerate() {
            if row.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::Domain(format!(
                    "dictionary row {m} ({}) has negative or non-finite entries",
                    isotopes[m]
                )));
            }
            if !row.iter().any(|&v| v > 0.0) {
                return Err(Error::SingularPreconditioner {
                    row: m,
                    label: isotopes[m].clone(),
                });
            }
        }
        Ok(Self {
            isotopes,
            d_matrix,
            grid,
        })
    }

    pub fn from_tables(tables: &[IsotopeTable], grid: &TofGrid, path: &FlightPath) -> Result<Self> {
        let mut d = Array2::zeros((tables.len(), grid.n_tof()));
        for (m, table) in tables.iter().enumerate() {
            d.row_mut(m).assign(&resample_to_grid(table, grid, path)?);
        }
        Self::new(tables.iter().map(|t| t.label().to_owned()).collect(), d, *grid)
    }

    pub fn isotopes(&self) -> &[String] {
        &self.isotopes
    }

    pub fn n_isotopes(&self) -> usize {
        self.isotopes.len()
    }

    pub fn matrix(&self) -> ArrayView2<'_, f64> {
        self.d_matrix.view()
    }

    pub fn grid(&self) -> &TofGrid {
        &self.grid
    }

    /// Dictionary restricted to the listed rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Result<Self> {
        let d = self.d_matrix.select(Axis(0), rows);
        let labels = rows.iter().map(|&r| self.isotopes[r].clone()).collect();
        Self::new(labels, d, self.grid)
    }

    /// SHA-256 over labels, grid parameters and matrix bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for label in &self.isotopes {
            h.update(label.as_bytes());
            h.update([0u8]);
        }
        h.update(grid_fingerprint(&self.grid).as_bytes());
        for v in self.d_matrix.iter() {
            h.update(v.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

pub fn grid_fingerprint(grid: &TofGrid) -> String {
    let mut h = Sha256::new();
    h.update(grid.delta_t_s().to_le_bytes());
    h.update(grid.t0_s().to_le_bytes());
    h.update((grid.n_toa() as u64).to_le_bytes());
    h.update((grid.offset_i0() as u64).to_le_bytes());
    hex::encode(h.finalize())
}

/// Diagonal `C` with `C_ii = ||D_i,*||`; the working dictionary is `C^-1 D`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preconditioner {
    c_diag: Array1<f64>,
}

impl Preconditioner {
    pub fn from_diag(c_diag: Array1<f64>) -> Result<Self> {
        if let Some(i) = c_diag.iter().position(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::SingularPreconditioner {
                row: i,
                label: format!("c[{i}] = {}", c_diag[i]),
            });
        }
        Ok(Self { c_diag })
    }

    pub fn diag(&self) -> ArrayView1<'_, f64> {
        self.c_diag.view()
    }

    pub fn len(&self) -> usize {
        self.c_diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c_diag.is_empty()
    }

    /// `z = C^-1 z~` for one density vector, so that `z~^T D~ = z^T D`.
    pub fn unprecondition(&self, z_tilde: ArrayView1<f64>) -> Result<Array1<f64>> {
        crate::error::check_len("preconditioned density", z_tilde.len(), self.len())?;
        Ok(&z_tilde / &self.c_diag)
    }

    /// `Z = Z~ C^-1` applied to every row.
    pub fn unprecondition_rows(&self, z_tilde: ArrayView2<f64>) -> Result<Array2<f64>> {
        crate::error::check_len("preconditioned density columns", z_tilde.ncols(), self.len())?;
        Ok(&z_tilde / &self.c_diag)
    }

    /// `z~ = C z`; inverse of [`Preconditioner::unprecondition`].
    pub fn precondition(&self, z: ArrayView1<f64>) -> Result<Array1<f64>> {
        crate::error::check_len("density", z.len(), self.len())?;
        Ok(&z * &self.c_diag)
    }

    pub fn precondition_rows(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        crate::error::check_len("density columns", z.ncols(), self.len())?;
        Ok(&z * &self.c_diag)
    }
}

/// Returns `C` and `D~ = C^-1 D` with unit-norm rows.
pub fn precondition(dict: &CrossSectionDict) -> Result<(Preconditioner, Array2<f64>)> {
    let d = dict.matrix();
    let norms: Array1<f64> = d.outer_iter().map(|row| row.dot(&row).sqrt()).collect();
    if let Some(row) = norms.iter().position(|&n| !(n > 0.0)) {
        return Err(Error::SingularPreconditioner {
            row,
            label: dict.isotopes()[row].clone(),
        });
    }
    let d_tilde = &d / &norms.view().insert_axis(Axis(1));
    Ok((Preconditioner::from_diag(norms)?, d_tilde))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grid_and_path() -> (TofGrid, FlightPath) {
        (
            TofGrid::new(1e-6, 100e-6, 20, 3).unwrap(),
            FlightPath::new(10.0).unwrap(),
        )
    }

    #[test]
    fn minimal_table_loads() {
        let t = IsotopeTable::from_pairs("X", &[(1.0, 10.0), (100.0, 1.0)]).unwrap();
        assert_eq!(t.energy_range(), (1.0, 100.0));
    }

    #[test]
    fn table_errors_name_row() {
        let e = IsotopeTable::from_pairs("X", &[(1.0, 10.0), (1.0, 5.0)]).unwrap_err();
        assert!(matches!(e, Error::Format { row: 2, .. }), "{e}");
        let e = IsotopeTable::from_pairs("X", &[(1.0, 10.0), (2.0, -1.0)]).unwrap_err();
        assert!(matches!(e, Error::Format { row: 2, .. }), "{e}");
        let e = IsotopeTable::from_pairs("X", &[(1.0, 10.0)]).unwrap_err();
        assert!(matches!(e, Error::Format { .. }), "{e}");
    }

    #[test]
    fn csv_round_trip_and_header_check() {
        let src = "energy_eV,xs_cm2_per_mol\n1.0,10\n2.0,5\n";
        let t = IsotopeTable::read_csv("U-238", src.as_bytes()).unwrap();
        assert_eq!(t.values(), &[10.0, 5.0]);
        let bad = "energy,xs\n1.0,10\n2.0,5\n";
        assert!(IsotopeTable::read_csv("U", bad.as_bytes()).is_err());
        let bad = "energy_eV,xs_cm2_per_mol\n1.0,10\n2.0,abc\n";
        let e = IsotopeTable::read_csv("U", bad.as_bytes()).unwrap_err();
        assert!(matches!(e, Error::Format { row: 2, .. }), "{e}");

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("Pu-239.csv");
        t.write_csv(&p).unwrap();
        let back = IsotopeTable::load_csv(&p).unwrap();
        assert_eq!(back.label(), "Pu-239");
        assert_eq!(back.values(), t.values());
    }

    #[test]
    fn resample_on_nodes_reproduces_values() {
        let (grid, path) = grid_and_path();
        let energies = grid.tof_energies(&path);
        // table nodes are the grid energies themselves, ascending
        let mut pairs: Vec<(f64, f64)> = energies
            .iter()
            .enumerate()
            .map(|(i, &e)| (e, 1.0 + i as f64 * 0.37))
            .collect();
        pairs.reverse();
        let table = IsotopeTable::from_pairs("X", &pairs).unwrap();
        let row = resample_to_grid(&table, &grid, &path).unwrap();
        for (i, v) in row.iter().enumerate() {
            assert_relative_eq!(*v, 1.0 + i as f64 * 0.37, max_relative = 1e-12);
        }
    }

    #[test]
    fn constant_table_resamples_constant() {
        let (grid, path) = grid_and_path();
        let table = IsotopeTable::from_pairs("H-1", &[(0.1, 20.4), (1.0, 20.4), (1e4, 20.4)]).unwrap();
        let row = resample_to_grid(&table, &grid, &path).unwrap();
        assert!(row.iter().all(|&v| (v - 20.4).abs() < 1e-12));
    }

    #[test]
    fn power_law_is_exact_in_log_log() {
        let table = IsotopeTable::from_pairs("X", &[(1.0, 1.0), (10.0, 0.1), (100.0, 0.01)]).unwrap();
        for e in [2.0, 3.162, 5.5, 31.0, 77.7] {
            assert_relative_eq!(table.interpolate(e).unwrap(), 1.0 / e, max_relative = 1e-12);
        }
    }

    #[test]
    fn zero_segment_uses_linear() {
        let table = IsotopeTable::from_pairs("X", &[(1.0, 0.0), (3.0, 4.0)]).unwrap();
        assert_relative_eq!(table.interpolate(2.0).unwrap(), 2.0, max_relative = 1e-14);
    }

    #[test]
    fn out_of_range_names_bin() {
        let (grid, path) = grid_and_path();
        let table = IsotopeTable::from_pairs("X", &[(1.0, 1.0), (5.0, 1.0)]).unwrap();
        // grid energies here are around 4.3..6.5 eV, first bins exceed 5 eV
        let err = resample_to_grid(&table, &grid, &path).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { bin: 0, .. }), "{err}");
    }

    #[test]
    fn precondition_three_four_five() {
        let grid = TofGrid::new(1e-6, 100e-6, 2, 0).unwrap();
        let dict = CrossSectionDict::new(vec!["a".into()], array![[3.0, 4.0]], grid).unwrap();
        let (c, dt) = precondition(&dict).unwrap();
        assert_relative_eq!(c.diag()[0], 5.0);
        assert_relative_eq!(dt[[0, 0]], 0.6);
        assert_relative_eq!(dt[[0, 1]], 0.8);
    }

    #[test]
    fn unit_rows_give_identity_preconditioner() {
        let grid = TofGrid::new(1e-6, 100e-6, 2, 0).unwrap();
        let dict = CrossSectionDict::new(vec!["a".into(), "b".into()], array![[1.0, 0.0], [0.6, 0.8]], grid).unwrap();
        let (c, _) = precondition(&dict).unwrap();
        for v in c.diag() {
            assert_relative_eq!(*v, 1.0, max_relative = 1e-15);
        }
    }

    #[test]
    fn random_dictionary_rows_and_recovery() {
        let grid = TofGrid::new(1e-6, 100e-6, 50, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = Array2::from_shape_fn((3, 50), |_| rng.random_range(0.0..1000.0));
        let dict = CrossSectionDict::new(vec!["a".into(), "b".into(), "c".into()], d.clone(), grid).unwrap();
        let (c, dt) = precondition(&dict).unwrap();
        for (m, row) in dt.outer_iter().enumerate() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-12);
            // oracle: recompute the norm by a plain loop
            let norm: f64 = d.row(m).iter().map(|v| v * v).sum::<f64>().sqrt();
            for j in 0..50 {
                assert!((dt[[m, j]] * norm - d[[m, j]]).abs() <= 1e-12 * d[[m, j]].abs().max(1.0));
                assert!((c.diag()[m] * dt[[m, j]] - d[[m, j]]).abs() <= 1e-12 * d[[m, j]].abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_row_is_singular() {
        let grid = TofGrid::new(1e-6, 100e-6, 2, 0).unwrap();
        let err = CrossSectionDict::new(vec!["a".into()], array![[0.0, 0.0]], grid).unwrap_err();
        assert!(matches!(err, Error::SingularPreconditioner { row: 0, .. }));
    }

    #[test]
    fn unprecondition_examples() {
        let id = Preconditioner::from_diag(array![1.0, 1.0]).unwrap();
        assert_eq!(id.unprecondition(array![0.3, 0.7].view()).unwrap(), array![0.3, 0.7]);
        let c = Preconditioner::from_diag(array![5.0, 0.5]).unwrap();
        assert_eq!(c.unprecondition(array![5.0, 1.0].view()).unwrap(), array![1.0, 2.0]);
        assert_eq!(c.precondition(array![1.0, 2.0].view()).unwrap(), array![5.0, 1.0]);
        assert!(c.unprecondition(array![1.0].view()).is_err());
        let zt = array![[5.0, 1.0], [15.0, 2.0]];
        assert_eq!(
            c.unprecondition_rows(zt.view()).unwrap(),
            array![[1.0, 2.0], [3.0, 4.0]]
        );
    }

    #[test]
    fn preconditioned_attenuation_is_unchanged() {
        let grid = TofGrid::new(1e-6, 100e-6, 6, 0).unwrap();
        let d = array![[3.0, 4.0, 0.0, 0.0, 0.0, 0.0], [1.0, 1.0, 1.0, 1.0, 2.0, 0.5]];
        let dict = CrossSectionDict::new(vec!["a".into(), "b".into()], d.clone(), grid).unwrap();
        let (c, dt) = precondition(&dict).unwrap();
        let z = array![0.7, 1.3];
        let zt = c.precondition(z.view()).unwrap();
        let lhs = zt.dot(&dt);
        let rhs = z.dot(&d);
        for (a, b) in lhs.iter().zip(rhs.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let back = c.unprecondition(zt.view()).unwrap();
        assert!((&back - &z).iter().all(|d| d.abs() < 1e-15));
    }

    proptest! {
        #[test]
        fn interpolation_stays_within_bracket(
            s0 in 0.0f64..1e4, s1 in 0.0f64..1e4, e0 in 0.1f64..10.0, r in 1.01f64..10.0, w in 0.0f64..1.0
        ) {
            let e1 = e0 * r;
            let t = IsotopeTable::from_pairs("X", &[(e0, s0), (e1, s1)]).unwrap();
            let e = e0 + w * (e1 - e0);
            let v = t.interpolate(e).unwrap();
            let (lo, hi) = (s0.min(s1), s0.max(s1));
            prop_assert!(v >= lo * (1.0 - 1e-12) - 1e-300 && v <= hi * (1.0 + 1e-12));
        }
    }
}
