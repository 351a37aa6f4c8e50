//! Built-in synthetic cross-section tables.
//!
//! Each isotope is modelled as a constant potential-scattering term, a `1/v` absorption
//! term and a sum of single-level Breit–Wigner resonances whose widths are widened by an
//! approximate room-temperature Doppler width (area preserving). Resonance energies
//! follow the well-known low-lying levels of each nuclide; peak heights and widths are
//! rounded, representative values. The tables are adequate as a realistic stand-in for
//! evaluated nuclear data, not as a substitute for it.

use crate::error::Result;
use crate::xsdict::IsotopeTable;

/// One barn per atom expressed in cm²/mol.
pub const BARN_CM2_PER_MOL: f64 = 0.602_214_076;
/// Room-temperature `kT` in eV.
const KT_EV: f64 = 0.0253;
/// Energy span covered by every generated table.
pub const TABLE_RANGE_EV: (f64, f64) = (0.2, 1000.0);

/// `(E_r [eV], Γ [eV], σ0 [b])`.
type Resonance = (f64, f64, f64);

#[derive(Clone, Debug)]
pub struct SyntheticIsotope {
    pub label: &'static str,
    pub molar_mass: f64,
    pub mass_number: f64,
    pub potential_b: f64,
    /// `1/v` term in barns at 0.0253 eV.
    pub thermal_absorption_b: f64,
    pub resonances: &'static [Resonance],
}

const U238: &[Resonance] = &[
    (6.674, 0.0245, 23_980.0),
    (20.87, 0.0331, 38_500.0),
    (36.68, 0.0570, 42_700.0),
    (66.03, 0.0470, 20_200.0),
    (80.75, 0.0250, 2_450.0),
    (102.5, 0.0940, 19_200.0),
    (116.9, 0.0480, 11_600.0),
];

const PU239: &[Resonance] = &[
    (0.296, 0.100, 5_000.0),
    (7.816, 0.090, 3_000.0),
    (10.93, 0.160, 2_800.0),
    (11.89, 0.060, 4_200.0),
    (14.31, 0.090, 1_200.0),
    (14.68, 0.060, 1_500.0),
    (15.46, 0.080, 900.0),
    (17.66, 0.090, 1_800.0),
    (22.29, 0.070, 1_500.0),
    (26.25, 0.100, 600.0),
    (32.30, 0.080, 800.0),
    (35.50, 0.100, 700.0),
    (41.40, 0.100, 1_400.0),
    (44.50, 0.100, 800.0),
    (47.60, 0.090, 1_200.0),
    (50.10, 0.080, 1_000.0),
    (52.60, 0.090, 1_400.0),
    (55.60, 0.100, 600.0),
    (57.40, 0.080, 900.0),
    (59.20, 0.100, 800.0),
    (65.40, 0.100, 900.0),
    (74.00, 0.100, 700.0),
    (75.10, 0.100, 800.0),
    (82.70, 0.100, 700.0),
    (85.50, 0.100, 900.0),
    (90.80, 0.100, 600.0),
    (95.30, 0.100, 700.0),
    (102.6, 0.100, 500.0),
    (106.6, 0.100, 600.0),
    (110.1, 0.100, 500.0),
];

const PU240: &[Resonance] = &[
    (1.056, 0.0336, 185_000.0),
    (20.45, 0.0310, 11_000.0),
    (38.35, 0.0490, 24_000.0),
    (41.66, 0.0370, 23_500.0),
    (66.65, 0.0410, 9_700.0),
    (72.80, 0.0300, 1_400.0),
    (90.80, 0.0400, 6_500.0),
    (105.0, 0.0300, 2_400.0),
];

const TA181: &[Resonance] = &[
    (4.28, 0.0594, 20_000.0),
    (10.34, 0.0635, 6_500.0),
    (13.95, 0.0570, 5_000.0),
    (20.30, 0.0660, 4_000.0),
    (23.90, 0.0700, 2_200.0),
    (35.90, 0.0700, 3_000.0),
    (39.10, 0.0700, 1_500.0),
    (49.90, 0.0800, 1_800.0),
    (58.30, 0.0700, 900.0),
    (63.40, 0.0700, 1_300.0),
    (76.90, 0.0700, 1_000.0),
    (99.20, 0.0700, 900.0),
    (105.3, 0.0700, 700.0),
];

const AM241: &[Resonance] = &[
    (0.307, 0.045, 14_000.0),
    (0.574, 0.045, 15_000.0),
    (1.272, 0.045, 18_000.0),
    (1.928, 0.045, 4_000.0),
    (2.365, 0.045, 2_500.0),
    (2.596, 0.045, 2_000.0),
    (3.970, 0.045, 1_200.0),
    (4.970, 0.045, 1_500.0),
    (5.420, 0.045, 7_000.0),
    (6.120, 0.045, 1_600.0),
    (6.740, 0.045, 1_000.0),
    (7.660, 0.045, 400.0),
    (9.100, 0.045, 1_500.0),
    (9.850, 0.045, 900.0),
    (10.10, 0.045, 900.0),
    (10.40, 0.045, 600.0),
    (12.00, 0.045, 300.0),
    (14.70, 0.045, 1_200.0),
    (16.40, 0.045, 700.0),
    (16.80, 0.045, 700.0),
    (19.40, 0.045, 300.0),
    (21.60, 0.045, 300.0),
    (26.60, 0.045, 500.0),
    (28.40, 0.045, 500.0),
    (31.20, 0.045, 300.0),
    (34.60, 0.045, 400.0),
    (36.80, 0.045, 300.0),
    (40.50, 0.045, 400.0),
    (45.60, 0.045, 250.0),
    (49.10, 0.045, 300.0),
    (55.80, 0.045, 300.0),
];

const NP237: &[Resonance] = &[
    (0.489, 0.040, 28_000.0),
    (1.320, 0.040, 8_000.0),
    (1.480, 0.040, 6_000.0),
    (1.970, 0.040, 1_000.0),
    (3.860, 0.040, 2_000.0),
    (4.260, 0.040, 1_500.0),
    (4.860, 0.040, 1_400.0),
    (5.780, 0.040, 3_500.0),
    (6.380, 0.040, 1_500.0),
    (7.000, 0.040, 1_000.0),
    (8.200, 0.040, 600.0),
    (10.20, 0.040, 1_200.0),
    (10.90, 0.040, 800.0),
    (12.20, 0.040, 1_000.0),
    (16.10, 0.040, 500.0),
    (16.90, 0.040, 700.0),
    (19.90, 0.040, 400.0),
    (21.90, 0.040, 600.0),
    (26.60, 0.040, 400.0),
    (30.60, 0.040, 300.0),
    (36.30, 0.040, 400.0),
    (39.90, 0.040, 300.0),
    (47.50, 0.040, 300.0),
    (56.10, 0.040, 250.0),
];

/// Natural tungsten: isotope resonances weighted by abundance.
const W_NAT: &[Resonance] = &[
    (4.15, 0.054, 4_960.0),
    (7.60, 0.072, 920.0),
    (18.80, 0.360, 34_000.0),
    (21.10, 0.090, 14_300.0),
    (27.00, 0.080, 1_500.0),
    (40.60, 0.080, 1_000.0),
    (46.20, 0.080, 800.0),
    (101.9, 0.085, 2_300.0),
];

pub const ISOTOPES: &[SyntheticIsotope] = &[
    SyntheticIsotope {
        label: "U-238",
        molar_mass: 238.0508,
        mass_number: 238.0,
        potential_b: 9.3,
        thermal_absorption_b: 2.7,
        resonances: U238,
    },
    SyntheticIsotope {
        label: "Pu-239",
        molar_mass: 239.0522,
        mass_number: 239.0,
        potential_b: 10.0,
        thermal_absorption_b: 1_020.0,
        resonances: PU239,
    },
    SyntheticIsotope {
        label: "Pu-240",
        molar_mass: 240.0538,
        mass_number: 240.0,
        potential_b: 10.0,
        thermal_absorption_b: 290.0,
        resonances: PU240,
    },
    SyntheticIsotope {
        label: "Ta-181",
        molar_mass: 180.9480,
        mass_number: 181.0,
        potential_b: 6.0,
        thermal_absorption_b: 20.5,
        resonances: TA181,
    },
    SyntheticIsotope {
        label: "Am-241",
        molar_mass: 241.0568,
        mass_number: 241.0,
        potential_b: 11.0,
        thermal_absorption_b: 600.0,
        resonances: AM241,
    },
    SyntheticIsotope {
        label: "Np-237",
        molar_mass: 237.0482,
        mass_number: 237.0,
        potential_b: 10.0,
        thermal_absorption_b: 180.0,
        resonances: NP237,
    },
    SyntheticIsotope {
        label: "W",
        molar_mass: 183.84,
        mass_number: 184.0,
        potential_b: 5.0,
        thermal_absorption_b: 18.3,
        resonances: W_NAT,
    },
    SyntheticIsotope {
        label: "H-1",
        molar_mass: 1.007825,
        mass_number: 1.0,
        potential_b: 20.4,
        thermal_absorption_b: 0.0,
        resonances: &[],
    },
];

pub fn find(label: &str) -> Option<&'static SyntheticIsotope> {
    ISOTOPES.iter().find(|i| i.label.eq_ignore_ascii_case(label))
}

impl SyntheticIsotope {
    /// Cross section in barns at energy `e` eV.
    pub fn sigma_barn(&self, e: f64) -> f64 {
        let mut s = self.potential_b + self.thermal_absorption_b * (KT_EV / e).sqrt();
        for &(er, gamma, sigma0) in self.resonances {
            let (g, peak) = self.broadened(er, gamma, sigma0);
            let half = 0.5 * g;
            s += peak * half * half / ((e - er).powi(2) + half * half) * (er / e).sqrt();
        }
        s
    }

    /// Widened width and area-preserving peak height.
    fn broadened(&self, er: f64, gamma: f64, sigma0: f64) -> (f64, f64) {
        let doppler = 2.0 * (er * KT_EV / self.mass_number).sqrt();
        let g = (gamma * gamma + doppler * doppler).sqrt();
        (g, sigma0 * gamma / g)
    }

    /// Tabulates the cross section in cm²/mol on a log grid refined around resonances.
    pub fn table(&self) -> Result<IsotopeTable> {
        let (lo, hi) = TABLE_RANGE_EV;
        let n = 3000;
        let ratio = (hi / lo).ln() / (n - 1) as f64;
        let mut energies: Vec<f64> = (0..n).map(|i| lo * (ratio * i as f64).exp()).collect();
        for &(er, gamma, sigma0) in self.resonances {
            let (g, _) = self.broadened(er, gamma, sigma0);
            for k in -40i32..=40 {
                let e = er + 0.25 * g * k as f64;
                if e > lo && e < hi {
                    energies.push(e);
                }
            }
        }
        energies.sort_by(f64::total_cmp);
        energies.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * b.abs());
        let pairs: Vec<(f64, f64)> = energies
            .into_iter()
            .map(|e| (e, self.sigma_barn(e) * BARN_CM2_PER_MOL))
            .collect();
        IsotopeTable::from_pairs(self.label, &pairs)
    }
}

/// Tables for the listed labels, in order.
pub fn tables(labels: &[&str]) -> Result<Vec<IsotopeTable>> {
    labels
        .iter()
        .map(|l| {
            find(l)
                .ok_or_else(|| crate::Error::Config(format!("no built-in cross section for `{l}`")))?
                .table()
        })
        .collect()
}
