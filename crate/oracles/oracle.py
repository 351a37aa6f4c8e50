"""Independent reference values frozen into the acceptance suite.

Writes crates/cli/tests/data/oracle_values.json. Uses CODATA constants from scipy
and polygon clipping from shapely, sharing no code with the Rust implementation.

    python3 oracles/oracle.py
"""

import json
import math
from pathlib import Path

import numpy as np
from scipy import constants
from shapely.geometry import LineString, box

OUT = Path(__file__).resolve().parent.parent / "crates" / "cli" / "tests" / "data" / "oracle_values.json"


def neutron_tof_us(energy_ev, length_m):
    m_ev = constants.physical_constants["neutron mass energy equivalent in MeV"][0] * 1e6
    m = m_ev / constants.c**2  # eV s^2 / m^2
    return length_m * math.sqrt(m / (2.0 * energy_ev)) * 1e6


def chord_matrix(n, pitch, n_det, det_pitch, angles_deg):
    """Dense (rays x pixels) intersection lengths for lines x cos t + y sin t = s."""
    half = 0.5 * n * pitch
    reach = 4.0 * half
    rows = []
    for a in angles_deg:
        t = math.radians(a)
        c, s_ = math.cos(t), math.sin(t)
        for d in range(n_det):
            s = (d - 0.5 * (n_det - 1)) * det_pitch
            p0 = np.array([s * c, s * s_])
            dvec = np.array([-s_, c])
            line = LineString([p0 - reach * dvec, p0 + reach * dvec])
            row = []
            for r in range(n):
                for col in range(n):
                    x0 = -half + col * pitch
                    y1 = half - r * pitch
                    row.append(line.intersection(box(x0, y1 - pitch, x0 + pitch, y1)).length)
            rows.append(row)
    return rows


def main():
    projector = {"image_size": 5, "voxel_pitch_cm": 0.3, "n_det": 7, "det_pitch_cm": 0.23,
                 "angles_deg": [0.0, 17.0, 45.0, 90.0, 131.5]}
    values = {
        "tof_us_at_10m": {"1": neutron_tof_us(1.0, 10.0), "100": neutron_tof_us(100.0, 10.0)},
        # U-238 atomic mass (AME2020), g/mol
        "u238_molar_mass": 238.0507884,
        "u238_mass_density_g_cm3": 37.87e-3 * 238.0507884,
        "plates": {
            "Ta-181": {"areal_mol_cm2": 20.59e-3, "molar_mass": 180.94800, "rho": 16.69,
                       "thickness_cm": 20.59e-3 * 180.94800 / 16.69},
            "W": {"areal_mol_cm2": 21.68e-3, "molar_mass": 183.84, "rho": 19.25,
                  "thickness_cm": 21.68e-3 * 183.84 / 19.25},
        },
        "projector": dict(projector, matrix=chord_matrix(
            projector["image_size"], projector["voxel_pitch_cm"], projector["n_det"],
            projector["det_pitch_cm"], projector["angles_deg"])),
    }
    OUT.write_text(json.dumps(values, indent=1) + "\n")
    print(f"wrote {OUT}")
    print(f"tof 1 eV {values['tof_us_at_10m']['1']:.3f} us, 100 eV {values['tof_us_at_10m']['100']:.3f} us")
    print(f"rho U-238 {values['u238_mass_density_g_cm3']:.4f}")


if __name__ == "__main__":
    main()
