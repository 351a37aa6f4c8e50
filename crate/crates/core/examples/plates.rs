//! Uniform tantalum/tungsten plates covering the whole field of view: no open-beam
//! region, so the nuisance fit runs with β = 0. Thickness follows from `ℓ = z M / ρ`.
//!
//! `cargo run --release -p tofrecon --example plates -- [rows] [n_toa] [seed]`

use std::time::Instant;

use ndarray::Array2;
use tofrecon::decompose::{reconstruct_from_stacks, region_stats};
use tofrecon::estimate::fit_nuisance;
use tofrecon::forward::RegionMasks;
use tofrecon::optim::SolveOptions;
use tofrecon::simulate::{sample_poisson_pair, ScenarioSpec};

/// Areal densities (mol/cm²), molar masses (g/mol) and bulk densities (g/cm³).
const PLATES: [(&str, f64, f64, f64); 2] = [("Ta-181", 20.59e-3, 180.948, 16.69), ("W", 21.68e-3, 183.84, 19.25)];

fn main() -> tofrecon::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: usize| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (rows, n_toa, seed) = (arg(0, 32), arg(1, 600), arg(2, 1) as u64);
    let spec = ScenarioSpec {
        isotopes: PLATES.iter().map(|p| p.0.to_string()).collect(),
        ..ScenarioSpec::disk_phantom((rows, rows), n_toa)
    };
    let scenario = spec.build()?;
    let model = scenario.forward_model()?;
    let n_p = scenario.n_pixels();
    let z_true = Array2::from_shape_fn((n_p, PLATES.len()), |(_, m)| PLATES[m].1);
    let masks = RegionMasks::new(Vec::new(), (0..n_p).collect(), n_p)?;
    let (ys, yo) = sample_poisson_pair(z_true.view(), &scenario.scan, &model, seed)?;

    let t = Instant::now();
    let est = fit_nuisance(
        ys.view(),
        yo.view(),
        &masks,
        &model,
        &scenario.basis,
        0.0,
        &SolveOptions::nuisance(),
    )?;
    println!(
        "stage one in {:.1?}: z_hat = {:.3} mmol/cm2, alpha = {:.3}, {:.3}",
        t.elapsed(),
        &est.z_hat * 1e3,
        est.alpha1_hat,
        est.alpha2_hat
    );
    let (_, rec) = reconstruct_from_stacks(
        ys.view(),
        yo.view(),
        &est,
        &model,
        scenario.image_shape,
        &SolveOptions::density(),
    )?;
    let all: Vec<usize> = (0..n_p).collect();
    let stats = region_stats(rec.map.z.view(), &all)?;
    println!("plate    areal density (mmol/cm2)   thickness (cm)     true thickness");
    for (m, (label, z, molar, rho)) in PLATES.iter().enumerate() {
        let (mean, std) = stats[m];
        println!(
            "{label:8} {:7.3} ± {:5.3}             {:6.4} ± {:6.4}    {:6.4}",
            mean * 1e3,
            std * 1e3,
            mean * molar / rho,
            std * molar / rho,
            z * molar / rho
        );
    }
    Ok(())
}
