//! Simulates the five-disk phantom and runs both reconstruction stages.
//!
//! `cargo run --release -p tofrecon --example disks -- [rows] [n_toa] [seed]`

use std::time::Instant;

use tofrecon::decompose::{reconstruct_from_stacks, region_stats};
use tofrecon::estimate::fit_nuisance;
use tofrecon::optim::SolveOptions;
use tofrecon::simulate::{make_disk_phantom, sample_poisson_pair, DiskPhantomSpec, ScenarioSpec, DISK_PHANTOM_Z};

fn main() -> tofrecon::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let rows: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(64);
    let n_toa: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);

    let t = Instant::now();
    let scenario = ScenarioSpec::disk_phantom((rows, rows), n_toa).build()?;
    let model = scenario.forward_model()?;
    let phantom = DiskPhantomSpec::default_layout(scenario.image_shape, &DISK_PHANTOM_Z);
    let z_true = make_disk_phantom(&phantom)?;
    let masks = phantom.regions()?;
    let (ys, yo) = sample_poisson_pair(z_true.view(), &scenario.scan, &model, seed)?;
    println!("simulated in {:.1?}", t.elapsed());

    let t = Instant::now();
    let est = fit_nuisance(
        ys.view(),
        yo.view(),
        &masks,
        &model,
        &scenario.basis,
        1.0,
        &SolveOptions::nuisance(),
    )?;
    println!(
        "stage one in {:.1?} ({} iterations, {:?})",
        t.elapsed(),
        est.iterations,
        est.termination
    );
    println!("  z_hat (mmol/cm2) = {:.4}", &est.z_hat * 1e3);
    println!(
        "  alpha = {:.4}, {:.4}; theta = {:.3}",
        est.alpha1_hat, est.alpha2_hat, est.theta_hat
    );

    let t = Instant::now();
    let (lin, rec) = reconstruct_from_stacks(
        ys.view(),
        yo.view(),
        &est,
        &model,
        scenario.image_shape,
        &SolveOptions::density(),
    )?;
    println!(
        "stage two in {:.1?} (max {} iterations, {} pixels at the limit)",
        t.elapsed(),
        rec.max_iterations,
        rec.pixels_at_max_iters
    );
    let disks = phantom.disk_pixels();
    println!("isotope   truth   baseline          ML");
    for (m, label) in scenario.isotopes.iter().enumerate() {
        let b = region_stats(lin.view(), &disks[m])?[m];
        let r = region_stats(rec.map.z.view(), &disks[m])?[m];
        println!(
            "{label:8} {:6.3} {:6.3}±{:5.3} {:6.3}±{:5.3}",
            DISK_PHANTOM_Z[m] * 1e3,
            b.0 * 1e3,
            b.1 * 1e3,
            r.0 * 1e3,
            r.1 * 1e3
        );
    }
    Ok(())
}
