//! One function per subcommand. Each writes its outputs plus a manifest into `out_dir`.

use std::path::{Path, PathBuf};

use log::info;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tofrecon::decompose::{normalized_maps, reconstruct_from_stacks, region_stats, ArealDensityMap};
use tofrecon::estimate::{fit_nuisance as fit_stage_one, NuisanceEstimate};
use tofrecon::forward::{open_average, region_average};
use tofrecon::library;
use tofrecon::simulate::{make_disk_phantom, sample_poisson_pair};
use tofrecon::tomo::{mass_density, per_view_alpha1, reconstruct_volume, threshold_mask, ViewSet};
use tofrecon::xsdict::{grid_fingerprint, IsotopeTable};

use crate::config::{PipelineConfig, Setup};
use crate::error::{CliError, CliResult};
use crate::manifest::{read_json, write_json, Manifest};
use crate::pgm::{self, Depth};
use crate::trm;

pub const NUISANCE_FILE: &str = "nuisance.json";
/// Gray levels listed in a preview colorbar.
const COLORBAR_TICKS: usize = 17;

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn base_manifest(command: &str, cfg: &PipelineConfig, setup: &Setup) -> Manifest {
    let mut m = Manifest::new(command);
    m.config_hash = cfg.hash();
    m.grid_fingerprint = grid_fingerprint(&setup.grid);
    m.dict_fingerprint = setup.model.dict().fingerprint();
    m.isotopes = cfg.isotopes.labels.clone();
    m.image_shape = cfg.image_shape.map(|[r, c]| (r, c));
    m
}

fn read_stack(path: &Path, rows: usize, cols: usize) -> CliResult<Array2<f64>> {
    let y = trm::read(path)?;
    if y.dim() != (rows, cols) {
        return Err(CliError::config(
            path.display().to_string(),
            format!(
                "stack is {}x{}, the configuration implies {rows}x{cols}",
                y.nrows(),
                y.ncols()
            ),
        ));
    }
    Ok(y)
}

fn write_trm(dir: &Path, name: &str, m: ArrayView2<f64>, manifest: &mut Manifest) -> CliResult<()> {
    trm::write(&dir.join(name), m)?;
    manifest.add_output(dir, name)
}

/// `U-238` → `U-238`, `Pu 239/x` → `Pu_239_x`.
pub fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

pub fn simulate(cfg: &PipelineConfig, out_dir: &Path) -> CliResult<Manifest> {
    let setup = cfg.setup()?;
    let scenario = cfg.scenario_spec()?.build()?;
    let phantom = cfg.phantom_spec();
    let z = make_disk_phantom(&phantom)?;
    info!(
        "simulating {} pixels x {} bins with seed {}",
        z.nrows(),
        cfg.grid.n_toa,
        cfg.seed
    );
    let (ys, yo) = sample_poisson_pair(z.view(), &scenario.scan, &setup.model, cfg.seed)?;
    create_dir(out_dir)?;
    let mut m = base_manifest("simulate", cfg, &setup);
    m.seed = Some(cfg.seed);
    write_trm(out_dir, "Ys.trm", ys.view(), &mut m)?;
    write_trm(out_dir, "Yo.trm", yo.view(), &mut m)?;
    write_trm(out_dir, "Z_truth.trm", z.view(), &mut m)?;
    m.details.insert("alpha1".into(), json!(scenario.scan.alpha1));
    m.details.insert("alpha2".into(), json!(scenario.scan.alpha2));
    m.details.insert("theta".into(), json!(scenario.theta.to_vec()));
    m.write(out_dir)?;
    Ok(m)
}

pub fn fit_nuisance(cfg: &PipelineConfig, ys_path: &Path, yo_path: &Path, out_dir: &Path) -> CliResult<Manifest> {
    let setup = cfg.setup()?;
    let (rows, cols) = cfg.image_shape()?;
    let ys = read_stack(ys_path, rows * cols, cfg.grid.n_toa)?;
    let yo = read_stack(yo_path, rows * cols, cfg.grid.n_toa)?;
    let masks = cfg.regions()?;
    let beta = cfg.solver.beta;
    info!(
        "fitting nuisance parameters over {} dense and {} open pixels, beta = {beta}",
        masks.omegaz().len(),
        masks.omega0().len()
    );
    let est = fit_stage_one(
        ys.view(),
        yo.view(),
        &masks,
        &setup.model,
        &setup.basis,
        beta,
        &cfg.nuisance_options(),
    )?;
    info!("stage one: {} iterations, {:?}", est.iterations, est.termination);
    create_dir(out_dir)?;
    let path = out_dir.join(NUISANCE_FILE);
    std::fs::write(&path, est.to_json()?).map_err(|e| CliError::io(&path, e))?;
    let mut m = base_manifest("fit-nuisance", cfg, &setup);
    m.add_input(ys_path)?;
    m.add_input(yo_path)?;
    m.add_output(out_dir, NUISANCE_FILE)?;
    m.details.insert("beta".into(), json!(beta));
    m.details.insert("iterations".into(), json!(est.iterations));
    m.details.insert("z_hat".into(), json!(est.z_hat.to_vec()));
    m.write(out_dir)?;
    Ok(m)
}

pub fn reconstruct(
    cfg: &PipelineConfig,
    ys_path: &Path,
    yo_path: &Path,
    nuisance_path: &Path,
    per_view_dose: bool,
    out_dir: &Path,
) -> CliResult<Manifest> {
    let setup = cfg.setup()?;
    let shape = cfg.image_shape()?;
    let n_p = shape.0 * shape.1;
    let text = std::fs::read_to_string(nuisance_path).map_err(|e| CliError::io(nuisance_path, e))?;
    let mut est = NuisanceEstimate::from_json(&text)
        .map_err(|e| CliError::format(nuisance_path.display().to_string(), e.to_string()))?;
    est.verify(&setup.model)?;
    if est.v_hat.len() != n_p {
        return Err(CliError::config(
            nuisance_path.display().to_string(),
            format!("estimate covers {} pixels, the image has {n_p}", est.v_hat.len()),
        ));
    }
    let ys = read_stack(ys_path, n_p, cfg.grid.n_toa)?;
    let yo = read_stack(yo_path, n_p, cfg.grid.n_toa)?;
    if per_view_dose {
        let masks = cfg.regions()?;
        if !masks.has_omega0() {
            return Err(CliError::config(
                "regions",
                "--per-view-dose needs an open-beam region omega0",
            ));
        }
        let y_s0 = region_average(ys.view(), est.v_hat.view(), masks.omega0())?;
        let y_open = open_average(yo.view(), est.v_hat.view())?;
        est.alpha1_hat = per_view_alpha1(y_s0.view(), y_open.view(), est.alpha2_hat, est.b_hat.view())?;
        info!("per-view alpha1 = {}", est.alpha1_hat);
    }
    let (lin, rec) = reconstruct_from_stacks(ys.view(), yo.view(), &est, &setup.model, shape, &cfg.density_options())?;
    info!(
        "stage two: at most {} iterations, {} pixels at the limit",
        rec.max_iterations, rec.pixels_at_max_iters
    );
    create_dir(out_dir)?;
    let mut m = base_manifest("reconstruct", cfg, &setup);
    m.add_input(ys_path)?;
    m.add_input(yo_path)?;
    m.add_input(nuisance_path)?;
    write_trm(out_dir, "Z.trm", rec.map.z.view(), &mut m)?;
    write_trm(out_dir, "Z_baseline.trm", lin.view(), &mut m)?;
    let trace_path = out_dir.join("trace.csv");
    let mut w = csv::Writer::from_path(&trace_path).map_err(|e| CliError::io(&trace_path, e.into()))?;
    let io = |e: csv::Error| CliError::io(&trace_path, e.into());
    w.write_record(["iteration", "nll"]).map_err(io)?;
    for (k, v) in rec.trace.iter().enumerate() {
        w.write_record([k.to_string(), format!("{v:.12e}")]).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(&trace_path, e))?;
    m.add_output(out_dir, "trace.csv")?;
    m.details.insert("alpha1".into(), json!(est.alpha1_hat));
    m.details
        .insert("nuisance_fingerprint".into(), json!(rec.map.nuisance_fingerprint));
    m.details.insert("max_iterations".into(), json!(rec.max_iterations));
    m.details
        .insert("pixels_at_max_iters".into(), json!(rec.pixels_at_max_iters));
    m.write(out_dir)?;
    Ok(m)
}

/// Lists the per-view reconstructions that make up a tomographic scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewList {
    pub views: Vec<ViewEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewEntry {
    /// Manifest written by `reconstruct`, relative to the view list.
    pub manifest: PathBuf,
    pub angle_deg: f64,
}

fn load_view(path: &Path, setup: &Setup) -> CliResult<(ArealDensityMap, f64)> {
    let m = Manifest::read(path)?;
    let source = path.display().to_string();
    if m.command != "reconstruct" {
        return Err(CliError::config(
            &source,
            format!("expected a reconstruct manifest, got `{}`", m.command),
        ));
    }
    let check = |what: &str, expected: String, found: &str| -> CliResult<()> {
        if expected != found {
            return Err(tofrecon::Error::Fingerprint {
                what: format!("{what} of {source}"),
                expected,
                found: found.into(),
            }
            .into());
        }
        Ok(())
    };
    check("grid", grid_fingerprint(&setup.grid), &m.grid_fingerprint)?;
    check("dictionary", setup.model.dict().fingerprint(), &m.dict_fingerprint)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    m.verify_output(dir, "Z.trm")?;
    let z = trm::read(&dir.join("Z.trm"))?;
    let shape = m
        .image_shape
        .ok_or_else(|| CliError::format(&source, "manifest has no image_shape"))?;
    let detail = |key: &str| m.details.get(key).cloned().unwrap_or_default();
    let alpha1 = detail("alpha1")
        .as_f64()
        .ok_or_else(|| CliError::format(&source, "manifest has no alpha1"))?;
    let fp = detail("nuisance_fingerprint").as_str().unwrap_or_default().to_string();
    Ok((ArealDensityMap::new(z, m.isotopes.clone(), shape, fp)?, alpha1))
}

pub fn tomo(cfg: &PipelineConfig, views_path: &Path, out_dir: &Path) -> CliResult<Manifest> {
    let setup = cfg.setup()?;
    let list: ViewList = read_json(views_path)?;
    let base = views_path.parent().unwrap_or(Path::new("."));
    let mut set = ViewSet {
        views: Vec::new(),
        angles_deg: Vec::new(),
        alpha1_per_view: Vec::new(),
    };
    let mut m = base_manifest("tomo", cfg, &setup);
    m.add_input(views_path)?;
    for entry in &list.views {
        let p = base.join(&entry.manifest);
        let (map, a1) = load_view(&p, &setup)?;
        m.add_input(&p)?;
        set.views.push(map);
        set.angles_deg.push(entry.angle_deg);
        set.alpha1_per_view.push(a1);
    }
    let slices = set
        .views
        .first()
        .map(|v| v.image_shape.0)
        .ok_or_else(|| CliError::config(views_path.display().to_string(), "no views listed"))?;
    let geometry = cfg.geometry(slices)?;
    let vol = reconstruct_volume(&set, &geometry, &cfg.regularization()?, &cfg.tomo_options())?;
    info!("tomography: lambda = {:?}", vol.lambda);
    create_dir(out_dir)?;
    m.image_shape = None;
    write_trm(out_dir, "X.trm", vol.x.view(), &mut m)?;

    // previews of the middle slice, each channel relative to its own maximum
    let n = geometry.image_size;
    let mid = geometry.slices / 2;
    let slice = vol.x.slice(s![mid * n * n..(mid + 1) * n * n, ..]);
    let peak = slice
        .fold_axis(Axis(0), 0.0f64, |a, v| a.max(*v))
        .mapv(|v| if v > 0.0 { v } else { 1.0 });
    write_previews(out_dir, slice, peak.view(), (n, n), &vol.isotopes, &mut m)?;

    let t = cfg.tomo_block()?;
    let mask_ch = t
        .mask_isotope
        .as_ref()
        .and_then(|l| vol.isotopes.iter().position(|i| i == l))
        .unwrap_or(0);
    let mask = threshold_mask(vol.x.column(mask_ch), t.mask_fraction, t.mask_percentile)?;
    let means = region_stats(vol.x.view(), &mask)?;
    let rho = match &cfg.isotopes.molar_mass_g_per_mol {
        Some(mm) => Some(mass_density(
            Array2::from_shape_vec((1, means.len()), means.iter().map(|v| v.0).collect())
                .expect("one row")
                .view(),
            mm,
        )?),
        None => None,
    };
    let path = out_dir.join("densities.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e.into()))?;
    let io = |e: csv::Error| CliError::io(&path, e.into());
    w.write_record(["isotope", "mean_mmol_cm3", "std_mmol_cm3", "mass_density_g_cm3"])
        .map_err(io)?;
    for (k, label) in vol.isotopes.iter().enumerate() {
        let rho_k = rho.as_ref().map(|r| format!("{:.6}", r[[0, k]])).unwrap_or_default();
        w.write_record([
            label.clone(),
            format!("{:.6}", means[k].0 * 1e3),
            format!("{:.6}", means[k].1 * 1e3),
            rho_k,
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    m.add_output(out_dir, "densities.csv")?;
    m.details.insert("lambda".into(), json!(vol.lambda));
    m.details.insert("mask_voxels".into(), json!(mask.len()));
    m.details.insert(
        "geometry".into(),
        serde_json::to_value(&geometry).map_err(tofrecon::Error::from)?,
    );
    m.write(out_dir)?;
    Ok(m)
}

/// 16-bit previews of `values / reference` on a shared `[0, max]` scale plus the colorbar.
fn write_previews(
    dir: &Path,
    values: ArrayView2<f64>,
    reference: ndarray::ArrayView1<f64>,
    image_shape: (usize, usize),
    labels: &[String],
    m: &mut Manifest,
) -> CliResult<()> {
    let norm = normalized_maps(values, reference)?;
    let hi = norm.iter().copied().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    for (k, label) in labels.iter().enumerate() {
        let img = norm
            .column(k)
            .to_owned()
            .into_shape_with_order(image_shape)
            .expect("pixel count matches");
        let name = format!("preview_{}.pgm", file_label(label));
        pgm::write(
            &dir.join(&name),
            pgm::quantize(img.view(), 0.0, hi, Depth::Sixteen).view(),
            Depth::Sixteen,
        )?;
        m.add_output(dir, &name)?;
    }
    let path = dir.join("colorbar.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e.into()))?;
    let io = |e: csv::Error| CliError::io(&path, e.into());
    w.write_record(["gray_level", "normalized_density"]).map_err(io)?;
    let max = Depth::Sixteen.max_level() as f64;
    for t in 0..COLORBAR_TICKS {
        let level = (max * t as f64 / (COLORBAR_TICKS - 1) as f64).round();
        w.write_record([format!("{level}"), format!("{:.6}", hi * level / max)])
            .map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    m.add_output(dir, "colorbar.csv")?;
    m.details.insert("preview_max".into(), json!(hi));
    Ok(())
}

/// One line of the per-region summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub region: String,
    pub isotope: String,
    pub truth_mmol_cm2: Option<f64>,
    pub mean_mmol_cm2: f64,
    pub std_mmol_cm2: f64,
    pub mean_pm_std: String,
}

pub fn report(
    cfg: &PipelineConfig,
    z_path: &Path,
    truth_path: Option<&Path>,
    out_dir: &Path,
) -> CliResult<Vec<ReportRow>> {
    let setup = cfg.setup()?;
    let shape = cfg.image_shape()?;
    let n_m = cfg.isotopes.labels.len();
    let z = read_stack(z_path, shape.0 * shape.1, n_m)?;
    let truth = truth_path.map(|p| read_stack(p, shape.0 * shape.1, n_m)).transpose()?;
    let labels = &cfg.isotopes.labels;
    let mut rows = Vec::new();
    let row = |region: String, m: usize, pixels: &[usize]| -> CliResult<ReportRow> {
        let (mean, std) = region_stats(z.view(), pixels)?[m];
        let truth = match &truth {
            Some(t) => Some(region_stats(t.view(), pixels)?[m].0 * 1e3),
            None => None,
        };
        Ok(ReportRow {
            region,
            isotope: labels[m].clone(),
            truth_mmol_cm2: truth,
            mean_mmol_cm2: mean * 1e3,
            std_mmol_cm2: std * 1e3,
            mean_pm_std: format!("{:.3}±{:.3}", mean * 1e3, std * 1e3),
        })
    };
    let disks = cfg.disks();
    if !disks.is_empty() {
        let pixels = cfg.phantom_spec().disk_pixels();
        for (k, d) in disks.iter().enumerate() {
            rows.push(row(format!("disk-{k}"), d.isotope, &pixels[k])?);
        }
    }
    let r = &cfg.regions;
    if !(r.omega0.is_empty() && r.omegaz.is_empty() && r.omega0_mask.is_none() && r.omegaz_mask.is_none()) {
        let masks = cfg.regions()?;
        for m in 0..n_m {
            rows.push(row("omegaz".into(), m, masks.omegaz())?);
            if masks.has_omega0() {
                rows.push(row("omega0".into(), m, masks.omega0())?);
            }
        }
    }
    if rows.is_empty() {
        let all: Vec<usize> = (0..shape.0 * shape.1).collect();
        for m in 0..n_m {
            rows.push(row("image".into(), m, &all)?);
        }
    }

    create_dir(out_dir)?;
    let mut man = base_manifest("report", cfg, &setup);
    man.add_input(z_path)?;
    if let Some(p) = truth_path {
        man.add_input(p)?;
    }
    let path = out_dir.join("report.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::io(&path, e.into()))?;
    for row in &rows {
        w.serialize(row).map_err(|e| CliError::io(&path, e.into()))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    man.add_output(out_dir, "report.csv")?;

    // normalize by the truth's per-isotope peak, else the simulated densities, else Z's own peak
    let reference: Array1<f64> = match (&truth, disks.is_empty()) {
        (Some(t), _) => t.fold_axis(Axis(0), 0.0f64, |a, v| a.max(*v)),
        (None, false) => {
            let mut r = Array1::zeros(n_m);
            for d in &disks {
                r[d.isotope] = d.density;
            }
            r
        }
        (None, true) => z.fold_axis(Axis(0), 0.0f64, |a, v| a.max(*v)),
    };
    let reference = reference.mapv(|v| if v > 0.0 { v } else { 1.0 });
    write_previews(out_dir, z.view(), reference.view(), shape, labels, &mut man)?;
    man.write(out_dir)?;
    Ok(rows)
}

/// Writes the built-in tables for `labels` (all of them when `None`) as CSV files.
pub fn make_library(labels: Option<&[String]>, out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let tables: Vec<IsotopeTable> = match labels {
        Some(l) => {
            let refs: Vec<&str> = l.iter().map(String::as_str).collect();
            library::tables(&refs)?
        }
        None => library::ISOTOPES.iter().map(|i| i.table()).collect::<Result<_, _>>()?,
    };
    create_dir(out_dir)?;
    let mut written = Vec::new();
    for t in &tables {
        let path = out_dir.join(format!("{}.csv", file_label(t.label())));
        t.write_csv(&path)?;
        written.push(path);
    }
    let index: Vec<_> = written
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    write_json(&out_dir.join("library.json"), &json!({ "tables": index }))?;
    Ok(written)
}
