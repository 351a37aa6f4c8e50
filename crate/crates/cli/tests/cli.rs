use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::Array2;
use tempfile::TempDir;
use tofrecon::tomo::{cylinder_phantom, project_views, uniform_angles, Projector};
use tofrecon::xsdict::grid_fingerprint;
use tofrecon_cli::config::PipelineConfig;
use tofrecon_cli::manifest::{hash_file, Manifest};
use tofrecon_cli::trm;

const SMALL: &str = r#"
seed = 11
image_shape = [12, 12]

[grid]
n_toa = 160

[isotopes]
labels = ["U-238", "Pu-239"]

[simulation]
densities_mmol_cm2 = [5.0, 3.0]
exposure = 20.0

[solver]
density_max_iters = 300
"#;

fn tofrecon(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tofrecon"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["simulate", "--config", s(cfg), "--out-dir", s(out)];
    args.extend_from_slice(extra);
    tofrecon(&args)
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let sim = tmp.path().join("sim");
    let out = simulate(&cfg, &sim, &[]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let ys = trm::read(&sim.join("Ys.trm")).unwrap();
    assert_eq!(ys.dim(), (144, 160));
    let manifest = Manifest::read(&sim.join("manifest.json")).unwrap();
    assert_eq!(manifest.seed, Some(11));
    for name in ["Ys.trm", "Yo.trm", "Z_truth.trm"] {
        assert_eq!(manifest.outputs[name], hash_file(&sim.join(name)).unwrap());
    }

    let fit = tmp.path().join("fit");
    let out = tofrecon(&[
        "fit-nuisance",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&fit),
        "--ys",
        s(&sim.join("Ys.trm")),
        "--yo",
        s(&sim.join("Yo.trm")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fit.join("nuisance.json").exists());

    let rec = tmp.path().join("rec");
    let out = tofrecon(&[
        "reconstruct",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&rec),
        "--ys",
        s(&sim.join("Ys.trm")),
        "--yo",
        s(&sim.join("Yo.trm")),
        "--nuisance",
        s(&fit.join("nuisance.json")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let z = trm::read(&rec.join("Z.trm")).unwrap();
    assert_eq!(z.dim(), (144, 2));
    let trace = std::fs::read_to_string(rec.join("trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,nll\n"));

    let rep = tmp.path().join("report");
    let out = tofrecon(&[
        "report",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&rep),
        "--z",
        s(&rec.join("Z.trm")),
        "--truth",
        s(&sim.join("Z_truth.trm")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_path(rep.join("report.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        [
            "region",
            "isotope",
            "truth_mmol_cm2",
            "mean_mmol_cm2",
            "std_mmol_cm2",
            "mean_pm_std"
        ]
    );
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        let truth: f64 = r[2].parse().unwrap();
        let mean: f64 = r[3].parse().unwrap();
        assert!((mean / truth - 1.0).abs() < 0.25, "{r:?}");
        assert!(r[5].contains('±'));
    }
    let preview = tofrecon_cli::pgm::read(&rep.join("preview_U-238.pgm")).unwrap();
    assert_eq!(preview.dim(), (12, 12));
    assert!(rep.join("colorbar.csv").exists());
}

#[test]
fn simulation_is_independent_of_thread_count() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert!(
        tofrecon(&["--threads", "1", "simulate", "--config", s(&cfg), "--out-dir", s(&a)])
            .status
            .success()
    );
    assert!(
        tofrecon(&["--threads", "3", "simulate", "--config", s(&cfg), "--out-dir", s(&b)])
            .status
            .success()
    );
    assert!(simulate(&cfg, &c, &["--seed", "12"]).status.success());
    let h = |d: &Path, f: &str| hash_file(&d.join(f)).unwrap();
    for f in ["Ys.trm", "Yo.trm", "Z_truth.trm", "manifest.json"] {
        assert_eq!(h(&a, f), h(&b, f), "{f}");
    }
    assert_ne!(h(&a, "Ys.trm"), h(&c, "Ys.trm"));
    assert_eq!(h(&a, "Z_truth.trm"), h(&c, "Z_truth.trm"));
}

#[test]
fn report_of_truth_has_zero_spread() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let sim = tmp.path().join("sim");
    assert!(simulate(&cfg, &sim, &[]).status.success());
    let cfg = PipelineConfig::load(&cfg).unwrap();
    let truth = sim.join("Z_truth.trm");
    let rows = tofrecon_cli::commands::report(&cfg, &truth, None, &tmp.path().join("rep")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.std_mmol_cm2 == 0.0));
    assert_eq!(rows[0].mean_pm_std, "5.000±0.000");
}

#[test]
fn exit_codes_follow_the_error_class() {
    let tmp = TempDir::new().unwrap();
    let out_dir = tmp.path().join("out");

    let bad = write_config(tmp.path(), "bad.toml", &SMALL.replace("[5.0, 3.0]", "[5.0]"));
    let out = simulate(&bad, &out_dir, &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("simulation.densities_mmol_cm2"));

    let syntax = write_config(tmp.path(), "syntax.toml", "image_shape = [4, 4\n");
    assert_eq!(simulate(&syntax, &out_dir, &[]).status.code(), Some(2));

    let missing = tmp.path().join("absent.toml");
    assert_eq!(simulate(&missing, &out_dir, &[]).status.code(), Some(4));

    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let garbage = tmp.path().join("garbage.trm");
    std::fs::write(&garbage, b"TRM1\x01\0\0\0\x01\0\0\0abc").unwrap();
    let out = tofrecon(&[
        "fit-nuisance",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&out_dir),
        "--ys",
        s(&garbage),
        "--yo",
        s(&garbage),
    ]);
    assert_eq!(out.status.code(), Some(4));

    assert_eq!(simulate(&cfg, &out_dir, &["--beta", "-1"]).status.code(), Some(2));
    assert_eq!(tofrecon(&["simulate"]).status.code(), Some(2));
}

#[test]
fn nonzero_beta_without_open_region_is_a_configuration_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let sim = tmp.path().join("sim");
    assert!(simulate(&cfg, &sim, &[]).status.success());
    let no_open = write_config(
        tmp.path(),
        "no_open.toml",
        &format!("{SMALL}\n[regions]\nomegaz = [\"4,4,8,8\"]\n"),
    );
    let args = |beta: &'static str| {
        vec![
            "fit-nuisance".to_string(),
            "--config".into(),
            s(&no_open).into(),
            "--out-dir".into(),
            s(&tmp.path().join("fit")).into(),
            "--ys".into(),
            s(&sim.join("Ys.trm")).into(),
            "--yo".into(),
            s(&sim.join("Yo.trm")).into(),
            "--beta".into(),
            beta.into(),
        ]
    };
    let run = |a: Vec<String>| tofrecon(&a.iter().map(String::as_str).collect::<Vec<_>>());
    let out = run(args("1"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("beta = 0"));
    assert!(run(args("0")).status.success());
}

#[test]
fn mismatched_nuisance_is_refused() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "small.toml", SMALL);
    let sim = tmp.path().join("sim");
    assert!(simulate(&cfg, &sim, &[]).status.success());
    let fit = tmp.path().join("fit");
    let out = tofrecon(&[
        "fit-nuisance",
        "--config",
        s(&cfg),
        "--out-dir",
        s(&fit),
        "--ys",
        s(&sim.join("Ys.trm")),
        "--yo",
        s(&sim.join("Yo.trm")),
    ]);
    assert!(out.status.success());
    // same bin count, different time span: the grids and dictionaries differ
    let other = write_config(
        tmp.path(),
        "other.toml",
        &SMALL.replace("n_toa = 160", "n_toa = 160\nt_last_us = 700.0"),
    );
    let out = tofrecon(&[
        "reconstruct",
        "--config",
        s(&other),
        "--out-dir",
        s(&tmp.path().join("rec")),
        "--ys",
        s(&sim.join("Ys.trm")),
        "--yo",
        s(&sim.join("Yo.trm")),
        "--nuisance",
        s(&fit.join("nuisance.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("fingerprint mismatch"));
}

#[test]
fn tomo_reconstructs_from_view_manifests() {
    let tmp = TempDir::new().unwrap();
    let text = r#"
        image_shape = [2, 16]
        [grid]
        n_toa = 120
        [isotopes]
        labels = ["U-238", "Pu-239"]
        molar_mass_g_per_mol = [238.05, 239.05]
        [regions]
        omegaz = ["6,0,10,2"]
        [tomo]
        voxel_pitch_cm = 0.04
        image_size = 16
        lambda = 1e-4
    "#;
    let cfg_path = write_config(tmp.path(), "tomo.toml", text);
    let cfg = PipelineConfig::load(&cfg_path).unwrap();
    let setup = cfg.setup().unwrap();
    let geometry = cfg.geometry(2).unwrap();
    let angles = uniform_angles(24);
    let proj = Projector::new(geometry.clone(), &angles).unwrap();
    let x = cylinder_phantom(&geometry, 0.22, &[0.02, 0.01]);
    let views = project_views(&proj, x.view()).unwrap();

    let mut entries = Vec::new();
    for (k, z) in views.iter().enumerate() {
        let dir = tmp.path().join(format!("view{k}"));
        std::fs::create_dir_all(&dir).unwrap();
        trm::write(&dir.join("Z.trm"), z.view()).unwrap();
        let mut m = Manifest::new("reconstruct");
        m.grid_fingerprint = grid_fingerprint(&setup.grid);
        m.dict_fingerprint = setup.model.dict().fingerprint();
        m.isotopes = cfg.isotopes.labels.clone();
        m.image_shape = Some((2, 16));
        m.add_output(&dir, "Z.trm").unwrap();
        m.details.insert("alpha1".into(), serde_json::json!(1.0));
        m.write(&dir).unwrap();
        entries.push(serde_json::json!({ "manifest": format!("view{k}/manifest.json"), "angle_deg": angles[k] }));
    }
    let list = tmp.path().join("views.json");
    std::fs::write(&list, serde_json::json!({ "views": entries }).to_string()).unwrap();

    let out_dir = tmp.path().join("vol");
    let out = tofrecon(&[
        "tomo",
        "--config",
        s(&cfg_path),
        "--out-dir",
        s(&out_dir),
        "--views",
        s(&list),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let vol: Array2<f64> = trm::read(&out_dir.join("X.trm")).unwrap();
    assert_eq!(vol.dim(), (2 * 16 * 16, 2));
    let centre = 16 * 8 + 8;
    assert!((vol[[centre, 0]] / 0.02 - 1.0).abs() < 0.1, "{}", vol[[centre, 0]]);
    let densities = std::fs::read_to_string(out_dir.join("densities.csv")).unwrap();
    assert!(densities.starts_with("isotope,mean_mmol_cm3,std_mmol_cm3,mass_density_g_cm3\n"));

    // a view whose Z no longer matches its manifest is refused
    let z0 = tmp.path().join("view0/Z.trm");
    let mut tampered = trm::read(&z0).unwrap();
    tampered[[0, 0]] += 1e-6;
    trm::write(&z0, tampered.view()).unwrap();
    let out = tofrecon(&[
        "tomo",
        "--config",
        s(&cfg_path),
        "--out-dir",
        s(&out_dir),
        "--views",
        s(&list),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn make_library_writes_readable_tables() {
    let tmp = TempDir::new().unwrap();
    let out = tofrecon(&["make-library", "--out-dir", s(tmp.path())]);
    assert!(out.status.success());
    let t = tofrecon::xsdict::IsotopeTable::load_csv(&tmp.path().join("U-238.csv")).unwrap();
    assert_eq!(t.label(), "U-238");
    assert_eq!(
        t.energies(),
        tofrecon::library::find("U-238").unwrap().table().unwrap().energies()
    );
}
