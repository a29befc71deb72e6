//! End-to-end runs of the binary on a tiny grid and model.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tetradiff_core::surface::{self, sphere_mesh, MeshFormat};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tetradiff"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn tetradiff")
}

fn ok(args: &[&str]) -> Value {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8(out.stdout).unwrap();
    serde_json::from_str(text.lines().last().expect("json summary")).unwrap()
}

fn err(args: &[&str]) -> (i32, Value) {
    let out = run(args);
    let code = out.status.code().unwrap();
    let text = String::from_utf8(out.stderr).unwrap();
    (code, serde_json::from_str(text.lines().last().unwrap()).unwrap())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn grid_build_and_info() {
    let dir = tempfile::tempdir().unwrap();
    let g = dir.path().join("grid.json");
    let built = ok(&["grid", "build", "--cells", "1", "--levels", "3", "--out", s(&g)]);
    let info = ok(&["grid", "info", s(&g)]);
    assert_eq!(built, info);
    let levels = info["levels"].as_array().unwrap();
    let counts: Vec<(u64, u64)> = levels
        .iter()
        .map(|l| (l["vertices"].as_u64().unwrap(), l["tets"].as_u64().unwrap()))
        .collect();
    assert_eq!(counts, vec![(8, 6), (27, 48), (125, 384)]);
    let run: Value = serde_json::from_slice(&fs::read(dir.path().join("grid.json.run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "grid build");
}

#[test]
fn usage_errors_exit_1_with_json() {
    let (code, e) = err(&["grid", "build", "--cells", "x"]);
    assert_eq!(code, 1);
    assert_eq!(e["error"], "usage");
    let (code, _) = err(&["no-such-command"]);
    assert_eq!(code, 1);
}

#[test]
fn missing_inputs_exit_2() {
    let (code, e) = err(&["grid", "info", "/definitely/not/here.json"]);
    assert_eq!(code, 2);
    assert_eq!(e["error"], "validation");
    assert_eq!(e["code"], 2);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("m.ckpt");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let (code, _) = err(&["sample", "--ckpt", s(&bad), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code, 2);
}

fn files(dir: &Path, ext: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == ext))
        .collect();
    v.sort();
    v
}

#[test]
fn pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let grid = d.join("grid.json");
    ok(&["grid", "build", "--cells", "1", "--levels", "3", "--out", s(&grid)]);

    let meshes = d.join("meshes");
    fs::create_dir(&meshes).unwrap();
    for (i, r) in [0.5, 0.7, 0.6].iter().enumerate() {
        let m = sphere_mesh([0.1 * i as f64, 0.0, 0.0], *r, 3);
        let name = if i == 2 { "c.obj" } else if i == 1 { "b.ply" } else { "a.obj" };
        surface::export_mesh(&m, meshes.join(name), MeshFormat::from_path(Path::new(name)).unwrap()).unwrap();
    }
    let data = d.join("data");
    let baked = ok(&[
        "bake", "--mesh", s(&meshes), "--grid", s(&grid), "--points", "5000", "--no-normalize", "--out", s(&data),
    ]);
    assert_eq!(baked["shapes"], 3);
    assert_eq!(baked["channels"], 4);
    assert!(data.join("run.json").exists());

    let exports = d.join("exports");
    fs::create_dir(&exports).unwrap();
    ok(&["export", "--mesh", s(&meshes.join("b.ply")), "--out", s(&exports.join("b.obj"))]);
    let exported = ok(&["export", "--dataset", s(&data), "--index", "1", "--out", s(&exports.join("shape1.obj"))]);
    assert_eq!(exported["watertight"], true);

    let cfg = d.join("cfg.json");
    fs::write(
        &cfg,
        r#"{"model":{"levels_used":2,"base_width":4,"res_blocks_per_stage":1,"time_embed_dim":8,"channels":4},
            "schedule":{"steps":20,"beta_start":0.0001,"beta_end":0.2}}"#,
    )
    .unwrap();
    let ckpt = d.join("model.ckpt");
    let train = |epochs: &str, extra: &[&str]| {
        let mut args = vec![
            "--threads", "1", "train", "--dataset", s(&data), "--config", s(&cfg), "--epochs", epochs, "--batch-size",
            "2", "--seed", "3", "--out", s(&ckpt),
        ];
        args.extend_from_slice(extra);
        let out = run(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    let full = train("4", &[]);
    let records: Vec<Value> = full.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // 3 shapes at batch 2: two steps per epoch, plus the summary line
    assert_eq!(records.len(), 9);
    assert!(records[0]["loss"].as_f64().unwrap().is_finite());
    let reference = fs::read(&ckpt).unwrap();

    // a fresh rerun reproduces the checkpoint; resuming a finished run is a no-op
    fs::remove_file(&ckpt).unwrap();
    train("4", &[]);
    assert!(fs::read(&ckpt).unwrap() == reference);
    train("4", &["--resume"]);
    assert!(fs::read(&ckpt).unwrap() == reference);

    let sample = |out: &Path, extra: &[&str]| {
        let mut args = vec!["--threads", "1", "sample", "--ckpt", s(&ckpt), "--count", "2", "--seed", "5", "--out", s(out)];
        args.extend_from_slice(extra);
        ok(&args)
    };
    let a = d.join("sa");
    let b = d.join("sb");
    let summary = sample(&a, &["--save-trajectory", "20,10,0"]);
    sample(&b, &[]);
    assert_eq!(summary["samples"].as_array().unwrap().len(), 2);
    let (fa, fb) = (files(&a, "ply"), files(&b, "ply"));
    assert_eq!(fa.len(), 2);
    for (x, y) in fa.iter().zip(&fb) {
        assert!(fs::read(x).unwrap() == fs::read(y).unwrap(), "{}", x.display());
    }
    let traj = files(&a.join("sample_000_trajectory"), "ply");
    let names: Vec<_> = traj.iter().map(|p| p.file_name().unwrap().to_str().unwrap().to_owned()).collect();
    assert_eq!(names, ["step_0.ply", "step_10.ply", "step_20.ply"]);
    assert!(fs::read(a.join("sample_000_trajectory/step_0.ply")).unwrap() == fs::read(&fa[0]).unwrap());

    // guided runs complete and differ from the unguided one
    let g = d.join("sg");
    sample(&g, &["--guide", "volume:+256", "--guide-steps", "1..20"]);
    assert!(fs::read(g.join("sample_000.ply")).unwrap() != fs::read(&fa[0]).unwrap());
    let l = d.join("sl");
    sample(&l, &["--guide", "laplacian:-0.5"]);
    let (code, _) = err(&["sample", "--ckpt", s(&ckpt), "--guide", "colour:1", "--out", s(&l)]);
    assert_eq!(code, 1);

    // interpolation endpoints equal plain samples from the same seeds
    let it = d.join("interp");
    let shapes = ok(&[
        "--threads", "1", "interpolate", "--ckpt", s(&ckpt), "--seed-a", "5", "--seed-b", "6", "--steps", "3", "--out",
        s(&it),
    ]);
    assert_eq!(shapes["shapes"].as_array().unwrap().len(), 3);
    let fi = files(&it, "ply");
    assert!(fs::read(&fi[0]).unwrap() == fs::read(&fa[0]).unwrap());
    assert!(fs::read(&fi[2]).unwrap() == fs::read(&fa[1]).unwrap());

    let m = ok(&["metrics", "--gen", s(&meshes), "--ref", s(&exports), "--metric", "emd", "--points", "32", "--seed", "1"]);
    assert_eq!(m["metric"], "emd");
    assert_eq!(m["n_gen"], 3);
    assert_eq!(m["n_ref"], 2);
    let p = m["one_nna_percent"].as_f64().unwrap();
    assert!((0.0..=100.0).contains(&p));
}
