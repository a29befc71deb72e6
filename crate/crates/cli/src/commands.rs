use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tetradiff_core::databake::{self, BakeOptions, Dataset};
use tetradiff_core::denoiser::{Denoiser, DenoiserConfig, ScheduleConfig, TrainConfig};
use tetradiff_core::diffusion::{self, parse_step_range, GuidanceSpec, Guide, SeededNoise};
use tetradiff_core::field::FieldState;
use tetradiff_core::metrics::{self, CloudMetric, PointCloud};
use tetradiff_core::surface::{self, MeshFormat, SurfaceMesh};
use tetradiff_core::tensorops::Tensor;
use tetradiff_core::tetgrid::TetGrid;

use crate::error::{Classify, CliError};
use crate::{BakeArgs, ExportArgs, InterpolateArgs, MetricsArgs, SampleArgs, TrainArgs};

type Result<T = ()> = std::result::Result<T, CliError>;

fn print_json(v: &Value) {
    println!("{v}");
}

/// `run.json` goes inside output directories and next to output files.
fn run_json_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("run.json")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".run.json");
        out.with_file_name(name)
    }
}

fn write_run(out: &Path, is_dir: bool, command: &str, config: Value, seed: Option<u64>, threads: Option<usize>) -> Result {
    let doc = json!({
        "command": command,
        "config": config,
        "seed": seed,
        "threads": threads,
        "versions": {
            "tetradiff": env!("CARGO_PKG_VERSION"),
            "dataset_format": 1,
            "checkpoint_format": 1,
        },
    });
    let path = run_json_path(out, is_dir);
    fs::write(&path, serde_json::to_vec_pretty(&doc).expect("json value")).runtime(path.display())
}

fn create_dir(dir: &Path) -> Result {
    fs::create_dir_all(dir).runtime(dir.display())
}

fn parse_format(s: &str) -> Result<MeshFormat> {
    match s.to_ascii_lowercase().as_str() {
        "ply" => Ok(MeshFormat::Ply),
        "obj" => Ok(MeshFormat::Obj),
        other => Err(CliError::Usage(format!("unknown mesh format {other:?} (expected ply or obj)"))),
    }
}

fn ext(f: MeshFormat) -> &'static str {
    match f {
        MeshFormat::Ply => "ply",
        MeshFormat::Obj => "obj",
    }
}

/// Mesh files named directly plus every .obj/.ply inside named directories,
/// each directory listed in sorted order.
fn mesh_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .invalid(p.display())?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.is_file() && MeshFormat::from_path(f).is_ok())
                .collect();
            found.sort();
            out.extend(found);
        } else if p.is_file() {
            out.push(p.clone());
        } else {
            return Err(CliError::Validation(format!("{}: no such file or directory", p.display())));
        }
    }
    if out.is_empty() {
        return Err(CliError::Validation("no mesh files found".into()));
    }
    Ok(out)
}

fn load_grid(path: &Path) -> Result<TetGrid> {
    let grid = TetGrid::load(path).invalid(path.display())?;
    grid.validate().invalid(path.display())?;
    Ok(grid)
}

fn load_model(path: &Path) -> Result<Denoiser> {
    Denoiser::load(path).invalid(path.display())
}

/// Standardized sample → mesh, with colors when the model carries them.
fn extract(model: &Denoiser, x: &Tensor) -> Result<SurfaceMesh> {
    let world = model.scalers.destandardize(x).runtime("destandardize")?;
    let field = FieldState::new(model.level, world, model.scalers.clone()).runtime("field")?;
    surface::marching_tetrahedra(model.input_level(), &field).runtime("extract")
}

fn write_mesh(mesh: &SurfaceMesh, path: &Path, format: MeshFormat) -> Result {
    surface::export_mesh(mesh, path, format).runtime(path.display())
}

pub fn grid_build(cells: NonZeroUsize, levels: NonZeroUsize, out: &Path, threads: Option<usize>) -> Result {
    let grid = TetGrid::build(cells, levels);
    grid.save(out).runtime(out.display())?;
    write_run(out, false, "grid build", json!({ "cells": cells, "levels": levels, "out": out }), None, threads)?;
    print_json(&grid_summary(&grid));
    Ok(())
}

fn grid_summary(grid: &TetGrid) -> Value {
    let levels: Vec<Value> = grid
        .levels()
        .iter()
        .enumerate()
        .map(|(l, lv)| {
            json!({
                "level": l,
                "vertices": lv.num_vertices(),
                "tets": lv.num_tets(),
                "m": lv.m(),
                "max_edge_length": lv.max_edge_length(),
            })
        })
        .collect();
    json!({ "levels": levels })
}

pub fn grid_info(file: &Path) -> Result {
    let grid = load_grid(file)?;
    print_json(&grid_summary(&grid));
    Ok(())
}

pub fn bake(a: &BakeArgs, threads: Option<usize>) -> Result {
    let grid = load_grid(&a.grid)?;
    let level = a.level.unwrap_or(grid.num_levels() - 1);
    if level >= grid.num_levels() {
        return Err(CliError::Validation(format!("level {level} not in grid with {} levels", grid.num_levels())));
    }
    let files = mesh_files(&a.mesh)?;
    let opts = BakeOptions {
        points: a.points,
        with_color: a.color,
        normalize: !a.no_normalize,
        seed: a.seed,
    };
    let mut shapes = Vec::with_capacity(files.len());
    for f in &files {
        eprintln!("baking {}", f.display());
        let mesh = surface::import_mesh(f).invalid(f.display())?;
        let field = databake::bake(&mesh, &grid, level, &opts).invalid(f.display())?;
        let name = f.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
        shapes.push((name, field.values));
    }
    let ds = Dataset::new(grid, level, shapes).invalid("dataset")?;
    ds.save(&a.out).runtime(a.out.display())?;
    let config = json!({
        "mesh": files,
        "grid": a.grid,
        "level": level,
        "options": opts,
        "out": a.out,
    });
    write_run(&a.out, true, "bake", config, Some(a.seed), threads)?;
    print_json(&json!({ "shapes": ds.shapes.len(), "level": level, "channels": ds.channels(), "out": a.out }));
    Ok(())
}

/// Contents of `train --config`; every section optional.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainFile {
    pub model: Option<DenoiserConfig>,
    pub train: Option<TrainConfig>,
    pub schedule: Option<ScheduleConfig>,
}

pub fn train(a: &TrainArgs, threads: Option<usize>) -> Result {
    let ds = Dataset::load(&a.dataset).invalid(a.dataset.display())?;
    if let Some(g) = &a.grid {
        if load_grid(g)? != ds.grid {
            return Err(CliError::Validation(format!("{} does not match the dataset grid", g.display())));
        }
    }
    let file: TrainFile = match &a.config {
        Some(p) => serde_json::from_slice(&fs::read(p).invalid(p.display())?).invalid(p.display())?,
        None => TrainFile::default(),
    };
    let resumed = a.resume && a.out.exists();
    let mut model = if resumed {
        let m = load_model(&a.out)?;
        if m.grid != ds.grid || m.level != ds.level || m.scalers != ds.scalers {
            return Err(CliError::Validation("checkpoint was trained on a different dataset".into()));
        }
        m
    } else {
        let mut cfg = file.model.unwrap_or_default();
        cfg.channels = ds.channels();
        let seed = a.seed.or(file.train.map(|t| t.seed)).unwrap_or(0);
        let mut m = Denoiser::new(cfg, ds.grid.clone(), ds.level, seed).invalid("model config")?;
        m.schedule = file.schedule.unwrap_or_default();
        m.schedule.build().invalid("schedule")?;
        m.scalers = ds.scalers.clone();
        m
    };
    let mut tcfg = file
        .train
        .or(model.train_state.as_ref().map(|s| s.config))
        .unwrap_or_default();
    if let Some(e) = a.epochs {
        tcfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        tcfg.batch_size = b;
    }
    if let Some(s) = a.seed {
        tcfg.seed = s;
    }
    let data: Vec<Tensor> = ds
        .shapes
        .iter()
        .map(|(_, t)| ds.scalers.standardize(t))
        .collect::<std::result::Result<_, _>>()
        .invalid("standardize")?;
    eprintln!(
        "training {} parameters on {} shapes for {} epochs",
        model.num_parameters(),
        data.len(),
        tcfg.epochs
    );
    let out = a.out.clone();
    model
        .train(
            &data,
            tcfg,
            &mut |rec| println!("{}", serde_json::to_string(rec).expect("record")),
            &mut |m, _| m.save(&out),
        )
        .runtime("training")?;
    model.save(&a.out).runtime(a.out.display())?;
    let config = json!({
        "dataset": a.dataset,
        "model": model.config,
        "train": tcfg,
        "schedule": model.schedule,
        "resumed": resumed,
        "out": a.out,
    });
    write_run(&a.out, false, "train", config, Some(tcfg.seed), threads)?;
    let last = model.history().last().map(|r| r.loss);
    print_json(&json!({ "steps": model.history().len(), "final_loss": last, "out": a.out }));
    Ok(())
}

pub fn sample(a: &SampleArgs, threads: Option<usize>) -> Result {
    let format = parse_format(&a.format)?;
    let model = load_model(&a.ckpt)?;
    let sched = model.schedule.build().invalid("schedule")?;
    let steps = match &a.guide_steps {
        Some(s) => parse_step_range(s).map_err(|e| CliError::Usage(e.to_string()))?,
        None => 1..=sched.steps(),
    };
    let spec = a
        .guide
        .as_deref()
        .map(|g| GuidanceSpec::parse(g, steps.clone()))
        .transpose()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(&t) = a.save_trajectory.iter().find(|&&t| t > sched.steps()) {
        return Err(CliError::Usage(format!("trajectory step {t} beyond {}", sched.steps())));
    }
    let guide = spec.clone().map(|spec| Guide {
        spec,
        level: model.input_level(),
        scalers: &model.scalers,
    });
    create_dir(&a.out)?;
    let (rows, cols) = model.input_shape();
    let mut summaries = Vec::new();
    for i in 0..a.count {
        let seed = a.seed.wrapping_add(i as u64);
        eprintln!("sample {i} (seed {seed})");
        let noise = SeededNoise { seed, rows, cols };
        let traj_dir = a.out.join(format!("sample_{i:03}_trajectory"));
        if !a.save_trajectory.is_empty() {
            create_dir(&traj_dir)?;
        }
        let mut snapshot = |t: usize, x0: &Tensor| -> diffusion::Result<()> {
            let mesh = extract(&model, x0).map_err(|e| diffusion::DiffusionError::Model(e.to_string()))?;
            write_mesh(&mesh, &traj_dir.join(format!("step_{t}.ply")), MeshFormat::Ply)
                .map_err(|e| diffusion::DiffusionError::Model(e.to_string()))
        };
        let x = diffusion::sample(&model, &sched, &noise, guide.as_ref(), &a.save_trajectory, &mut snapshot)
            .runtime("sampling")?;
        let mesh = extract(&model, &x)?;
        let path = a.out.join(format!("sample_{i:03}.{}", ext(format)));
        write_mesh(&mesh, &path, format)?;
        let m = mesh.measures();
        summaries.push(json!({
            "file": path,
            "seed": seed,
            "triangles": mesh.triangles.len(),
            "volume": m.volume,
            "watertight": m.is_watertight,
        }));
    }
    let config = json!({
        "ckpt": a.ckpt,
        "count": a.count,
        "save_trajectory": a.save_trajectory,
        "guide": a.guide,
        "guide_steps": [steps.start(), steps.end()],
        "format": ext(format),
        "out": a.out,
    });
    write_run(&a.out, true, "sample", config, Some(a.seed), threads)?;
    print_json(&json!({ "samples": summaries }));
    Ok(())
}

pub fn interpolate(a: &InterpolateArgs, threads: Option<usize>) -> Result {
    let format = parse_format(&a.format)?;
    if a.steps == 0 {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    let model = load_model(&a.ckpt)?;
    let sched = model.schedule.build().invalid("schedule")?;
    create_dir(&a.out)?;
    let xs = diffusion::interpolate_shapes(&model, &sched, a.seed_a, a.seed_b, a.steps, model.input_shape())
        .runtime("interpolation")?;
    let mut files = Vec::new();
    for (i, (x, k)) in xs.iter().zip(diffusion::uniform_grid(a.steps)).enumerate() {
        let mesh = extract(&model, x)?;
        let path = a.out.join(format!("interp_{i:03}.{}", ext(format)));
        write_mesh(&mesh, &path, format)?;
        files.push(json!({ "file": path, "k": k, "volume": mesh.measures().volume }));
    }
    let config = json!({
        "ckpt": a.ckpt,
        "seed_a": a.seed_a,
        "seed_b": a.seed_b,
        "steps": a.steps,
        "format": ext(format),
        "out": a.out,
    });
    write_run(&a.out, true, "interpolate", config, Some(a.seed_a), threads)?;
    print_json(&json!({ "shapes": files }));
    Ok(())
}

fn clouds(dir: &Path, points: usize, seed: u64) -> Result<Vec<PointCloud>> {
    mesh_files(&[dir.to_path_buf()])?
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mesh = surface::import_mesh(f).invalid(f.display())?;
            metrics::sample_mesh_points(&mesh, points, seed.wrapping_add(i as u64)).invalid(f.display())
        })
        .collect()
}

pub fn metrics(a: &MetricsArgs) -> Result {
    let metric: CloudMetric = a.metric.parse().map_err(CliError::Usage)?;
    if a.points == 0 {
        return Err(CliError::Usage("--points must be positive".into()));
    }
    let gen = clouds(&a.gen, a.points, a.seed)?;
    let reference = clouds(&a.reference, a.points, a.seed.wrapping_add(1 << 32))?;
    let acc = metrics::one_nna(&gen, &reference, metric).invalid("1-NNA")?;
    print_json(&json!({
        "metric": metric.name(),
        "one_nna_percent": acc,
        "n_gen": gen.len(),
        "n_ref": reference.len(),
    }));
    Ok(())
}

pub fn export(a: &ExportArgs) -> Result {
    let format = MeshFormat::from_path(&a.out).map_err(|e| CliError::Usage(e.to_string()))?;
    let mesh = match (&a.dataset, &a.mesh) {
        (Some(dir), _) => {
            let ds = Dataset::load(dir).invalid(dir.display())?;
            if a.index >= ds.shapes.len() {
                return Err(CliError::Validation(format!("index {} but dataset has {} shapes", a.index, ds.shapes.len())));
            }
            let field = ds.field(a.index).invalid("field")?;
            surface::marching_tetrahedra(ds.level(), &field).runtime("extract")?
        }
        (None, Some(path)) => surface::import_mesh(path).invalid(path.display())?,
        (None, None) => return Err(CliError::Usage("one of --dataset or --mesh is required".into())),
    };
    write_mesh(&mesh, &a.out, format)?;
    let m = mesh.measures();
    print_json(&json!({
        "out": a.out,
        "vertices": mesh.vertices.len(),
        "triangles": mesh.triangles.len(),
        "volume": m.volume,
        "watertight": m.is_watertight,
    }));
    Ok(())
}
