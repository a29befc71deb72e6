//! Ground-truth fields from watertight triangle meshes.
//!
//! The pipeline is: normalise the mesh into the grid cuboid, sample its
//! surface, then per grid vertex compute the signed distance (positive
//! inside), the clipped displacement to the nearest sample and, optionally,
//! an inverse-distance blend of the sample colors.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{ChannelScalers, FieldError, FieldState, COLOR, DISPLACEMENT, SDF};
use crate::geom::{self, Aabb, Vec3};
use crate::rng::{self as trng, Domain};
use crate::spatial::{Bvh, KdTree, RayCount};
use crate::surface::{self, SurfaceError, SurfaceMesh};
use crate::tensorops::Tensor;
use crate::tetgrid::{GridError, GridLevel, TetGrid};

pub use crate::surface::{sample_surface, SampledSurface};

#[derive(Debug, Error)]
pub enum BakeError {
    #[error("mesh bounding box has zero extent")]
    DegenerateExtent,
    #[error("mesh is not watertight")]
    NotWatertight,
    #[error("no surface points")]
    EmptyPoints,
    #[error("surface samples carry no colors")]
    NoColors,
    #[error("could not determine inside/outside for grid vertex {0}")]
    SignUndetermined(usize),
    #[error("level {level} out of range for a grid with {levels} levels")]
    Level { level: usize, levels: usize },
    #[error(transparent)]
    Surface(#[from] SurfaceError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("dataset: {0}")]
    Dataset(String),
}

pub type Result<T, E = BakeError> = std::result::Result<T, E>;

/// Shrink factor that keeps normalised shapes clear of the grid boundary.
pub const NORMALIZE_MARGIN: f64 = 0.9;
pub const DEFAULT_POINTS: usize = 100_000;

/// Centre on the bounding-box centre, scale the largest half-extent to 1,
/// then shrink by [`NORMALIZE_MARGIN`].
pub fn normalize_mesh(mesh: &SurfaceMesh) -> Result<SurfaceMesh> {
    let mut b = Aabb::empty();
    for &v in &mesh.vertices {
        b.grow(v);
    }
    let c = b.center();
    let half = (0..3).map(|k| (b.max[k] - b.min[k]) / 2.0).fold(0.0, f64::max);
    if !(half > 0.0 && half.is_finite()) {
        return Err(BakeError::DegenerateExtent);
    }
    let s = NORMALIZE_MARGIN / half;
    Ok(SurfaceMesh {
        vertices: mesh.vertices.iter().map(|&v| geom::scale(geom::sub(v, c), s)).collect(),
        ..mesh.clone()
    })
}

/// Signed distance to a watertight mesh at every grid vertex.
pub fn compute_sdf(level: &GridLevel, mesh: &SurfaceMesh) -> Result<Vec<f64>> {
    if !surface::mesh_measures(mesh).is_watertight {
        return Err(BakeError::NotWatertight);
    }
    let bvh = Bvh::new(mesh.vertices.clone(), mesh.triangles.clone());
    level
        .vertices()
        .par_iter()
        .enumerate()
        .map(|(v, &p)| {
            let d = bvh.closest(p).expect("mesh has triangles").dist2.sqrt();
            if d < 1e-12 {
                return Ok(0.0);
            }
            Ok(if inside(&bvh, p, v)? { d } else { -d })
        })
        .collect()
}

/// Ray parity along +x; grazing rays are recast in jittered directions.
fn inside(bvh: &Bvh, p: Vec3, v: usize) -> Result<bool> {
    let mut dir = [1.0, 0.0, 0.0];
    let mut rng = trng::generator(v as u64, Domain::Misc, 0x5d);
    for _ in 0..32 {
        match bvh.ray_crossings(p, dir) {
            RayCount::Crossings(n) => return Ok(n % 2 == 1),
            RayCount::Ambiguous => {
                let j: Vec3 = [rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3)];
                let d = geom::add([1.0, 0.0, 0.0], j);
                dir = geom::scale(d, 1.0 / geom::norm(d));
            }
        }
    }
    Err(BakeError::SignUndetermined(v))
}

/// Vector to the nearest surface sample, rescaled to at most `max_len`.
pub fn compute_displacement(level: &GridLevel, points: &[Vec3], max_len: f64) -> Result<Vec<Vec3>> {
    if points.is_empty() {
        return Err(BakeError::EmptyPoints);
    }
    let tree = KdTree::new(points.to_vec());
    Ok(level
        .vertices()
        .par_iter()
        .map(|&v| {
            let h = tree.nearest(v).expect("non-empty tree");
            let d = geom::sub(points[h.index], v);
            let n = geom::norm(d);
            if n > max_len {
                geom::scale(d, max_len / n)
            } else {
                d
            }
        })
        .collect())
}

/// Colors blended from the ten nearest samples with weights `1/δ⁴`.
pub fn idw_colors(level: &GridLevel, surf: &SampledSurface) -> Result<Vec<Vec3>> {
    let colors = surf.colors.as_ref().ok_or(BakeError::NoColors)?;
    if surf.points.is_empty() {
        return Err(BakeError::EmptyPoints);
    }
    let tree = KdTree::new(surf.points.clone());
    Ok(level
        .vertices()
        .par_iter()
        .map(|&v| surface::idw_blend(&tree, colors, v, surface::COLOR_NEIGHBORS))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BakeOptions {
    pub points: usize,
    pub with_color: bool,
    pub normalize: bool,
    pub seed: u64,
}

impl Default for BakeOptions {
    fn default() -> Self {
        Self {
            points: DEFAULT_POINTS,
            with_color: false,
            normalize: true,
            seed: 0,
        }
    }
}

/// Full bake on one grid level. Scalers are fitted on this shape alone;
/// datasets refit them over all shapes.
pub fn bake(mesh: &SurfaceMesh, grid: &TetGrid, level: usize, opts: &BakeOptions) -> Result<FieldState> {
    let lvl = grid.levels().get(level).ok_or(BakeError::Level {
        level,
        levels: grid.num_levels(),
    })?;
    if opts.with_color && mesh.colors.is_none() {
        return Err(BakeError::NoColors);
    }
    let mesh = if opts.normalize { normalize_mesh(mesh)? } else { mesh.clone() };
    let mut rng = ChaCha8Rng::from_rng(&mut trng::generator(opts.seed, Domain::Surface, 0));
    let surf = sample_surface(&mesh, opts.points, &mut rng)?;
    let sdf = compute_sdf(lvl, &mesh)?;
    let disp = compute_displacement(lvl, &surf.points, lvl.max_edge_length())?;
    let channels = if opts.with_color { 7 } else { 4 };
    let mut values = Tensor::zeros(lvl.num_vertices(), channels);
    for v in 0..lvl.num_vertices() {
        values.set(v, SDF, sdf[v]);
        for k in 0..3 {
            values.set(v, DISPLACEMENT + k, disp[v][k]);
        }
    }
    if opts.with_color {
        let rgb = idw_colors(lvl, &surf)?;
        for (v, c) in rgb.iter().enumerate() {
            for k in 0..3 {
                values.set(v, COLOR + k, c[k]);
            }
        }
    }
    let scalers = ChannelScalers::fit([&values])?;
    Ok(FieldState::new(level, values, scalers)?)
}

/// A set of baked shapes on one grid level, with shared channel scalers.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub grid: TetGrid,
    pub level: usize,
    pub scalers: ChannelScalers,
    pub shapes: Vec<(String, Tensor)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    grid: String,
    level: usize,
    num_vertices: usize,
    channels: usize,
    scalers: ScalerDoc,
    shapes: Vec<ShapeDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ScalerDoc {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ShapeDoc {
    name: String,
    file: String,
}

const DATASET_FORMAT: &str = "tetradiff-dataset";
const DATASET_VERSION: u32 = 1;

impl Dataset {
    /// Collects fields (world units) and fits the shared scalers.
    pub fn new(grid: TetGrid, level: usize, shapes: Vec<(String, Tensor)>) -> Result<Self> {
        if shapes.is_empty() {
            return Err(BakeError::Dataset("no shapes".into()));
        }
        let lvl = grid.levels().get(level).ok_or(BakeError::Level {
            level,
            levels: grid.num_levels(),
        })?;
        for (name, t) in &shapes {
            crate::field::check_channels(t.cols())?;
            if t.rows() != lvl.num_vertices() || t.cols() != shapes[0].1.cols() {
                return Err(BakeError::Dataset(format!("shape {name} has shape {:?}", t.shape())));
            }
        }
        let scalers = ChannelScalers::fit(shapes.iter().map(|(_, t)| t))?;
        Ok(Self { grid, level, scalers, shapes })
    }

    pub fn channels(&self) -> usize {
        self.shapes[0].1.cols()
    }

    pub fn level(&self) -> &GridLevel {
        self.grid.level(self.level)
    }

    pub fn field(&self, i: usize) -> Result<FieldState> {
        Ok(FieldState::new(self.level, self.shapes[i].1.clone(), self.scalers.clone())?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        self.grid.save(dir.join("grid.json"))?;
        let mut docs = Vec::new();
        for (i, (name, t)) in self.shapes.iter().enumerate() {
            let file = format!("shape_{i:05}.bin");
            let mut w = BufWriter::new(fs::File::create(dir.join(&file))?);
            t.write_le(&mut w)?;
            w.flush()?;
            docs.push(ShapeDoc { name: name.clone(), file });
        }
        let manifest = Manifest {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            grid: "grid.json".into(),
            level: self.level,
            num_vertices: self.level().num_vertices(),
            channels: self.channels(),
            scalers: ScalerDoc {
                mean: self.scalers.mean.clone(),
                std: self.scalers.std.clone(),
            },
            shapes: docs,
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let m: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if m.format != DATASET_FORMAT || m.version != DATASET_VERSION {
            return Err(BakeError::Dataset(format!(
                "expected {DATASET_FORMAT} v{DATASET_VERSION}, found {} v{}",
                m.format, m.version
            )));
        }
        let grid = TetGrid::load(resolve(dir, &m.grid))?;
        let lvl = grid.levels().get(m.level).ok_or(BakeError::Level {
            level: m.level,
            levels: grid.num_levels(),
        })?;
        if lvl.num_vertices() != m.num_vertices {
            return Err(BakeError::Dataset("manifest vertex count does not match grid".into()));
        }
        crate::field::check_channels(m.channels)?;
        let mut shapes = Vec::new();
        for s in &m.shapes {
            let path = resolve(dir, &s.file);
            let len = fs::metadata(&path)?.len();
            if len != (m.num_vertices * m.channels * 8) as u64 {
                return Err(BakeError::Dataset(format!("{} has {len} bytes", s.file)));
            }
            let t = Tensor::read_le(&mut BufReader::new(fs::File::open(&path)?), m.num_vertices, m.channels)?;
            if !t.is_finite() {
                return Err(FieldError::NonFinite.into());
            }
            shapes.push((s.name.clone(), t));
        }
        if shapes.is_empty() {
            return Err(BakeError::Dataset("no shapes".into()));
        }
        let scalers = ChannelScalers::new(m.scalers.mean, m.scalers.std)?;
        if scalers.channels() != m.channels {
            return Err(BakeError::Dataset("scaler width does not match channels".into()));
        }
        Ok(Self {
            grid,
            level: m.level,
            scalers,
            shapes,
        })
    }
}

fn resolve(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::surface::{box_mesh, sphere_mesh};
    use std::num::NonZeroUsize;

    fn grid(cells: usize, levels: usize) -> TetGrid {
        TetGrid::build(NonZeroUsize::new(cells).unwrap(), NonZeroUsize::new(levels).unwrap())
    }

    #[test]
    fn normalize_cube() {
        let m = normalize_mesh(&box_mesh([0.0; 3], [2.0; 3])).unwrap();
        for v in &m.vertices {
            for c in v {
                assert!((c.abs() - 0.9).abs() < 1e-15);
            }
        }
        let unit = box_mesh([-1.0; 3], [1.0; 3]);
        let m = normalize_mesh(&unit).unwrap();
        for (a, b) in m.vertices.iter().zip(&unit.vertices) {
            assert_eq!(*a, geom::scale(*b, 0.9));
        }
        let point = SurfaceMesh {
            vertices: vec![[1.0, 2.0, 3.0]],
            triangles: vec![],
            colors: None,
        };
        assert!(matches!(normalize_mesh(&point), Err(BakeError::DegenerateExtent)));
    }

    #[test]
    fn cube_sdf_hand_values() {
        let cube = box_mesh([-0.5; 3], [0.5; 3]);
        let level = GridLevel::standalone(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, 0.1, 0.2], [0.2, 0.3, 0.4]],
            vec![[0, 1, 2, 3]],
        );
        let s = compute_sdf(&level, &cube).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15);
        assert!((s[1] + 0.5).abs() < 1e-15);
        assert!(s[2].abs() < 1e-9);
        let mut open = cube.clone();
        open.triangles.pop();
        assert!(matches!(compute_sdf(&level, &open), Err(BakeError::NotWatertight)));
    }

    #[test]
    fn sdf_signs_match_analytic_box_on_grid() {
        // grid vertices land exactly on face planes and diagonals: every
        // grazing ray case is exercised
        let g = grid(4, 2);
        let cube = box_mesh([-0.5; 3], [0.5; 3]);
        let s = compute_sdf(g.finest(), &cube).unwrap();
        for (v, p) in g.finest().vertices().iter().enumerate() {
            let analytic = 0.5 - p.iter().map(|c| c.abs()).fold(0.0, f64::max);
            if analytic.abs() < 1e-12 {
                assert!(s[v].abs() < 1e-9);
            } else {
                assert_eq!(s[v] > 0.0, analytic > 0.0, "vertex {p:?}");
            }
        }
    }

    #[test]
    fn displacement_clipping_and_hits() {
        let level = GridLevel::standalone(
            vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0], [0.0, 0.0, 3.0]],
            vec![[0, 1, 2, 3]],
        );
        let pts = vec![[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [0.0, 3.0, 0.0]];
        let d = compute_displacement(&level, &pts, 1.0).unwrap();
        assert_eq!(d[0], [0.0; 3]);
        assert_eq!(d[1], [0.0; 3]);
        assert!((geom::norm(d[3]) - 1.0).abs() < 1e-15);
        assert!(compute_displacement(&level, &[], 1.0).is_err());
    }

    #[test]
    fn single_color_everywhere() {
        let level = grid(1, 2).finest().clone();
        let surf = SampledSurface {
            points: vec![[0.3, 0.1, 0.2]],
            colors: Some(vec![[0.2, 0.4, 0.6]]),
            triangles: vec![0],
        };
        for c in idw_colors(&level, &surf).unwrap() {
            for (a, b) in c.iter().zip([0.2, 0.4, 0.6]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bake_channels_and_dataset_round_trip() {
        let g = grid(2, 2);
        let mut sphere = sphere_mesh([0.0; 3], 0.6, 2);
        sphere.colors = Some(vec![[0.5, 0.5, 0.5]; sphere.vertices.len()]);
        let opts = BakeOptions { points: 2000, ..Default::default() };
        let f = bake(&sphere, &g, 1, &opts).unwrap();
        assert_eq!(f.channels(), 4);
        let fc = bake(&sphere, &g, 1, &BakeOptions { with_color: true, ..opts }).unwrap();
        assert_eq!(fc.channels(), 7);
        for c in fc.color(3).unwrap() {
            assert!((c - 0.5).abs() < 1e-12);
        }
        // same seed, same bake
        assert_eq!(bake(&sphere, &g, 1, &opts).unwrap(), f);

        let ds = Dataset::new(g.clone(), 1, vec![("a".into(), f.values.clone()), ("b".into(), f.values.clone())]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        assert_eq!(Dataset::load(dir.path()).unwrap(), ds);
        // truncated blob is rejected
        let blob = dir.path().join("shape_00001.bin");
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(BakeError::Dataset(_))));
    }
}
