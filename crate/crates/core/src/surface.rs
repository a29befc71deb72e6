//! Surface extraction and triangle-mesh utilities.
//!
//! [`marching_tetrahedra`] turns an (SDF, displacement) field into a
//! consistently oriented mesh whose vertices are deduplicated by grid edge,
//! so meshes are watertight whenever the zero set stays off the grid
//! boundary.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::field::{self, FieldError, FieldState, SDF};
use crate::geom::{self, Vec3};
use crate::spatial::KdTree;
use crate::tensorops::Tensor;
use crate::tetgrid::GridLevel;

#[derive(Debug, Error)]
pub enum SurfaceError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("unknown mesh format {0:?} (expected .obj or .ply)")]
    UnknownFormat(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("mesh has no surface area to sample")]
    ZeroArea,
    #[error("invalid mesh: {0}")]
    Invalid(String),
}

pub type Result<T, E = SurfaceError> = std::result::Result<T, E>;

/// Value that replaces an exact zero SDF before sign classification.
pub const ZERO_NUDGE: f64 = 1e-12;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SurfaceMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
    pub colors: Option<Vec<Vec3>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeshMeasures {
    pub volume: f64,
    pub surface_area: f64,
    pub is_watertight: bool,
}

impl SurfaceMesh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Self { vertices, triangles, colors: None };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if let Some(t) = self.triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(SurfaceError::Invalid(format!("triangle {t:?} indexes past {n} vertices")));
        }
        if let Some(c) = &self.colors {
            if c.len() != n {
                return Err(SurfaceError::Invalid(format!("{} colors for {n} vertices", c.len())));
            }
        }
        if self.vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(SurfaceError::Invalid("non-finite vertex".into()));
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn corners(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i])
    }

    pub fn triangle_areas(&self) -> Vec<f64> {
        (0..self.triangles.len())
            .map(|t| {
                let [a, b, c] = self.corners(t);
                geom::triangle_area(a, b, c)
            })
            .collect()
    }

    pub fn measures(&self) -> MeshMeasures {
        mesh_measures(self)
    }

    pub fn translate(&mut self, d: Vec3) {
        for v in &mut self.vertices {
            *v = geom::add(*v, d);
        }
    }

    /// Per-vertex neighbour sets from triangle edges, sorted.
    pub fn vertex_neighbors(&self) -> Vec<Vec<usize>> {
        let mut nb = vec![Vec::new(); self.vertices.len()];
        for t in &self.triangles {
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                nb[a].push(b);
                nb[b].push(a);
            }
        }
        for n in &mut nb {
            n.sort_unstable();
            n.dedup();
        }
        nb
    }
}

/// Volume by the divergence theorem, total area, and a watertightness test:
/// every directed edge appears once and its reverse appears once.
pub fn mesh_measures(mesh: &SurfaceMesh) -> MeshMeasures {
    let mut volume = 0.0;
    let mut area = 0.0;
    let mut directed: HashMap<(usize, usize), usize> = HashMap::new();
    for (i, t) in mesh.triangles.iter().enumerate() {
        let [a, b, c] = mesh.corners(i);
        volume += geom::dot(a, geom::cross(b, c)) / 6.0;
        area += geom::triangle_area(a, b, c);
        for k in 0..3 {
            *directed.entry((t[k], t[(k + 1) % 3])).or_default() += 1;
        }
    }
    let is_watertight = !mesh.triangles.is_empty()
        && directed
            .iter()
            .all(|(&(a, b), &n)| a != b && n == 1 && directed.get(&(b, a)) == Some(&1));
    MeshMeasures {
        volume,
        surface_area: area,
        is_watertight,
    }
}

/// Mean distance from each mesh vertex to the centroid of its neighbours.
pub fn mean_laplacian_magnitude(mesh: &SurfaceMesh) -> f64 {
    let nb = mesh.vertex_neighbors();
    let mut total = 0.0;
    let mut count = 0usize;
    for (v, n) in nb.iter().enumerate() {
        if n.is_empty() {
            continue;
        }
        let mut m = [0.0; 3];
        for &j in n {
            m = geom::add(m, mesh.vertices[j]);
        }
        m = geom::scale(m, 1.0 / n.len() as f64);
        total += geom::norm(geom::sub(mesh.vertices[v], m));
        count += 1;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}

fn nudge(s: f64) -> f64 {
    if s == 0.0 {
        ZERO_NUDGE
    } else {
        s
    }
}

/// Triangles of one tet as triples of sorted grid edges, wound outward.
fn tet_triangles(tet: [usize; 4], s: [f64; 4], rest: [Vec3; 4]) -> Vec<[(usize, usize); 3]> {
    let inside: Vec<usize> = (0..4).filter(|&k| s[k] > 0.0).collect();
    let outside: Vec<usize> = (0..4).filter(|&k| s[k] <= 0.0).collect();
    let key = |a: usize, b: usize| {
        let (x, y) = (tet[a], tet[b]);
        if x < y {
            (x, y)
        } else {
            (y, x)
        }
    };
    // crossing on local edge (a, b) evaluated on rest positions, for winding only
    let cross_at = |a: usize, b: usize| {
        let (pa, pb) = (rest[a], rest[b]);
        let w = s[a] / (s[a] - s[b]);
        geom::add(pa, geom::scale(geom::sub(pb, pa), w))
    };
    let centroid = |ks: &[usize]| {
        let mut c = [0.0; 3];
        for &k in ks {
            c = geom::add(c, rest[k]);
        }
        geom::scale(c, 1.0 / ks.len() as f64)
    };
    let orient = |tri: [(usize, usize); 3], pts: [Vec3; 3], out_dir: Vec3| {
        let n = geom::cross(geom::sub(pts[1], pts[0]), geom::sub(pts[2], pts[0]));
        if geom::dot(n, out_dir) >= 0.0 {
            tri
        } else {
            [tri[0], tri[2], tri[1]]
        }
    };
    match (inside.len(), outside.len()) {
        (0, _) | (_, 0) => vec![],
        (1, 3) | (3, 1) => {
            let (lone, rest3) = if inside.len() == 1 { (inside[0], &outside) } else { (outside[0], &inside) };
            let tri = [key(lone, rest3[0]), key(lone, rest3[1]), key(lone, rest3[2])];
            let pts = [cross_at(lone, rest3[0]), cross_at(lone, rest3[1]), cross_at(lone, rest3[2])];
            let out_dir = geom::sub(centroid(&outside), centroid(&inside));
            vec![orient(tri, pts, out_dir)]
        }
        _ => {
            let (a, b, c, d) = (inside[0], inside[1], outside[0], outside[1]);
            // quad in cyclic order ac, ad, bd, bc
            let q = [(a, c), (a, d), (b, d), (b, c)];
            let keys = q.map(|(x, y)| key(x, y));
            let pts = q.map(|(x, y)| cross_at(x, y));
            let smallest = (0..4).min_by_key(|&i| keys[i]).expect("four edges");
            // diagonal through the crossing on the smallest edge key
            let (i0, i1, i2, i3) = (smallest, (smallest + 1) % 4, (smallest + 2) % 4, (smallest + 3) % 4);
            let out_dir = geom::sub(centroid(&outside), centroid(&inside));
            vec![
                orient([keys[i0], keys[i1], keys[i2]], [pts[i0], pts[i1], pts[i2]], out_dir),
                orient([keys[i0], keys[i2], keys[i3]], [pts[i0], pts[i2], pts[i3]], out_dir),
            ]
        }
    }
}

/// Marching tetrahedra on raw world-unit values (`s` in column 0,
/// displacement in columns 1..4, optional color in 4..7).
pub fn marching_tetrahedra_values(level: &GridLevel, values: &Tensor) -> Result<SurfaceMesh> {
    if values.rows() != level.num_vertices() || values.cols() < 4 {
        return Err(FieldError::VertexCount {
            expected: level.num_vertices(),
            found: values.rows(),
        }
        .into());
    }
    let s: Vec<f64> = (0..values.rows()).map(|v| nudge(values.get(v, SDF))).collect();
    let pos = field::deformed_positions(values, level);
    let rest = level.vertices();
    let per_tet: Vec<Vec<[(usize, usize); 3]>> = level
        .tets()
        .par_iter()
        .map(|tet| tet_triangles(*tet, tet.map(|v| s[v]), tet.map(|v| rest[v])))
        .collect();
    // deterministic merge: vertex ids in order of first appearance
    let mut ids: HashMap<(usize, usize), usize> = HashMap::new();
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for tris in per_tet {
        for tri in tris {
            let t = tri.map(|(i, j)| {
                *ids.entry((i, j)).or_insert_with(|| {
                    vertices.push(crossing(pos[i], pos[j], s[i], s[j]));
                    vertices.len() - 1
                })
            });
            triangles.push(t);
        }
    }
    Ok(SurfaceMesh {
        vertices,
        triangles,
        colors: None,
    })
}

/// Zero crossing on the segment `(p_a, p_b)` with values `s_a`, `s_b`.
pub fn crossing(pa: Vec3, pb: Vec3, sa: f64, sb: f64) -> Vec3 {
    let d = sb - sa;
    [
        (pa[0] * sb - pb[0] * sa) / d,
        (pa[1] * sb - pb[1] * sa) / d,
        (pa[2] * sb - pb[2] * sa) / d,
    ]
}

/// Extracts the zero level set of a field; colors are blended in when the
/// field carries them.
pub fn marching_tetrahedra(level: &GridLevel, field: &FieldState) -> Result<SurfaceMesh> {
    field.check_level(level)?;
    let mut mesh = marching_tetrahedra_values(level, &field.values)?;
    if field.has_color() {
        mesh = colorize(mesh, level, field)?;
    }
    Ok(mesh)
}

/// Inverse-distance blend of the `k` nearest points with weights `1/δ⁴`;
/// an exact hit (δ < 1e-12) takes that point's value.
pub fn idw_blend(tree: &KdTree, values: &[Vec3], q: Vec3, k: usize) -> Vec3 {
    let hits = tree.k_nearest(q, k);
    if let Some(h) = hits.first() {
        if h.dist2.sqrt() < 1e-12 {
            return values[h.index].map(|c| c.clamp(0.0, 1.0));
        }
    }
    let mut acc = [0.0; 3];
    let mut wsum = 0.0;
    for h in &hits {
        let w = 1.0 / (h.dist2 * h.dist2);
        acc = geom::add(acc, geom::scale(values[h.index], w));
        wsum += w;
    }
    geom::scale(acc, 1.0 / wsum).map(|c| c.clamp(0.0, 1.0))
}

pub const COLOR_NEIGHBORS: usize = 10;

/// Colors every mesh vertex from the 10 nearest deformed grid vertices.
pub fn colorize(mut mesh: SurfaceMesh, level: &GridLevel, field: &FieldState) -> Result<SurfaceMesh> {
    field.check_level(level)?;
    let colors: Vec<Vec3> = (0..field.num_vertices())
        .map(|v| field.color(v).ok_or(FieldError::ChannelCount(field.channels())))
        .collect::<Result<_, _>>()?;
    let tree = KdTree::new(field.deformed_positions(level));
    let out = mesh
        .vertices
        .par_iter()
        .map(|&p| idw_blend(&tree, &colors, p, COLOR_NEIGHBORS))
        .collect();
    mesh.colors = Some(out);
    Ok(mesh)
}

/// Points sampled uniformly over a mesh surface.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledSurface {
    pub points: Vec<Vec3>,
    pub colors: Option<Vec<Vec3>>,
    /// Source triangle of every point.
    pub triangles: Vec<usize>,
}

/// Area-weighted triangle choice, then square-root barycentric sampling
/// inside the triangle; vertex colors are interpolated when present.
pub fn sample_surface(mesh: &SurfaceMesh, n: usize, rng: &mut impl Rng) -> Result<SampledSurface> {
    let areas = mesh.triangle_areas();
    let dist = WeightedIndex::new(&areas).map_err(|_| SurfaceError::ZeroArea)?;
    let mut points = Vec::with_capacity(n);
    let mut colors = mesh.colors.as_ref().map(|_| Vec::with_capacity(n));
    let mut tris = Vec::with_capacity(n);
    for _ in 0..n {
        let t = dist.sample(rng);
        let (r1, r2): (f64, f64) = (rng.random(), rng.random());
        let sr = r1.sqrt();
        let w = [1.0 - sr, sr * (1.0 - r2), sr * r2];
        let idx = mesh.triangles[t];
        let blend = |vals: &[Vec3]| {
            let mut p = [0.0; 3];
            for k in 0..3 {
                p = geom::add(p, geom::scale(vals[idx[k]], w[k]));
            }
            p
        };
        points.push(blend(&mesh.vertices));
        if let (Some(out), Some(src)) = (colors.as_mut(), mesh.colors.as_ref()) {
            out.push(blend(src));
        }
        tris.push(t);
    }
    Ok(SampledSurface {
        points,
        colors,
        triangles: tris,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Ply,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
        match ext.as_str() {
            "obj" => Ok(Self::Obj),
            "ply" => Ok(Self::Ply),
            _ => Err(SurfaceError::UnknownFormat(ext)),
        }
    }
}

fn color_byte(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn to_obj(mesh: &SurfaceMesh) -> String {
    let mut s = String::new();
    for (i, v) in mesh.vertices.iter().enumerate() {
        match &mesh.colors {
            Some(c) => {
                let c = c[i];
                writeln!(s, "v {} {} {} {} {} {}", v[0], v[1], v[2], c[0], c[1], c[2]).unwrap();
            }
            None => writeln!(s, "v {} {} {}", v[0], v[1], v[2]).unwrap(),
        }
    }
    for t in &mesh.triangles {
        writeln!(s, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
    }
    s
}

pub fn to_ply(mesh: &SurfaceMesh) -> String {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    writeln!(s, "element vertex {}", mesh.vertices.len()).unwrap();
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    if mesh.colors.is_some() {
        s.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    writeln!(s, "element face {}", mesh.triangles.len()).unwrap();
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for (i, v) in mesh.vertices.iter().enumerate() {
        write!(s, "{} {} {}", v[0], v[1], v[2]).unwrap();
        if let Some(c) = &mesh.colors {
            let c = c[i].map(color_byte);
            write!(s, " {} {} {}", c[0], c[1], c[2]).unwrap();
        }
        s.push('\n');
    }
    for t in &mesh.triangles {
        writeln!(s, "3 {} {} {}", t[0], t[1], t[2]).unwrap();
    }
    s
}

pub fn export_mesh(mesh: &SurfaceMesh, path: impl AsRef<Path>, format: MeshFormat) -> Result<()> {
    let text = match format {
        MeshFormat::Obj => to_obj(mesh),
        MeshFormat::Ply => to_ply(mesh),
    };
    fs::write(path, text)?;
    Ok(())
}

pub fn import_mesh(path: impl AsRef<Path>) -> Result<SurfaceMesh> {
    let path = path.as_ref();
    let format = MeshFormat::from_path(path)?;
    let text = fs::read_to_string(path)?;
    match format {
        MeshFormat::Obj => parse_obj(&text),
        MeshFormat::Ply => parse_ply(&text),
    }
}

fn num<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| SurfaceError::Parse(format!("bad or missing {what}")))
}

fn fan(poly: &[usize], out: &mut Vec<[usize; 3]>) {
    for k in 1..poly.len().saturating_sub(1) {
        out.push([poly[0], poly[k], poly[k + 1]]);
    }
}

/// OBJ reader: `v` with optional trailing rgb, polygonal `f` (fan
/// triangulated), `i/j/k` and negative indices. Other records are ignored.
pub fn parse_obj(text: &str) -> Result<SurfaceMesh> {
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut triangles = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let vals: Vec<f64> = it
                    .map(|t| t.parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|_| SurfaceError::Parse(format!("line {}: bad vertex", ln + 1)))?;
                if vals.len() < 3 {
                    return Err(SurfaceError::Parse(format!("line {}: vertex needs 3 coordinates", ln + 1)));
                }
                vertices.push([vals[0], vals[1], vals[2]]);
                if vals.len() >= 6 {
                    colors.push([vals[3], vals[4], vals[5]]);
                }
            }
            Some("f") => {
                let n = vertices.len() as i64;
                let poly: Vec<usize> = it
                    .map(|t| {
                        let i: i64 = num(t.split('/').next(), "face index")?;
                        let i = if i < 0 { n + i } else { i - 1 };
                        if i < 0 || i >= n {
                            return Err(SurfaceError::Parse(format!("line {}: face index out of range", ln + 1)));
                        }
                        Ok(i as usize)
                    })
                    .collect::<Result<_>>()?;
                fan(&poly, &mut triangles);
            }
            _ => {}
        }
    }
    let colors = match colors.len() {
        0 => None,
        n if n == vertices.len() => Some(colors),
        _ => return Err(SurfaceError::Parse("colors given for some vertices only".into())),
    };
    let mesh = SurfaceMesh {
        vertices,
        triangles,
        colors,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// ASCII PLY reader for `vertex` (x, y, z, optional red/green/blue) and
/// `face` elements.
pub fn parse_ply(text: &str) -> Result<SurfaceMesh> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(SurfaceError::Parse("missing ply magic".into()));
    }
    let mut elements: Vec<(String, usize, Vec<String>)> = Vec::new();
    loop {
        let line = lines.next().ok_or_else(|| SurfaceError::Parse("unterminated header".into()))?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", f, ..] if *f != "ascii" => {
                return Err(SurfaceError::Parse(format!("unsupported ply format {f}")));
            }
            ["element", name, count] => {
                elements.push((name.to_string(), num(Some(count), "element count")?, vec![]));
            }
            ["property", "list", .., name] | ["property", _, name] => {
                let e = elements
                    .last_mut()
                    .ok_or_else(|| SurfaceError::Parse("property before element".into()))?;
                e.2.push(name.to_string());
            }
            ["end_header"] => break,
            _ => {}
        }
    }
    let mut vertices = Vec::new();
    let mut colors = Vec::new();
    let mut triangles = Vec::new();
    for (name, count, props) in &elements {
        for _ in 0..*count {
            let line = lines.next().ok_or_else(|| SurfaceError::Parse(format!("truncated {name} data")))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            match name.as_str() {
                "vertex" => {
                    let get = |p: &str| -> Result<Option<f64>> {
                        match props.iter().position(|q| q == p) {
                            Some(i) => num(toks.get(i).copied(), p).map(Some),
                            None => Ok(None),
                        }
                    };
                    let xyz = ["x", "y", "z"].map(get);
                    let [Ok(Some(x)), Ok(Some(y)), Ok(Some(z))] = xyz else {
                        return Err(SurfaceError::Parse("vertex without x, y, z".into()));
                    };
                    vertices.push([x, y, z]);
                    if let (Some(r), Some(g), Some(b)) = (get("red")?, get("green")?, get("blue")?) {
                        colors.push([r / 255.0, g / 255.0, b / 255.0]);
                    }
                }
                "face" => {
                    let n: usize = num(toks.first().copied(), "face size")?;
                    if toks.len() < n + 1 {
                        return Err(SurfaceError::Parse("short face record".into()));
                    }
                    let poly: Vec<usize> = toks[1..=n]
                        .iter()
                        .map(|t| num(Some(t), "face index"))
                        .collect::<Result<_>>()?;
                    fan(&poly, &mut triangles);
                }
                _ => {}
            }
        }
    }
    let colors = match colors.len() {
        0 => None,
        n if n == vertices.len() => Some(colors),
        _ => return Err(SurfaceError::Parse("colors given for some vertices only".into())),
    };
    let mesh = SurfaceMesh {
        vertices,
        triangles,
        colors,
    };
    mesh.validate()?;
    Ok(mesh)
}

/// Axis-aligned box mesh with outward winding.
pub fn box_mesh(min: Vec3, max: Vec3) -> SurfaceMesh {
    let v = (0..8)
        .map(|i| {
            [
                if i & 1 == 0 { min[0] } else { max[0] },
                if i & 2 == 0 { min[1] } else { max[1] },
                if i & 4 == 0 { min[2] } else { max[2] },
            ]
        })
        .collect();
    let quads = [[0, 2, 3, 1], [4, 5, 7, 6], [0, 1, 5, 4], [2, 6, 7, 3], [0, 4, 6, 2], [1, 3, 7, 5]];
    let mut triangles = Vec::new();
    for q in quads {
        triangles.push([q[0], q[1], q[2]]);
        triangles.push([q[0], q[2], q[3]]);
    }
    SurfaceMesh {
        vertices: v,
        triangles,
        colors: None,
    }
}

/// Geodesic sphere from a subdivided octahedron, outward winding.
pub fn sphere_mesh(center: Vec3, radius: f64, subdivisions: usize) -> SurfaceMesh {
    let mut vertices: Vec<Vec3> = vec![
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ];
    let mut triangles = vec![[0, 2, 4], [2, 1, 4], [1, 3, 4], [3, 0, 4], [2, 0, 5], [1, 2, 5], [3, 1, 5], [0, 3, 5]];
    for _ in 0..subdivisions {
        let mut mid: HashMap<(usize, usize), usize> = HashMap::new();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        for t in &triangles {
            let mut m = [0usize; 3];
            for k in 0..3 {
                let (a, b) = (t[k], t[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                m[k] = *mid.entry(key).or_insert_with(|| {
                    let p = geom::midpoint(vertices[a], vertices[b]);
                    vertices.push(geom::scale(p, 1.0 / geom::norm(p)));
                    vertices.len() - 1
                });
            }
            next.push([t[0], m[0], m[2]]);
            next.push([t[1], m[1], m[0]]);
            next.push([t[2], m[2], m[1]]);
            next.push(m);
        }
        triangles = next;
    }
    let vertices = vertices
        .into_iter()
        .map(|p| geom::add(center, geom::scale(p, radius)))
        .collect();
    SurfaceMesh {
        vertices,
        triangles,
        colors: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::ChannelScalers;
    use crate::tetgrid::TetGrid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::num::NonZeroUsize;

    fn single_tet() -> GridLevel {
        GridLevel::standalone(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 1, 2, 3]],
        )
    }

    fn field_from_sdf(s: &[f64]) -> Tensor {
        let mut t = Tensor::zeros(s.len(), 4);
        for (i, v) in s.iter().enumerate() {
            t.set(i, SDF, *v);
        }
        t
    }

    #[test]
    fn all_sixteen_sign_cases() {
        let level = single_tet();
        for mask in 0..16u32 {
            let s: Vec<f64> = (0..4).map(|k| if mask >> k & 1 == 1 { 1.0 } else { -1.0 }).collect();
            let mesh = marching_tetrahedra_values(&level, &field_from_sdf(&s)).unwrap();
            let expected = match mask.count_ones() {
                0 | 4 => 0,
                1 | 3 => 1,
                _ => 2,
            };
            assert_eq!(mesh.triangles.len(), expected, "mask {mask:04b}");
            // every vertex sits where the linear SDF vanishes
            for p in &mesh.vertices {
                let bary = [1.0 - p[0] - p[1] - p[2], p[0], p[1], p[2]];
                let interp: f64 = (0..4).map(|k| bary[k] * s[k]).sum();
                assert!(interp.abs() < 1e-12);
            }
            // outward: normals point from inside vertices towards outside
            for t in 0..mesh.triangles.len() {
                let [a, b, c] = mesh.corners(t);
                let n = geom::cross(geom::sub(b, a), geom::sub(c, a));
                let grad_s = [s[1] - s[0], s[2] - s[0], s[3] - s[0]];
                assert!(geom::dot(n, grad_s) < 0.0);
            }
        }
    }

    #[test]
    fn symmetric_edge_crosses_at_midpoint() {
        let p = crossing([0.0, 0.0, 0.0], [1.0, 2.0, 3.0], 1.0, -1.0);
        assert_eq!(p, [0.5, 1.0, 1.5]);
    }

    #[test]
    fn exact_zero_is_nudged_inside() {
        let level = single_tet();
        let mesh = marching_tetrahedra_values(&level, &field_from_sdf(&[0.0, -1.0, -1.0, -1.0])).unwrap();
        assert_eq!(mesh.triangles.len(), 1);
    }

    fn sphere_field(level: &GridLevel, r: f64) -> Tensor {
        let s: Vec<f64> = level.vertices().iter().map(|v| r - geom::norm(*v)).collect();
        field_from_sdf(&s)
    }

    #[test]
    fn sphere_extraction() {
        // 4 cells per axis, two subdivisions: spacing 0.125
        let grid = TetGrid::build(NonZeroUsize::new(4).unwrap(), NonZeroUsize::new(3).unwrap());
        let level = grid.finest();
        let h = level.max_edge_length();
        let mesh = marching_tetrahedra_values(level, &sphere_field(level, 0.5)).unwrap();
        let m = mesh.measures();
        assert!(m.is_watertight);
        for p in &mesh.vertices {
            assert!((geom::norm(*p) - 0.5).abs() < h);
        }
        let exact = 4.0 / 3.0 * std::f64::consts::PI * 0.125;
        assert!((m.volume - exact).abs() / exact < 0.1, "{} vs {exact}", m.volume);
        // rigid translation of every deformed position translates the mesh
        let mut shifted = sphere_field(level, 0.5);
        for v in 0..shifted.rows() {
            shifted.set(v, 1, 0.25);
        }
        let moved = marching_tetrahedra_values(level, &shifted).unwrap();
        assert_eq!(moved.triangles, mesh.triangles);
        for (a, b) in moved.vertices.iter().zip(&mesh.vertices) {
            assert!((a[0] - b[0] - 0.25).abs() < 1e-12 && a[1] == b[1] && a[2] == b[2]);
        }
    }

    #[test]
    fn cube_measures() {
        let mut cube = box_mesh([0.0; 3], [1.0; 3]);
        let m = cube.measures();
        assert!((m.volume - 1.0).abs() < 1e-15);
        assert!((m.surface_area - 6.0).abs() < 1e-15);
        assert!(m.is_watertight);
        cube.triangles.pop();
        assert!(!cube.measures().is_watertight);
        let s = sphere_mesh([0.0; 3], 1.0, 3);
        assert!(s.measures().is_watertight);
        assert!(s.measures().volume > 0.0);
    }

    #[test]
    fn idw_hand_value() {
        let tree = KdTree::new(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let colors = [[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        // distance 2 to the first, 4 to the second
        let c = idw_blend(&tree, &colors, [-2.0, 0.0, 0.0], 10);
        assert!((c[0] - 16.0 / 17.0).abs() < 1e-12);
        assert!((c[2] - 1.0 / 17.0).abs() < 1e-12);
        assert_eq!(idw_blend(&tree, &colors, [2.0, 0.0, 0.0], 10), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn uniform_color_field() {
        let grid = TetGrid::build(NonZeroUsize::new(1).unwrap(), NonZeroUsize::new(3).unwrap());
        let level = grid.finest();
        let base = sphere_field(level, 0.5);
        let mut t = Tensor::zeros(level.num_vertices(), 7);
        for v in 0..t.rows() {
            t.set(v, 0, base.get(v, 0));
            for k in 4..7 {
                t.set(v, k, 0.25 * (k - 3) as f64);
            }
        }
        let f = FieldState::new(2, t, ChannelScalers::identity(7)).unwrap();
        let mesh = marching_tetrahedra(level, &f).unwrap();
        for c in mesh.colors.unwrap() {
            for k in 0..3 {
                assert!((c[k] - 0.25 * (k + 1) as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampling_proportions_and_on_surface() {
        let mesh = SurfaceMesh::new(
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [3.0, 0.0, 1.0], [0.0, 0.0, 1.0]],
            // areas 1 and 3
            vec![[0, 1, 2], [0, 3, 4]],
        )
        .unwrap();
        let areas = mesh.triangle_areas();
        assert!((areas[1] / areas[0] - 1.5).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 100_000;
        let s = sample_surface(&mesh, n, &mut rng).unwrap();
        let p = areas[0] / (areas[0] + areas[1]);
        let k = s.triangles.iter().filter(|&&t| t == 0).count() as f64;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((k - n as f64 * p).abs() < 3.0 * sd);
        for (pt, &t) in s.points.iter().zip(&s.triangles) {
            let [a, b, c] = mesh.corners(t);
            let q = geom::closest_point_on_triangle(*pt, a, b, c);
            assert!(geom::dist2(q, *pt).sqrt() < 1e-9);
        }
        let empty = SurfaceMesh::new(vec![[0.0; 3]; 3], vec![[0, 1, 2]]).unwrap();
        assert!(matches!(sample_surface(&empty, 5, &mut rng), Err(SurfaceError::ZeroArea)));
    }

    #[test]
    fn file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut mesh = sphere_mesh([0.1, 0.2, 0.3], 0.7, 2);
        mesh.colors = Some(mesh.vertices.iter().map(|v| v.map(|x| (x + 1.0) / 2.0)).collect());
        for ext in ["obj", "ply"] {
            let path = dir.path().join(format!("m.{ext}"));
            export_mesh(&mesh, &path, MeshFormat::from_path(&path).unwrap()).unwrap();
            let back = import_mesh(&path).unwrap();
            assert_eq!(back.triangles, mesh.triangles);
            for (a, b) in back.vertices.iter().zip(&mesh.vertices) {
                assert!(geom::dist2(*a, *b).sqrt() < 1e-6);
            }
            for (a, b) in back.colors.unwrap().iter().zip(mesh.colors.as_ref().unwrap()) {
                for k in 0..3 {
                    assert!((a[k] - b[k]).abs() <= 0.5 / 255.0 + 1e-12);
                }
            }
        }
        let empty = SurfaceMesh::default();
        let path = dir.path().join("e.ply");
        export_mesh(&empty, &path, MeshFormat::Ply).unwrap();
        assert_eq!(import_mesh(&path).unwrap(), empty);
        assert!(matches!(MeshFormat::from_path(Path::new("x.stl")), Err(SurfaceError::UnknownFormat(_))));
    }

    #[test]
    fn ply_half_rounds_up() {
        let mesh = SurfaceMesh {
            vertices: vec![[0.0; 3]],
            triangles: vec![],
            colors: Some(vec![[0.5, 0.0, 1.0]]),
        };
        assert!(to_ply(&mesh).contains("0 0 0 128 0 255"));
    }
}
