//! Multi-resolution tetrahedral grids.
//!
//! A [`TetGrid`] is a stack of [`GridLevel`]s over an axis-aligned cuboid.
//! Level 0 is the coarsest. Every finer level is produced by splitting each
//! tetrahedron into eight at its edge midpoints, so each fine vertex is either
//! a copy of a coarse vertex or the midpoint of a coarse edge. That parent
//! relation drives pooling and unpooling; the per-vertex neighbor lists, in a
//! fixed polar order, are the kernel slots of the tetrahedral convolution.

use std::collections::BTreeSet;
use std::fs;
use std::num::NonZeroUsize;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geom::{self, Aabb, Vec3};

const FORMAT_TAG: &str = "tetgrid";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed grid document: {0}")]
    Json(#[from] serde_json::Error),
    #[error("grid format mismatch: {0}")]
    Format(String),
    #[error("grid validation failed: {0}")]
    Invalid(String),
}

/// Where a vertex of a refined level came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Parent {
    /// The vertex already existed at the coarser level under this index.
    Copy(usize),
    /// The vertex is the midpoint of the coarse edge `(a, b)`, `a < b`.
    Midpoint(usize, usize),
}

/// Kernel-slot assignment for every vertex: `(neighbor, slot)` pairs sorted
/// by neighbor index. Slots run from 1 to the vertex degree; slot 0 is the
/// vertex itself.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SlotOrdering {
    slots: Vec<Vec<(usize, usize)>>,
}

impl SlotOrdering {
    pub fn slot(&self, vertex: usize, neighbor: usize) -> Option<usize> {
        let row = &self.slots[vertex];
        row.binary_search_by_key(&neighbor, |&(n, _)| n)
            .ok()
            .map(|i| row[i].1)
    }

    pub fn vertex_slots(&self, vertex: usize) -> &[(usize, usize)] {
        &self.slots[vertex]
    }
}

#[derive(Debug, Clone)]
pub struct GridLevel {
    vertices: Vec<Vec3>,
    tets: Vec<[usize; 4]>,
    /// Neighbors of each vertex in kernel-slot order.
    adjacency: Vec<Vec<usize>>,
    slots: SlotOrdering,
    m: usize,
    /// Empty at level 0.
    parents: Vec<Parent>,
    /// For each coarse vertex, the fine vertices that pool into it (its copy
    /// first, then midpoint children in ascending order). Empty at level 0.
    pool_groups: Vec<Vec<usize>>,
}

impl PartialEq for GridLevel {
    fn eq(&self, other: &Self) -> bool {
        self.vertices.len() == other.vertices.len()
            && self
                .vertices
                .iter()
                .zip(&other.vertices)
                .all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
            && self.tets == other.tets
            && self.parents == other.parents
    }
}

impl GridLevel {
    fn new(vertices: Vec<Vec3>, tets: Vec<[usize; 4]>, parents: Vec<Parent>, coarse_len: usize) -> Self {
        let (adjacency, slots) = compute_adjacency(&vertices, &tets);
        let m = adjacency.iter().map(Vec::len).max().unwrap_or(0);
        let pool_groups = if parents.is_empty() {
            Vec::new()
        } else {
            let mut groups = vec![Vec::new(); coarse_len];
            for (v, p) in parents.iter().enumerate() {
                if let Parent::Copy(c) = *p {
                    groups[c].push(v);
                }
            }
            for (v, p) in parents.iter().enumerate() {
                if let Parent::Midpoint(a, b) = *p {
                    groups[a].push(v);
                    groups[b].push(v);
                }
            }
            groups
        };
        Self {
            vertices,
            tets,
            adjacency,
            slots,
            m,
            parents,
            pool_groups,
        }
    }

    /// A single unrefined level from raw vertices and tets, without the
    /// cuboid checks of [`TetGrid::validate`].
    pub fn standalone(vertices: Vec<Vec3>, tets: Vec<[usize; 4]>) -> Self {
        Self::new(vertices, tets, Vec::new(), 0)
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_tets(&self) -> usize {
        self.tets.len()
    }

    pub fn vertices(&self) -> &[Vec3] {
        &self.vertices
    }

    pub fn tets(&self) -> &[[usize; 4]] {
        &self.tets
    }

    /// Neighbors of `v` in slot order (slot `i + 1` for position `i`).
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn slots(&self) -> &SlotOrdering {
        &self.slots
    }

    /// Maximum vertex degree; the convolution kernel has `m + 1` slots.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn parents(&self) -> &[Parent] {
        &self.parents
    }

    pub fn has_parents(&self) -> bool {
        !self.parents.is_empty()
    }

    /// Number of vertices on the next coarser level.
    pub fn coarse_len(&self) -> usize {
        self.pool_groups.len()
    }

    pub fn pool_group(&self, coarse_vertex: usize) -> &[usize] {
        &self.pool_groups[coarse_vertex]
    }

    /// Unique undirected edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        unique_edges(&self.tets)
    }

    pub fn max_edge_length(&self) -> f64 {
        self.edges()
            .iter()
            .map(|&(a, b)| geom::dist2(self.vertices[a], self.vertices[b]))
            .fold(0.0, f64::max)
            .sqrt()
    }

    pub fn tet_volume(&self, k: usize) -> f64 {
        let [a, b, c, d] = self.tets[k];
        geom::tet_volume(self.vertices[a], self.vertices[b], self.vertices[c], self.vertices[d])
    }

    pub fn total_volume(&self) -> f64 {
        (0..self.tets.len()).map(|k| self.tet_volume(k)).sum()
    }
}

/// Edge-connected neighbor lists, each sorted by polar coordinates around the
/// vertex in the global frame: inclination from +z, then azimuth from +x in
/// `[0, 2π)`, then distance, then neighbor index.
pub fn compute_adjacency(vertices: &[Vec3], tets: &[[usize; 4]]) -> (Vec<Vec<usize>>, SlotOrdering) {
    let mut adjacency = vec![Vec::new(); vertices.len()];
    for (a, b) in unique_edges(tets) {
        adjacency[a].push(b);
        adjacency[b].push(a);
    }
    for (v, nbrs) in adjacency.iter_mut().enumerate() {
        let center = vertices[v];
        let mut keyed: Vec<([f64; 3], usize)> = nbrs
            .iter()
            .map(|&n| (polar_key(geom::sub(vertices[n], center)), n))
            .collect();
        keyed.sort_by(|(ka, na), (kb, nb)| {
            ka[0]
                .total_cmp(&kb[0])
                .then(ka[1].total_cmp(&kb[1]))
                .then(ka[2].total_cmp(&kb[2]))
                .then(na.cmp(nb))
        });
        *nbrs = keyed.into_iter().map(|(_, n)| n).collect();
    }
    let slots = adjacency
        .iter()
        .map(|nbrs| {
            let mut row: Vec<(usize, usize)> = nbrs.iter().enumerate().map(|(i, &n)| (n, i + 1)).collect();
            row.sort_unstable();
            row
        })
        .collect();
    (adjacency, SlotOrdering { slots })
}

fn polar_key(d: Vec3) -> [f64; 3] {
    let r = geom::norm(d);
    let theta = (d[2] / r).clamp(-1.0, 1.0).acos();
    let mut phi = d[1].atan2(d[0]);
    if phi < 0.0 {
        phi += 2.0 * std::f64::consts::PI;
    }
    [theta, phi, r]
}

fn unique_edges(tets: &[[usize; 4]]) -> Vec<(usize, usize)> {
    let mut set = BTreeSet::new();
    for t in tets {
        for i in 0..4 {
            for j in (i + 1)..4 {
                let (a, b) = (t[i].min(t[j]), t[i].max(t[j]));
                set.insert((a, b));
            }
        }
    }
    set.into_iter().collect()
}

fn orient(vertices: &[Vec3], mut t: [usize; 4]) -> [usize; 4] {
    if geom::tet_volume(vertices[t[0]], vertices[t[1]], vertices[t[2]], vertices[t[3]]) < 0.0 {
        t.swap(2, 3);
    }
    t
}

#[derive(Debug, Clone, PartialEq)]
pub struct TetGrid {
    levels: Vec<GridLevel>,
    bounds: Aabb,
}

impl TetGrid {
    /// Regular lattice over `[-1, 1]³` with `cells` cubes per axis, each cube
    /// split into six tetrahedra around its `(0,0,0)-(1,1,1)` diagonal.
    pub fn base(cells: NonZeroUsize) -> Self {
        let n = cells.get();
        let side = n + 1;
        let index = |i: usize, j: usize, k: usize| i + side * (j + side * k);
        let coord = |i: usize| -1.0 + 2.0 * i as f64 / n as f64;
        let mut vertices = Vec::with_capacity(side * side * side);
        for k in 0..side {
            for j in 0..side {
                for i in 0..side {
                    vertices.push([coord(i), coord(j), coord(k)]);
                }
            }
        }
        const PERMS: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let mut tets = Vec::with_capacity(6 * n * n * n);
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    for perm in PERMS {
                        let mut c = [i, j, k];
                        let mut t = [index(c[0], c[1], c[2]); 4];
                        for (step, &axis) in perm.iter().enumerate() {
                            c[axis] += 1;
                            t[step + 1] = index(c[0], c[1], c[2]);
                        }
                        tets.push(orient(&vertices, t));
                    }
                }
            }
        }
        Self {
            levels: vec![GridLevel::new(vertices, tets, Vec::new(), 0)],
            bounds: Aabb {
                min: [-1.0; 3],
                max: [1.0; 3],
            },
        }
    }

    /// Base lattice followed by `levels - 1` subdivisions.
    pub fn build(cells: NonZeroUsize, levels: NonZeroUsize) -> Self {
        let mut grid = Self::base(cells);
        for _ in 1..levels.get() {
            grid = grid.subdivide();
        }
        grid
    }

    pub fn levels(&self) -> &[GridLevel] {
        &self.levels
    }

    pub fn level(&self, l: usize) -> &GridLevel {
        &self.levels[l]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> &GridLevel {
        self.levels.last().expect("grid has at least one level")
    }

    pub fn bounds(&self) -> Aabb {
        self.bounds
    }

    /// Appends one level by splitting every tetrahedron of the finest level
    /// into eight.
    pub fn subdivide(&self) -> Self {
        let coarse = self.finest();
        let edges = coarse.edges();
        let nv = coarse.num_vertices();
        let mut vertices = coarse.vertices.clone();
        let mut parents: Vec<Parent> = (0..nv).map(Parent::Copy).collect();
        for &(a, b) in &edges {
            vertices.push(geom::midpoint(coarse.vertices[a], coarse.vertices[b]));
            parents.push(Parent::Midpoint(a, b));
        }
        let mid = |a: usize, b: usize| -> usize {
            let key = (a.min(b), a.max(b));
            nv + edges.binary_search(&key).expect("edge of a tetrahedron")
        };

        let mut tets = Vec::with_capacity(coarse.tets.len() * 8);
        for &[a, b, c, d] in &coarse.tets {
            let (ab, ac, ad) = (mid(a, b), mid(a, c), mid(a, d));
            let (bc, bd, cd) = (mid(b, c), mid(b, d), mid(c, d));
            tets.push(orient(&vertices, [a, ab, ac, ad]));
            tets.push(orient(&vertices, [b, ab, bc, bd]));
            tets.push(orient(&vertices, [c, ac, bc, cd]));
            tets.push(orient(&vertices, [d, ad, bd, cd]));

            // Octahedron diagonals join midpoints of opposite edges.
            let diagonals = [(ab, cd), (ac, bd), (ad, bc)];
            let chosen = (0..3)
                .min_by(|&i, &j| {
                    let (p, q) = diagonals[i];
                    let (r, s) = diagonals[j];
                    let li = geom::dist2(vertices[p], vertices[q]);
                    let lj = geom::dist2(vertices[r], vertices[s]);
                    li.total_cmp(&lj)
                        .then((p.min(q), p.max(q)).cmp(&(r.min(s), r.max(s))))
                })
                .expect("three diagonals");
            let (p, q) = diagonals[chosen];
            let (e0, e2) = diagonals[(chosen + 1) % 3];
            let (e1, e3) = diagonals[(chosen + 2) % 3];
            // e0, e1, e2, e3 walks the equator: consecutive midpoints share a
            // coarse endpoint.
            let ring = [e0, e1, e2, e3];
            for i in 0..4 {
                tets.push(orient(&vertices, [p, q, ring[i], ring[(i + 1) % 4]]));
            }
        }

        let mut levels = self.levels.clone();
        levels.push(GridLevel::new(vertices, tets, parents, nv));
        Self {
            levels,
            bounds: self.bounds,
        }
    }

    /// Checks every structural invariant. Used on load.
    pub fn validate(&self) -> Result<(), GridError> {
        let invalid = |msg: String| Err(GridError::Invalid(msg));
        if self.levels.is_empty() {
            return invalid("grid has no levels".into());
        }
        let ext = geom::sub(self.bounds.max, self.bounds.min);
        let cuboid = ext[0] * ext[1] * ext[2];
        if !(cuboid > 0.0) {
            return invalid("degenerate bounds".into());
        }
        for (l, level) in self.levels.iter().enumerate() {
            let nv = level.num_vertices();
            if level.vertices.iter().flatten().any(|x| !x.is_finite()) {
                return invalid(format!("level {l}: non-finite vertex"));
            }
            for (k, t) in level.tets.iter().enumerate() {
                if t.iter().any(|&v| v >= nv) {
                    return invalid(format!("level {l}: tet {k} references a missing vertex"));
                }
                let distinct = (0..4).all(|i| ((i + 1)..4).all(|j| t[i] != t[j]));
                if !distinct {
                    return invalid(format!("level {l}: tet {k} repeats a vertex"));
                }
                if !(level.tet_volume(k) > 0.0) {
                    return invalid(format!("level {l}: tet {k} has non-positive volume"));
                }
            }
            let vol = level.total_volume();
            if ((vol - cuboid) / cuboid).abs() > 1e-9 {
                return invalid(format!("level {l}: tet volume {vol} does not fill the cuboid {cuboid}"));
            }
            if l == 0 {
                if !level.parents.is_empty() {
                    return invalid("level 0 must not carry parents".into());
                }
                continue;
            }
            let coarse = &self.levels[l - 1];
            let ne = coarse.edges().len();
            if nv != coarse.num_vertices() + ne {
                return invalid(format!(
                    "level {l}: {nv} vertices, expected {} + {ne}",
                    coarse.num_vertices()
                ));
            }
            if level.num_tets() != 8 * coarse.num_tets() {
                return invalid(format!(
                    "level {l}: {} tets, expected 8 x {}",
                    level.num_tets(),
                    coarse.num_tets()
                ));
            }
            if level.parents.len() != nv {
                return invalid(format!("level {l}: parent map has the wrong length"));
            }
            for (v, p) in level.parents.iter().enumerate() {
                let expected = match *p {
                    Parent::Copy(c) if c < coarse.num_vertices() => coarse.vertices[c],
                    Parent::Midpoint(a, b)
                        if a < b && b < coarse.num_vertices() && coarse.neighbors(a).contains(&b) =>
                    {
                        geom::midpoint(coarse.vertices[a], coarse.vertices[b])
                    }
                    _ => return invalid(format!("level {l}: vertex {v} has an invalid parent {p:?}")),
                };
                if geom::dist2(expected, level.vertices[v]) > 1e-24 {
                    return invalid(format!("level {l}: vertex {v} does not sit at its parent position"));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GridError> {
        let doc = GridDocument::from(self);
        fs::write(path, serde_json::to_vec(&doc)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let bytes = fs::read(path)?;
        Self::from_json(&bytes)
    }

    pub fn to_json(&self) -> Result<Vec<u8>, GridError> {
        Ok(serde_json::to_vec(&GridDocument::from(self))?)
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, GridError> {
        let doc: GridDocument = serde_json::from_slice(bytes)?;
        let grid = Self::try_from(doc)?;
        grid.validate()?;
        Ok(grid)
    }
}

#[derive(Serialize, Deserialize)]
struct GridDocument {
    format: String,
    version: u32,
    bounds: [Vec3; 2],
    levels: Vec<LevelDocument>,
}

#[derive(Serialize, Deserialize)]
struct LevelDocument {
    vertices: Vec<Vec3>,
    tets: Vec<[usize; 4]>,
    /// `[i]` for a copied vertex, `[a, b]` for an edge midpoint.
    parents: Vec<Vec<usize>>,
}

impl From<&TetGrid> for GridDocument {
    fn from(grid: &TetGrid) -> Self {
        Self {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            bounds: [grid.bounds.min, grid.bounds.max],
            levels: grid
                .levels
                .iter()
                .map(|l| LevelDocument {
                    vertices: l.vertices.clone(),
                    tets: l.tets.clone(),
                    parents: l
                        .parents
                        .iter()
                        .map(|p| match *p {
                            Parent::Copy(c) => vec![c],
                            Parent::Midpoint(a, b) => vec![a, b],
                        })
                        .collect(),
                })
                .collect(),
        }
    }
}

impl TryFrom<GridDocument> for TetGrid {
    type Error = GridError;

    fn try_from(doc: GridDocument) -> Result<Self, GridError> {
        if doc.format != FORMAT_TAG {
            return Err(GridError::Format(format!("expected format {FORMAT_TAG:?}, found {:?}", doc.format)));
        }
        if doc.version != FORMAT_VERSION {
            return Err(GridError::Format(format!("unsupported version {}", doc.version)));
        }
        let mut levels: Vec<GridLevel> = Vec::with_capacity(doc.levels.len());
        for (l, ld) in doc.levels.into_iter().enumerate() {
            if ld.tets.iter().flatten().any(|&v| v >= ld.vertices.len()) {
                return Err(GridError::Invalid(format!("level {l}: tet index out of range")));
            }
            let parents = ld
                .parents
                .into_iter()
                .map(|p| match p.as_slice() {
                    [c] => Ok(Parent::Copy(*c)),
                    [a, b] => Ok(Parent::Midpoint(*a, *b)),
                    _ => Err(GridError::Invalid(format!("level {l}: parent entry must have 1 or 2 indices"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            let coarse_len = levels.last().map_or(0, GridLevel::num_vertices);
            if l > 0 {
                let bad = parents.iter().any(|p| match *p {
                    Parent::Copy(c) => c >= coarse_len,
                    Parent::Midpoint(a, b) => a >= coarse_len || b >= coarse_len,
                });
                if bad {
                    return Err(GridError::Invalid(format!("level {l}: parent index out of range")));
                }
            }
            levels.push(GridLevel::new(ld.vertices, ld.tets, parents, coarse_len));
        }
        Ok(Self {
            levels,
            bounds: Aabb {
                min: doc.bounds[0],
                max: doc.bounds[1],
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nz(n: usize) -> NonZeroUsize {
        NonZeroUsize::new(n).unwrap()
    }

    fn single_tet() -> (Vec<Vec3>, Vec<[usize; 4]>) {
        (
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            vec![[0, 1, 2, 3]],
        )
    }

    #[test]
    fn base_counts() {
        let g = TetGrid::base(nz(1));
        assert_eq!(g.finest().num_vertices(), 8);
        assert_eq!(g.finest().num_tets(), 6);
        assert!((g.finest().total_volume() - 8.0).abs() < 1e-12);
        let g = TetGrid::base(nz(2));
        assert_eq!(g.finest().num_vertices(), 27);
        assert_eq!(g.finest().num_tets(), 48);
        g.validate().unwrap();
    }

    #[test]
    fn single_tet_adjacency() {
        let (v, t) = single_tet();
        let (adj, slots) = compute_adjacency(&v, &t);
        assert!(adj.iter().all(|n| n.len() == 3));
        for (i, nbrs) in adj.iter().enumerate() {
            for (p, &n) in nbrs.iter().enumerate() {
                assert_eq!(slots.slot(i, n), Some(p + 1));
            }
        }
    }

    #[test]
    fn slot_order_is_polar() {
        // from the origin of the unit tet: (0,0,1) has θ=0, then (1,0,0) at φ=0, then (0,1,0)
        let (v, t) = single_tet();
        let (adj, _) = compute_adjacency(&v, &t);
        assert_eq!(adj[0], vec![3, 1, 2]);
    }

    #[test]
    fn subdivision_midpoints_and_parents() {
        let g = TetGrid::base(nz(1)).subdivide();
        let fine = g.level(1);
        for (v, p) in fine.parents().iter().enumerate() {
            match *p {
                Parent::Copy(c) => assert_eq!(fine.vertices()[v], g.level(0).vertices()[c]),
                Parent::Midpoint(a, b) => {
                    let c = g.level(0);
                    assert_eq!(fine.vertices()[v], geom::midpoint(c.vertices()[a], c.vertices()[b]));
                    assert!(c.neighbors(a).contains(&b));
                }
            }
        }
    }

    #[test]
    fn children_volumes_sum_to_parent() {
        let g = TetGrid::base(nz(1)).subdivide();
        let (coarse, fine) = (g.level(0), g.level(1));
        for k in 0..coarse.num_tets() {
            let children: f64 = (0..8).map(|c| fine.tet_volume(8 * k + c)).sum();
            let parent = coarse.tet_volume(k);
            assert!(((children - parent) / parent).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_groups_cover_every_fine_vertex() {
        let g = TetGrid::base(nz(1)).subdivide().subdivide();
        let fine = g.finest();
        let mut seen = vec![0usize; fine.num_vertices()];
        for c in 0..fine.coarse_len() {
            let group = fine.pool_group(c);
            assert_eq!(fine.parents()[group[0]], Parent::Copy(c));
            for &v in group {
                seen[v] += 1;
            }
        }
        for (v, p) in fine.parents().iter().enumerate() {
            let expected = match p {
                Parent::Copy(_) => 1,
                Parent::Midpoint(..) => 2,
            };
            assert_eq!(seen[v], expected);
        }
    }

    #[test]
    fn json_round_trip_is_exact() {
        let g = TetGrid::build(nz(2), nz(2));
        let bytes = g.to_json().unwrap();
        let back = TetGrid::from_json(&bytes).unwrap();
        assert_eq!(g, back);
    }

    #[test]
    fn wrong_header_is_a_format_error() {
        let g = TetGrid::base(nz(1));
        let mut doc: serde_json::Value = serde_json::from_slice(&g.to_json().unwrap()).unwrap();
        doc["format"] = "mesh".into();
        let err = TetGrid::from_json(&serde_json::to_vec(&doc).unwrap()).unwrap_err();
        assert!(matches!(err, GridError::Format(_)));
        doc["format"] = "tetgrid".into();
        doc["version"] = 7.into();
        let err = TetGrid::from_json(&serde_json::to_vec(&doc).unwrap()).unwrap_err();
        assert!(matches!(err, GridError::Format(_)));
    }

    #[test]
    fn dropped_tets_fail_validation() {
        let g = TetGrid::build(nz(1), nz(2));
        let mut doc: serde_json::Value = serde_json::from_slice(&g.to_json().unwrap()).unwrap();
        doc["levels"][1]["tets"].as_array_mut().unwrap().pop();
        let err = TetGrid::from_json(&serde_json::to_vec(&doc).unwrap()).unwrap_err();
        assert!(matches!(err, GridError::Invalid(_)));
    }

    #[test]
    fn inverted_tet_fails_validation() {
        let g = TetGrid::base(nz(1));
        let mut doc: serde_json::Value = serde_json::from_slice(&g.to_json().unwrap()).unwrap();
        let t = doc["levels"][0]["tets"][0].as_array_mut().unwrap();
        t.swap(0, 1);
        let err = TetGrid::from_json(&serde_json::to_vec(&doc).unwrap()).unwrap_err();
        assert!(matches!(err, GridError::Invalid(_)));
    }
}
