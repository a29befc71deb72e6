//! Spatial indices: a k-d tree over points (nearest and k-nearest queries)
//! and a bounding-volume hierarchy over triangles (closest point and ray
//! crossings). Both answer exactly what a brute-force scan would; ties
//! between equidistant points go to the lower point index.

use std::cmp::Ordering;

use crate::geom::{self, Aabb, Vec3};

const LEAF: usize = 8;

#[derive(Debug, Clone)]
struct KdNode {
    bounds: Aabb,
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<KdNode>,
}

/// `(squared distance, index)`, ordered so ties prefer the lower index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub dist2: f64,
    pub index: usize,
}

impl Hit {
    fn cmp_key(&self, other: &Hit) -> Ordering {
        self.dist2.total_cmp(&other.dist2).then(self.index.cmp(&other.index))
    }
}

impl KdTree {
    pub fn new(points: Vec<Vec3>) -> Self {
        let mut tree = Self {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        if !tree.points.is_empty() {
            tree.build(0, tree.points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        let mut bounds = Aabb::empty();
        for &i in &self.order[start..end] {
            bounds.grow(self.points[i]);
        }
        let id = self.nodes.len();
        self.nodes.push(KdNode { bounds, start, end, children: None });
        if end - start > LEAF {
            let axis = bounds.longest_axis();
            let mid = (start + end) / 2;
            let pts = &self.points;
            self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| pts[a][axis].total_cmp(&pts[b][axis]));
            let l = self.build(start, mid);
            let r = self.build(mid, end);
            self.nodes[id].children = Some((l, r));
        }
        id
    }

    /// Nearest point to `q`; `None` for an empty tree.
    pub fn nearest(&self, q: Vec3) -> Option<Hit> {
        self.k_nearest(q, 1).into_iter().next()
    }

    /// The `k` nearest points sorted by distance (fewer if the tree is small).
    pub fn k_nearest(&self, q: Vec3, k: usize) -> Vec<Hit> {
        let mut best: Vec<Hit> = Vec::with_capacity(k + 1);
        if k == 0 || self.points.is_empty() {
            return best;
        }
        self.search(0, q, k, &mut best);
        best
    }

    fn search(&self, id: usize, q: Vec3, k: usize, best: &mut Vec<Hit>) {
        let node = &self.nodes[id];
        let bound = node.bounds.dist2(q);
        if best.len() == k && bound > best[k - 1].dist2 {
            return;
        }
        match node.children {
            None => {
                for &i in &self.order[node.start..node.end] {
                    let h = Hit { dist2: geom::dist2(q, self.points[i]), index: i };
                    if best.len() == k && h.cmp_key(&best[k - 1]) != Ordering::Less {
                        continue;
                    }
                    let pos = best.partition_point(|b| b.cmp_key(&h) == Ordering::Less);
                    best.insert(pos, h);
                    best.truncate(k);
                }
            }
            Some((l, r)) => {
                let (dl, dr) = (self.nodes[l].bounds.dist2(q), self.nodes[r].bounds.dist2(q));
                let (a, b) = if dl <= dr { (l, r) } else { (r, l) };
                self.search(a, q, k, best);
                self.search(b, q, k, best);
            }
        }
    }
}

#[derive(Debug, Clone)]
struct BvhNode {
    bounds: Aabb,
    start: usize,
    end: usize,
    children: Option<(usize, usize)>,
}

/// BVH over a triangle soup.
#[derive(Debug, Clone)]
pub struct Bvh {
    vertices: Vec<Vec3>,
    triangles: Vec<[usize; 3]>,
    order: Vec<usize>,
    nodes: Vec<BvhNode>,
}

/// Closest point on the mesh to a query.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceHit {
    pub point: Vec3,
    pub dist2: f64,
    pub triangle: usize,
}

/// Outcome of casting a ray against the mesh.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RayCount {
    /// Number of proper crossings.
    Crossings(usize),
    /// The ray grazed an edge or vertex; recast with another direction.
    Ambiguous,
}

impl Bvh {
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[usize; 3]>) -> Self {
        let mut bvh = Self {
            order: (0..triangles.len()).collect(),
            vertices,
            triangles,
            nodes: Vec::new(),
        };
        if !bvh.triangles.is_empty() {
            let centroids: Vec<Vec3> = bvh
                .triangles
                .iter()
                .map(|t| {
                    let [a, b, c] = t.map(|i| bvh.vertices[i]);
                    geom::scale(geom::add(a, geom::add(b, c)), 1.0 / 3.0)
                })
                .collect();
            bvh.build(0, bvh.triangles.len(), &centroids);
        }
        bvh
    }

    fn tri_bounds(&self, t: usize) -> Aabb {
        let mut b = Aabb::empty();
        for &i in &self.triangles[t] {
            b.grow(self.vertices[i]);
        }
        b
    }

    fn build(&mut self, start: usize, end: usize, centroids: &[Vec3]) -> usize {
        let mut bounds = Aabb::empty();
        let mut cb = Aabb::empty();
        for &t in &self.order[start..end] {
            bounds.merge(&self.tri_bounds(t));
            cb.grow(centroids[t]);
        }
        let id = self.nodes.len();
        self.nodes.push(BvhNode { bounds, start, end, children: None });
        if end - start > 4 {
            let axis = cb.longest_axis();
            let mid = (start + end) / 2;
            self.order[start..end]
                .select_nth_unstable_by(mid - start, |&a, &b| centroids[a][axis].total_cmp(&centroids[b][axis]));
            let l = self.build(start, mid, centroids);
            let r = self.build(mid, end, centroids);
            self.nodes[id].children = Some((l, r));
        }
        id
    }

    fn corners(&self, t: usize) -> [Vec3; 3] {
        self.triangles[t].map(|i| self.vertices[i])
    }

    /// Closest surface point; ties go to the lower triangle index.
    pub fn closest(&self, q: Vec3) -> Option<SurfaceHit> {
        if self.triangles.is_empty() {
            return None;
        }
        let mut best: Option<SurfaceHit> = None;
        let mut stack = vec![0usize];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if let Some(b) = best {
                if node.bounds.dist2(q) > b.dist2 {
                    continue;
                }
            }
            match node.children {
                None => {
                    for &t in &self.order[node.start..node.end] {
                        let [a, b, c] = self.corners(t);
                        let p = geom::closest_point_on_triangle(q, a, b, c);
                        let d = geom::dist2(p, q);
                        let better = match best {
                            None => true,
                            Some(h) => d < h.dist2 || (d == h.dist2 && t < h.triangle),
                        };
                        if better {
                            best = Some(SurfaceHit { point: p, dist2: d, triangle: t });
                        }
                    }
                }
                Some((l, r)) => {
                    let (dl, dr) = (self.nodes[l].bounds.dist2(q), self.nodes[r].bounds.dist2(q));
                    // push the far child first so the near one is visited first
                    if dl <= dr {
                        stack.push(r);
                        stack.push(l);
                    } else {
                        stack.push(l);
                        stack.push(r);
                    }
                }
            }
        }
        best
    }

    /// Counts crossings of the ray `origin + s·dir`, `s > 0`.
    pub fn ray_crossings(&self, origin: Vec3, dir: Vec3) -> RayCount {
        let mut count = 0;
        let mut stack = if self.triangles.is_empty() { vec![] } else { vec![0usize] };
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if !ray_hits_box(origin, dir, &node.bounds) {
                continue;
            }
            match node.children {
                None => {
                    for &t in &self.order[node.start..node.end] {
                        let [a, b, c] = self.corners(t);
                        match ray_triangle(origin, dir, a, b, c) {
                            RayTri::Miss => {}
                            RayTri::Hit => count += 1,
                            RayTri::Degenerate => return RayCount::Ambiguous,
                        }
                    }
                }
                Some((l, r)) => {
                    stack.push(l);
                    stack.push(r);
                }
            }
        }
        RayCount::Crossings(count)
    }
}

fn ray_hits_box(o: Vec3, d: Vec3, b: &Aabb) -> bool {
    let mut lo: f64 = 0.0;
    let mut hi = f64::INFINITY;
    for k in 0..3 {
        if d[k].abs() < 1e-300 {
            if o[k] < b.min[k] || o[k] > b.max[k] {
                return false;
            }
            continue;
        }
        let inv = 1.0 / d[k];
        let (mut t0, mut t1) = ((b.min[k] - o[k]) * inv, (b.max[k] - o[k]) * inv);
        if t0 > t1 {
            std::mem::swap(&mut t0, &mut t1);
        }
        lo = lo.max(t0);
        hi = hi.min(t1);
        if lo > hi * (1.0 + 1e-12) + 1e-12 {
            return false;
        }
    }
    true
}

enum RayTri {
    Miss,
    Hit,
    Degenerate,
}

/// Möller–Trumbore with a margin: hits within `TOL` of an edge, or rays
/// nearly parallel to the plane, are reported as degenerate.
fn ray_triangle(o: Vec3, d: Vec3, a: Vec3, b: Vec3, c: Vec3) -> RayTri {
    const TOL: f64 = 1e-9;
    let e1 = geom::sub(b, a);
    let e2 = geom::sub(c, a);
    let p = geom::cross(d, e2);
    let det = geom::dot(e1, p);
    let scale = geom::norm(e1) * geom::norm(e2) * geom::norm(d);
    if scale == 0.0 {
        return RayTri::Miss;
    }
    let s = geom::sub(o, a);
    let qv = geom::cross(s, e1);
    if det.abs() <= 1e-12 * scale {
        return RayTri::Miss;
    }
    let inv = 1.0 / det;
    let u = geom::dot(s, p) * inv;
    let v = geom::dot(d, qv) * inv;
    let t = geom::dot(e2, qv) * inv;
    let w = 1.0 - u - v;
    if u < -TOL || v < -TOL || w < -TOL || t < -TOL {
        return RayTri::Miss;
    }
    if u < TOL || v < TOL || w < TOL || t < TOL {
        return RayTri::Degenerate;
    }
    RayTri::Hit
}
