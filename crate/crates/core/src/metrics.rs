//! Point-cloud distances and the 1-nearest-neighbour two-sample test.

use rayon::prelude::*;
use thiserror::Error;

use crate::geom::{self, Vec3};
use crate::rng::{self, Domain};
use crate::spatial::{Bvh, KdTree};
use crate::surface::{self, SurfaceError, SurfaceMesh};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("point cloud is empty")]
    Empty,
    #[error("clouds differ in size ({0} vs {1})")]
    SizeMismatch(usize, usize),
    #[error("exact matching is limited to {max} points, got {n}")]
    TooLarge { n: usize, max: usize },
    #[error("non-finite coordinate")]
    NonFinite,
    #[error(transparent)]
    Surface(#[from] SurfaceError),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

pub const EMD_MAX_POINTS: usize = 512;
pub const DEFAULT_POINTS: usize = 128;

#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        if points.iter().flatten().any(|c| !c.is_finite()) {
            return Err(MetricError::NonFinite);
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Area-weighted surface sample, reproducible from `seed`.
pub fn sample_mesh_points(mesh: &SurfaceMesh, n: usize, seed: u64) -> Result<PointCloud> {
    let mut r = rng::generator(seed, Domain::Surface, 1);
    let s = surface::sample_surface(mesh, n, &mut r)?;
    PointCloud::new(s.points)
}

fn mean_nearest_sq(from: &PointCloud, to: &KdTree) -> f64 {
    let sum: f64 = from
        .points
        .iter()
        .map(|&p| to.nearest(p).expect("non-empty").dist2)
        .sum();
    sum / from.len() as f64
}

/// Mean squared nearest distance a→b plus b→a.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricError::Empty);
    }
    let (ta, tb) = (KdTree::new(a.points.clone()), KdTree::new(b.points.clone()));
    Ok(mean_nearest_sq(a, &tb) + mean_nearest_sq(b, &ta))
}

/// Minimum mean Euclidean cost over perfect matchings.
pub fn emd(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    if a.len() != b.len() {
        return Err(MetricError::SizeMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    if a.len() > EMD_MAX_POINTS {
        return Err(MetricError::TooLarge {
            n: a.len(),
            max: EMD_MAX_POINTS,
        });
    }
    let n = a.len();
    let cost: Vec<f64> = (0..n * n)
        .map(|k| geom::dist2(a.points[k / n], b.points[k % n]).sqrt())
        .collect();
    let assign = hungarian(n, &cost);
    // sum in row order for reproducibility
    Ok((0..n).map(|i| cost[i * n + assign[i]]).sum::<f64>() / n as f64)
}

/// Square assignment by the shortest-augmenting-path Hungarian method with
/// potentials, `O(n³)`. Returns the column assigned to each row.
pub fn hungarian(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based arrays; index 0 is the virtual root
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        out[p[j] - 1] = j - 1;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudMetric {
    Cd,
    Emd,
}

impl CloudMetric {
    pub fn eval(self, a: &PointCloud, b: &PointCloud) -> Result<f64> {
        match self {
            Self::Cd => chamfer(a, b),
            Self::Emd => emd(a, b),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Cd => "cd",
            Self::Emd => "emd",
        }
    }
}

impl std::str::FromStr for CloudMetric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cd" => Ok(Self::Cd),
            "emd" => Ok(Self::Emd),
            _ => Err(format!("unknown metric {s:?} (cd or emd)")),
        }
    }
}

/// Leave-one-out 1-NN accuracy (percent) of telling the two sets apart.
/// Ties go to the lower index in the pooled order `gen ++ ref`.
pub fn one_nna(gen: &[PointCloud], reference: &[PointCloud], metric: CloudMetric) -> Result<f64> {
    if gen.is_empty() || reference.is_empty() {
        return Err(MetricError::Empty);
    }
    let pool: Vec<&PointCloud> = gen.iter().chain(reference).collect();
    let n = pool.len();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let d: Vec<f64> = pairs
        .par_iter()
        .map(|&(i, j)| metric.eval(pool[i], pool[j]))
        .collect::<Result<_>>()?;
    let mut dist = vec![0.0; n * n];
    for (&(i, j), &v) in pairs.iter().zip(&d) {
        dist[i * n + j] = v;
        dist[j * n + i] = v;
    }
    let label = |i: usize| i < gen.len();
    let mut correct = 0usize;
    for i in 0..n {
        let mut best: Option<usize> = None;
        for j in (0..n).filter(|&j| j != i) {
            if best.is_none_or(|b| dist[i * n + j] < dist[i * n + b]) {
                best = Some(j);
            }
        }
        if label(best.expect("pool has two or more clouds")) == label(i) {
            correct += 1;
        }
    }
    Ok(100.0 * correct as f64 / n as f64)
}

/// Symmetric Hausdorff distance between two meshes, estimated from their
/// vertices plus `samples` surface points per side against the exact
/// closest point on the other mesh.
pub fn hausdorff(a: &SurfaceMesh, b: &SurfaceMesh, samples: usize, seed: u64) -> Result<f64> {
    let one_side = |x: &SurfaceMesh, y: &SurfaceMesh, s: u64| -> Result<f64> {
        let bvh = Bvh::new(y.vertices.clone(), y.triangles.clone());
        let mut pts = x.vertices.clone();
        pts.extend(sample_mesh_points(x, samples, s)?.points);
        Ok(pts
            .par_iter()
            .map(|&p| bvh.closest(p).map_or(f64::INFINITY, |h| h.dist2.sqrt()))
            .reduce(|| 0.0, f64::max))
    };
    Ok(one_side(a, b, seed)?.max(one_side(b, a, seed.wrapping_add(1))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(pts: &[Vec3]) -> PointCloud {
        PointCloud::new(pts.to_vec()).unwrap()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        cloud(
            &(0..n)
                .map(|_| [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect::<Vec<_>>(),
        )
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for k in 0..n {
                let mut q = p.clone();
                q.insert(k, n - 1);
                out.push(q);
            }
        }
        out
    }

    fn matching_cost(a: &PointCloud, b: &PointCloud, perm: &[usize]) -> f64 {
        perm.iter()
            .enumerate()
            .map(|(i, &j)| geom::dist2(a.points[i], b.points[j]).sqrt())
            .sum::<f64>()
            / a.len() as f64
    }

    #[test]
    fn chamfer_hand_values() {
        let a = cloud(&[[0.0; 3]]);
        let b = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(chamfer(&a, &b).unwrap(), 2.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert!(matches!(chamfer(&a, &cloud(&[])), Err(MetricError::Empty)));
    }

    #[test]
    fn emd_hand_values() {
        let a = cloud(&[[0.0; 3], [2.0, 0.0, 0.0]]);
        let b = cloud(&[[1.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        assert_eq!(emd(&a, &b).unwrap(), 1.0);
        assert_eq!(emd(&a, &a).unwrap(), 0.0);
        assert!(matches!(emd(&a, &cloud(&[[0.0; 3]])), Err(MetricError::SizeMismatch(2, 1))));
        let big = cloud(&vec![[0.0; 3]; 513]);
        assert!(matches!(emd(&big, &big), Err(MetricError::TooLarge { .. })));
    }

    #[test]
    fn emd_equals_brute_force_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for n in 1..=7 {
            for _ in 0..5 {
                let (a, b) = (random_cloud(&mut rng, n), random_cloud(&mut rng, n));
                let brute = permutations(n)
                    .iter()
                    .map(|p| matching_cost(&a, &b, p))
                    .fold(f64::INFINITY, f64::min);
                assert!((emd(&a, &b).unwrap() - brute).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn emd_beats_random_permutations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b) = (random_cloud(&mut rng, 60), random_cloud(&mut rng, 60));
        let best = emd(&a, &b).unwrap();
        let mut perm: Vec<usize> = (0..60).collect();
        for _ in 0..200 {
            for i in (1..60).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            assert!(best <= matching_cost(&a, &b, &perm) + 1e-12);
        }
    }

    #[test]
    fn separated_clusters_are_fully_distinguished() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g: Vec<PointCloud> = (0..10).map(|_| random_cloud(&mut rng, 16)).collect();
        let r: Vec<PointCloud> = (0..10)
            .map(|_| {
                let c = random_cloud(&mut rng, 16);
                cloud(&c.points.iter().map(|p| geom::add(*p, [10.0, 0.0, 0.0])).collect::<Vec<_>>())
            })
            .collect();
        assert_eq!(one_nna(&g, &r, CloudMetric::Cd).unwrap(), 100.0);
        assert_eq!(one_nna(&r, &g, CloudMetric::Emd).unwrap(), 100.0);
    }

    proptest! {
        #[test]
        fn chamfer_is_symmetric(seed in 0u64..500, n in 1usize..20, m in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (random_cloud(&mut rng, n), random_cloud(&mut rng, m));
            prop_assert_eq!(chamfer(&a, &b).unwrap(), chamfer(&b, &a).unwrap());
        }

        #[test]
        fn one_nna_is_label_symmetric(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g: Vec<PointCloud> = (0..5).map(|_| random_cloud(&mut rng, 8)).collect();
            let r: Vec<PointCloud> = (0..5).map(|_| random_cloud(&mut rng, 8)).collect();
            let x = one_nna(&g, &r, CloudMetric::Cd).unwrap();
            prop_assert!((0.0..=100.0).contains(&x));
            prop_assert_eq!(x, one_nna(&r, &g, CloudMetric::Cd).unwrap());
        }
    }
}
