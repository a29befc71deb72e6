//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::num::NonZeroUsize;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tetradiff_core::databake::{bake, BakeOptions, Dataset};
use tetradiff_core::geom::{self, Vec3};
use tetradiff_core::surface::sphere_mesh;
use tetradiff_core::tensorops::{NodeId, Tape, Tensor};
use tetradiff_core::tetgrid::TetGrid;

pub fn nz(n: usize) -> NonZeroUsize {
    NonZeroUsize::new(n).unwrap()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Largest norm-wise relative error between the tape gradient and central
/// differences over every leaf of the graph built by `build`.
pub fn fd_check<'g, F>(leaves: &[Tensor], build: F, step: f64) -> f64
where
    F: Fn(&mut Tape<'g>, &[NodeId]) -> NodeId,
{
    let eval = |vals: &[Tensor]| {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves.iter().map(|v| tape.leaf(v.clone())).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (li, leaf) in leaves.iter().enumerate() {
        let analytic = grads.get(ids[li]).unwrap();
        let mut num = vec![0.0; leaf.len()];
        let mut vals = leaves.to_vec();
        for k in 0..leaf.len() {
            let orig = leaf.data()[k];
            vals[li].data_mut()[k] = orig + step;
            let fp = eval(&vals);
            vals[li].data_mut()[k] = orig - step;
            let fm = eval(&vals);
            vals[li].data_mut()[k] = orig;
            num[k] = (fp - fm) / (2.0 * step);
        }
        let diff: f64 = analytic.data().iter().zip(&num).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let na = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = num.iter().map(|a| a * a).sum::<f64>().sqrt();
        let scale = na.max(nn);
        if scale > 1e-12 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

/// Grid used by the toy generative experiments: 2 cells per axis, two
/// subdivisions (729 vertices at the finest level).
pub fn toy_grid() -> TetGrid {
    TetGrid::build(nz(2), nz(3))
}

/// Sixteen spheres with radii spread over 0.3..0.6 and jittered centres,
/// baked on the finest level of `grid` without renormalisation.
pub fn sphere_dataset(grid: &TetGrid, seed: u64) -> Dataset {
    let level = grid.num_levels() - 1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = (0..16)
        .map(|i| {
            let r = 0.3 + 0.3 * i as f64 / 15.0;
            let c: Vec3 = [
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
                rng.random_range(-0.15..0.15),
            ];
            let mesh = sphere_mesh(c, r, 4);
            let opts = BakeOptions {
                points: 20_000,
                with_color: false,
                normalize: false,
                seed: seed + i as u64,
            };
            let f = bake(&mesh, grid, level, &opts).unwrap();
            (format!("sphere_{i:02}"), f.values)
        })
        .collect();
    Dataset::new(grid.clone(), level, shapes).unwrap()
}

pub fn dist(a: Vec3, b: Vec3) -> f64 {
    geom::dist2(a, b).sqrt()
}
