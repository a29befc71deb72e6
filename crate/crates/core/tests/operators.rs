//! Operator properties on real multi-level grids.

mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tetradiff_core::tensorops::{conv_forward, pool_forward, unpool_forward, Aggregation, Tensor};
use tetradiff_core::tetgrid::TetGrid;

use common::{fd_check, nz, random_tensor};

fn grid() -> TetGrid {
    TetGrid::build(nz(1), nz(3))
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_is_affine_in_x(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let g = grid();
        let lv = g.finest();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, lv.num_vertices(), 2);
        let y = random_tensor(&mut rng, lv.num_vertices(), 2);
        let k = random_tensor(&mut rng, (lv.m() + 1) * 2, 3);
        let zero = Tensor::zeros(1, 3);
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = conv_forward(&mix, &k, &zero, lv).unwrap();
        let cx = conv_forward(&x, &k, &zero, lv).unwrap();
        let cy = conv_forward(&y, &k, &zero, lv).unwrap();
        let rhs = cx.zip_map(&cy, |p, q| a * p + b * q).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-12));
    }

    #[test]
    fn pool_orders_max_above_mean(seed in any::<u64>()) {
        let g = grid();
        let lv = g.finest();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_tensor(&mut rng, lv.num_vertices(), 3);
        let (mean, _) = pool_forward(&x, lv, Aggregation::Mean).unwrap();
        let (max, _) = pool_forward(&x, lv, Aggregation::Max).unwrap();
        prop_assert!(mean.data().iter().zip(max.data()).all(|(m, x)| m <= x));
    }

    #[test]
    fn unpool_preserves_affine_fields(c in prop::array::uniform4(-2.0f64..2.0)) {
        // midpoints of an affine function are exact
        let g = grid();
        let fine = g.finest();
        let coarse = g.level(g.num_levels() - 2);
        let f = |p: [f64; 3]| c[0] + c[1] * p[0] + c[2] * p[1] + c[3] * p[2];
        let xc = Tensor::from_vec(coarse.num_vertices(), 1, coarse.vertices().iter().map(|p| f(*p)).collect()).unwrap();
        let up = unpool_forward(&xc, fine).unwrap();
        for (v, p) in fine.vertices().iter().enumerate() {
            prop_assert!((up.get(v, 0) - f(*p)).abs() < 1e-12);
        }
    }
}

#[test]
fn identity_kernel_is_identity() {
    let g = grid();
    let lv = g.finest();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_tensor(&mut rng, lv.num_vertices(), 3);
    let mut k = Tensor::zeros((lv.m() + 1) * 3, 3);
    for i in 0..3 {
        k.set(i, i, 1.0);
    }
    let y = conv_forward(&x, &k, &Tensor::zeros(1, 3), lv).unwrap();
    assert_eq!(x, y);
}

#[test]
fn chained_network_gradient() {
    // conv → layer norm → SiLU → pool → unpool → linear on three levels
    let g = grid();
    let fine = g.finest();
    let n = fine.num_vertices();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let leaves = vec![
        random_tensor(&mut rng, n, 2),
        random_tensor(&mut rng, (fine.m() + 1) * 2, 3),
        random_tensor(&mut rng, 1, 3),
        random_tensor(&mut rng, 1, 3),
        random_tensor(&mut rng, 1, 3),
        random_tensor(&mut rng, 3, 2),
        random_tensor(&mut rng, 1, 2),
    ];
    let target = random_tensor(&mut rng, n, 2);
    let err = fd_check(
        &leaves,
        |t, l| {
            let h = t.conv(l[0], l[1], l[2], fine).unwrap();
            let h = t.layer_norm(h, l[3], l[4]).unwrap();
            let h = t.silu(h);
            let p = t.pool(h, fine, Aggregation::Mean).unwrap();
            let u = t.unpool(p, fine).unwrap();
            let h = t.add(h, u).unwrap();
            let y = t.linear(h, l[5], l[6]).unwrap();
            t.mse(y, target.clone()).unwrap()
        },
        1e-5,
    );
    assert!(err < 1e-6, "relative error {err:e}");
}
