//! PCA against a covariance eigendecomposition computed by cyclic Jacobi
//! rotations, written out independently of the library's SVD route.

mod common;

use mse2d::encoder::LayerEmbeddings;
use mse2d::objectives::{v2_dim_loss, ObjectiveConfig, ObjectiveKind};
use mse2d::pca::{fit, project};
use mse2d::Graph;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::oracles::*;

#[test]
fn subspaces_match_the_eigen_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..20 {
        let x = random_mat(&mut rng, 8, 4);
        let (_, cov) = covariance(&x);
        let eig = jacobi_eigen(&cov);
        for k in 1..=3 {
            let basis = fit(&tensor(&x), k).unwrap();
            let got: Vec<Vec<f64>> = (0..k).map(|j| basis.component(j)).collect();
            let want: Vec<Vec<f64>> = eig[..k].iter().map(|(_, v)| v.clone()).collect();
            let angle = subspace_angle(&got, &want);
            assert!(angle < 1e-4, "k={k}: angle {angle:e}");
            for j in 0..k {
                assert!((basis.explained_variance[j] - eig[j].0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn rank_two_reconstruction_beats_random_bases() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random_mat(&mut rng, 20, 6);
    let basis = fit(&tensor(&x), 2).unwrap();
    let comps: Vec<Vec<f64>> = (0..2).map(|j| basis.component(j)).collect();
    let best = reconstruction_error(&x, &basis.mean, &comps);
    for _ in 0..50 {
        let other = random_orthonormal(&mut rng, 6, 2);
        assert!(best <= reconstruction_error(&x, &basis.mean, &other) + 1e-12);
    }
}

#[test]
fn components_are_orthonormal_with_positive_pivot() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let x = random_mat(&mut rng, 12, 7);
        let basis = fit(&tensor(&x), 5).unwrap();
        for i in 0..5 {
            let ci = basis.component(i);
            let pivot = ci.iter().cloned().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
            assert!(pivot > 0.0);
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((dot(&ci, &basis.component(j)) - want).abs() < 1e-10);
            }
        }
        assert!(basis.explained_variance.windows(2).all(|w| w[0] >= w[1]));
    }
}

#[test]
fn data_in_a_plane_keeps_its_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let plane = random_orthonormal(&mut rng, 5, 2);
    let offset: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
    let x: Mat = (0..15)
        .map(|_| {
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            (0..5).map(|i| offset[i] + a * plane[0][i] + b * plane[1][i]).collect()
        })
        .collect();
    let basis = fit(&tensor(&x), 2).unwrap();
    let y = project(&tensor(&x), &basis).unwrap().to_rows();
    let dist = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    for i in 0..x.len() {
        for j in 0..x.len() {
            assert!((dist(&x[i], &x[j]) - dist(&y[i], &y[j])).abs() < 1e-9);
        }
    }
}

#[test]
fn dim_loss_matches_an_oracle_for_one_layer() {
    // One layer, single target dim: MSE of truncated rows against the joint
    // PCA projection plus KL between teacher and student similarity rows.
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (b, d, k, tau) = (4, 6, 2, 0.2);
    let q = random_mat(&mut rng, b, d);
    let dd = random_mat(&mut rng, b, d);
    let cfg = ObjectiveConfig {
        kind: ObjectiveKind::V2,
        dims: vec![k],
        target_dim: k,
        temperature: tau,
        ..Default::default()
    };
    let mut g = Graph::new();
    let qv = g.param(tensor(&q)).unwrap();
    let dv = g.param(tensor(&dd)).unwrap();
    let loss = v2_dim_loss(
        &mut g,
        &LayerEmbeddings { layers: vec![qv] },
        &LayerEmbeddings { layers: vec![dv] },
        &cfg,
    )
    .unwrap();

    let joint: Mat = q.iter().chain(&dd).cloned().collect();
    let (mean, cov) = covariance(&joint);
    let axes: Vec<Vec<f64>> = jacobi_eigen(&cov)[..k]
        .iter()
        .map(|(_, v)| {
            let pivot = v.iter().cloned().fold(0.0f64, |b, x| if x.abs() > b.abs() { x } else { b });
            v.iter().map(|x| x * pivot.signum()).collect()
        })
        .collect();
    let proj = |r: &Vec<f64>| -> Vec<f64> {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(a, m)| a - m).collect();
        axes.iter().map(|ax| dot(&c, ax)).collect()
    };
    let (yq, yd): (Mat, Mat) = (q.iter().map(proj).collect(), dd.iter().map(proj).collect());
    let mse: f64 = q
        .iter()
        .chain(&dd)
        .zip(yq.iter().chain(&yd))
        .flat_map(|(s, t)| (0..k).map(move |j| (s[j] - t[j]).powi(2)))
        .sum::<f64>()
        / (2 * b * k) as f64;
    let unit = |v: &[f64]| {
        let n = dot(v, v).sqrt();
        v.iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let softmax_row = |qs: &Mat, ds: &Mat, i: usize| -> Vec<f64> {
        let s: Vec<f64> = ds.iter().map(|dr| dot(&unit(&qs[i][..k]), &unit(&dr[..k])) / tau).collect();
        let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = s.iter().map(|x| (x - m).exp()).sum();
        s.iter().map(|x| (x - m).exp() / z).collect()
    };
    let kl: f64 = (0..b)
        .map(|i| {
            let p = softmax_row(&yq, &yd, i);
            let r = softmax_row(&q, &dd, i);
            p.iter().zip(&r).map(|(a, c)| a * (a / c).ln()).sum::<f64>()
        })
        .sum::<f64>()
        / b as f64;
    assert!((g.value(loss).item() - (mse + kl)).abs() < 1e-9, "{} vs {}", g.value(loss).item(), mse + kl);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projections_are_centred(rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 4), 3..12)) {
        let x = tensor(&rows);
        let k = 2.min(rows.len() - 1);
        if let Ok(basis) = fit(&x, k) {
            let y = project(&x, &basis).unwrap();
            for j in 0..k {
                let m: f64 = (0..rows.len()).map(|i| y.get(i, j)).sum::<f64>() / rows.len() as f64;
                prop_assert!(m.abs() < 1e-9);
            }
        }
    }
}
