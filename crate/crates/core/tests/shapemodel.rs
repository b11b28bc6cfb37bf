use nalgebra::{DMatrix, SymmetricEigen};
use pin_core::phantom::{generate_phantom, posed_landmarks, Pose, PhantomConfig};
use pin_core::seeding::stream;
use pin_core::shapemodel::{covariance, spectrum, ShapeModel};
use proptest::prelude::*;
use rand::Rng;

fn random_shapes(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, 0);
    // Correlated coordinates with distinct variances along random directions.
    let basis: Vec<Vec<f64>> = (0..dim).map(|_| (0..dim).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
    (0..n)
        .map(|_| {
            let mut x: Vec<f64> = (0..dim).map(|i| i as f64).collect();
            for (k, dir) in basis.iter().enumerate() {
                let c = (rng.random::<f64>() - 0.5) * 4.0 / (1.0 + k as f64);
                for (xi, di) in x.iter_mut().zip(dir) {
                    *xi += c * di;
                }
            }
            x
        })
        .collect()
}

/// Covariance and eigen-decomposition computed independently of the crate.
fn oracle(shapes: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let n = shapes.len();
    let dim = shapes[0].len();
    let mean: Vec<f64> = (0..dim).map(|i| shapes.iter().map(|s| s[i]).sum::<f64>() / n as f64).collect();
    let centred = DMatrix::from_fn(n, dim, |r, c| shapes[r][c] - mean[c]);
    let cov = centred.transpose() * &centred / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|a, b| eig.eigenvalues[*b].total_cmp(&eig.eigenvalues[*a]));
    let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vecs = DMatrix::from_fn(dim, dim, |r, c| eig.eigenvectors[(r, order[c])]);
    (vals, vecs)
}

#[test]
fn eigenpairs_match_dense_oracle() {
    for (n, dim, seed) in [(40, 30, 1), (25, 12, 2), (60, 30, 3), (8, 6, 4)] {
        let shapes = random_shapes(n, dim, seed);
        let spec = spectrum(&shapes).unwrap();
        let (vals, vecs) = oracle(&shapes);
        let rank = (n - 1).min(dim);
        for k in 0..dim {
            assert!((spec.eigenvalues[k] - vals[k].max(0.0)).abs() < 1e-8, "{n}x{dim} eigenvalue {k}");
        }
        for k in 0..rank {
            let ours = spec.eigenvector(k);
            let dot: f64 = ours.iter().enumerate().map(|(i, v)| v * vecs[(i, k)]).sum();
            let sign = dot.signum();
            for i in 0..dim {
                assert!((ours[i] - sign * vecs[(i, k)]).abs() < 1e-8, "{n}x{dim} vector {k}");
            }
        }
    }
}

#[test]
fn covariance_uses_unbiased_normalisation() {
    let shapes = vec![vec![0.0, 1.0, 2.0], vec![2.0, 1.0, 0.0], vec![1.0, 4.0, 1.0]];
    let (mean, cov) = covariance(&shapes).unwrap();
    assert_eq!(mean, vec![1.0, 2.0, 1.0]);
    assert!((cov[0] - 1.0).abs() < 1e-15);
    assert!((cov[4] - 3.0).abs() < 1e-15);
    assert!((cov[2] + 1.0).abs() < 1e-15);
}

#[test]
fn residual_equals_discarded_variance() {
    for (seed, threshold) in [(5, 0.9), (6, 0.99), (7, 0.5)] {
        let shapes = random_shapes(50, 24, seed);
        let spec = spectrum(&shapes).unwrap();
        let model = ShapeModel::fit(&shapes, threshold).unwrap();
        let discarded: f64 = spec.eigenvalues[model.n_b()..].iter().sum();
        let residual = model.reconstruction_residual(&shapes).unwrap();
        assert!(((residual - discarded) / discarded).abs() < 1e-6, "{residual} vs {discarded}");
        let total: f64 = spec.eigenvalues.iter().sum();
        let kept: f64 = model.eigenvalues().iter().sum();
        assert!(kept / total >= threshold);
        if model.n_b() > 1 {
            let fewer: f64 = model.eigenvalues()[..model.n_b() - 1].iter().sum();
            assert!(fewer / total < threshold);
        }
    }
}

#[test]
fn projections_preserve_length() {
    // Fewer shapes than coordinates, so the kept modes span every centred shape.
    let shapes = random_shapes(10, 18, 8);
    let model = ShapeModel::fit(&shapes, 1.0).unwrap();
    for s in &shapes {
        let b = model.to_b(s).unwrap();
        let centred: f64 = s.iter().zip(model.mean()).map(|(a, m)| (a - m).powi(2)).sum();
        let norm: f64 = b.iter().map(|v| v * v).sum();
        assert!((centred - norm).abs() < 1e-9 * centred.max(1.0));
    }
}

#[test]
fn affine_phantom_family_is_low_rank() {
    let cfg = PhantomConfig::default();
    let shapes: Vec<Vec<f64>> = (0..105).map(|i| generate_phantom(&cfg, i).unwrap().1.flatten()).collect();
    let model = ShapeModel::fit(&shapes, 0.995).unwrap();
    assert!(model.n_b() <= 12, "n_b = {}", model.n_b());
    assert_eq!(model.n_l(), 10);
}

#[test]
fn posed_landmarks_follow_the_pose() {
    let cfg = PhantomConfig::default();
    let id = posed_landmarks(&cfg, &Pose::identity());
    let centre = cfg.centre();
    for (p, c) in id.iter().zip(cfg.canonical_landmarks()) {
        for a in 0..3 {
            assert!((p[a] - (centre[a] + c[a])).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn b_round_trip_is_identity(seed in 0u64..500, scale in 0.01f64..3.0) {
        let shapes = random_shapes(20, 15, 100 + seed % 7);
        let model = ShapeModel::fit(&shapes, 0.99).unwrap();
        let mut rng = stream(seed, 1);
        let b: Vec<f64> = model.eigenvalues().iter().map(|l| scale * l.sqrt() * (rng.random::<f64>() - 0.5)).collect();
        let back = model.to_b(&model.to_x(&b).unwrap()).unwrap();
        for (x, y) in b.iter().zip(&back) {
            prop_assert!((x - y).abs() < 1e-10);
        }
    }
}
