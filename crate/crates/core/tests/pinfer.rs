use pin_core::phantom::{generate_phantom, PhantomConfig};
use pin_core::pinfer::*;
use pin_core::pinnet::NetworkOutput;
use pin_core::seeding::stream;
use pin_core::shapemodel::ShapeModel;
use pin_core::volumes::Volume;

fn out(d: Vec<f64>, p: Vec<f64>) -> NetworkOutput {
    NetworkOutput { d, p }
}

#[test]
fn rule_examples() {
    let p = vec![0.1, 0.1, 0.1, 0.5, 0.1, 0.1];
    assert_eq!(apply_rule(Rule::A, &[5.0, 5.0, 5.0], &out(vec![0.0; 3], p)), vec![5.0, 4.0, 5.0]);
    let uniform = vec![1.0 / 6.0; 6];
    assert_eq!(apply_rule(Rule::B, &[0.0; 3], &out(vec![1.0, -2.0, 0.5], uniform)), vec![1.0, -2.0, 0.5]);
    let p = vec![0.7, 0.1, 0.05, 0.05, 0.05, 0.05];
    let step = apply_rule(Rule::C, &[0.0; 3], &out(vec![2.0, -4.0, 6.0], p));
    for (a, e) in step.iter().zip([0.7 * 2.0, 0.05 * -4.0, 0.05 * 6.0]) {
        assert_eq!(*a, e);
    }
    assert!((step[0] - 1.4).abs() < 1e-15 && (step[1] + 0.2).abs() < 1e-15 && (step[2] - 0.3).abs() < 1e-15);
}

#[test]
fn rule_a_step_has_unit_infinity_norm() {
    let mut rng = stream(1, 1);
    use rand::Rng;
    for _ in 0..1000 {
        let p: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
        let x = [rng.random_range(0..9) as f64, 3.0, -2.0];
        let next = apply_rule(Rule::A, &x, &out(vec![0.0; 3], p));
        let diffs: Vec<f64> = next.iter().zip(x).map(|(a, b)| a - b).collect();
        assert_eq!(diffs.iter().filter(|v| **v != 0.0).count(), 1);
        assert_eq!(diffs.iter().fold(0.0f64, |m, v| m.max(v.abs())), 1.0);
    }
}

#[test]
fn rule_c_step_bounded_by_regression() {
    let mut rng = stream(2, 1);
    use rand::Rng;
    for _ in 0..1000 {
        let mut p: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
        let s: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= s);
        let d: Vec<f64> = (0..3).map(|_| rng.random::<f64>() * 20.0 - 10.0).collect();
        let next = apply_rule(Rule::C, &[0.0; 3], &out(d.clone(), p));
        for (a, b) in next.iter().zip(&d) {
            assert!(a.abs() <= b.abs());
        }
    }
}

#[test]
fn nineteen_starts() {
    let pts = init_points_single([64, 64, 64]);
    assert_eq!(pts.len(), 19);
    assert_eq!(pts[0], [32.0, 32.0, 32.0]);
    assert!(pts.contains(&[48.0, 32.0, 32.0]));
    assert!(pts.contains(&[16.0, 48.0, 32.0]));
    for dims in [[4, 4, 4], [5, 9, 4], [64, 40, 17], [101, 7, 33]] {
        let pts = init_points_single(dims);
        assert_eq!(pts.len(), 19);
        for (i, p) in pts.iter().enumerate() {
            for a in 0..3 {
                assert!(p[a] >= 0.0 && p[a] <= (dims[a] - 1) as f64, "{dims:?} {p:?}");
            }
            assert!(pts[..i].iter().all(|q| q != p), "duplicate start {p:?} for {dims:?}");
        }
    }
}

fn shape_model() -> ShapeModel {
    let mut rng = stream(3, 0);
    use rand::Rng;
    let shapes: Vec<Vec<f64>> = (0..20)
        .map(|_| {
            let t = rng.random::<f64>() * 4.0;
            let u = rng.random::<f64>() * 2.0;
            vec![10.0 + t, 12.0 - u, 8.0, 20.0 + u, 14.0, 9.0 + t, 30.0, 11.0 + 0.5 * t, 16.0]
        })
        .collect();
    ShapeModel::fit(&shapes, 0.999).unwrap()
}

#[test]
fn multi_starts() {
    let m = shape_model();
    let mut rng = stream(4, 0);
    assert_eq!(init_b_multi(&m, 0, &mut rng), vec![vec![0.0; m.n_b()]]);
    for _ in 0..200 {
        let starts = init_b_multi(&m, 5, &mut rng);
        assert_eq!(starts.len(), 6);
        assert!(starts[0].iter().all(|v| *v == 0.0));
        for b in &starts {
            for (v, l) in b.iter().zip(m.eigenvalues()) {
                assert!(v.abs() <= 3.0 * l.sqrt());
            }
        }
    }
}

fn flat_volume(dims: [usize; 3]) -> Volume {
    Volume::new(dims, [1.0; 3], vec![0.0; dims.iter().product()]).unwrap()
}

/// Regression oracle with unit confidence on the direction of the true target.
struct Oracle {
    target: Vec<f64>,
}

impl Predictor for Oracle {
    fn predict(&self, _: &Volume, positions: &[Vec<f64>]) -> Result<Vec<NetworkOutput>, PinferError> {
        Ok(positions
            .iter()
            .map(|x| {
                let d: Vec<f64> = self.target.iter().zip(x).map(|(t, v)| t - v).collect();
                let mut p = vec![0.0; 2 * d.len()];
                for (i, v) in d.iter().enumerate() {
                    p[2 * i + usize::from(*v <= 0.0)] = 1.0;
                }
                NetworkOutput { d, p }
            })
            .collect())
    }
}

#[test]
fn perfect_regression_converges_in_one_iteration() {
    // Dyadic coordinates keep every subtraction and addition exact.
    let v = flat_volume([40, 30, 20]);
    let target = vec![17.375, 4.25, 11.0];
    for rule in [Rule::B, Rule::C] {
        let mut cfg = InferenceConfig::for_rule(rule);
        cfg.early_stop_epsilon = 0.0;
        cfg.iterations = 1;
        let r = infer_single(&Oracle { target: target.clone() }, &v, &cfg, None).unwrap();
        for f in &r.trajectories.finals {
            assert_eq!(f, &target, "rule {rule}");
        }
        assert_eq!(r.landmark.to_vec(), target);
    }
}

#[test]
fn perfect_regression_lands_within_rounding_for_any_target() {
    let v = flat_volume([40, 30, 20]);
    let target = vec![17.3, 4.1, 11.7];
    let mut cfg = InferenceConfig::for_rule(Rule::B);
    cfg.iterations = 1;
    let r = infer_single(&Oracle { target: target.clone() }, &v, &cfg, None).unwrap();
    for f in &r.trajectories.finals {
        for (a, t) in f.iter().zip(&target) {
            assert!((a - t).abs() <= 4.0 * f64::EPSILON * t.abs());
        }
    }
}

#[test]
fn early_stop_after_convergence() {
    let v = flat_volume([40, 30, 20]);
    let cfg = InferenceConfig::for_rule(Rule::B);
    let r = infer_single(&Oracle { target: vec![3.0, 4.0, 5.0] }, &v, &cfg, None).unwrap();
    assert!(r.trajectories.iterations_run.iter().all(|n| *n == 2));
}

/// Classification oracle: all mass on the signed axis of largest remaining displacement.
struct ClassOracle {
    target: Vec<f64>,
}

impl Predictor for ClassOracle {
    fn predict(&self, _: &Volume, positions: &[Vec<f64>]) -> Result<Vec<NetworkOutput>, PinferError> {
        Ok(positions
            .iter()
            .map(|x| {
                let d: Vec<f64> = self.target.iter().zip(x).map(|(t, v)| t - v).collect();
                let mut p = vec![0.0; 2 * d.len()];
                p[pin_core::pinnet::gt_label(&d)] = 1.0;
                NetworkOutput { d: vec![0.0; d.len()], p }
            })
            .collect())
    }
}

#[test]
fn rule_a_walks_one_voxel_per_iteration() {
    let v = flat_volume([64, 64, 64]);
    let start = vec![10.0, 32.0, 32.0];
    let target = vec![30.4, 32.0, 32.0];
    let oracle = ClassOracle { target: target.clone() };
    let mut pos = start.clone();
    let mut err = 20.4;
    let mut cfg = InferenceConfig::for_rule(Rule::A);
    cfg.iterations = 1;
    while err >= 1.0 {
        let r = iterate(&oracle, &v, vec![pos.clone()], &cfg, None, None).unwrap();
        assert_eq!(r.finals[0][0] - pos[0], 1.0);
        assert_eq!(&r.finals[0][1..], &pos[1..]);
        pos = r.finals[0].clone();
        let next = (target[0] - pos[0]).abs();
        assert!((err - next - 1.0).abs() < 1e-12);
        err = next;
    }
    assert!((err - 0.4).abs() < 1e-12);
}

#[test]
fn prediction_is_the_mean_of_the_finals() {
    let v = flat_volume([64, 64, 64]);
    let cfg = InferenceConfig { rule: Rule::A, iterations: 7, early_stop_epsilon: 0.0, n_random_inits_multi: 5, seed: 0 };
    let r = infer_single(&ClassOracle { target: vec![5.0, 60.0, 31.0] }, &v, &cfg, None).unwrap();
    for a in 0..3 {
        let mean = r.trajectories.finals.iter().map(|f| f[a]).sum::<f64>() / 19.0;
        assert!((r.landmark[a] - mean).abs() < 1e-9);
    }
}

#[test]
fn positions_are_clamped_inside_the_volume() {
    let v = flat_volume([16, 16, 16]);
    let cfg = InferenceConfig { rule: Rule::B, iterations: 3, early_stop_epsilon: 0.0, n_random_inits_multi: 0, seed: 0 };
    let r = infer_single(&Oracle { target: vec![-50.0, 8.0, 99.0] }, &v, &cfg, None).unwrap();
    for f in &r.trajectories.finals {
        assert_eq!(f, &vec![0.0, 8.0, 15.0]);
    }
}

struct Fixed {
    n_o: usize,
}

impl Predictor for Fixed {
    fn predict(&self, _: &Volume, positions: &[Vec<f64>]) -> Result<Vec<NetworkOutput>, PinferError> {
        Ok(positions.iter().map(|_| NetworkOutput { d: vec![0.0; self.n_o], p: vec![0.5 / self.n_o as f64; 2 * self.n_o] }).collect())
    }
}

struct Broken;

impl Predictor for Broken {
    fn predict(&self, _: &Volume, positions: &[Vec<f64>]) -> Result<Vec<NetworkOutput>, PinferError> {
        Ok(positions.iter().map(|_| NetworkOutput { d: vec![f64::NAN; 3], p: vec![1.0 / 6.0; 6] }).collect())
    }
}

#[test]
fn non_finite_position_names_the_start() {
    let v = flat_volume([16, 16, 16]);
    let err = infer_single(&Broken, &v, &InferenceConfig::for_rule(Rule::B), None).unwrap_err();
    assert!(matches!(err, PinferError::NonFinite { start: 0, iteration: 1 }), "{err}");
}

#[test]
fn multi_oracle_converges_in_shape_space() {
    let m = shape_model();
    let v = flat_volume([48, 48, 48]);
    let mut cfg = InferenceConfig::for_rule(Rule::C);
    cfg.iterations = 1;
    cfg.early_stop_epsilon = 0.0;
    // The mean shape: `b + (0 - b)` is exact for every start.
    let zero = vec![0.0; m.n_b()];
    let r = infer_multi(&Oracle { target: zero.clone() }, &m, &v, &cfg, None).unwrap();
    assert_eq!(r.trajectories.finals.len(), 6);
    for f in &r.trajectories.finals {
        assert_eq!(f, &zero);
    }
    assert_eq!(r.landmarks.flatten(), m.to_x(&zero).unwrap());

    let b_gt: Vec<f64> = m.eigenvalues().iter().map(|l| 0.7 * l.sqrt()).collect();
    let r = infer_multi(&Oracle { target: b_gt.clone() }, &m, &v, &cfg, None).unwrap();
    for f in &r.trajectories.finals {
        for (a, t) in f.iter().zip(&b_gt) {
            assert!((a - t).abs() <= 4.0 * f64::EPSILON * t.abs());
        }
    }
}

#[test]
fn multi_rejects_a_mismatched_predictor() {
    let m = shape_model();
    let v = flat_volume([48, 48, 48]);
    let wrong = Fixed { n_o: m.n_b() + 1 };
    let bad = infer_multi(&wrong, &m, &v, &InferenceConfig::for_rule(Rule::C), None);
    assert!(matches!(bad, Err(PinferError::Mismatch(_))));
}

#[test]
fn trajectory_log_has_one_row_per_update() {
    let (v, lm) = generate_phantom(&PhantomConfig { dims: [24, 24, 24], ..Default::default() }, 0).unwrap();
    let mut buf = Vec::new();
    let cfg = InferenceConfig { rule: Rule::A, iterations: 4, early_stop_epsilon: 0.0, n_random_inits_multi: 0, seed: 0 };
    let target = lm.points()[0].to_vec();
    infer_single(&ClassOracle { target }, &v, &cfg, Some(&mut buf)).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "start_index,iteration,p0,p1,p2,update_norm");
    assert_eq!(lines.len(), 1 + 19 * 4);
}
