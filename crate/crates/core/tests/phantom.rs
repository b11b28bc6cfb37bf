use pin_core::phantom::{generate_phantom, render, Pose, PhantomConfig};
use pin_core::seeding::stream;
use pin_core::volumes::Volume;

fn hom_apply(m: &[[f64; 4]; 4], p: [f64; 3]) -> [f64; 3] {
    let h = [p[0], p[1], p[2], 1.0];
    [0, 1, 2].map(|i| (0..4).map(|k| m[i][k] * h[k]).sum())
}

fn hom_mul(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut out = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            out[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

#[test]
fn rotation_about_z_matches_homogeneous_oracle() {
    let cfg = PhantomConfig { noise_sigma: 0.0, ..PhantomConfig::default() };
    let pose = Pose { rotation_deg: [0.0, 0.0, 10.0], scale: [1.0; 3], translation: [1.5, -2.0, 0.5] };
    let (_, landmarks) = render(&cfg, &pose, &mut stream(0, 0)).unwrap();

    let c = cfg.centre();
    let t = pose.translation;
    let (s, co) = 10f64.to_radians().sin_cos();
    let shift = [[1.0, 0.0, 0.0, c[0] + t[0]], [0.0, 1.0, 0.0, c[1] + t[1]], [0.0, 0.0, 1.0, c[2] + t[2]], [0.0, 0.0, 0.0, 1.0]];
    let rot = [[co, -s, 0.0, 0.0], [s, co, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
    let m = hom_mul(&shift, &rot);
    for (got, canon) in landmarks.points().iter().zip(cfg.canonical_landmarks()) {
        let want = hom_apply(&m, canon);
        for a in 0..3 {
            assert!((got[a] - want[a]).abs() < 1e-9, "{got:?} vs {want:?}");
        }
    }
}

/// Integer local maximum near `p`, refined per axis by a three-point parabola.
fn fitted_peak(v: &Volume, p: [f64; 3]) -> [f64; 3] {
    let [nx, ny, nz] = v.dims();
    let mut best = [p[0].round() as usize, p[1].round() as usize, p[2].round() as usize];
    loop {
        let mut next = best;
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let q = [best[0] as i64 + dx, best[1] as i64 + dy, best[2] as i64 + dz];
                    if q[0] < 1 || q[1] < 1 || q[2] < 1 || q[0] >= nx as i64 - 1 || q[1] >= ny as i64 - 1 || q[2] >= nz as i64 - 1 {
                        continue;
                    }
                    let q = q.map(|c| c as usize);
                    if v.get(q[0], q[1], q[2]) > v.get(next[0], next[1], next[2]) {
                        next = q;
                    }
                }
            }
        }
        if next == best {
            break;
        }
        best = next;
    }
    let at = |d: [i64; 3]| {
        v.get((best[0] as i64 + d[0]) as usize, (best[1] as i64 + d[1]) as usize, (best[2] as i64 + d[2]) as usize) as f64
    };
    let mut out = [0.0; 3];
    for a in 0..3 {
        let mut lo = [0; 3];
        let mut hi = [0; 3];
        lo[a] = -1;
        hi[a] = 1;
        let (fm, f0, fp) = (at(lo), at([0; 3]), at(hi));
        let denom = fm - 2.0 * f0 + fp;
        let offset = if denom < 0.0 { 0.5 * (fm - fp) / denom } else { 0.0 };
        out[a] = best[a] as f64 + offset;
    }
    out
}

#[test]
fn blob_peaks_coincide_with_landmarks() {
    let cfg = PhantomConfig { noise_sigma: 0.0, ..PhantomConfig::default() };
    for index in 0..4 {
        let (volume, landmarks) = generate_phantom(&cfg, index).unwrap();
        for (l, p) in landmarks.points().iter().enumerate() {
            let peak = fitted_peak(&volume, *p);
            let dist = (0..3).map(|a| (peak[a] - p[a]).powi(2)).sum::<f64>().sqrt();
            assert!(dist < 0.5, "phantom {index} landmark {l}: peak {peak:?} vs {p:?}");
        }
    }
}

#[test]
fn regeneration_is_bit_identical() {
    let cfg = PhantomConfig::default();
    let (v1, l1) = generate_phantom(&cfg, 7).unwrap();
    let (v2, l2) = generate_phantom(&cfg, 7).unwrap();
    assert_eq!(v1.to_bytes(), v2.to_bytes());
    assert_eq!(l1.points(), l2.points());
}
