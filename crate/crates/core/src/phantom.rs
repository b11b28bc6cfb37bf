//! Seeded synthetic phantoms with analytically known landmarks.
//!
//! The canonical scene lives in a centred frame (voxels, defined for a 64³ grid
//! and scaled per axis for other sizes): an ellipsoidal shell with a faint
//! interior fill and one Gaussian blob per landmark, each with its own width.
//! A random pose `x = centre + t + R·S·p` maps the scene into the grid; each
//! voxel is rendered by pulling its centre back through the inverse pose.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataset::{Manifest, ManifestEntry, Split};
use crate::seeding::{purpose, splitmix64, stream};
use crate::volumes::{write_landmarks, write_volume, LandmarkSet, Volume, VolumeError};

/// Canonical landmark offsets from the volume centre on a 64³ grid. No two share
/// an axis-aligned plane and the nearest-neighbour distance is above 10 voxels.
pub const CANONICAL_LANDMARKS: [[f64; 3]; 10] = [
    [-0.5, 12.0, -1.5],
    [-12.0, -4.0, 7.5],
    [14.0, 1.0, 0.5],
    [5.0, -14.0, -5.0],
    [1.0, 11.5, 9.5],
    [-2.5, 7.5, -12.0],
    [5.5, -13.0, 5.5],
    [8.0, -2.5, -8.5],
    [-10.5, 3.5, -4.5],
    [-1.0, -1.0, 6.0],
];

/// Blob widths (voxels), unique per landmark; wider blobs sit at the more isolated points.
pub const BLOB_SIGMAS: [f64; 10] = [2.333, 3.167, 2.889, 1.5, 2.056, 3.722, 1.778, 2.611, 4.0, 3.444];

const SHELL_SEMI_AXES: [f64; 3] = [26.0, 23.0, 25.0];
const SHELL_WIDTH: f64 = 1.5;
const SHELL_INTENSITY: f64 = 0.6;
const FILL_INTENSITY: f64 = 0.2;
const BLOB_AMPLITUDE: f64 = 0.75;
const REFERENCE_EXTENT: f64 = 64.0;
/// Minimum distance (voxels) between a landmark and the grid boundary.
pub const LANDMARK_MARGIN: f64 = 2.0;
const MAX_POSE_REJECTIONS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    Config(String),
    #[error("pose rejected {0} times: landmarks left the volume")]
    PoseRejected(usize),
    #[error("dataset needs at least 2 volumes to split, got {0}")]
    TooFewVolumes(usize),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("I/O error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: f32,
    pub n_landmarks: usize,
    /// Per-axis translation drawn from `±translation_range` voxels.
    pub translation_range: f64,
    /// Per-axis rotation drawn from `±rotation_range_deg` degrees.
    pub rotation_range_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing: 0.5,
            n_landmarks: 10,
            translation_range: 8.0,
            rotation_range_deg: 20.0,
            scale_min: 0.85,
            scale_max: 1.15,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<(), PhantomError> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(PhantomError::Config(format!("dims must be at least 8 per axis, got {:?}", self.dims)));
        }
        if !(self.spacing > 0.0 && self.spacing.is_finite()) {
            return Err(PhantomError::Config(format!("spacing must be positive, got {}", self.spacing)));
        }
        if self.n_landmarks == 0 || self.n_landmarks > CANONICAL_LANDMARKS.len() {
            return Err(PhantomError::Config(format!(
                "n_landmarks must be in 1..={}, got {}",
                CANONICAL_LANDMARKS.len(),
                self.n_landmarks
            )));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(PhantomError::Config(format!(
                "scale range must satisfy 0 < min <= max, got {}..{}",
                self.scale_min, self.scale_max
            )));
        }
        if self.translation_range < 0.0 || self.rotation_range_deg < 0.0 || self.noise_sigma < 0.0 {
            return Err(PhantomError::Config("ranges and noise must be non-negative".into()));
        }
        Ok(())
    }

    fn axis_scale(&self) -> [f64; 3] {
        self.dims.map(|d| d as f64 / REFERENCE_EXTENT)
    }

    /// Canonical landmark offsets for this grid size.
    pub fn canonical_landmarks(&self) -> Vec<[f64; 3]> {
        let s = self.axis_scale();
        CANONICAL_LANDMARKS[..self.n_landmarks]
            .iter()
            .map(|p| [p[0] * s[0], p[1] * s[1], p[2] * s[2]])
            .collect()
    }

    pub fn centre(&self) -> [f64; 3] {
        self.dims.map(|d| (d as f64 - 1.0) / 2.0)
    }
}

/// Similarity-plus-anisotropic-scale pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    /// Rotations about x, y, z in degrees, applied x first.
    pub rotation_deg: [f64; 3],
    pub scale: [f64; 3],
    pub translation: [f64; 3],
}

impl Pose {
    pub fn identity() -> Self {
        Self { rotation_deg: [0.0; 3], scale: [1.0; 3], translation: [0.0; 3] }
    }

    /// Linear part `Rz · Ry · Rx · diag(scale)`.
    pub fn linear(&self) -> [[f64; 3]; 3] {
        let [a, b, c] = self.rotation_deg.map(f64::to_radians);
        let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
        let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
        let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
        let r = matmul3(&rz, &matmul3(&ry, &rx));
        let mut m = r;
        for row in &mut m {
            for (j, v) in row.iter_mut().enumerate() {
                *v *= self.scale[j];
            }
        }
        m
    }

    /// Inverse of the linear part: `diag(1/scale) · Rᵀ`.
    fn inverse_linear(&self) -> [[f64; 3]; 3] {
        let unscaled = Pose { scale: [1.0; 3], ..*self }.linear();
        let mut inv = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                inv[i][j] = unscaled[j][i] / self.scale[i];
            }
        }
        inv
    }

    fn sample<R: Rng + ?Sized>(cfg: &PhantomConfig, rng: &mut R) -> Self {
        let mut uniform = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let rot = cfg.rotation_range_deg;
        let tr = cfg.translation_range;
        let rotation_deg = [uniform(-rot, rot), uniform(-rot, rot), uniform(-rot, rot)];
        let scale = [
            uniform(cfg.scale_min, cfg.scale_max),
            uniform(cfg.scale_min, cfg.scale_max),
            uniform(cfg.scale_min, cfg.scale_max),
        ];
        let translation = [uniform(-tr, tr), uniform(-tr, tr), uniform(-tr, tr)];
        Self { rotation_deg, scale, translation }
    }
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

fn apply(m: &[[f64; 3]; 3], p: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2])
}

/// Landmark positions (voxel coordinates) of the canonical scene under `pose`.
pub fn posed_landmarks(cfg: &PhantomConfig, pose: &Pose) -> Vec<[f64; 3]> {
    let m = pose.linear();
    let c = cfg.centre();
    cfg.canonical_landmarks()
        .into_iter()
        .map(|p| {
            let q = apply(&m, p);
            [0, 1, 2].map(|i| c[i] + pose.translation[i] + q[i])
        })
        .collect()
}

fn inside_margin(cfg: &PhantomConfig, points: &[[f64; 3]]) -> bool {
    points.iter().all(|p| {
        (0..3).all(|i| p[i] >= LANDMARK_MARGIN && p[i] <= cfg.dims[i] as f64 - 1.0 - LANDMARK_MARGIN)
    })
}

/// Renders the scene under `pose` with additive Gaussian noise drawn from `rng`.
pub fn render<R: Rng + ?Sized>(
    cfg: &PhantomConfig,
    pose: &Pose,
    rng: &mut R,
) -> Result<(Volume, LandmarkSet), PhantomError> {
    cfg.validate()?;
    let axis = cfg.axis_scale();
    let semi = [0, 1, 2].map(|i| SHELL_SEMI_AXES[i] * axis[i]);
    let mean_radius = (semi[0] + semi[1] + semi[2]) / 3.0;
    let size_scale = axis.iter().copied().fold(f64::INFINITY, f64::min);
    let canon = cfg.canonical_landmarks();
    let sigmas: Vec<f64> = BLOB_SIGMAS[..cfg.n_landmarks].iter().map(|s| s * size_scale).collect();
    let inv = pose.inverse_linear();
    let centre = cfg.centre();
    let [nx, ny, nz] = cfg.dims;

    let mut data = Vec::with_capacity(nx * ny * nz);
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let rel = [
                    x as f64 - centre[0] - pose.translation[0],
                    y as f64 - centre[1] - pose.translation[1],
                    z as f64 - centre[2] - pose.translation[2],
                ];
                let q = apply(&inv, rel);
                let r = ((q[0] / semi[0]).powi(2) + (q[1] / semi[1]).powi(2) + (q[2] / semi[2]).powi(2)).sqrt();
                let surface = (r - 1.0) * mean_radius;
                let mut v = SHELL_INTENSITY * (-surface * surface / (2.0 * SHELL_WIDTH * SHELL_WIDTH)).exp();
                v += FILL_INTENSITY / (1.0 + (surface / 0.5).exp());
                for (p, s) in canon.iter().zip(&sigmas) {
                    let d2 = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2);
                    if d2 < 36.0 * s * s {
                        v += BLOB_AMPLITUDE * (-d2 / (2.0 * s * s)).exp();
                    }
                }
                data.push(v);
            }
        }
    }
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated");
        for v in &mut data {
            *v += normal.sample(rng);
        }
    }
    let intensities = data.into_iter().map(|v| v.clamp(0.0, 1.0) as f32).collect();
    let volume = Volume::new(cfg.dims, [cfg.spacing; 3], intensities)?;
    let landmarks = LandmarkSet::new(posed_landmarks(cfg, pose))?;
    Ok((volume, landmarks))
}

/// Phantom number `index` of the family defined by `cfg.seed`.
pub fn generate_phantom(cfg: &PhantomConfig, index: u64) -> Result<(Volume, LandmarkSet), PhantomError> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, purpose::PHANTOM | index);
    for _ in 0..MAX_POSE_REJECTIONS {
        let pose = Pose::sample(cfg, &mut rng);
        if inside_margin(cfg, &posed_landmarks(cfg, &pose)) {
            return render(cfg, &pose, &mut rng);
        }
    }
    Err(PhantomError::PoseRejected(MAX_POSE_REJECTIONS))
}

/// Train/test assignment: indices ordered by a seeded hash, first 70% train.
pub fn split_assignment(seed: u64, count: usize) -> Result<Vec<Split>, PhantomError> {
    if count < 2 {
        return Err(PhantomError::TooFewVolumes(count));
    }
    let n_train = ((count as f64 * 0.7).round() as usize).clamp(1, count - 1);
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by_key(|&i| (splitmix64(seed ^ purpose::SPLIT ^ splitmix64(i as u64)), i));
    let mut splits = vec![Split::Test; count];
    for &i in &order[..n_train] {
        splits[i] = Split::Train;
    }
    Ok(splits)
}

/// Writes `count` phantoms plus `manifest.csv` into `out_dir`.
pub fn generate_dataset(cfg: &PhantomConfig, count: usize, out_dir: &Path) -> Result<Manifest, PhantomError> {
    let splits = split_assignment(cfg.seed, count)?;
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| PhantomError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let generated: Vec<_> = (0..count)
        .into_par_iter()
        .map(|i| generate_phantom(cfg, i as u64))
        .collect::<Result<_, _>>()?;
    let mut entries = Vec::with_capacity(count);
    for (i, ((volume, landmarks), split)) in generated.into_iter().zip(splits).enumerate() {
        let volume_path = PathBuf::from(format!("vol_{i:04}.pinv"));
        let landmarks_path = PathBuf::from(format!("vol_{i:04}_landmarks.csv"));
        write_volume(&volume, &out_dir.join(&volume_path))?;
        write_landmarks(&landmarks, &out_dir.join(&landmarks_path))?;
        entries.push(ManifestEntry { index: i, volume_path, landmarks_path, split });
    }
    let manifest = Manifest::new(out_dir.to_path_buf(), entries);
    let manifest_path = out_dir.join("manifest.csv");
    fs::write(&manifest_path, manifest.to_csv()).map_err(io(&manifest_path))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig { dims: [32, 32, 32], seed: 11, ..Default::default() }
    }

    #[test]
    fn same_seed_and_index_is_bit_identical() {
        let cfg = small();
        let (v1, l1) = generate_phantom(&cfg, 3).unwrap();
        let (v2, l2) = generate_phantom(&cfg, 3).unwrap();
        assert_eq!(v1.to_bytes(), v2.to_bytes());
        assert_eq!(l1, l2);
        let (v3, _) = generate_phantom(&cfg, 4).unwrap();
        assert_ne!(v1.to_bytes(), v3.to_bytes());
    }

    #[test]
    fn identity_pose_gives_canonical_landmarks() {
        let cfg = PhantomConfig {
            translation_range: 0.0,
            rotation_range_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let (_, lm) = generate_phantom(&cfg, 0).unwrap();
        for (p, c) in lm.points().iter().zip(CANONICAL_LANDMARKS) {
            for k in 0..3 {
                assert_eq!(p[k], 31.5 + c[k]);
            }
        }
    }

    #[test]
    fn landmarks_keep_margin() {
        let cfg = PhantomConfig { seed: 5, ..Default::default() };
        for i in 0..20 {
            let (_, lm) = generate_phantom(&cfg, i).unwrap();
            assert!(inside_margin(&cfg, lm.points()));
        }
    }

    #[test]
    fn impossible_pose_is_rejected() {
        let cfg = PhantomConfig { dims: [16, 16, 16], translation_range: 200.0, ..Default::default() };
        assert!(matches!(generate_phantom(&cfg, 0), Err(PhantomError::PoseRejected(100))));
    }

    #[test]
    fn split_is_seventy_thirty() {
        let s = split_assignment(1, 10).unwrap();
        assert_eq!(s.iter().filter(|&&x| x == Split::Train).count(), 7);
        assert_eq!(split_assignment(1, 150).unwrap().iter().filter(|&&x| x == Split::Test).count(), 45);
        assert!(matches!(split_assignment(1, 1), Err(PhantomError::TooFewVolumes(1))));
    }

    #[test]
    fn intensities_are_clipped() {
        let (v, _) = generate_phantom(&small(), 0).unwrap();
        assert!(v.intensities().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}
