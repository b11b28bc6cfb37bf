use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::micrograd::Tensor;
use crate::patches::{extract_patch, extract_patch_block, PatchStack};
use crate::shapemodel::ShapeModel;
use crate::volumes::{LandmarkSet, Volume};

use super::{gt_label, PinNetError};

/// `(I(V, x, s), d_gt, P_gt)` plus the sampled position it was taken at
/// (voxel coordinates for single-landmark, `b` for multi-landmark).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub patch: PatchStack,
    pub position: Vec<f64>,
    pub d_gt: Vec<f64>,
    pub p_gt: Vec<f64>,
}

impl TrainingSample {
    fn build(patch: PatchStack, position: Vec<f64>, target: &[f64]) -> Self {
        let d_gt: Vec<f64> = target.iter().zip(&position).map(|(t, x)| t - x).collect();
        let mut p_gt = vec![0.0; 2 * d_gt.len()];
        p_gt[gt_label(&d_gt)] = 1.0;
        Self { patch, position, d_gt, p_gt }
    }

    pub fn class(&self) -> usize {
        gt_label(&self.d_gt)
    }
}

/// Draws `x` until `x + (target - x)` reproduces `target` bit-for-bit, so a
/// perfect displacement lands exactly on the target.
fn exact_draw(target: f64, mut draw: impl FnMut() -> f64) -> f64 {
    loop {
        let x = draw();
        if x + (target - x) == target {
            return x;
        }
    }
}

/// Position drawn uniformly over the volume's voxel-coordinate box.
pub fn make_sample_single<R: Rng + ?Sized>(
    volume: &Volume,
    x_gt: [f64; 3],
    s: usize,
    rng: &mut R,
) -> Result<TrainingSample, PinNetError> {
    let dims = volume.dims();
    let mut x = [0.0; 3];
    for a in 0..3 {
        let hi = (dims[a] - 1) as f64;
        x[a] = exact_draw(x_gt[a], || rng.random::<f64>() * hi);
    }
    let patch = extract_patch(volume, x, s)?;
    Ok(TrainingSample::build(patch, x.to_vec(), &x_gt))
}

/// Shape parameters drawn per mode from Normal(0, multiplier·√λ) truncated at ±3√λ.
pub fn sample_b<R: Rng + ?Sized>(model: &ShapeModel, multiplier: f64, rng: &mut R) -> Vec<f64> {
    sample_b_towards(model, multiplier, None, rng)
}

fn sample_b_towards<R: Rng + ?Sized>(
    model: &ShapeModel,
    multiplier: f64,
    target: Option<&[f64]>,
    rng: &mut R,
) -> Vec<f64> {
    model
        .eigenvalues()
        .iter()
        .enumerate()
        .map(|(k, &lambda)| {
            let sd = lambda.max(0.0).sqrt();
            if sd == 0.0 {
                return 0.0;
            }
            let normal = Normal::new(0.0, multiplier * sd).expect("finite positive sd");
            let mut draw = || loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 3.0 * sd {
                    break v;
                }
            };
            match target {
                Some(t) => exact_draw(t[k], draw),
                None => draw(),
            }
        })
        .collect()
}

/// Shape-space sample: patch block at `to_x(b)`, target `b_gt - b`.
pub fn make_sample_multi<R: Rng + ?Sized>(
    volume: &Volume,
    landmarks: &LandmarkSet,
    model: &ShapeModel,
    s: usize,
    multiplier: f64,
    rng: &mut R,
) -> Result<TrainingSample, PinNetError> {
    let b_gt = model.to_b(&landmarks.flatten())?;
    let b = sample_b_towards(model, multiplier, Some(&b_gt), rng);
    make_sample_multi_at(volume, model, &b_gt, b, s)
}

/// Multi-landmark sample at a given `b`.
pub fn make_sample_multi_at(
    volume: &Volume,
    model: &ShapeModel,
    b_gt: &[f64],
    b: Vec<f64>,
    s: usize,
) -> Result<TrainingSample, PinNetError> {
    let x = model.to_x(&b)?;
    let points: Vec<[f64; 3]> = x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect();
    let patch = extract_patch_block(volume, &points, s)?;
    Ok(TrainingSample::build(patch, b, b_gt))
}

/// `[n, s, s, c]` input tensor for a batch of patches.
pub fn stack_batch<'a>(patches: impl IntoIterator<Item = &'a PatchStack>) -> Result<Tensor<f32>, PinNetError> {
    let mut data = Vec::new();
    let mut shape = None;
    let mut n = 0;
    for p in patches {
        let this = (p.side(), p.channels());
        if *shape.get_or_insert(this) != this {
            return Err(PinNetError::Config("patches in a batch differ in size".into()));
        }
        data.extend_from_slice(p.data());
        n += 1;
    }
    let (s, c) = shape.ok_or_else(|| PinNetError::Config("empty batch".into()))?;
    Ok(Tensor::new(vec![n, s, s, c], data)?)
}
