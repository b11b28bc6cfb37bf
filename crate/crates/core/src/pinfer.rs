//! Iterative inference: update rules A/B/C, the start schemes for single- and
//! multi-landmark models, and the averaged convergence loop.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;

use crate::micrograd::Scalar;
use crate::patches::{extract_into, PatchError};
use crate::pinnet::{sample_b, Network, NetworkOutput, PinNetError};
use crate::seeding::{purpose, stream};
use crate::shapemodel::{ShapeModel, ShapeModelError};
use crate::volumes::{LandmarkSet, Volume, VolumeError};

#[derive(Debug, thiserror::Error)]
pub enum PinferError {
    #[error("start {start} reached a non-finite position at iteration {iteration}")]
    NonFinite { start: usize, iteration: usize },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Net(#[from] PinNetError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    ShapeModel(#[from] ShapeModelError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("writing trajectory: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Rule {
    /// One-voxel step along the most probable direction class.
    A,
    /// `x += d`.
    B,
    /// `x += P_max ⊙ d`.
    C,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::A => "A",
            Rule::B => "B",
            Rule::C => "C",
        })
    }
}

impl FromStr for Rule {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(Rule::A),
            "B" | "b" => Ok(Rule::B),
            "C" | "c" => Ok(Rule::C),
            other => Err(format!("unknown rule `{other}` (expected A, B or C)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceConfig {
    pub rule: Rule,
    pub iterations: usize,
    /// A start stops once its update norm falls below this; 0 disables.
    pub early_stop_epsilon: f64,
    pub n_random_inits_multi: usize,
    pub seed: u64,
}

impl InferenceConfig {
    /// T = 350 for Rule A, 10 otherwise; early stopping only for B and C.
    pub fn for_rule(rule: Rule) -> Self {
        let (iterations, early_stop_epsilon) = match rule {
            Rule::A => (350, 0.0),
            Rule::B | Rule::C => (10, 1e-3),
        };
        Self { rule, iterations, early_stop_epsilon, n_random_inits_multi: 5, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), PinferError> {
        if self.iterations == 0 {
            return Err(PinferError::Mismatch("inference needs at least one iteration".into()));
        }
        if !(self.early_stop_epsilon >= 0.0) {
            return Err(PinferError::Mismatch("early_stop_epsilon must be non-negative".into()));
        }
        Ok(())
    }
}

/// `P_max[i] = max(P[2i], P[2i+1])`.
pub fn pair_max(p: &[f64]) -> Vec<f64> {
    p.chunks(2).map(|c| c[0].max(c[1])).collect()
}

/// First index of the largest probability.
fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

pub fn apply_rule(rule: Rule, position: &[f64], output: &NetworkOutput) -> Vec<f64> {
    let mut next = position.to_vec();
    match rule {
        Rule::A => {
            let c = argmax(&output.p);
            next[c / 2] += if c % 2 == 0 { 1.0 } else { -1.0 };
        }
        Rule::B => {
            for (x, d) in next.iter_mut().zip(&output.d) {
                *x += d;
            }
        }
        Rule::C => {
            for ((x, d), w) in next.iter_mut().zip(&output.d).zip(pair_max(&output.p)) {
                *x += w * d;
            }
        }
    }
    next
}

/// Centre plus the 6 face and 12 edge directions of the 3×3×3 stencil,
/// each nonzero component a quarter of that axis's extent, clamped inside.
pub fn init_points_single(dims: [usize; 3]) -> Vec<[f64; 3]> {
    let centre = dims.map(|d| (d / 2) as f64);
    let mut out = vec![centre];
    for dz in -1i32..=1 {
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let nonzero = [dx, dy, dz].iter().filter(|v| **v != 0).count();
                if nonzero == 1 || nonzero == 2 {
                    let dir = [dx, dy, dz];
                    out.push(std::array::from_fn(|a| {
                        let p = centre[a] + dir[a] as f64 * dims[a] as f64 / 4.0;
                        p.clamp(0.0, (dims[a] - 1) as f64)
                    }));
                }
            }
        }
    }
    out
}

/// `b = 0` followed by `n_random` truncated-normal shape parameter vectors.
pub fn init_b_multi<R: Rng + ?Sized>(model: &ShapeModel, n_random: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; model.n_b()]];
    out.extend((0..n_random).map(|_| sample_b(model, 1.0, rng)));
    out
}

/// Maps a batch of positions in iteration space to network outputs.
pub trait Predictor {
    fn predict(&self, volume: &Volume, positions: &[Vec<f64>]) -> Result<Vec<NetworkOutput>, PinferError>;
}

/// A trained network plus the mapping from iteration space to patch centres.
pub struct NetworkPredictor<'a, T> {
    pub network: &'a Network<T>,
    /// `None`: positions are voxel coordinates of one landmark.
    /// `Some`: positions are shape parameters `b`.
    pub shape_model: Option<&'a ShapeModel>,
}

impl<T: Scalar> Predictor for NetworkPredictor<'_, T> {
    fn predict(&self, volume: &Volume, positions: &[Vec<f64>]) -> Result<Vec<NetworkOutput>, PinferError> {
        let cfg = self.network.config();
        let s = cfg.input_side;
        let per = s * s * cfg.input_channels;
        let mut buf = vec![0.0f32; positions.len() * per];
        for (pos, out) in positions.iter().zip(buf.chunks_mut(per)) {
            let points: Vec<[f64; 3]> = match self.shape_model {
                None => vec![[pos[0], pos[1], pos[2]]],
                Some(m) => m.to_x(pos)?.chunks(3).map(|c| [c[0], c[1], c[2]]).collect(),
            };
            extract_into(volume, &points, s, out)?;
        }
        let input = crate::micrograd::Tensor::new(vec![positions.len(), s, s, cfg.input_channels], buf)
            .map_err(PinNetError::from)?;
        Ok(self.network.predict(input.cast())?)
    }
}

/// Per-start final positions and their average.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectories {
    pub starts: Vec<Vec<f64>>,
    pub finals: Vec<Vec<f64>>,
    pub iterations_run: Vec<usize>,
    pub mean: Vec<f64>,
}

/// Runs every start in lockstep (one batched prediction per iteration) until
/// `T` iterations or its early stop. `bounds` clamps each coordinate after
/// every update. Trajectory rows go to `log` when given.
pub fn iterate<P: Predictor + ?Sized>(
    predictor: &P,
    volume: &Volume,
    starts: Vec<Vec<f64>>,
    config: &InferenceConfig,
    bounds: Option<&[f64]>,
    mut log: Option<&mut dyn Write>,
) -> Result<Trajectories, PinferError> {
    config.validate()?;
    let n_o = starts.first().map_or(0, Vec::len);
    if let Some(w) = log.as_deref_mut() {
        let cols: Vec<String> = (0..n_o).map(|i| format!("p{i}")).collect();
        writeln!(w, "start_index,iteration,{},update_norm", cols.join(","))?;
    }
    let mut current = starts.clone();
    let mut iterations_run = vec![0; starts.len()];
    let mut active: Vec<usize> = (0..starts.len()).collect();
    for t in 1..=config.iterations {
        if active.is_empty() {
            break;
        }
        let positions: Vec<Vec<f64>> = active.iter().map(|&i| current[i].clone()).collect();
        let outputs = predictor.predict(volume, &positions)?;
        if outputs.len() != positions.len() || outputs.iter().any(|o| o.d.len() != n_o || o.p.len() != 2 * n_o) {
            return Err(PinferError::Mismatch(format!(
                "predictor output does not match {} positions of dimension {n_o}",
                positions.len()
            )));
        }
        let mut still = Vec::with_capacity(active.len());
        for (&i, out) in active.iter().zip(&outputs) {
            let mut next = apply_rule(config.rule, &current[i], out);
            if let Some(hi) = bounds {
                for (x, h) in next.iter_mut().zip(hi) {
                    *x = x.clamp(0.0, *h);
                }
            }
            if next.iter().any(|v| !v.is_finite()) {
                return Err(PinferError::NonFinite { start: i, iteration: t });
            }
            let norm = next.iter().zip(&current[i]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if let Some(w) = log.as_deref_mut() {
                let cols: Vec<String> = next.iter().map(|v| v.to_string()).collect();
                writeln!(w, "{i},{t},{},{norm}", cols.join(","))?;
            }
            current[i] = next;
            iterations_run[i] = t;
            if !(config.early_stop_epsilon > 0.0 && norm < config.early_stop_epsilon) {
                still.push(i);
            }
        }
        active = still;
    }
    let mean = mean_of(&current);
    Ok(Trajectories { starts, finals: current, iterations_run, mean })
}

fn mean_of(rows: &[Vec<f64>]) -> Vec<f64> {
    let n = rows.len() as f64;
    let mut acc = vec![0.0; rows.first().map_or(0, Vec::len)];
    for r in rows {
        for (a, v) in acc.iter_mut().zip(r) {
            *a += v;
        }
    }
    acc.iter().map(|a| a / n).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingleInference {
    pub landmark: [f64; 3],
    pub trajectories: Trajectories,
}

/// Single-landmark prediction: mean final position over the 19 starts.
pub fn infer_single<P: Predictor + ?Sized>(
    predictor: &P,
    volume: &Volume,
    config: &InferenceConfig,
    log: Option<&mut dyn Write>,
) -> Result<SingleInference, PinferError> {
    let dims = volume.dims();
    let bounds: Vec<f64> = dims.iter().map(|d| (d - 1) as f64).collect();
    let starts = init_points_single(dims).into_iter().map(|p| p.to_vec()).collect();
    let trajectories = iterate(predictor, volume, starts, config, Some(&bounds), log)?;
    let m = &trajectories.mean;
    Ok(SingleInference { landmark: [m[0], m[1], m[2]], trajectories })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiInference {
    pub landmarks: LandmarkSet,
    pub b: Vec<f64>,
    pub trajectories: Trajectories,
}

/// Multi-landmark prediction in shape space: average the final `b` over the
/// starts, then map it back to landmarks. `b` is not clamped.
pub fn infer_multi<P: Predictor + ?Sized>(
    predictor: &P,
    model: &ShapeModel,
    volume: &Volume,
    config: &InferenceConfig,
    log: Option<&mut dyn Write>,
) -> Result<MultiInference, PinferError> {
    let mut rng = stream(config.seed, purpose::INFERENCE);
    let starts = init_b_multi(model, config.n_random_inits_multi, &mut rng);
    let trajectories = iterate(predictor, volume, starts, config, None, log)?;
    let b = trajectories.mean.clone();
    let x = model.to_x(&b)?;
    let landmarks = LandmarkSet::from_flat(&x)?;
    Ok(MultiInference { landmarks, b, trajectories })
}

/// Checks that a multi-landmark network regresses exactly the model's modes.
pub fn check_multi<T: Scalar>(network: &Network<T>, model: &ShapeModel) -> Result<(), PinferError> {
    let cfg = network.config();
    if cfg.n_o != model.n_b() || cfg.input_channels != 3 * model.n_l() {
        return Err(PinferError::Mismatch(format!(
            "checkpoint has n_o={} and {} input channels; shape model has n_b={} and {} landmarks",
            cfg.n_o,
            cfg.input_channels,
            model.n_b(),
            model.n_l()
        )));
    }
    Ok(())
}
