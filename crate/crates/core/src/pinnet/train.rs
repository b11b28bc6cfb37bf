use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;

use crate::dataset::{Case, DatasetError, Manifest, Split};
use crate::kv::{KvError, KvMap};
use crate::micrograd::{adam_step, AdamState, Tensor};
use crate::seeding::{purpose, stream};
use crate::shapemodel::ShapeModel;

use super::{
    loss_and_seeds, make_sample_multi, make_sample_single, save_checkpoint, stack_batch, Checkpoint, LossTerms,
    ModelMode, Network, NetworkConfig, PinNetError, TrainingSample,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub alpha: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub weight_init_sigma: f64,
    pub seed: u64,
    pub b_sample_sigma_multiplier: f64,
    /// Write an intermediate checkpoint every this many iterations; 0 disables.
    pub checkpoint_interval: usize,
    /// Decay of the exponential moving average of the weights that checkpoints
    /// store; 0 stores the raw Adam iterate.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            batch_size: 64,
            iterations: 100_000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            weight_init_sigma: 0.1,
            seed: 0,
            b_sample_sigma_multiplier: 1.0,
            checkpoint_interval: 10_000,
            ema_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PinNetError> {
        let bad = |m: &str| Err(PinNetError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad("alpha must lie in [0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.weight_init_sigma > 0.0 && self.b_sample_sigma_multiplier > 0.0) {
            return bad("learning_rate, weight_init_sigma and b_sample_sigma_multiplier must be positive");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.adam_epsilon > 0.0) {
            return bad("adam betas must lie in [0, 1) and epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KvMap) {
        kv.set("alpha", self.alpha);
        kv.set("batch_size", self.batch_size);
        kv.set("iterations", self.iterations);
        kv.set("learning_rate", self.learning_rate);
        kv.set("beta1", self.beta1);
        kv.set("beta2", self.beta2);
        kv.set("adam_epsilon", self.adam_epsilon);
        kv.set("weight_init_sigma", self.weight_init_sigma);
        kv.set("seed", self.seed);
        kv.set("b_sample_sigma_multiplier", self.b_sample_sigma_multiplier);
        kv.set("checkpoint_interval", self.checkpoint_interval);
        kv.set("ema_decay", self.ema_decay);
    }

    pub fn from_kv(kv: &KvMap) -> Result<Self, KvError> {
        Ok(Self {
            alpha: kv.get("alpha")?,
            batch_size: kv.get("batch_size")?,
            iterations: kv.get("iterations")?,
            learning_rate: kv.get("learning_rate")?,
            beta1: kv.get("beta1")?,
            beta2: kv.get("beta2")?,
            adam_epsilon: kv.get("adam_epsilon")?,
            weight_init_sigma: kv.get("weight_init_sigma")?,
            seed: kv.get("seed")?,
            b_sample_sigma_multiplier: kv.get("b_sample_sigma_multiplier")?,
            checkpoint_interval: kv.get("checkpoint_interval")?,
            ema_decay: kv.get("ema_decay")?,
        })
    }
}

/// What the network is trained to regress.
#[derive(Clone, Debug)]
pub enum TrainSetup {
    Single { landmark: usize },
    Multi { model: ShapeModel },
}

impl TrainSetup {
    fn mode(&self) -> ModelMode {
        match self {
            TrainSetup::Single { landmark } => ModelMode::Single { landmark: *landmark },
            TrainSetup::Multi { .. } => ModelMode::Multi,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub losses: Vec<LossTerms>,
    pub final_checkpoint: PathBuf,
    pub checkpoint: Checkpoint,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PinNetError + '_ {
    move |source| PinNetError::Io { path: path.display().to_string(), source }
}

fn check_shapes(cases: &[Case], network: &NetworkConfig, setup: &TrainSetup) -> Result<(), PinNetError> {
    let n_l = cases[0].landmarks.len();
    if let Some(c) = cases.iter().find(|c| c.landmarks.len() != n_l) {
        return Err(PinNetError::Config(format!(
            "case {} has {} landmarks, case {} has {n_l}",
            c.index,
            c.landmarks.len(),
            cases[0].index
        )));
    }
    let (channels, n_o) = match setup {
        TrainSetup::Single { landmark } => {
            if *landmark >= n_l {
                return Err(PinNetError::Config(format!("landmark {landmark} out of range (dataset has {n_l})")));
            }
            (3, 3)
        }
        TrainSetup::Multi { model } => {
            if model.n_l() != n_l {
                return Err(PinNetError::Config(format!(
                    "shape model has {} landmarks, dataset has {n_l}",
                    model.n_l()
                )));
            }
            (3 * n_l, model.n_b())
        }
    };
    if network.input_channels != channels || network.n_o != n_o {
        return Err(PinNetError::Config(format!(
            "{} training needs input_channels={channels} and n_o={n_o}, config has {} and {}",
            setup.mode(),
            network.input_channels,
            network.n_o
        )));
    }
    Ok(())
}

/// Draws the `k`-th sample of iteration `it`. Each sample has its own stream,
/// so parallel synthesis is order-independent.
fn draw_sample(
    cases: &[Case],
    setup: &TrainSetup,
    s: usize,
    cfg: &TrainConfig,
    it: usize,
    k: usize,
) -> Result<TrainingSample, PinNetError> {
    let mut rng = stream(cfg.seed, purpose::SAMPLES + (it * cfg.batch_size + k) as u64);
    let case = &cases[rng.random_range(0..cases.len())];
    match setup {
        TrainSetup::Single { landmark } => {
            make_sample_single(&case.volume, case.landmarks.points()[*landmark], s, &mut rng)
        }
        TrainSetup::Multi { model } => make_sample_multi(
            &case.volume,
            &case.landmarks,
            model,
            s,
            cfg.b_sample_sigma_multiplier,
            &mut rng,
        ),
    }
}

/// Mini-batch Adam on the joint loss over the manifest's training split.
/// Writes `loss.csv`, periodic `checkpoint_<iter>.pinc` files and `final.pinc`
/// into `out_dir`. On a non-finite loss the parameters from the previous
/// iteration are saved as `last_good.pinc` and an error is returned.
pub fn train(
    manifest: &Manifest,
    network: NetworkConfig,
    cfg: &TrainConfig,
    setup: TrainSetup,
    out_dir: &Path,
) -> Result<TrainSummary, PinNetError> {
    cfg.validate()?;
    network.validate()?;
    let cases = manifest.load(Split::Train)?;
    if cases.is_empty() {
        return Err(DatasetError::EmptySplit(Split::Train).into());
    }
    check_shapes(&cases, &network, &setup)?;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;

    let mut extra = KvMap::new();
    cfg.to_kv(&mut extra);
    let s = network.input_side;
    let mut net: Network<f32> = Network::init(network, cfg.weight_init_sigma, &mut stream(cfg.seed, purpose::INIT))?;
    let mut adam: Vec<AdamState<f32>> = net
        .params()
        .iter()
        .map(|b| AdamState::new(&b.name, b.tensor.len(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_epsilon))
        .collect();
    let ema = cfg.ema_decay > 0.0 && cfg.iterations > 0;
    let mut shadow: Vec<Vec<f64>> = net.params().iter().map(|b| vec![0.0; b.tensor.len()]).collect();
    let snapshot = |net: &Network<f32>, shadow: &[Vec<f64>], iteration: usize| {
        let mut kv = extra.clone();
        kv.set("completed_iterations", iteration);
        let mut net = net.clone();
        if ema && iteration > 0 {
            let correction = 1.0 - cfg.ema_decay.powi(iteration as i32);
            for (block, avg) in net.params_mut().iter_mut().zip(shadow) {
                for (p, a) in block.tensor.data_mut().iter_mut().zip(avg) {
                    *p = (a / correction) as f32;
                }
            }
        }
        Checkpoint::new(net, setup.mode(), &kv)
    };

    let loss_path = out_dir.join("loss.csv");
    let mut log = BufWriter::new(File::create(&loss_path).map_err(io_err(&loss_path))?);
    writeln!(log, "iteration,total,regression,classification").map_err(io_err(&loss_path))?;
    let mut losses = Vec::with_capacity(cfg.iterations);

    for it in 0..cfg.iterations {
        let samples = (0..cfg.batch_size)
            .into_par_iter()
            .map(|k| draw_sample(&cases, &setup, s, cfg, it, k))
            .collect::<Result<Vec<_>, _>>()?;
        let input = stack_batch(samples.iter().map(|smp| &smp.patch))?;
        let d_gt: Vec<Vec<f64>> = samples.into_iter().map(|smp| smp.d_gt).collect();

        let mut dropout_rng = stream(cfg.seed, purpose::DROPOUT + it as u64);
        let mut pass = net.forward_graph(input, Some(&mut dropout_rng))?;
        let (terms, gd, gp) = loss_and_seeds(pass.graph.value(pass.d), pass.graph.value(pass.p), &d_gt, cfg.alpha);
        if !terms.total.is_finite() {
            let path = out_dir.join("last_good.pinc");
            save_checkpoint(&snapshot(&net, &shadow, it), &path)?;
            log.flush().map_err(io_err(&loss_path))?;
            return Err(PinNetError::NonFiniteLoss { iteration: it + 1, last_good: path.display().to_string() });
        }
        pass.graph.backward(vec![(pass.d, gd), (pass.p, gp)])?;
        for ((block, id), state) in net.params_mut().iter_mut().zip(&pass.params).zip(&mut adam) {
            match pass.graph.grad(*id) {
                Some(g) => adam_step(&mut block.tensor, g, state)?,
                None => {
                    let zeros = Tensor::zeros(block.tensor.shape());
                    adam_step(&mut block.tensor, &zeros, state)?
                }
            }
        }
        if ema {
            let d = cfg.ema_decay;
            for (block, avg) in net.params().iter().zip(&mut shadow) {
                for (a, p) in avg.iter_mut().zip(block.tensor.data()) {
                    *a = d * *a + (1.0 - d) * f64::from(*p);
                }
            }
        }

        writeln!(log, "{},{},{},{}", it + 1, terms.total, terms.regression, terms.classification)
            .map_err(io_err(&loss_path))?;
        losses.push(terms);
        if cfg.checkpoint_interval > 0 && (it + 1) % cfg.checkpoint_interval == 0 && it + 1 < cfg.iterations {
            log.flush().map_err(io_err(&loss_path))?;
            save_checkpoint(&snapshot(&net, &shadow, it + 1), &out_dir.join(format!("checkpoint_{:06}.pinc", it + 1)))?;
        }
    }
    log.flush().map_err(io_err(&loss_path))?;

    let checkpoint = snapshot(&net, &shadow, cfg.iterations);
    let final_checkpoint = out_dir.join("final.pinc");
    save_checkpoint(&checkpoint, &final_checkpoint)?;
    Ok(TrainSummary { losses, final_checkpoint, checkpoint })
}
