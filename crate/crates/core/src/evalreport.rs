//! Localisation error, the five-variant ablation table and the
//! single-versus-multi comparison, each written as CSV and Markdown.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::dataset::{Case, DatasetError, Manifest, Split};
use crate::pinfer::{check_multi, infer_multi, infer_single, InferenceConfig, NetworkPredictor, PinferError, Rule};
use crate::pinnet::{load_checkpoint, Checkpoint, CheckpointError, ModelMode};
use crate::shapemodel::ShapeModel;
use crate::volumes::voxel_to_mm;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{variant}: {msg}")]
    Checkpoint { variant: String, msg: String },
    #[error("{0}")]
    Mismatch(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Inference(#[from] PinferError),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Euclidean distance in millimetres between two voxel-coordinate points.
pub fn localisation_error(pred: [f64; 3], gt: [f64; 3], spacing: [f32; 3]) -> f64 {
    let a = voxel_to_mm(pred, spacing);
    let b = voxel_to_mm(gt, spacing);
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

/// Mean and sample standard deviation (zero for fewer than two values).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// `errors_mm[v][l]`: error of landmark `l` on test volume `v`.
    pub errors_mm: Vec<Vec<f64>>,
    pub per_landmark: Vec<(f64, f64)>,
    pub overall: (f64, f64),
    /// Wall-clock seconds to predict every evaluated landmark of one volume.
    pub runtime_s: f64,
    pub fingerprint: String,
}

impl EvalResult {
    fn from_errors(errors_mm: Vec<Vec<f64>>, runtime_s: f64, fingerprint: String) -> Self {
        let n_l = errors_mm.first().map_or(0, Vec::len);
        let per_landmark = (0..n_l)
            .map(|l| mean_sd(&errors_mm.iter().map(|row| row[l]).collect::<Vec<_>>()))
            .collect();
        let overall = mean_sd(&errors_mm.iter().flatten().copied().collect::<Vec<_>>());
        Self { errors_mm, per_landmark, overall, runtime_s, fingerprint }
    }
}

/// Evaluation knobs shared by both tables.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    /// Iterations for Rule A and for Rules B/C.
    pub iterations_a: usize,
    pub iterations_bc: usize,
    pub early_stop_epsilon: f64,
    pub n_random_inits_multi: usize,
    pub seed: u64,
    /// Runtime is the median over this many timed runs on the first test volume.
    pub runtime_repeats: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { iterations_a: 350, iterations_bc: 10, early_stop_epsilon: 1e-3, n_random_inits_multi: 5, seed: 0, runtime_repeats: 3 }
    }
}

impl EvalOptions {
    pub fn inference(&self, rule: Rule) -> InferenceConfig {
        let mut cfg = InferenceConfig::for_rule(rule);
        cfg.iterations = if rule == Rule::A { self.iterations_a } else { self.iterations_bc };
        if rule != Rule::A {
            cfg.early_stop_epsilon = self.early_stop_epsilon;
        }
        cfg.n_random_inits_multi = self.n_random_inits_multi;
        cfg.seed = self.seed;
        cfg
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn checkpoint_hash(c: &Checkpoint) -> String {
    sha256_hex(&c.to_bytes())[..16].to_string()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn timed_median<F: FnMut() -> Result<(), EvalError>>(repeats: usize, mut f: F) -> Result<f64, EvalError> {
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok(median(times))
}

fn load_test(manifest: &Manifest) -> Result<Vec<Case>, EvalError> {
    Ok(manifest.load(Split::Test)?)
}

fn single_errors(checkpoint: &Checkpoint, landmark: usize, cases: &[Case], cfg: &InferenceConfig) -> Result<Vec<f64>, EvalError> {
    let pred = NetworkPredictor { network: &checkpoint.network, shape_model: None };
    cases
        .par_iter()
        .map(|c| {
            let r = infer_single(&pred, &c.volume, cfg, None)?;
            let gt = c.landmarks.points()[landmark];
            Ok(localisation_error(r.landmark, gt, c.volume.spacing()))
        })
        .collect()
}

/// Checkpoints for the ablation, keyed by training loss.
#[derive(Clone, Debug, Default)]
pub struct AblationCheckpoints {
    /// Classification-only loss (alpha = 1).
    pub classification: Option<PathBuf>,
    /// Regression-only loss (alpha = 0).
    pub regression: Option<PathBuf>,
    /// Joint loss (alpha strictly between 0 and 1).
    pub joint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Classification,
    Regression,
    Joint,
}

impl LossKind {
    pub fn label(self) -> &'static str {
        match self {
            LossKind::Classification => "C",
            LossKind::Regression => "R",
            LossKind::Joint => "C+R",
        }
    }
}

/// The five ablation variants in table order.
pub const VARIANTS: [(&str, LossKind, Rule); 5] = [
    ("PIN1", LossKind::Classification, Rule::A),
    ("PIN2", LossKind::Regression, Rule::B),
    ("PIN3", LossKind::Joint, Rule::A),
    ("PIN4", LossKind::Joint, Rule::B),
    ("PIN5", LossKind::Joint, Rule::C),
];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub name: String,
    pub loss: LossKind,
    pub rule: Rule,
    pub iterations: usize,
    pub result: EvalResult,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub landmark: usize,
    pub rows: Vec<AblationRow>,
}

fn load_for(variant: &str, path: &Option<PathBuf>, loss: LossKind) -> Result<(Checkpoint, usize), EvalError> {
    let err = |msg: String| EvalError::Checkpoint { variant: variant.to_string(), msg };
    let path = path.as_ref().ok_or_else(|| err(format!("no checkpoint given for the {} loss", loss.label())))?;
    let c = load_checkpoint(path).map_err(|e| err(format!("{}: {e}", path.display())))?;
    let alpha: f64 = c.get("alpha").map_err(|e: CheckpointError| err(e.to_string()))?;
    let ok = match loss {
        LossKind::Classification => alpha == 1.0,
        LossKind::Regression => alpha == 0.0,
        LossKind::Joint => alpha > 0.0 && alpha < 1.0,
    };
    if !ok {
        return Err(err(format!("{} was trained with alpha={alpha}, not a {} loss", path.display(), loss.label())));
    }
    match c.mode().map_err(|e| err(e.to_string()))? {
        ModelMode::Single { landmark } => Ok((c, landmark)),
        ModelMode::Multi => Err(err(format!("{} is a multi-landmark checkpoint", path.display()))),
    }
}

/// Evaluates the five loss/rule variants on the test split.
pub fn run_ablation(manifest: &Manifest, checkpoints: &AblationCheckpoints, options: &EvalOptions) -> Result<AblationTable, EvalError> {
    let mut loaded = Vec::new();
    for (name, loss, _) in VARIANTS {
        let path = match loss {
            LossKind::Classification => &checkpoints.classification,
            LossKind::Regression => &checkpoints.regression,
            LossKind::Joint => &checkpoints.joint,
        };
        loaded.push(load_for(name, path, loss)?);
    }
    let landmark = loaded[0].1;
    if let Some((_, l)) = loaded.iter().find(|(_, l)| *l != landmark) {
        return Err(EvalError::Mismatch(format!("ablation checkpoints target different landmarks ({landmark} and {l})")));
    }
    let cases = load_test(manifest)?;
    if let Some(c) = cases.iter().find(|c| c.landmarks.len() <= landmark) {
        return Err(EvalError::Mismatch(format!("test case {} has no landmark {landmark}", c.index)));
    }

    let mut rows = Vec::new();
    for ((name, loss, rule), (checkpoint, _)) in VARIANTS.iter().zip(&loaded) {
        let cfg = options.inference(*rule);
        let errors = single_errors(checkpoint, landmark, &cases, &cfg)?;
        let pred = NetworkPredictor { network: &checkpoint.network, shape_model: None };
        let runtime = timed_median(options.runtime_repeats, || {
            infer_single(&pred, &cases[0].volume, &cfg, None)?;
            Ok(())
        })?;
        let fingerprint = format!(
            "checkpoint={};rule={rule};T={};eps={};seed={}",
            checkpoint_hash(checkpoint),
            cfg.iterations,
            cfg.early_stop_epsilon,
            cfg.seed
        );
        rows.push(AblationRow {
            name: name.to_string(),
            loss: *loss,
            rule: *rule,
            iterations: cfg.iterations,
            result: EvalResult::from_errors(errors.into_iter().map(|e| vec![e]).collect(), runtime, fingerprint),
        });
    }
    Ok(AblationTable { landmark, rows })
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,loss,rule,iterations,landmark,mean_mm,sd_mm,runtime_s,fingerprint\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.name,
                r.loss.label(),
                r.rule,
                r.iterations,
                self.landmark,
                r.result.overall.0,
                r.result.overall.1,
                r.result.runtime_s,
                r.result.fingerprint
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("Ablation on landmark {} (test split)\n\n|  |", self.landmark);
        for r in &self.rows {
            let _ = write!(s, " {} |", r.name);
        }
        s.push_str("\n|---|");
        s.push_str(&"---|".repeat(self.rows.len()));
        let mut line = |label: &str, cell: &dyn Fn(&AblationRow) -> String| {
            let _ = write!(s, "\n| {label} |");
            for r in &self.rows {
                let _ = write!(s, " {} |", cell(r));
            }
        };
        line("Training loss", &|r| r.loss.label().to_string());
        line("Inference rule", &|r| format!("Rule {}", r.rule));
        line("Localisation error (mm)", &|r| format!("{:.2} ± {:.2}", r.result.overall.0, r.result.overall.1));
        line("Runtime (s)", &|r| format!("{:.3}", r.result.runtime_s));
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        write_pair(dir, "ablation", &self.to_csv(), &self.to_markdown())
    }
}

fn write_pair(dir: &Path, stem: &str, csv: &str, md: &str) -> Result<(), EvalError> {
    let io = |p: &Path| {
        let path = p.display().to_string();
        move |source| EvalError::Io { path, source }
    };
    fs::create_dir_all(dir).map_err(io(dir))?;
    for (ext, text) in [("csv", csv), ("md", md)] {
        let p = dir.join(format!("{stem}.{ext}"));
        fs::write(&p, text).map_err(io(&p))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SingleVsMulti {
    pub single: EvalResult,
    pub multi: EvalResult,
}

/// Per-landmark Rule-C errors of one single-landmark model per landmark
/// against one multi-landmark model in shape space.
pub fn run_single_vs_multi(
    manifest: &Manifest,
    single_checkpoints: &[PathBuf],
    multi_checkpoint: &Path,
    model: &ShapeModel,
    options: &EvalOptions,
) -> Result<SingleVsMulti, EvalError> {
    let n_l = model.n_l();
    if single_checkpoints.len() != n_l {
        return Err(EvalError::Mismatch(format!(
            "{} single-landmark checkpoints given for {n_l} landmarks",
            single_checkpoints.len()
        )));
    }
    let mut singles: Vec<Option<Checkpoint>> = vec![None; n_l];
    for path in single_checkpoints {
        let variant = format!("PIN-Single ({})", path.display());
        let err = |msg: String| EvalError::Checkpoint { variant: variant.clone(), msg };
        let c = load_checkpoint(path).map_err(|e| err(e.to_string()))?;
        match c.mode().map_err(|e| err(e.to_string()))? {
            ModelMode::Single { landmark } if landmark < n_l => {
                if singles[landmark].is_some() {
                    return Err(err(format!("a second checkpoint for landmark {landmark}")));
                }
                singles[landmark] = Some(c);
            }
            other => return Err(err(format!("expected a single-landmark checkpoint for one of {n_l} landmarks, got {other:?}"))),
        }
    }
    let singles: Vec<Checkpoint> = singles.into_iter().map(|c| c.expect("all slots filled")).collect();
    let multi = load_checkpoint(multi_checkpoint).map_err(|e| EvalError::Checkpoint {
        variant: "PIN-Multiple".into(),
        msg: format!("{}: {e}", multi_checkpoint.display()),
    })?;
    if multi.mode().ok() != Some(ModelMode::Multi) {
        return Err(EvalError::Checkpoint {
            variant: "PIN-Multiple".into(),
            msg: format!("{} is not a multi-landmark checkpoint", multi_checkpoint.display()),
        });
    }
    check_multi(&multi.network, model)?;

    let cases = load_test(manifest)?;
    if let Some(c) = cases.iter().find(|c| c.landmarks.len() != n_l) {
        return Err(EvalError::Mismatch(format!("test case {} has {} landmarks, shape model has {n_l}", c.index, c.landmarks.len())));
    }
    let cfg = options.inference(Rule::C);

    let per_landmark: Vec<Vec<f64>> =
        singles.iter().enumerate().map(|(l, c)| single_errors(c, l, &cases, &cfg)).collect::<Result<_, _>>()?;
    let single_errors_mm: Vec<Vec<f64>> = (0..cases.len()).map(|v| per_landmark.iter().map(|e| e[v]).collect()).collect();
    let single_runtime = timed_median(options.runtime_repeats, || {
        for c in &singles {
            let pred = NetworkPredictor { network: &c.network, shape_model: None };
            infer_single(&pred, &cases[0].volume, &cfg, None)?;
        }
        Ok(())
    })?;
    let hashes: Vec<String> = singles.iter().map(checkpoint_hash).collect();
    let single = EvalResult::from_errors(
        single_errors_mm,
        single_runtime,
        format!("checkpoints={};rule=C;T={};eps={}", hashes.join("+"), cfg.iterations, cfg.early_stop_epsilon),
    );

    let pred = NetworkPredictor { network: &multi.network, shape_model: Some(model) };
    let multi_errors_mm: Vec<Vec<f64>> = cases
        .par_iter()
        .map(|c| {
            let r = infer_multi(&pred, model, &c.volume, &cfg, None)?;
            Ok(r.landmarks
                .points()
                .iter()
                .zip(c.landmarks.points())
                .map(|(p, g)| localisation_error(*p, *g, c.volume.spacing()))
                .collect())
        })
        .collect::<Result<_, EvalError>>()?;
    let multi_runtime = timed_median(options.runtime_repeats, || {
        infer_multi(&pred, model, &cases[0].volume, &cfg, None)?;
        Ok(())
    })?;
    let multi = EvalResult::from_errors(
        multi_errors_mm,
        multi_runtime,
        format!(
            "checkpoint={};shape_model={};rule=C;T={};eps={};inits={};seed={}",
            checkpoint_hash(&multi),
            &sha256_hex(&model.to_bytes())[..16],
            cfg.iterations,
            cfg.early_stop_epsilon,
            cfg.n_random_inits_multi,
            cfg.seed
        ),
    );
    Ok(SingleVsMulti { single, multi })
}

impl SingleVsMulti {
    fn rows(&self) -> [(&'static str, &EvalResult); 2] {
        [("PIN-Single", &self.single), ("PIN-Multiple", &self.multi)]
    }

    pub fn to_csv(&self) -> String {
        let n_l = self.single.per_landmark.len();
        let mut s = String::from("method");
        for l in 0..n_l {
            let _ = write!(s, ",l{l}_mean_mm,l{l}_sd_mm");
        }
        s.push_str(",overall_mean_mm,overall_sd_mm,runtime_s,fingerprint\n");
        for (name, r) in self.rows() {
            s.push_str(name);
            for (m, sd) in &r.per_landmark {
                let _ = write!(s, ",{m},{sd}");
            }
            let _ = writeln!(s, ",{},{},{},{}", r.overall.0, r.overall.1, r.runtime_s, r.fingerprint);
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let n_l = self.single.per_landmark.len();
        let mut s = String::from("Localisation error (mm) on the test split\n\n| Landmarks |");
        for l in 0..n_l {
            let _ = write!(s, " L{l} |");
        }
        s.push_str(" Overall | Runtime (s) |\n|---|");
        s.push_str(&"---|".repeat(n_l + 2));
        for (name, r) in self.rows() {
            let _ = write!(s, "\n| {name} |");
            for (m, sd) in &r.per_landmark {
                let _ = write!(s, " {m:.2} ± {sd:.2} |");
            }
            let _ = write!(s, " {:.2} ± {:.2} | {:.3} |", r.overall.0, r.overall.1, r.runtime_s);
        }
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        write_pair(dir, "single_vs_multi", &self.to_csv(), &self.to_markdown())
    }
}
