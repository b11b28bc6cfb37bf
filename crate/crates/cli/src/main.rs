mod config;

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pin_core::dataset::{Manifest, Split};
use pin_core::evalreport::{run_ablation, run_single_vs_multi, AblationCheckpoints};
use pin_core::kv::KvMap;
use pin_core::phantom::generate_dataset;
use pin_core::pinfer::{check_multi, infer_multi, infer_single, NetworkPredictor, Rule};
use pin_core::pinnet::{load_checkpoint, train, ModelMode, TrainSetup};
use pin_core::shapemodel::ShapeModel;
use pin_core::volumes::{read_volume, write_landmarks, LandmarkSet};

#[derive(Parser)]
#[command(name = "pin", version, about = "Patch-based iterative landmark localisation on 3D volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Run configuration file (`key=value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set alpha=0.25`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Single,
    Multi,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset and its manifest.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: usize,
    },
    /// Fit the landmark shape model on the training split.
    FitPca {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Explained-variance threshold (defaults to `variance_threshold`).
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a single-landmark or multi-landmark network.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Landmark index (single mode).
        #[arg(long)]
        landmark: Option<usize>,
        #[arg(long)]
        manifest: PathBuf,
        /// Shape model for multi mode; fitted on the training split when omitted.
        #[arg(long)]
        shape_model: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict landmarks on one volume.
    Infer {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        shape_model: Option<PathBuf>,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long, value_parser = parse_rule)]
        rule: Rule,
        #[arg(long)]
        out: PathBuf,
        /// Optional per-iteration trajectory CSV.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
    /// Five-variant loss/rule ablation on the test split.
    EvalAblation {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// Checkpoint trained with alpha = 1.
        #[arg(long)]
        classification: Option<PathBuf>,
        /// Checkpoint trained with alpha = 0.
        #[arg(long)]
        regression: Option<PathBuf>,
        /// Checkpoint trained with 0 < alpha < 1.
        #[arg(long)]
        joint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Single-landmark models against one multi-landmark model.
    EvalMulti {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        manifest: PathBuf,
        /// One checkpoint per landmark (repeat or comma-separate).
        #[arg(long, value_delimiter = ',', required = true)]
        single: Vec<PathBuf>,
        #[arg(long)]
        multi: PathBuf,
        #[arg(long)]
        shape_model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_rule(s: &str) -> Result<Rule, String> {
    s.parse()
}

/// Loads the effective config, applies the thread setting and echoes the
/// config into `dir` as `<command>_config.txt`.
fn prepare(cfg: &ConfigArgs, command: &str, dir: &Path) -> Result<KvMap> {
    let kv = config::load(cfg.config.as_deref(), &cfg.sets)?;
    let threads = config::threads(&kv)?;
    if threads > 0 {
        // Fails only if a pool already exists, which leaves the earlier setting in place.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    let dir = if dir.as_os_str().is_empty() { Path::new(".") } else { dir };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let argv: Vec<String> = std::env::args().collect();
    let echo = format!("# {}\n{kv}", argv.join(" "));
    let path = dir.join(format!("{command}_config.txt"));
    fs::write(&path, echo).with_context(|| format!("writing {}", path.display()))?;
    Ok(kv)
}

fn parent(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    Manifest::read(path).with_context(|| format!("reading manifest {}", path.display()))
}

fn load_model(path: &Path) -> Result<ShapeModel> {
    ShapeModel::load(path).with_context(|| format!("loading shape model {}", path.display()))
}

fn fit_shape_model(manifest: &Manifest, threshold: f64) -> Result<ShapeModel> {
    let cases = manifest.load(Split::Train)?;
    let shapes: Vec<Vec<f64>> = cases.iter().map(|c| c.landmarks.flatten()).collect();
    Ok(ShapeModel::fit(&shapes, threshold)?)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { cfg, out, count } => {
            let kv = prepare(&cfg, "gen-data", &out)?;
            let manifest = generate_dataset(&config::phantom(&kv)?, count, &out)?;
            let train = manifest.split(Split::Train).count();
            println!("wrote {count} phantoms ({train} train, {} test) to {}", count - train, out.display());
        }
        Command::FitPca { cfg, manifest, threshold, out } => {
            let kv = prepare(&cfg, "fit-pca", parent(&out))?;
            let threshold = match threshold {
                Some(t) => t,
                None => kv.get("variance_threshold")?,
            };
            let model = fit_shape_model(&read_manifest(&manifest)?, threshold)?;
            model.save(&out).with_context(|| format!("writing {}", out.display()))?;
            println!("shape model: {} landmarks, {} modes -> {}", model.n_l(), model.n_b(), out.display());
        }
        Command::Train { cfg, mode, landmark, manifest, shape_model, out } => {
            let kv = prepare(&cfg, "train", &out)?;
            let manifest = read_manifest(&manifest)?;
            let train_cfg = config::train(&kv)?;
            let (setup, net) = match mode {
                Mode::Single => {
                    let Some(landmark) = landmark else { bail!("--landmark is required in single mode") };
                    (TrainSetup::Single { landmark }, config::network(&kv, 3, 3)?)
                }
                Mode::Multi => {
                    let model = match shape_model {
                        Some(p) => load_model(&p)?,
                        None => {
                            let m = fit_shape_model(&manifest, kv.get("variance_threshold")?)?;
                            let p = out.join("shape_model.pins");
                            m.save(&p).with_context(|| format!("writing {}", p.display()))?;
                            m
                        }
                    };
                    let net = config::network(&kv, 3 * model.n_l(), model.n_b())?;
                    (TrainSetup::Multi { model }, net)
                }
            };
            let summary = train(&manifest, net, &train_cfg, setup, &out)?;
            let last = summary.losses.last().map_or(f64::NAN, |l| l.total);
            println!("trained {} iterations, final loss {last:.6} -> {}", summary.losses.len(), summary.final_checkpoint.display());
        }
        Command::Infer { cfg, checkpoint, shape_model, volume, rule, out, trajectory } => {
            let kv = prepare(&cfg, "infer", parent(&out))?;
            let inference = config::inference(&kv, rule)?;
            let ckpt = load_checkpoint(&checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let vol = read_volume(&volume).with_context(|| format!("reading volume {}", volume.display()))?;
            let mut traj = match &trajectory {
                Some(p) => Some(BufWriter::new(fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)),
                None => None,
            };
            let log = traj.as_mut().map(|w| w as &mut dyn std::io::Write);
            let landmarks = match ckpt.mode()? {
                ModelMode::Single { .. } => {
                    let pred = NetworkPredictor { network: &ckpt.network, shape_model: None };
                    let r = infer_single(&pred, &vol, &inference, log)?;
                    LandmarkSet::new(vec![r.landmark])?
                }
                ModelMode::Multi => {
                    let Some(p) = shape_model else { bail!("--shape-model is required for a multi-landmark checkpoint") };
                    let model = load_model(&p)?;
                    check_multi(&ckpt.network, &model)?;
                    let pred = NetworkPredictor { network: &ckpt.network, shape_model: Some(&model) };
                    infer_multi(&pred, &model, &vol, &inference, log)?.landmarks
                }
            };
            if let Some(mut w) = traj {
                std::io::Write::flush(&mut w)?;
            }
            write_landmarks(&landmarks, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("wrote {} landmark(s) to {}", landmarks.len(), out.display());
        }
        Command::EvalAblation { cfg, manifest, classification, regression, joint, out } => {
            let kv = prepare(&cfg, "eval-ablation", &out)?;
            let table = run_ablation(
                &read_manifest(&manifest)?,
                &AblationCheckpoints { classification, regression, joint },
                &config::eval_options(&kv)?,
            )?;
            table.write(&out)?;
            print!("{}", table.to_markdown());
        }
        Command::EvalMulti { cfg, manifest, single, multi, shape_model, out } => {
            let kv = prepare(&cfg, "eval-multi", &out)?;
            let model = load_model(&shape_model)?;
            let table = run_single_vs_multi(&read_manifest(&manifest)?, &single, &multi, &model, &config::eval_options(&kv)?)?;
            table.write(&out)?;
            print!("{}", table.to_markdown());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
