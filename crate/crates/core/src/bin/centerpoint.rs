use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use centerpoint::data::{generate_synthetic_set, load_dataset, write_dataset, BoxHandling, LabeledScene, Scene};
use centerpoint::evaluation::{evaluate, read_detections, write_pr_curves, EvaluationReport, Table};
use centerpoint::harness::{
    clutter_report_from, compare_detectors, density_spectrum_set, evaluate_model, predict, sweep_window, train, DataConfig,
    DetectorKind, Model, RunOptions, TrainConfig, DEFAULT_WINDOW_SIZES,
};
use centerpoint::single_stage::Detection;

/// Centerpoint detectors for overhead imagery: data generation, training
/// and evaluation.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic train/test split under `<out-dir>/train` and `<out-dir>/test`.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Make the test split a density spectrum with this many objects
        /// per image at the low and high end, e.g. `2,30`.
        #[arg(long, value_delimiter = ',')]
        clutter_spectrum: Option<Vec<usize>>,
    },
    /// Train one detector and evaluate it on the test split.
    Train {
        #[command(flatten)]
        common: Common,
        /// Directory produced by `generate-data`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        detector: Option<DetectorArg>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint or a detections file against a dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Dataset directory holding `annotations.jsonl`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "detections")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
    },
    /// Train several detector kinds over several seeds and tabulate mean (std).
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "centerpoint-retinanet,box-retinanet")]
        detectors: Vec<DetectorArg>,
        /// Defaults to `seed, seed + 1`.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// One Centerpoint R-CNN run per window size.
    SweepWindow {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        sizes: Vec<f64>,
    },
    /// mAP per clutter decile of the test images.
    ClutterReport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, conflicts_with = "detections")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        detections: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum DetectorArg {
    CenterpointRetinanet,
    BoxRetinanet,
    CenterpointRcnn,
    BoxRcnn,
}

impl From<DetectorArg> for DetectorKind {
    fn from(d: DetectorArg) -> Self {
        match d {
            DetectorArg::CenterpointRetinanet => DetectorKind::CenterpointRetinanet,
            DetectorArg::BoxRetinanet => DetectorKind::BoxRetinanet,
            DetectorArg::CenterpointRcnn => DetectorKind::CenterpointRcnn,
            DetectorArg::BoxRcnn => DetectorKind::BoxRcnn,
        }
    }
}

fn train_config(common: &Common) -> Result<TrainConfig> {
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_split(data: &Path, split: &str) -> Result<Vec<LabeledScene>> {
    let dir = data.join(split);
    load_dataset(&dir, BoxHandling::Keep).with_context(|| format!("loading {}", dir.display()))
}

/// A dataset directory, or a `generate-data` output holding `test/`.
fn load_eval_set(data: &Path) -> Result<Vec<LabeledScene>> {
    if data.join("test").is_dir() {
        load_split(data, "test")
    } else {
        load_dataset(data, BoxHandling::Keep).with_context(|| format!("loading {}", data.display()))
    }
}

fn detections_for(scenes: &[LabeledScene], checkpoint: Option<&Path>, detections: Option<&Path>) -> Result<Vec<Vec<Detection>>> {
    match (checkpoint, detections) {
        (Some(c), _) => {
            let (model, _) = Model::from_checkpoint(c)?;
            Ok(predict(&model, scenes))
        }
        (None, Some(d)) => {
            let mut by_image = read_detections(d)?;
            Ok(scenes.iter().map(|s| by_image.remove(&s.scene.image_id).unwrap_or_default()).collect())
        }
        (None, None) => bail!("pass --checkpoint or --detections"),
    }
}

fn write_report(out: &Path, report: &EvaluationReport) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.json"), serde_json::to_string_pretty(report)?)?;
    write_pr_curves(out.join("pr_curves"), "", &report.pr_curves)?;
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.2}", 100.0 * x));
    let mut t = Table::new("Evaluation", &["Class", "AP"]);
    for (c, ap) in &report.per_class_ap {
        t.push(vec![c.to_string(), pct(Some(*ap))]);
    }
    t.push(vec!["mAP".into(), pct(report.map)]);
    t.push(vec!["mAP-S".into(), pct(report.size_bins.small)]);
    t.push(vec!["mAP-M".into(), pct(report.size_bins.medium)]);
    t.push(vec!["mAP-L".into(), pct(report.size_bins.large)]);
    t.write(out.join("tables").join("evaluation.txt"))?;
    print!("{}", t.render());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenerateData { common, clutter_spectrum } => {
            let mut cfg = match &common.config {
                Some(p) => DataConfig::load(p)?,
                None => DataConfig::default(),
            };
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let train = generate_synthetic_set(&cfg.spec, cfg.num_train, cfg.seed, "train")?;
            let test = match clutter_spectrum {
                Some(c) if c.len() != 2 => bail!("--clutter-spectrum takes two counts, e.g. 2,30"),
                Some(c) => density_spectrum_set(&cfg.spec, cfg.num_test, (c[0], c[1]), cfg.seed ^ 0x7e57, "test")?,
                None => generate_synthetic_set(&cfg.spec, cfg.num_test, cfg.seed ^ 0x7e57, "test")?,
            };
            write_dataset(common.out_dir.join("train"), &train)?;
            write_dataset(common.out_dir.join("test"), &test)?;
            println!("wrote {} train and {} test scenes to {}", train.len(), test.len(), common.out_dir.display());
            Ok(true)
        }
        Command::Train { common, data, detector, iterations, resume } => {
            let mut cfg = train_config(&common)?;
            if let Some(d) = detector {
                cfg.detector = d.into();
            }
            if let Some(n) = iterations {
                cfg.iterations = n;
            }
            cfg.validate()?;
            let (tr, te) = (load_split(&data, "train")?, load_split(&data, "test")?);
            let opts = RunOptions {
                out_dir: Some(common.out_dir.clone()),
                resume,
                log_every: Some(100),
                ..Default::default()
            };
            let record = train(&cfg, &tr, &te, &opts)?;
            print!("{}", centerpoint::harness::run_table(&record).render());
            Ok(record.converged)
        }
        Command::Evaluate { common, data, checkpoint, detections } => {
            let scenes = load_eval_set(&data)?;
            let report = match (&checkpoint, &detections) {
                (Some(c), None) => {
                    let (model, cfg) = Model::from_checkpoint(c)?;
                    evaluate_model(&model, &scenes, &cfg)?.0
                }
                _ => {
                    let cfg = train_config(&common)?;
                    let dets = detections_for(&scenes, None, detections.as_deref())?;
                    let anns: Vec<&Scene> = scenes.iter().map(|s| &s.scene).collect();
                    let refs: Vec<&[Detection]> = dets.iter().map(Vec::as_slice).collect();
                    evaluate(&anns, &refs, &cfg.eval)?
                }
            };
            write_report(&common.out_dir, &report)?;
            Ok(true)
        }
        Command::Compare { common, data, detectors, seeds } => {
            let base = train_config(&common)?;
            let seeds = if seeds.is_empty() { vec![base.seed, base.seed + 1] } else { seeds };
            let configs: Vec<(String, TrainConfig)> = detectors
                .into_iter()
                .map(|d| {
                    let kind = DetectorKind::from(d);
                    (kind.name().to_string(), TrainConfig { detector: kind, ..base.clone() })
                })
                .collect();
            let (tr, te) = (load_split(&data, "train")?, load_split(&data, "test")?);
            let c = compare_detectors(&configs, &seeds, &tr, &te, Some(&common.out_dir), Some(250))?;
            print!("{}", c.table().render());
            Ok(c.rows.iter().all(|r| r.excluded_seeds().is_empty()))
        }
        Command::SweepWindow { common, data, sizes } => {
            let base = train_config(&common)?;
            let sizes = if sizes.is_empty() { DEFAULT_WINDOW_SIZES.to_vec() } else { sizes };
            let (tr, te) = (load_split(&data, "train")?, load_split(&data, "test")?);
            let s = sweep_window(&sizes, &base, &tr, &te, Some(&common.out_dir), Some(250))?;
            print!("{}", s.table().render());
            Ok(s.rows.iter().all(|r| r.run.converged))
        }
        Command::ClutterReport { common, data, checkpoint, detections } => {
            let cfg = train_config(&common)?;
            let scenes = load_eval_set(&data)?;
            let dets = detections_for(&scenes, checkpoint.as_deref(), detections.as_deref())?;
            let r = clutter_report_from(&scenes, &dets, &cfg.eval)?;
            std::fs::create_dir_all(&common.out_dir)?;
            std::fs::write(common.out_dir.join("clutter.json"), serde_json::to_string_pretty(&r)?)?;
            let t = r.table();
            t.write(common.out_dir.join("tables").join("clutter.txt"))?;
            print!("{}", t.render());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: a run did not converge");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
