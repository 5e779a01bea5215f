use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::config::{DetectorKind, TrainConfig};
use crate::data::{augment, sample_chip, Chip, LabeledScene, Scene};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, write_detections, write_pr_curves, DetectionRecord, EvaluationReport, Table, DETECTIONS_FILE};
use crate::losses::LossBundle;
use crate::nn::{ParamStore, Sgd};
use crate::single_stage::{Detection, SingleStageDetector};
use crate::two_stage::{LossSelection, TwoStageDetector};

/// Linear warmup from `base_lr / 1000`, then a factor per passed drop.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_iters {
        let start = 1e-3;
        let t = step as f64 / cfg.warmup_iters as f64;
        return cfg.base_lr * (start + (1.0 - start) * t);
    }
    let drops = cfg.lr_drop_iters.iter().filter(|&&d| step >= d).count();
    cfg.base_lr * cfg.lr_drop_factor.powi(drops as i32)
}

/// Either detector family behind one interface.
#[derive(Debug, Clone)]
pub enum Model {
    Single(SingleStageDetector),
    Two(TwoStageDetector),
}

impl Model {
    /// Initialized from the run seed.
    pub fn build(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(if cfg.detector.is_two_stage() {
            Model::Two(TwoStageDetector::new(cfg.two_stage_config(), &mut rng)?)
        } else {
            Model::Single(SingleStageDetector::new(cfg.single_stage_config(), &mut rng)?)
        })
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Single(m) => &m.store,
            Model::Two(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Single(m) => &mut m.store,
            Model::Two(m) => &mut m.store,
        }
    }

    pub fn accumulate_gradients(&mut self, chips: &[&Chip], rng: &mut ChaCha8Rng) -> Result<LossBundle> {
        match self {
            Model::Single(m) => m.accumulate_gradients(chips),
            Model::Two(m) => m.accumulate_gradients(chips, rng, LossSelection::ALL),
        }
    }

    pub fn detect(&self, chip: &Chip) -> Vec<Detection> {
        match self {
            Model::Single(m) => m.detect(chip),
            Model::Two(m) => m.detect(chip),
        }
    }

    /// Rebuilds a model from a checkpoint file.
    pub fn from_checkpoint(path: impl AsRef<Path>) -> Result<(Self, TrainConfig)> {
        let ck = load_checkpoint(path)?;
        let cfg = ck.header.config.clone();
        let mut model = Self::build(&cfg)?;
        ck.restore(model.store_mut())?;
        Ok((model, cfg))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub lr: f64,
    pub total: f64,
    pub terms: BTreeMap<String, f64>,
}

/// Everything a run produced. `converged` is false iff a non-finite loss
/// was observed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub loss_curve: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub report: Option<EvaluationReport>,
    pub iterations_completed: usize,
    pub converged: bool,
    pub diverged_at: Option<usize>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn map(&self) -> Option<f64> {
        self.report.as_ref().and_then(|r| r.map)
    }
}

/// Content of `metrics.json`: only seed-determined quantities, so equal
/// configs give byte-identical files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub detector: DetectorKind,
    pub seed: u64,
    pub iterations: usize,
    pub converged: bool,
    pub diverged_at: Option<usize>,
    pub final_loss: Option<f64>,
    pub report: Option<EvaluationReport>,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Artifact directory; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
    /// Checkpoint to continue from.
    pub resume: Option<PathBuf>,
    /// Stop after this many total iterations, as if interrupted.
    pub stop_after: Option<usize>,
    /// Print a progress line every this many iterations.
    pub log_every: Option<usize>,
}

fn iteration_rng(seed: u64, it: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(it as u64 + 1);
    rng
}

fn checkpoint_path(dir: &Path, it: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("iter_{it:06}.ckpt"))
}

/// Runs inference on full scenes and pairs detections with annotation rows.
pub fn predict(model: &Model, scenes: &[LabeledScene]) -> Vec<Vec<Detection>> {
    scenes.iter().map(|s| model.detect(&s.as_chip())).collect()
}

pub fn evaluate_model(model: &Model, scenes: &[LabeledScene], cfg: &TrainConfig) -> Result<(EvaluationReport, Vec<Vec<Detection>>)> {
    let dets = predict(model, scenes);
    let anns: Vec<&Scene> = scenes.iter().map(|s| &s.scene).collect();
    let refs: Vec<&[Detection]> = dets.iter().map(Vec::as_slice).collect();
    Ok((evaluate(&anns, &refs, &cfg.eval)?, dets))
}

/// Trains, checkpoints and evaluates one configuration. Every optimizer
/// step draws from its own seeded stream, so a resumed run replays the
/// same batches as an uninterrupted one.
pub fn train(cfg: &TrainConfig, train_set: &[LabeledScene], test_set: &[LabeledScene], opts: &RunOptions) -> Result<RunRecord> {
    cfg.validate()?;
    if train_set.is_empty() && cfg.iterations > 0 {
        return Err(Error::Empty("training set".into()));
    }
    let started = Instant::now();
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir.join("checkpoints"))?;
    }
    let mut model = Model::build(cfg)?;
    let mut loss_curve = Vec::new();
    let mut start = 0;
    if let Some(path) = &opts.resume {
        let ck = load_checkpoint(path)?;
        if ck.header.config != *cfg {
            return Err(Error::Checkpoint("checkpoint was written with a different config".into()));
        }
        ck.restore(model.store_mut())?;
        start = ck.header.iteration;
        loss_curve = ck.header.loss_curve;
    }
    let opt = Sgd {
        momentum: cfg.momentum as f32,
        weight_decay: cfg.weight_decay as f32,
        clip_norm: cfg.clip_norm.map(|c| c as f32),
    };
    let policy = cfg.sampling_policy();
    let end = opts.stop_after.map_or(cfg.iterations, |s| s.min(cfg.iterations));
    let mut checkpoints = Vec::new();
    let mut diverged_at = None;
    for it in start..end {
        let mut rng = iteration_rng(cfg.seed, it);
        let chips = (0..cfg.batch_size)
            .map(|_| sample_chip(train_set, &policy, &mut rng).map(|c| augment(&c, &cfg.augment, &mut rng)))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Chip> = chips.iter().collect();
        model.store_mut().zero_grad();
        let losses = model.accumulate_gradients(&refs, &mut rng)?;
        let total = losses.total();
        let lr = lr_schedule(it, cfg);
        loss_curve.push(LossRecord {
            iteration: it,
            lr,
            total,
            terms: losses.terms.iter().map(|(k, t)| (k.clone(), t.value)).collect(),
        });
        if !total.is_finite() || !model.store().grad_norm().is_finite() {
            diverged_at = Some(it);
            break;
        }
        opt.step(model.store_mut(), lr as f32);
        if let Some(every) = opts.log_every.filter(|&e| e > 0) {
            if it % every == 0 || it + 1 == end {
                eprintln!("[{:?} seed {}] iter {it:>5}  lr {lr:.2e}  loss {total:.4}", cfg.detector, cfg.seed);
            }
        }
        let done = it + 1;
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < end {
                let p = checkpoint_path(dir, done);
                save_checkpoint(&p, cfg, done, model.store(), &loss_curve)?;
                checkpoints.push(p);
            }
        }
    }
    let converged = diverged_at.is_none();
    let completed = diverged_at.unwrap_or(end.max(start));
    if let Some(dir) = &opts.out_dir {
        if converged {
            let p = checkpoint_path(dir, completed);
            save_checkpoint(&p, cfg, completed, model.store(), &loss_curve)?;
            checkpoints.push(p);
        }
    }
    let finished = completed == cfg.iterations;
    let mut report = None;
    if converged && finished {
        let (r, dets) = evaluate_model(&model, test_set, cfg)?;
        if let Some(dir) = &opts.out_dir {
            let recs: Vec<DetectionRecord> = test_set
                .iter()
                .zip(&dets)
                .flat_map(|(s, d)| d.iter().map(|x| DetectionRecord::from_detection(&s.scene.image_id, x)))
                .collect();
            write_detections(dir.join(DETECTIONS_FILE), &recs)?;
        }
        report = Some(r);
    }
    let record = RunRecord {
        config: cfg.clone(),
        loss_curve,
        checkpoints,
        report,
        iterations_completed: completed,
        converged,
        diverged_at,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    if let Some(dir) = &opts.out_dir {
        write_run_artifacts(dir, &record)?;
    }
    Ok(record)
}

pub fn metrics_of(record: &RunRecord) -> Metrics {
    Metrics {
        detector: record.config.detector,
        seed: record.config.seed,
        iterations: record.iterations_completed,
        converged: record.converged,
        diverged_at: record.diverged_at,
        final_loss: record.loss_curve.last().map(|l| l.total),
        report: record.report.clone(),
    }
}

pub fn loss_curve_csv(curve: &[LossRecord]) -> String {
    let names: Vec<&String> = curve.first().map(|l| l.terms.keys().collect()).unwrap_or_default();
    let mut s = String::from("iteration,lr,total");
    for n in &names {
        write!(s, ",{n}").unwrap();
    }
    s.push('\n');
    for l in curve {
        write!(s, "{},{},{}", l.iteration, l.lr, l.total).unwrap();
        for n in &names {
            write!(s, ",{}", l.terms.get(*n).copied().unwrap_or(f64::NAN)).unwrap();
        }
        s.push('\n');
    }
    s
}

pub(crate) fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{:.2}", 100.0 * x))
}

/// One-row summary table of a single run.
pub fn run_table(record: &RunRecord) -> Table {
    let mut t = Table::new(
        format!("{} (seed {})", record.config.detector.name(), record.config.seed),
        &["Detector", "mAP", "mAP-S", "mAP-M", "mAP-L"],
    );
    let r = record.report.as_ref();
    t.push(vec![
        record.config.detector.name().into(),
        pct(r.and_then(|r| r.map)),
        pct(r.and_then(|r| r.size_bins.small)),
        pct(r.and_then(|r| r.size_bins.medium)),
        pct(r.and_then(|r| r.size_bins.large)),
    ]);
    if !record.converged {
        t.notes.push(format!("run did not converge (non-finite loss at iteration {})", record.diverged_at.unwrap_or(0)));
    }
    t
}

/// `metrics.json`, `run.json`, `loss_curve.csv`, `tables/` and `pr_curves/`.
pub fn write_run_artifacts(dir: &Path, record: &RunRecord) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&metrics_of(record))?)?;
    std::fs::write(dir.join("run.json"), serde_json::to_string_pretty(record)?)?;
    std::fs::write(dir.join("loss_curve.csv"), loss_curve_csv(&record.loss_curve))?;
    std::fs::write(dir.join("config.toml"), record.config.to_toml())?;
    run_table(record).write(dir.join("tables").join("summary.txt"))?;
    if let Some(r) = &record.report {
        write_pr_curves(dir.join("pr_curves"), "", &r.pr_curves)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_set, SyntheticSpec};
    use approx::assert_relative_eq;

    #[test]
    fn schedule_desk_values() {
        let cfg = TrainConfig::default();
        assert_relative_eq!(lr_schedule(0, &cfg), 1e-5, max_relative = 1e-12);
        assert_relative_eq!(lr_schedule(cfg.warmup_iters, &cfg), 0.01, max_relative = 1e-12);
        assert_relative_eq!(lr_schedule(1999, &cfg), 0.01, max_relative = 1e-12);
        assert_relative_eq!(lr_schedule(2500, &cfg), 0.001, max_relative = 1e-12);
        assert_relative_eq!(lr_schedule(2900, &cfg), 0.0001, max_relative = 1e-12);
    }

    proptest::proptest! {
        #[test]
        fn schedule_is_piecewise_monotone(warmup in 0usize..50, a in 50usize..100, b in 100usize..200) {
            let cfg = TrainConfig { warmup_iters: warmup, lr_drop_iters: vec![a, b], iterations: 200, ..Default::default() };
            for s in 1..200 {
                let (prev, cur) = (lr_schedule(s - 1, &cfg), lr_schedule(s, &cfg));
                if s <= warmup {
                    proptest::prop_assert!(cur >= prev);
                } else {
                    proptest::prop_assert!(cur <= prev);
                }
            }
        }
    }

    pub(crate) fn tiny_config(detector: DetectorKind) -> TrainConfig {
        let mut cfg = TrainConfig {
            detector,
            iterations: 4,
            batch_size: 2,
            warmup_iters: 2,
            lr_drop_iters: vec![3],
            checkpoint_every: 2,
            ..Default::default()
        };
        cfg.sampling.chip_size = 64;
        cfg.single_stage.backbone.width = 8;
        cfg.two_stage.backbone.width = 8;
        cfg
    }

    fn tiny_data() -> (Vec<LabeledScene>, Vec<LabeledScene>) {
        let spec = SyntheticSpec {
            width: 96,
            height: 96,
            count_range: (2, 4),
            ..Default::default()
        };
        (
            generate_synthetic_set(&spec, 3, 1, "tr").unwrap(),
            generate_synthetic_set(&spec, 2, 2, "te").unwrap(),
        )
    }

    #[test]
    fn zero_iterations_gives_untrained_evaluation() {
        let (tr, te) = tiny_data();
        let cfg = TrainConfig { iterations: 0, lr_drop_iters: vec![], ..tiny_config(DetectorKind::CenterpointRetinanet) };
        let r = train(&cfg, &tr, &te, &RunOptions::default()).unwrap();
        assert!(r.converged);
        assert!(r.loss_curve.is_empty());
        assert_eq!(r.report.unwrap().num_images, 2);
    }

    #[test]
    fn resumed_run_matches_uninterrupted_run() {
        let (tr, te) = tiny_data();
        for kind in [DetectorKind::CenterpointRetinanet, DetectorKind::CenterpointRcnn] {
            let cfg = tiny_config(kind);
            let full_dir = tempfile::tempdir().unwrap();
            let full = train(&cfg, &tr, &te, &RunOptions { out_dir: Some(full_dir.path().into()), ..Default::default() }).unwrap();

            let dir = tempfile::tempdir().unwrap();
            let opts = RunOptions { out_dir: Some(dir.path().into()), stop_after: Some(2), ..Default::default() };
            let part = train(&cfg, &tr, &te, &opts).unwrap();
            assert!(part.report.is_none());
            let resumed = train(
                &cfg,
                &tr,
                &te,
                &RunOptions { out_dir: Some(dir.path().into()), resume: part.checkpoints.last().cloned(), ..Default::default() },
            )
            .unwrap();
            assert_eq!(full.loss_curve, resumed.loss_curve);
            let a = load_checkpoint(full.checkpoints.last().unwrap()).unwrap();
            let b = load_checkpoint(resumed.checkpoints.last().unwrap()).unwrap();
            let (mut ma, mut mb) = (Model::build(&cfg).unwrap(), Model::build(&cfg).unwrap());
            a.restore(ma.store_mut()).unwrap();
            b.restore(mb.store_mut()).unwrap();
            for (x, y) in ma.store().iter().zip(mb.store().iter()) {
                assert_eq!(x.value.data(), y.value.data(), "{}", x.name);
            }
            assert_eq!(
                std::fs::read(full_dir.path().join("metrics.json")).unwrap(),
                std::fs::read(dir.path().join("metrics.json")).unwrap()
            );
        }
    }

    #[test]
    fn huge_learning_rate_is_reported_as_non_convergence() {
        let (tr, te) = tiny_data();
        let cfg = TrainConfig {
            base_lr: 1e12,
            clip_norm: None,
            warmup_iters: 0,
            iterations: 20,
            lr_drop_iters: vec![],
            ..tiny_config(DetectorKind::CenterpointRetinanet)
        };
        let r = train(&cfg, &tr, &te, &RunOptions::default()).unwrap();
        assert!(!r.converged);
        assert!(r.diverged_at.is_some());
        assert!(r.report.is_none());
    }

    #[test]
    fn loss_csv_has_header_and_rows() {
        let mut terms = BTreeMap::new();
        terms.insert("loss_cls".to_string(), 0.5);
        let csv = loss_curve_csv(&[LossRecord { iteration: 0, lr: 0.1, total: 0.5, terms }]);
        assert_eq!(csv, "iteration,lr,total,loss_cls\n0,0.1,0.5,0.5\n");
    }
}
