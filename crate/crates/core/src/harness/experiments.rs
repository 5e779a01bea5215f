//! Multi-run experiments: detector comparison over seeds, the window-size
//! sweep and the clutter-decile report.

use std::path::Path;

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::config::{DetectorKind, TrainConfig};
use super::train::{pct, predict, train, Model, RunOptions, RunRecord};
use crate::data::{generate_synthetic_scene, LabeledScene, Scene, SyntheticSpec};
use crate::error::{invalid, Result};
use crate::evaluation::{clutter_binned_map, ClutterBin, EvalConfig, Table};
use crate::single_stage::Detection;

/// Window sides swept by default, in pixels.
pub const DEFAULT_WINDOW_SIZES: [f64; 4] = [20.0, 35.0, 70.0, 100.0];

/// `"μ (σ)"` of values scaled to percent, σ the sample standard deviation.
pub fn mean_std_cell(values: &[f64]) -> String {
    if values.is_empty() {
        return "-".into();
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    format!("{:.2} ({:.2})", 100.0 * mean, 100.0 * std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub converged: bool,
    pub map: Option<f64>,
    pub map_small: Option<f64>,
    pub map_medium: Option<f64>,
    pub map_large: Option<f64>,
}

impl SeedRun {
    fn of(record: &RunRecord) -> Self {
        let r = record.report.as_ref();
        Self {
            seed: record.config.seed,
            converged: record.converged,
            map: r.and_then(|r| r.map),
            map_small: r.and_then(|r| r.size_bins.small),
            map_medium: r.and_then(|r| r.size_bins.medium),
            map_large: r.and_then(|r| r.size_bins.large),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub runs: Vec<SeedRun>,
}

impl ComparisonRow {
    /// Converged runs only.
    pub fn kept(&self) -> impl Iterator<Item = &SeedRun> {
        self.runs.iter().filter(|r| r.converged)
    }

    pub fn excluded_seeds(&self) -> Vec<u64> {
        self.runs.iter().filter(|r| !r.converged).map(|r| r.seed).collect()
    }

    fn values(&self, f: impl Fn(&SeedRun) -> Option<f64>) -> Vec<f64> {
        self.kept().filter_map(f).collect()
    }

    pub fn map_values(&self) -> Vec<f64> {
        self.values(|r| r.map)
    }

    pub fn mean_map(&self) -> Option<f64> {
        let v = self.map_values();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    pub fn table(&self) -> Table {
        let mut t = Table::new("Performance of different detectors", &["Detector", "mAP", "mAP-S", "mAP-M", "mAP-L"]);
        for row in &self.rows {
            t.push(vec![
                row.name.clone(),
                mean_std_cell(&row.map_values()),
                mean_std_cell(&row.values(|r| r.map_small)),
                mean_std_cell(&row.values(|r| r.map_medium)),
                mean_std_cell(&row.values(|r| r.map_large)),
            ]);
            let ex = row.excluded_seeds();
            if !ex.is_empty() {
                t.notes.push(format!("{}: seeds {ex:?} did not converge and are omitted", row.name));
            }
        }
        t.notes.push("Values are mean (sample standard deviation) over seeds, in percent.".into());
        t
    }
}

fn run_dir(out: Option<&Path>, name: &str) -> Option<std::path::PathBuf> {
    out.map(|d| d.join("runs").join(name))
}

fn slug(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Trains every named config once per seed. Non-converged runs stay in the
/// rows but are left out of the statistics.
pub fn compare_detectors(
    configs: &[(String, TrainConfig)],
    seeds: &[u64],
    train_set: &[LabeledScene],
    test_set: &[LabeledScene],
    out_dir: Option<&Path>,
    log_every: Option<usize>,
) -> Result<Comparison> {
    if configs.len() < 2 {
        return Err(invalid("comparison needs at least two configs"));
    }
    if seeds.len() < 2 {
        return Err(invalid("comparison needs at least two seeds"));
    }
    let mut rows = Vec::new();
    for (name, base) in configs {
        let mut runs = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..base.clone() };
            let opts = RunOptions {
                out_dir: run_dir(out_dir, &format!("{}_seed{seed}", slug(name))),
                log_every,
                ..Default::default()
            };
            runs.push(SeedRun::of(&train(&cfg, train_set, test_set, &opts)?));
        }
        rows.push(ComparisonRow { name: name.clone(), runs });
    }
    let c = Comparison { rows };
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(&c)?)?;
        c.table().write(dir.join("tables").join("comparison.txt"))?;
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRow {
    pub window_size: f64,
    pub run: SeedRun,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowSweep {
    pub rows: Vec<WindowRow>,
}

impl WindowSweep {
    pub fn table(&self) -> Table {
        let mut t = Table::new("Centerpoint R-CNN window size vs. target size", &["Window Size", "mAP", "mAP-S", "mAP-M", "mAP-L"]);
        for r in &self.rows {
            t.push(vec![
                format!("{}", r.window_size),
                pct(r.run.map),
                pct(r.run.map_small),
                pct(r.run.map_medium),
                pct(r.run.map_large),
            ]);
        }
        t
    }

    /// Largest minus smallest mAP over converged rows.
    pub fn map_spread(&self) -> Option<f64> {
        let v: Vec<f64> = self.rows.iter().filter_map(|r| r.run.map).collect();
        let lo = v.iter().copied().reduce(f64::min)?;
        let hi = v.iter().copied().reduce(f64::max)?;
        Some(hi - lo)
    }
}

/// One Centerpoint R-CNN run per window size, all other settings shared.
pub fn sweep_window(
    sizes: &[f64],
    base: &TrainConfig,
    train_set: &[LabeledScene],
    test_set: &[LabeledScene],
    out_dir: Option<&Path>,
    log_every: Option<usize>,
) -> Result<WindowSweep> {
    if sizes.is_empty() {
        return Err(invalid("window sweep needs at least one size"));
    }
    let mut rows = Vec::new();
    for &w in sizes {
        let mut cfg = TrainConfig {
            detector: DetectorKind::CenterpointRcnn,
            ..base.clone()
        };
        cfg.two_stage.window_size = w;
        let opts = RunOptions {
            out_dir: run_dir(out_dir, &format!("window_{w}")),
            log_every,
            ..Default::default()
        };
        rows.push(WindowRow {
            window_size: w,
            run: SeedRun::of(&train(&cfg, train_set, test_set, &opts)?),
        });
    }
    let s = WindowSweep { rows };
    if let Some(dir) = out_dir {
        std::fs::write(dir.join("window_sweep.json"), serde_json::to_string_pretty(&s)?)?;
        s.table().write(dir.join("tables").join("window_sweep.txt"))?;
    }
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClutterReport {
    pub bins: Vec<ClutterBin>,
}

impl ClutterReport {
    pub fn table(&self) -> Table {
        let mut header = vec!["Percentile of ratio"];
        header.extend(self.bins.iter().map(|b| b.label.as_str()));
        let mut t = Table::new("Effect of clutter on performance", &header);
        let mut images = vec!["Images".to_string()];
        images.extend(self.bins.iter().map(|b| b.image_ids.len().to_string()));
        let mut map = vec!["mAP".to_string()];
        map.extend(self.bins.iter().map(|b| pct(b.map)));
        t.push(images);
        t.push(map);
        t
    }
}

/// Clutter deciles from precomputed detections.
pub fn clutter_report_from(scenes: &[LabeledScene], dets: &[Vec<Detection>], cfg: &EvalConfig) -> Result<ClutterReport> {
    let anns: Vec<&Scene> = scenes.iter().map(|s| &s.scene).collect();
    let refs: Vec<&[Detection]> = dets.iter().map(Vec::as_slice).collect();
    Ok(ClutterReport {
        bins: clutter_binned_map(&anns, &refs, cfg)?,
    })
}

/// Runs a trained model on the test scenes and bins them by clutter.
pub fn clutter_report(model: &Model, test_set: &[LabeledScene], cfg: &EvalConfig) -> Result<ClutterReport> {
    clutter_report_from(test_set, &predict(model, test_set), cfg)
}

/// Scenes whose object count rises linearly from `counts.0` to `counts.1`.
pub fn density_spectrum_set(spec: &SyntheticSpec, n: usize, counts: (usize, usize), seed: u64, prefix: &str) -> Result<Vec<LabeledScene>> {
    (0..n)
        .map(|i| {
            let t = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            let count = (counts.0 as f64 + t * (counts.1 as f64 - counts.0 as f64)).round() as usize;
            let s = SyntheticSpec {
                count: Some(count),
                ..spec.clone()
            };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            generate_synthetic_scene(&s, &mut rng, &format!("{prefix}{i:05}"))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_use_sample_std() {
        assert_eq!(mean_std_cell(&[0.6068 - 0.005, 0.6068 + 0.005]), "60.68 (0.71)");
        assert_eq!(mean_std_cell(&[0.5]), "50.00 (0.00)");
        assert_eq!(mean_std_cell(&[]), "-");
    }

    #[test]
    fn excluded_runs_do_not_enter_statistics() {
        let run = |seed, converged, map| SeedRun {
            seed,
            converged,
            map,
            map_small: None,
            map_medium: None,
            map_large: None,
        };
        let row = ComparisonRow {
            name: "x".into(),
            runs: vec![run(0, true, Some(0.5)), run(1, false, None), run(2, true, Some(0.7))],
        };
        assert_eq!(row.excluded_seeds(), vec![1]);
        assert_eq!(row.map_values(), vec![0.5, 0.7]);
        let t = Comparison { rows: vec![row] }.table().render();
        assert!(t.contains("60.00 (14.14)"));
        assert!(t.contains("seeds [1] did not converge"));
    }

    #[test]
    fn density_spectrum_is_monotone() {
        let spec = SyntheticSpec { width: 128, height: 128, ..Default::default() };
        let s = density_spectrum_set(&spec, 5, (0, 8), 3, "d").unwrap();
        let counts: Vec<usize> = s.iter().map(|s| s.scene.objects.len()).collect();
        assert_eq!(counts, vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn argument_checks() {
        let cfg = TrainConfig::default();
        assert!(compare_detectors(&[("a".into(), cfg.clone())], &[0, 1], &[], &[], None, None).is_err());
        assert!(compare_detectors(&[("a".into(), cfg.clone()), ("b".into(), cfg.clone())], &[0], &[], &[], None, None).is_err());
        assert!(sweep_window(&[], &cfg, &[], &[], None, None).is_err());
    }
}
