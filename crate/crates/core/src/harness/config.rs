use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentPolicy, SamplingPolicy, SyntheticSpec};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::single_stage::{HeadKind, SingleStageConfig};
use crate::two_stage::{TwoStageConfig, TwoStageKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DetectorKind {
    CenterpointRetinanet,
    BoxRetinanet,
    CenterpointRcnn,
    BoxRcnn,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 4] = [
        DetectorKind::CenterpointRetinanet,
        DetectorKind::BoxRetinanet,
        DetectorKind::CenterpointRcnn,
        DetectorKind::BoxRcnn,
    ];

    pub fn is_two_stage(self) -> bool {
        matches!(self, DetectorKind::CenterpointRcnn | DetectorKind::BoxRcnn)
    }

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::CenterpointRetinanet => "Centerpoint RetinaNet",
            DetectorKind::BoxRetinanet => "RetinaNet (boxes)",
            DetectorKind::CenterpointRcnn => "Centerpoint R-CNN",
            DetectorKind::BoxRcnn => "Faster R-CNN (boxes)",
        }
    }
}

/// A full experiment configuration. The defaults are the desk-scale
/// schedule: 3000 iterations of batch 8, lr drops at 2000 and 2667.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub detector: DetectorKind,
    pub num_classes: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_iters: usize,
    pub lr_drop_iters: Vec<usize>,
    pub lr_drop_factor: f64,
    pub seed: u64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip.
    pub clip_norm: Option<f64>,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Kept for config compatibility; training is single-threaded and
    /// always reproducible.
    pub deterministic: bool,
    pub sampling: SamplingPolicy,
    pub augment: AugmentPolicy,
    pub single_stage: SingleStageConfig,
    pub two_stage: TwoStageConfig,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            detector: DetectorKind::CenterpointRetinanet,
            num_classes: 3,
            iterations: 3000,
            batch_size: 8,
            base_lr: 0.01,
            warmup_iters: 33,
            lr_drop_iters: vec![2000, 2667],
            lr_drop_factor: 0.1,
            seed: 0,
            momentum: 0.9,
            weight_decay: 1e-4,
            clip_norm: Some(10.0),
            checkpoint_every: 1000,
            deterministic: true,
            sampling: SamplingPolicy {
                chip_size: 128,
                ..Default::default()
            },
            augment: AugmentPolicy::default(),
            single_stage: SingleStageConfig::default(),
            two_stage: TwoStageConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive".into());
        }
        if !(self.lr_drop_factor > 0.0 && self.lr_drop_factor < 1.0) {
            return bad("lr_drop_factor must lie in (0, 1)".into());
        }
        if self.lr_drop_iters.windows(2).any(|w| w[0] > w[1]) {
            return bad("lr_drop_iters must be ascending".into());
        }
        if let Some(&last) = self.lr_drop_iters.last() {
            if self.iterations > 0 && last >= self.iterations {
                return bad(format!("lr drop at {last} is not before iteration {}", self.iterations));
            }
        }
        if self.sampling.chip_size % crate::backbone::MAX_STRIDE != 0 {
            return bad(format!("chip_size must be a multiple of {}", crate::backbone::MAX_STRIDE));
        }
        self.sampling.validate()?;
        self.single_stage_config().validate()?;
        self.two_stage_config().validate()?;
        Ok(())
    }

    /// Single-stage settings with the detector kind and class count applied.
    pub fn single_stage_config(&self) -> SingleStageConfig {
        SingleStageConfig {
            num_classes: self.num_classes,
            head: match self.detector {
                DetectorKind::BoxRetinanet => HeadKind::Box,
                _ => HeadKind::Centerpoint,
            },
            ..self.single_stage.clone()
        }
    }

    pub fn two_stage_config(&self) -> TwoStageConfig {
        TwoStageConfig {
            num_classes: self.num_classes,
            kind: match self.detector {
                DetectorKind::BoxRcnn => TwoStageKind::Box,
                _ => TwoStageKind::Centerpoint,
            },
            ..self.two_stage.clone()
        }
    }

    pub fn sampling_policy(&self) -> SamplingPolicy {
        SamplingPolicy {
            num_classes: Some(self.num_classes),
            ..self.sampling.clone()
        }
    }
}

/// Synthetic train/test split written by `generate-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub spec: SyntheticSpec,
    pub num_train: usize,
    pub num_test: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            spec: SyntheticSpec::default(),
            num_train: 500,
            num_test: 100,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.spec.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip_and_partial_files() {
        let cfg = TrainConfig {
            detector: DetectorKind::BoxRcnn,
            seed: 7,
            ..Default::default()
        };
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = TrainConfig::from_toml("detector = \"centerpoint-rcnn\"\niterations = 10\nlr_drop_iters = [5]\n[two_stage]\nwindow_size = 35.0\n").unwrap();
        assert_eq!(partial.two_stage_config().window_size, 35.0);
        assert_eq!(partial.batch_size, 8);
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn invariants_are_checked() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { lr_drop_iters: vec![2667, 2000], ..ok.clone() },
            TrainConfig { lr_drop_iters: vec![3000], ..ok.clone() },
            TrainConfig { lr_drop_factor: 1.0, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn kind_is_applied_to_module_configs() {
        let cfg = TrainConfig {
            detector: DetectorKind::BoxRetinanet,
            num_classes: 5,
            ..Default::default()
        };
        assert_eq!(cfg.single_stage_config().head, HeadKind::Box);
        assert_eq!(cfg.single_stage_config().num_classes, 5);
        assert_eq!(cfg.two_stage_config().kind, TwoStageKind::Centerpoint);
        assert_eq!(cfg.sampling_policy().num_classes, Some(5));
    }

    #[test]
    fn documented_example_parses() {
        let cfg = TrainConfig::from_toml(DOCUMENTED).unwrap();
        assert_eq!(cfg, TrainConfig::default());
    }

    const DOCUMENTED: &str = r#"
detector = "centerpoint-retinanet"   # box-retinanet | centerpoint-rcnn | box-rcnn
num_classes = 3
iterations = 3000
batch_size = 8
base_lr = 0.01
warmup_iters = 33                   # linear from base_lr / 1000
lr_drop_iters = [2000, 2667]
lr_drop_factor = 0.1
seed = 0
momentum = 0.9
weight_decay = 1e-4
clip_norm = 10.0
checkpoint_every = 1000

[sampling]
chip_size = 128
random_fraction = 0.5               # rest is class-balanced
gsd_range = [0.1, 0.15]             # target m/px when the scene GSD is known
scale_range = [0.667, 1.5]          # otherwise a random resize

[augment]
rotate = true
flip = true
color_jitter = 0.2

[single_stage]
positive_radius = 1.0               # in units of the level stride
nms_radius = 5.0

[two_stage]
window_size = 70.0                  # imputed window side, px
mask_mode = "sigmoid_then_pool"     # pool_then_sigmoid | forced_one | disabled

[eval.thresholds]
meters = 3.0
pixels = 10.0
"#;
}
