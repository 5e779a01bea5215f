//! Centerpoint RetinaNet and its horizontal-box counterpart.
//!
//! Both share the backbone and the shared per-level towers; they differ in
//! the number of anchors per location, the regression width (2 offsets vs.
//! 4 box deltas) and the assignment rule.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{
    decode_box_deltas, decode_offsets, generate_anchor_boxes, iou_match,
    match_centerpoints, AnchorBoxConfig, AnchorLabel, AnchorSet, AssignmentResult, IouThresholds,
};
use crate::backbone::{chips_to_tensor, Backbone, BackboneConfig, PYRAMID_STRIDES};
use crate::data::Chip;
use crate::error::{Error, Result};
use crate::geometry::{GroundTruthObject, HorizontalBox, Point2D};
use crate::losses::{focal_loss_sum, smooth_l1, LossBundle, TermKind};
use crate::nn::{sigmoid, Conv2d, Graph, ParamStore, Tensor, Var};

/// A detection reduced to its center, with the box kept when the head
/// predicts one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub center: Point2D,
    pub class_id: u32,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hbox: Option<HorizontalBox>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One anchor point per cell regressing a 2-D center offset.
    Centerpoint,
    /// Anchor boxes regressing `(dx, dy, dw, dh)`.
    Box,
}

pub fn default_anchor_boxes() -> AnchorBoxConfig {
    AnchorBoxConfig {
        sizes: vec![vec![16.0, 24.0], vec![32.0, 48.0]],
        aspect_ratios: vec![0.5, 1.0, 2.0],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SingleStageConfig {
    pub num_classes: usize,
    pub head: HeadKind,
    pub backbone: BackboneConfig,
    /// Centerpoint positive radius in strides.
    pub positive_radius: f64,
    pub anchor_boxes: AnchorBoxConfig,
    pub iou_thresholds: IouThresholds,
    pub focal_alpha: Option<f64>,
    pub focal_gamma: f64,
    pub smooth_l1_beta: f64,
    pub regression_weight: f64,
    pub prior_prob: f64,
    pub score_threshold: f64,
    pub nms_radius: f64,
    pub box_nms_iou: f64,
    /// Candidates per level kept before suppression.
    pub pre_nms_top_n: usize,
    pub max_detections: usize,
}

impl Default for SingleStageConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            head: HeadKind::Centerpoint,
            backbone: BackboneConfig::default(),
            positive_radius: 1.0,
            anchor_boxes: default_anchor_boxes(),
            iou_thresholds: IouThresholds::default(),
            focal_alpha: Some(0.25),
            focal_gamma: 2.0,
            smooth_l1_beta: 0.1,
            regression_weight: 1.0,
            prior_prob: 0.01,
            score_threshold: 0.05,
            nms_radius: 5.0,
            box_nms_iou: 0.5,
            pre_nms_top_n: 1000,
            max_detections: 100,
        }
    }
}

impl SingleStageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.positive_radius <= 0.0 || self.smooth_l1_beta < 0.0 || self.nms_radius < 0.0 {
            return Err(Error::Config("radii and beta must be non-negative".into()));
        }
        if self.head == HeadKind::Box && self.anchor_boxes.sizes.len() != PYRAMID_STRIDES.len() {
            return Err(Error::Config(format!(
                "anchor_boxes.sizes needs one entry per level ({})",
                PYRAMID_STRIDES.len()
            )));
        }
        Ok(())
    }

    pub fn anchors_per_location(&self) -> usize {
        match self.head {
            HeadKind::Centerpoint => 1,
            HeadKind::Box => self.anchor_boxes.per_location(),
        }
    }

    pub fn regression_dim(&self) -> usize {
        match self.head {
            HeadKind::Centerpoint => 2,
            HeadKind::Box => 4,
        }
    }
}

/// Head outputs of one pyramid level for a batch: logits `N×(A·K)×H×W`,
/// regression `N×(A·D)×H×W`.
#[derive(Debug, Clone)]
pub struct LevelPredictions {
    pub stride: usize,
    pub logits: Tensor,
    pub regression: Tensor,
}

#[derive(Debug, Clone)]
pub struct RawPredictions {
    pub levels: Vec<LevelPredictions>,
}

impl RawPredictions {
    pub fn batch_size(&self) -> usize {
        self.levels[0].logits.shape()[0]
    }

    pub fn anchor_set(&self) -> AnchorSet {
        AnchorSet {
            levels: self
                .levels
                .iter()
                .map(|l| {
                    let s = l.logits.shape();
                    crate::assignment::AnchorLevel {
                        stride: l.stride as f64,
                        rows: s[2],
                        cols: s[3],
                    }
                })
                .collect(),
        }
    }
}

/// Assignment of one chip together with the class of every GT it refers to.
#[derive(Debug, Clone)]
pub struct ChipTargets {
    pub assignment: AssignmentResult,
    pub classes: Vec<u32>,
}

/// Gradients matching [`RawPredictions`] level by level.
#[derive(Debug, Clone)]
pub struct PredictionGrads {
    pub levels: Vec<(Tensor, Tensor)>,
}

/// Flat view mapping `(image, anchor, channel)` onto level tensors.
struct Layout {
    /// (point offset, rows, cols) per level
    levels: Vec<(usize, usize, usize)>,
}

impl Layout {
    fn new(raw: &RawPredictions) -> Self {
        let mut off = 0;
        let levels = raw
            .levels
            .iter()
            .map(|l| {
                let s = l.logits.shape();
                let e = (off, s[2], s[3]);
                off += s[2] * s[3];
                e
            })
            .collect();
        Self { levels }
    }

    fn points(&self) -> usize {
        self.levels.iter().map(|&(_, r, c)| r * c).sum()
    }

    /// Level and spatial index of a global point index.
    fn locate(&self, point: usize) -> (usize, usize) {
        for (l, &(off, r, c)) in self.levels.iter().enumerate() {
            if point < off + r * c {
                return (l, point - off);
            }
        }
        panic!("point index {point} out of range")
    }

    fn channel_index(raw_shape: &[usize], n: usize, ch: usize, spatial: usize) -> usize {
        let (c, h, w) = (raw_shape[1], raw_shape[2], raw_shape[3]);
        (n * c + ch) * h * w + spatial
    }
}

#[derive(Debug, Clone)]
pub struct SingleStageDetector {
    pub config: SingleStageConfig,
    pub store: ParamStore,
    backbone: Backbone,
    cls_tower: Conv2d,
    cls_out: Conv2d,
    reg_tower: Conv2d,
    reg_out: Conv2d,
}

impl SingleStageDetector {
    pub fn new<R: Rng + ?Sized>(config: SingleStageConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.backbone, rng);
        let f = config.backbone.fpn_channels;
        let a = config.anchors_per_location();
        let prior_bias = -((1.0 - config.prior_prob) / config.prior_prob).ln() as f32;
        let cls_tower = Conv2d::he(&mut store, "head.cls_tower", f, f, 3, 1, rng);
        let cls_out = Conv2d::normal(&mut store, "head.cls_out", f, a * config.num_classes, 3, 1, 0.01, prior_bias, rng);
        let reg_tower = Conv2d::he(&mut store, "head.reg_tower", f, f, 3, 1, rng);
        let reg_out = Conv2d::normal(&mut store, "head.reg_out", f, a * config.regression_dim(), 3, 1, 0.01, 0.0, rng);
        Ok(Self {
            config,
            store,
            backbone,
            cls_tower,
            cls_out,
            reg_tower,
            reg_out,
        })
    }

    /// Per-level `(logits, regression)` handles.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Vec<(usize, Var, Var)> {
        let s = &self.store;
        let pyramid = self.backbone.forward(g, s, x);
        pyramid
            .levels
            .iter()
            .map(|lvl| {
                let t = self.cls_tower.forward(g, s, lvl.feature);
                let t = g.relu(t);
                let logits = self.cls_out.forward(g, s, t);
                let r = self.reg_tower.forward(g, s, lvl.feature);
                let r = g.relu(r);
                let reg = self.reg_out.forward(g, s, r);
                (lvl.stride, logits, reg)
            })
            .collect()
    }

    fn collect(g: &Graph, outs: &[(usize, Var, Var)]) -> RawPredictions {
        RawPredictions {
            levels: outs
                .iter()
                .map(|&(stride, l, r)| LevelPredictions {
                    stride,
                    logits: g.value(l).clone(),
                    regression: g.value(r).clone(),
                })
                .collect(),
        }
    }

    /// Evaluation-mode forward pass over same-sized chips.
    pub fn forward(&self, chips: &[&Chip]) -> RawPredictions {
        let mut g = Graph::new(false);
        let x = g.input(chips_to_tensor(chips));
        let outs = self.forward_graph(&mut g, x);
        Self::collect(&g, &outs)
    }

    pub fn assign(&self, anchors: &AnchorSet, objects: &[GroundTruthObject]) -> Result<ChipTargets> {
        let assignment = match self.config.head {
            HeadKind::Centerpoint => match_centerpoints(anchors, objects, self.config.positive_radius),
            HeadKind::Box => {
                let boxes = anchor_boxes(anchors, &self.config.anchor_boxes);
                let gts = objects
                    .iter()
                    .map(|o| {
                        o.horizontal_box()
                            .ok_or_else(|| Error::InvalidArgument("box head needs box annotations".into()))
                    })
                    .collect::<Result<Vec<_>>>()?;
                iou_match(&boxes, &gts, self.config.iou_thresholds)
            }
        };
        Ok(ChipTargets {
            assignment,
            classes: objects.iter().map(|o| o.class_id).collect(),
        })
    }

    /// Focal classification over positives and negatives plus smooth-L1
    /// regression over positives, both normalized by the batch's positive
    /// count. Returns the gradients w.r.t. every prediction tensor.
    pub fn compute_losses(
        &self,
        raw: &RawPredictions,
        targets: &[ChipTargets],
    ) -> Result<(LossBundle, PredictionGrads)> {
        let cfg = &self.config;
        let (a, k, d) = (cfg.anchors_per_location(), cfg.num_classes, cfg.regression_dim());
        let lay = Layout::new(raw);
        if targets.len() != raw.batch_size() {
            return Err(Error::LengthMismatch {
                left: targets.len(),
                right: raw.batch_size(),
            });
        }
        let npos: usize = targets.iter().map(|t| t.assignment.num_positive()).sum();
        let norm = npos.max(1) as f64;

        let mut logits = Vec::new();
        let mut labels = Vec::new();
        let mut logit_idx = Vec::new();
        let mut preds = Vec::new();
        let mut goals = Vec::new();
        let mut reg_idx = Vec::new();
        for (n, ct) in targets.iter().enumerate() {
            let t = &ct.assignment;
            if t.labels.len() != lay.points() * a {
                return Err(Error::LengthMismatch {
                    left: t.labels.len(),
                    right: lay.points() * a,
                });
            }
            for (j, label) in t.labels.iter().enumerate() {
                if *label == AnchorLabel::Ignore {
                    continue;
                }
                let (point, ai) = (j / a, j % a);
                let (l, sp) = lay.locate(point);
                let lv = &raw.levels[l];
                let gt_class = label.gt().map(|g| ct.classes[g] as usize);
                for c in 0..k {
                    let idx = Layout::channel_index(lv.logits.shape(), n, ai * k + c, sp);
                    logits.push(lv.logits.data()[idx] as f64);
                    labels.push(gt_class == Some(c));
                    logit_idx.push((l, idx));
                }
                if label.is_positive() {
                    let tgt = t.target(j);
                    for e in 0..d {
                        let idx = Layout::channel_index(lv.regression.shape(), n, ai * d + e, sp);
                        preds.push(lv.regression.data()[idx] as f64);
                        goals.push(tgt[e]);
                        reg_idx.push((l, idx));
                    }
                }
            }
        }
        let cls = focal_loss_sum(&logits, &labels, cfg.focal_alpha, cfg.focal_gamma).scaled(1.0 / norm);
        let reg = smooth_l1(&preds, &goals, cfg.smooth_l1_beta)?.scaled(1.0 / norm);

        let mut grads: Vec<(Tensor, Tensor)> = raw
            .levels
            .iter()
            .map(|l| (Tensor::zeros(l.logits.shape()), Tensor::zeros(l.regression.shape())))
            .collect();
        for (&(l, idx), gv) in logit_idx.iter().zip(&cls.grad) {
            grads[l].0.data_mut()[idx] += *gv as f32;
        }
        for (&(l, idx), gv) in reg_idx.iter().zip(&reg.grad) {
            grads[l].1.data_mut()[idx] += (*gv * cfg.regression_weight) as f32;
        }
        let mut bundle = LossBundle::default();
        bundle.push("loss_cls", TermKind::Classification, 1.0, cls.value);
        bundle.push("loss_reg", TermKind::Regression, cfg.regression_weight, reg.value);
        Ok((bundle, PredictionGrads { levels: grads }))
    }

    /// Forward, loss and backward on a batch; gradients are added to the
    /// parameter store.
    pub fn accumulate_gradients(&mut self, chips: &[&Chip]) -> Result<LossBundle> {
        let mut g = Graph::new(true);
        let x = g.input(chips_to_tensor(chips));
        let outs = self.forward_graph(&mut g, x);
        let raw = Self::collect(&g, &outs);
        let anchors = raw.anchor_set();
        let targets = chips
            .iter()
            .map(|c| self.assign(&anchors, &c.objects))
            .collect::<Result<Vec<_>>>()?;
        let (bundle, grads) = self.compute_losses(&raw, &targets)?;
        let mut seeds = Vec::with_capacity(2 * outs.len());
        for (&(_, l, r), (gl, gr)) in outs.iter().zip(grads.levels) {
            seeds.push((l, gl));
            seeds.push((r, gr));
        }
        g.backward(seeds).accumulate_into(&mut self.store);
        Ok(bundle)
    }

    pub fn infer(&self, chip: &Chip, score_threshold: f64, nms_radius: f64) -> Vec<Detection> {
        let raw = self.forward(&[chip]);
        self.decode(&raw, 0, score_threshold, nms_radius)
    }

    /// Detections with the configured thresholds, on a chip padded to the
    /// backbone's stride.
    pub fn detect(&self, chip: &Chip) -> Vec<Detection> {
        let padded = chip.padded_to_multiple(crate::backbone::MAX_STRIDE);
        self.infer(&padded, self.config.score_threshold, self.config.nms_radius)
    }

    /// Decodes image `n` of a batch: score threshold, per-level top-k,
    /// suppression, then truncation to `max_detections`.
    pub fn decode(&self, raw: &RawPredictions, n: usize, score_threshold: f64, nms_radius: f64) -> Vec<Detection> {
        let cfg = &self.config;
        let (a, k, d) = (cfg.anchors_per_location(), cfg.num_classes, cfg.regression_dim());
        let anchors = raw.anchor_set();
        let boxes = (cfg.head == HeadKind::Box).then(|| anchor_boxes(&anchors, &cfg.anchor_boxes));
        let mut out = Vec::new();
        let mut point_base = 0;
        for (l, lv) in raw.levels.iter().enumerate() {
            let level = anchors.levels[l];
            let spatial = level.rows * level.cols;
            let ls = lv.logits.shape();
            let mut cands: Vec<(f64, usize, usize, usize)> = Vec::new();
            for ai in 0..a {
                for c in 0..k {
                    let base = (n * ls[1] + ai * k + c) * spatial;
                    for sp in 0..spatial {
                        let s = sigmoid(lv.logits.data()[base + sp]) as f64;
                        if s > score_threshold {
                            cands.push((s, sp, ai, c));
                        }
                    }
                }
            }
            cands.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2, x.3).cmp(&(y.1, y.2, y.3))));
            cands.truncate(cfg.pre_nms_top_n);
            let rs = lv.regression.shape();
            let reg = |e: usize, ai: usize, sp: usize| -> f64 {
                lv.regression.data()[((n * rs[1] + ai * d + e) * spatial) + sp] as f64
            };
            for (score, sp, ai, c) in cands {
                let point = level.point(sp / level.cols, sp % level.cols);
                let det = match cfg.head {
                    HeadKind::Centerpoint => Detection {
                        center: decode_offsets(&point, [reg(0, ai, sp), reg(1, ai, sp)], level.stride),
                        class_id: c as u32,
                        score,
                        hbox: None,
                    },
                    HeadKind::Box => {
                        let anchor = boxes.as_ref().unwrap()[(point_base + sp) * a + ai];
                        let b = decode_box_deltas(
                            &anchor,
                            [reg(0, ai, sp), reg(1, ai, sp), reg(2, ai, sp), reg(3, ai, sp)],
                        );
                        Detection {
                            center: b.center(),
                            class_id: c as u32,
                            score,
                            hbox: Some(b),
                        }
                    }
                };
                if det.center.is_finite() {
                    out.push(det);
                }
            }
            point_base += spatial;
        }
        let mut kept = match cfg.head {
            HeadKind::Centerpoint => radius_nms(&out, nms_radius),
            HeadKind::Box => iou_nms(&out, cfg.box_nms_iou),
        };
        kept.truncate(cfg.max_detections);
        kept
    }
}

fn anchor_boxes(anchors: &AnchorSet, cfg: &AnchorBoxConfig) -> Vec<HorizontalBox> {
    generate_anchor_boxes(anchors, cfg)
}

fn canonical_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.center.x.total_cmp(&b.center.x))
        .then(a.center.y.total_cmp(&b.center.y))
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy same-class suppression by center distance. A detection survives
/// iff no higher-ranked survivor of its class lies within `radius`
/// (strictly closer than or at the radius). Output is sorted by score and
/// does not depend on input order.
pub fn radius_nms(dets: &[Detection], radius: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(canonical_order);
    if radius <= 0.0 {
        return sorted;
    }
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && k.center.distance(&d.center) <= radius);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// Standard per-class IoU suppression on the detections' boxes. Detections
/// without a box only suppress by exact center coincidence.
pub fn iou_nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut sorted = dets.to_vec();
    sorted.sort_by(canonical_order);
    let mut kept: Vec<Detection> = Vec::with_capacity(sorted.len());
    for d in sorted {
        let suppressed = kept.iter().any(|k| {
            k.class_id == d.class_id
                && match (k.hbox, d.hbox) {
                    (Some(a), Some(b)) => a.iou(&b) > iou_threshold,
                    _ => k.center == d.center,
                }
        });
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::{encode_box_deltas, generate_anchor_points};
    use crate::data::{generate_synthetic_scene, Image, SyntheticSpec};
    use crate::nn::Sgd;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn det(x: f64, y: f64, class_id: u32, score: f64) -> Detection {
        Detection {
            center: Point2D::new(x, y),
            class_id,
            score,
            hbox: None,
        }
    }

    fn chip(pixels: Image, objects: Vec<GroundTruthObject>) -> Chip {
        Chip {
            pixels,
            origin: Point2D::new(0.0, 0.0),
            scale: 1.0,
            objects,
            gsd: None,
            sampled_class: None,
        }
    }

    fn model(cfg: SingleStageConfig) -> SingleStageDetector {
        SingleStageDetector::new(cfg, &mut rng()).unwrap()
    }

    /// One stride-8 level with `rows×cols` cells and constant outputs.
    fn raw_single(rows: usize, cols: usize, k: usize, d: usize, logit: f32) -> RawPredictions {
        RawPredictions {
            levels: vec![LevelPredictions {
                stride: 8,
                logits: Tensor::full(&[1, k, rows, cols], logit),
                regression: Tensor::zeros(&[1, d, rows, cols]),
            }],
        }
    }

    #[test]
    fn output_shapes_match_strides() {
        let m = model(SingleStageConfig::default());
        let c = chip(Image::from_elem((64, 64, 3), 0.3), vec![]);
        let raw = m.forward(&[&c]);
        assert_eq!(raw.levels[0].logits.shape(), &[1, 3, 8, 8]);
        assert_eq!(raw.levels[1].logits.shape(), &[1, 3, 4, 4]);
        assert_eq!(raw.levels[0].regression.shape(), &[1, 2, 8, 8]);

        let b = model(SingleStageConfig {
            head: HeadKind::Box,
            ..Default::default()
        });
        let raw = b.forward(&[&c]);
        assert_eq!(raw.levels[1].regression.shape(), &[1, 4 * 6, 4, 4]);
        assert_eq!(raw.levels[1].logits.shape(), &[1, 3 * 6, 4, 4]);
    }

    #[test]
    fn zero_head_weights_emit_bias() {
        let mut m = model(SingleStageConfig::default());
        m.store.get_mut(m.cls_out.weight).value.fill(0.0);
        m.store.get_mut(m.reg_out.weight).value.fill(0.0);
        let c = chip(Image::from_elem((32, 32, 3), 0.7), vec![]);
        let raw = m.forward(&[&c]);
        let bias = -(99.0f32).ln();
        for l in &raw.levels {
            assert!(l.logits.data().iter().all(|&v| (v - bias).abs() < 1e-6));
            assert!(l.regression.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn interior_predictions_shift_with_the_input() {
        let m = model(SingleStageConfig::default());
        let mut base = Image::from_elem((256, 256, 3), 0.5);
        let mut shifted = base.clone();
        let mut r = rng();
        for y in 100..140 {
            for x in 100..140 {
                for ch in 0..3 {
                    let v: f32 = r.random();
                    base[[y, x, ch]] = v;
                    shifted[[y + 16, x + 16, ch]] = v;
                }
            }
        }
        let a = m.forward(&[&chip(base, vec![])]);
        let b = m.forward(&[&chip(shifted, vec![])]);
        for (la, lb) in a.levels.iter().zip(&b.levels) {
            let s = la.logits.shape();
            let (h, w) = (s[2], s[3]);
            let cells = 16 / la.stride;
            let lo = 96 / la.stride;
            let hi = (256 - 96) / la.stride - cells;
            let mut max_err = 0.0f32;
            for ch in 0..s[1] {
                for y in lo..hi {
                    for x in lo..hi {
                        let va = la.logits.data()[(ch * h + y) * w + x];
                        let vb = lb.logits.data()[(ch * h + y + cells) * w + x + cells];
                        max_err = max_err.max((va - vb).abs());
                    }
                }
            }
            assert!(max_err < 1e-4, "stride {}: {max_err}", la.stride);
        }
    }

    #[test]
    fn perfect_predictions_give_near_zero_loss() {
        let m = model(SingleStageConfig {
            num_classes: 1,
            ..Default::default()
        });
        let anchors = generate_anchor_points(16, 16, &[8]);
        let gt = GroundTruthObject::from_center(Point2D::new(5.0, 6.0), 0);
        let t = m.assign(&anchors, &[gt]).unwrap();
        let mut raw = raw_single(2, 2, 1, 2, -30.0);
        for (i, g) in t.assignment.positives() {
            assert_eq!(g, 0);
            raw.levels[0].logits.data_mut()[i] = 30.0;
            let tgt = t.assignment.target(i);
            raw.levels[0].regression.data_mut()[i] = tgt[0] as f32;
            raw.levels[0].regression.data_mut()[4 + i] = tgt[1] as f32;
        }
        let (b, _) = m.compute_losses(&raw, &[t]).unwrap();
        assert!(b.total() < 1e-9, "{b:?}");
    }

    #[test]
    fn empty_ground_truth_leaves_background_term() {
        let m = model(SingleStageConfig {
            num_classes: 1,
            ..Default::default()
        });
        let anchors = generate_anchor_points(16, 16, &[8]);
        let t = m.assign(&anchors, &[]).unwrap();
        let raw = raw_single(2, 2, 1, 2, 0.0);
        let (b, _) = m.compute_losses(&raw, &[t]).unwrap();
        assert_eq!(b.get("loss_reg"), Some(0.0));
        // 4 negatives at p = 0.5: 0.75 · 0.25 · ln 2 each
        assert_abs_diff_eq!(b.get("loss_cls").unwrap(), 4.0 * 0.75 * 0.25 * 2f64.ln(), epsilon = 1e-9);
    }

    #[test]
    fn single_positive_offset_error_half_stride() {
        let m = model(SingleStageConfig {
            num_classes: 1,
            smooth_l1_beta: 1.0,
            ..Default::default()
        });
        let anchors = generate_anchor_points(8, 8, &[8]);
        let t = m.assign(&anchors, &[GroundTruthObject::from_center(Point2D::new(4.0, 4.0), 0)]).unwrap();
        let mut raw = raw_single(1, 1, 1, 2, 0.0);
        raw.levels[0].regression.data_mut()[0] = 0.5;
        let (b, g) = m.compute_losses(&raw, &[t]).unwrap();
        assert_abs_diff_eq!(b.get("loss_reg").unwrap(), 0.125, epsilon = 1e-12);
        assert_abs_diff_eq!(g.levels[0].1.data()[0], 0.5, epsilon = 1e-7);
    }

    #[test]
    fn decode_applies_offsets_and_threshold() {
        let m = model(SingleStageConfig {
            num_classes: 1,
            ..Default::default()
        });
        let mut raw = raw_single(2, 2, 1, 2, -10.0);
        assert!(m.decode(&raw, 0, 0.05, 5.0).is_empty());
        raw.levels[0].logits.data_mut()[0] = 10.0;
        raw.levels[0].regression.data_mut()[0] = 0.25;
        raw.levels[0].regression.data_mut()[4] = 0.25;
        let d = m.decode(&raw, 0, 0.05, 5.0);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].center, Point2D::new(6.0, 6.0));
        assert_eq!(decode_offsets(&Point2D::new(8.0, 8.0), [0.25, 0.25], 8.0), Point2D::new(10.0, 10.0));
    }

    #[test]
    fn radius_nms_rules() {
        let input = vec![det(0.0, 0.0, 0, 0.5), det(1.0, 1.0, 0, 0.9)];
        assert_eq!(radius_nms(&input, 0.0).len(), 2);
        let dup = vec![det(3.0, 3.0, 0, 0.4), det(3.0, 3.0, 0, 0.8)];
        assert_eq!(radius_nms(&dup, 1.0), vec![det(3.0, 3.0, 0, 0.8)]);
        let close = vec![det(0.0, 0.0, 0, 0.9), det(3.0, 0.0, 0, 0.6)];
        assert_eq!(radius_nms(&close, 5.0).len(), 1);
        let other_class = vec![det(0.0, 0.0, 0, 0.9), det(3.0, 0.0, 1, 0.6)];
        assert_eq!(radius_nms(&other_class, 5.0).len(), 2);
        let chain = vec![det(8.0, 0.0, 0, 0.7), det(0.0, 0.0, 0, 0.9), det(4.0, 0.0, 0, 0.8)];
        let kept = radius_nms(&chain, 5.0);
        assert_eq!(kept, vec![det(0.0, 0.0, 0, 0.9), det(8.0, 0.0, 0, 0.7)]);
    }

    proptest! {
        #[test]
        fn radius_nms_ignores_input_order(
            pts in prop::collection::vec((0.0..30.0f64, 0.0..30.0f64, 0u32..2, 0.0..1.0f64), 0..25),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let dets: Vec<_> = pts.iter().map(|&(x, y, c, s)| det(x, y, c, s)).collect();
            let mut shuffled = dets.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(radius_nms(&dets, 5.0), radius_nms(&shuffled, 5.0));
            let kept = radius_nms(&dets, 5.0);
            for (i, a) in kept.iter().enumerate() {
                for b in &kept[i + 1..] {
                    prop_assert!(a.class_id != b.class_id || a.center.distance(&b.center) > 5.0);
                }
            }
        }
    }

    #[test]
    fn box_head_decodes_encoded_ground_truth_exactly() {
        let m = model(SingleStageConfig {
            num_classes: 1,
            head: HeadKind::Box,
            ..Default::default()
        });
        let a = m.config.anchors_per_location();
        let gt = HorizontalBox::new(10.0, 12.0, 30.0, 26.0).unwrap();
        let mut raw = RawPredictions {
            levels: vec![
                LevelPredictions {
                    stride: 8,
                    logits: Tensor::full(&[1, a, 4, 4], -20.0),
                    regression: Tensor::zeros(&[1, 4 * a, 4, 4]),
                },
                LevelPredictions {
                    stride: 16,
                    logits: Tensor::full(&[1, a, 2, 2], -20.0),
                    regression: Tensor::zeros(&[1, 4 * a, 2, 2]),
                },
            ],
        };
        let anchors = raw.anchor_set();
        let boxes = generate_anchor_boxes(&anchors, &m.config.anchor_boxes);
        // anchor 5 at point 2 (row 0, col 2) of the stride-8 level
        let (point, ai) = (2, 1);
        let dl = encode_box_deltas(&boxes[point * a + ai], &gt);
        let l = &mut raw.levels[0];
        l.logits.data_mut()[ai * 16 + point] = 20.0;
        for e in 0..4 {
            l.regression.data_mut()[(ai * 4 + e) * 16 + point] = dl[e] as f32;
        }
        let d = m.decode(&raw, 0, 0.5, 5.0);
        assert_eq!(d.len(), 1);
        assert!(d[0].hbox.unwrap().iou(&gt) > 1.0 - 1e-5);
    }

    fn training_chip() -> Chip {
        let spec = SyntheticSpec {
            width: 64,
            height: 64,
            count: Some(3),
            ..Default::default()
        };
        let s = generate_synthetic_scene(&spec, &mut ChaCha8Rng::seed_from_u64(3), "t").unwrap();
        s.as_chip()
    }

    #[test]
    fn one_step_lowers_the_loss() {
        for head in [HeadKind::Centerpoint, HeadKind::Box] {
            let mut m = model(SingleStageConfig {
                head,
                ..Default::default()
            });
            let c = training_chip();
            let opt = Sgd::default();
            let before = m.accumulate_gradients(&[&c]).unwrap().total();
            opt.step(&mut m.store, 0.01);
            m.store.zero_grad();
            let after = m.accumulate_gradients(&[&c]).unwrap().total();
            assert!(after < before, "{head:?}: {before} -> {after}");
        }
    }
}
