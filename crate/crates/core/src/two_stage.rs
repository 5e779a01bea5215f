//! Centerpoint R-CNN: an RPN proposing centerpoints plus an attention-mask
//! map, ROI pooling over fixed imputed windows, and a classifier head that
//! refines class and center. The horizontal-box variant shares the
//! architecture with box anchors, box proposals and box deltas.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::assignment::{
    decode_box_deltas, decode_offsets, encode_box_deltas, generate_anchor_boxes, iou_match,
    match_centerpoints, AnchorBoxConfig, AnchorLabel, AnchorLevel, AnchorSet, AssignmentResult,
    IouThresholds,
};
use crate::backbone::{chips_to_tensor, Backbone, BackboneConfig, FeaturePyramid, MAX_STRIDE};
use crate::data::Chip;
use crate::error::{Error, Result};
use crate::geometry::{impute_square_box, GroundTruthObject, HorizontalBox, Point2D};
use crate::losses::{binary_cross_entropy, cross_entropy, smooth_l1, LossBundle, TermKind};
use crate::nn::{sigmoid, Conv2d, Graph, Linear, ParamId, ParamStore, RoiSpec, Tensor, Var};
use crate::single_stage::{default_anchor_boxes, iou_nms, radius_nms, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TwoStageKind {
    Centerpoint,
    Box,
}

/// Where the attention mask comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Sigmoid on the full-resolution map, then ROI pooling.
    SigmoidThenPool,
    /// ROI pooling of the mask logits, then sigmoid.
    PoolThenSigmoid,
    /// `m ≡ 1`; the masking multiply still runs.
    ForcedOne,
    /// No masking multiply at all.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStageConfig {
    pub num_classes: usize,
    pub kind: TwoStageKind,
    pub backbone: BackboneConfig,
    /// Side of the imputed square window in pixels.
    pub window_size: f64,
    pub pooler_resolution: usize,
    pub mask_mode: MaskMode,
    /// Centerpoint RPN positive radius in strides.
    pub rpn_positive_radius: f64,
    pub rpn_iou_thresholds: IouThresholds,
    pub anchor_boxes: AnchorBoxConfig,
    pub rpn_batch_per_image: usize,
    pub rpn_positive_fraction: f64,
    pub pre_nms_top_n_train: usize,
    pub post_nms_top_n_train: usize,
    pub pre_nms_top_n_test: usize,
    pub post_nms_top_n_test: usize,
    pub proposal_nms_radius: f64,
    pub proposal_nms_iou: f64,
    /// Append ground-truth centers (or boxes) to the training proposals.
    pub add_gt_proposals: bool,
    pub roi_batch_per_image: usize,
    pub roi_positive_fraction: f64,
    /// Defaults to `window_size / 4`.
    pub roi_positive_radius: Option<f64>,
    pub roi_iou_positive: f64,
    pub head_hidden: usize,
    pub smooth_l1_beta: f64,
    pub score_threshold: f64,
    pub nms_radius: f64,
    pub box_nms_iou: f64,
    pub max_detections: usize,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            kind: TwoStageKind::Centerpoint,
            backbone: BackboneConfig::default(),
            window_size: 70.0,
            pooler_resolution: 14,
            mask_mode: MaskMode::SigmoidThenPool,
            rpn_positive_radius: 1.0,
            rpn_iou_thresholds: IouThresholds {
                positive: 0.7,
                negative: 0.3,
                allow_low_quality: true,
            },
            anchor_boxes: default_anchor_boxes(),
            rpn_batch_per_image: 256,
            rpn_positive_fraction: 0.5,
            pre_nms_top_n_train: 600,
            post_nms_top_n_train: 100,
            pre_nms_top_n_test: 300,
            post_nms_top_n_test: 50,
            proposal_nms_radius: 6.0,
            proposal_nms_iou: 0.7,
            add_gt_proposals: true,
            roi_batch_per_image: 64,
            roi_positive_fraction: 0.25,
            roi_positive_radius: None,
            roi_iou_positive: 0.5,
            head_hidden: 128,
            smooth_l1_beta: 0.1,
            score_threshold: 0.05,
            nms_radius: 5.0,
            box_nms_iou: 0.5,
            max_detections: 100,
        }
    }
}

impl TwoStageConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.num_classes == 0 {
            return bad("num_classes must be positive");
        }
        if !(self.window_size > 0.0) {
            return bad("window_size must be positive");
        }
        if self.pooler_resolution == 0 {
            return bad("pooler_resolution must be at least 1");
        }
        if self.roi_batch_per_image == 0 || self.rpn_batch_per_image == 0 {
            return bad("sampling batch sizes must be positive");
        }
        if self.post_nms_top_n_test == 0 || self.pre_nms_top_n_test == 0 {
            return bad("proposal counts must be positive");
        }
        if !(0.0..=1.0).contains(&self.roi_positive_fraction) || !(0.0..=1.0).contains(&self.rpn_positive_fraction) {
            return bad("positive fractions must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn positive_radius(&self) -> f64 {
        self.roi_positive_radius.unwrap_or(self.window_size / 4.0)
    }

    fn anchors_per_location(&self) -> usize {
        match self.kind {
            TwoStageKind::Centerpoint => 1,
            TwoStageKind::Box => self.anchor_boxes.per_location(),
        }
    }

    fn regression_dim(&self) -> usize {
        match self.kind {
            TwoStageKind::Centerpoint => 2,
            TwoStageKind::Box => 4,
        }
    }
}

/// A proposed object: center, objectness and the window pooled for it. For
/// the centerpoint detector the window is the imputed square.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub center: Point2D,
    pub objectness: f64,
    pub window: HorizontalBox,
}

/// RPN outputs of one level for a batch.
#[derive(Debug, Clone, Copy)]
pub struct RpnLevel {
    pub stride: usize,
    /// `N×A×H×W` logits.
    pub objectness: Var,
    /// `N×(A·D)×H×W`.
    pub offsets: Var,
    /// `N×1×H×W` mask logits (centerpoint detector only).
    pub mask_logits: Option<Var>,
    /// `sigmoid(mask_logits)`.
    pub mask: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct RpnOutputs {
    pub levels: Vec<RpnLevel>,
}

/// Pooled features for proposals routed to one pyramid level.
#[derive(Debug, Clone)]
pub struct RoiFeatures {
    pub level: usize,
    /// Indices into the flattened proposal list.
    pub indices: Vec<usize>,
    /// `R×C×K×K` pooled features.
    pub f: Var,
    /// `R×1×K×K` pooled mask, when masking is active.
    pub m: Option<Var>,
    /// Classifier input: `m ⊙ f`, or `f` when masking is disabled.
    pub f_hat: Var,
}

/// Which loss families feed the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossSelection {
    pub rpn: bool,
    pub head: bool,
}

impl LossSelection {
    pub const ALL: Self = Self { rpn: true, head: true };
}

/// One sampled proposal for the classifier head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampledProposal {
    pub batch: usize,
    pub proposal: Proposal,
    /// Class index in `0..K`, or `K` for background.
    pub label: usize,
    pub target: [f64; 4],
}

#[derive(Debug, Clone)]
pub struct TwoStageDetector {
    pub config: TwoStageConfig,
    pub store: ParamStore,
    backbone: Backbone,
    rpn_conv: Conv2d,
    rpn_objectness: Conv2d,
    rpn_offsets: Conv2d,
    mask_conv: Option<Conv2d>,
    fc1: Linear,
    fc2: Linear,
    cls: Linear,
    reg: Linear,
}

impl TwoStageDetector {
    pub fn new<R: Rng + ?Sized>(config: TwoStageConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, config.backbone, rng);
        let f = config.backbone.fpn_channels;
        let a = config.anchors_per_location();
        let d = config.regression_dim();
        let rpn_conv = Conv2d::he(&mut store, "rpn.conv", f, f, 3, 1, rng);
        let rpn_objectness = Conv2d::normal(&mut store, "rpn.objectness", f, a, 1, 1, 0.01, 0.0, rng);
        let rpn_offsets = Conv2d::normal(&mut store, "rpn.offsets", f, a * d, 1, 1, 0.01, 0.0, rng);
        let mask_conv = (config.kind == TwoStageKind::Centerpoint)
            .then(|| Conv2d::normal(&mut store, "rpn.mask", f, 1, 1, 1, 0.01, 0.0, rng));
        let p = config.pooler_resolution;
        let h = config.head_hidden;
        let fc1 = Linear::he(&mut store, "head.fc1", f * p * p, h, rng);
        let fc2 = Linear::he(&mut store, "head.fc2", h, h, rng);
        let cls = Linear::normal(&mut store, "head.cls", h, config.num_classes + 1, 0.01, rng);
        let reg = Linear::normal(&mut store, "head.reg", h, d, 0.001, rng);
        Ok(Self {
            config,
            store,
            backbone,
            rpn_conv,
            rpn_objectness,
            rpn_offsets,
            mask_conv,
            fc1,
            fc2,
            cls,
            reg,
        })
    }

    /// Weight and bias of the mask `1×1` convolution.
    pub fn mask_conv_params(&self) -> Option<[ParamId; 2]> {
        self.mask_conv.map(|c| [c.weight, c.bias.expect("mask conv has bias")])
    }

    pub fn backbone_forward(&self, g: &mut Graph, x: Var) -> FeaturePyramid {
        self.backbone.forward(g, &self.store, x)
    }

    pub fn rpn_forward(&self, g: &mut Graph, pyramid: &FeaturePyramid) -> RpnOutputs {
        let s = &self.store;
        RpnOutputs {
            levels: pyramid
                .levels
                .iter()
                .map(|lvl| {
                    let h = self.rpn_conv.forward(g, s, lvl.feature);
                    let h = g.relu(h);
                    let objectness = self.rpn_objectness.forward(g, s, h);
                    let offsets = self.rpn_offsets.forward(g, s, h);
                    let mask_logits = self.mask_conv.map(|c| c.forward(g, s, h));
                    let mask = mask_logits.map(|m| g.sigmoid(m));
                    RpnLevel {
                        stride: lvl.stride,
                        objectness,
                        offsets,
                        mask_logits,
                        mask,
                    }
                })
                .collect(),
        }
    }

    fn anchor_set(g: &Graph, rpn: &RpnOutputs) -> AnchorSet {
        AnchorSet {
            levels: rpn
                .levels
                .iter()
                .map(|l| {
                    let s = g.value(l.objectness).shape();
                    AnchorLevel {
                        stride: l.stride as f64,
                        rows: s[2],
                        cols: s[3],
                    }
                })
                .collect(),
        }
    }

    /// Decoded, suppressed and truncated proposals of image `n`.
    pub fn select_proposals(
        &self,
        g: &Graph,
        rpn: &RpnOutputs,
        n: usize,
        pre_nms_top_n: usize,
        post_nms_top_n: usize,
    ) -> Vec<Proposal> {
        let cfg = &self.config;
        let (a, d) = (cfg.anchors_per_location(), cfg.regression_dim());
        let anchors = Self::anchor_set(g, rpn);
        let boxes = (cfg.kind == TwoStageKind::Box).then(|| generate_anchor_boxes(&anchors, &cfg.anchor_boxes));
        // (score, level, spatial, anchor)
        let mut cands: Vec<(f32, usize, usize, usize)> = Vec::new();
        for (l, lv) in rpn.levels.iter().enumerate() {
            let obj = g.value(lv.objectness);
            let spatial = anchors.levels[l].len();
            for ai in 0..a {
                let base = (n * a + ai) * spatial;
                for sp in 0..spatial {
                    cands.push((obj.data()[base + sp], l, sp, ai));
                }
            }
        }
        cands.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2, x.3).cmp(&(y.1, y.2, y.3))));
        cands.truncate(pre_nms_top_n);
        let mut props = Vec::with_capacity(cands.len());
        for (logit, l, sp, ai) in cands {
            let level = anchors.levels[l];
            let off = g.value(rpn.levels[l].offsets);
            let spatial = level.len();
            let r = |e: usize| off.data()[(n * a * d + ai * d + e) * spatial + sp] as f64;
            let point = level.point(sp / level.cols, sp % level.cols);
            let objectness = sigmoid(logit) as f64;
            let p = match cfg.kind {
                TwoStageKind::Centerpoint => {
                    let center = decode_offsets(&point, [r(0), r(1)], level.stride);
                    match impute_square_box(&center, cfg.window_size) {
                        Ok(window) => Proposal {
                            center,
                            objectness,
                            window,
                        },
                        Err(_) => continue,
                    }
                }
                TwoStageKind::Box => {
                    let idx = (anchors.level_offset(l) + sp) * a + ai;
                    let b = decode_box_deltas(&boxes.as_ref().unwrap()[idx], [r(0), r(1), r(2), r(3)]);
                    if !b.center().is_finite() {
                        continue;
                    }
                    Proposal {
                        center: b.center(),
                        objectness,
                        window: b,
                    }
                }
            };
            props.push(p);
        }
        let mut kept = suppress_proposals(&props, cfg.kind, cfg.proposal_nms_radius, cfg.proposal_nms_iou);
        kept.truncate(post_nms_top_n);
        kept
    }

    /// Pyramid level for a window by the usual `⌊4 + log2(√area / 224)⌋`
    /// rule, clamped to the available levels (P3, P4).
    pub fn route_level(window: &HorizontalBox, num_levels: usize) -> usize {
        let side = window.area().max(1e-6).sqrt();
        let k = (4.0 + (side / 224.0).log2()).floor() as i64;
        (k - 3).clamp(0, num_levels as i64 - 1) as usize
    }

    /// Pools `f` and `m` for every proposal, grouped by pyramid level, and
    /// forms `f̂ = m ⊙ f`.
    pub fn extract_roi_features(
        &self,
        g: &mut Graph,
        pyramid: &FeaturePyramid,
        rpn: &RpnOutputs,
        proposals: &[(usize, Proposal)],
        mode: MaskMode,
    ) -> Vec<RoiFeatures> {
        let k = self.config.pooler_resolution;
        let nl = pyramid.levels.len();
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); nl];
        for (i, (_, p)) in proposals.iter().enumerate() {
            groups[Self::route_level(&p.window, nl)].push(i);
        }
        let mut out = Vec::new();
        for (level, indices) in groups.into_iter().enumerate() {
            if indices.is_empty() {
                continue;
            }
            let rois: Vec<RoiSpec> = indices
                .iter()
                .map(|&i| {
                    let (b, p) = proposals[i];
                    RoiSpec {
                        batch: b,
                        x_min: p.window.x_min as f32,
                        y_min: p.window.y_min as f32,
                        x_max: p.window.x_max as f32,
                        y_max: p.window.y_max as f32,
                    }
                })
                .collect();
            let stride = pyramid.levels[level].stride as f32;
            let f = g.roi_align(pyramid.levels[level].feature, &rois, k, stride);
            let rl = &rpn.levels[level];
            let m = match (mode, rl.mask, rl.mask_logits) {
                (MaskMode::Disabled, _, _) => None,
                (MaskMode::ForcedOne, _, _) => Some(g.input(Tensor::full(&[rois.len(), 1, k, k], 1.0))),
                (MaskMode::SigmoidThenPool, Some(mask), _) => Some(g.roi_align(mask, &rois, k, stride)),
                (MaskMode::PoolThenSigmoid, _, Some(logits)) => {
                    let pooled = g.roi_align(logits, &rois, k, stride);
                    Some(g.sigmoid(pooled))
                }
                _ => None,
            };
            let f_hat = match m {
                Some(m) => g.mask_mul(f, m),
                None => f,
            };
            out.push(RoiFeatures {
                level,
                indices,
                f,
                m,
                f_hat,
            });
        }
        out
    }

    /// `(class logits R×(K+1), corrections R×D)` from pooled features.
    pub fn classifier_head(&self, g: &mut Graph, f_hat: Var) -> (Var, Var) {
        let s = &self.store;
        let shape = g.value(f_hat).shape().to_vec();
        let flat = g.reshape(f_hat, &[shape[0], shape[1] * shape[2] * shape[3]]);
        let h = self.fc1.forward(g, s, flat);
        let h = g.relu(h);
        let h = self.fc2.forward(g, s, h);
        let h = g.relu(h);
        (self.cls.forward(g, s, h), self.reg.forward(g, s, h))
    }

    /// Final center of a proposal after the head's correction.
    pub fn refine_center(&self, p: &Proposal, delta: [f64; 2]) -> Point2D {
        let half = self.config.window_size / 2.0;
        Point2D::new(p.center.x + delta[0] * half, p.center.y + delta[1] * half)
    }

    fn rpn_targets(&self, anchors: &AnchorSet, objects: &[GroundTruthObject]) -> Result<AssignmentResult> {
        Ok(match self.config.kind {
            TwoStageKind::Centerpoint => match_centerpoints(anchors, objects, self.config.rpn_positive_radius),
            TwoStageKind::Box => {
                let boxes = generate_anchor_boxes(anchors, &self.config.anchor_boxes);
                iou_match(&boxes, &gt_boxes(objects)?, self.config.rpn_iou_thresholds)
            }
        })
    }

    /// Forward, losses and backward on a batch. Only the selected loss
    /// families seed the backward pass; the bundle always reports all terms.
    pub fn accumulate_gradients<R: Rng + ?Sized>(
        &mut self,
        chips: &[&Chip],
        rng: &mut R,
        selection: LossSelection,
    ) -> Result<LossBundle> {
        let cfg = self.config.clone();
        let mut g = Graph::new(true);
        let x = g.input(chips_to_tensor(chips));
        let pyramid = self.backbone_forward(&mut g, x);
        let rpn = self.rpn_forward(&mut g, &pyramid);
        let anchors = Self::anchor_set(&g, &rpn);
        let (a, d) = (cfg.anchors_per_location(), cfg.regression_dim());

        // RPN: sampled anchors, BCE + smooth-L1, normalized by sample count.
        let mut obj_logits = Vec::new();
        let mut obj_labels = Vec::new();
        let mut obj_idx = Vec::new();
        let mut preds = Vec::new();
        let mut goals = Vec::new();
        let mut reg_idx = Vec::new();
        for (n, chip) in chips.iter().enumerate() {
            let t = self.rpn_targets(&anchors, &chip.objects)?;
            for j in sample_anchors(&t, cfg.rpn_batch_per_image, cfg.rpn_positive_fraction, rng) {
                let (point, ai) = (j / a, j % a);
                let (l, sp) = locate(&anchors, point);
                let spatial = anchors.levels[l].len();
                let oi = (n * a + ai) * spatial + sp;
                obj_logits.push(g.value(rpn.levels[l].objectness).data()[oi] as f64);
                obj_labels.push(t.labels[j].is_positive());
                obj_idx.push((l, oi));
                if t.labels[j].is_positive() {
                    for e in 0..d {
                        let ri = (n * a * d + ai * d + e) * spatial + sp;
                        preds.push(g.value(rpn.levels[l].offsets).data()[ri] as f64);
                        goals.push(t.target(j)[e]);
                        reg_idx.push((l, ri));
                    }
                }
            }
        }
        let sampled = obj_logits.len().max(1) as f64;
        let rpn_cls = if obj_logits.is_empty() {
            crate::losses::LossGrad::zero(0)
        } else {
            binary_cross_entropy(&obj_logits, &obj_labels)?
        };
        let rpn_reg = smooth_l1(&preds, &goals, cfg.smooth_l1_beta)?.scaled(1.0 / sampled);

        // Head: proposals from the detached RPN outputs, plus GT.
        let mut batch_props: Vec<(usize, Proposal)> = Vec::new();
        let mut samples = Vec::new();
        for (n, chip) in chips.iter().enumerate() {
            let mut props = self.select_proposals(&g, &rpn, n, cfg.pre_nms_top_n_train, cfg.post_nms_top_n_train);
            if cfg.add_gt_proposals {
                props.extend(gt_proposals(&cfg, &chip.objects)?);
            }
            for s in self.subsample(n, &props, &chip.objects, rng)? {
                batch_props.push((n, s.proposal));
                samples.push(s);
            }
        }
        let mut bundle = LossBundle::default();
        bundle.push("loss_rpn_cls", TermKind::Classification, 1.0, rpn_cls.value);
        bundle.push("loss_rpn_loc", TermKind::Regression, 1.0, rpn_reg.value);

        let mut seeds: Vec<(Var, Tensor)> = Vec::new();
        if selection.rpn {
            let mut go: Vec<Tensor> = rpn.levels.iter().map(|l| Tensor::zeros(g.value(l.objectness).shape())).collect();
            let mut gr: Vec<Tensor> = rpn.levels.iter().map(|l| Tensor::zeros(g.value(l.offsets).shape())).collect();
            for (&(l, i), v) in obj_idx.iter().zip(&rpn_cls.grad) {
                go[l].data_mut()[i] += *v as f32;
            }
            for (&(l, i), v) in reg_idx.iter().zip(&rpn_reg.grad) {
                gr[l].data_mut()[i] += *v as f32;
            }
            for ((lv, o), r) in rpn.levels.iter().zip(go).zip(gr) {
                seeds.push((lv.objectness, o));
                seeds.push((lv.offsets, r));
            }
        }

        let (head_cls, head_reg) = if samples.is_empty() {
            (0.0, 0.0)
        } else {
            let feats = self.extract_roi_features(&mut g, &pyramid, &rpn, &batch_props, cfg.mask_mode);
            let mut outs = Vec::new();
            for rf in &feats {
                let (logits, reg) = self.classifier_head(&mut g, rf.f_hat);
                outs.push((rf.indices.clone(), logits, reg));
            }
            let k1 = cfg.num_classes + 1;
            let total = samples.len();
            let mut all_logits = vec![0.0; total * k1];
            let mut all_reg = vec![0.0; total * d];
            for (indices, logits, reg) in &outs {
                let lv = g.value(*logits).data();
                let rv = g.value(*reg).data();
                for (row, &i) in indices.iter().enumerate() {
                    for c in 0..k1 {
                        all_logits[i * k1 + c] = lv[row * k1 + c] as f64;
                    }
                    for e in 0..d {
                        all_reg[i * d + e] = rv[row * d + e] as f64;
                    }
                }
            }
            let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
            let ce = cross_entropy(&all_logits, &labels, k1)?;
            let mut p = Vec::new();
            let mut t = Vec::new();
            let mut pos_rows = Vec::new();
            for (i, s) in samples.iter().enumerate() {
                if s.label < cfg.num_classes {
                    p.extend_from_slice(&all_reg[i * d..(i + 1) * d]);
                    t.extend_from_slice(&s.target[..d]);
                    pos_rows.push(i);
                }
            }
            let loc = smooth_l1(&p, &t, cfg.smooth_l1_beta)?.scaled(1.0 / total as f64);
            if selection.head {
                let mut reg_grad = vec![0.0f64; total * d];
                for (r, &i) in pos_rows.iter().enumerate() {
                    reg_grad[i * d..(i + 1) * d].copy_from_slice(&loc.grad[r * d..(r + 1) * d]);
                }
                for (indices, logits, reg) in &outs {
                    let mut gl = Tensor::zeros(g.value(*logits).shape());
                    let mut gr = Tensor::zeros(g.value(*reg).shape());
                    for (row, &i) in indices.iter().enumerate() {
                        for c in 0..k1 {
                            gl.data_mut()[row * k1 + c] = ce.grad[i * k1 + c] as f32;
                        }
                        for e in 0..d {
                            gr.data_mut()[row * d + e] = reg_grad[i * d + e] as f32;
                        }
                    }
                    seeds.push((*logits, gl));
                    seeds.push((*reg, gr));
                }
            }
            (ce.value, loc.value)
        };
        bundle.push("loss_cls", TermKind::Classification, 1.0, head_cls);
        bundle.push("loss_loc", TermKind::Regression, 1.0, head_reg);
        if !seeds.is_empty() {
            g.backward(seeds).accumulate_into(&mut self.store);
        }
        Ok(bundle)
    }

    /// Labels proposals against ground truth and samples the head's batch.
    fn subsample<R: Rng + ?Sized>(
        &self,
        batch: usize,
        proposals: &[Proposal],
        gts: &[GroundTruthObject],
        rng: &mut R,
    ) -> Result<Vec<SampledProposal>> {
        let cfg = &self.config;
        match cfg.kind {
            TwoStageKind::Centerpoint => Ok(subsample_proposals(
                proposals,
                gts,
                cfg.roi_batch_per_image,
                cfg.roi_positive_fraction,
                cfg.positive_radius(),
                cfg.num_classes,
                rng,
            )
            .into_iter()
            .map(|mut s| {
                s.batch = batch;
                if s.label < cfg.num_classes {
                    let half = cfg.window_size / 2.0;
                    s.target = [s.target[0] / half, s.target[1] / half, 0.0, 0.0];
                }
                s
            })
            .collect()),
            TwoStageKind::Box => {
                let boxes = gt_boxes(gts)?;
                let mut pos = Vec::new();
                let mut neg = Vec::new();
                for p in proposals {
                    let best = boxes
                        .iter()
                        .enumerate()
                        .map(|(i, b)| (p.window.iou(b), i))
                        .fold((0.0, usize::MAX), |acc, x| if x.0 > acc.0 { x } else { acc });
                    if best.1 != usize::MAX && best.0 >= cfg.roi_iou_positive {
                        let t = encode_box_deltas(&p.window, &boxes[best.1]);
                        pos.push(SampledProposal {
                            batch,
                            proposal: *p,
                            label: gts[best.1].class_id as usize,
                            target: t,
                        });
                    } else {
                        neg.push(SampledProposal {
                            batch,
                            proposal: *p,
                            label: cfg.num_classes,
                            target: [0.0; 4],
                        });
                    }
                }
                Ok(balanced_sample(pos, neg, cfg.roi_batch_per_image, cfg.roi_positive_fraction, rng))
            }
        }
    }

    /// Classifier inputs `f̂` for given proposals of a single chip under a
    /// chosen mask mode, rows in proposal order.
    pub fn head_inputs(&self, chip: &Chip, proposals: &[Proposal], mode: MaskMode) -> Tensor {
        let mut g = Graph::new(false);
        let x = g.input(chips_to_tensor(&[chip]));
        let pyramid = self.backbone_forward(&mut g, x);
        let rpn = self.rpn_forward(&mut g, &pyramid);
        let props: Vec<(usize, Proposal)> = proposals.iter().map(|p| (0, *p)).collect();
        let feats = self.extract_roi_features(&mut g, &pyramid, &rpn, &props, mode);
        let per = {
            let s = g.value(feats[0].f_hat).shape();
            s[1] * s[2] * s[3]
        };
        let mut out = vec![0.0f32; proposals.len() * per];
        for rf in &feats {
            let v = g.value(rf.f_hat).data();
            for (row, &i) in rf.indices.iter().enumerate() {
                out[i * per..(i + 1) * per].copy_from_slice(&v[row * per..(row + 1) * per]);
            }
        }
        let s = g.value(feats[0].f_hat).shape();
        Tensor::from_vec(&[proposals.len(), s[1], s[2], s[3]], out)
    }

    pub fn infer(&self, chip: &Chip, score_threshold: f64, nms_radius: f64) -> Vec<Detection> {
        let cfg = &self.config;
        let mut g = Graph::new(false);
        let x = g.input(chips_to_tensor(&[chip]));
        let pyramid = self.backbone_forward(&mut g, x);
        let rpn = self.rpn_forward(&mut g, &pyramid);
        let props = self.select_proposals(&g, &rpn, 0, cfg.pre_nms_top_n_test, cfg.post_nms_top_n_test);
        if props.is_empty() {
            return Vec::new();
        }
        let batch: Vec<(usize, Proposal)> = props.iter().map(|p| (0, *p)).collect();
        let feats = self.extract_roi_features(&mut g, &pyramid, &rpn, &batch, cfg.mask_mode);
        let k1 = cfg.num_classes + 1;
        let d = cfg.regression_dim();
        let mut dets = Vec::new();
        for rf in &feats {
            let (logits, reg) = self.classifier_head(&mut g, rf.f_hat);
            let lv = g.value(logits).data().to_vec();
            let rv = g.value(reg).data().to_vec();
            for (row, &i) in rf.indices.iter().enumerate() {
                let probs = softmax(&lv[row * k1..(row + 1) * k1]);
                let delta: Vec<f64> = rv[row * d..(row + 1) * d].iter().map(|&v| v as f64).collect();
                let p = &props[i];
                let (center, hbox) = match cfg.kind {
                    TwoStageKind::Centerpoint => (self.refine_center(p, [delta[0], delta[1]]), None),
                    TwoStageKind::Box => {
                        let b = decode_box_deltas(&p.window, [delta[0], delta[1], delta[2], delta[3]]);
                        (b.center(), Some(b))
                    }
                };
                if !center.is_finite() {
                    continue;
                }
                for (c, &score) in probs.iter().take(cfg.num_classes).enumerate() {
                    if score > score_threshold {
                        dets.push(Detection {
                            center,
                            class_id: c as u32,
                            score,
                            hbox,
                        });
                    }
                }
            }
        }
        let mut kept = match cfg.kind {
            TwoStageKind::Centerpoint => radius_nms(&dets, nms_radius),
            TwoStageKind::Box => iou_nms(&dets, cfg.box_nms_iou),
        };
        kept.truncate(cfg.max_detections);
        kept
    }

    pub fn detect(&self, chip: &Chip) -> Vec<Detection> {
        let padded = chip.padded_to_multiple(MAX_STRIDE);
        self.infer(&padded, self.config.score_threshold, self.config.nms_radius)
    }
}

fn softmax(z: &[f32]) -> Vec<f64> {
    let m = z.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = z.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn locate(anchors: &AnchorSet, point: usize) -> (usize, usize) {
    let mut off = 0;
    for (l, lv) in anchors.levels.iter().enumerate() {
        if point < off + lv.len() {
            return (l, point - off);
        }
        off += lv.len();
    }
    panic!("anchor point {point} out of range")
}

fn gt_boxes(objects: &[GroundTruthObject]) -> Result<Vec<HorizontalBox>> {
    objects
        .iter()
        .map(|o| {
            o.horizontal_box()
                .ok_or_else(|| Error::InvalidArgument("box variant needs box annotations".into()))
        })
        .collect()
}

fn gt_proposals(cfg: &TwoStageConfig, objects: &[GroundTruthObject]) -> Result<Vec<Proposal>> {
    objects
        .iter()
        .map(|o| {
            let window = match cfg.kind {
                TwoStageKind::Centerpoint => impute_square_box(&o.center, cfg.window_size)?,
                TwoStageKind::Box => o
                    .horizontal_box()
                    .ok_or_else(|| Error::InvalidArgument("box variant needs box annotations".into()))?,
            };
            Ok(Proposal {
                center: o.center,
                objectness: 1.0,
                window,
            })
        })
        .collect()
}

fn suppress_proposals(props: &[Proposal], kind: TwoStageKind, radius: f64, iou: f64) -> Vec<Proposal> {
    let dets: Vec<Detection> = props
        .iter()
        .map(|p| Detection {
            center: p.center,
            class_id: 0,
            score: p.objectness,
            hbox: Some(p.window),
        })
        .collect();
    let kept = match kind {
        TwoStageKind::Centerpoint => radius_nms(&dets, radius),
        TwoStageKind::Box => iou_nms(&dets, iou),
    };
    kept.into_iter()
        .map(|d| Proposal {
            center: d.center,
            objectness: d.score,
            window: d.hbox.expect("window kept"),
        })
        .collect()
}

/// Random positive/negative anchor sample; ignored anchors never appear.
fn sample_anchors<R: Rng + ?Sized>(t: &AssignmentResult, batch: usize, fraction: f64, rng: &mut R) -> Vec<usize> {
    let mut pos: Vec<usize> = Vec::new();
    let mut neg: Vec<usize> = Vec::new();
    for (i, l) in t.labels.iter().enumerate() {
        match l {
            AnchorLabel::Positive(_) => pos.push(i),
            AnchorLabel::Negative => neg.push(i),
            AnchorLabel::Ignore => {}
        }
    }
    let (p, n) = sample_counts(pos.len(), neg.len(), batch, fraction);
    pos.shuffle(rng);
    neg.shuffle(rng);
    let mut out: Vec<usize> = pos[..p].iter().chain(&neg[..n]).copied().collect();
    out.sort_unstable();
    out
}

/// `(positives, negatives)` drawn for a batch: positives up to
/// `⌊batch · fraction⌋`, negatives fill the rest.
pub fn sample_counts(num_pos: usize, num_neg: usize, batch: usize, fraction: f64) -> (usize, usize) {
    let p = num_pos.min((batch as f64 * fraction).floor() as usize);
    let n = num_neg.min(batch - p);
    (p, n)
}

fn balanced_sample<R: Rng + ?Sized>(
    mut pos: Vec<SampledProposal>,
    mut neg: Vec<SampledProposal>,
    batch: usize,
    fraction: f64,
    rng: &mut R,
) -> Vec<SampledProposal> {
    let (p, n) = sample_counts(pos.len(), neg.len(), batch, fraction);
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(p);
    neg.truncate(n);
    pos.extend(neg);
    pos
}

/// Centerpoint proposal sampling. A proposal within `positive_radius` of its
/// nearest GT is a positive carrying that GT's class and the pixel offset
/// `gt − center` as target; the rest are background (label `num_classes`).
pub fn subsample_proposals<R: Rng + ?Sized>(
    proposals: &[Proposal],
    gts: &[GroundTruthObject],
    batch_size: usize,
    positive_fraction: f64,
    positive_radius: f64,
    num_classes: usize,
    rng: &mut R,
) -> Vec<SampledProposal> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for p in proposals {
        let nearest = gts
            .iter()
            .enumerate()
            .map(|(i, g)| (g.center.distance(&p.center), i))
            .fold(None, |acc: Option<(f64, usize)>, x| match acc {
                Some(a) if a.0 <= x.0 => Some(a),
                _ => Some(x),
            });
        match nearest {
            Some((dist, i)) if dist <= positive_radius => {
                let g = gts[i].center;
                pos.push(SampledProposal {
                    batch: 0,
                    proposal: *p,
                    label: gts[i].class_id as usize,
                    target: [g.x - p.center.x, g.y - p.center.y, 0.0, 0.0],
                });
            }
            _ => neg.push(SampledProposal {
                batch: 0,
                proposal: *p,
                label: num_classes,
                target: [0.0; 4],
            }),
        }
    }
    balanced_sample(pos, neg, batch_size, positive_fraction, rng)
}
