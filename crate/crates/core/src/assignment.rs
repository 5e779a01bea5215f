//! Anchor grids, ground-truth assignment and target encoding.
//!
//! Centerpoint detectors use one anchor point per feature-map cell and assign
//! ground truth by Euclidean distance. The horizontal-box baselines use
//! anchor boxes and IoU assignment.

use serde::{Deserialize, Serialize};

use crate::geometry::{GroundTruthObject, HorizontalBox, Point2D};

/// One pyramid level of anchor points laid out at cell centers
/// `(s/2 + j·s, s/2 + i·s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorLevel {
    pub stride: f64,
    pub cols: usize,
    pub rows: usize,
}

impl AnchorLevel {
    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, row: usize, col: usize) -> Point2D {
        let s = self.stride;
        Point2D::new(0.5 * s + col as f64 * s, 0.5 * s + row as f64 * s)
    }
}

/// Anchor points for every pyramid level. Anchors are indexed level by
/// level, row-major within a level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub levels: Vec<AnchorLevel>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.levels.iter().map(AnchorLevel::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn level_offset(&self, level: usize) -> usize {
        self.levels[..level].iter().map(AnchorLevel::len).sum()
    }

    /// `(level, point, stride)` for every anchor in index order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, Point2D, f64)> + '_ {
        self.levels.iter().enumerate().flat_map(|(l, lv)| {
            (0..lv.rows).flat_map(move |r| (0..lv.cols).map(move |c| (l, lv.point(r, c), lv.stride)))
        })
    }

    pub fn points(&self) -> Vec<Point2D> {
        self.iter().map(|(_, p, _)| p).collect()
    }

    pub fn strides(&self) -> Vec<f64> {
        self.iter().map(|(_, _, s)| s).collect()
    }
}

/// One anchor point per cell and level over a `width×height` chip; partial
/// cells at the border round up.
pub fn generate_anchor_points(width: usize, height: usize, strides: &[usize]) -> AnchorSet {
    let levels = strides
        .iter()
        .map(|&s| AnchorLevel {
            stride: s as f64,
            cols: width.div_ceil(s),
            rows: height.div_ceil(s),
        })
        .collect();
    AnchorSet { levels }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive(usize),
    Negative,
    Ignore,
}

impl AnchorLabel {
    pub fn gt(&self) -> Option<usize> {
        match self {
            AnchorLabel::Positive(g) => Some(*g),
            _ => None,
        }
    }

    pub fn is_positive(&self) -> bool {
        matches!(self, AnchorLabel::Positive(_))
    }
}

/// Per-anchor labels and regression targets. `targets` is flat with
/// `target_dim` values per anchor; non-positive anchors hold zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    pub labels: Vec<AnchorLabel>,
    pub targets: Vec<f64>,
    pub target_dim: usize,
}

impl AssignmentResult {
    pub fn target(&self, anchor: usize) -> &[f64] {
        &self.targets[anchor * self.target_dim..(anchor + 1) * self.target_dim]
    }

    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|l| l.is_positive()).count()
    }

    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.gt().map(|g| (i, g)))
    }
}

/// `(gt − anchor) / stride`.
pub fn encode_offsets(anchor: &Point2D, gt: &Point2D, stride: f64) -> [f64; 2] {
    [(gt.x - anchor.x) / stride, (gt.y - anchor.y) / stride]
}

pub fn decode_offsets(anchor: &Point2D, delta: [f64; 2], stride: f64) -> Point2D {
    Point2D::new(anchor.x + delta[0] * stride, anchor.y + delta[1] * stride)
}

/// Distance-based assignment.
///
/// An anchor is positive when its nearest ground truth lies within
/// `positive_radius · stride`; ties go to the lower GT index. Each GT also
/// claims its globally nearest anchor (lowest anchor index on ties) so no GT
/// goes unmatched. Claims are resolved closest-first (lower GT index on
/// ties); a GT whose nearest anchor is taken claims its nearest free anchor.
pub fn match_centerpoints(
    anchors: &AnchorSet,
    gts: &[GroundTruthObject],
    positive_radius: f64,
) -> AssignmentResult {
    let n = anchors.len();
    // (distance, gt) of the nearest GT within radius
    let mut best: Vec<Option<(f64, usize)>> = vec![None; n];
    // (distance, anchor) of each GT's nearest anchor
    let mut nearest: Vec<Option<(f64, usize)>> = vec![None; gts.len()];

    for (level_idx, level) in anchors.levels.iter().enumerate() {
        if level.is_empty() {
            continue;
        }
        let offset = anchors.level_offset(level_idx);
        let s = level.stride;
        let radius = positive_radius * s;
        for (gi, gt) in gts.iter().enumerate() {
            let p = gt.center;
            // Cells whose centers can be within `radius` of p.
            let c_lo = ((p.x - radius) / s - 0.5).ceil().max(0.0) as usize;
            let r_lo = ((p.y - radius) / s - 0.5).ceil().max(0.0) as usize;
            let c_hi = ((p.x + radius) / s - 0.5).floor();
            let r_hi = ((p.y + radius) / s - 0.5).floor();
            if c_hi >= 0.0 && r_hi >= 0.0 {
                let c_hi = (c_hi as usize).min(level.cols - 1);
                let r_hi = (r_hi as usize).min(level.rows - 1);
                for r in r_lo..=r_hi {
                    for c in c_lo..=c_hi {
                        let d = level.point(r, c).distance(&p);
                        if d > radius {
                            continue;
                        }
                        let a = offset + r * level.cols + c;
                        if best[a].is_none_or(|(bd, _)| d < bd) {
                            best[a] = Some((d, gi));
                        }
                    }
                }
            }
            // Nearest cell on this level: the containing cell (clamped) or a
            // neighbour when the point sits on a cell boundary.
            let cc = ((p.x / s).floor().max(0.0) as usize).min(level.cols - 1);
            let rc = ((p.y / s).floor().max(0.0) as usize).min(level.rows - 1);
            for r in rc.saturating_sub(1)..=(rc + 1).min(level.rows - 1) {
                for c in cc.saturating_sub(1)..=(cc + 1).min(level.cols - 1) {
                    let d = level.point(r, c).distance(&p);
                    let a = offset + r * level.cols + c;
                    let better = match nearest[gi] {
                        None => true,
                        Some((bd, ba)) => d < bd || (d == bd && a < ba),
                    };
                    if better {
                        nearest[gi] = Some((d, a));
                    }
                }
            }
        }
    }

    let mut labels: Vec<AnchorLabel> = best
        .iter()
        .map(|b| b.map_or(AnchorLabel::Negative, |(_, g)| AnchorLabel::Positive(g)))
        .collect();

    // Forced claims: GTs in order of (nearest distance, index) each take
    // their nearest anchor not already claimed by another GT.
    let mut order: Vec<(f64, usize, usize)> = nearest
        .iter()
        .enumerate()
        .filter_map(|(g, near)| near.map(|(d, a)| (d, g, a)))
        .collect();
    order.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut claimed = vec![false; n];
    let points = anchors.points();
    for (_, g, a) in order {
        let pick = if !claimed[a] {
            Some(a)
        } else {
            let p = gts[g].center;
            (0..n)
                .filter(|&i| !claimed[i])
                .min_by(|&i, &j| points[i].distance(&p).total_cmp(&points[j].distance(&p)))
        };
        if let Some(a) = pick {
            claimed[a] = true;
            labels[a] = AnchorLabel::Positive(g);
        }
    }

    let mut targets = vec![0.0; 2 * n];
    for (a, (_, p, s)) in anchors.iter().enumerate() {
        if let AnchorLabel::Positive(g) = labels[a] {
            let t = encode_offsets(&p, &gts[g].center, s);
            targets[2 * a] = t[0];
            targets[2 * a + 1] = t[1];
        }
    }
    AssignmentResult {
        labels,
        targets,
        target_dim: 2,
    }
}

/// Anchor-box shapes per pyramid level for the box baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorBoxConfig {
    /// Box side lengths per level (pixels).
    pub sizes: Vec<Vec<f64>>,
    /// Height / width ratios shared by all levels.
    pub aspect_ratios: Vec<f64>,
}

impl AnchorBoxConfig {
    pub fn per_location(&self) -> usize {
        self.sizes.first().map_or(0, Vec::len) * self.aspect_ratios.len()
    }
}

/// Anchor boxes centered on every anchor point; index
/// `(point_index · A + a)` with `A` boxes per location.
pub fn generate_anchor_boxes(anchors: &AnchorSet, cfg: &AnchorBoxConfig) -> Vec<HorizontalBox> {
    let mut out = Vec::with_capacity(anchors.len() * cfg.per_location());
    for (level, p, _) in anchors.iter() {
        for &size in &cfg.sizes[level] {
            for &ratio in &cfg.aspect_ratios {
                let w = size / ratio.sqrt();
                let h = size * ratio.sqrt();
                out.push(HorizontalBox {
                    x_min: p.x - 0.5 * w,
                    y_min: p.y - 0.5 * h,
                    x_max: p.x + 0.5 * w,
                    y_max: p.y + 0.5 * h,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IouThresholds {
    pub positive: f64,
    pub negative: f64,
    /// Promote each GT's highest-IoU anchors to positive.
    pub allow_low_quality: bool,
}

impl Default for IouThresholds {
    fn default() -> Self {
        Self {
            positive: 0.5,
            negative: 0.4,
            allow_low_quality: true,
        }
    }
}

/// Standard IoU assignment: positive at `≥ positive`, negative below
/// `negative`, ignored in between. Targets are box deltas.
pub fn iou_match(
    anchor_boxes: &[HorizontalBox],
    gt_boxes: &[HorizontalBox],
    thresholds: IouThresholds,
) -> AssignmentResult {
    let n = anchor_boxes.len();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut argmax = vec![0usize; n];
    let mut gt_best = vec![0.0f64; gt_boxes.len()];
    let mut ious = vec![0.0f64; gt_boxes.len()];
    let mut low_quality: Vec<(usize, usize)> = Vec::new();
    if !gt_boxes.is_empty() {
        let mut per_anchor: Vec<(f64, usize)> = Vec::with_capacity(n);
        for a in anchor_boxes {
            let mut best = (f64::NEG_INFINITY, 0);
            for (g, gb) in gt_boxes.iter().enumerate() {
                let iou = a.iou(gb);
                ious[g] = iou;
                if iou > best.0 {
                    best = (iou, g);
                }
                if iou > gt_best[g] {
                    gt_best[g] = iou;
                }
            }
            per_anchor.push(best);
        }
        for (i, &(iou, g)) in per_anchor.iter().enumerate() {
            argmax[i] = g;
            labels[i] = if iou >= thresholds.positive {
                AnchorLabel::Positive(g)
            } else if iou < thresholds.negative {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            };
        }
        if thresholds.allow_low_quality {
            for (i, a) in anchor_boxes.iter().enumerate() {
                for (g, gb) in gt_boxes.iter().enumerate() {
                    if gt_best[g] > 0.0 && a.iou(gb) == gt_best[g] {
                        low_quality.push((i, argmax[i]));
                    }
                }
            }
            for (i, g) in low_quality {
                labels[i] = AnchorLabel::Positive(g);
            }
        }
    }
    let mut targets = vec![0.0; 4 * n];
    for (i, l) in labels.iter().enumerate() {
        if let AnchorLabel::Positive(g) = l {
            let d = encode_box_deltas(&anchor_boxes[i], &gt_boxes[*g]);
            targets[4 * i..4 * i + 4].copy_from_slice(&d);
        }
    }
    AssignmentResult {
        labels,
        targets,
        target_dim: 4,
    }
}

const MIN_SIDE: f64 = 1e-3;
/// Clamp on log-size deltas when decoding.
pub const MAX_LOG_DELTA: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Center/size log-delta encoding `(dx, dy, dw, dh)`.
pub fn encode_box_deltas(anchor: &HorizontalBox, gt: &HorizontalBox) -> [f64; 4] {
    let (aw, ah) = (anchor.width().max(MIN_SIDE), anchor.height().max(MIN_SIDE));
    let (gw, gh) = (gt.width().max(MIN_SIDE), gt.height().max(MIN_SIDE));
    let (ac, gc) = (anchor.center(), gt.center());
    [
        (gc.x - ac.x) / aw,
        (gc.y - ac.y) / ah,
        (gw / aw).ln(),
        (gh / ah).ln(),
    ]
}

pub fn decode_box_deltas(anchor: &HorizontalBox, d: [f64; 4]) -> HorizontalBox {
    let (aw, ah) = (anchor.width().max(MIN_SIDE), anchor.height().max(MIN_SIDE));
    let ac = anchor.center();
    let cx = ac.x + d[0] * aw;
    let cy = ac.y + d[1] * ah;
    let w = aw * d[2].min(MAX_LOG_DELTA).exp();
    let h = ah * d[3].min(MAX_LOG_DELTA).exp();
    HorizontalBox {
        x_min: cx - 0.5 * w,
        y_min: cy - 0.5 * h,
        x_max: cx + 0.5 * w,
        y_max: cy + 0.5 * h,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn gt(x: f64, y: f64) -> GroundTruthObject {
        GroundTruthObject::from_center(Point2D::new(x, y), 0)
    }

    #[test]
    fn anchor_grid_examples() {
        let a = generate_anchor_points(32, 32, &[8]);
        assert_eq!(a.len(), 16);
        assert_eq!(a.points()[0], Point2D::new(4.0, 4.0));
        let a = generate_anchor_points(8, 8, &[8]);
        assert_eq!(a.points(), vec![Point2D::new(4.0, 4.0)]);
        let a = generate_anchor_points(32, 32, &[8, 16]);
        assert_eq!(a.len(), 20);
        assert_eq!(a.points()[16], Point2D::new(8.0, 8.0));
        // partial border cells round up
        assert_eq!(generate_anchor_points(33, 17, &[8]).len(), 5 * 3);
    }

    #[test]
    fn matching_examples() {
        let anchors = generate_anchor_points(32, 32, &[8]);
        let r = match_centerpoints(&anchors, &[], 1.0);
        assert!(r.labels.iter().all(|l| *l == AnchorLabel::Negative));

        let r = match_centerpoints(&anchors, &[gt(12.0, 20.0)], 1.0);
        let idx = 2 * 4 + 1; // row 2, col 1 → (12, 20)
        assert_eq!(r.labels[idx], AnchorLabel::Positive(0));
        assert_eq!(r.target(idx), &[0.0, 0.0]);

        // anchor (8,8) lives on a stride-8 grid offset by 4: use a 16-stride
        // grid shifted so that (8, 8) is an anchor point.
        let anchors = AnchorSet {
            levels: vec![AnchorLevel { stride: 8.0, cols: 4, rows: 4 }],
        };
        let r = match_centerpoints(&anchors, &[gt(10.0, 10.0)], 1.0);
        // anchor (12,12) is the nearest cell center; (4,4)…(12,12) within 8 px
        let p = anchors.points();
        for (i, l) in r.labels.iter().enumerate() {
            let d = p[i].distance(&Point2D::new(10.0, 10.0));
            assert_eq!(l.is_positive(), d <= 8.0, "anchor {i} at {:?}", p[i]);
        }
    }

    #[test]
    fn matching_offset_example_from_anchor_8_8() {
        // Single-cell level of stride 16 has its anchor at (8, 8).
        let anchors = AnchorSet {
            levels: vec![AnchorLevel { stride: 16.0, cols: 1, rows: 1 }],
        };
        let r = match_centerpoints(&anchors, &[gt(10.0, 10.0)], 0.5);
        assert_eq!(r.labels[0], AnchorLabel::Positive(0));
        assert_abs_diff_eq!(r.target(0)[0], 2.0 / 16.0);
        // Same geometry with stride 8 normalisation: (10 − 8) / 8 = 0.25.
        let t = encode_offsets(&Point2D::new(8.0, 8.0), &Point2D::new(10.0, 10.0), 8.0);
        assert_eq!(t, [0.25, 0.25]);
        assert!(Point2D::new(8.0, 8.0).distance(&Point2D::new(10.0, 10.0)) <= 8.0);
    }

    #[test]
    fn equidistant_gts_prefer_lower_index() {
        let anchors = generate_anchor_points(8, 8, &[8]);
        let r = match_centerpoints(&anchors, &[gt(2.0, 4.0), gt(6.0, 4.0)], 1.0);
        assert_eq!(r.labels[0], AnchorLabel::Positive(0));
    }

    #[test]
    fn far_gt_is_forced_onto_its_nearest_anchor() {
        let anchors = generate_anchor_points(64, 64, &[8]);
        let r = match_centerpoints(&anchors, &[gt(30.0, 30.0)], 0.01);
        assert_eq!(r.num_positive(), 1);
        let (a, g) = r.positives().next().unwrap();
        assert_eq!(g, 0);
        assert_eq!(anchors.points()[a], Point2D::new(28.0, 28.0));
    }

    #[test]
    fn encode_decode_examples() {
        let a = Point2D::new(4.0, 4.0);
        assert_eq!(encode_offsets(&a, &a, 8.0), [0.0, 0.0]);
        assert_eq!(encode_offsets(&a, &Point2D::new(8.0, 6.0), 8.0), [0.5, 0.25]);
    }

    #[test]
    fn iou_match_examples() {
        let b = HorizontalBox::new(0.0, 0.0, 2.0, 2.0).unwrap();
        let r = iou_match(&[b], &[b], IouThresholds::default());
        assert_eq!(r.labels[0], AnchorLabel::Positive(0));
        assert_eq!(r.target(0), &[0.0, 0.0, 0.0, 0.0]);

        let far = HorizontalBox::new(10.0, 10.0, 12.0, 12.0).unwrap();
        let strict = IouThresholds { allow_low_quality: false, ..Default::default() };
        let r = iou_match(&[far], &[b], strict);
        assert_eq!(r.labels[0], AnchorLabel::Negative);
        // low-quality promotion needs a positive overlap
        let r = iou_match(&[far], &[b], IouThresholds::default());
        assert_eq!(r.labels[0], AnchorLabel::Negative);

        let c = HorizontalBox::new(1.0, 1.0, 3.0, 3.0).unwrap();
        assert_abs_diff_eq!(b.iou(&c), 1.0 / 7.0, epsilon = 1e-12);
        let r = iou_match(&[c], &[b], strict);
        assert_eq!(r.labels[0], AnchorLabel::Negative);
        let r = iou_match(&[c], &[b], IouThresholds::default());
        assert_eq!(r.labels[0], AnchorLabel::Positive(0));

        let mid = HorizontalBox::new(0.0, 0.0, 2.0, 2.5).unwrap(); // IoU 0.8
        let wide = HorizontalBox::new(0.0, 0.0, 2.0, 4.5).unwrap(); // IoU 4/9
        let r = iou_match(&[mid, wide], &[b], strict);
        assert_eq!(r.labels, vec![AnchorLabel::Positive(0), AnchorLabel::Ignore]);
    }

    #[test]
    fn box_anchor_shapes() {
        let anchors = generate_anchor_points(16, 16, &[8]);
        let cfg = AnchorBoxConfig { sizes: vec![vec![16.0]], aspect_ratios: vec![1.0, 4.0] };
        let boxes = generate_anchor_boxes(&anchors, &cfg);
        assert_eq!(boxes.len(), 8);
        assert_abs_diff_eq!(boxes[1].width(), 8.0, epsilon = 1e-12);
        assert_abs_diff_eq!(boxes[1].height(), 32.0, epsilon = 1e-12);
        assert_eq!(boxes[0].center(), Point2D::new(4.0, 4.0));
    }

    proptest! {
        #[test]
        fn offsets_round_trip(ax in -500.0..500.0f64, ay in -500.0..500.0f64,
                              gx in -500.0..500.0f64, gy in -500.0..500.0f64,
                              s in prop::sample::select(vec![4.0, 8.0, 16.0, 32.0])) {
            let a = Point2D::new(ax, ay);
            let g = Point2D::new(gx, gy);
            let back = decode_offsets(&a, encode_offsets(&a, &g, s), s);
            prop_assert!(back.distance(&g) <= 1e-6);
        }

        #[test]
        fn box_deltas_round_trip(cx in -100.0..100.0f64, cy in -100.0..100.0f64,
                                 w in 1.0..80.0f64, h in 1.0..80.0f64,
                                 aw in 4.0..64.0f64, ah in 4.0..64.0f64) {
            let g = HorizontalBox { x_min: cx - w / 2.0, y_min: cy - h / 2.0, x_max: cx + w / 2.0, y_max: cy + h / 2.0 };
            let a = HorizontalBox { x_min: 0.0, y_min: 0.0, x_max: aw, y_max: ah };
            let back = decode_box_deltas(&a, encode_box_deltas(&a, &g));
            prop_assert!((back.x_min - g.x_min).abs() < 1e-6);
            prop_assert!((back.y_max - g.y_max).abs() < 1e-6);
        }

        #[test]
        fn every_gt_is_matched_and_shrinking_radius_is_monotone(
            pts in prop::collection::vec((0.0..48.0f64, 0.0..48.0f64), 1..8),
            r_small in 0.05..1.0f64, extra in 0.0..1.5f64,
        ) {
            let anchors = generate_anchor_points(48, 48, &[8, 16]);
            let gts: Vec<_> = pts.iter().map(|&(x, y)| gt(x, y)).collect();
            let big = match_centerpoints(&anchors, &gts, r_small + extra);
            let small = match_centerpoints(&anchors, &gts, r_small);
            for g in 0..gts.len() {
                prop_assert!(small.positives().any(|(_, m)| m == g));
            }
            for (a, l) in small.labels.iter().enumerate() {
                if l.is_positive() {
                    prop_assert!(big.labels[a].is_positive());
                }
            }
        }
    }
}
