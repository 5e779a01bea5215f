//! Centerpoint evaluation: detections are reduced to centers, matched to
//! same-class ground truth within a distance cutoff, and scored by
//! per-class average precision.

mod io;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::geometry::{center_distance, GroundTruthObject, HorizontalBox, Point2D, RotatedBox};
use crate::single_stage::Detection;

pub use io::{
    read_detections, write_detections, write_pr_curves, DetectionRecord, Table, DETECTIONS_FILE,
};

/// Geometry carried by a detection record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DetectionGeometry {
    Center { center: [f64; 2] },
    HBox { hbox: [f64; 4] },
    RBox { rbox: [f64; 5] },
}

/// Center of a detection: passthrough for points, box center otherwise.
pub fn to_centerpoint(g: &DetectionGeometry) -> Point2D {
    match *g {
        DetectionGeometry::Center { center } => Point2D::new(center[0], center[1]),
        DetectionGeometry::HBox { hbox } => HorizontalBox {
            x_min: hbox[0],
            y_min: hbox[1],
            x_max: hbox[2],
            y_max: hbox[3],
        }
        .center(),
        DetectionGeometry::RBox { rbox } => RotatedBox {
            center: Point2D::new(rbox[0], rbox[1]),
            width: rbox[2],
            height: rbox[3],
            angle: rbox[4],
        }
        .center,
    }
}

/// Match cutoffs: meters when the GSD is known, pixels otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchThresholds {
    pub meters: f64,
    pub pixels: f64,
}

impl Default for MatchThresholds {
    fn default() -> Self {
        Self {
            meters: 3.0,
            pixels: 10.0,
        }
    }
}

/// Outcome of one detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    TruePositive(usize),
    FalsePositive,
    /// Matched an ignored GT; neither TP nor FP.
    Ignored,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub outcomes: Vec<MatchOutcome>,
    /// Detection indices in the order they were processed.
    pub order: Vec<usize>,
    /// Non-ignored GTs left unmatched.
    pub unmatched_gt: usize,
}

impl MatchResult {
    pub fn is_tp(&self, det: usize) -> bool {
        matches!(self.outcomes[det], MatchOutcome::TruePositive(_))
    }

    pub fn matched_gt(&self, det: usize) -> Option<usize> {
        match self.outcomes[det] {
            MatchOutcome::TruePositive(g) => Some(g),
            _ => None,
        }
    }
}

/// Descending score; equal scores keep input order.
fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    order
}

/// Greedy matching in descending score order: each detection takes the
/// nearest unmatched same-class GT within the cutoff (lower index on equal
/// distance).
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruthObject],
    gsd: Option<f64>,
    thresholds: MatchThresholds,
) -> Result<MatchResult> {
    match_with_ignore(dets, gts, &vec![false; gts.len()], gsd, thresholds)
}

/// As [`match_detections`], with some GTs acting as ignore regions: a
/// detection with no eligible regular GT that lies within the cutoff of an
/// ignored GT of its class is dropped instead of counted as a false positive.
/// Ignore regions may absorb any number of detections.
pub fn match_with_ignore(
    dets: &[Detection],
    gts: &[GroundTruthObject],
    ignore: &[bool],
    gsd: Option<f64>,
    thresholds: MatchThresholds,
) -> Result<MatchResult> {
    if ignore.len() != gts.len() {
        return Err(Error::LengthMismatch {
            left: ignore.len(),
            right: gts.len(),
        });
    }
    let cutoff = match gsd {
        Some(_) => thresholds.meters,
        None => thresholds.pixels,
    };
    let order = score_order(dets);
    let mut taken = vec![false; gts.len()];
    let mut outcomes = vec![MatchOutcome::FalsePositive; dets.len()];
    for &i in &order {
        let d = &dets[i];
        let mut best: Option<(f64, usize)> = None;
        let mut near_ignored = false;
        for (j, g) in gts.iter().enumerate() {
            if g.class_id != d.class_id {
                continue;
            }
            let dist = center_distance(&d.center, &g.center, gsd)?;
            if dist > cutoff {
                continue;
            }
            if ignore[j] {
                near_ignored = true;
            } else if !taken[j] && best.is_none_or(|(bd, _)| dist < bd) {
                best = Some((dist, j));
            }
        }
        outcomes[i] = match best {
            Some((_, j)) => {
                taken[j] = true;
                MatchOutcome::TruePositive(j)
            }
            None if near_ignored => MatchOutcome::Ignored,
            None => MatchOutcome::FalsePositive,
        };
    }
    let unmatched_gt = (0..gts.len()).filter(|&j| !ignore[j] && !taken[j]).count();
    Ok(MatchResult {
        outcomes,
        order,
        unmatched_gt,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
}

/// Raw precision/recall after each detection in score order.
pub fn pr_curve(flags: &[bool], n_gt: usize) -> PrCurve {
    let mut tp = 0usize;
    let mut recall = Vec::with_capacity(flags.len());
    let mut precision = Vec::with_capacity(flags.len());
    for (i, &f) in flags.iter().enumerate() {
        tp += f as usize;
        recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
        precision.push(tp as f64 / (i + 1) as f64);
    }
    PrCurve { recall, precision }
}

/// Area under the precision-recall curve using the right-max precision
/// envelope. `None` when there is nothing to evaluate (no GT, no
/// detections); `0` when detections exist without GT.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return if flags.is_empty() { None } else { Some(0.0) };
    }
    let c = pr_curve(flags, n_gt);
    let mut env = c.precision.clone();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in c.recall.iter().zip(&env) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    Some(ap)
}

/// Unweighted mean of per-class APs.
pub fn mean_ap(aps: &[f64]) -> Result<f64> {
    if aps.is_empty() {
        return Err(Error::Empty("no evaluated classes".into()));
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Per-class flags accumulated over images, ranked by score with ties broken
/// by image order then detection index.
#[derive(Debug, Default)]
struct ClassAccumulator {
    scored: Vec<(f64, usize, usize, bool)>,
    n_gt: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub thresholds: MatchThresholds,
    /// Squared-side thresholds separating small / medium / large.
    pub small_area: f64,
    pub medium_area: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: MatchThresholds::default(),
            small_area: 32.0 * 32.0,
            medium_area: 96.0 * 96.0,
        }
    }
}

/// Per-class AP and PR curves over a set of images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassEvaluation {
    pub ap: BTreeMap<u32, f64>,
    pub pr_curves: BTreeMap<u32, PrCurve>,
    pub num_gt: BTreeMap<u32, usize>,
}

impl ClassEvaluation {
    pub fn map(&self) -> Option<f64> {
        let aps: Vec<f64> = self.ap.values().copied().collect();
        mean_ap(&aps).ok()
    }
}

/// Evaluates images with optional per-GT ignore flags.
fn evaluate_classes(
    scenes: &[&Scene],
    dets: &[&[Detection]],
    ignore: Option<&[Vec<bool>]>,
    cfg: &EvalConfig,
) -> Result<ClassEvaluation> {
    if scenes.len() != dets.len() {
        return Err(Error::LengthMismatch {
            left: scenes.len(),
            right: dets.len(),
        });
    }
    let mut acc: BTreeMap<u32, ClassAccumulator> = BTreeMap::new();
    for (img, (scene, d)) in scenes.iter().zip(dets).enumerate() {
        let none = vec![false; scene.objects.len()];
        let ig = ignore.map_or(&none, |i| &i[img]);
        let m = match_with_ignore(d, &scene.objects, ig, scene.gsd, cfg.thresholds)?;
        for (g, o) in scene.objects.iter().enumerate() {
            let a = acc.entry(o.class_id).or_default();
            if !ig[g] {
                a.n_gt += 1;
            }
        }
        for (i, det) in d.iter().enumerate() {
            let flag = match m.outcomes[i] {
                MatchOutcome::TruePositive(_) => true,
                MatchOutcome::FalsePositive => false,
                MatchOutcome::Ignored => continue,
            };
            acc.entry(det.class_id).or_default().scored.push((det.score, img, i, flag));
        }
    }
    let mut out = ClassEvaluation {
        ap: BTreeMap::new(),
        pr_curves: BTreeMap::new(),
        num_gt: BTreeMap::new(),
    };
    for (class, mut a) in acc {
        a.scored.sort_by(|x, y| y.0.total_cmp(&x.0).then((x.1, x.2).cmp(&(y.1, y.2))));
        let flags: Vec<bool> = a.scored.iter().map(|s| s.3).collect();
        if let Some(ap) = average_precision(&flags, a.n_gt) {
            out.ap.insert(class, ap);
            out.pr_curves.insert(class, pr_curve(&flags, a.n_gt));
            out.num_gt.insert(class, a.n_gt);
        }
    }
    Ok(out)
}

/// mAP over all classes present in GT or detections.
pub fn evaluate_map(scenes: &[&Scene], dets: &[&[Detection]], cfg: &EvalConfig) -> Result<ClassEvaluation> {
    evaluate_classes(scenes, dets, None, cfg)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SizeBinnedMap {
    pub small: Option<f64>,
    pub medium: Option<f64>,
    pub large: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeBin {
    Small,
    Medium,
    Large,
}

pub fn size_bin(area: f64, cfg: &EvalConfig) -> SizeBin {
    if area < cfg.small_area {
        SizeBin::Small
    } else if area < cfg.medium_area {
        SizeBin::Medium
    } else {
        SizeBin::Large
    }
}

/// mAP per size bin with out-of-bin GTs as ignore regions. Classes without
/// in-bin GT are left out of that bin; a bin with no GT at all is absent, as
/// is every bin when any GT lacks a source box.
pub fn size_binned_map(scenes: &[&Scene], dets: &[&[Detection]], cfg: &EvalConfig) -> Result<SizeBinnedMap> {
    let mut bins: Vec<Vec<SizeBin>> = Vec::with_capacity(scenes.len());
    for s in scenes {
        let mut v = Vec::with_capacity(s.objects.len());
        for o in &s.objects {
            match o.source_box {
                Some(b) => v.push(size_bin(b.area(), cfg)),
                None => return Ok(SizeBinnedMap::default()),
            }
        }
        bins.push(v);
    }
    let eval_bin = |bin: SizeBin| -> Result<Option<f64>> {
        let ignore: Vec<Vec<bool>> = bins.iter().map(|v| v.iter().map(|&b| b != bin).collect()).collect();
        let e = evaluate_classes(scenes, dets, Some(&ignore), cfg)?;
        let aps: Vec<f64> = e
            .ap
            .iter()
            .filter(|(c, _)| e.num_gt.get(c).copied().unwrap_or(0) > 0)
            .map(|(_, &ap)| ap)
            .collect();
        Ok(mean_ap(&aps).ok())
    };
    Ok(SizeBinnedMap {
        small: eval_bin(SizeBin::Small)?,
        medium: eval_bin(SizeBin::Medium)?,
        large: eval_bin(SizeBin::Large)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClutterBin {
    /// Percentile range, e.g. `"1%-10%"`.
    pub label: String,
    pub image_ids: Vec<String>,
    pub map: Option<f64>,
}

pub fn decile_label(bin: usize) -> String {
    format!("{}%-{}%", bin * 10 + 1, (bin + 1) * 10)
}

/// Ranks images by annotations per pixel (ties by image id) and evaluates
/// mAP separately in each of ten percentile bins; image `i` of `n` in rank
/// order goes to bin `⌊10·i/n⌋`.
pub fn clutter_binned_map(scenes: &[&Scene], dets: &[&[Detection]], cfg: &EvalConfig) -> Result<Vec<ClutterBin>> {
    let n = scenes.len();
    if n < 10 {
        return Err(Error::InvalidArgument(format!("clutter bins need at least 10 images, got {n}")));
    }
    if dets.len() != n {
        return Err(Error::LengthMismatch { left: dets.len(), right: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scenes[a]
            .clutter_ratio()
            .total_cmp(&scenes[b].clutter_ratio())
            .then_with(|| scenes[a].image_id.cmp(&scenes[b].image_id))
    });
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); 10];
    for (rank, &i) in order.iter().enumerate() {
        members[rank * 10 / n].push(i);
    }
    members
        .into_iter()
        .enumerate()
        .map(|(b, idx)| {
            let s: Vec<&Scene> = idx.iter().map(|&i| scenes[i]).collect();
            let d: Vec<&[Detection]> = idx.iter().map(|&i| dets[i]).collect();
            let e = evaluate_classes(&s, &d, None, cfg)?;
            Ok(ClutterBin {
                label: decile_label(b),
                image_ids: s.iter().map(|s| s.image_id.clone()).collect(),
                map: e.map(),
            })
        })
        .collect()
}

/// Everything computed for one detector on one test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub num_images: usize,
    pub per_class_ap: BTreeMap<u32, f64>,
    pub map: Option<f64>,
    pub size_bins: SizeBinnedMap,
    pub clutter: Option<Vec<ClutterBin>>,
    pub pr_curves: BTreeMap<u32, PrCurve>,
}

pub fn evaluate(scenes: &[&Scene], dets: &[&[Detection]], cfg: &EvalConfig) -> Result<EvaluationReport> {
    let e = evaluate_map(scenes, dets, cfg)?;
    let clutter = if scenes.len() >= 10 {
        Some(clutter_binned_map(scenes, dets, cfg)?)
    } else {
        None
    };
    Ok(EvaluationReport {
        num_images: scenes.len(),
        map: e.map(),
        per_class_ap: e.ap,
        size_bins: size_binned_map(scenes, dets, cfg)?,
        clutter,
        pr_curves: e.pr_curves,
    })
}

/// Classes appearing in either the annotations or the detections.
pub fn classes_present(scenes: &[&Scene], dets: &[&[Detection]]) -> BTreeSet<u32> {
    scenes
        .iter()
        .flat_map(|s| s.objects.iter().map(|o| o.class_id))
        .chain(dets.iter().flat_map(|d| d.iter().map(|x| x.class_id)))
        .collect()
}
