//! Rotated-box IoU and 40-recall-point average precision.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::head::{Box3D, Detection, ObjectClass};

static DEGENERATE_BOXES: AtomicU64 = AtomicU64::new(0);

/// Number of IoU evaluations that involved a zero-area box, process wide.
pub fn degenerate_iou_count() -> u64 {
    DEGENERATE_BOXES.load(Ordering::Relaxed)
}

/// Signed shoelace area; positive for counter-clockwise polygons.
pub fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let twice: f64 = (0..n)
        .map(|i| {
            let (p, q) = (poly[i], poly[(i + 1) % n]);
            p[0] * q[1] - q[0] * p[1]
        })
        .sum();
    twice / 2.0
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

fn intersect(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let (cp, cq) = (cross(a, b, p), cross(a, b, q));
    let t = cp / (cp - cq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

/// Sutherland–Hodgman clipping of `subject` by the counter-clockwise convex
/// polygon `clip`.
pub fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let (a, b) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut out);
        for j in 0..input.len() {
            let (p, q) = (input[j], input[(j + 1) % input.len()]);
            let (pin, qin) = (cross(a, b, p) >= 0.0, cross(a, b, q) >= 0.0);
            if pin {
                out.push(p);
                if !qin {
                    out.push(intersect(p, q, a, b));
                }
            } else if qin {
                out.push(intersect(p, q, a, b));
            }
        }
    }
    out
}

fn footprint_area(b: &Box3D) -> f64 {
    b.size[0] * b.size[1]
}

fn degenerate(b: &Box3D) -> bool {
    !(b.size[0] > 0.0 && b.size[1] > 0.0 && b.size[2] > 0.0) || b.size.iter().any(|v| !v.is_finite())
}

/// Intersection area of the two BEV footprints.
pub fn bev_intersection(a: &Box3D, b: &Box3D) -> f64 {
    polygon_area(&clip_polygon(&a.footprint(), &b.footprint())).max(0.0)
}

/// BEV IoU of the oriented footprints, in `[0, 1]`. Degenerate boxes have
/// IoU 0 with everything and are counted.
pub fn rotated_iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    if degenerate(a) || degenerate(b) {
        DEGENERATE_BOXES.fetch_add(1, Ordering::Relaxed);
        log::warn!("IoU requested for a degenerate box");
        return 0.0;
    }
    let inter = bev_intersection(a, b);
    let union = footprint_area(a) + footprint_area(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// 3D IoU of yaw-only boxes: BEV intersection times z overlap over the
/// union volume.
pub fn iou_3d(a: &Box3D, b: &Box3D) -> f64 {
    if degenerate(a) || degenerate(b) {
        DEGENERATE_BOXES.fetch_add(1, Ordering::Relaxed);
        log::warn!("IoU requested for a degenerate box");
        return 0.0;
    }
    let z_lo = (a.center[2] - a.size[2] / 2.0).max(b.center[2] - b.size[2] / 2.0);
    let z_hi = (a.center[2] + a.size[2] / 2.0).min(b.center[2] + b.size[2] / 2.0);
    let dz = (z_hi - z_lo).max(0.0);
    if dz == 0.0 {
        return 0.0;
    }
    let inter = bev_intersection(a, b) * dz;
    let va = footprint_area(a) * a.size[2];
    let vb = footprint_area(b) * b.size[2];
    (inter / (va + vb - inter)).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IouMode {
    Bev,
    #[default]
    #[serde(rename = "3d")]
    ThreeD,
}

impl IouMode {
    pub fn iou(self, a: &Box3D, b: &Box3D) -> f64 {
        match self {
            IouMode::Bev => rotated_iou_bev(a, b),
            IouMode::ThreeD => iou_3d(a, b),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub iou_mode: IouMode,
    pub iou_thresholds: BTreeMap<ObjectClass, f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_mode: IouMode::ThreeD,
            iou_thresholds: [
                (ObjectClass::Vehicle, 0.5),
                (ObjectClass::Pedestrian, 0.25),
                (ObjectClass::Cyclist, 0.25),
            ]
            .into_iter()
            .collect(),
        }
    }
}

impl EvalConfig {
    pub fn threshold(&self, class: ObjectClass) -> f64 {
        self.iou_thresholds.get(&class).copied().unwrap_or(0.5)
    }
}

/// Greedy assignment of one scene's detections of one class.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Per detection (input order): matched GT index.
    pub det_to_gt: Vec<Option<usize>>,
    /// Per GT (input order): whether some detection claimed it.
    pub gt_matched: Vec<bool>,
}

/// Visits detections by descending score (ties by input order); each takes
/// the unmatched GT of highest IoU at or above `threshold`.
pub fn match_greedy(dets: &[Detection], gts: &[Box3D], threshold: f64, mode: IouMode) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));
    let mut det_to_gt = vec![None; dets.len()];
    let mut gt_matched = vec![false; gts.len()];
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts.iter().enumerate() {
            if gt_matched[j] {
                continue;
            }
            let iou = mode.iou(&dets[d].bbox, gt);
            if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            gt_matched[j] = true;
            det_to_gt[d] = Some(j);
        }
    }
    MatchResult {
        det_to_gt,
        gt_matched,
    }
}

pub const RECALL_POINTS: usize = 40;

/// Scored true/false positives of one class over a dataset.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrCurve {
    /// `(score, is_tp)` sorted by descending score.
    pub entries: Vec<(f64, bool)>,
    pub num_gt: usize,
}

impl PrCurve {
    pub fn new(mut entries: Vec<(f64, bool)>, num_gt: usize) -> Self {
        // stable: equal scores keep their pooled order
        entries.sort_by(|a, b| b.0.total_cmp(&a.0));
        Self { entries, num_gt }
    }

    /// `(precision, recall)` after each entry.
    pub fn points(&self) -> Vec<(f64, f64)> {
        let mut tp = 0usize;
        self.entries
            .iter()
            .enumerate()
            .map(|(k, &(_, is_tp))| {
                tp += is_tp as usize;
                (tp as f64 / (k + 1) as f64, tp as f64 / self.num_gt.max(1) as f64)
            })
            .collect()
    }

    /// Interpolated precision at recall `i / 40` for `i = 1..=40`: the best
    /// precision among operating points whose recall reaches it.
    pub fn sampled_precision(&self) -> Vec<f64> {
        let n = self.num_gt;
        let mut best = vec![0.0f64; RECALL_POINTS];
        let mut tp = 0usize;
        for (k, &(_, is_tp)) in self.entries.iter().enumerate() {
            tp += is_tp as usize;
            let p = tp as f64 / (k + 1) as f64;
            // recall tp/n ≥ i/40 ⟺ 40·tp ≥ i·n
            for (i, b) in best.iter_mut().enumerate() {
                if RECALL_POINTS * tp >= (i + 1) * n {
                    *b = b.max(p);
                }
            }
        }
        best
    }

    /// `None` when the class has no ground truth.
    pub fn ap_r40(&self) -> Option<f64> {
        if self.num_gt == 0 {
            return None;
        }
        Some(self.sampled_precision().iter().sum::<f64>() / RECALL_POINTS as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub ap_r40: Option<f64>,
    pub iou_threshold: f64,
    pub num_gt: usize,
    pub num_det: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    /// Interpolated precision at recall `1/40 … 40/40`.
    pub precision_r40: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub iou_mode: IouMode,
    pub num_scenes: usize,
    pub classes: BTreeMap<ObjectClass, ClassMetrics>,
    /// Mean AP over classes with ground truth.
    pub mean_ap_r40: Option<f64>,
}

/// Per-class curve pooled over scenes; matching runs per scene.
pub fn class_curve(
    dets: &[Vec<Detection>],
    gts: &[Vec<Box3D>],
    class: ObjectClass,
    threshold: f64,
    mode: IouMode,
) -> PrCurve {
    let mut entries = Vec::new();
    let mut num_gt = 0;
    for (sd, sg) in dets.iter().zip(gts) {
        let d: Vec<Detection> = sd.iter().filter(|d| d.bbox.class == class).copied().collect();
        let g: Vec<Box3D> = sg.iter().filter(|b| b.class == class).copied().collect();
        num_gt += g.len();
        let m = match_greedy(&d, &g, threshold, mode);
        entries.extend(d.iter().zip(&m.det_to_gt).map(|(d, t)| (d.score, t.is_some())));
    }
    PrCurve::new(entries, num_gt)
}

/// AP_R40 per class over paired per-scene detections and ground truth.
pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<Box3D>], cfg: &EvalConfig) -> Metrics {
    assert_eq!(dets.len(), gts.len(), "one detection list per scene");
    let mut classes = BTreeMap::new();
    for class in ObjectClass::ALL {
        let thr = cfg.threshold(class);
        let curve = class_curve(dets, gts, class, thr, cfg.iou_mode);
        let tp = curve.entries.iter().filter(|e| e.1).count();
        classes.insert(
            class,
            ClassMetrics {
                ap_r40: curve.ap_r40(),
                iou_threshold: thr,
                num_gt: curve.num_gt,
                num_det: curve.entries.len(),
                true_positives: tp,
                false_positives: curve.entries.len() - tp,
                precision_r40: curve.sampled_precision(),
            },
        );
    }
    let aps: Vec<f64> = classes.values().filter_map(|m| m.ap_r40).collect();
    Metrics {
        iou_mode: cfg.iou_mode,
        num_scenes: dets.len(),
        classes,
        mean_ap_r40: (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn bx(x: f64, y: f64, l: f64, w: f64, yaw: f64) -> Box3D {
        Box3D::new(ObjectClass::Vehicle, [x, y, 0.0], [l, w, 1.5], yaw)
    }

    fn det(b: Box3D, score: f64) -> Detection {
        Detection { bbox: b, score }
    }

    #[test]
    fn identical_and_hand_cases() {
        let a = bx(0.0, 0.0, 4.0, 2.0, 0.0);
        assert!((rotated_iou_bev(&a, &a) - 1.0).abs() < 1e-12);
        let b = bx(1.0, 0.0, 4.0, 2.0, 0.0);
        assert!((rotated_iou_bev(&a, &b) - 0.6).abs() < 1e-12);
        let s = bx(2.0, -1.0, 3.0, 3.0, 0.2);
        let r = bx(2.0, -1.0, 3.0, 3.0, 0.2 + FRAC_PI_2);
        assert!((rotated_iou_bev(&s, &r) - 1.0).abs() < 1e-12);
        let far = bx(10.0, 0.0, 4.0, 2.0, 0.7);
        assert_eq!(rotated_iou_bev(&a, &far), 0.0);
    }

    #[test]
    fn rotated_cross_overlap() {
        // a 4×2 bar and the same bar turned 90°: a 2×2 overlap
        let a = bx(0.0, 0.0, 4.0, 2.0, 0.0);
        let b = bx(0.0, 0.0, 4.0, 2.0, FRAC_PI_2);
        assert!((rotated_iou_bev(&a, &b) - 4.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_box_is_zero_and_counted() {
        let before = degenerate_iou_count();
        let a = bx(0.0, 0.0, 0.0, 2.0, 0.0);
        assert_eq!(rotated_iou_bev(&a, &a), 0.0);
        assert!(degenerate_iou_count() > before);
    }

    #[test]
    fn iou_3d_scales_by_height_overlap() {
        let a = bx(0.0, 0.0, 4.0, 2.0, 0.0);
        let mut b = a;
        b.center[2] = 0.75;
        // inter 8 · 0.75 = 6, union 12 + 12 − 6
        assert!((iou_3d(&a, &b) - 6.0 / 18.0).abs() < 1e-12);
        b.center[2] = 2.0;
        assert_eq!(iou_3d(&a, &b), 0.0);
    }

    #[test]
    fn ap_basic_cases() {
        let g = bx(0.0, 0.0, 4.0, 2.0, 0.0);
        let cfg = EvalConfig::default();
        let m = evaluate(&[vec![det(g, 0.9)]], &[vec![g]], &cfg);
        assert_eq!(m.classes[&ObjectClass::Vehicle].ap_r40, Some(1.0));
        assert_eq!(m.classes[&ObjectClass::Pedestrian].ap_r40, None);
        let m = evaluate(&[vec![]], &[vec![g]], &cfg);
        assert_eq!(m.classes[&ObjectClass::Vehicle].ap_r40, Some(0.0));
        let fp = bx(20.0, 0.0, 4.0, 2.0, 0.0);
        let m = evaluate(&[vec![det(g, 0.9), det(fp, 0.8)]], &[vec![g]], &cfg);
        assert_eq!(m.classes[&ObjectClass::Vehicle].ap_r40, Some(1.0));
        let m = evaluate(&[vec![det(g, 0.7), det(fp, 0.8)]], &[vec![g]], &cfg);
        assert_eq!(m.classes[&ObjectClass::Vehicle].ap_r40, Some(0.5));
    }

    #[test]
    fn each_gt_is_matched_once() {
        let g = bx(0.0, 0.0, 4.0, 2.0, 0.0);
        let m = match_greedy(&[det(g, 0.5), det(g, 0.9)], &[g], 0.5, IouMode::Bev);
        assert_eq!(m.det_to_gt, vec![None, Some(0)]);
        assert_eq!(m.gt_matched, vec![true]);
    }
}
