//! Detection scoring: center-distance matching, AP, true-positive errors, NDS.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{wrap_yaw, Box3D};

/// Recall and precision below this are clipped from the AP integral.
pub const MIN_RECALL: f64 = 0.1;
pub const MIN_PRECISION: f64 = 0.1;
/// Number of recall samples over [0, 1].
pub const RECALL_SAMPLES: usize = 101;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassPreset {
    OneClass,
    ThreeClass,
    EightClass,
}

pub const DYNAMIC_CLASSES: [&str; 8] = [
    "car",
    "truck",
    "bus",
    "trailer",
    "construction_vehicle",
    "pedestrian",
    "motorcycle",
    "bicycle",
];

impl ClassPreset {
    /// Evaluation class for a raw class name, `None` if outside the preset.
    pub fn map(self, raw: &str) -> Option<&'static str> {
        let known = DYNAMIC_CLASSES.iter().find(|c| **c == raw)?;
        Some(match self {
            ClassPreset::OneClass => "object",
            ClassPreset::EightClass => known,
            ClassPreset::ThreeClass => match *known {
                "pedestrian" => "pedestrian",
                "bicycle" | "motorcycle" => "bicycle",
                _ => "vehicle",
            },
        })
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "1" | "one_class" => Some(ClassPreset::OneClass),
            "3" | "three_class" => Some(ClassPreset::ThreeClass),
            "8" | "eight_class" => Some(ClassPreset::EightClass),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Center-distance thresholds in meters, ascending.
    pub thresholds: Vec<f64>,
    pub tp_threshold: f64,
    pub preset: ClassPreset,
    /// Score every prediction with confidence 1 (pseudo-label quality mode).
    pub unit_confidence: bool,
    /// Attribute error, not predicted and therefore pinned.
    pub maae: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 1.0, 2.0, 4.0],
            tp_threshold: 2.0,
            preset: ClassPreset::ThreeClass,
            unit_confidence: false,
            maae: 1.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty()
            || self.thresholds.iter().any(|t| !(*t > 0.0 && t.is_finite()))
            || self.thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config("eval.thresholds must be positive and strictly ascending".into()));
        }
        if !(self.tp_threshold > 0.0 && self.tp_threshold.is_finite()) {
            return Err(Error::Config("eval.tp_threshold must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.maae) {
            return Err(Error::Config("eval.maae must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// A predicted or ground-truth box in a given frame.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalBox {
    pub frame: usize,
    pub bbox: Box3D,
    pub class_name: String,
    pub confidence: f64,
}

fn center_distance(a: &Box3D, b: &Box3D) -> f64 {
    (a.center_xy() - b.center_xy()).norm()
}

/// Input-order independent tie breaker.
fn geometry_order(a: &EvalBox, b: &EvalBox) -> Ordering {
    let key = |e: &EvalBox| {
        [
            e.bbox.center.x,
            e.bbox.center.y,
            e.bbox.center.z,
            e.bbox.size[0],
            e.bbox.size[1],
            e.bbox.size[2],
            e.bbox.yaw,
            e.bbox.velocity.x,
            e.bbox.velocity.y,
        ]
    };
    a.frame
        .cmp(&b.frame)
        .then_with(|| {
            key(a)
                .iter()
                .zip(key(b).iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
        .then_with(|| a.class_name.cmp(&b.class_name))
}

/// Prediction indices by descending confidence.
pub fn ranking(preds: &[EvalBox]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&i, &j| {
        preds[j]
            .confidence
            .total_cmp(&preds[i].confidence)
            .then_with(|| geometry_order(&preds[i], &preds[j]))
            .then_with(|| i.cmp(&j))
    });
    order
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Match {
    pub pred: usize,
    pub gt: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// In ranking order.
    pub matches: Vec<Match>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
    /// True-positive flag per ranked prediction.
    pub ranked_tp: Vec<bool>,
}

/// Greedy matching: predictions in descending confidence each take the nearest
/// unmatched ground truth of the same frame with center distance `< threshold`.
pub fn match_predictions(preds: &[EvalBox], gts: &[EvalBox], threshold: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut by_frame: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_frame.entry(g.frame).or_default().push(i);
    }
    let mut matches = Vec::new();
    let mut unmatched_preds = Vec::new();
    let mut ranked_tp = Vec::with_capacity(preds.len());
    for p in ranking(preds) {
        let pred = &preds[p];
        let mut best: Option<(f64, usize)> = None;
        for &g in by_frame.get(&pred.frame).map(Vec::as_slice).unwrap_or(&[]) {
            if taken[g] {
                continue;
            }
            let d = center_distance(&pred.bbox, &gts[g].bbox);
            if d >= threshold {
                continue;
            }
            let better = match best {
                None => true,
                Some((bd, bg)) => match d.total_cmp(&bd) {
                    Ordering::Less => true,
                    Ordering::Greater => false,
                    Ordering::Equal => geometry_order(&gts[g], &gts[bg]).then(g.cmp(&bg)).is_lt(),
                },
            };
            if better {
                best = Some((d, g));
            }
        }
        match best {
            Some((distance, g)) => {
                taken[g] = true;
                matches.push(Match { pred: p, gt: g, distance });
                ranked_tp.push(true);
            }
            None => {
                unmatched_preds.push(p);
                ranked_tp.push(false);
            }
        }
    }
    MatchResult {
        matches,
        unmatched_preds,
        unmatched_gts: (0..gts.len()).filter(|&g| !taken[g]).collect(),
        ranked_tp,
    }
}

/// Linear interpolation of `fp` over nondecreasing `xp` at `x`; `fp[0]` left of
/// the range, `right` beyond it.
fn interp(x: f64, xp: &[f64], fp: &[f64], right: f64) -> f64 {
    let last = xp.len() - 1;
    if x < xp[0] {
        return fp[0];
    }
    if x > xp[last] {
        return right;
    }
    if x == xp[last] {
        return fp[last];
    }
    // largest j with xp[j] <= x; then xp[j + 1] > x
    let j = xp.partition_point(|&v| v <= x) - 1;
    let slope = (fp[j + 1] - fp[j]) / (xp[j + 1] - xp[j]);
    fp[j] + slope * (x - xp[j])
}

/// Area under the clipped precision–recall curve sampled at 101 recall points.
pub fn average_precision(ranked_tp: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 || !ranked_tp.iter().any(|&t| t) {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut recall = Vec::with_capacity(ranked_tp.len());
    for (k, &is_tp) in ranked_tp.iter().enumerate() {
        tp += usize::from(is_tp);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    let first = (100.0 * MIN_RECALL).round() as usize + 1;
    let samples: Vec<f64> = (first..RECALL_SAMPLES)
        .map(|r| {
            let x = r as f64 / (RECALL_SAMPLES - 1) as f64;
            (interp(x, &recall, &precision, 0.0) - MIN_PRECISION).max(0.0)
        })
        .collect();
    (samples.iter().sum::<f64>() / samples.len() as f64 / (1.0 - MIN_PRECISION)).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
}

impl TpErrors {
    pub const SENTINEL: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
        ave: 1.0,
    };
}

/// 1 − IoU of two boxes after aligning their centers and headings.
pub fn scale_error(a: &Box3D, b: &Box3D) -> f64 {
    let inter: f64 = (0..3).map(|k| a.size[k].min(b.size[k])).product();
    let va: f64 = a.size.iter().product();
    let vb: f64 = b.size.iter().product();
    1.0 - inter / (va + vb - inter)
}

/// Smallest absolute heading difference over the full circle, in [0, π].
pub fn orientation_error(a: f64, b: f64) -> f64 {
    wrap_yaw(a - b).abs()
}

/// Mean TP errors over (prediction, ground truth) pairs; sentinel 1.0 when empty.
pub fn tp_errors(pairs: &[(&Box3D, &Box3D)]) -> TpErrors {
    if pairs.is_empty() {
        return TpErrors::SENTINEL;
    }
    let n = pairs.len() as f64;
    let mean = |f: &dyn Fn(&Box3D, &Box3D) -> f64| pairs.iter().map(|(p, g)| f(p, g)).sum::<f64>() / n;
    TpErrors {
        ate: mean(&|p, g| center_distance(p, g)),
        ase: mean(&scale_error),
        aoe: mean(&|p, g| orientation_error(p.yaw, g.yaw)),
        ave: mean(&|p, g| (p.velocity - g.velocity).norm()),
    }
}

/// Detection score: (5·mAP + Σ (1 − min(1, err))) / 10 over the five TP errors.
pub fn nds(map: f64, errors: &TpErrors, maae: f64) -> f64 {
    let tp_terms: f64 = [errors.ate, errors.ase, errors.aoe, errors.ave, maae]
        .iter()
        .map(|e| 1.0 - e.min(1.0))
        .sum();
    (5.0 * map + tp_terms) / 10.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub threshold: f64,
    pub ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_name: String,
    pub n_gt: usize,
    pub n_pred: usize,
    pub n_tp: usize,
    pub ap: Vec<ThresholdAp>,
    pub mean_ap: f64,
    pub errors: TpErrors,
}

/// One matched pair, indices into the caller's prediction / ground-truth lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub class_name: String,
    pub threshold: f64,
    pub frame: usize,
    pub pred_index: usize,
    pub gt_index: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub preset: ClassPreset,
    pub thresholds: Vec<f64>,
    pub tp_threshold: f64,
    pub unit_confidence: bool,
    pub classes: Vec<ClassMetrics>,
    pub mean_ap: f64,
    pub errors: TpErrors,
    pub maae: f64,
    pub nds: f64,
    pub matches: Vec<MatchRecord>,
}

impl EvalReport {
    pub fn class(&self, name: &str) -> Option<&ClassMetrics> {
        self.classes.iter().find(|c| c.class_name == name)
    }

    /// AP averaged over classes at one threshold.
    pub fn mean_ap_at(&self, threshold: f64) -> Option<f64> {
        let values: Vec<f64> = self
            .classes
            .iter()
            .map(|c| c.ap.iter().find(|t| t.threshold == threshold).map(|t| t.ap))
            .collect::<Option<_>>()?;
        (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
    }

    /// One row per class plus a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,n_gt,n_pred,n_tp");
        for t in &self.thresholds {
            let _ = write!(out, ",ap@{t}");
        }
        out.push_str(",mean_ap,ate,ase,aoe,ave\n");
        let row = |out: &mut String, name: &str, counts: Option<(usize, usize, usize)>, aps: &[f64], map: f64, e: &TpErrors| {
            let (g, p, t) = counts.map_or((String::new(), String::new(), String::new()), |(g, p, t)| {
                (g.to_string(), p.to_string(), t.to_string())
            });
            let _ = write!(out, "{name},{g},{p},{t}");
            for ap in aps {
                let _ = write!(out, ",{ap:.6}");
            }
            let _ = writeln!(out, ",{map:.6},{:.6},{:.6},{:.6},{:.6}", e.ate, e.ase, e.aoe, e.ave);
        };
        for c in &self.classes {
            let aps: Vec<f64> = c.ap.iter().map(|t| t.ap).collect();
            row(&mut out, &c.class_name, Some((c.n_gt, c.n_pred, c.n_tp)), &aps, c.mean_ap, &c.errors);
        }
        let mean_aps: Vec<f64> = self
            .thresholds
            .iter()
            .map(|&t| self.mean_ap_at(t).unwrap_or(0.0))
            .collect();
        row(&mut out, "mean", None, &mean_aps, self.mean_ap, &self.errors);
        out
    }
}

fn map_classes(boxes: &[EvalBox], preset: ClassPreset, unmapped: &mut BTreeSet<String>) -> Vec<Option<&'static str>> {
    boxes
        .iter()
        .map(|b| {
            let m = preset.map(&b.class_name);
            if m.is_none() {
                unmapped.insert(b.class_name.clone());
            }
            m
        })
        .collect()
}

/// Scores predictions against ground truth.
///
/// Classes are those of the preset that occur in either list. Raw class names
/// outside the preset are rejected.
pub fn evaluate(preds: &[EvalBox], gts: &[EvalBox], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let mut unmapped = BTreeSet::new();
    let pred_classes = map_classes(preds, cfg.preset, &mut unmapped);
    let gt_classes = map_classes(gts, cfg.preset, &mut unmapped);
    if !unmapped.is_empty() {
        return Err(Error::UnmappedClasses(unmapped.into_iter().collect()));
    }
    let classes: BTreeSet<&'static str> = pred_classes.iter().chain(&gt_classes).flatten().copied().collect();

    let mut class_metrics = Vec::new();
    let mut records = Vec::new();
    for class in classes {
        let select = |boxes: &[EvalBox], mapped: &[Option<&'static str>]| -> (Vec<usize>, Vec<EvalBox>) {
            boxes
                .iter()
                .zip(mapped)
                .enumerate()
                .filter(|(_, (_, m))| **m == Some(class))
                .map(|(i, (b, _))| {
                    let mut b = b.clone();
                    b.class_name = class.to_string();
                    if cfg.unit_confidence {
                        b.confidence = 1.0;
                    }
                    (i, b)
                })
                .unzip()
        };
        let (pred_idx, class_preds) = select(preds, &pred_classes);
        let (gt_idx, class_gts) = select(gts, &gt_classes);

        let mut ap = Vec::new();
        for &threshold in &cfg.thresholds {
            let m = match_predictions(&class_preds, &class_gts, threshold);
            ap.push(ThresholdAp {
                threshold,
                ap: average_precision(&m.ranked_tp, class_gts.len()),
            });
            records.extend(m.matches.iter().map(|mm| MatchRecord {
                class_name: class.to_string(),
                threshold,
                frame: class_preds[mm.pred].frame,
                pred_index: pred_idx[mm.pred],
                gt_index: gt_idx[mm.gt],
                distance: mm.distance,
            }));
        }
        let tp_match = match_predictions(&class_preds, &class_gts, cfg.tp_threshold);
        let pairs: Vec<(&Box3D, &Box3D)> = tp_match
            .matches
            .iter()
            .map(|m| (&class_preds[m.pred].bbox, &class_gts[m.gt].bbox))
            .collect();
        let mean_ap = ap.iter().map(|t| t.ap).sum::<f64>() / ap.len() as f64;
        class_metrics.push(ClassMetrics {
            class_name: class.to_string(),
            n_gt: class_gts.len(),
            n_pred: class_preds.len(),
            n_tp: pairs.len(),
            ap,
            mean_ap,
            errors: tp_errors(&pairs),
        });
    }

    let (mean_ap, errors) = if class_metrics.is_empty() {
        (0.0, TpErrors::SENTINEL)
    } else {
        let n = class_metrics.len() as f64;
        let avg = |f: fn(&ClassMetrics) -> f64| class_metrics.iter().map(f).sum::<f64>() / n;
        (
            avg(|c| c.mean_ap),
            TpErrors {
                ate: avg(|c| c.errors.ate),
                ase: avg(|c| c.errors.ase),
                aoe: avg(|c| c.errors.aoe),
                ave: avg(|c| c.errors.ave),
            },
        )
    };
    Ok(EvalReport {
        preset: cfg.preset,
        thresholds: cfg.thresholds.clone(),
        tp_threshold: cfg.tp_threshold,
        unit_confidence: cfg.unit_confidence,
        classes: class_metrics,
        mean_ap,
        errors,
        maae: cfg.maae,
        nds: nds(mean_ap, &errors, cfg.maae),
        matches: records,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{CoordFrame, Point3, Vec2};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn eb(frame: usize, x: f64, y: f64, conf: f64) -> EvalBox {
        EvalBox {
            frame,
            bbox: Box3D::new(Point3::new(x, y, 0.8), [4.0, 2.0, 1.6], 0.0, Vec2::zeros(), CoordFrame::Ego).unwrap(),
            class_name: "car".into(),
            confidence: conf,
        }
    }

    #[test]
    fn matching_examples() {
        let gts = vec![eb(0, 0.0, 0.0, 1.0), eb(0, 10.0, 0.0, 1.0)];
        let m = match_predictions(&gts, &gts, 0.5);
        assert_eq!(m.matches.len(), 2);
        assert!(m.matches.iter().all(|mm| mm.distance == 0.0));

        let m = match_predictions(&[], &gts, 2.0);
        assert!(m.matches.is_empty());
        assert_eq!(m.unmatched_gts, vec![0, 1]);

        let preds = vec![eb(0, 0.5, 0.0, 0.4), eb(0, 1.0, 0.0, 0.9)];
        let m = match_predictions(&preds, &gts[..1], 2.0);
        assert_eq!(m.matches, vec![Match { pred: 1, gt: 0, distance: 1.0 }]);
        assert_eq!(m.unmatched_preds, vec![0]);
        assert_eq!(m.ranked_tp, vec![true, false]);

        // strict threshold and per-frame matching
        assert!(match_predictions(&[eb(0, 2.0, 0.0, 1.0)], &gts[..1], 2.0).matches.is_empty());
        assert!(match_predictions(&[eb(1, 0.0, 0.0, 1.0)], &gts[..1], 2.0).matches.is_empty());
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true; 5], 5), 1.0);
        assert_eq!(average_precision(&[], 5), 0.0);
        assert_eq!(average_precision(&[true], 0), 0.0);
        assert_eq!(average_precision(&[false, false], 3), 0.0);
        // half recall with perfect precision: recall samples 0.11..=0.5 at precision 1
        assert_abs_diff_eq!(average_precision(&[true], 2), 40.0 / 90.0, epsilon = 1e-12);
    }

    #[test]
    fn tp_error_examples() {
        let b = eb(0, 1.0, 2.0, 1.0).bbox;
        assert_eq!(tp_errors(&[(&b, &b)]), TpErrors { ate: 0.0, ase: 0.0, aoe: 0.0, ave: 0.0 });
        let mut flipped = b;
        flipped.yaw = PI;
        assert_abs_diff_eq!(tp_errors(&[(&flipped, &b)]).aoe, PI, epsilon = 1e-12);
        let tall = Box3D::new(b.center, [4.0, 2.0, 2.0], 0.0, Vec2::zeros(), CoordFrame::Ego).unwrap();
        let flat = Box3D::new(b.center, [4.0, 2.0, 1.0], 0.0, Vec2::zeros(), CoordFrame::Ego).unwrap();
        assert_abs_diff_eq!(scale_error(&tall, &flat), 0.5, epsilon = 1e-12);
        assert_eq!(tp_errors(&[]), TpErrors::SENTINEL);
    }

    #[test]
    fn nds_examples() {
        let zero = TpErrors { ate: 0.0, ase: 0.0, aoe: 0.0, ave: 0.0 };
        assert_eq!(nds(1.0, &zero, 1.0), 0.9);
        assert_eq!(nds(0.0, &TpErrors { ate: 1.5, ase: 1.0, aoe: 3.0, ave: 2.0 }, 1.0), 0.0);
    }

    #[test]
    fn presets() {
        assert_eq!(ClassPreset::ThreeClass.map("truck"), Some("vehicle"));
        assert_eq!(ClassPreset::ThreeClass.map("motorcycle"), Some("bicycle"));
        assert_eq!(ClassPreset::OneClass.map("pedestrian"), Some("object"));
        assert_eq!(ClassPreset::EightClass.map("bus"), Some("bus"));
        assert_eq!(ClassPreset::EightClass.map("barrier"), None);
    }

    #[test]
    fn evaluate_rejects_unknown_classes() {
        let mut p = eb(0, 0.0, 0.0, 1.0);
        p.class_name = "barrier".into();
        match evaluate(&[p], &[eb(0, 0.0, 0.0, 1.0)], &EvalConfig::default()) {
            Err(Error::UnmappedClasses(c)) => assert_eq!(c, vec!["barrier".to_string()]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn evaluate_perfect_and_csv() {
        let gts = vec![eb(0, 0.0, 0.0, 1.0), eb(1, 5.0, 5.0, 1.0)];
        let r = evaluate(&gts, &gts, &EvalConfig::default()).unwrap();
        assert_eq!(r.mean_ap, 1.0);
        assert_abs_diff_eq!(r.nds, 0.9, epsilon = 1e-12);
        assert_eq!(r.matches.len(), 8);
        let csv = r.to_csv();
        assert!(csv.starts_with("class,n_gt,n_pred,n_tp,ap@0.5,ap@1,ap@2,ap@4,mean_ap,ate,ase,aoe,ave\n"));
        assert!(csv.contains("\nvehicle,2,2,2,1.000000"));
        assert!(csv.lines().last().unwrap().starts_with("mean,,,,1.000000"));
    }
}
