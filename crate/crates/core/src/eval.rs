//! Detector evaluation: one-to-one greedy matching, precision/recall curves,
//! 101-point interpolated AP, mAP and the confusion matrix with a
//! missed-detection column.

use std::cmp::Ordering;
use std::io::Write;

use indexmap::IndexMap;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::LabeledBox;
use crate::detections::Detection;
use crate::merge::{check_single_frame, MergeError};
use crate::taxonomy::ClassTaxonomy;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("class {0:?} has no ground-truth instances")]
    NoGroundTruth(String),
    #[error(transparent)]
    MixedFrames(#[from] MergeError),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
    #[error("failed to write report: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to write report: {0}")]
    Csv(#[from] csv::Error),
}

/// Ground truth and detections for one image (or tile), in a shared frame.
#[derive(Debug, Clone, Default)]
pub struct EvalImage {
    pub image_id: String,
    pub ground_truth: Vec<LabeledBox>,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Matching {
    /// `(detection index, ground-truth index)`
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_detections: Vec<usize>,
    pub unmatched_ground_truth: Vec<usize>,
}

impl Matching {
    /// Per-detection TP flags.
    pub fn tp_flags(&self, n_detections: usize) -> Vec<bool> {
        let mut flags = vec![false; n_detections];
        for &(d, _) in &self.pairs {
            flags[d] = true;
        }
        flags
    }
}

/// Descending score, ties by ascending id.
fn by_score_then_id(sa: f64, ia: usize, sb: f64, ib: usize) -> Ordering {
    sb.total_cmp(&sa).then(ia.cmp(&ib))
}

/// Greedy one-to-one matching. Detections are visited by descending score
/// (ties by index); each takes the unmatched ground-truth box with the
/// highest IoU at or above `iou_threshold`, restricted to its own class
/// when `class_aware`.
pub fn match_detections(
    detections: &[Detection],
    ground_truth: &[LabeledBox],
    iou_threshold: f64,
    class_aware: bool,
) -> Result<Matching, EvalError> {
    check_single_frame(detections)?;
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| by_score_then_id(detections[a].score, a, detections[b].score, b));
    let mut taken = vec![false; ground_truth.len()];
    let mut m = Matching::default();
    for d in order {
        let det = &detections[d];
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in ground_truth.iter().enumerate() {
            if taken[g] || (class_aware && gt.class != det.class) {
                continue;
            }
            let iou = det.bbox.iou(&gt.bbox);
            if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, _)) => {
                taken[g] = true;
                m.pairs.push((d, g));
            }
            None => m.unmatched_detections.push(d),
        }
    }
    m.unmatched_detections.sort_unstable();
    m.unmatched_ground_truth = (0..ground_truth.len()).filter(|&g| !taken[g]).collect();
    Ok(m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub score: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub class: String,
    pub iou_threshold: f64,
    pub n_ground_truth: usize,
    /// One point per ranked detection.
    pub points: Vec<PrPoint>,
}

/// A detection reduced to what the ranking sweep needs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedOutcome {
    pub score: f64,
    /// Global detection id, used to break score ties.
    pub id: usize,
    pub true_positive: bool,
}

/// Sweeps the score-ranked outcomes, accumulating TP and FP counts.
pub fn pr_curve_from_outcomes(
    class: &str,
    iou_threshold: f64,
    n_ground_truth: usize,
    outcomes: &[RankedOutcome],
) -> Result<PrCurve, EvalError> {
    if n_ground_truth == 0 {
        return Err(EvalError::NoGroundTruth(class.to_string()));
    }
    let mut ranked = outcomes.to_vec();
    ranked.sort_by(|a, b| by_score_then_id(a.score, a.id, b.score, b.id));
    let (mut tp, mut fp) = (0usize, 0usize);
    let points = ranked
        .iter()
        .map(|o| {
            if o.true_positive {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                score: o.score,
                recall: tp as f64 / n_ground_truth as f64,
                precision: tp as f64 / (tp + fp) as f64,
            }
        })
        .collect();
    Ok(PrCurve {
        class: class.to_string(),
        iou_threshold,
        n_ground_truth,
        points,
    })
}

/// Assigns global detection ids in image order, then detection order.
fn class_aware_outcomes(
    images: &[EvalImage],
    iou_threshold: f64,
) -> Result<Vec<Vec<(RankedOutcome, usize)>>, EvalError> {
    let mut next_id = 0;
    let mut bases = Vec::with_capacity(images.len());
    for img in images {
        bases.push(next_id);
        next_id += img.detections.len();
    }
    images
        .par_iter()
        .zip(bases)
        .map(|(img, base)| {
            let m = match_detections(&img.detections, &img.ground_truth, iou_threshold, true)?;
            let flags = m.tp_flags(img.detections.len());
            Ok(img
                .detections
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    (
                        RankedOutcome {
                            score: d.score,
                            id: base + i,
                            true_positive: flags[i],
                        },
                        i,
                    )
                })
                .collect())
        })
        .collect()
}

/// Precision/recall curve for one class across all images.
pub fn pr_curve(images: &[EvalImage], class: &str, iou_threshold: f64) -> Result<PrCurve, EvalError> {
    let outcomes = class_aware_outcomes(images, iou_threshold)?;
    let n_gt = images
        .iter()
        .flat_map(|i| &i.ground_truth)
        .filter(|g| g.class == class)
        .count();
    let mut ranked = Vec::new();
    for (img, outs) in images.iter().zip(&outcomes) {
        for (o, i) in outs {
            if img.detections[*i].class == class {
                ranked.push(*o);
            }
        }
    }
    pr_curve_from_outcomes(class, iou_threshold, n_gt, &ranked)
}

pub const RECALL_STEPS: usize = 100;

/// Maximum precision over curve points with recall at least `r`, 0 when
/// there is none.
pub fn interpolated_precision(curve: &PrCurve, r: f64) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| p.recall >= r)
        .map(|p| p.precision)
        .fold(0.0, f64::max)
}

/// 101-point interpolated AP: the sum over recall cutoffs r = 0.01, …, 1.00
/// of 0.01 · p_interp(r).
pub fn interpolated_ap(curve: &PrCurve) -> f64 {
    // running maximum from the right gives p_interp at every point in one pass
    let mut envelope: Vec<(f64, f64)> = Vec::with_capacity(curve.points.len());
    let mut best = 0.0f64;
    for p in curve.points.iter().rev() {
        best = best.max(p.precision);
        envelope.push((p.recall, best));
    }
    envelope.reverse();
    // recall is non-decreasing along the curve
    let mut cursor = 0;
    let mut sum = 0.0;
    for k in 1..=RECALL_STEPS {
        let r = k as f64 / RECALL_STEPS as f64;
        while cursor < envelope.len() && envelope[cursor].0 < r {
            cursor += 1;
        }
        if cursor < envelope.len() {
            sum += envelope[cursor].1;
        }
    }
    sum / RECALL_STEPS as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    /// `cells[gt][pred]`
    pub cells: Vec<Vec<usize>>,
    /// Ground truth with no qualifying prediction, per class.
    pub missed: Vec<usize>,
    /// Qualifying predictions that matched no ground truth, per predicted class.
    pub unmatched_predictions: Vec<usize>,
    pub score_floor: f64,
    pub iou_threshold: f64,
}

impl ConfusionMatrix {
    pub fn row_sum(&self, gt: usize) -> usize {
        self.cells[gt].iter().sum::<usize>() + self.missed[gt]
    }

    pub fn cell(&self, gt: &str, pred: &str) -> usize {
        let i = self.classes.iter().position(|c| c == gt);
        let j = self.classes.iter().position(|c| c == pred);
        match (i, j) {
            (Some(i), Some(j)) => self.cells[i][j],
            _ => 0,
        }
    }

    pub fn is_diagonal(&self) -> bool {
        self.cells
            .iter()
            .enumerate()
            .all(|(i, row)| row.iter().enumerate().all(|(j, &v)| i == j || v == 0))
    }
}

/// Class-agnostic matching of detections scoring strictly above
/// `score_floor`; each matched pair lands in `(gt class, predicted class)`.
pub fn confusion_matrix(
    images: &[EvalImage],
    taxonomy: &ClassTaxonomy,
    score_floor: f64,
    iou_threshold: f64,
) -> Result<ConfusionMatrix, EvalError> {
    let classes: Vec<String> = taxonomy.trained_classes().to_vec();
    let n = classes.len();
    let mut cells = vec![vec![0usize; n]; n];
    let mut gt_totals = vec![0usize; n];
    let mut unmatched_predictions = vec![0usize; n];
    let idx = |c: &str| {
        taxonomy
            .index_of(c)
            .ok_or_else(|| EvalError::InvalidConfig(format!("class {c:?} not in taxonomy")))
    };
    for img in images {
        let kept: Vec<Detection> = img
            .detections
            .iter()
            .filter(|d| d.score > score_floor)
            .cloned()
            .collect();
        let m = match_detections(&kept, &img.ground_truth, iou_threshold, false)?;
        for g in &img.ground_truth {
            gt_totals[idx(&g.class)?] += 1;
        }
        for &(d, g) in &m.pairs {
            cells[idx(&img.ground_truth[g].class)?][idx(&kept[d].class)?] += 1;
        }
        for &d in &m.unmatched_detections {
            unmatched_predictions[idx(&kept[d].class)?] += 1;
        }
    }
    let missed = (0..n)
        .map(|i| gt_totals[i] - cells[i].iter().sum::<usize>())
        .collect();
    Ok(ConfusionMatrix {
        classes,
        cells,
        missed,
        unmatched_predictions,
        score_floor,
        iou_threshold,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    /// Confusion-matrix predictions must score strictly above this.
    pub confusion_score_floor: f64,
    pub confusion_iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.5, 0.75],
            confusion_score_floor: 0.5,
            confusion_iou_threshold: 0.5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.iou_thresholds.is_empty() {
            return Err(EvalError::InvalidConfig("no IoU thresholds".into()));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if let Some(t) = self.iou_thresholds.iter().find(|t| !unit(**t)) {
            return Err(EvalError::InvalidConfig(format!("IoU threshold {t} outside [0, 1]")));
        }
        if !unit(self.confusion_iou_threshold) || !self.confusion_score_floor.is_finite() {
            return Err(EvalError::InvalidConfig("bad confusion-matrix thresholds".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassResult {
    pub n_ground_truth: usize,
    pub n_detections: usize,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdResult {
    pub iou_threshold: f64,
    pub classes: IndexMap<String, ClassResult>,
    /// Mean AP over classes with ground truth; `None` when there are none.
    pub map: Option<f64>,
}

impl ThresholdResult {
    pub fn ap(&self, class: &str) -> Option<f64> {
        self.classes.get(class).and_then(|c| c.ap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<ThresholdResult>,
    /// Classes left out of mAP for lack of ground truth.
    pub excluded_classes: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub curves: Vec<PrCurve>,
}

impl EvalReport {
    pub fn at(&self, iou_threshold: f64) -> Option<&ThresholdResult> {
        self.thresholds.iter().find(|t| t.iou_threshold == iou_threshold)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// `iou_threshold,class,n_gt,n_det,tp,fp,fn,ap` with an `mAP` row per threshold.
    pub fn write_ap_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iou_threshold", "class", "n_gt", "n_det", "tp", "fp", "fn", "ap"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for t in &self.thresholds {
            let thr = t.iou_threshold.to_string();
            for (class, r) in &t.classes {
                out.write_record([
                    thr.as_str(),
                    class,
                    &r.n_ground_truth.to_string(),
                    &r.n_detections.to_string(),
                    &r.true_positives.to_string(),
                    &r.false_positives.to_string(),
                    &r.false_negatives.to_string(),
                    &opt(r.ap),
                ])?;
            }
            out.write_record([thr.as_str(), "mAP", "", "", "", "", "", &opt(t.map)])?;
        }
        out.flush()?;
        Ok(())
    }

    /// Rows are ground-truth classes, columns predicted classes then `missed`.
    pub fn write_confusion_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let cm = &self.confusion;
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["ground_truth".to_string()];
        header.extend(cm.classes.iter().cloned());
        header.push("missed".into());
        out.write_record(&header)?;
        for (i, class) in cm.classes.iter().enumerate() {
            let mut row = vec![class.clone()];
            row.extend(cm.cells[i].iter().map(usize::to_string));
            row.push(cm.missed[i].to_string());
            out.write_record(&row)?;
        }
        let mut row = vec!["unmatched_predictions".to_string()];
        row.extend(cm.unmatched_predictions.iter().map(usize::to_string));
        row.push(String::new());
        out.write_record(&row)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_pr_curves_csv<W: Write>(&self, w: W) -> Result<(), EvalError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["iou_threshold", "class", "rank", "score", "recall", "precision"])?;
        for c in &self.curves {
            for (rank, p) in c.points.iter().enumerate() {
                out.write_record([
                    c.iou_threshold.to_string(),
                    c.class.clone(),
                    (rank + 1).to_string(),
                    p.score.to_string(),
                    p.recall.to_string(),
                    p.precision.to_string(),
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

fn evaluate_threshold(
    images: &[EvalImage],
    taxonomy: &ClassTaxonomy,
    iou_threshold: f64,
) -> Result<(ThresholdResult, Vec<PrCurve>), EvalError> {
    let outcomes = class_aware_outcomes(images, iou_threshold)?;
    let classes = taxonomy.trained_classes();
    let mut per_class: Vec<Vec<RankedOutcome>> = vec![Vec::new(); classes.len()];
    let mut n_gt = vec![0usize; classes.len()];
    let idx = |c: &str| {
        taxonomy
            .index_of(c)
            .ok_or_else(|| EvalError::InvalidConfig(format!("class {c:?} not in taxonomy")))
    };
    for (img, outs) in images.iter().zip(&outcomes) {
        for g in &img.ground_truth {
            n_gt[idx(&g.class)?] += 1;
        }
        for (o, i) in outs {
            per_class[idx(&img.detections[*i].class)?].push(*o);
        }
    }

    let results: Vec<(ClassResult, Option<PrCurve>)> = classes
        .par_iter()
        .enumerate()
        .map(|(c, class)| {
            let outs = &per_class[c];
            let tp = outs.iter().filter(|o| o.true_positive).count();
            let curve = pr_curve_from_outcomes(class, iou_threshold, n_gt[c], outs).ok();
            let result = ClassResult {
                n_ground_truth: n_gt[c],
                n_detections: outs.len(),
                true_positives: tp,
                false_positives: outs.len() - tp,
                false_negatives: n_gt[c] - tp,
                ap: curve.as_ref().map(interpolated_ap),
            };
            (result, curve)
        })
        .collect();

    let aps: Vec<f64> = results.iter().filter_map(|(r, _)| r.ap).collect();
    let map = (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64);
    let mut class_map = IndexMap::new();
    let mut curves = Vec::new();
    for (class, (r, curve)) in classes.iter().zip(results) {
        class_map.insert(class.clone(), r);
        curves.extend(curve);
    }
    Ok((
        ThresholdResult {
            iou_threshold,
            classes: class_map,
            map,
        },
        curves,
    ))
}

/// Full evaluation at each configured IoU threshold plus the confusion matrix.
pub fn evaluate(
    images: &[EvalImage],
    taxonomy: &ClassTaxonomy,
    cfg: &EvalConfig,
) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let per_threshold: Vec<(ThresholdResult, Vec<PrCurve>)> = cfg
        .iou_thresholds
        .par_iter()
        .map(|&t| evaluate_threshold(images, taxonomy, t))
        .collect::<Result<_, _>>()?;
    let confusion = confusion_matrix(
        images,
        taxonomy,
        cfg.confusion_score_floor,
        cfg.confusion_iou_threshold,
    )?;
    let excluded_classes = per_threshold
        .first()
        .map(|(t, _)| {
            t.classes
                .iter()
                .filter(|(_, r)| r.n_ground_truth == 0)
                .map(|(c, _)| c.clone())
                .collect()
        })
        .unwrap_or_default();
    let mut thresholds = Vec::new();
    let mut curves = Vec::new();
    for (t, c) in per_threshold {
        thresholds.push(t);
        curves.extend(c);
    }
    Ok(EvalReport {
        thresholds,
        excluded_classes,
        confusion,
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detections::Frame;
    use crate::BBox;
    use proptest::prelude::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    fn det(class: &str, bbox: BBox, score: f64) -> Detection {
        Detection::new(class, bbox, score, Frame::Image, "t").unwrap()
    }

    fn gt(class: &str, bbox: BBox) -> LabeledBox {
        LabeledBox::new(class, bbox)
    }

    #[test]
    fn matching_examples() {
        let g = vec![gt("Other", b(0.0, 0.0, 10.0, 10.0))];
        let m = match_detections(&[det("Other", b(0.0, 0.0, 10.0, 10.0), 0.9)], &g, 0.5, true).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);
        assert!(m.unmatched_detections.is_empty() && m.unmatched_ground_truth.is_empty());

        let two = [
            det("Other", b(0.0, 0.0, 10.0, 10.0), 0.6),
            det("Other", b(0.0, 0.0, 10.0, 9.0), 0.8),
        ];
        let m = match_detections(&two, &g, 0.5, true).unwrap();
        assert_eq!(m.pairs, vec![(1, 0)]);
        assert_eq!(m.unmatched_detections, vec![0]);

        // IoU 0.45
        let low = det("Other", b(0.0, 0.0, 10.0, 4.5), 0.9);
        assert_eq!(low.bbox.iou(&g[0].bbox), 0.45);
        let m = match_detections(&[low], &g, 0.5, true).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!(m.unmatched_ground_truth, vec![0]);

        // class mismatch only matters when class-aware
        let other = [det("Mixed Egret", b(0.0, 0.0, 10.0, 10.0), 0.9)];
        assert!(match_detections(&other, &g, 0.5, true).unwrap().pairs.is_empty());
        assert_eq!(match_detections(&other, &g, 0.5, false).unwrap().pairs.len(), 1);

        let mixed = [
            det("Other", b(0.0, 0.0, 1.0, 1.0), 0.9),
            Detection::new("Other", b(0.0, 0.0, 1.0, 1.0), 0.9, Frame::Tile, "t").unwrap(),
        ];
        assert!(matches!(
            match_detections(&mixed, &g, 0.5, true),
            Err(EvalError::MixedFrames(_))
        ));
    }

    #[test]
    fn matching_prefers_highest_iou() {
        let g = vec![
            gt("Other", b(0.0, 0.0, 10.0, 10.0)),
            gt("Other", b(2.0, 0.0, 12.0, 10.0)),
        ];
        let m = match_detections(&[det("Other", b(2.0, 0.0, 12.0, 10.0), 0.9)], &g, 0.5, true).unwrap();
        assert_eq!(m.pairs, vec![(0, 1)]);
    }

    fn outcomes(flags: &[bool]) -> Vec<RankedOutcome> {
        flags
            .iter()
            .enumerate()
            .map(|(i, &tp)| RankedOutcome {
                score: 1.0 - i as f64 / 100.0,
                id: i,
                true_positive: tp,
            })
            .collect()
    }

    #[test]
    fn pr_curve_hand_trace() {
        let c = pr_curve_from_outcomes("x", 0.5, 3, &outcomes(&[true, false, true, true])).unwrap();
        let r: Vec<f64> = c.points.iter().map(|p| p.recall).collect();
        let p: Vec<f64> = c.points.iter().map(|p| p.precision).collect();
        assert_eq!(r, vec![1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
        assert_eq!(p, vec![1.0, 0.5, 2.0 / 3.0, 0.75]);

        let none = pr_curve_from_outcomes("x", 0.5, 2, &outcomes(&[false, false])).unwrap();
        assert!(none.points.iter().all(|p| p.precision == 0.0 && p.recall == 0.0));
        assert_eq!(interpolated_ap(&none), 0.0);

        assert!(matches!(
            pr_curve_from_outcomes("x", 0.5, 0, &[]),
            Err(EvalError::NoGroundTruth(c)) if c == "x"
        ));
    }

    #[test]
    fn ap_examples() {
        let perfect = pr_curve_from_outcomes("x", 0.5, 4, &outcomes(&[true; 4])).unwrap();
        assert_eq!(perfect.points.last().map(|p| (p.recall, p.precision)), Some((1.0, 1.0)));
        assert_eq!(interpolated_ap(&perfect), 1.0);

        let half = pr_curve_from_outcomes("x", 0.5, 10, &outcomes(&[true; 5])).unwrap();
        let ap = interpolated_ap(&half);
        assert!((ap - 0.5).abs() <= 0.01, "{ap}");

        let empty = pr_curve_from_outcomes("x", 0.5, 3, &[]).unwrap();
        assert_eq!(interpolated_ap(&empty), 0.0);

        // (TP,FP,TP,TP) over 3 GT: p_interp is 1 up to 1/3, then 0.75
        let c = pr_curve_from_outcomes("x", 0.5, 3, &outcomes(&[true, false, true, true])).unwrap();
        let expected = (33.0 * 1.0 + 67.0 * 0.75) / 100.0;
        assert!((interpolated_ap(&c) - expected).abs() < 1e-12);
    }

    /// Direct evaluation: for every cutoff rescan every rank prefix from scratch.
    fn brute_force_ap(flags: &[bool], n_gt: usize) -> f64 {
        let mut sum = 0.0;
        for k in 1..=100 {
            let r = k as f64 / 100.0;
            let mut best = 0.0f64;
            for end in 1..=flags.len() {
                let tp = flags[..end].iter().filter(|f| **f).count();
                let recall = tp as f64 / n_gt as f64;
                let precision = tp as f64 / end as f64;
                if recall >= r && precision > best {
                    best = precision;
                }
            }
            sum += best;
        }
        sum / 100.0
    }

    proptest! {
        #[test]
        fn ap_matches_brute_force(
            (n_gt, flags) in (1usize..=10).prop_flat_map(|n| (Just(n), proptest::collection::vec(any::<bool>(), 0..=20)))
        ) {
            // at most n_gt true positives can exist
            let mut seen = 0;
            let flags: Vec<bool> = flags.into_iter().map(|f| {
                let keep = f && seen < n_gt;
                seen += keep as usize;
                keep
            }).collect();
            let c = pr_curve_from_outcomes("x", 0.5, n_gt, &outcomes(&flags)).unwrap();
            let ap = interpolated_ap(&c);
            prop_assert_eq!(ap.to_bits(), brute_force_ap(&flags, n_gt).to_bits());
            prop_assert!((0.0..=1.0).contains(&ap));
            let mut prev = f64::INFINITY;
            for k in 0..=100 {
                let p = interpolated_precision(&c, k as f64 / 100.0);
                prop_assert!(p <= prev);
                prev = p;
            }
            for w in c.points.windows(2) {
                prop_assert!(w[0].recall <= w[1].recall);
            }
        }
    }

    #[test]
    fn confusion_examples() {
        let tax = ClassTaxonomy::builtin();
        let img = EvalImage {
            image_id: "a".into(),
            ground_truth: vec![
                gt("White Ibis Adult", b(0.0, 0.0, 10.0, 10.0)),
                gt("Other", b(100.0, 100.0, 110.0, 110.0)),
            ],
            detections: vec![det("Mixed Egret", b(0.0, 0.0, 10.0, 8.0), 0.9)],
        };
        assert_eq!(img.detections[0].bbox.iou(&img.ground_truth[0].bbox), 0.8);
        let cm = confusion_matrix(std::slice::from_ref(&img), &tax, 0.5, 0.5).unwrap();
        assert_eq!(cm.cell("White Ibis Adult", "Mixed Egret"), 1);
        let other = tax.index_of("Other").unwrap();
        assert_eq!(cm.missed[other], 1);
        for i in 0..cm.classes.len() {
            let gt_total = img.ground_truth.iter().filter(|g| g.class == cm.classes[i]).count();
            assert_eq!(cm.row_sum(i), gt_total);
        }

        // score exactly at the floor is excluded
        let mut at_floor = img;
        at_floor.detections[0].score = 0.5;
        let cm = confusion_matrix(&[at_floor], &tax, 0.5, 0.5).unwrap();
        assert_eq!(cm.cell("White Ibis Adult", "Mixed Egret"), 0);
        assert_eq!(cm.missed.iter().sum::<usize>(), 2);
    }

    #[test]
    fn evaluate_empty_detections() {
        let tax = ClassTaxonomy::builtin();
        let img = EvalImage {
            image_id: "a".into(),
            ground_truth: vec![gt("Other", b(0.0, 0.0, 10.0, 10.0))],
            detections: vec![],
        };
        let r = evaluate(&[img], &tax, &EvalConfig::default()).unwrap();
        assert_eq!(r.thresholds.len(), 2);
        for t in &r.thresholds {
            assert_eq!(t.map, Some(0.0));
        }
        assert_eq!(r.excluded_classes.len(), 15);
        assert!(r.confusion.cells.iter().flatten().all(|&v| v == 0));
        assert_eq!(r.confusion.missed.iter().sum::<usize>(), 1);

        let none = evaluate(&[], &tax, &EvalConfig::default()).unwrap();
        assert_eq!(none.thresholds[0].map, None);
    }

    #[test]
    fn evaluate_perfect_and_map_mean() {
        let tax = ClassTaxonomy::builtin();
        let img = EvalImage {
            image_id: "a".into(),
            ground_truth: vec![
                gt("Other", b(0.0, 0.0, 10.0, 10.0)),
                gt("Mixed Egret", b(20.0, 0.0, 30.0, 10.0)),
            ],
            detections: vec![
                det("Other", b(0.0, 0.0, 10.0, 10.0), 1.0),
                det("Mixed Egret", b(20.0, 0.0, 30.0, 10.0), 1.0),
                det("Mixed Egret", b(50.0, 0.0, 60.0, 10.0), 0.4),
            ],
        };
        let r = evaluate(&[img], &tax, &EvalConfig::default()).unwrap();
        let t = r.at(0.5).unwrap();
        assert_eq!(t.ap("Other"), Some(1.0));
        assert_eq!(t.ap("Mixed Egret"), Some(1.0));
        assert_eq!(t.map, Some(1.0));
        assert_eq!(t.classes["Mixed Egret"].false_positives, 1);
        assert!(r.confusion.is_diagonal());
        assert_eq!(r.confusion.unmatched_predictions.iter().sum::<usize>(), 0);

        let mut csv = Vec::new();
        r.write_ap_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("iou_threshold,class,n_gt,n_det,tp,fp,fn,ap\n"));
        assert!(text.contains("0.5,mAP,,,,,,1\n"));
        let mut csv = Vec::new();
        r.write_confusion_csv(&mut csv).unwrap();
        assert!(String::from_utf8(csv).unwrap().lines().next().unwrap().ends_with(",missed"));
        let back: EvalReport = serde_json::from_str(&r.to_json_string()).unwrap();
        assert_eq!(back, r);
    }

    fn arb_image() -> impl Strategy<Value = EvalImage> {
        let classes = ["Other", "Mixed Egret", "White Ibis Adult"];
        let boxes = |n| {
            proptest::collection::vec((0u32..80, 0u32..80, 4u32..30, 4u32..30, 0usize..3, 0u32..1000), 0..n)
        };
        (boxes(10), boxes(20)).prop_map(move |(g, d)| EvalImage {
            image_id: "a".into(),
            ground_truth: g
                .into_iter()
                .map(|(x, y, w, h, c, _)| {
                    gt(classes[c], BBox::from_xywh(x as f64, y as f64, w as f64, h as f64).unwrap())
                })
                .collect(),
            detections: d
                .into_iter()
                .map(|(x, y, w, h, c, s)| {
                    det(
                        classes[c],
                        BBox::from_xywh(x as f64, y as f64, w as f64, h as f64).unwrap(),
                        s as f64 / 1000.0,
                    )
                })
                .collect(),
        })
    }

    proptest! {
        #[test]
        fn report_invariants(img in arb_image()) {
            let tax = ClassTaxonomy::builtin();
            let r = evaluate(std::slice::from_ref(&img), &tax, &EvalConfig::default()).unwrap();
            for i in 0..r.confusion.classes.len() {
                let total = img.ground_truth.iter().filter(|g| g.class == r.confusion.classes[i]).count();
                prop_assert_eq!(r.confusion.row_sum(i), total);
            }
            for t in &r.thresholds {
                let aps: Vec<f64> = t.classes.values().filter_map(|c| c.ap).collect();
                if let Some(map) = t.map {
                    let mean = aps.iter().sum::<f64>() / aps.len() as f64;
                    prop_assert!((map - mean).abs() <= 1e-12);
                    prop_assert!((0.0..=1.0).contains(&map));
                }
            }

            // strictly monotone rescaling of scores leaves AP unchanged
            let mut rescaled = img.clone();
            for d in &mut rescaled.detections {
                d.score = d.score.powi(3) * 0.5 + 0.1;
            }
            let r2 = evaluate(&[rescaled], &tax, &EvalConfig { iou_thresholds: vec![0.5, 0.75], ..Default::default() }).unwrap();
            for (a, c) in r.thresholds.iter().zip(&r2.thresholds) {
                for (k, v) in &a.classes {
                    prop_assert_eq!(v.ap, c.classes[k].ap);
                }
            }
        }
    }
}
