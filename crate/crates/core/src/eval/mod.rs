//! Detection scoring, resolution-curve fits and synthetic scenes.

mod piecewise;
mod synth;

pub use piecewise::{line_fit, piecewise_fit, secant_slope, LineFit, PiecewiseFit, BREAKPOINT_STEP};
pub use synth::{render_boxes, synth_scene, synth_scene_with, SceneSpec, BACKGROUND_RANGE, OBJECT_RGB};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{canonical_cmp, iou, Detection, GridIndex};
use crate::par::{self, Exec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `(detection index, truth index, iou)` into the caller's slices.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Greedy matching. Detections are visited in canonical order (confidence
/// descending); each takes the unmatched truth with the highest IOU at or
/// above `iou_threshold`, the lower truth index winning ties. Class ids are
/// ignored; see [`match_by_class`].
pub fn match_detections(dets: &[Detection], gts: &[Detection], iou_threshold: f64) -> Result<MatchResult> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::invalid(format!("iou threshold {iou_threshold} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| canonical_cmp(&dets[a], &dets[b]).then(a.cmp(&b)));

    let mut index = GridIndex::for_boxes(gts.iter().map(|g| &g.bbox));
    for (i, g) in gts.iter().enumerate() {
        index.insert(i, &g.bbox);
    }
    let mut taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for g in index.candidates(&dets[d].bbox) {
            if taken[g] {
                continue;
            }
            let v = iou(&dets[d].bbox, &gts[g].bbox);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            taken[g] = true;
            pairs.push((d, g, v));
        }
    }
    let tp = pairs.len();
    Ok(MatchResult {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        pairs,
    })
}

/// Per-class IOU thresholds; classes not listed use `default_iou`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouPolicy {
    pub default_iou: f64,
    #[serde(default)]
    pub per_class: BTreeMap<u32, f64>,
}

impl Default for IouPolicy {
    /// 0.25 for cars (class 0), 0.5 otherwise.
    fn default() -> Self {
        IouPolicy {
            default_iou: 0.5,
            per_class: BTreeMap::from([(0, 0.25)]),
        }
    }
}

impl IouPolicy {
    pub fn uniform(iou: f64) -> Self {
        IouPolicy {
            default_iou: iou,
            per_class: BTreeMap::new(),
        }
    }

    pub fn threshold(&self, class_id: u32) -> f64 {
        self.per_class.get(&class_id).copied().unwrap_or(self.default_iou)
    }
}

/// Matches each class separately; pair indices refer to the full slices.
pub fn match_by_class(dets: &[Detection], gts: &[Detection], policy: &IouPolicy) -> Result<MatchResult> {
    let mut classes: Vec<u32> = dets.iter().chain(gts).map(|d| d.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut out = MatchResult::default();
    for c in classes {
        let di: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].class_id == c).collect();
        let gi: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].class_id == c).collect();
        let d: Vec<Detection> = di.iter().map(|&i| dets[i].clone()).collect();
        let g: Vec<Detection> = gi.iter().map(|&i| gts[i].clone()).collect();
        let m = match_detections(&d, &g, policy.threshold(c))?;
        out.tp += m.tp;
        out.fp += m.fp;
        out.fn_ += m.fn_;
        out.pairs.extend(m.pairs.into_iter().map(|(a, b, v)| (di[a], gi[b], v)));
    }
    out.pairs.sort_by_key(|p| p.0);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Precision, recall and F1, with 0 wherever a denominator vanishes.
pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> Prf {
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Prf { precision, recall, f1 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountMetrics {
    /// `N_predicted / N_truth` per scene.
    pub count_fractions: Vec<f64>,
    /// `|sum(pred) - sum(truth)| / sum(truth)`.
    pub total_count_error: f64,
}

pub fn count_metrics(counts: &[(usize, usize)]) -> Result<CountMetrics> {
    if counts.is_empty() {
        return Err(Error::invalid("no scenes to count"));
    }
    let mut fractions = Vec::with_capacity(counts.len());
    for (i, &(pred, truth)) in counts.iter().enumerate() {
        if truth == 0 {
            return Err(Error::invalid(format!("scene {i} has no truth objects; F_c is undefined")));
        }
        fractions.push(pred as f64 / truth as f64);
    }
    let pred: usize = counts.iter().map(|c| c.0).sum();
    let truth: usize = counts.iter().map(|c| c.1).sum();
    Ok(CountMetrics {
        count_fractions: fractions,
        total_count_error: (pred as f64 - truth as f64).abs() / truth as f64,
    })
}

/// Weighted mean and weighted population standard deviation.
pub fn weighted_stats(values: &[f64], weights: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::invalid("weighted_stats needs at least one value"));
    }
    if values.len() != weights.len() {
        return Err(Error::invalid(format!("{} values but {} weights", values.len(), weights.len())));
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::invalid("weights must be positive"));
    }
    let total: f64 = weights.iter().sum();
    let mean = values.iter().zip(weights).map(|(v, w)| v * w).sum::<f64>() / total;
    let var = values.iter().zip(weights).map(|(v, w)| w * (v - mean).powi(2)).sum::<f64>() / total;
    Ok((mean, var.sqrt()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub detections: Vec<Detection>,
    pub truth: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub scene_id: String,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub f1: f64,
    /// `None` when the scene has no truth.
    pub count_fraction: Option<f64>,
    pub n_truth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub count_fraction: f64,
    pub total_count_error: f64,
    pub per_scene: Vec<SceneScore>,
    pub weighted_mean_f1: f64,
    pub weighted_std_f1: f64,
}

/// Scores each scene (concurrently) and aggregates in input order. Scenes
/// without truth are scored but left out of the weighted statistics and
/// count fractions.
pub fn evaluate(scenes: &[Scene], policy: &IouPolicy, exec: Exec) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::invalid("no scenes to evaluate"));
    }
    let matches = par::map(exec, scenes, |s| match_by_class(&s.detections, &s.truth, policy));
    let mut per_scene = Vec::with_capacity(scenes.len());
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (s, m) in scenes.iter().zip(matches) {
        let m = m?;
        tp += m.tp;
        fp += m.fp;
        fn_ += m.fn_;
        let n_truth = s.truth.len();
        per_scene.push(SceneScore {
            scene_id: s.scene_id.clone(),
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
            f1: f1_from_counts(m.tp, m.fp, m.fn_).f1,
            count_fraction: (n_truth > 0).then(|| s.detections.len() as f64 / n_truth as f64),
            n_truth,
        });
    }
    let prf = f1_from_counts(tp, fp, fn_);
    let weighted: Vec<&SceneScore> = per_scene.iter().filter(|s| s.n_truth > 0).collect();
    let (mean, std) = if weighted.is_empty() {
        (0.0, 0.0)
    } else {
        let v: Vec<f64> = weighted.iter().map(|s| s.f1).collect();
        let w: Vec<f64> = weighted.iter().map(|s| s.n_truth as f64).collect();
        weighted_stats(&v, &w)?
    };
    let n_truth = tp + fn_;
    let n_pred = tp + fp;
    let (count_fraction, total_count_error) = if n_truth == 0 {
        (0.0, 0.0)
    } else {
        let counts: Vec<(usize, usize)> = weighted.iter().map(|s| (s.tp + s.fp, s.n_truth)).collect();
        (n_pred as f64 / n_truth as f64, count_metrics(&counts)?.total_count_error)
    };
    Ok(EvalReport {
        precision: prf.precision,
        recall: prf.recall,
        f1: prf.f1,
        count_fraction,
        total_count_error,
        per_scene,
        weighted_mean_f1: mean,
        weighted_std_f1: std,
    })
}

/// One row of a resolution curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub gsd: f64,
    pub f1: f64,
    #[serde(rename = "F_c")]
    pub count_fraction: f64,
}

pub fn write_curve_csv(points: &[CurvePoint], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    for p in points {
        w.serialize(p).map_err(|e| Error::Schema(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Schema(format!("{}: {e}", path.display()))))
        .collect()
}
