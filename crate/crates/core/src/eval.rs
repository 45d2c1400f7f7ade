//! COCO-style average precision and pseudo-label statistics.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox, Detection};

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub iou_threshold: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Outcome of greedy matching: for every detection in global score order,
/// whether it hit an unmatched ground truth.
fn match_detections(dets: &[Vec<Detection>], gts: &[Vec<BBox>], thr: f64) -> (Vec<bool>, usize) {
    let mut order: Vec<(usize, usize)> = dets
        .iter()
        .enumerate()
        .flat_map(|(i, ds)| (0..ds.len()).map(move |j| (i, j)))
        .collect();
    // Stable: equal scores keep image order, then detection order.
    order.sort_by(|a, b| dets[b.0][b.1].score.total_cmp(&dets[a.0][a.1].score));
    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let n_gt = gts.iter().map(Vec::len).sum();
    let hits = order
        .iter()
        .map(|&(i, j)| {
            let Some(img_gts) = gts.get(i) else { return false };
            let d = &dets[i][j].bbox;
            let mut best: Option<(f64, usize)> = None;
            for (g, gt) in img_gts.iter().enumerate() {
                if taken[i][g] {
                    continue;
                }
                let o = iou(d, gt);
                if o >= thr && best.is_none_or(|(b, _)| o > b) {
                    best = Some((o, g));
                }
            }
            match best {
                Some((_, g)) => {
                    taken[i][g] = true;
                    true
                }
                None => false,
            }
        })
        .collect();
    (hits, n_gt)
}

/// Precision/recall after each detection in score order.
pub fn pr_curve(dets: &[Vec<Detection>], gts: &[Vec<BBox>], thr: f64) -> PrCurve {
    let (hits, n_gt) = match_detections(dets, gts, thr);
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    for (k, &hit) in hits.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
    }
    PrCurve {
        iou_threshold: thr,
        precision,
        recall,
    }
}

/// 101-point interpolated AP of a PR curve. No ground truth gives 0.
pub fn interpolated_ap(curve: &PrCurve, n_gt: usize) -> f64 {
    if n_gt == 0 || curve.precision.is_empty() {
        return 0.0;
    }
    let mut env = curve.precision.clone();
    for k in (0..env.len().saturating_sub(1)).rev() {
        env[k] = env[k].max(env[k + 1]);
    }
    let total: f64 = (0..=100)
        .map(|i| {
            let r = i as f64 / 100.0;
            let k = curve.recall.partition_point(|&x| x < r);
            env.get(k).copied().unwrap_or(0.0)
        })
        .sum();
    total / 101.0
}

/// AP over a set of images at one IoU threshold. `dets[i]` and `gts[i]`
/// belong to the same image.
pub fn average_precision(dets: &[Vec<Detection>], gts: &[Vec<BBox>], iou_thr: f64) -> f64 {
    let n_gt = gts.iter().map(Vec::len).sum();
    interpolated_ap(&pr_curve(dets, gts, iou_thr), n_gt)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub thresholds: Vec<f64>,
    pub ap: Vec<f64>,
    /// Mean over `thresholds`.
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AP50", skip_serializing_if = "Option::is_none", default)]
    pub ap50: Option<f64>,
    #[serde(rename = "AP75", skip_serializing_if = "Option::is_none", default)]
    pub ap75: Option<f64>,
    pub pr_curves: Vec<PrCurve>,
    pub n_images: usize,
    pub n_gt: usize,
    pub n_dets: usize,
}

fn at(thresholds: &[f64], ap: &[f64], t: f64) -> Option<f64> {
    thresholds
        .iter()
        .position(|&x| (x - t).abs() < 1e-9)
        .map(|i| ap[i])
}

pub fn evaluate(dets: &[Vec<Detection>], gts: &[Vec<BBox>], thresholds: &[f64]) -> EvalReport {
    let n_gt = gts.iter().map(Vec::len).sum();
    let pr_curves: Vec<PrCurve> = thresholds.iter().map(|&t| pr_curve(dets, gts, t)).collect();
    let ap: Vec<f64> = pr_curves.iter().map(|c| interpolated_ap(c, n_gt)).collect();
    let map = if ap.is_empty() {
        0.0
    } else {
        ap.iter().sum::<f64>() / ap.len() as f64
    };
    EvalReport {
        ap50: at(thresholds, &ap, 0.5),
        ap75: at(thresholds, &ap, 0.75),
        thresholds: thresholds.to_vec(),
        ap,
        map,
        pr_curves,
        n_images: gts.len(),
        n_gt,
        n_dets: dets.iter().map(Vec::len).sum(),
    }
}

pub const CONF_BINS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoStats {
    pub count: usize,
    pub mean_confidence: f64,
    /// Confidence histogram over `[0, 1]` in equal bins.
    pub histogram: Vec<usize>,
    /// Pseudo boxes matching a ground truth at IoU 0.5, over pseudo boxes.
    pub precision: f64,
    /// Ground truths matched, over ground truths.
    pub recall: f64,
}

/// Quality of pseudo labels against the (training-masked) ground truth.
/// An empty pseudo set reports precision 0.
pub fn pseudo_quality(pseudo: &[Vec<Detection>], gts: &[Vec<BBox>]) -> PseudoStats {
    let (hits, n_gt) = match_detections(pseudo, gts, 0.5);
    let count = hits.len();
    let tp = hits.iter().filter(|&&h| h).count();
    let mut histogram = vec![0usize; CONF_BINS];
    let mut sum = 0.0;
    for d in pseudo.iter().flatten() {
        sum += d.score;
        let bin = ((d.score * CONF_BINS as f64) as usize).min(CONF_BINS - 1);
        histogram[bin] += 1;
    }
    PseudoStats {
        count,
        mean_confidence: if count == 0 { 0.0 } else { sum / count as f64 },
        histogram,
        precision: if count == 0 { 0.0 } else { tp as f64 / count as f64 },
        recall: if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 },
    }
}
