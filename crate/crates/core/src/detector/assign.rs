//! Uniform matching: every ground-truth box takes its `k` closest anchors
//! as positives, so large and small objects receive the same number of
//! positive samples.

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatcherConfig {
    pub k: usize,
    /// Candidates whose anchor IoU with their box is below this are negatives.
    pub pos_iou_floor: f64,
    /// Non-positive anchors whose predicted box reaches this IoU with any
    /// box are ignored by the classification loss.
    pub ignore_iou: f64,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        MatcherConfig {
            k: 4,
            pos_iou_floor: 0.15,
            ignore_iou: 0.7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorLabel {
    Negative,
    Ignore,
    /// Index into the ground-truth list.
    Positive(usize),
}

/// L1 distance between boxes in `(cx, cy, w, h)` form.
fn cxcywh_l1(a: &BBox, b: &BBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).abs() + (ay - by).abs() + (a.width() - b.width()).abs() + (a.height() - b.height()).abs()
}

/// Label every anchor against `gts`. `predicted` holds the decoded box for
/// each anchor and only drives the ignore rule; pass `None` to skip it.
pub fn assign_targets(
    anchors: &[BBox],
    gts: &[BBox],
    predicted: Option<&[BBox]>,
    cfg: &MatcherConfig,
) -> Vec<AnchorLabel> {
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    if gts.is_empty() || anchors.is_empty() {
        return labels;
    }
    // (distance, gt) of the best claim on each anchor so far.
    let mut claim: Vec<Option<(f64, usize)>> = vec![None; anchors.len()];
    for (g, gt) in gts.iter().enumerate() {
        let mut order: Vec<(f64, usize)> = anchors
            .iter()
            .enumerate()
            .map(|(i, a)| (cxcywh_l1(a, gt), i))
            .collect();
        let k = cfg.k.min(order.len());
        order.select_nth_unstable_by(k.saturating_sub(1), |x, y| {
            x.0.total_cmp(&y.0).then(x.1.cmp(&y.1))
        });
        for &(dist, i) in &order[..k] {
            if iou(&anchors[i], gt) < cfg.pos_iou_floor {
                continue;
            }
            match claim[i] {
                Some((d, _)) if d <= dist => {}
                _ => claim[i] = Some((dist, g)),
            }
        }
    }
    for (i, c) in claim.iter().enumerate() {
        if let Some((_, g)) = c {
            labels[i] = AnchorLabel::Positive(*g);
        }
    }
    if let Some(pred) = predicted {
        for (i, label) in labels.iter_mut().enumerate() {
            if *label == AnchorLabel::Negative
                && gts.iter().any(|g| iou(&pred[i], g) >= cfg.ignore_iou)
            {
                *label = AnchorLabel::Ignore;
            }
        }
    }
    labels
}

pub fn count_positives(labels: &[AnchorLabel]) -> usize {
    labels
        .iter()
        .filter(|l| matches!(l, AnchorLabel::Positive(_)))
        .count()
}
