//! Turning teacher detections into pseudo labels: a confidence filter, the
//! ADSO reweighting for the classification branch and Fusion Box merging
//! for the regression branch.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::augment::{map_boxes, ViewTransform};
use crate::error::{Error, Result};
use crate::geometry::{union_box, BBox, Detection};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoConfig {
    /// Confidence threshold; scores equal to it are kept.
    pub sigma: f64,
    /// Fusion threshold on the similarity `xi`.
    pub mu: f64,
    /// ADSO knee.
    pub r: f64,
    pub use_adso: bool,
    pub use_fusion: bool,
}

impl Default for PseudoConfig {
    fn default() -> Self {
        PseudoConfig {
            sigma: 0.5,
            mu: 0.05,
            r: 0.7,
            use_adso: true,
            use_fusion: true,
        }
    }
}

impl PseudoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma) {
            return Err(Error::Config(format!("sigma must lie in [0, 1), got {}", self.sigma)));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if !(self.r > 0.0 && self.r < 1.0) {
            return Err(Error::Config(format!("r must lie in (0, 1), got {}", self.r)));
        }
        Ok(())
    }
}

/// Order-preserving subset of `dets` with `score >= sigma`.
pub fn confidence_filter(dets: &[Detection], sigma: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score >= sigma).copied().collect()
}

/// ADSO confidence transform. Scores below the knee `r` are pushed down
/// along a quarter sine; scores at or above it pass through.
pub fn adso(x: f64, r: f64) -> Result<f64> {
    if !(x > 0.0 && x <= 1.0) {
        return Err(Error::Domain(format!("adso score must lie in (0, 1], got {x}")));
    }
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Domain(format!("adso knee must lie in (0, 1), got {r}")));
    }
    Ok(if x < r {
        r * (FRAC_PI_2 * (x - r) / r).sin() + r
    } else {
        x
    })
}

/// Squared centre distance over the sum of the view sides.
pub fn fusion_similarity(a: &BBox, b: &BBox, view: &ViewTransform) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    ((ax - bx).powi(2) + (ay - by).powi(2)) / (view.scaled_w + view.scaled_h) as f64
}

/// A regression-branch pseudo box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedBox {
    pub bbox: BBox,
    /// Highest score among the merged detections.
    pub score: f64,
    pub fused: bool,
}

/// One greedy pass: each surviving box in turn absorbs every other
/// surviving box whose centre lies within `mu` of its current centre.
pub fn fusion_box(dets: &[Detection], mu: f64, view: &ViewTransform) -> Vec<FusedBox> {
    let mut live: Vec<FusedBox> = dets
        .iter()
        .map(|d| FusedBox {
            bbox: d.bbox,
            score: d.score,
            fused: false,
        })
        .collect();
    if live.len() <= 1 {
        return live;
    }
    let mut m = 0;
    while m < live.len() {
        let mut n = 0;
        while n < live.len() {
            if n != m && fusion_similarity(&live[m].bbox, &live[n].bbox, view) < mu {
                let gone = live.remove(n);
                if n < m {
                    m -= 1;
                }
                let keep = &mut live[m];
                keep.bbox = union_box(&keep.bbox, &gone.bbox);
                keep.score = keep.score.max(gone.score);
                keep.fused = true;
            } else {
                n += 1;
            }
        }
        m += 1;
    }
    live
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClsPseudo {
    pub det: Detection,
    pub weight: f64,
}

/// Pseudo labels for one unlabeled image, in student-view coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub cls_branch: Vec<ClsPseudo>,
    pub reg_branch: Vec<FusedBox>,
    pub sigma: f64,
    pub mu: f64,
    pub r: f64,
}

impl PseudoLabelSet {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Filter teacher detections (teacher-view coordinates), weight the
/// classification branch, fuse the regression branch, and carry both onto
/// the student view. Boxes that leave the student view are dropped.
pub fn build_pseudo_set(
    teacher_dets: &[Detection],
    teacher_view: &ViewTransform,
    student_view: &ViewTransform,
    cfg: &PseudoConfig,
) -> Result<PseudoLabelSet> {
    let kept = confidence_filter(teacher_dets, cfg.sigma);
    let to_student = |b: &BBox| map_boxes(std::slice::from_ref(b), teacher_view, student_view).pop();

    let mut cls_branch = Vec::with_capacity(kept.len());
    for d in &kept {
        let weight = if cfg.use_adso { adso(d.score, cfg.r)? } else { 1.0 };
        if let Some(bbox) = to_student(&d.bbox) {
            cls_branch.push(ClsPseudo {
                det: Detection { bbox, ..*d },
                weight,
            });
        }
    }

    let reg_source = if cfg.use_fusion {
        fusion_box(&kept, cfg.mu, teacher_view)
    } else {
        kept.iter()
            .map(|d| FusedBox {
                bbox: d.bbox,
                score: d.score,
                fused: false,
            })
            .collect()
    };
    let reg_branch = reg_source
        .into_iter()
        .filter_map(|f| to_student(&f.bbox).map(|bbox| FusedBox { bbox, ..f }))
        .collect();

    Ok(PseudoLabelSet {
        cls_branch,
        reg_branch,
        sigma: cfg.sigma,
        mu: cfg.mu,
        r: cfg.r,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(b: [f64; 4], score: f64) -> Detection {
        Detection {
            bbox: BBox::new(b[0], b[1], b[2], b[3]),
            score,
            class_id: 0,
        }
    }

    fn view(w: usize, h: usize) -> ViewTransform {
        ViewTransform::identity(w, h)
    }

    #[test]
    fn filter_examples() {
        let d = [det([0.0, 0.0, 1.0, 1.0], 0.4), det([0.0, 0.0, 1.0, 1.0], 0.5), det([0.0, 0.0, 1.0, 1.0], 0.9)];
        let kept: Vec<f64> = confidence_filter(&d, 0.5).iter().map(|x| x.score).collect();
        assert_eq!(kept, vec![0.5, 0.9]);
        assert_eq!(confidence_filter(&d, 0.0), d.to_vec());
        assert!(confidence_filter(&[], 0.5).is_empty());
    }

    #[test]
    fn adso_examples() {
        assert!((adso(0.7, 0.7).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(adso(0.9, 0.7).unwrap(), 0.9);
        // 0.7 * sin(-pi/7) + 0.7, evaluated to 20 digits offline.
        assert!((adso(0.5, 0.7).unwrap() - 0.396_281_382_617_709_3).abs() < 1e-12);
        assert!(adso(0.0, 0.7).is_err());
        assert!(adso(1.2, 0.7).is_err());
        assert!(adso(0.5, 1.0).is_err());
    }

    #[test]
    fn similarity_examples() {
        let v = view(800, 1000);
        let a = BBox::from_center(100.0, 100.0, 20.0, 20.0);
        assert_eq!(fusion_similarity(&a, &a, &v), 0.0);
        let b = BBox::from_center(106.0, 108.0, 20.0, 20.0);
        assert!((fusion_similarity(&a, &b, &v) - 100.0 / 1800.0).abs() < 1e-15);
        let c = BBox::from_center(104.0, 103.0, 20.0, 20.0);
        assert!((fusion_similarity(&a, &c, &v) - 25.0 / 1800.0).abs() < 1e-15);
    }

    #[test]
    fn fusion_examples() {
        let v = view(800, 1000);
        let same = [det([5.0, 5.0, 30.0, 40.0], 0.6), det([5.0, 5.0, 30.0, 40.0], 0.8)];
        let out = fusion_box(&same, 1e-9, &v);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, same[0].bbox);
        assert_eq!(out[0].score, 0.8);

        let pair = [det([90.0, 90.0, 110.0, 110.0], 0.7), det([95.0, 94.0, 113.0, 112.0], 0.6)];
        let out = fusion_box(&pair, 0.05, &v);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].bbox, BBox::new(90.0, 90.0, 113.0, 112.0));

        let apart = [det([90.0, 90.0, 110.0, 110.0], 0.7), det([96.0, 98.0, 116.0, 118.0], 0.6)];
        assert_eq!(fusion_box(&apart, 0.05, &v).len(), 2);
        assert_eq!(fusion_box(&apart[..1], 0.05, &v)[0].bbox, apart[0].bbox);
    }

    #[test]
    fn pseudo_set_examples() {
        let v = view(128, 128);
        let cfg = PseudoConfig::default();
        let empty = build_pseudo_set(&[det([1.0, 1.0, 20.0, 20.0], 0.3)], &v, &v, &cfg).unwrap();
        assert!(empty.cls_branch.is_empty() && empty.reg_branch.is_empty());

        let one = det([10.0, 10.0, 40.0, 50.0], 0.8);
        let s = build_pseudo_set(&[one], &v, &v, &cfg).unwrap();
        assert_eq!(s.cls_branch, vec![ClsPseudo { det: one, weight: 0.8 }]);
        assert_eq!(s.reg_branch.len(), 1);
        assert_eq!(s.reg_branch[0].bbox, one.bbox);

        let low = det([10.0, 10.0, 40.0, 50.0], 0.55);
        let off = PseudoConfig {
            use_adso: false,
            ..cfg
        };
        let s = build_pseudo_set(&[low, one], &v, &v, &off).unwrap();
        assert!(s.cls_branch.iter().all(|c| c.weight == 1.0));
        let json = s.to_json().unwrap();
        let back: PseudoLabelSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);
    }

    /// Algorithm 1 transcribed with tombstones instead of in-place deletion.
    fn reference_fusion(dets: &[Detection], mu: f64, v: &ViewTransform) -> Vec<BBox> {
        let mut boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
        if boxes.len() <= 1 {
            return boxes;
        }
        let mut centre: Vec<(f64, f64)> = boxes.iter().map(|b| b.center()).collect();
        let mut alive = vec![true; boxes.len()];
        let denom = (v.scaled_w + v.scaled_h) as f64;
        for m in 0..boxes.len() {
            if !alive[m] {
                continue;
            }
            for n in 0..boxes.len() {
                if n == m || !alive[n] {
                    continue;
                }
                let dx = centre[m].0 - centre[n].0;
                let dy = centre[m].1 - centre[n].1;
                if (dx * dx + dy * dy) / denom < mu {
                    let b = boxes[n];
                    boxes[m] = BBox::new(
                        boxes[m].x1.min(b.x1),
                        boxes[m].y1.min(b.y1),
                        boxes[m].x2.max(b.x2),
                        boxes[m].y2.max(b.y2),
                    );
                    centre[m] = ((boxes[m].x1 + boxes[m].x2) / 2.0, (boxes[m].y1 + boxes[m].y2) / 2.0);
                    alive[n] = false;
                }
            }
        }
        boxes
            .into_iter()
            .zip(alive)
            .filter_map(|(b, a)| a.then_some(b))
            .collect()
    }

    fn arb_dets() -> impl Strategy<Value = Vec<Detection>> {
        proptest::collection::vec(
            (0.0..100.0f64, 0.0..100.0f64, 2.0..30.0f64, 2.0..30.0f64, 0.5..1.0f64),
            0..=30,
        )
        .prop_map(|v| {
            v.into_iter()
                .map(|(x, y, w, h, s)| det([x, y, x + w, y + h], s))
                .collect()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1500))]
        #[test]
        fn fusion_matches_literal_reference(dets in arb_dets(), mu in 0.01..2.0f64) {
            let v = view(64, 64);
            let got: Vec<BBox> = fusion_box(&dets, mu, &v).iter().map(|f| f.bbox).collect();
            prop_assert_eq!(got, reference_fusion(&dets, mu, &v));
        }

        #[test]
        fn fusion_shrinks_and_contains(dets in arb_dets(), mu in 0.01..2.0f64) {
            let v = view(64, 64);
            let out = fusion_box(&dets, mu, &v);
            prop_assert!(out.len() <= dets.len());
            for f in &out {
                prop_assert!(dets.iter().any(|d| f.bbox.contains(&d.bbox)));
            }
        }

        #[test]
        fn tiny_mu_is_identity_on_distinct_centres(dets in arb_dets()) {
            let v = view(64, 64);
            let mut centres: Vec<(f64, f64)> = dets.iter().map(|d| d.bbox.center()).collect();
            centres.sort_by(|a, b| a.partial_cmp(b).unwrap());
            centres.dedup();
            prop_assume!(centres.len() == dets.len());
            let out: Vec<BBox> = fusion_box(&dets, 1e-300, &v).iter().map(|f| f.bbox).collect();
            let input: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
            prop_assert_eq!(out, input);
        }

        #[test]
        fn adso_properties(x in 1e-6..1.0f64, y in 1e-6..1.0f64) {
            let r = 0.7;
            let (wx, wy) = (adso(x, r).unwrap(), adso(y, r).unwrap());
            prop_assert!(wx > 0.0 && wx <= 1.0);
            if x < r { prop_assert!(wx <= x + 1e-15); } else { prop_assert_eq!(wx, x); }
            if x <= y { prop_assert!(wx <= wy + 1e-15); }
        }
    }

    #[test]
    fn adso_is_continuous_at_knee() {
        let r = 0.7;
        let below = adso(r - 1e-9, r).unwrap();
        assert!((below - r).abs() < 1e-8);
    }
}
