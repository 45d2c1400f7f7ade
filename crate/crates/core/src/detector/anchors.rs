use serde::{Deserialize, Serialize};

use crate::dual::Scalar;
use crate::error::{Error, Result};
use crate::geometry::BBox;

/// Upper bound on |dw|, |dh| before exponentiation.
pub const MAX_LOG_RATIO: f64 = 2.079_441_541_679_835_8; // ln 8

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub stride: usize,
    /// Square anchor side lengths in pixels.
    pub scales: Vec<f64>,
    pub aspect_ratios: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            stride: 16,
            scales: vec![16.0, 32.0, 64.0, 96.0, 128.0],
            aspect_ratios: vec![1.0],
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.len() != 5 || self.aspect_ratios.len() != 1 {
            return Err(Error::Config(format!(
                "anchors need exactly 5 scales and 1 aspect ratio, got {} and {}",
                self.scales.len(),
                self.aspect_ratios.len()
            )));
        }
        if self.stride == 0 || self.scales.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("anchor stride and scales must be positive".into()));
        }
        Ok(())
    }

    pub fn per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }
}

/// Anchors for a `feature_h x feature_w` map: cells in row-major order,
/// and within a cell scale-major then aspect ratio (`h / w`).
pub fn generate_anchors(feature_h: usize, feature_w: usize, cfg: &AnchorConfig) -> Vec<BBox> {
    let stride = cfg.stride as f64;
    let mut out = Vec::with_capacity(feature_h * feature_w * cfg.per_cell());
    for y in 0..feature_h {
        for x in 0..feature_w {
            let cx = (x as f64 + 0.5) * stride;
            let cy = (y as f64 + 0.5) * stride;
            for &s in &cfg.scales {
                for &r in &cfg.aspect_ratios {
                    let w = s / r.sqrt();
                    let h = s * r.sqrt();
                    out.push(BBox::from_center(cx, cy, w, h));
                }
            }
        }
    }
    out
}

/// Center-size deltas `(dx, dy, dw, dh)` that take `anchor` to `target`.
pub fn encode(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let (tcx, tcy) = target.center();
    let (tw, th) = (target.width().max(1e-6), target.height().max(1e-6));
    [
        (tcx - acx) / aw,
        (tcy - acy) / ah,
        (tw / aw).ln(),
        (th / ah).ln(),
    ]
}

/// Inverse of [`encode`], generic so losses can differentiate through it.
/// Returns `[x1, y1, x2, y2]`.
pub fn decode_scalar<S: Scalar>(anchor: &BBox, delta: [S; 4]) -> [S; 4] {
    let (acx, acy) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = S::cst(acx) + delta[0] * S::cst(aw);
    let cy = S::cst(acy) + delta[1] * S::cst(ah);
    let w = delta[2].clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp() * S::cst(aw);
    let h = delta[3].clamp(-MAX_LOG_RATIO, MAX_LOG_RATIO).exp() * S::cst(ah);
    let half = S::cst(0.5);
    [cx - half * w, cy - half * h, cx + half * w, cy + half * h]
}

pub fn decode(anchor: &BBox, delta: [f64; 4]) -> BBox {
    let [x1, y1, x2, y2] = decode_scalar(anchor, delta);
    BBox::new(x1, y1, x2, y2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn single_cell_anchor() {
        let cfg = AnchorConfig {
            stride: 16,
            scales: vec![32.0],
            aspect_ratios: vec![1.0],
        };
        assert_eq!(generate_anchors(1, 1, &cfg), vec![BBox::new(-8.0, -8.0, 24.0, 24.0)]);
    }

    #[test]
    fn anchor_count_and_order() {
        let cfg = AnchorConfig::default();
        let a = generate_anchors(2, 2, &cfg);
        assert_eq!(a.len(), 4 * 5);
        // Second cell is (x=1, y=0); scales ascend inside a cell.
        assert_eq!(a[5].center(), (24.0, 8.0));
        assert!(a[0].width() < a[1].width());
        assert_eq!(a[10].center(), (8.0, 24.0));
        assert!(cfg.validate().is_ok());
        let bad = AnchorConfig {
            scales: vec![1.0],
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_delta_is_identity_and_log2_doubles() {
        let a = BBox::new(10.0, 20.0, 42.0, 36.0);
        assert_eq!(decode(&a, [0.0; 4]), a);
        let d = decode(&a, [0.0, 0.0, 2f64.ln(), 0.0]);
        assert!((d.width() - 2.0 * a.width()).abs() < 1e-12);
        assert_eq!(d.center(), a.center());
        let clamped = decode(&a, [0.0, 0.0, 10.0, 0.0]);
        assert!((clamped.width() - 8.0 * a.width()).abs() < 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]
        #[test]
        fn encode_decode_round_trip(
            acx in -50.0..200.0f64, acy in -50.0..200.0f64, aw in 4.0..128.0f64, ah in 4.0..128.0f64,
            dcx in -1.0..1.0f64, dcy in -1.0..1.0f64, rw in -2.0..2.0f64, rh in -2.0..2.0f64,
        ) {
            let a = BBox::from_center(acx, acy, aw, ah);
            let t = BBox::from_center(acx + dcx * aw, acy + dcy * ah, aw * rw.exp(), ah * rh.exp());
            let back = decode(&a, encode(&a, &t));
            for (x, y) in back.as_array().iter().zip(t.as_array()) {
                prop_assert!((x - y).abs() <= 1e-5);
            }
        }
    }
}
