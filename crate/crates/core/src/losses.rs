//! Focal classification loss, CIoU box loss, and assembly of the
//! supervised and unsupervised terms into one objective.
//!
//! Losses are evaluated outside the tape on the dense head outputs. Each
//! term returns its gradient with respect to those outputs so the trainer
//! can record it with [`Tape::fused_scalar`](crate::tensor::Tape::fused_scalar).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::detector::decode_scalar;
use crate::dual::{Dual4, Scalar};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::tensor::{sigmoid, Float, Tensor};

pub const PROB_EPS: f64 = 1e-7;
const BOX_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// Focal loss of a predicted foreground probability.
pub fn focal_loss(prob: f64, positive: bool, cfg: FocalConfig) -> f64 {
    let p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS);
    if positive {
        -cfg.alpha * (1.0 - p).powf(cfg.gamma) * p.ln()
    } else {
        -(1.0 - cfg.alpha) * p.powf(cfg.gamma) * (1.0 - p).ln()
    }
}

/// Focal loss of a logit and its derivative with respect to the logit.
pub fn focal_with_grad(logit: f64, positive: bool, cfg: FocalConfig) -> (f64, f64) {
    let raw = sigmoid(logit);
    let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let dp_dz = if raw == p { p * (1.0 - p) } else { 0.0 };
    let g = cfg.gamma;
    let (loss, dl_dp) = if positive {
        let q = 1.0 - p;
        let loss = -cfg.alpha * q.powf(g) * p.ln();
        let d = cfg.alpha * (g * q.powf(g - 1.0) * p.ln() - q.powf(g) / p);
        (loss, d)
    } else {
        let q = 1.0 - p;
        let loss = -(1.0 - cfg.alpha) * p.powf(g) * q.ln();
        let d = -(1.0 - cfg.alpha) * (g * p.powf(g - 1.0) * q.ln() - p.powf(g) / q);
        (loss, d)
    };
    (loss, dl_dp * dp_dz)
}

/// Complete-IoU loss on `[x1, y1, x2, y2]` corners, generic so it can be
/// differentiated with dual numbers.
pub fn ciou_scalar<S: Scalar>(pred: [S; 4], target: &BBox) -> S {
    let [px1, py1, px2, py2] = pred;
    let c = S::cst;
    let (tx1, ty1, tx2, ty2) = (c(target.x1), c(target.y1), c(target.x2), c(target.y2));
    let pw = (px2 - px1).max(c(BOX_EPS));
    let ph = (py2 - py1).max(c(BOX_EPS));
    let tw = target.width().max(BOX_EPS);
    let th = target.height().max(BOX_EPS);

    let iw = (px2.min(tx2) - px1.max(tx1)).max(c(0.0));
    let ih = (py2.min(ty2) - py1.max(ty1)).max(c(0.0));
    let inter = iw * ih;
    let union = pw * ph + c(tw * th) - inter + c(BOX_EPS);
    let iou = inter / union;

    let cw = px2.max(tx2) - px1.min(tx1);
    let ch = py2.max(ty2) - py1.min(ty1);
    let diag2 = cw * cw + ch * ch + c(BOX_EPS);
    let (tcx, tcy) = target.center();
    let dx = (px1 + px2) * c(0.5) - c(tcx);
    let dy = (py1 + py2) * c(0.5) - c(tcy);
    let rho2 = dx * dx + dy * dy;

    let da = c((tw / th).atan()) - (pw / ph).atan();
    let v = c(4.0 / (PI * PI)) * da * da;
    let denom = c(1.0) - iou + v;
    let alpha_v = if denom.value() <= 0.0 {
        c(0.0)
    } else {
        v * v / denom
    };
    c(1.0) - iou + rho2 / diag2 + alpha_v
}

pub fn ciou_loss(pred: &BBox, target: &BBox) -> f64 {
    ciou_scalar(pred.as_array(), target)
}

/// CIoU loss of the box decoded from `delta` at `anchor`, with its
/// gradient with respect to the four deltas.
pub fn ciou_with_grad(anchor: &BBox, delta: [f64; 4], target: &BBox) -> (f64, [f64; 4]) {
    let d: [Dual4; 4] = std::array::from_fn(|j| Dual4::var(delta[j], j));
    let loss = ciou_scalar(decode_scalar(anchor, d), target);
    (loss.v, loss.d)
}

/// Classification target of one anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClsTarget {
    Negative,
    Ignore,
    /// Foreground; the focal term is multiplied by `weight`.
    Positive { weight: f64 },
}

/// Dense outputs of one image (`[1, A, H', W']` and `[1, 4A, H', W']`)
/// together with per-anchor targets in anchor order.
#[derive(Debug, Clone, Copy)]
pub struct DenseSample<'a, T> {
    pub cls_logits: &'a Tensor<T>,
    pub box_deltas: &'a Tensor<T>,
    pub anchors: &'a [BBox],
    pub cls_targets: &'a [ClsTarget],
    pub reg_targets: &'a [Option<BBox>],
}

impl<T: Float> DenseSample<'_, T> {
    fn dims(&self) -> Result<(usize, usize)> {
        let [n, a, h, w] = self.cls_logits.dims4("loss")?;
        let n_anchor = a * h * w;
        let ok = n == 1
            && self.box_deltas.shape() == [1, 4 * a, h, w]
            && self.anchors.len() == n_anchor
            && self.cls_targets.len() == n_anchor
            && self.reg_targets.len() == n_anchor;
        if !ok {
            return Err(Error::shape(
                "loss",
                format!(
                    "outputs {:?} / {:?} with {} anchors, {} cls and {} reg targets",
                    self.cls_logits.shape(),
                    self.box_deltas.shape(),
                    self.anchors.len(),
                    self.cls_targets.len(),
                    self.reg_targets.len()
                ),
            ));
        }
        Ok((a, h * w))
    }

    pub fn num_positives(&self) -> usize {
        self.cls_targets
            .iter()
            .filter(|t| matches!(t, ClsTarget::Positive { .. }))
            .count()
    }

    pub fn num_reg_targets(&self) -> usize {
        self.reg_targets.iter().filter(|t| t.is_some()).count()
    }

    /// Unnormalised weighted focal sum and its gradient w.r.t. the logits.
    pub fn cls_sum(&self, cfg: FocalConfig) -> Result<(f64, Tensor<T>)> {
        let (a, hw) = self.dims()?;
        let logits = self.cls_logits.data();
        let mut grad = Tensor::zeros(self.cls_logits.shape());
        let g = grad.data_mut();
        let mut total = 0.0;
        for (i, t) in self.cls_targets.iter().enumerate() {
            let (positive, weight) = match *t {
                ClsTarget::Ignore => continue,
                ClsTarget::Negative => (false, 1.0),
                ClsTarget::Positive { weight } => (true, weight),
            };
            let at = (i % a) * hw + i / a;
            let (l, dl) = focal_with_grad(logits[at].as_f64(), positive, cfg);
            total += weight * l;
            g[at] = T::of(weight * dl);
        }
        Ok((total, grad))
    }

    /// Unnormalised CIoU sum over anchors with a box target, and its
    /// gradient w.r.t. the box deltas.
    pub fn reg_sum(&self) -> Result<(f64, Tensor<T>)> {
        let (a, hw) = self.dims()?;
        let deltas = self.box_deltas.data();
        let mut grad = Tensor::zeros(self.box_deltas.shape());
        let g = grad.data_mut();
        let mut total = 0.0;
        for (i, t) in self.reg_targets.iter().enumerate() {
            let Some(target) = t else { continue };
            let (k, cell) = (i % a, i / a);
            let at = |j: usize| (4 * k + j) * hw + cell;
            let d = std::array::from_fn(|j| deltas[at(j)].as_f64());
            let (l, dl) = ciou_with_grad(&self.anchors[i], d, target);
            total += l;
            for j in 0..4 {
                g[at(j)] = T::of(dl[j]);
            }
        }
        Ok((total, grad))
    }
}

/// Scalar loss terms of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_sup_cls: f64,
    pub l_sup_reg: f64,
    pub l_unsup_cls: f64,
    pub l_unsup_reg: f64,
    pub total: f64,
    pub n_label: usize,
    pub n_unlabel: usize,
    pub n_pos_fusion: usize,
}

impl LossBreakdown {
    pub fn supervised(&self) -> f64 {
        self.l_sup_cls + self.l_sup_reg
    }

    pub fn unsupervised(&self) -> f64 {
        self.l_unsup_cls + self.l_unsup_reg
    }
}

/// Which dense output a gradient belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Cls,
    Reg,
}

/// One normalised loss term with its gradient contributions, keyed by
/// sample index within its batch half and the head it flows into.
#[derive(Debug, Clone)]
pub struct Term<T> {
    pub value: f64,
    pub grads: Vec<(usize, Head, Tensor<T>)>,
}

#[derive(Debug, Clone)]
pub struct Assembled<T> {
    pub breakdown: LossBreakdown,
    pub sup_cls: Term<T>,
    pub sup_reg: Term<T>,
    pub unsup_cls: Term<T>,
    pub unsup_reg: Term<T>,
}

fn normalised<T: Float>(
    parts: Vec<(f64, Tensor<T>)>,
    head: Head,
    denom: usize,
) -> Term<T> {
    let scale = 1.0 / denom.max(1) as f64;
    let mut value = 0.0;
    let grads = parts
        .into_iter()
        .enumerate()
        .map(|(i, (v, g))| {
            value += v;
            (i, head, g.map(|x| x * T::of(scale)))
        })
        .collect();
    Term {
        value: value * scale,
        grads,
    }
}

/// Combine per-image terms into `L = L_sup + lambda * L_unsup`.
///
/// Supervised classification and regression sums are divided by the number
/// of labeled positives. The unsupervised classification sum (with each
/// pseudo-positive already weighted) is divided by the number of pseudo
/// positives, and the unsupervised regression sum by the number of anchors
/// regressing toward fused pseudo boxes. `n_pos_fusion` is the fused box
/// count, reported as-is.
pub fn assemble<T: Float>(
    sup: &[DenseSample<'_, T>],
    unsup: &[DenseSample<'_, T>],
    n_pos_fusion: usize,
    lambda: f64,
    focal: FocalConfig,
) -> Result<Assembled<T>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let n_label: usize = sup.iter().map(DenseSample::num_positives).sum();
    let n_sup_reg: usize = sup.iter().map(DenseSample::num_reg_targets).sum();
    let n_unlabel: usize = unsup.iter().map(DenseSample::num_positives).sum();
    let n_unsup_reg: usize = unsup.iter().map(DenseSample::num_reg_targets).sum();
    if n_sup_reg != n_label {
        return Err(Error::Domain(format!(
            "{n_label} labeled positives but {n_sup_reg} regression targets"
        )));
    }

    let cls = |s: &[DenseSample<'_, T>]| s.iter().map(|x| x.cls_sum(focal)).collect::<Result<Vec<_>>>();
    let reg = |s: &[DenseSample<'_, T>]| s.iter().map(|x| x.reg_sum()).collect::<Result<Vec<_>>>();
    let sup_cls = normalised(cls(sup)?, Head::Cls, n_label);
    let sup_reg = normalised(reg(sup)?, Head::Reg, n_label);
    let unsup_cls = normalised(cls(unsup)?, Head::Cls, n_unlabel);
    let unsup_reg = normalised(reg(unsup)?, Head::Reg, n_unsup_reg);

    let breakdown = LossBreakdown {
        l_sup_cls: sup_cls.value,
        l_sup_reg: sup_reg.value,
        l_unsup_cls: unsup_cls.value,
        l_unsup_reg: unsup_reg.value,
        total: (sup_cls.value + sup_reg.value) + lambda * (unsup_cls.value + unsup_reg.value),
        n_label,
        n_unlabel,
        n_pos_fusion,
    };
    Ok(Assembled {
        breakdown,
        sup_cls,
        sup_reg,
        unsup_cls,
        unsup_reg,
    })
}
