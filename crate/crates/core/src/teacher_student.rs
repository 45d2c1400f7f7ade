//! Semi-supervised training: a student trained by SGD on labeled images and
//! on teacher pseudo labels, and a teacher that follows the student by an
//! exponential moving average.
//!
//! Every random draw (batch sampling, augmentation) comes from a generator
//! whose stream is derived from the iteration and slot index, so runs are
//! reproducible and independent of how much work a given step skipped.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, augment_on, draw_weak, AugmentPolicy, AugmentedSample, Profile};
use crate::data::Dataset;
use crate::detector::{
    anchor_predictions, assign_targets, decode, pad_to_stride, AnchorLabel, DenseOutput, Detector,
    DetectorConfig,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalReport};
use crate::geometry::{BBox, Detection};
use crate::losses::{assemble, ClsTarget, DenseSample, FocalConfig, Head, LossBreakdown, Term};
use crate::pseudo::{build_pseudo_set, PseudoConfig, PseudoLabelSet};
use crate::tensor::{Float, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    /// Labeled share of each batch.
    pub sample_ratio: f64,
    /// Trailing fraction of training over which the labeled share falls to 0.
    pub sr_decay_frac: f64,
    /// Supervised-only iterations before pseudo labeling starts. The
    /// teacher is copied from the student when burn-in ends.
    pub burn_in: usize,
    pub ema_rate: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    /// Fractions of training at which the learning rate drops by `lr_gamma`.
    pub lr_milestones: Vec<f64>,
    pub lr_gamma: f64,
    /// Learning-rate multiplier for the deformable offset and modulation
    /// branches.
    pub offset_lr_mult: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip_norm: f64,
    pub lambda: f64,
    pub pseudo: PseudoConfig,
    pub focal: FocalConfig,
    /// Skip unlabeled data and teacher inference entirely.
    pub supervised_only: bool,
    /// Use the strong teacher profile instead of the weak one.
    pub teacher_strong: bool,
    /// Evaluate on the test split every this many iterations (and at the end).
    pub eval_interval: usize,
    pub checkpoint_interval: usize,
    /// Save the student after every step (for offline EMA replay).
    pub trace_students: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 4,
            sample_ratio: 0.25,
            sr_decay_frac: 1.0 / 60.0,
            burn_in: 1000,
            ema_rate: 0.999,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_frac: 0.025,
            lr_milestones: vec![0.8, 0.93],
            lr_gamma: 0.1,
            offset_lr_mult: 0.1,
            grad_clip_norm: 35.0,
            lambda: 2.0,
            pseudo: PseudoConfig::default(),
            focal: FocalConfig::default(),
            supervised_only: false,
            teacher_strong: false,
            eval_interval: 250,
            checkpoint_interval: 1000,
            trace_students: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.sample_ratio) {
            return bad(format!("sample_ratio must lie in [0, 1], got {}", self.sample_ratio));
        }
        if !(0.0..=1.0).contains(&self.sr_decay_frac) {
            return bad(format!("sr_decay_frac must lie in [0, 1], got {}", self.sr_decay_frac));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return bad(format!("ema_rate must lie in [0, 1), got {}", self.ema_rate));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("momentum must lie in [0, 1) and weight_decay be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac must lie in [0, 1], got {}", self.warmup_frac));
        }
        if self.lr_milestones.iter().any(|m| !(0.0..=1.0).contains(m)) || !(self.lr_gamma > 0.0) {
            return bad("lr milestones must lie in [0, 1] and lr_gamma be positive".into());
        }
        if !(self.offset_lr_mult >= 0.0 && self.offset_lr_mult.is_finite()) || !(self.grad_clip_norm >= 0.0) {
            return bad("offset_lr_mult and grad_clip_norm must be finite and >= 0".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and >= 0, got {}", self.lambda));
        }
        if self.eval_interval == 0 || self.checkpoint_interval == 0 {
            return bad("eval_interval and checkpoint_interval must be positive".into());
        }
        self.pseudo.validate()
    }

    fn warmup_iters(&self) -> usize {
        (self.warmup_frac * self.iterations as f64).ceil() as usize
    }

    /// Learning rate used for the step at `it` (0-based).
    pub fn lr_at(&self, it: usize) -> f64 {
        let n = self.iterations as f64;
        let drops = self
            .lr_milestones
            .iter()
            .filter(|&&m| it >= (m * n).floor() as usize)
            .count();
        let base = self.lr * self.lr_gamma.powi(drops as i32);
        let w = self.warmup_iters();
        if it < w {
            base * (it + 1) as f64 / w as f64
        } else {
            base
        }
    }

    /// Labeled share of the batch at step `it`: constant, then a linear ramp
    /// down over the final `sr_decay_frac` of training.
    pub fn sr_at(&self, it: usize) -> f64 {
        let window = (self.sr_decay_frac * self.iterations as f64).ceil() as usize;
        let start = self.iterations.saturating_sub(window);
        if window == 0 || it < start {
            self.sample_ratio
        } else {
            self.sample_ratio * (self.iterations - it) as f64 / window as f64
        }
    }

    /// `(labeled, unlabeled)` image counts of the batch at step `it`.
    /// Burn-in batches are fully labeled.
    pub fn batch_split(&self, it: usize) -> (usize, usize) {
        if self.in_burn_in(it) {
            return (self.batch_size, 0);
        }
        let n_l = ((self.batch_size as f64 * self.sr_at(it)).round() as usize).min(self.batch_size);
        (n_l, self.batch_size - n_l)
    }

    pub fn in_burn_in(&self, it: usize) -> bool {
        it < self.burn_in
    }
}

/// `t <- alpha * t + (1 - alpha) * s` for every aligned parameter pair.
/// `alpha = 1` leaves the teacher unchanged.
pub fn ema_update<T: Float>(teacher: &mut Detector<T>, student: &Detector<T>, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("EMA rate must lie in [0, 1], got {alpha}")));
    }
    teacher.check_compatible(student)?;
    let a = T::of(alpha);
    let b = T::of(1.0 - alpha);
    for (t, s) in teacher.params_mut().iter_mut().zip(student.params()) {
        for (x, &y) in t.data_mut().iter_mut().zip(s.data()) {
            *x = a * *x + b * y;
        }
    }
    Ok(())
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping. `max_norm = 0` only measures.
pub fn clip_grad_norm<T: Float>(grads: &mut [Option<Tensor<T>>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.data())
        .map(|x| x.as_f64() * x.as_f64())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = T::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// SGD with momentum and L2 weight decay (`v <- m v + g + wd p`,
/// `p <- p - lr * mult * v`), with a fixed learning-rate multiplier per
/// parameter.
#[derive(Debug, Clone)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    lr_mult: Vec<f64>,
    velocity: Vec<Tensor<T>>,
}

impl<T: Float> Sgd<T> {
    pub fn new(params: &[Tensor<T>], momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            lr_mult: vec![1.0; params.len()],
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn with_lr_mult(mut self, lr_mult: Vec<f64>) -> Self {
        self.lr_mult = lr_mult;
        self
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.velocity.len() || params.len() != self.lr_mult.len() {
            return Err(Error::shape(
                "sgd",
                format!("{} params, {} grads, {} buffers", params.len(), grads.len(), self.velocity.len()),
            ));
        }
        let (m, wd) = (T::of(self.momentum), T::of(self.weight_decay));
        for (((p, g), v), &mult) in params.iter_mut().zip(grads).zip(&mut self.velocity).zip(&self.lr_mult) {
            let lr = T::of(lr * mult);
            let pd = p.data_mut();
            let vd = v.data_mut();
            match g {
                Some(g) => {
                    for ((x, u), &gi) in pd.iter_mut().zip(vd.iter_mut()).zip(g.data()) {
                        *u = m * *u + gi + wd * *x;
                        *x -= lr * *u;
                    }
                }
                None => {
                    for (x, u) in pd.iter_mut().zip(vd.iter_mut()) {
                        *u = m * *u + wd * *x;
                        *x -= lr * *u;
                    }
                }
            }
        }
        Ok(())
    }
}

pub struct TrainState<T: Float> {
    pub student: Detector<T>,
    pub teacher: Detector<T>,
    /// Completed steps.
    pub iteration: usize,
    pub optimizer: Sgd<T>,
    pub config: TrainConfig,
}

impl<T: Float> TrainState<T> {
    /// Student and teacher start from the same initialisation.
    pub fn new(model: DetectorConfig, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let student = Detector::new(model, config.seed)?;
        let teacher = student.clone();
        let lr_mult = student
            .param_names()
            .iter()
            .map(|n| {
                if n.starts_with("encoder.offset.") || n.starts_with("encoder.mask.") {
                    config.offset_lr_mult
                } else {
                    1.0
                }
            })
            .collect();
        let optimizer = Sgd::new(student.params(), config.momentum, config.weight_decay).with_lr_mult(lr_mult);
        Ok(TrainState {
            student,
            teacher,
            iteration: 0,
            optimizer,
            config,
        })
    }
}

/// Two views of one unlabeled image: the teacher labels `teacher_view`,
/// the student trains on `student_view`.
#[derive(Debug, Clone)]
pub struct UnlabeledPair {
    pub teacher_view: AugmentedSample,
    pub student_view: AugmentedSample,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: LossBreakdown,
    /// Value of the scalar the optimizer differentiated.
    pub tape_total: f64,
    pub lr: f64,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub pseudo: Vec<PseudoLabelSet>,
    /// Gradient-carrying nodes recorded while the teacher ran (always 0).
    pub teacher_grad_nodes: usize,
}

impl StepOutput {
    /// Retained pseudo boxes (classification branch) and their summed score.
    pub fn pseudo_confidence(&self) -> (usize, f64) {
        self.pseudo.iter().flat_map(|p| &p.cls_branch).fold((0, 0.0), |(n, s), c| (n + 1, s + c.det.score))
    }
}

/// Teacher detections for each image on a gradient-free tape. Also returns
/// how many gradient-carrying nodes those passes recorded.
pub fn teacher_predict<T: Float>(teacher: &Detector<T>, images: &[&AugmentedSample]) -> Result<(Vec<Vec<Detection>>, usize)> {
    let stride = teacher.config().stride();
    let mut dets = Vec::with_capacity(images.len());
    let mut grad_nodes = 0;
    for s in images {
        let canvas = pad_to_stride(&s.image, stride);
        let mut tape = Tape::<T>::no_grad();
        let params = teacher.register(&mut tape);
        let x = tape.constant(canvas.to_tensor());
        let out = teacher.forward(&mut tape, &params, x)?;
        grad_nodes += tape.grad_node_count();
        let dense = DenseOutput {
            cls_logits: tape.value(out.cls_logits).clone(),
            box_deltas: tape.value(out.box_deltas).clone(),
        };
        let c = teacher.config();
        dets.push(crate::detector::postprocess(
            &dense,
            0,
            &teacher.anchors_for(canvas.height, canvas.width),
            s.image.width as f64,
            s.image.height as f64,
            c.pre_nms_top_k,
            c.nms_iou,
        ));
    }
    Ok((dets, grad_nodes))
}

/// One student forward on the shared tape, with what target assignment needs.
struct Forward<T> {
    cls: Var,
    reg: Var,
    cls_value: Tensor<T>,
    reg_value: Tensor<T>,
    anchors: Vec<BBox>,
    predicted: Vec<BBox>,
}

fn student_forward<T: Float>(
    student: &Detector<T>,
    tape: &mut Tape<T>,
    params: &[Var],
    image: &crate::image::GrayImage,
) -> Result<Forward<T>> {
    let canvas = pad_to_stride(image, student.config().stride());
    let x = tape.constant(canvas.to_tensor());
    let out = student.forward(tape, params, x)?;
    let dense = DenseOutput {
        cls_logits: tape.value(out.cls_logits).clone(),
        box_deltas: tape.value(out.box_deltas).clone(),
    };
    let anchors = student.anchors_for(canvas.height, canvas.width);
    let predicted = anchor_predictions(&dense, 0)
        .iter()
        .zip(&anchors)
        .map(|((_, d), a)| decode(a, *d))
        .collect();
    Ok(Forward {
        cls: out.cls_logits,
        reg: out.box_deltas,
        cls_value: dense.cls_logits,
        reg_value: dense.box_deltas,
        anchors,
        predicted,
    })
}

struct Targets {
    cls: Vec<ClsTarget>,
    reg: Vec<Option<BBox>>,
}

fn labeled_targets(f: &Forward<impl Float>, gts: &[BBox], cfg: &DetectorConfig) -> Targets {
    let labels = assign_targets(&f.anchors, gts, Some(&f.predicted), &cfg.matcher);
    let cls = labels
        .iter()
        .map(|l| match l {
            AnchorLabel::Negative => ClsTarget::Negative,
            AnchorLabel::Ignore => ClsTarget::Ignore,
            AnchorLabel::Positive(_) => ClsTarget::Positive { weight: 1.0 },
        })
        .collect();
    let reg = labels
        .iter()
        .map(|l| match l {
            AnchorLabel::Positive(g) => Some(gts[*g]),
            _ => None,
        })
        .collect();
    Targets { cls, reg }
}

/// Classification targets come from the weighted branch (each positive's
/// focal term scaled by `1 / omega`); regression targets from the fused one.
fn pseudo_targets(f: &Forward<impl Float>, pseudo: &PseudoLabelSet, cfg: &DetectorConfig) -> Targets {
    let cls_boxes: Vec<BBox> = pseudo.cls_branch.iter().map(|c| c.det.bbox).collect();
    let labels = assign_targets(&f.anchors, &cls_boxes, Some(&f.predicted), &cfg.matcher);
    let cls = labels
        .iter()
        .map(|l| match l {
            AnchorLabel::Negative => ClsTarget::Negative,
            AnchorLabel::Ignore => ClsTarget::Ignore,
            AnchorLabel::Positive(g) => ClsTarget::Positive {
                weight: 1.0 / pseudo.cls_branch[*g].weight,
            },
        })
        .collect();
    let reg_boxes: Vec<BBox> = pseudo.reg_branch.iter().map(|r| r.bbox).collect();
    let reg = assign_targets(&f.anchors, &reg_boxes, None, &cfg.matcher)
        .iter()
        .map(|l| match l {
            AnchorLabel::Positive(g) => Some(reg_boxes[*g]),
            _ => None,
        })
        .collect();
    Targets { cls, reg }
}

fn dense_samples<'a, T: Float>(fw: &'a [Forward<T>], tg: &'a [Targets]) -> Vec<DenseSample<'a, T>> {
    fw.iter()
        .zip(tg)
        .map(|(f, t)| DenseSample {
            cls_logits: &f.cls_value,
            box_deltas: &f.reg_value,
            anchors: &f.anchors,
            cls_targets: &t.cls,
            reg_targets: &t.reg,
        })
        .collect()
}

fn record_term<T: Float>(tape: &mut Tape<T>, term: Term<T>, fw: &[Forward<T>]) -> Result<Var> {
    let grads = term
        .grads
        .into_iter()
        .map(|(i, head, g)| {
            let v = match head {
                Head::Cls => fw[i].cls,
                Head::Reg => fw[i].reg,
            };
            (v, g)
        })
        .collect();
    tape.fused_scalar(T::of(term.value), grads)
}

/// One optimisation step. `unlabeled` is ignored during burn-in and in
/// supervised-only mode.
pub fn train_step<T: Float>(
    state: &mut TrainState<T>,
    labeled: &[AugmentedSample],
    unlabeled: &[UnlabeledPair],
) -> Result<StepOutput> {
    let cfg = state.config.clone();
    let it = state.iteration;
    let use_unlabeled = !cfg.supervised_only && !cfg.in_burn_in(it);
    let unlabeled = if use_unlabeled { unlabeled } else { &[] };
    let model_cfg = state.student.config().clone();

    // Teacher pass: no tape gradients, never touched by the optimizer.
    let teacher_views: Vec<&AugmentedSample> = unlabeled.iter().map(|u| &u.teacher_view).collect();
    let (teacher_dets, teacher_grad_nodes) = teacher_predict(&state.teacher, &teacher_views)?;
    let pseudo = teacher_dets
        .iter()
        .zip(unlabeled)
        .map(|(d, u)| build_pseudo_set(d, &u.teacher_view.view, &u.student_view.view, &cfg.pseudo))
        .collect::<Result<Vec<_>>>()?;

    let mut tape = Tape::<T>::new();
    let params = state.student.register(&mut tape);
    let sup_fw = labeled
        .iter()
        .map(|s| student_forward(&state.student, &mut tape, &params, &s.image))
        .collect::<Result<Vec<_>>>()?;
    let unsup_fw = unlabeled
        .iter()
        .map(|u| student_forward(&state.student, &mut tape, &params, &u.student_view.image))
        .collect::<Result<Vec<_>>>()?;

    let sup_tg: Vec<Targets> = sup_fw
        .iter()
        .zip(labeled)
        .map(|(f, s)| labeled_targets(f, &s.boxes, &model_cfg))
        .collect();
    let unsup_tg: Vec<Targets> = unsup_fw
        .iter()
        .zip(&pseudo)
        .map(|(f, p)| pseudo_targets(f, p, &model_cfg))
        .collect();
    let n_pos_fusion = pseudo.iter().map(|p| p.reg_branch.len()).sum();
    let assembled = assemble(
        &dense_samples(&sup_fw, &sup_tg),
        &dense_samples(&unsup_fw, &unsup_tg),
        n_pos_fusion,
        cfg.lambda,
        cfg.focal,
    )?;

    let sc = record_term(&mut tape, assembled.sup_cls, &sup_fw)?;
    let sr = record_term(&mut tape, assembled.sup_reg, &sup_fw)?;
    let uc = record_term(&mut tape, assembled.unsup_cls, &unsup_fw)?;
    let ur = record_term(&mut tape, assembled.unsup_reg, &unsup_fw)?;
    let lam = T::of(cfg.lambda);
    let total = tape.weighted_sum(&[(sc, T::one()), (sr, T::one()), (uc, lam), (ur, lam)])?;
    let tape_total = tape.value(total).item().as_f64();
    tape.backward(total)?;
    let mut grads: Vec<Option<Tensor<T>>> = params.iter().map(|&p| tape.grad(p).cloned()).collect();
    drop(tape);
    for (g, name) in grads.iter().zip(state.student.param_names()) {
        if g.as_ref().is_some_and(|g| g.data().iter().any(|x| !x.is_finite())) {
            return Err(Error::Domain(format!("non-finite gradient for {name} at iteration {it}")));
        }
    }

    let grad_norm = clip_grad_norm(&mut grads, cfg.grad_clip_norm);
    let lr = cfg.lr_at(it);
    state.optimizer.step(state.student.params_mut(), &grads, lr)?;
    state.iteration += 1;
    let done = state.iteration;
    if done == cfg.burn_in {
        state.teacher.copy_from(&state.student)?;
    } else if done > cfg.burn_in {
        ema_update(&mut state.teacher, &state.student, cfg.ema_rate)?;
    }

    Ok(StepOutput {
        loss: assembled.breakdown,
        tape_total,
        lr,
        grad_norm,
        pseudo,
        teacher_grad_nodes,
    })
}

const STREAM_LABELED: u64 = 0;
const STREAM_TEACHER: u64 = 1;
const STREAM_STUDENT: u64 = 2;
const POOL_LABELED: u64 = 0;
const POOL_UNLABELED: u64 = 1;

/// Generator for one augmentation draw.
fn sample_rng(seed: u64, it: usize, slot: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((it as u64) << 16) | ((slot as u64) << 4) | purpose);
    rng
}

/// Endless epoch-shuffled sequence over a pool of image ids.
struct Sampler {
    ids: Vec<u32>,
    seed: u64,
    pool: u64,
    drawn: usize,
    cache: HashMap<usize, Vec<u32>>,
}

impl Sampler {
    fn new(ids: Vec<u32>, seed: u64, pool: u64) -> Self {
        Sampler {
            ids,
            seed,
            pool,
            drawn: 0,
            cache: HashMap::new(),
        }
    }

    fn take(&mut self, k: usize) -> Vec<u32> {
        if self.ids.is_empty() {
            return Vec::new();
        }
        let n = self.ids.len();
        (0..k)
            .map(|_| {
                let (epoch, pos) = (self.drawn / n, self.drawn % n);
                self.drawn += 1;
                self.cache.retain(|&e, _| e + 1 >= epoch);
                let (ids, seed, pool) = (&self.ids, self.seed, self.pool);
                let order = self.cache.entry(epoch).or_insert_with(|| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5a3b);
                    rng.set_stream((pool << 40) | epoch as u64);
                    let mut v = ids.clone();
                    v.shuffle(&mut rng);
                    v
                });
                order[pos]
            })
            .collect()
    }
}

/// Per-step log entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub lr: f64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub loss: LossBreakdown,
    pub tape_total: f64,
    pub n_pseudo: usize,
    pub pseudo_conf_sum: f64,
}

/// Row of the metrics CSV. Loss columns average the steps since the
/// previous row; pseudo columns aggregate them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub iteration: usize,
    pub l_sup_cls: f64,
    pub l_sup_reg: f64,
    pub l_unsup_cls: f64,
    pub l_unsup_reg: f64,
    pub total: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    #[serde(rename = "AP75")]
    pub ap75: f64,
    pub n_pseudo: usize,
    pub mean_pseudo_conf: f64,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const STEPS_FILE: &str = "steps.csv";
pub const REPORT_FILE: &str = "eval.json";

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub steps: Vec<StepRecord>,
    pub rows: Vec<MetricsRow>,
    pub final_report: Option<EvalReport>,
    pub out_dir: PathBuf,
}

impl RunSummary {
    /// Mean retained pseudo confidence over steps with index in `range`.
    pub fn mean_pseudo_conf(&self, range: std::ops::Range<usize>) -> f64 {
        let (n, s) = self
            .steps
            .iter()
            .filter(|r| range.contains(&r.iteration))
            .fold((0usize, 0.0), |(n, s), r| (n + r.n_pseudo, s + r.pseudo_conf_sum));
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }
}

/// Path of the checkpoint of `role` ("student" / "teacher") at `it`.
pub fn checkpoint_path(out_dir: &Path, role: &str, it: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("{role}_{it:06}.ckpt"))
}

/// Path of the per-step student written when tracing.
pub fn trace_path(out_dir: &Path, it: usize) -> PathBuf {
    out_dir.join("trace").join(format!("student_{it:06}.ckpt"))
}

/// Detections of `model` on every test image, against their ground truth.
pub fn evaluate_model<T: Float>(model: &Detector<T>, dataset: &Dataset, thresholds: &[f64]) -> Result<EvalReport> {
    let ids = &dataset.manifest.splits.test;
    let mut dets = Vec::with_capacity(ids.len());
    let mut gts = Vec::with_capacity(ids.len());
    for &id in ids {
        dets.push(model.infer(dataset.image(id)?)?);
        gts.push(dataset.boxes(id).to_vec());
    }
    Ok(evaluate(&dets, &gts, thresholds))
}

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn save_pair<T: Float>(state: &TrainState<T>, out_dir: &Path) -> Result<()> {
    state.student.save(&checkpoint_path(out_dir, "student", state.iteration))?;
    state.teacher.save(&checkpoint_path(out_dir, "teacher", state.iteration))
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::io(path, e.into()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct StepCsv {
    iteration: usize,
    lr: f64,
    n_labeled: usize,
    n_unlabeled: usize,
    l_sup_cls: f64,
    l_sup_reg: f64,
    l_unsup_cls: f64,
    l_unsup_reg: f64,
    total: f64,
    n_label: usize,
    n_unlabel: usize,
    n_pos_fusion: usize,
    n_pseudo: usize,
    pseudo_conf_sum: f64,
}

impl From<&StepRecord> for StepCsv {
    fn from(r: &StepRecord) -> Self {
        StepCsv {
            iteration: r.iteration,
            lr: r.lr,
            n_labeled: r.n_labeled,
            n_unlabeled: r.n_unlabeled,
            l_sup_cls: r.loss.l_sup_cls,
            l_sup_reg: r.loss.l_sup_reg,
            l_unsup_cls: r.loss.l_unsup_cls,
            l_unsup_reg: r.loss.l_unsup_reg,
            total: r.loss.total,
            n_label: r.loss.n_label,
            n_unlabel: r.loss.n_unlabel,
            n_pos_fusion: r.loss.n_pos_fusion,
            n_pseudo: r.n_pseudo,
            pseudo_conf_sum: r.pseudo_conf_sum,
        }
    }
}

fn metrics_row(iteration: usize, window: &[StepRecord], report: &EvalReport) -> MetricsRow {
    let n = window.len().max(1) as f64;
    let mean = |f: fn(&LossBreakdown) -> f64| window.iter().map(|r| f(&r.loss)).sum::<f64>() / n;
    let n_pseudo: usize = window.iter().map(|r| r.n_pseudo).sum();
    let conf: f64 = window.iter().map(|r| r.pseudo_conf_sum).sum();
    MetricsRow {
        iteration,
        l_sup_cls: mean(|l| l.l_sup_cls),
        l_sup_reg: mean(|l| l.l_sup_reg),
        l_unsup_cls: mean(|l| l.l_unsup_cls),
        l_unsup_reg: mean(|l| l.l_unsup_reg),
        total: mean(|l| l.total),
        map: report.map,
        ap50: report.ap50.unwrap_or(0.0),
        ap75: report.ap75.unwrap_or(0.0),
        n_pseudo,
        mean_pseudo_conf: if n_pseudo == 0 { 0.0 } else { conf / n_pseudo as f64 },
    }
}

/// Full training run on `dataset`'s labeled/unlabeled splits, evaluated on
/// its test split. Writes checkpoints, `metrics.csv`, `steps.csv` and the
/// final `eval.json` under `out_dir`. With zero iterations only the initial
/// checkpoints are written.
pub fn run<T: Float>(
    dataset: &Dataset,
    model: DetectorConfig,
    config: TrainConfig,
    out_dir: &Path,
) -> Result<RunSummary> {
    let mut state = TrainState::<T>::new(model, config.clone())?;
    let splits = &dataset.manifest.splits;
    if splits.labeled.is_empty() {
        return Err(Error::Config("dataset has no labeled images".into()));
    }
    create_dir(&out_dir.join("checkpoints"))?;
    save_pair(&state, out_dir)?;
    let mut summary = RunSummary {
        steps: Vec::new(),
        rows: Vec::new(),
        final_report: None,
        out_dir: out_dir.to_path_buf(),
    };
    if config.iterations == 0 {
        return Ok(summary);
    }
    if config.trace_students {
        create_dir(&out_dir.join("trace"))?;
    }

    let thresholds = crate::eval::coco_thresholds();
    let mut labeled_pool = Sampler::new(splits.labeled.clone(), config.seed, POOL_LABELED);
    let mut unlabeled_pool = Sampler::new(splits.unlabeled.clone(), config.seed, POOL_UNLABELED);
    let labeled_policy = AugmentPolicy::strong(Profile::Labeled);
    let student_policy = AugmentPolicy::strong(Profile::UnlabeledStudent);
    let teacher_policy = if config.teacher_strong {
        AugmentPolicy::strong(Profile::UnlabeledTeacher)
    } else {
        AugmentPolicy::weak()
    };
    let mut window_start = 0;

    for it in 0..config.iterations {
        let (n_l, n_u) = config.batch_split(it);
        let labeled = labeled_pool
            .take(n_l)
            .iter()
            .enumerate()
            .map(|(slot, &id)| {
                let mut rng = sample_rng(config.seed, it, slot, STREAM_LABELED);
                Ok(augment(dataset.image(id)?, dataset.boxes(id), &mut rng, &labeled_policy))
            })
            .collect::<Result<Vec<_>>>()?;
        let unlabeled = if config.supervised_only || config.in_burn_in(it) {
            Vec::new()
        } else {
            unlabeled_pool
                .take(n_u)
                .iter()
                .enumerate()
                .map(|(slot, &id)| {
                    let img = dataset.image(id)?;
                    // Boxes are carried through augmentation for bookkeeping only.
                    let gt = dataset.boxes(id);
                    let mut t_rng = sample_rng(config.seed, it, slot, STREAM_TEACHER);
                    let mut s_rng = sample_rng(config.seed, it, slot, STREAM_STUDENT);
                    // Both views share one weak draw; the student adds its
                    // strong operations on top.
                    let weak = draw_weak(&mut t_rng, &AugmentPolicy::weak());
                    Ok(UnlabeledPair {
                        teacher_view: augment_on(img, gt, &mut t_rng, &teacher_policy, weak),
                        student_view: augment_on(img, gt, &mut s_rng, &student_policy, weak),
                    })
                })
                .collect::<Result<Vec<_>>>()?
        };

        let out = train_step(&mut state, &labeled, &unlabeled)?;
        let (n_pseudo, pseudo_conf_sum) = out.pseudo_confidence();
        summary.steps.push(StepRecord {
            iteration: it,
            lr: out.lr,
            n_labeled: labeled.len(),
            n_unlabeled: unlabeled.len(),
            loss: out.loss,
            tape_total: out.tape_total,
            n_pseudo,
            pseudo_conf_sum,
        });
        if !out.loss.total.is_finite() {
            return Err(Error::Domain(format!("loss diverged at iteration {it}")));
        }
        if config.trace_students {
            state.student.save(&trace_path(out_dir, state.iteration))?;
        }

        let done = state.iteration;
        if done % config.eval_interval == 0 || done == config.iterations {
            let model = if config.supervised_only {
                &state.student
            } else {
                &state.teacher
            };
            let report = evaluate_model(model, dataset, &thresholds)?;
            summary
                .rows
                .push(metrics_row(done, &summary.steps[window_start..], &report));
            window_start = summary.steps.len();
            if done == config.iterations {
                summary.final_report = Some(report);
            }
        }
        if done % config.checkpoint_interval == 0 || done == config.iterations {
            save_pair(&state, out_dir)?;
        }
    }

    write_csv(&out_dir.join(METRICS_FILE), &summary.rows)?;
    let steps: Vec<StepCsv> = summary.steps.iter().map(StepCsv::from).collect();
    write_csv(&out_dir.join(STEPS_FILE), &steps)?;
    if let Some(r) = &summary.final_report {
        let p = out_dir.join(REPORT_FILE);
        fs::write(&p, serde_json::to_string_pretty(r)?).map_err(|e| Error::io(&p, e))?;
    }
    Ok(summary)
}
