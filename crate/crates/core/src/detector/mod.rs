//! Single-stage dense detector: a four-block strided backbone, the Dex
//! encoder neck (deformable 3x3, 1x1 projection, residual dilated blocks)
//! and parallel classification / box-regression heads over one feature map.

pub mod anchors;
pub mod assign;

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use anchors::{decode, decode_scalar, encode, generate_anchors, AnchorConfig, MAX_LOG_RATIO};
pub use assign::{assign_targets, count_positives, AnchorLabel, MatcherConfig};

use crate::error::{Error, Result};
use crate::geometry::{nms, BBox, Detection};
use crate::image::GrayImage;
use crate::tensor::{
    read_checkpoint, sigmoid, write_checkpoint, Checkpoint, ConvSpec, Float, Tape, Tensor, Var,
};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DexEncoderConfig {
    pub in_channels: usize,
    pub projected_channels: usize,
    /// Bottleneck width inside each dilated block.
    pub block_channels: usize,
    pub num_dilated_blocks: usize,
    pub dilation_rates: Vec<usize>,
    pub use_deformable: bool,
}

impl Default for DexEncoderConfig {
    fn default() -> Self {
        DexEncoderConfig {
            in_channels: 128,
            projected_channels: 128,
            block_channels: 32,
            num_dilated_blocks: 3,
            dilation_rates: vec![4, 6, 8],
            use_deformable: true,
        }
    }
}

impl DexEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dilation_rates.len() != self.num_dilated_blocks {
            return Err(Error::Config(format!(
                "{} dilation rates for {} dilated blocks",
                self.dilation_rates.len(),
                self.num_dilated_blocks
            )));
        }
        if self.dilation_rates.contains(&0) {
            return Err(Error::Config("dilation rates must be positive".into()));
        }
        if self.in_channels == 0 || self.projected_channels == 0 || self.block_channels == 0 {
            return Err(Error::Config("encoder channel counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Output channels of the stride-2 backbone blocks.
    pub backbone_channels: Vec<usize>,
    pub encoder: DexEncoderConfig,
    /// 3x3 conv-norm-relu layers in each head branch before the predictor.
    pub head_convs: usize,
    pub anchors: AnchorConfig,
    pub matcher: MatcherConfig,
    /// Initial foreground probability encoded in the classification bias.
    pub prior_prob: f64,
    pub pre_nms_top_k: usize,
    pub nms_iou: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            backbone_channels: vec![16, 32, 64, 128],
            encoder: DexEncoderConfig::default(),
            head_convs: 1,
            anchors: AnchorConfig::default(),
            matcher: MatcherConfig::default(),
            prior_prob: 0.01,
            pre_nms_top_k: 300,
            nms_iou: 0.6,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.anchors.validate()?;
        let depth = self.backbone_channels.len();
        if depth == 0 || self.backbone_channels.contains(&0) {
            return Err(Error::Config("backbone needs at least one non-empty block".into()));
        }
        if 1usize << depth != self.anchors.stride {
            return Err(Error::Config(format!(
                "{depth} stride-2 blocks give stride {}, anchors use stride {}",
                1usize << depth,
                self.anchors.stride
            )));
        }
        if self.backbone_channels[depth - 1] != self.encoder.in_channels {
            return Err(Error::Config(format!(
                "backbone ends with {} channels, encoder expects {}",
                self.backbone_channels[depth - 1],
                self.encoder.in_channels
            )));
        }
        if !(0.0 < self.prior_prob && self.prior_prob < 1.0) {
            return Err(Error::Config("prior_prob must lie in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.nms_iou) || self.pre_nms_top_k == 0 {
            return Err(Error::Config("nms_iou must lie in [0, 1] and top-k be positive".into()));
        }
        Ok(())
    }

    pub fn stride(&self) -> usize {
        self.anchors.stride
    }

    pub fn anchors_per_cell(&self) -> usize {
        self.anchors.per_cell()
    }
}

/// Dense predictions for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOutput<T> {
    /// `[N, A, H', W']`
    pub cls_logits: Tensor<T>,
    /// `[N, 4A, H', W']`, channel `4a + j` for anchor `a`, delta `j`.
    pub box_deltas: Tensor<T>,
}

/// Tape handles for the dense predictions.
#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    pub cls_logits: Var,
    pub box_deltas: Var,
}

#[derive(Debug, Clone, Copy)]
struct ConvP {
    w: usize,
    b: Option<usize>,
    spec: ConvSpec,
}

#[derive(Debug, Clone, Copy)]
struct NormP {
    gain: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct DilatedBlock {
    reduce: (ConvP, NormP),
    dilated: (ConvP, NormP),
    restore: (ConvP, NormP),
}

#[derive(Debug, Clone)]
struct Layout {
    backbone: Vec<(ConvP, NormP)>,
    enc_conv: ConvP,
    /// Offset and modulation branches of the deformable stage.
    dcn: Option<(ConvP, ConvP)>,
    enc_norm: NormP,
    proj: (ConvP, NormP),
    blocks: Vec<DilatedBlock>,
    cls_tower: Vec<(ConvP, NormP)>,
    reg_tower: Vec<(ConvP, NormP)>,
    cls_out: ConvP,
    reg_out: ConvP,
}

enum Init {
    HeUniform,
    Zeros,
    Ones,
    Uniform(f64),
    Const(f64),
}

struct Builder<'a> {
    rng: &'a mut ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor<f64>>,
}

impl Builder<'_> {
    fn push(&mut self, name: String, shape: &[usize], init: Init) -> usize {
        let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::HeUniform => {
                let bound = (6.0 / fan_in as f64).sqrt();
                (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect()
            }
            Init::Uniform(bound) => (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect(),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
        };
        self.names.push(name);
        self.params
            .push(Tensor::new(shape.to_vec(), data).expect("shape matches data"));
        self.params.len() - 1
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, spec: ConvSpec, bias: bool, w: Init, b: Init) -> ConvP {
        let wi = self.push(format!("{name}.weight"), &[cout, cin, k, k], w);
        let bi = bias.then(|| self.push(format!("{name}.bias"), &[cout], b));
        ConvP { w: wi, b: bi, spec }
    }

    fn norm(&mut self, name: &str, c: usize) -> NormP {
        NormP {
            gain: self.push(format!("{name}.gain"), &[c], Init::Ones),
            bias: self.push(format!("{name}.bias"), &[c], Init::Zeros),
        }
    }

    /// Bias-free conv followed by channel norm.
    fn conv_norm(&mut self, name: &str, cin: usize, cout: usize, k: usize, spec: ConvSpec) -> (ConvP, NormP) {
        let c = self.conv(name, cin, cout, k, spec, false, Init::HeUniform, Init::Zeros);
        let n = self.norm(&format!("{name}.norm"), cout);
        (c, n)
    }
}

fn build_layout(cfg: &DetectorConfig, rng: &mut ChaCha8Rng) -> (Layout, Vec<String>, Vec<Tensor<f64>>) {
    let mut b = Builder {
        rng,
        names: Vec::new(),
        params: Vec::new(),
    };
    let mut cin = 1;
    let mut backbone = Vec::new();
    for (i, &c) in cfg.backbone_channels.iter().enumerate() {
        backbone.push(b.conv_norm(&format!("backbone.{i}"), cin, c, 3, ConvSpec::new(2, 1, 1)));
        cin = c;
    }
    let enc = &cfg.encoder;
    let c = enc.in_channels;
    let a = cfg.anchors_per_cell();
    let enc_conv = b.conv("encoder.conv", c, c, 3, ConvSpec::same(3, 1), false, Init::HeUniform, Init::Zeros);
    // Zero offsets and a 0.5 mask at start: the deformable stage begins as
    // a plain (scaled) convolution and learns to deform.
    let dcn = enc.use_deformable.then(|| {
        let off = b.conv("encoder.offset", c, 18, 3, ConvSpec::same(3, 1), true, Init::Zeros, Init::Zeros);
        let mask = b.conv("encoder.mask", c, 9, 3, ConvSpec::same(3, 1), true, Init::Zeros, Init::Zeros);
        (off, mask)
    });
    let enc_norm = b.norm("encoder.conv.norm", c);
    let p = enc.projected_channels;
    let proj = b.conv_norm("encoder.proj", c, p, 1, ConvSpec::same(1, 1));
    let mut blocks = Vec::new();
    for (i, &rate) in enc.dilation_rates.iter().enumerate() {
        let m = enc.block_channels;
        blocks.push(DilatedBlock {
            reduce: b.conv_norm(&format!("encoder.block{i}.reduce"), p, m, 1, ConvSpec::same(1, 1)),
            dilated: b.conv_norm(&format!("encoder.block{i}.dilated"), m, m, 3, ConvSpec::same(3, rate)),
            restore: b.conv_norm(&format!("encoder.block{i}.restore"), m, p, 1, ConvSpec::same(1, 1)),
        });
    }
    let mut cls_tower = Vec::new();
    let mut reg_tower = Vec::new();
    for i in 0..cfg.head_convs {
        cls_tower.push(b.conv_norm(&format!("head.cls.{i}"), p, p, 3, ConvSpec::same(3, 1)));
        reg_tower.push(b.conv_norm(&format!("head.reg.{i}"), p, p, 3, ConvSpec::same(3, 1)));
    }
    let prior = -((1.0 - cfg.prior_prob) / cfg.prior_prob).ln();
    let head_init = 0.01 * 3f64.sqrt(); // uniform with std 0.01
    let cls_out = b.conv("head.cls.out", p, a, 3, ConvSpec::same(3, 1), true, Init::Uniform(head_init), Init::Const(prior));
    let reg_out = b.conv("head.reg.out", p, 4 * a, 3, ConvSpec::same(3, 1), true, Init::Uniform(head_init), Init::Zeros);
    let layout = Layout {
        backbone,
        enc_conv,
        dcn,
        enc_norm,
        proj,
        blocks,
        cls_tower,
        reg_tower,
        cls_out,
        reg_out,
    };
    (layout, b.names, b.params)
}

#[derive(Debug, Clone)]
pub struct Detector<T: Float> {
    config: DetectorConfig,
    layout: Layout,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
}

impl<T: Float> Detector<T> {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (layout, names, params) = build_layout(&config, &mut rng);
        Ok(Detector {
            config,
            layout,
            names,
            params: params.iter().map(|t| t.cast()).collect(),
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Put every parameter on `tape` as a trainable leaf, in storage order.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.iter().map(|p| tape.param(p.clone())).collect()
    }

    fn conv(&self, tape: &mut Tape<T>, p: &[Var], x: Var, c: ConvP) -> Result<Var> {
        tape.conv2d(x, p[c.w], c.b.map(|b| p[b]), c.spec)
    }

    fn conv_norm(&self, tape: &mut Tape<T>, p: &[Var], x: Var, (c, n): (ConvP, NormP), relu: bool) -> Result<Var> {
        let y = self.conv(tape, p, x, c)?;
        let y = tape.channel_norm(y, p[n.gain], p[n.bias], T::of(NORM_EPS))?;
        if relu {
            tape.relu(y)
        } else {
            Ok(y)
        }
    }

    /// Record the forward pass of `input` (`[N, 1, H, W]`) on `tape` using
    /// the parameter handles returned by [`register`](Self::register).
    pub fn forward(&self, tape: &mut Tape<T>, params: &[Var], input: Var) -> Result<DenseVars> {
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "detector",
                format!("{} parameter handles for {} parameters", params.len(), self.params.len()),
            ));
        }
        let [_, c, h, w] = tape.value(input).dims4("detector")?;
        let stride = self.config.stride();
        if c != 1 || h % stride != 0 || w % stride != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "detector",
                format!("input [{c} x {h} x {w}] must have 1 channel and sides divisible by {stride}"),
            ));
        }
        let l = &self.layout;
        let p = params;
        let mut x = input;
        for &blk in &l.backbone {
            x = self.conv_norm(tape, p, x, blk, true)?;
        }
        x = match l.dcn {
            Some((off, mask)) => {
                let offsets = self.conv(tape, p, x, off)?;
                let m = self.conv(tape, p, x, mask)?;
                let m = tape.sigmoid(m)?;
                tape.deform_conv2d(x, p[l.enc_conv.w], None, offsets, m, l.enc_conv.spec)?
            }
            None => self.conv(tape, p, x, l.enc_conv)?,
        };
        x = tape.channel_norm(x, p[l.enc_norm.gain], p[l.enc_norm.bias], T::of(NORM_EPS))?;
        x = tape.relu(x)?;
        x = self.conv_norm(tape, p, x, l.proj, false)?;
        for blk in &l.blocks {
            let y = self.conv_norm(tape, p, x, blk.reduce, true)?;
            let y = self.conv_norm(tape, p, y, blk.dilated, true)?;
            let y = self.conv_norm(tape, p, y, blk.restore, true)?;
            x = tape.add(x, y)?;
        }
        let mut cls = x;
        for &blk in &l.cls_tower {
            cls = self.conv_norm(tape, p, cls, blk, true)?;
        }
        let mut reg = x;
        for &blk in &l.reg_tower {
            reg = self.conv_norm(tape, p, reg, blk, true)?;
        }
        Ok(DenseVars {
            cls_logits: self.conv(tape, p, cls, l.cls_out)?,
            box_deltas: self.conv(tape, p, reg, l.reg_out)?,
        })
    }

    /// Gradient-free forward pass.
    pub fn predict(&self, input: &Tensor<T>) -> Result<DenseOutput<T>> {
        let mut tape = Tape::no_grad();
        let params = self.register(&mut tape);
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &params, x)?;
        Ok(DenseOutput {
            cls_logits: tape.value(out.cls_logits).clone(),
            box_deltas: tape.value(out.box_deltas).clone(),
        })
    }

    /// Anchors for a padded canvas of `canvas_h x canvas_w` pixels.
    pub fn anchors_for(&self, canvas_h: usize, canvas_w: usize) -> Vec<BBox> {
        let s = self.config.stride();
        generate_anchors(canvas_h / s, canvas_w / s, &self.config.anchors)
    }

    /// Scored, NMS-filtered detections for the image. Boxes are clipped to
    /// the image; sides not divisible by the stride are zero-padded.
    pub fn infer(&self, image: &GrayImage) -> Result<Vec<Detection>> {
        let canvas = pad_to_stride(image, self.config.stride());
        let out = self.predict(&canvas.to_tensor())?;
        let anchors = self.anchors_for(canvas.height, canvas.width);
        Ok(postprocess(
            &out,
            0,
            &anchors,
            image.width as f64,
            image.height as f64,
            self.config.pre_nms_top_k,
            self.config.nms_iou,
        ))
    }

    /// Overwrite every parameter with `other`'s values.
    pub fn copy_from(&mut self, other: &Detector<T>) -> Result<()> {
        self.check_compatible(other)?;
        for (d, s) in self.params.iter_mut().zip(&other.params) {
            d.data_mut().copy_from_slice(s.data());
        }
        Ok(())
    }

    pub fn check_compatible(&self, other: &Detector<T>) -> Result<()> {
        let same = self.names == other.names
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.shape() == b.shape());
        if same {
            Ok(())
        } else {
            Err(Error::shape("detector", "parameter layouts differ"))
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::new(
            &self.names,
            self.params.iter().map(|t| t.cast::<f32>()).collect(),
            serde_json::to_value(&self.config)?,
        )
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, origin: &Path) -> Result<Self> {
        let config: DetectorConfig = serde_json::from_value(ckpt.header.config.clone())
            .map_err(|e| Error::format(origin, format!("bad model config: {e}")))?;
        let mut model = Detector::new(config, 0)?;
        if ckpt.header.params.len() != model.params.len() {
            return Err(Error::format(
                origin,
                format!(
                    "{} stored parameters, model has {}",
                    ckpt.header.params.len(),
                    model.params.len()
                ),
            ));
        }
        for ((entry, t), (name, dst)) in ckpt
            .header
            .params
            .iter()
            .zip(&ckpt.tensors)
            .zip(model.names.iter().zip(model.params.iter_mut()))
        {
            if &entry.name != name || entry.shape != dst.shape() {
                return Err(Error::format(
                    origin,
                    format!("parameter {} {:?} does not match {name} {:?}", entry.name, entry.shape, dst.shape()),
                ));
            }
            *dst = t.cast();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.to_checkpoint()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ckpt = read_checkpoint(path)?;
        Detector::from_checkpoint(&ckpt, path)
    }
}

/// Copy `image` into the top-left of a zero canvas whose sides are
/// multiples of `stride`.
pub fn pad_to_stride(image: &GrayImage, stride: usize) -> GrayImage {
    let canvas_w = image.width.div_ceil(stride) * stride;
    let canvas_h = image.height.div_ceil(stride) * stride;
    if (canvas_w, canvas_h) == (image.width, image.height) {
        return image.clone();
    }
    let mut canvas = GrayImage::filled(canvas_w, canvas_h, 0.0);
    for y in 0..image.height {
        let row = &image.data[y * image.width..(y + 1) * image.width];
        canvas.data[y * canvas_w..y * canvas_w + image.width].copy_from_slice(row);
    }
    canvas
}

/// Per-anchor `(logit, [dx, dy, dw, dh])` for sample `n`, in anchor order.
pub fn anchor_predictions<T: Float>(out: &DenseOutput<T>, n: usize) -> Vec<(f64, [f64; 4])> {
    let [_, a, fh, fw] = match out.cls_logits.shape() {
        &[nn, a, h, w] => [nn, a, h, w],
        s => panic!("cls_logits must be 4-d, got {s:?}"),
    };
    let hw = fh * fw;
    let cls = &out.cls_logits.data()[n * a * hw..(n + 1) * a * hw];
    let reg = &out.box_deltas.data()[n * 4 * a * hw..(n + 1) * 4 * a * hw];
    let mut preds = Vec::with_capacity(a * hw);
    for cell in 0..hw {
        for k in 0..a {
            let logit = cls[k * hw + cell].as_f64();
            let d = std::array::from_fn(|j| reg[(4 * k + j) * hw + cell].as_f64());
            preds.push((logit, d));
        }
    }
    preds
}

/// Decode, keep the `top_k` highest scores, run NMS at `nms_iou` and clip to
/// `[0, width] x [0, height]`.
pub fn postprocess<T: Float>(
    out: &DenseOutput<T>,
    n: usize,
    anchors: &[BBox],
    width: f64,
    height: f64,
    top_k: usize,
    nms_iou: f64,
) -> Vec<Detection> {
    let preds = anchor_predictions(out, n);
    let mut dets: Vec<Detection> = preds
        .iter()
        .zip(anchors)
        .map(|(&(logit, d), a)| Detection {
            bbox: decode(a, d),
            score: sigmoid(logit),
            class_id: 0,
        })
        .collect();
    dets.sort_by(|x, y| y.score.total_cmp(&x.score));
    dets.truncate(top_k);
    nms(&dets, nms_iou)
        .into_iter()
        .map(|mut d| {
            d.bbox = d.bbox.clip(width, height);
            d
        })
        .filter(|d| d.bbox.is_valid())
        .collect()
}
