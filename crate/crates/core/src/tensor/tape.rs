use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::{col2im, deform_col2im, deform_im2col, im2col, ConvGeom, ConvSpec};
use super::{Float, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Recording,
    NoGrad,
    Consumed,
}

enum Op<T> {
    Leaf,
    Conv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    DeformConv2d {
        input: usize,
        weight: usize,
        bias: Option<usize>,
        offsets: usize,
        mask: usize,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Relu(usize),
    Sigmoid(usize),
    Add(usize, usize),
    Mul(usize, usize),
    ChannelNorm {
        input: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Sum(usize),
    WeightedSum(Vec<(usize, T)>),
    /// Scalar computed outside the tape, with its local gradient w.r.t.
    /// each parent precomputed.
    Fused(Vec<(usize, Tensor<T>)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Single-writer computation record. Every op appends a node whose parents
/// precede it, so reverse index order is a valid backward schedule.
pub struct Tape<T: Float> {
    id: u64,
    mode: Mode,
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Tape<T> {
    pub fn new() -> Self {
        Self::with_mode(Mode::Recording)
    }

    /// Tape that computes values only; nothing on it requires gradients.
    pub fn no_grad() -> Self {
        Self::with_mode(Mode::NoGrad)
    }

    fn with_mode(mode: Mode) -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            mode,
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.mode == Mode::Recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of recorded nodes that participate in gradient computation.
    pub fn grad_node_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.requires_grad).count()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::DetachedTape {
                expected: self.id,
                found: v.tape,
            });
        }
        Ok(v.index)
    }

    /// Value of a variable.
    ///
    /// Panics if `v` was recorded on another tape.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        let i = self.idx(v).expect("variable from another tape");
        &self.nodes[i].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.idx(v).map(|i| self.nodes[i].requires_grad).unwrap_or(false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[usize]) -> Var {
        let recording = self.mode == Mode::Recording;
        let requires_grad = recording && parents.iter().any(|&p| self.nodes[p].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Trainable leaf. On a no-grad tape this is the same as [`constant`](Self::constant).
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let requires_grad = self.mode == Mode::Recording;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        let (xi, wi) = (self.idx(input)?, self.idx(weight)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let geom = ConvGeom::new(
            "conv2d",
            self.nodes[xi].value.shape(),
            self.nodes[wi].value.shape(),
            spec,
        )?;
        self.check_bias("conv2d", bi, geom.out_c)?;
        let rows = geom.col_rows();
        let hw = geom.out_hw();
        let keep_cols = self.mode == Mode::Recording
            && (self.nodes[wi].requires_grad || self.nodes[xi].requires_grad);
        let mut cols_all = if keep_cols {
            vec![T::zero(); geom.n * rows * hw]
        } else {
            Vec::new()
        };
        let mut scratch = vec![T::zero(); if keep_cols { 0 } else { rows * hw }];
        let mut out = vec![T::zero(); geom.n * geom.out_c * hw];
        let x = self.nodes[xi].value.data();
        let w = self.nodes[wi].value.data();
        for n in 0..geom.n {
            let xn = &x[n * geom.c * geom.in_hw()..(n + 1) * geom.c * geom.in_hw()];
            let cols: &mut [T] = if keep_cols {
                &mut cols_all[n * rows * hw..(n + 1) * rows * hw]
            } else {
                &mut scratch
            };
            im2col(&geom, xn, cols);
            let on = &mut out[n * geom.out_c * hw..(n + 1) * geom.out_c * hw];
            gemm_forward(&geom, w, cols, on);
        }
        self.add_bias(&geom, bi, &mut out);
        let value = Tensor::new(vec![geom.n, geom.out_c, geom.ho, geom.wo], out)?;
        let mut parents = vec![xi, wi];
        parents.extend(bi);
        Ok(self.push(
            value,
            Op::Conv2d {
                input: xi,
                weight: wi,
                bias: bi,
                geom,
                cols: cols_all,
            },
            &parents,
        ))
    }

    /// Modulated deformable convolution. `offsets` is `[N, 2K, Ho, Wo]` with
    /// interleaved `(dy, dx)` per kernel tap, `mask` is `[N, K, Ho, Wo]`.
    pub fn deform_conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        offsets: Var,
        mask: Var,
        spec: ConvSpec,
    ) -> Result<Var> {
        let (xi, wi) = (self.idx(input)?, self.idx(weight)?);
        let (oi, mi) = (self.idx(offsets)?, self.idx(mask)?);
        let bi = bias.map(|b| self.idx(b)).transpose()?;
        let geom = ConvGeom::new(
            "deform_conv2d",
            self.nodes[xi].value.shape(),
            self.nodes[wi].value.shape(),
            spec,
        )?;
        self.check_bias("deform_conv2d", bi, geom.out_c)?;
        let k = geom.taps();
        let want_off = [geom.n, 2 * k, geom.ho, geom.wo];
        let want_mask = [geom.n, k, geom.ho, geom.wo];
        if self.nodes[oi].value.shape() != want_off {
            return Err(Error::shape(
                "deform_conv2d",
                format!(
                    "offsets shape {:?}, expected {want_off:?}",
                    self.nodes[oi].value.shape()
                ),
            ));
        }
        if self.nodes[mi].value.shape() != want_mask {
            return Err(Error::shape(
                "deform_conv2d",
                format!(
                    "modulation shape {:?}, expected {want_mask:?}",
                    self.nodes[mi].value.shape()
                ),
            ));
        }
        let rows = geom.col_rows();
        let hw = geom.out_hw();
        let keep_cols = self.mode == Mode::Recording;
        let mut cols_all = vec![T::zero(); geom.n * rows * hw];
        let mut out = vec![T::zero(); geom.n * geom.out_c * hw];
        let x = self.nodes[xi].value.data();
        let w = self.nodes[wi].value.data();
        let off = self.nodes[oi].value.data();
        let msk = self.nodes[mi].value.data();
        for n in 0..geom.n {
            let xn = &x[n * geom.c * geom.in_hw()..(n + 1) * geom.c * geom.in_hw()];
            let on_off = &off[n * 2 * k * hw..(n + 1) * 2 * k * hw];
            let on_msk = &msk[n * k * hw..(n + 1) * k * hw];
            let cols = &mut cols_all[n * rows * hw..(n + 1) * rows * hw];
            deform_im2col(&geom, xn, on_off, on_msk, cols);
            let on = &mut out[n * geom.out_c * hw..(n + 1) * geom.out_c * hw];
            gemm_forward(&geom, w, cols, on);
        }
        if !keep_cols {
            cols_all = Vec::new();
        }
        self.add_bias(&geom, bi, &mut out);
        let value = Tensor::new(vec![geom.n, geom.out_c, geom.ho, geom.wo], out)?;
        let mut parents = vec![xi, wi, oi, mi];
        parents.extend(bi);
        Ok(self.push(
            value,
            Op::DeformConv2d {
                input: xi,
                weight: wi,
                bias: bi,
                offsets: oi,
                mask: mi,
                geom,
                cols: cols_all,
            },
            &parents,
        ))
    }

    fn check_bias(&self, op: &'static str, bias: Option<usize>, out_c: usize) -> Result<()> {
        if let Some(b) = bias {
            let shape = self.nodes[b].value.shape();
            if shape != [out_c] {
                return Err(Error::shape(
                    op,
                    format!("bias shape {shape:?}, expected [{out_c}]"),
                ));
            }
        }
        Ok(())
    }

    fn add_bias(&self, geom: &ConvGeom, bias: Option<usize>, out: &mut [T]) {
        let Some(b) = bias else { return };
        let bias = self.nodes[b].value.data();
        let hw = geom.out_hw();
        for n in 0..geom.n {
            for (co, &bv) in bias.iter().enumerate() {
                let start = (n * geom.out_c + co) * hw;
                for v in &mut out[start..start + hw] {
                    *v += bv;
                }
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.map(|v| v.max(T::zero()));
        Ok(self.push(value, Op::Relu(xi), &[xi]))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let value = self.nodes[xi].value.map(sigmoid);
        Ok(self.push(value, Op::Sigmoid(xi), &[xi]))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        let (sa, sb) = (self.nodes[a].value.shape(), self.nodes[b].value.shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("add", ai, bi)?;
        let mut value = self.nodes[ai].value.clone();
        value.add_assign(&self.nodes[bi].value);
        Ok(self.push(value, Op::Add(ai, bi), &[ai, bi]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        self.same_shape("mul", ai, bi)?;
        let mut value = self.nodes[ai].value.clone();
        for (v, &o) in value.data_mut().iter_mut().zip(self.nodes[bi].value.data()) {
            *v *= o;
        }
        Ok(self.push(value, Op::Mul(ai, bi), &[ai, bi]))
    }

    /// Normalize each `(sample, channel)` plane to zero mean and unit
    /// variance over its spatial extent, then apply the per-channel affine
    /// `gain * x + bias`.
    pub fn channel_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gain)?, self.idx(bias)?);
        let [n, c, h, w] = self.nodes[xi].value.dims4("channel_norm")?;
        for (name, i) in [("gain", gi), ("bias", bi)] {
            let s = self.nodes[i].value.shape();
            if s != [c] {
                return Err(Error::shape(
                    "channel_norm",
                    format!("{name} shape {s:?}, expected [{c}]"),
                ));
            }
        }
        let hw = h * w;
        let m = T::of(hw as f64);
        let xs = self.nodes[xi].value.data();
        let gs = self.nodes[gi].value.data();
        let bs = self.nodes[bi].value.data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut inv_std = vec![T::zero(); n * c];
        let mut out = vec![T::zero(); xs.len()];
        for s in 0..n {
            for ch in 0..c {
                let plane = (s * c + ch) * hw;
                let xp = &xs[plane..plane + hw];
                let mean = xp.iter().copied().sum::<T>() / m;
                let var = xp.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
                let is = T::one() / (var + eps).sqrt();
                inv_std[s * c + ch] = is;
                for i in 0..hw {
                    let xh = (xp[i] - mean) * is;
                    xhat[plane + i] = xh;
                    out[plane + i] = gs[ch] * xh + bs[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::ChannelNorm {
                input: xi,
                gain: gi,
                bias: bi,
                xhat,
                inv_std,
            },
            &[xi, gi, bi],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let total = self.nodes[xi].value.data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(total), Op::Sum(xi), &[xi]))
    }

    /// `sum_i c_i * x_i` over scalar variables.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut idx = Vec::with_capacity(terms.len());
        let mut total = T::zero();
        for &(v, c) in terms {
            let i = self.idx(v)?;
            let val = &self.nodes[i].value;
            if !val.is_scalar() {
                return Err(Error::shape(
                    "weighted_sum",
                    format!("term {i} has shape {:?}", val.shape()),
                ));
            }
            total += c * val.item();
            idx.push((i, c));
        }
        let parents: Vec<usize> = idx.iter().map(|&(i, _)| i).collect();
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(idx), &parents))
    }

    /// Record a scalar whose value and local gradients were computed by the
    /// caller, e.g. a loss evaluated with forward-mode derivatives.
    pub fn fused_scalar(&mut self, value: T, local_grads: Vec<(Var, Tensor<T>)>) -> Result<Var> {
        let mut parents = Vec::with_capacity(local_grads.len());
        let mut recorded = Vec::with_capacity(local_grads.len());
        for (v, g) in local_grads {
            let i = self.idx(v)?;
            if self.nodes[i].value.shape() != g.shape() {
                return Err(Error::shape(
                    "fused_scalar",
                    format!(
                        "local gradient {:?} vs value {:?}",
                        g.shape(),
                        self.nodes[i].value.shape()
                    ),
                ));
            }
            parents.push(i);
            recorded.push((i, g));
        }
        Ok(self.push(Tensor::scalar(value), Op::Fused(recorded), &parents))
    }

    /// Reverse sweep from a scalar loss. A tape supports exactly one sweep.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        match self.mode {
            Mode::Consumed => return Err(Error::TapeConsumed),
            Mode::NoGrad => return Err(Error::NoGradTape),
            Mode::Recording => {}
        }
        let li = self.idx(loss)?;
        let shape = self.nodes[li].value.shape().to_vec();
        if self.nodes[li].value.len() != 1 {
            return Err(Error::NonScalarLoss(shape));
        }
        self.mode = Mode::Consumed;
        let Tape { nodes, grads, .. } = self;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[li] = Some(Tensor::full(&shape, T::one()));
        for i in (0..=li).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(nodes, grads, i, &g);
            grads[i] = Some(g);
        }
        // Activations and column buffers are dead after the sweep.
        for node in nodes.iter_mut() {
            match &mut node.op {
                Op::Conv2d { cols, .. } | Op::DeformConv2d { cols, .. } => *cols = Vec::new(),
                Op::ChannelNorm { xhat, .. } => *xhat = Vec::new(),
                _ => {}
            }
        }
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. `v`, if it received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        let i = self.idx(v).ok()?;
        self.grads.get(i)?.as_ref()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn gemm_forward<T: Float>(geom: &ConvGeom, weight: &[T], cols: &[T], out: &mut [T]) {
    let rows = geom.col_rows();
    let hw = geom.out_hw();
    T::gemm(
        geom.out_c,
        rows,
        hw,
        T::one(),
        weight,
        (rows as isize, 1),
        cols,
        (hw as isize, 1),
        T::zero(),
        out,
        (hw as isize, 1),
    );
}

fn grad_buf<'a, T: Float>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Tensor<T>>],
    i: usize,
) -> Option<&'a mut [T]> {
    if !nodes[i].requires_grad {
        return None;
    }
    let buf = grads[i].get_or_insert_with(|| Tensor::zeros(nodes[i].value.shape()));
    Some(buf.data_mut())
}

/// Gradients of the weight/bias (and the column gradient) of one conv-like
/// node; returns per-sample column gradients when the input side needs them.
fn conv_weight_backward<T: Float>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    geom: &ConvGeom,
    weight: usize,
    bias: Option<usize>,
    cols: &[T],
    g: &[T],
) {
    let rows = geom.col_rows();
    let hw = geom.out_hw();
    if let Some(dw) = grad_buf(nodes, grads, weight) {
        for n in 0..geom.n {
            let gn = &g[n * geom.out_c * hw..(n + 1) * geom.out_c * hw];
            let cn = &cols[n * rows * hw..(n + 1) * rows * hw];
            T::gemm(
                geom.out_c,
                hw,
                rows,
                T::one(),
                gn,
                (hw as isize, 1),
                cn,
                (1, hw as isize),
                T::one(),
                dw,
                (rows as isize, 1),
            );
        }
    }
    if let Some(b) = bias {
        if let Some(db) = grad_buf(nodes, grads, b) {
            for n in 0..geom.n {
                for (co, d) in db.iter_mut().enumerate() {
                    let start = (n * geom.out_c + co) * hw;
                    *d += g[start..start + hw].iter().copied().sum::<T>();
                }
            }
        }
    }
}

fn column_grad<T: Float>(geom: &ConvGeom, weight: &[T], gn: &[T], dcols: &mut [T]) {
    let rows = geom.col_rows();
    let hw = geom.out_hw();
    T::gemm(
        rows,
        geom.out_c,
        hw,
        T::one(),
        weight,
        (1, rows as isize),
        gn,
        (hw as isize, 1),
        T::zero(),
        dcols,
        (hw as isize, 1),
    );
}

fn backprop_node<T: Float>(
    nodes: &[Node<T>],
    grads: &mut [Option<Tensor<T>>],
    i: usize,
    g: &Tensor<T>,
) {
    let g = g.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::Conv2d {
            input,
            weight,
            bias,
            geom,
            cols,
        } => {
            conv_weight_backward(nodes, grads, geom, *weight, *bias, cols, g);
            if nodes[*input].requires_grad {
                let w = nodes[*weight].value.data();
                let hw = geom.out_hw();
                let in_sz = geom.c * geom.in_hw();
                let mut dcols = vec![T::zero(); geom.col_rows() * hw];
                let dx = grad_buf(nodes, grads, *input).expect("requires grad");
                for n in 0..geom.n {
                    let gn = &g[n * geom.out_c * hw..(n + 1) * geom.out_c * hw];
                    column_grad(geom, w, gn, &mut dcols);
                    col2im(geom, &dcols, &mut dx[n * in_sz..(n + 1) * in_sz]);
                }
            }
        }
        Op::DeformConv2d {
            input,
            weight,
            bias,
            offsets,
            mask,
            geom,
            cols,
        } => {
            conv_weight_backward(nodes, grads, geom, *weight, *bias, cols, g);
            let need = [*input, *offsets, *mask].map(|p| nodes[p].requires_grad);
            if need.iter().any(|&b| b) {
                let w = nodes[*weight].value.data();
                let x = nodes[*input].value.data();
                let off = nodes[*offsets].value.data();
                let msk = nodes[*mask].value.data();
                let hw = geom.out_hw();
                let k = geom.taps();
                let in_sz = geom.c * geom.in_hw();
                let mut dcols = vec![T::zero(); geom.col_rows() * hw];
                // Three disjoint gradient buffers are needed at once; take
                // them out of the table and put them back afterwards.
                let mut take = |p: usize, on: bool| -> Option<Tensor<T>> {
                    on.then(|| {
                        grads[p]
                            .take()
                            .unwrap_or_else(|| Tensor::zeros(nodes[p].value.shape()))
                    })
                };
                let mut dx = take(*input, need[0]);
                let mut doff = take(*offsets, need[1]);
                let mut dm = take(*mask, need[2]);
                for n in 0..geom.n {
                    let gn = &g[n * geom.out_c * hw..(n + 1) * geom.out_c * hw];
                    column_grad(geom, w, gn, &mut dcols);
                    deform_col2im(
                        geom,
                        &x[n * in_sz..(n + 1) * in_sz],
                        &off[n * 2 * k * hw..(n + 1) * 2 * k * hw],
                        &msk[n * k * hw..(n + 1) * k * hw],
                        &dcols,
                        dx.as_mut()
                            .map(|t| &mut t.data_mut()[n * in_sz..(n + 1) * in_sz]),
                        doff.as_mut()
                            .map(|t| &mut t.data_mut()[n * 2 * k * hw..(n + 1) * 2 * k * hw]),
                        dm.as_mut()
                            .map(|t| &mut t.data_mut()[n * k * hw..(n + 1) * k * hw]),
                    );
                }
                for (p, t) in [(*input, dx), (*offsets, doff), (*mask, dm)] {
                    if let Some(t) = t {
                        grads[p] = Some(t);
                    }
                }
            }
        }
        Op::Relu(x) => {
            let xv = nodes[*x].value.data();
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for ((d, &v), &gi) in dx.iter_mut().zip(xv).zip(g) {
                    if v > T::zero() {
                        *d += gi;
                    }
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = nodes[i].value.data();
            if let Some(dx) = grad_buf(nodes, grads, *x) {
                for ((d, &yv), &gi) in dx.iter_mut().zip(y).zip(g) {
                    *d += gi * yv * (T::one() - yv);
                }
            }
        }
        Op::Add(a, b) => {
            for p in [*a, *b] {
                if let Some(d) = grad_buf(nodes, grads, p) {
                    for (dv, &gi) in d.iter_mut().zip(g) {
                        *dv += gi;
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            for (p, other) in [(*a, *b), (*b, *a)] {
                let ov = nodes[other].value.data();
                if let Some(d) = grad_buf(nodes, grads, p) {
                    for ((dv, &o), &gi) in d.iter_mut().zip(ov).zip(g) {
                        *dv += gi * o;
                    }
                }
            }
        }
        Op::ChannelNorm {
            input,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let [n, c, h, w] = nodes[*input].value.dims4("channel_norm").expect("4-d");
            let hw = h * w;
            let m = T::of(hw as f64);
            let gains = nodes[*gain].value.data();
            if let Some(dg) = grad_buf(nodes, grads, *gain) {
                for s in 0..n {
                    for (ch, d) in dg.iter_mut().enumerate() {
                        let p = (s * c + ch) * hw;
                        *d += (0..hw).map(|k| g[p + k] * xhat[p + k]).sum::<T>();
                    }
                }
            }
            if let Some(db) = grad_buf(nodes, grads, *bias) {
                for s in 0..n {
                    for (ch, d) in db.iter_mut().enumerate() {
                        let p = (s * c + ch) * hw;
                        *d += g[p..p + hw].iter().copied().sum::<T>();
                    }
                }
            }
            if let Some(dx) = grad_buf(nodes, grads, *input) {
                for s in 0..n {
                    for ch in 0..c {
                        let p = (s * c + ch) * hw;
                        let gv = gains[ch];
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for k in 0..hw {
                            let dxh = g[p + k] * gv;
                            sum_d += dxh;
                            sum_dx += dxh * xhat[p + k];
                        }
                        let is = inv_std[s * c + ch];
                        for k in 0..hw {
                            let dxh = g[p + k] * gv;
                            dx[p + k] += is / m * (m * dxh - sum_d - xhat[p + k] * sum_dx);
                        }
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(d) = grad_buf(nodes, grads, *x) {
                for dv in d.iter_mut() {
                    *dv += g[0];
                }
            }
        }
        Op::WeightedSum(terms) => {
            for &(p, c) in terms {
                if let Some(d) = grad_buf(nodes, grads, p) {
                    d[0] += c * g[0];
                }
            }
        }
        Op::Fused(parents) => {
            for (p, local) in parents {
                if let Some(d) = grad_buf(nodes, grads, *p) {
                    for (dv, &l) in d.iter_mut().zip(local.data()) {
                        *dv += g[0] * l;
                    }
                }
            }
        }
    }
}
