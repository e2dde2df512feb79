use std::collections::HashMap;

use super::{ParamKey, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_ch * self.kernel_h * self.kernel_w
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

enum Op<T> {
    Leaf,
    Param(ParamKey),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Relu(Var),
    /// Input and its sigmoid, kept for the backward pass.
    Silu(Var, Vec<T>),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Softplus(Var),
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    LogSoftmax(Var),
    NchwToRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    by_param: HashMap<ParamKey, Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, key: ParamKey) -> Option<&[T]> {
        self.by_param.get(&key).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }
}

/// Tape of primitive applications. Nodes are appended in evaluation order, so
/// the tape is always topologically sorted.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    recording: bool,
}

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, delta: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(delta) {
                *a += d;
            }
        }
        None => *slot = Some(delta),
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad` is
/// inside the image.
fn valid_span(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let mut lo = 0;
    while lo < g.out_w && ((lo * g.stride + kx) as isize) < g.pad as isize {
        lo += 1;
    }
    let mut hi = g.out_w;
    while hi > lo && (hi - 1) * g.stride + kx >= g.width + g.pad {
        hi -= 1;
    }
    (lo, hi)
}

/// Writes one image's patches into columns `[offset, offset + p)` of a
/// `[rows, ld]` matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, offset: usize) {
    let p = g.col_cols();
    for c in 0..g.in_ch {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * ld + offset..][..p];
                let (lo, hi) = valid_span(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy as usize >= g.height {
                        out.fill(T::zero());
                        continue;
                    }
                    out[..lo].fill(T::zero());
                    out[hi..].fill(T::zero());
                    let src = &x[(c * g.height + iy as usize) * g.width..][..g.width];
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pad;
                        out[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            out[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`].
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T], ld: usize, offset: usize) {
    let p = g.col_cols();
    for c in 0..g.in_ch {
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &cols[row * ld + offset..][..p];
                let (lo, hi) = valid_span(g, kx);
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.height {
                        continue;
                    }
                    let s = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let d = &mut dx[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in lo..hi {
                        d[ox * g.stride + kx - g.pad] += s[ox];
                    }
                }
            }
        }
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    /// A graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
        }
    }

    /// Forward-only graph; [`Graph::backward`] fails on it.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op_name));
        }
        let op = if self.recording {
            op
        } else {
            match op {
                Op::Param(k) => Op::Param(k),
                _ => Op::Leaf,
            }
        };
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("input", t, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        let t = Tensor::new(shape.to_vec(), data)?;
        self.input(t)
    }

    pub fn param(&mut self, store: &ParamStore<T>, index: usize) -> Result<Var> {
        let mut t = store.get(index).clone();
        t.set_grad(None)?;
        self.push("param", t, Op::Param(store.key(index)))
    }

    pub fn param_by_name(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let index = store
            .index_of(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        self.param(store, index)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    /// 2-D cross-correlation of `x: [B, C, H, W]` with `w: [O, C, kh, kw]`,
    /// zero padding on every side.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
            return Err(Error::dim(
                "conv2d",
                format!("input {sx:?}, kernel {sw:?}, stride {stride}"),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [sw[0]] {
                return Err(Error::dim(
                    "conv2d",
                    format!("bias {:?} for {} output channels", self.shape(b), sw[0]),
                ));
            }
        }
        let (hp, wp) = (sx[2] + 2 * pad, sx[3] + 2 * pad);
        if hp < sw[2] || wp < sw[3] {
            return Err(Error::dim(
                "conv2d",
                format!("kernel {sw:?} larger than padded input {sx:?}"),
            ));
        }
        let geom = ConvGeom {
            batch: sx[0],
            in_ch: sx[1],
            height: sx[2],
            width: sx[3],
            out_ch: sw[0],
            kernel_h: sw[2],
            kernel_w: sw[3],
            stride,
            pad,
            out_h: (hp - sw[2]) / stride + 1,
            out_w: (wp - sw[3]) / stride + 1,
        };
        let (rows, p) = (geom.col_rows(), geom.col_cols());
        let in_size = geom.in_ch * geom.height * geom.width;
        let out_size = geom.out_ch * p;
        // Patches `[B, rows, p]`; one image's block is reused when not recording.
        let block = rows * p;
        let mut cols = vec![T::zero(); if self.recording { geom.batch * block } else { block }];
        let mut out = vec![T::zero(); geom.batch * out_size];
        {
            let xd = self.value(x).data();
            let wd = self.value(w).data();
            let bd = b.map(|b| self.value(b).data());
            for n in 0..geom.batch {
                let at = if self.recording { n * block } else { 0 };
                let c = &mut cols[at..at + block];
                im2col(&xd[n * in_size..(n + 1) * in_size], &geom, c, p, 0);
                let y = &mut out[n * out_size..(n + 1) * out_size];
                if let Some(bd) = bd {
                    for (row, &bias) in y.chunks_mut(p).zip(bd) {
                        row.fill(bias);
                    }
                }
                T::gemm(geom.out_ch, rows, p, wd, false, c, false, y, bd.is_some());
            }
        }
        if !self.recording {
            cols = Vec::new();
        }
        let value = Tensor::new(vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        )
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        same_shape(name, self.value(a), self.value(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(name, value, op)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push(name, value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, |x, y| if y < x { y } else { x }, Op::Minimum(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, |x, y| if y > x { y } else { x }, Op::Maximum(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.unary("scale", a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn offset(&mut self, a: Var, shift: T) -> Result<Var> {
        self.unary("offset", a, |x| x + shift, Op::Offset(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu(a))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let sig = T::sigmoid_slice(self.value(a).data());
        let data = self.value(a).data().iter().zip(&sig).map(|(&x, &s)| x * s).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let kept = if self.recording { sig } else { Vec::new() };
        self.push("silu", value, Op::Silu(a, kept))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::new(self.shape(a).to_vec(), T::sigmoid_slice(self.value(a).data()))?;
        self.push("sigmoid", value, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, T::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, T::ln, Op::Log(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    /// 2×2 max pool with stride 2 over `[B, C, H, W]`; `H` and `W` must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::dim("max_pool2", format!("input {s:?}")));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * oh * ow);
        let mut argmax = Vec::with_capacity(b * c * oh * ow);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![b, c, oh, ow], out)?;
        self.push("max_pool2", value, Op::MaxPool2 { x, argmax })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(a)
            .reshaped(shape)
            .map_err(|_| Error::dim("reshape", format!("{:?} -> {shape:?}", self.shape(a))))?;
        self.push("reshape", value, Op::Reshape(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let total: T = t.data().iter().copied().sum();
        let mean = total / T::lit(t.numel() as f64);
        self.push("mean", Tensor::scalar(mean), Op::Mean(a))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let classes = *t.shape().last().expect("non-empty shape");
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(classes) {
            let max = row
                .iter()
                .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            for v in row.iter_mut() {
                *v = *v - lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax(a))
    }

    /// Softmax of `a / temperature` along the last axis.
    pub fn softmax_with_temperature(&mut self, a: Var, temperature: T) -> Result<Var> {
        if !(temperature > T::zero()) {
            return Err(Error::Parameter(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        let scaled = self.scale(a, T::one() / temperature)?;
        let ls = self.log_softmax(scaled)?;
        self.exp(ls)
    }

    /// `[B, C, H, W]` to `[B·H·W, C]`: one row per spatial cell.
    pub fn nchw_to_rows(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::dim("nchw_to_rows", format!("input {s:?}")));
        }
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let xd = self.value(a).data();
        let mut out = vec![T::zero(); b * c * hw];
        for n in 0..b {
            for ch in 0..c {
                for p in 0..hw {
                    out[(n * hw + p) * c + ch] = xd[(n * c + ch) * hw + p];
                }
            }
        }
        let value = Tensor::new(vec![b * hw, c], out)?;
        self.push("nchw_to_rows", value, Op::NchwToRows(a))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || start >= end || end > s[1] {
            return Err(Error::dim("slice_cols", format!("{s:?} [{start}..{end})")));
        }
        let width = end - start;
        let xd = self.value(a).data();
        let mut out = Vec::with_capacity(s[0] * width);
        for row in xd.chunks(s[1]) {
            out.extend_from_slice(&row[start..end]);
        }
        let value = Tensor::new(vec![s[0], width], out)?;
        self.push("slice_cols", value, Op::SliceCols { x: a, start })
    }

    /// Selected rows of a 2-D tensor, in the given order.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 || rows.is_empty() || rows.iter().any(|&r| r >= s[0]) {
            return Err(Error::dim(
                "gather_rows",
                format!("{s:?} with {} row indices", rows.len()),
            ));
        }
        let xd = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * s[1]);
        for &r in rows {
            out.extend_from_slice(&xd[r * s[1]..(r + 1) * s[1]]);
        }
        let value = Tensor::new(vec![rows.len(), s[1]], out)?;
        self.push(
            "gather_rows",
            value,
            Op::GatherRows {
                x: a,
                rows: rows.to_vec(),
            },
        )
    }

    /// Fingerprint of every data-dependent branch taken by non-smooth
    /// primitives (ReLU sign, min/max selection, pooling argmax). Two
    /// evaluations with equal fingerprints lie on the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => {
                    for &x in self.value(*a).data() {
                        mix((x > T::zero()) as u64);
                    }
                }
                Op::Minimum(a, b) | Op::Maximum(a, b) => {
                    let is_min = matches!(node.op, Op::Minimum(..));
                    for (&x, &y) in self.value(*a).data().iter().zip(self.value(*b).data()) {
                        let pick_b = if is_min { y < x } else { y > x };
                        mix(pick_b as u64 + 2);
                    }
                }
                Op::MaxPool2 { argmax, .. } => {
                    for &i in argmax {
                        mix(i as u64);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Reverse pass from a scalar loss. Every parameter leaf reachable from
    /// `loss` receives its gradient; the caller distributes them to stores
    /// with [`ParamStore::load_grads`].
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::Contract(
                "backward called on a graph built in inference mode".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = node.value.data();
            match &node.op {
                Op::Leaf => {}
                Op::Param(key) => {
                    if !g.iter().all(|v| v.is_finite()) {
                        return Err(Error::NonFinite("backward"));
                    }
                    match out.by_param.get_mut(key) {
                        Some(acc) => {
                            for (a, d) in acc.iter_mut().zip(g) {
                                *a += d;
                            }
                        }
                        None => {
                            out.by_param.insert(*key, g);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (sa, sb) = (self.shape(*a), self.shape(*b));
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, &g, false, self.value(*b).data(), true, &mut da, false);
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, self.value(*a).data(), true, &g, false, &mut db, false);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    geom,
                    cols,
                } => {
                    let (rows, p) = (geom.col_rows(), geom.col_cols());
                    let in_size = geom.in_ch * geom.height * geom.width;
                    let out_size = geom.out_ch * p;
                    let wd = self.value(*w).data();
                    // gradients of leaves are never read
                    let need_dx = !matches!(self.nodes[x.0].op, Op::Leaf);
                    let mut dw = vec![T::zero(); geom.out_ch * rows];
                    let mut dx = vec![T::zero(); if need_dx { geom.batch * in_size } else { 0 }];
                    let mut dcols = vec![T::zero(); if need_dx { rows * p } else { 0 }];
                    for n in 0..geom.batch {
                        let gn = &g[n * out_size..(n + 1) * out_size];
                        let cn = &cols[n * rows * p..(n + 1) * rows * p];
                        T::gemm(geom.out_ch, p, rows, gn, false, cn, true, &mut dw, n > 0);
                        if need_dx {
                            T::gemm(rows, geom.out_ch, p, wd, true, gn, false, &mut dcols, false);
                            col2im(&dcols, geom, &mut dx[n * in_size..(n + 1) * in_size], p, 0);
                        }
                    }
                    if let Some(b) = b {
                        let mut db = vec![T::zero(); geom.out_ch];
                        for n in 0..geom.batch {
                            for (o, row) in g[n * out_size..(n + 1) * out_size].chunks(p).enumerate() {
                                db[o] += row.iter().copied().sum::<T>();
                            }
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                    accumulate(&mut grads[w.0], dw);
                    if need_dx {
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|&v| -v).collect();
                    accumulate(&mut grads[a.0], g);
                    accumulate(&mut grads[b.0], neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let da = g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect();
                    let db = g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect();
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b).data();
                    let da = g.iter().zip(bv).map(|(&gi, &bi)| gi / bi).collect();
                    let db = g
                        .iter()
                        .zip(val)
                        .zip(bv)
                        .map(|((&gi, &q), &bi)| -gi * q / bi)
                        .collect();
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Minimum(a, b) | Op::Maximum(a, b) => {
                    let is_min = matches!(node.op, Op::Minimum(..));
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let mut da = vec![T::zero(); g.len()];
                    let mut db = vec![T::zero(); g.len()];
                    for j in 0..g.len() {
                        let pick_b = if is_min { bv[j] < av[j] } else { bv[j] > av[j] };
                        if pick_b {
                            db[j] = g[j];
                        } else {
                            da[j] = g[j];
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Scale(a, f) => {
                    let f = *f;
                    accumulate(&mut grads[a.0], g.iter().map(|&v| v * f).collect());
                }
                Op::Offset(a) | Op::Reshape(a) => accumulate(&mut grads[a.0], g),
                Op::Relu(a) => {
                    let av = self.value(*a).data();
                    let d = g
                        .iter()
                        .zip(av)
                        .map(|(&gi, &x)| if x > T::zero() { gi } else { T::zero() })
                        .collect();
                    accumulate(&mut grads[a.0], d);
                }
                Op::Silu(a, sig) => {
                    let av = self.value(*a).data();
                    let d = g
                        .iter()
                        .zip(av)
                        .zip(sig)
                        .map(|((&gi, &x), &s)| gi * (s + x * s * (T::one() - s)))
                        .collect();
                    accumulate(&mut grads[a.0], d);
                }
                Op::Sigmoid(a) => {
                    let d = g
                        .iter()
                        .zip(val)
                        .map(|(&gi, &s)| gi * s * (T::one() - s))
                        .collect();
                    accumulate(&mut grads[a.0], d);
                }
                Op::Exp(a) => {
                    let d = g.iter().zip(val).map(|(&gi, &e)| gi * e).collect();
                    accumulate(&mut grads[a.0], d);
                }
                Op::Log(a) => {
                    let av = self.value(*a).data();
                    let d = g.iter().zip(av).map(|(&gi, &x)| gi / x).collect();
                    accumulate(&mut grads[a.0], d);
                }
                Op::Softplus(a) => {
                    let av = self.value(*a).data();
                    let d = g.iter().zip(av).map(|(&gi, &x)| gi * sigmoid(x)).collect();
                    accumulate(&mut grads[a.0], d);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    for (&gi, &src) in g.iter().zip(argmax) {
                        dx[src] += gi;
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    accumulate(&mut grads[a.0], vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    let v = g[0] / T::lit(n as f64);
                    accumulate(&mut grads[a.0], vec![v; n]);
                }
                Op::LogSoftmax(a) => {
                    let classes = *node.value.shape().last().expect("non-empty shape");
                    let mut d = Vec::with_capacity(g.len());
                    for (grow, yrow) in g.chunks(classes).zip(val.chunks(classes)) {
                        let gsum: T = grow.iter().copied().sum();
                        d.extend(grow.iter().zip(yrow).map(|(&gi, &y)| gi - y.exp() * gsum));
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::NchwToRows(a) => {
                    let s = self.shape(*a);
                    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
                    let mut d = vec![T::zero(); b * c * hw];
                    for n in 0..b {
                        for ch in 0..c {
                            for p in 0..hw {
                                d[(n * c + ch) * hw + p] = g[(n * hw + p) * c + ch];
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::SliceCols { x, start } => {
                    let s = self.shape(*x);
                    let width = node.value.shape()[1];
                    let mut d = vec![T::zero(); s[0] * s[1]];
                    for (r, grow) in g.chunks(width).enumerate() {
                        d[r * s[1] + start..r * s[1] + start + width].copy_from_slice(grow);
                    }
                    accumulate(&mut grads[x.0], d);
                }
                Op::GatherRows { x, rows } => {
                    let s = self.shape(*x);
                    let mut d = vec![T::zero(); s[0] * s[1]];
                    for (grow, &r) in g.chunks(s[1]).zip(rows) {
                        for (dst, &v) in d[r * s[1]..(r + 1) * s[1]].iter_mut().zip(grow) {
                            *dst += v;
                        }
                    }
                    accumulate(&mut grads[x.0], d);
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_all_ones() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::full(&[2, 3], 1.0)).unwrap();
        let b = g.input(Tensor::full(&[3, 2], 1.0)).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.shape(c), &[2, 2]);
        assert_eq!(g.value(c).data(), &[3.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_primitive() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::full(&[2, 3], 1.0)).unwrap();
        let b = g.input(Tensor::full(&[2, 2], 1.0)).unwrap();
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn conv_center_of_ones() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[1, 1, 4, 4], 1.0)).unwrap();
        let w = g.input(Tensor::full(&[1, 1, 3, 3], 1.0)).unwrap();
        let y = g.conv2d(x, w, None, 1, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        let d = g.value(y).data();
        assert_eq!(d[5], 9.0);
        assert_eq!(d[0], 4.0);
        assert_eq!(d[1], 6.0);
    }

    #[test]
    fn conv_stride_two_matches_naive() {
        let xs: Vec<f64> = (0..2 * 2 * 5 * 5).map(|v| ((v * 7) % 11) as f64 - 5.0).collect();
        let ws: Vec<f64> = (0..3 * 2 * 3 * 3).map(|v| ((v * 5) % 7) as f64 - 3.0).collect();
        let bs = [0.5, -1.0, 2.0];
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2, 2, 5, 5], &xs)).unwrap();
        let w = g.input(t(&[3, 2, 3, 3], &ws)).unwrap();
        let b = g.input(t(&[3], &bs)).unwrap();
        let y = g.conv2d(x, w, Some(b), 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 3, 3, 3]);
        let yd = g.value(y).data();
        for n in 0..2 {
            for o in 0..3 {
                for oy in 0..3 {
                    for ox in 0..3 {
                        let mut acc = bs[o];
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                        acc += xs[((n * 2 + c) * 5 + iy as usize) * 5 + ix as usize]
                                            * ws[((o * 2 + c) * 3 + ky) * 3 + kx];
                                    }
                                }
                            }
                        }
                        assert_eq!(yd[((n * 3 + o) * 3 + oy) * 3 + ox], acc);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[1, 2, 4, 4], 1.0)).unwrap();
        let w = g.input(Tensor::full(&[1, 3, 3, 3], 1.0)).unwrap();
        assert!(matches!(g.conv2d(x, w, None, 1, 1), Err(Error::Dimension { op: "conv2d", .. })));
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn max_pool_picks_window_max() {
        let mut g = Graph::<f64>::new();
        let x = g
            .input(t(&[1, 1, 2, 4], &[1.0, 5.0, -2.0, 0.0, 3.0, 2.0, -1.0, -3.0]))
            .unwrap();
        let y = g.max_pool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[5.0, 0.0]);
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut store = ParamStore::<f64>::new();
        store.push("w", t(&[4], &[0.3, -1.0, 2.0, 5.0]));
        let mut g = Graph::new();
        let w = g.param(&store, 0).unwrap();
        let l = g.sum(w).unwrap();
        let grads = g.backward(l).unwrap();
        store.load_grads(&grads);
        assert_eq!(store.get(0).grad().unwrap(), &[1.0; 4]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut store = ParamStore::<f64>::new();
        store.push("w", t(&[2], &[1.0, -2.0]));
        let mut g = Graph::new();
        let w = g.param(&store, 0).unwrap();
        let sq = g.mul(w, w).unwrap();
        let l = g.sum(sq).unwrap();
        store.load_grads(&g.backward(l).unwrap());
        assert_eq!(store.get(0).grad().unwrap(), &[2.0, -4.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut store = ParamStore::<f32>::new();
        store.push("used", Tensor::full(&[3], 2.0));
        store.push("unused", Tensor::full(&[2], 7.0));
        let mut g = Graph::new();
        let w = g.param(&store, 0).unwrap();
        let _ = g.param(&store, 1).unwrap();
        let l = g.sum(w).unwrap();
        store.load_grads(&g.backward(l).unwrap());
        assert_eq!(store.get(1).grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[2], 1.0)).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_rejects_inference_graph() {
        let mut g = Graph::<f32>::inference();
        let x = g.input(Tensor::full(&[1], 1.0)).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::full(&[1], -1.0)).unwrap();
        assert!(matches!(g.log(x), Err(Error::NonFinite("log"))));
    }

    #[test]
    fn softplus_is_stable() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![3], vec![-1000.0, 0.0, 1000.0]).unwrap()).unwrap();
        let y = g.softplus(x).unwrap();
        let d = g.value(y).data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - std::f32::consts::LN_2).abs() < 1e-7);
        assert_eq!(d[2], 1000.0);
    }

    #[test]
    fn layout_ops_round_trip() {
        let mut g = Graph::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|v| v as f64).collect();
        let x = g.input(t(&[2, 3, 2, 2], &data)).unwrap();
        let rows = g.nchw_to_rows(x).unwrap();
        assert_eq!(g.shape(rows), &[8, 3]);
        // row 5 = image 1, cell 1 -> channels at (1,c,1)
        assert_eq!(&g.value(rows).data()[15..18], &[13.0, 17.0, 21.0]);
        let sl = g.slice_cols(rows, 1, 3).unwrap();
        assert_eq!(g.shape(sl), &[8, 2]);
        let ga = g.gather_rows(sl, &[5, 0]).unwrap();
        assert_eq!(g.value(ga).data(), &[17.0, 21.0, 4.0, 8.0]);
    }
}
