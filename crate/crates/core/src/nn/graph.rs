//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built fresh for every forward pass. Ops append nodes; a
//! call to [`Graph::backward`] walks the tape in reverse. Graphs built with
//! [`Graph::inference`] record values only, and [`Graph::dry_run`] graphs
//! propagate shapes without touching data, which the complexity profiler
//! uses to count multiply-accumulates.

use std::collections::{BTreeMap, HashMap};

use super::conv::{
    blur_valid, blur_valid_adjoint, col2im, gaussian_kernel, gemm, im2col, transpose_out,
    ConvGeom,
};
use super::likelihood::{gaussian_bits_grad, logistic_bits_grad};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Train,
    Inference,
    Dry,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    Offset(Var),
    Broadcast(Var),
    LeakyRelu(Var, f32),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Pow(Var, f32),
    Softmax(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Crop(Var),
    ChannelAffine { x: Var, scale: Var, bias: Var },
    AvgPool(Var, usize),
    Upsample(Var, usize),
    Warp { src: Var, flow: Var },
    StraightThrough(Var),
    Clamp { x: Var, lo: f32, hi: f32 },
    GaussianBits { v: Var, mu: Var, sigma: Var, mask: Option<Var> },
    LogisticBits { v: Var, loc: Var, scale: Var },
    SumAll(Var),
    MeanAll(Var),
    MeanSpatial(Var),
    Mse(Var, Var),
    Blur(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gaussian window used by SSIM-style statistics: 11 taps, sigma 1.5.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    params: HashMap<ParamId, Var>,
    scope: Vec<String>,
    macs: BTreeMap<String, u64>,
    blur_kernel: Vec<f32>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    fn with_mode(mode: Mode) -> Self {
        Graph {
            nodes: Vec::new(),
            mode,
            params: HashMap::new(),
            scope: Vec::new(),
            macs: BTreeMap::new(),
            blur_kernel: gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
                .into_iter()
                .map(|v| v as f32)
                .collect(),
        }
    }

    /// Graph that records everything needed for [`Graph::backward`].
    pub fn new() -> Self {
        Self::with_mode(Mode::Train)
    }

    /// Value-only graph; parameters are treated as constants.
    pub fn inference() -> Self {
        Self::with_mode(Mode::Inference)
    }

    /// Shape-only graph. Values are empty; only shapes and MACs are tracked.
    pub fn dry_run() -> Self {
        Self::with_mode(Mode::Dry)
    }

    pub fn is_training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn is_dry(&self) -> bool {
        self.mode == Mode::Dry
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---- scopes and MAC accounting ------------------------------------

    /// Runs `f` with `name` pushed onto the MAC-accounting scope.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Graph) -> R) -> R {
        self.scope.push(name.to_string());
        let r = f(self);
        self.scope.pop();
        r
    }

    fn record_macs(&mut self, macs: u64) {
        let key = if self.scope.is_empty() {
            String::from("(root)")
        } else {
            self.scope.join(".")
        };
        *self.macs.entry(key).or_insert(0) += macs;
    }

    /// Multiply-accumulates per scope path, accumulated since construction.
    pub fn macs(&self) -> &BTreeMap<String, u64> {
        &self.macs
    }

    pub fn total_macs(&self) -> u64 {
        self.macs.values().sum()
    }

    // ---- leaves --------------------------------------------------------

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        let needs_grad = needs_grad && self.mode == Mode::Train;
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        let value = if self.is_dry() {
            Tensor::empty(value.shape())
        } else {
            value
        };
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked, e.g. for gradient checks.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Shape-only placeholder for dry runs (zeros otherwise).
    pub fn placeholder(&mut self, shape: [usize; 4]) -> Var {
        if self.is_dry() {
            self.push(Tensor::empty(shape), Op::Leaf, false)
        } else {
            self.constant(Tensor::zeros(shape))
        }
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let value = if self.is_dry() {
            Tensor::empty(store.get(id).shape())
        } else {
            store.get(id).clone()
        };
        let v = self.push(value, Op::Param(id), store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).item() as f64
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Cuts the gradient path, keeping the value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.push(t, Op::Leaf, false)
    }

    fn dry_out(&mut self, shape: [usize; 4]) -> Option<Var> {
        if self.is_dry() {
            Some(self.push(Tensor::empty(shape), Op::Leaf, false))
        } else {
            None
        }
    }

    // ---- convolutions --------------------------------------------------

    /// 2-D convolution, `w: [co, ci, k, k]`, optional bias `[1, co, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let [n, ci, h, wd] = self.shape(x);
        let [co, wci, k, k2] = self.shape(w);
        assert_eq!(ci, wci, "conv2d channel mismatch");
        assert_eq!(k, k2);
        let g = ConvGeom::new(ci, h, wd, k, stride, pad);
        let out_shape = [n, co, g.oh, g.ow];
        self.record_macs((n * g.oh * g.ow * co * ci * k * k) as u64);
        if let Some(v) = self.dry_out(out_shape) {
            return v;
        }
        let mut out = Tensor::zeros(out_shape);
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let mut col = vec![0f32; g.rows() * g.cols()];
            let (in_per, out_per) = (ci * h * wd, co * g.cols());
            let od = out.data_mut();
            for i in 0..n {
                im2col(&xs[i * in_per..(i + 1) * in_per], &g, &mut col);
                gemm(
                    co,
                    g.rows(),
                    g.cols(),
                    ws,
                    false,
                    &col,
                    false,
                    0.0,
                    &mut od[i * out_per..(i + 1) * out_per],
                );
            }
            if let Some(b) = b {
                let bs = self.value(b).data();
                add_channel_bias(od, bs, n, co, g.cols());
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        self.push(out, Op::Conv { x, w, b, stride, pad }, ng)
    }

    /// Transposed convolution, `w: [ci, co, k, k]`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Var {
        let [n, ci, h, wd] = self.shape(x);
        let [wci, co, k, _] = self.shape(w);
        assert_eq!(ci, wci, "conv_transpose2d channel mismatch");
        let (oh, ow) = (transpose_out(h, k, stride, pad), transpose_out(wd, k, stride, pad));
        let g = ConvGeom::new(co, oh, ow, k, stride, pad);
        debug_assert_eq!((g.oh, g.ow), (h, wd));
        let out_shape = [n, co, oh, ow];
        // Counted on the output grid.
        self.record_macs((n * oh * ow * co * ci * k * k) as u64);
        if let Some(v) = self.dry_out(out_shape) {
            return v;
        }
        let mut out = Tensor::zeros(out_shape);
        {
            let xs = self.value(x).data();
            let ws = self.value(w).data();
            let mut col = vec![0f32; g.rows() * g.cols()];
            let (in_per, out_per) = (ci * h * wd, co * oh * ow);
            let od = out.data_mut();
            for i in 0..n {
                gemm(
                    g.rows(),
                    ci,
                    g.cols(),
                    ws,
                    true,
                    &xs[i * in_per..(i + 1) * in_per],
                    false,
                    0.0,
                    &mut col,
                );
                col2im(&col, &g, &mut od[i * out_per..(i + 1) * out_per]);
            }
            if let Some(b) = b {
                let bs = self.value(b).data();
                add_channel_bias(od, bs, n, co, oh * ow);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.needs(&deps);
        self.push(out, Op::ConvT { x, w, b, stride, pad }, ng)
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Var {
        let s = self.shape(a);
        assert_eq!(s, self.shape(b), "elementwise shape mismatch {op:?}");
        if let Some(v) = self.dry_out(s) {
            return v;
        }
        let out = self.value(a).zip_map(self.value(b), f);
        let ng = self.needs(&[a, b]);
        self.push(out, op, ng)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f32) -> f32, op: Op) -> Var {
        let s = self.shape(x);
        if let Some(v) = self.dry_out(s) {
            return v;
        }
        let out = self.value(x).map(f);
        let ng = self.needs(&[x]);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn add_scalar(&mut self, x: Var, k: f32) -> Var {
        self.unary(x, |v| v + k, Op::Offset(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        self.unary(
            x,
            |v| if v > 0.0 { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid32, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f32::exp, Op::Exp(x))
    }

    /// Natural log of `max(x, 1e-12)`.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(1e-12).ln(), Op::Ln(x))
    }

    /// `x^p` for non-negative `x`.
    pub fn pow(&mut self, x: Var, p: f32) -> Var {
        self.unary(x, |v| v.max(0.0).powf(p), Op::Pow(x, p))
    }

    /// `1 - x` convenience.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// Clamp with zero gradient outside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: f32, hi: f32) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp { x, lo, hi })
    }

    /// Applies `f` in the forward pass and the identity in the backward pass.
    pub fn straight_through(&mut self, x: Var, f: impl Fn(f32) -> f32) -> Var {
        self.unary(x, f, Op::StraightThrough(x))
    }

    /// Broadcasts `x` to `shape`; each axis of `x` must be 1 or match.
    pub fn broadcast(&mut self, x: Var, shape: [usize; 4]) -> Var {
        let s = self.shape(x);
        for i in 0..4 {
            assert!(s[i] == 1 || s[i] == shape[i], "cannot broadcast {s:?} to {shape:?}");
        }
        if s == shape {
            return x;
        }
        if let Some(v) = self.dry_out(shape) {
            return v;
        }
        let src = self.value(x);
        let mut out = Tensor::zeros(shape);
        {
            let od = out.data_mut();
            let mut i = 0;
            for n in 0..shape[0] {
                for c in 0..shape[1] {
                    for y in 0..shape[2] {
                        for xx in 0..shape[3] {
                            od[i] = src.at(
                                n.min(s[0] - 1),
                                c.min(s[1] - 1),
                                y.min(s[2] - 1),
                                xx.min(s[3] - 1),
                            );
                            i += 1;
                        }
                    }
                }
            }
        }
        let ng = self.needs(&[x]);
        self.push(out, Op::Broadcast(x), ng)
    }

    // ---- channel manipulation -----------------------------------------

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        if let Some(v) = self.dry_out(s) {
            return v;
        }
        let [n, c, h, w] = s;
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![0f32; src.len()];
        for i in 0..n {
            for p in 0..hw {
                let base = i * c * hw + p;
                let mx = (0..c).map(|k| src[base + k * hw]).fold(f32::MIN, f32::max);
                let mut sum = 0f32;
                for k in 0..c {
                    let e = (src[base + k * hw] - mx).exp();
                    out[base + k * hw] = e;
                    sum += e;
                }
                for k in 0..c {
                    out[base + k * hw] /= sum;
                }
            }
        }
        let ng = self.needs(&[x]);
        self.push(Tensor::from_vec(s, out), Op::Softmax(x), ng)
    }

    pub fn concat(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let [n, _, h, w] = self.shape(xs[0]);
        let mut c = 0;
        for &v in xs {
            let s = self.shape(v);
            assert!(s[0] == n && s[2] == h && s[3] == w, "concat shape mismatch");
            c += s[1];
        }
        let shape = [n, c, h, w];
        if let Some(v) = self.dry_out(shape) {
            return v;
        }
        let mut out = Vec::with_capacity(n * c * h * w);
        for i in 0..n {
            for &v in xs {
                let t = self.value(v);
                let per = t.c() * h * w;
                out.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
            }
        }
        let ng = self.needs(xs);
        self.push(Tensor::from_vec(shape, out), Op::Concat(xs.to_vec()), ng)
    }

    /// Channels `start..start + len`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let [n, c, h, w] = self.shape(x);
        assert!(start + len <= c, "narrow out of range");
        let shape = [n, len, h, w];
        if let Some(v) = self.dry_out(shape) {
            return v;
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * len * h * w);
        for i in 0..n {
            let off = (i * c + start) * h * w;
            out.extend_from_slice(&src[off..off + len * h * w]);
        }
        let ng = self.needs(&[x]);
        self.push(Tensor::from_vec(shape, out), Op::Narrow { x, start }, ng)
    }

    /// Top-left spatial crop to `h x w`.
    pub fn crop(&mut self, x: Var, h: usize, w: usize) -> Var {
        let [n, c, sh, sw] = self.shape(x);
        assert!(h <= sh && w <= sw, "crop larger than input");
        if (h, w) == (sh, sw) {
            return x;
        }
        let shape = [n, c, h, w];
        if let Some(v) = self.dry_out(shape) {
            return v;
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for y in 0..h {
                let off = (p * sh + y) * sw;
                out.extend_from_slice(&src[off..off + w]);
            }
        }
        let ng = self.needs(&[x]);
        self.push(Tensor::from_vec(shape, out), Op::Crop(x), ng)
    }

    /// `out[c] = scale[c] * x[c] + bias[c]` with `[1, C, 1, 1]` parameters.
    pub fn channel_affine(&mut self, x: Var, scale: Var, bias: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(self.shape(scale), [1, s[1], 1, 1], "affine scale shape");
        assert_eq!(self.shape(bias), [1, s[1], 1, 1], "affine bias shape");
        if let Some(v) = self.dry_out(s) {
            return v;
        }
        let hw = s[2] * s[3];
        let sc = self.value(scale).data();
        let bi = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for (i, chunk) in out.chunks_mut(hw).enumerate() {
            let c = i % s[1];
            chunk.iter_mut().for_each(|v| *v = *v * sc[c] + bi[c]);
        }
        let ng = self.needs(&[x, scale, bias]);
        self.push(
            Tensor::from_vec(s, out),
            Op::ChannelAffine { x, scale, bias },
            ng,
        )
    }

    // ---- resampling ----------------------------------------------------

    /// Mean over non-overlapping `f x f` blocks; input dims must divide.
    pub fn avg_pool(&mut self, x: Var, f: usize) -> Var {
        let [n, c, h, w] = self.shape(x);
        assert!(h % f == 0 && w % f == 0, "avg_pool: {h}x{w} not divisible by {f}");
        let shape = [n, c, h / f, w / f];
        if f == 1 {
            return x;
        }
        if let Some(v) = self.dry_out(shape) {
            return v;
        }
        let src = self.value(x).data();
        let (oh, ow) = (h / f, w / f);
        let inv = 1.0 / (f * f) as f32;
        let mut out = vec![0f32; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(p * oh + y / f) * ow + xx / f] += src[(p * h + y) * w + xx];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        let ng = self.needs(&[x]);
        self.push(Tensor::from_vec(shape, out), Op::AvgPool(x, f), ng)
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, f: usize) -> Var {
        let [n, c, h, w] = self.shape(x);
        let shape = [n, c, h * f, w * f];
        if f == 1 {
            return x;
        }
        if let Some(v) = self.dry_out(shape) {
            return v;
        }
        let src = self.value(x).data();
        let (oh, ow) = (h * f, w * f);
        let mut out = vec![0f32; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(p * oh + y) * ow + xx] = src[(p * h + y / f) * w + xx / f];
                }
            }
        }
        let ng = self.needs(&[x]);
        self.push(Tensor::from_vec(shape, out), Op::Upsample(x, f), ng)
    }

    /// Backward bilinear warp: `out(y, x) = src(y + dy, x + dx)` with sampling
    /// coordinates clamped to the image border. `flow` is `[N, 2, H, W]`
    /// holding `(dx, dy)`.
    pub fn warp(&mut self, src: Var, flow: Var) -> Var {
        let s = self.shape(src);
        let fs = self.shape(flow);
        assert_eq!(
            [fs[0], fs[1], fs[2], fs[3]],
            [s[0], 2, s[2], s[3]],
            "warp flow shape mismatch"
        );
        if let Some(v) = self.dry_out(s) {
            return v;
        }
        let [n, c, h, w] = s;
        let sd = self.value(src).data();
        let fd = self.value(flow).data();
        let mut out = vec![0f32; sd.len()];
        let hw = h * w;
        for i in 0..n {
            for y in 0..h {
                for x in 0..w {
                    let p = y * w + x;
                    let sm = bilinear_sample(fd[(i * 2) * hw + p], fd[(i * 2 + 1) * hw + p], x, y, w, h);
                    for ch in 0..c {
                        let plane = &sd[(i * c + ch) * hw..(i * c + ch + 1) * hw];
                        out[(i * c + ch) * hw + p] = sm.interpolate(plane, w);
                    }
                }
            }
        }
        let ng = self.needs(&[src, flow]);
        self.push(Tensor::from_vec(s, out), Op::Warp { src, flow }, ng)
    }

    // ---- reductions and losses ------------------------------------------

    fn scalar_out(&mut self, value: f64, op: Op, deps: &[Var]) -> Var {
        if let Some(v) = self.dry_out([1, 1, 1, 1]) {
            return v;
        }
        let ng = self.needs(deps);
        self.push(Tensor::scalar(value as f32), op, ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = if self.is_dry() { 0.0 } else { self.value(x).sum() };
        self.scalar_out(v, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let v = if self.is_dry() { 0.0 } else { self.value(x).mean() };
        self.scalar_out(v, Op::MeanAll(x), &[x])
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C, 1, 1]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let shape = [n, c, 1, 1];
        if let Some(v) = self.dry_out(shape) {
            return v;
        }
        let hw = h * w;
        let out: Vec<f32> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|ch| (ch.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let ng = self.needs(&[x]);
        self.push(Tensor::from_vec(shape, out), Op::MeanSpatial(x), ng)
    }

    /// Mean squared error between two equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shape mismatch");
        let v = if self.is_dry() {
            0.0
        } else {
            let (x, y) = (self.value(a).data(), self.value(b).data());
            x.iter()
                .zip(y)
                .map(|(&p, &q)| {
                    let d = (p - q) as f64;
                    d * d
                })
                .sum::<f64>()
                / x.len() as f64
        };
        self.scalar_out(v, Op::Mse(a, b), &[a, b])
    }

    /// Total `-log2` likelihood of `v` under per-sample discretised gaussians,
    /// counting only positions where `mask` is 1 (weighted by `mask` in
    /// general, so straight-through masks receive gradients).
    pub fn gaussian_bits(&mut self, v: Var, mu: Var, sigma: Var, mask: Option<Var>) -> Var {
        let s = self.shape(v);
        assert_eq!(s, self.shape(mu));
        assert_eq!(s, self.shape(sigma));
        if let Some(m) = mask {
            assert_eq!(s, self.shape(m));
        }
        let total = if self.is_dry() {
            0.0
        } else {
            let (vd, md, sd) = (
                self.value(v).data(),
                self.value(mu).data(),
                self.value(sigma).data(),
            );
            let mk = mask.map(|m| self.value(m).data());
            let mut total = 0f64;
            for i in 0..vd.len() {
                let w = mk.map_or(1.0, |m| m[i] as f64);
                if w != 0.0 {
                    let (b, _, _) = gaussian_bits_grad((vd[i] - md[i]) as f64, sd[i] as f64);
                    total += w * b;
                }
            }
            total
        };
        let mut deps = vec![v, mu, sigma];
        deps.extend(mask);
        self.scalar_out(total, Op::GaussianBits { v, mu, sigma, mask }, &deps)
    }

    /// Total `-log2` likelihood under per-sample discretised logistics.
    pub fn logistic_bits(&mut self, v: Var, loc: Var, scale: Var) -> Var {
        let s = self.shape(v);
        assert_eq!(s, self.shape(loc));
        assert_eq!(s, self.shape(scale));
        let total = if self.is_dry() {
            0.0
        } else {
            let (vd, ld, sd) = (
                self.value(v).data(),
                self.value(loc).data(),
                self.value(scale).data(),
            );
            (0..vd.len())
                .map(|i| logistic_bits_grad((vd[i] - ld[i]) as f64, sd[i] as f64).0)
                .sum()
        };
        self.scalar_out(total, Op::LogisticBits { v, loc, scale }, &[v, loc, scale])
    }

    /// Per-plane 11x11 gaussian filtering (sigma 1.5), "valid" borders.
    pub fn blur(&mut self, x: Var) -> Var {
        let [n, c, h, w] = self.shape(x);
        let k = SSIM_WINDOW;
        assert!(h >= k && w >= k, "blur input smaller than window");
        let shape = [n, c, h + 1 - k, w + 1 - k];
        if let Some(v) = self.dry_out(shape) {
            return v;
        }
        let out = blur_valid(self.value(x).data(), n * c, h, w, &self.blur_kernel);
        let ng = self.needs(&[x]);
        self.push(Tensor::from_vec(shape, out), Op::Blur(x), ng)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), [1, 1, 1, 1], "backward needs a scalar");
        assert!(!self.is_dry(), "backward on dry-run graph");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].needs_grad {
            return Gradients { grads, params: Vec::new() };
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &gout, &mut grads);
            // Interior gradients are dropped as soon as they are consumed.
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(gout);
            }
        }
        let mut params: Vec<(ParamId, Tensor)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, &grads[i]) {
                params.push((*id, g.clone()));
            }
        }
        params.sort_by_key(|(id, _)| *id);
        Gradients { grads, params }
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let acc = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b, stride, pad } => {
                let xs = val(*x);
                let ws = val(*w);
                let [n, ci, h, wd] = xs.shape();
                let [co, _, k, _] = ws.shape();
                let geo = ConvGeom::new(ci, h, wd, k, *stride, *pad);
                let mut col = vec![0f32; geo.rows() * geo.cols()];
                let mut dw = Tensor::zeros(ws.shape());
                let mut dx = Tensor::zeros(xs.shape());
                let (in_per, out_per) = (ci * h * wd, co * geo.cols());
                let gd = g.data();
                for i in 0..n {
                    let gy = &gd[i * out_per..(i + 1) * out_per];
                    if wants(*w) {
                        im2col(&xs.data()[i * in_per..(i + 1) * in_per], &geo, &mut col);
                        gemm(co, geo.cols(), geo.rows(), gy, false, &col, true, 1.0, dw.data_mut());
                    }
                    if wants(*x) {
                        gemm(geo.rows(), co, geo.cols(), ws.data(), true, gy, false, 0.0, &mut col);
                        col2im(&col, &geo, &mut dx.data_mut()[i * in_per..(i + 1) * in_per]);
                    }
                }
                acc(*x, dx, grads);
                acc(*w, dw, grads);
                if let Some(b) = b {
                    acc(*b, channel_sums(g), grads);
                }
            }
            Op::ConvT { x, w, b, stride, pad } => {
                let xs = val(*x);
                let ws = val(*w);
                let [n, ci, h, wd] = xs.shape();
                let [_, co, k, _] = ws.shape();
                let [_, _, oh, ow] = g.shape();
                let geo = ConvGeom::new(co, oh, ow, k, *stride, *pad);
                let mut col = vec![0f32; geo.rows() * geo.cols()];
                let mut dw = Tensor::zeros(ws.shape());
                let mut dx = Tensor::zeros(xs.shape());
                let (in_per, out_per) = (ci * h * wd, co * oh * ow);
                for i in 0..n {
                    im2col(&g.data()[i * out_per..(i + 1) * out_per], &geo, &mut col);
                    if wants(*x) {
                        gemm(
                            ci,
                            geo.rows(),
                            geo.cols(),
                            ws.data(),
                            false,
                            &col,
                            false,
                            0.0,
                            &mut dx.data_mut()[i * in_per..(i + 1) * in_per],
                        );
                    }
                    if wants(*w) {
                        gemm(
                            ci,
                            geo.cols(),
                            geo.rows(),
                            &xs.data()[i * in_per..(i + 1) * in_per],
                            false,
                            &col,
                            true,
                            1.0,
                            dw.data_mut(),
                        );
                    }
                }
                acc(*x, dx, grads);
                acc(*w, dw, grads);
                if let Some(b) = b {
                    acc(*b, channel_sums(g), grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.map(|v| -v), grads);
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y), grads);
                }
                if wants(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y), grads);
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if wants(*a) {
                    acc(*a, g.zip_map(bv, |x, y| x / y), grads);
                }
                if wants(*b) {
                    let av = val(*a);
                    let mut t = g.zip_map(av, |x, y| x * y);
                    t = t.zip_map(bv, |x, y| -x / (y * y));
                    acc(*b, t, grads);
                }
            }
            Op::Scale(x, k) => acc(*x, g.map(|v| v * k), grads),
            Op::Offset(x) | Op::StraightThrough(x) => acc(*x, g.clone(), grads),
            Op::Broadcast(x) => {
                let s = val(*x).shape();
                let mut out = Tensor::zeros(s);
                let gs = g.shape();
                let mut i = 0;
                let gd = g.data();
                for n in 0..gs[0] {
                    for c in 0..gs[1] {
                        for y in 0..gs[2] {
                            for xx in 0..gs[3] {
                                let j = out.index(
                                    n.min(s[0] - 1),
                                    c.min(s[1] - 1),
                                    y.min(s[2] - 1),
                                    xx.min(s[3] - 1),
                                );
                                out.data_mut()[j] += gd[i];
                                i += 1;
                            }
                        }
                    }
                }
                acc(*x, out, grads);
            }
            Op::LeakyRelu(x, slope) => {
                let t = g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { gv * slope });
                acc(*x, t, grads);
            }
            Op::Sigmoid(x) => {
                let t = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y));
                acc(*x, t, grads);
            }
            Op::Exp(x) => acc(*x, g.zip_map(&node.value, |gv, y| gv * y), grads),
            Op::Ln(x) => acc(*x, g.zip_map(val(*x), |gv, xv| gv / xv.max(1e-12)), grads),
            Op::Pow(x, p) => {
                let t = g.zip_map(val(*x), |gv, xv| gv * p * xv.max(1e-6).powf(p - 1.0));
                acc(*x, t, grads);
            }
            Op::Clamp { x, lo, hi } => {
                let t = g.zip_map(val(*x), |gv, xv| if xv >= *lo && xv <= *hi { gv } else { 0.0 });
                acc(*x, t, grads);
            }
            Op::Softmax(x) => {
                let [n, c, h, w] = g.shape();
                let hw = h * w;
                let y = node.value.data();
                let gd = g.data();
                let mut out = vec![0f32; gd.len()];
                for i in 0..n {
                    for p in 0..hw {
                        let base = i * c * hw + p;
                        let dot: f32 = (0..c).map(|k| gd[base + k * hw] * y[base + k * hw]).sum();
                        for k in 0..c {
                            let j = base + k * hw;
                            out[j] = y[j] * (gd[j] - dot);
                        }
                    }
                }
                acc(*x, Tensor::from_vec(g.shape(), out), grads);
            }
            Op::Concat(xs) => {
                let [n, c, h, w] = g.shape();
                let hw = h * w;
                let mut start = 0;
                for &v in xs {
                    let vc = val(v).c();
                    if wants(v) {
                        let mut out = Vec::with_capacity(n * vc * hw);
                        for i in 0..n {
                            let off = (i * c + start) * hw;
                            out.extend_from_slice(&g.data()[off..off + vc * hw]);
                        }
                        acc(v, Tensor::from_vec([n, vc, h, w], out), grads);
                    }
                    start += vc;
                }
            }
            Op::Narrow { x, start } => {
                let s = val(*x).shape();
                let [n, len, h, w] = g.shape();
                let mut out = Tensor::zeros(s);
                for i in 0..n {
                    let off = (i * s[1] + start) * h * w;
                    out.data_mut()[off..off + len * h * w]
                        .copy_from_slice(&g.data()[i * len * h * w..(i + 1) * len * h * w]);
                }
                acc(*x, out, grads);
            }
            Op::Crop(x) => {
                let s = val(*x).shape();
                let [n, c, h, w] = g.shape();
                let mut out = Tensor::zeros(s);
                for p in 0..n * c {
                    for y in 0..h {
                        let off = (p * s[2] + y) * s[3];
                        out.data_mut()[off..off + w]
                            .copy_from_slice(&g.data()[(p * h + y) * w..(p * h + y + 1) * w]);
                    }
                }
                acc(*x, out, grads);
            }
            Op::ChannelAffine { x, scale, bias } => {
                let [_, c, h, w] = g.shape();
                let hw = h * w;
                let sc = val(*scale).data();
                let xs = val(*x).data();
                let mut dx = vec![0f32; g.numel()];
                let mut ds = vec![0f64; c];
                let mut db = vec![0f64; c];
                for (i, gch) in g.data().chunks(hw).enumerate() {
                    let ch = i % c;
                    let xch = &xs[i * hw..(i + 1) * hw];
                    for (j, &gv) in gch.iter().enumerate() {
                        dx[i * hw + j] = gv * sc[ch];
                        ds[ch] += (gv * xch[j]) as f64;
                        db[ch] += gv as f64;
                    }
                }
                acc(*x, Tensor::from_vec(g.shape(), dx), grads);
                let to_t = |v: Vec<f64>| Tensor::from_vec([1, c, 1, 1], v.into_iter().map(|x| x as f32).collect());
                acc(*scale, to_t(ds), grads);
                acc(*bias, to_t(db), grads);
            }
            Op::AvgPool(x, f) => {
                let s = val(*x).shape();
                let [_, _, oh, ow] = g.shape();
                let inv = 1.0 / (f * f) as f32;
                let mut out = Tensor::zeros(s);
                let od = out.data_mut();
                for p in 0..s[0] * s[1] {
                    for y in 0..s[2] {
                        for xx in 0..s[3] {
                            od[(p * s[2] + y) * s[3] + xx] =
                                g.data()[(p * oh + y / f) * ow + xx / f] * inv;
                        }
                    }
                }
                acc(*x, out, grads);
            }
            Op::Upsample(x, f) => {
                let s = val(*x).shape();
                let [_, _, oh, ow] = g.shape();
                let mut out = Tensor::zeros(s);
                let od = out.data_mut();
                for p in 0..s[0] * s[1] {
                    for y in 0..oh {
                        for xx in 0..ow {
                            od[(p * s[2] + y / f) * s[3] + xx / f] += g.data()[(p * oh + y) * ow + xx];
                        }
                    }
                }
                acc(*x, out, grads);
            }
            Op::Warp { src, flow } => {
                let sv = val(*src);
                let fv = val(*flow);
                let [n, c, h, w] = sv.shape();
                let hw = h * w;
                let mut dsrc = Tensor::zeros(sv.shape());
                let mut dflow = Tensor::zeros(fv.shape());
                let (sd, fd, gd) = (sv.data(), fv.data(), g.data());
                for i in 0..n {
                    for y in 0..h {
                        for x in 0..w {
                            let p = y * w + x;
                            let sm = bilinear_sample(fd[(i * 2) * hw + p], fd[(i * 2 + 1) * hw + p], x, y, w, h);
                            let (mut gx, mut gy) = (0f32, 0f32);
                            for ch in 0..c {
                                let pi = (i * c + ch) * hw;
                                let gv = gd[pi + p];
                                sm.scatter(&mut dsrc.data_mut()[pi..pi + hw], w, gv);
                                let (ddx, ddy) = sm.coord_grad(&sd[pi..pi + hw], w);
                                gx += gv * ddx;
                                gy += gv * ddy;
                            }
                            dflow.data_mut()[(i * 2) * hw + p] = gx;
                            dflow.data_mut()[(i * 2 + 1) * hw + p] = gy;
                        }
                    }
                }
                if wants(*src) {
                    acc(*src, dsrc, grads);
                }
                acc(*flow, dflow, grads);
            }
            Op::GaussianBits { v, mu, sigma, mask } => {
                let gs = g.item() as f64;
                let (vd, md, sd) = (val(*v).data(), val(*mu).data(), val(*sigma).data());
                let mk = mask.map(|m| val(m).data());
                let len = vd.len();
                let (mut dv, mut ds, mut dm) = (vec![0f32; len], vec![0f32; len], vec![0f32; len]);
                for i in 0..len {
                    let (b, gd, gsig) = gaussian_bits_grad((vd[i] - md[i]) as f64, sd[i] as f64);
                    let wgt = mk.map_or(1.0, |m| m[i] as f64);
                    dv[i] = (gs * wgt * gd) as f32;
                    ds[i] = (gs * wgt * gsig) as f32;
                    dm[i] = (gs * b) as f32;
                }
                let shape = val(*v).shape();
                acc(*mu, Tensor::from_vec(shape, dv.iter().map(|x| -x).collect()), grads);
                acc(*v, Tensor::from_vec(shape, dv), grads);
                acc(*sigma, Tensor::from_vec(shape, ds), grads);
                if let Some(m) = mask {
                    acc(*m, Tensor::from_vec(shape, dm), grads);
                }
            }
            Op::LogisticBits { v, loc, scale } => {
                let gs = g.item() as f64;
                let (vd, ld, sd) = (val(*v).data(), val(*loc).data(), val(*scale).data());
                let len = vd.len();
                let (mut dv, mut ds) = (vec![0f32; len], vec![0f32; len]);
                for i in 0..len {
                    let (_, gd, gsc) = logistic_bits_grad((vd[i] - ld[i]) as f64, sd[i] as f64);
                    dv[i] = (gs * gd) as f32;
                    ds[i] = (gs * gsc) as f32;
                }
                let shape = val(*v).shape();
                acc(*loc, Tensor::from_vec(shape, dv.iter().map(|x| -x).collect()), grads);
                acc(*v, Tensor::from_vec(shape, dv), grads);
                acc(*scale, Tensor::from_vec(shape, ds), grads);
            }
            Op::SumAll(x) => {
                let s = val(*x).shape();
                acc(*x, Tensor::full(s, g.item()), grads);
            }
            Op::MeanAll(x) => {
                let t = val(*x);
                acc(*x, Tensor::full(t.shape(), g.item() / t.numel() as f32), grads);
            }
            Op::MeanSpatial(x) => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                let mut out = Tensor::zeros(s);
                for (i, ch) in out.data_mut().chunks_mut(hw).enumerate() {
                    ch.fill(g.data()[i] / hw as f32);
                }
                acc(*x, out, grads);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let k = 2.0 * g.item() / av.numel() as f32;
                let d = av.zip_map(bv, |x, y| k * (x - y));
                if wants(*b) {
                    acc(*b, d.map(|v| -v), grads);
                }
                acc(*a, d, grads);
            }
            Op::Blur(x) => {
                let [n, c, h, w] = val(*x).shape();
                let out = blur_valid_adjoint(g.data(), n * c, h, w, &self.blur_kernel);
                acc(*x, Tensor::from_vec([n, c, h, w], out), grads);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Parameter gradients sorted by id.
    pub fn params(&self) -> &[(ParamId, Tensor)] {
        &self.params
    }

    pub fn into_params(self) -> Vec<(ParamId, Tensor)> {
        self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}

fn sigmoid32(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn add_channel_bias(out: &mut [f32], bias: &[f32], n: usize, c: usize, hw: usize) {
    for i in 0..n {
        for (ch, &bv) in bias.iter().enumerate().take(c) {
            let off = (i * c + ch) * hw;
            out[off..off + hw].iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn channel_sums(g: &Tensor) -> Tensor {
    let [_, c, h, w] = g.shape();
    let mut out = vec![0f64; c];
    for (i, ch) in g.data().chunks(h * w).enumerate() {
        out[i % c] += ch.iter().map(|&v| v as f64).sum::<f64>();
    }
    Tensor::from_vec([1, c, 1, 1], out.into_iter().map(|v| v as f32).collect())
}

/// Bilinear sampling stencil for one output pixel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    wx: f32,
    wy: f32,
    /// Whether the coordinate was strictly inside the clamp range (gradient
    /// flows to the flow field only then).
    free_x: bool,
    free_y: bool,
}

pub(crate) fn bilinear_sample(dx: f32, dy: f32, x: usize, y: usize, w: usize, h: usize) -> Stencil {
    let (maxx, maxy) = ((w - 1) as f32, (h - 1) as f32);
    let sx_raw = x as f32 + dx;
    let sy_raw = y as f32 + dy;
    let sx = sx_raw.clamp(0.0, maxx);
    let sy = sy_raw.clamp(0.0, maxy);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    Stencil {
        x0,
        y0,
        x1: (x0 + 1).min(w - 1),
        y1: (y0 + 1).min(h - 1),
        wx: sx - x0 as f32,
        wy: sy - y0 as f32,
        free_x: sx_raw > 0.0 && sx_raw < maxx,
        free_y: sy_raw > 0.0 && sy_raw < maxy,
    }
}

impl Stencil {
    #[inline]
    pub(crate) fn interpolate(&self, plane: &[f32], w: usize) -> f32 {
        let a = plane[self.y0 * w + self.x0];
        let b = plane[self.y0 * w + self.x1];
        let c = plane[self.y1 * w + self.x0];
        let d = plane[self.y1 * w + self.x1];
        (1.0 - self.wy) * ((1.0 - self.wx) * a + self.wx * b)
            + self.wy * ((1.0 - self.wx) * c + self.wx * d)
    }

    #[inline]
    fn scatter(&self, plane: &mut [f32], w: usize, g: f32) {
        plane[self.y0 * w + self.x0] += g * (1.0 - self.wy) * (1.0 - self.wx);
        plane[self.y0 * w + self.x1] += g * (1.0 - self.wy) * self.wx;
        plane[self.y1 * w + self.x0] += g * self.wy * (1.0 - self.wx);
        plane[self.y1 * w + self.x1] += g * self.wy * self.wx;
    }

    #[inline]
    fn coord_grad(&self, plane: &[f32], w: usize) -> (f32, f32) {
        let a = plane[self.y0 * w + self.x0];
        let b = plane[self.y0 * w + self.x1];
        let c = plane[self.y1 * w + self.x0];
        let d = plane[self.y1 * w + self.x1];
        let gx = if self.free_x {
            (1.0 - self.wy) * (b - a) + self.wy * (d - c)
        } else {
            0.0
        };
        let gy = if self.free_y {
            (1.0 - self.wx) * (c - a) + self.wx * (d - b)
        } else {
            0.0
        };
        (gx, gy)
    }
}
