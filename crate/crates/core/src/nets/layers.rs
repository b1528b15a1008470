use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seed;

/// One entry of a [`NetworkSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Cross-correlation with zero padding; `kernel` is `[h, w]`.
    Conv {
        kernel: [usize; 2],
        channels: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// Non-overlapping `[h, w]` windows; trailing rows/cols that do not fill a
    /// window are dropped.
    MaxPool { size: [usize; 2] },
    /// `relu(x + conv3(relu(conv3(x))))` with both convolutions keeping the
    /// channel count.
    Residual { channels: usize },
    GlobalAvgPool,
    Flatten,
    Fc { outputs: usize },
}

/// Activation shape between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Shape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Spatial { c, h, w } => c * h * w,
            Shape::Flat(n) => n,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dims(&self) -> Vec<usize> {
        match *self {
            Shape::Spatial { c, h, w } => vec![c, h, w],
            Shape::Flat(n) => vec![n],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub name: String,
    /// `[channels, rows, cols]`.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

fn conv(k: usize, channels: usize, stride: usize) -> LayerSpec {
    LayerSpec::Conv {
        kernel: [k, k],
        channels,
        stride,
        padding: k / 2,
    }
}

fn pool2() -> LayerSpec {
    LayerSpec::MaxPool { size: [2, 2] }
}

impl NetworkSpec {
    /// Reduced facial regressor for 112×224 grayscale crops.
    pub fn facial_desk(d_exp: usize, seed: u64) -> Self {
        use LayerSpec::*;
        Self {
            name: "facial-desk".into(),
            input: [1, 112, 224],
            layers: vec![
                conv(5, 4, 2),
                Relu,
                pool2(),
                conv(3, 8, 1),
                Relu,
                pool2(),
                Residual { channels: 8 },
                pool2(),
                Flatten,
                Fc { outputs: d_exp },
            ],
            seed,
        }
    }

    /// ResNet-18 layout (stem, four stages of two residual blocks, global
    /// pooling, linear head); strided 3×3 convolutions change width between
    /// stages.
    pub fn facial_paper(d_exp: usize, channels: usize, seed: u64) -> Self {
        use LayerSpec::*;
        let mut layers = vec![conv(7, 64, 2), Relu, pool2()];
        for (stage, width) in [64, 128, 256, 512].into_iter().enumerate() {
            if stage > 0 {
                layers.extend([conv(3, width, 2), Relu]);
            }
            layers.extend([Residual { channels: width }, Residual { channels: width }]);
        }
        layers.extend([GlobalAvgPool, Fc { outputs: d_exp }]);
        Self {
            name: "facial-paper".into(),
            input: [channels, 112, 224],
            layers,
            seed,
        }
    }

    /// Eye regressor with the given widths for its 11×11, 5×5 and 5×5 layers.
    pub fn eye(widths: [usize; 3], seed: u64) -> Self {
        use LayerSpec::*;
        Self {
            name: format!("eye-{}-{}-{}", widths[0], widths[1], widths[2]),
            input: [1, 87, 135],
            layers: vec![
                conv(11, widths[0], 2),
                Relu,
                pool2(),
                conv(5, widths[1], 1),
                Relu,
                pool2(),
                conv(5, widths[2], 1),
                Relu,
                pool2(),
                Flatten,
                Fc { outputs: 5 },
            ],
            seed,
        }
    }

    pub fn eye_desk(seed: u64) -> Self {
        Self::eye([4, 8, 8], seed)
    }

    pub fn eye_paper(seed: u64) -> Self {
        Self::eye([16, 32, 32], seed)
    }

    /// Activation shapes: entry `i` is the input of layer `i`, the last entry
    /// the network output.
    pub fn shapes(&self) -> Result<Vec<Shape>> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInput("network input dimensions must be positive".into()));
        }
        let mut cur = Shape::Spatial { c, h, w };
        let mut out = vec![cur];
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::InvalidInput(format!("layer {i} ({layer:?}): {msg}"));
            cur = match (*layer, cur) {
                (
                    LayerSpec::Conv {
                        kernel: [kh, kw],
                        channels,
                        stride,
                        padding,
                    },
                    Shape::Spatial { h, w, .. },
                ) => {
                    if kh == 0 || kw == 0 || channels == 0 || stride == 0 {
                        return Err(bad("kernel, channels and stride must be positive".into()));
                    }
                    if h + 2 * padding < kh || w + 2 * padding < kw {
                        return Err(bad(format!("kernel larger than padded input {h}×{w}")));
                    }
                    Shape::Spatial {
                        c: channels,
                        h: (h + 2 * padding - kh) / stride + 1,
                        w: (w + 2 * padding - kw) / stride + 1,
                    }
                }
                (LayerSpec::Relu, s) => s,
                (LayerSpec::MaxPool { size: [ph, pw] }, Shape::Spatial { c, h, w }) => {
                    if ph == 0 || pw == 0 || h < ph || w < pw {
                        return Err(bad(format!("pool window does not fit {h}×{w}")));
                    }
                    Shape::Spatial { c, h: h / ph, w: w / pw }
                }
                (LayerSpec::Residual { channels }, s @ Shape::Spatial { c, .. }) => {
                    if channels != c {
                        return Err(bad(format!("residual block expects {channels} channels, input has {c}")));
                    }
                    s
                }
                (LayerSpec::GlobalAvgPool, Shape::Spatial { c, .. }) => Shape::Flat(c),
                (LayerSpec::Flatten, s) => Shape::Flat(s.len()),
                (LayerSpec::Fc { outputs }, Shape::Flat(_)) => {
                    if outputs == 0 {
                        return Err(bad("zero outputs".into()));
                    }
                    Shape::Flat(outputs)
                }
                (_, s) => return Err(bad(format!("incompatible input shape {s:?}"))),
            };
            out.push(cur);
        }
        Ok(out)
    }

    pub fn output_dim(&self) -> Result<usize> {
        Ok(self.shapes()?.last().map_or(0, Shape::len))
    }

    /// Trainable parameter count of each layer.
    pub fn param_counts(&self) -> Result<Vec<usize>> {
        Ok(build_ops(self)?.iter().map(Op::n_params).collect())
    }
}

/// Parameter layout of one layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    ic: usize,
    h: usize,
    w: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.ic * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.oh * self.ow
    }

    fn n_weights(&self) -> usize {
        self.oc * self.k()
    }

    fn n_params(&self) -> usize {
        self.n_weights() + self.oc
    }

    fn same3(c: usize, h: usize, w: usize) -> Self {
        Self {
            ic: c,
            h,
            w,
            oc: c,
            kh: 3,
            kw: 3,
            stride: 1,
            pad: 1,
            oh: h,
            ow: w,
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.p();
        for c in 0..self.ic {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &mut cols[((c * self.kh + ky) * self.kw + kx) * p..][..p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        if iy < 0 || iy >= self.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *d = if ix < 0 || ix >= self.w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.p();
        for c in 0..self.ic {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = &cols[((c * self.kh + ky) * self.kw + kx) * p..][..p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// `out = W · im2col(x) + b` for one sample.
    fn forward(&self, params: &[f64], x: &[f64], out: &mut [f64], cols: &mut Vec<f64>) {
        let (k, p) = (self.k(), self.p());
        cols.resize(k * p, 0.0);
        self.im2col(x, cols);
        let (w, b) = params.split_at(self.n_weights());
        for (o, row) in out.chunks_exact_mut(p).enumerate() {
            row.fill(b[o]);
        }
        // SAFETY: slices cover m·k, k·n and m·n elements with the given strides.
        unsafe {
            matrixmultiply::dgemm(
                self.oc,
                k,
                p,
                1.0,
                w.as_ptr(),
                k as isize,
                1,
                cols.as_ptr(),
                p as isize,
                1,
                1.0,
                out.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    }

    /// Accumulates parameter gradients into `grads` and writes the input
    /// gradient to `dx`.
    fn backward(&self, params: &[f64], x: &[f64], dout: &[f64], grads: &mut [f64], dx: &mut [f64], cols: &mut Vec<f64>) {
        let (k, p) = (self.k(), self.p());
        cols.resize(k * p, 0.0);
        self.im2col(x, cols);
        let (gw, gb) = grads.split_at_mut(self.n_weights());
        for (o, row) in dout.chunks_exact(p).enumerate() {
            gb[o] += row.iter().sum::<f64>();
        }
        let w = &params[..self.n_weights()];
        // SAFETY: as in `forward`; cols is read as its transpose (p × k).
        unsafe {
            matrixmultiply::dgemm(
                self.oc,
                p,
                k,
                1.0,
                dout.as_ptr(),
                p as isize,
                1,
                cols.as_ptr(),
                1,
                p as isize,
                1.0,
                gw.as_mut_ptr(),
                k as isize,
                1,
            );
            // dcols = Wᵀ · dout, reusing the column buffer
            matrixmultiply::dgemm(
                k,
                self.oc,
                p,
                1.0,
                w.as_ptr(),
                1,
                k as isize,
                dout.as_ptr(),
                p as isize,
                1,
                0.0,
                cols.as_mut_ptr(),
                p as isize,
                1,
            );
        }
        dx.fill(0.0);
        self.col2im(cols, dx);
    }
}

#[derive(Debug, Clone)]
enum Op {
    Conv(ConvGeom),
    Relu,
    MaxPool { c: usize, h: usize, w: usize, ph: usize, pw: usize },
    Residual(ConvGeom),
    GlobalAvgPool { c: usize, hw: usize },
    Flatten,
    Fc { inputs: usize, outputs: usize },
}

impl Op {
    fn n_params(&self) -> usize {
        match self {
            Op::Conv(g) => g.n_params(),
            Op::Residual(g) => 2 * g.n_params(),
            Op::Fc { inputs, outputs } => outputs * (inputs + 1),
            _ => 0,
        }
    }
}

/// Per-layer data kept by a training forward pass.
#[derive(Debug)]
enum Cache {
    Input(Tensor),
    Relu(Tensor),
    MaxPool(Vec<usize>),
    Residual { x: Tensor, h1: Tensor, sum: Tensor },
    None,
}

/// Activations recorded by [`Network::forward_train`].
#[derive(Debug)]
pub struct ForwardCache {
    caches: Vec<Cache>,
    batch: usize,
}

/// A [`NetworkSpec`] with its parameters stored in one flat vector, layer by
/// layer (weights row-major by output, then biases).
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    params: Vec<f64>,
}

impl Network {
    /// He-normal weights (unit-gain for the final linear layer), zero biases,
    /// drawn from the `NetworkSpec` seed.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let ops = build_ops(&spec)?;
        let n: usize = ops.iter().map(Op::n_params).sum();
        let mut params = vec![0.0; n];
        let mut off = 0;
        let last_fc = ops.iter().rposition(|o| matches!(o, Op::Fc { .. }));
        for (i, op) in ops.iter().enumerate() {
            let mut rng = seed::rng(spec.seed, &[seed::STREAM_INIT, i as u64]);
            let mut fill = |slice: &mut [f64], std: f64| {
                for v in slice {
                    *v = std * rng.sample::<f64, _>(StandardNormal);
                }
            };
            match op {
                Op::Conv(g) => {
                    fill(&mut params[off..off + g.n_weights()], (2.0 / g.k() as f64).sqrt());
                }
                Op::Residual(g) => {
                    let std = (2.0 / g.k() as f64).sqrt();
                    fill(&mut params[off..off + g.n_weights()], std);
                    let second = off + g.n_params();
                    fill(&mut params[second..second + g.n_weights()], std);
                }
                Op::Fc { inputs, outputs } => {
                    let gain = if Some(i) == last_fc { 1.0 } else { 2.0 };
                    fill(&mut params[off..off + inputs * outputs], (gain / *inputs as f64).sqrt());
                }
                _ => {}
            }
            off += op.n_params();
        }
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        let n: usize = build_ops(&spec)?.iter().map(Op::n_params).sum();
        crate::error::check_len("network parameters", n, params.len())?;
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("network parameters contain non-finite values".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn input_len(&self) -> usize {
        self.spec.input.iter().product()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim().expect("validated at construction")
    }

    fn ops(&self) -> Vec<Op> {
        build_ops(&self.spec).expect("validated at construction")
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 4 || x.shape()[1..] != self.spec.input {
            return Err(Error::InvalidInput(format!(
                "network input must be [n, {}, {}, {}], got {:?}",
                self.spec.input[0],
                self.spec.input[1],
                self.spec.input[2],
                x.shape()
            )));
        }
        Ok(())
    }

    /// Batched inference on `[n, c, h, w]`, returning `[n, outputs]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut off = 0;
        let mut cols = Vec::new();
        for op in &self.ops() {
            let p = &self.params[off..off + op.n_params()];
            cur = forward_op(op, p, &cur, &mut cols).0;
            off += op.n_params();
        }
        Ok(cur)
    }

    /// Forward pass that records what [`Network::backward`] needs.
    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_input(x)?;
        let mut cur = x.clone();
        let mut off = 0;
        let mut cols = Vec::new();
        let mut caches = Vec::new();
        for op in &self.ops() {
            let p = &self.params[off..off + op.n_params()];
            let (next, cache) = forward_op(op, p, &cur, &mut cols);
            caches.push(match cache {
                Some(c) => c,
                None => match op {
                    Op::Conv(_) | Op::Fc { .. } => Cache::Input(cur),
                    _ => Cache::None,
                },
            });
            cur = next;
            off += op.n_params();
        }
        Ok((cur, ForwardCache {
            caches,
            batch: x.batch(),
        }))
    }

    /// Back-propagates `grad_out` (`[n, outputs]`), adding parameter
    /// gradients into `grads` and returning the input gradient.
    pub fn backward(&self, cache: ForwardCache, grad_out: &Tensor, grads: &mut [f64]) -> Result<Tensor> {
        crate::error::check_len("gradient buffer", self.params.len(), grads.len())?;
        if grad_out.batch() != cache.batch || grad_out.item_len() != self.output_dim() {
            return Err(Error::InvalidInput(format!(
                "output gradient must hold {} × {} values, got {:?}",
                cache.batch,
                self.output_dim(),
                grad_out.shape()
            )));
        }
        let ops = self.ops();
        let shapes = self.spec.shapes()?;
        let mut offsets = Vec::with_capacity(ops.len());
        let mut off = 0;
        for op in &ops {
            offsets.push(off);
            off += op.n_params();
        }
        let mut out_dims = vec![cache.batch];
        out_dims.extend(shapes.last().expect("input shape present").dims());
        let mut g = grad_out.clone().reshape(&out_dims)?;
        let mut cols = Vec::new();
        for (i, (op, c)) in ops.iter().zip(cache.caches).enumerate().rev() {
            let range = offsets[i]..offsets[i] + op.n_params();
            let mut in_dims = vec![cache.batch];
            in_dims.extend(shapes[i].dims());
            g = backward_op(op, &self.params[range.clone()], c, &g, &mut grads[range], &in_dims, &mut cols);
        }
        Ok(g)
    }
}

fn build_ops(spec: &NetworkSpec) -> Result<Vec<Op>> {
    let shapes = spec.shapes()?;
    Ok(spec
        .layers
        .iter()
        .zip(&shapes)
        .zip(&shapes[1..])
        .map(|((layer, &inp), &out)| match (*layer, inp, out) {
            (
                LayerSpec::Conv {
                    kernel: [kh, kw],
                    stride,
                    padding,
                    ..
                },
                Shape::Spatial { c, h, w },
                Shape::Spatial { c: oc, h: oh, w: ow },
            ) => Op::Conv(ConvGeom {
                ic: c,
                h,
                w,
                oc,
                kh,
                kw,
                stride,
                pad: padding,
                oh,
                ow,
            }),
            (LayerSpec::Relu, ..) => Op::Relu,
            (LayerSpec::MaxPool { size: [ph, pw] }, Shape::Spatial { c, h, w }, _) => Op::MaxPool { c, h, w, ph, pw },
            (LayerSpec::Residual { .. }, Shape::Spatial { c, h, w }, _) => Op::Residual(ConvGeom::same3(c, h, w)),
            (LayerSpec::GlobalAvgPool, Shape::Spatial { c, h, w }, _) => Op::GlobalAvgPool { c, hw: h * w },
            (LayerSpec::Flatten, ..) => Op::Flatten,
            (LayerSpec::Fc { outputs }, inp, _) => Op::Fc {
                inputs: inp.len(),
                outputs,
            },
            _ => unreachable!("shapes() validated the layer sequence"),
        })
        .collect())
}

fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

fn conv_batch(g: &ConvGeom, p: &[f64], x: &Tensor, cols: &mut Vec<f64>) -> Tensor {
    let n = x.batch();
    let mut out = Tensor::zeros(&[n, g.oc, g.oh, g.ow]);
    for i in 0..n {
        g.forward(p, x.item(i), out.item_mut(i), cols);
    }
    out
}

fn conv_batch_backward(g: &ConvGeom, p: &[f64], x: &Tensor, dout: &Tensor, grads: &mut [f64], cols: &mut Vec<f64>) -> Tensor {
    let mut dx = Tensor::zeros(x.shape());
    for i in 0..x.batch() {
        g.backward(p, x.item(i), dout.item(i), grads, dx.item_mut(i), cols);
    }
    dx
}

fn forward_op(op: &Op, p: &[f64], x: &Tensor, cols: &mut Vec<f64>) -> (Tensor, Option<Cache>) {
    let n = x.batch();
    match op {
        Op::Conv(g) => (conv_batch(g, p, x, cols), None),
        Op::Relu => {
            let y = relu(x);
            (y.clone(), Some(Cache::Relu(y)))
        }
        Op::MaxPool { c, h, w, ph, pw } => {
            let (oh, ow) = (h / ph, w / pw);
            let mut out = Tensor::zeros(&[n, *c, oh, ow]);
            let mut arg = Vec::with_capacity(n * c * oh * ow);
            for i in 0..n {
                let xi = x.item(i);
                let oi = out.item_mut(i);
                for ch in 0..*c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = 0;
                            for dy in 0..*ph {
                                for dx in 0..*pw {
                                    let idx = (ch * h + oy * ph + dy) * w + ox * pw + dx;
                                    // strict comparison keeps the first maximum
                                    if xi[idx] > best {
                                        best = xi[idx];
                                        best_idx = idx;
                                    }
                                }
                            }
                            oi[(ch * oh + oy) * ow + ox] = best;
                            arg.push(best_idx);
                        }
                    }
                }
            }
            (out, Some(Cache::MaxPool(arg)))
        }
        Op::Residual(g) => {
            let (p1, p2) = p.split_at(g.n_params());
            let h1 = conv_batch(g, p1, x, cols);
            let a1 = relu(&h1);
            let mut sum = conv_batch(g, p2, &a1, cols);
            sum.data_mut().iter_mut().zip(x.data()).for_each(|(s, v)| *s += v);
            let y = relu(&sum);
            (y, Some(Cache::Residual { x: x.clone(), h1, sum }))
        }
        Op::GlobalAvgPool { c, hw } => {
            let mut out = Tensor::zeros(&[n, *c]);
            for i in 0..n {
                let xi = x.item(i);
                for ch in 0..*c {
                    out.item_mut(i)[ch] = xi[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / *hw as f64;
                }
            }
            (out, None)
        }
        Op::Flatten => {
            let len = x.item_len();
            (x.clone().reshape(&[n, len]).expect("same length"), None)
        }
        Op::Fc { inputs, outputs } => {
            let (w, b) = p.split_at(inputs * outputs);
            let mut out = Tensor::zeros(&[n, *outputs]);
            for i in 0..n {
                out.item_mut(i).copy_from_slice(b);
            }
            // SAFETY: x is n × inputs, w is outputs × inputs (read transposed), out is n × outputs.
            unsafe {
                matrixmultiply::dgemm(
                    n,
                    *inputs,
                    *outputs,
                    1.0,
                    x.data().as_ptr(),
                    *inputs as isize,
                    1,
                    w.as_ptr(),
                    1,
                    *inputs as isize,
                    1.0,
                    out.data_mut().as_mut_ptr(),
                    *outputs as isize,
                    1,
                );
            }
            (out, None)
        }
    }
}

fn relu_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let mut d = g.clone();
    d.data_mut().iter_mut().zip(y.data()).for_each(|(d, &y)| {
        if y <= 0.0 {
            *d = 0.0;
        }
    });
    d
}

fn backward_op(
    op: &Op,
    p: &[f64],
    cache: Cache,
    g: &Tensor,
    grads: &mut [f64],
    in_dims: &[usize],
    cols: &mut Vec<f64>,
) -> Tensor {
    let n = g.batch();
    match (op, cache) {
        (Op::Conv(geom), Cache::Input(x)) => conv_batch_backward(geom, p, &x, g, grads, cols),
        (Op::Relu, Cache::Relu(y)) => relu_backward(&y, g).reshape(in_dims).expect("same length"),
        (Op::MaxPool { .. }, Cache::MaxPool(arg)) => {
            let mut dx = Tensor::zeros(in_dims);
            let per = g.item_len();
            for i in 0..n {
                let gi = g.item(i);
                let dxi = dx.item_mut(i);
                for (j, &a) in arg[i * per..(i + 1) * per].iter().enumerate() {
                    dxi[a] += gi[j];
                }
            }
            dx
        }
        (Op::Residual(geom), Cache::Residual { x, h1, sum }) => {
            let (p1, p2) = p.split_at(geom.n_params());
            let (g1, g2) = grads.split_at_mut(geom.n_params());
            let dsum = relu_backward(&relu(&sum), g);
            let a1 = relu(&h1);
            let da1 = conv_batch_backward(geom, p2, &a1, &dsum, g2, cols);
            let dh1 = relu_backward(&a1, &da1);
            let mut dx = conv_batch_backward(geom, p1, &x, &dh1, g1, cols);
            dx.data_mut().iter_mut().zip(dsum.data()).for_each(|(d, s)| *d += s);
            dx
        }
        (Op::GlobalAvgPool { c, hw }, _) => {
            let mut dx = Tensor::zeros(in_dims);
            for i in 0..n {
                let gi = g.item(i).to_vec();
                let dxi = dx.item_mut(i);
                for ch in 0..*c {
                    dxi[ch * hw..(ch + 1) * hw].fill(gi[ch] / *hw as f64);
                }
            }
            dx
        }
        (Op::Flatten, _) => g.clone().reshape(in_dims).expect("same length"),
        (Op::Fc { inputs, outputs }, Cache::Input(x)) => {
            let (w, _) = p.split_at(inputs * outputs);
            let (gw, gb) = grads.split_at_mut(inputs * outputs);
            for i in 0..n {
                gb.iter_mut().zip(g.item(i)).for_each(|(b, v)| *b += v);
            }
            let mut dx = Tensor::zeros(&[n, *inputs]);
            // SAFETY: gw (outputs × inputs) += gᵀ (outputs × n) · x (n × inputs);
            // dx (n × inputs) = g (n × outputs) · w (outputs × inputs).
            unsafe {
                matrixmultiply::dgemm(
                    *outputs,
                    n,
                    *inputs,
                    1.0,
                    g.data().as_ptr(),
                    1,
                    *outputs as isize,
                    x.data().as_ptr(),
                    *inputs as isize,
                    1,
                    1.0,
                    gw.as_mut_ptr(),
                    *inputs as isize,
                    1,
                );
                matrixmultiply::dgemm(
                    n,
                    *outputs,
                    *inputs,
                    1.0,
                    g.data().as_ptr(),
                    *outputs as isize,
                    1,
                    w.as_ptr(),
                    *inputs as isize,
                    1,
                    0.0,
                    dx.data_mut().as_mut_ptr(),
                    *inputs as isize,
                    1,
                );
            }
            dx.reshape(in_dims).expect("same length")
        }
        (op, _) => unreachable!("cache does not match layer {op:?}"),
    }
}
