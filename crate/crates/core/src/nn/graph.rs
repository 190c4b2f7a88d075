//! Tape-based reverse-mode differentiation over small feature maps.
//!
//! A [`Graph`] records every operation eagerly; [`Graph::backward`] walks the
//! tape in reverse and returns gradients for every node that depends on a
//! parameter or variable. Values that are only needed for the backward pass
//! (im2col buffers, attention probabilities) are kept only when the graph was
//! created with gradients enabled.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::array::Array;
use crate::nn::params::ParamSet;
use crate::scalar::{gemm, Mat, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

enum Op<S> {
    Input,
    Variable,
    Param(String),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        pad: usize,
        cols: Option<Vec<S>>,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    AvgPool2(NodeId),
    Upsample2(NodeId),
    Concat(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddChannel {
        x: NodeId,
        v: NodeId,
    },
    ChannelAffine {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
    },
    Silu(NodeId),
    Tanh {
        x: NodeId,
        scale: S,
    },
    LayerNorm {
        x: NodeId,
        inv_std: Vec<S>,
    },
    UnitNorm {
        x: NodeId,
        inv_norm: Vec<S>,
    },
    WindowAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        window: usize,
        probs: Option<Vec<S>>,
    },
    PadZero(NodeId),
    Crop(NodeId),
    MeanSquaredDiff(NodeId, NodeId),
    Scale {
        x: NodeId,
        s: S,
    },
}

struct Node<S> {
    value: Array<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Recording of a differentiable computation.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss with respect to `id`, if it was reached.
    pub fn get(&self, id: NodeId) -> Option<&[S]> {
        self.grads[id.0].as_deref()
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

impl<S: Scalar> Graph<S> {
    /// `grad_enabled = false` builds an inference-only graph that keeps no
    /// backward buffers.
    pub fn new(grad_enabled: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn value(&self, id: NodeId) -> &Array<S> {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.grad_enabled && self.nodes[id.0].needs_grad
    }

    fn push(&mut self, value: Array<S>, op: Op<S>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: self.grad_enabled && needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Array<S>) -> NodeId {
        self.push(value, Op::Input, false)
    }

    /// Input whose gradient is wanted.
    pub fn variable(&mut self, value: Array<S>) -> NodeId {
        self.push(value, Op::Variable, true)
    }

    /// Trainable leaf; its gradient is collected by [`Graph::param_grads`].
    pub fn param(&mut self, name: &str, value: Array<S>) -> NodeId {
        self.push(value, Op::Param(name.to_string()), true)
    }

    /// Looks `name` up in `params` and records it as a parameter leaf.
    pub fn param_from(&mut self, params: &ParamSet<S>, name: &str) -> Result<NodeId> {
        let value = params
            .get(name)
            .ok_or_else(|| Error::arg(format!("missing parameter `{name}`")))?
            .clone();
        Ok(self.param(name, value))
    }

    /// 2D convolution, stride 1, symmetric zero padding `pad`.
    /// `x: [Cin, H, W]`, `w: [Cout, Cin, K, K]`, `b: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        pad: usize,
    ) -> Result<NodeId> {
        let (cin, h, wd) = self.value(x).chw();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 4 || ws[1] != cin || ws[2] != ws[3] {
            return Err(Error::shape(format!(
                "conv weight {ws:?} incompatible with input channels {cin}"
            )));
        }
        let (cout, k) = (ws[0], ws[2]);
        if h + 2 * pad < k || wd + 2 * pad < k {
            return Err(Error::shape(format!(
                "conv input {h}x{wd} too small for kernel {k} with padding {pad}"
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [cout] {
                return Err(Error::shape("conv bias must have shape [Cout]"));
            }
        }
        let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
        let direct = k == 1 && pad == 0;
        let cols = if direct {
            None
        } else {
            Some(im2col(self.value(x).data(), cin, h, wd, k, pad, oh, ow))
        };
        let mut out = vec![S::zero(); cout * oh * ow];
        {
            let colref: &[S] = cols.as_deref().unwrap_or_else(|| self.value(x).data());
            gemm(
                S::one(),
                Mat::new(self.value(w).data(), cout, cin * k * k),
                Mat::new(colref, cin * k * k, oh * ow),
                S::zero(),
                &mut out,
            );
        }
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (co, plane) in out.chunks_mut(oh * ow).enumerate() {
                let bv = bias[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let keep = if self.grad_enabled && self.needs(w) {
            cols
        } else {
            None
        };
        Ok(self.push(
            Array::from_parts(vec![cout, oh, ow], out),
            Op::Conv2d {
                x,
                w,
                b,
                pad,
                cols: keep,
            },
            needs,
        ))
    }

    /// `y = W x + b` for `x: [In]`, `w: [Out, In]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let n_in = self.value(x).len();
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 2 || ws[1] != n_in {
            return Err(Error::shape(format!(
                "linear weight {ws:?} vs input {n_in}"
            )));
        }
        let n_out = ws[0];
        let mut out = match b {
            Some(b) => {
                if self.value(b).len() != n_out {
                    return Err(Error::shape("linear bias length"));
                }
                self.value(b).data().to_vec()
            }
            None => vec![S::zero(); n_out],
        };
        gemm(
            S::one(),
            Mat::new(self.value(w).data(), n_out, n_in),
            Mat::new(self.value(x).data(), n_in, 1),
            S::one(),
            &mut out,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Array::from_parts(vec![n_out], out),
            Op::Linear { x, w, b },
            needs,
        ))
    }

    /// 2×2 average pooling; an odd trailing row/column is dropped.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw();
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::shape(format!("cannot pool a {h}x{w} map")));
        }
        let src = self.value(x).data();
        let quarter = S::lit(0.25);
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let p = &src[ch * h * w..(ch + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    out.push((p[i] + p[i + 1] + p[i + w] + p[i + w + 1]) * quarter);
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Array::from_parts(vec![c, oh, ow], out),
            Op::AvgPool2(x),
            needs,
        ))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: NodeId) -> NodeId {
        let (c, h, w) = self.value(x).chw();
        let src = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                let row = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                for xx in 0..ow {
                    out.push(row[xx / 2]);
                }
            }
        }
        let needs = self.needs(x);
        self.push(
            Array::from_parts(vec![c, oh, ow], out),
            Op::Upsample2(x),
            needs,
        )
    }

    /// Channel concatenation of two maps with equal spatial size.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, ha, wa) = self.value(a).chw();
        let (cb, hb, wb) = self.value(b).chw();
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape(format!("concat {ha}x{wa} with {hb}x{wb}")));
        }
        let mut out = self.value(a).data().to_vec();
        out.extend_from_slice(self.value(b).data());
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Array::from_parts(vec![ca + cb, ha, wa], out),
            Op::Concat(a, b),
            needs,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Array::from_parts(shape, out), Op::Add(a, b), needs))
    }

    /// Adds `v[c]` to every pixel of channel `c`.
    pub fn add_channel(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw();
        if self.value(v).len() != c {
            return Err(Error::shape(format!(
                "channel vector of length {} for {c} channels",
                self.value(v).len()
            )));
        }
        let mut out = self.value(x).data().to_vec();
        let vv = self.value(v).data();
        for (ch, plane) in out.chunks_mut(h * w).enumerate() {
            plane.iter_mut().for_each(|p| *p += vv[ch]);
        }
        let needs = self.needs(x) || self.needs(v);
        Ok(self.push(
            Array::from_parts(vec![c, h, w], out),
            Op::AddChannel { x, v },
            needs,
        ))
    }

    /// `y[c] = gain[c]·x[c] + bias[c]`.
    pub fn channel_affine(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::shape(
                "affine gain/bias length must equal channel count",
            ));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let out: Vec<S> = self
            .value(x)
            .data()
            .chunks(h * w)
            .enumerate()
            .flat_map(|(ch, plane)| plane.iter().map(move |&p| g[ch] * p + b[ch]))
            .collect();
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Array::from_parts(vec![c, h, w], out),
            Op::ChannelAffine { x, gain, bias },
            needs,
        ))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| v * sigmoid(v))
            .collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(Array::from_parts(shape, out), Op::Silu(x), needs)
    }

    /// `tanh(scale·x)`.
    pub fn tanh(&mut self, x: NodeId, scale: S) -> NodeId {
        let out: Vec<S> = self
            .value(x)
            .data()
            .iter()
            .map(|&v| (v * scale).tanh())
            .collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(Array::from_parts(shape, out), Op::Tanh { x, scale }, needs)
    }

    /// Per-pixel normalisation across channels to zero mean, unit variance.
    pub fn layer_norm(&mut self, x: NodeId, eps: S) -> NodeId {
        let (c, h, w) = self.value(x).chw();
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![S::zero(); c * hw];
        let mut inv_std = vec![S::zero(); hw];
        let cf = S::lit(c as f64);
        for p in 0..hw {
            let mean = (0..c).map(|ch| src[ch * hw + p]).sum::<S>() / cf;
            let var = (0..c)
                .map(|ch| {
                    let d = src[ch * hw + p] - mean;
                    d * d
                })
                .sum::<S>()
                / cf;
            let r = S::one() / (var + eps).sqrt();
            inv_std[p] = r;
            for ch in 0..c {
                out[ch * hw + p] = (src[ch * hw + p] - mean) * r;
            }
        }
        let needs = self.needs(x);
        self.push(
            Array::from_parts(vec![c, h, w], out),
            Op::LayerNorm { x, inv_std },
            needs,
        )
    }

    /// Per-pixel scaling of the channel vector to unit length: `x/√(Σx² + eps)`.
    pub fn unit_norm(&mut self, x: NodeId, eps: S) -> NodeId {
        let (c, h, w) = self.value(x).chw();
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![S::zero(); c * hw];
        let mut inv_norm = vec![S::zero(); hw];
        for p in 0..hw {
            let ss = (0..c)
                .map(|ch| src[ch * hw + p] * src[ch * hw + p])
                .sum::<S>();
            let r = S::one() / (ss + eps).sqrt();
            inv_norm[p] = r;
            for ch in 0..c {
                out[ch * hw + p] = src[ch * hw + p] * r;
            }
        }
        let needs = self.needs(x);
        self.push(
            Array::from_parts(vec![c, h, w], out),
            Op::UnitNorm { x, inv_norm },
            needs,
        )
    }

    /// Multi-head softmax attention inside non-overlapping `window×window`
    /// tiles. `q`, `k`, `v` are `[C, H, W]` with `H`, `W` multiples of
    /// `window` and `C` a multiple of `heads`.
    pub fn window_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        window: usize,
    ) -> Result<NodeId> {
        let dims = self.value(q).chw();
        if self.value(k).chw() != dims || self.value(v).chw() != dims {
            return Err(Error::shape("q, k and v must share a shape"));
        }
        let (c, h, w) = dims;
        check_windows(c, h, w, heads, window)?;
        let layout = WindowLayout::new(c, h, w, heads, window);
        let (out, probs) = attention_forward(
            &layout,
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        if let Some(bad) = out.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("attention output element {bad}")));
        }
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let probs = if needs { Some(probs) } else { None };
        Ok(self.push(
            Array::from_parts(vec![c, h, w], out),
            Op::WindowAttention {
                q,
                k,
                v,
                heads,
                window,
                probs,
            },
            needs,
        ))
    }

    /// Zero-pads the bottom/right edges up to `height × width`.
    pub fn pad_zero(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw();
        if height < h || width < w {
            return Err(Error::shape("pad target smaller than input"));
        }
        let src = self.value(x).data();
        let mut out = vec![S::zero(); c * height * width];
        for ch in 0..c {
            for y in 0..h {
                let d = (ch * height + y) * width;
                out[d..d + w].copy_from_slice(&src[(ch * h + y) * w..(ch * h + y + 1) * w]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Array::from_parts(vec![c, height, width], out),
            Op::PadZero(x),
            needs,
        ))
    }

    /// Keeps the top-left `height × width` region.
    pub fn crop(&mut self, x: NodeId, height: usize, width: usize) -> Result<NodeId> {
        let (c, h, w) = self.value(x).chw();
        if height > h || width > w {
            return Err(Error::shape("crop target larger than input"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * height * width);
        for ch in 0..c {
            for y in 0..height {
                let s = (ch * h + y) * w;
                out.extend_from_slice(&src[s..s + width]);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Array::from_parts(vec![c, height, width], out),
            Op::Crop(x),
            needs,
        ))
    }

    /// `mean((a − b)²)` as a 1-element array.
    pub fn mean_squared_diff(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "mse of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let n = self.value(a).len();
        let ss: S = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(
            Array::scalar(ss / S::lit(n as f64)),
            Op::MeanSquaredDiff(a, b),
            needs,
        ))
    }

    pub fn scale(&mut self, x: NodeId, s: S) -> NodeId {
        let out: Vec<S> = self.value(x).data().iter().map(|&v| v * s).collect();
        let shape = self.value(x).shape().to_vec();
        let needs = self.needs(x);
        self.push(Array::from_parts(shape, out), Op::Scale { x, s }, needs)
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<S>> {
        if !self.grad_enabled {
            return Err(Error::arg("backward on a graph built without gradients"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Vec<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], id: NodeId, contrib: Vec<S>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(existing) => add_into(existing, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_node(&self, node: &Node<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match &node.op {
            Op::Input | Op::Variable | Op::Param(_) => {}
            Op::Conv2d { x, w, b, pad, cols } => {
                let (cin, h, wd) = self.value(*x).chw();
                let (cout, oh, ow) = node.value.chw();
                let k = self.value(*w).shape()[2];
                let ckk = cin * k * k;
                if let Some(b) = b {
                    if self.nodes[b.0].needs_grad {
                        let db: Vec<S> =
                            g.chunks(oh * ow).map(|p| p.iter().copied().sum()).collect();
                        self.accumulate(grads, *b, db);
                    }
                }
                if self.nodes[w.0].needs_grad {
                    let recomputed;
                    let colref: &[S] = match cols {
                        Some(c) => c,
                        None if k == 1 && *pad == 0 => self.value(*x).data(),
                        None => {
                            recomputed = im2col(self.value(*x).data(), cin, h, wd, k, *pad, oh, ow);
                            &recomputed
                        }
                    };
                    let mut dw = vec![S::zero(); cout * ckk];
                    gemm(
                        S::one(),
                        Mat::new(g, cout, oh * ow),
                        Mat::new(colref, ckk, oh * ow).t(),
                        S::zero(),
                        &mut dw,
                    );
                    self.accumulate(grads, *w, dw);
                }
                if self.nodes[x.0].needs_grad {
                    let mut dcols = vec![S::zero(); ckk * oh * ow];
                    gemm(
                        S::one(),
                        Mat::new(self.value(*w).data(), cout, ckk).t(),
                        Mat::new(g, cout, oh * ow),
                        S::zero(),
                        &mut dcols,
                    );
                    let dx = if k == 1 && *pad == 0 {
                        dcols
                    } else {
                        col2im(&dcols, cin, h, wd, k, *pad, oh, ow)
                    };
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let n_in = self.value(*x).len();
                let n_out = g.len();
                if let Some(b) = b {
                    self.accumulate(grads, *b, g.to_vec());
                }
                if self.nodes[w.0].needs_grad {
                    let xv = self.value(*x).data();
                    let mut dw = Vec::with_capacity(n_out * n_in);
                    for &go in g {
                        dw.extend(xv.iter().map(|&xi| go * xi));
                    }
                    self.accumulate(grads, *w, dw);
                }
                if self.nodes[x.0].needs_grad {
                    let mut dx = vec![S::zero(); n_in];
                    gemm(
                        S::one(),
                        Mat::new(self.value(*w).data(), n_out, n_in).t(),
                        Mat::new(g, n_out, 1),
                        S::zero(),
                        &mut dx,
                    );
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = self.value(*x).chw();
                let (_, oh, ow) = node.value.chw();
                let quarter = S::lit(0.25);
                let mut dx = vec![S::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = g[(ch * oh + y) * ow + xx] * quarter;
                            let i = ch * h * w + 2 * y * w + 2 * xx;
                            dx[i] += gv;
                            dx[i + 1] += gv;
                            dx[i + w] += gv;
                            dx[i + w + 1] += gv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Upsample2(x) => {
                let (c, h, w) = self.value(*x).chw();
                let ow = 2 * w;
                let mut dx = vec![S::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..2 * h {
                        for xx in 0..ow {
                            dx[(ch * h + y / 2) * w + xx / 2] += g[(ch * 2 * h + y) * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                self.accumulate(grads, *a, g[..na].to_vec());
                self.accumulate(grads, *b, g[na..].to_vec());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::AddChannel { x, v } => {
                let (_, h, w) = node.value.chw();
                if self.nodes[v.0].needs_grad {
                    let dv = g.chunks(h * w).map(|p| p.iter().copied().sum()).collect();
                    self.accumulate(grads, *v, dv);
                }
                self.accumulate(grads, *x, g.to_vec());
            }
            Op::ChannelAffine { x, gain, bias } => {
                let (_, h, w) = node.value.chw();
                let hw = h * w;
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                if self.nodes[bias.0].needs_grad {
                    let db = g.chunks(hw).map(|p| p.iter().copied().sum()).collect();
                    self.accumulate(grads, *bias, db);
                }
                if self.nodes[gain.0].needs_grad {
                    let dg = g
                        .chunks(hw)
                        .zip(xv.chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, *gain, dg);
                }
                if self.nodes[x.0].needs_grad {
                    let dx = g
                        .chunks(hw)
                        .enumerate()
                        .flat_map(|(ch, gp)| gp.iter().map(move |&a| a * gv[ch]))
                        .collect();
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Silu(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (S::one() + v * (S::one() - s))
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh { x, scale } => {
                let dx = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * *scale * (S::one() - y * y))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::LayerNorm { x, inv_std } => {
                let (c, h, w) = node.value.chw();
                let hw = h * w;
                let y = node.value.data();
                let cf = S::lit(c as f64);
                let mut dx = vec![S::zero(); c * hw];
                for p in 0..hw {
                    let mut mean_g = S::zero();
                    let mut mean_gy = S::zero();
                    for ch in 0..c {
                        let i = ch * hw + p;
                        mean_g += g[i];
                        mean_gy += g[i] * y[i];
                    }
                    mean_g /= cf;
                    mean_gy /= cf;
                    for ch in 0..c {
                        let i = ch * hw + p;
                        dx[i] = inv_std[p] * (g[i] - mean_g - y[i] * mean_gy);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::UnitNorm { x, inv_norm } => {
                let (c, h, w) = node.value.chw();
                let hw = h * w;
                let n = node.value.data();
                let mut dx = vec![S::zero(); c * hw];
                for p in 0..hw {
                    let dot = (0..c).map(|ch| g[ch * hw + p] * n[ch * hw + p]).sum::<S>();
                    for ch in 0..c {
                        let i = ch * hw + p;
                        dx[i] = inv_norm[p] * (g[i] - n[i] * dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::WindowAttention {
                q,
                k,
                v,
                heads,
                window,
                probs,
            } => {
                let (c, h, w) = node.value.chw();
                let layout = WindowLayout::new(c, h, w, *heads, *window);
                let probs = probs
                    .as_ref()
                    .expect("attention probabilities kept for backward");
                let (dq, dk, dv) = attention_backward(
                    &layout,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    g,
                );
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::PadZero(x) => {
                let (c, h, w) = self.value(*x).chw();
                let (_, ph, pw) = node.value.chw();
                let mut dx = Vec::with_capacity(c * h * w);
                for ch in 0..c {
                    for y in 0..h {
                        let s = (ch * ph + y) * pw;
                        dx.extend_from_slice(&g[s..s + w]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Crop(x) => {
                let (c, h, w) = self.value(*x).chw();
                let (_, ch_h, ch_w) = node.value.chw();
                let mut dx = vec![S::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..ch_h {
                        let d = (ch * h + y) * w;
                        let s = (ch * ch_h + y) * ch_w;
                        dx[d..d + ch_w].copy_from_slice(&g[s..s + ch_w]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::MeanSquaredDiff(a, b) => {
                let n = self.value(*a).len();
                let coef = g[0] * S::lit(2.0 / n as f64);
                let da: Vec<S> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&x, &y)| coef * (x - y))
                    .collect();
                if self.nodes[b.0].needs_grad {
                    self.accumulate(grads, *b, da.iter().map(|&d| -d).collect());
                }
                self.accumulate(grads, *a, da);
            }
            Op::Scale { x, s } => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *s).collect());
            }
        }
    }

    /// Gradients of every parameter leaf, keyed by name. Parameters that did
    /// not influence the loss get zero gradients when present in `like`.
    pub fn param_grads(&self, grads: &Gradients<S>, like: &ParamSet<S>) -> ParamSet<S> {
        let mut found: BTreeMap<String, Vec<S>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(g) = &grads.grads[i] {
                    match found.get_mut(name) {
                        Some(acc) => add_into(acc, g),
                        None => {
                            found.insert(name.clone(), g.clone());
                        }
                    }
                }
            }
        }
        let mut out = ParamSet::new();
        for (name, value) in like.iter() {
            let data = found
                .remove(name)
                .unwrap_or_else(|| vec![S::zero(); value.len()]);
            out.insert(name, Array::from_parts(value.shape().to_vec(), data));
        }
        out
    }
}

pub(crate) fn check_windows(
    c: usize,
    h: usize,
    w: usize,
    heads: usize,
    window: usize,
) -> Result<()> {
    if window == 0 || !h.is_multiple_of(window) || !w.is_multiple_of(window) {
        return Err(Error::shape(format!(
            "attention map {h}x{w} is not a multiple of window {window}"
        )));
    }
    if heads == 0 || !c.is_multiple_of(heads) {
        return Err(Error::shape(format!(
            "{c} channels not divisible by {heads} heads"
        )));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn im2col<S: Scalar>(
    x: &[S],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let mut cols = vec![S::zero(); cin * k * k * oh * ow];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let src = &x[(ci * h + iy - pad) * w..(ci * h + iy - pad + 1) * w];
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    // ix = ox + kx - pad must lie in [0, w)
                    let lo = pad.saturating_sub(kx);
                    let hi = (w + pad).saturating_sub(kx).min(ow);
                    if lo < hi {
                        let s0 = lo + kx - pad;
                        drow[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<S: Scalar>(
    cols: &[S],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<S> {
    let mut dx = vec![S::zero(); cin * h * w];
    for ci in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = oy + ky;
                    if iy < pad || iy - pad >= h {
                        continue;
                    }
                    let drow = &mut dx[(ci * h + iy - pad) * w..(ci * h + iy - pad + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    let lo = pad.saturating_sub(kx);
                    let hi = (w + pad).saturating_sub(kx).min(ow);
                    if lo < hi {
                        let s0 = lo + kx - pad;
                        add_into(&mut drow[s0..s0 + (hi - lo)], &srow[lo..hi]);
                    }
                }
            }
        }
    }
    dx
}

/// Token ↔ feature-map indexing for windowed attention.
pub(crate) struct WindowLayout {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub heads: usize,
    pub window: usize,
}

impl WindowLayout {
    pub fn new(c: usize, h: usize, w: usize, heads: usize, window: usize) -> Self {
        WindowLayout {
            c,
            h,
            w,
            heads,
            window,
        }
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    pub fn head_dim(&self) -> usize {
        self.c / self.heads
    }

    pub fn n_windows(&self) -> usize {
        (self.h / self.window) * (self.w / self.window)
    }

    /// Flat pixel offsets of the tokens of window `win`, in raster order.
    fn pixels(&self, win: usize) -> Vec<usize> {
        let per_row = self.w / self.window;
        let (wy, wx) = (win / per_row, win % per_row);
        let mut px = Vec::with_capacity(self.tokens());
        for dy in 0..self.window {
            for dx in 0..self.window {
                px.push((wy * self.window + dy) * self.w + wx * self.window + dx);
            }
        }
        px
    }
}

/// `[tokens, head_dim]` block of head `head` for the given window pixels.
fn gather<S: Scalar>(l: &WindowLayout, src: &[S], pixels: &[usize], head: usize) -> Vec<S> {
    let d = l.head_dim();
    let hw = l.h * l.w;
    let mut out = Vec::with_capacity(pixels.len() * d);
    for &p in pixels {
        for j in 0..d {
            out.push(src[(head * d + j) * hw + p]);
        }
    }
    out
}

fn scatter_add<S: Scalar>(
    l: &WindowLayout,
    dst: &mut [S],
    block: &[S],
    pixels: &[usize],
    head: usize,
) {
    let d = l.head_dim();
    let hw = l.h * l.w;
    for (n, &p) in pixels.iter().enumerate() {
        for j in 0..d {
            dst[(head * d + j) * hw + p] += block[n * d + j];
        }
    }
}

fn softmax_rows<S: Scalar>(m: &mut [S], n: usize) {
    for row in m.chunks_mut(n) {
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Attention probabilities for every `(window, head)` block, each a row-
/// stochastic `tokens×tokens` matrix, concatenated.
pub(crate) fn attention_probs<S: Scalar>(l: &WindowLayout, q: &[S], k: &[S]) -> Vec<S> {
    let n = l.tokens();
    let d = l.head_dim();
    let scale = S::lit(1.0 / (d as f64).sqrt());
    let mut probs = vec![S::zero(); l.n_windows() * l.heads * n * n];
    for win in 0..l.n_windows() {
        let px = l.pixels(win);
        for head in 0..l.heads {
            let qw = gather(l, q, &px, head);
            let kw = gather(l, k, &px, head);
            let block =
                &mut probs[(win * l.heads + head) * n * n..(win * l.heads + head + 1) * n * n];
            gemm(
                scale,
                Mat::new(&qw, n, d),
                Mat::new(&kw, n, d).t(),
                S::zero(),
                block,
            );
            softmax_rows(block, n);
        }
    }
    probs
}

fn attention_forward<S: Scalar>(l: &WindowLayout, q: &[S], k: &[S], v: &[S]) -> (Vec<S>, Vec<S>) {
    let n = l.tokens();
    let d = l.head_dim();
    let probs = attention_probs(l, q, k);
    let mut out = vec![S::zero(); v.len()];
    let mut ow = vec![S::zero(); n * d];
    for win in 0..l.n_windows() {
        let px = l.pixels(win);
        for head in 0..l.heads {
            let vw = gather(l, v, &px, head);
            let p = &probs[(win * l.heads + head) * n * n..(win * l.heads + head + 1) * n * n];
            gemm(
                S::one(),
                Mat::new(p, n, n),
                Mat::new(&vw, n, d),
                S::zero(),
                &mut ow,
            );
            scatter_add(l, &mut out, &ow, &px, head);
        }
    }
    (out, probs)
}

fn attention_backward<S: Scalar>(
    l: &WindowLayout,
    q: &[S],
    k: &[S],
    v: &[S],
    probs: &[S],
    g: &[S],
) -> (Vec<S>, Vec<S>, Vec<S>) {
    let n = l.tokens();
    let d = l.head_dim();
    let scale = S::lit(1.0 / (d as f64).sqrt());
    let mut dq = vec![S::zero(); q.len()];
    let mut dk = vec![S::zero(); k.len()];
    let mut dv = vec![S::zero(); v.len()];
    let mut dp = vec![S::zero(); n * n];
    let mut blk = vec![S::zero(); n * d];
    for win in 0..l.n_windows() {
        let px = l.pixels(win);
        for head in 0..l.heads {
            let p = &probs[(win * l.heads + head) * n * n..(win * l.heads + head + 1) * n * n];
            let qw = gather(l, q, &px, head);
            let kw = gather(l, k, &px, head);
            let vw = gather(l, v, &px, head);
            let gw = gather(l, g, &px, head);
            // dV = Pᵀ dO
            gemm(
                S::one(),
                Mat::new(p, n, n).t(),
                Mat::new(&gw, n, d),
                S::zero(),
                &mut blk,
            );
            scatter_add(l, &mut dv, &blk, &px, head);
            // dP = dO Vᵀ, then softmax backward in place
            gemm(
                S::one(),
                Mat::new(&gw, n, d),
                Mat::new(&vw, n, d).t(),
                S::zero(),
                &mut dp,
            );
            for (prow, drow) in p.chunks(n).zip(dp.chunks_mut(n)) {
                let dot: S = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (dv_, &pv) in drow.iter_mut().zip(prow) {
                    *dv_ = pv * (*dv_ - dot);
                }
            }
            // dQ = dS K · scale, dK = dSᵀ Q · scale
            gemm(
                scale,
                Mat::new(&dp, n, n),
                Mat::new(&kw, n, d),
                S::zero(),
                &mut blk,
            );
            scatter_add(l, &mut dq, &blk, &px, head);
            gemm(
                scale,
                Mat::new(&dp, n, n).t(),
                Mat::new(&qw, n, d),
                S::zero(),
                &mut blk,
            );
            scatter_add(l, &mut dk, &blk, &px, head);
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use rand::Rng;

    fn rand_array(shape: &[usize], seed: u64) -> Array<f64> {
        let mut rng = stream_rng(seed, 7);
        let n = shape.iter().product();
        Array::from_parts(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    /// Builds `f` on variables, reduces with an MSE against a fixed target,
    /// and compares every input gradient with central differences.
    fn check(inputs: &[Array<f64>], f: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>) {
        let eval = |vals: &[Array<f64>], grad: bool| {
            let mut g = Graph::new(grad);
            let ids: Vec<NodeId> = vals.iter().map(|v| g.variable(v.clone())).collect();
            let out = f(&mut g, &ids).unwrap();
            let target = g.input(rand_array(g.value(out).shape(), 99));
            let loss = g.mean_squared_diff(out, target).unwrap();
            (g, ids, loss)
        };
        let (g, ids, loss) = eval(inputs, true);
        let grads = g.backward(loss).unwrap();
        let h = 1e-6;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(ids[i])
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; input.len()]);
            for j in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[i].data_mut()[j] += h;
                let mut minus = inputs.to_vec();
                minus[i].data_mut()[j] -= h;
                let (gp, _, lp) = eval(&plus, false);
                let (gm, _, lm) = eval(&minus, false);
                let fd = (gp.value(lp).item() - gm.value(lm).item()) / (2.0 * h);
                let a = analytic[j];
                let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-6);
                assert!(err < 1e-5, "input {i} element {j}: fd {fd} vs analytic {a}");
            }
        }
    }

    #[test]
    fn conv2d_gradients() {
        for pad in [0, 1] {
            check(
                &[
                    rand_array(&[2, 5, 4], 1),
                    rand_array(&[3, 2, 3, 3], 2),
                    rand_array(&[3], 3),
                ],
                |g, v| g.conv2d(v[0], v[1], Some(v[2]), pad),
            );
        }
        check(
            &[rand_array(&[3, 3, 3], 4), rand_array(&[2, 3, 1, 1], 5)],
            |g, v| g.conv2d(v[0], v[1], None, 0),
        );
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        let x = rand_array(&[2, 4, 5], 1);
        let w = rand_array(&[3, 2, 3, 3], 2);
        let mut g = Graph::new(false);
        let (xi, wi) = (g.input(x.clone()), g.input(w.clone()));
        let y = g.conv2d(xi, wi, None, 1).unwrap();
        let out = g.value(y);
        assert_eq!(out.shape(), &[3, 4, 5]);
        for co in 0..3 {
            for oy in 0..4 {
                for ox in 0..5 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (iy, ix) =
                                    (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                                if (0..4).contains(&iy) && (0..5).contains(&ix) {
                                    s += w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx]
                                        * x.data()[(ci * 4 + iy as usize) * 5 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((out.data()[(co * 4 + oy) * 5 + ox] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn dense_and_pointwise_gradients() {
        check(
            &[
                rand_array(&[4], 1),
                rand_array(&[3, 4], 2),
                rand_array(&[3], 3),
            ],
            |g, v| g.linear(v[0], v[1], Some(v[2])),
        );
        check(&[rand_array(&[2, 3, 3], 1)], |g, v| Ok(g.silu(v[0])));
        check(&[rand_array(&[2, 3, 3], 1)], |g, v| Ok(g.tanh(v[0], 1.7)));
        check(&[rand_array(&[2, 3, 3], 1)], |g, v| Ok(g.scale(v[0], -0.3)));
        check(
            &[rand_array(&[2, 3, 3], 1), rand_array(&[2, 3, 3], 2)],
            |g, v| g.add(v[0], v[1]),
        );
        check(&[rand_array(&[2, 3, 3], 1), rand_array(&[2], 2)], |g, v| {
            g.add_channel(v[0], v[1])
        });
        check(
            &[
                rand_array(&[2, 3, 3], 1),
                rand_array(&[2], 2),
                rand_array(&[2], 3),
            ],
            |g, v| g.channel_affine(v[0], v[1], v[2]),
        );
    }

    #[test]
    fn normalisation_gradients() {
        check(&[rand_array(&[4, 2, 3], 1)], |g, v| {
            Ok(g.layer_norm(v[0], 1e-5))
        });
        check(&[rand_array(&[4, 2, 3], 2)], |g, v| {
            Ok(g.unit_norm(v[0], 1e-4))
        });
    }

    #[test]
    fn resampling_gradients() {
        check(&[rand_array(&[2, 5, 4], 1)], |g, v| g.avg_pool2(v[0]));
        check(&[rand_array(&[2, 2, 3], 1)], |g, v| Ok(g.upsample2(v[0])));
        check(
            &[rand_array(&[1, 2, 3], 1), rand_array(&[2, 2, 3], 2)],
            |g, v| g.concat(v[0], v[1]),
        );
        check(&[rand_array(&[2, 3, 3], 1)], |g, v| g.pad_zero(v[0], 4, 5));
        check(&[rand_array(&[2, 4, 5], 1)], |g, v| g.crop(v[0], 3, 2));
    }

    #[test]
    fn attention_gradients() {
        let shape = [4, 4, 4];
        check(
            &[
                rand_array(&shape, 1),
                rand_array(&shape, 2),
                rand_array(&shape, 3),
            ],
            |g, v| g.window_attention(v[0], v[1], v[2], 2, 2),
        );
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let (c, h, w) = (4, 4, 8);
        let q = rand_array(&[c, h, w], 1);
        let k = rand_array(&[c, h, w], 2);
        let layout = WindowLayout::new(c, h, w, 2, 4);
        let p = attention_probs(&layout, q.data(), k.data());
        let n = layout.tokens();
        assert_eq!(p.len(), layout.n_windows() * 2 * n * n);
        for row in p.chunks(n) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::<f64>::new(true);
        let a = g.variable(rand_array(&[2, 3, 3], 1));
        let b = g.variable(rand_array(&[2, 3, 4], 1));
        assert!(g.add(a, b).is_err());
        assert!(g.mean_squared_diff(a, b).is_err());
        assert!(g.crop(a, 4, 4).is_err());
        assert!(g.pad_zero(a, 2, 2).is_err());
        let w = g.variable(rand_array(&[1, 3, 3, 3], 1));
        assert!(g.conv2d(a, w, None, 1).is_err());
        assert!(g.window_attention(a, a, a, 2, 2).is_err());
        assert!(g.window_attention(a, a, a, 3, 3).is_err());
        assert!(g.backward(a).is_err());
        let g2 = Graph::<f64>::new(false);
        assert!(!g2.grad_enabled());
    }

    #[test]
    fn repeated_params_accumulate() {
        let mut g = Graph::<f64>::new(true);
        let p = g.param("w", Array::from_parts(vec![2], vec![1.0, 2.0]));
        let q = g.param("w", Array::from_parts(vec![2], vec![1.0, 2.0]));
        let s = g.add(p, q).unwrap();
        let z = g.input(Array::zeros(&[2]));
        let loss = g.mean_squared_diff(s, z).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut like = ParamSet::new();
        like.insert("w", Array::zeros(&[2]));
        like.insert("unused", Array::zeros(&[3]));
        let pg = g.param_grads(&grads, &like);
        // 2w flows into each of the two copies
        assert_eq!(pg.get("w").unwrap().data(), &[4.0, 8.0]);
        assert_eq!(pg.get("unused").unwrap().data(), &[0.0; 3]);
    }
}
