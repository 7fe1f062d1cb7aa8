//! Minimal reverse-mode differentiation over dense f64 NCHW tensors.
//!
//! A [`Graph`] records one forward pass as a tape. Parameters enter the tape
//! once per graph (repeated lookups return the same node), so every use of a
//! shared array accumulates into a single gradient. All kernels run
//! single-threaded in a fixed order, which makes results bit-reproducible.

mod kernels;
mod optim;
mod params;
mod tensor;

use std::collections::HashMap;

pub use optim::{Adam, Sgd};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

use kernels::{BilinearTaps, ConvGeom};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<f64>>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Modulate {
        x: Var,
        gamma: Var,
        beta: Var,
    },
    GlobalAvgPool(Var),
    UpsampleNearest(Var, usize),
    UpsampleBilinear {
        x: Var,
        rows: BilinearTaps,
        cols: BilinearTaps,
    },
    SoftmaxChannels(Var),
    CrossEntropyProbs {
        p: Var,
        labels: Vec<u8>,
        weights: Vec<f64>,
        count: usize,
        eps: f64,
    },
    MeanAbs(Var),
    MeanSquaredTo(Var, f64),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of one forward computation.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    frozen: Vec<bool>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            frozen: Vec::new(),
        }
    }

    /// Parameters for which `frozen(id)` holds enter the tape as constants:
    /// gradients still flow through them but are not accumulated for them.
    pub fn with_frozen(store: &ParamStore, frozen: impl Fn(ParamId) -> bool) -> Self {
        let mut g = Self::new();
        g.frozen = store.ids().map(frozen).collect();
        g
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input whose gradient can be read with [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Places a parameter on the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let frozen = self.frozen.get(id.index()).copied().unwrap_or(false);
        let v = self.push(store.get(id).clone(), Op::Leaf, !frozen);
        self.params.insert(id, v);
        v
    }

    /// Copies the value of `v` into a new constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "sub shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x - y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mul shape mismatch");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let t = Tensor::new(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Sum of rank-0 terms weighted by constants.
    pub fn weighted_sum(&mut self, terms: &[(f64, Var)]) -> Var {
        let mut acc: Option<Var> = None;
        for &(w, v) in terms {
            let s = self.scale(v, w);
            acc = Some(match acc {
                None => s,
                Some(a) => self.add(a, s),
            });
        }
        acc.unwrap_or_else(|| self.constant(Tensor::scalar(0.0)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let t = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let rg = self.rg(a);
        self.push(t, Op::LeakyRelu(a, slope), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    /// 2-D convolution, NCHW input, `[Cout, Cin, k, k]` weight, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(ws.len(), 4, "conv weight must be rank 4");
        assert_eq!(ws[1], cin, "conv input channels {} vs weight {:?}", cin, ws);
        assert_eq!(ws[2], ws[3], "square kernels only");
        let geom = ConvGeom::new(cin, h, wd, ws[0], ws[2], stride, pad);
        let keep_cols = self.rg(w);
        let (out, cols) = kernels::conv2d_forward(
            self.value(x).data(),
            n,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
            keep_cols,
        );
        let t = Tensor::new(vec![n, geom.cout, geom.hout, geom.wout], out);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            t,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        )
    }

    /// `x [N, Din] · wᵀ + b`, with `w [Dout, Din]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        assert_eq!(xs.len(), 2);
        assert_eq!(ws.len(), 2);
        assert_eq!(xs[1], ws[1], "linear input width mismatch");
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![0.0; n * dout];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv);
            }
        }
        kernels::gemm(
            n,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            &mut out,
            1.0,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(vec![n, dout], out), Op::Linear { x, w, b }, rg)
    }

    /// Per-sample, per-channel normalization over the spatial axes (no affine).
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = h * w;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(n * c);
        for (plane, dst) in src.chunks(hw).zip(out.chunks_mut(hw)) {
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let is = 1.0 / (var + eps).sqrt();
            for (d, s) in dst.iter_mut().zip(plane) {
                *d = (s - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![n, c, h, w], out),
            Op::InstanceNorm { x, inv_std },
            rg,
        )
    }

    /// Per-channel feature modulation `x · (1 + gamma) + beta`,
    /// with `gamma`, `beta` of shape `[N, C]`.
    pub fn modulate(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(gamma).shape(), &[n, c], "modulation gamma shape");
        assert_eq!(self.value(beta).shape(), &[n, c], "modulation beta shape");
        let hw = h * w;
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let mut out = vec![0.0; xv.len()];
        for (i, (plane, dst)) in xv.data().chunks(hw).zip(out.chunks_mut(hw)).enumerate() {
            let s = 1.0 + gv.data()[i];
            let o = bv.data()[i];
            for (d, v) in dst.iter_mut().zip(plane) {
                *d = v * s + o;
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::new(vec![n, c, h, w], out),
            Op::Modulate { x, gamma, beta },
            rg,
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let hw = (h * w) as f64;
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / hw)
            .collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, c], out), Op::GlobalAvgPool(x), rg)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let (ho, wo) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![0.0; n * c * ho * wo];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for oy in 0..ho {
                let row = &plane[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..wo {
                    dst[oy * wo + ox] = row[ox / factor];
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![n, c, ho, wo], out),
            Op::UpsampleNearest(x, factor),
            rg,
        )
    }

    /// Bilinear resize to `(ho, wo)` with half-pixel centers.
    pub fn upsample_bilinear(&mut self, x: Var, ho: usize, wo: usize) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let rows = BilinearTaps::new(h, ho);
        let cols = BilinearTaps::new(w, wo);
        let out = kernels::bilinear_forward(self.value(x).data(), n * c, h, w, &rows, &cols);
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![n, c, ho, wo], out),
            Op::UpsampleBilinear { x, rows, cols },
            rg,
        )
    }

    /// Softmax across the channel axis of an NCHW tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let out = kernels::softmax_channels(self.value(x).data(), n, c, h * w);
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![n, c, h, w], out),
            Op::SoftmaxChannels(x),
            rg,
        )
    }

    /// Weighted cross-entropy on probabilities `p [N, K, H, W]` against
    /// per-pixel class indices (`255` = ignored), mean over labeled pixels.
    /// Probabilities are clamped below by `eps` before the logarithm.
    pub fn cross_entropy_probs(&mut self, p: Var, labels: &[u8], weights: &[f64], eps: f64) -> Var {
        let (n, k, h, w) = self.value(p).dims4();
        assert_eq!(labels.len(), n * h * w, "label count mismatch");
        assert_eq!(weights.len(), k, "class weight count mismatch");
        let hw = h * w;
        let pv = self.value(p).data();
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, &lab) in labels.iter().enumerate() {
            if lab == crate::datamodel::IGNORE_LABEL {
                continue;
            }
            let cls = lab as usize;
            assert!(cls < k, "label {cls} out of range for {k} classes");
            let (b, pix) = (i / hw, i % hw);
            let prob = pv[(b * k + cls) * hw + pix];
            total -= weights[cls] * prob.max(eps).ln();
            count += 1;
        }
        let value = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let rg = self.rg(p);
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropyProbs {
                p,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                count,
                eps,
            },
            rg,
        )
    }

    pub fn mean_abs(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = if v.is_empty() {
            0.0
        } else {
            v.data().iter().map(|a| a.abs()).sum::<f64>() / v.len() as f64
        };
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::MeanAbs(x), rg)
    }

    /// `mean((x - target)^2)`.
    pub fn mean_squared_to(&mut self, x: Var, target: f64) -> Var {
        let v = self.value(x);
        let m = if v.is_empty() {
            0.0
        } else {
            v.data()
                .iter()
                .map(|a| (a - target) * (a - target))
                .sum::<f64>()
                / v.len() as f64
        };
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::MeanSquaredTo(x, target), rg)
    }

    /// Reverse sweep from a rank-0 node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        }
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        let mut params: Vec<(ParamId, Var)> = self
            .params
            .iter()
            .filter(|(_, v)| self.rg(**v))
            .map(|(&id, &v)| (id, v))
            .collect();
        params.sort_unstable();
        Gradients { grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                self.accumulate(grads, *b, gy.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gy.clone());
                if self.rg(*b) {
                    self.accumulate(grads, *b, gy.map(|g| -g));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let d = gy
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(g, v)| g * v)
                        .collect();
                    self.accumulate(grads, *a, Tensor::new(gy.shape().to_vec(), d));
                }
                if self.rg(*b) {
                    let d = gy
                        .data()
                        .iter()
                        .zip(va.data())
                        .map(|(g, v)| g * v)
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(gy.shape().to_vec(), d));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, gy.map(|g| g * c)),
            Op::Relu(a) => {
                let d = gy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, o)| if *o > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(gy.shape().to_vec(), d));
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let d = gy
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(g, v)| if *v > 0.0 { *g } else { g * slope })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(gy.shape().to_vec(), d));
            }
            Op::Sigmoid(a) => {
                let d = gy
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(g, s)| g * s * (1.0 - s))
                    .collect();
                self.accumulate(grads, *a, Tensor::new(gy.shape().to_vec(), d));
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let n = self.value(*x).shape()[0];
                if let Some(b) = b {
                    if self.rg(*b) {
                        let plane = geom.hout * geom.wout;
                        let mut db = vec![0.0; geom.cout];
                        for (i, chunk) in gy.data().chunks(plane).enumerate() {
                            db[i % geom.cout] += chunk.iter().sum::<f64>();
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![geom.cout], db));
                    }
                }
                if self.rg(*w) {
                    let cols = cols
                        .as_ref()
                        .expect("conv columns retained for weight grad");
                    let dw = kernels::conv2d_weight_grad(gy.data(), cols, n, geom);
                    self.accumulate(grads, *w, Tensor::new(self.value(*w).shape().to_vec(), dw));
                }
                if self.rg(*x) {
                    let dx = kernels::conv2d_input_grad(gy.data(), self.value(*w).data(), n, geom);
                    self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx));
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, din) = (xs[0], xs[1]);
                let dout = self.value(*w).shape()[0];
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut db = vec![0.0; dout];
                        for row in gy.data().chunks(dout) {
                            for (d, g) in db.iter_mut().zip(row) {
                                *d += g;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(vec![dout], db));
                    }
                }
                if self.rg(*w) {
                    let mut dw = vec![0.0; dout * din];
                    kernels::gemm(
                        dout,
                        n,
                        din,
                        gy.data(),
                        true,
                        self.value(*x).data(),
                        false,
                        &mut dw,
                        0.0,
                    );
                    self.accumulate(grads, *w, Tensor::new(vec![dout, din], dw));
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; n * din];
                    kernels::gemm(
                        n,
                        dout,
                        din,
                        gy.data(),
                        false,
                        self.value(*w).data(),
                        false,
                        &mut dx,
                        0.0,
                    );
                    self.accumulate(grads, *x, Tensor::new(vec![n, din], dx));
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let (_, _, h, w) = y.dims4();
                let hw = h * w;
                let mut dx = vec![0.0; y.len()];
                for (i, ((gp, yp), dp)) in gy
                    .data()
                    .chunks(hw)
                    .zip(y.data().chunks(hw))
                    .zip(dx.chunks_mut(hw))
                    .enumerate()
                {
                    let mg = gp.iter().sum::<f64>() / hw as f64;
                    let mgy = gp.iter().zip(yp).map(|(g, v)| g * v).sum::<f64>() / hw as f64;
                    for ((d, g), v) in dp.iter_mut().zip(gp).zip(yp) {
                        *d = inv_std[i] * (g - mg - v * mgy);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::Modulate { x, gamma, beta } => {
                let (n, c, h, w) = y.dims4();
                let hw = h * w;
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                if self.rg(*x) {
                    let mut dx = vec![0.0; y.len()];
                    for (i, (gp, dp)) in gy.data().chunks(hw).zip(dx.chunks_mut(hw)).enumerate() {
                        let s = 1.0 + gv.data()[i];
                        for (d, g) in dp.iter_mut().zip(gp) {
                            *d = g * s;
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx));
                }
                if self.rg(*gamma) {
                    let dg = gy
                        .data()
                        .chunks(hw)
                        .zip(xv.data().chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(g, v)| g * v).sum())
                        .collect();
                    self.accumulate(grads, *gamma, Tensor::new(vec![n, c], dg));
                }
                if self.rg(*beta) {
                    let db = gy.data().chunks(hw).map(|gp| gp.iter().sum()).collect();
                    self.accumulate(grads, *beta, Tensor::new(vec![n, c], db));
                }
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4();
                let hw = h * w;
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for g in gy.data() {
                    dx.extend(std::iter::repeat_n(g / hw as f64, hw));
                }
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx));
            }
            Op::UpsampleNearest(x, factor) => {
                let (_, _, h, w) = self.value(*x).dims4();
                let (ho, wo) = (h * factor, w * factor);
                let mut dx = vec![0.0; self.value(*x).len()];
                for (gp, dp) in gy.data().chunks(ho * wo).zip(dx.chunks_mut(h * w)) {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dp[(oy / factor) * w + ox / factor] += gp[oy * wo + ox];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.value(*x).shape().to_vec(), dx));
            }
            Op::UpsampleBilinear { x, rows, cols } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let dx = kernels::bilinear_backward(gy.data(), n * c, h, w, rows, cols);
                self.accumulate(grads, *x, Tensor::new(vec![n, c, h, w], dx));
            }
            Op::SoftmaxChannels(x) => {
                let (n, c, h, w) = y.dims4();
                let hw = h * w;
                let mut dx = vec![0.0; y.len()];
                for b in 0..n {
                    let base = b * c * hw;
                    for pix in 0..hw {
                        let mut dot = 0.0;
                        for k in 0..c {
                            let i = base + k * hw + pix;
                            dot += gy.data()[i] * y.data()[i];
                        }
                        for k in 0..c {
                            let i = base + k * hw + pix;
                            dx[i] = y.data()[i] * (gy.data()[i] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx));
            }
            Op::CrossEntropyProbs {
                p,
                labels,
                weights,
                count,
                eps,
            } => {
                let pv = self.value(*p);
                let (_, k, h, w) = pv.dims4();
                let hw = h * w;
                let mut dp = vec![0.0; pv.len()];
                if *count > 0 {
                    let scale = gy.item() / *count as f64;
                    for (i, &lab) in labels.iter().enumerate() {
                        if lab == crate::datamodel::IGNORE_LABEL {
                            continue;
                        }
                        let cls = lab as usize;
                        let j = ((i / hw) * k + cls) * hw + i % hw;
                        let prob = pv.data()[j];
                        if prob > *eps {
                            dp[j] = -scale * weights[cls] / prob;
                        }
                    }
                }
                self.accumulate(grads, *p, Tensor::new(pv.shape().to_vec(), dp));
            }
            Op::MeanAbs(x) => {
                let xv = self.value(*x);
                let n = xv.len().max(1) as f64;
                let g = gy.item() / n;
                self.accumulate(grads, *x, xv.map(|v| g * sign(v)));
            }
            Op::MeanSquaredTo(x, target) => {
                let xv = self.value(*x);
                let n = xv.len().max(1) as f64;
                let g = gy.item() * 2.0 / n;
                self.accumulate(grads, *x, xv.map(|v| g * (v - target)));
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient for a differentiable node; `None` when it did not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients of all non-frozen parameters that reached the tape.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.grads[v.0].as_ref().map(|g| (*id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.grads[v.0].as_ref())
    }
}
