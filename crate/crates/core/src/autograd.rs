//! A small reverse-mode tape over [`Tensor`]s.
//!
//! A [`Graph`] borrows the [`ParamStore`] read-only; training-mode batch-norm layers
//! record their running-statistic updates in the graph and the caller applies them to
//! the store afterwards (see [`Graph::take_bn_updates`]).

use std::collections::{BTreeMap, HashMap};

use crate::params::{BufferId, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Log-argument floor used by the cross-entropy terms.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Pending running-statistics update produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnStatUpdate {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub momentum: f64,
    pub batch_mean: Vec<f64>,
    pub batch_var_unbiased: Vec<f64>,
}

impl BnStatUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        let m = self.momentum;
        for (r, b) in store
            .buffer_mut(self.running_mean)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_mean)
        {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, b) in store
            .buffer_mut(self.running_var)
            .data_mut()
            .iter_mut()
            .zip(&self.batch_var_unbiased)
        {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Linear-interpolation tap along one axis.
#[derive(Clone, Copy, Debug)]
struct Lerp {
    i0: usize,
    i1: usize,
    w1: f64,
}

/// Source taps for bilinear resizing with half-pixel centres (no corner alignment).
fn lerp_taps(input: usize, output: usize) -> Vec<Lerp> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            Lerp {
                i0,
                i1,
                w1: src - i0 as f64,
            }
        })
        .collect()
}

/// Adaptive average pooling windows: `[floor(i*n/b), ceil((i+1)*n/b))`.
fn pool_windows(input: usize, bins: usize) -> Vec<(usize, usize)> {
    (0..bins)
        .map(|i| {
            let start = i * input / bins;
            let end = ((i + 1) * input).div_ceil(bins);
            (start, end)
        })
        .collect()
}

enum Op {
    Input,
    Param,
    Conv2d {
        input: Var,
        weight: Var,
        stride: usize,
        padding: usize,
    },
    BiasAdd {
        input: Var,
        bias: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Relu(Var),
    Add(Var, Var),
    Concat(Vec<Var>),
    Resize {
        input: Var,
        rows: Vec<Lerp>,
        cols: Vec<Lerp>,
    },
    AdaptiveAvgPool {
        input: Var,
        rows: Vec<(usize, usize)>,
        cols: Vec<(usize, usize)>,
    },
    Softmax(Var),
    Nll {
        probs: Var,
        coeff: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    mode: Mode,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    bn_updates: Vec<BnStatUpdate>,
}

/// Gradients of a scalar root with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }
}

// c = op(a) * op(b) + beta * c, all row-major. op(a) is m x k, op(b) is k x n.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], ta: bool, b: &[f64], tb: bool, c: &mut [f64], beta: f64) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvGeom {
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let p = g.ho * g.wo;
    for c in 0..g.ci {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix >= 0 && ix < g.w as isize {
                            srow[ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let p = g.ho * g.wo;
    for c in 0..g.ci {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore, mode: Mode) -> Self {
        Self {
            store,
            mode,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Input leaf whose gradient is tracked (used by gradient checks).
    pub fn tracked_input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, true)
    }

    /// Leaf for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let value = self.store.param(id).clone();
        let v = self.push(value, Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, padding: usize) -> Var {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, ci, h, wd) = x.dims4();
        let (co, wci, kh, kw) = w.dims4();
        assert_eq!(ci, wci, "conv input channels {ci} vs kernel {wci}");
        assert_eq!(kh, kw, "square kernels only");
        assert!(h + 2 * padding >= kh && wd + 2 * padding >= kw, "kernel larger than padded input");
        let geom = ConvGeom {
            ci,
            h,
            w: wd,
            k: kh,
            stride,
            pad: padding,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (wd + 2 * padding - kw) / stride + 1,
        };
        let kdim = ci * kh * kw;
        let p = geom.ho * geom.wo;
        let mut out = Tensor::zeros(&[n, co, geom.ho, geom.wo]);
        let mut col = if geom.pointwise() {
            Vec::new()
        } else {
            vec![0.0; kdim * p]
        };
        for b in 0..n {
            let xb = &x.data()[b * ci * h * wd..(b + 1) * ci * h * wd];
            let src: &[f64] = if geom.pointwise() {
                xb
            } else {
                im2col(xb, &geom, &mut col);
                &col
            };
            let ob = &mut out.data_mut()[b * co * p..(b + 1) * co * p];
            gemm(co, kdim, p, w.data(), false, src, false, ob, 0.0);
        }
        let rg = self.rg(input) || self.rg(weight);
        self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            },
            rg,
        )
    }

    /// Adds a per-channel bias of shape `[c]`.
    pub fn bias_add(&mut self, input: Var, bias: Var) -> Var {
        let mut out = self.value(input).clone();
        let (n, c, h, w) = out.dims4();
        let b = self.value(bias).data().to_vec();
        assert_eq!(b.len(), c);
        let hw = h * w;
        for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
            let bc = b[i % c];
            chunk.iter_mut().for_each(|v| *v += bc);
        }
        debug_assert_eq!(out.len(), n * c * hw);
        let rg = self.rg(input) || self.rg(bias);
        self.push(out, Op::BiasAdd { input, bias }, rg)
    }

    /// Batch normalisation over `(n, h, w)` per channel. Training mode normalises with
    /// batch statistics and queues a running-statistics update; evaluation mode uses
    /// the stored running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: BufferId,
        running_var: BufferId,
        eps: f64,
        momentum: f64,
    ) -> Var {
        let gamma_v = self.param(gamma);
        let beta_v = self.param(beta);
        let x = self.value(input);
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let m = (n * hw) as f64;
        let batch_stats = self.mode == Mode::Train;
        let (mean, var) = if batch_stats {
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    s += x.data()[off..off + hw].iter().sum::<f64>();
                }
                let mu = s / m;
                let mut ss = 0.0;
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    ss += x.data()[off..off + hw]
                        .iter()
                        .map(|v| (v - mu) * (v - mu))
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = ss / m;
            }
            (mean, var)
        } else {
            (
                self.store.buffer(running_mean).data().to_vec(),
                self.store.buffer(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let g = self.value(gamma_v).data();
        let bt = self.value(beta_v).data();
        let mut xhat = vec![0.0; x.len()];
        let mut out = Tensor::zeros(x.shape());
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out.data_mut()[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        if batch_stats {
            let correction = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
            self.bn_updates.push(BnStatUpdate {
                running_mean,
                running_var,
                momentum,
                batch_mean: mean,
                batch_var_unbiased: var.iter().map(|v| v * correction).collect(),
            });
        }
        let rg = self.rg(input) || self.rg(gamma_v) || self.rg(beta_v);
        self.push(
            out,
            Op::BatchNorm {
                input,
                gamma: gamma_v,
                beta: beta_v,
                xhat,
                inv_std,
                batch_stats,
            },
            rg,
        )
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|v| v.max(0.0));
        let rg = self.rg(input);
        self.push(out, Op::Relu(input), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add shape mismatch");
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Var {
        assert!(!inputs.is_empty());
        let (n, _, h, w) = self.value(inputs[0]).dims4();
        let mut total_c = 0;
        for &v in inputs {
            let (vn, vc, vh, vw) = self.value(v).dims4();
            assert_eq!((vn, vh, vw), (n, h, w), "concat spatial/batch mismatch");
            total_c += vc;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(n * total_c * hw);
        for b in 0..n {
            for &v in inputs {
                let t = self.value(v);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[b * c * hw..(b + 1) * c * hw]);
            }
        }
        let out = Tensor::new(&[n, total_c, h, w], data).expect("concat shape");
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(out, Op::Concat(inputs.to_vec()), rg)
    }

    /// Bilinear resize with half-pixel centres.
    pub fn resize_bilinear(&mut self, input: Var, out_h: usize, out_w: usize) -> Var {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4();
        let rows = lerp_taps(h, out_h);
        let cols = lerp_taps(w, out_w);
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        for (plane, dst) in x
            .data()
            .chunks(h * w)
            .zip(out.data_mut().chunks_mut(out_h * out_w))
        {
            for (oy, r) in rows.iter().enumerate() {
                let r0 = &plane[r.i0 * w..(r.i0 + 1) * w];
                let r1 = &plane[r.i1 * w..(r.i1 + 1) * w];
                for (ox, cl) in cols.iter().enumerate() {
                    let top = (1.0 - cl.w1) * r0[cl.i0] + cl.w1 * r0[cl.i1];
                    let bot = (1.0 - cl.w1) * r1[cl.i0] + cl.w1 * r1[cl.i1];
                    dst[oy * out_w + ox] = (1.0 - r.w1) * top + r.w1 * bot;
                }
            }
        }
        let rg = self.rg(input);
        self.push(out, Op::Resize { input, rows, cols }, rg)
    }

    pub fn adaptive_avg_pool(&mut self, input: Var, out_h: usize, out_w: usize) -> Var {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4();
        let rows = pool_windows(h, out_h);
        let cols = pool_windows(w, out_w);
        let mut out = Tensor::zeros(&[n, c, out_h, out_w]);
        for (plane, dst) in x
            .data()
            .chunks(h * w)
            .zip(out.data_mut().chunks_mut(out_h * out_w))
        {
            for (oy, &(y0, y1)) in rows.iter().enumerate() {
                for (ox, &(x0, x1)) in cols.iter().enumerate() {
                    let mut s = 0.0;
                    for y in y0..y1 {
                        s += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                    }
                    dst[oy * out_w + ox] = s / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
        let rg = self.rg(input);
        self.push(out, Op::AdaptiveAvgPool { input, rows, cols }, rg)
    }

    /// Softmax across the channel axis at every pixel.
    pub fn softmax_channels(&mut self, input: Var) -> Var {
        let x = self.value(input);
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut out = Tensor::zeros(x.shape());
        for b in 0..n {
            let base = b * c * hw;
            for i in 0..hw {
                let mut mx = f64::NEG_INFINITY;
                for ch in 0..c {
                    mx = mx.max(x.data()[base + ch * hw + i]);
                }
                let mut z = 0.0;
                for ch in 0..c {
                    let e = (x.data()[base + ch * hw + i] - mx).exp();
                    out.data_mut()[base + ch * hw + i] = e;
                    z += e;
                }
                for ch in 0..c {
                    out.data_mut()[base + ch * hw + i] /= z;
                }
            }
        }
        let rg = self.rg(input);
        self.push(out, Op::Softmax(input), rg)
    }

    /// Scalar `-sum_i coeff_i * ln(max(p_i, LOG_CLAMP))`.
    ///
    /// `coeff` folds target, mask and reduction denominator together.
    pub fn nll(&mut self, probs: Var, coeff: Vec<f64>) -> Var {
        let p = self.value(probs);
        assert_eq!(p.len(), coeff.len(), "nll coefficient length");
        let value = weighted_neg_log(p.data(), &coeff);
        let rg = self.rg(probs);
        self.push(Tensor::scalar(value), Op::Nll { probs, coeff }, rg)
    }

    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut s = 0.0;
        for &(v, k) in terms {
            let t = self.value(v);
            assert_eq!(t.len(), 1, "weighted_sum takes scalars");
            s += k * t.data()[0];
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Drains the running-statistics updates queued by training-mode batch norms.
    pub fn take_bn_updates(&mut self) -> Vec<BnStatUpdate> {
        std::mem::take(&mut self.bn_updates)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        self.backward_seeded(root, Tensor::scalar(1.0))
    }

    /// Reverse pass seeded with an arbitrary upstream gradient for `root`.
    pub fn backward_seeded(&self, root: Var, seed: Tensor) -> Gradients {
        assert_eq!(seed.shape(), self.value(root).shape(), "seed shape");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Gradients { grads }
    }

    /// Gradients for every parameter that took part in the graph.
    pub fn param_gradients(&self, grads: &Gradients) -> BTreeMap<ParamId, Tensor> {
        self.param_vars
            .iter()
            .map(|(&id, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (id, g)
            })
            .collect()
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Conv2d {
                input,
                weight,
                stride,
                padding,
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, ci, h, wd) = x.dims4();
                let (co, _, k, _) = w.dims4();
                let (_, _, ho, wo) = gy.dims4();
                let geom = ConvGeom {
                    ci,
                    h,
                    w: wd,
                    k,
                    stride: *stride,
                    pad: *padding,
                    ho,
                    wo,
                };
                let kdim = ci * k * k;
                let p = ho * wo;
                let need_x = self.rg(*input);
                let need_w = self.rg(*weight);
                let mut dw = Tensor::zeros(w.shape());
                let mut dx = Tensor::zeros(x.shape());
                let mut col = vec![0.0; if geom.pointwise() { 0 } else { kdim * p }];
                let mut dcol = vec![0.0; if geom.pointwise() || !need_x { 0 } else { kdim * p }];
                for b in 0..n {
                    let xb = &x.data()[b * ci * h * wd..(b + 1) * ci * h * wd];
                    let gb = &gy.data()[b * co * p..(b + 1) * co * p];
                    if need_w {
                        let src: &[f64] = if geom.pointwise() {
                            xb
                        } else {
                            im2col(xb, &geom, &mut col);
                            &col
                        };
                        gemm(co, p, kdim, gb, false, src, true, dw.data_mut(), 1.0);
                    }
                    if need_x {
                        let dxb = &mut dx.data_mut()[b * ci * h * wd..(b + 1) * ci * h * wd];
                        if geom.pointwise() {
                            gemm(kdim, co, p, w.data(), true, gb, false, dxb, 0.0);
                        } else {
                            gemm(kdim, co, p, w.data(), true, gb, false, &mut dcol, 0.0);
                            col2im(&dcol, &geom, dxb);
                        }
                    }
                }
                if need_w {
                    accumulate(grads, *weight, dw);
                }
                if need_x {
                    accumulate(grads, *input, dx);
                }
            }
            Op::BiasAdd { input, bias } => {
                let (_, c, h, w) = gy.dims4();
                if self.rg(*bias) {
                    let mut db = vec![0.0; c];
                    for (i, chunk) in gy.data().chunks(h * w).enumerate() {
                        db[i % c] += chunk.iter().sum::<f64>();
                    }
                    accumulate(grads, *bias, Tensor::new(&[c], db).expect("bias grad"));
                }
                if self.rg(*input) {
                    accumulate(grads, *input, gy.clone());
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c, h, w) = gy.dims4();
                let hw = h * w;
                let m = (n * hw) as f64;
                let g = self.value(*gamma).data();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * hw;
                        for i in off..off + hw {
                            sum_dy[ch] += gy.data()[i];
                            sum_dy_xhat[ch] += gy.data()[i] * xhat[i];
                        }
                    }
                }
                if self.rg(*input) {
                    let mut dx = Tensor::zeros(gy.shape());
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * hw;
                            let scale = g[ch] * inv_std[ch];
                            for i in off..off + hw {
                                dx.data_mut()[i] = if *batch_stats {
                                    scale / m
                                        * (m * gy.data()[i]
                                            - sum_dy[ch]
                                            - xhat[i] * sum_dy_xhat[ch])
                                } else {
                                    scale * gy.data()[i]
                                };
                            }
                        }
                    }
                    accumulate(grads, *input, dx);
                }
                accumulate(grads, *gamma, Tensor::new(&[c], sum_dy_xhat).expect("gamma"));
                accumulate(grads, *beta, Tensor::new(&[c], sum_dy).expect("beta"));
            }
            Op::Relu(input) => {
                let y = &node.value;
                let dx = Tensor::new(
                    gy.shape(),
                    gy.data()
                        .iter()
                        .zip(y.data())
                        .map(|(&d, &v)| if v > 0.0 { d } else { 0.0 })
                        .collect(),
                )
                .expect("relu grad");
                accumulate(grads, *input, dx);
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, gy.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, gy.clone());
                }
            }
            Op::Concat(inputs) => {
                let (n, _, h, w) = gy.dims4();
                let hw = h * w;
                let total_c = gy.shape()[1];
                let mut c_off = 0;
                for &v in inputs {
                    let c = self.value(v).shape()[1];
                    if self.rg(v) {
                        let mut data = Vec::with_capacity(n * c * hw);
                        for b in 0..n {
                            let start = (b * total_c + c_off) * hw;
                            data.extend_from_slice(&gy.data()[start..start + c * hw]);
                        }
                        accumulate(grads, v, Tensor::new(&[n, c, h, w], data).expect("concat grad"));
                    }
                    c_off += c;
                }
            }
            Op::Resize { input, rows, cols } => {
                let x = self.value(*input);
                let (_, _, h, w) = x.dims4();
                let (_, _, oh, ow) = gy.dims4();
                let mut dx = Tensor::zeros(x.shape());
                for (src, dst) in gy.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
                    for (oy, r) in rows.iter().enumerate() {
                        for (ox, cl) in cols.iter().enumerate() {
                            let d = src[oy * ow + ox];
                            let top = (1.0 - r.w1) * d;
                            let bot = r.w1 * d;
                            dst[r.i0 * w + cl.i0] += (1.0 - cl.w1) * top;
                            dst[r.i0 * w + cl.i1] += cl.w1 * top;
                            dst[r.i1 * w + cl.i0] += (1.0 - cl.w1) * bot;
                            dst[r.i1 * w + cl.i1] += cl.w1 * bot;
                        }
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::AdaptiveAvgPool { input, rows, cols } => {
                let x = self.value(*input);
                let (_, _, h, w) = x.dims4();
                let (_, _, oh, ow) = gy.dims4();
                let mut dx = Tensor::zeros(x.shape());
                for (src, dst) in gy.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
                    for (oy, &(y0, y1)) in rows.iter().enumerate() {
                        for (ox, &(x0, x1)) in cols.iter().enumerate() {
                            let d = src[oy * ow + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                            for y in y0..y1 {
                                dst[y * w + x0..y * w + x1].iter_mut().for_each(|v| *v += d);
                            }
                        }
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::Softmax(input) => {
                let y = &node.value;
                let (n, c, h, w) = y.dims4();
                let hw = h * w;
                let mut dx = Tensor::zeros(y.shape());
                for b in 0..n {
                    let base = b * c * hw;
                    for i in 0..hw {
                        let mut dot = 0.0;
                        for ch in 0..c {
                            let k = base + ch * hw + i;
                            dot += y.data()[k] * gy.data()[k];
                        }
                        for ch in 0..c {
                            let k = base + ch * hw + i;
                            dx.data_mut()[k] = y.data()[k] * (gy.data()[k] - dot);
                        }
                    }
                }
                accumulate(grads, *input, dx);
            }
            Op::Nll { probs, coeff } => {
                let g = gy.data()[0];
                let p = self.value(*probs);
                let dx = Tensor::new(
                    p.shape(),
                    p.data()
                        .iter()
                        .zip(coeff)
                        .map(|(&y, &k)| {
                            if k != 0.0 && y > LOG_CLAMP {
                                -g * k / y
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                )
                .expect("nll grad");
                accumulate(grads, *probs, dx);
            }
            Op::WeightedSum(terms) => {
                let g = gy.data()[0];
                for &(v, k) in terms {
                    if self.rg(v) {
                        accumulate(grads, v, Tensor::scalar(g * k));
                    }
                }
            }
        }
    }
}

/// `-sum_i coeff_i * ln(max(p_i, LOG_CLAMP))`, skipping zero coefficients.
pub fn weighted_neg_log(probs: &[f64], coeff: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&p, &k) in probs.iter().zip(coeff) {
        if k != 0.0 {
            s -= k * p.max(LOG_CLAMP).ln();
        }
    }
    s
}
