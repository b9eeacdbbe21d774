//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; nodes are
//! appended in evaluation order, so reverse creation order is a valid
//! topological order for the backward sweep.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::conv::{col2im_rows, im2col_rows, tile_rows, ConvGeom};
use super::{ParamId, ParamStore, Scalar, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    AddScalar(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    InstanceNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    UpsampleNearest(Var, usize),
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool(Var, usize),
    GlobalAvgPool(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    SpectralNorm {
        w: Var,
        u: Vec<T>,
        v: Vec<T>,
        sigma: T,
    },
    BceWithLogits {
        x: Var,
        target: Tensor<T>,
        weight: Tensor<T>,
        norm: T,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<(usize, ParamId), Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of one backward sweep, kept for parameter leaves only.
pub struct Gradients<T> {
    grads: BTreeMap<usize, Tensor<T>>,
    inputs: BTreeMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Adds the gradients of every parameter of `store` used in `graph`.
    pub fn apply(&self, graph: &Graph<T>, store: &mut ParamStore<T>) {
        let uid = store.uid();
        for (&(s, pid), var) in &graph.params {
            if s != uid {
                continue;
            }
            if let Some(g) = self.grads.get(&var.0) {
                store.accumulate_grad(pid, g);
            }
        }
    }

    /// Gradient of a leaf created with [`Graph::input_with_grad`].
    pub fn input_grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v.0)
    }
}

fn sum_slice<T: Scalar>(s: &[T]) -> T {
    s.iter().fold(T::zero(), |a, &b| a + b)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is reported by [`Gradients::input_grad`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copy of `v`'s value that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.input(t)
    }

    /// Leaf for a stored parameter; repeated calls reuse the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = (store.uid(), id);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let needs = store.requires_grad() && store.is_trainable(id);
        let v = self.push(store.value(id).clone(), Op::Leaf, needs);
        self.params.insert(key, v);
        v
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let out = self.value(x).map(f);
        let ng = self.ng(x);
        self.push(out, op, ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.dims(), vb.dims(), "elementwise op on mismatched dims");
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let out = Tensor::from_vec(va.dims(), data);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |p, q| p * q, Op::Mul(a, b))
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: Var, c: Tensor<T>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.dims(), c.dims());
        let data = vx
            .data()
            .iter()
            .zip(c.data())
            .map(|(&p, &q)| p * q)
            .collect();
        let out = Tensor::from_vec(vx.dims(), data);
        let ng = self.ng(x);
        self.push(out, Op::MulConst(x, c), ng)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.sum() / T::from_usize(v.numel()).unwrap();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// `mean(|a - b|)`.
    pub fn l1(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let d = self.abs(d);
        self.mean(d)
    }

    /// `½·mean((x - target)²)`, the least-squares adversarial term.
    pub fn lsgan_term(&mut self, x: Var, target: T) -> Var {
        let d = self.add_scalar(x, -target);
        let sq = self.square(d);
        let m = self.mean(sq);
        self.scale(m, T::lit(0.5))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { v * slope },
            Op::LeakyRelu(x, slope),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let (n, c, h, wd) = self.value(x).nchw();
        let (o, wc, kh, kw) = self.value(w).nchw();
        assert_eq!(c, wc, "conv2d channel mismatch");
        assert!(kh == geom.kernel && kw == geom.kernel);
        let (oh, ow) = (geom.conv_out(h), geom.conv_out(wd));
        let kk = c * kh * kw;
        let p = oh * ow;
        let mut out = Tensor::zeros(&[n, o, oh, ow]);
        let rows = tile_rows(kk, ow, oh);
        let mut cols = vec![T::zero(); kk * rows * ow];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            for i in 0..n {
                let xs = &xv[i * c * h * wd..(i + 1) * c * h * wd];
                let oi = &mut od[i * o * p..(i + 1) * o * p];
                for y0 in (0..oh).step_by(rows) {
                    let y1 = (y0 + rows).min(oh);
                    let tp = (y1 - y0) * ow;
                    im2col_rows(xs, c, h, wd, geom, ow, y0, y1, &mut cols[..kk * tp]);
                    T::gemm_ld(
                        false,
                        false,
                        o,
                        tp,
                        kk,
                        T::one(),
                        wv,
                        kk,
                        &cols,
                        tp,
                        T::zero(),
                        &mut oi[y0 * ow..],
                        p,
                    );
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for i in 0..n {
                    for oc in 0..o {
                        let base = (i * o + oc) * p;
                        od[base..base + p].iter_mut().for_each(|v| *v = *v + bv[oc]);
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Conv2d { x, w, b, geom }, ng)
    }

    /// Transposed convolution; `w` has dims `[c_in, c_out, k, k]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let (n, cin, h, wd) = self.value(x).nchw();
        let (wcin, cout, kh, kw) = self.value(w).nchw();
        assert_eq!(cin, wcin, "conv_transpose2d channel mismatch");
        assert!(kh == geom.kernel && kw == geom.kernel);
        let (oh, ow) = (geom.transpose_out(h), geom.transpose_out(wd));
        let kk = cout * kh * kw;
        let p = h * wd;
        let mut out = Tensor::zeros(&[n, cout, oh, ow]);
        let rows = tile_rows(kk, wd, h);
        let mut cols = vec![T::zero(); kk * rows * wd];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let od = out.data_mut();
            for i in 0..n {
                let xs = &xv[i * cin * p..(i + 1) * cin * p];
                let oi = &mut od[i * cout * oh * ow..(i + 1) * cout * oh * ow];
                for y0 in (0..h).step_by(rows) {
                    let y1 = (y0 + rows).min(h);
                    let tp = (y1 - y0) * wd;
                    T::gemm_ld(
                        true,
                        false,
                        kk,
                        tp,
                        cin,
                        T::one(),
                        wv,
                        kk,
                        &xs[y0 * wd..],
                        p,
                        T::zero(),
                        &mut cols,
                        tp,
                    );
                    col2im_rows(&cols[..kk * tp], cout, oh, ow, geom, wd, y0, y1, oi);
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                let q = oh * ow;
                for i in 0..n {
                    for oc in 0..cout {
                        let base = (i * cout + oc) * q;
                        od[base..base + q].iter_mut().for_each(|v| *v = *v + bv[oc]);
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::ConvTranspose2d { x, w, b, geom }, ng)
    }

    /// `x·wᵀ + b` with `x: [n, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xd = self.value(x).dims();
        let (n, fin) = (xd[0], xd[1]);
        let wd = self.value(w).dims();
        let fout = wd[0];
        assert_eq!(wd[1], fin, "linear feature mismatch");
        let mut out = Tensor::zeros(&[n, fout]);
        T::gemm(
            false,
            true,
            n,
            fout,
            fin,
            T::one(),
            self.value(x).data(),
            self.value(w).data(),
            T::zero(),
            out.data_mut(),
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.data_mut().chunks_mut(fout) {
                row.iter_mut().zip(bv).for_each(|(v, &bb)| *v = *v + bb);
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    /// Batch normalization over `[N, C, ...]`. With `batch_stats` the batch
    /// statistics are used and returned as `(mean, biased var)`; otherwise the
    /// given running statistics are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> (Var, Vec<T>, Vec<T>) {
        let dims = self.value(x).dims().to_vec();
        let (n, c) = (dims[0], dims[1]);
        let hw: usize = dims[2..].iter().product();
        let m = T::from_usize(n * hw).unwrap();
        let xv = self.value(x).data();
        let (mean, var) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec()),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..n {
                        s = s + sum_slice(&xv[(i * c + ch) * hw..(i * c + ch + 1) * hw]);
                    }
                    let mu = s / m;
                    let mut ss = T::zero();
                    for i in 0..n {
                        for &v in &xv[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            ss = ss + (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = ss / m;
                }
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Tensor::zeros(&dims);
        {
            let od = out.data_mut();
            for i in 0..n {
                for ch in 0..c {
                    let base = (i * c + ch) * hw;
                    let (mu, is, g, b) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                    for k in base..base + hw {
                        od[k] = g * (xv[k] - mu) * is + b;
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let batch_stats = running.is_none();
        let v = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                inv_std,
                batch_stats,
            },
            ng,
        );
        (v, mean, var)
    }

    /// Per-sample, per-channel standardization without affine parameters.
    /// A constant map normalizes to zero.
    pub fn instance_norm(&mut self, x: Var, eps: T) -> Var {
        let (n, c, h, w) = self.value(x).nchw();
        let hw = h * w;
        let m = T::from_usize(hw).unwrap();
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, h, w]);
        let mut inv_std = Vec::with_capacity(n * c);
        {
            let od = out.data_mut();
            for plane in 0..n * c {
                let src = &xv[plane * hw..(plane + 1) * hw];
                let mu = sum_slice(src) / m;
                let var = src.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu)) / m;
                let is = T::one() / (var + eps).sqrt();
                inv_std.push(is);
                for (o, &v) in od[plane * hw..(plane + 1) * hw].iter_mut().zip(src) {
                    *o = (v - mu) * is;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::InstanceNorm { x, inv_std }, ng)
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Var {
        let (n, c, h, w) = self.value(x).nchw();
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        {
            let od = out.data_mut();
            for plane in 0..n * c {
                let src = &xv[plane * h * w..];
                let dst = &mut od[plane * oh * ow..(plane + 1) * oh * ow];
                for y in 0..oh {
                    let sy = y / factor;
                    for xx in 0..ow {
                        dst[y * ow + xx] = src[sy * w + xx / factor];
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::UpsampleNearest(x, factor), ng)
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/cols dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).nchw();
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        let mut argmax = vec![0u32; n * c * oh * ow];
        {
            let od = out.data_mut();
            for plane in 0..n * c {
                let src = &xv[plane * h * w..(plane + 1) * h * w];
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = (2 * y) * w + 2 * xx;
                        for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                            let idx = (2 * y + dy) * w + 2 * xx + dx;
                            if src[idx] > src[best] {
                                best = idx;
                            }
                        }
                        let o = plane * oh * ow + y * ow + xx;
                        od[o] = src[best];
                        argmax[o] = best as u32;
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::MaxPool2 { x, argmax }, ng)
    }

    /// `k×k` average pooling with stride `k`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let (n, c, h, w) = self.value(x).nchw();
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x).data();
        let norm = T::one() / T::from_usize(k * k).unwrap();
        let mut out = Tensor::zeros(&[n, c, oh, ow]);
        {
            let od = out.data_mut();
            for plane in 0..n * c {
                let src = &xv[plane * h * w..];
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut s = T::zero();
                        for dy in 0..k {
                            let row = (y * k + dy) * w + xx * k;
                            s = s + sum_slice(&src[row..row + k]);
                        }
                        od[plane * oh * ow + y * ow + xx] = s * norm;
                    }
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::AvgPool(x, k), ng)
    }

    /// Mean over spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).nchw();
        let hw = h * w;
        let m = T::from_usize(hw).unwrap();
        let xv = self.value(x).data();
        let data = (0..n * c)
            .map(|p| sum_slice(&xv[p * hw..(p + 1) * hw]) / m)
            .collect();
        let ng = self.ng(x);
        self.push(Tensor::from_vec(&[n, c], data), Op::GlobalAvgPool(x), ng)
    }

    /// Concatenation along `axis`; all other dims must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let d0 = self.dims(parts[0]).to_vec();
        let outer: usize = d0[..axis].iter().product();
        let inner: usize = d0[axis + 1..].iter().product();
        let mut total = 0;
        for &p in parts {
            let d = self.dims(p);
            assert_eq!(d.len(), d0.len());
            assert!(
                d[..axis] == d0[..axis] && d[axis + 1..] == d0[axis + 1..],
                "concat dims mismatch"
            );
            total += d[axis];
        }
        let mut dims = d0.clone();
        dims[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.dims(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(
            Tensor::from_vec(&dims, data),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let d = self.dims(x).to_vec();
        assert!(start + len <= d[axis]);
        let outer: usize = d[..axis].iter().product();
        let inner: usize = d[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d[axis] + start) * inner;
            data.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut dims = d.clone();
        dims[axis] = len;
        let ng = self.ng(x);
        self.push(
            Tensor::from_vec(&dims, data),
            Op::Narrow { x, axis, start },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Var {
        let out = self.value(x).clone().reshaped(dims);
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng)
    }

    /// `w / σ` where `σ = uᵀ·W·v` with `W` the weight viewed as
    /// `[dims[0], rest]`; `u` and `v` are treated as constants.
    pub fn spectral_normalize(&mut self, w: Var, u: Vec<T>, v: Vec<T>) -> (Var, T) {
        let wt = self.value(w);
        let rows = wt.dims()[0];
        let cols = wt.numel() / rows;
        assert!(u.len() == rows && v.len() == cols);
        let mut wv = vec![T::zero(); rows];
        T::gemm(
            false,
            false,
            rows,
            1,
            cols,
            T::one(),
            wt.data(),
            &v,
            T::zero(),
            &mut wv,
        );
        let sigma = u.iter().zip(&wv).fold(T::zero(), |a, (&p, &q)| a + p * q);
        let inv = T::one() / sigma;
        let out = wt.map(|x| x * inv);
        let ng = self.ng(w);
        (
            self.push(out, Op::SpectralNorm { w, u, v, sigma }, ng),
            sigma,
        )
    }

    /// Weighted binary cross-entropy on logits, summed and divided by `norm`.
    pub fn bce_with_logits(
        &mut self,
        x: Var,
        target: Tensor<T>,
        weight: Tensor<T>,
        norm: T,
    ) -> Var {
        let xv = self.value(x);
        assert!(xv.dims() == target.dims() && xv.dims() == weight.dims());
        let mut s = T::zero();
        for ((&l, &t), &w) in xv.data().iter().zip(target.data()).zip(weight.data()) {
            if w != T::zero() {
                s = s + w * (l.max(T::zero()) - l * t + (T::one() + (-l.abs()).exp()).ln());
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::scalar(s / norm),
            Op::BceWithLogits {
                x,
                target,
                weight,
                norm,
            },
            ng,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).dims(), T::one()));
        let mut keep = BTreeMap::new();
        let mut inputs = BTreeMap::new();
        let param_nodes: alloc::collections::BTreeSet<usize> =
            self.params.values().map(|v| v.0).collect();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                if param_nodes.contains(&i) {
                    keep.insert(i, g);
                } else {
                    inputs.insert(i, g);
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Gradients {
            grads: keep,
            inputs,
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn zip_map(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        Tensor::from_vec(a.dims(), data)
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, Self::zip_map(g, self.value(*b), |p, q| p * q));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, Self::zip_map(g, self.value(*a), |p, q| p * q));
                }
            }
            Op::MulConst(x, c) => self.acc(grads, *x, Self::zip_map(g, c, |p, q| p * q)),
            Op::Scale(x, s) => {
                let s = *s;
                self.acc(grads, *x, g.map(|v| v * s));
            }
            Op::AddScalar(x) => self.acc(grads, *x, g.clone()),
            Op::Abs(x) => {
                let r = Self::zip_map(g, self.value(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else if xv < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                self.acc(grads, *x, r);
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                self.acc(
                    grads,
                    *x,
                    Self::zip_map(g, self.value(*x), |gv, xv| two * xv * gv),
                );
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.acc(grads, *x, Tensor::full(self.dims(*x), gv));
            }
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).numel()).unwrap();
                self.acc(grads, *x, Tensor::full(self.dims(*x), g.item() / n));
            }
            Op::Relu(x) => {
                let r = Self::zip_map(g, self.value(*x), |gv, xv| {
                    if xv > T::zero() {
                        gv
                    } else {
                        T::zero()
                    }
                });
                self.acc(grads, *x, r);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let r = Self::zip_map(
                    g,
                    self.value(*x),
                    |gv, xv| if xv > T::zero() { gv } else { gv * s },
                );
                self.acc(grads, *x, r);
            }
            Op::Sigmoid(x) => {
                let r = Self::zip_map(g, &node.value, |gv, y| gv * y * (T::one() - y));
                self.acc(grads, *x, r);
            }
            Op::Tanh(x) => {
                let r = Self::zip_map(g, &node.value, |gv, y| gv * (T::one() - y * y));
                self.acc(grads, *x, r);
            }
            Op::Conv2d { x, w, b, geom } => self.conv2d_backward(g, *x, *w, *b, *geom, grads),
            Op::ConvTranspose2d { x, w, b, geom } => {
                self.conv_t_backward(g, *x, *w, *b, *geom, grads)
            }
            Op::Linear { x, w, b } => {
                let xd = self.dims(*x);
                let (n, fin) = (xd[0], xd[1]);
                let fout = self.dims(*w)[0];
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(&[n, fin]);
                    T::gemm(
                        false,
                        false,
                        n,
                        fin,
                        fout,
                        T::one(),
                        g.data(),
                        self.value(*w).data(),
                        T::zero(),
                        dx.data_mut(),
                    );
                    self.acc(grads, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = Tensor::zeros(&[fout, fin]);
                    T::gemm(
                        true,
                        false,
                        fout,
                        fin,
                        n,
                        T::one(),
                        g.data(),
                        self.value(*x).data(),
                        T::zero(),
                        dw.data_mut(),
                    );
                    self.acc(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let mut db = Tensor::zeros(&[fout]);
                        for row in g.data().chunks(fout) {
                            db.data_mut()
                                .iter_mut()
                                .zip(row)
                                .for_each(|(d, &v)| *d = *d + v);
                        }
                        self.acc(grads, *b, db);
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let dims = self.dims(*x);
                let (n, c) = (dims[0], dims[1]);
                let hw: usize = dims[2..].iter().product();
                let m = T::from_usize(n * hw).unwrap();
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let gd = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * hw;
                        for k in base..base + hw {
                            let xhat = (xv[k] - mean[ch]) * inv_std[ch];
                            dgamma[ch] = dgamma[ch] + gd[k] * xhat;
                            dbeta[ch] = dbeta[ch] + gd[k];
                        }
                    }
                }
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(dims);
                    let dd = dx.data_mut();
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * hw;
                            let scale = gam[ch] * inv_std[ch];
                            for k in base..base + hw {
                                dd[k] = if *batch_stats {
                                    let xhat = (xv[k] - mean[ch]) * inv_std[ch];
                                    scale / m * (m * gd[k] - dbeta[ch] - xhat * dgamma[ch])
                                } else {
                                    scale * gd[k]
                                };
                            }
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                self.acc(grads, *gamma, Tensor::from_vec(&[c], dgamma));
                self.acc(grads, *beta, Tensor::from_vec(&[c], dbeta));
            }
            Op::InstanceNorm { x, inv_std } => {
                let (n, c, h, w) = node.value.nchw();
                let hw = h * w;
                let m = T::from_usize(hw).unwrap();
                let y = node.value.data();
                let gd = g.data();
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dd = dx.data_mut();
                for plane in 0..n * c {
                    let r = plane * hw..(plane + 1) * hw;
                    let sg = sum_slice(&gd[r.clone()]);
                    let sgy = gd[r.clone()]
                        .iter()
                        .zip(&y[r.clone()])
                        .fold(T::zero(), |a, (&p, &q)| a + p * q);
                    let is = inv_std[plane];
                    for k in r {
                        dd[k] = is / m * (m * gd[k] - sg - y[k] * sgy);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::UpsampleNearest(x, factor) => {
                let (n, c, h, w) = self.value(*x).nchw();
                let f = *factor;
                let (oh, ow) = (h * f, w * f);
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dd = dx.data_mut();
                let gd = g.data();
                for plane in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let k = plane * h * w + (y / f) * w + xx / f;
                            dd[k] = dd[k] + gd[plane * oh * ow + y * ow + xx];
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::MaxPool2 { x, argmax } => {
                let (n, c, h, w) = self.value(*x).nchw();
                let per = argmax.len() / (n * c);
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dd = dx.data_mut();
                for (o, (&a, &gv)) in argmax.iter().zip(g.data()).enumerate() {
                    let plane = o / per;
                    let k = plane * h * w + a as usize;
                    dd[k] = dd[k] + gv;
                }
                self.acc(grads, *x, dx);
            }
            Op::AvgPool(x, k) => {
                let (n, c, h, w) = self.value(*x).nchw();
                let k = *k;
                let (oh, ow) = (h / k, w / k);
                let norm = T::one() / T::from_usize(k * k).unwrap();
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let dd = dx.data_mut();
                let gd = g.data();
                for plane in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let gv = gd[plane * oh * ow + y * ow + xx] * norm;
                            for dy in 0..k {
                                let row = plane * h * w + (y * k + dy) * w + xx * k;
                                dd[row..row + k].iter_mut().for_each(|v| *v = *v + gv);
                            }
                        }
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.value(*x).nchw();
                let hw = h * w;
                let m = T::from_usize(hw).unwrap();
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                for (plane, &gv) in g.data().iter().enumerate() {
                    let v = gv / m;
                    dx.data_mut()[plane * hw..(plane + 1) * hw]
                        .iter_mut()
                        .for_each(|d| *d = v);
                }
                self.acc(grads, *x, dx);
            }
            Op::Concat { parts, axis } => {
                let dims = node.value.dims();
                let outer: usize = dims[..*axis].iter().product();
                let inner: usize = dims[axis + 1..].iter().product();
                let total = dims[*axis];
                let mut offset = 0;
                for &p in parts {
                    let pd = self.dims(p).to_vec();
                    let len = pd[*axis];
                    if self.ng(p) {
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            data.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        self.acc(grads, p, Tensor::from_vec(&pd, data));
                    }
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xd = self.dims(*x).to_vec();
                let outer: usize = xd[..*axis].iter().product();
                let inner: usize = xd[axis + 1..].iter().product();
                let len = node.value.dims()[*axis];
                let mut dx = Tensor::zeros(&xd);
                for o in 0..outer {
                    let dst = (o * xd[*axis] + start) * inner;
                    let src = o * len * inner;
                    dx.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.acc(grads, *x, dx);
            }
            Op::Reshape(x) => {
                let d = self.dims(*x).to_vec();
                self.acc(grads, *x, g.clone().reshaped(&d));
            }
            Op::SpectralNorm { w, u, v, sigma } => {
                // dW = (G - <G, W_sn>·u vᵀ) / σ
                let wsn = &node.value;
                let rows = u.len();
                let cols = v.len();
                let inner = wsn
                    .data()
                    .iter()
                    .zip(g.data())
                    .fold(T::zero(), |a, (&p, &q)| a + p * q);
                let inv = T::one() / *sigma;
                let mut dw = g.clone();
                {
                    let dd = dw.data_mut();
                    for r in 0..rows {
                        for c in 0..cols {
                            let k = r * cols + c;
                            dd[k] = (dd[k] - inner * u[r] * v[c]) * inv;
                        }
                    }
                }
                self.acc(grads, *w, dw);
            }
            Op::BceWithLogits {
                x,
                target,
                weight,
                norm,
            } => {
                let gv = g.item() / *norm;
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(target.data())
                    .zip(weight.data())
                    .map(|((&l, &t), &w)| gv * w * (sigmoid(l) - t))
                    .collect();
                self.acc(grads, *x, Tensor::from_vec(xv.dims(), data));
            }
        }
    }

    fn conv2d_backward(
        &self,
        g: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, c, h, wd) = self.value(x).nchw();
        let (o, _, k, _) = self.value(w).nchw();
        let (_, _, oh, ow) = g.nchw();
        let kk = c * k * k;
        let p = oh * ow;
        let need_x = self.ng(x);
        let need_w = self.ng(w);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gd = g.data();
        let rows = tile_rows(kk, ow, oh);
        let mut cols = vec![T::zero(); kk * rows * ow];
        let mut dw = if need_w {
            Some(Tensor::zeros(self.dims(w)))
        } else {
            None
        };
        let mut dx = if need_x {
            Some(Tensor::zeros(&[n, c, h, wd]))
        } else {
            None
        };
        for i in 0..n {
            let gi = &gd[i * o * p..(i + 1) * o * p];
            let xs = &xv[i * c * h * wd..(i + 1) * c * h * wd];
            for y0 in (0..oh).step_by(rows) {
                let y1 = (y0 + rows).min(oh);
                let tp = (y1 - y0) * ow;
                let gt = &gi[y0 * ow..];
                if let Some(dw) = dw.as_mut() {
                    im2col_rows(xs, c, h, wd, geom, ow, y0, y1, &mut cols[..kk * tp]);
                    T::gemm_ld(
                        false,
                        true,
                        o,
                        kk,
                        tp,
                        T::one(),
                        gt,
                        p,
                        &cols,
                        tp,
                        T::one(),
                        dw.data_mut(),
                        kk,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    T::gemm_ld(
                        true,
                        false,
                        kk,
                        tp,
                        o,
                        T::one(),
                        wv,
                        kk,
                        gt,
                        p,
                        T::zero(),
                        &mut cols,
                        tp,
                    );
                    let di = &mut dx.data_mut()[i * c * h * wd..(i + 1) * c * h * wd];
                    col2im_rows(&cols[..kk * tp], c, h, wd, geom, ow, y0, y1, di);
                }
            }
        }
        if let Some(dw) = dw {
            self.acc(grads, w, dw);
        }
        if let Some(dx) = dx {
            self.acc(grads, x, dx);
        }
        if let Some(b) = b {
            if self.ng(b) {
                let mut db = Tensor::zeros(&[o]);
                for i in 0..n {
                    for oc in 0..o {
                        let base = (i * o + oc) * p;
                        db.data_mut()[oc] = db.data()[oc] + sum_slice(&gd[base..base + p]);
                    }
                }
                self.acc(grads, b, db);
            }
        }
    }

    fn conv_t_backward(
        &self,
        g: &Tensor<T>,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (n, cin, h, wd) = self.value(x).nchw();
        let (_, cout, k, _) = self.value(w).nchw();
        let (_, _, oh, ow) = g.nchw();
        let kk = cout * k * k;
        let p = h * wd;
        let q = oh * ow;
        let need_x = self.ng(x);
        let need_w = self.ng(w);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let gd = g.data();
        let rows = tile_rows(kk, wd, h);
        let mut cols = vec![T::zero(); kk * rows * wd];
        let mut dw = if need_w {
            Some(Tensor::zeros(self.dims(w)))
        } else {
            None
        };
        let mut dx = if need_x {
            Some(Tensor::zeros(&[n, cin, h, wd]))
        } else {
            None
        };
        if need_x || need_w {
            for i in 0..n {
                let gi = &gd[i * cout * q..(i + 1) * cout * q];
                for y0 in (0..h).step_by(rows) {
                    let y1 = (y0 + rows).min(h);
                    let tp = (y1 - y0) * wd;
                    im2col_rows(gi, cout, oh, ow, geom, wd, y0, y1, &mut cols[..kk * tp]);
                    if let Some(dx) = dx.as_mut() {
                        let di = &mut dx.data_mut()[i * cin * p..(i + 1) * cin * p];
                        T::gemm_ld(
                            false,
                            false,
                            cin,
                            tp,
                            kk,
                            T::one(),
                            wv,
                            kk,
                            &cols,
                            tp,
                            T::zero(),
                            &mut di[y0 * wd..],
                            p,
                        );
                    }
                    if let Some(dw) = dw.as_mut() {
                        let xs = &xv[i * cin * p + y0 * wd..];
                        T::gemm_ld(
                            false,
                            true,
                            cin,
                            kk,
                            tp,
                            T::one(),
                            xs,
                            p,
                            &cols,
                            tp,
                            T::one(),
                            dw.data_mut(),
                            kk,
                        );
                    }
                }
            }
        }
        if let Some(dw) = dw {
            self.acc(grads, w, dw);
        }
        if let Some(dx) = dx {
            self.acc(grads, x, dx);
        }
        if let Some(b) = b {
            if self.ng(b) {
                let mut db = Tensor::zeros(&[cout]);
                for i in 0..n {
                    for oc in 0..cout {
                        let base = (i * cout + oc) * q;
                        db.data_mut()[oc] = db.data()[oc] + sum_slice(&gd[base..base + q]);
                    }
                }
                self.acc(grads, b, db);
            }
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Checks d(sum(f(x) ⊙ r))/dx against central differences.
    fn check(dims: &[usize], f: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_tensor(dims, &mut rng);
        let eval =
            |x: &Tensor<f64>, r: Option<&Tensor<f64>>| -> (f64, Tensor<f64>, Option<Tensor<f64>>) {
                let mut g = Graph::new();
                let xv = g.input_with_grad(x.clone());
                let y = f(&mut g, xv);
                let out = g.value(y).clone();
                let Some(r) = r else { return (0.0, out, None) };
                let yr = g.mul_const(y, r.clone());
                let l = g.sum(yr);
                let grads = g.backward(l);
                (g.value(l).item(), out, grads.input_grad(xv).cloned())
            };
        let (_, y0, _) = eval(&x0, None);
        let r = rand_tensor(y0.dims(), &mut rng);
        let (_, _, analytic) = eval(&x0, Some(&r));
        let analytic = analytic.expect("input gradient");
        let h = 1e-6;
        for i in 0..x0.numel() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let num = (eval(&xp, Some(&r)).0 - eval(&xm, Some(&r)).0) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (a - num).abs() <= 1e-6 + 1e-5 * num.abs(),
                "element {i}: analytic {a} vs numeric {num}"
            );
        }
    }

    fn fixed(dims: &[usize], seed: u64) -> Tensor<f64> {
        rand_tensor(dims, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn elementwise_gradients() {
        check(&[2, 3], |g, x| {
            let c = g.input(fixed(&[2, 3], 1));
            let a = g.mul(x, x);
            let b = g.sub(a, c);
            let t = g.tanh(b);
            let s = g.sigmoid(x);
            let u = g.add(t, s);
            let l = g.leaky_relu(u, 0.2);
            let q = g.square(l);
            let w = g.scale(q, 1.5);
            g.add_scalar(w, 0.3)
        });
        check(&[5], |g, x| {
            let y = g.add_scalar(x, 0.05);
            g.abs(y)
        });
        check(&[4], |g, x| g.relu(x));
    }

    #[test]
    fn reductions_gradients() {
        check(&[3, 4], |g, x| g.mean(x));
        check(&[3, 4], |g, x| {
            let s = g.sum(x);
            g.square(s)
        });
        check(&[2, 3, 4, 4], |g, x| g.global_avg_pool(x));
    }

    #[test]
    fn conv_gradients() {
        for geom in [
            ConvGeom::new(3, 1, 1, 1),
            ConvGeom::new(5, 2, 2, 1),
            ConvGeom::new(3, 1, 2, 2),
            ConvGeom::new(4, 2, 1, 1),
        ] {
            check(&[2, 2, 6, 6], |g, x| {
                let w = g.input_with_grad(fixed(&[3, 2, geom.kernel, geom.kernel], 5));
                let b = g.input(fixed(&[3], 6));
                g.conv2d(x, w, Some(b), geom)
            });
            // gradient w.r.t. the weight, input held fixed
            check(&[3, 2, geom.kernel, geom.kernel], |g, w| {
                let x = g.input(fixed(&[2, 2, 6, 6], 7));
                g.conv2d(x, w, None, geom)
            });
        }
    }

    #[test]
    fn conv_transpose_gradients() {
        let geom = ConvGeom::new(4, 2, 1, 1);
        check(&[2, 3, 3, 3], |g, x| {
            let w = g.input(fixed(&[3, 2, 4, 4], 8));
            let b = g.input(fixed(&[2], 9));
            let y = g.conv_transpose2d(x, w, Some(b), geom);
            assert_eq!(g.dims(y), &[2, 2, 6, 6]);
            y
        });
        check(&[3, 2, 4, 4], |g, w| {
            let x = g.input(fixed(&[2, 3, 3, 3], 10));
            g.conv_transpose2d(x, w, None, geom)
        });
    }

    #[test]
    fn conv_transpose_is_adjoint_of_conv() {
        let geom = ConvGeom::new(4, 2, 1, 1);
        let x = fixed(&[1, 2, 8, 8], 1);
        let y = fixed(&[1, 3, 4, 4], 2);
        let w = fixed(&[3, 2, 4, 4], 3);
        let mut g = Graph::new();
        let (xv, yv, wv) = (g.input(x.clone()), g.input(y.clone()), g.input(w));
        let cx = g.conv2d(xv, wv, None, geom);
        let ty = g.conv_transpose2d(yv, wv, None, geom);
        let lhs: f64 = g
            .value(cx)
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = g
            .value(ty)
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn linear_gradients() {
        check(&[3, 4], |g, x| {
            let w = g.input(fixed(&[5, 4], 2));
            let b = g.input(fixed(&[5], 3));
            g.linear(x, w, Some(b))
        });
        check(&[5, 4], |g, w| {
            let x = g.input(fixed(&[3, 4], 4));
            g.linear(x, w, None)
        });
    }

    #[test]
    fn normalization_gradients() {
        check(&[3, 2, 3, 3], |g, x| {
            let gamma = g.input(fixed(&[2], 1));
            let beta = g.input(fixed(&[2], 2));
            g.batch_norm(x, gamma, beta, None, 1e-5).0
        });
        check(&[2], |g, gamma| {
            let x = g.input(fixed(&[3, 2, 2, 2], 3));
            let beta = g.input(fixed(&[2], 2));
            g.batch_norm(x, gamma, beta, None, 1e-5).0
        });
        check(&[3, 2, 3, 3], |g, x| {
            let gamma = g.input(fixed(&[2], 1));
            let beta = g.input(fixed(&[2], 2));
            g.batch_norm(x, gamma, beta, Some((&[0.1, -0.2], &[1.5, 0.7])), 1e-5)
                .0
        });
        check(&[2, 3, 4, 4], |g, x| g.instance_norm(x, 1e-5));
    }

    #[test]
    fn spatial_gradients() {
        check(&[1, 2, 3, 3], |g, x| g.upsample_nearest(x, 2));
        check(&[1, 2, 4, 6], |g, x| g.max_pool2(x));
        check(&[1, 2, 4, 4], |g, x| g.avg_pool(x, 2));
    }

    #[test]
    fn shape_gradients() {
        check(&[2, 3, 2, 2], |g, x| {
            let c = g.input(fixed(&[2, 1, 2, 2], 3));
            let y = g.concat(&[x, c, x], 1);
            g.narrow(y, 1, 2, 4)
        });
        check(&[2, 6], |g, x| g.reshape(x, &[3, 4]));
    }

    #[test]
    fn spectral_normalize_gradient() {
        let u = fixed(&[3], 1).into_data();
        let v = fixed(&[8], 2).into_data();
        check(&[3, 2, 2, 2], move |g, w| {
            g.spectral_normalize(w, u.clone(), v.clone()).0
        });
    }

    #[test]
    fn bce_gradient_and_value() {
        let t = Tensor::from_vec(&[4], vec![1.0, 0.0, 1.0, 0.0]);
        let w = Tensor::from_vec(&[4], vec![1.0, 1.0, 0.0, 2.0]);
        check(&[4], |g, x| g.bce_with_logits(x, t.clone(), w.clone(), 3.0));
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1], vec![0.0]));
        let l = g.bce_with_logits(x, Tensor::scalar(1.0), Tensor::scalar(1.0), 1.0);
        assert!((g.value(l).item() - core::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn instance_norm_of_constant_is_zero() {
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[1, 2, 4, 4], 3.0f64));
        let y = g.instance_norm(x, 1e-5);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reused_parameter_accumulates() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::from_vec(&[2], vec![1.0, 2.0]));
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let p = g.mul(a, b);
        let l = g.sum(p);
        g.backward(l).apply(&g, &mut store);
        assert_eq!(store.grad(id).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::from_vec(&[2], vec![1.0f64, 2.0]));
        let d = g.detach(x);
        let y = g.mul(x, d);
        let l = g.sum(y);
        let grads = g.backward(l);
        assert_eq!(grads.input_grad(x).unwrap().data(), &[1.0, 2.0]);
    }
}
