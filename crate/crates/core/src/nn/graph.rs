//! Tape-based reverse-mode differentiation over the handful of operations the
//! denoiser needs.
//!
//! A [`Graph`] records every operation applied during one forward pass. Values
//! are kept until the graph is dropped, and [`Graph::backward`] walks the tape
//! in reverse, accumulating gradients for every parameter that took part.

use super::params::{ParamId, ParamStore};
use super::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        /// `(mean, 1/std)` per `(sample, group)`.
        stats: Vec<(T, T)>,
    },
    Silu {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddChannel {
        x: Var,
        e: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Concat {
        parts: Vec<Var>,
    },
    Upsample2x {
        x: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, Option<&Tensor<T>>)> {
        self.grads
            .iter()
            .enumerate()
            .map(|(i, g)| (ParamId(i), g.as_ref()))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v = *v * factor;
            }
        }
    }
}

pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
    track_params: bool,
}

const GN_EPS: f64 = 1e-5;

impl<'p, T: Element> Graph<'p, T> {
    /// A graph whose parameter leaves require gradients.
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self::with_tracking(params, true)
    }

    /// A graph for forward evaluation only.
    pub fn inference(params: &'p ParamStore<T>) -> Self {
        Self::with_tracking(params, false)
    }

    fn with_tracking(params: &'p ParamStore<T>, track_params: bool) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            track_params,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        match std::mem::replace(&mut self.nodes[v.0].value, Value::Owned(Tensor::zeros(&[0]))) {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(id).clone(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = conv2d_forward(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            pad,
        );
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            &parents,
        )
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let (out, stats) =
            group_norm_forward(self.value(x), self.value(gamma), self.value(beta), groups);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        self.push(out, Op::Silu { x }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add: shape mismatch");
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    /// `x[n, c, :, :] + e[n, c]`.
    pub fn add_channel(&mut self, x: Var, e: Var) -> Var {
        let mut out = self.value(x).clone();
        let (n, c, h, w) = out.dims4();
        let ev = self.value(e);
        assert_eq!(ev.shape(), &[n, c], "add_channel: embedding shape");
        let plane = h * w;
        for (chunk, &bias) in out.data_mut().chunks_mut(plane).zip(ev.data()) {
            for v in chunk {
                *v = *v + bias;
            }
        }
        self.push(out, Op::AddChannel { x, e }, &[x, e])
    }

    /// `x W^T + b` for `x: [N, D]`, `W: [O, D]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (n, d) = (xv.shape()[0], xv.shape()[1]);
        let o = wv.shape()[0];
        assert_eq!(wv.shape()[1], d, "linear: weight shape");
        let mut out = Tensor::zeros(&[n, o]);
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.data_mut().chunks_mut(o) {
                row.copy_from_slice(bv.data());
            }
        }
        unsafe {
            T::gemm(
                n,
                d,
                o,
                T::one(),
                xv.data().as_ptr(),
                d as isize,
                1,
                wv.data().as_ptr(),
                1,
                d as isize,
                T::one(),
                out.data_mut().as_mut_ptr(),
                o as isize,
                1,
            );
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(out, Op::Linear { x, w, b }, &parents)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let total_c: usize = parts.iter().map(|p| self.value(*p).dims4().1).sum();
        let mut out = Vec::with_capacity(n * total_c * h * w);
        for s in 0..n {
            for p in parts {
                let t = self.value(*p);
                let (pn, _, ph, pw) = t.dims4();
                assert_eq!((pn, ph, pw), (n, h, w), "concat: shape mismatch");
                out.extend_from_slice(t.item(s));
            }
        }
        let out = Tensor::from_vec(&[n, total_c, h, w], out).expect("concat shape");
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
            },
            parts,
        )
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = xv.dims4();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let src = xv.data();
        let dst = out.data_mut();
        for plane in 0..n * c {
            let s = &src[plane * h * w..(plane + 1) * h * w];
            let d = &mut dst[plane * 4 * h * w..(plane + 1) * 4 * h * w];
            for i in 0..2 * h {
                for j in 0..2 * w {
                    d[i * 2 * w + j] = s[(i / 2) * w + j / 2];
                }
            }
        }
        self.push(out, Op::Upsample2x { x }, &[x])
    }

    /// Single-head dot-product self-attention over spatial positions.
    ///
    /// `q`, `k`, `v` are `[N, C, H, W]`; positions attend to all positions.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, c, h, w) = qv.dims4();
        let l = h * w;
        let scale = T::from_f64_lossy(1.0 / (c as f64).sqrt());
        let mut probs = vec![T::zero(); n * l * l];
        let mut out = Tensor::zeros(&[n, c, h, w]);
        for s in 0..n {
            let p = &mut probs[s * l * l..(s + 1) * l * l];
            unsafe {
                // scores = scale * q^T k
                T::gemm(
                    l,
                    c,
                    l,
                    scale,
                    qv.item(s).as_ptr(),
                    1,
                    l as isize,
                    kv.item(s).as_ptr(),
                    l as isize,
                    1,
                    T::zero(),
                    p.as_mut_ptr(),
                    l as isize,
                    1,
                );
            }
            for row in p.chunks_mut(l) {
                softmax_in_place(row);
            }
            unsafe {
                // out = v P^T
                T::gemm(
                    c,
                    l,
                    l,
                    T::one(),
                    vv.item(s).as_ptr(),
                    l as isize,
                    1,
                    p.as_ptr(),
                    1,
                    l as isize,
                    T::zero(),
                    out.item_mut(s).as_mut_ptr(),
                    l as isize,
                    1,
                );
            }
        }
        self.push(out, Op::Attention { q, k, v, probs }, &[q, k, v])
    }

    /// Back-propagates `seed` from `out` and returns the parameter gradients.
    pub fn backward(self, out: Var, seed: Tensor<T>) -> Gradients<T> {
        assert_eq!(self.value(out).shape(), seed.shape(), "seed shape");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Option<Tensor<T>>> = (0..self.params.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    if let Value::Param(id) = node.value {
                        param_grads[id.0] = Some(g);
                    }
                }
                Op::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                } => {
                    let (dx, dw, db) = conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *stride,
                        *pad,
                        self.wants(*x),
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    self.acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::GroupNorm {
                    x,
                    gamma,
                    beta,
                    groups,
                    stats,
                } => {
                    let (dx, dgamma, dbeta) =
                        group_norm_backward(self.value(*x), self.value(*gamma), &g, *groups, stats);
                    self.acc(&mut grads, *x, dx);
                    self.acc(&mut grads, *gamma, dgamma);
                    self.acc(&mut grads, *beta, dbeta);
                }
                Op::Silu { x } => {
                    let xv = self.value(*x);
                    let dx = g
                        .zip_map(xv, |gv, v| {
                            let s = sigmoid(v);
                            gv * s * (T::one() + v * (T::one() - s))
                        })
                        .expect("silu grad shape");
                    self.acc(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    if self.wants(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    self.acc(&mut grads, *b, g);
                }
                Op::AddChannel { x, e } => {
                    let (n, c, h, w) = g.dims4();
                    if self.wants(*e) {
                        let de: Vec<T> = g
                            .data()
                            .chunks(h * w)
                            .map(|plane| plane.iter().copied().sum())
                            .collect();
                        accumulate(&mut grads, *e, Tensor::from_vec(&[n, c], de).unwrap());
                    }
                    self.acc(&mut grads, *x, g);
                }
                Op::Linear { x, w, b } => {
                    let (dx, dw, db) = linear_backward(self.value(*x), self.value(*w), &g);
                    self.acc(&mut grads, *x, dx);
                    self.acc(&mut grads, *w, dw);
                    if let Some(b) = b {
                        self.acc(&mut grads, *b, db);
                    }
                }
                Op::Concat { parts } => {
                    let (n, total_c, h, w) = g.dims4();
                    let plane = h * w;
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.value(*p).dims4().1;
                        if self.wants(*p) {
                            let mut dp = Vec::with_capacity(n * pc * plane);
                            for s in 0..n {
                                let base = s * total_c * plane + offset * plane;
                                dp.extend_from_slice(&g.data()[base..base + pc * plane]);
                            }
                            accumulate(
                                &mut grads,
                                *p,
                                Tensor::from_vec(&[n, pc, h, w], dp).unwrap(),
                            );
                        }
                        offset += pc;
                    }
                }
                Op::Upsample2x { x } => {
                    let (n, c, h, w) = self.value(*x).dims4();
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    let src = g.data();
                    let dst = dx.data_mut();
                    for plane in 0..n * c {
                        let s = &src[plane * 4 * h * w..(plane + 1) * 4 * h * w];
                        let d = &mut dst[plane * h * w..(plane + 1) * h * w];
                        for i in 0..2 * h {
                            for j in 0..2 * w {
                                let cell = &mut d[(i / 2) * w + j / 2];
                                *cell = *cell + s[i * 2 * w + j];
                            }
                        }
                    }
                    self.acc(&mut grads, *x, dx);
                }
                Op::Attention { q, k, v, probs } => {
                    let (dq, dk, dv) = attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        probs,
                        &g,
                    );
                    self.acc(&mut grads, *q, dq);
                    self.acc(&mut grads, *k, dk);
                    self.acc(&mut grads, *v, dv);
                }
            }
        }
        Gradients { grads: param_grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if self.wants(v) {
            accumulate(grads, v, g);
        }
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn sigmoid<T: Element>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

fn softmax_in_place<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        let (c, h, wd) = (x[1], x[2], x[3]);
        let (kh, kw) = (w[2], w[3]);
        assert_eq!(w[1], c, "conv2d: weight expects {} input channels, got {c}", w[1]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        Self {
            c,
            h,
            w: wd,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Valid output columns `[lo, hi)` for kernel column `kj`.
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let lo = (self.pad.saturating_sub(kj)).div_ceil(self.stride);
        let limit = self.w + self.pad;
        let hi = if limit <= kj {
            0
        } else {
            ((limit - kj - 1) / self.stride + 1).min(self.wo)
        };
        (lo.min(hi), hi)
    }

    /// Unfolds output rows `rows` of one sample into consecutive columns
    /// starting at `offset` of a row-major matrix with leading dimension `ld`.
    fn im2col<T: Element>(&self, x: &[T], col: &mut [T], ld: usize, offset: usize, rows: std::ops::Range<usize>) {
        let l = rows.len() * self.wo;
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut col[row * ld + offset..row * ld + offset + l];
                    let (lo, hi) = self.col_range(kj);
                    for (r, oy) in rows.clone().enumerate() {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        let out_row = &mut dst[r * self.wo..(r + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out_row.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        if hi > lo {
                            let first = lo * self.stride + kj - self.pad;
                            if self.stride == 1 {
                                out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                            } else {
                                for (o, &v) in out_row[lo..hi]
                                    .iter_mut()
                                    .zip(src[first..].iter().step_by(self.stride))
                                {
                                    *o = v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Element>(&self, col: &[T], ld: usize, offset: usize, x: &mut [T]) {
        let l = self.cols();
        for ci in 0..self.c {
            let plane = &mut x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &col[row * ld + offset..row * ld + offset + l];
                    let (lo, hi) = self.col_range(kj);
                    if hi <= lo {
                        continue;
                    }
                    let first = lo * self.stride + kj - self.pad;
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let s = &src[oy * self.wo + lo..oy * self.wo + hi];
                        for (d, &v) in dst[first..].iter_mut().step_by(self.stride).zip(s) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Copies `[N, O, L]` into an `[O, N*L]` matrix.
fn gather_channels<T: Element>(src: &[T], n: usize, o: usize, l: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * o * l];
    for s in 0..n {
        for c in 0..o {
            let from = &src[(s * o + c) * l..(s * o + c + 1) * l];
            out[c * n * l + s * l..c * n * l + (s + 1) * l].copy_from_slice(from);
        }
    }
    out
}

/// Inverse of [`gather_channels`].
fn scatter_channels<T: Element>(src: &[T], n: usize, o: usize, l: usize, dst: &mut [T]) {
    for s in 0..n {
        for c in 0..o {
            dst[(s * o + c) * l..(s * o + c + 1) * l]
                .copy_from_slice(&src[c * n * l + s * l..c * n * l + (s + 1) * l]);
        }
    }
}

/// Lays the batch out as one `[K, N*L]` column matrix.
fn batch_columns<T: Element>(x: &Tensor<T>, geo: &ConvGeometry) -> Vec<T> {
    let n = x.dims4().0;
    let (k, l) = (geo.rows(), geo.cols());
    if geo.is_pointwise() {
        return gather_channels(x.data(), n, k, l);
    }
    let mut col = vec![T::zero(); k * n * l];
    for s in 0..n {
        geo.im2col(x.item(s), &mut col, n * l, s * l, 0..geo.ho);
    }
    col
}

/// Column-matrix size above which the forward pass unfolds a few output
/// rows at a time into one reused buffer.
const TILE_ELEMENTS: usize = 1 << 22;

fn conv2d_forward_tiled<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    geo: &ConvGeometry,
    tile: usize,
) -> Tensor<T> {
    let n = x.dims4().0;
    let o = w.shape()[0];
    let (k, l) = (geo.rows(), geo.cols());
    let band = (tile / (k * geo.wo)).clamp(1, geo.ho);
    let mut col = vec![T::zero(); k * band * geo.wo];
    let mut out = Tensor::zeros(&[n, o, geo.ho, geo.wo]);
    if let Some(b) = b {
        for (plane, &bias) in out.data_mut().chunks_mut(l).zip(b.data().iter().cycle()) {
            plane.fill(bias);
        }
    }
    let beta = if b.is_some() { T::one() } else { T::zero() };
    for s in 0..n {
        let y = out.item_mut(s);
        let mut oy = 0;
        while oy < geo.ho {
            let end = (oy + band).min(geo.ho);
            let cols = (end - oy) * geo.wo;
            geo.im2col(x.item(s), &mut col, cols, 0, oy..end);
            unsafe {
                T::gemm(
                    o,
                    k,
                    cols,
                    T::one(),
                    w.data().as_ptr(),
                    k as isize,
                    1,
                    col.as_ptr(),
                    cols as isize,
                    1,
                    beta,
                    y.as_mut_ptr().add(oy * geo.wo),
                    l as isize,
                    1,
                );
            }
            oy = end;
        }
    }
    out
}

fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let n = x.dims4().0;
    let o = w.shape()[0];
    let geo = ConvGeometry::new(x.shape(), w.shape(), stride, pad);
    let (k, l) = (geo.rows(), geo.cols());
    let nl = n * l;
    if !geo.is_pointwise() && k * nl > TILE_ELEMENTS {
        return conv2d_forward_tiled(x, w, b, &geo, TILE_ELEMENTS);
    }
    let col = batch_columns(x, &geo);
    let mut y = vec![T::zero(); o * nl];
    if let Some(b) = b {
        for (row, &bias) in y.chunks_mut(nl).zip(b.data()) {
            row.fill(bias);
        }
    }
    unsafe {
        T::gemm(
            o,
            k,
            nl,
            T::one(),
            w.data().as_ptr(),
            k as isize,
            1,
            col.as_ptr(),
            nl as isize,
            1,
            if b.is_some() { T::one() } else { T::zero() },
            y.as_mut_ptr(),
            nl as isize,
            1,
        );
    }
    let mut out = Tensor::zeros(&[n, o, geo.ho, geo.wo]);
    scatter_channels(&y, n, o, l, out.data_mut());
    out
}

fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let n = x.dims4().0;
    let o = w.shape()[0];
    let geo = ConvGeometry::new(x.shape(), w.shape(), stride, pad);
    let (k, l) = (geo.rows(), geo.cols());
    let nl = n * l;
    let gy = gather_channels(g.data(), n, o, l);
    let db: Vec<T> = gy.chunks(nl).map(|row| row.iter().copied().sum()).collect();
    let db = Tensor::from_vec(&[o], db).expect("bias grad shape");
    let col = batch_columns(x, &geo);
    let mut dw = Tensor::zeros(w.shape());
    unsafe {
        // dW = dY col^T
        T::gemm(
            o,
            nl,
            k,
            T::one(),
            gy.as_ptr(),
            nl as isize,
            1,
            col.as_ptr(),
            1,
            nl as isize,
            T::zero(),
            dw.data_mut().as_mut_ptr(),
            k as isize,
            1,
        );
    }
    drop(col);
    let dx = need_dx.then(|| {
        let mut dcol = vec![T::zero(); k * nl];
        unsafe {
            // dcol = W^T dY
            T::gemm(
                k,
                o,
                nl,
                T::one(),
                w.data().as_ptr(),
                1,
                k as isize,
                gy.as_ptr(),
                nl as isize,
                1,
                T::zero(),
                dcol.as_mut_ptr(),
                nl as isize,
                1,
            );
        }
        let mut dx = Tensor::zeros(x.shape());
        if geo.is_pointwise() {
            scatter_channels(&dcol, n, k, l, dx.data_mut());
        } else {
            for s in 0..n {
                geo.col2im(&dcol, nl, s * l, dx.item_mut(s));
            }
        }
        dx
    });
    (dx, dw, db)
}

fn group_norm_forward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    groups: usize,
) -> (Tensor<T>, Vec<(T, T)>) {
    let (n, c, h, w) = x.dims4();
    assert_eq!(c % groups, 0, "group_norm: {c} channels into {groups} groups");
    let cg = c / groups;
    let plane = h * w;
    let m = T::from_usize(cg * plane).unwrap();
    let eps = T::from_f64_lossy(GN_EPS);
    let mut out = Tensor::zeros(x.shape());
    let mut stats = Vec::with_capacity(n * groups);
    for s in 0..n {
        let xs = x.item(s);
        let os = out.item_mut(s);
        for gi in 0..groups {
            let range = gi * cg * plane..(gi + 1) * cg * plane;
            let seg = &xs[range.clone()];
            let mean = seg.iter().copied().sum::<T>() / m;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let rstd = T::one() / (var + eps).sqrt();
            stats.push((mean, rstd));
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let (gm, bt) = (gamma.data()[ch], beta.data()[ch]);
                let base = ch * plane;
                for p in base..base + plane {
                    os[p] = (xs[p] - mean) * rstd * gm + bt;
                }
            }
        }
    }
    (out, stats)
}

fn group_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    g: &Tensor<T>,
    groups: usize,
    stats: &[(T, T)],
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = x.dims4();
    let cg = c / groups;
    let plane = h * w;
    let m = T::from_usize(cg * plane).unwrap();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for s in 0..n {
        let xs = x.item(s);
        let gs = g.item(s);
        let dxs = dx.item_mut(s);
        for gi in 0..groups {
            let (mean, rstd) = stats[s * groups + gi];
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let gm = gamma.data()[ch];
                let mut dg = T::zero();
                let mut dbt = T::zero();
                for p in ch * plane..(ch + 1) * plane {
                    let xhat = (xs[p] - mean) * rstd;
                    dg = dg + gs[p] * xhat;
                    dbt = dbt + gs[p];
                    let dxhat = gs[p] * gm;
                    sum_dxhat = sum_dxhat + dxhat;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                }
                dgamma.data_mut()[ch] = dgamma.data()[ch] + dg;
                dbeta.data_mut()[ch] = dbeta.data()[ch] + dbt;
            }
            let mean_dxhat = sum_dxhat / m;
            let mean_dxhat_xhat = sum_dxhat_xhat / m;
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let gm = gamma.data()[ch];
                for p in ch * plane..(ch + 1) * plane {
                    let xhat = (xs[p] - mean) * rstd;
                    let dxhat = gs[p] * gm;
                    dxs[p] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

fn linear_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let o = w.shape()[0];
    let mut dx = Tensor::zeros(&[n, d]);
    let mut dw = Tensor::zeros(&[o, d]);
    let mut db = Tensor::zeros(&[o]);
    unsafe {
        // dx = g W
        T::gemm(
            n,
            o,
            d,
            T::one(),
            g.data().as_ptr(),
            o as isize,
            1,
            w.data().as_ptr(),
            d as isize,
            1,
            T::zero(),
            dx.data_mut().as_mut_ptr(),
            d as isize,
            1,
        );
        // dW = g^T x
        T::gemm(
            o,
            n,
            d,
            T::one(),
            g.data().as_ptr(),
            1,
            o as isize,
            x.data().as_ptr(),
            d as isize,
            1,
            T::zero(),
            dw.data_mut().as_mut_ptr(),
            d as isize,
            1,
        );
    }
    for row in g.data().chunks(o) {
        for (acc, &v) in db.data_mut().iter_mut().zip(row) {
            *acc = *acc + v;
        }
    }
    (dx, dw, db)
}

fn attention_backward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    probs: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = q.dims4();
    let l = h * w;
    let scale = T::from_f64_lossy(1.0 / (c as f64).sqrt());
    let mut dq = Tensor::zeros(q.shape());
    let mut dk = Tensor::zeros(q.shape());
    let mut dv = Tensor::zeros(q.shape());
    let mut dp = vec![T::zero(); l * l];
    for s in 0..n {
        let p = &probs[s * l * l..(s + 1) * l * l];
        let gs = g.item(s);
        unsafe {
            // dV = dO P
            T::gemm(
                c,
                l,
                l,
                T::one(),
                gs.as_ptr(),
                l as isize,
                1,
                p.as_ptr(),
                l as isize,
                1,
                T::zero(),
                dv.item_mut(s).as_mut_ptr(),
                l as isize,
                1,
            );
            // dP = dO^T V
            T::gemm(
                l,
                c,
                l,
                T::one(),
                gs.as_ptr(),
                1,
                l as isize,
                v.item(s).as_ptr(),
                l as isize,
                1,
                T::zero(),
                dp.as_mut_ptr(),
                l as isize,
                1,
            );
        }
        // softmax Jacobian, row by row: dS = P * (dP - <dP, P>)
        for (drow, prow) in dp.chunks_mut(l).zip(p.chunks(l)) {
            let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
            for (d, &pv) in drow.iter_mut().zip(prow) {
                *d = pv * (*d - dot);
            }
        }
        unsafe {
            // dQ = scale * K dS^T
            T::gemm(
                c,
                l,
                l,
                scale,
                k.item(s).as_ptr(),
                l as isize,
                1,
                dp.as_ptr(),
                1,
                l as isize,
                T::zero(),
                dq.item_mut(s).as_mut_ptr(),
                l as isize,
                1,
            );
            // dK = scale * Q dS
            T::gemm(
                c,
                l,
                l,
                scale,
                q.item(s).as_ptr(),
                l as isize,
                1,
                dp.as_ptr(),
                l as isize,
                1,
                T::zero(),
                dk.item_mut(s).as_mut_ptr(),
                l as isize,
                1,
            );
        }
    }
    (dq, dk, dv)
}
