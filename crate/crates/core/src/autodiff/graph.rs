//! Define-by-run tape.
//!
//! A [`Graph`] borrows a [`ParamStore`] immutably, records every operation in
//! execution order, and on [`Graph::backward`] walks the record in reverse,
//! producing [`Gradients`] keyed by [`ParamId`]. A graph is built per training
//! step and dropped afterwards.

use std::collections::HashMap;

use crate::autodiff::tensor::{ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Concat(Vec<Var>),
    SliceLast { input: Var, start: usize },
    Reshape(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    Embedding { table: Var, ids: Vec<usize> },
    Dropout { input: Var, mask: Vec<f64> },
    Conv2d { input: Var, weight: Var, bias: Var },
    MaxPool2d { input: Var, argmax: Vec<usize> },
    MaxLast { input: Var, argmax: Vec<usize> },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    // Empty for parameter leaves; their values live in the store.
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            grads: vec![None; store.len()],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Sum `other` into `self` (gradient accumulation across passes).
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(t).for_each(|(a, b)| *a += b),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }
}

/// Recording tape over a borrowed parameter store.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_finite(op: &'static str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

/// `c = a·b (+ beta·c)` where `a` is logically `m×k` and `b` is `k×n`.
/// `a_t`/`b_t` mean the operand is stored transposed (row-major).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths are checked above and strides describe in-bounds
    // row-major layouts of exactly those lengths.
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

struct ConvDims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvDims {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(d: &ConvDims, x: &[f64], cols: &mut [f64]) {
    let p = d.positions();
    for c in 0..d.c {
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let row = (c * d.kh + kh) * d.kw + kw;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oh in 0..d.oh {
                    let src = (c * d.h + oh + kh) * d.w + kw;
                    dst[oh * d.ow..(oh + 1) * d.ow].copy_from_slice(&x[src..src + d.ow]);
                }
            }
        }
    }
}

fn col2im(d: &ConvDims, cols: &[f64], dx: &mut [f64]) {
    let p = d.positions();
    for c in 0..d.c {
        for kh in 0..d.kh {
            for kw in 0..d.kw {
                let row = (c * d.kh + kh) * d.kw + kw;
                let src = &cols[row * p..(row + 1) * p];
                for oh in 0..d.oh {
                    let dst = (c * d.h + oh + kh) * d.w + kw;
                    for ow in 0..d.ow {
                        dx[dst + ow] += src[oh * d.ow + ow];
                    }
                }
            }
        }
    }
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || value.len() == numel(&shape));
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.store.get(id).data(),
            _ => &node.value,
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[0]
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = self.store.get(id);
        let v = self.push(t.shape().to_vec(), Vec::new(), Op::Param(id), t.requires_grad);
        self.param_vars.insert(id, v);
        v
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Constant, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, mk: fn(Var, Var) -> Op) -> Result<Var> {
        self.same_shape(op, a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        check_finite(op, &out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), out, mk(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Adds a length-`n` row vector to every row of an `[m, n]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let sa = self.shape(a);
        let n = *sa.last().unwrap_or(&0);
        if sa.len() != 2 || numel(self.shape(row)) != n {
            return Err(Error::Shape {
                op: "add_row",
                lhs: sa.to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row);
        let out: Vec<f64> = self
            .value(a)
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        check_finite("add_row", &out)?;
        let needs = self.needs(a) || self.needs(row);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, row), needs))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|x| x * factor).collect();
        check_finite("scale", &out)?;
        let needs = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Scale(a, factor), needs))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, 0.0);
        check_finite("matmul", &out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), needs))
    }

    /// Concatenate along the last axis; leading dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Shape {
            op: "concat",
            lhs: vec![],
            rhs: vec![],
        })?;
        let lead = self.shape(first)[..self.shape(first).len() - 1].to_vec();
        let rows = numel(&lead);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(shape, out, Op::Concat(parts.to_vec()), needs))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_last(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let width = *s.last().unwrap_or(&0);
        if s.is_empty() || start + len > width {
            return Err(Error::Shape {
                op: "slice_last",
                lhs: s,
                rhs: vec![start, len],
            });
        }
        let rows = numel(&s) / width.max(1);
        let src = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&src[r * width + start..r * width + start + len]);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = len;
        let needs = self.needs(a);
        Ok(self.push(shape, out, Op::SliceLast { input: a, start }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), needs))
    }

    fn unary(&mut self, op: &'static str, a: Var, f: impl Fn(f64) -> f64, mk: fn(Var) -> Op) -> Result<Var> {
        let out: Vec<f64> = self.value(a).iter().map(|&x| f(x)).collect();
        check_finite(op, &out)?;
        let needs = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), out, mk(a), needs))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, stable_sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu)
    }

    /// Fails with [`Error::NonFinite`] if any entry overflows.
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).iter().sum();
        check_finite("sum", &[s])?;
        let needs = self.needs(a);
        Ok(self.push(Vec::new(), vec![s], Op::Sum(a), needs))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len().max(1) as f64;
        let s: f64 = self.value(a).iter().sum::<f64>() / n;
        check_finite("mean", &[s])?;
        let needs = self.needs(a);
        Ok(self.push(Vec::new(), vec![s], Op::Mean(a), needs))
    }

    /// Gather rows of a `[rows, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::Shape {
                op: "embedding",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (rows, dim) = (s[0], s[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidId { id: bad, size: rows });
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &i in ids {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            vec![ids.len(), dim],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Multiply by an explicit mask (entries are `0` or `1/(1-p)`); see [`dropout_mask`].
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.value(a).len() {
            return Err(Error::Shape {
                op: "dropout",
                lhs: self.shape(a).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let out: Vec<f64> = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let needs = self.needs(a);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Dropout { input: a, mask }, needs))
    }

    /// Valid-padding, stride-1 convolution.
    /// `input: [N, C, H, W]`, `weight: [F, C, KH, KW]`, `bias: [F]` → `[N, F, H-KH+1, W-KW+1]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let d = self.conv_dims(input, weight, bias)?;
        let (p, q) = (d.positions(), d.patch());
        let x = self.value(input);
        let wv = self.value(weight);
        let bv = self.value(bias);
        let mut out = vec![0.0; d.n * d.f * p];
        let mut cols = vec![0.0; q * p];
        for n in 0..d.n {
            im2col(&d, &x[n * d.c * d.h * d.w..(n + 1) * d.c * d.h * d.w], &mut cols);
            let o = &mut out[n * d.f * p..(n + 1) * d.f * p];
            for f in 0..d.f {
                o[f * p..(f + 1) * p].fill(bv[f]);
            }
            gemm(d.f, q, p, wv, false, &cols, false, o, 1.0);
        }
        check_finite("conv2d", &out)?;
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            vec![d.n, d.f, d.oh, d.ow],
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    fn conv_dims(&self, input: Var, weight: Var, bias: Var) -> Result<ConvDims> {
        let si = self.shape(input);
        let sw = self.shape(weight);
        let err = || Error::Shape {
            op: "conv2d",
            lhs: si.to_vec(),
            rhs: sw.to_vec(),
        };
        if si.len() != 4 || sw.len() != 4 || si[1] != sw[1] || sw[2] > si[2] || sw[3] > si[3] {
            return Err(err());
        }
        if self.shape(bias) != [sw[0]] {
            return Err(Error::Shape {
                op: "conv2d bias",
                lhs: sw.to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        Ok(ConvDims {
            n: si[0],
            c: si[1],
            h: si[2],
            w: si[3],
            f: sw[0],
            kh: sw[2],
            kw: sw[3],
            oh: si[2] - sw[2] + 1,
            ow: si[3] - sw[3] + 1,
        })
    }

    /// 2×2 max pooling with stride 2 over `[N, C, H, W]`; odd trailing rows/columns are dropped.
    pub fn max_pool2d(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::Shape {
                op: "max_pool2d",
                lhs: s,
                rhs: vec![2, 2],
            });
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let x = self.value(input);
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for pl in 0..planes {
            let base = pl * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                    out.push(x[best]);
                    argmax.push(best);
                }
            }
        }
        let needs = self.needs(input);
        Ok(self.push(vec![s[0], s[1], oh, ow], out, Op::MaxPool2d { input, argmax }, needs))
    }

    /// Maximum over the last axis (max-over-time pooling).
    pub fn max_last(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        let width = *s.last().unwrap_or(&0);
        if s.is_empty() || width == 0 {
            return Err(Error::Shape {
                op: "max_last",
                lhs: s,
                rhs: vec![],
            });
        }
        let x = self.value(input);
        let rows = x.len() / width;
        let mut out = Vec::with_capacity(rows);
        let mut argmax = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * width..(r + 1) * width];
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            out.push(row[best]);
            argmax.push(r * width + best);
        }
        let needs = self.needs(input);
        Ok(self.push(s[..s.len() - 1].to_vec(), out, Op::MaxLast { input, argmax }, needs))
    }

    /// Mean softmax cross-entropy over the rows of `logits: [n, k]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let n = labels.len().max(1) as f64;
        self.weighted_cross_entropy(logits, labels, &vec![1.0 / n; labels.len()])
    }

    /// `Σ_i weights[i] · CE(logits[i], labels[i])`; zero weights mask rows out.
    pub fn weighted_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: &[f64]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.len() != weights.len() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                lhs: s,
                rhs: vec![labels.len(), weights.len()],
            });
        }
        let k = s[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let x = self.value(logits);
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (i, (&label, &w)) in labels.iter().zip(weights).enumerate() {
            let row = &x[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + z.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            if w != 0.0 {
                loss += w * (lse - row[label]);
            }
        }
        check_finite("softmax_cross_entropy", &[loss])?;
        let needs = self.needs(logits);
        Ok(self.push(
            Vec::new(),
            vec![loss],
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if numel(self.shape(loss)) != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::zeros_like(self.store);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let (before, _) = grads.split_at_mut(i);
            let nodes = &self.nodes;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    let entry = &mut out.grads[id.0];
                    if let Some(acc) = entry {
                        add_into(acc, &g);
                    } else {
                        *entry = Some(g);
                    }
                }
                Op::Add(a, b) => {
                    if let Some(ga) = slot(nodes, before, *a) {
                        add_into(ga, &g);
                    }
                    if let Some(gb) = slot(nodes, before, *b) {
                        add_into(gb, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(ga) = slot(nodes, before, *a) {
                        add_into(ga, &g);
                    }
                    if let Some(gb) = slot(nodes, before, *b) {
                        gb.iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
                    }
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if let Some(ga) = slot(nodes, before, *a) {
                        for ((x, gi), y) in ga.iter_mut().zip(&g).zip(vb) {
                            *x += gi * y;
                        }
                    }
                    if let Some(gb) = slot(nodes, before, *b) {
                        for ((x, gi), y) in gb.iter_mut().zip(&g).zip(va) {
                            *x += gi * y;
                        }
                    }
                }
                Op::AddRow(a, row) => {
                    if let Some(ga) = slot(nodes, before, *a) {
                        add_into(ga, &g);
                    }
                    if let Some(gr) = slot(nodes, before, *row) {
                        let n = gr.len();
                        for chunk in g.chunks(n) {
                            add_into(gr, chunk);
                        }
                    }
                }
                Op::Scale(a, factor) => {
                    if let Some(ga) = slot(nodes, before, *a) {
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += factor * y);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if let Some(ga) = slot(nodes, before, *a) {
                        // dA = dC · Bᵀ
                        gemm(m, n, k, &g, false, vb, true, ga, 1.0);
                    }
                    if let Some(gb) = slot(nodes, before, *b) {
                        // dB = Aᵀ · dC
                        gemm(k, m, n, va, true, &g, false, gb, 1.0);
                    }
                }
                Op::Concat(parts) => {
                    let total = *node.shape.last().unwrap();
                    let rows = g.len() / total.max(1);
                    let mut offset = 0;
                    for &p in parts {
                        let w = *self.shape(p).last().unwrap();
                        if let Some(gp) = slot(nodes, before, p) {
                            for r in 0..rows {
                                add_into(
                                    &mut gp[r * w..(r + 1) * w],
                                    &g[r * total + offset..r * total + offset + w],
                                );
                            }
                        }
                        offset += w;
                    }
                }
                Op::SliceLast { input, start } => {
                    let width = *self.shape(*input).last().unwrap();
                    let len = *node.shape.last().unwrap();
                    if let Some(gi) = slot(nodes, before, *input) {
                        let rows = g.len() / len.max(1);
                        for r in 0..rows {
                            let dst = r * width + start;
                            add_into(&mut gi[dst..dst + len], &g[r * len..(r + 1) * len]);
                        }
                    }
                }
                Op::Reshape(a) => {
                    if let Some(ga) = slot(nodes, before, *a) {
                        add_into(ga, &g);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    if let Some(ga) = slot(nodes, before, *a) {
                        for ((x, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                            *x += gi * yi * (1.0 - yi);
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    if let Some(ga) = slot(nodes, before, *a) {
                        for ((x, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                            *x += gi * (1.0 - yi * yi);
                        }
                    }
                }
                Op::Relu(a) => {
                    let va = self.value(*a);
                    if let Some(ga) = slot(nodes, before, *a) {
                        for ((x, gi), v) in ga.iter_mut().zip(&g).zip(va) {
                            if *v > 0.0 {
                                *x += gi;
                            }
                        }
                    }
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    if let Some(ga) = slot(nodes, before, *a) {
                        for ((x, gi), yi) in ga.iter_mut().zip(&g).zip(y) {
                            *x += gi * yi;
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(ga) = slot(nodes, before, *a) {
                        ga.iter_mut().for_each(|x| *x += g[0]);
                    }
                }
                Op::Mean(a) => {
                    if let Some(ga) = slot(nodes, before, *a) {
                        let d = g[0] / ga.len().max(1) as f64;
                        ga.iter_mut().for_each(|x| *x += d);
                    }
                }
                Op::Embedding { table, ids } => {
                    let dim = self.shape(*table)[1];
                    if let Some(gt) = slot(nodes, before, *table) {
                        for (r, &id) in ids.iter().enumerate() {
                            add_into(&mut gt[id * dim..(id + 1) * dim], &g[r * dim..(r + 1) * dim]);
                        }
                    }
                }
                Op::Dropout { input, mask } => {
                    if let Some(gi) = slot(nodes, before, *input) {
                        for ((x, gi), m) in gi.iter_mut().zip(&g).zip(mask) {
                            *x += gi * m;
                        }
                    }
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                } => {
                    let d = self.conv_dims(*input, *weight, *bias)?;
                    let (p, q) = (d.positions(), d.patch());
                    let x = self.value(*input);
                    let wv = self.value(*weight);
                    let plane = d.c * d.h * d.w;
                    if let Some(gb) = slot(nodes, before, *bias) {
                        for n in 0..d.n {
                            for f in 0..d.f {
                                let base = (n * d.f + f) * p;
                                gb[f] += g[base..base + p].iter().sum::<f64>();
                            }
                        }
                    }
                    let mut cols = vec![0.0; q * p];
                    if let Some(gw) = slot(nodes, before, *weight) {
                        for n in 0..d.n {
                            im2col(&d, &x[n * plane..(n + 1) * plane], &mut cols);
                            // dW += dOut_n · colsᵀ
                            gemm(d.f, p, q, &g[n * d.f * p..(n + 1) * d.f * p], false, &cols, true, gw, 1.0);
                        }
                    }
                    if let Some(gx) = slot(nodes, before, *input) {
                        for n in 0..d.n {
                            // dcols = Wᵀ · dOut_n
                            gemm(q, d.f, p, wv, true, &g[n * d.f * p..(n + 1) * d.f * p], false, &mut cols, 0.0);
                            col2im(&d, &cols, &mut gx[n * plane..(n + 1) * plane]);
                        }
                    }
                }
                Op::MaxPool2d { input, argmax } | Op::MaxLast { input, argmax } => {
                    if let Some(gi) = slot(nodes, before, *input) {
                        for (&idx, gv) in argmax.iter().zip(&g) {
                            gi[idx] += gv;
                        }
                    }
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    weights,
                    probs,
                } => {
                    let k = self.shape(*logits)[1];
                    if let Some(gl) = slot(nodes, before, *logits) {
                        for (i, (&label, &w)) in labels.iter().zip(weights).enumerate() {
                            if w == 0.0 {
                                continue;
                            }
                            let scale = g[0] * w;
                            for j in 0..k {
                                let target = if j == label { 1.0 } else { 0.0 };
                                gl[i * k + j] += scale * (probs[i * k + j] - target);
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.needs_grad {
        return None;
    }
    let len = numel(&n.shape);
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverted-dropout mask: each entry is `0` with probability `p`, else `1/(1-p)`.
pub fn dropout_mask<R: rand::Rng + ?Sized>(len: usize, p: f64, rng: &mut R) -> Vec<f64> {
    if p <= 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - p);
    (0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}
