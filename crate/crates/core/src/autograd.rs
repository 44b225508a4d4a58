//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is built per forward pass. Values are computed eagerly as ops
//! are recorded; [`Graph::backward`] walks the tape in reverse. Parameters
//! live in a [`ParamStore`] that the graph borrows immutably, so a frozen
//! store can be shared by concurrent inference passes.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{bail, Result};
use crate::geometry::{self, ResampleMap};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalar parameters whose name starts with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Replaces a tensor, keeping its shape contract.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.tensors[id.0].shape() {
            bail!(
                Shape,
                "parameter {} expects shape {:?}, got {:?}",
                self.names[id.0],
                self.tensors[id.0].shape(),
                value.shape()
            );
        }
        self.tensors[id.0] = value;
        Ok(())
    }
}

/// Gradients for every parameter of a store; `None` means "not reached".
#[derive(Debug, Clone)]
pub struct ParamGrads<T> {
    pub grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> ParamGrads<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            grads: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    /// `self += scale * other`.
    pub fn accumulate(&mut self, other: &ParamGrads<T>, scale: T) {
        for (dst, src) in self.grads.iter_mut().zip(&other.grads) {
            let Some(src) = src else { continue };
            let mut s = src.clone();
            s.scale(scale);
            match dst {
                Some(d) => d.add_assign(&s),
                None => *dst = Some(s),
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.sum_squares().as_f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<T> {
    Constant,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        spec: ConvSpec,
        cols: Vec<T>,
    },
    Relu(Var),
    Sigmoid(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        dims: (usize, usize, usize),
    },
    AddChannelBias {
        x: Var,
        b: Var,
    },
    AddPositionBias {
        x: Var,
        b: Var,
    },
    Add(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        lo: usize,
    },
    Resample {
        x: Var,
        map: Arc<ResampleMap>,
    },
    SoftmaxRows(Var),
    /// Scalar with locally known gradients w.r.t. its inputs.
    Scalar {
        inputs: Vec<Var>,
        grads: Vec<Tensor<T>>,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// One forward pass worth of recorded computation.
pub struct Graph<'p, T: Float> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<usize, Var>,
}

/// Gradients of a scalar w.r.t. every recorded node.
pub struct Grads<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Float> Grads<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn into_param_grads(mut self, store: &ParamStore<T>) -> ParamGrads<T> {
        let mut out = ParamGrads::zeros_like(store);
        for (id, var) in &self.params {
            out.grads[id.0] = self.nodes[var.0].take();
        }
        out
    }
}

fn im2col<T: Float>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    spec: ConvSpec,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let p = ho * wo;
    let mut cols = vec![T::zero(); c * kh * kw * p];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..ho {
                    let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let src = &x[(ci * h + ii as usize) * w..(ci * h + ii as usize + 1) * w];
                    for oj in 0..wo {
                        let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                        if jj >= 0 && jj < w as isize {
                            dst[oi * wo + oj] = src[jj as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Float>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    spec: ConvSpec,
    (ho, wo): (usize, usize),
) -> Vec<T> {
    let p = ho * wo;
    let mut x = vec![T::zero(); c * h * w];
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..ho {
                    let ii = (oi * spec.stride + ki) as isize - spec.pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    let base = (ci * h + ii as usize) * w;
                    for oj in 0..wo {
                        let jj = (oj * spec.stride + kj) as isize - spec.pad as isize;
                        if jj >= 0 && jj < w as isize {
                            x[base + jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
    x
}

fn sigmoid<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<'p, T: Float> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Constant, false)
    }

    /// Gradient barrier: same value, no gradient flows back.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id.0) {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id.0, v);
        v
    }

    /// 2-D convolution of `x` (`C x H x W`) with `w` (`O x C x kh x kw`) and
    /// bias `b` (`O`).
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || self.shape(b) != [ws[0]] {
            bail!(Shape, "conv2d: input {:?}, weight {:?}", xs, ws);
        }
        let (c, h, wd) = (xs[0], xs[1], xs[2]);
        let (o, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * spec.pad < kh || wd + 2 * spec.pad < kw {
            bail!(Shape, "conv2d: kernel larger than padded input");
        }
        let ho = (h + 2 * spec.pad - kh) / spec.stride + 1;
        let wo = (wd + 2 * spec.pad - kw) / spec.stride + 1;
        let cols = im2col(self.value(x).data(), (c, h, wd), (kh, kw), spec, (ho, wo));
        let p = ho * wo;
        let mut out = vec![T::zero(); o * p];
        let bias = self.value(b).data();
        for oc in 0..o {
            out[oc * p..(oc + 1) * p].fill(bias[oc]);
        }
        T::gemm(
            o,
            c * kh * kw,
            p,
            T::one(),
            self.value(w).data(),
            false,
            &cols,
            false,
            T::one(),
            &mut out,
        );
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let value = Tensor::from_vec(&[o, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, spec, cols }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let needs = self.needs(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    /// Matrix product of 2-D values; `ta` / `tb` transpose the operands.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            bail!(Shape, "matmul needs 2-D operands, got {:?} and {:?}", sa, sb);
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            bail!(Shape, "matmul inner dims {} vs {}", k, k2);
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            ta,
            self.value(b).data(),
            tb,
            T::zero(),
            &mut out,
        );
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                dims: (m, k, n),
            },
            needs,
        ))
    }

    /// Adds `b` (`C`) along the leading axis of `x` (`C x ...`).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.is_empty() || self.shape(b) != [xs[0]] {
            bail!(Shape, "channel bias {:?} for {:?}", self.shape(b), xs);
        }
        let inner = xs[1..].iter().product::<usize>();
        let mut value = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for (c, chunk) in value.data_mut().chunks_mut(inner.max(1)).enumerate() {
            for v in chunk {
                *v += bias[c];
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::AddChannelBias { x, b }, needs))
    }

    /// Adds `b` (`P`) to every row of `x` (`C x P`).
    pub fn add_position_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || self.shape(b) != [xs[1]] {
            bail!(Shape, "position bias {:?} for {:?}", self.shape(b), xs);
        }
        let mut value = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in value.data_mut().chunks_mut(xs[1]) {
            for (v, &bb) in row.iter_mut().zip(&bias) {
                *v += bb;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(value, Op::AddPositionBias { x, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            bail!(Shape, "add {:?} vs {:?}", self.shape(a), self.shape(b));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let value = self.value(x).map(|v| v * s);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, s), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, lo: usize, hi: usize) -> Result<Var> {
        let s = self.shape(x);
        if axis >= s.len() || lo > hi || hi > s[axis] {
            bail!(Shape, "narrow [{}, {}) on axis {} of {:?}", lo, hi, axis, s);
        }
        let value = self.value(x).narrow(axis, lo, hi);
        let needs = self.needs(x);
        Ok(self.push(value, Op::Narrow { x, axis, lo }, needs))
    }

    pub fn resample(&mut self, x: Var, map: Arc<ResampleMap>) -> Result<Var> {
        let value = geometry::bilinear_sample(self.value(x), &map)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Resample { x, map }, needs))
    }

    /// Softmax over the last axis of a 2-D value.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            bail!(Shape, "softmax_rows needs 2-D input, got {:?}", s);
        }
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(s[1]) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(value, Op::SoftmaxRows(x), needs))
    }

    /// Records a scalar whose gradients w.r.t. `inputs` were computed by the
    /// caller.
    pub fn scalar_fn(&mut self, inputs: &[Var], value: T, grads: Vec<Tensor<T>>) -> Result<Var> {
        if inputs.len() != grads.len() {
            bail!(Shape, "scalar_fn: {} inputs, {} grads", inputs.len(), grads.len());
        }
        for (&i, g) in inputs.iter().zip(&grads) {
            if self.shape(i) != g.shape() {
                bail!(
                    Shape,
                    "scalar_fn gradient {:?} for input {:?}",
                    g.shape(),
                    self.shape(i)
                );
            }
        }
        let needs = inputs.iter().any(|&i| self.needs(i));
        Ok(self.push(
            Tensor::scalar(value),
            Op::Scalar {
                inputs: inputs.to_vec(),
                grads,
            },
            needs,
        ))
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Result<Var> {
        let mut total = T::zero();
        let mut inputs = Vec::with_capacity(terms.len());
        let mut grads = Vec::with_capacity(terms.len());
        for &(v, w) in terms {
            if self.shape(v) != [1] {
                bail!(Shape, "weighted_sum expects scalars");
            }
            total += w * self.value(v).data()[0];
            inputs.push(v);
            grads.push(Tensor::scalar(w));
        }
        self.scalar_fn(&inputs, total, grads)
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Grads<T>> {
        if self.shape(output) != [1] {
            bail!(Shape, "backward needs a scalar output, got {:?}", self.shape(output));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(&node.op, &g, idx, &mut grads)?;
            grads[idx] = Some(g);
        }
        let params = self
            .param_nodes
            .iter()
            .map(|(&id, &v)| (ParamId(id), v))
            .collect();
        Ok(Grads {
            nodes: grads,
            params,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op<T>,
        g: &Tensor<T>,
        idx: usize,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Constant | Op::Param(_) => {}
            Op::Conv2d { x, w, b, spec, cols } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let out_shape = self.nodes[idx].value.as_ref().unwrap().shape().to_vec();
                let (o, ho, wo) = (out_shape[0], out_shape[1], out_shape[2]);
                let p = ho * wo;
                let ckk = ws[1] * ws[2] * ws[3];
                if self.needs(*b) {
                    let db: Vec<T> = g
                        .data()
                        .chunks(p)
                        .map(|c| c.iter().fold(T::zero(), |a, &v| a + v))
                        .collect();
                    self.accumulate(grads, *b, Tensor::from_vec(&[o], db)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); o * ckk];
                    T::gemm(o, p, ckk, T::one(), g.data(), false, cols, true, T::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::from_vec(&ws, dw)?);
                }
                if self.needs(*x) {
                    let mut dcols = vec![T::zero(); ckk * p];
                    T::gemm(
                        ckk,
                        o,
                        p,
                        T::one(),
                        self.value(*w).data(),
                        true,
                        g.data(),
                        false,
                        T::zero(),
                        &mut dcols,
                    );
                    let dx = col2im(
                        &dcols,
                        (xs[0], xs[1], xs[2]),
                        (ws[2], ws[3]),
                        *spec,
                        (ho, wo),
                    );
                    self.accumulate(grads, *x, Tensor::from_vec(&xs, dx)?);
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d: Vec<T> = g
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d)?);
            }
            Op::Sigmoid(x) => {
                let y = self.nodes[idx].value.as_ref().unwrap().data();
                let d: Vec<T> = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&gv, &s)| gv * s * (T::one() - s))
                    .collect();
                self.accumulate(grads, *x, Tensor::from_vec(g.shape(), d)?);
            }
            Op::MatMul {
                a,
                b,
                ta,
                tb,
                dims: (m, k, n),
            } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(*a) {
                    // dA (m x k) = G (m x n) * op(B)^T; stored transposed when ta
                    let mut da = vec![T::zero(); m * k];
                    if *ta {
                        // dA^T (k x m) = op(B) * G^T
                        T::gemm(k, n, m, T::one(), self.value(*b).data(), *tb, g.data(), true, T::zero(), &mut da);
                    } else {
                        T::gemm(m, n, k, T::one(), g.data(), false, self.value(*b).data(), !*tb, T::zero(), &mut da);
                    }
                    let shape = self.shape(*a).to_vec();
                    self.accumulate(grads, *a, Tensor::from_vec(&shape, da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    if *tb {
                        // dB^T (n x k) = G^T * op(A)
                        T::gemm(n, m, k, T::one(), g.data(), true, self.value(*a).data(), *ta, T::zero(), &mut db);
                    } else {
                        T::gemm(k, m, n, T::one(), self.value(*a).data(), !*ta, g.data(), false, T::zero(), &mut db);
                    }
                    let shape = self.shape(*b).to_vec();
                    self.accumulate(grads, *b, Tensor::from_vec(&shape, db)?);
                }
            }
            Op::AddChannelBias { x, b } => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let c = self.shape(*b)[0];
                    let inner = g.len() / c.max(1);
                    let db: Vec<T> = g
                        .data()
                        .chunks(inner.max(1))
                        .map(|ch| ch.iter().fold(T::zero(), |a, &v| a + v))
                        .collect();
                    self.accumulate(grads, *b, Tensor::from_vec(&[c], db)?);
                }
            }
            Op::AddPositionBias { x, b } => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let p = self.shape(*b)[0];
                    let mut db = vec![T::zero(); p];
                    for row in g.data().chunks(p) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, *b, Tensor::from_vec(&[p], db)?);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(x, s) => {
                let s = *s;
                self.accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape)?);
            }
            Op::Concat { parts, axis } => {
                let mut lo = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.needs(p) {
                        self.accumulate(grads, p, g.narrow(*axis, lo, lo + len));
                    }
                    lo += len;
                }
            }
            Op::Narrow { x, axis, lo } => {
                if self.needs(*x) {
                    let xs = self.shape(*x).to_vec();
                    let outer: usize = xs[..*axis].iter().product();
                    let inner: usize = xs[*axis + 1..].iter().product();
                    let dim = xs[*axis];
                    let width = g.shape()[*axis];
                    let mut d = vec![T::zero(); xs.iter().product()];
                    for o in 0..outer {
                        let src = &g.data()[o * width * inner..(o + 1) * width * inner];
                        let base = o * dim * inner + lo * inner;
                        d[base..base + width * inner].copy_from_slice(src);
                    }
                    self.accumulate(grads, *x, Tensor::from_vec(&xs, d)?);
                }
            }
            Op::Resample { x, map } => {
                if self.needs(*x) {
                    self.accumulate(grads, *x, geometry::bilinear_sample_backward(g, map)?);
                }
            }
            Op::SoftmaxRows(x) => {
                let y = self.nodes[idx].value.as_ref().unwrap();
                let cols = y.shape()[1];
                let mut d = vec![T::zero(); y.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(cols)
                    .zip(y.data().chunks(cols))
                    .zip(g.data().chunks(cols))
                {
                    let dot = yr.iter().zip(gr).fold(T::zero(), |a, (&yv, &gv)| a + yv * gv);
                    for ((dv, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::from_vec(y.shape(), d)?);
            }
            Op::Scalar { inputs, grads: local } => {
                let seed = g.data()[0];
                for (&i, lg) in inputs.iter().zip(local) {
                    if self.needs(i) {
                        self.accumulate(grads, i, lg.map(|v| v * seed));
                    }
                }
            }
        }
        Ok(())
    }
}
