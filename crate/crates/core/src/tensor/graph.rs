use super::kernels;
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, shared_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    Log { x: Var, floor: T },
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    LayerNorm { x: Var, gain: Var, shift: Var, xhat: Vec<T>, rstd: Vec<T> },
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Expand { x: Var },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddSuffix(..) => "add_broadcast",
            Op::Scale(..) => "scale",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::Log { .. } => "log",
            Op::MeanAxis { .. } => "mean_axis",
            Op::Sum(_) => "sum",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Transpose(_) => "transpose",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Reshape(_) => "reshape",
            Op::Expand { .. } => "expand",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddSuffix(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Relu(x)
            | Op::Softmax(x)
            | Op::Log { x, .. }
            | Op::MeanAxis { x, .. }
            | Op::Sum(x)
            | Op::Transpose(x)
            | Op::Slice { x, .. }
            | Op::Reshape(x)
            | Op::Expand { x } => vec![*x],
            Op::LayerNorm { x, gain, shift, .. } => vec![*x, *gain, *shift],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Append-only record of executed primitives.
///
/// Gradients are not accumulated across backward passes: a second
/// [`Graph::backward`] fails until [`Graph::zero_grad`] is called.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    has_grads: bool,
    audit: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl<T: Real> Graph<T> {
    /// New empty record. The per-op finiteness audit is on in debug builds.
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            has_grads: false,
            audit: cfg!(debug_assertions),
        }
    }

    pub fn with_audit(mut self, audit: bool) -> Self {
        self.audit = audit;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.has_grads = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if self.audit && !value.is_finite() {
            return Err(Error::Numeric { op: op.name() });
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, op)
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())?;
        self.push(out, op)
    }

    /// Batched matrix product `[.., n, k] · [.., k, m]`.
    ///
    /// Batch extents must be equal, or `b` may be a plain matrix shared by
    /// every batch entry of `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let err = || Error::Dimension(format!("matmul: cannot multiply {sa:?} by {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let shared_b = batch_b.is_empty();
        if !shared_b && batch_a != batch_b {
            return Err(err());
        }
        let batches: usize = batch_a.iter().product();
        let mut out = vec![T::zero(); batches * n * m];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..batches {
                let boff = if shared_b { 0 } else { i * k * m };
                kernels::matmul_acc(
                    &av[i * n * k..(i + 1) * n * k],
                    &bv[boff..boff + k * m],
                    &mut out[i * n * m..(i + 1) * n * m],
                    n,
                    k,
                    m,
                );
            }
        }
        let mut shape = batch_a.to_vec();
        shape.extend([n, m]);
        self.push(Tensor::new(shape, out)?, Op::MatMul { a, b, shared_b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Dimension(format!(
                "add_broadcast: {sb:?} is not a suffix of {sa:?}"
            )));
        }
        let (x, y) = (self.value(a), self.value(b));
        let width = y.len();
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(width) {
            for (d, &v) in chunk.iter_mut().zip(y.data()) {
                *d = *d + v;
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push(out, Op::AddSuffix(a, b))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        self.map(x, Op::Scale(x, factor), |v| v * factor)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), |v| v.max(T::zero()))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, x: Var, floor: T) -> Result<Var> {
        self.map(x, Op::Log { x, floor }, |v| v.max(floor).ln())
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let width = match t.shape().last() {
            Some(&w) if w > 0 => w,
            _ => {
                return Err(Error::Dimension(format!(
                    "softmax: tensor of shape {:?} has no last axis",
                    t.shape()
                )))
            }
        };
        let data = kernels::softmax_rows(t.data(), width);
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push(out, Op::Softmax(x))
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Dimension(format!(
                "mean_axis: axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, extent, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let base = (o * extent + e) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + src[base + i];
                }
            }
        }
        let inv = T::one() / T::of(extent as f64);
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut new_shape = shape;
        new_shape.remove(axis);
        self.push(Tensor::new(new_shape, out)?, Op::MeanAxis { x, axis })
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x))
    }

    /// Layer normalization over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gain: Var, shift: Var) -> Result<Var> {
        let width = *self.shape(x).last().unwrap_or(&0);
        if self.shape(gain) != [width] || self.shape(shift) != [width] {
            return Err(Error::Dimension(format!(
                "layer_norm: input {:?} with gain {:?} and shift {:?}",
                self.shape(x),
                self.shape(gain),
                self.shape(shift)
            )));
        }
        let t = self.value(x);
        let (g, s) = (self.value(gain).data(), self.value(shift).data());
        let inv_w = T::one() / T::of(width as f64);
        let eps = T::of(LAYER_NORM_EPS);
        let mut xhat = vec![T::zero(); t.len()];
        let mut rstd = Vec::with_capacity(t.len() / width);
        let mut out = vec![T::zero(); t.len()];
        for (r, row) in t.data().chunks(width).enumerate() {
            let mean = row.iter().copied().sum::<T>() * inv_w;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_w;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..width {
                let h = (row[j] - mean) * rs;
                xhat[r * width + j] = h;
                out[r * width + j] = h * g[j] + s[j];
            }
        }
        let out = Tensor::new(t.shape().to_vec(), out)?;
        self.push(out, Op::LayerNorm { x, gain, shift, xhat, rstd })
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        if rank < 2 {
            return Err(Error::Dimension(format!(
                "transpose: rank {rank} tensor has fewer than two axes"
            )));
        }
        let (r, c) = (t.shape()[rank - 2], t.shape()[rank - 1]);
        let data = transpose_blocks(t.data(), r, c);
        let mut shape = t.shape().to_vec();
        shape.swap(rank - 2, rank - 1);
        self.push(Tensor::new(shape, data)?, Op::Transpose(x))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("concat: no operands".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::Dimension(format!(
                "concat: axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agrees = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::Dimension(format!(
                    "concat along axis {axis}: {s:?} does not match {base:?}"
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = kernels::split_axis(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let block = ext * inner;
                out.extend_from_slice(&self.value(p).data()[o * block..(o + 1) * block]);
            }
        }
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Entries `start..end` along `axis`.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::Bounds(format!(
                "slice {start}..{end} along axis {axis} of {shape:?}"
            )));
        }
        let (outer, extent, inner) = kernels::split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = end - start;
        self.push(Tensor::new(new_shape, out)?, Op::Slice { x, axis, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(x))
    }

    /// Repeats `x` `n` times along a new leading axis.
    pub fn expand(&mut self, x: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::Dimension("expand: zero copies".into()));
        }
        let t = self.value(x);
        let mut shape = vec![n];
        shape.extend_from_slice(t.shape());
        let mut data = Vec::with_capacity(n * t.len());
        for _ in 0..n {
            data.extend_from_slice(t.data());
        }
        self.push(Tensor::new(shape, data)?, Op::Expand { x })
    }

    /// Reverse pass from a one-element loss.
    ///
    /// Afterwards every `requires_grad` leaf holds a gradient (zeros when it
    /// does not reach the loss).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.has_grads {
            return Err(Error::Contract(
                "gradients already populated; call zero_grad before another backward".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !node.requires_grad {
                continue;
            }
            let data = match grads.get_mut(i).and_then(Option::take) {
                Some(d) => d,
                None if matches!(node.op, Op::Leaf) => vec![T::zero(); node.value.len()],
                None => continue,
            };
            node.grad = Some(Tensor::new(node.value.shape().to_vec(), data)?);
        }
        self.has_grads = true;
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let name = node.op.name();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let len_of = |v: Var| self.nodes[v.0].value.len();
        // Accumulates into the gradient slot of `v`, allocating zeros first.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| -> Result<()> {
            if !wants(v) {
                return Ok(());
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len_of(v)]);
            f(slot);
            if slot.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric { op: name });
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, shared_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let m = sb[sb.len() - 1];
                let batches = self.value(*a).len() / (n * k);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |da| {
                    for bi in 0..batches {
                        let boff = if *shared_b { 0 } else { bi * k * m };
                        kernels::matmul_bt_acc(
                            &g[bi * n * m..(bi + 1) * n * m],
                            &bv[boff..boff + k * m],
                            &mut da[bi * n * k..(bi + 1) * n * k],
                            n,
                            k,
                            m,
                        );
                    }
                })?;
                acc(*b, &mut |db| {
                    for bi in 0..batches {
                        let boff = if *shared_b { 0 } else { bi * k * m };
                        kernels::matmul_at_acc(
                            &av[bi * n * k..(bi + 1) * n * k],
                            &g[bi * n * m..(bi + 1) * n * m],
                            &mut db[boff..boff + k * m],
                            n,
                            k,
                            m,
                        );
                    }
                })?;
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g))?;
                acc(*b, &mut |d| add_into(d, g))?;
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g))?;
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d - g))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |d| {
                    for ((d, &g), &y) in d.iter_mut().zip(g).zip(bv) {
                        *d = *d + g * y;
                    }
                })?;
                acc(*b, &mut |d| {
                    for ((d, &g), &x) in d.iter_mut().zip(g).zip(av) {
                        *d = *d + g * x;
                    }
                })?;
            }
            Op::AddSuffix(a, b) => {
                acc(*a, &mut |d| add_into(d, g))?;
                let width = len_of(*b);
                acc(*b, &mut |d| {
                    for chunk in g.chunks(width) {
                        add_into(d, chunk);
                    }
                })?;
            }
            Op::Scale(x, s) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, &g)| *d = *d + g * *s))?;
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(xv) {
                        *d = *d + g * kernels::gelu_grad(v);
                    }
                })?;
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                acc(*x, &mut |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > T::zero() {
                            *d = *d + g;
                        }
                    }
                })?;
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let width = *node.value.shape().last().unwrap();
                acc(*x, &mut |d| {
                    for ((dr, gr), yr) in d.chunks_mut(width).zip(g.chunks(width)).zip(y.chunks(width)) {
                        let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((d, &g), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = *d + y * (g - dot);
                        }
                    }
                })?;
            }
            Op::Log { x, floor } => {
                let xv = self.value(*x).data();
                acc(*x, &mut |d| {
                    for ((d, &g), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > *floor {
                            *d = *d + g / v;
                        }
                    }
                })?;
            }
            Op::MeanAxis { x, axis } => {
                let (outer, extent, inner) = kernels::split_axis(self.shape(*x), *axis);
                let inv = T::one() / T::of(extent as f64);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for e in 0..extent {
                            let base = (o * extent + e) * inner;
                            for i in 0..inner {
                                d[base + i] = d[base + i] + g[o * inner + i] * inv;
                            }
                        }
                    }
                })?;
            }
            Op::Sum(x) => {
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d = *d + g[0]))?;
            }
            Op::LayerNorm { x, gain, shift, xhat, rstd } => {
                let width = *self.shape(*x).last().unwrap();
                let gv = self.value(*gain).data();
                acc(*gain, &mut |d| {
                    for (gr, hr) in g.chunks(width).zip(xhat.chunks(width)) {
                        for j in 0..width {
                            d[j] = d[j] + gr[j] * hr[j];
                        }
                    }
                })?;
                acc(*shift, &mut |d| {
                    for gr in g.chunks(width) {
                        add_into(d, gr);
                    }
                })?;
                let inv_w = T::one() / T::of(width as f64);
                acc(*x, &mut |d| {
                    let rows = d.chunks_mut(width).zip(g.chunks(width)).zip(xhat.chunks(width));
                    for (((dr, gr), hr), &rs) in rows.zip(rstd) {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..width {
                            let dh = gr[j] * gv[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * hr[j];
                        }
                        mean_dh = mean_dh * inv_w;
                        mean_dh_h = mean_dh_h * inv_w;
                        for j in 0..width {
                            let dh = gr[j] * gv[j];
                            dr[j] = dr[j] + rs * (dh - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                })?;
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let back = transpose_blocks(g, r, c);
                acc(*x, &mut |d| add_into(d, &back))?;
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = kernels::split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    acc(p, &mut |d| {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + ext) * inner];
                            add_into(&mut d[o * ext * inner..(o + 1) * ext * inner], src);
                        }
                    })?;
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, extent, inner) = kernels::split_axis(self.shape(*x), *axis);
                let width = node.value.shape()[*axis];
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        add_into(&mut d[dst..dst + width * inner], &g[o * width * inner..(o + 1) * width * inner]);
                    }
                })?;
            }
            Op::Reshape(x) => {
                acc(*x, &mut |d| add_into(d, g))?;
            }
            Op::Expand { x } => {
                let width = len_of(*x);
                acc(*x, &mut |d| {
                    for chunk in g.chunks(width) {
                        add_into(d, chunk);
                    }
                })?;
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn transpose_blocks<T: Real>(src: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for (sb, ob) in src.chunks(r * c).zip(out.chunks_mut(r * c)) {
        for i in 0..r {
            for j in 0..c {
                ob[j * r + i] = sb[i * c + j];
            }
        }
    }
    out
}
