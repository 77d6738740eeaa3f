//! Computation record and reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes whose
//! inputs carry no gradient are stored as constants, so inference forwards
//! keep no backward state. `backward` walks the record in reverse insertion
//! order, which is a valid reverse topological order because a node can only
//! reference nodes created before it.

use super::params::{ParamId, ParamStore};
use super::tensor::{numel, strides, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Softmax {
        a: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Reshape(Var),
    Permute {
        a: Var,
        perm: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        a: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Sum {
        a: Var,
        axis: Option<usize>,
    },
    Mean {
        a: Var,
        axis: Option<usize>,
    },
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Ordered record of operations for one forward pass.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    inference: bool,
}

/// Gradients of one scalar with respect to the leaves of a graph.
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            inference: false,
        }
    }

    /// A graph that never tracks gradients, even for trainable parameters.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            inference: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Bind a stored parameter as a leaf. It tracks gradients iff the
    /// parameter is in the store's trainable set.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let v = self.leaf(
            store.value(id).clone(),
            !self.inference && store.is_trainable(id),
        );
        self.nodes[v.0].param = Some(id);
        v
    }

    pub(crate) fn bound_params(&self) -> impl Iterator<Item = (Var, ParamId)> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|p| (Var(i), p)))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product over the last two axes. `b` is either a shared 2-D
    /// matrix or carries the same leading batch axes as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let geo = MatGeo::new(&sa, &sb, trans_b)?;
        let mut out = vec![T::zero(); geo.batch * geo.m * geo.n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        geo.forward(av, bv, &mut out);
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(geo.n);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul { a, b, trans_b },
            &[a, b],
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_op("add", self.value(a), self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_op("sub", self.value(a), self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_op("mul", self.value(a), self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(Error::dim(
                "softmax",
                format!("axis {axis} out of range for {:?}", x.shape()),
            ));
        }
        let (outer, n, inner) = split_axis(x.shape(), axis);
        let xd = x.data();
        let mut y = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..n {
                    mx = mx.max(xd[base + j * inner]);
                }
                let mut s = T::zero();
                for j in 0..n {
                    let e = (xd[base + j * inner] - mx).exp();
                    y[base + j * inner] = e;
                    s += e;
                }
                let inv = T::one() / s;
                for j in 0..n {
                    y[base + j * inner] *= inv;
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), y);
        Ok(self.push(out, Op::Softmax { a, axis }, &[a]))
    }

    /// Normalise over the last axis, then apply per-feature gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs
            .last()
            .ok_or_else(|| Error::dim("layer_norm", "scalar input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "input {:?} with gain {:?}, bias {:?}",
                    xs,
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let rows = numel(&xs) / d;
        let (xv, gv, bv) = (
            self.value(x).data(),
            self.value(gain).data(),
            self.value(bias).data(),
        );
        let dn = T::of(d as f64);
        let eps = T::of(LN_EPS);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut y = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                y[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let out = Tensor::from_parts(xs, y);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (c, k) = (T::of(GELU_C), T::of(GELU_K));
        let half = T::of(0.5);
        let out = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Reorder axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if !is_permutation(perm, x.rank()) {
            return Err(Error::dim(
                "permute",
                format!("{perm:?} is not a permutation of {} axes", x.rank()),
            ));
        }
        let out = permute_tensor(x, perm);
        Ok(self.push(
            out,
            Op::Permute {
                a,
                perm: perm.to_vec(),
            },
            &[a],
        ))
    }

    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let r = self.value(a).rank();
        if d0 >= r || d1 >= r {
            return Err(Error::dim(
                "transpose",
                format!("axes {d0},{d1} of rank {r}"),
            ));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(d0, d1);
        self.permute(a, &perm)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::dim("concat", "no parts"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::dim(
                    "concat",
                    format!("{s:?} vs {first:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let e = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * e * inner..(o + 1) * e * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::dim(
                "slice",
                format!("{start}..{end} on axis {axis} of {s:?}"),
            ));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let len = end - start;
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner;
            data.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::Slice { a, axis, start }, &[a]))
    }

    /// Rows of a `[vocab, width]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() {
            return Err(Error::dim(
                "gather",
                format!("table {s:?}, {} ids", ids.len()),
            ));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= s[0]) {
            return Err(Error::dim("gather", format!("id {bad} >= vocab {}", s[0])));
        }
        let w = s[1];
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * w);
        for &i in ids {
            data.extend_from_slice(&src[i * w..(i + 1) * w]);
        }
        let out = Tensor::from_parts(vec![ids.len(), w], data);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Sum over one axis (removed from the shape) or over everything.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let out = reduce(self.value(a), axis, false)?;
        Ok(self.push(out, Op::Sum { a, axis }, &[a]))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let out = reduce(self.value(a), axis, true)?;
        Ok(self.push(out, Op::Mean { a, axis }, &[a]))
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(
                "mse",
                format!("{:?} vs {:?}", x.shape(), y.shape()),
            ));
        }
        let n = T::of(x.numel() as f64);
        let s: T = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum();
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), &[a, b]))
    }

    // ----------------------------------------------------------- backward

    /// Gradients of the scalar `loss` with respect to every reachable node
    /// that tracks gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::ones(lv.shape()));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, id: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let geo = MatGeo::new(sa, sb, *trans_b).expect("validated in forward");
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); av.len()];
                    geo.grad_a(g.data(), bv, &mut da);
                    self.accumulate(grads, *a, Tensor::from_parts(sa.to_vec(), da));
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); bv.len()];
                    geo.grad_b(g.data(), av, &mut db);
                    self.accumulate(grads, *b, Tensor::from_parts(sb.to_vec(), db));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, reduce_to(g, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    let mut gb = reduce_to(g, self.shape(*b));
                    if neg {
                        gb = gb.map(|v| -v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let t = broadcast_op("mul", g, self.value(*b), |x, y| x * y).unwrap();
                    self.accumulate(grads, *a, reduce_to(&t, self.shape(*a)));
                }
                if self.requires_grad(*b) {
                    let t = broadcast_op("mul", g, self.value(*a), |x, y| x * y).unwrap();
                    self.accumulate(grads, *b, reduce_to(&t, self.shape(*b)));
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s));
            }
            Op::Softmax { a, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let gd = g.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let mut dot = T::zero();
                        for j in 0..n {
                            let k = base + j * inner;
                            dot += gd[k] * y[k];
                        }
                        for j in 0..n {
                            let k = base + j * inner;
                            dx[k] = y[k] * (gd[k] - dot);
                        }
                    }
                }
                self.accumulate(
                    grads,
                    *a,
                    Tensor::from_parts(node.value.shape().to_vec(), dx),
                );
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = *node.value.shape().last().unwrap();
                let rows = rstd.len();
                let gd = g.data();
                let gv = self.value(*gain).data();
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut dg = vec![T::zero(); d];
                    let mut dbias = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            let k = r * d + j;
                            dg[j] += gd[k] * xhat[k];
                            dbias[j] += gd[k];
                        }
                    }
                    self.accumulate(grads, *gain, Tensor::from_parts(vec![d], dg));
                    self.accumulate(grads, *bias, Tensor::from_parts(vec![d], dbias));
                }
                if self.requires_grad(*x) {
                    let dn = T::of(d as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for r in 0..rows {
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let k = r * d + j;
                            let dh = gd[k] * gv[j];
                            m1 += dh;
                            m2 += dh * xhat[k];
                        }
                        m1 = m1 / dn;
                        m2 = m2 / dn;
                        for j in 0..d {
                            let k = r * d + j;
                            let dh = gd[k] * gv[j];
                            dx[k] = rstd[r] * (dh - m1 - xhat[k] * m2);
                        }
                    }
                    self.accumulate(
                        grads,
                        *x,
                        Tensor::from_parts(node.value.shape().to_vec(), dx),
                    );
                }
            }
            Op::Gelu(a) => {
                let (c, k) = (T::of(GELU_C), T::of(GELU_K));
                let half = T::of(0.5);
                let three = T::of(3.0);
                let xv = self.value(*a).data();
                let dx: Vec<T> = xv
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gy)| {
                        let th = (c * (x + k * x * x * x)).tanh();
                        let dth = (T::one() - th * th) * c * (T::one() + three * k * x * x);
                        gy * (half * (T::one() + th) + half * x * dth)
                    })
                    .collect();
                self.accumulate(grads, *a, Tensor::from_parts(self.shape(*a).to_vec(), dx));
            }
            Op::Reshape(a) => {
                let t = g.clone().reshaped(self.shape(*a)).unwrap();
                self.accumulate(grads, *a, t);
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                self.accumulate(grads, *a, permute_tensor(g, &inv));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(g.shape(), *axis);
                let gd = g.data();
                let mut offset = 0;
                for &p in parts {
                    let e = self.shape(p)[*axis];
                    if self.requires_grad(p) {
                        let mut data = Vec::with_capacity(outer * e * inner);
                        for o in 0..outer {
                            let base = o * total * inner + offset * inner;
                            data.extend_from_slice(&gd[base..base + e * inner]);
                        }
                        self.accumulate(grads, p, Tensor::from_parts(self.shape(p).to_vec(), data));
                    }
                    offset += e;
                }
            }
            Op::Slice { a, axis, start } => {
                let s = self.shape(*a).to_vec();
                let (outer, n, inner) = split_axis(&s, *axis);
                let len = g.shape()[*axis];
                let mut dx = vec![T::zero(); numel(&s)];
                let gd = g.data();
                for o in 0..outer {
                    let dst = o * n * inner + start * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, *a, Tensor::from_parts(s, dx));
            }
            Op::Gather { table, ids } => {
                let s = self.shape(*table).to_vec();
                let w = s[1];
                let mut dt = vec![T::zero(); numel(&s)];
                let gd = g.data();
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..w {
                        dt[i * w + j] += gd[r * w + j];
                    }
                }
                self.accumulate(grads, *table, Tensor::from_parts(s, dt));
            }
            Op::Sum { a, axis } | Op::Mean { a, axis } => {
                let s = self.shape(*a).to_vec();
                let count = match axis {
                    Some(ax) => s[*ax],
                    None => numel(&s),
                };
                let f = if matches!(node.op, Op::Mean { .. }) {
                    T::one() / T::of(count as f64)
                } else {
                    T::one()
                };
                let dx = match axis {
                    None => Tensor::full(&s, g.item() * f),
                    Some(ax) => {
                        let (outer, n, inner) = split_axis(&s, *ax);
                        let gd = g.data();
                        let mut dx = vec![T::zero(); numel(&s)];
                        for o in 0..outer {
                            for j in 0..n {
                                for i in 0..inner {
                                    dx[(o * n + j) * inner + i] = gd[o * inner + i] * f;
                                }
                            }
                        }
                        Tensor::from_parts(s, dx)
                    }
                };
                self.accumulate(grads, *a, dx);
            }
            Op::Mse(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let f = T::of(2.0) * g.item() / T::of(x.numel() as f64);
                let diff: Vec<T> = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &q)| (p - q) * f)
                    .collect();
                let da = Tensor::from_parts(x.shape().to_vec(), diff);
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
        }
    }
}

// ------------------------------------------------------------- helpers

/// `(outer, extent, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn is_permutation(perm: &[usize], rank: usize) -> bool {
    if perm.len() != rank {
        return false;
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

/// Visit every index of `shape` in row-major order with running offsets
/// into two strided operands.
fn walk2(shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let r = shape.len();
    let mut idx = vec![0usize; r];
    let (mut oa, mut ob) = (0usize, 0usize);
    for lin in 0..numel(shape) {
        f(lin, oa, ob);
        let mut d = r;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            oa -= sa[d] * shape[d];
            ob -= sb[d] * shape[d];
            idx[d] = 0;
        }
    }
}

fn permute_tensor<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let st = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src: Vec<usize> = perm.iter().map(|&p| st[p]).collect();
    let zero = vec![0; perm.len()];
    let xd = x.data();
    let mut out = Vec::with_capacity(xd.len());
    walk2(&out_shape, &src, &zero, |_, o, _| out.push(xd[o]));
    Tensor::from_parts(out_shape, out)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let x = if i + a.len() >= r {
            a[i + a.len() - r]
        } else {
            1
        };
        let y = if i + b.len() >= r {
            b[i + b.len() - r]
        } else {
            1
        };
        out[i] = match (x, y) {
            _ if x == y => x,
            (1, _) => y,
            (_, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` aligned to `out`, zero on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let st = strides(shape);
    let pad = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < pad || shape[i - pad] == 1 {
                0
            } else {
                st[i - pad]
            }
        })
        .collect()
}

fn broadcast_op<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        let data = ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape().to_vec(), data));
    }
    let out = broadcast_shape(a.shape(), b.shape())
        .ok_or_else(|| Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())))?;
    if out == a.shape() && a.shape().ends_with(b.shape()) {
        let n = bd.len();
        let data = ad
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % n]))
            .collect();
        return Ok(Tensor::from_parts(out, data));
    }
    if out == b.shape() && b.shape().ends_with(a.shape()) {
        let n = ad.len();
        let data = bd
            .iter()
            .enumerate()
            .map(|(i, &y)| f(ad[i % n], y))
            .collect();
        return Ok(Tensor::from_parts(out, data));
    }
    let (sa, sb) = (
        broadcast_strides(a.shape(), &out),
        broadcast_strides(b.shape(), &out),
    );
    let mut data = Vec::with_capacity(numel(&out));
    walk2(&out, &sa, &sb, |_, i, j| data.push(f(ad[i], bd[j])));
    Ok(Tensor::from_parts(out, data))
}

/// Sum a broadcast gradient back down to `shape`.
fn reduce_to<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let n = numel(shape);
    let mut out = vec![T::zero(); n];
    if g.shape().ends_with(shape) {
        for (i, &v) in g.data().iter().enumerate() {
            out[i % n] += v;
        }
    } else {
        let st = broadcast_strides(shape, g.shape());
        let zero = vec![0; g.rank()];
        let gd = g.data();
        walk2(g.shape(), &st, &zero, |lin, o, _| out[o] += gd[lin]);
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn reduce<T: Real>(x: &Tensor<T>, axis: Option<usize>, mean: bool) -> Result<Tensor<T>> {
    match axis {
        None => {
            let s = x.sum_all();
            let v = if mean { s / T::of(x.numel() as f64) } else { s };
            Ok(Tensor::scalar(v))
        }
        Some(ax) => {
            if ax >= x.rank() {
                return Err(Error::dim(
                    if mean { "mean" } else { "sum" },
                    format!("axis {ax} of {:?}", x.shape()),
                ));
            }
            let (outer, n, inner) = split_axis(x.shape(), ax);
            let xd = x.data();
            let mut out = vec![T::zero(); outer * inner];
            for o in 0..outer {
                for j in 0..n {
                    for i in 0..inner {
                        out[o * inner + i] += xd[(o * n + j) * inner + i];
                    }
                }
            }
            if mean {
                let inv = T::one() / T::of(n as f64);
                out.iter_mut().for_each(|v| *v *= inv);
            }
            let mut shape = x.shape().to_vec();
            shape.remove(ax);
            Ok(Tensor::from_parts(shape, out))
        }
    }
}

/// Shape bookkeeping for (batched) matrix products.
struct MatGeo {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    shared_b: bool,
    trans_b: bool,
}

impl MatGeo {
    fn new(sa: &[usize], sb: &[usize], trans_b: bool) -> Result<Self> {
        let bad = || Error::dim("matmul", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(bad());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (bk, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if bk != k {
            return Err(bad());
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != sa[..sa.len() - 2] {
            return Err(bad());
        }
        Ok(Self {
            batch,
            m,
            k,
            n,
            shared_b,
            trans_b,
        })
    }

    /// Strides `(rs, cs)` of the logical k×n operand `b`.
    fn b_strides(&self) -> (isize, isize) {
        if self.trans_b {
            (1, self.k as isize)
        } else {
            (self.n as isize, 1)
        }
    }

    fn forward<T: Real>(&self, a: &[T], b: &[T], c: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        let (rsb, csb) = self.b_strides();
        if self.shared_b {
            T::gemm(
                self.batch * m,
                k,
                n,
                a,
                k as isize,
                1,
                b,
                rsb,
                csb,
                T::zero(),
                c,
            );
        } else {
            for i in 0..self.batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &a[i * m * k..],
                    k as isize,
                    1,
                    &b[i * k * n..],
                    rsb,
                    csb,
                    T::zero(),
                    &mut c[i * m * n..],
                );
            }
        }
    }

    /// dA = dC · B_logicalᵀ
    fn grad_a<T: Real>(&self, dc: &[T], b: &[T], da: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        // B_logicalᵀ is n×k.
        let (rs, cs) = if self.trans_b {
            (k as isize, 1)
        } else {
            (1, n as isize)
        };
        if self.shared_b {
            T::gemm(
                self.batch * m,
                n,
                k,
                dc,
                n as isize,
                1,
                b,
                rs,
                cs,
                T::zero(),
                da,
            );
        } else {
            for i in 0..self.batch {
                T::gemm(
                    m,
                    n,
                    k,
                    &dc[i * m * n..],
                    n as isize,
                    1,
                    &b[i * k * n..],
                    rs,
                    cs,
                    T::zero(),
                    &mut da[i * m * k..],
                );
            }
        }
    }

    /// dB in storage layout: Aᵀ·dC (k×n) or dCᵀ·A (n×k) when transposed.
    fn grad_b<T: Real>(&self, dc: &[T], a: &[T], db: &mut [T]) {
        let (m, k, n) = (self.m, self.k, self.n);
        let (rows, chunks) = if self.shared_b {
            (self.batch * m, 1)
        } else {
            (m, self.batch)
        };
        for i in 0..chunks {
            let (a_i, dc_i) = (&a[i * rows * k..], &dc[i * rows * n..]);
            let out = &mut db[i * k * n..];
            if self.trans_b {
                T::gemm(
                    n,
                    rows,
                    k,
                    dc_i,
                    1,
                    n as isize,
                    a_i,
                    k as isize,
                    1,
                    T::zero(),
                    out,
                );
            } else {
                T::gemm(
                    k,
                    rows,
                    n,
                    a_i,
                    1,
                    k as isize,
                    dc_i,
                    n as isize,
                    1,
                    T::zero(),
                    out,
                );
            }
        }
    }
}
