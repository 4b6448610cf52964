//! Reverse-mode differentiation over a closed set of tensor ops.
//!
//! A [`Graph`] is an arena of values. Every op appends its output; when any
//! input requires a gradient the op also records what `backward` needs.
//! `backward` walks the arena once in reverse execution order, so a node's
//! gradient is complete before it is propagated further.

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvDims};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

/// Handle to a value stored in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// The enumerated op set with its attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    /// Batched `op(a)·op(b)`; rank-2 operands are shared across the batch.
    MatMul { trans_a: bool, trans_b: bool },
    /// 3×3 stride-1 "same" convolution: inputs `x [N,Ci,H,W]`, `w [Co,Ci,3,3]`, `b [Co]`.
    Conv2d,
    /// Broadcasting add (equal rank, size-1 axes repeat).
    Add,
    /// Broadcasting elementwise product.
    Mul,
    Scale(f64),
    Silu,
    /// Inputs `x [N,C,...]`, `gamma [C]`, `beta [C]`.
    GroupNorm { groups: usize },
    /// Softmax over the last axis.
    Softmax,
    Reshape(Vec<usize>),
    Concat { axis: usize },
    AvgPool2,
    NearestUpsample2,
    /// Mean squared error, scalar output.
    MseLoss,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul { .. } => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Silu => "silu",
            OpKind::GroupNorm { .. } => "group_norm",
            OpKind::Softmax => "softmax",
            OpKind::Reshape(_) => "reshape",
            OpKind::Concat { .. } => "concat",
            OpKind::AvgPool2 => "avgpool2",
            OpKind::NearestUpsample2 => "nearest_upsample2",
            OpKind::MseLoss => "mse_loss",
        }
    }
}

enum Saved<S> {
    None,
    Stats { means: Vec<S>, rstds: Vec<S> },
}

struct Record<S> {
    kind: OpKind,
    inputs: Vec<Var>,
    saved: Saved<S>,
}

struct Node<S> {
    value: Tensor<S>,
    requires_grad: bool,
    record: Option<Record<S>>,
}

/// Execution record and value arena for one forward pass.
pub struct Graph<S> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    consumed: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

fn matmul_dims(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Result<MatMulDims> {
    let split = |s: &[usize]| -> Result<(Option<usize>, usize, usize)> {
        match s.len() {
            2 => Ok((None, s[0], s[1])),
            3 => Ok((Some(s[0]), s[1], s[2])),
            r => Err(shape_err("matmul", format!("operand rank {r} not in {{2, 3}}"))),
        }
    };
    let (ab, ar, ac) = split(a)?;
    let (bb, br, bc) = split(b)?;
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(shape_err("matmul", format!("{a:?} x {b:?} (trans {ta}/{tb})")));
    }
    let batch = match (ab, bb) {
        (Some(x), Some(y)) if x != y => {
            return Err(shape_err("matmul", format!("batch {x} vs {y}")));
        }
        (Some(x), _) | (None, Some(x)) => x,
        (None, None) => 1,
    };
    Ok(MatMulDims {
        batch,
        m,
        k,
        n,
        a_batched: ab.is_some(),
        b_batched: bb.is_some(),
    })
}

fn broadcast_shape(a: &[usize], b: &[usize], op: &'static str) -> Result<Vec<usize>> {
    if a.len() != b.len() {
        return Err(shape_err(op, format!("rank {:?} vs {:?}", a, b)));
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            if x == y || y == 1 {
                Ok(x)
            } else if x == 1 {
                Ok(y)
            } else {
                Err(shape_err(op, format!("{:?} vs {:?}", a, b)))
            }
        })
        .collect()
}

fn conv_dims(x: &[usize], w: &[usize], b: &[usize]) -> Result<ConvDims> {
    if x.len() != 4 || w.len() != 4 || b.len() != 1 {
        return Err(shape_err("conv2d", format!("x {x:?}, w {w:?}, b {b:?}")));
    }
    if w[2] != 3 || w[3] != 3 || w[1] != x[1] || b[0] != w[0] {
        return Err(shape_err("conv2d", format!("x {x:?}, w {w:?}, b {b:?}")));
    }
    Ok(ConvDims {
        n: x[0],
        cin: x[1],
        cout: w[0],
        h: x[2],
        w: x[3],
    })
}

/// `(planes, h, w)` of a `[.., H, W]` tensor with even spatial extents.
fn spatial(shape: &[usize], op: &'static str, need_even: bool) -> Result<(usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(shape_err(op, format!("{shape:?} lacks spatial axes")));
    }
    let r = shape.len();
    let (h, w) = (shape[r - 2], shape[r - 1]);
    if need_even && (h % 2 != 0 || w % 2 != 0) {
        return Err(shape_err(op, format!("odd spatial extent {shape:?}")));
    }
    Ok((numel(&shape[..r - 2]), h, w))
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert an input value.
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            record: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Insert a constant (never differentiated).
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on `v` by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Execute `kind` on `inputs`, recording it when any input requires grad.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::Graph("graph already consumed by backward".into()));
        }
        let expect = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(shape_err(
                    "apply",
                    format!("{} takes {n} inputs, got {}", kind.name(), inputs.len()),
                ))
            }
        };
        let mut saved = Saved::None;
        let out: Tensor<S> = match &kind {
            OpKind::MatMul { trans_a, trans_b } => {
                expect(2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                let d = matmul_dims(a.shape(), b.shape(), *trans_a, *trans_b)?;
                let shape = if d.a_batched || d.b_batched {
                    vec![d.batch, d.m, d.n]
                } else {
                    vec![d.m, d.n]
                };
                let mut out = vec![S::zero(); d.batch * d.m * d.n];
                for bi in 0..d.batch {
                    let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
                    let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
                    S::gemm(
                        *trans_a,
                        *trans_b,
                        d.m,
                        d.k,
                        d.n,
                        &a.data()[ao..ao + d.m * d.k],
                        &b.data()[bo..bo + d.k * d.n],
                        &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                        false,
                    );
                }
                Tensor::new(&shape, out)?
            }
            OpKind::Conv2d => {
                expect(3)?;
                let (x, w, b) = (
                    self.value(inputs[0]),
                    self.value(inputs[1]),
                    self.value(inputs[2]),
                );
                let d = conv_dims(x.shape(), w.shape(), b.shape())?;
                let mut out = vec![S::zero(); d.n * d.cout * d.h * d.w];
                kernels::conv3_forward(&d, x.data(), w.data(), b.data(), &mut out);
                Tensor::new(&[d.n, d.cout, d.h, d.w], out)?
            }
            OpKind::Add | OpKind::Mul => {
                expect(2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                let is_add = kind == OpKind::Add;
                if a.shape() == b.shape() {
                    if is_add {
                        a.add(b)?
                    } else {
                        a.zip_with(b, "mul", |x, y| x * y)?
                    }
                } else {
                    let shape = broadcast_shape(a.shape(), b.shape(), kind.name())?;
                    let ma = kernels::broadcast_map(&shape, a.shape());
                    let mb = kernels::broadcast_map(&shape, b.shape());
                    let (ad, bd) = (a.data(), b.data());
                    let data = ma
                        .iter()
                        .zip(&mb)
                        .map(|(&i, &j)| if is_add { ad[i] + bd[j] } else { ad[i] * bd[j] })
                        .collect();
                    Tensor::new(&shape, data)?
                }
            }
            OpKind::Scale(k) => {
                expect(1)?;
                self.value(inputs[0]).scale(S::of(*k))
            }
            OpKind::Silu => {
                expect(1)?;
                self.value(inputs[0]).map(|v| v * kernels::sigmoid(v))
            }
            OpKind::GroupNorm { groups } => {
                expect(3)?;
                let (x, g, b) = (
                    self.value(inputs[0]),
                    self.value(inputs[1]),
                    self.value(inputs[2]),
                );
                let s = x.shape();
                if s.len() < 2 || *groups == 0 || s[1] % groups != 0 {
                    return Err(shape_err("group_norm", format!("{s:?} with {groups} groups")));
                }
                if g.shape() != [s[1]] || b.shape() != [s[1]] {
                    return Err(shape_err("group_norm", "affine parameters must be [C]"));
                }
                let inner = numel(&s[2..]);
                let mut out = vec![S::zero(); x.numel()];
                let (means, rstds) = kernels::group_norm_forward(
                    x.data(),
                    s[0],
                    s[1],
                    inner,
                    *groups,
                    g.data(),
                    b.data(),
                    &mut out,
                );
                saved = Saved::Stats { means, rstds };
                Tensor::new(s, out)?
            }
            OpKind::Softmax => {
                expect(1)?;
                let x = self.value(inputs[0]);
                let cols = *x.shape().last().ok_or_else(|| shape_err("softmax", "rank 0"))?;
                let mut out = vec![S::zero(); x.numel()];
                kernels::softmax_rows(x.data(), cols, &mut out);
                Tensor::new(x.shape(), out)?
            }
            OpKind::Reshape(shape) => {
                expect(1)?;
                self.value(inputs[0]).reshape(shape)?
            }
            OpKind::Concat { axis } => {
                if inputs.is_empty() {
                    return Err(shape_err("concat", "no inputs"));
                }
                let first = self.value(inputs[0]).shape().to_vec();
                if *axis >= first.len() {
                    return Err(shape_err("concat", format!("axis {axis} for {first:?}")));
                }
                let outer = numel(&first[..*axis]);
                let inner = numel(&first[axis + 1..]);
                let mut total = 0;
                for &v in inputs {
                    let s = self.value(v).shape();
                    if s.len() != first.len()
                        || s[..*axis] != first[..*axis]
                        || s[axis + 1..] != first[axis + 1..]
                    {
                        return Err(shape_err("concat", format!("{first:?} vs {s:?}")));
                    }
                    total += s[*axis];
                }
                let mut data = Vec::with_capacity(outer * total * inner);
                for o in 0..outer {
                    for &v in inputs {
                        let t = self.value(v);
                        let chunk = t.shape()[*axis] * inner;
                        data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
                    }
                }
                let mut shape = first;
                shape[*axis] = total;
                Tensor::new(&shape, data)?
            }
            OpKind::AvgPool2 => {
                expect(1)?;
                let x = self.value(inputs[0]);
                let (p, h, w) = spatial(x.shape(), "avgpool2", true)?;
                let mut out = vec![S::zero(); x.numel() / 4];
                kernels::avgpool2_forward(x.data(), p, h, w, &mut out);
                let mut shape = x.shape().to_vec();
                let r = shape.len();
                shape[r - 2] /= 2;
                shape[r - 1] /= 2;
                Tensor::new(&shape, out)?
            }
            OpKind::NearestUpsample2 => {
                expect(1)?;
                let x = self.value(inputs[0]);
                let (p, h, w) = spatial(x.shape(), "nearest_upsample2", false)?;
                let mut out = vec![S::zero(); x.numel() * 4];
                kernels::upsample2_forward(x.data(), p, h, w, &mut out);
                let mut shape = x.shape().to_vec();
                let r = shape.len();
                shape[r - 2] *= 2;
                shape[r - 1] *= 2;
                Tensor::new(&shape, out)?
            }
            OpKind::MseLoss => {
                expect(2)?;
                let (a, b) = (self.value(inputs[0]), self.value(inputs[1]));
                a.expect_same_shape(b, "mse_loss")?;
                let sq: S = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| (x - y) * (x - y))
                    .sum();
                Tensor::scalar(sq / S::of(a.numel() as f64))
            }
        };
        out.check_finite(kind.name())?;
        let requires_grad = inputs.iter().any(|&v| self.requires_grad(v));
        let record = requires_grad.then(|| Record {
            kind,
            inputs: inputs.to_vec(),
            saved,
        });
        self.nodes.push(Node {
            value: out,
            requires_grad,
            record,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        self.apply(OpKind::MatMul { trans_a, trans_b }, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Conv2d, &[x, w, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.apply(OpKind::Scale(k), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Silu, &[a])
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        self.apply(OpKind::GroupNorm { groups }, &[x, gamma, beta])
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::Softmax, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        self.apply(OpKind::Concat { axis }, inputs)
    }

    pub fn avgpool2(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::AvgPool2, &[a])
    }

    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        self.apply(OpKind::NearestUpsample2, &[a])
    }

    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(OpKind::MseLoss, &[a, b])
    }

    /// Propagate `∂loss/∂·` to every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Graph("backward called twice on the same graph".into()));
        }
        if self.nodes.is_empty() {
            return Err(Error::Graph("backward on an empty graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.requires_grad(loss) {
            self.grads = grads;
            return Ok(());
        }
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for id in (0..=loss.0).rev() {
            let Some(record) = self.nodes[id].record.as_ref() else {
                continue;
            };
            let Some(gout) = grads[id].take() else {
                continue;
            };
            let contributions = self.local_grads(id, record, &gout)?;
            for (var, g) in record.inputs.iter().zip(contributions) {
                let Some(g) = g else { continue };
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn local_grads(
        &self,
        id: usize,
        record: &Record<S>,
        gout: &Tensor<S>,
    ) -> Result<Vec<Option<Tensor<S>>>> {
        let inputs = &record.inputs;
        let needs = |i: usize| self.requires_grad(inputs[i]);
        let val = |i: usize| self.value(inputs[i]);
        let g = gout.data();
        let out = match &record.kind {
            OpKind::MatMul { trans_a, trans_b } => {
                let (ta, tb) = (*trans_a, *trans_b);
                let (a, b) = (val(0), val(1));
                let d = matmul_dims(a.shape(), b.shape(), ta, tb)?;
                let mut ga = needs(0).then(|| Tensor::zeros(a.shape()));
                let mut gb = needs(1).then(|| Tensor::zeros(b.shape()));
                for bi in 0..d.batch {
                    let ao = if d.a_batched { bi * d.m * d.k } else { 0 };
                    let bo = if d.b_batched { bi * d.k * d.n } else { 0 };
                    let gc = &g[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                    let ad = &a.data()[ao..ao + d.m * d.k];
                    let bd = &b.data()[bo..bo + d.k * d.n];
                    if let Some(ga) = ga.as_mut() {
                        let dst = &mut ga.data_mut()[ao..ao + d.m * d.k];
                        if ta {
                            S::gemm(tb, true, d.k, d.n, d.m, bd, gc, dst, true);
                        } else {
                            S::gemm(false, !tb, d.m, d.n, d.k, gc, bd, dst, true);
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        let dst = &mut gb.data_mut()[bo..bo + d.k * d.n];
                        if tb {
                            S::gemm(true, ta, d.n, d.m, d.k, gc, ad, dst, true);
                        } else {
                            S::gemm(!ta, false, d.k, d.m, d.n, ad, gc, dst, true);
                        }
                    }
                }
                vec![ga, gb]
            }
            OpKind::Conv2d => {
                let (x, w, b) = (val(0), val(1), val(2));
                let d = conv_dims(x.shape(), w.shape(), b.shape())?;
                let mut gx = needs(0).then(|| Tensor::zeros(x.shape()));
                let mut gw = Tensor::zeros(w.shape());
                let mut gb = Tensor::zeros(b.shape());
                kernels::conv3_backward(
                    &d,
                    x.data(),
                    w.data(),
                    g,
                    gx.as_mut().map(|t| t.data_mut()),
                    gw.data_mut(),
                    gb.data_mut(),
                );
                vec![gx, needs(1).then_some(gw), needs(2).then_some(gb)]
            }
            OpKind::Add | OpKind::Mul => {
                let (a, b) = (val(0), val(1));
                let out_shape = gout.shape();
                let is_add = record.kind == OpKind::Add;
                let mut res = Vec::with_capacity(2);
                for (i, (me, other)) in [(a, b), (b, a)].into_iter().enumerate() {
                    if !needs(i) {
                        res.push(None);
                        continue;
                    }
                    let mut acc = Tensor::zeros(me.shape());
                    let mm = kernels::broadcast_map(out_shape, me.shape());
                    let ad = acc.data_mut();
                    if is_add {
                        for (k, &j) in mm.iter().enumerate() {
                            ad[j] += g[k];
                        }
                    } else {
                        let mo = kernels::broadcast_map(out_shape, other.shape());
                        let od = other.data();
                        for (k, (&j, &o)) in mm.iter().zip(&mo).enumerate() {
                            ad[j] += g[k] * od[o];
                        }
                    }
                    res.push(Some(acc));
                }
                res
            }
            OpKind::Scale(k) => vec![Some(gout.scale(S::of(*k)))],
            OpKind::Silu => {
                let x = val(0);
                let data = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| {
                        let s = kernels::sigmoid(v);
                        gv * s * (S::one() + v * (S::one() - s))
                    })
                    .collect();
                vec![Some(Tensor::new(x.shape(), data)?)]
            }
            OpKind::GroupNorm { groups } => {
                let Saved::Stats { means, rstds } = &record.saved else {
                    return Err(Error::Graph("group_norm record lacks statistics".into()));
                };
                let (x, gamma) = (val(0), val(1));
                let s = x.shape();
                let mut gx = Tensor::zeros(s);
                let mut gg = Tensor::zeros(gamma.shape());
                let mut gb = Tensor::zeros(gamma.shape());
                kernels::group_norm_backward(
                    x.data(),
                    g,
                    s[0],
                    s[1],
                    numel(&s[2..]),
                    *groups,
                    gamma.data(),
                    means,
                    rstds,
                    gx.data_mut(),
                    gg.data_mut(),
                    gb.data_mut(),
                );
                vec![
                    needs(0).then_some(gx),
                    needs(1).then_some(gg),
                    needs(2).then_some(gb),
                ]
            }
            OpKind::Softmax => {
                let y = &self.nodes[id].value;
                let cols = *y.shape().last().unwrap_or(&1);
                let mut gx = Tensor::zeros(y.shape());
                kernels::softmax_rows_backward(y.data(), g, cols, gx.data_mut());
                vec![Some(gx)]
            }
            OpKind::Reshape(_) => vec![Some(gout.reshape(val(0).shape())?)],
            OpKind::Concat { axis } => {
                let shape = gout.shape();
                let outer = numel(&shape[..*axis]);
                let inner = numel(&shape[axis + 1..]);
                let total = shape[*axis] * inner;
                let mut start = 0;
                let mut res = Vec::with_capacity(inputs.len());
                for (i, &v) in inputs.iter().enumerate() {
                    let s = self.shape(v).to_vec();
                    let chunk = s[*axis] * inner;
                    if needs(i) {
                        let mut data = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            data.extend_from_slice(&g[o * total + start..o * total + start + chunk]);
                        }
                        res.push(Some(Tensor::new(&s, data)?));
                    } else {
                        res.push(None);
                    }
                    start += chunk;
                }
                res
            }
            OpKind::AvgPool2 => {
                let x = val(0);
                let (p, h, w) = spatial(x.shape(), "avgpool2", true)?;
                let mut gx = Tensor::zeros(x.shape());
                kernels::avgpool2_backward(g, p, h, w, gx.data_mut());
                vec![Some(gx)]
            }
            OpKind::NearestUpsample2 => {
                let x = val(0);
                let (p, h, w) = spatial(x.shape(), "nearest_upsample2", false)?;
                let mut gx = Tensor::zeros(x.shape());
                kernels::upsample2_backward(g, p, h, w, gx.data_mut());
                vec![Some(gx)]
            }
            OpKind::MseLoss => {
                let (a, b) = (val(0), val(1));
                let k = S::of(2.0) * g[0] / S::of(a.numel() as f64);
                let ga = a.zip_with(b, "mse_loss", |x, y| k * (x - y))?;
                let gb = needs(1).then(|| ga.scale(-S::one()));
                vec![needs(0).then_some(ga), gb]
            }
        };
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f32));
        let y = g.constant(Tensor::from_fn(&[2, 3], |i| i as f32));
        let l = g.mse_loss(x, y).unwrap();
        assert_eq!(g.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::zeros(&[2]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::<f64>::new();
        let a = Tensor::from_fn(&[3, 3], |i| (i as f64).sin());
        let i3 = g.constant(Tensor::eye(3));
        let av = g.constant(a.clone());
        let y = g.matmul(i3, av, false, false).unwrap();
        assert_eq!(g.value(y), &a);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::<f64>::new();
        let xt = Tensor::from_fn(&[5], |i| i as f64 - 2.0);
        let x = g.leaf(xt.clone(), true);
        let zero = g.constant(Tensor::zeros(&[5]));
        // mse(x, 0)·N = Σx²
        let l = g.mse_loss(x, zero).unwrap();
        let l = g.scale(l, 5.0).unwrap();
        g.backward(l).unwrap();
        let want = xt.scale(2.0);
        assert!(g.grad(x).unwrap().max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn linear_layer_gradient_matches_closed_form() {
        // loss = mse(W x, y) with x: [k, n] columns; grad_W = 2 (Wx - y) xᵀ / N
        let (m, k, n) = (3, 4, 5);
        let w = Tensor::<f64>::from_fn(&[m, k], |i| (i as f64 * 0.3).sin());
        let x = Tensor::<f64>::from_fn(&[k, n], |i| (i as f64 * 0.7).cos());
        let y = Tensor::<f64>::from_fn(&[m, n], |i| (i as f64 * 0.2).sin() * 0.5);
        let mut g = Graph::new();
        let wv = g.leaf(w.clone(), true);
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let p = g.matmul(wv, xv, false, false).unwrap();
        let l = g.mse_loss(p, yv).unwrap();
        g.backward(l).unwrap();

        let mut want = vec![0.0; m * k];
        let total = (m * n) as f64;
        for i in 0..m {
            for j in 0..k {
                let mut s = 0.0;
                for c in 0..n {
                    let mut wx = 0.0;
                    for q in 0..k {
                        wx += w.data()[i * k + q] * x.data()[q * n + c];
                    }
                    s += 2.0 * (wx - y.data()[i * n + c]) * x.data()[j * n + c];
                }
                want[i * k + j] = s / total;
            }
        }
        let got = g.grad(wv).unwrap();
        for (a, b) in got.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn backward_twice_is_an_error() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::ones(&[2]), true);
        let z = g.constant(Tensor::zeros(&[2]));
        let l = g.mse_loss(x, z).unwrap();
        g.backward(l).unwrap();
        assert!(matches!(g.backward(l), Err(Error::Graph(_))));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::ones(&[2]), true);
        let y = g.silu(x).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::ones(&[2, 3]));
        let b = g.constant(Tensor::ones(&[2, 3]));
        assert!(matches!(g.matmul(a, b, false, false), Err(Error::Shape { .. })));
        let c = g.constant(Tensor::ones(&[4, 3]));
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::full(&[2], f32::MAX));
        assert!(matches!(g.scale(a, 10.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn unrecorded_when_nothing_requires_grad() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::ones(&[2]));
        let b = g.silu(a).unwrap();
        assert!(!g.requires_grad(b));
        assert!(g.nodes[b.0].record.is_none());
    }

    #[test]
    fn group_norm_normalizes_each_group() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_fn(&[2, 4, 3, 3], |i| ((i * 7919) % 97) as f32 * 0.1 - 3.0));
        let gamma = g.constant(Tensor::ones(&[4]));
        let beta = g.constant(Tensor::zeros(&[4]));
        let y = g.group_norm(x, gamma, beta, 2).unwrap();
        for seg in g.value(y).data().chunks(18) {
            let m: f64 = seg.iter().map(|&v| v as f64).sum::<f64>() / 18.0;
            let v: f64 = seg.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 18.0;
            assert!(m.abs() <= 1e-5);
            assert!((v.sqrt() - 1.0).abs() <= 1e-4);
        }
    }
}
