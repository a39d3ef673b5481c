//! Dense f64 arrays with reverse-mode automatic differentiation.
//!
//! The engine is a classic Wengert tape sized for small fixed-shape
//! networks: every operation appends a node holding its output value and
//! enough information to replay the chain rule, and [`Tape::backward`]
//! walks the nodes in exact reverse execution order. A tape lives for one
//! forward pass and is dropped after backward; distinct tapes are
//! independent and may run on distinct threads.
//!
//! Broadcasting is limited to what the model needs: equal shapes, a
//! scalar against anything, and a `[C]` vector against a `[C, H, W]`
//! feature map (per-channel).

pub mod kernels;

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of f64 values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Array { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Array { shape, data: vec![0.0; len] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Array { shape, data: vec![value; len] }
    }

    pub fn scalar(value: f64) -> Self {
        Array { shape: vec![1], data: vec![value] }
    }

    /// 1-D array from a vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Array { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Scalar value; panics if the array is not length 1.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar array");
        self.data[0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of the flattened data.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// How the operands of a binary elementwise op relate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// Left operand is a scalar broadcast over the right.
    LeftScalar,
    /// Right operand is a scalar broadcast over the left.
    RightScalar,
    /// Left operand is `[C]` broadcast over right `[C, H, W]`.
    LeftChannel,
    /// Right operand is `[C]` broadcast over left `[C, H, W]`.
    RightChannel,
}

fn resolve_broadcast(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    let a_len: usize = a.iter().product();
    let b_len: usize = b.iter().product();
    if a_len == 1 {
        return Ok(Broadcast::LeftScalar);
    }
    if b_len == 1 {
        return Ok(Broadcast::RightScalar);
    }
    if a.len() == 1 && b.len() == 3 && a[0] == b[0] {
        return Ok(Broadcast::LeftChannel);
    }
    if b.len() == 1 && a.len() == 3 && b[0] == a[0] {
        return Ok(Broadcast::RightChannel);
    }
    Err(Error::Shape(format!("cannot broadcast {a:?} against {b:?}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Silu,
    Exp,
    Log,
    Neg,
    Relu,
    NormCdf,
}

enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        bc: Broadcast,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    Scale {
        a: usize,
        factor: f64,
    },
    Clip {
        a: usize,
        lo: f64,
        hi: f64,
    },
    Conv2d {
        input: usize,
        kernels: usize,
        padding: usize,
        stride: usize,
    },
    Linear {
        weight: usize,
        input: usize,
        bias: usize,
    },
    Concat {
        a: usize,
        b: usize,
        a_rows: usize,
    },
    UpsampleNearest {
        a: usize,
        src_h: usize,
        src_w: usize,
    },
    Reshape {
        a: usize,
    },
    Sum {
        a: usize,
    },
    Mean {
        a: usize,
    },
}

struct Node {
    value: Array,
    requires_grad: bool,
    op: Op,
}

/// Handle to a value on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape_id: u64,
    index: usize,
}

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Record of one forward pass.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const SQRT_2PI: f64 = 2.506_628_274_631_000_5;

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Standard normal CDF, accurate to well below 1e-12 absolute error.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / SQRT_2PI
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Array, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node { value, requires_grad, op });
        Var { tape_id: self.id, index: self.nodes.len() - 1 }
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape_id != self.id {
            return Err(Error::Graph(format!(
                "var from tape {} used on tape {}",
                v.tape_id, self.id
            )));
        }
        if v.index >= self.nodes.len() {
            return Err(Error::Graph(format!("var index {} out of range", v.index)));
        }
        Ok(v.index)
    }

    /// Insert an array as a leaf.
    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Constant scalar leaf.
    pub fn constant(&mut self, value: f64) -> Var {
        self.leaf(Array::scalar(value), false)
    }

    /// Value of a var.
    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.index].value
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let (va, vb) = (&self.nodes[ai].value, &self.nodes[bi].value);
        let bc = resolve_broadcast(va.shape(), vb.shape())?;
        let out_shape = match bc {
            Broadcast::Same | Broadcast::RightScalar | Broadcast::RightChannel => va.shape.clone(),
            Broadcast::LeftScalar | Broadcast::LeftChannel => vb.shape.clone(),
        };
        let n: usize = out_shape.iter().product();
        let mut data = vec![0.0; n];
        {
            let (ad, bd) = (&va.data, &vb.data);
            let (ia, ib) = operand_indexers(bc, &out_shape);
            for (i, slot) in data.iter_mut().enumerate() {
                let x = ad[ia(i)];
                let y = bd[ib(i)];
                *slot = match kind {
                    BinaryKind::Add => x + y,
                    BinaryKind::Sub => x - y,
                    BinaryKind::Mul => x * y,
                    BinaryKind::Div => {
                        if y == 0.0 {
                            return Err(Error::Domain("division by zero".into()));
                        }
                        x / y
                    }
                };
            }
        }
        if kind == BinaryKind::Div && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("non-finite result in division".into()));
        }
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        Ok(self.push(
            Array { shape: out_shape, data },
            rg,
            Op::Binary { kind, a: ai, b: bi, bc },
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let va = &self.nodes[ai].value;
        if kind == UnaryKind::Log {
            if let Some(bad) = va.data.iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain(format!("log of non-positive value {bad}")));
            }
        }
        let data: Vec<f64> = va
            .data
            .iter()
            .map(|&x| match kind {
                UnaryKind::Silu => x * sigmoid(x),
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Neg => -x,
                UnaryKind::Relu => x.max(0.0),
                UnaryKind::NormCdf => normal_cdf(x),
            })
            .collect();
        if kind == UnaryKind::Exp && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("exp overflow to non-finite value".into()));
        }
        let shape = va.shape.clone();
        let rg = self.nodes[ai].requires_grad;
        Ok(self.push(Array { shape, data }, rg, Op::Unary { kind, a: ai }))
    }

    /// SiLU activation `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Silu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Neg, a)
    }

    /// Hinge `max(0, x)` with zero subgradient at exactly 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    /// Standard normal CDF applied elementwise.
    pub fn normcdf(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::NormCdf, a)
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let va = &self.nodes[ai].value;
        let data: Vec<f64> = va.data.iter().map(|x| x * factor).collect();
        let shape = va.shape.clone();
        let rg = self.nodes[ai].requires_grad;
        Ok(self.push(Array { shape, data }, rg, Op::Scale { a: ai, factor }))
    }

    /// Clamp to `[lo, hi]`; gradient passes through inside the range
    /// (boundary included) and is zero outside.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let ai = self.check(a)?;
        let va = &self.nodes[ai].value;
        let data: Vec<f64> = va.data.iter().map(|x| x.clamp(lo, hi)).collect();
        let shape = va.shape.clone();
        let rg = self.nodes[ai].requires_grad;
        Ok(self.push(Array { shape, data }, rg, Op::Clip { a: ai, lo, hi }))
    }

    /// 2-D cross-correlation of `input [C_in, H, W]` with
    /// `kernels [C_out, C_in, kh, kw]`, zero padding.
    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: usize, stride: usize) -> Result<Var> {
        let ii = self.check(input)?;
        let ki = self.check(kernel)?;
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        let in_shape = self.nodes[ii].value.shape.clone();
        let k_shape = self.nodes[ki].value.shape.clone();
        if in_shape.len() != 3 || k_shape.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects input [C,H,W] and kernels [O,C,kh,kw], got {in_shape:?} and {k_shape:?}"
            )));
        }
        if in_shape[0] != k_shape[1] {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input C={} kernels C={}",
                in_shape[0], k_shape[1]
            )));
        }
        let (c_in, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
        let (c_out, kh, kw) = (k_shape[0], k_shape[2], k_shape[3]);
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let h_out = kernels::conv2d_out_dim(h, kh, padding, stride);
        let w_out = kernels::conv2d_out_dim(w, kw, padding, stride);
        let mut out = vec![0.0; c_out * h_out * w_out];
        kernels::conv2d_forward(
            &self.nodes[ii].value.data,
            (c_in, h, w),
            &self.nodes[ki].value.data,
            (c_out, kh, kw),
            padding,
            stride,
            &mut out,
        );
        let rg = self.nodes[ii].requires_grad || self.nodes[ki].requires_grad;
        Ok(self.push(
            Array { shape: vec![c_out, h_out, w_out], data: out },
            rg,
            Op::Conv2d { input: ii, kernels: ki, padding, stride },
        ))
    }

    /// Affine map `weight [d_out, d_in] * input [d_in] + bias [d_out]`.
    pub fn linear(&mut self, weight: Var, input: Var, bias: Var) -> Result<Var> {
        let wi = self.check(weight)?;
        let xi = self.check(input)?;
        let bi = self.check(bias)?;
        let w_shape = self.nodes[wi].value.shape.clone();
        let x_shape = self.nodes[xi].value.shape.clone();
        let b_shape = self.nodes[bi].value.shape.clone();
        if w_shape.len() != 2 || x_shape.len() != 1 || b_shape.len() != 1 {
            return Err(Error::Shape(format!(
                "linear expects weight [o,i], input [i], bias [o]; got {w_shape:?}, {x_shape:?}, {b_shape:?}"
            )));
        }
        let (d_out, d_in) = (w_shape[0], w_shape[1]);
        if x_shape[0] != d_in || b_shape[0] != d_out {
            return Err(Error::Shape(format!(
                "linear dimension mismatch: weight {d_out}x{d_in}, input {}, bias {}",
                x_shape[0], b_shape[0]
            )));
        }
        let wd = &self.nodes[wi].value.data;
        let xd = &self.nodes[xi].value.data;
        let bd = &self.nodes[bi].value.data;
        let mut out = vec![0.0; d_out];
        for (o, slot) in out.iter_mut().enumerate() {
            let row = &wd[o * d_in..(o + 1) * d_in];
            let mut acc = bd[o];
            for (wv, xv) in row.iter().zip(xd) {
                acc += wv * xv;
            }
            *slot = acc;
        }
        let rg = self.nodes[wi].requires_grad
            || self.nodes[xi].requires_grad
            || self.nodes[bi].requires_grad;
        Ok(self.push(
            Array { shape: vec![d_out], data: out },
            rg,
            Op::Linear { weight: wi, input: xi, bias: bi },
        ))
    }

    /// Concatenate along axis 0. Operands must be both rank 1 or both
    /// rank 3 with matching trailing dimensions.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let bi = self.check(b)?;
        let sa = self.nodes[ai].value.shape.clone();
        let sb = self.nodes[bi].value.shape.clone();
        if sa.len() != sb.len() || sa.is_empty() || sa[1..] != sb[1..] {
            return Err(Error::Shape(format!("cannot concat {sa:?} with {sb:?}")));
        }
        let mut shape = sa.clone();
        shape[0] = sa[0] + sb[0];
        let mut data = Vec::with_capacity(shape.iter().product());
        data.extend_from_slice(&self.nodes[ai].value.data);
        data.extend_from_slice(&self.nodes[bi].value.data);
        let rg = self.nodes[ai].requires_grad || self.nodes[bi].requires_grad;
        let a_rows = sa[0];
        Ok(self.push(Array { shape, data }, rg, Op::Concat { a: ai, b: bi, a_rows }))
    }

    /// Nearest-neighbor spatial resize of a `[C, H, W]` map.
    pub fn upsample_nearest(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let s = self.nodes[ai].value.shape.clone();
        if s.len() != 3 {
            return Err(Error::Shape(format!("upsample expects [C,H,W], got {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let src = &self.nodes[ai].value.data;
        let mut data = vec![0.0; c * out_h * out_w];
        for ch in 0..c {
            for y in 0..out_h {
                let sy = kernels::upsample_src_index(y, h, out_h);
                for x in 0..out_w {
                    let sx = kernels::upsample_src_index(x, w, out_w);
                    data[(ch * out_h + y) * out_w + x] = src[(ch * h + sy) * w + sx];
                }
            }
        }
        let rg = self.nodes[ai].requires_grad;
        Ok(self.push(
            Array { shape: vec![c, out_h, out_w], data },
            rg,
            Op::UpsampleNearest { a: ai, src_h: h, src_w: w },
        ))
    }

    /// Reinterpret the data with a new shape of the same length.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ai = self.check(a)?;
        let len: usize = shape.iter().product();
        if len != self.nodes[ai].value.len() {
            return Err(Error::Shape(format!(
                "reshape to {:?} incompatible with {} elements",
                shape,
                self.nodes[ai].value.len()
            )));
        }
        let data = self.nodes[ai].value.data.clone();
        let rg = self.nodes[ai].requires_grad;
        Ok(self.push(Array { shape, data }, rg, Op::Reshape { a: ai }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let total: f64 = self.nodes[ai].value.data.iter().sum();
        let rg = self.nodes[ai].requires_grad;
        Ok(self.push(Array::scalar(total), rg, Op::Sum { a: ai }))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let n = self.nodes[ai].value.len();
        if n == 0 {
            return Err(Error::EmptyInput("mean of empty array"));
        }
        let total: f64 = self.nodes[ai].value.data.iter().sum();
        let rg = self.nodes[ai].requires_grad;
        Ok(self.push(Array::scalar(total / n as f64), rg, Op::Mean { a: ai }))
    }

    /// Reverse pass from a scalar loss. Returns the gradient of every
    /// node; arrays never touched by the loss keep their zero gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.check(loss)?;
        if !self.nodes[li].value.is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape
            )));
        }
        let mut grads: Vec<Array> = self
            .nodes
            .iter()
            .map(|n| Array::zeros(n.value.shape.clone()))
            .collect();
        grads[li].data[0] = 1.0;

        for id in (0..=li).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            // Split off the gradient of the current node so we can
            // accumulate into earlier ones.
            let (head, tail) = grads.split_at_mut(id);
            let g = &tail[0];
            if g.data.iter().all(|v| *v == 0.0) {
                continue;
            }
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::Binary { kind, a, b, bc } => {
                    let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (ia, ib) = operand_indexers(*bc, &self.nodes[id].value.shape);
                    let need_a = self.nodes[*a].requires_grad;
                    let need_b = self.nodes[*b].requires_grad;
                    for (i, gv) in g.data.iter().enumerate() {
                        let (xa, xb) = (va.data[ia(i)], vb.data[ib(i)]);
                        match kind {
                            BinaryKind::Add => {
                                if need_a {
                                    head[*a].data[ia(i)] += gv;
                                }
                                if need_b {
                                    head[*b].data[ib(i)] += gv;
                                }
                            }
                            BinaryKind::Sub => {
                                if need_a {
                                    head[*a].data[ia(i)] += gv;
                                }
                                if need_b {
                                    head[*b].data[ib(i)] -= gv;
                                }
                            }
                            BinaryKind::Mul => {
                                if need_a {
                                    head[*a].data[ia(i)] += gv * xb;
                                }
                                if need_b {
                                    head[*b].data[ib(i)] += gv * xa;
                                }
                            }
                            BinaryKind::Div => {
                                if need_a {
                                    head[*a].data[ia(i)] += gv / xb;
                                }
                                if need_b {
                                    head[*b].data[ib(i)] -= gv * xa / (xb * xb);
                                }
                            }
                        }
                    }
                }
                Op::Unary { kind, a } => {
                    if self.nodes[*a].requires_grad {
                        let va = &self.nodes[*a].value;
                        let vo = &self.nodes[id].value;
                        for (i, gv) in g.data.iter().enumerate() {
                            let x = va.data[i];
                            let d = match kind {
                                UnaryKind::Silu => {
                                    let s = sigmoid(x);
                                    s * (1.0 + x * (1.0 - s))
                                }
                                UnaryKind::Exp => vo.data[i],
                                UnaryKind::Log => 1.0 / x,
                                UnaryKind::Neg => -1.0,
                                UnaryKind::Relu => {
                                    if x > 0.0 {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                                UnaryKind::NormCdf => normal_pdf(x),
                            };
                            head[*a].data[i] += gv * d;
                        }
                    }
                }
                Op::Scale { a, factor } => {
                    if self.nodes[*a].requires_grad {
                        for (i, gv) in g.data.iter().enumerate() {
                            head[*a].data[i] += gv * factor;
                        }
                    }
                }
                Op::Clip { a, lo, hi } => {
                    if self.nodes[*a].requires_grad {
                        let va = &self.nodes[*a].value;
                        for (i, gv) in g.data.iter().enumerate() {
                            let x = va.data[i];
                            if x >= *lo && x <= *hi {
                                head[*a].data[i] += gv;
                            }
                        }
                    }
                }
                Op::Conv2d { input, kernels: kern, padding, stride } => {
                    let in_shape = &self.nodes[*input].value.shape;
                    let k_shape = &self.nodes[*kern].value.shape;
                    let in_dims = (in_shape[0], in_shape[1], in_shape[2]);
                    let k_dims = (k_shape[0], k_shape[2], k_shape[3]);
                    if self.nodes[*input].requires_grad {
                        kernels::conv2d_backward_input(
                            &g.data,
                            in_dims,
                            &self.nodes[*kern].value.data,
                            k_dims,
                            *padding,
                            *stride,
                            &mut head[*input].data,
                        );
                    }
                    if self.nodes[*kern].requires_grad {
                        kernels::conv2d_backward_kernels(
                            &g.data,
                            &self.nodes[*input].value.data,
                            in_dims,
                            k_dims,
                            *padding,
                            *stride,
                            &mut head[*kern].data,
                        );
                    }
                }
                Op::Linear { weight, input, bias } => {
                    let d_in = self.nodes[*weight].value.shape[1];
                    let wd = &self.nodes[*weight].value.data;
                    let xd = &self.nodes[*input].value.data;
                    for (o, gv) in g.data.iter().enumerate() {
                        if self.nodes[*bias].requires_grad {
                            head[*bias].data[o] += gv;
                        }
                        if self.nodes[*weight].requires_grad {
                            let row = &mut head[*weight].data[o * d_in..(o + 1) * d_in];
                            for (slot, xv) in row.iter_mut().zip(xd) {
                                *slot += gv * xv;
                            }
                        }
                        if self.nodes[*input].requires_grad {
                            let row = &wd[o * d_in..(o + 1) * d_in];
                            for (slot, wv) in head[*input].data.iter_mut().zip(row) {
                                *slot += gv * wv;
                            }
                        }
                    }
                }
                Op::Concat { a, b, a_rows } => {
                    let row_size: usize = self.nodes[id].value.shape[1..].iter().product();
                    let split = a_rows * row_size;
                    if self.nodes[*a].requires_grad {
                        for (slot, gv) in head[*a].data.iter_mut().zip(&g.data[..split]) {
                            *slot += gv;
                        }
                    }
                    if self.nodes[*b].requires_grad {
                        for (slot, gv) in head[*b].data.iter_mut().zip(&g.data[split..]) {
                            *slot += gv;
                        }
                    }
                }
                Op::UpsampleNearest { a, src_h, src_w } => {
                    if self.nodes[*a].requires_grad {
                        let shape = &self.nodes[id].value.shape;
                        let (c, oh, ow) = (shape[0], shape[1], shape[2]);
                        for ch in 0..c {
                            for y in 0..oh {
                                let sy = kernels::upsample_src_index(y, *src_h, oh);
                                for x in 0..ow {
                                    let sx = kernels::upsample_src_index(x, *src_w, ow);
                                    head[*a].data[(ch * src_h + sy) * src_w + sx] +=
                                        g.data[(ch * oh + y) * ow + x];
                                }
                            }
                        }
                    }
                }
                Op::Reshape { a } => {
                    if self.nodes[*a].requires_grad {
                        for (slot, gv) in head[*a].data.iter_mut().zip(&g.data) {
                            *slot += gv;
                        }
                    }
                }
                Op::Sum { a } => {
                    if self.nodes[*a].requires_grad {
                        let gv = g.data[0];
                        for slot in head[*a].data.iter_mut() {
                            *slot += gv;
                        }
                    }
                }
                Op::Mean { a } => {
                    if self.nodes[*a].requires_grad {
                        let gv = g.data[0] / self.nodes[*a].value.len() as f64;
                        for slot in head[*a].data.iter_mut() {
                            *slot += gv;
                        }
                    }
                }
            }
        }
        Ok(Gradients { tape_id: self.id, grads })
    }
}

/// Index functions mapping an output position to each operand's position.
fn operand_indexers(
    bc: Broadcast,
    out_shape: &[usize],
) -> (impl Fn(usize) -> usize, impl Fn(usize) -> usize) {
    let plane: usize = if out_shape.len() == 3 {
        out_shape[1] * out_shape[2]
    } else {
        1
    };
    let ia = move |i: usize| match bc {
        Broadcast::LeftScalar => 0,
        Broadcast::LeftChannel => i / plane,
        _ => i,
    };
    let ib = move |i: usize| match bc {
        Broadcast::RightScalar => 0,
        Broadcast::RightChannel => i / plane,
        _ => i,
    };
    (ia, ib)
}

/// Gradients from one backward pass, keyed by var.
pub struct Gradients {
    tape_id: u64,
    grads: Vec<Array>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Result<&Array> {
        if v.tape_id != self.tape_id {
            return Err(Error::Graph("gradient lookup with var from another tape".into()));
        }
        self.grads
            .get(v.index)
            .ok_or_else(|| Error::Graph(format!("var index {} out of range", v.index)))
    }
}

#[cfg(test)]
mod tests;
