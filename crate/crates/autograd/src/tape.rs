//! Reverse-mode tape.
//!
//! Every operation appends a node holding its forward value. `Tape::backward`
//! walks the nodes in reverse and accumulates adjoints for nodes that require
//! gradients. Nodes built only from constants never allocate an adjoint.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{concatenate, Array2, ArrayD, ArrayView2, Axis, Ix2, IxDyn, Zip};

pub type Tensor = ArrayD<f64>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum Unary {
    Neg,
    Sin,
    Cos,
    Exp,
    Log,
    Sqrt,
    Square,
    Abs,
    Relu,
    Sigmoid,
    Softplus(f64),
    Scale(f64),
    AddScalar(f64),
    ClampMin(f64),
}

enum Op {
    Leaf,
    Unary(usize, Unary),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    MatMul(usize, usize),
    Transpose(usize),
    SumAll(usize),
    SumAxis(usize),
    Concat(Vec<usize>, usize),
    Narrow {
        a: usize,
        axis: usize,
        start: usize,
    },
    Reshape(usize),
    Cumsum {
        a: usize,
        axis: usize,
        exclusive: bool,
    },
    IndexSelect(usize, Arc<Vec<usize>>),
    Conv3x3 {
        x: usize,
        w: usize,
        b: usize,
        cols: Array2<f64>,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Append-only computation record.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Adjoint of `var`, or zeros of its shape when nothing flowed into it.
    pub fn get_or_zeros(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        self.push_arc(Arc::new(value), op, requires_grad)
    }

    fn push_arc(&self, value: Arc<Tensor>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Leaf that receives a gradient.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    /// Constant sharing an existing allocation.
    pub fn constant_shared(&self, value: Arc<Tensor>) -> Var<'_> {
        self.push_arc(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    fn value_of(&self, id: usize) -> Arc<Tensor> {
        self.nodes.borrow()[id].value.clone()
    }

    fn grad_of(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Backpropagates from `output`, seeding its adjoint with ones.
    pub fn backward(&self, output: Var<'_>) -> Grads {
        let seed = Tensor::ones(output.shape());
        self.backward_with(output, seed)
    }

    /// Backpropagates from `output` with an explicit seed adjoint.
    pub fn backward_with(&self, output: Var<'_>, seed: Tensor) -> Grads {
        assert!(
            std::ptr::eq(output.tape, self),
            "variable from another tape"
        );
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        if !nodes[output.id].requires_grad {
            return Grads { grads };
        }
        assert_eq!(seed.shape(), nodes[output.id].value.shape(), "seed shape");
        grads[output.id] = Some(seed);

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            let mut emit = |target: usize, delta: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(acc) => *acc += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };
            let val = |i: usize| -> &Tensor { &nodes[i].value };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Unary(a, kind) => {
                    let x = val(*a);
                    let y = &node.value;
                    let d = unary_backward(*kind, x, y, &g);
                    emit(*a, d);
                }
                Op::Add(a, b) => {
                    if nodes[*a].requires_grad {
                        emit(*a, reduce_to(&g, val(*a).shape()));
                    }
                    if nodes[*b].requires_grad {
                        emit(*b, reduce_to(&g, val(*b).shape()));
                    }
                }
                Op::Sub(a, b) => {
                    if nodes[*a].requires_grad {
                        emit(*a, reduce_to(&g, val(*a).shape()));
                    }
                    if nodes[*b].requires_grad {
                        emit(*b, reduce_to(&(-&g), val(*b).shape()));
                    }
                }
                Op::Mul(a, b) => {
                    if nodes[*a].requires_grad {
                        emit(*a, reduce_to(&(&g * val(*b)), val(*a).shape()));
                    }
                    if nodes[*b].requires_grad {
                        emit(*b, reduce_to(&(&g * val(*a)), val(*b).shape()));
                    }
                }
                Op::Div(a, b) => {
                    let bv = val(*b);
                    if nodes[*a].requires_grad {
                        emit(*a, reduce_to(&(&g / bv), val(*a).shape()));
                    }
                    if nodes[*b].requires_grad {
                        // d(a/b)/db = -(a/b)/b
                        let d = -(&g * &*node.value) / bv;
                        emit(*b, reduce_to(&d, bv.shape()));
                    }
                }
                Op::Linear { x, w, b } => {
                    let g2 = view2(&g);
                    if nodes[*x].requires_grad {
                        let dx = g2.dot(&view2(val(*w)).t());
                        emit(*x, dx.into_dyn());
                    }
                    if nodes[*w].requires_grad {
                        let dw = view2(val(*x)).t().dot(&g2);
                        emit(*w, dw.into_dyn());
                    }
                    if let Some(b) = b {
                        if nodes[*b].requires_grad {
                            emit(*b, g2.sum_axis(Axis(0)).into_dyn());
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let g2 = view2(&g);
                    if nodes[*a].requires_grad {
                        emit(*a, g2.dot(&view2(val(*b)).t()).into_dyn());
                    }
                    if nodes[*b].requires_grad {
                        emit(*b, view2(val(*a)).t().dot(&g2).into_dyn());
                    }
                }
                Op::Transpose(a) => {
                    emit(*a, view2(&g).t().to_owned().into_dyn());
                }
                Op::SumAll(a) => {
                    let s = *g.first().expect("scalar adjoint");
                    emit(*a, Tensor::from_elem(val(*a).raw_dim(), s));
                }
                Op::SumAxis(a) => {
                    let shape = val(*a).raw_dim();
                    emit(*a, g.broadcast(shape).expect("sum broadcast").to_owned());
                }
                Op::Concat(parts, axis) => {
                    let mut offset = 0;
                    for &p in parts {
                        let len = val(p).shape()[*axis];
                        if nodes[p].requires_grad {
                            let piece = g
                                .slice_axis(Axis(*axis), (offset..offset + len).into())
                                .to_owned();
                            emit(p, piece);
                        }
                        offset += len;
                    }
                }
                Op::Narrow { a, axis, start } => {
                    let mut full = Tensor::zeros(val(*a).raw_dim());
                    let len = g.shape()[*axis];
                    full.slice_axis_mut(Axis(*axis), (*start..*start + len).into())
                        .assign(&g);
                    emit(*a, full);
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    let g = g
                        .as_standard_layout()
                        .into_owned()
                        .into_shape_with_order(IxDyn(&shape))
                        .expect("reshape adjoint");
                    emit(*a, g);
                }
                Op::Cumsum { a, axis, exclusive } => {
                    emit(*a, reverse_cumsum(&g, *axis, *exclusive));
                }
                Op::IndexSelect(a, idx) => {
                    let mut full = Tensor::zeros(val(*a).raw_dim());
                    for (row, &src) in idx.iter().enumerate() {
                        let mut dst = full.index_axis_mut(Axis(0), src);
                        dst += &g.index_axis(Axis(0), row);
                    }
                    emit(*a, full);
                }
                Op::Conv3x3 { x, w, b, cols } => {
                    let xs = val(*x).shape().to_vec();
                    let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
                    let c_out = g.shape()[0];
                    let g2 = g
                        .view()
                        .into_shape_with_order((c_out, h * wd))
                        .expect("conv adjoint layout");
                    if nodes[*w].requires_grad {
                        let dw = g2.dot(&cols.t());
                        let dw = dw
                            .into_shape_with_order(IxDyn(&[c_out, c_in, 3, 3]))
                            .expect("conv weight layout");
                        emit(*w, dw);
                    }
                    if nodes[*b].requires_grad {
                        emit(*b, g2.sum_axis(Axis(1)).into_dyn());
                    }
                    if nodes[*x].requires_grad {
                        let wv = val(*w)
                            .view()
                            .into_shape_with_order((c_out, c_in * 9))
                            .expect("conv weight layout");
                        let dcols = wv.t().dot(&g2);
                        emit(*x, col2im(&dcols, c_in, h, wd));
                    }
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut full = Tensor::zeros(val(*x).raw_dim());
                    let flat = full.as_slice_mut().expect("contiguous");
                    for (&src, &gv) in argmax.iter().zip(g.iter()) {
                        flat[src] += gv;
                    }
                    emit(*x, full);
                }
            }
        }
        Grads { grads }
    }
}

fn view2(t: &Tensor) -> ArrayView2<'_, f64> {
    t.view()
        .into_dimensionality::<Ix2>()
        .expect("expected a 2-D tensor")
}

/// Sums `g` down to `shape`, undoing numpy-style broadcasting.
pub(crate) fn reduce_to(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = g.clone();
    while out.ndim() > shape.len() {
        out = out.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && out.shape()[axis] != 1 {
            out = out.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64, beta: f64) -> f64 {
    let z = beta * x;
    // log(1 + e^z) without overflow
    (z.max(0.0) + (-z.abs()).exp().ln_1p()) / beta
}

fn unary_forward(kind: Unary, x: &Tensor) -> Tensor {
    match kind {
        Unary::Neg => x.mapv(|v| -v),
        Unary::Sin => x.mapv(f64::sin),
        Unary::Cos => x.mapv(f64::cos),
        Unary::Exp => x.mapv(f64::exp),
        Unary::Log => x.mapv(f64::ln),
        Unary::Sqrt => x.mapv(f64::sqrt),
        Unary::Square => x.mapv(|v| v * v),
        Unary::Abs => x.mapv(f64::abs),
        Unary::Relu => x.mapv(|v| v.max(0.0)),
        Unary::Sigmoid => x.mapv(sigmoid),
        Unary::Softplus(beta) => x.mapv(|v| softplus(v, beta)),
        Unary::Scale(c) => x.mapv(|v| v * c),
        Unary::AddScalar(c) => x.mapv(|v| v + c),
        Unary::ClampMin(c) => x.mapv(|v| v.max(c)),
    }
}

fn unary_backward(kind: Unary, x: &Tensor, y: &Tensor, g: &Tensor) -> Tensor {
    let mut out = g.clone();
    match kind {
        Unary::Neg => out.mapv_inplace(|v| -v),
        Unary::Sin => Zip::from(&mut out).and(x).for_each(|o, &x| *o *= x.cos()),
        Unary::Cos => Zip::from(&mut out).and(x).for_each(|o, &x| *o *= -x.sin()),
        Unary::Exp => out *= y,
        Unary::Log => out /= x,
        Unary::Sqrt => Zip::from(&mut out).and(y).for_each(|o, &y| *o *= 0.5 / y),
        Unary::Square => Zip::from(&mut out).and(x).for_each(|o, &x| *o *= 2.0 * x),
        Unary::Abs => Zip::from(&mut out).and(x).for_each(|o, &x| {
            *o *= if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Unary::Relu => Zip::from(&mut out).and(x).for_each(|o, &x| {
            if x <= 0.0 {
                *o = 0.0
            }
        }),
        Unary::Sigmoid => Zip::from(&mut out)
            .and(y)
            .for_each(|o, &y| *o *= y * (1.0 - y)),
        Unary::Softplus(beta) => Zip::from(&mut out)
            .and(x)
            .for_each(|o, &x| *o *= sigmoid(beta * x)),
        Unary::Scale(c) => out.mapv_inplace(|v| v * c),
        Unary::AddScalar(_) => {}
        Unary::ClampMin(c) => Zip::from(&mut out).and(x).for_each(|o, &x| {
            if x < c {
                *o = 0.0
            }
        }),
    }
    out
}

fn cumsum(x: &Tensor, axis: usize, exclusive: bool) -> Tensor {
    let mut out = Tensor::zeros(x.raw_dim());
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(x.lanes(Axis(axis)))
        .for_each(|mut o, i| {
            let mut acc = 0.0;
            for (ov, &iv) in o.iter_mut().zip(i.iter()) {
                if exclusive {
                    *ov = acc;
                    acc += iv;
                } else {
                    acc += iv;
                    *ov = acc;
                }
            }
        });
    out
}

fn reverse_cumsum(g: &Tensor, axis: usize, exclusive: bool) -> Tensor {
    let mut out = Tensor::zeros(g.raw_dim());
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(g.lanes(Axis(axis)))
        .for_each(|mut o, i| {
            let mut acc = 0.0;
            for (ov, &iv) in o.iter_mut().rev().zip(i.iter().rev()) {
                if exclusive {
                    *ov = acc;
                    acc += iv;
                } else {
                    acc += iv;
                    *ov = acc;
                }
            }
        });
    out
}

/// Unfolds a zero-padded C×H×W image into (C·9)×(H·W) patch columns.
fn im2col(x: &Tensor) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("contiguous");
    let mut cols = Array2::<f64>::zeros((c * 9, h * w));
    let dst = cols.as_slice_mut().expect("contiguous");
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + sy as usize * w;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        dst[row + y * w + xx] = src[base + sx as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize) -> Tensor {
    let mut out = vec![0.0; c * h * w];
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("contiguous");
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * h * w;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let base = ch * h * w + sy as usize * w;
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[base + sx as usize] += src[row + y * w + xx];
                    }
                }
            }
        }
    }
    Tensor::from_shape_vec(IxDyn(&[c, h, w]), out).expect("col2im shape")
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.grad_of(self.id)
    }

    /// First element of the value; intended for scalars.
    pub fn item(&self) -> f64 {
        *self.value().first().expect("empty tensor")
    }

    /// Same value, cut off from the gradient path.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant((*self.value()).clone())
    }

    fn same_tape(&self, other: &Var<'t>) {
        debug_assert!(std::ptr::eq(self.tape, other.tape), "mixed tapes");
    }

    fn unary(&self, kind: Unary) -> Var<'t> {
        let value = unary_forward(kind, &self.value());
        self.tape
            .push(value, Op::Unary(self.id, kind), self.requires_grad())
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(Unary::Neg)
    }
    pub fn sin(&self) -> Var<'t> {
        self.unary(Unary::Sin)
    }
    pub fn cos(&self) -> Var<'t> {
        self.unary(Unary::Cos)
    }
    pub fn exp(&self) -> Var<'t> {
        self.unary(Unary::Exp)
    }
    pub fn ln(&self) -> Var<'t> {
        self.unary(Unary::Log)
    }
    pub fn sqrt(&self) -> Var<'t> {
        self.unary(Unary::Sqrt)
    }
    pub fn square(&self) -> Var<'t> {
        self.unary(Unary::Square)
    }
    pub fn abs(&self) -> Var<'t> {
        self.unary(Unary::Abs)
    }
    pub fn relu(&self) -> Var<'t> {
        self.unary(Unary::Relu)
    }
    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }
    /// `log(1 + exp(beta x)) / beta`.
    pub fn softplus(&self, beta: f64) -> Var<'t> {
        self.unary(Unary::Softplus(beta))
    }
    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Unary::Scale(c))
    }
    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Unary::AddScalar(c))
    }
    /// `max(x, c)`; no gradient where the floor is active.
    pub fn clamp_min(&self, c: f64) -> Var<'t> {
        self.unary(Unary::ClampMin(c))
    }

    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let value = &*self.value() + &*other.value();
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, Op::Add(self.id, other.id), rg)
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let value = &*self.value() - &*other.value();
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, Op::Sub(self.id, other.id), rg)
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let value = &*self.value() * &*other.value();
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, Op::Mul(self.id, other.id), rg)
    }

    pub fn div(&self, other: &Var<'t>) -> Var<'t> {
        self.same_tape(other);
        let value = &*self.value() / &*other.value();
        let rg = self.requires_grad() || other.requires_grad();
        self.tape.push(value, Op::Div(self.id, other.id), rg)
    }

    /// `self · weight + bias` for a batch `N×I`, weight `I×O` and bias `O`.
    pub fn linear(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let mut y = view2(&x).dot(&view2(&w));
        if let Some(b) = bias {
            let bv = b.value();
            let bv = bv
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("bias must be 1-D");
            y += &bv;
        }
        let rg = self.requires_grad()
            || weight.requires_grad()
            || bias.is_some_and(|b| b.requires_grad());
        self.tape.push(
            y.into_dyn(),
            Op::Linear {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
            },
            rg,
        )
    }

    pub fn matmul(&self, other: &Var<'t>) -> Var<'t> {
        let y = view2(&self.value()).dot(&view2(&other.value()));
        let rg = self.requires_grad() || other.requires_grad();
        self.tape
            .push(y.into_dyn(), Op::MatMul(self.id, other.id), rg)
    }

    pub fn t(&self) -> Var<'t> {
        let y = view2(&self.value()).t().to_owned().into_dyn();
        self.tape
            .push(y, Op::Transpose(self.id), self.requires_grad())
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(
            ArrayD::from_elem(IxDyn(&[]), s),
            Op::SumAll(self.id),
            self.requires_grad(),
        )
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it as a length-1 axis.
    pub fn sum_axis(&self, axis: usize) -> Var<'t> {
        let y = self.value().sum_axis(Axis(axis)).insert_axis(Axis(axis));
        self.tape
            .push(y, Op::SumAxis(self.id), self.requires_grad())
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Var<'t> {
        assert!(!parts.is_empty(), "concat of nothing");
        let tape = parts[0].tape;
        let values: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let y = concatenate(Axis(axis), &views).expect("concat shapes");
        let rg = parts.iter().any(|p| p.requires_grad());
        tape.push(
            y,
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            rg,
        )
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var<'t> {
        let y = self
            .value()
            .slice_axis(Axis(axis), (start..start + len).into())
            .to_owned();
        self.tape.push(
            y,
            Op::Narrow {
                a: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let y = self
            .value()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.tape
            .push(y, Op::Reshape(self.id), self.requires_grad())
    }

    pub fn cumsum(&self, axis: usize, exclusive: bool) -> Var<'t> {
        let y = cumsum(&self.value(), axis, exclusive);
        self.tape.push(
            y,
            Op::Cumsum {
                a: self.id,
                axis,
                exclusive,
            },
            self.requires_grad(),
        )
    }

    /// Rows of `self` (axis 0) at `indices`, repeats allowed.
    pub fn index_select(&self, indices: Arc<Vec<usize>>) -> Var<'t> {
        let y = self.value().select(Axis(0), &indices);
        self.tape
            .push(y, Op::IndexSelect(self.id, indices), self.requires_grad())
    }

    /// 3×3 convolution, stride 1, zero padding 1, on a single `C×H×W` image.
    pub fn conv3x3(&self, weight: &Var<'t>, bias: &Var<'t>) -> Var<'t> {
        let x = self.value();
        let w = weight.value();
        let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let c_out = w.shape()[0];
        assert_eq!(w.shape(), &[c_out, c_in, 3, 3], "conv weight shape");
        let cols = im2col(&x);
        let w2 = w
            .view()
            .into_shape_with_order((c_out, c_in * 9))
            .expect("conv weight layout");
        let mut y = w2.dot(&cols);
        let b = bias.value();
        for (mut row, &bv) in y.axis_iter_mut(Axis(0)).zip(b.iter()) {
            row += bv;
        }
        let y = y
            .into_shape_with_order(IxDyn(&[c_out, h, wd]))
            .expect("conv output layout");
        let rg = self.requires_grad() || weight.requires_grad() || bias.requires_grad();
        let cols = if rg { cols } else { Array2::zeros((0, 0)) };
        self.tape.push(
            y,
            Op::Conv3x3 {
                x: self.id,
                w: weight.id,
                b: bias.id,
                cols,
            },
            rg,
        )
    }

    /// 2×2 max pooling, stride 2, ceil mode (edge windows may be partial).
    pub fn max_pool2(&self) -> Var<'t> {
        let x = self.value().as_standard_layout().into_owned();
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let src = x.as_slice().expect("contiguous");
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for xx in 2 * ox..(2 * ox + 2).min(w) {
                            let i = ch * h * w + y * w + xx;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let y = Tensor::from_shape_vec(IxDyn(&[c, oh, ow]), out).expect("pool shape");
        self.tape
            .push(y, Op::MaxPool2 { x: self.id, argmax }, self.requires_grad())
    }
}

macro_rules! binop {
    ($trait:ident, $method:ident, $call:ident) => {
        impl<'t> std::ops::$trait<Var<'t>> for Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: Var<'t>) -> Var<'t> {
                Var::$call(&self, &rhs)
            }
        }
        impl<'t> std::ops::$trait<&Var<'t>> for &Var<'t> {
            type Output = Var<'t>;
            fn $method(self, rhs: &Var<'t>) -> Var<'t> {
                Var::$call(self, rhs)
            }
        }
    };
}

binop!(Add, add, add);
binop!(Sub, sub, sub);
binop!(Mul, mul, mul);
binop!(Div, div, div);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        Var::neg(&self)
    }
}

/// Scalar forms of the smooth activations, for value-only code paths.
pub mod scalar {
    pub fn softplus(x: f64, beta: f64) -> f64 {
        super::softplus(x, beta)
    }

    pub fn sigmoid(x: f64) -> f64 {
        super::sigmoid(x)
    }
}
