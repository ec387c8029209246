use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use super::kernels::{bilinear_weights, broadcast_map, gemm, Layout};
use super::{DiffError, Tensor};

/// A differentiable operation defined outside the built-in primitive set.
///
/// `backward` receives the forward inputs, the forward output and the
/// gradient flowing into the output, and returns one gradient per input
/// (`None` for inputs that are not differentiated).
pub trait CustomOp {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &[f64]) -> Vec<Option<Vec<f64>>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(Rc<Vec<usize>>),
    Sub(Rc<Vec<usize>>),
    Mul(Rc<Vec<usize>>),
    Div(Rc<Vec<usize>>),
    Scale(f64),
    Offset,
    MatMul,
    Transpose,
    Exp,
    Sqrt,
    Abs,
    Sigmoid,
    Square,
    Sum,
    SumAxis(usize),
    Softmax(usize),
    BilinearSample,
    Clamp(f64, f64),
    L1Norm,
    SquaredNorm,
    Huber(f64),
    Reshape,
    Gather(Rc<Vec<usize>>),
    Custom(Rc<dyn CustomOp>),
}

impl fmt::Debug for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Custom(op) => write!(f, "Custom({})", op.name()),
            Op::Add(_) => f.write_str("Add"),
            Op::Sub(_) => f.write_str("Sub"),
            Op::Mul(_) => f.write_str("Mul"),
            Op::Div(_) => f.write_str("Div"),
            Op::Gather(_) => f.write_str("Gather"),
            Op::Scale(s) => write!(f, "Scale({s})"),
            Op::Clamp(lo, hi) => write!(f, "Clamp({lo}, {hi})"),
            Op::Huber(d) => write!(f, "Huber({d})"),
            Op::SumAxis(a) => write!(f, "SumAxis({a})"),
            Op::Softmax(a) => write!(f, "Softmax({a})"),
            Op::Leaf => f.write_str("Leaf"),
            Op::Offset => f.write_str("Offset"),
            Op::MatMul => f.write_str("MatMul"),
            Op::Transpose => f.write_str("Transpose"),
            Op::Exp => f.write_str("Exp"),
            Op::Sqrt => f.write_str("Sqrt"),
            Op::Abs => f.write_str("Abs"),
            Op::Sigmoid => f.write_str("Sigmoid"),
            Op::Square => f.write_str("Square"),
            Op::Sum => f.write_str("Sum"),
            Op::BilinearSample => f.write_str("BilinearSample"),
            Op::L1Norm => f.write_str("L1Norm"),
            Op::SquaredNorm => f.write_str("SquaredNorm"),
            Op::Reshape => f.write_str("Reshape"),
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    inputs: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of primitive operations.
///
/// A tape is built fresh for every forward pass; values are kept alive until
/// the tape is dropped.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nodes = self.tape.nodes.borrow();
        let node = &nodes[self.id];
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("op", &node.op)
            .field("shape", &node.value.shape())
            .finish()
    }
}

/// Gradients produced by [`Tape::backward`], indexed by tape position.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` is not on the loss path.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        let shape = &self.shapes[var.id];
        match &self.grads[var.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
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
        self.nodes.borrow().is_empty()
    }

    /// Records an input tensor. It is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        let requires_grad = tensor.requires_grad();
        self.push_node(Rc::new(tensor), Vec::new(), Op::Leaf, requires_grad)
    }

    /// Records a tensor that never receives a gradient.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.push_node(Rc::new(tensor), Vec::new(), Op::Leaf, false)
    }

    fn push_node(&self, value: Rc<Tensor>, inputs: Vec<usize>, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            inputs,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(&self, op_name: &'static str, value: Tensor, inputs: &[Var<'_>], op: Op) -> Result<Var<'_>, DiffError> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite(op_name));
        }
        let requires_grad = {
            let nodes = self.nodes.borrow();
            inputs.iter().any(|v| nodes[v.id].requires_grad)
        };
        Ok(self.push_node(Rc::new(value), inputs.iter().map(|v| v.id).collect(), op, requires_grad))
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, DiffError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(DiffError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| nodes[i].value.as_ref()).collect();
            let wants: Vec<bool> = node.inputs.iter().map(|&i| nodes[i].requires_grad).collect();
            let input_grads = local_backward(&node.op, &inputs, &node.value, &grad, &wants);
            for ((&input, g), want) in node.inputs.iter().zip(input_grads).zip(wants) {
                let Some(g) = g else { continue };
                if !want {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // Leaves keep their gradient; interior nodes are released once consumed.
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(grad);
            }
        }

        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let grads = grads
            .into_iter()
            .zip(nodes.iter())
            .map(|(g, n)| if matches!(n.op, Op::Leaf) && n.requires_grad { g } else { None })
            .collect();
        Ok(Gradients { grads, shapes })
    }
}

fn unary<'t>(x: Var<'t>, name: &'static str, op: Op, f: impl Fn(f64) -> f64) -> Result<Var<'t>, DiffError> {
    let v = x.value();
    let data = v.data().iter().map(|&a| f(a)).collect();
    let out = Tensor::new(v.shape(), data)?;
    x.tape.push(name, out, &[x], op)
}

// Fallible ops return Result, so the std operator traits do not fit.
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Copy of the current value recorded as a constant.
    pub fn detach(&self) -> Var<'t> {
        let v = self.value();
        self.tape.push_node(v, Vec::new(), Op::Leaf, false)
    }

    fn binary(self, rhs: Var<'t>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: fn(Rc<Vec<usize>>) -> Op) -> Result<Var<'t>, DiffError> {
        let a = self.value();
        let b = rhs.value();
        let map = broadcast_map(name, a.shape(), b.shape())?;
        let data = a.data().iter().zip(map.iter()).map(|(&x, &j)| f(x, b.data()[j])).collect();
        let out = Tensor::new(a.shape(), data)?;
        self.tape.push(name, out, &[self, rhs], op(Rc::new(map)))
    }

    /// Elementwise sum; `rhs` may broadcast over size-1 dimensions or be a scalar.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul)
    }

    pub fn div(self, rhs: Var<'t>) -> Result<Var<'t>, DiffError> {
        self.binary(rhs, "div", |a, b| a / b, Op::Div)
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>, DiffError> {
        unary(self, "scale", Op::Scale(s), |a| a * s)
    }

    pub fn offset(self, c: f64) -> Result<Var<'t>, DiffError> {
        unary(self, "offset", Op::Offset, |a| a + c)
    }

    pub fn neg(self) -> Result<Var<'t>, DiffError> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Result<Var<'t>, DiffError> {
        unary(self, "exp", Op::Exp, f64::exp)
    }

    pub fn sqrt(self) -> Result<Var<'t>, DiffError> {
        unary(self, "sqrt", Op::Sqrt, f64::sqrt)
    }

    pub fn abs(self) -> Result<Var<'t>, DiffError> {
        unary(self, "abs", Op::Abs, f64::abs)
    }

    pub fn sigmoid(self) -> Result<Var<'t>, DiffError> {
        unary(self, "sigmoid", Op::Sigmoid, sigmoid)
    }

    pub fn square(self) -> Result<Var<'t>, DiffError> {
        unary(self, "square", Op::Square, |a| a * a)
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Result<Var<'t>, DiffError> {
        unary(self, "clamp", Op::Clamp(lo, hi), |a| a.clamp(lo, hi))
    }

    /// Elementwise Huber penalty with knee `delta`, applied to `|x|`.
    pub fn huber(self, delta: f64) -> Result<Var<'t>, DiffError> {
        unary(self, "huber", Op::Huber(delta), |a| huber_value(a.abs(), delta))
    }

    /// Matrix product of rank-2 tensors.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, DiffError> {
        let a = self.value();
        let b = rhs.value();
        let (m, k) = a.dims2("matmul")?;
        let (k2, n) = b.dims2("matmul")?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, a.data(), Layout::Normal(k), b.data(), Layout::Normal(n), &mut out);
        self.tape.push("matmul", Tensor::new(&[m, n], out)?, &[self, rhs], Op::MatMul)
    }

    pub fn transpose(self) -> Result<Var<'t>, DiffError> {
        let a = self.value();
        let (r, c) = a.dims2("transpose")?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data()[i * c + j];
            }
        }
        self.tape.push("transpose", Tensor::new(&[c, r], out)?, &[self], Op::Transpose)
    }

    pub fn sum(self) -> Result<Var<'t>, DiffError> {
        let s = self.value().data().iter().sum();
        self.tape.push("sum", Tensor::scalar(s), &[self], Op::Sum)
    }

    pub fn mean(self) -> Result<Var<'t>, DiffError> {
        let n = self.value().numel() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sum along `axis`, keeping it as a size-1 dimension.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>, DiffError> {
        let a = self.value();
        let (outer, len, inner) = axis_split("sum_axis", a.shape(), axis)?;
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += a.data()[base + i];
                }
            }
        }
        let mut shape = a.shape().to_vec();
        shape[axis] = 1;
        self.tape.push("sum_axis", Tensor::new(&shape, out)?, &[self], Op::SumAxis(axis))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>, DiffError> {
        let a = self.value();
        let (outer, len, inner) = axis_split("softmax", a.shape(), axis)?;
        let mut out = vec![0.0; a.numel()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| a.data()[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (a.data()[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        self.tape.push("softmax", Tensor::new(a.shape(), out)?, &[self], Op::Softmax(axis))
    }

    /// Samples an `[H, W, C]` image at continuous `[N, 2]` (x, y) positions.
    ///
    /// Pixel centres sit on integer coordinates; positions outside the image
    /// are clamped to the border.
    pub fn bilinear_sample(self, xy: Var<'t>) -> Result<Var<'t>, DiffError> {
        let img = self.value();
        let pts = xy.value();
        let (h, w, c) = match img.shape() {
            [h, w, c] => (*h, *w, *c),
            [h, w] => (*h, *w, 1),
            s => {
                return Err(DiffError::Rank {
                    op: "bilinear_sample",
                    expected: 3,
                    got: s.to_vec(),
                })
            }
        };
        let (n, two) = pts.dims2("bilinear_sample")?;
        if two != 2 || h == 0 || w == 0 {
            return Err(DiffError::ShapeMismatch {
                op: "bilinear_sample",
                lhs: img.shape().to_vec(),
                rhs: pts.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; n * c];
        for k in 0..n {
            let bw = bilinear_weights(pts.data()[2 * k], pts.data()[2 * k + 1], w, h);
            for ch in 0..c {
                out[k * c + ch] = bw
                    .taps()
                    .iter()
                    .map(|&(px, py, wt)| wt * img.data()[(py * w + px) * c + ch])
                    .sum();
            }
        }
        self.tape.push("bilinear_sample", Tensor::new(&[n, c], out)?, &[self, xy], Op::BilinearSample)
    }

    /// Sum of absolute values.
    pub fn l1_norm(self) -> Result<Var<'t>, DiffError> {
        let s = self.value().data().iter().map(|a| a.abs()).sum();
        self.tape.push("l1_norm", Tensor::scalar(s), &[self], Op::L1Norm)
    }

    /// Sum of squares.
    pub fn squared_norm(self) -> Result<Var<'t>, DiffError> {
        let s = self.value().data().iter().map(|a| a * a).sum();
        self.tape.push("squared_norm", Tensor::scalar(s), &[self], Op::SquaredNorm)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, DiffError> {
        let v = (*self.value()).clone().reshaped(shape)?;
        self.tape.push("reshape", v, &[self], Op::Reshape)
    }

    /// Picks flat elements: `out[i] = x[indices[i]]`, shaped as `shape`.
    pub fn gather(self, indices: Rc<Vec<usize>>, shape: &[usize]) -> Result<Var<'t>, DiffError> {
        let a = self.value();
        if shape.iter().product::<usize>() != indices.len() {
            return Err(DiffError::ShapeMismatch {
                op: "gather",
                lhs: vec![indices.len()],
                rhs: shape.to_vec(),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= a.numel()) {
            return Err(DiffError::IndexOutOfRange(bad, a.numel()));
        }
        let data = indices.iter().map(|&i| a.data()[i]).collect();
        self.tape.push("gather", Tensor::new(shape, data)?, &[self], Op::Gather(indices))
    }
}

impl Tape {
    /// Records the result of a [`CustomOp`] whose forward value has already
    /// been computed by the caller.
    pub fn custom<'t>(&'t self, op: Rc<dyn CustomOp>, inputs: &[Var<'t>], output: Tensor) -> Result<Var<'t>, DiffError> {
        let name = op.name();
        self.push(name, output, inputs, Op::Custom(op))
    }
}

pub(crate) fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn huber_value(r: f64, delta: f64) -> f64 {
    if r <= delta {
        0.5 * r * r
    } else {
        delta * (r - 0.5 * delta)
    }
}

fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize), DiffError> {
    if axis >= shape.len() {
        return Err(DiffError::Axis { op, axis, shape: shape.to_vec() });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn sign(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else if a < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Local vector-Jacobian products for one recorded operation.
fn local_backward(op: &Op, inputs: &[&Tensor], out: &Tensor, g: &[f64], wants: &[bool]) -> Vec<Option<Vec<f64>>> {
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> { vec![Some((0..g.len()).map(f).collect())] };
    match op {
        Op::Leaf => Vec::new(),
        Op::Add(map) | Op::Sub(map) => {
            let mut gb = vec![0.0; inputs[1].numel()];
            let s = if matches!(op, Op::Sub(_)) { -1.0 } else { 1.0 };
            for (i, &j) in map.iter().enumerate() {
                gb[j] += s * g[i];
            }
            vec![Some(g.to_vec()), Some(gb)]
        }
        Op::Mul(map) => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let ga = map.iter().enumerate().map(|(i, &j)| g[i] * b[j]).collect();
            let mut gb = vec![0.0; b.len()];
            if wants[1] {
                for (i, &j) in map.iter().enumerate() {
                    gb[j] += g[i] * a[i];
                }
            }
            vec![Some(ga), Some(gb)]
        }
        Op::Div(map) => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let ga = map.iter().enumerate().map(|(i, &j)| g[i] / b[j]).collect();
            let mut gb = vec![0.0; b.len()];
            if wants[1] {
                for (i, &j) in map.iter().enumerate() {
                    gb[j] -= g[i] * a[i] / (b[j] * b[j]);
                }
            }
            vec![Some(ga), Some(gb)]
        }
        Op::Scale(s) => elementwise(&|i| g[i] * s),
        Op::Offset | Op::Reshape => vec![Some(g.to_vec())],
        Op::Exp => elementwise(&|i| g[i] * out.data()[i]),
        Op::Sqrt => elementwise(&|i| g[i] * 0.5 / out.data()[i]),
        Op::Abs => elementwise(&|i| g[i] * sign(inputs[0].data()[i])),
        Op::Sigmoid => elementwise(&|i| {
            let s = out.data()[i];
            g[i] * s * (1.0 - s)
        }),
        Op::Square => elementwise(&|i| 2.0 * g[i] * inputs[0].data()[i]),
        Op::Clamp(lo, hi) => elementwise(&|i| {
            let a = inputs[0].data()[i];
            if a >= *lo && a <= *hi {
                g[i]
            } else {
                0.0
            }
        }),
        Op::Huber(delta) => elementwise(&|i| {
            let a = inputs[0].data()[i];
            if a.abs() <= *delta {
                g[i] * a
            } else {
                g[i] * delta * sign(a)
            }
        }),
        Op::Sum => vec![Some(vec![g[0]; inputs[0].numel()])],
        Op::L1Norm => vec![Some(inputs[0].data().iter().map(|&a| g[0] * sign(a)).collect())],
        Op::SquaredNorm => vec![Some(inputs[0].data().iter().map(|&a| 2.0 * g[0] * a).collect())],
        Op::SumAxis(axis) => {
            let (outer, len, inner) = axis_split("sum_axis", inputs[0].shape(), *axis).expect("validated in forward");
            let mut ga = vec![0.0; inputs[0].numel()];
            for o in 0..outer {
                for j in 0..len {
                    for i in 0..inner {
                        ga[(o * len + j) * inner + i] = g[o * inner + i];
                    }
                }
            }
            vec![Some(ga)]
        }
        Op::Softmax(axis) => {
            let (outer, len, inner) = axis_split("softmax", out.shape(), *axis).expect("validated in forward");
            let y = out.data();
            let mut ga = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * len + j) * inner + i;
                    let dot: f64 = (0..len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                    for j in 0..len {
                        ga[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
            vec![Some(ga)]
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let ga = wants[0].then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, Layout::Normal(n), b.data(), Layout::Transposed(n), &mut ga);
                ga
            });
            let gb = wants[1].then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, a.data(), Layout::Transposed(k), g, Layout::Normal(n), &mut gb);
                gb
            });
            vec![ga, gb]
        }
        Op::Transpose => {
            let (r, c) = (inputs[0].shape()[0], inputs[0].shape()[1]);
            let mut ga = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] = g[j * r + i];
                }
            }
            vec![Some(ga)]
        }
        Op::BilinearSample => {
            let (img, pts) = (inputs[0], inputs[1]);
            let (h, w) = (img.shape()[0], img.shape()[1]);
            let c = if img.rank() == 3 { img.shape()[2] } else { 1 };
            let n = pts.shape()[0];
            let mut gi = vec![0.0; img.numel()];
            let mut gp = vec![0.0; pts.numel()];
            for k in 0..n {
                let bw = bilinear_weights(pts.data()[2 * k], pts.data()[2 * k + 1], w, h);
                for ch in 0..c {
                    let gk = g[k * c + ch];
                    if gk == 0.0 {
                        continue;
                    }
                    for &(px, py, wt) in bw.taps().iter() {
                        gi[(py * w + px) * c + ch] += wt * gk;
                    }
                    let at = |px: usize, py: usize| img.data()[(py * w + px) * c + ch];
                    let (dx, dy) = bw.position_derivative(at);
                    gp[2 * k] += gk * dx;
                    gp[2 * k + 1] += gk * dy;
                }
            }
            vec![Some(gi), Some(gp)]
        }
        Op::Gather(indices) => {
            let mut ga = vec![0.0; inputs[0].numel()];
            for (i, &j) in indices.iter().enumerate() {
                ga[j] += g[i];
            }
            vec![Some(ga)]
        }
        Op::Custom(op) => op.backward(inputs, out, g),
    }
}
