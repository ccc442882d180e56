//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every backward rule is written in terms of the same differentiable
//! operations as the forward pass, so gradients computed with
//! [`GradMode::Record`] are themselves graph nodes and can be
//! differentiated again (reverse-over-reverse). This is what lets the
//! training loss depend on `∇_x E_θ(x)` and still be differentiated in `θ`.
//!
//! Graphs are built from `Rc` nodes and are confined to one thread; run
//! independent evaluations on independent graphs.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{self, Tensor};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

fn next_id() -> usize {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

enum Op<T> {
    Leaf,
    Add(Var<T>, Var<T>),
    Sub(Var<T>, Var<T>),
    Mul(Var<T>, Var<T>),
    Div(Var<T>, Var<T>),
    Neg(Var<T>),
    Scale(Var<T>, T),
    MulConst(Var<T>, Tensor<T>),
    Sum(Var<T>),
    Broadcast(Var<T>),
    Relu(Var<T>),
    Exp(Var<T>),
    Sqrt(Var<T>),
    Conv(Var<T>, Var<T>),
    ConvInputGrad(Var<T>, Var<T>),
    ConvWeightGrad(Var<T>, Var<T>),
    AddBias(Var<T>, Var<T>),
    ChannelSum(Var<T>),
    BroadcastChannels(Var<T>),
}

struct Node<T> {
    id: usize,
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A node in the computation graph.
pub struct Var<T>(Rc<Node<T>>);

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("requires_grad", &self.0.requires_grad)
            .field("value", &self.0.value)
            .finish()
    }
}

/// Whether backward rules are recorded on the graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradMode {
    /// Plain gradients, detached from the graph.
    Detached,
    /// Gradients are graph nodes that can be differentiated again.
    Record,
}

/// Output of [`grad`].
#[derive(Debug)]
pub struct Grads<T: Real> {
    pub grads: Vec<Var<T>>,
    /// `unreachable[i]` is set when `wrt[i]` does not influence the root;
    /// the matching gradient is zero.
    pub unreachable: Vec<bool>,
}

impl<T: Real> Grads<T> {
    pub fn values(&self) -> Vec<Tensor<T>> {
        self.grads.iter().map(|g| g.value().clone()).collect()
    }
}

impl<T: Real> Var<T> {
    fn from_op(value: Tensor<T>, op: Op<T>, parents_require_grad: bool) -> Self {
        let op = if parents_require_grad { op } else { Op::Leaf };
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op,
            requires_grad: parents_require_grad,
        }))
    }

    /// Leaf that gradients can be taken with respect to.
    pub fn variable(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: Op::Leaf,
            requires_grad: true,
        }))
    }

    pub fn constant(value: Tensor<T>) -> Self {
        Var(Rc::new(Node {
            id: next_id(),
            value,
            op: Op::Leaf,
            requires_grad: false,
        }))
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Self {
        Var::constant(self.0.value.clone())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        let v = self.value().add(other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Self::from_op(v, Op::Add(self.clone(), other.clone()), rg))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        let v = self.value().sub(other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Self::from_op(v, Op::Sub(self.clone(), other.clone()), rg))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        let v = self.value().mul(other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Self::from_op(v, Op::Mul(self.clone(), other.clone()), rg))
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        let v = self.value().div(other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(Self::from_op(v, Op::Div(self.clone(), other.clone()), rg))
    }

    pub fn neg(&self) -> Self {
        Self::from_op(self.value().neg(), Op::Neg(self.clone()), self.requires_grad())
    }

    pub fn scale(&self, s: T) -> Self {
        Self::from_op(self.value().scale(s), Op::Scale(self.clone(), s), self.requires_grad())
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&self, c: &Tensor<T>) -> Result<Self> {
        let v = self.value().mul(c)?;
        Ok(Self::from_op(v, Op::MulConst(self.clone(), c.clone()), self.requires_grad()))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Self {
        let v = Tensor::scalar(self.value().sum());
        Self::from_op(v, Op::Sum(self.clone()), self.requires_grad())
    }

    /// Broadcast a single-element tensor to `shape`.
    pub fn broadcast(&self, shape: &[usize]) -> Result<Self> {
        if !self.value().is_scalar() {
            return Err(Error::shape(
                "broadcast",
                format!("source must hold one element, got {:?}", self.shape()),
            ));
        }
        let v = Tensor::full(shape, self.value().item());
        Ok(Self::from_op(v, Op::Broadcast(self.clone()), self.requires_grad()))
    }

    /// Multiply every element by a single-element node.
    pub fn mul_scalar(&self, s: &Self) -> Result<Self> {
        self.mul(&s.broadcast(self.shape())?)
    }

    pub fn relu(&self) -> Self {
        Self::from_op(self.value().relu(), Op::Relu(self.clone()), self.requires_grad())
    }

    pub fn exp(&self) -> Self {
        Self::from_op(self.value().map(T::exp), Op::Exp(self.clone()), self.requires_grad())
    }

    /// Exponential linear unit, `x` for `x > 0` and `exp(x) - 1` otherwise.
    /// Built from `relu` and `exp` so its derivative is differentiable too.
    pub fn elu(&self) -> Self {
        let neg_part = self.neg().relu().neg();
        let ones = Self::constant(Tensor::full(self.shape(), T::one()));
        let tail = neg_part.exp().sub(&ones).expect("same shape");
        self.relu().add(&tail).expect("same shape")
    }

    pub fn sqrt(&self) -> Self {
        Self::from_op(self.value().map(T::sqrt), Op::Sqrt(self.clone()), self.requires_grad())
    }

    pub fn square(&self) -> Self {
        self.mul(self).expect("same node")
    }

    pub fn dot(&self, other: &Self) -> Result<Self> {
        Ok(self.mul(other)?.sum())
    }

    pub fn norm_sq(&self) -> Self {
        self.square().sum()
    }

    pub fn norm(&self) -> Self {
        self.norm_sq().sqrt()
    }

    /// Zero-padded same-size convolution, see [`tensor::conv2d`].
    pub fn conv2d(&self, kernels: &Self, bias: Option<&Self>) -> Result<Self> {
        let v = tensor::conv2d_nobias(self.value(), kernels.value())?;
        let rg = self.requires_grad() || kernels.requires_grad();
        let out = Self::from_op(v, Op::Conv(self.clone(), kernels.clone()), rg);
        match bias {
            Some(b) => out.add_bias(b),
            None => Ok(out),
        }
    }

    fn conv_input_grad(g: &Self, kernels: &Self) -> Result<Self> {
        let v = tensor::conv2d_input_grad(g.value(), kernels.value())?;
        let rg = g.requires_grad() || kernels.requires_grad();
        Ok(Self::from_op(v, Op::ConvInputGrad(g.clone(), kernels.clone()), rg))
    }

    fn conv_weight_grad(x: &Self, g: &Self, k: usize) -> Result<Self> {
        let v = tensor::conv2d_weight_grad(x.value(), g.value(), k)?;
        let rg = x.requires_grad() || g.requires_grad();
        Ok(Self::from_op(v, Op::ConvWeightGrad(x.clone(), g.clone()), rg))
    }

    pub fn add_bias(&self, bias: &Self) -> Result<Self> {
        let v = self.value().add_channel_bias(bias.value())?;
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(Self::from_op(v, Op::AddBias(self.clone(), bias.clone()), rg))
    }

    fn channel_sum(&self) -> Result<Self> {
        let v = self.value().channel_sum()?;
        Ok(Self::from_op(v, Op::ChannelSum(self.clone()), self.requires_grad()))
    }

    fn broadcast_channels(&self, h: usize, w: usize) -> Result<Self> {
        let v = self.value().broadcast_channels(h, w)?;
        Ok(Self::from_op(v, Op::BroadcastChannels(self.clone()), self.requires_grad()))
    }

    /// Vector-Jacobian products for this node's parents given the
    /// upstream gradient `g`. Parents that do not require grad get `None`.
    fn backward(&self, g: &Self) -> Result<Vec<(Var<T>, Var<T>)>> {
        let mut out = Vec::with_capacity(2);
        let mut push = |p: &Var<T>, f: &mut dyn FnMut() -> Result<Var<T>>| -> Result<()> {
            if p.requires_grad() {
                out.push((p.clone(), f()?));
            }
            Ok(())
        };
        match &self.0.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                push(a, &mut || Ok(g.clone()))?;
                push(b, &mut || Ok(g.clone()))?;
            }
            Op::Sub(a, b) => {
                push(a, &mut || Ok(g.clone()))?;
                push(b, &mut || Ok(g.neg()))?;
            }
            Op::Mul(a, b) => {
                push(a, &mut || g.mul(b))?;
                push(b, &mut || g.mul(a))?;
            }
            Op::Div(a, b) => {
                push(a, &mut || g.div(b))?;
                push(b, &mut || Ok(g.mul(self)?.div(b)?.neg()))?;
            }
            Op::Neg(a) => push(a, &mut || Ok(g.neg()))?,
            Op::Scale(a, s) => push(a, &mut || Ok(g.scale(*s)))?,
            Op::MulConst(a, c) => push(a, &mut || g.mul_const(c))?,
            Op::Sum(a) => push(a, &mut || g.broadcast(a.shape()))?,
            Op::Broadcast(a) => push(a, &mut || g.sum().broadcast(a.shape()))?,
            Op::Relu(a) => {
                let mask = a.value().positive_mask();
                push(a, &mut || g.mul_const(&mask))?
            }
            Op::Exp(a) => push(a, &mut || g.mul(self))?,
            Op::Sqrt(a) => push(a, &mut || g.scale(T::of_f64(0.5)).div(self))?,
            Op::Conv(x, k) => {
                let ks = k.shape()[2];
                push(x, &mut || Self::conv_input_grad(g, k))?;
                push(k, &mut || Self::conv_weight_grad(x, g, ks))?;
            }
            Op::ConvInputGrad(gy, k) => {
                let ks = k.shape()[2];
                push(gy, &mut || g.conv2d(k, None))?;
                push(k, &mut || Self::conv_weight_grad(g, gy, ks))?;
            }
            Op::ConvWeightGrad(x, gy) => {
                push(gy, &mut || x.conv2d(g, None))?;
                push(x, &mut || Self::conv_input_grad(gy, g))?;
            }
            Op::AddBias(y, b) => {
                push(y, &mut || Ok(g.clone()))?;
                push(b, &mut || g.channel_sum())?;
            }
            Op::ChannelSum(y) => {
                let (_, h, w) = y.value().dims3("channel_sum backward")?;
                push(y, &mut || g.broadcast_channels(h, w))?
            }
            Op::BroadcastChannels(b) => push(b, &mut || g.channel_sum())?,
        }
        Ok(out)
    }

    fn parents(&self) -> Vec<&Var<T>> {
        match &self.0.op {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::Conv(a, b)
            | Op::ConvInputGrad(a, b)
            | Op::ConvWeightGrad(a, b)
            | Op::AddBias(a, b) => vec![a, b],
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Sum(a)
            | Op::Broadcast(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Sqrt(a)
            | Op::ChannelSum(a)
            | Op::BroadcastChannels(a) => vec![a],
        }
    }
}

/// Reverse-mode gradients of a scalar `root` with respect to each of `wrt`.
pub fn grad<T: Real>(root: &Var<T>, wrt: &[Var<T>], mode: GradMode) -> Result<Grads<T>> {
    if !root.value().is_scalar() {
        return Err(Error::NonScalarRoot(root.shape().to_vec()));
    }

    // Nodes reachable from the root that carry gradient, in creation order.
    let mut order: Vec<Var<T>> = Vec::new();
    let mut seen: HashMap<usize, ()> = HashMap::new();
    let mut stack = vec![root.clone()];
    while let Some(v) = stack.pop() {
        if !v.requires_grad() || seen.insert(v.0.id, ()).is_some() {
            continue;
        }
        for p in v.parents() {
            stack.push(p.clone());
        }
        order.push(v);
    }
    // Node ids grow with creation time and parents are created before
    // children, so descending id is a valid reverse topological order.
    order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

    let mut grads: HashMap<usize, Var<T>> = HashMap::new();
    grads.insert(root.0.id, Var::constant(Tensor::full(root.shape(), T::one())));

    for node in &order {
        let Some(g) = grads.remove(&node.0.id) else {
            continue;
        };
        let g = match mode {
            GradMode::Detached => g.detach(),
            GradMode::Record => g,
        };
        if wrt.iter().any(|w| w.0.id == node.0.id) {
            grads.insert(node.0.id, g.clone());
        }
        for (parent, pg) in node.backward(&g)? {
            let pg = match mode {
                GradMode::Detached => pg.detach(),
                GradMode::Record => pg,
            };
            let acc = match grads.remove(&parent.0.id) {
                Some(prev) => prev.add(&pg)?,
                None => pg,
            };
            grads.insert(parent.0.id, acc);
        }
    }

    let mut unreachable = Vec::with_capacity(wrt.len());
    let out = wrt
        .iter()
        .map(|w| match grads.get(&w.0.id) {
            Some(g) => {
                unreachable.push(false);
                g.clone()
            }
            None => {
                unreachable.push(true);
                log::warn!("gradient target {} is not reachable from the root", w.0.id);
                Var::constant(Tensor::zeros(w.shape()))
            }
        })
        .collect();
    Ok(Grads {
        grads: out,
        unreachable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn quadratic_gradient_is_identity() {
        let x = Var::variable(t(&[3], &[1.0, -2.0, 0.5]));
        let root = x.norm_sq().scale(0.5);
        let g = grad(&root, &[x.clone()], GradMode::Detached).unwrap();
        assert_eq!(g.grads[0].value(), x.value());
        assert!(!g.unreachable[0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let x = Var::variable(t(&[2], &[1.0, 2.0]));
        let err = grad(&x, &[x.clone()], GradMode::Detached).unwrap_err();
        assert!(matches!(err, Error::NonScalarRoot(_)));
    }

    #[test]
    fn unreachable_target_gets_zero_and_flag() {
        let x = Var::variable(t(&[2], &[1.0, 2.0]));
        let y = Var::variable(t(&[2], &[3.0, 4.0]));
        let root = x.norm_sq();
        let g = grad(&root, &[x, y], GradMode::Detached).unwrap();
        assert_eq!(g.unreachable, vec![false, true]);
        assert_eq!(g.grads[1].value().data(), &[0.0, 0.0]);
    }

    #[test]
    fn recorded_gradient_supports_second_derivative() {
        // f = sum(x^3)/3, grad = x^2, d/dx sum(grad) = 2x
        let x = Var::variable(t(&[3], &[1.0, 2.0, -3.0]));
        let cube = x.mul(&x).unwrap().mul(&x).unwrap().sum().scale(1.0 / 3.0);
        let g = grad(&cube, &[x.clone()], GradMode::Record).unwrap().grads.remove(0);
        for (a, e) in g.value().data().iter().zip([1.0, 4.0, 9.0]) {
            assert!((a - e).abs() < 1e-14);
        }
        let h = grad(&g.sum(), &[x.clone()], GradMode::Detached).unwrap();
        for (a, e) in h.grads[0].value().data().iter().zip([2.0, 4.0, -6.0]) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn detached_gradients_do_not_require_grad() {
        let x = Var::variable(t(&[2], &[1.0, 2.0]));
        let g = grad(&x.norm_sq(), &[x.clone()], GradMode::Detached).unwrap();
        assert!(!g.grads[0].requires_grad());
    }

    #[test]
    fn scalar_ops_chain() {
        // f = sqrt(a) / b
        let a = Var::variable(Tensor::scalar(4.0f64));
        let b = Var::variable(Tensor::scalar(0.5));
        let f = a.sqrt().div(&b).unwrap();
        let g = grad(&f, &[a, b], GradMode::Detached).unwrap().values();
        assert!((g[0].item() - 0.5 / 2.0 / 0.5).abs() < 1e-15);
        assert!((g[1].item() + 2.0 / 0.25).abs() < 1e-15);
    }
}
