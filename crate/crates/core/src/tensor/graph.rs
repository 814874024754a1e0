//! Tape-based reverse-mode differentiation.
//!
//! Every differentiable op appends one node to the [`Graph`] in execution
//! order; [`Graph::backward`] visits the nodes in exact reverse order.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::kernels::{self, inverse_permutation};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

type BackwardFn<T> = Box<dyn Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T> {
    value: Rc<Tensor<T>>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn<T>>,
}

/// A computation tape confined to one thread.
pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    check_finite: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: usize,
}

impl<T: Scalar> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of the leaves reachable from a backward root.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(&v.id)
    }

    pub fn take(&mut self, v: &Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.remove(&v.id)
    }

    /// Gradient of `v`, or zeros when `v` did not influence the root.
    pub fn get_or_zeros(&self, v: &Var<'_, T>) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Enables or disables the non-finite check on every recorded output.
    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Rc<Tensor<T>>, parents: Vec<usize>, requires_grad: bool, backward: Option<BackwardFn<T>>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            requires_grad,
            backward,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(t), vec![], true, None)
    }

    /// A differentiable input that shares storage with its owner.
    pub fn leaf_shared(&self, t: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push(t, vec![], true, None)
    }

    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(Rc::new(t), vec![], false, None)
    }

    pub fn constant_shared(&self, t: Rc<Tensor<T>>) -> Var<'_, T> {
        self.push(t, vec![], false, None)
    }

    fn record<'g>(
        &'g self,
        op: &'static str,
        value: Tensor<T>,
        parents: &[Var<'g, T>],
        backward: impl Fn(&Tensor<T>) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Result<Var<'g, T>> {
        if self.check_finite {
            if let Some(i) = value.first_non_finite() {
                return Err(Error::NonFinite(format!(
                    "op `{op}` produced {} at flat index {i} of {:?}",
                    value.data()[i],
                    value.shape()
                )));
            }
        }
        let nodes = self.nodes.borrow();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        drop(nodes);
        let ids = parents.iter().map(|p| p.id).collect();
        let bw: Option<BackwardFn<T>> = if requires_grad {
            Some(Box::new(backward))
        } else {
            None
        };
        Ok(self.push(Rc::new(value), ids, requires_grad, bw))
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var<'_, T>) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        let r = &nodes[root.id];
        if r.value.len() != 1 {
            return Err(Error::shape(format!(
                "backward root must hold one value, got {:?}",
                r.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.id).map(|_| None).collect();
        grads[root.id] = Some(Tensor::ones(r.value.shape()));
        let mut out = HashMap::new();
        for i in (0..=root.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.backward {
                None => {
                    out.insert(i, g);
                }
                Some(f) => {
                    let pgrads = f(&g)?;
                    for (&p, pg) in node.parents.iter().zip(pgrads) {
                        let Some(pg) = pg else { continue };
                        if !nodes[p].requires_grad {
                            continue;
                        }
                        match &mut grads[p] {
                            Some(acc) => acc.add_assign(&pg),
                            slot => *slot = Some(pg),
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = kernels::concat(&refs, axis)?;
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        self.record("concat", out, parts, move |g| {
            let mut start = 0;
            let mut res = Vec::with_capacity(sizes.len());
            for &s in &sizes {
                res.push(Some(kernels::slice(g, axis, start, s)?));
                start += s;
            }
            Ok(res)
        })
    }
}

fn same_shape_reduce<T: Scalar>(g: Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == shape {
        Ok(g)
    } else {
        kernels::reduce_to_shape(&g, shape)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Same value, cut from the tape.
    pub fn detach(self) -> Var<'g, T> {
        self.graph.constant_shared(self.value())
    }

    fn unary(
        self,
        op: &'static str,
        value: Tensor<T>,
        back: impl Fn(&Tensor<T>) -> Result<Tensor<T>> + 'static,
    ) -> Result<Var<'g, T>> {
        self.graph.record(op, value, &[self], move |g| Ok(vec![Some(back(g)?)]))
    }

    fn elementwise(
        self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Result<Var<'g, T>> {
        let x = self.value();
        let y = Rc::new(x.map(f));
        let yc = y.clone();
        self.graph.record(op, (*y).clone(), &[self], move |g| {
            let data = g
                .data()
                .iter()
                .zip(x.data())
                .zip(yc.data())
                .map(|((&gv, &xv), &yv)| gv * df(xv, yv))
                .collect();
            Ok(vec![Some(Tensor::new(g.shape(), data)?)])
        })
    }

    pub fn add(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let out = kernels::broadcast_binary(&a, &b, |x, y| x + y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.record("add", out, &[self, other], move |g| {
            Ok(vec![
                Some(kernels::reduce_to_shape(g, &sa)?),
                Some(kernels::reduce_to_shape(g, &sb)?),
            ])
        })
    }

    pub fn sub(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let out = kernels::broadcast_binary(&a, &b, |x, y| x - y)?;
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.record("sub", out, &[self, other], move |g| {
            Ok(vec![
                Some(kernels::reduce_to_shape(g, &sa)?),
                Some(kernels::reduce_to_shape(&g.map(|v| -v), &sb)?),
            ])
        })
    }

    pub fn mul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let out = kernels::broadcast_binary(&a, &b, |x, y| x * y)?;
        self.graph.record("mul", out, &[self, other], move |g| {
            let ga = kernels::broadcast_binary(g, &b, |x, y| x * y)?;
            let gb = kernels::broadcast_binary(g, &a, |x, y| x * y)?;
            Ok(vec![
                Some(same_shape_reduce(ga, a.shape())?),
                Some(same_shape_reduce(gb, b.shape())?),
            ])
        })
    }

    pub fn div(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let out = Rc::new(kernels::broadcast_binary(&a, &b, |x, y| x / y)?);
        let q = out.clone();
        self.graph.record("div", (*out).clone(), &[self, other], move |g| {
            let ga = kernels::broadcast_binary(g, &b, |x, y| x / y)?;
            // d(a/b)/db = -(a/b)/b
            let qb = kernels::broadcast_binary(&q, &b, |x, y| x / y)?;
            let gb = g.zip_map(&qb, |x, y| -x * y)?;
            Ok(vec![
                Some(same_shape_reduce(ga, a.shape())?),
                Some(same_shape_reduce(gb, b.shape())?),
            ])
        })
    }

    pub fn scale(self, c: f64) -> Result<Var<'g, T>> {
        let c = T::lit(c);
        let out = self.value().map(|v| v * c);
        self.unary("scale", out, move |g| Ok(g.map(|v| v * c)))
    }

    pub fn add_scalar(self, c: f64) -> Result<Var<'g, T>> {
        let c = T::lit(c);
        let out = self.value().map(|v| v + c);
        self.unary("add_scalar", out, |g| Ok(g.clone()))
    }

    /// `c - x`
    pub fn rsub_scalar(self, c: f64) -> Result<Var<'g, T>> {
        let c = T::lit(c);
        let out = self.value().map(|v| c - v);
        self.unary("rsub_scalar", out, |g| Ok(g.map(|v| -v)))
    }

    pub fn neg(self) -> Result<Var<'g, T>> {
        self.scale(-1.0)
    }

    pub fn sigmoid(self) -> Result<Var<'g, T>> {
        self.elementwise(
            "sigmoid",
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// `x` for `x >= 0`, `exp(x) - 1` otherwise.
    pub fn elu(self) -> Result<Var<'g, T>> {
        self.elementwise(
            "elu",
            |x| if x >= T::zero() { x } else { x.exp_m1() },
            |x, y| if x >= T::zero() { T::one() } else { y + T::one() },
        )
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(self) -> Result<Var<'g, T>> {
        let half = T::lit(0.5);
        let inv_sqrt2 = T::lit(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt_2pi = T::lit(0.398_942_280_401_432_7);
        self.elementwise(
            "gelu",
            move |x| half * x * (T::one() + (x * inv_sqrt2).erf()),
            move |x, _| {
                let cdf = half * (T::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                cdf + x * pdf
            },
        )
    }

    pub fn exp(self) -> Result<Var<'g, T>> {
        self.elementwise("exp", |x| x.exp(), |_, y| y)
    }

    pub fn log(self) -> Result<Var<'g, T>> {
        self.elementwise("log", |x| x.ln(), |x, _| T::one() / x)
    }

    pub fn square(self) -> Result<Var<'g, T>> {
        self.elementwise("square", |x| x * x, |x, _| x + x)
    }

    pub fn abs(self) -> Result<Var<'g, T>> {
        self.elementwise("abs", |x| x.abs(), |x, _| x.signum())
    }

    fn gemm(self, other: Var<'g, T>, ta: bool, tb: bool) -> Result<Var<'g, T>> {
        let (a, b) = (self.value(), other.value());
        let out = kernels::matmul(&a, &b, ta, tb)?;
        self.graph.record("matmul", out, &[self, other], move |g| {
            let ga = match (ta, tb) {
                (false, false) => kernels::matmul(g, &b, false, true)?,
                (false, true) => kernels::matmul(g, &b, false, false)?,
                (true, false) => kernels::matmul(&b, g, false, true)?,
                (true, true) => kernels::matmul(&b, g, true, true)?,
            };
            let gb = if b.rank() == 2 && a.rank() > 2 && !ta && !tb {
                // broadcast weight: one gemm over the folded batch
                let k = a.shape()[a.rank() - 1];
                let n = g.shape()[g.rank() - 1];
                let rows = a.len() / k;
                let a2 = Tensor::new(&[rows, k], a.data().to_vec())?;
                let g2 = Tensor::new(&[rows, n], g.data().to_vec())?;
                kernels::matmul(&a2, &g2, true, false)?
            } else {
                match (ta, tb) {
                    (false, false) => kernels::matmul(&a, g, true, false)?,
                    (true, false) => kernels::matmul(&a, g, false, false)?,
                    (false, true) => kernels::matmul(g, &a, true, false)?,
                    (true, true) => kernels::matmul(g, &a, true, true)?,
                }
            };
            Ok(vec![
                Some(same_shape_reduce(ga, a.shape())?),
                Some(same_shape_reduce(gb, b.shape())?),
            ])
        })
    }

    /// `self · other` over the last two axes.
    pub fn matmul(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.gemm(other, false, false)
    }

    /// `self · otherᵀ` over the last two axes.
    pub fn matmul_bt(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.gemm(other, false, true)
    }

    /// `selfᵀ · other` over the last two axes.
    pub fn matmul_at(self, other: Var<'g, T>) -> Result<Var<'g, T>> {
        self.gemm(other, true, false)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let out = (*x).clone().reshape(shape)?;
        self.unary("reshape", out, move |g| g.clone().reshape(&orig))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let out = kernels::permute(&self.value(), axes)?;
        let inv = inverse_permutation(axes);
        self.unary("permute", out, move |g| kernels::permute(g, &inv))
    }

    pub fn transpose(self, a: usize, b: usize) -> Result<Var<'g, T>> {
        let rank = self.shape().len();
        if a >= rank || b >= rank {
            return Err(Error::Axis {
                axis: a.max(b),
                rank,
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(a, b);
        self.permute(&axes)
    }

    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let out = kernels::slice(&x, axis, start, len)?;
        let full = x.shape().to_vec();
        self.unary("slice", out, move |g| Ok(kernels::unslice(g, &full, axis, start)))
    }

    /// Splits along `axis` into pieces of the given sizes.
    pub fn split(self, axis: usize, sizes: &[usize]) -> Result<Vec<Var<'g, T>>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if sizes.iter().sum::<usize>() != shape[axis] {
            return Err(Error::shape(format!(
                "split sizes {sizes:?} do not cover axis {axis} of {shape:?}"
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Sum of all entries as a rank-0 tensor.
    pub fn sum(self) -> Result<Var<'g, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.unary("sum", Tensor::scalar(x.sum()), move |g| {
            Ok(Tensor::full(&shape, g.item()))
        })
    }

    pub fn mean(self) -> Result<Var<'g, T>> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it with length 1.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let out = kernels::sum_axis(&x, axis)?;
        let shape = x.shape().to_vec();
        self.unary("sum_axis", out, move |g| kernels::broadcast_to(g, &shape))
    }

    pub fn layer_norm(self, gain: Var<'g, T>, bias: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        if eps <= 0.0 {
            return Err(Error::invalid(format!("layer_norm eps must be positive, got {eps}")));
        }
        let x = self.value();
        let (gv, bv) = (gain.value(), bias.value());
        let c = *x.shape().last().ok_or_else(|| Error::shape("layer_norm on rank-0"))?;
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(Error::shape(format!(
                "layer_norm affine shapes {:?}/{:?} do not match last axis {c}",
                gv.shape(),
                bv.shape()
            )));
        }
        let (y, xhat, rstd) = kernels::layer_norm(&x, &gv, &bv, T::lit(eps));
        self.graph.record("layer_norm", y, &[self, gain, bias], move |g| {
            let (dx, dg, db) = kernels::layer_norm_backward(g, &xhat, &rstd, &gv);
            Ok(vec![Some(dx), Some(dg), Some(db)])
        })
    }

    /// Softmax over the last axis. `mask` is additive (0 or a large negative
    /// number) and must broadcast to this shape.
    pub fn softmax(self, mask: Option<&Tensor<T>>) -> Result<Var<'g, T>> {
        let x = self.value();
        let expanded = match mask {
            Some(m) => Some(kernels::broadcast_to(m, x.shape())?),
            None => None,
        };
        let y = Rc::new(kernels::softmax_lastaxis(&x, expanded.as_ref()));
        let yc = y.clone();
        self.unary("softmax", (*y).clone(), move |g| Ok(kernels::softmax_backward(g, &yc)))
    }

    /// Rows of a `[R, C]` table picked by `indices`, giving `[len, C]`.
    pub fn gather_rows(self, indices: Rc<Vec<usize>>) -> Result<Var<'g, T>> {
        let x = self.value();
        let out = kernels::gather_rows(&x, &indices)?;
        let rows = x.shape()[0];
        self.unary("gather_rows", out, move |g| Ok(kernels::scatter_rows(g, &indices, rows)))
    }

    /// Cyclic shift of the two leading axes.
    pub fn roll2(self, dh: isize, dw: isize) -> Result<Var<'g, T>> {
        let out = kernels::roll2(&self.value(), dh, dw)?;
        self.unary("roll2", out, move |g| kernels::roll2(g, -dh, -dw))
    }

    /// `(1 − u)·self + u·other` for equal shapes. The value is clamped to the
    /// interval spanned by `self` and `other`, which only removes rounding, so
    /// `u = 0` and `u = 1` reproduce the endpoints exactly.
    pub fn convex_mix(self, other: Var<'g, T>, u: Var<'g, T>) -> Result<Var<'g, T>> {
        let (h, a, uv) = (self.value(), other.value(), u.value());
        if h.shape() != a.shape() || a.shape() != uv.shape() {
            return Err(Error::shape(format!(
                "convex_mix operands differ: {:?}, {:?}, {:?}",
                h.shape(),
                a.shape(),
                uv.shape()
            )));
        }
        let data = h
            .data()
            .iter()
            .zip(a.data())
            .zip(uv.data())
            .map(|((&hv, &av), &w)| {
                let m = (T::one() - w) * hv + w * av;
                m.max(hv.min(av)).min(hv.max(av))
            })
            .collect();
        let out = Tensor::new(h.shape(), data)?;
        self.graph.record("convex_mix", out, &[self, other, u], move |g| {
            let gh = g.zip_map(&uv, |gv, w| gv * (T::one() - w))?;
            let ga = g.zip_map(&uv, |gv, w| gv * w)?;
            let diff = a.zip_map(&h, |x, y| x - y)?;
            let gu = g.zip_map(&diff, |gv, dv| gv * dv)?;
            Ok(vec![Some(gh), Some(ga), Some(gu)])
        })
    }
}
