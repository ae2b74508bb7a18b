//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations on [`Var`]s append nodes to a [`Tape`] (a Wengert list), so the
//! node order is always a valid topological order. The backward rules are
//! themselves written in terms of recorded `Var` operations: the gradients
//! returned by [`Tape::grad`] are ordinary nodes on the same tape and can be
//! differentiated again. This is how the denoising objective, which contains
//! an input-gradient of the energy, is differentiated with respect to the
//! network parameters.
//!
//! ```
//! use mdsm_core::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::scalar(2.0));
//! let y = x.square()?.square()?; // x^4
//! let dy = &tape.grad(&y, &[&x])?[0]; // 4x^3
//! let d2y = &tape.grad(dy, &[&x])?[0]; // 12x^2
//! assert_eq!(d2y.value().item()?, 48.0);
//! # Ok::<(), mdsm_core::Error>(())
//! ```

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    /// Multiplication by a tensor that is not part of the graph.
    MulConst(usize, Rc<Tensor>),
    MatMul(usize, usize),
    Transpose(usize),
    SumLeading(usize, usize),
    BroadcastLeading(usize),
    Square(usize),
    Sqrt(usize),
    Exp(usize),
    Log(usize),
    Elu(usize),
    EluDeriv(usize),
    Reshape(usize, Vec<usize>),
    SliceCols { input: usize, start: usize, total: usize },
    PadCols { input: usize, start: usize, width: usize },
    ConcatCols(Vec<(usize, usize)>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

struct TapeInner {
    id: u64,
    nodes: RefCell<Vec<Node>>,
}

/// A recording of tensor operations. Cloning a `Tape` yields another handle
/// to the same recording.
#[derive(Clone)]
pub struct Tape {
    inner: Rc<TapeInner>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(TapeInner {
                id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
                nodes: RefCell::new(Vec::new()),
            }),
        }
    }

    /// Records a differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.inner.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self.clone(),
            id: nodes.len() - 1,
        }
    }

    fn owns(&self, v: &Var) -> Result<()> {
        if v.tape.inner.id != self.inner.id || v.id >= self.len() {
            return Err(Error::Graph(format!(
                "variable {} is not recorded on this tape",
                v.id
            )));
        }
        Ok(())
    }

    fn requires_grad(&self, id: usize) -> bool {
        self.inner.nodes.borrow()[id].requires_grad
    }

    fn at(&self, id: usize) -> Var {
        Var {
            tape: self.clone(),
            id,
        }
    }

    /// Gradients of a one-element `output` with respect to each of `wrt`.
    ///
    /// The returned gradients are recorded on this tape, so they can appear
    /// in a further computation that is differentiated again. Variables that
    /// do not influence `output` get zero gradients.
    pub fn grad(&self, output: &Var, wrt: &[&Var]) -> Result<Vec<Var>> {
        self.owns(output)?;
        for w in wrt {
            self.owns(w)?;
        }
        let out_shape = output.shape();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::Graph(format!(
                "gradient requires a scalar output, got shape {out_shape:?}"
            )));
        }

        let mut wanted: HashMap<usize, Option<Var>> = wrt.iter().map(|w| (w.id, None)).collect();
        let mut grads: Vec<Option<Var>> = vec![None; output.id + 1];
        grads[output.id] = Some(self.constant(Tensor::ones(out_shape)));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            if let Some(slot) = wanted.get_mut(&id) {
                *slot = Some(g.clone());
            }
            let (op, requires_grad) = {
                let nodes = self.inner.nodes.borrow();
                (nodes[id].op.clone(), nodes[id].requires_grad)
            };
            if !requires_grad {
                continue;
            }
            for (input, contribution) in self.backward(id, &op, &g)? {
                grads[input] = Some(match grads[input].take() {
                    Some(acc) => acc.add(&contribution)?,
                    None => contribution,
                });
            }
        }

        Ok(wrt
            .iter()
            .map(|w| match wanted.get(&w.id).cloned().flatten() {
                Some(g) => g,
                None => self.constant(Tensor::zeros(w.shape())),
            })
            .collect())
    }

    /// Like [`Tape::grad`], returning plain tensors.
    pub fn grad_values(&self, output: &Var, wrt: &[&Var]) -> Result<Vec<Tensor>> {
        Ok(self
            .grad(output, wrt)?
            .into_iter()
            .map(|g| g.value().as_ref().clone())
            .collect())
    }

    /// Vector-Jacobian products of node `id` for each input that needs one.
    fn backward(&self, id: usize, op: &Op, g: &Var) -> Result<Vec<(usize, Var)>> {
        let needs = |i: usize| self.requires_grad(i);
        let out = self.at(id);
        let mut c = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(a) {
                    c.push((a, g.clone()));
                }
                if needs(b) {
                    c.push((b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    c.push((a, g.clone()));
                }
                if needs(b) {
                    c.push((b, g.scale(-1.0)?));
                }
            }
            Op::Mul(a, b) => {
                if needs(a) {
                    c.push((a, g.mul(&self.at(b))?));
                }
                if needs(b) {
                    c.push((b, g.mul(&self.at(a))?));
                }
            }
            Op::Div(a, b) => {
                let denom = self.at(b);
                if needs(a) {
                    c.push((a, g.div(&denom)?));
                }
                if needs(b) {
                    c.push((b, g.mul(&out)?.div(&denom)?.scale(-1.0)?));
                }
            }
            Op::Scale(a, k) => c.push((a, g.scale(k)?)),
            Op::MulConst(a, ref k) => c.push((a, g.mul_const(k.clone())?)),
            Op::MatMul(a, b) => {
                if needs(a) {
                    c.push((a, g.matmul(&self.at(b).transpose()?)?));
                }
                if needs(b) {
                    c.push((b, self.at(a).transpose()?.matmul(g)?));
                }
            }
            Op::Transpose(a) => c.push((a, g.transpose()?)),
            Op::SumLeading(a, n) => c.push((a, g.broadcast_leading(n)?)),
            Op::BroadcastLeading(a) => c.push((a, g.sum_leading()?)),
            Op::Square(a) => c.push((a, g.mul(&self.at(a))?.scale(2.0)?)),
            Op::Sqrt(a) => c.push((a, g.div(&out.scale(2.0)?)?)),
            Op::Exp(a) => c.push((a, g.mul(&out)?)),
            Op::Log(a) => c.push((a, g.div(&self.at(a))?)),
            Op::Elu(a) => c.push((a, g.mul(&self.at(a).elu_deriv()?)?)),
            Op::EluDeriv(a) => {
                // d/dx elu'(x) = exp(x) = elu'(x) on the non-positive side, 0 elsewhere.
                let mask = self.at(a).value().map(|v| if v > 0.0 { 0.0 } else { 1.0 });
                c.push((a, g.mul(&out)?.mul_const(Rc::new(mask))?));
            }
            Op::Reshape(a, ref shape) => c.push((a, g.reshape(shape.clone())?)),
            Op::SliceCols { input, start, total } => {
                c.push((input, g.pad_cols(start, total)?));
            }
            Op::PadCols { input, start, width } => {
                c.push((input, g.slice_cols(start, start + width)?));
            }
            Op::ConcatCols(ref parts) => {
                let mut offset = 0;
                for &(part, width) in parts {
                    if needs(part) {
                        c.push((part, g.slice_cols(offset, offset + width)?));
                    }
                    offset += width;
                }
            }
        }
        Ok(c)
    }
}

/// A handle to a node on a [`Tape`].
#[derive(Clone)]
pub struct Var {
    tape: Tape,
    id: usize,
}

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl Var {
    pub fn value(&self) -> Rc<Tensor> {
        self.tape.inner.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    fn record(&self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.tape.requires_grad(i));
        self.tape.push(value, op, requires_grad)
    }

    fn same_tape(&self, other: &Var) -> Result<()> {
        if self.tape.inner.id != other.tape.inner.id {
            return Err(Error::Graph("operands live on different tapes".into()));
        }
        Ok(())
    }

    /// Aligns two operands, repeating one along a leading batch axis when its
    /// shape equals the other's trailing shape.
    fn broadcast_pair(&self, other: &Var, op: &'static str) -> Result<(Var, Var)> {
        self.same_tape(other)?;
        let (sa, sb) = (self.shape(), other.shape());
        if sa == sb {
            Ok((self.clone(), other.clone()))
        } else if !sa.is_empty() && sa[1..] == sb[..] {
            Ok((self.clone(), other.broadcast_leading(sa[0])?))
        } else if !sb.is_empty() && sb[1..] == sa[..] {
            Ok((self.broadcast_leading(sb[0])?, other.clone()))
        } else {
            Err(Error::dim(op, format!("{sa:?} vs {sb:?}")))
        }
    }

    pub fn add(&self, other: &Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(other, "add")?;
        let v = a.value().add(&b.value())?;
        Ok(self.record(v, Op::Add(a.id, b.id), &[a.id, b.id]))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(other, "sub")?;
        let v = a.value().sub(&b.value())?;
        Ok(self.record(v, Op::Sub(a.id, b.id), &[a.id, b.id]))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(other, "mul")?;
        let v = a.value().mul(&b.value())?;
        Ok(self.record(v, Op::Mul(a.id, b.id), &[a.id, b.id]))
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        let (a, b) = self.broadcast_pair(other, "div")?;
        let v = a.value().div(&b.value())?;
        Ok(self.record(v, Op::Div(a.id, b.id), &[a.id, b.id]))
    }

    pub fn scale(&self, k: f64) -> Result<Var> {
        let v = self.value().scale(k)?;
        Ok(self.record(v, Op::Scale(self.id, k), &[self.id]))
    }

    /// Elementwise product with a fixed tensor of the same shape.
    pub fn mul_const(&self, k: Rc<Tensor>) -> Result<Var> {
        let v = self.value().mul(&k)?;
        Ok(self.record(v, Op::MulConst(self.id, k), &[self.id]))
    }

    pub fn matmul(&self, other: &Var) -> Result<Var> {
        self.same_tape(other)?;
        let v = self.value().matmul(&other.value())?;
        Ok(self.record(v, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn transpose(&self) -> Result<Var> {
        let v = self.value().transpose()?;
        Ok(self.record(v, Op::Transpose(self.id), &[self.id]))
    }

    pub fn sum_leading(&self) -> Result<Var> {
        let n = self.shape().first().copied().unwrap_or(0);
        let v = self.value().sum_leading()?;
        Ok(self.record(v, Op::SumLeading(self.id, n), &[self.id]))
    }

    pub fn broadcast_leading(&self, n: usize) -> Result<Var> {
        let v = self.value().broadcast_leading(n);
        Ok(self.record(v, Op::BroadcastLeading(self.id), &[self.id]))
    }

    pub fn square(&self) -> Result<Var> {
        let v = self.value().square()?;
        Ok(self.record(v, Op::Square(self.id), &[self.id]))
    }

    pub fn sqrt(&self) -> Result<Var> {
        let v = self.value().sqrt()?;
        Ok(self.record(v, Op::Sqrt(self.id), &[self.id]))
    }

    pub fn exp(&self) -> Result<Var> {
        let v = self.value().exp()?;
        Ok(self.record(v, Op::Exp(self.id), &[self.id]))
    }

    pub fn log(&self) -> Result<Var> {
        let v = self.value().log()?;
        Ok(self.record(v, Op::Log(self.id), &[self.id]))
    }

    pub fn elu(&self) -> Result<Var> {
        let v = self.value().elu()?;
        Ok(self.record(v, Op::Elu(self.id), &[self.id]))
    }

    pub fn elu_deriv(&self) -> Result<Var> {
        let v = self.value().elu_deriv()?;
        Ok(self.record(v, Op::EluDeriv(self.id), &[self.id]))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let old = self.shape();
        let v = self.value().reshape(shape)?;
        Ok(self.record(v, Op::Reshape(self.id, old), &[self.id]))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var> {
        let total = self.shape().get(1).copied().unwrap_or(0);
        let v = self.value().slice_cols(start, end)?;
        Ok(self.record(
            v,
            Op::SliceCols {
                input: self.id,
                start,
                total,
            },
            &[self.id],
        ))
    }

    pub fn pad_cols(&self, start: usize, total: usize) -> Result<Var> {
        let width = self.shape().get(1).copied().unwrap_or(0);
        let v = self.value().pad_cols(start, total)?;
        Ok(self.record(
            v,
            Op::PadCols {
                input: self.id,
                start,
                width,
            },
            &[self.id],
        ))
    }

    pub fn concat_cols(parts: &[&Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::dim("concat_cols", "nothing to concatenate"));
        };
        for p in parts {
            first.same_tape(p)?;
        }
        let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat_cols(&refs)?;
        let meta = parts.iter().zip(&values).map(|(p, v)| (p.id, v.cols())).collect();
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        Ok(first.record(v, Op::ConcatCols(meta), &ids))
    }

    /// Sum of all elements, as a shape-`[]` scalar.
    pub fn sum(&self) -> Result<Var> {
        let n: usize = self.shape().iter().product();
        self.reshape([n])?.sum_leading()
    }

    pub fn mean(&self) -> Result<Var> {
        let n: usize = self.shape().iter().product();
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Per-row sums of a `[rows, cols]` matrix, giving `[rows]`.
    pub fn row_sums(&self) -> Result<Var> {
        let shape = self.shape();
        let [rows, cols] = shape[..] else {
            return Err(Error::dim("row_sums", format!("expected a matrix, got {shape:?}")));
        };
        let ones = self.tape.constant(Tensor::ones([cols, 1]));
        self.matmul(&ones)?.reshape([rows])
    }
}

/// Gradient components below this magnitude are compared absolutely: the
/// central difference of an exactly-zero gradient is pure roundoff.
pub const FD_FLOOR: f64 = 1e-6;

/// Compares the tape gradient of `f` at `x` with central differences of step
/// `h`, returning the largest per-coordinate relative error
/// `|analytic - numeric| / max(|analytic|, FD_FLOOR)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::domain("finite_diff_check", format!("step {h} must be positive")));
    }
    let eval = |point: Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = f(&tape.constant(point)).map_err(|e| match e {
            Error::NonFinite { op } => Error::domain("finite_diff_check", format!("non-finite value in {op}")),
            other => other,
        })?;
        let value = v.value().item()?;
        if !value.is_finite() {
            return Err(Error::domain("finite_diff_check", "non-finite function value"));
        }
        Ok(value)
    };

    let tape = Tape::new();
    let xv = tape.var(x.clone());
    let out = f(&xv)?;
    let analytic = tape.grad_values(&out, &[&xv])?.remove(0);

    let mut worst = 0.0_f64;
    for (i, &a) in analytic.data().iter().enumerate() {
        let mut plus = x.clone().into_data();
        let mut minus = plus.clone();
        plus[i] += h;
        minus[i] -= h;
        let fp = eval(Tensor::from_parts(x.shape().to_vec(), plus))?;
        let fm = eval(Tensor::from_parts(x.shape().to_vec(), minus))?;
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / a.abs().max(FD_FLOOR));
    }
    Ok(worst)
}
