//! Tape-based reverse-mode differentiation.
//!
//! Every vector-Jacobian product is itself expressed with tape operations,
//! so a gradient can be recorded as part of the graph
//! ([`Tape::gradient_as_graph`]) and differentiated again. Graph lifetime is
//! explicit: nodes live until the scope that recorded them is released, and
//! the tape keeps live and peak counters of node count and stored bytes.

use std::collections::HashSet;

use thiserror::Error;

use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("variable (node {index}) is not live on this tape")]
    NotOnTape { index: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("gradient-as-graph requested but the tape is in plain mode")]
    ModeNotEnabled,
    #[error("unbalanced scope release: expected depth {expected}, got {got}")]
    UnbalancedScope { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TapeMode {
    /// Backward passes produce values only.
    #[default]
    Plain,
    /// Backward passes may be recorded as differentiable graph.
    GradientAsGraph,
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    index: usize,
    serial: u64,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f64),
    Exp,
    PowOffset { offset: f64, power: f64 },
    Relu,
    Matmul,
    Transpose,
    Reshape,
    SumTo,
    BroadcastTo,
    Conv2d,
    Conv2dInputGrad,
    Conv2dWeightGrad { k: usize },
    AvgPool2,
    Unpool2 { h: usize, w: usize },
    Shift { dy: isize, dx: isize },
    FlipW,
    Gather(Vec<usize>),
    ScatterAdd { index: Vec<usize>, rows: usize },
    LogSumExpRows,
}

struct Node<F: Element> {
    serial: u64,
    op: Op,
    inputs: Vec<usize>,
    value: Tensor<F>,
}

/// Live and peak graph size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct GraphStats {
    pub live_nodes: usize,
    pub live_bytes: usize,
    pub peak_nodes: usize,
    pub peak_bytes: usize,
}

#[derive(Debug, PartialEq, Eq)]
#[must_use = "a scope must be released"]
pub struct ScopeToken {
    depth: usize,
    mark: usize,
}

pub struct Tape<F: Element = f32> {
    nodes: Vec<Node<F>>,
    next_serial: u64,
    mode: TapeMode,
    strict: bool,
    scopes: Vec<usize>,
    live_bytes: usize,
    peak_nodes: usize,
    peak_bytes: usize,
}

impl<F: Element> Default for Tape<F> {
    fn default() -> Self {
        Self::new(TapeMode::Plain)
    }
}

impl<F: Element> Tape<F> {
    pub fn new(mode: TapeMode) -> Self {
        Self {
            nodes: Vec::new(),
            next_serial: 0,
            mode,
            strict: true,
            scopes: Vec::new(),
            live_bytes: 0,
            peak_nodes: 0,
            peak_bytes: 0,
        }
    }

    pub fn mode(&self) -> TapeMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: TapeMode) {
        self.mode = mode;
    }

    /// In strict mode (the default) any non-finite op output is a
    /// [`TensorError::NumericFault`].
    pub fn set_strict(&mut self, strict: bool) {
        self.strict = strict;
    }

    pub fn stats(&self) -> GraphStats {
        GraphStats {
            live_nodes: self.nodes.len(),
            live_bytes: self.live_bytes,
            peak_nodes: self.peak_nodes,
            peak_bytes: self.peak_bytes,
        }
    }

    /// Restarts peak tracking from the current live size.
    pub fn reset_peak(&mut self) {
        self.peak_nodes = self.nodes.len();
        self.peak_bytes = self.live_bytes;
    }

    pub fn open_scope(&mut self) -> ScopeToken {
        self.scopes.push(self.nodes.len());
        ScopeToken {
            depth: self.scopes.len(),
            mark: self.nodes.len(),
        }
    }

    /// Frees every node recorded since `token` was opened. Scopes must be
    /// released innermost first.
    pub fn release_scope(&mut self, token: ScopeToken) -> Result<()> {
        if token.depth != self.scopes.len() || self.scopes.last() != Some(&token.mark) {
            return Err(AutodiffError::UnbalancedScope {
                expected: self.scopes.len(),
                got: token.depth,
            });
        }
        self.scopes.pop();
        self.truncate(token.mark);
        Ok(())
    }

    fn truncate(&mut self, mark: usize) {
        let freed: usize = self.nodes[mark..].iter().map(|n| n.value.bytes()).sum();
        self.nodes.truncate(mark);
        self.live_bytes -= freed;
    }

    fn node(&self, v: Var) -> Result<&Node<F>> {
        match self.nodes.get(v.index) {
            Some(n) if n.serial == v.serial => Ok(n),
            _ => Err(AutodiffError::NotOnTape { index: v.index }),
        }
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<F>> {
        Ok(&self.node(v)?.value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.node(v)?.value.shape())
    }

    fn push(&mut self, op: Op, inputs: Vec<usize>, value: Tensor<F>, name: &'static str) -> Result<Var> {
        let value = if self.strict {
            value.check_finite(name)?
        } else {
            value
        };
        let serial = self.next_serial;
        self.next_serial += 1;
        self.live_bytes += value.bytes();
        self.nodes.push(Node {
            serial,
            op,
            inputs,
            value,
        });
        self.peak_nodes = self.peak_nodes.max(self.nodes.len());
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        Ok(Var {
            index: self.nodes.len() - 1,
            serial,
        })
    }

    pub fn leaf(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push(Op::Leaf, vec![], value, "leaf")
    }

    fn unary(&mut self, a: Var, op: Op, name: &'static str, f: impl FnOnce(&Tensor<F>) -> crate::tensor::Result<Tensor<F>>) -> Result<Var> {
        let value = f(&self.node(a)?.value)?;
        self.push(op, vec![a.index], value, name)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: impl FnOnce(&Tensor<F>, &Tensor<F>) -> crate::tensor::Result<Tensor<F>>,
    ) -> Result<Var> {
        let value = f(&self.node(a)?.value, &self.node(b)?.value)?;
        self.push(op, vec![a.index, b.index], value, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add, "add", |x, y| x.add(y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub, "sub", |x, y| x.sub(y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul, "mul", |x, y| x.mul(y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale(c), "scale", |x| Ok(x.scale(F::of(c))))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp, "exp", |x| Ok(x.exp()))
    }

    /// `(a + offset)^power`.
    pub fn pow_offset(&mut self, a: Var, offset: f64, power: f64) -> Result<Var> {
        self.unary(a, Op::PowOffset { offset, power }, "pow_offset", |x| {
            Ok(x.pow_offset(F::of(offset), F::of(power)))
        })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu, "relu", |x| Ok(x.relu()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Matmul, "matmul", |x, y| x.matmul(y))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Transpose, "transpose", |x| x.transpose2d())
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.unary(a, Op::Reshape, "reshape", |x| x.reshape(shape))
    }

    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.unary(a, Op::SumTo, "sum_to", |x| x.sum_to(shape))
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.unary(a, Op::BroadcastTo, "broadcast_to", |x| x.broadcast_to(shape))
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.node(a)?.value.numel();
        let flat = self.reshape(a, &[n])?;
        self.sum_to(flat, &[1])
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        self.sum_all(p)
    }

    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        self.binary(x, w, Op::Conv2d, "conv2d", |x, w| x.conv2d(w))
    }

    fn conv2d_input_grad(&mut self, g: Var, w: Var) -> Result<Var> {
        self.binary(g, w, Op::Conv2dInputGrad, "conv2d_input_grad", |g, w| g.conv2d_input_grad(w))
    }

    fn conv2d_weight_grad(&mut self, x: Var, g: Var, k: usize) -> Result<Var> {
        self.binary(x, g, Op::Conv2dWeightGrad { k }, "conv2d_weight_grad", |x, g| {
            x.conv2d_weight_grad(g, k)
        })
    }

    pub fn avgpool2(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::AvgPool2, "avgpool2", |x| x.avgpool2())
    }

    fn unpool2(&mut self, g: Var, h: usize, w: usize) -> Result<Var> {
        self.unary(g, Op::Unpool2 { h, w }, "unpool2", |g| g.unpool2(h, w))
    }

    pub fn shift2d(&mut self, x: Var, dy: isize, dx: isize) -> Result<Var> {
        self.unary(x, Op::Shift { dy, dx }, "shift2d", |x| x.shift2d(dy, dx))
    }

    pub fn flip_w(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::FlipW, "flip_w", |x| x.flip_w())
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        self.unary(x, Op::Gather(index.to_vec()), "gather_rows", |x| x.gather_rows(index))
    }

    pub fn scatter_add_rows(&mut self, x: Var, index: &[usize], rows: usize) -> Result<Var> {
        self.unary(
            x,
            Op::ScatterAdd {
                index: index.to_vec(),
                rows,
            },
            "scatter_add_rows",
            |x| x.scatter_add_rows(index, rows),
        )
    }

    pub fn logsumexp_rows(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Op::LogSumExpRows, "logsumexp_rows", |x| x.logsumexp_rows())
    }

    /// Row-wise softmax of a `[n, k]` variable.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let lse = self.logsumexp_rows(x)?;
        let shifted = self.sub_row_scalars(x, lse)?;
        self.exp(shifted)
    }

    /// Row-wise log-softmax of a `[n, k]` variable.
    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let lse = self.logsumexp_rows(x)?;
        self.sub_row_scalars(x, lse)
    }

    /// `x[i, j] - r[i]`.
    fn sub_row_scalars(&mut self, x: Var, r: Var) -> Result<Var> {
        let shape = self.shape(x)?.to_vec();
        let col = self.reshape(r, &[shape[0], 1])?;
        let wide = self.broadcast_to(col, &shape)?;
        self.sub(x, wide)
    }

    /// Gradients of `loss` with respect to `wrt`, as plain values. Nodes
    /// recorded while differentiating are freed before returning; the
    /// forward graph is left to its owning scope.
    pub fn backward(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor<F>>> {
        let mark = self.nodes.len();
        let result = self
            .reverse(loss, wrt)
            .and_then(|grads| grads.into_iter().map(|g| Ok(self.value(g)?.clone())).collect());
        self.truncate(mark);
        result
    }

    /// Gradients of `loss` recorded as differentiable graph. The returned
    /// variables stay live until the enclosing scope is released.
    pub fn gradient_as_graph(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.mode != TapeMode::GradientAsGraph {
            return Err(AutodiffError::ModeNotEnabled);
        }
        self.reverse(loss, wrt)
    }

    fn reverse(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        let loss_shape = self.node(loss)?.value.shape().to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_shape));
        }
        for &v in wrt {
            self.node(v)?;
        }
        let targets: HashSet<usize> = wrt.iter().map(|v| v.index).collect();
        let lo = wrt.iter().map(|v| v.index).min().unwrap_or(loss.index).min(loss.index);
        let hi = loss.index;

        // Nodes whose gradient is needed: targets and anything downstream.
        let mut needs = vec![false; hi + 1 - lo];
        for i in lo..=hi {
            needs[i - lo] = targets.contains(&i)
                || self.nodes[i]
                    .inputs
                    .iter()
                    .any(|&j| j >= lo && needs[j - lo]);
        }

        let mut grads: Vec<Option<Var>> = vec![None; hi + 1 - lo];
        if needs[hi - lo] {
            let one = Tensor::full(&loss_shape, F::one());
            grads[hi - lo] = Some(self.leaf(one)?);
        }
        for i in (lo..=hi).rev() {
            if !needs[i - lo] || self.nodes[i].inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[i - lo] else { continue };
            let inputs = self.nodes[i].inputs.clone();
            let wanted: Vec<bool> = inputs.iter().map(|&j| j >= lo && needs[j - lo]).collect();
            let contributions = self.vjp(i, g, &wanted)?;
            for (&j, c) in inputs.iter().zip(contributions) {
                let Some(c) = c else { continue };
                let slot = &mut grads[j - lo];
                *slot = Some(match *slot {
                    Some(prev) => self.add(prev, c)?,
                    None => c,
                });
            }
        }

        wrt.iter()
            .map(|v| match grads.get(v.index - lo).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let shape = self.nodes[v.index].value.shape().to_vec();
                    self.leaf(Tensor::zeros(&shape))
                }
            })
            .collect()
    }

    fn var_at(&self, index: usize) -> Var {
        Var {
            index,
            serial: self.nodes[index].serial,
        }
    }

    /// Vector-Jacobian product of node `i` against cotangent `g`, recorded on
    /// the tape. Returns one entry per input; `None` where not wanted.
    fn vjp(&mut self, i: usize, g: Var, wanted: &[bool]) -> Result<Vec<Option<Var>>> {
        let op = self.nodes[i].op.clone();
        let inputs: Vec<Var> = self.nodes[i].inputs.iter().map(|&j| self.var_at(j)).collect();
        let out = self.var_at(i);
        let want = |k: usize| wanted[k];
        let mut res: Vec<Option<Var>> = vec![None; inputs.len()];
        match op {
            Op::Leaf => {}
            Op::Add => {
                res[0] = want(0).then_some(g);
                res[1] = want(1).then_some(g);
            }
            Op::Sub => {
                res[0] = want(0).then_some(g);
                if want(1) {
                    res[1] = Some(self.scale(g, -1.0)?);
                }
            }
            Op::Mul => {
                if want(0) {
                    res[0] = Some(self.mul(g, inputs[1])?);
                }
                if want(1) {
                    res[1] = Some(self.mul(g, inputs[0])?);
                }
            }
            Op::Scale(c) => res[0] = Some(self.scale(g, c)?),
            Op::Exp => res[0] = Some(self.mul(g, out)?),
            Op::PowOffset { offset, power } => {
                let d = self.pow_offset(inputs[0], offset, power - 1.0)?;
                let d = self.scale(d, power)?;
                res[0] = Some(self.mul(g, d)?);
            }
            Op::Relu => {
                let mask = self.nodes[inputs[0].index].value.relu_mask();
                let mask = self.leaf(mask)?;
                res[0] = Some(self.mul(g, mask)?);
            }
            Op::Matmul => {
                if want(0) {
                    let bt = self.transpose(inputs[1])?;
                    res[0] = Some(self.matmul(g, bt)?);
                }
                if want(1) {
                    let at = self.transpose(inputs[0])?;
                    res[1] = Some(self.matmul(at, g)?);
                }
            }
            Op::Transpose => res[0] = Some(self.transpose(g)?),
            Op::Reshape => {
                let shape = self.nodes[inputs[0].index].value.shape().to_vec();
                res[0] = Some(self.reshape(g, &shape)?);
            }
            Op::SumTo => {
                let shape = self.nodes[inputs[0].index].value.shape().to_vec();
                res[0] = Some(self.broadcast_to(g, &shape)?);
            }
            Op::BroadcastTo => {
                let shape = self.nodes[inputs[0].index].value.shape().to_vec();
                res[0] = Some(self.sum_to(g, &shape)?);
            }
            Op::Conv2d => {
                if want(0) {
                    res[0] = Some(self.conv2d_input_grad(g, inputs[1])?);
                }
                if want(1) {
                    let k = self.nodes[inputs[1].index].value.shape()[2];
                    res[1] = Some(self.conv2d_weight_grad(inputs[0], g, k)?);
                }
            }
            Op::Conv2dInputGrad => {
                // out = A(g0, w); <out, u> = <g0, conv(u, w)>
                if want(0) {
                    res[0] = Some(self.conv2d(g, inputs[1])?);
                }
                if want(1) {
                    let k = self.nodes[inputs[1].index].value.shape()[2];
                    res[1] = Some(self.conv2d_weight_grad(g, inputs[0], k)?);
                }
            }
            Op::Conv2dWeightGrad { .. } => {
                // out = B(x, g0); <out, u> = <g0, conv(x, u)>
                if want(0) {
                    res[0] = Some(self.conv2d_input_grad(inputs[1], g)?);
                }
                if want(1) {
                    res[1] = Some(self.conv2d(inputs[0], g)?);
                }
            }
            Op::AvgPool2 => {
                let s = self.nodes[inputs[0].index].value.shape().to_vec();
                res[0] = Some(self.unpool2(g, s[2], s[3])?);
            }
            Op::Unpool2 { .. } => res[0] = Some(self.avgpool2(g)?),
            Op::Shift { dy, dx } => res[0] = Some(self.shift2d(g, -dy, -dx)?),
            Op::FlipW => res[0] = Some(self.flip_w(g)?),
            Op::Gather(index) => {
                let rows = self.nodes[inputs[0].index].value.shape()[0];
                res[0] = Some(self.scatter_add_rows(g, &index, rows)?);
            }
            Op::ScatterAdd { index, .. } => res[0] = Some(self.gather_rows(g, &index)?),
            Op::LogSumExpRows => {
                let x = inputs[0];
                let shape = self.shape(x)?.to_vec();
                let shifted = self.sub_row_scalars(x, out)?;
                let probs = self.exp(shifted)?;
                let col = self.reshape(g, &[shape[0], 1])?;
                let wide = self.broadcast_to(col, &shape)?;
                res[0] = Some(self.mul(wide, probs)?);
            }
        }
        Ok(res)
    }
}
