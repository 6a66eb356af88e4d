//! Reverse-mode differentiation over a flat, append-only tape.
//!
//! Every operation appends a node holding its forward value; parents always
//! have smaller ids than their children, so a single descending sweep visits
//! each node once during [`Tape::backward`].

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// How per-example cross-entropy terms are combined into the scalar loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug)]
enum Op {
    Input,
    Constant,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Clip {
        x: usize,
        lo: f64,
        hi: f64,
    },
    MaxPool {
        x: usize,
        argmax: Vec<usize>,
    },
    Reshape(usize),
    Dense {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv {
        x: usize,
        k: usize,
        b: usize,
        stride: usize,
        padding: usize,
        cols: Vec<f64>,
    },
    Sum(usize),
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
        reduction: Reduction,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Records a computation for later differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every differentiable input.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn input(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            value,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf treated as a fixed value.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Constant,
            value,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(Op::Add(a.0, b.0), v, &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(Op::Sub(a.0, b.0), v, &[a.0, b.0]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(Op::Mul(a.0, b.0), v, &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a.0, factor), v, &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(relu);
        self.push(Op::Relu(a.0), v, &[a.0])
    }

    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::contract(format!("clip bounds reversed: {lo} > {hi}")));
        }
        let v = self.value(a).map(|x| clip(x, lo, hi));
        Ok(self.push(Op::Clip { x: a.0, lo, hi }, v, &[a.0]))
    }

    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let (v, argmax) = kernels::max_pool2(self.value(a))?;
        Ok(self.push(Op::MaxPool { x: a.0, argmax }, v, &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(dims)?;
        Ok(self.push(Op::Reshape(a.0), v, &[a.0]))
    }

    /// Collapse everything after the leading axis: `[N, ...] → [N, D]`.
    pub fn flatten(&mut self, a: Var) -> Result<Var> {
        let (n, d) = self.value(a).outer_split()?;
        self.reshape(a, &[n, d])
    }

    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let v = kernels::dense(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(Op::Dense { x: x.0, w: w.0, b: b.0 }, v, &[x.0, w.0, b.0]))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let (v, cols) = kernels::conv2d(self.value(x), self.value(k), self.value(b), stride, padding, true)?;
        let op = Op::Conv {
            x: x.0,
            k: k.0,
            b: b.0,
            stride,
            padding,
            cols: cols.unwrap_or_default(),
        };
        Ok(self.push(op, v, &[x.0, k.0, b.0]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum(a.0), Tensor::scalar(total), &[a.0])
    }

    /// Softmax cross-entropy of `[N, K]` logits against `labels`, reduced to
    /// a scalar.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize], reduction: Reduction) -> Result<Var> {
        let (losses, probs) = kernels::cross_entropy_rows(self.value(logits), labels)?;
        let total: f64 = losses.iter().sum();
        let value = match reduction {
            Reduction::Sum => total,
            Reduction::Mean => total / losses.len().max(1) as f64,
        };
        let op = Op::CrossEntropy {
            logits: logits.0,
            labels: labels.to_vec(),
            probs,
            reduction,
        };
        Ok(self.push(op, Tensor::scalar(value), &[logits.0]))
    }

    /// Gradients of the scalar `root` with respect to every [`Tape::input`]
    /// leaf. Contributions to a node are summed in ascending id of the node
    /// that produced them.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar root, got dims {:?}",
                root_value.dims()
            )));
        }
        let mut pending: Vec<Vec<Tensor>> = (0..self.nodes.len()).map(|_| Vec::new()).collect();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        pending[root.0].push(Tensor::full(root_value.dims(), 1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = accumulate(std::mem::take(&mut pending[id])) else {
                if matches!(node.op, Op::Input) {
                    grads[id] = Some(Tensor::zeros(node.value.dims()));
                }
                continue;
            };
            if matches!(node.op, Op::Input) {
                grads[id] = Some(g);
                continue;
            }
            for (parent, contribution) in self.local_grads(&node.op, &g)? {
                pending[parent].push(contribution);
            }
        }
        for (id, node) in self.nodes.iter().enumerate().skip(root.0 + 1) {
            if matches!(node.op, Op::Input) {
                grads[id] = Some(Tensor::zeros(node.value.dims()));
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, id: usize) -> bool {
        self.nodes[id].needs_grad
    }

    fn local_grads(&self, op: &Op, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let val = |id: usize| &self.nodes[id].value;
        let mut out = Vec::with_capacity(3);
        match op {
            Op::Input | Op::Constant => {}
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if self.wants(p) {
                        out.push((p, g.clone()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.zip_map(val(*b), |gv, y| gv * y)?));
                }
                if self.wants(*b) {
                    out.push((*b, g.zip_map(val(*a), |gv, x| gv * x)?));
                }
            }
            Op::Scale(a, s) => out.push((*a, g.map(|v| v * s))),
            Op::Relu(a) => {
                out.push((*a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?));
            }
            Op::Clip { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                out.push((
                    *x,
                    g.zip_map(val(*x), |gv, v| if v >= lo && v <= hi { gv } else { 0.0 })?,
                ));
            }
            Op::MaxPool { x, argmax } => {
                let mut d = Tensor::zeros(val(*x).dims());
                let dd = d.data_mut();
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    dd[src] += gv;
                }
                out.push((*x, d));
            }
            Op::Reshape(a) => out.push((*a, g.clone().reshape(val(*a).dims())?)),
            Op::Dense { x, w, b } => {
                let want_params = self.wants(*w) || self.wants(*b);
                let (dx, dw, db) = kernels::dense_backward(val(*x), val(*w), g, self.wants(*x), want_params)?;
                push_some(&mut out, *x, dx, self.wants(*x));
                push_some(&mut out, *w, dw, self.wants(*w));
                push_some(&mut out, *b, db, self.wants(*b));
            }
            Op::Conv {
                x,
                k,
                b,
                stride,
                padding,
                cols,
            } => {
                let want_params = self.wants(*k) || self.wants(*b);
                let (dx, dk, db) = kernels::conv2d_backward(
                    val(*x).dims(),
                    val(*k),
                    *stride,
                    *padding,
                    cols,
                    g,
                    self.wants(*x),
                    want_params,
                )?;
                push_some(&mut out, *x, dx, self.wants(*x));
                push_some(&mut out, *k, dk, self.wants(*k));
                push_some(&mut out, *b, db, self.wants(*b));
            }
            Op::Sum(a) => out.push((*a, Tensor::full(val(*a).dims(), g.item()?))),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                reduction,
            } => {
                let dims = val(*logits).dims();
                let k = dims[1];
                let scale = match reduction {
                    Reduction::Sum => g.item()?,
                    Reduction::Mean => g.item()? / labels.len().max(1) as f64,
                };
                let mut d = probs.clone();
                for (row, &label) in d.chunks_mut(k).zip(labels) {
                    row[label] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                out.push((*logits, Tensor::new(dims.to_vec(), d)?));
            }
        }
        Ok(out)
    }
}

fn push_some(out: &mut Vec<(usize, Tensor)>, id: usize, t: Option<Tensor>, wanted: bool) {
    if let (true, Some(t)) = (wanted, t) {
        out.push((id, t));
    }
}

/// Sum contributions in ascending producer id. They were pushed while the
/// sweep descended, so the list is in reverse.
fn accumulate(mut parts: Vec<Tensor>) -> Option<Tensor> {
    let mut acc = parts.pop()?;
    while let Some(next) = parts.pop() {
        for (a, b) in acc.data_mut().iter_mut().zip(next.data()) {
            *a += b;
        }
    }
    Some(acc)
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// `min(hi, max(lo, x))`.
#[inline]
pub fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    hi.min(lo.max(x))
}
