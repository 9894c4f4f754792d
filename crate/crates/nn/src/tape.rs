//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its value and enough state to run
//! its backward rule. Node ids are assigned in creation order, so the tape is
//! topologically sorted by construction and backward is a single reverse scan.

use std::cell::RefCell;
use std::rc::Rc;

use crate::element::Element;
use crate::error::{NnError, Result};
use crate::tensor::Tensor;

enum Op<S> {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
        b_t: bool,
    },
    BatchMatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        b_t: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Sub {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    AddRow {
        x: usize,
        b: usize,
        cols: usize,
        sign: S,
    },
    Scale {
        x: usize,
        c: S,
    },
    Relu {
        x: usize,
    },
    Sigmoid {
        x: usize,
    },
    Sum {
        x: usize,
    },
    SumRows {
        x: usize,
        cols: usize,
    },
    RowNorm {
        x: usize,
        cols: usize,
    },
    Gather {
        x: usize,
        map: Rc<[u32]>,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        cols: usize,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    CausalSoftmax {
        x: usize,
        t: usize,
    },
    CrossEntropy {
        logits: usize,
        vocab: usize,
        targets: Rc<[Option<u32>]>,
        probs: Vec<S>,
        count: usize,
    },
    Reshape {
        x: usize,
    },
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    requires_grad: bool,
    op: Op<S>,
}

/// Recording context for one forward/backward computation.
pub struct Tape<S: Element = f32> {
    nodes: RefCell<Vec<Node<S>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Element = f32> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<'t, S: Element> std::fmt::Debug for Var<'t, S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var(#{} {:?})", self.id, self.shape())
    }
}

impl<S: Element> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<S: Element> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, value: Vec<S>, requires_grad: bool, op: Op<S>) -> Var<'_, S> {
        debug_assert_eq!(numel(&shape), value.len());
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Records a tensor as a leaf, honouring its `requires_grad` flag.
    pub fn leaf(&self, t: &Tensor) -> Var<'_, S> {
        let value = t.data().iter().map(|&v| S::of_f32(v)).collect();
        self.push(t.shape().to_vec(), value, t.requires_grad, Op::Leaf)
    }

    /// Records a tensor as a trainable leaf regardless of its flag.
    pub fn param(&self, t: &Tensor) -> Var<'_, S> {
        let value = t.data().iter().map(|&v| S::of_f32(v)).collect();
        self.push(t.shape().to_vec(), value, true, Op::Leaf)
    }

    /// Records a tensor as a constant.
    pub fn constant(&self, t: &Tensor) -> Var<'_, S> {
        let value = t.data().iter().map(|&v| S::of_f32(v)).collect();
        self.push(t.shape().to_vec(), value, false, Op::Leaf)
    }

    pub fn values(
        &self,
        shape: impl Into<Vec<usize>>,
        value: Vec<S>,
        requires_grad: bool,
    ) -> Result<Var<'_, S>> {
        let shape = shape.into();
        if numel(&shape) != value.len() {
            return Err(NnError::DataLength {
                len: value.len(),
                shape,
            });
        }
        Ok(self.push(shape, value, requires_grad, Op::Leaf))
    }

    pub fn scalar(&self, v: S) -> Var<'_, S> {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    /// Runs the backward pass from `output`. `seed` defaults to all ones.
    pub fn backward(&self, output: Var<'_, S>, seed: Option<&[S]>) -> Result<Gradients<S>> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(NnError::EmptyTape);
        }
        let out = &nodes[output.id];
        if !out.requires_grad {
            return Err(NnError::Detached);
        }
        let seed = match seed {
            Some(s) if s.len() != out.value.len() => {
                return Err(NnError::SeedShape {
                    seed: vec![s.len()],
                    output: out.shape.clone(),
                })
            }
            Some(s) => s.to_vec(),
            None => vec![S::one(); out.value.len()],
        };
        let mut grads: Vec<Option<Vec<S>>> = (0..nodes.len()).map(|_| None).collect();
        grads[output.id] = Some(seed);
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, node, &g, &mut grads);
        }
        let leaves = nodes
            .iter()
            .map(|n| n.requires_grad && matches!(n.op, Op::Leaf))
            .collect();
        let shapes = nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients {
            grads,
            leaves,
            shapes,
        })
    }
}

fn buf<S: Element>(grads: &mut [Option<Vec<S>>], id: usize, len: usize) -> &mut Vec<S> {
    grads[id].get_or_insert_with(|| vec![S::zero(); len])
}

/// Adds `g` (possibly reducing to a scalar) into the gradient of `id`.
fn accumulate<S: Element>(
    nodes: &[Node<S>],
    grads: &mut [Option<Vec<S>>],
    id: usize,
    g: impl Iterator<Item = S>,
    out_len: usize,
) {
    if !nodes[id].requires_grad {
        return;
    }
    let len = nodes[id].value.len();
    let dst = buf(grads, id, len);
    if len == 1 && out_len != 1 {
        let s = g.map(|v| v.as_f64()).sum::<f64>();
        dst[0] = dst[0] + S::of(s);
    } else {
        for (d, v) in dst.iter_mut().zip(g) {
            *d = *d + v;
        }
    }
}

fn broadcast<S: Element>(v: &[S], i: usize) -> S {
    if v.len() == 1 {
        v[0]
    } else {
        v[i]
    }
}

fn backward_node<S: Element>(
    nodes: &[Node<S>],
    node: &Node<S>,
    g: &[S],
    grads: &mut [Option<Vec<S>>],
) {
    let n_out = g.len();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n, b_t } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            if nodes[a].requires_grad {
                let da = buf(grads, a, m * k);
                // dA = dC · op(B)ᵀ
                S::gemm(m, n, k, g, false, bv, !b_t, da, true);
            }
            if nodes[b].requires_grad {
                let db = buf(grads, b, k * n);
                if b_t {
                    // B is [n×k]: dB = dCᵀ · A
                    S::gemm(n, m, k, g, true, av, false, db, true);
                } else {
                    // dB = Aᵀ · dC
                    S::gemm(k, m, n, av, true, g, false, db, true);
                }
            }
        }
        &Op::BatchMatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            b_t,
        } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            let (sa, sb, sc) = (m * k, k * n, m * n);
            if nodes[a].requires_grad {
                let da = buf(grads, a, batch * sa);
                for i in 0..batch {
                    S::gemm(
                        m,
                        n,
                        k,
                        &g[i * sc..],
                        false,
                        &bv[i * sb..],
                        !b_t,
                        &mut da[i * sa..],
                        true,
                    );
                }
            }
            if nodes[b].requires_grad {
                let db = buf(grads, b, batch * sb);
                for i in 0..batch {
                    if b_t {
                        S::gemm(n, m, k, &g[i * sc..], true, &av[i * sa..], false, &mut db[i * sb..], true);
                    } else {
                        S::gemm(k, m, n, &av[i * sa..], true, &g[i * sc..], false, &mut db[i * sb..], true);
                    }
                }
            }
        }
        &Op::Add { a, b } => {
            accumulate(nodes, grads, a, g.iter().copied(), n_out);
            accumulate(nodes, grads, b, g.iter().copied(), n_out);
        }
        &Op::Sub { a, b } => {
            accumulate(nodes, grads, a, g.iter().copied(), n_out);
            accumulate(nodes, grads, b, g.iter().map(|&v| -v), n_out);
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (&nodes[a].value, &nodes[b].value);
            accumulate(
                nodes,
                grads,
                a,
                g.iter().enumerate().map(|(i, &v)| v * broadcast(bv, i)),
                n_out,
            );
            accumulate(
                nodes,
                grads,
                b,
                g.iter().enumerate().map(|(i, &v)| v * broadcast(av, i)),
                n_out,
            );
        }
        &Op::AddRow { x, b, cols, sign } => {
            accumulate(nodes, grads, x, g.iter().copied(), n_out);
            if nodes[b].requires_grad {
                let db = buf(grads, b, cols);
                for row in g.chunks(cols) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + sign * v;
                    }
                }
            }
        }
        &Op::Scale { x, c } => accumulate(nodes, grads, x, g.iter().map(|&v| v * c), n_out),
        &Op::Relu { x } => {
            let xv = &nodes[x].value;
            accumulate(
                nodes,
                grads,
                x,
                g.iter()
                    .zip(xv)
                    .map(|(&v, &z)| if z > S::zero() { v } else { S::zero() }),
                n_out,
            );
        }
        &Op::Sigmoid { x } => {
            let y = &node.value;
            accumulate(
                nodes,
                grads,
                x,
                g.iter().zip(y).map(|(&v, &s)| v * s * (S::one() - s)),
                n_out,
            );
        }
        &Op::Sum { x } => {
            let len = nodes[x].value.len();
            accumulate(nodes, grads, x, std::iter::repeat_n(g[0], len), len);
        }
        &Op::SumRows { x, cols } => {
            let len = nodes[x].value.len();
            accumulate(nodes, grads, x, (0..len).map(|i| g[i % cols]), len);
        }
        &Op::RowNorm { x, cols } => {
            let xv = &nodes[x].value;
            let norms = &node.value;
            accumulate(
                nodes,
                grads,
                x,
                xv.iter().enumerate().map(|(i, &v)| {
                    let r = i / cols;
                    if norms[r] > S::zero() {
                        g[r] * v / norms[r]
                    } else {
                        S::zero()
                    }
                }),
                xv.len(),
            );
        }
        Op::Gather { x, map } => {
            let x = *x;
            if nodes[x].requires_grad {
                let dx = buf(grads, x, nodes[x].value.len());
                for (&src, &v) in map.iter().zip(g) {
                    dx[src as usize] = dx[src as usize] + v;
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            cols,
            xhat,
            rstd,
        } => {
            let (x, gain, bias, cols) = (*x, *gain, *bias, *cols);
            let gv = &nodes[gain].value;
            if nodes[x].requires_grad {
                let inv_n = S::one() / S::of(cols as f64);
                let dx = buf(grads, x, xhat.len());
                for (r, (grow, xrow)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                    let mut mean_d = S::zero();
                    let mut mean_dx = S::zero();
                    for j in 0..cols {
                        let d = grow[j] * gv[j];
                        mean_d = mean_d + d;
                        mean_dx = mean_dx + d * xrow[j];
                    }
                    mean_d = mean_d * inv_n;
                    mean_dx = mean_dx * inv_n;
                    for j in 0..cols {
                        let d = grow[j] * gv[j];
                        let idx = r * cols + j;
                        dx[idx] = dx[idx] + rstd[r] * (d - mean_d - xrow[j] * mean_dx);
                    }
                }
            }
            if nodes[gain].requires_grad {
                let dg = buf(grads, gain, cols);
                for (grow, xrow) in g.chunks(cols).zip(xhat.chunks(cols)) {
                    for j in 0..cols {
                        dg[j] = dg[j] + grow[j] * xrow[j];
                    }
                }
            }
            if nodes[bias].requires_grad {
                let db = buf(grads, bias, cols);
                for grow in g.chunks(cols) {
                    for j in 0..cols {
                        db[j] = db[j] + grow[j];
                    }
                }
            }
        }
        &Op::CausalSoftmax { x, t } => {
            if nodes[x].requires_grad {
                let y = &node.value;
                let dx = buf(grads, x, y.len());
                for (row_idx, (yrow, grow)) in y.chunks(t).zip(g.chunks(t)).enumerate() {
                    let i = row_idx % t;
                    let dot: S = (0..=i).map(|j| yrow[j] * grow[j]).sum();
                    let base = row_idx * t;
                    for j in 0..=i {
                        dx[base + j] = dx[base + j] + yrow[j] * (grow[j] - dot);
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            vocab,
            targets,
            probs,
            count,
        } => {
            let (logits, vocab, count) = (*logits, *vocab, *count);
            if nodes[logits].requires_grad && count > 0 {
                let scale = g[0] / S::of(count as f64);
                let dl = buf(grads, logits, probs.len());
                for (r, target) in targets.iter().enumerate() {
                    let Some(t) = *target else { continue };
                    for j in 0..vocab {
                        let onehot = if j == t as usize { S::one() } else { S::zero() };
                        let idx = r * vocab + j;
                        dl[idx] = dl[idx] + scale * (probs[idx] - onehot);
                    }
                }
            }
        }
        &Op::Reshape { x } => accumulate(nodes, grads, x, g.iter().copied(), n_out),
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<S: Element = f32> {
    grads: Vec<Option<Vec<S>>>,
    leaves: Vec<bool>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Element> Gradients<S> {
    /// Gradient with respect to `v`. Trainable leaves that did not take part
    /// in the computation get zeros; non-trainable values get `None`.
    pub fn wrt(&self, v: Var<'_, S>) -> Option<Vec<S>> {
        match &self.grads[v.id] {
            Some(g) => Some(g.clone()),
            None if self.leaves[v.id] => Some(vec![S::zero(); numel(&self.shapes[v.id])]),
            None => None,
        }
    }

    pub fn tensor(&self, v: Var<'_, S>) -> Option<Tensor> {
        let g = self.wrt(v)?;
        let data = g.into_iter().map(S::as_f32).collect();
        Tensor::new(self.shapes[v.id].clone(), data).ok()
    }

    /// Adds the gradient of `v` into `t.grad`.
    pub fn accumulate_into(&self, v: Var<'_, S>, t: &mut Tensor) -> Result<()> {
        let g = self.wrt(v).ok_or(NnError::Detached)?;
        if g.len() != t.len() {
            return Err(NnError::Shape {
                op: "accumulate_into",
                lhs: self.shapes[v.id].clone(),
                rhs: t.shape().to_vec(),
            });
        }
        match t.grad_mut() {
            Some(dst) => dst.iter_mut().zip(&g).for_each(|(d, &v)| *d += v.as_f32()),
            None => t.set_grad(g.into_iter().map(S::as_f32).collect())?,
        }
        Ok(())
    }
}

impl<'t, S: Element> Var<'t, S> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn value(&self) -> Vec<S> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&[S]) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> S {
        self.tape.nodes.borrow()[self.id].value[0]
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        let data = n.value.iter().map(|v| v.as_f32()).collect();
        Tensor::new(n.shape.clone(), data).expect("node shape consistent")
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape()[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(NnError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.shape()[..] {
            [b, r, c] => Ok((b, r, c)),
            ref s => Err(NnError::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn unary(&self, shape: Vec<usize>, value: Vec<S>, op: Op<S>) -> Var<'t, S> {
        let rg = self.requires_grad();
        self.tape.push(shape, value, rg, op)
    }

    fn mm(self, other: Var<'t, S>, b_t: bool) -> Result<Var<'t, S>> {
        let (m, k) = self.dims2("matmul")?;
        let (r, c) = other.dims2("matmul")?;
        let (kb, n) = if b_t { (c, r) } else { (r, c) };
        if k != kb {
            return Err(NnError::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: other.shape(),
            });
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let mut out = vec![S::zero(); m * n];
            S::gemm(m, k, n, &nodes[self.id].value, false, &nodes[other.id].value, b_t, &mut out, false);
            out
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            vec![m, n],
            value,
            rg,
            Op::MatMul {
                a: self.id,
                b: other.id,
                m,
                k,
                n,
                b_t,
            },
        ))
    }

    /// `self · other` for `[m×k]·[k×n]`.
    pub fn matmul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.mm(other, false)
    }

    /// `self · otherᵀ` for `[m×k]·[n×k]ᵀ`.
    pub fn matmul_t(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.mm(other, true)
    }

    fn bmm_impl(self, other: Var<'t, S>, b_t: bool) -> Result<Var<'t, S>> {
        let (batch, m, k) = self.dims3("bmm")?;
        let (bb, r, c) = other.dims3("bmm")?;
        let (kb, n) = if b_t { (c, r) } else { (r, c) };
        if batch != bb || k != kb {
            return Err(NnError::Shape {
                op: "bmm",
                lhs: self.shape(),
                rhs: other.shape(),
            });
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (av, bv) = (&nodes[self.id].value, &nodes[other.id].value);
            let mut out = vec![S::zero(); batch * m * n];
            for i in 0..batch {
                S::gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..],
                    false,
                    &bv[i * k * n..],
                    b_t,
                    &mut out[i * m * n..],
                    false,
                );
            }
            out
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(
            vec![batch, m, n],
            value,
            rg,
            Op::BatchMatMul {
                a: self.id,
                b: other.id,
                batch,
                m,
                k,
                n,
                b_t,
            },
        ))
    }

    /// Batched `[b×m×k]·[b×k×n]`.
    pub fn bmm(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.bmm_impl(other, false)
    }

    /// Batched `[b×m×k]·[b×n×k]ᵀ`.
    pub fn bmm_t(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.bmm_impl(other, true)
    }

    fn binary(
        self,
        other: Var<'t, S>,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: fn(usize, usize) -> Op<S>,
    ) -> Result<Var<'t, S>> {
        let (sa, sb) = (self.shape(), other.shape());
        let (la, lb) = (numel(&sa), numel(&sb));
        let shape = if sa == sb || lb == 1 {
            sa.clone()
        } else if la == 1 {
            sb.clone()
        } else {
            return Err(NnError::Shape {
                op: name,
                lhs: sa,
                rhs: sb,
            });
        };
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (av, bv) = (&nodes[self.id].value, &nodes[other.id].value);
            (0..numel(&shape))
                .map(|i| f(broadcast(av, i), broadcast(bv, i)))
                .collect()
        };
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(shape, value, rg, op(self.id, other.id)))
    }

    pub fn add(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "add", |a, b| a + b, |a, b| Op::Add { a, b })
    }

    pub fn sub(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "sub", |a, b| a - b, |a, b| Op::Sub { a, b })
    }

    pub fn mul(self, other: Var<'t, S>) -> Result<Var<'t, S>> {
        self.binary(other, "mul", |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    fn row_op(self, bias: Var<'t, S>, sign: S) -> Result<Var<'t, S>> {
        let shape = self.shape();
        let cols = *shape.last().unwrap_or(&0);
        if bias.len() != cols {
            return Err(NnError::Shape {
                op: "add_row",
                lhs: shape,
                rhs: bias.shape(),
            });
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let bv = &nodes[bias.id].value;
            nodes[self.id]
                .value
                .iter()
                .enumerate()
                .map(|(i, &v)| v + sign * bv[i % cols])
                .collect()
        };
        let rg = self.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            shape,
            value,
            rg,
            Op::AddRow {
                x: self.id,
                b: bias.id,
                cols,
                sign,
            },
        ))
    }

    /// Adds a row vector to every row.
    pub fn add_row(self, bias: Var<'t, S>) -> Result<Var<'t, S>> {
        self.row_op(bias, S::one())
    }

    /// Subtracts a row vector from every row.
    pub fn sub_row(self, bias: Var<'t, S>) -> Result<Var<'t, S>> {
        self.row_op(bias, -S::one())
    }

    pub fn scale(self, c: S) -> Var<'t, S> {
        let value = self.with_value(|v| v.iter().map(|&x| x * c).collect());
        self.unary(self.shape(), value, Op::Scale { x: self.id, c })
    }

    pub fn relu(self) -> Var<'t, S> {
        let value = self.with_value(|v| v.iter().map(|&x| x.max(S::zero())).collect());
        self.unary(self.shape(), value, Op::Relu { x: self.id })
    }

    pub fn sigmoid(self) -> Var<'t, S> {
        let value = self.with_value(|v| {
            v.iter()
                .map(|&x| S::one() / (S::one() + (-x).exp()))
                .collect()
        });
        self.unary(self.shape(), value, Op::Sigmoid { x: self.id })
    }

    /// Step function `1[x > 0]`. The result is a constant: no gradient flows
    /// back through it.
    pub fn heaviside(self) -> Var<'t, S> {
        let value = self.with_value(|v| {
            v.iter()
                .map(|&x| if x > S::zero() { S::one() } else { S::zero() })
                .collect()
        });
        self.tape.push(self.shape(), value, false, Op::Leaf)
    }

    /// Constant copy that blocks gradient flow.
    pub fn detach(self) -> Var<'t, S> {
        self.tape.push(self.shape(), self.value(), false, Op::Leaf)
    }

    /// Applies a non-differentiable transformation; the result is a constant.
    pub fn map_detached(self, f: impl FnOnce(&[S]) -> Vec<S>) -> Result<Var<'t, S>> {
        let value = self.with_value(f);
        if value.len() != self.len() {
            return Err(NnError::Shape {
                op: "map_detached",
                lhs: self.shape(),
                rhs: vec![value.len()],
            });
        }
        Ok(self.tape.push(self.shape(), value, false, Op::Leaf))
    }

    pub fn sum(self) -> Var<'t, S> {
        let s = self.with_value(|v| v.iter().map(|x| x.as_f64()).sum::<f64>());
        self.unary(vec![1], vec![S::of(s)], Op::Sum { x: self.id })
    }

    pub fn mean(self) -> Var<'t, S> {
        let n = self.len().max(1);
        self.sum().scale(S::one() / S::of(n as f64))
    }

    /// Column sums of a matrix: `[r×c] → [c]`.
    pub fn sum_rows(self) -> Result<Var<'t, S>> {
        let (_, cols) = self.dims2("sum_rows")?;
        let value = self.with_value(|v| {
            let mut out = vec![0.0f64; cols];
            for row in v.chunks(cols) {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x.as_f64();
                }
            }
            out.into_iter().map(S::of).collect()
        });
        Ok(self.unary(vec![cols], value, Op::SumRows { x: self.id, cols }))
    }

    /// Euclidean norm of every row: `[r×c] → [r]`.
    pub fn row_norms(self) -> Result<Var<'t, S>> {
        let (rows, cols) = self.dims2("row_norms")?;
        let value = self.with_value(|v| {
            v.chunks(cols)
                .map(|row| S::of(row.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt()))
                .collect()
        });
        Ok(self.unary(vec![rows], value, Op::RowNorm { x: self.id, cols }))
    }

    /// `out[i] = self[map[i]]` over the flattened data, reshaped to `shape`.
    pub fn gather(self, map: Rc<[u32]>, shape: impl Into<Vec<usize>>) -> Result<Var<'t, S>> {
        let shape = shape.into();
        if numel(&shape) != map.len() {
            return Err(NnError::DataLength {
                len: map.len(),
                shape,
            });
        }
        let len = self.len();
        if let Some(&bad) = map.iter().find(|&&i| i as usize >= len) {
            return Err(NnError::Invalid(format!("gather index {bad} out of range {len}")));
        }
        let value = self.with_value(|v| map.iter().map(|&i| v[i as usize]).collect());
        Ok(self.unary(shape, value, Op::Gather { x: self.id, map }))
    }

    /// Rows of a `[v×d]` table selected by `ids`.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t, S>> {
        let (v, d) = self.dims2("gather_rows")?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(NnError::Invalid(format!("row {bad} out of range {v}")));
        }
        let map: Rc<[u32]> = ids
            .iter()
            .flat_map(|&i| (0..d).map(move |j| (i * d + j) as u32))
            .collect();
        self.gather(map, vec![ids.len(), d])
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, S>> {
        let shape = shape.into();
        if numel(&shape) != self.len() {
            return Err(NnError::Shape {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape,
            });
        }
        Ok(self.unary(shape, self.value(), Op::Reshape { x: self.id }))
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(self, gain: Var<'t, S>, bias: Var<'t, S>, eps: f64) -> Result<Var<'t, S>> {
        let shape = self.shape();
        let cols = *shape.last().unwrap_or(&0);
        if gain.len() != cols || bias.len() != cols || cols == 0 {
            return Err(NnError::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: gain.shape(),
            });
        }
        let (value, xhat, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let (xv, gv, bv) = (
                &nodes[self.id].value,
                &nodes[gain.id].value,
                &nodes[bias.id].value,
            );
            let mut value = Vec::with_capacity(xv.len());
            let mut xhat = Vec::with_capacity(xv.len());
            let mut rstd = Vec::with_capacity(xv.len() / cols);
            for row in xv.chunks(cols) {
                let mean = row.iter().map(|x| x.as_f64()).sum::<f64>() / cols as f64;
                let var = row.iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / cols as f64;
                let r = 1.0 / (var + eps).sqrt();
                rstd.push(S::of(r));
                for (j, &x) in row.iter().enumerate() {
                    let h = S::of((x.as_f64() - mean) * r);
                    xhat.push(h);
                    value.push(h * gv[j] + bv[j]);
                }
            }
            (value, xhat, rstd)
        };
        let rg = self.requires_grad() || gain.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            shape,
            value,
            rg,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                cols,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax over the last axis of `[..., t, t]` score blocks with entries
    /// above the diagonal masked out.
    pub fn causal_softmax(self) -> Result<Var<'t, S>> {
        let shape = self.shape();
        let n = shape.len();
        if n < 2 || shape[n - 1] != shape[n - 2] {
            return Err(NnError::Shape {
                op: "causal_softmax",
                lhs: shape,
                rhs: vec![],
            });
        }
        let t = shape[n - 1];
        let value = self.with_value(|v| {
            let mut out = vec![S::zero(); v.len()];
            for (row_idx, (row, o)) in v.chunks(t).zip(out.chunks_mut(t)).enumerate() {
                let i = row_idx % t;
                let max = row[..=i].iter().fold(S::neg_infinity(), |a, &b| a.max(b));
                let mut z = S::zero();
                for j in 0..=i {
                    o[j] = (row[j] - max).exp();
                    z = z + o[j];
                }
                for oj in o[..=i].iter_mut() {
                    *oj = *oj / z;
                }
            }
            out
        });
        Ok(self.unary(shape, value, Op::CausalSoftmax { x: self.id, t }))
    }

    /// Mean next-token cross-entropy over rows with a target.
    pub fn cross_entropy(self, targets: Rc<[Option<u32>]>) -> Result<Var<'t, S>> {
        let (rows, vocab) = self.dims2("cross_entropy")?;
        if targets.len() != rows {
            return Err(NnError::Shape {
                op: "cross_entropy",
                lhs: vec![rows, vocab],
                rhs: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t as usize >= vocab) {
            return Err(NnError::Invalid(format!("target {bad} out of vocab {vocab}")));
        }
        let (loss, probs, count) = self.with_value(|v| {
            let mut probs = vec![S::zero(); v.len()];
            let mut total = 0.0f64;
            let mut count = 0usize;
            for (r, (row, p)) in v.chunks(vocab).zip(probs.chunks_mut(vocab)).enumerate() {
                let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
                let mut z = S::zero();
                for (pj, &x) in p.iter_mut().zip(row) {
                    *pj = (x - max).exp();
                    z = z + *pj;
                }
                for pj in p.iter_mut() {
                    *pj = *pj / z;
                }
                if let Some(t) = targets[r] {
                    let logp = (row[t as usize] - max).as_f64() - z.as_f64().ln();
                    total -= logp;
                    count += 1;
                }
            }
            let loss = if count > 0 { total / count as f64 } else { 0.0 };
            (loss, probs, count)
        });
        Ok(self.unary(
            vec![1],
            vec![S::of(loss)],
            Op::CrossEntropy {
                logits: self.id,
                vocab,
                targets,
                probs,
                count,
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let tape = Tape::<f32>::new();
        let id = tape.constant(&t(&[2, 2], &[1., 0., 0., 1.]));
        let b = tape.constant(&t(&[2, 2], &[5., 6., 7., 8.]));
        assert_eq!(id.matmul(b).unwrap().value(), vec![5., 6., 7., 8.]);
        let r = tape.constant(&t(&[1, 2], &[1., 2.]));
        let c = tape.constant(&t(&[2, 1], &[3., 4.]));
        assert_eq!(r.matmul(c).unwrap().value(), vec![11.]);
        let z = tape.constant(&Tensor::zeros([3, 2]));
        assert!(z.matmul(b).unwrap().value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(&Tensor::zeros([2, 3]));
        let b = tape.constant(&Tensor::zeros([2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(&t(&[3], &[-1., 0., 2.]));
        assert_eq!(x.relu().value(), vec![0., 0., 2.]);
        let h = tape.constant(&t(&[3], &[-0.5, 0., 0.3]));
        assert_eq!(h.heaviside().value(), vec![0., 0., 1.]);
        let z = tape.constant(&t(&[1], &[0.]));
        assert_eq!(z.sigmoid().value(), vec![0.5]);
        let bad = tape.constant(&Tensor::zeros([2]));
        assert!(x.add(bad).is_err());
    }

    #[test]
    fn linear_gradient() {
        let tape = Tape::<f32>::new();
        let w = tape.constant(&t(&[1, 2], &[2., 3.]));
        let x = tape.param(&t(&[2, 1], &[1., 1.]));
        let f = w.matmul(x).unwrap();
        let g = tape.backward(f, None).unwrap();
        assert_eq!(g.wrt(x).unwrap(), vec![2., 3.]);
    }

    #[test]
    fn square_gradient() {
        let tape = Tape::<f32>::new();
        let x = tape.param(&Tensor::scalar(3.0));
        let f = x.mul(x).unwrap();
        assert_eq!(tape.backward(f, None).unwrap().wrt(x).unwrap(), vec![6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f32>::new();
        let x = tape.param(&Tensor::scalar(1.5));
        let f = x.add(x).unwrap();
        assert_eq!(tape.backward(f, None).unwrap().wrt(x).unwrap(), vec![2.0]);
    }

    #[test]
    fn composite_relu_matches_finite_difference() {
        // f(x) = relu(2x - 1) at x = 1; oracle: central difference with eps 1e-4
        let f = |x: f64| (2.0 * x - 1.0).max(0.0);
        let eps = 1e-4;
        let numeric = (f(1.0 + eps) - f(1.0 - eps)) / (2.0 * eps);
        let tape = Tape::<f32>::new();
        let x = tape.param(&Tensor::scalar(1.0));
        let one = tape.scalar(1.0);
        let y = x.scale(2.0).sub(one).unwrap().relu();
        let g = tape.backward(y, None).unwrap().wrt(x).unwrap();
        assert!((f64::from(g[0]) - numeric).abs() < 1e-6);
        assert_eq!(g[0], 2.0);
    }

    #[test]
    fn non_participating_leaf_gets_zero() {
        let tape = Tape::<f32>::new();
        let x = tape.param(&Tensor::scalar(2.0));
        let unused = tape.param(&Tensor::zeros([3]));
        let f = x.mul(x).unwrap();
        let g = tape.backward(f, None).unwrap();
        assert_eq!(g.wrt(unused).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn backward_errors() {
        let tape = Tape::<f32>::new();
        let c = tape.constant(&Tensor::scalar(1.0));
        assert!(matches!(tape.backward(c, None), Err(NnError::Detached)));
        let x = tape.param(&Tensor::zeros([2]));
        let y = x.relu();
        assert!(matches!(
            tape.backward(y, Some(&[1.0])),
            Err(NnError::SeedShape { .. })
        ));
        let empty = Tape::<f32>::new();
        let other = Tape::<f32>::new();
        let v = other.param(&Tensor::scalar(1.0));
        // a var from another tape cannot be used here; emptiness is checked first
        assert!(matches!(
            empty.backward(Var { tape: &empty, id: v.id }, None),
            Err(NnError::EmptyTape)
        ));
    }

    #[test]
    fn heaviside_blocks_gradient() {
        let tape = Tape::<f32>::new();
        let x = tape.param(&t(&[2], &[0.5, -0.5]));
        let h = x.heaviside();
        let f = h.mul(x).unwrap().sum();
        let g = tape.backward(f, None).unwrap().wrt(x).unwrap();
        // only the direct path: d/dx (H(x)·x) with H treated as constant
        assert_eq!(g, vec![1.0, 0.0]);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let tape = Tape::<f32>::new();
        let s = tape.constant(&t(&[2, 2], &[1., 5., 2., 2.]));
        let p = s.causal_softmax().unwrap().value();
        assert_eq!(p[0], 1.0);
        assert_eq!(p[1], 0.0);
        assert!((p[2] - 0.5).abs() < 1e-6 && (p[3] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_uniform() {
        let tape = Tape::<f32>::new();
        let l = tape.param(&Tensor::zeros([2, 4]));
        let loss = l.cross_entropy(Rc::from(vec![Some(1), None])).unwrap();
        assert!((loss.item() - 4f32.ln()).abs() < 1e-6);
        let g = tape.backward(loss, None).unwrap().wrt(l).unwrap();
        assert!((g[1] + 0.75).abs() < 1e-6 && (g[0] - 0.25).abs() < 1e-6);
        assert!(g[4..].iter().all(|&v| v == 0.0));
    }
}
