use std::cell::RefCell;
use std::collections::BTreeMap;

use super::kernels::{self, ConvGeom};
use super::ops::Unary;
use super::Tensor;
use crate::error::{Error, Result};

/// Recorded operation with everything its backward rule needs.
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
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
    Scale {
        a: usize,
        factor: f32,
    },
    Unary {
        a: usize,
        kind: Unary,
    },
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        outer: usize,
        len: usize,
        inner: usize,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    Conv2d {
        x: usize,
        w: usize,
        bias: Option<usize>,
        geom: ConvGeom,
        c_out: usize,
        cols: Vec<f32>,
    },
    Reshape {
        a: usize,
    },
    Narrow {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
        start: usize,
        width: usize,
    },
    Concat {
        parts: Vec<(usize, usize)>,
        outer: usize,
        inner: usize,
        total: usize,
    },
    Sum {
        a: usize,
    },
    MeanAxis {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    GatherRows {
        table: usize,
        ids: Vec<usize>,
        width: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f32>,
        classes: usize,
    },
    GaussLogMap {
        center: usize,
        scale: usize,
        grid_h: usize,
        grid_w: usize,
        lambda: f32,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Append-only record of executed operations.
///
/// Node ids grow with execution order, so reverse id order is a valid
/// topological order for backpropagation and every node is visited once.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: RefCell<Vec<Node>>,
    grads: RefCell<BTreeMap<usize, Vec<f32>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Trainable input: gradients are accumulated for it by [`Tape::backward`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
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

    /// Scans every recorded value for NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        let nodes = self.nodes.borrow();
        match nodes.iter().position(|n| !n.value.all_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!("non-finite value at tape node {i}"))),
        }
    }

    /// Clears accumulated leaf gradients.
    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Backpropagates from a scalar; leaf gradients accumulate across calls.
    pub fn backward(&self, loss: Var<'_>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..=loss.id).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let mut store = self.grads.borrow_mut();
                match store.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&gout).for_each(|(a, g)| *a += g),
                    None => {
                        store.insert(id, gout);
                    }
                }
                continue;
            }
            propagate(&nodes, node, &gout, &mut grads);
        }
        Ok(())
    }

    pub(crate) fn grad_of(&self, id: usize) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(&id)?;
        let shape = self.nodes.borrow()[id].value.shape().to_vec();
        Some(Tensor::new(&shape, g.clone()).expect("gradient matches node shape"))
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    /// Single element of a one-element tensor.
    pub fn item(&self) -> f32 {
        self.with_value(|t| t.data()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Accumulated gradient of a leaf, if any has reached it.
    pub fn grad(&self) -> Option<Tensor> {
        self.tape.grad_of(self.id)
    }
}

fn wants(nodes: &[Node], id: usize) -> bool {
    nodes[id].requires_grad
}

fn slot<'g>(grads: &'g mut [Option<Vec<f32>>], nodes: &[Node], id: usize) -> &'g mut Vec<f32> {
    grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()])
}

/// Adds `g` (shaped like the op output) into the gradient of `id`, summing
/// over repeats when `id` was broadcast.
fn accumulate_broadcast(grads: &mut [Option<Vec<f32>>], nodes: &[Node], id: usize, g: &[f32]) {
    let dst = slot(grads, nodes, id);
    let n = dst.len();
    if n == g.len() {
        dst.iter_mut().zip(g).for_each(|(d, v)| *d += v);
    } else {
        for (i, v) in g.iter().enumerate() {
            dst[i % n] += v;
        }
    }
}

fn propagate(nodes: &[Node], node: &Node, gout: &[f32], grads: &mut [Option<Vec<f32>>]) {
    let val = |id: usize| nodes[id].value.data();
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul { a, b, m, k, n } => {
            if wants(nodes, a) {
                // dA = G · Bᵀ
                let bv = val(b);
                kernels::gemm(m, n, k, gout, false, bv, true, slot(grads, nodes, a), true);
            }
            if wants(nodes, b) {
                // dB = Aᵀ · G
                let av = val(a);
                kernels::gemm(k, m, n, av, true, gout, false, slot(grads, nodes, b), true);
            }
        }
        &Op::Transpose { a, rows, cols } => {
            if wants(nodes, a) {
                let dst = slot(grads, nodes, a);
                for r in 0..rows {
                    for c in 0..cols {
                        dst[r * cols + c] += gout[c * rows + r];
                    }
                }
            }
        }
        &Op::Add { a, b } => {
            if wants(nodes, a) {
                accumulate_broadcast(grads, nodes, a, gout);
            }
            if wants(nodes, b) {
                accumulate_broadcast(grads, nodes, b, gout);
            }
        }
        &Op::Sub { a, b } => {
            if wants(nodes, a) {
                accumulate_broadcast(grads, nodes, a, gout);
            }
            if wants(nodes, b) {
                let neg: Vec<f32> = gout.iter().map(|g| -g).collect();
                accumulate_broadcast(grads, nodes, b, &neg);
            }
        }
        &Op::Mul { a, b } => {
            let (av, bv) = (val(a), val(b));
            if wants(nodes, a) {
                let nb = bv.len();
                let g: Vec<f32> = gout.iter().enumerate().map(|(i, g)| g * bv[i % nb]).collect();
                accumulate_broadcast(grads, nodes, a, &g);
            }
            if wants(nodes, b) {
                let g: Vec<f32> = gout.iter().zip(av).map(|(g, x)| g * x).collect();
                accumulate_broadcast(grads, nodes, b, &g);
            }
        }
        &Op::Scale { a, factor } => {
            if wants(nodes, a) {
                let dst = slot(grads, nodes, a);
                dst.iter_mut().zip(gout).for_each(|(d, g)| *d += g * factor);
            }
        }
        &Op::Unary { a, kind } => {
            if wants(nodes, a) {
                let x = val(a);
                let y = node.value.data();
                let dst = slot(grads, nodes, a);
                for i in 0..dst.len() {
                    dst[i] += gout[i] * kind.derivative(x[i], y[i]);
                }
            }
        }
        &Op::Softmax {
            a,
            outer,
            len,
            inner,
        } => {
            if wants(nodes, a) {
                let y = node.value.data();
                let dst = slot(grads, nodes, a);
                kernels::softmax_backward(y, gout, outer, len, inner, dst);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            outer,
            len,
            inner,
            mean,
            rstd,
        } => {
            let (x, gamma, beta) = (*x, *gamma, *beta);
            let mut gx = wants(nodes, x).then(|| vec![0.0; nodes[x].value.numel()]);
            let mut gg = wants(nodes, gamma).then(|| vec![0.0; *len]);
            let mut gb = wants(nodes, beta).then(|| vec![0.0; *len]);
            kernels::layernorm_backward(
                val(x),
                val(gamma),
                mean,
                rstd,
                gout,
                *outer,
                *len,
                *inner,
                gx.as_deref_mut(),
                gg.as_deref_mut(),
                gb.as_deref_mut(),
            );
            for (id, g) in [(x, gx), (gamma, gg), (beta, gb)] {
                if let Some(g) = g {
                    accumulate_broadcast(grads, nodes, id, &g);
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            bias,
            geom,
            c_out,
            cols,
        } => {
            let (x, w) = (*x, *w);
            let (rows, ncols) = (geom.col_rows(), geom.col_cols());
            if wants(nodes, w) {
                // dW = G · colsᵀ
                kernels::gemm(*c_out, ncols, rows, gout, false, cols, true, slot(grads, nodes, w), true);
            }
            if let Some(b) = *bias {
                if wants(nodes, b) {
                    let dst = slot(grads, nodes, b);
                    for (o, d) in dst.iter_mut().enumerate() {
                        *d += gout[o * ncols..(o + 1) * ncols].iter().sum::<f32>();
                    }
                }
            }
            if wants(nodes, x) {
                let mut dcols = vec![0.0; rows * ncols];
                kernels::gemm(rows, *c_out, ncols, val(w), true, gout, false, &mut dcols, false);
                kernels::col2im(&dcols, geom, slot(grads, nodes, x));
            }
        }
        &Op::Reshape { a } => {
            if wants(nodes, a) {
                accumulate_broadcast(grads, nodes, a, gout);
            }
        }
        &Op::Narrow {
            a,
            outer,
            len,
            inner,
            start,
            width,
        } => {
            if wants(nodes, a) {
                let dst = slot(grads, nodes, a);
                for o in 0..outer {
                    let src = &gout[o * width * inner..(o + 1) * width * inner];
                    let base = (o * len + start) * inner;
                    dst[base..base + width * inner]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::Concat {
            parts,
            outer,
            inner,
            total,
        } => {
            let mut offset = 0;
            for &(id, width) in parts {
                if wants(nodes, id) {
                    let dst = slot(grads, nodes, id);
                    for o in 0..*outer {
                        let src = (o * total + offset) * inner;
                        let d = o * width * inner;
                        dst[d..d + width * inner]
                            .iter_mut()
                            .zip(&gout[src..src + width * inner])
                            .for_each(|(d, g)| *d += g);
                    }
                }
                offset += width;
            }
        }
        &Op::Sum { a } => {
            if wants(nodes, a) {
                let g = gout[0];
                slot(grads, nodes, a).iter_mut().for_each(|d| *d += g);
            }
        }
        &Op::MeanAxis {
            a,
            outer,
            len,
            inner,
        } => {
            if wants(nodes, a) {
                let dst = slot(grads, nodes, a);
                let scale = 1.0 / len as f32;
                for o in 0..outer {
                    for i in 0..len {
                        for j in 0..inner {
                            dst[(o * len + i) * inner + j] += gout[o * inner + j] * scale;
                        }
                    }
                }
            }
        }
        Op::GatherRows { table, ids, width } => {
            if wants(nodes, *table) {
                let dst = slot(grads, nodes, *table);
                for (r, &id) in ids.iter().enumerate() {
                    let row = &gout[r * width..(r + 1) * width];
                    dst[id * width..(id + 1) * width]
                        .iter_mut()
                        .zip(row)
                        .for_each(|(d, g)| *d += g);
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
            classes,
        } => {
            if wants(nodes, *logits) {
                let count = targets.iter().flatten().count() as f32;
                let scale = gout[0] / count;
                let dst = slot(grads, nodes, *logits);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for c in 0..*classes {
                        let onehot = if c == t { 1.0 } else { 0.0 };
                        dst[r * classes + c] += scale * (probs[r * classes + c] - onehot);
                    }
                }
            }
        }
        &Op::GaussLogMap {
            center,
            scale,
            grid_h,
            grid_w,
            lambda,
        } => {
            let (cv, sv) = (val(center), val(scale));
            let out = node.value.data();
            let hw = grid_h * grid_w;
            let tokens = cv.len() / 2;
            let mut gc = vec![0.0; cv.len()];
            let mut gs = vec![0.0; sv.len()];
            let floor = super::LOG_FLOOR.ln();
            for t in 0..tokens {
                let (th, tw) = (cv[2 * t], cv[2 * t + 1]);
                let (rh, rw) = (sv[2 * t], sv[2 * t + 1]);
                let (ah, aw) = (lambda * rh * rh, lambda * rw * rw);
                for p in 0..hw {
                    // Clamped entries are constant in every input.
                    if out[t * hw + p] <= floor {
                        continue;
                    }
                    let g = gout[t * hw + p];
                    let dh = grid_coord(p / grid_w, grid_h) - th;
                    let dw = grid_coord(p % grid_w, grid_w) - tw;
                    gc[2 * t] += g * 2.0 * dh / ah;
                    gc[2 * t + 1] += g * 2.0 * dw / aw;
                    gs[2 * t] += g * 2.0 * dh * dh / (ah * rh);
                    gs[2 * t + 1] += g * 2.0 * dw * dw / (aw * rw);
                }
            }
            if wants(nodes, center) {
                accumulate_broadcast(grads, nodes, center, &gc);
            }
            if wants(nodes, scale) {
                accumulate_broadcast(grads, nodes, scale, &gs);
            }
        }
    }
}

/// Cell-center coordinate of grid index `i` along an axis of `n` cells,
/// normalized to (0, 1).
pub fn grid_coord(i: usize, n: usize) -> f32 {
    (i as f32 + 0.5) / n as f32
}
