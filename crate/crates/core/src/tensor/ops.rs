use super::kernels::{self, ConvGeom};
use super::tape::{grid_coord, Op, Var};
use super::{Tensor, LOG_FLOOR};
use crate::error::{Error, Result};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Sigmoid,
    Softplus,
    Exp,
    /// Natural log of the input clamped to at least [`LOG_FLOOR`].
    Log,
    Tanh,
}

impl Unary {
    pub fn apply(self, x: f32) -> f32 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Sigmoid => sigmoid(x),
            Unary::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Unary::Exp => x.exp(),
            Unary::Log => x.max(LOG_FLOOR).ln(),
            Unary::Tanh => x.tanh(),
        }
    }

    /// d(out)/d(in) from the input `x` and the cached output `y`.
    pub(crate) fn derivative(self, x: f32, y: f32) -> f32 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => {
                if x >= LOG_FLOOR {
                    1.0 / x
                } else {
                    0.0
                }
            }
            Unary::Tanh => 1.0 - y * y,
        }
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `rhs` may repeat over the leading dimensions of `lhs`: after dropping its
/// own leading 1s its shape must be a suffix of `lhs`'s shape.
fn check_broadcast(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<()> {
    if lhs == rhs {
        return Ok(());
    }
    let first = rhs.iter().position(|&d| d != 1).unwrap_or(rhs.len());
    let trimmed = &rhs[first..];
    if trimmed.len() <= lhs.len() && lhs.ends_with(trimmed) {
        Ok(())
    } else {
        Err(Error::dim(op, format!("cannot broadcast {rhs:?} onto {lhs:?}")))
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis < shape.len() {
        Ok(())
    } else {
        Err(Error::dim(op, format!("axis {axis} out of range for {shape:?}")))
    }
}

impl<'t> Var<'t> {
    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn grad_any(&self, others: &[usize]) -> bool {
        let nodes = self.tape.nodes.borrow();
        nodes[self.id].requires_grad || others.iter().any(|&i| nodes[i].requires_grad)
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let (value, m, k, n) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
                return Err(Error::dim(
                    "matmul",
                    format!("expected two matrices, got {:?} and {:?}", a.shape(), b.shape()),
                ));
            };
            if k != k2 {
                return Err(Error::dim(
                    "matmul",
                    format!("inner dimensions differ: {:?} · {:?}", a.shape(), b.shape()),
                ));
            }
            let mut out = vec![0.0; m * n];
            kernels::gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
            (Tensor::new(&[m, n], out)?, m, k, n)
        };
        let rg = self.grad_any(&[rhs.id]);
        Ok(self.tape.push(
            value,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = self.with_value(|t| t.transpose())?;
        let (rows, cols) = (value.shape()[1], value.shape()[0]);
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Transpose { a: self.id, rows, cols }, rg))
    }

    fn binary(
        self,
        rhs: Var<'t>,
        name: &'static str,
        f: impl Fn(f32, f32) -> f32,
        op: impl FnOnce(usize, usize) -> Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&rhs);
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[rhs.id].value);
            check_broadcast(name, a.shape(), b.shape())?;
            let bd = b.data();
            let nb = bd.len();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % nb]))
                .collect();
            Tensor::new(a.shape(), data)?
        };
        let rg = self.grad_any(&[rhs.id]);
        Ok(self.tape.push(value, op(self.id, rhs.id), rg))
    }

    /// Elementwise sum; `rhs` may broadcast over leading dimensions.
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", |a, b| a + b, |a, b| Op::Add { a, b })
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", |a, b| a - b, |a, b| Op::Sub { a, b })
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", |a, b| a * b, |a, b| Op::Mul { a, b })
    }

    pub fn scale(self, factor: f32) -> Var<'t> {
        let value = self.with_value(|t| {
            Tensor::new(t.shape(), t.data().iter().map(|x| x * factor).collect())
                .expect("same shape")
        });
        let rg = self.requires_grad();
        self.tape.push(value, Op::Scale { a: self.id, factor }, rg)
    }

    pub fn unary(self, kind: Unary) -> Var<'t> {
        let value = self.with_value(|t| {
            Tensor::new(t.shape(), t.data().iter().map(|&x| kind.apply(x)).collect())
                .expect("same shape")
        });
        let rg = self.requires_grad();
        self.tape.push(value, Op::Unary { a: self.id, kind }, rg)
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Unary::Relu)
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.unary(Unary::Sigmoid)
    }

    pub fn softplus(self) -> Var<'t> {
        self.unary(Unary::Softplus)
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(Unary::Exp)
    }

    pub fn log(self) -> Var<'t> {
        self.unary(Unary::Log)
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Unary::Tanh)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let (value, outer, len, inner) = self.with_value(|t| {
            check_axis("softmax", t.shape(), axis)?;
            let (outer, len, inner) = Tensor::axis_extents(t.shape(), axis);
            let out = kernels::softmax(t.data(), outer, len, inner);
            Ok::<_, Error>((Tensor::new(t.shape(), out)?, outer, len, inner))
        })?;
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Softmax {
                a: self.id,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalizes to zero mean and unit variance along `axis`, then applies
    /// the per-position affine `gamma`, `beta` (both of the axis length).
    pub fn layernorm(self, axis: usize, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&gamma);
        self.same_tape(&beta);
        let (value, outer, len, inner, mean, rstd) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            check_axis("layernorm", x.shape(), axis)?;
            let (outer, len, inner) = Tensor::axis_extents(x.shape(), axis);
            let (g, b) = (&nodes[gamma.id].value, &nodes[beta.id].value);
            if g.numel() != len || b.numel() != len {
                return Err(Error::dim(
                    "layernorm",
                    format!(
                        "gamma {:?} / beta {:?} must match axis length {len}",
                        g.shape(),
                        b.shape()
                    ),
                ));
            }
            let (out, mean, rstd) = kernels::layernorm(x.data(), g.data(), b.data(), outer, len, inner);
            (Tensor::new(x.shape(), out)?, outer, len, inner, mean, rstd)
        };
        let rg = self.grad_any(&[gamma.id, beta.id]);
        Ok(self.tape.push(
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                outer,
                len,
                inner,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// Zero-padded cross-correlation of a C×H×W input with an
    /// O×C×k×k kernel bank, plus an optional per-output-channel bias.
    ///
    /// Output extent is `⌊(H + 2·pad − k) / stride⌋ + 1`; a kernel that does
    /// not fit the padded input at all is a configuration error.
    pub fn conv2d(
        self,
        weight: Var<'t>,
        bias: Option<Var<'t>>,
        stride: usize,
        pad: usize,
    ) -> Result<Var<'t>> {
        self.same_tape(&weight);
        let (value, geom, c_out, cols) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
            let (&[c_in, h, wd], &[c_out, c_in2, k, k2]) = (x.shape(), w.shape()) else {
                return Err(Error::dim(
                    "conv2d",
                    format!("expected C×H×W input and O×C×k×k kernel, got {:?} and {:?}", x.shape(), w.shape()),
                ));
            };
            if c_in != c_in2 || k != k2 || k % 2 == 0 {
                return Err(Error::dim(
                    "conv2d",
                    format!("kernel {:?} incompatible with input {:?} (square odd kernel required)", w.shape(), x.shape()),
                ));
            }
            if stride == 0 {
                return Err(Error::Config("conv2d stride must be positive".into()));
            }
            let span_h = (h + 2 * pad).checked_sub(k);
            let span_w = (wd + 2 * pad).checked_sub(k);
            let (Some(span_h), Some(span_w)) = (span_h, span_w) else {
                return Err(Error::Config(format!("kernel {k} larger than padded input {h}×{wd}")));
            };
            let geom = ConvGeom {
                c_in,
                h,
                w: wd,
                k,
                stride,
                pad,
                h_out: span_h / stride + 1,
                w_out: span_w / stride + 1,
            };
            let cols = kernels::im2col(x.data(), &geom);
            let n = geom.col_cols();
            let mut out = vec![0.0; c_out * n];
            kernels::gemm(c_out, geom.col_rows(), n, w.data(), false, &cols, false, &mut out, false);
            if let Some(b) = bias {
                let bv = &nodes[b.id].value;
                if bv.numel() != c_out {
                    return Err(Error::dim("conv2d", format!("bias {:?} for {c_out} channels", bv.shape())));
                }
                for (o, bias) in bv.data().iter().enumerate() {
                    out[o * n..(o + 1) * n].iter_mut().for_each(|v| *v += bias);
                }
            }
            (Tensor::new(&[c_out, geom.h_out, geom.w_out], out)?, geom, c_out, cols)
        };
        let mut parents = vec![weight.id];
        parents.extend(bias.map(|b| b.id));
        let rg = self.grad_any(&parents);
        Ok(self.tape.push(
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                bias: bias.map(|b| b.id),
                geom,
                c_out,
                cols,
            },
            rg,
        ))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().reshape(shape)?;
        let rg = self.requires_grad();
        Ok(self.tape.push(value, Op::Reshape { a: self.id }, rg))
    }

    /// Slice `[start, start + width)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, width: usize) -> Result<Var<'t>> {
        let (value, outer, len, inner) = self.with_value(|t| {
            check_axis("narrow", t.shape(), axis)?;
            let (outer, len, inner) = Tensor::axis_extents(t.shape(), axis);
            if width == 0 || start + width > len {
                return Err(Error::dim(
                    "narrow",
                    format!("range {start}..{} outside axis of length {len}", start + width),
                ));
            }
            let mut data = Vec::with_capacity(outer * width * inner);
            for o in 0..outer {
                let base = (o * len + start) * inner;
                data.extend_from_slice(&t.data()[base..base + width * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = width;
            Ok((Tensor::new(&shape, data)?, outer, len, inner))
        })?;
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::Narrow {
                a: self.id,
                outer,
                len,
                inner,
                start,
                width,
            },
            rg,
        ))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let (value, pieces, outer, inner, total) = {
            let nodes = first.tape.nodes.borrow();
            let base = nodes[first.id].value.shape().to_vec();
            check_axis("concat", &base, axis)?;
            let mut pieces = Vec::with_capacity(parts.len());
            for p in parts {
                first.same_tape(p);
                let s = nodes[p.id].value.shape();
                let compatible = s.len() == base.len()
                    && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::dim("concat", format!("{s:?} does not line up with {base:?} on axis {axis}")));
                }
                pieces.push((p.id, s[axis]));
            }
            let total: usize = pieces.iter().map(|p| p.1).sum();
            let (outer, _, inner) = Tensor::axis_extents(&base, axis);
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for &(id, width) in &pieces {
                    let d = nodes[id].value.data();
                    data.extend_from_slice(&d[o * width * inner..(o + 1) * width * inner]);
                }
            }
            let mut shape = base.clone();
            shape[axis] = total;
            (Tensor::new(&shape, data)?, pieces, outer, inner, total)
        };
        let ids: Vec<usize> = pieces.iter().map(|p| p.0).collect();
        let rg = first.grad_any(&ids);
        Ok(first.tape.push(
            value,
            Op::Concat {
                parts: pieces,
                outer,
                inner,
                total,
            },
            rg,
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let value = self.with_value(|t| Tensor::scalar(t.data().iter().sum()));
        let rg = self.requires_grad();
        self.tape.push(value, Op::Sum { a: self.id }, rg)
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(self, axis: usize) -> Result<Var<'t>> {
        let (value, outer, len, inner) = self.with_value(|t| {
            check_axis("mean_axis", t.shape(), axis)?;
            let (outer, len, inner) = Tensor::axis_extents(t.shape(), axis);
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..len {
                    for j in 0..inner {
                        out[o * inner + j] += t.data()[(o * len + i) * inner + j];
                    }
                }
            }
            out.iter_mut().for_each(|v| *v /= len as f32);
            let mut shape = t.shape().to_vec();
            shape.remove(axis);
            if shape.is_empty() {
                shape.push(1);
            }
            Ok::<_, Error>((Tensor::new(&shape, out)?, outer, len, inner))
        })?;
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::MeanAxis {
                a: self.id,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Row lookup into a V×C table; returns len(ids)×C.
    pub fn gather_rows(self, ids: &[usize]) -> Result<Var<'t>> {
        let (value, width) = self.with_value(|t| {
            let &[rows, width] = t.shape() else {
                return Err(Error::dim("gather_rows", format!("table must be 2-D, got {:?}", t.shape())));
            };
            let mut data = Vec::with_capacity(ids.len() * width);
            for &id in ids {
                if id >= rows {
                    return Err(Error::dim("gather_rows", format!("row {id} outside table of {rows}")));
                }
                data.extend_from_slice(&t.data()[id * width..(id + 1) * width]);
            }
            Ok((Tensor::new(&[ids.len(), width], data)?, width))
        })?;
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::GatherRows {
                table: self.id,
                ids: ids.to_vec(),
                width,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of a P×V logit matrix over the rows whose
    /// target is `Some`.
    pub fn cross_entropy(self, targets: &[Option<usize>]) -> Result<Var<'t>> {
        let (value, probs, classes) = self.with_value(|t| {
            let &[rows, classes] = t.shape() else {
                return Err(Error::dim("cross_entropy", format!("logits must be 2-D, got {:?}", t.shape())));
            };
            if rows != targets.len() {
                return Err(Error::dim("cross_entropy", format!("{rows} rows but {} targets", targets.len())));
            }
            if targets.iter().all(Option::is_none) {
                return Err(Error::Contract("cross-entropy over an all-masked target".into()));
            }
            if let Some(bad) = targets.iter().flatten().find(|&&c| c >= classes) {
                return Err(Error::dim("cross_entropy", format!("target class {bad} ≥ {classes}")));
            }
            let probs = kernels::softmax(t.data(), rows, classes, 1);
            let mut total = 0.0f64;
            let mut count = 0usize;
            for (r, tgt) in targets.iter().enumerate() {
                let Some(c) = *tgt else { continue };
                let row = &t.data()[r * classes..(r + 1) * classes];
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
                total += f64::from(lse - row[c]);
                count += 1;
            }
            Ok((Tensor::scalar((total / count as f64) as f32), probs, classes))
        })?;
        let rg = self.requires_grad();
        Ok(self.tape.push(
            value,
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
                classes,
            },
            rg,
        ))
    }

    /// Log of a clamped axis-aligned Gaussian weight map, one row per token.
    ///
    /// `center` and `scale` are T×2 (row, column); the result is T×(H·W) with
    /// entry `[t, h·W + w]` equal to
    /// `max(ln 1e-6, −(y_h − c_t0)²/(λ s_t0²) − (x_w − c_t1)²/(λ s_t1²))`
    /// where `y_h`, `x_w` are normalized cell centers.
    pub fn gauss_log_map(
        center: Var<'t>,
        scale: Var<'t>,
        grid_h: usize,
        grid_w: usize,
        lambda: f32,
    ) -> Result<Var<'t>> {
        center.same_tape(&scale);
        let value = {
            let nodes = center.tape.nodes.borrow();
            let (c, s) = (&nodes[center.id].value, &nodes[scale.id].value);
            let (&[t, 2], &[t2, 2]) = (c.shape(), s.shape()) else {
                return Err(Error::dim("gauss_log_map", format!("center {:?} and scale {:?} must be T×2", c.shape(), s.shape())));
            };
            if t != t2 {
                return Err(Error::dim("gauss_log_map", format!("{t} centers but {t2} scales")));
            }
            if lambda <= 0.0 || s.data().iter().any(|&v| v <= 0.0) {
                return Err(Error::Contract("weight map needs positive scales and bandwidth".into()));
            }
            let floor = LOG_FLOOR.ln();
            let hw = grid_h * grid_w;
            let mut out = vec![0.0; t * hw];
            for i in 0..t {
                let (ch, cw) = (c.data()[2 * i], c.data()[2 * i + 1]);
                let (rh, rw) = (s.data()[2 * i], s.data()[2 * i + 1]);
                for p in 0..hw {
                    let dh = grid_coord(p / grid_w, grid_h) - ch;
                    let dw = grid_coord(p % grid_w, grid_w) - cw;
                    let e = -dh * dh / (lambda * rh * rh) - dw * dw / (lambda * rw * rw);
                    out[i * hw + p] = e.max(floor);
                }
            }
            Tensor::new(&[t, hw], out)?
        };
        let rg = center.grad_any(&[scale.id]);
        Ok(center.tape.push(
            value,
            Op::GaussLogMap {
                center: center.id,
                scale: scale.id,
                grid_h,
                grid_w,
                lambda,
            },
            rg,
        ))
    }
}
