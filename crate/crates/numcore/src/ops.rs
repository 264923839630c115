//! Forward constructors and backward rules for every recorded operation.

use crate::tape::{Node, Op};
use crate::{NumError, Real, Result, Tape, Tensor, Var};

const GELU_K: f64 = 0.044_715;

fn sqrt_2_over_pi<F: Real>() -> F {
    F::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt())
}

/// `tanh` through a single `exp`; saturates cleanly at ±1.
fn fast_tanh<F: Real>(u: F) -> F {
    let two = F::from_f64_lossy(2.0);
    F::one() - two / ((two * u).exp() + F::one())
}

fn gelu<F: Real>(x: F) -> F {
    let half = F::from_f64_lossy(0.5);
    let k = F::from_f64_lossy(GELU_K);
    let t = fast_tanh(sqrt_2_over_pi::<F>() * (x + k * x * x * x));
    half * x * (F::one() + t)
}

fn gelu_grad<F: Real>(x: F) -> F {
    let half = F::from_f64_lossy(0.5);
    let k = F::from_f64_lossy(GELU_K);
    let c = sqrt_2_over_pi::<F>();
    let t = fast_tanh(c * (x + k * x * x * x));
    let three = F::from_f64_lossy(3.0);
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x)
}

fn grad_slot<'g, F: Real>(grads: &'g mut [Option<Vec<F>>], nodes: &[Node<F>], v: Var) -> Option<&'g mut Vec<F>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    let len = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
}

impl<F: Real> Tape<F> {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(NumError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let value = self.value(a).map(f);
        let needs = self.needs_grad(a);
        self.push(value, op, needs)
    }

    /// `a·b` for `[m×k]·[k×n]`, or batched `[B×m×k]·[B×k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a·bᵀ` for `[m×k]·[n×k]ᵀ`, or batched `[B×m×k]·[B×n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || NumError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (batch, m, k, kb, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [r, c]) => {
                let (kb, n) = if trans_b { (*c, *r) } else { (*r, *c) };
                (1, *m, *k, kb, n)
            }
            ([ba, m, k], [bb, r, c]) if ba == bb => {
                let (kb, n) = if trans_b { (*c, *r) } else { (*r, *c) };
                (*ba, *m, *k, kb, n)
            }
            _ => return Err(err()),
        };
        if k != kb {
            return Err(err());
        }
        let mut out = vec![F::zero(); batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
            for bi in 0..batch {
                F::gemm(
                    m,
                    k,
                    n,
                    F::one(),
                    &av[bi * m * k..(bi + 1) * m * k],
                    k as isize,
                    1,
                    &bv[bi * k * n..(bi + 1) * k * n],
                    rsb,
                    csb,
                    F::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        let shape: Vec<usize> = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    /// Adds `b` tiled over `a` (bias rows, position tables, ...).
    pub fn add_tiled(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.value(a).numel();
        let nb = self.value(b).numel();
        if nb == 0 || !na.is_multiple_of(nb) {
            return Err(NumError::Shape {
                op: "add_tiled",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(na);
        for chunk in self.value(a).data().chunks(nb) {
            data.extend(chunk.iter().zip(bv).map(|(&x, &y)| x + y));
        }
        let value = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::AddTiled(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    /// Adds a non-differentiable constant of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Tensor<F>) -> Result<Var> {
        if c.shape() != self.shape(a) {
            return Err(NumError::Shape {
                op: "add_const",
                lhs: self.shape(a).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(c.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.needs_grad(a);
        Ok(self.push(value, Op::AddConst(a), needs))
    }

    /// Multiplies elementwise by a non-differentiable constant.
    pub fn mul_const(&mut self, a: Var, c: Vec<F>) -> Result<Var> {
        if c.len() != self.value(a).numel() {
            return Err(NumError::Shape {
                op: "mul_const",
                lhs: self.shape(a).to_vec(),
                rhs: vec![c.len()],
            });
        }
        let data = self.value(a).data().iter().zip(&c).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(self.shape(a), data)?;
        let needs = self.needs_grad(a);
        Ok(self.push(value, Op::MulConst(a, c), needs))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, gelu, Op::Gelu(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: F, hi: F) -> Var {
        self.unary(a, |x| x.max(lo).min(hi), Op::Clamp(a, lo, hi))
    }

    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(NumError::Shape {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let n = shape[axis];
        if n == 0 {
            return Err(NumError::EmptyAxis { op: "softmax" });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mut max = F::neg_infinity();
                for j in 0..n {
                    max = max.max(xv[at(j)]);
                }
                let mut total = F::zero();
                for j in 0..n {
                    let e = (xv[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let needs = self.needs_grad(x);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::Softmax { x, outer, n, inner },
            needs,
        ))
    }

    /// Row-wise layer normalization over the last axis, then `gamma·x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let d = self.value(x).last_dim();
        if d == 0 {
            return Err(NumError::EmptyAxis { op: "layer_norm" });
        }
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(NumError::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let rows = self.value(x).rows();
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let df = F::from_usize(d).expect("usize to real");
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / df;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / df;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Selects rows of a 2-D table (embedding lookup / row gather).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        let [vocab, d] = shape[..] else {
            return Err(NumError::Shape {
                op: "gather_rows",
                lhs: shape,
                rhs: vec![],
            });
        };
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(NumError::Index {
                    op: "gather_rows",
                    index: id,
                    extent: vocab,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let needs = self.needs_grad(table);
        Ok(self.push(
            Tensor::from_vec(&[ids.len(), d], out)?,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            needs,
        ))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.shape(p).len() != 2 || self.value(p).rows() != rows {
                return Err(NumError::Shape {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(self.value(p).last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(r));
            }
        }
        let needs = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_vec(&[rows, total], out)?,
            Op::ConcatCols {
                parts: parts.to_vec(),
                widths,
            },
            needs,
        ))
    }

    /// Stacks 2-D tensors with equal widths along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).last_dim();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.shape(p).len() != 2 || self.value(p).last_dim() != d {
                return Err(NumError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += self.value(p).rows();
            out.extend_from_slice(self.value(p).data());
        }
        let needs = self.any_grad(parts);
        Ok(self.push(
            Tensor::from_vec(&[rows, d], out)?,
            Op::ConcatRows(parts.to_vec()),
            needs,
        ))
    }

    /// Repeats each row of `[n×d]` `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(NumError::Shape {
                op: "repeat_rows",
                lhs: shape,
                rhs: vec![times],
            });
        }
        let (n, d) = (shape[0], shape[1]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * times * d);
        for r in 0..n {
            for _ in 0..times {
                out.extend_from_slice(&xv[r * d..(r + 1) * d]);
            }
        }
        let needs = self.needs_grad(x);
        Ok(self.push(
            Tensor::from_vec(&[n * times, d], out)?,
            Op::RepeatRows { x, times },
            needs,
        ))
    }

    /// `[B·T × H·dh]` → `[B·H × T × dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = self.value(x).last_dim();
        if shape.len() != 2 || shape[0] != batch * seq || heads == 0 || !d.is_multiple_of(heads) {
            return Err(NumError::Shape {
                op: "split_heads",
                lhs: shape,
                rhs: vec![batch, seq, heads],
            });
        }
        let dh = d / heads;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let src = (b * seq + t) * d + h * dh;
                    let dst = ((b * heads + h) * seq + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let needs = self.needs_grad(x);
        Ok(self.push(
            Tensor::from_vec(&[batch * heads, seq, dh], out)?,
            Op::SplitHeads { x, batch, seq, heads },
            needs,
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, seq: usize, heads: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[0] != batch * heads || shape[1] != seq {
            return Err(NumError::Shape {
                op: "merge_heads",
                lhs: shape,
                rhs: vec![batch, seq, heads],
            });
        }
        let dh = shape[2];
        let d = dh * heads;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for b in 0..batch {
            for t in 0..seq {
                for h in 0..heads {
                    let dst = (b * seq + t) * d + h * dh;
                    let src = ((b * heads + h) * seq + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let needs = self.needs_grad(x);
        Ok(self.push(
            Tensor::from_vec(&[batch * seq, d], out)?,
            Op::MergeHeads { x, batch, seq, heads },
            needs,
        ))
    }

    /// Mean of the unmasked rows of each sequence.
    ///
    /// `h` is `[B·T × d]` and `mask` holds `B·T` entries in {0, 1}; the
    /// result is `[B × d]`. A sequence with no unmasked position is an error.
    pub fn masked_mean_pool(&mut self, h: Var, mask: &[F], seq: usize) -> Result<Var> {
        let d = self.value(h).last_dim();
        let rows = self.value(h).rows();
        if seq == 0 || mask.len() != rows || !rows.is_multiple_of(seq) {
            return Err(NumError::Shape {
                op: "masked_mean_pool",
                lhs: self.shape(h).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let batch = rows / seq;
        let mut weights = vec![F::zero(); rows];
        let mut counts = vec![F::zero(); batch];
        for b in 0..batch {
            let count: F = mask[b * seq..(b + 1) * seq].iter().copied().sum();
            if count <= F::zero() {
                return Err(NumError::EmptySequence { row: b });
            }
            counts[b] = count;
            for t in 0..seq {
                weights[b * seq + t] = mask[b * seq + t] / count;
            }
        }
        let hv = self.value(h).data();
        let mut out = vec![F::zero(); batch * d];
        for b in 0..batch {
            let dst = &mut out[b * d..(b + 1) * d];
            for t in 0..seq {
                let m = mask[b * seq + t];
                if m == F::zero() {
                    continue;
                }
                let src = &hv[(b * seq + t) * d..(b * seq + t + 1) * d];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += m * v;
                }
            }
            dst.iter_mut().for_each(|o| *o /= counts[b]);
        }
        let needs = self.needs_grad(h);
        Ok(self.push(
            Tensor::from_vec(&[batch, d], out)?,
            Op::MaskedMeanPool { h, seq, weights },
            needs,
        ))
    }

    /// Per-row negative log-likelihood of `targets` under softmax(`logits`).
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits).last_dim();
        let rows = self.value(logits).rows();
        if targets.len() != rows || v == 0 {
            return Err(NumError::Shape {
                op: "cross_entropy_rows",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![F::zero(); lv.len()];
        let mut nll = Vec::with_capacity(rows);
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(NumError::Index {
                    op: "cross_entropy_rows",
                    index: t,
                    extent: v,
                });
            }
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut total = F::zero();
            for (p, &x) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (x - max).exp();
                total += *p;
            }
            for p in &mut probs[r * v..(r + 1) * v] {
                *p /= total;
            }
            nll.push(max + total.ln() - row[t]);
        }
        let needs = self.needs_grad(logits);
        Ok(self.push(
            Tensor::from_vec(&[rows], nll)?,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        let needs = self.needs_grad(a);
        self.push(Tensor::scalar(total), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = F::from_usize(self.value(a).numel().max(1)).expect("usize to real");
        let s = self.sum(a);
        self.scale(s, F::one() / n)
    }

    /// `Σ_i w_i·a_i` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: Vec<F>) -> Result<Var> {
        if weights.len() != self.value(a).numel() {
            return Err(NumError::Shape {
                op: "weighted_sum",
                lhs: self.shape(a).to_vec(),
                rhs: vec![weights.len()],
            });
        }
        let total = self.value(a).data().iter().zip(&weights).map(|(&x, &w)| x * w).sum();
        let needs = self.needs_grad(a);
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(a, weights), needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [rows, cols] = shape[..] else {
            return Err(NumError::Shape {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        };
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = xv[r * cols + c];
            }
        }
        let needs = self.needs_grad(x);
        Ok(self.push(
            Tensor::from_vec(&[cols, rows], out)?,
            Op::Transpose { x, rows, cols },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let needs = self.needs_grad(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    #[cfg(test)]
    pub(crate) fn faulty_double(&mut self, a: Var) -> Var {
        let two = F::from_f64_lossy(2.0);
        self.unary(a, |x| x * two, Op::Faulty(a))
    }

    /// Applies the backward rule of node `idx` given its upstream gradient.
    pub(crate) fn backprop(&self, idx: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let out = nodes[idx].value.data();
        match &nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if let Some(ga) = grad_slot(grads, nodes, a) {
                    let (rs, cs) = if trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for bi in 0..batch {
                        F::gemm(
                            m,
                            n,
                            k,
                            F::one(),
                            &g[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            &bv[bi * k * n..(bi + 1) * k * n],
                            rs,
                            cs,
                            F::one(),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                }
                if let Some(gb) = grad_slot(grads, nodes, b) {
                    for bi in 0..batch {
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let asl = &av[bi * m * k..(bi + 1) * m * k];
                        let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if trans_b {
                            F::gemm(
                                n,
                                m,
                                k,
                                F::one(),
                                gs,
                                1,
                                n as isize,
                                asl,
                                k as isize,
                                1,
                                F::one(),
                                dst,
                                k as isize,
                                1,
                            );
                        } else {
                            F::gemm(
                                k,
                                m,
                                n,
                                F::one(),
                                asl,
                                1,
                                k as isize,
                                gs,
                                n as isize,
                                1,
                                F::one(),
                                dst,
                                n as isize,
                                1,
                            );
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = grad_slot(grads, nodes, a) {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if let Some(gb) = grad_slot(grads, nodes, b) {
                    gb.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = grad_slot(grads, nodes, a) {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if let Some(gb) = grad_slot(grads, nodes, b) {
                    gb.iter_mut().zip(g).for_each(|(d, &x)| *d -= x);
                }
            }
            &Op::Mul(a, b) => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if let Some(ga) = grad_slot(grads, nodes, a) {
                    for ((d, &x), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *d += x * y;
                    }
                }
                if let Some(gb) = grad_slot(grads, nodes, b) {
                    for ((d, &x), &y) in gb.iter_mut().zip(g).zip(av) {
                        *d += x * y;
                    }
                }
            }
            &Op::AddTiled(a, b) => {
                if let Some(ga) = grad_slot(grads, nodes, a) {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
                if let Some(gb) = grad_slot(grads, nodes, b) {
                    let nb = gb.len();
                    for chunk in g.chunks(nb) {
                        gb.iter_mut().zip(chunk).for_each(|(d, &x)| *d += x);
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(ga) = grad_slot(grads, nodes, a) {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x * c);
                }
            }
            &Op::AddConst(a) | &Op::Reshape(a) => {
                if let Some(ga) = grad_slot(grads, nodes, a) {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d += x);
                }
            }
            Op::MulConst(a, c) => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for ((d, &x), &y) in ga.iter_mut().zip(g).zip(c) {
                        *d += x * y;
                    }
                }
            }
            &Op::Exp(a) => {
                if let Some(ga) = grad_slot(grads, nodes, a) {
                    for ((d, &x), &y) in ga.iter_mut().zip(g).zip(out) {
                        *d += x * y;
                    }
                }
            }
            &Op::Square(a) => {
                let av = nodes[a.0].value.data();
                let two = F::from_f64_lossy(2.0);
                if let Some(ga) = grad_slot(grads, nodes, a) {
                    for ((d, &x), &v) in ga.iter_mut().zip(g).zip(av) {
                        *d += two * v * x;
                    }
                }
            }
            &Op::Gelu(a) => {
                let av = nodes[a.0].value.data();
                if let Some(ga) = grad_slot(grads, nodes, a) {
                    for ((d, &x), &v) in ga.iter_mut().zip(g).zip(av) {
                        *d += x * gelu_grad(v);
                    }
                }
            }
            &Op::Clamp(a, lo, hi) => {
                let av = nodes[a.0].value.data();
                if let Some(ga) = grad_slot(grads, nodes, a) {
                    for ((d, &x), &v) in ga.iter_mut().zip(g).zip(av) {
                        if v >= lo && v <= hi {
                            *d += x;
                        }
                    }
                }
            }
            &Op::Softmax { x, outer, n, inner } => {
                if let Some(gx) = grad_slot(grads, nodes, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let mut dot = F::zero();
                            for j in 0..n {
                                dot += g[at(j)] * out[at(j)];
                            }
                            for j in 0..n {
                                gx[at(j)] += out[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = nodes[gamma.0].value.data();
                let d = gv.len();
                let rows = rstd.len();
                if let Some(gg) = grad_slot(grads, nodes, *gamma) {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if let Some(gb) = grad_slot(grads, nodes, *beta) {
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                }
                if let Some(gx) = grad_slot(grads, nodes, *x) {
                    let df = F::from_usize(d).expect("usize to real");
                    for r in 0..rows {
                        let mut mean_dh = F::zero();
                        let mut mean_dhx = F::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            mean_dh += dh;
                            mean_dhx += dh * xhat[r * d + j];
                        }
                        mean_dh /= df;
                        mean_dhx /= df;
                        for j in 0..d {
                            let dh = g[r * d + j] * gv[j];
                            gx[r * d + j] += rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dhx);
                        }
                    }
                }
            }
            Op::GatherRows { table, ids } => {
                if let Some(gt) = grad_slot(grads, nodes, *table) {
                    let d = nodes[table.0].value.last_dim();
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::ConcatCols { parts, widths } => {
                let total: usize = widths.iter().sum();
                let rows = g.len().checked_div(total).unwrap_or(0);
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(widths) {
                    if let Some(gp) = grad_slot(grads, nodes, p) {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if let Some(gp) = grad_slot(grads, nodes, p) {
                        gp.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, &x)| *d += x);
                    }
                    offset += len;
                }
            }
            &Op::RepeatRows { x, times } => {
                let d = nodes[x.0].value.last_dim();
                if let Some(gx) = grad_slot(grads, nodes, x) {
                    let n = gx.len() / d.max(1);
                    for r in 0..n {
                        for t in 0..times {
                            let src = (r * times + t) * d;
                            for j in 0..d {
                                gx[r * d + j] += g[src + j];
                            }
                        }
                    }
                }
            }
            &Op::SplitHeads { x, batch, seq, heads } => {
                if let Some(gx) = grad_slot(grads, nodes, x) {
                    let d = nodes[x.0].value.last_dim();
                    let dh = d / heads;
                    for b in 0..batch {
                        for t in 0..seq {
                            for h in 0..heads {
                                let dst = (b * seq + t) * d + h * dh;
                                let src = ((b * heads + h) * seq + t) * dh;
                                for j in 0..dh {
                                    gx[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads { x, batch, seq, heads } => {
                if let Some(gx) = grad_slot(grads, nodes, x) {
                    let dh = nodes[x.0].value.last_dim();
                    let d = dh * heads;
                    for b in 0..batch {
                        for t in 0..seq {
                            for h in 0..heads {
                                let src = (b * seq + t) * d + h * dh;
                                let dst = ((b * heads + h) * seq + t) * dh;
                                for j in 0..dh {
                                    gx[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::MaskedMeanPool { h, seq, weights } => {
                if let Some(gh) = grad_slot(grads, nodes, *h) {
                    let d = nodes[h.0].value.last_dim();
                    for (row, &w) in weights.iter().enumerate() {
                        if w == F::zero() {
                            continue;
                        }
                        let b = row / seq;
                        for j in 0..d {
                            gh[row * d + j] += w * g[b * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropyRows { logits, targets, probs } => {
                if let Some(gl) = grad_slot(grads, nodes, *logits) {
                    let v = nodes[logits.0].value.last_dim();
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = g[r];
                        if gr == F::zero() {
                            continue;
                        }
                        let dst = &mut gl[r * v..(r + 1) * v];
                        for (d, &p) in dst.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                            *d += gr * p;
                        }
                        dst[t] -= gr;
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(ga) = grad_slot(grads, nodes, a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::WeightedSum(a, w) => {
                if let Some(ga) = grad_slot(grads, nodes, *a) {
                    for (d, &wi) in ga.iter_mut().zip(w) {
                        *d += g[0] * wi;
                    }
                }
            }
            #[cfg(test)]
            &Op::Faulty(a) => {
                let three = F::from_f64_lossy(3.0);
                if let Some(ga) = grad_slot(grads, nodes, a) {
                    ga.iter_mut().zip(g).for_each(|(d, &x)| *d += three * x);
                }
            }
            &Op::Transpose { x, rows, cols } => {
                if let Some(gx) = grad_slot(grads, nodes, x) {
                    for r in 0..rows {
                        for c in 0..cols {
                            gx[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
            }
        }
    }
}
