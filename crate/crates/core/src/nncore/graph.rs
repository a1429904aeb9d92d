//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Values are
//! computed eagerly; [`Graph::backward`] walks the tape in reverse and
//! returns gradients for the parameters that were read through
//! [`Graph::param`]. Parameters are borrowed, never copied, so building a
//! graph over a large parameter set is cheap.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::params::{Gradients, ParamId, ParameterSet};
use super::tensor::{matmul_nn, matmul_nt, matmul_tn_acc, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const NORM_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

enum Op<T> {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Gelu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Transpose(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    BatchNormFrozen {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    Unfold {
        x: Var,
        spans: Vec<(usize, usize)>,
        k: usize,
    },
    SegmentMean {
        x: Var,
        spans: Vec<(usize, usize)>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    RowMax {
        x: Var,
        arg: Vec<usize>,
    },
    ColMax {
        x: Var,
        arg: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Stack(Vec<Var>),
    Diag(Var),
    SmoothedCe {
        logits: Var,
        targets: Vec<usize>,
        eps: T,
        probs: Tensor<T>,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Pending update of a non-trainable buffer (batch-norm running statistics),
/// applied by the caller after the step.
#[derive(Clone, Debug)]
pub struct BufferUpdate<T> {
    pub id: ParamId,
    pub value: Tensor<T>,
}

pub struct Graph<'a, T: Real> {
    params: &'a ParameterSet<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    train: bool,
    rng: Option<&'a mut ChaCha8Rng>,
    buffer_updates: Vec<BufferUpdate<T>>,
}

impl<'a, T: Real> Graph<'a, T> {
    /// Inference graph: dropout disabled, batch norm uses running statistics.
    pub fn eval(params: &'a ParameterSet<T>) -> Self {
        Self::build(params, false, None)
    }

    /// Training graph. Dropout masks are drawn from `rng` in op order.
    pub fn train(params: &'a ParameterSet<T>, rng: Option<&'a mut ChaCha8Rng>) -> Self {
        Self::build(params, true, rng)
    }

    fn build(params: &'a ParameterSet<T>, train: bool, rng: Option<&'a mut ChaCha8Rng>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            train,
            rng,
            buffer_updates: Vec::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn params(&self) -> &'a ParameterSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn take_buffer_updates(&mut self) -> Vec<BufferUpdate<T>> {
        std::mem::take(&mut self.buffer_updates)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => &self.params.get(*id).value,
            (None, _) => unreachable!("non-leaf node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn constant_scalar(&mut self, v: T) -> Var {
        self.input(Tensor::scalar(v))
    }

    /// Leaf for a stored parameter. Repeated reads share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let trainable = self.params.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let out = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul_t", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let out = matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(m, n, out)?, Op::MatMulT(a, b), rg))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        if self.shape(row) != (1, n) {
            return Err(Error::shape(
                "add_row",
                format!("{m}x{n} + {:?}", self.shape(row)),
            ));
        }
        let mut t = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for i in 0..m {
            for (v, &b) in t.row_mut(i).iter_mut().zip(&r) {
                *v = *v + b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::AddRow(a, row), rg))
    }

    pub fn mul_const(&mut self, a: Var, c: Tensor<T>) -> Result<Var> {
        let ta = self.value(a);
        if ta.shape() != c.shape() {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs {:?}", ta.shape(), c.shape()),
            ));
        }
        let data = ta.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::from_vec(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::MulConst(a, c), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let t = self.value(a).map(|v| v * s);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, s), rg)
    }

    /// Multiplies every entry of `a` by the `1×1` variable `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::shape("scale_by", format!("scalar {:?}", self.shape(s))));
        }
        let sv = self.scalar(s);
        let t = self.value(a).map(|v| v * sv);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::ScaleBy(a, s), rg))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(T::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let t = self.value(a).map(T::ln);
        let rg = self.rg(a);
        self.push(t, Op::Log(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(T::zero()));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = T::lit(GELU_C);
        let k = T::lit(0.044715);
        let half = T::lit(0.5);
        let t = self
            .value(a)
            .map(|x| half * x * (T::one() + (c * (x + k * x * x * x)).tanh()));
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    /// Row-wise softmax. `mask[r][c] == false` positions get exactly zero
    /// probability.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let ta = self.value(a);
        let (m, n) = ta.shape();
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(Error::shape(
                    "softmax",
                    format!("mask of {} for {m}x{n}", mk.len()),
                ));
            }
        }
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let row = ta.row(r);
            let keep = |c: usize| mask.is_none_or(|mk| mk[r * n + c]);
            let mut mx = T::neg_infinity();
            for (c, &v) in row.iter().enumerate() {
                if keep(c) && v > mx {
                    mx = v;
                }
            }
            if mx == T::neg_infinity() {
                continue;
            }
            let orow = out.row_mut(r);
            let mut z = T::zero();
            for c in 0..n {
                if keep(c) {
                    let e = (row[c] - mx).exp();
                    orow[c] = e;
                    z = z + e;
                }
            }
            for v in orow.iter_mut() {
                *v = *v / z;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (m, n) = ta.shape();
        let mut out = Tensor::zeros(m, n);
        for r in 0..m {
            let row = ta.row(r);
            let lse = log_sum_exp(row);
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    /// Per-row normalization with affine `gamma`/`beta` (`1×n` each).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(gamma) != (1, n) || self.shape(beta) != (1, n) {
            return Err(Error::shape("layer_norm", format!("input {m}x{n}")));
        }
        let tx = self.value(x);
        let mut xhat = Tensor::zeros(m, n);
        let mut inv_std = Vec::with_capacity(m);
        let nf = T::lit(n as f64);
        for r in 0..m {
            let row = tx.row(r);
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let inv = T::one() / (var + T::lit(eps)).sqrt();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let out = affine_rows(&xhat, self.value(gamma).data(), self.value(beta).data());
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Batch normalization over the rows of `x` (every row is one valid time
    /// step). In training mode batch statistics are used and a running-stat
    /// update is queued; in eval mode the running buffers are applied as a
    /// fixed affine map.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let (m, n) = self.shape(x);
        if self.shape(gamma) != (1, n) || self.shape(beta) != (1, n) {
            return Err(Error::shape("batch_norm", format!("input {m}x{n}")));
        }
        if m == 0 {
            return Err(Error::shape("batch_norm", "empty batch"));
        }
        let tx = self.value(x);
        let (mean, var) = if self.train {
            let mf = T::lit(m as f64);
            let mut mean = vec![T::zero(); n];
            for r in 0..m {
                for (s, &v) in mean.iter_mut().zip(tx.row(r)) {
                    *s = *s + v;
                }
            }
            mean.iter_mut().for_each(|s| *s = *s / mf);
            let mut var = vec![T::zero(); n];
            for r in 0..m {
                for ((s, &v), &mu) in var.iter_mut().zip(tx.row(r)).zip(&mean) {
                    *s = *s + (v - mu) * (v - mu);
                }
            }
            var.iter_mut().for_each(|s| *s = *s / mf);
            (mean, var)
        } else {
            (
                self.params.get(running_mean).value.data().to_vec(),
                self.params.get(running_var).value.data().to_vec(),
            )
        };
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::lit(eps)).sqrt())
            .collect();
        let mut xhat = Tensor::zeros(m, n);
        for r in 0..m {
            for (c, (o, &v)) in xhat.row_mut(r).iter_mut().zip(tx.row(r)).enumerate() {
                *o = (v - mean[c]) * inv_std[c];
            }
        }
        let out = affine_rows(&xhat, self.value(gamma).data(), self.value(beta).data());
        if self.train {
            let mom = T::lit(momentum);
            let unbias = if m > 1 {
                T::lit(m as f64 / (m - 1) as f64)
            } else {
                T::one()
            };
            let rm = &self.params.get(running_mean).value;
            let rv = &self.params.get(running_var).value;
            let new_mean = rm
                .data()
                .iter()
                .zip(&mean)
                .map(|(&r, &b)| (T::one() - mom) * r + mom * b)
                .collect();
            let new_var = rv
                .data()
                .iter()
                .zip(&var)
                .map(|(&r, &b)| (T::one() - mom) * r + mom * b * unbias)
                .collect();
            self.buffer_updates.push(BufferUpdate {
                id: running_mean,
                value: Tensor::from_vec(1, n, new_mean)?,
            });
            self.buffer_updates.push(BufferUpdate {
                id: running_var,
                value: Tensor::from_vec(1, n, new_var)?,
            });
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = if self.train {
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            }
        } else {
            Op::BatchNormFrozen {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            }
        };
        Ok(self.push(out, op, rg))
    }

    /// Sliding windows of `k` rows inside each span, flattened to `k·c`
    /// columns. A span of `n ≥ k` rows yields `n − k + 1` windows; windows
    /// never cross span boundaries.
    pub fn unfold(&mut self, x: Var, spans: &[(usize, usize)], k: usize) -> Result<Var> {
        let (m, c) = self.shape(x);
        let mut total = 0;
        for &(s, e) in spans {
            if e > m || e < s + k {
                return Err(Error::shape(
                    "unfold",
                    format!("span [{s},{e}) with kernel {k} over {m} rows"),
                ));
            }
            total += e - s - k + 1;
        }
        let tx = self.value(x);
        let mut out = Tensor::zeros(total, k * c);
        let mut o = 0;
        for &(s, e) in spans {
            for j in s..=e - k {
                let dst = out.row_mut(o);
                dst.copy_from_slice(&tx.data()[j * c..(j + k) * c]);
                o += 1;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::Unfold {
                x,
                spans: spans.to_vec(),
                k,
            },
            rg,
        ))
    }

    /// Mean of the rows in each span, one output row per span.
    pub fn segment_mean(&mut self, x: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let (m, c) = self.shape(x);
        let tx = self.value(x);
        let mut out = Tensor::zeros(spans.len(), c);
        for (i, &(s, e)) in spans.iter().enumerate() {
            if e > m || e <= s {
                return Err(Error::shape(
                    "segment_mean",
                    format!("span [{s},{e}) over {m} rows"),
                ));
            }
            let inv = T::one() / T::lit((e - s) as f64);
            let dst = out.row_mut(i);
            for r in s..e {
                for (d, &v) in dst.iter_mut().zip(tx.row(r)) {
                    *d = *d + v;
                }
            }
            dst.iter_mut().for_each(|d| *d = *d * inv);
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::SegmentMean {
                x,
                spans: spans.to_vec(),
            },
            rg,
        ))
    }

    /// Row lookup (embedding).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (d, _) = self.shape(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= d) {
            return Err(Error::shape("gather", format!("id {bad} out of range for {d} rows")));
        }
        let t = self.value(table).select_rows(ids);
        let rg = self.rg(table);
        Ok(self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, c) = self.shape(x);
        if start + len > m {
            return Err(Error::shape("slice_rows", format!("[{start},{}) of {m}", start + len)));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(len, c, data)?, Op::SliceRows(x, start), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, c) = self.shape(x);
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("[{start},{}) of {c}", start + len)));
        }
        let tx = self.value(x);
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(m, len, data)?, Op::SliceCols(x, start), rg))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = xs.first().map(|&v| self.shape(v).1).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let t = self.value(v);
            if t.cols() != c {
                return Err(Error::shape("concat_rows", format!("{} vs {c} columns", t.cols())));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::from_vec(rows, c, data)?, Op::ConcatRows(xs.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let m = xs.first().map(|&v| self.shape(v).0).unwrap_or(0);
        if let Some(&bad) = xs.iter().find(|&&v| self.shape(v).0 != m) {
            return Err(Error::shape(
                "concat_cols",
                format!("{} vs {m} rows", self.shape(bad).0),
            ));
        }
        let total: usize = xs.iter().map(|&v| self.shape(v).1).sum();
        let mut out = Tensor::zeros(m, total);
        let mut off = 0;
        for &v in xs {
            let t = self.value(v);
            let c = t.cols();
            for r in 0..m {
                out.row_mut(r)[off..off + c].copy_from_slice(t.row(r));
            }
            off += c;
        }
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(out, Op::ConcatCols(xs.to_vec()), rg))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (m, n) = tx.shape();
        let mut out = Tensor::zeros(m, n);
        let mut norms = Vec::with_capacity(m);
        for r in 0..m {
            let row = tx.row(r);
            let nrm = row
                .iter()
                .map(|&v| v * v)
                .sum::<T>()
                .sqrt()
                .max(T::lit(NORM_EPS));
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o = v / nrm;
            }
            norms.push(nrm);
        }
        let rg = self.rg(x);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    /// Maximum of each row, `m×1`. Ties resolve to the first index.
    pub fn row_max(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (m, _) = tx.shape();
        let mut vals = Vec::with_capacity(m);
        let mut arg = Vec::with_capacity(m);
        for r in 0..m {
            let (i, v) = argmax(tx.row(r));
            vals.push(v);
            arg.push(i);
        }
        let rg = self.rg(x);
        self.push(Tensor::from_vec(m, 1, vals).expect("row_max"), Op::RowMax { x, arg }, rg)
    }

    /// Maximum of each column, `1×n`. Ties resolve to the first index.
    pub fn col_max(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (m, n) = tx.shape();
        let mut vals = vec![T::neg_infinity(); n];
        let mut arg = vec![0; n];
        for r in 0..m {
            for (c, &v) in tx.row(r).iter().enumerate() {
                if v > vals[c] {
                    vals[c] = v;
                    arg[c] = r;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::row_vector(vals), Op::ColMax { x, arg }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.len() as f64);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Assembles `1×1` variables into a `rows×cols` matrix (row-major).
    pub fn stack(&mut self, items: &[Var], rows: usize, cols: usize) -> Result<Var> {
        if items.len() != rows * cols {
            return Err(Error::shape("stack", format!("{} items for {rows}x{cols}", items.len())));
        }
        let mut data = Vec::with_capacity(items.len());
        for &v in items {
            if self.shape(v) != (1, 1) {
                return Err(Error::shape("stack", format!("item {:?}", self.shape(v))));
            }
            data.push(self.scalar(v));
        }
        let rg = items.iter().any(|&v| self.rg(v));
        Ok(self.push(Tensor::from_vec(rows, cols, data)?, Op::Stack(items.to_vec()), rg))
    }

    /// Diagonal of a square matrix as an `n×1` column.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        if m != n {
            return Err(Error::shape("diag", format!("{m}x{n}")));
        }
        let t = self.value(x);
        let data = (0..n).map(|i| t.get(i, i)).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(n, 1, data)?, Op::Diag(x), rg))
    }

    /// Mean over rows of the cross-entropy between `softmax(logits)` and a
    /// smoothed one-hot target: `1 − eps` on the target class, `eps/(d−1)`
    /// on every other class.
    pub fn smoothed_cross_entropy(&mut self, logits: Var, targets: &[usize], eps: f64) -> Result<Var> {
        let (m, d) = self.shape(logits);
        if targets.len() != m {
            return Err(Error::shape(
                "smoothed_cross_entropy",
                format!("{} targets for {m} rows", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= d) {
            return Err(Error::shape(
                "smoothed_cross_entropy",
                format!("target {bad} out of range for {d} classes"),
            ));
        }
        if m == 0 {
            return Err(Error::shape("smoothed_cross_entropy", "no target steps"));
        }
        let eps = T::lit(eps);
        let (on, off) = smoothing_weights(eps, d);
        let tl = self.value(logits);
        let mut probs = Tensor::zeros(m, d);
        let mut total = T::zero();
        for r in 0..m {
            let row = tl.row(r);
            let lse = log_sum_exp(row);
            let mut loss = T::zero();
            for (c, (&v, p)) in row.iter().zip(probs.row_mut(r)).enumerate() {
                let lp = v - lse;
                *p = lp.exp();
                let q = if c == targets[r] { on } else { off };
                if q != T::zero() {
                    loss = loss - q * lp;
                }
            }
            total = total + loss;
        }
        let out = Tensor::scalar(total / T::lit(m as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::SmoothedCe {
                logits,
                targets: targets.to_vec(),
                eps,
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout: identity outside training or when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64) -> Result<Var> {
        if !self.train || p <= 0.0 {
            return Ok(x);
        }
        let (m, n) = self.shape(x);
        let rng = match self.rng.as_deref_mut() {
            Some(r) => r,
            None => return Ok(x),
        };
        let keep = T::lit(1.0 / (1.0 - p));
        let data: Vec<T> = (0..m * n)
            .map(|_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        self.mul_const(x, Tensor::from_vec(m, n, data)?)
    }

    /// Reverse pass from a `1×1` output.
    pub fn backward(&self, out: Var) -> Result<Gradients<T>> {
        if self.shape(out) != (1, 1) {
            return Err(Error::shape("backward", format!("output {:?}", self.shape(out))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Tensor::scalar(T::one()));
        let mut result = Gradients::new(self.params.len());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop(&node.op, Var(i), g, &mut grads, &mut result);
        }
        Ok(result)
    }

    fn backprop(
        &self,
        op: &Op<T>,
        me: Var,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        result: &mut Gradients<T>,
    ) {
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        match op {
            Op::Input => {}
            Op::Param(id) => result.accumulate(*id, g),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.shape();
                let n = tb.cols();
                if self.rg(*a) {
                    let da = matmul_nt(g.data(), tb.data(), m, n, k);
                    acc(*a, Tensor::from_vec(m, k, da).expect("shape"));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    matmul_tn_acc(ta.data(), g.data(), m, k, n, &mut db);
                    acc(*b, Tensor::from_vec(k, n, db).expect("shape"));
                }
            }
            Op::MatMulT(a, b) => {
                // C = A·Bᵀ, dA = dC·B, dB = dCᵀ·A
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.shape();
                let n = tb.rows();
                if self.rg(*a) {
                    let da = matmul_nn(g.data(), tb.data(), m, n, k);
                    acc(*a, Tensor::from_vec(m, k, da).expect("shape"));
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); n * k];
                    matmul_tn_acc(g.data(), ta.data(), m, n, k, &mut db);
                    acc(*b, Tensor::from_vec(n, k, db).expect("shape"));
                }
            }
            Op::Add(a, b) => {
                acc(*b, g.clone());
                acc(*a, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.map(|v| -v));
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ga = zip_map(&g, tb, |x, y| x * y);
                let gb = zip_map(&g, ta, |x, y| x * y);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::AddRow(a, row) => {
                let n = g.cols();
                let mut gr = vec![T::zero(); n];
                for r in 0..g.rows() {
                    for (s, &v) in gr.iter_mut().zip(g.row(r)) {
                        *s = *s + v;
                    }
                }
                acc(*row, Tensor::row_vector(gr));
                acc(*a, g);
            }
            Op::MulConst(a, c) => acc(*a, zip_map(&g, c, |x, y| x * y)),
            Op::Scale(a, s) => acc(*a, g.map(|v| v * *s)),
            Op::ScaleBy(a, s) => {
                let sv = self.scalar(*s);
                let ta = self.value(*a);
                let ds: T = g.data().iter().zip(ta.data()).map(|(&x, &y)| x * y).sum();
                acc(*s, Tensor::scalar(ds));
                acc(*a, g.map(|v| v * sv));
            }
            Op::Exp(a) => {
                let y = self.value(me);
                acc(*a, zip_map(&g, y, |x, y| x * y));
            }
            Op::Log(a) => {
                let x = self.value(*a);
                acc(*a, zip_map(&g, x, |d, x| d / x));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(
                    *a,
                    zip_map(&g, x, |d, x| if x > T::zero() { d } else { T::zero() }),
                );
            }
            Op::Gelu(a) => {
                let c = T::lit(GELU_C);
                let k = T::lit(0.044715);
                let half = T::lit(0.5);
                let three = T::lit(3.0);
                let x = self.value(*a);
                acc(
                    *a,
                    zip_map(&g, x, |d, x| {
                        let t = (c * (x + k * x * x * x)).tanh();
                        let dt = (T::one() - t * t) * c * (T::one() + three * k * x * x);
                        d * (half * (T::one() + t) + half * x * dt)
                    }),
                );
            }
            Op::Softmax(a) => {
                let y = self.value(me);
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum();
                    for ((o, &p), &d) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = p * (d - dot);
                    }
                }
                acc(*a, dx);
            }
            Op::LogSoftmax(a) => {
                let y = self.value(me);
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s: T = gr.iter().copied().sum();
                    for ((o, &ly), &d) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = d - ly.exp() * s;
                    }
                }
                acc(*a, dx);
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma).data();
                let (m, n) = g.shape();
                let nf = T::lit(n as f64);
                let mut dx = Tensor::zeros(m, n);
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for r in 0..m {
                    let (gr, xr) = (g.row(r), xhat.row(r));
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for c in 0..n {
                        let dxh = gr[c] * gm[c];
                        s1 = s1 + dxh;
                        s2 = s2 + dxh * xr[c];
                        dgamma[c] = dgamma[c] + gr[c] * xr[c];
                        dbeta[c] = dbeta[c] + gr[c];
                    }
                    let (m1, m2) = (s1 / nf, s2 / nf);
                    let inv = inv_std[r];
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = inv * (gr[c] * gm[c] - m1 - xr[c] * m2);
                    }
                }
                acc(*gamma, Tensor::row_vector(dgamma));
                acc(*beta, Tensor::row_vector(dbeta));
                acc(*x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma).data();
                let (m, n) = g.shape();
                let mf = T::lit(m as f64);
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                for r in 0..m {
                    for c in 0..n {
                        dgamma[c] = dgamma[c] + g.get(r, c) * xhat.get(r, c);
                        dbeta[c] = dbeta[c] + g.get(r, c);
                    }
                }
                let mut dx = Tensor::zeros(m, n);
                for r in 0..m {
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        let dxh = g.get(r, c) * gm[c];
                        // mean(dxhat) = gamma*dbeta/m, mean(dxhat*xhat) = gamma*dgamma/m
                        *o = inv_std[c]
                            * (dxh - gm[c] * dbeta[c] / mf - xhat.get(r, c) * gm[c] * dgamma[c] / mf);
                    }
                }
                acc(*gamma, Tensor::row_vector(dgamma));
                acc(*beta, Tensor::row_vector(dbeta));
                acc(*x, dx);
            }
            Op::BatchNormFrozen {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gm = self.value(*gamma).data();
                let (m, n) = g.shape();
                let mut dgamma = vec![T::zero(); n];
                let mut dbeta = vec![T::zero(); n];
                let mut dx = Tensor::zeros(m, n);
                for r in 0..m {
                    for c in 0..n {
                        let gv = g.get(r, c);
                        dgamma[c] = dgamma[c] + gv * xhat.get(r, c);
                        dbeta[c] = dbeta[c] + gv;
                        dx.set(r, c, gv * gm[c] * inv_std[c]);
                    }
                }
                acc(*gamma, Tensor::row_vector(dgamma));
                acc(*beta, Tensor::row_vector(dbeta));
                acc(*x, dx);
            }
            Op::Unfold { x, spans, k } => {
                let (m, c) = self.shape(*x);
                let mut dx = Tensor::zeros(m, c);
                let mut o = 0;
                for &(s, e) in spans {
                    for j in s..=e - k {
                        let src = g.row(o);
                        let dst = &mut dx.data_mut()[j * c..(j + k) * c];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = *d + v;
                        }
                        o += 1;
                    }
                }
                acc(*x, dx);
            }
            Op::SegmentMean { x, spans } => {
                let (m, c) = self.shape(*x);
                let mut dx = Tensor::zeros(m, c);
                for (i, &(s, e)) in spans.iter().enumerate() {
                    let inv = T::one() / T::lit((e - s) as f64);
                    let gr = g.row(i);
                    for r in s..e {
                        for (d, &v) in dx.row_mut(r).iter_mut().zip(gr) {
                            *d = *d + v * inv;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Gather { table, ids } => {
                let (d, c) = self.shape(*table);
                let mut dt = Tensor::zeros(d, c);
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *o = *o + v;
                    }
                }
                acc(*table, dt);
            }
            Op::SliceRows(x, start) => {
                let (m, c) = self.shape(*x);
                let mut dx = Tensor::zeros(m, c);
                dx.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*x, dx);
            }
            Op::SliceCols(x, start) => {
                let (m, c) = self.shape(*x);
                let len = g.cols();
                let mut dx = Tensor::zeros(m, c);
                for r in 0..m {
                    dx.row_mut(r)[*start..start + len].copy_from_slice(g.row(r));
                }
                acc(*x, dx);
            }
            Op::ConcatRows(xs) => {
                let c = g.cols();
                let mut off = 0;
                for &v in xs {
                    let rows = self.shape(v).0;
                    let part = g.data()[off * c..(off + rows) * c].to_vec();
                    acc(v, Tensor::from_vec(rows, c, part).expect("shape"));
                    off += rows;
                }
            }
            Op::ConcatCols(xs) => {
                let m = g.rows();
                let mut off = 0;
                for &v in xs {
                    let c = self.shape(v).1;
                    let mut part = Tensor::zeros(m, c);
                    for r in 0..m {
                        part.row_mut(r).copy_from_slice(&g.row(r)[off..off + c]);
                    }
                    acc(v, part);
                    off += c;
                }
            }
            Op::L2Normalize { x, norms } => {
                let y = self.value(me);
                let mut dx = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in dx.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = (gv - yv * dot) / norms[r];
                    }
                }
                acc(*x, dx);
            }
            Op::RowMax { x, arg } => {
                let (m, n) = self.shape(*x);
                let mut dx = Tensor::zeros(m, n);
                for (r, &c) in arg.iter().enumerate() {
                    dx.set(r, c, g.get(r, 0));
                }
                acc(*x, dx);
            }
            Op::ColMax { x, arg } => {
                let (m, n) = self.shape(*x);
                let mut dx = Tensor::zeros(m, n);
                for (c, &r) in arg.iter().enumerate() {
                    dx.set(r, c, g.get(0, c));
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let (m, n) = self.shape(*x);
                acc(*x, Tensor::filled(m, n, g.item()));
            }
            Op::Mean(x) => {
                let (m, n) = self.shape(*x);
                acc(*x, Tensor::filled(m, n, g.item() / T::lit((m * n) as f64)));
            }
            Op::Stack(items) => {
                for (i, &v) in items.iter().enumerate() {
                    acc(v, Tensor::scalar(g.data()[i]));
                }
            }
            Op::Diag(x) => {
                let (n, _) = self.shape(*x);
                let mut dx = Tensor::zeros(n, n);
                for i in 0..n {
                    dx.set(i, i, g.get(i, 0));
                }
                acc(*x, dx);
            }
            Op::SmoothedCe {
                logits,
                targets,
                eps,
                probs,
            } => {
                let (m, d) = probs.shape();
                let (on, off) = smoothing_weights(*eps, d);
                let scale = g.item() / T::lit(m as f64);
                let mut dl = Tensor::zeros(m, d);
                for r in 0..m {
                    for (c, (o, &p)) in dl.row_mut(r).iter_mut().zip(probs.row(r)).enumerate() {
                        let q = if c == targets[r] { on } else { off };
                        *o = (p - q) * scale;
                    }
                }
                acc(*logits, dl);
            }
        }
    }
}

fn smoothing_weights<T: Real>(eps: T, d: usize) -> (T, T) {
    if d <= 1 {
        return (T::one(), T::zero());
    }
    (T::one() - eps, eps / T::lit((d - 1) as f64))
}

pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
    if mx == T::neg_infinity() {
        return mx;
    }
    mx + row.iter().map(|&v| (v - mx).exp()).sum::<T>().ln()
}

/// Index and value of the maximum; the first index wins ties.
pub(crate) fn argmax<T: Real>(row: &[T]) -> (usize, T) {
    let mut best = (0, T::neg_infinity());
    for (i, &v) in row.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("zip_map shape")
}

fn affine_rows<T: Real>(x: &Tensor<T>, gamma: &[T], beta: &[T]) -> Tensor<T> {
    let mut out = x.clone();
    for r in 0..x.rows() {
        for ((o, &g), &b) in out.row_mut(r).iter_mut().zip(gamma).zip(beta) {
            *o = *o * g + b;
        }
    }
    out
}
