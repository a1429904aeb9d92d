//! Layers used by the visual encoder, mapper, language encoder and translator.
//!
//! Layers only hold [`ParamId`]s; values live in a [`ParameterSet`] and are
//! read through a [`Graph`]. Sequence layers take a row-concatenation of
//! several sequences plus their lengths, so per-token work is batched while
//! attention stays within each sequence and no padding is ever introduced.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::graph::{Graph, Var};
use super::params::{Component, ParamId, ParameterSet};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Registers parameters under a name prefix and component tag. An empty
/// prefix names parameters from the root.
pub struct Builder<'p, T: Real> {
    params: &'p mut ParameterSet<T>,
    rng: &'p mut ChaCha8Rng,
    prefix: String,
    component: Component,
}

impl<'p, T: Real> Builder<'p, T> {
    pub fn new(
        params: &'p mut ParameterSet<T>,
        rng: &'p mut ChaCha8Rng,
        prefix: impl Into<String>,
        component: Component,
    ) -> Self {
        Self {
            params,
            rng,
            prefix: prefix.into(),
            component,
        }
    }

    /// Child builder with `prefix.name`.
    pub fn sub(&mut self, name: &str) -> Builder<'_, T> {
        Builder {
            prefix: join(&self.prefix, name),
            params: self.params,
            rng: self.rng,
            component: self.component,
        }
    }

    pub fn with_component(&mut self, name: &str, component: Component) -> Builder<'_, T> {
        Builder {
            prefix: join(&self.prefix, name),
            params: self.params,
            rng: self.rng,
            component,
        }
    }

    fn add(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<ParamId> {
        self.params.add(
            join(&self.prefix, name),
            self.component,
            value,
            trainable,
        )
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, bound: f64) -> Result<ParamId> {
        let data = (0..rows * cols)
            .map(|_| T::lit(self.rng.random_range(-bound..=bound)))
            .collect();
        self.add(name, Tensor::from_vec(rows, cols, data)?, true)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                T::lit(z * std)
            })
            .collect();
        self.add(name, Tensor::from_vec(rows, cols, data)?, true)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> Result<ParamId> {
        self.add(name, Tensor::filled(rows, cols, T::lit(v)), true)
    }

    pub fn buffer(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> Result<ParamId> {
        self.add(name, Tensor::filled(rows, cols, T::lit(v)), false)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Xavier-uniform weights (`in×out`), zero bias.
    pub fn new<T: Real>(b: &mut Builder<'_, T>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        Ok(Self {
            weight: b.uniform("weight", in_dim, out_dim, bound)?,
            bias: b.constant("bias", 1, out_dim, 0.0)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.constant("gamma", 1, dim, 1.0)?,
            beta: b.constant("beta", 1, dim, 0.0)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.layer_norm(x, gm, bt, LN_EPS)
    }
}

/// Batch normalization over time steps; rows of the input are the valid
/// steps of every sequence in the batch.
#[derive(Clone, Debug)]
pub struct BatchNorm1d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm1d {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.constant("gamma", 1, dim, 1.0)?,
            beta: b.constant("beta", 1, dim, 0.0)?,
            running_mean: b.buffer("running_mean", 1, dim, 0.0)?,
            running_var: b.buffer("running_var", 1, dim, 1.0)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let gm = g.param(self.gamma);
        let bt = g.param(self.beta);
        g.batch_norm(
            x,
            gm,
            bt,
            self.running_mean,
            self.running_var,
            BN_MOMENTUM,
            BN_EPS,
        )
    }
}

/// Valid-padding 1-D convolution over time, applied independently within
/// each span of input rows. Output length per span is `n − k + 1`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub kernel: usize,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Conv1d {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        in_dim: usize,
        out_dim: usize,
        kernel: usize,
    ) -> Result<Self> {
        let fan_in = in_dim * kernel;
        let bound = (6.0 / (fan_in + out_dim) as f64).sqrt();
        Ok(Self {
            weight: b.uniform("weight", fan_in, out_dim, bound)?,
            bias: b.constant("bias", 1, out_dim, 0.0)?,
            kernel,
            in_dim,
            out_dim,
        })
    }

    /// Returns the output rows and the output span of each input span.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        spans: &[(usize, usize)],
    ) -> Result<(Var, Vec<(usize, usize)>)> {
        let cols = g.unfold(x, spans, self.kernel)?;
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        let y = g.matmul(cols, w)?;
        let y = g.add_row(y, b)?;
        let mut out_spans = Vec::with_capacity(spans.len());
        let mut off = 0;
        for &(s, e) in spans {
            let n = e - s - self.kernel + 1;
            out_spans.push((off, off + n));
            off += n;
        }
        Ok((y, out_spans))
    }
}

pub fn conv_out_len(n: usize, k: usize) -> Option<usize> {
    n.checked_sub(k).map(|v| v + 1)
}

#[derive(Clone, Debug)]
pub struct Embedding {
    pub table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, vocab: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: b.normal("table", vocab, dim, 1.0)?,
            vocab,
            dim,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.gather(t, ids)
    }
}

/// Sinusoidal position table, `len×dim`.
pub fn sinusoidal_positions<T: Real>(len: usize, dim: usize) -> Tensor<T> {
    let mut t = Tensor::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            let v = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            t.set(pos, i, T::lit(v));
        }
    }
    t
}

/// Position encodings for a row-concatenation of sequences; positions restart
/// at zero for each sequence.
pub fn positions_for<T: Real>(lengths: &[usize], dim: usize) -> Tensor<T> {
    let max = lengths.iter().copied().max().unwrap_or(0);
    let table = sinusoidal_positions::<T>(max, dim);
    let idx: Vec<usize> = lengths.iter().flat_map(|&l| 0..l).collect();
    table.select_rows(&idx)
}

pub fn add_positions<T: Real>(g: &mut Graph<'_, T>, x: Var, lengths: &[usize]) -> Result<Var> {
    let dim = g.shape(x).1;
    let pe = g.input(positions_for(lengths, dim));
    g.add(x, pe)
}

/// Row offsets of each sequence in a concatenation.
pub fn offsets(lengths: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(lengths.len());
    let mut acc = 0;
    for &l in lengths {
        out.push(acc);
        acc += l;
    }
    out
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
    pub dim: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::invalid(format!(
                "model dim {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(&mut b.sub("q"), dim, dim)?,
            k: Linear::new(&mut b.sub("k"), dim, dim)?,
            v: Linear::new(&mut b.sub("v"), dim, dim)?,
            out: Linear::new(&mut b.sub("out"), dim, dim)?,
            heads,
            dim,
        })
    }

    /// Scaled dot-product attention of every query sequence over its paired
    /// key sequence. `mask(query_len, key_len)` returns an optional keep-mask
    /// (row-major, `true` = attend).
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        queries: Var,
        q_lens: &[usize],
        keys: Var,
        k_lens: &[usize],
        mask: impl Fn(usize, usize) -> Option<Vec<bool>>,
    ) -> Result<Var> {
        if q_lens.len() != k_lens.len() {
            return Err(Error::shape(
                "attention",
                format!("{} query vs {} key sequences", q_lens.len(), k_lens.len()),
            ));
        }
        let q = self.q.forward(g, queries)?;
        let k = self.k.forward(g, keys)?;
        let v = self.v.forward(g, keys)?;
        let hd = self.dim / self.heads;
        let scale = T::lit(1.0 / (hd as f64).sqrt());
        let (qo, ko) = (offsets(q_lens), offsets(k_lens));
        let mut seqs = Vec::with_capacity(q_lens.len());
        for s in 0..q_lens.len() {
            let (lq, lk) = (q_lens[s], k_lens[s]);
            if lq == 0 {
                continue;
            }
            let qs = g.slice_rows(q, qo[s], lq)?;
            let ks = g.slice_rows(k, ko[s], lk)?;
            let vs = g.slice_rows(v, ko[s], lk)?;
            let m = mask(lq, lk);
            let mut heads = Vec::with_capacity(self.heads);
            for h in 0..self.heads {
                let qh = g.slice_cols(qs, h * hd, hd)?;
                let kh = g.slice_cols(ks, h * hd, hd)?;
                let vh = g.slice_cols(vs, h * hd, hd)?;
                let scores = g.matmul_t(qh, kh)?;
                let scores = g.scale(scores, scale);
                let p = g.softmax(scores, m.as_deref())?;
                heads.push(g.matmul(p, vh)?);
            }
            seqs.push(if heads.len() == 1 {
                heads[0]
            } else {
                g.concat_cols(&heads)?
            });
        }
        let cat = if seqs.len() == 1 {
            seqs[0]
        } else {
            g.concat_rows(&seqs)?
        };
        self.out.forward(g, cat)
    }
}

pub fn causal_mask(lq: usize, lk: usize) -> Option<Vec<bool>> {
    let mut m = vec![false; lq * lk];
    for i in 0..lq {
        for j in 0..lk.min(i + 1) {
            m[i * lk + j] = true;
        }
    }
    Some(m)
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(&mut b.sub("up"), dim, hidden)?,
            down: Linear::new(&mut b.sub("down"), hidden, dim)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.up.forward(g, x)?;
        let h = g.gelu(h);
        let h = g.dropout(h, dropout)?;
        self.down.forward(g, h)
    }
}

/// Shape of a transformer stack.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StackShape {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

/// Pre-norm transformer encoder with a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub layers: Vec<EncoderLayer>,
    pub final_ln: LayerNorm,
    pub shape: StackShape,
}

impl TransformerEncoder {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, shape: StackShape) -> Result<Self> {
        let mut layers = Vec::with_capacity(shape.layers);
        for i in 0..shape.layers {
            let mut lb = b.sub(&format!("layer{i}"));
            layers.push(EncoderLayer {
                ln_attn: LayerNorm::new(&mut lb.sub("ln_attn"), shape.dim)?,
                attn: MultiHeadAttention::new(&mut lb.sub("attn"), shape.dim, shape.heads)?,
                ln_ff: LayerNorm::new(&mut lb.sub("ln_ff"), shape.dim)?,
                ff: FeedForward::new(&mut lb.sub("ff"), shape.dim, shape.dim * shape.ff_mult)?,
            });
        }
        Ok(Self {
            layers,
            final_ln: LayerNorm::new(&mut b.sub("final_ln"), shape.dim)?,
            shape,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var, lengths: &[usize]) -> Result<Var> {
        let p = self.shape.dropout;
        let mut x = x;
        for layer in &self.layers {
            let h = layer.ln_attn.forward(g, x)?;
            let h = layer.attn.forward(g, h, lengths, h, lengths, |_, _| None)?;
            let h = g.dropout(h, p)?;
            x = g.add(x, h)?;
            let h = layer.ln_ff.forward(g, x)?;
            let h = layer.ff.forward(g, h, p)?;
            let h = g.dropout(h, p)?;
            x = g.add(x, h)?;
        }
        self.final_ln.forward(g, x)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

/// Pre-norm transformer decoder with causal self-attention and
/// cross-attention to encoder states.
#[derive(Clone, Debug)]
pub struct TransformerDecoder {
    pub layers: Vec<DecoderLayer>,
    pub final_ln: LayerNorm,
    pub shape: StackShape,
}

impl TransformerDecoder {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, shape: StackShape) -> Result<Self> {
        let mut layers = Vec::with_capacity(shape.layers);
        for i in 0..shape.layers {
            let mut lb = b.sub(&format!("layer{i}"));
            layers.push(DecoderLayer {
                ln_self: LayerNorm::new(&mut lb.sub("ln_self"), shape.dim)?,
                self_attn: MultiHeadAttention::new(&mut lb.sub("self_attn"), shape.dim, shape.heads)?,
                ln_cross: LayerNorm::new(&mut lb.sub("ln_cross"), shape.dim)?,
                cross_attn: MultiHeadAttention::new(
                    &mut lb.sub("cross_attn"),
                    shape.dim,
                    shape.heads,
                )?,
                ln_ff: LayerNorm::new(&mut lb.sub("ln_ff"), shape.dim)?,
                ff: FeedForward::new(&mut lb.sub("ff"), shape.dim, shape.dim * shape.ff_mult)?,
            });
        }
        Ok(Self {
            layers,
            final_ln: LayerNorm::new(&mut b.sub("final_ln"), shape.dim)?,
            shape,
        })
    }

    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        lengths: &[usize],
        memory: Var,
        mem_lengths: &[usize],
    ) -> Result<Var> {
        let p = self.shape.dropout;
        let mut x = x;
        for layer in &self.layers {
            let h = layer.ln_self.forward(g, x)?;
            let h = layer.self_attn.forward(g, h, lengths, h, lengths, causal_mask)?;
            let h = g.dropout(h, p)?;
            x = g.add(x, h)?;
            let h = layer.ln_cross.forward(g, x)?;
            let h = layer
                .cross_attn
                .forward(g, h, lengths, memory, mem_lengths, |_, _| None)?;
            let h = g.dropout(h, p)?;
            x = g.add(x, h)?;
            let h = layer.ln_ff.forward(g, x)?;
            let h = layer.ff.forward(g, h, p)?;
            let h = g.dropout(h, p)?;
            x = g.add(x, h)?;
        }
        self.final_ln.forward(g, x)
    }
}
