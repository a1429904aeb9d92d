//! Visual encoder, language encoder and the vision-to-language mapper.
//!
//! Batches are row-concatenations: a batch of videos becomes one matrix of
//! visual tokens plus a length per video, and likewise for gloss sequences.

use serde::{Deserialize, Serialize};

use crate::corpus::FrameSequence;
use crate::error::{Error, Result};
use crate::nncore::layers::{
    add_positions, conv_out_len, BatchNorm1d, Builder, Conv1d, Embedding, LayerNorm, Linear,
    StackShape, TransformerEncoder,
};
use crate::nncore::{Component, Graph, Real, Tensor, Var};
use crate::segmenter::SegmentSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoderConfig {
    pub c_in: usize,
    pub frame_dim: usize,
    pub model_dim: usize,
    pub conv_kernel: usize,
    pub context_layers: usize,
    pub context_heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
}

impl VisualEncoderConfig {
    pub fn new(c_in: usize) -> Self {
        Self {
            c_in,
            frame_dim: 512,
            model_dim: 1024,
            conv_kernel: 5,
            context_layers: 3,
            context_heads: 8,
            ff_mult: 4,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_kernel % 2 == 0 {
            return Err(Error::invalid(format!("conv_kernel {} must be odd", self.conv_kernel)));
        }
        if self.c_in == 0 || self.frame_dim == 0 || self.model_dim == 0 {
            return Err(Error::invalid("visual encoder dims must be positive"));
        }
        Ok(())
    }

    pub fn context_shape(&self) -> StackShape {
        StackShape {
            layers: self.context_layers,
            dim: self.model_dim,
            heads: self.context_heads,
            ff_mult: self.ff_mult,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageEncoderConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ff_mult: usize,
    pub dropout: f64,
}

impl LanguageEncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            model_dim: 1024,
            encoder_layers: 3,
            heads: 8,
            ff_mult: 4,
            dropout: 0.1,
        }
    }

    fn shape(&self) -> StackShape {
        StackShape {
            layers: self.encoder_layers,
            dim: self.model_dim,
            heads: self.heads,
            ff_mult: self.ff_mult,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapperConfig {
    pub blocks: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub dropout: f64,
}

impl MapperConfig {
    pub fn new(dim: usize) -> Self {
        Self {
            blocks: 3,
            in_dim: dim,
            out_dim: dim,
            dropout: 0.1,
        }
    }
}

/// Frame indices fed to the temporal convolution for one span: the span
/// itself, extended by repeating its last frame up to `k` frames.
pub fn padded_indices(start: usize, end: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (start..end).collect();
    while idx.len() < k {
        idx.push(end - 1);
    }
    idx
}

/// Visual tokens of a batch: `Σ N_i` rows plus per-video counts.
#[derive(Clone, Debug)]
pub struct VisualTokens {
    pub tokens: Var,
    pub lengths: Vec<usize>,
    /// Temporal-conv output length of every segment, in batch order.
    pub conv_lengths: Vec<usize>,
}

/// Frame adapter → temporal conv + batch norm + ReLU → mean pool per
/// segment, with an optional context transformer on top.
#[derive(Clone, Debug)]
pub struct VisualEncoder {
    pub cfg: VisualEncoderConfig,
    pub adapter: Linear,
    pub conv: Conv1d,
    pub bn: BatchNorm1d,
    pub context: Option<TransformerEncoder>,
}

impl VisualEncoder {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        cfg: &VisualEncoderConfig,
        with_context: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let adapter = Linear::new(
            &mut b.with_component("frame_adapter", Component::FrameAdapter),
            cfg.c_in,
            cfg.frame_dim,
        )?;
        let mut tb = b.with_component("temporal_conv", Component::TemporalConv);
        let conv = Conv1d::new(&mut tb.sub("conv"), cfg.frame_dim, cfg.model_dim, cfg.conv_kernel)?;
        let bn = BatchNorm1d::new(&mut tb.sub("bn"), cfg.model_dim)?;
        let context = if with_context && cfg.context_layers > 0 {
            Some(TransformerEncoder::new(
                &mut b.with_component("context_transformer", Component::ContextTransformer),
                cfg.context_shape(),
            )?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            adapter,
            conv,
            bn,
            context,
        })
    }

    /// One token per segment, in span order, for every video of the batch.
    pub fn tokenize<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &[(&FrameSequence, &SegmentSet)],
    ) -> Result<VisualTokens> {
        let k = self.cfg.conv_kernel;
        let mut rows: Vec<T> = Vec::new();
        let mut spans = Vec::new();
        let mut lengths = Vec::with_capacity(batch.len());
        let mut conv_lengths = Vec::new();
        let mut cursor = 0;
        for (video, segs) in batch {
            if segs.spans.is_empty() {
                return Err(Error::Data {
                    video_id: video.video_id.clone(),
                    detail: "empty segment set".into(),
                });
            }
            if video.feature_dim() != self.cfg.c_in {
                return Err(Error::shape(
                    "encode_segments",
                    format!("{} features per frame, encoder expects {}", video.feature_dim(), self.cfg.c_in),
                ));
            }
            for s in &segs.spans {
                if s.is_empty() || s.end > video.num_frames() {
                    return Err(Error::Data {
                        video_id: video.video_id.clone(),
                        detail: format!("span {s:?} outside {} frames", video.num_frames()),
                    });
                }
                let idx = padded_indices(s.start, s.end, k);
                for &i in &idx {
                    rows.extend(video.frames.row(i).iter().map(|&v| T::lit(v as f64)));
                }
                spans.push((cursor, cursor + idx.len()));
                conv_lengths.push(conv_out_len(idx.len(), k).expect("padded to kernel"));
                cursor += idx.len();
            }
            lengths.push(segs.spans.len());
        }
        let frames = g.input(Tensor::from_vec(cursor, self.cfg.c_in, rows)?);
        let v = self.adapter.forward(g, frames)?;
        let (y, out_spans) = self.conv.forward(g, v, &spans)?;
        let y = self.bn.forward(g, y)?;
        let y = g.relu(y);
        let tokens = g.segment_mean(y, &out_spans)?;
        Ok(VisualTokens {
            tokens,
            lengths,
            conv_lengths,
        })
    }

    /// Context transformer over `x + PE`, per sequence.
    pub fn contextualize<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        lengths: &[usize],
    ) -> Result<Var> {
        let enc = self
            .context
            .as_ref()
            .ok_or_else(|| Error::invalid("visual encoder was built without a context transformer"))?;
        let x = add_positions(g, x, lengths)?;
        enc.forward(g, x, lengths)
    }
}

/// Three (by default) per-token blocks of LayerNorm → Linear → GELU → Dropout.
#[derive(Clone, Debug)]
pub struct Mapper {
    pub cfg: MapperConfig,
    pub blocks: Vec<(LayerNorm, Linear)>,
}

impl Mapper {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &MapperConfig) -> Result<Self> {
        if cfg.blocks == 0 {
            return Err(Error::invalid("mapper needs at least one block"));
        }
        let mut mb = b.with_component("mapper", Component::Mapper);
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for i in 0..cfg.blocks {
            let d_in = if i == 0 { cfg.in_dim } else { cfg.out_dim };
            let mut bb = mb.sub(&format!("block{i}"));
            let ln = LayerNorm::new(&mut bb.sub("ln"), d_in)?;
            let lin = Linear::new(&mut bb.sub("linear"), d_in, cfg.out_dim)?;
            blocks.push((ln, lin));
        }
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut x = x;
        for (ln, lin) in &self.blocks {
            let h = ln.forward(g, x)?;
            let h = lin.forward(g, h)?;
            let h = g.gelu(h);
            x = g.dropout(h, self.cfg.dropout)?;
        }
        Ok(x)
    }
}

/// Embedding-level and hidden-state-level text representations of a batch.
#[derive(Clone, Debug)]
pub struct TextStates {
    /// `T^E`: embedding rows, no positional information.
    pub embeddings: Var,
    /// `T^H`: encoder over `T^E + PE`.
    pub hidden: Var,
    pub lengths: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct LanguageEncoder {
    pub cfg: LanguageEncoderConfig,
    pub embedding: Embedding,
    pub encoder: TransformerEncoder,
}

impl LanguageEncoder {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &LanguageEncoderConfig) -> Result<Self> {
        let embedding = Embedding::new(
            &mut b.with_component("language_embedding", Component::LanguageEmbedding),
            cfg.vocab_size,
            cfg.model_dim,
        )?;
        let encoder = TransformerEncoder::new(
            &mut b.with_component("language_encoder", Component::LanguageEncoder),
            cfg.shape(),
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            embedding,
            encoder,
        })
    }

    pub fn encode<T: Real>(&self, g: &mut Graph<'_, T>, seqs: &[&[u32]]) -> Result<TextStates> {
        if let Some(i) = seqs.iter().position(|s| s.is_empty()) {
            return Err(Error::invalid(format!("gloss sequence {i} is empty")));
        }
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&i| i as usize)).collect();
        let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let embeddings = self.embedding.forward(g, &ids)?;
        let x = add_positions(g, embeddings, &lengths)?;
        let hidden = self.encoder.forward(g, x, &lengths)?;
        Ok(TextStates {
            embeddings,
            hidden,
            lengths,
        })
    }
}
