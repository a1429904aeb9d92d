//! Two-stage training: contrastive pretraining of the visual path against
//! pseudo-glosses, then translation fine-tuning. Also run configuration,
//! datasets, epoch logs, evaluation and ablation grids.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::synth::{generate_synthetic, GroundTruth, SyntheticSpec};
use crate::corpus::{build_vocabulary, extract_pseudo_gloss, FrameSequence, Pos, TaggedSentence, Vocabulary};
use crate::error::{Error, Result};
use crate::losses::{
    clcl_loss, clip_global_loss, dual_level_loss, initial_temperature_logit, token_similarity_aggregate,
};
use crate::metrics::{alignment_accuracy, segment_gloss_truth, EvalReport};
use crate::model::{
    LanguageEncoder, LanguageEncoderConfig, Mapper, MapperConfig, VisualEncoder, VisualEncoderConfig,
};
use crate::nncore::layers::Builder;
use crate::nncore::{
    apply_buffer_updates, Checkpoint, Component, Graph, OptimizerState, ParamId, ParameterSet, RngState,
    Schedule, SgdConfig, Tensor, Var,
};
use crate::segmenter::{
    reduction_report, segment_motion_energy, segment_oracle, segment_uniform, SegmentSet,
};
use crate::translate::{decode, frame_target, load_stage1, Hypothesis, TransferPolicy, Translator, TranslatorConfig};

/// Network sizes shared by both stages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub frame_dim: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub context_layers: usize,
    pub language_layers: usize,
    pub mapper_blocks: usize,
    pub translation_encoder_layers: usize,
    pub translation_decoder_layers: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            frame_dim: 512,
            model_dim: 1024,
            heads: 8,
            conv_kernel: 5,
            ff_mult: 4,
            dropout: 0.1,
            context_layers: 3,
            language_layers: 3,
            mapper_blocks: 3,
            translation_encoder_layers: 3,
            translation_decoder_layers: 3,
        }
    }
}

impl ArchConfig {
    /// Widths small enough to train on one CPU core in minutes.
    pub fn desk() -> Self {
        Self {
            frame_dim: 64,
            model_dim: 64,
            heads: 4,
            ff_mult: 2,
            context_layers: 1,
            language_layers: 1,
            translation_encoder_layers: 1,
            translation_decoder_layers: 1,
            ..Self::default()
        }
    }

    pub fn visual(&self, c_in: usize) -> VisualEncoderConfig {
        VisualEncoderConfig {
            c_in,
            frame_dim: self.frame_dim,
            model_dim: self.model_dim,
            conv_kernel: self.conv_kernel,
            context_layers: self.context_layers,
            context_heads: self.heads,
            ff_mult: self.ff_mult,
            dropout: self.dropout,
        }
    }

    pub fn mapper(&self) -> MapperConfig {
        MapperConfig {
            blocks: self.mapper_blocks,
            in_dim: self.model_dim,
            out_dim: self.model_dim,
            dropout: self.dropout,
        }
    }

    pub fn language(&self, vocab_size: usize) -> LanguageEncoderConfig {
        LanguageEncoderConfig {
            vocab_size,
            model_dim: self.model_dim,
            encoder_layers: self.language_layers,
            heads: self.heads,
            ff_mult: self.ff_mult,
            dropout: self.dropout,
        }
    }

    pub fn translator(&self, vocab_size: usize, ft: &FinetuneConfig) -> TranslatorConfig {
        TranslatorConfig {
            vocab_size,
            encoder_layers: self.translation_encoder_layers,
            decoder_layers: self.translation_decoder_layers,
            heads: self.heads,
            model_dim: self.model_dim,
            ff_mult: self.ff_mult,
            dropout: self.dropout,
            max_decode_len: ft.max_decode_len,
            beam_width: ft.beam_width,
            length_penalty: ft.length_penalty,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmenterChoice {
    Oracle,
    MotionEnergy { smooth_window: usize, min_len: usize },
    Uniform { factor: usize },
}

impl Default for SegmenterChoice {
    fn default() -> Self {
        Self::MotionEnergy {
            smooth_window: 3,
            min_len: 5,
        }
    }
}

impl SegmenterChoice {
    pub fn segment(&self, video: &FrameSequence, truth: Option<&GroundTruth>) -> Result<SegmentSet> {
        match self {
            Self::Oracle => {
                let t = truth.ok_or_else(|| Error::Data {
                    video_id: video.video_id.clone(),
                    detail: "oracle segmentation needs ground truth".into(),
                })?;
                segment_oracle(t)
            }
            Self::MotionEnergy {
                smooth_window,
                min_len,
            } => segment_motion_energy(video, *smooth_window, *min_len),
            Self::Uniform { factor } => segment_uniform(video, *factor),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Clcl,
    Clip,
}

impl std::str::FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clcl" => Ok(Self::Clcl),
            "clip" => Ok(Self::Clip),
            _ => Err(Error::invalid(format!("unknown loss mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub batch_size: usize,
    pub optim: SgdConfig,
    pub loss_mode: LossMode,
    /// Align against both the embedding and hidden-state levels. Off means
    /// hidden states only.
    pub dual: bool,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            optim: SgdConfig {
                lr: 0.03,
                momentum: 0.9,
                weight_decay: 0.0,
                grad_clip: 1.0,
                epochs: 80,
                schedule: Schedule::Cosine,
                warmup_epochs: 0,
            },
            loss_mode: LossMode::Clcl,
            dual: true,
            alpha: 0.5,
            beta: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub batch_size: usize,
    pub optim: SgdConfig,
    pub label_smoothing: f64,
    pub policy: TransferPolicy,
    pub validate_every: usize,
    pub beam_width: usize,
    pub max_decode_len: usize,
    pub length_penalty: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            optim: SgdConfig {
                lr: 0.004,
                momentum: 0.9,
                weight_decay: 0.001,
                grad_clip: 5.0,
                epochs: 80,
                schedule: Schedule::Cosine,
                warmup_epochs: 0,
            },
            label_smoothing: 0.2,
            policy: TransferPolicy::Vle,
            validate_every: 5,
            beam_width: 4,
            max_decode_len: 150,
            length_penalty: 1.0,
        }
    }
}

/// Everything that determines a run. Defaults are the published settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub arch: ArchConfig,
    pub segmenter: SegmenterChoice,
    /// σ of Gaussian noise added to frame features during training.
    pub feature_noise: f64,
    pub min_count: usize,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.pretrain.optim.validate()?;
        self.finetune.optim.validate()?;
        if self.pretrain.batch_size < 2 {
            return Err(Error::invalid(format!(
                "pretraining batch size {} leaves no in-batch negatives",
                self.pretrain.batch_size
            )));
        }
        if self.finetune.batch_size == 0 {
            return Err(Error::invalid("finetune batch size must be positive"));
        }
        for (name, v) in [("alpha", self.pretrain.alpha), ("beta", self.pretrain.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{name}={v} outside [0,1]")));
            }
        }
        if !(0.0..1.0).contains(&self.finetune.label_smoothing) {
            return Err(Error::invalid("label_smoothing must be in [0,1)"));
        }
        if !(self.feature_noise >= 0.0) {
            return Err(Error::invalid("feature_noise must be non-negative"));
        }
        if self.min_count == 0 {
            return Err(Error::invalid("min_count must be at least 1"));
        }
        if self.finetune.beam_width == 0 || self.finetune.max_decode_len == 0 {
            return Err(Error::invalid("beam_width and max_decode_len must be positive"));
        }
        if self.arch.model_dim % self.arch.heads.max(1) != 0 || self.arch.heads == 0 {
            return Err(Error::invalid("model_dim must be divisible by heads"));
        }
        Ok(())
    }

    /// Short stable digest of the serialized config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            arch: ArchConfig::default(),
            segmenter: SegmenterChoice::default(),
            feature_noise: 0.0,
            min_count: 1,
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

/// One video with its segmentation, transcript and ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub video: FrameSequence,
    pub segments: SegmentSet,
    pub sentence: TaggedSentence,
    pub truth: Option<GroundTruth>,
    pub gloss_words: Vec<String>,
    pub gloss_ids: Vec<u32>,
    /// `BOS words EOS`.
    pub target: Vec<u32>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Joins videos with transcripts (and optional truth) by video id and
    /// segments every video.
    pub fn build(
        videos: Vec<FrameSequence>,
        sentences: &[TaggedSentence],
        truth: Option<&[GroundTruth]>,
        vocab: &Vocabulary,
        segmenter: &SegmenterChoice,
    ) -> Result<Self> {
        let by_id: HashMap<&str, &TaggedSentence> =
            sentences.iter().map(|s| (s.video_id.as_str(), s)).collect();
        let truth_by_id: HashMap<&str, &GroundTruth> = truth
            .unwrap_or(&[])
            .iter()
            .map(|t| (t.video_id.as_str(), t))
            .collect();
        let mut samples = Vec::with_capacity(videos.len());
        for video in videos {
            let sentence = (*by_id.get(video.video_id.as_str()).ok_or_else(|| Error::Data {
                video_id: video.video_id.clone(),
                detail: "no transcript".into(),
            })?)
            .clone();
            let truth = truth_by_id.get(video.video_id.as_str()).map(|t| (*t).clone());
            let segments = segmenter.segment(&video, truth.as_ref())?;
            let gloss = extract_pseudo_gloss(&sentence, &Pos::CONTENT);
            let gloss_ids = gloss.to_ids(vocab).glosses;
            let target = frame_target(&vocab.encode(&sentence.texts()));
            samples.push(Sample {
                video,
                segments,
                sentence,
                truth,
                gloss_words: gloss.words,
                gloss_ids,
                target,
            });
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn segment_sets(&self) -> Vec<SegmentSet> {
        self.samples.iter().map(|s| s.segments.clone()).collect()
    }
}

/// Train/validation/test splits of one synthetic corpus with a training
/// vocabulary.
#[derive(Clone, Debug)]
pub struct ExperimentData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub vocab: Vocabulary,
    pub c_in: usize,
}

impl ExperimentData {
    pub fn synthetic(
        spec: &SyntheticSpec,
        sizes: [usize; 3],
        segmenter: &SegmenterChoice,
        min_count: usize,
    ) -> Result<Self> {
        let [n_train, n_val, n_test] = sizes;
        let corpus = generate_synthetic(spec, n_train + n_val + n_test)?;
        let vocab = build_vocabulary(&corpus.sentences[..n_train], min_count)?;
        let split = |lo: usize, hi: usize| {
            Dataset::build(
                corpus.videos[lo..hi].to_vec(),
                &corpus.sentences[lo..hi],
                Some(&corpus.truth[lo..hi]),
                &vocab,
                segmenter,
            )
        };
        Ok(Self {
            train: split(0, n_train)?,
            val: split(n_train, n_train + n_val)?,
            test: split(n_train + n_val, n_train + n_val + n_test)?,
            vocab,
            c_in: spec.prototype_dim,
        })
    }
}

/// Stage-1 network: visual encoder with context transformer, mapper,
/// language encoder and the temperature logit.
#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub visual: VisualEncoder,
    pub mapper: Mapper,
    pub language: LanguageEncoder,
    pub temperature: ParamId,
}

/// Loss terms of one pretraining batch.
#[derive(Clone, Copy, Debug)]
pub struct PretrainTerms {
    pub total: Var,
    pub ce: Option<Var>,
    pub hs: Option<Var>,
}

impl PretrainModel {
    pub fn build<T: crate::nncore::Real>(
        arch: &ArchConfig,
        c_in: usize,
        vocab_size: usize,
        seed: u64,
    ) -> Result<(ParameterSet<T>, Self)> {
        let mut params = ParameterSet::new();
        let mut rng = init_rng(seed, 1);
        let model = {
            let mut b = Builder::new(&mut params, &mut rng, "", Component::FrameAdapter);
            let visual = VisualEncoder::new(&mut b, &arch.visual(c_in), true)?;
            let mapper = Mapper::new(&mut b, &arch.mapper())?;
            let language = LanguageEncoder::new(&mut b, &arch.language(vocab_size))?;
            let temperature = b
                .with_component("temperature", Component::Temperature)
                .constant("logit", 1, 1, initial_temperature_logit())?;
            Self {
                visual,
                mapper,
                language,
                temperature,
            }
        };
        Ok((params, model))
    }

    /// Mapped visual tokens `L` and text states for a batch.
    fn encode<T: crate::nncore::Real>(
        &self,
        g: &mut Graph<'_, T>,
        pairs: &[(&FrameSequence, &SegmentSet)],
        glosses: &[&[u32]],
    ) -> Result<(Var, Vec<usize>, crate::model::TextStates)> {
        let vt = self.visual.tokenize(g, pairs)?;
        let l = self.mapper.forward(g, vt.tokens)?;
        let text = self.language.encode(g, glosses)?;
        Ok((l, vt.lengths, text))
    }

    pub fn loss<T: crate::nncore::Real>(
        &self,
        g: &mut Graph<'_, T>,
        pairs: &[(&FrameSequence, &SegmentSet)],
        glosses: &[&[u32]],
        cfg: &PretrainConfig,
    ) -> Result<PretrainTerms> {
        if pairs.len() < 2 {
            return Err(Error::invalid("contrastive batch needs at least two samples"));
        }
        let (l, v_lens, text) = self.encode(g, pairs, glosses)?;
        let s = g.param(self.temperature);
        let inv_tau = g.exp(s);
        let level = |g: &mut Graph<'_, T>, v: Var, t: Var| -> Result<Var> {
            match cfg.loss_mode {
                LossMode::Clcl => {
                    let sim = token_similarity_aggregate(g, v, &v_lens, t, &text.lengths)?;
                    clcl_loss(g, &sim, inv_tau, cfg.alpha)
                }
                LossMode::Clip => clip_global_loss(g, v, &v_lens, t, &text.lengths, inv_tau),
            }
        };
        let has_context = self.visual.context.is_some();
        let ce = if cfg.dual || !has_context {
            Some(level(g, l, text.embeddings)?)
        } else {
            None
        };
        let hs = if has_context {
            let h = self.visual.contextualize(g, l, &v_lens)?;
            Some(level(g, h, text.hidden)?)
        } else {
            None
        };
        let total = match (ce, hs) {
            (Some(c), Some(h)) => dual_level_loss(g, c, h, cfg.beta)?,
            (Some(c), None) => c,
            (None, Some(h)) => h,
            (None, None) => unreachable!("at least one level is active"),
        };
        Ok(PretrainTerms { total, ce, hs })
    }

    /// Embedding-level cosine grid of each video against its own glosses.
    pub fn similarity_grids(&self, params: &ParameterSet<f32>, data: &Dataset) -> Result<Vec<Tensor<f32>>> {
        let mut out = Vec::with_capacity(data.len());
        for s in &data.samples {
            if s.gloss_ids.is_empty() {
                out.push(Tensor::zeros(s.segments.len(), 0));
                continue;
            }
            let mut g = Graph::eval(params);
            let (l, v_lens, text) = self.encode(&mut g, &[(&s.video, &s.segments)], &[&s.gloss_ids])?;
            let sim = token_similarity_aggregate(&mut g, l, &v_lens, text.embeddings, &text.lengths)?;
            out.push(g.value(sim.grids[0][0]).clone());
        }
        Ok(out)
    }

    /// Embedding-level `Z_V2T` and `Z_T2V` over a whole dataset, skipping
    /// samples without glosses.
    pub fn similarity_matrices(&self, params: &ParameterSet<f32>, data: &Dataset) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let keep: Vec<&Sample> = data.samples.iter().filter(|s| !s.gloss_ids.is_empty()).collect();
        if keep.is_empty() {
            return Err(Error::invalid("no sample has a pseudo-gloss"));
        }
        let pairs: Vec<(&FrameSequence, &SegmentSet)> = keep.iter().map(|s| (&s.video, &s.segments)).collect();
        let glosses: Vec<&[u32]> = keep.iter().map(|s| s.gloss_ids.as_slice()).collect();
        let mut g = Graph::eval(params);
        let (l, v_lens, text) = self.encode(&mut g, &pairs, &glosses)?;
        let sim = token_similarity_aggregate(&mut g, l, &v_lens, text.embeddings, &text.lengths)?;
        Ok((g.value(sim.z_v2t).clone(), g.value(sim.z_t2v).clone()))
    }

    /// Share of matched visual tokens whose best gloss is the true one.
    pub fn alignment_accuracy(&self, params: &ParameterSet<f32>, data: &Dataset) -> Result<f64> {
        let grids = self.similarity_grids(params, data)?;
        let truth = gloss_truth(data)?;
        alignment_accuracy(&grids, &truth)
    }
}

fn gloss_truth(data: &Dataset) -> Result<Vec<Vec<Option<usize>>>> {
    data.samples
        .iter()
        .map(|s| {
            let t = s.truth.as_ref().ok_or_else(|| Error::Data {
                video_id: s.video.video_id.clone(),
                detail: "alignment accuracy needs ground truth".into(),
            })?;
            Ok(segment_gloss_truth(&s.segments, t, &s.gloss_words))
        })
        .collect()
}

/// Writes one similarity CSV per video plus the dataset-level `Z` matrices.
/// Rows are visual tokens with their spans; columns are gloss tokens.
pub fn export_similarity(
    model: &PretrainModel,
    params: &ParameterSet<f32>,
    data: &Dataset,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let grids = model.similarity_grids(params, data)?;
    let mut written = Vec::new();
    for (s, grid) in data.samples.iter().zip(&grids) {
        if s.gloss_ids.is_empty() {
            continue;
        }
        let mut csv = String::from("token,start,end");
        for w in &s.gloss_words {
            csv.push(',');
            csv.push_str(w);
        }
        csv.push('\n');
        for (i, span) in s.segments.spans.iter().enumerate() {
            csv.push_str(&format!("{i},{},{}", span.start, span.end));
            for v in grid.row(i) {
                csv.push_str(&format!(",{v:.6}"));
            }
            csv.push('\n');
        }
        let path = dir.join(format!("{}.csv", s.video.video_id));
        crate::corpus::io::write_bytes(&path, csv.as_bytes())?;
        written.push(path);
    }
    let (v2t, t2v) = model.similarity_matrices(params, data)?;
    let ids: Vec<&str> = data
        .samples
        .iter()
        .filter(|s| !s.gloss_ids.is_empty())
        .map(|s| s.video.video_id.as_str())
        .collect();
    for (name, z) in [("z_v2t.csv", v2t), ("z_t2v.csv", t2v)] {
        let mut csv = format!("video,{}\n", ids.join(","));
        for (i, id) in ids.iter().enumerate() {
            csv.push_str(id);
            for v in z.row(i) {
                csv.push_str(&format!(",{v:.6}"));
            }
            csv.push('\n');
        }
        let path = dir.join(name);
        crate::corpus::io::write_bytes(&path, csv.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    /// Mean training loss per active term; `total` is the optimized one.
    pub losses: BTreeMap<String, f64>,
    pub lr: f64,
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validation: Option<EvalReport>,
}

impl EpochLog {
    /// The log with wall time zeroed, for run-to-run comparison.
    pub fn masked(&self) -> Self {
        Self {
            wall_time: 0.0,
            ..self.clone()
        }
    }
}

/// Adds Gaussian feature noise; a no-op clone when `sigma == 0`.
pub fn augment(video: &FrameSequence, sigma: f64, rng: &mut ChaCha8Rng) -> Result<FrameSequence> {
    if sigma == 0.0 {
        return Ok(video.clone());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let mut frames = video.frames.clone();
    for v in frames.data_mut() {
        *v += normal.sample(rng) as f32;
    }
    FrameSequence::new(video.video_id.clone(), frames, video.fps)
}

struct Epoch<'a> {
    params: &'a mut ParameterSet<f32>,
    opt: &'a mut OptimizerState<f32>,
    rng: &'a mut ChaCha8Rng,
    noise: f64,
}

impl Epoch<'_> {
    /// Shuffles `samples`, steps once per batch and returns mean terms.
    fn run<F>(&mut self, samples: &[&Sample], batch_size: usize, drop_last: bool, mut forward: F) -> Result<BTreeMap<String, f64>>
    where
        F: FnMut(&mut Graph<'_, f32>, &[(&FrameSequence, &SegmentSet)], &[&Sample]) -> Result<Vec<(&'static str, Var)>>,
    {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(self.rng);
        let mut sums: BTreeMap<String, f64> = BTreeMap::new();
        let mut steps = 0usize;
        for chunk in order.chunks(batch_size) {
            if drop_last && chunk.len() < batch_size {
                break;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| samples[i]).collect();
            let videos: Vec<FrameSequence> = batch
                .iter()
                .map(|s| augment(&s.video, self.noise, self.rng))
                .collect::<Result<_>>()?;
            let pairs: Vec<(&FrameSequence, &SegmentSet)> =
                videos.iter().zip(&batch).map(|(v, s)| (v, &s.segments)).collect();
            let (grads, updates, values) = {
                let mut g = Graph::train(self.params, Some(&mut *self.rng));
                let terms = forward(&mut g, &pairs, &batch)?;
                let values: Vec<(&'static str, f64)> =
                    terms.iter().map(|(n, v)| (*n, g.scalar(*v) as f64)).collect();
                if values.iter().any(|(_, v)| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("training loss {values:?}")));
                }
                let grads = g.backward(terms[0].1)?;
                (grads, g.take_buffer_updates(), values)
            };
            apply_buffer_updates(self.params, updates);
            self.opt.step(self.params, grads);
            for (n, v) in values {
                *sums.entry(n.to_string()).or_insert(0.0) += v;
            }
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::invalid(format!(
                "{} samples make no batch of {batch_size}",
                samples.len()
            )));
        }
        Ok(sums.into_iter().map(|(k, v)| (k, v / steps as f64)).collect())
    }
}

fn checkpoint_meta(stage: &str, epoch: usize, cfg: &RunConfig, vocab: &Vocabulary, c_in: usize) -> serde_json::Value {
    serde_json::json!({
        "stage": stage,
        "epoch": epoch,
        "c_in": c_in,
        "config": cfg,
        "vocab": vocab,
    })
}

fn meta_epoch(ckpt: &Checkpoint<f32>) -> Result<usize> {
    ckpt.meta["epoch"]
        .as_u64()
        .map(|e| e as usize)
        .ok_or_else(|| Error::Checkpoint("checkpoint meta lacks an epoch".into()))
}

/// Config, vocabulary and input width recorded in a checkpoint.
pub fn checkpoint_context(ckpt: &Checkpoint<f32>) -> Result<(RunConfig, Vocabulary, usize)> {
    let cfg: RunConfig = serde_json::from_value(ckpt.meta["config"].clone())
        .map_err(|e| Error::Checkpoint(format!("checkpoint config: {e}")))?;
    let vocab: Vocabulary = serde_json::from_value(ckpt.meta["vocab"].clone())
        .map_err(|e| Error::Checkpoint(format!("checkpoint vocabulary: {e}")))?;
    let vocab = vocab.reindex()?;
    let c_in = ckpt.meta["c_in"]
        .as_u64()
        .ok_or_else(|| Error::Checkpoint("checkpoint meta lacks c_in".into()))? as usize;
    Ok((cfg, vocab, c_in))
}

pub struct PretrainOutcome {
    pub model: PretrainModel,
    pub checkpoint: Checkpoint<f32>,
    pub logs: Vec<EpochLog>,
}

/// Stage 1. Samples without pseudo-glosses are skipped and the final
/// incomplete batch of each epoch is dropped. `on_epoch` sees every log and
/// the checkpoint taken after that epoch. `resume` continues from a
/// checkpoint written by an earlier call with the same config.
pub fn pretrain(
    cfg: &RunConfig,
    train: &Dataset,
    vocab: &Vocabulary,
    c_in: usize,
    resume: Option<Checkpoint<f32>>,
    mut on_epoch: impl FnMut(&EpochLog, &Checkpoint<f32>) -> Result<()>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let pc = &cfg.pretrain;
    let (fresh, model) = PretrainModel::build::<f32>(&cfg.arch, c_in, vocab.len(), cfg.seed)?;
    let (mut params, mut opt, mut rng, start) = match resume {
        Some(ck) => {
            let start = meta_epoch(&ck)?;
            let opt = ck
                .optimizer
                .ok_or_else(|| Error::Checkpoint("resume checkpoint lacks optimizer state".into()))?;
            let rng = ck
                .rng
                .ok_or_else(|| Error::Checkpoint("resume checkpoint lacks rng state".into()))?
                .restore()?;
            check_same_layout(&fresh, &ck.params)?;
            (ck.params, opt, rng, start)
        }
        None => {
            let opt = OptimizerState::new(pc.optim.clone(), fresh.len())?;
            (fresh, opt, init_rng(cfg.seed, 2), 0)
        }
    };
    let samples: Vec<&Sample> = train.samples.iter().filter(|s| !s.gloss_ids.is_empty()).collect();
    if samples.len() < pc.batch_size {
        return Err(Error::invalid(format!(
            "{} samples with pseudo-glosses, fewer than one batch of {}",
            samples.len(),
            pc.batch_size
        )));
    }
    let mut logs = Vec::new();
    let mut checkpoint = snapshot(&params, &opt, &rng, checkpoint_meta("pretrain", start, cfg, vocab, c_in));
    for epoch in start..pc.optim.epochs {
        let t0 = Instant::now();
        opt.set_epoch(epoch);
        let lr = opt.lr;
        let losses = Epoch {
            params: &mut params,
            opt: &mut opt,
            rng: &mut rng,
            noise: cfg.feature_noise,
        }
        .run(&samples, pc.batch_size, true, |g, pairs, batch| {
            let glosses: Vec<&[u32]> = batch.iter().map(|s| s.gloss_ids.as_slice()).collect();
            let t = model.loss(g, pairs, &glosses, pc)?;
            let mut terms = vec![("total", t.total)];
            terms.extend(t.ce.map(|v| ("ce", v)));
            terms.extend(t.hs.map(|v| ("hs", v)));
            Ok(terms)
        })?;
        let log = EpochLog {
            stage: "pretrain".into(),
            epoch: epoch + 1,
            losses,
            lr,
            wall_time: t0.elapsed().as_secs_f64(),
            validation: None,
        };
        checkpoint = snapshot(&params, &opt, &rng, checkpoint_meta("pretrain", epoch + 1, cfg, vocab, c_in));
        on_epoch(&log, &checkpoint)?;
        logs.push(log);
    }
    Ok(PretrainOutcome {
        model,
        checkpoint,
        logs,
    })
}

fn snapshot(
    params: &ParameterSet<f32>,
    opt: &OptimizerState<f32>,
    rng: &ChaCha8Rng,
    meta: serde_json::Value,
) -> Checkpoint<f32> {
    Checkpoint {
        params: params.clone(),
        optimizer: Some(opt.clone()),
        rng: Some(RngState::capture(rng)),
        meta,
    }
}

fn check_same_layout(a: &ParameterSet<f32>, b: &ParameterSet<f32>) -> Result<()> {
    let names = |p: &ParameterSet<f32>| -> Vec<(String, (usize, usize))> {
        p.iter().map(|(_, x)| (x.name.clone(), x.value.shape())).collect()
    };
    if names(a) != names(b) {
        return Err(Error::Checkpoint(
            "checkpoint parameters do not match the configured architecture".into(),
        ));
    }
    Ok(())
}

/// Builds the stage-2 network from its seed.
pub fn build_translator(cfg: &RunConfig, c_in: usize, vocab_size: usize) -> Result<(ParameterSet<f32>, Translator)> {
    let mut params = ParameterSet::new();
    let mut rng = init_rng(cfg.seed, 3);
    let model = {
        let mut b = Builder::new(&mut params, &mut rng, "", Component::FrameAdapter);
        Translator::new(
            &mut b,
            &cfg.arch.visual(c_in),
            &cfg.arch.mapper(),
            &cfg.arch.translator(vocab_size, &cfg.finetune),
        )?
    };
    Ok((params, model))
}

pub struct FinetuneOutcome {
    pub model: Translator,
    pub last: Checkpoint<f32>,
    /// Parameters with the best validation BLEU-4 (the last ones when there
    /// is no validation set).
    pub best: ParameterSet<f32>,
    pub best_epoch: usize,
    pub best_bleu4: Option<f64>,
    pub logs: Vec<EpochLog>,
}

/// State needed to continue an interrupted fine-tuning run.
pub struct FinetuneResume {
    pub last: Checkpoint<f32>,
    pub best: Option<Checkpoint<f32>>,
}

/// Stage 2. Loads stage-1 weights per `cfg.finetune.policy` (not when
/// resuming), then trains the translator with teacher forcing. Validation runs greedy decoding at
/// epoch 0, every `validate_every` epochs and after the last epoch.
#[allow(clippy::too_many_arguments)]
pub fn finetune(
    cfg: &RunConfig,
    train: &Dataset,
    val: &Dataset,
    vocab: &Vocabulary,
    c_in: usize,
    stage1: Option<&ParameterSet<f32>>,
    resume: Option<FinetuneResume>,
    mut on_epoch: impl FnMut(&EpochLog, &Checkpoint<f32>) -> Result<()>,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let fc = &cfg.finetune;
    let (mut fresh, model) = build_translator(cfg, c_in, vocab.len())?;
    // A resumed run restores every weight from its own checkpoint.
    if fc.policy != TransferPolicy::None && resume.is_none() {
        let s1 = stage1.ok_or_else(|| {
            Error::invalid(format!("policy {:?} needs a pretraining checkpoint", fc.policy))
        })?;
        load_stage1(s1, &mut fresh, fc.policy)?;
    }
    let mut best: Option<(usize, f64, ParameterSet<f32>)> = None;
    let (mut params, mut opt, mut rng, start) = match resume {
        Some(r) => {
            let start = meta_epoch(&r.last)?;
            check_same_layout(&fresh, &r.last.params)?;
            if let Some(b) = r.best {
                let e = meta_epoch(&b)?;
                let bleu = b.meta["bleu4"].as_f64().unwrap_or(f64::NEG_INFINITY);
                best = Some((e, bleu, b.params));
            }
            let opt = r
                .last
                .optimizer
                .ok_or_else(|| Error::Checkpoint("resume checkpoint lacks optimizer state".into()))?;
            let rng = r
                .last
                .rng
                .ok_or_else(|| Error::Checkpoint("resume checkpoint lacks rng state".into()))?
                .restore()?;
            (r.last.params, opt, rng, start)
        }
        None => {
            let opt = OptimizerState::new(fc.optim.clone(), fresh.len())?;
            (fresh, opt, init_rng(cfg.seed, 4), 0)
        }
    };
    let samples: Vec<&Sample> = train.samples.iter().collect();
    if samples.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let meta = |epoch: usize| checkpoint_meta("finetune", epoch, cfg, vocab, c_in);
    let mut logs = Vec::new();
    let validate = |params: &ParameterSet<f32>| -> Result<Option<EvalReport>> {
        if val.is_empty() {
            return Ok(None);
        }
        evaluate(&model, params, val, vocab, 1).map(|(r, _)| Some(r))
    };
    let mut consider = |epoch: usize, report: &Option<EvalReport>, params: &ParameterSet<f32>| {
        if let Some(r) = report {
            if best.as_ref().is_none_or(|(_, b, _)| r.bleu4 > *b) {
                best = Some((epoch, r.bleu4, params.clone()));
            }
        }
    };
    if start == 0 {
        let report = validate(&params)?;
        consider(0, &report, &params);
        let log = EpochLog {
            stage: "finetune".into(),
            epoch: 0,
            losses: BTreeMap::new(),
            lr: opt.lr,
            wall_time: 0.0,
            validation: report,
        };
        on_epoch(&log, &snapshot(&params, &opt, &rng, meta(0)))?;
        logs.push(log);
    }
    let mut last = snapshot(&params, &opt, &rng, meta(start));
    for epoch in start..fc.optim.epochs {
        let t0 = Instant::now();
        opt.set_epoch(epoch);
        let lr = opt.lr;
        let losses = Epoch {
            params: &mut params,
            opt: &mut opt,
            rng: &mut rng,
            noise: cfg.feature_noise,
        }
        .run(&samples, fc.batch_size, false, |g, pairs, batch| {
            let targets: Vec<&[u32]> = batch.iter().map(|s| s.target.as_slice()).collect();
            let (_, loss) = model.forward(g, pairs, &targets, fc.label_smoothing)?;
            Ok(vec![("total", loss)])
        })?;
        let done = epoch + 1;
        let due = fc.validate_every > 0 && done % fc.validate_every == 0;
        let report = if due || done == fc.optim.epochs {
            validate(&params)?
        } else {
            None
        };
        consider(done, &report, &params);
        let log = EpochLog {
            stage: "finetune".into(),
            epoch: done,
            losses,
            lr,
            wall_time: t0.elapsed().as_secs_f64(),
            validation: report,
        };
        last = snapshot(&params, &opt, &rng, meta(done));
        on_epoch(&log, &last)?;
        logs.push(log);
    }
    let (best_epoch, best_bleu4, best_params) = match best {
        Some((e, b, p)) => (e, Some(b), p),
        None => (meta_epoch(&last)?, None, params),
    };
    Ok(FinetuneOutcome {
        model,
        last,
        best: best_params,
        best_epoch,
        best_bleu4,
        logs,
    })
}

/// Checkpoint holding the best fine-tuned parameters.
pub fn best_checkpoint(cfg: &RunConfig, outcome: &FinetuneOutcome, vocab: &Vocabulary, c_in: usize) -> Checkpoint<f32> {
    let mut meta = checkpoint_meta("finetune", outcome.best_epoch, cfg, vocab, c_in);
    if let Some(b) = outcome.best_bleu4 {
        meta["bleu4"] = serde_json::json!(b);
    }
    Checkpoint {
        params: outcome.best.clone(),
        optimizer: None,
        rng: None,
        meta,
    }
}

/// Decodes every sample with beam width `beam` (1 = greedy).
pub fn translate_dataset(
    model: &Translator,
    params: &ParameterSet<f32>,
    data: &Dataset,
    beam: usize,
) -> Result<Vec<Hypothesis>> {
    data.samples
        .iter()
        .map(|s| decode(model, params, &s.video, &s.segments, beam))
        .collect()
}

/// Scores decoded sentences against the transcripts.
pub fn evaluate(
    model: &Translator,
    params: &ParameterSet<f32>,
    data: &Dataset,
    vocab: &Vocabulary,
    beam: usize,
) -> Result<(EvalReport, Vec<String>)> {
    let hyps = translate_dataset(model, params, data, beam)?;
    let hyp_words: Vec<Vec<String>> = hyps.iter().map(|h| vocab.decode(h.words())).collect();
    let refs: Vec<Vec<String>> = data
        .samples
        .iter()
        .map(|s| s.sentence.texts().into_iter().map(str::to_owned).collect())
        .collect();
    let mut report = EvalReport::score(&hyp_words, &refs)?;
    report.reduction_ratio = Some(reduction_report(&data.segment_sets())?.ratio);
    Ok((report, hyp_words.into_iter().map(|w| w.join(" ")).collect()))
}

/// Result of a full pretrain + finetune + test evaluation.
pub struct ExperimentOutcome {
    pub report: EvalReport,
    pub pretrain_logs: Vec<EpochLog>,
    pub finetune_logs: Vec<EpochLog>,
    pub alignment_accuracy: Option<f64>,
    pub stage1: Option<Checkpoint<f32>>,
    pub finetune: FinetuneOutcome,
}

/// Runs both stages and scores the test split with the configured beam.
/// Pretraining is skipped when the transfer policy is `none`.
pub fn run_experiment(cfg: &RunConfig, data: &ExperimentData) -> Result<ExperimentOutcome> {
    let (stage1, pretrain_logs, align) = if cfg.finetune.policy == TransferPolicy::None {
        (None, Vec::new(), None)
    } else {
        let out = pretrain(cfg, &data.train, &data.vocab, data.c_in, None, |_, _| Ok(()))?;
        let align = if data.test.samples.iter().all(|s| s.truth.is_some()) {
            Some(out.model.alignment_accuracy(&out.checkpoint.params, &data.test)?)
        } else {
            None
        };
        (Some(out.checkpoint), out.logs, align)
    };
    let ft = finetune(
        cfg,
        &data.train,
        &data.val,
        &data.vocab,
        data.c_in,
        stage1.as_ref().map(|c| &c.params),
        None,
        |_, _| Ok(()),
    )?;
    let (mut report, _) = evaluate(&ft.model, &ft.best, &data.test, &data.vocab, cfg.finetune.beam_width)?;
    report.alignment_accuracy = align;
    Ok(ExperimentOutcome {
        report,
        pretrain_logs,
        finetune_logs: ft.logs.clone(),
        alignment_accuracy: align,
        stage1,
        finetune: ft,
    })
}

/// A loss configuration cell of the loss ablation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossVariant {
    pub mode: LossMode,
    pub dual: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Beta(Vec<f64>),
    Loss(Vec<LossVariant>),
    Policy(Vec<TransferPolicy>),
}

impl AblationAxis {
    /// Cell configs and their printable axis values.
    pub fn cells(&self, base: &RunConfig) -> Vec<(String, RunConfig)> {
        let mut out = Vec::new();
        match self {
            Self::Beta(vs) => {
                for &b in vs {
                    let mut c = base.clone();
                    c.pretrain.beta = b;
                    out.push((format!("beta={b}"), c));
                }
            }
            Self::Loss(vs) => {
                for v in vs {
                    let mut c = base.clone();
                    c.pretrain.loss_mode = v.mode;
                    c.pretrain.dual = v.dual;
                    let mode = match v.mode {
                        LossMode::Clcl => "clcl",
                        LossMode::Clip => "clip",
                    };
                    out.push((format!("loss={mode}/dual={}", v.dual), c));
                }
            }
            Self::Policy(vs) => {
                for p in vs {
                    let mut c = base.clone();
                    c.finetune.policy = *p;
                    let name = serde_json::to_value(p).expect("policy serializes");
                    out.push((format!("policy={}", name.as_str().unwrap_or("?")), c));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub config_hash: String,
    pub axis_value: String,
    pub report: EvalReport,
}

/// One full experiment per axis value; every cell starts from the same seed.
pub fn run_ablation_grid(base: &RunConfig, axis: &AblationAxis, data: &ExperimentData) -> Result<Vec<AblationRow>> {
    axis.cells(base)
        .into_iter()
        .map(|(value, cfg)| {
            let out = run_experiment(&cfg, data)?;
            Ok(AblationRow {
                config_hash: cfg.hash(),
                axis_value: value,
                report: out.report,
            })
        })
        .collect()
}

pub const ABLATION_CSV_HEADER: &str = "config_hash,axis_value,bleu1,bleu2,bleu3,bleu4,rouge_l_f1";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.config_hash,
            r.axis_value,
            r.report.bleu1,
            r.report.bleu2,
            r.report.bleu3,
            r.report.bleu4,
            r.report.rouge_l_f1
        ));
    }
    s
}
