//! Sequence-to-sequence translation from segment tokens to spoken words:
//! the stage-2 model, teacher-forced loss, greedy and beam decoding, and
//! weight transfer from a pretraining checkpoint.

use serde::{Deserialize, Serialize};

use crate::corpus::{FrameSequence, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::losses::lm_loss;
use crate::model::{Mapper, MapperConfig, VisualEncoder, VisualEncoderConfig};
use crate::nncore::layers::{
    add_positions, Builder, Embedding, Linear, StackShape, TransformerDecoder, TransformerEncoder,
};
use crate::nncore::{Component, Graph, ParameterSet, Real, Tensor, Var};
use crate::segmenter::SegmentSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslatorConfig {
    pub vocab_size: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub max_decode_len: usize,
    pub beam_width: usize,
    pub length_penalty: f64,
}

impl TranslatorConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            encoder_layers: 3,
            decoder_layers: 3,
            heads: 8,
            model_dim: 1024,
            ff_mult: 4,
            dropout: 0.1,
            max_decode_len: 150,
            beam_width: 4,
            length_penalty: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::invalid("beam_width must be at least 1"));
        }
        if self.max_decode_len == 0 {
            return Err(Error::invalid("max_decode_len must be at least 1"));
        }
        if self.vocab_size <= EOS as usize {
            return Err(Error::invalid("vocabulary lacks reserved tokens"));
        }
        Ok(())
    }

    fn stack(&self, layers: usize) -> StackShape {
        StackShape {
            layers,
            dim: self.model_dim,
            heads: self.heads,
            ff_mult: self.ff_mult,
            dropout: self.dropout,
        }
    }
}

/// Which pretrained components initialize the translator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferPolicy {
    None,
    Vle,
    VlePlusTe,
}

impl std::str::FromStr for TransferPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "vle" => Ok(Self::Vle),
            "vle_plus_te" => Ok(Self::VlePlusTe),
            _ => Err(Error::invalid(format!("unknown transfer policy {s:?}"))),
        }
    }
}

/// Visual tokens → mapper → translation encoder → autoregressive decoder.
#[derive(Clone, Debug)]
pub struct Translator {
    pub cfg: TranslatorConfig,
    pub visual: VisualEncoder,
    pub mapper: Mapper,
    pub encoder: TransformerEncoder,
    pub embedding: Embedding,
    pub decoder: TransformerDecoder,
    pub proj: Linear,
}

impl Translator {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        visual: &VisualEncoderConfig,
        mapper: &MapperConfig,
        cfg: &TranslatorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if mapper.out_dim != cfg.model_dim {
            return Err(Error::invalid("mapper output must match the translator width"));
        }
        let visual = VisualEncoder::new(b, visual, false)?;
        let mapper = Mapper::new(b, mapper)?;
        let encoder = TransformerEncoder::new(
            &mut b.with_component("translation_encoder", Component::TranslationEncoder),
            cfg.stack(cfg.encoder_layers),
        )?;
        let mut db = b.with_component("translation_decoder", Component::TranslationDecoder);
        let embedding = Embedding::new(&mut db.sub("embedding"), cfg.vocab_size, cfg.model_dim)?;
        let decoder = TransformerDecoder::new(&mut db.sub("stack"), cfg.stack(cfg.decoder_layers))?;
        let proj = Linear::new(&mut db.sub("proj"), cfg.model_dim, cfg.vocab_size)?;
        Ok(Self {
            cfg: cfg.clone(),
            visual,
            mapper,
            encoder,
            embedding,
            decoder,
            proj,
        })
    }

    /// Encoder states for a batch of videos: `Σ N_i × dim` plus lengths.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &[(&FrameSequence, &SegmentSet)],
    ) -> Result<(Var, Vec<usize>)> {
        let vt = self.visual.tokenize(g, batch)?;
        let mapped = self.mapper.forward(g, vt.tokens)?;
        let x = add_positions(g, mapped, &vt.lengths)?;
        let h = self.encoder.forward(g, x, &vt.lengths)?;
        Ok((h, vt.lengths))
    }

    /// Decoder hidden states for every input position.
    fn decode_states<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        memory: Var,
        mem_lens: &[usize],
        inputs: &[&[u32]],
    ) -> Result<(Var, Vec<usize>)> {
        let ids: Vec<usize> = inputs.iter().flat_map(|s| s.iter().map(|&i| i as usize)).collect();
        let lens: Vec<usize> = inputs.iter().map(|s| s.len()).collect();
        let x = self.embedding.forward(g, &ids)?;
        let x = add_positions(g, x, &lens)?;
        let h = self.decoder.forward(g, x, &lens, memory, mem_lens)?;
        Ok((h, lens))
    }

    /// Teacher-forced logits for BOS/EOS-framed targets.
    pub fn forward_logits<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &[(&FrameSequence, &SegmentSet)],
        targets: &[&[u32]],
    ) -> Result<(Var, Vec<u32>)> {
        if targets.len() != batch.len() {
            return Err(Error::shape(
                "translate_forward",
                format!("{} targets for {} videos", targets.len(), batch.len()),
            ));
        }
        for t in targets {
            check_framed(t, self.cfg.vocab_size)?;
        }
        let (memory, mem_lens) = self.encode(g, batch)?;
        let inputs: Vec<&[u32]> = targets.iter().map(|t| &t[..t.len() - 1]).collect();
        let outputs: Vec<u32> = targets.iter().flat_map(|t| t[1..].iter().copied()).collect();
        let (h, _) = self.decode_states(g, memory, &mem_lens, &inputs)?;
        let logits = self.proj.forward(g, h)?;
        Ok((logits, outputs))
    }

    /// Teacher-forced logits and the label-smoothed loss, averaged over all
    /// target steps of the batch.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &[(&FrameSequence, &SegmentSet)],
        targets: &[&[u32]],
        smoothing: f64,
    ) -> Result<(Var, Var)> {
        let (logits, outputs) = self.forward_logits(g, batch, targets)?;
        let loss = lm_loss(g, logits, &outputs, smoothing)?;
        Ok((logits, loss))
    }

    /// Loss of each sample on its own.
    pub fn per_sample_losses<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &[(&FrameSequence, &SegmentSet)],
        targets: &[&[u32]],
        smoothing: f64,
    ) -> Result<Vec<f64>> {
        let (logits, outputs) = self.forward_logits(g, batch, targets)?;
        let mut out = Vec::with_capacity(targets.len());
        let mut off = 0;
        for t in targets {
            let n = t.len() - 1;
            let rows = g.slice_rows(logits, off, n)?;
            let l = lm_loss(g, rows, &outputs[off..off + n], smoothing)?;
            out.push(g.scalar(l).as_f64());
            off += n;
        }
        Ok(out)
    }

    /// Next-token log-probabilities after each prefix, sharing one memory.
    fn next_log_probs<T: Real>(
        &self,
        params: &ParameterSet<T>,
        memory: &Tensor<T>,
        prefixes: &[&[u32]],
    ) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::eval(params);
        let n = memory.rows();
        let mut rows = Vec::with_capacity(n * prefixes.len() * memory.cols());
        for _ in prefixes {
            rows.extend_from_slice(memory.data());
        }
        let mem = g.input(Tensor::from_vec(n * prefixes.len(), memory.cols(), rows)?);
        let mem_lens = vec![n; prefixes.len()];
        let (h, lens) = self.decode_states(&mut g, mem, &mem_lens, prefixes)?;
        let mut last = Vec::with_capacity(prefixes.len());
        let mut off = 0;
        for &l in &lens {
            off += l;
            last.push(g.slice_rows(h, off - 1, 1)?);
        }
        let last = g.concat_rows(&last)?;
        let logits = self.proj.forward(&mut g, last)?;
        let lp = g.log_softmax(logits);
        Ok(g.value(lp)
            .to_rows()
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.as_f64()).collect())
            .collect())
    }

    fn memory_for<T: Real>(
        &self,
        params: &ParameterSet<T>,
        video: &FrameSequence,
        segs: &SegmentSet,
    ) -> Result<Tensor<T>> {
        let mut g = Graph::eval(params);
        let (h, _) = self.encode(&mut g, &[(video, segs)])?;
        Ok(g.value(h).clone())
    }
}

fn check_framed(t: &[u32], vocab: usize) -> Result<()> {
    if t.len() < 2 || t[0] != BOS || *t.last().unwrap() != EOS {
        return Err(Error::invalid(format!("target {t:?} is not BOS ... EOS framed")));
    }
    if let Some(&bad) = t.iter().find(|&&i| i as usize >= vocab || i == PAD) {
        return Err(Error::invalid(format!("target id {bad} invalid for vocabulary of {vocab}")));
    }
    Ok(())
}

/// Frames word ids as `BOS w… EOS`.
pub fn frame_target(words: &[u32]) -> Vec<u32> {
    let mut t = Vec::with_capacity(words.len() + 2);
    t.push(BOS);
    t.extend_from_slice(words);
    t.push(EOS);
    t
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// BOS, generated ids, and EOS when the hypothesis terminated.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub score: f64,
    pub ended: bool,
}

impl Hypothesis {
    /// Generated words, without BOS/EOS.
    pub fn words(&self) -> &[u32] {
        let end = if self.ended {
            self.tokens.len() - 1
        } else {
            self.tokens.len()
        };
        &self.tokens[1..end]
    }
}

fn normalized(log_prob: f64, len: usize, penalty: f64) -> f64 {
    log_prob / (len.max(1) as f64).powf(penalty)
}

/// Ids a decoder may emit: everything but PAD and BOS.
fn emittable(id: usize) -> bool {
    id != PAD as usize && id != BOS as usize
}

pub fn greedy_decode<T: Real>(
    model: &Translator,
    params: &ParameterSet<T>,
    video: &FrameSequence,
    segs: &SegmentSet,
) -> Result<Hypothesis> {
    let memory = model.memory_for(params, video, segs)?;
    let mut tokens = vec![BOS];
    let mut log_prob = 0.0;
    let mut ended = false;
    for _ in 0..model.cfg.max_decode_len {
        let lp = model.next_log_probs(params, &memory, &[&tokens])?.remove(0);
        let (best, v) = lp
            .iter()
            .enumerate()
            .filter(|(i, _)| emittable(*i))
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (i, &v)| {
                if v > acc.1 { (i, v) } else { acc }
            });
        tokens.push(best as u32);
        log_prob += v;
        if best as u32 == EOS {
            ended = true;
            break;
        }
    }
    let len = tokens.len() - 1;
    Ok(Hypothesis {
        score: normalized(log_prob, len, model.cfg.length_penalty),
        tokens,
        log_prob,
        ended,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub best: Hypothesis,
    /// Every hypothesis finalized during the search, in finalization order.
    pub finished: Vec<Hypothesis>,
}

/// Beam search keeping `beam_width` live prefixes by cumulative
/// log-probability.
///
/// Each step ranks the `2k` best extensions of every live prefix. An EOS
/// extension ranked within the top `k` is finalized; the best `k` others
/// stay live. The search stops when `k` hypotheses are final and no live
/// prefix scores above the `k`-th best of them, or at the length cap, where
/// live prefixes are finalized as they stand. The result is the final
/// hypothesis with the highest `log_prob / len^length_penalty`.
pub fn beam_decode<T: Real>(
    model: &Translator,
    params: &ParameterSet<T>,
    video: &FrameSequence,
    segs: &SegmentSet,
    beam_width: usize,
) -> Result<BeamResult> {
    if beam_width == 0 {
        return Err(Error::invalid("beam_width must be at least 1"));
    }
    let pen = model.cfg.length_penalty;
    let memory = model.memory_for(params, video, segs)?;
    let mut alive: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..model.cfg.max_decode_len {
        let prefixes: Vec<&[u32]> = alive.iter().map(|(t, _)| t.as_slice()).collect();
        let lps = model.next_log_probs(params, &memory, &prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, lp) in lps.iter().enumerate() {
            let mut ids: Vec<usize> = (0..lp.len()).filter(|&i| emittable(i)).collect();
            ids.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &i in ids.iter().take(2 * beam_width) {
                cands.push((alive[h].1 + lp[i], h, i));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam_width);
        for (rank, (score, h, i)) in cands.into_iter().enumerate() {
            let mut toks = alive[h].0.clone();
            toks.push(i as u32);
            if i as u32 == EOS {
                if rank < beam_width {
                    let len = toks.len() - 1;
                    finished.push(Hypothesis {
                        tokens: toks,
                        log_prob: score,
                        score: normalized(score, len, pen),
                        ended: true,
                    });
                }
            } else {
                next.push((toks, score));
                if next.len() == beam_width {
                    break;
                }
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
        if finished.len() >= beam_width {
            let mut scores: Vec<f64> = finished.iter().map(|h| h.score).collect();
            scores.sort_by(|a, b| b.total_cmp(a));
            let kth = scores[beam_width - 1];
            let len = alive[0].0.len() - 1;
            if normalized(alive[0].1, len, pen) <= kth {
                alive.clear();
                break;
            }
        }
    }
    for (toks, lp) in alive {
        let len = toks.len() - 1;
        finished.push(Hypothesis {
            tokens: toks,
            log_prob: lp,
            score: normalized(lp, len, pen),
            ended: false,
        });
    }
    let best = finished
        .iter()
        .fold(None::<&Hypothesis>, |acc, h| match acc {
            Some(b) if b.score >= h.score => Some(b),
            _ => Some(h),
        })
        .cloned()
        .ok_or_else(|| Error::invalid("beam search produced no hypothesis"))?;
    Ok(BeamResult { best, finished })
}

/// Decodes with the configured mode: `beam_width == 1` is greedy.
pub fn decode<T: Real>(
    model: &Translator,
    params: &ParameterSet<T>,
    video: &FrameSequence,
    segs: &SegmentSet,
    beam_width: usize,
) -> Result<Hypothesis> {
    if beam_width <= 1 {
        greedy_decode(model, params, video, segs)
    } else {
        Ok(beam_decode(model, params, video, segs, beam_width)?.best)
    }
}

/// Copies stage-1 weights into a freshly initialized translator.
///
/// `Vle` copies the frame adapter, temporal conv and mapper. `VlePlusTe`
/// additionally initializes the translation encoder from the pretraining
/// context transformer. Names and shapes must match exactly.
pub fn load_stage1<T: Real>(
    stage1: &ParameterSet<T>,
    target: &mut ParameterSet<T>,
    policy: TransferPolicy,
) -> Result<Vec<String>> {
    let mut loaded = Vec::new();
    if policy == TransferPolicy::None {
        return Ok(loaded);
    }
    let mut plan: Vec<(String, String)> = Vec::new();
    for (_, p) in target.iter() {
        match p.component {
            Component::FrameAdapter | Component::TemporalConv | Component::Mapper => {
                plan.push((p.name.clone(), p.name.clone()));
            }
            Component::TranslationEncoder if policy == TransferPolicy::VlePlusTe => {
                let rest = p
                    .name
                    .strip_prefix("translation_encoder.")
                    .ok_or_else(|| Error::Checkpoint(format!("unexpected name {}", p.name)))?;
                plan.push((format!("context_transformer.{rest}"), p.name.clone()));
            }
            _ => {}
        }
    }
    for (src, dst) in plan {
        let from = stage1
            .by_name(&src)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks {src} needed by policy {policy:?}")))?;
        let id = target.id(&dst).expect("planned from target");
        let to = target.get_mut(id);
        if from.value.shape() != to.value.shape() {
            return Err(Error::Checkpoint(format!(
                "{src} has shape {:?}, translator expects {:?}",
                from.value.shape(),
                to.value.shape()
            )));
        }
        to.value = from.value.clone();
        loaded.push(dst);
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmenter::{SegmentSource, SegmentSpan};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfgs(vocab: usize) -> (VisualEncoderConfig, MapperConfig, TranslatorConfig) {
        let v = VisualEncoderConfig {
            c_in: 4,
            frame_dim: 8,
            model_dim: 8,
            conv_kernel: 5,
            context_layers: 1,
            context_heads: 2,
            ff_mult: 2,
            dropout: 0.0,
        };
        let m = MapperConfig {
            blocks: 3,
            in_dim: 8,
            out_dim: 8,
            dropout: 0.0,
        };
        let t = TranslatorConfig {
            vocab_size: vocab,
            encoder_layers: 1,
            decoder_layers: 1,
            heads: 2,
            model_dim: 8,
            ff_mult: 2,
            dropout: 0.0,
            max_decode_len: 12,
            beam_width: 4,
            length_penalty: 1.0,
        };
        (v, m, t)
    }

    fn model(seed: u64, vocab: usize) -> (ParameterSet<f64>, Translator) {
        let (v, m, t) = cfgs(vocab);
        let mut params = ParameterSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tr = {
            let mut b = Builder::new(&mut params, &mut rng, "", Component::FrameAdapter);
            Translator::new(&mut b, &v, &m, &t).unwrap()
        };
        (params, tr)
    }

    fn video(seed: u64, t: usize) -> (FrameSequence, SegmentSet) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * 4).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        let v = FrameSequence::new("v", Tensor::from_vec(t, 4, data).unwrap(), 25.0).unwrap();
        let s = SegmentSet {
            video_id: "v".into(),
            num_frames: t,
            spans: vec![SegmentSpan::new(0, t / 2), SegmentSpan::new(t / 2, t)],
            source: SegmentSource::Oracle,
        };
        (v, s)
    }

    #[test]
    fn eos_only_target_is_one_step() {
        let (p, m) = model(1, 9);
        let (v, s) = video(2, 12);
        let mut g = Graph::eval(&p);
        let (logits, loss) = m.forward(&mut g, &[(&v, &s)], &[&[BOS, EOS]], 0.0).unwrap();
        assert_eq!(g.shape(logits), (1, 9));
        let lp = g.log_softmax(logits);
        assert!((g.scalar(loss) + g.value(lp).get(0, EOS as usize)).abs() < 1e-12);
    }

    #[test]
    fn duplicated_sample_duplicates_loss() {
        let (p, m) = model(1, 9);
        let (v1, s1) = video(2, 12);
        let (v2, s2) = video(3, 14);
        let t1 = [BOS, 4, 5, EOS];
        let t2 = [BOS, 6, EOS];
        let mut g = Graph::eval(&p);
        let l = m
            .per_sample_losses(&mut g, &[(&v1, &s1), (&v2, &s2), (&v1, &s1)], &[&t1, &t2, &t1], 0.2)
            .unwrap();
        assert_eq!(l[0], l[2]);
        assert_ne!(l[0], l[1]);
    }

    #[test]
    fn rejects_unframed_targets() {
        let (p, m) = model(1, 9);
        let (v, s) = video(2, 12);
        let mut g = Graph::eval(&p);
        assert!(m.forward(&mut g, &[(&v, &s)], &[&[4, 5, EOS]], 0.0).is_err());
        assert!(m.forward(&mut g, &[(&v, &s)], &[&[BOS, 99, EOS]], 0.0).is_err());
        let empty = SegmentSet {
            spans: vec![],
            ..s.clone()
        };
        assert!(m.forward(&mut g, &[(&v, &empty)], &[&[BOS, EOS]], 0.0).is_err());
    }

    #[test]
    fn beam_one_matches_greedy_and_outputs_are_clean() {
        for seed in 0..6 {
            let (p, m) = model(seed, 11);
            let (v, s) = video(seed + 100, 15);
            let g1 = greedy_decode(&m, &p, &v, &s).unwrap();
            let b1 = beam_decode(&m, &p, &v, &s, 1).unwrap().best;
            assert_eq!(g1.tokens, b1.tokens);
            let b4 = beam_decode(&m, &p, &v, &s, 4).unwrap();
            for h in &b4.finished {
                assert!(h.tokens.len() - 1 <= 12);
                assert!(!h.tokens[1..].contains(&PAD) && !h.tokens[1..].contains(&BOS));
                let eos = h.tokens.iter().filter(|&&t| t == EOS).count();
                assert!(eos <= 1);
                if eos == 1 {
                    assert_eq!(*h.tokens.last().unwrap(), EOS);
                }
                assert!(b4.best.score >= h.score);
            }
            assert!(b4.best.log_prob >= g1.log_prob - 1e-9 || b4.best.score >= g1.score - 1e-9);
        }
    }

    #[test]
    fn forced_eos_gives_empty_translation() {
        let (mut p, m) = model(4, 9);
        let bias = p.id("translation_decoder.proj.bias").unwrap();
        p.get_mut(bias).value.data_mut()[EOS as usize] = 1e3;
        let (v, s) = video(5, 12);
        let h = greedy_decode(&m, &p, &v, &s).unwrap();
        assert_eq!(h.tokens, vec![BOS, EOS]);
        assert!(h.words().is_empty());
        let b = beam_decode(&m, &p, &v, &s, 4).unwrap().best;
        assert_eq!(b.tokens, vec![BOS, EOS]);
    }

    #[test]
    fn no_eos_hits_the_length_cap() {
        let (mut p, m) = model(4, 9);
        let bias = p.id("translation_decoder.proj.bias").unwrap();
        p.get_mut(bias).value.data_mut()[EOS as usize] = -1e3;
        let (v, s) = video(5, 12);
        let h = greedy_decode(&m, &p, &v, &s).unwrap();
        assert_eq!(h.words().len(), 12);
        assert!(!h.ended);
        let b = beam_decode(&m, &p, &v, &s, 3).unwrap().best;
        assert_eq!(b.words().len(), 12);
    }

    #[test]
    fn vle_transfer_copies_exactly_the_visual_path() {
        let (mut target, _) = model(1, 9);
        let (stage1, _) = model(2, 9);
        let before = target.clone();
        let loaded = load_stage1(&stage1, &mut target, TransferPolicy::Vle).unwrap();
        assert!(!loaded.is_empty());
        for (_, p) in target.iter() {
            let src = stage1.by_name(&p.name).unwrap();
            let old = before.by_name(&p.name).unwrap();
            match p.component {
                Component::FrameAdapter | Component::TemporalConv | Component::Mapper => {
                    assert_eq!(p.value, src.value, "{}", p.name)
                }
                _ => assert_eq!(p.value, old.value, "{}", p.name),
            }
        }
        let mut untouched = before.clone();
        load_stage1(&stage1, &mut untouched, TransferPolicy::None).unwrap();
        assert_eq!(untouched, before);
    }

    #[test]
    fn missing_components_are_reported() {
        let (mut target, _) = model(1, 9);
        let empty = ParameterSet::<f64>::new();
        let err = load_stage1(&empty, &mut target, TransferPolicy::Vle).unwrap_err();
        assert!(err.to_string().contains("frame_adapter"), "{err}");
        let (stage1, _) = model(2, 9);
        assert!(load_stage1(&stage1, &mut target, TransferPolicy::VlePlusTe).is_err());
    }
}
