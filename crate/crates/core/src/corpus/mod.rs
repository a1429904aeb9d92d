//! Corpus data model: frame feature streams, POS-tagged transcripts,
//! pseudo-gloss extraction and the word vocabulary.

pub mod io;
pub mod synth;

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::Tensor;

pub use io::{load_frame_sequences, read_frame_file, write_frame_file};
pub use synth::{generate_synthetic, GroundTruth, SyntheticCorpus, SyntheticSpec};

/// Per-video frame features, `T × c_in`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub video_id: String,
    pub frames: Tensor<f32>,
    pub fps: f32,
}

impl FrameSequence {
    pub fn new(video_id: impl Into<String>, frames: Tensor<f32>, fps: f32) -> Result<Self> {
        let video_id = video_id.into();
        if frames.rows() == 0 || frames.cols() == 0 {
            return Err(Error::Data {
                video_id,
                detail: format!("empty frame matrix {:?}", frames.shape()),
            });
        }
        if !frames.all_finite() {
            return Err(Error::Data {
                video_id,
                detail: "non-finite frame value".into(),
            });
        }
        if !(fps > 0.0) {
            return Err(Error::Data {
                video_id,
                detail: format!("fps must be positive, got {fps}"),
            });
        }
        Ok(Self {
            video_id,
            frames,
            fps,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Closed, UPOS-style part-of-speech tag set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Pos {
    Noun,
    Verb,
    Adj,
    Adv,
    Num,
    Pron,
    Propn,
    Det,
    Adp,
    Part,
    Cconj,
    Punct,
}

impl Pos {
    pub const ALL: [Pos; 12] = [
        Pos::Noun,
        Pos::Verb,
        Pos::Adj,
        Pos::Adv,
        Pos::Num,
        Pos::Pron,
        Pos::Propn,
        Pos::Det,
        Pos::Adp,
        Pos::Part,
        Pos::Cconj,
        Pos::Punct,
    ];

    /// Content tags retained as pseudo-glosses by default.
    pub const CONTENT: [Pos; 7] = [
        Pos::Noun,
        Pos::Verb,
        Pos::Adj,
        Pos::Num,
        Pos::Adv,
        Pos::Pron,
        Pos::Propn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Pos::Noun => "NOUN",
            Pos::Verb => "VERB",
            Pos::Adj => "ADJ",
            Pos::Adv => "ADV",
            Pos::Num => "NUM",
            Pos::Pron => "PRON",
            Pos::Propn => "PROPN",
            Pos::Det => "DET",
            Pos::Adp => "ADP",
            Pos::Part => "PART",
            Pos::Cconj => "CCONJ",
            Pos::Punct => "PUNCT",
        }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Pos {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Pos::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown POS tag {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedWord {
    pub text: String,
    pub pos: Pos,
}

impl TaggedWord {
    pub fn new(text: impl Into<String>, pos: Pos) -> Self {
        Self {
            text: text.into(),
            pos,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedSentence {
    pub video_id: String,
    pub words: Vec<TaggedWord>,
}

impl TaggedSentence {
    pub fn texts(&self) -> Vec<&str> {
        self.words.iter().map(|w| w.text.as_str()).collect()
    }

    pub fn joined(&self) -> String {
        self.texts().join(" ")
    }
}

/// Content words of a sentence, in spoken order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoGloss {
    pub video_id: String,
    pub words: Vec<String>,
    /// Position of each retained word in the source sentence.
    pub source_indices: Vec<usize>,
    /// Set when nothing survived the filter; such samples are excluded from
    /// contrastive batches.
    pub empty: bool,
}

/// [`PseudoGloss`] mapped to vocabulary ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoGlossSequence {
    pub video_id: String,
    pub glosses: Vec<u32>,
    pub source_indices: Vec<usize>,
}

impl PseudoGloss {
    pub fn to_ids(&self, vocab: &Vocabulary) -> PseudoGlossSequence {
        PseudoGlossSequence {
            video_id: self.video_id.clone(),
            glosses: self.words.iter().map(|w| vocab.id(w)).collect(),
            source_indices: self.source_indices.clone(),
        }
    }
}

/// Keeps words whose tag is in `keep`, preserving order.
pub fn extract_pseudo_gloss(sentence: &TaggedSentence, keep: &[Pos]) -> PseudoGloss {
    let (words, source_indices): (Vec<_>, Vec<_>) = sentence
        .words
        .iter()
        .enumerate()
        .filter(|(_, w)| keep.contains(&w.pos))
        .map(|(i, w)| (w.text.clone(), i))
        .unzip();
    PseudoGloss {
        video_id: sentence.video_id.clone(),
        empty: words.is_empty(),
        words,
        source_indices,
    }
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Word ↔ id bijection. Ids 0..3 are PAD, BOS, EOS, UNK.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn from_tokens(words: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Rebuilds the lookup index after deserialization.
    pub fn reindex(mut self) -> Result<Self> {
        let words = self.tokens.split_off(RESERVED.len());
        if self.tokens != RESERVED {
            return Err(Error::invalid("vocabulary does not start with reserved tokens"));
        }
        Self::from_tokens(words)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, words: &[&str]) -> Vec<u32> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// Words for ids, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK as usize]).to_string())
            .collect()
    }
}

/// Training-set vocabulary: reserved tokens, then every word with count
/// `≥ min_count`, by descending frequency with lexicographic tie-break.
pub fn build_vocabulary(corpus: &[TaggedSentence], min_count: usize) -> Result<Vocabulary> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for s in corpus {
        for w in &s.words {
            *counts.entry(w.text.as_str()).or_default() += 1;
        }
    }
    let reserved: BTreeSet<&str> = RESERVED.into_iter().collect();
    let mut words: Vec<(&str, usize)> = counts
        .into_iter()
        .filter(|(w, c)| *c >= min_count.max(1) && !reserved.contains(w))
        .collect();
    words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    Vocabulary::from_tokens(words.into_iter().map(|(w, _)| w.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sent(words: &[(&str, Pos)]) -> TaggedSentence {
        TaggedSentence {
            video_id: "v".into(),
            words: words.iter().map(|&(t, p)| TaggedWord::new(t, p)).collect(),
        }
    }

    #[test]
    fn keeps_content_words_in_order() {
        let s = sent(&[
            ("the", Pos::Det),
            ("wind", Pos::Noun),
            ("blows", Pos::Verb),
            ("strongly", Pos::Adv),
        ]);
        let g = extract_pseudo_gloss(&s, &Pos::CONTENT);
        assert_eq!(g.words, vec!["wind", "blows", "strongly"]);
        assert_eq!(g.source_indices, vec![1, 2, 3]);
        assert!(!g.empty);
    }

    #[test]
    fn numerals_and_pronouns_are_kept_adpositions_dropped() {
        let s = sent(&[("seven", Pos::Num), ("of", Pos::Adp), ("them", Pos::Pron)]);
        assert_eq!(extract_pseudo_gloss(&s, &Pos::CONTENT).words, vec!["seven", "them"]);
    }

    #[test]
    fn all_determiners_gives_flagged_empty_sequence() {
        let s = sent(&[("the", Pos::Det), ("a", Pos::Det)]);
        let g = extract_pseudo_gloss(&s, &Pos::CONTENT);
        assert!(g.words.is_empty());
        assert!(g.empty);
    }

    fn abc() -> Vec<TaggedSentence> {
        vec![sent(&[("a", Pos::Noun), ("a", Pos::Noun), ("b", Pos::Noun)])]
    }

    #[test]
    fn vocabulary_counts_and_threshold() {
        let v = build_vocabulary(&abc(), 1).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(&v.tokens()[..4], &RESERVED.map(String::from));
        assert_eq!(v.id("a"), 4);
        assert_eq!(v.id("b"), 5);
        assert_eq!(v.id("zzz"), UNK);
        let v2 = build_vocabulary(&abc(), 2).unwrap();
        assert_eq!(v2.len(), 5);
        assert!(!v2.contains("b"));
        assert_eq!(build_vocabulary(&abc(), 1).unwrap(), v);
    }

    #[test]
    fn vocabulary_ties_break_lexicographically() {
        let c = vec![sent(&[("zeta", Pos::Noun), ("alpha", Pos::Noun)])];
        let v = build_vocabulary(&c, 1).unwrap();
        assert_eq!(v.token(4), Some("alpha"));
        assert_eq!(v.token(5), Some("zeta"));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(build_vocabulary(&[], 1).is_err());
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = build_vocabulary(&abc(), 1).unwrap();
        assert_eq!(v.decode(&[BOS, 4, 5, EOS, 4]), vec!["a", "b"]);
    }

    fn arb_sentence() -> impl Strategy<Value = TaggedSentence> {
        prop::collection::vec(("[a-e]{1,3}", 0usize..12), 1..12).prop_map(|ws| TaggedSentence {
            video_id: "p".into(),
            words: ws
                .into_iter()
                .map(|(t, p)| TaggedWord::new(t, Pos::ALL[p]))
                .collect(),
        })
    }

    proptest! {
        #[test]
        fn pseudo_gloss_is_idempotent_and_order_preserving(s in arb_sentence(), drop in 0usize..12) {
            let g = extract_pseudo_gloss(&s, &Pos::CONTENT);
            prop_assert!(g.words.len() <= s.words.len());
            prop_assert!(g.source_indices.windows(2).all(|w| w[0] < w[1]));
            let filtered = TaggedSentence {
                video_id: s.video_id.clone(),
                words: g.source_indices.iter().map(|&i| s.words[i].clone()).collect(),
            };
            prop_assert_eq!(&extract_pseudo_gloss(&filtered, &Pos::CONTENT).words, &g.words);
            // Removing words with a non-kept tag never changes the result.
            let dropped_tag = Pos::ALL[drop];
            if !Pos::CONTENT.contains(&dropped_tag) {
                let pruned = TaggedSentence {
                    video_id: s.video_id.clone(),
                    words: s.words.iter().filter(|w| w.pos != dropped_tag).cloned().collect(),
                };
                prop_assert_eq!(extract_pseudo_gloss(&pruned, &Pos::CONTENT).words, g.words);
            }
        }

        #[test]
        fn vocabulary_round_trips_every_id(ss in prop::collection::vec(arb_sentence(), 1..5)) {
            let v = build_vocabulary(&ss, 1).unwrap();
            for i in 0..v.len() as u32 {
                prop_assert_eq!(v.id(v.token(i).unwrap()), i);
            }
        }
    }
}
