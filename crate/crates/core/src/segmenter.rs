//! Temporal segmentation of frame streams into sign units, plus the frame
//! downsampling baselines and reduction-ratio accounting.

use serde::{Deserialize, Serialize};

use crate::corpus::{FrameSequence, GroundTruth};
use crate::error::{Error, Result};
use crate::nncore::{Real, Tensor};

/// Half-open frame interval `[start, end)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct SegmentSpan {
    pub start: usize,
    pub end: usize,
}

impl SegmentSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlap(&self, other: &SegmentSpan) -> usize {
        self.end.min(other.end).saturating_sub(self.start.max(other.start))
    }
}

impl From<[usize; 2]> for SegmentSpan {
    fn from(v: [usize; 2]) -> Self {
        Self::new(v[0], v[1])
    }
}

impl From<SegmentSpan> for [usize; 2] {
    fn from(s: SegmentSpan) -> Self {
        [s.start, s.end]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentSource {
    Oracle,
    MotionEnergy,
    Uniform,
    Stride,
    MaxpoolGroups,
    Window,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentSet {
    pub video_id: String,
    pub num_frames: usize,
    pub spans: Vec<SegmentSpan>,
    pub source: SegmentSource,
}

impl SegmentSet {
    /// Checks that the spans are sorted, non-empty and cover `[0, T)` exactly.
    pub fn validate_partition(&self) -> Result<()> {
        let bad = |d: String| Error::Data {
            video_id: self.video_id.clone(),
            detail: d,
        };
        if self.spans.is_empty() {
            return Err(bad("empty segment set".into()));
        }
        let mut cursor = 0;
        for s in &self.spans {
            if s.start != cursor || s.is_empty() {
                return Err(bad(format!("span {s:?} breaks the partition at {cursor}")));
            }
            cursor = s.end;
        }
        if cursor != self.num_frames {
            return Err(bad(format!("spans end at {cursor}, video has {}", self.num_frames)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    /// Start frames of every span but the first.
    pub fn interior_boundaries(&self) -> Vec<usize> {
        self.spans.iter().skip(1).map(|s| s.start).collect()
    }

    fn from_boundaries(video_id: &str, t: usize, bounds: &[usize], source: SegmentSource) -> Self {
        let mut spans = Vec::with_capacity(bounds.len() + 1);
        let mut start = 0;
        for &b in bounds.iter().chain(std::iter::once(&t)) {
            spans.push(SegmentSpan::new(start, b));
            start = b;
        }
        Self {
            video_id: video_id.to_string(),
            num_frames: t,
            spans,
            source,
        }
    }
}

pub fn segment_oracle(truth: &GroundTruth) -> Result<SegmentSet> {
    let set = SegmentSet {
        video_id: truth.video_id.clone(),
        num_frames: truth.spans.last().map_or(0, |s| s[1]),
        spans: truth.spans.iter().map(|&s| s.into()).collect(),
        source: SegmentSource::Oracle,
    };
    set.validate_partition()?;
    Ok(set)
}

/// Per-frame motion energy `e_t = ‖f_t − f_{t−1}‖₂` with `e_0 = e_1`.
pub fn motion_energy(frames: &Tensor<f32>) -> Vec<f64> {
    let t = frames.rows();
    let mut e = vec![0.0; t];
    for i in 1..t {
        e[i] = frames
            .row(i)
            .iter()
            .zip(frames.row(i - 1))
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum::<f64>()
            .sqrt();
    }
    if t > 1 {
        e[0] = e[1];
    }
    e
}

/// Centered moving average, truncated at the sequence ends.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let h = window / 2;
    let n = x.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(h);
            let hi = (i + h + 1).min(n);
            x[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Boundaries at strict local minima of smoothed motion energy, then short
/// spans absorbed greedily, shortest first.
///
/// A short span is merged across whichever of its boundaries has the higher
/// smoothed energy, i.e. the less pronounced pause survives the least.
pub fn segment_motion_energy(
    video: &FrameSequence,
    smooth_window: usize,
    min_len: usize,
) -> Result<SegmentSet> {
    if smooth_window % 2 == 0 {
        return Err(Error::invalid(format!("smooth_window must be odd, got {smooth_window}")));
    }
    let t = video.num_frames();
    if t < min_len {
        return Err(Error::Data {
            video_id: video.video_id.clone(),
            detail: format!("{t} frames is shorter than min_len {min_len}"),
        });
    }
    let s = moving_average(&motion_energy(&video.frames), smooth_window);
    let mut bounds: Vec<usize> = (1..t.saturating_sub(1))
        .filter(|&i| s[i] < s[i - 1] && s[i] < s[i + 1])
        .collect();

    loop {
        let edges: Vec<usize> = std::iter::once(0)
            .chain(bounds.iter().copied())
            .chain(std::iter::once(t))
            .collect();
        let shortest = (0..edges.len() - 1)
            .filter(|&k| edges[k + 1] - edges[k] < min_len)
            .min_by_key(|&k| edges[k + 1] - edges[k]);
        let Some(k) = shortest else { break };
        if bounds.is_empty() {
            break;
        }
        // Span k lies between edges[k] and edges[k+1]; bounds[k-1] is its
        // left boundary and bounds[k] its right one.
        let left = (k > 0).then(|| k - 1);
        let right = (k < bounds.len()).then_some(k);
        let drop = match (left, right) {
            (Some(l), Some(r)) => {
                if s[bounds[l]] > s[bounds[r]] {
                    l
                } else {
                    r
                }
            }
            (Some(l), None) => l,
            (None, Some(r)) => r,
            (None, None) => unreachable!(),
        };
        bounds.remove(drop);
    }
    Ok(SegmentSet::from_boundaries(
        &video.video_id,
        t,
        &bounds,
        SegmentSource::MotionEnergy,
    ))
}

/// Contiguous groups of `factor` frames; the last group may be shorter.
pub fn segment_uniform(video: &FrameSequence, factor: usize) -> Result<SegmentSet> {
    uniform_spans(&video.video_id, video.num_frames(), factor)
}

pub fn uniform_spans(video_id: &str, t: usize, factor: usize) -> Result<SegmentSet> {
    if factor == 0 {
        return Err(Error::invalid("factor must be at least 1"));
    }
    let bounds: Vec<usize> = (1..t.div_ceil(factor)).map(|k| k * factor).collect();
    Ok(SegmentSet::from_boundaries(video_id, t, &bounds, SegmentSource::Uniform))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReductionStrategy {
    Maxpool,
    Stride,
    Window,
}

/// Feature-level frame reduction baselines.
///
/// Windows start at `0, factor, 2·factor, …` below `T` and are truncated at
/// the end of the sequence, so every strategy yields `ceil(T/factor)` rows.
pub fn reduce_baseline<T: Real>(
    features: &Tensor<T>,
    strategy: ReductionStrategy,
    factor: usize,
    window: usize,
) -> Result<Tensor<T>> {
    if factor == 0 || window == 0 {
        return Err(Error::invalid("factor and window must be at least 1"));
    }
    let (t, c) = features.shape();
    let starts: Vec<usize> = (0..t).step_by(factor).collect();
    let mut out = Tensor::zeros(starts.len(), c);
    for (r, &s) in starts.iter().enumerate() {
        let row = out.row_mut(r);
        match strategy {
            ReductionStrategy::Stride => row.copy_from_slice(features.row(s)),
            ReductionStrategy::Maxpool => {
                row.copy_from_slice(features.row(s));
                for i in s + 1..(s + factor).min(t) {
                    for (o, &v) in row.iter_mut().zip(features.row(i)) {
                        if v > *o {
                            *o = v;
                        }
                    }
                }
            }
            ReductionStrategy::Window => {
                let end = (s + window).min(t);
                for i in s..end {
                    for (o, &v) in row.iter_mut().zip(features.row(i)) {
                        *o = *o + v;
                    }
                }
                let n = T::lit((end - s) as f64);
                for o in row.iter_mut() {
                    *o = *o / n;
                }
            }
        }
    }
    Ok(out)
}

/// Output rows of [`reduce_baseline`] for a `T`-frame input.
pub fn reduced_len(t: usize, factor: usize) -> usize {
    t.div_ceil(factor.max(1))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReductionReport {
    pub total_frames: usize,
    pub total_tokens: usize,
    pub ratio: f64,
}

pub fn reduction_report(segsets: &[SegmentSet]) -> Result<ReductionReport> {
    if segsets.is_empty() {
        return Err(Error::invalid("reduction_report needs at least one segment set"));
    }
    let total_frames: usize = segsets.iter().map(|s| s.num_frames).sum();
    let total_tokens: usize = segsets.iter().map(|s| s.spans.len()).sum();
    if total_frames == 0 {
        return Err(Error::invalid("segment sets cover no frames"));
    }
    Ok(ReductionReport {
        total_frames,
        total_tokens,
        ratio: total_tokens as f64 / total_frames as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Interior-boundary precision/recall/F1 with a ±`tol` frame tolerance.
/// Pairs are matched greedily by increasing distance, each boundary at most
/// once. Two single-span sets score 1.
pub fn boundary_f1(pred: &SegmentSet, truth: &SegmentSet, tol: usize) -> BoundaryScore {
    let p = pred.interior_boundaries();
    let t = truth.interior_boundaries();
    if p.is_empty() && t.is_empty() {
        return BoundaryScore {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
    }
    let mut pairs: Vec<(usize, usize, usize)> = Vec::new();
    for (i, &a) in p.iter().enumerate() {
        for (j, &b) in t.iter().enumerate() {
            let d = a.abs_diff(b);
            if d <= tol {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_unstable();
    let mut used_p = vec![false; p.len()];
    let mut used_t = vec![false; t.len()];
    let mut matched = 0usize;
    for (_, i, j) in pairs {
        if !used_p[i] && !used_t[j] {
            used_p[i] = true;
            used_t[j] = true;
            matched += 1;
        }
    }
    let ratio = |m: usize, n: usize| if n == 0 { 0.0 } else { m as f64 / n as f64 };
    let precision = ratio(matched, p.len());
    let recall = if t.is_empty() { 1.0 } else { ratio(matched, t.len()) };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    BoundaryScore {
        precision,
        recall,
        f1,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticSpec};
    use proptest::prelude::*;

    fn video(frames: Tensor<f32>) -> FrameSequence {
        FrameSequence::new("v", frames, 25.0).unwrap()
    }

    fn set(t: usize, bounds: &[usize]) -> SegmentSet {
        SegmentSet::from_boundaries("v", t, bounds, SegmentSource::Oracle)
    }

    fn column(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(vals.len(), 1, vals.to_vec()).unwrap()
    }

    #[test]
    fn constant_frames_give_one_span() {
        let s = segment_motion_energy(&video(Tensor::filled(30, 3, 0.7)), 3, 5).unwrap();
        assert_eq!(s.spans, vec![SegmentSpan::new(0, 30)]);
    }

    #[test]
    fn noiseless_fixed_duration_recovers_truth_exactly() {
        let spec = SyntheticSpec {
            duration_range: [8, 8],
            sentence_length_range: [5, 5],
            noise_sigma: 0.0,
            ..SyntheticSpec::default()
        };
        let c = generate_synthetic(&spec, 20).unwrap();
        for (v, t) in c.videos.iter().zip(&c.truth) {
            let pred = segment_motion_energy(v, 3, 5).unwrap();
            let truth = segment_oracle(t).unwrap();
            assert_eq!(pred.spans, truth.spans, "{}", v.video_id);
        }
    }

    #[test]
    fn short_spans_are_merged_across_the_weaker_boundary() {
        // Energy minima at frames 6, 9 and 16 (1-D positions chosen so the
        // frame deltas are the listed energies).
        let e = [
            5.0, 5.0, 4.0, 3.0, 2.0, 1.5, 0.1, 1.0, 0.9, 0.5, 1.0, 2.0, 3.0, 2.0, 1.0, 0.8, 0.2,
            1.0, 2.0, 3.0, 4.0, 5.0,
        ];
        let mut pos = vec![0.0f32];
        for &d in &e[1..] {
            pos.push(pos.last().unwrap() + d as f32);
        }
        let v = video(Tensor::from_vec(pos.len(), 1, pos).unwrap());
        let raw = segment_motion_energy(&v, 1, 1).unwrap();
        assert_eq!(raw.interior_boundaries(), vec![6, 9, 16]);
        // [6,9) is 3 frames; its right boundary (energy 0.5) is weaker than
        // its left one (0.1), so 9 goes.
        let merged = segment_motion_energy(&v, 1, 5).unwrap();
        assert_eq!(merged.interior_boundaries(), vec![6, 16]);
        assert!(merged.spans.iter().all(|s| s.len() >= 5));
    }

    #[test]
    fn uniform_examples() {
        let v = video(Tensor::zeros(16, 1));
        let s = segment_uniform(&v, 4).unwrap();
        assert_eq!(
            s.spans,
            [[0, 4], [4, 8], [8, 12], [12, 16]].map(SegmentSpan::from).to_vec()
        );
        let v = video(Tensor::zeros(10, 1));
        let s = segment_uniform(&v, 4).unwrap();
        assert_eq!(s.spans, [[0, 4], [4, 8], [8, 10]].map(SegmentSpan::from).to_vec());
        assert_eq!(segment_uniform(&v, 1).unwrap().len(), 10);
    }

    #[test]
    fn baseline_examples() {
        let x = column(&[1.0, 3.0, 2.0, 0.0]);
        let r = |s| reduce_baseline(&x, s, 2, 2).unwrap().into_vec();
        assert_eq!(r(ReductionStrategy::Maxpool), vec![3.0, 2.0]);
        assert_eq!(r(ReductionStrategy::Stride), vec![1.0, 2.0]);
        assert_eq!(r(ReductionStrategy::Window), vec![2.0, 1.0]);
    }

    #[test]
    fn ratio_examples() {
        let rep = reduction_report(&[set(62, &[8, 16, 24, 32, 40, 48, 56])]).unwrap();
        assert_eq!(rep.total_tokens, 8);
        assert!((rep.ratio - 0.1290).abs() < 1e-4);
        let sets: Vec<_> = [16, 40, 8]
            .iter()
            .map(|&t| uniform_spans("v", t, 4).unwrap())
            .collect();
        assert_eq!(reduction_report(&sets).unwrap().ratio, 0.25);
        let ident: Vec<_> = [5, 7].iter().map(|&t| uniform_spans("v", t, 1).unwrap()).collect();
        assert_eq!(reduction_report(&ident).unwrap().ratio, 1.0);
        assert!(reduction_report(&[]).is_err());
    }

    #[test]
    fn f1_examples() {
        let truth = set(24, &[8, 16]);
        let one = BoundaryScore {
            precision: 1.0,
            recall: 1.0,
            f1: 1.0,
        };
        assert_eq!(boundary_f1(&truth, &truth, 0), one);
        assert_eq!(boundary_f1(&set(24, &[9, 17]), &truth, 2), one);
        let none = boundary_f1(&set(24, &[]), &truth, 2);
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        let half = boundary_f1(&set(24, &[8, 12, 16, 20]), &truth, 0);
        assert_eq!((half.precision, half.recall), (0.5, 1.0));
    }

    #[test]
    fn greedy_matching_prefers_nearest() {
        // 10 is within tolerance of both but goes to the nearer 11.
        let s = boundary_f1(&set(30, &[10]), &set(30, &[8, 11]), 2);
        assert_eq!(s.precision, 1.0);
        assert_eq!(s.recall, 0.5);
    }

    fn arb_frames() -> impl Strategy<Value = Tensor<f32>> {
        (5usize..60, 1usize..4).prop_flat_map(|(t, c)| {
            prop::collection::vec(-2.0f32..2.0, t * c)
                .prop_map(move |d| Tensor::from_vec(t, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn segmenters_partition(frames in arb_frames(), w in 0usize..4, min_len in 1usize..6, f in 1usize..9) {
            let v = video(frames);
            let me = segment_motion_energy(&v, 2 * w + 1, min_len).unwrap();
            prop_assert!(me.validate_partition().is_ok());
            prop_assert!(me.len() == 1 || me.spans.iter().all(|s| s.len() >= min_len));
            let u = segment_uniform(&v, f).unwrap();
            prop_assert!(u.validate_partition().is_ok());
            prop_assert_eq!(u.len(), v.num_frames().div_ceil(f));
        }

        #[test]
        fn factor_one_is_identity(frames in arb_frames()) {
            let x = frames.cast::<f64>();
            for s in [ReductionStrategy::Maxpool, ReductionStrategy::Stride, ReductionStrategy::Window] {
                prop_assert_eq!(&reduce_baseline(&x, s, 1, 1).unwrap(), &x);
            }
        }

        #[test]
        fn maxpool_dominates_stride(frames in arb_frames(), f in 1usize..6) {
            let mp = reduce_baseline(&frames, ReductionStrategy::Maxpool, f, f).unwrap();
            let sd = reduce_baseline(&frames, ReductionStrategy::Stride, f, f).unwrap();
            prop_assert!(mp.data().iter().zip(sd.data()).all(|(a, b)| a >= b));
        }

        #[test]
        fn uniform_ratio_is_ceil_adjusted(ts in prop::collection::vec(1usize..80, 1..10), k in 1usize..8) {
            let sets: Vec<_> = ts.iter().map(|&t| uniform_spans("v", t, k).unwrap()).collect();
            let r = reduction_report(&sets).unwrap();
            let want: usize = ts.iter().map(|t| t.div_ceil(k)).sum();
            prop_assert_eq!(r.total_tokens, want);
            prop_assert!(r.ratio >= 1.0 / k as f64 - 1e-12);
        }
    }
}
