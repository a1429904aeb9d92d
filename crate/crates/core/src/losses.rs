//! Contrastive objectives between visual and text token sequences, and the
//! label-smoothed language-modelling loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nncore::layers::offsets;
use crate::nncore::{grad_check, Component, GradCheckReport, Graph, ParameterSet, Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub label_smoothing: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.6,
            label_smoothing: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!("{n}={v} outside [0,1]")));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::invalid("label_smoothing outside [0,1)"));
        }
        Ok(())
    }
}

/// Initial value of the temperature logit `s`, with `τ = exp(−s)`.
pub fn initial_temperature_logit() -> f64 {
    (1.0f64 / 0.07).ln()
}

/// Token-level similarities of every video/text pair in a batch.
#[derive(Clone, Debug)]
pub struct SimilarityBatch {
    /// `grids[i][j]`: cosine similarities `N_i × M_j`.
    pub grids: Vec<Vec<Var>>,
    /// `B×B`, entry `(i, j)` = mean over visual tokens of their best text match.
    pub z_v2t: Var,
    /// `B×B`, entry `(i, j)` = mean over text tokens of their best visual match.
    pub z_t2v: Var,
}

fn check_lengths(what: &str, rows: usize, lengths: &[usize]) -> Result<()> {
    if lengths.is_empty() || lengths.iter().any(|&l| l == 0) {
        return Err(Error::invalid(format!("{what}: every sequence needs at least one token")));
    }
    if lengths.iter().sum::<usize>() != rows {
        return Err(Error::shape(
            "token_similarity_aggregate",
            format!("{what} lengths sum to {} for {rows} rows", lengths.iter().sum::<usize>()),
        ));
    }
    Ok(())
}

/// Cosine grids between every pair of sequences, aggregated by max-mean in
/// both directions.
pub fn token_similarity_aggregate<T: Real>(
    g: &mut Graph<'_, T>,
    visual: Var,
    v_lens: &[usize],
    text: Var,
    t_lens: &[usize],
) -> Result<SimilarityBatch> {
    check_lengths("visual", g.shape(visual).0, v_lens)?;
    check_lengths("text", g.shape(text).0, t_lens)?;
    if v_lens.len() != t_lens.len() {
        return Err(Error::shape(
            "token_similarity_aggregate",
            format!("{} videos vs {} sentences", v_lens.len(), t_lens.len()),
        ));
    }
    let b = v_lens.len();
    let vn = g.l2_normalize_rows(visual);
    let tn = g.l2_normalize_rows(text);
    let all = g.matmul_t(vn, tn)?;
    let (vo, to) = (offsets(v_lens), offsets(t_lens));
    let mut grids = Vec::with_capacity(b);
    let mut v2t = Vec::with_capacity(b * b);
    let mut t2v = Vec::with_capacity(b * b);
    for i in 0..b {
        let band = g.slice_rows(all, vo[i], v_lens[i])?;
        let mut row = Vec::with_capacity(b);
        for j in 0..b {
            let s = g.slice_cols(band, to[j], t_lens[j])?;
            let rm = g.row_max(s);
            v2t.push(g.mean(rm));
            let cm = g.col_max(s);
            t2v.push(g.mean(cm));
            row.push(s);
        }
        grids.push(row);
    }
    Ok(SimilarityBatch {
        grids,
        z_v2t: g.stack(&v2t, b, b)?,
        z_t2v: g.stack(&t2v, b, b)?,
    })
}

/// Symmetric InfoNCE over a `B×B` similarity matrix with logits `Z/τ`:
/// `−(1/2B) Σ_i log softmax_row(i)_ii − (1/2B) Σ_j log softmax_col(j)_jj`.
/// `inv_tau` is a `1×1` variable holding `1/τ`.
pub fn info_nce<T: Real>(g: &mut Graph<'_, T>, z: Var, inv_tau: Var) -> Result<Var> {
    let (b, c) = g.shape(z);
    if b != c || b == 0 {
        return Err(Error::shape("info_nce", format!("Z is {b}x{c}")));
    }
    if !g.value(z).all_finite() {
        return Err(Error::NonFinite("similarity matrix".into()));
    }
    let logits = g.scale_by(z, inv_tau)?;
    let rows = g.log_softmax(logits);
    let row_diag = g.diag(rows)?;
    let lt = g.transpose(logits);
    let cols = g.log_softmax(lt);
    let col_diag = g.diag(cols)?;
    let both = g.concat_rows(&[row_diag, col_diag])?;
    let s = g.sum(both);
    Ok(g.scale(s, T::lit(-0.5 / b as f64)))
}

/// `α·L_V2T + (1−α)·L_T2V`.
pub fn clcl_loss<T: Real>(
    g: &mut Graph<'_, T>,
    batch: &SimilarityBatch,
    inv_tau: Var,
    alpha: f64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha={alpha} outside [0,1]")));
    }
    let v2t = info_nce(g, batch.z_v2t, inv_tau)?;
    let t2v = info_nce(g, batch.z_t2v, inv_tau)?;
    weighted(g, v2t, t2v, alpha)
}

/// `β·L_CE + (1−β)·L_HS`.
pub fn dual_level_loss<T: Real>(g: &mut Graph<'_, T>, l_ce: Var, l_hs: Var, beta: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::invalid(format!("beta={beta} outside [0,1]")));
    }
    weighted(g, l_ce, l_hs, beta)
}

fn weighted<T: Real>(g: &mut Graph<'_, T>, a: Var, b: Var, w: f64) -> Result<Var> {
    let a = g.scale(a, T::lit(w));
    let b = g.scale(b, T::lit(1.0 - w));
    g.add(a, b)
}

/// InfoNCE over cosine similarities of mean-pooled sequence summaries.
pub fn clip_global_loss<T: Real>(
    g: &mut Graph<'_, T>,
    visual: Var,
    v_lens: &[usize],
    text: Var,
    t_lens: &[usize],
    inv_tau: Var,
) -> Result<Var> {
    check_lengths("visual", g.shape(visual).0, v_lens)?;
    check_lengths("text", g.shape(text).0, t_lens)?;
    let spans = |lens: &[usize]| -> Vec<(usize, usize)> {
        offsets(lens).into_iter().zip(lens).map(|(o, &l)| (o, o + l)).collect()
    };
    let vs = g.segment_mean(visual, &spans(v_lens))?;
    let ts = g.segment_mean(text, &spans(t_lens))?;
    let vs = g.l2_normalize_rows(vs);
    let ts = g.l2_normalize_rows(ts);
    let z = g.matmul_t(vs, ts)?;
    info_nce(g, z, inv_tau)
}

/// Mean over target steps of the cross-entropy against a smoothed one-hot
/// distribution. PAD targets are skipped.
pub fn lm_loss<T: Real>(g: &mut Graph<'_, T>, logits: Var, targets: &[u32], smoothing: f64) -> Result<Var> {
    let keep: Vec<usize> = (0..targets.len())
        .filter(|&i| targets[i] != crate::corpus::PAD)
        .collect();
    if keep.is_empty() {
        return Err(Error::invalid("lm_loss: no non-PAD target steps"));
    }
    let tg: Vec<usize> = keep.iter().map(|&i| targets[i] as usize).collect();
    let rows = if keep.len() == targets.len() {
        logits
    } else {
        let parts = keep
            .iter()
            .map(|&i| g.slice_rows(logits, i, 1))
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&parts)?
    };
    g.smoothed_cross_entropy(rows, &tg, smoothing)
}

/// Entropy of the smoothed target distribution over `d` classes, the lower
/// bound of [`lm_loss`].
pub fn smoothed_target_entropy(d: usize, eps: f64) -> f64 {
    let on = 1.0 - eps;
    let off = if d > 1 { eps / (d - 1) as f64 } else { 0.0 };
    let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    h(on) + (d - 1) as f64 * h(off)
}

/// Plain-value InfoNCE, for reporting.
pub fn info_nce_value(z: &Tensor<f64>, tau: f64) -> Result<f64> {
    let params = crate::nncore::ParameterSet::<f64>::new();
    let mut g = Graph::eval(&params);
    let zv = g.input(z.clone());
    let it = g.input(Tensor::scalar(1.0 / tau));
    let l = info_nce(&mut g, zv, it)?;
    Ok(g.scalar(l))
}

/// Objective checked by [`loss_grad_check`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// CLCL against the embedding level.
    Ce,
    /// CLCL against the hidden-state level.
    Hs,
    /// Dual-level total.
    Clcl,
    Clip,
    Lm,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(Self::Ce),
            "hs" => Ok(Self::Hs),
            "clcl" | "total" => Ok(Self::Clcl),
            "clip" => Ok(Self::Clip),
            "lm" => Ok(Self::Lm),
            _ => Err(Error::invalid(format!("unknown loss {s:?}"))),
        }
    }
}

/// Settings for [`loss_grad_check`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossCheck {
    pub batch: usize,
    /// Upper bound on tokens per sequence; lengths are drawn from 1..=max.
    pub max_len: usize,
    pub dim: usize,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for LossCheck {
    fn default() -> Self {
        Self {
            batch: 3,
            max_len: 5,
            dim: 6,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

/// Finite-difference check of one loss on a random f64 batch. Every input
/// (token features, temperature logit, LM hidden states and projection)
/// is a trainable leaf, and every coordinate is probed.
pub fn loss_grad_check(kind: LossKind, cfg: &LossCheck) -> Result<GradCheckReport> {
    use rand::{Rng, SeedableRng};

    if cfg.batch == 0 || cfg.max_len == 0 || cfg.dim == 0 {
        return Err(Error::invalid("batch, max_len and dim must be positive"));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed);
    let v_lens: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(1..=cfg.max_len)).collect();
    let t_lens: Vec<usize> = (0..cfg.batch).map(|_| rng.random_range(1..=cfg.max_len)).collect();
    let (nv, nt) = (v_lens.iter().sum::<usize>(), t_lens.iter().sum::<usize>());
    let vocab = 7;
    let mut params = ParameterSet::<f64>::new();
    let mut add = |name: &str, r: usize, c: usize, rng: &mut rand_chacha::ChaCha8Rng| -> Result<()> {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        params.add(name, Component::Mapper, Tensor::from_vec(r, c, data)?, true)?;
        Ok(())
    };
    add("visual", nv, cfg.dim, &mut rng)?;
    add("visual_context", nv, cfg.dim, &mut rng)?;
    add("text_embedding", nt, cfg.dim, &mut rng)?;
    add("text_hidden", nt, cfg.dim, &mut rng)?;
    add("lm_hidden", nt, cfg.dim, &mut rng)?;
    add("lm_proj", cfg.dim, vocab, &mut rng)?;
    params.add(
        "temperature.logit",
        Component::Temperature,
        Tensor::scalar(initial_temperature_logit() - 2.0),
        true,
    )?;
    let targets: Vec<u32> = (0..nt).map(|_| rng.random_range(0..vocab as u32)).collect();
    let w = cfg.weights;
    w.validate()?;

    let objective = |g: &mut Graph<'_, f64>| -> Result<Var> {
        let p = |g: &mut Graph<'_, f64>, n: &str| {
            let id = g.params().id(n).expect("declared above");
            g.param(id)
        };
        let s = p(g, "temperature.logit");
        let inv_tau = g.exp(s);
        let level = |g: &mut Graph<'_, f64>, v: &str, t: &str| -> Result<Var> {
            let (v, t) = (p(g, v), p(g, t));
            let sim = token_similarity_aggregate(g, v, &v_lens, t, &t_lens)?;
            clcl_loss(g, &sim, inv_tau, w.alpha)
        };
        match kind {
            LossKind::Ce => level(g, "visual", "text_embedding"),
            LossKind::Hs => level(g, "visual_context", "text_hidden"),
            LossKind::Clcl => {
                let ce = level(g, "visual", "text_embedding")?;
                let hs = level(g, "visual_context", "text_hidden")?;
                dual_level_loss(g, ce, hs, w.beta)
            }
            LossKind::Clip => {
                let (v, t) = (p(g, "visual_context"), p(g, "text_hidden"));
                clip_global_loss(g, v, &v_lens, t, &t_lens, inv_tau)
            }
            LossKind::Lm => {
                let (h, wp) = (p(g, "lm_hidden"), p(g, "lm_proj"));
                let logits = g.matmul(h, wp)?;
                lm_loss(g, logits, &targets, w.label_smoothing)
            }
        }
    };
    grad_check(&params, objective, 1e-5, usize::MAX)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::ParameterSet;
    use proptest::prelude::*;

    fn with_graph<R>(f: impl FnOnce(&mut Graph<'_, f64>) -> R) -> R {
        let p = ParameterSet::new();
        let mut g = Graph::eval(&p);
        f(&mut g)
    }

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn info_nce_closed_forms() {
        assert!(info_nce_value(&m(&[&[0.3]]), 0.07).unwrap().abs() < 1e-12);
        let u = info_nce_value(&m(&[&[0.4, 0.4], &[0.4, 0.4]]), 1.0).unwrap();
        assert!((u - 2f64.ln()).abs() < 1e-9);
        let d = info_nce_value(&m(&[&[2.0, 0.0], &[0.0, 2.0]]), 1.0).unwrap();
        let e2 = 2f64.exp();
        let oracle = -(e2 / (e2 + 1.0)).ln();
        assert!((d - oracle).abs() < 1e-12);
        assert!((d - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn aggregate_hand_case() {
        let h = 0.5f64.sqrt();
        with_graph(|g| {
            let v = g.input(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
            let t = g.input(m(&[&[1.0, 0.0], &[h, h]]));
            let s = token_similarity_aggregate(g, v, &[2], t, &[2]).unwrap();
            let want = (1.0 + h) / 2.0;
            assert!((g.scalar(s.z_v2t) - want).abs() < 1e-12);
            assert!((g.scalar(s.z_t2v) - want).abs() < 1e-12);
            assert!((want - 0.8536).abs() < 1e-4);
        });
    }

    #[test]
    fn single_tokens_give_cosine() {
        with_graph(|g| {
            let v = g.input(m(&[&[3.0, 4.0]]));
            let t = g.input(m(&[&[4.0, 3.0]]));
            let s = token_similarity_aggregate(g, v, &[1], t, &[1]).unwrap();
            assert!((g.scalar(s.z_v2t) - 24.0 / 25.0).abs() < 1e-12);
        });
    }

    #[test]
    fn duplicating_visual_tokens_keeps_z() {
        with_graph(|g| {
            let v1 = g.input(m(&[&[1.0, 0.2], &[-0.3, 1.0]]));
            let v2 = g.input(m(&[&[1.0, 0.2], &[-0.3, 1.0], &[1.0, 0.2], &[-0.3, 1.0]]));
            let t = g.input(m(&[&[0.5, 0.5], &[1.0, -1.0], &[0.1, 0.9]]));
            let a = token_similarity_aggregate(g, v1, &[2], t, &[3]).unwrap();
            let b = token_similarity_aggregate(g, v2, &[4], t, &[3]).unwrap();
            assert!((g.scalar(a.z_v2t) - g.scalar(b.z_v2t)).abs() < 1e-12);
            assert!((g.scalar(a.z_t2v) - g.scalar(b.z_t2v)).abs() < 1e-12);
        });
    }

    #[test]
    fn empty_sequences_are_rejected() {
        with_graph(|g| {
            let v = g.input(m(&[&[1.0, 0.0]]));
            let t = g.input(m(&[&[1.0, 0.0]]));
            assert!(token_similarity_aggregate(g, v, &[1, 0], t, &[1]).is_err());
            assert!(token_similarity_aggregate(g, v, &[], t, &[]).is_err());
        });
    }

    #[test]
    fn lm_loss_closed_forms() {
        with_graph(|g| {
            let d = 7;
            let l = g.input(Tensor::zeros(3, d));
            for eps in [0.0, 0.2, 0.5] {
                let v = lm_loss(g, l, &[4, 5, 2], eps).unwrap();
                assert!((g.scalar(v) - (d as f64).ln()).abs() < 1e-9);
            }
        });
    }

    #[test]
    fn lm_loss_ln_four_thirds_and_perfect_limit() {
        with_graph(|g| {
            // Target class 1 with logits (ln 1, ln 3): p = 3/4.
            let l = g.input(m(&[&[0.0, 3f64.ln()]]));
            let v = lm_loss(g, l, &[1], 0.0).unwrap();
            assert!((g.scalar(v) - (4.0f64 / 3.0).ln()).abs() < 1e-12);
            assert!(((4.0f64 / 3.0).ln() - 0.2877).abs() < 1e-4);
            let sharp = g.input(m(&[&[0.0, 60.0]]));
            let v = lm_loss(g, sharp, &[1], 0.0).unwrap();
            assert!(g.scalar(v) < 1e-20);
        });
    }

    #[test]
    fn lm_loss_skips_pad_and_rejects_bad_ids() {
        with_graph(|g| {
            let l = g.input(m(&[&[0.0, 1.0, 2.0], &[5.0, 5.0, 5.0]]));
            let with_pad = lm_loss(g, l, &[2, crate::corpus::PAD], 0.1).unwrap();
            let first = g.slice_rows(l, 0, 1).unwrap();
            let alone = lm_loss(g, first, &[2], 0.1).unwrap();
            assert_eq!(g.scalar(with_pad), g.scalar(alone));
            assert!(lm_loss(g, l, &[2, 3], 0.1).is_err());
            assert!(lm_loss(g, l, &[0, 0], 0.1).is_err());
        });
    }

    #[test]
    fn clip_sweep_decreases_to_zero() {
        let mut prev = f64::INFINITY;
        for scale in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let z = m(&[&[scale, 0.0, 0.0], &[0.0, scale, 0.0], &[0.0, 0.0, scale]]);
            let l = info_nce_value(&z, 1.0).unwrap();
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-3);
    }

    #[test]
    fn clip_equals_clcl_for_single_token_sequences() {
        with_graph(|g| {
            let v = g.input(m(&[&[1.0, 0.2, 0.0], &[0.1, -1.0, 0.4], &[0.3, 0.3, 0.3]]));
            let t = g.input(m(&[&[0.9, 0.1, 0.1], &[0.0, -0.8, 0.5], &[-0.2, 0.6, 0.3]]));
            let it = g.input(Tensor::scalar(1.0 / 0.07));
            let lens = [1, 1, 1];
            let clip = clip_global_loss(g, v, &lens, t, &lens, it).unwrap();
            let sb = token_similarity_aggregate(g, v, &lens, t, &lens).unwrap();
            for alpha in [0.0, 0.3, 1.0] {
                let c = clcl_loss(g, &sb, it, alpha).unwrap();
                assert!((g.scalar(c) - g.scalar(clip)).abs() < 1e-12);
            }
        });
    }

    #[test]
    fn weights_endpoints() {
        with_graph(|g| {
            let a = g.input(Tensor::scalar(1.25));
            let b = g.input(Tensor::scalar(-0.5));
            let one = dual_level_loss(g, a, b, 1.0).unwrap();
            let zero = dual_level_loss(g, a, b, 0.0).unwrap();
            assert_eq!((g.scalar(one), g.scalar(zero)), (1.25, -0.5));
            assert!(dual_level_loss(g, a, b, 1.5).is_err());
        });
        assert_eq!(LossWeights::default().beta, 0.6);
    }

    fn arb_z(b: usize) -> impl Strategy<Value = Tensor<f64>> {
        prop::collection::vec(-1.0f64..1.0, b * b).prop_map(move |d| Tensor::from_vec(b, b, d).unwrap())
    }

    proptest! {
        #[test]
        fn info_nce_permutation_invariant(z in arb_z(4), perm in Just(vec![0usize,1,2,3]).prop_shuffle(), tau in 0.05f64..2.0) {
            let mut zp = Tensor::zeros(4, 4);
            for i in 0..4 { for j in 0..4 { zp.set(i, j, z.get(perm[i], perm[j])); } }
            let a = info_nce_value(&z, tau).unwrap();
            let b = info_nce_value(&zp, tau).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }

        #[test]
        fn info_nce_decreases_with_margin(z in arb_z(3), bump in 0.01f64..1.0, tau in 0.05f64..2.0) {
            let mut z2 = z.clone();
            for i in 0..3 { z2.set(i, i, z.get(i, i) + bump); }
            prop_assert!(info_nce_value(&z2, tau).unwrap() < info_nce_value(&z, tau).unwrap());
        }

        #[test]
        fn symmetric_batches_ignore_alpha(z in arb_z(3), a1 in 0.0f64..1.0, a2 in 0.0f64..1.0) {
            with_graph(|g| {
                let zv = g.input(z.clone());
                let zt = g.input(z.transpose());
                let it = g.input(Tensor::scalar(2.0));
                let sb = SimilarityBatch { grids: vec![], z_v2t: zv, z_t2v: zt };
                let l1 = clcl_loss(g, &sb, it, a1).unwrap();
                let l2 = clcl_loss(g, &sb, it, a2).unwrap();
                prop_assert!((g.scalar(l1) - g.scalar(l2)).abs() < 1e-12);
                Ok(())
            })?;
        }

        #[test]
        fn clcl_is_affine_in_alpha(z1 in arb_z(3), z2 in arb_z(3), a in 0.0f64..1.0) {
            with_graph(|g| {
                let zv = g.input(z1.clone());
                let zt = g.input(z2.clone());
                let it = g.input(Tensor::scalar(1.5));
                let sb = SimilarityBatch { grids: vec![], z_v2t: zv, z_t2v: zt };
                let at = |g: &mut Graph<'_, f64>, x: f64| { let l = clcl_loss(g, &sb, it, x).unwrap(); g.scalar(l) };
                let (l0, l1, la) = (at(g, 0.0), at(g, 1.0), at(g, a));
                prop_assert!((la - (a * l1 + (1.0 - a) * l0)).abs() < 1e-10);
                Ok(())
            })?;
        }

        #[test]
        fn aggregation_is_order_invariant(
            v in prop::collection::vec(-1.0f64..1.0, 12),
            t in prop::collection::vec(-1.0f64..1.0, 9),
        ) {
            with_graph(|g| {
                let vt = Tensor::from_vec(4, 3, v.clone()).unwrap();
                let tt = Tensor::from_vec(3, 3, t.clone()).unwrap();
                let vr = vt.select_rows(&[3, 1, 0, 2]);
                let tr = tt.select_rows(&[2, 0, 1]);
                let (a, b) = (g.input(vt), g.input(tt));
                let (c, d) = (g.input(vr), g.input(tr));
                let s1 = token_similarity_aggregate(g, a, &[4], b, &[3]).unwrap();
                let s2 = token_similarity_aggregate(g, c, &[4], d, &[3]).unwrap();
                prop_assert!((g.scalar(s1.z_v2t) - g.scalar(s2.z_v2t)).abs() < 1e-12);
                prop_assert!((g.scalar(s1.z_t2v) - g.scalar(s2.z_t2v)).abs() < 1e-12);
                Ok(())
            })?;
        }

        #[test]
        fn lm_loss_bounded_by_target_entropy(
            logits in prop::collection::vec(-4.0f64..4.0, 5),
            target in 1usize..5,
            eps in 0.0f64..0.9,
        ) {
            with_graph(|g| {
                let l = g.input(Tensor::from_vec(1, 5, logits.clone()).unwrap());
                let v = lm_loss(g, l, &[target as u32], eps).unwrap();
                prop_assert!(g.scalar(v) >= smoothed_target_entropy(5, eps) - 1e-12);
                Ok(())
            })?;
            // Equality when the prediction is the target distribution itself.
            with_graph(|g| {
                let on = 1.0 - eps;
                let off = eps / 4.0;
                let row: Vec<f64> = (0..5).map(|c| if c == target { on } else { off }.max(1e-300).ln()).collect();
                let l = g.input(Tensor::from_vec(1, 5, row).unwrap());
                let v = lm_loss(g, l, &[target as u32], eps).unwrap();
                prop_assert!((g.scalar(v) - smoothed_target_entropy(5, eps)).abs() < 1e-9);
                Ok(())
            })?;
        }
    }

    #[test]
    fn every_loss_matches_finite_differences() {
        for kind in [LossKind::Ce, LossKind::Hs, LossKind::Clcl, LossKind::Clip, LossKind::Lm] {
            for seed in 0..3 {
                let rep = loss_grad_check(kind, &LossCheck { seed, ..LossCheck::default() }).unwrap();
                assert!(rep.coords_checked > 0);
                assert!(rep.max_rel_error < 1e-6, "{kind:?} seed {seed}: {rep:?}");
            }
        }
    }
}
