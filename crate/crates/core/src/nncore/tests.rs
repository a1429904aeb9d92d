use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::*;
use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor<f64> {
    let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(r, c, data).unwrap()
}

/// Parameter set with named random tensors of the given shapes.
fn params_of(shapes: &[(&str, usize, usize)], seed: u64) -> ParameterSet<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParameterSet::new();
    for &(n, r, c) in shapes {
        p.add(n, Component::Mapper, rand_tensor(&mut rng, r, c), true)
            .unwrap();
    }
    p
}

fn pv(g: &mut Graph<'_, f64>, name: &str) -> Var {
    let id = g.params().id(name).unwrap();
    g.param(id)
}

/// Weighted sum with fixed random weights so every output entry matters.
fn probe(g: &mut Graph<'_, f64>, y: Var, seed: u64) -> Var {
    let (r, c) = g.shape(y);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.input(rand_tensor(&mut rng, r, c));
    let p = g.mul(y, w).unwrap();
    g.sum(p)
}

fn check(params: &ParameterSet<f64>, f: impl Fn(&mut Graph<'_, f64>) -> Var) -> f64 {
    let rep = grad_check(params, |g| Ok(f(g)), 1e-5, 64).unwrap();
    assert!(rep.coords_checked > 0);
    rep.max_rel_error
}

const TOL: f64 = 1e-6;

#[test]
fn square_at_three_has_gradient_six() {
    let mut p = ParameterSet::new();
    p.add("t", Component::Mapper, Tensor::scalar(3.0), true).unwrap();
    let mut g = Graph::train(&p, None);
    let t = pv(&mut g, "t");
    let y = g.mul(t, t).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.get(p.id("t").unwrap()).unwrap().item(), 6.0);
    let err = check(&p, |g| {
        let t = pv(g, "t");
        g.mul(t, t).unwrap()
    });
    assert!(err < 1e-8, "{err}");
}

#[test]
fn elementwise_and_matrix_ops_match_finite_differences() {
    let p = params_of(&[("a", 3, 4), ("b", 4, 5), ("c", 3, 4), ("r", 1, 4), ("s", 1, 1)], 1);
    let err = check(&p, |g| {
        let (a, b, c, r, s) = (pv(g, "a"), pv(g, "b"), pv(g, "c"), pv(g, "r"), pv(g, "s"));
        let x = g.mul(a, c).unwrap();
        let x = g.sub(x, a).unwrap();
        let x = g.add_row(x, r).unwrap();
        let x = g.scale_by(x, s).unwrap();
        let m = g.matmul(x, b).unwrap(); // 3x5
        let bt = g.transpose(b); // 5x4
        let m2 = g.matmul_t(m, b).unwrap(); // 3x4
        let m3 = g.matmul(m, bt).unwrap(); // 3x4
        let m2 = g.add(m2, m3).unwrap();
        let e = g.exp(m2);
        let sc = g.scale(e, 0.1);
        probe(g, sc, 2)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn activations_and_normalizers_match_finite_differences() {
    let p = params_of(&[("x", 4, 6), ("gm", 1, 6), ("bt", 1, 6)], 3);
    let err = check(&p, |g| {
        let (x, gm, bt) = (pv(g, "x"), pv(g, "gm"), pv(g, "bt"));
        let y = g.layer_norm(x, gm, bt, 1e-5).unwrap();
        let y = g.gelu(y);
        let r = g.relu(x);
        let y = g.add(y, r).unwrap();
        let n = g.l2_normalize_rows(y);
        let sm = g.softmax(n, None).unwrap();
        let ls = g.log_softmax(y);
        let a = probe(g, sm, 4);
        let b = probe(g, ls, 5);
        g.add(a, b).unwrap()
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn batch_norm_train_mode_matches_finite_differences() {
    let mut p = params_of(&[("x", 7, 3), ("gm", 1, 3), ("bt", 1, 3)], 6);
    let rm = p.add("rm", Component::TemporalConv, Tensor::zeros(1, 3), false).unwrap();
    let rv = p.add("rv", Component::TemporalConv, Tensor::filled(1, 3, 1.0), false).unwrap();
    let err = check(&p, |g| {
        let (x, gm, bt) = (pv(g, "x"), pv(g, "gm"), pv(g, "bt"));
        let y = g.batch_norm(x, gm, bt, rm, rv, 0.1, 1e-5).unwrap();
        probe(g, y, 7)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn batch_norm_eval_is_a_fixed_affine_map() {
    let mut p = params_of(&[("gm", 1, 2), ("bt", 1, 2)], 8);
    let rm = p
        .add("rm", Component::TemporalConv, Tensor::row_vector(vec![0.5, -1.0]), false)
        .unwrap();
    let rv = p
        .add("rv", Component::TemporalConv, Tensor::row_vector(vec![4.0, 0.25]), false)
        .unwrap();
    let x = Tensor::from_vec(3, 2, vec![1.0, 2.0, -3.0, 0.0, 0.5, -1.0]).unwrap();
    let run = || {
        let mut g = Graph::eval(&p);
        let xi = g.input(x.clone());
        let (gm, bt) = (pv(&mut g, "gm"), pv(&mut g, "bt"));
        let y = g.batch_norm(xi, gm, bt, rm, rv, 0.1, 0.0).unwrap();
        assert!(g.take_buffer_updates().is_empty());
        g.value(y).clone()
    };
    let y = run();
    assert_eq!(y, run());
    let gm = p.by_name("gm").unwrap().value.data().to_vec();
    let bt = p.by_name("bt").unwrap().value.data().to_vec();
    for r in 0..3 {
        let want0 = (x.get(r, 0) - 0.5) / 2.0 * gm[0] + bt[0];
        let want1 = (x.get(r, 1) + 1.0) / 0.5 * gm[1] + bt[1];
        assert!((y.get(r, 0) - want0).abs() < 1e-12);
        assert!((y.get(r, 1) - want1).abs() < 1e-12);
    }
}

#[test]
fn structural_ops_match_finite_differences() {
    let p = params_of(&[("x", 9, 2), ("tab", 5, 3)], 9);
    let err = check(&p, |g| {
        let (x, tab) = (pv(g, "x"), pv(g, "tab"));
        let spans = [(0, 5), (5, 9)];
        let u = g.unfold(x, &spans, 3).unwrap(); // (3 + 2) x 6
        let m = g.segment_mean(u, &[(0, 3), (3, 5)]).unwrap(); // 2x6
        let e = g.gather(tab, &[4, 0, 4]).unwrap(); // 3x3
        let s1 = g.slice_rows(e, 1, 2).unwrap(); // 2x3
        let s2 = g.slice_cols(m, 2, 3).unwrap(); // 2x3
        let cc = g.concat_cols(&[s1, s2]).unwrap(); // 2x6
        let cr = g.concat_rows(&[cc, m]).unwrap(); // 4x6
        let a = probe(g, cr, 10);
        let rm = g.row_max(cr);
        let cm = g.col_max(cr);
        let b = probe(g, rm, 11);
        let c = probe(g, cm, 12);
        let t = g.add(a, b).unwrap();
        g.add(t, c).unwrap()
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn stack_diag_log_and_mean_match_finite_differences() {
    let p = params_of(&[("a", 1, 1), ("b", 1, 1), ("c", 1, 1), ("d", 1, 1)], 13);
    let err = check(&p, |g| {
        let v: Vec<Var> = ["a", "b", "c", "d"].iter().map(|n| pv(g, n)).collect();
        let z = g.stack(&v, 2, 2).unwrap();
        let ls = g.log_softmax(z);
        let d = g.diag(ls).unwrap();
        let e = g.exp(d);
        let l = g.log(e);
        g.mean(l)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn smoothed_cross_entropy_matches_finite_differences() {
    let p = params_of(&[("logits", 2, 5)], 14);
    let err = check(&p, |g| {
        let l = pv(g, "logits");
        g.smoothed_cross_entropy(l, &[3, 0], 0.2).unwrap()
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn attention_stacks_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut p = ParameterSet::<f64>::new();
    let shape = StackShape {
        layers: 1,
        dim: 4,
        heads: 2,
        ff_mult: 2,
        dropout: 0.0,
    };
    let enc = TransformerEncoder::new(
        &mut Builder::new(&mut p, &mut rng, "enc", Component::TranslationEncoder),
        shape,
    )
    .unwrap();
    let dec = TransformerDecoder::new(
        &mut Builder::new(&mut p, &mut rng, "dec", Component::TranslationDecoder),
        shape,
    )
    .unwrap();
    let src = rand_tensor(&mut rng, 5, 4);
    let tgt = rand_tensor(&mut rng, 4, 4);
    let err = check(&p, |g| {
        let s = g.input(src.clone());
        let s = add_positions(g, s, &[3, 2]).unwrap();
        let h = enc.forward(g, s, &[3, 2]).unwrap();
        let t = g.input(tgt.clone());
        let y = dec.forward(g, t, &[2, 2], h, &[3, 2]).unwrap();
        probe(g, y, 16)
    });
    assert!(err < TOL, "{err}");
}

#[test]
fn conv_length_is_n_minus_k_plus_one() {
    for n in 5..20 {
        assert_eq!(conv_out_len(n, 5), Some(n - 4));
    }
    assert_eq!(conv_out_len(12, 5), Some(8));
    assert_eq!(conv_out_len(3, 5), None);

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut p = ParameterSet::<f64>::new();
    let conv = Conv1d::new(
        &mut Builder::new(&mut p, &mut rng, "conv", Component::TemporalConv),
        3,
        4,
        5,
    )
    .unwrap();
    let mut g = Graph::eval(&p);
    let x = g.input(rand_tensor(&mut rng, 20, 3));
    let (y, spans) = conv.forward(&mut g, x, &[(0, 12), (12, 20)]).unwrap();
    assert_eq!(g.shape(y), (8 + 4, 4));
    assert_eq!(spans, vec![(0, 8), (8, 12)]);
    assert!(g.unfold(x, &[(0, 3)], 5).is_err());
}

#[test]
fn dropout_zero_is_identity_and_train_mask_rescales() {
    let p = params_of(&[("x", 20, 20)], 18);
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let mut g = Graph::train(&p, Some(&mut rng));
    let x = pv(&mut g, "x");
    let same = g.dropout(x, 0.0).unwrap();
    assert_eq!(same, x);
    let y = g.dropout(x, 0.5).unwrap();
    let (xv, yv) = (g.value(x).clone(), g.value(y).clone());
    let mut zeros = 0;
    for (a, b) in xv.data().iter().zip(yv.data()) {
        if *b == 0.0 {
            zeros += 1;
        } else {
            assert!((b - 2.0 * a).abs() < 1e-12);
        }
    }
    assert!((100..300).contains(&zeros), "{zeros}");
    let mut ev = Graph::eval(&p);
    let x = pv(&mut ev, "x");
    assert_eq!(ev.dropout(x, 0.5).unwrap(), x);
}

#[test]
fn masked_softmax_rows_sum_to_one_with_zero_on_masked() {
    let p = params_of(&[("x", 4, 4)], 20);
    let mut g = Graph::eval(&p);
    let x = pv(&mut g, "x");
    let mask = causal_mask(4, 4).unwrap();
    let y = g.softmax(x, Some(&mask)).unwrap();
    let t = g.value(y);
    for r in 0..4 {
        let s: f64 = t.row(r).iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        for c in r + 1..4 {
            assert_eq!(t.get(r, c), 0.0);
        }
    }
}

#[test]
fn single_unmasked_key_returns_its_value_row() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut p = ParameterSet::<f64>::new();
    let attn = MultiHeadAttention::new(
        &mut Builder::new(&mut p, &mut rng, "attn", Component::ContextTransformer),
        4,
        2,
    )
    .unwrap();
    let keys = rand_tensor(&mut rng, 3, 4);
    let q = rand_tensor(&mut rng, 1, 4);
    let mut g = Graph::eval(&p);
    let qv = g.input(q);
    let kv = g.input(keys.clone());
    let only_first = |_lq: usize, lk: usize| {
        let mut m = vec![false; lk];
        m[0] = true;
        Some(m)
    };
    let out = attn.forward(&mut g, qv, &[1], kv, &[3], only_first).unwrap();
    // Expected: out_proj(v_proj(key_0))
    let k0 = g.input(keys.select_rows(&[0]));
    let v0 = attn.v.forward(&mut g, k0).unwrap();
    let want = attn.out.forward(&mut g, v0).unwrap();
    let (a, b) = (g.value(out), g.value(want));
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn shape_errors_name_the_op() {
    let p = params_of(&[("a", 2, 3), ("b", 2, 3)], 22);
    let mut g = Graph::eval(&p);
    let (a, b) = (pv(&mut g, "a"), pv(&mut g, "b"));
    let err = g.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("2x3"), "{err}");
}
