//! Structural properties of the all-layer encoder.

use mse2d::encoder::{encode_all_layers, TokenBatch, PAD_ID};
use mse2d::gradcheck::{gradcheck, DEFAULT_EPSILON};
use mse2d::{EncoderConfig, EncoderParams, Graph, Pooling, Tensor, Vocab};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn cfg(pooling: Pooling) -> EncoderConfig {
    EncoderConfig {
        vocab_size: 20,
        d_model: 8,
        n_layers: 3,
        n_heads: 2,
        d_ff: 12,
        max_seq_len: 8,
        pooling,
    }
}

/// Initialised weights plus noise, so every layer does visible work.
fn params(cfg: &EncoderConfig, seed: u64) -> EncoderParams<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut p = EncoderParams::<f64>::init(cfg, &mut rng).unwrap();
    for t in p.leaves_mut() {
        t.data_mut().iter_mut().for_each(|v| *v += noise.sample(&mut rng));
    }
    p
}

fn embed(p: &EncoderParams<f64>, cfg: &EncoderConfig, seqs: &[Vec<usize>]) -> Vec<Tensor<f64>> {
    embed_batch(p, cfg, &TokenBatch::from_sequences(seqs).unwrap())
}

fn embed_batch(p: &EncoderParams<f64>, cfg: &EncoderConfig, batch: &TokenBatch) -> Vec<Tensor<f64>> {
    let mut g = Graph::new();
    let w = p.bind(&mut g, false).unwrap();
    let e = encode_all_layers(&mut g, &w, cfg, batch).unwrap();
    e.layers.iter().map(|&v| g.value(v).clone()).collect()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

fn seqs() -> Vec<Vec<usize>> {
    vec![vec![3, 4, 5], vec![7, 2], vec![9, 9, 10, 11, 12], vec![6]]
}

#[test]
fn one_matrix_per_layer() {
    let c = EncoderConfig {
        vocab_size: 30,
        d_model: 32,
        n_layers: 4,
        n_heads: 4,
        d_ff: 16,
        max_seq_len: 6,
        pooling: Pooling::Mean,
    };
    let out = embed(&params(&c, 0), &c, &[vec![2, 3], vec![4], vec![5, 6, 7]]);
    assert_eq!(out.len(), 4);
    assert!(out.iter().all(|t| t.dims() == [3, 32] && t.all_finite()));
}

#[test]
fn batch_permutation_permutes_rows() {
    for pooling in [Pooling::Mean, Pooling::FirstToken] {
        let c = cfg(pooling);
        let p = params(&c, 1);
        let s = seqs();
        let perm = [2, 0, 3, 1];
        let permuted: Vec<Vec<usize>> = perm.iter().map(|&i| s[i].clone()).collect();
        let (a, b) = (embed(&p, &c, &s), embed(&p, &c, &permuted));
        for (la, lb) in a.iter().zip(&b) {
            for (r, &i) in perm.iter().enumerate() {
                assert!(close(lb.row(r), la.row(i), 1e-12));
            }
        }
    }
}

#[test]
fn identical_texts_get_identical_rows() {
    let c = cfg(Pooling::Mean);
    let p = params(&c, 2);
    let out = embed(&p, &c, &[vec![3, 4, 5], vec![8], vec![3, 4, 5]]);
    for t in &out {
        assert_eq!(t.row(0), t.row(2));
    }
}

#[test]
fn pad_positions_do_not_leak() {
    let c = cfg(Pooling::Mean);
    let p = params(&c, 3);
    let batch = TokenBatch::from_sequences(&seqs()).unwrap();
    let base = embed_batch(&p, &c, &batch);
    let mut other = batch.clone();
    for (id, &real) in other.ids.iter_mut().zip(&batch.mask) {
        if !real {
            *id = 17;
        }
    }
    assert_ne!(other.ids, batch.ids);
    let changed = embed_batch(&p, &c, &other);
    for (a, b) in base.iter().zip(&changed) {
        assert!(close(a.data(), b.data(), 1e-12));
    }
}

#[test]
fn embeddings_do_not_depend_on_batch_company() {
    let c = cfg(Pooling::Mean);
    let p = params(&c, 4);
    let s = seqs();
    let together = embed(&p, &c, &s);
    for (i, seq) in s.iter().enumerate() {
        let alone = embed(&p, &c, std::slice::from_ref(seq));
        for (t, a) in together.iter().zip(&alone) {
            assert!(close(t.row(i), a.row(0), 1e-12));
        }
    }
}

#[test]
fn layer_i_equals_the_model_cut_after_layer_i() {
    let c = cfg(Pooling::Mean);
    let p = params(&c, 5);
    let full = embed(&p, &c, &seqs());
    for keep in 1..=c.n_layers {
        let mut cut = p.clone();
        cut.layers.truncate(keep);
        let cc = EncoderConfig { n_layers: keep, ..c.clone() };
        let short = embed(&cut, &cc, &seqs());
        assert_eq!(short.len(), keep);
        for i in 0..keep {
            assert_eq!(short[i].data(), full[i].data(), "layer {}", i + 1);
        }
    }
}

#[test]
fn pad_token_alone_is_still_encodable() {
    let c = cfg(Pooling::Mean);
    let p = params(&c, 6);
    let out = embed(&p, &c, &[vec![PAD_ID + 1]]);
    assert!(out.iter().all(|t| t.all_finite()));
}

#[test]
fn encoder_gradients_pass_gradcheck() {
    let c = EncoderConfig {
        vocab_size: 10,
        d_model: 4,
        n_layers: 2,
        n_heads: 2,
        d_ff: 6,
        max_seq_len: 4,
        pooling: Pooling::Mean,
    };
    let p = params(&c, 7);
    let batch = TokenBatch::from_sequences(&[vec![2, 3, 4], vec![5, 6]]).unwrap();
    let inputs: Vec<Tensor<f64>> = p.leaves().into_iter().cloned().collect();
    let r = gradcheck(
        |g, vars| {
            let w = mse2d::encoder::Weights::from_leaves(c.n_layers, vars.iter().copied())?;
            let e = encode_all_layers(g, &w, &c, &batch)?;
            // Every layer contributes through distinct weights.
            let mut total = None;
            for (i, &l) in e.layers.iter().enumerate() {
                let sq = g.mul(l, l)?;
                let s = g.sum(sq)?;
                let s = g.scale(s, (i + 1) as f64)?;
                let e = g.exp(l)?;
                let e = g.sum(e)?;
                let term = g.add(s, e)?;
                total = Some(match total {
                    None => term,
                    Some(t) => g.add(t, term)?,
                });
            }
            Ok(total.unwrap())
        },
        &inputs,
        DEFAULT_EPSILON,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{:e}", r.max_rel_error);
}

#[test]
fn tokenizer_contract() {
    let vocab = Vocab::new(["[pad]", "[unk]", "x", "the", "cat"].map(String::from).to_vec()).unwrap();
    assert_eq!(vocab.tokenize("The cat", 8), vec![3, 4]);
    assert_eq!(vocab.tokenize("zzz", 8), vec![1]);
    let long = vec!["cat"; 600].join(" ");
    assert_eq!(vocab.tokenize(&long, 128).len(), 128);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rows_are_finite_for_any_batch(batch in prop::collection::vec(prop::collection::vec(1usize..20, 1..=8), 1..5)) {
        let c = cfg(Pooling::Mean);
        let p = params(&c, 8);
        let out = embed(&p, &c, &batch);
        prop_assert_eq!(out.len(), 3);
        for t in out {
            prop_assert_eq!(t.dims(), &[batch.len(), 8]);
            prop_assert!(t.all_finite());
        }
    }
}
