mod common;

use common::checks;
use common::{fd_store_max_rel_error, max_abs_diff, random_tensor, rng};
use hiergen::data::{Bio, BOS};
use hiergen::init::Init;
use hiergen::recurrent::{
    bilstm_encode, encode_sentences, hierarchical_context_from_scores, lstm_cell_step, lstm_decoder_step,
    sentence_repr_mean, word_inputs, BiLstmParams, DecoderParams, LstmParams, LstmState, SentenceEncoderParams,
    WordAttentionNorm,
};
use hiergen::tensor::{Axis, Graph, ParamStore, Tensor};

#[test]
fn hierarchical_context_matches_nested_loops() {
    let err = checks::hier_context_vs_brute(100, 31);
    assert!(err <= 1e-9, "{err}");
}

#[test]
fn zero_weight_sentences_are_ignored() {
    let (zeros, diff) = checks::selectivity(200, 32);
    assert!(zeros > 0);
    assert!(diff <= 1e-12, "{diff}");
}

#[test]
fn one_hot_sentence_weight_uses_only_that_sentence() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let words = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![5.0, 5.0], vec![7.0, -7.0]]).unwrap());
    let ws = g.constant(Tensor::row(vec![0.3, -0.2, 0.9, 0.1]).unwrap());
    let ss = g.constant(Tensor::row(vec![2.0, 0.0]).unwrap());
    let out = hierarchical_context_from_scores(&mut g, words, &[2, 2], ws, ss, WordAttentionNorm::Global).unwrap();
    assert_eq!(g.value(out.sentence_weights).data(), &[1.0, 0.0]);
    let aw = common::softmax_ref(&[0.3, -0.2, 0.9, 0.1]);
    let want = [aw[0], aw[1]];
    assert!(max_abs_diff(g.value(out.context).data(), &want) < 1e-15);
}

#[test]
fn per_sentence_word_norm_sums_to_one_in_each_sentence() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let words = g.constant(Tensor::zeros(&[5, 2]));
    let ws = g.constant(Tensor::row(vec![0.3, -0.2, 0.9, 0.1, 2.0]).unwrap());
    let ss = g.constant(Tensor::row(vec![0.1, 0.0]).unwrap());
    let out = hierarchical_context_from_scores(&mut g, words, &[2, 3], ws, ss, WordAttentionNorm::PerSentence).unwrap();
    let w = g.value(out.word_weights).data();
    assert!((w[0] + w[1] - 1.0).abs() < 1e-15);
    assert!((w[2] + w[3] + w[4] - 1.0).abs() < 1e-15);
}

#[test]
fn lstm_three_steps_gradcheck() {
    let mut store = ParamStore::new();
    let p = LstmParams::register(&mut Init::new(&mut store, 4), "lstm", 3, 2).unwrap();
    let mut r = rng(40);
    let xs: Vec<Tensor> = (0..3).map(|_| random_tensor(&mut r, 1, 3, -2.0, 2.0)).collect();
    let err = fd_store_max_rel_error(&mut store, 1, 1e-5, |g| {
        let mut s = LstmState::zeros(g, 2);
        let mut hs = Vec::new();
        for x in &xs {
            let xv = g.constant(x.clone());
            s = lstm_cell_step(g, xv, &s, &p)?;
            hs.push(s.h);
        }
        g.concat(&hs, Axis::Cols)
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn bilstm_shape_and_single_step() {
    let mut store = ParamStore::new();
    let p = BiLstmParams::register(&mut Init::new(&mut store, 5), "bi", 3, 4).unwrap();
    let mut g = Graph::new(&store);
    let mut r = rng(41);
    let seq = g.constant(random_tensor(&mut r, 6, 3, -1.0, 1.0));
    let out = bilstm_encode(&mut g, seq, &p).unwrap();
    assert_eq!(g.shape(out.states), &[6, 8]);

    let one = g.constant(random_tensor(&mut r, 1, 3, -1.0, 1.0));
    let out = bilstm_encode(&mut g, one, &p).unwrap();
    let s0 = LstmState::zeros(&mut g, 4);
    let f = lstm_cell_step(&mut g, one, &s0, &p.fwd).unwrap();
    let b = lstm_cell_step(&mut g, one, &s0, &p.bwd).unwrap();
    let states = g.value(out.states).data().to_vec();
    assert_eq!(&states[..4], g.value(f.h).data());
    assert_eq!(&states[4..], g.value(b.h).data());
}

#[test]
fn palindrome_with_tied_directions_is_symmetric() {
    let mut store = ParamStore::new();
    let fwd = LstmParams::register(&mut Init::new(&mut store, 6), "f", 2, 3).unwrap();
    let p = BiLstmParams { fwd: fwd.clone(), bwd: fwd };
    let mut g = Graph::new(&store);
    let rows = vec![vec![0.1, 0.5], vec![-0.7, 0.2], vec![0.4, 0.4], vec![-0.7, 0.2], vec![0.1, 0.5]];
    let seq = g.constant(Tensor::from_rows(&rows).unwrap());
    let out = bilstm_encode(&mut g, seq, &p).unwrap();
    let s = g.value(out.states).to_rows();
    for t in 0..5 {
        let mirror = &s[4 - t];
        assert!(max_abs_diff(&s[t][..3], &mirror[3..]) < 1e-15);
    }
}

#[test]
fn bio_feature_changes_only_its_position() {
    let mut store = ParamStore::new();
    let (emb, bio) = {
        let mut init = Init::new(&mut store, 7);
        (init.uniform("emb", &[10, 4], 0.5).unwrap(), init.uniform("bio", &[3, 2], 0.5).unwrap())
    };
    assert_eq!(store.value(bio).rows(), 3);
    let mut g = Graph::new(&store);
    let a = word_inputs(&mut g, emb, bio, &[4, 5, 6], &[Bio::O, Bio::O, Bio::O]).unwrap();
    let b = word_inputs(&mut g, emb, bio, &[4, 5, 6], &[Bio::O, Bio::B, Bio::O]).unwrap();
    let (ra, rb) = (g.value(a).to_rows(), g.value(b).to_rows());
    assert_eq!(ra[0][4..], ra[2][4..]);
    assert_eq!(ra[0], rb[0]);
    assert_ne!(ra[1], rb[1]);
}

#[test]
fn sentence_mean_is_exact() {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let rows = vec![vec![1.0, 2.0], vec![4.0, -1.0], vec![0.5, 0.5]];
    let r = g.constant(Tensor::from_rows(&rows).unwrap());
    let m = sentence_repr_mean(&mut g, r, &[5, 6, 7]).unwrap();
    assert_eq!(g.value(m).data(), &[(1.0 + 4.0 + 0.5) / 3.0, (2.0 - 1.0 + 0.5) / 3.0]);
    let one = g.rows(r, 1, 2).unwrap();
    let m1 = sentence_repr_mean(&mut g, one, &[5]).unwrap();
    assert_eq!(g.value(m1).data(), &[4.0, -1.0]);
}

#[test]
fn sentence_flags_and_order_matter() {
    let mut store = ParamStore::new();
    let p = SentenceEncoderParams::register(&mut Init::new(&mut store, 8), "sent", 3, 2, 4).unwrap();
    let mut g = Graph::new(&store);
    let mut r = rng(42);
    let rows = random_tensor(&mut r, 3, 3, -1.0, 1.0).to_rows();
    let s = g.constant(Tensor::from_rows(&rows).unwrap());
    let a = encode_sentences(&mut g, s, &[true, false, false], &p).unwrap();
    let b = encode_sentences(&mut g, s, &[false, false, false], &p).unwrap();
    assert_ne!(g.value(a.states), g.value(b.states));
    assert_eq!(g.shape(a.states), &[3, 8]);

    let permuted = vec![rows[2].clone(), rows[0].clone(), rows[1].clone()];
    let sp = g.constant(Tensor::from_rows(&permuted).unwrap());
    let c = encode_sentences(&mut g, sp, &[false, false, false], &p).unwrap();
    let base = g.value(b.states).to_rows();
    let perm = g.value(c.states).to_rows();
    assert_ne!(perm, vec![base[2].clone(), base[0].clone(), base[1].clone()]);
}

#[test]
fn zero_decoder_gives_uniform_distribution() {
    let mut store = ParamStore::new();
    let v = 7;
    let p = DecoderParams {
        lstm: LstmParams {
            w_x: store.add("w_x", Tensor::zeros(&[5, 12])).unwrap(),
            w_h: store.add("w_h", Tensor::zeros(&[3, 12])).unwrap(),
            b: store.add("b", Tensor::zeros(&[1, 12])).unwrap(),
            input: 5,
            hidden: 3,
        },
        w_out: store.add("w_out", Tensor::zeros(&[3, v])).unwrap(),
        b_out: store.add("b_out", Tensor::zeros(&[1, v])).unwrap(),
    };
    let mut g = Graph::new(&store);
    let e = g.constant(Tensor::row(vec![0.2, -0.3]).unwrap());
    let c = g.constant(Tensor::row(vec![0.1, 0.1, 0.4]).unwrap());
    let s0 = LstmState::zeros(&mut g, 3);
    let (logits, _) = lstm_decoder_step(&mut g, e, &s0, c, &p).unwrap();
    assert_eq!(g.shape(logits), &[1, v]);
    let probs = g.softmax(logits).unwrap();
    assert!(g.value(probs).data().iter().all(|&x| (x - 1.0 / v as f64).abs() < 1e-15));
}

#[test]
fn decoder_two_step_teacher_forced_gradcheck() {
    let mut store = ParamStore::new();
    let (p, emb) = {
        let mut init = Init::new(&mut store, 9);
        let lstm = LstmParams::register(&mut init, "dec", 3 + 2, 4).unwrap();
        let w_out = init.xavier("w_out", 4, 6).unwrap();
        let b_out = init.constant("b_out", &[1, 6], 0.0).unwrap();
        let emb = init.uniform("emb", &[6, 3], 0.5).unwrap();
        (DecoderParams { lstm, w_out, b_out }, emb)
    };
    let err = fd_store_max_rel_error(&mut store, 2, 1e-5, |g| {
        let table = g.param(emb);
        let ctx = g.constant(Tensor::row(vec![0.3, -0.6]).unwrap());
        let mut s = LstmState::zeros(g, 4);
        let mut logits = Vec::new();
        for prev in [BOS, 4] {
            let e = g.gather(table, &[prev])?;
            let (l, next) = lstm_decoder_step(g, e, &s, ctx, &p)?;
            s = next;
            logits.push(l);
        }
        let all = g.concat(&logits, Axis::Rows)?;
        g.cross_entropy(all, &[4, 5])
    });
    assert!(err < 1e-4, "{err}");
}
