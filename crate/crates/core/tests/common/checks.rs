//! Oracle comparisons shared by the module tests and the acceptance run.

use hiergen::attention::{hatt, mhatt, sparsemax, HattInputs, HattScale, Level, MhattProjections};
use hiergen::recurrent::{hierarchical_context, hierarchical_context_from_scores, HierAttentionParams, WordAttentionNorm};
use hiergen::tensor::{Graph, ParamStore, Tensor};
use rand::Rng;

use super::{hatt_brute, hier_context_brute, max_abs_diff, michelot, random_rows, rng, simplex_kkt_holds, additive_brute};

fn matrix(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn row(v: &[f64]) -> Tensor {
    Tensor::row(v.to_vec()).unwrap()
}

/// Largest deviation of the library sparsemax from the active-set oracle over
/// `n` random vectors of length 1..=50, and whether every library output
/// satisfies the KKT conditions.
pub fn sparsemax_vs_oracle(n: usize, seed: u64) -> (f64, bool) {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    let mut kkt = true;
    for _ in 0..n {
        let len = r.gen_range(1..=50);
        let scale = [0.1, 1.0, 10.0][r.gen_range(0..3)];
        let v: Vec<f64> = (0..len).map(|_| r.gen_range(-scale..scale)).collect();
        let got = sparsemax(&v, Level::Sentence).unwrap();
        worst = worst.max(max_abs_diff(got.weights(), &michelot(&v)));
        kkt &= simplex_kkt_holds(&v, got.weights(), 1e-9);
    }
    (worst, kkt)
}

pub struct HattCase {
    pub q_s: Vec<f64>,
    pub q_w: Vec<f64>,
    pub k_s: Vec<Vec<f64>>,
    pub k_w: Vec<Vec<Vec<f64>>>,
    pub v_w: Vec<Vec<Vec<f64>>>,
}

pub fn random_hatt_case(r: &mut rand_chacha::ChaCha8Rng, d: usize) -> HattCase {
    let k = r.gen_range(1..=5);
    let lens: Vec<usize> = (0..k).map(|_| r.gen_range(1..=6)).collect();
    HattCase {
        q_s: random_rows(r, 1, d).remove(0),
        q_w: random_rows(r, 1, d).remove(0),
        k_s: random_rows(r, k, d),
        k_w: lens.iter().map(|&l| random_rows(r, l, d)).collect(),
        v_w: lens.iter().map(|&l| random_rows(r, l, d)).collect(),
    }
}

fn hatt_inputs(g: &mut Graph, c: &HattCase) -> HattInputs {
    let q_s = g.constant(row(&c.q_s));
    let q_w = g.constant(row(&c.q_w));
    let k_s = g.constant(matrix(&c.k_s));
    let k_w: Vec<_> = c.k_w.iter().map(|m| g.constant(matrix(m))).collect();
    let v_w: Vec<_> = c.v_w.iter().map(|m| g.constant(matrix(m))).collect();
    HattInputs::from_sentences(g, q_s, q_w, k_s, &k_w, &v_w).unwrap()
}

/// HATT against the triple loop on `n` random instances, both scalings.
pub fn hatt_vs_brute(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for t in 0..n {
        let d = r.gen_range(1..=6);
        let c = random_hatt_case(&mut r, d);
        let scale = if t % 2 == 0 { HattScale::SqrtD } else { HattScale::D };
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let inputs = hatt_inputs(&mut g, &c);
        let out = hatt(&mut g, &inputs, scale).unwrap();
        let want = hatt_brute(&c.q_s, &c.q_w, &c.k_s, &c.k_w, &c.v_w, scale.divisor(d));
        worst = worst.max(max_abs_diff(g.value(out.context).data(), &want));
    }
    worst
}

/// MHATT with one head and identity projections against HATT.
pub fn mhatt_identity_vs_hatt(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let d = r.gen_range(1..=6);
        let c = random_hatt_case(&mut r, d);
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let inputs = hatt_inputs(&mut g, &c);
        let base = hatt(&mut g, &inputs, HattScale::SqrtD).unwrap();
        let mut eye = || g.constant(Tensor::identity(d));
        let proj = MhattProjections {
            wq_s: eye(),
            wk_s: eye(),
            wq_w: eye(),
            wk_w: eye(),
            wv: eye(),
            wo: eye(),
        };
        let multi = mhatt(&mut g, &inputs, 1, &proj, HattScale::SqrtD).unwrap();
        worst = worst.max(max_abs_diff(g.value(multi.context).data(), g.value(base.context).data()));
    }
    worst
}

/// Full hierarchical context (additive sentence scores, global word softmax,
/// sparsemax sentence weights) against nested loops.
pub fn hier_context_vs_brute(n: usize, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..n {
        let k = r.gen_range(1..=5);
        let lens: Vec<usize> = (0..k).map(|_| r.gen_range(1..=5)).collect();
        let (wd, sd, dd, a) = (r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4), r.gen_range(1..=4));
        let words: Vec<Vec<Vec<f64>>> = lens.iter().map(|&l| random_rows(&mut r, l, wd)).collect();
        let m: usize = lens.iter().sum();
        let word_scores = random_rows(&mut r, 1, m).remove(0);
        let sent_states = random_rows(&mut r, k, sd);
        let dec = random_rows(&mut r, 1, dd).remove(0);
        let w_sent = random_rows(&mut r, sd + dd, a);
        let v_sent: Vec<f64> = random_rows(&mut r, 1, a).remove(0);

        let mut store = ParamStore::new();
        let p = HierAttentionParams {
            w_word: store.add("w_word", Tensor::zeros(&[wd + dd, a])).unwrap(),
            v_word: store.add("v_word", Tensor::zeros(&[a, 1])).unwrap(),
            w_sent: store.add("w_sent", matrix(&w_sent)).unwrap(),
            v_sent: store.add("v_sent", Tensor::matrix(a, 1, v_sent.clone()).unwrap()).unwrap(),
        };
        let mut g = Graph::new(&store);
        let flat: Vec<Vec<f64>> = words.iter().flatten().cloned().collect();
        let wv = g.constant(matrix(&flat));
        let ws = g.constant(row(&word_scores));
        let ss = g.constant(matrix(&sent_states));
        let dv = g.constant(row(&dec));
        let out = hierarchical_context(&mut g, wv, &lens, ws, ss, dv, &p, WordAttentionNorm::Global).unwrap();

        let sentence_scores: Vec<f64> = sent_states.iter().map(|s| additive_brute(s, &dec, &w_sent, &v_sent)).collect();
        let want = hier_context_brute(&words, &word_scores, &sentence_scores);
        worst = worst.max(max_abs_diff(g.value(out.context).data(), &want));
    }
    worst
}

/// Over `n` random paragraphs, perturbs the word values of every sentence
/// that sparsemax leaves at exactly zero weight, holding all scores fixed.
/// Returns the number of zero-weight sentences seen and the largest change
/// of the context vector.
pub fn selectivity(n: usize, seed: u64) -> (usize, f64) {
    let mut r = rng(seed);
    let mut zeros = 0;
    let mut worst = 0.0f64;
    for _ in 0..n {
        let k = r.gen_range(2..=6);
        let lens: Vec<usize> = (0..k).map(|_| r.gen_range(1..=5)).collect();
        let m: usize = lens.iter().sum();
        let dim = r.gen_range(1..=5);
        let words = random_rows(&mut r, m, dim);
        let word_scores = random_rows(&mut r, 1, m).remove(0);
        let sentence_scores: Vec<f64> = (0..k).map(|_| r.gen_range(-3.0..3.0)).collect();
        let context = |words: &[Vec<f64>]| -> (Vec<f64>, Vec<f64>) {
            let store = ParamStore::new();
            let mut g = Graph::new(&store);
            let wv = g.constant(matrix(words));
            let ws = g.constant(row(&word_scores));
            let ss = g.constant(row(&sentence_scores));
            let out = hierarchical_context_from_scores(&mut g, wv, &lens, ws, ss, WordAttentionNorm::Global).unwrap();
            (g.value(out.context).data().to_vec(), g.value(out.sentence_weights).data().to_vec())
        };
        let (base, a_s) = context(&words);
        let mut off = 0;
        for (i, &len) in lens.iter().enumerate() {
            if a_s[i] == 0.0 {
                zeros += 1;
                let mut perturbed = words.clone();
                for w in &mut perturbed[off..off + len] {
                    for x in w.iter_mut() {
                        *x += r.gen_range(-100.0..100.0);
                    }
                }
                let (c, _) = context(&perturbed);
                worst = worst.max(max_abs_diff(&c, &base));
            }
            off += len;
        }
    }
    (zeros, worst)
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

/// Hand-computed metric values as `(case, computed, expected, tolerance)`.
/// Values built from β² = 1.2 carry decimal-to-binary rounding, so they get a
/// few ulp; everything else is compared exactly.
pub fn metric_fixtures() -> Vec<(&'static str, f64, f64, f64)> {
    use hiergen::eval::{bleu, lcs_length, rouge_l_pair, ROUGE_BETA2};
    let p1 = bleu(&[words("the the the")], &[words("the cat")], 1).unwrap().precisions[0];
    let rouge = rouge_l_pair(&words("a b c d"), &words("a c d"), ROUGE_BETA2);
    let (p, r) = (3.0 / 4.0, 1.0);
    let rouge_hand = (1.0 + 1.2) * p * r / (r + 1.2 * p);
    let identical = bleu(&[words("who won the cup")], &[words("who won the cup")], 4).unwrap().score;
    let disjoint = rouge_l_pair(&words("x y"), &words("a b"), ROUGE_BETA2);
    // hyp "a b c" vs ref "a b d e": 1-grams 2/3, 2-grams 1/2, bp exp(1 - 4/3).
    let b2 = bleu(&[words("a b c")], &[words("a b d e")], 2).unwrap().score;
    let b2_hand = (1.0f64 - 4.0 / 3.0).exp() * ((2.0f64 / 3.0).ln() / 2.0 + 0.5f64.ln() / 2.0).exp();
    // one of two 3-grams matches; the single 4-gram misses and is smoothed to (0 + 1) / (1 + 1).
    let p3 = bleu(&[words("a b c d")], &[words("a b c e")], 4).unwrap().precisions;
    let ulps = 4.0 * f64::EPSILON;
    vec![
        ("unigram precision of `the the the` vs `the cat`", p1, 1.0 / 3.0, 0.0),
        ("ROUGE-L of `a b c d` vs `a c d`", rouge, rouge_hand, 0.0),
        ("ROUGE-L of `a b c d` vs `a c d` as 33/38", rouge, 33.0 / 38.0, ulps),
        ("LCS of `a b a` and `b a b`", lcs_length(&words("a b a"), &words("b a b")) as f64, 2.0, 0.0),
        ("LCS of `a b c d` and `a c d`", lcs_length(&words("a b c d"), &words("a c d")) as f64, 3.0, 0.0),
        ("BLEU-4 of an identical pair", identical, 1.0, 0.0),
        ("ROUGE-L of disjoint pair", disjoint, 0.0, 0.0),
        ("BLEU-2 of `a b c` vs `a b d e`", b2, b2_hand, ulps),
        ("smoothed 4-gram precision", p3[3], 1.0 / 2.0, 0.0),
        ("3-gram precision with one match", p3[2], 1.0 / 2.0, 0.0),
    ]
}

/// `bleu(h, h)` and `rouge_l(h, h)` over the question side of the fixtures.
pub fn self_scores(corpus: &[Vec<String>]) -> (f64, f64) {
    use hiergen::eval::{bleu, rouge_l, ROUGE_BETA2};
    (
        bleu(corpus, corpus, 4).unwrap().score,
        rouge_l(corpus, corpus, ROUGE_BETA2).unwrap(),
    )
}
