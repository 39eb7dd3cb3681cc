#![allow(dead_code)]

pub mod checks;

use hiergen::data::{Limits, QGInstance, RawExample, TokenizedExample, Vocab};

pub const TOY_WORDS: [&str; 12] = ["the", "cat", "sat", ".", "a", "dog", "ran", "where", "did", "?", "what", "home"];

pub fn toy_vocab() -> Vocab {
    Vocab::from_tokens(TOY_WORDS).unwrap()
}

pub fn raw(id: &str, paragraph: &str, question: &str, answer: &str) -> RawExample {
    RawExample {
        id: id.into(),
        paragraph_id: format!("p-{id}"),
        paragraph: paragraph.into(),
        question: question.into(),
        answer: answer.into(),
        answer_start: paragraph.find(answer),
    }
}

pub fn instance(vocab: &Vocab, r: &RawExample) -> QGInstance {
    QGInstance::encode(&TokenizedExample::from_raw(r, &Limits::default()), vocab)
}

/// Two sentences of three words, answer in the second.
pub fn toy_instance() -> QGInstance {
    instance(&toy_vocab(), &raw("toy", "The cat sat. A dog ran.", "Where did a dog ?", "dog ran"))
}

/// Three sentences, no answer span.
pub fn toy_instance_no_answer() -> QGInstance {
    instance(&toy_vocab(), &raw("toy2", "The cat sat. A dog ran. The cat ran.", "What sat ?", "home"))
}

use hiergen::tensor::{GradStore, Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Builds `f(inputs)`, reduces it to `Σ out ⊙ R` with a random fixed `R`, and
/// returns the largest relative error between tape gradients and central
/// differences over every input coordinate.
pub fn fd_max_rel_error<F>(inputs: &[Tensor], seed: u64, eps: f64, f: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> hiergen::Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("x{i}"), t.clone()).unwrap())
        .collect();
    fd_store_max_rel_error(&mut store, seed, eps, |g| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        f(g, &vars)
    })
}

/// Same check over every coordinate of every parameter in `store`.
pub fn fd_store_max_rel_error<F>(store: &mut ParamStore, seed: u64, eps: f64, f: F) -> f64
where
    F: Fn(&mut Graph) -> hiergen::Result<Var>,
{
    let weights = {
        let mut g = Graph::new(store);
        let out = f(&mut g).unwrap();
        let shape = g.shape(out).to_vec();
        let mut r = rng(seed ^ 0x5eed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let eval = |store: &ParamStore, grads: Option<&mut GradStore>| -> f64 {
        let mut g = Graph::new(store);
        let out = f(&mut g).unwrap();
        let w = g.constant(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod).unwrap();
        if let Some(gs) = grads {
            g.backward(loss, gs).unwrap();
        }
        g.scalar(loss).unwrap()
    };
    let mut grads = GradStore::new(store);
    eval(store, Some(&mut grads));
    let ids: Vec<_> = store.ids().collect();
    let mut worst = 0.0f64;
    for id in ids {
        let n = store.value(id).len();
        for k in 0..n {
            let analytic = grads.get(id).map_or(0.0, |t| t.data()[k]);
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + eps;
            let up = eval(store, None);
            store.value_mut(id).data_mut()[k] = orig - eps;
            let down = eval(store, None);
            store.value_mut(id).data_mut()[k] = orig;
            worst = worst.max(rel_error(analytic, (up - down) / (2.0 * eps)));
        }
    }
    worst
}

/// Simplex projection by Michelot's active-set iteration: drop every index
/// whose shifted value is non-positive until the active set is stable.
/// Independent of the sorted-threshold rule used by the library.
pub fn michelot(v: &[f64]) -> Vec<f64> {
    let mut active: Vec<usize> = (0..v.len()).collect();
    loop {
        let tau = (active.iter().map(|&i| v[i]).sum::<f64>() - 1.0) / active.len() as f64;
        let kept: Vec<usize> = active.iter().copied().filter(|&i| v[i] - tau > 0.0).collect();
        if kept.len() == active.len() {
            let mut x = vec![0.0; v.len()];
            for &i in &active {
                x[i] = v[i] - tau;
            }
            return x;
        }
        active = kept;
    }
}

/// KKT conditions of `min ½‖x − v‖²` over the simplex, to tolerance `tol`.
pub fn simplex_kkt_holds(v: &[f64], x: &[f64], tol: f64) -> bool {
    let sum: f64 = x.iter().sum();
    if (sum - 1.0).abs() > tol || x.iter().any(|&xi| xi < 0.0) {
        return false;
    }
    let support: Vec<usize> = (0..x.len()).filter(|&i| x[i] > 0.0).collect();
    let Some(&first) = support.first() else { return false };
    let tau = v[first] - x[first];
    support.iter().all(|&i| (v[i] - x[i] - tau).abs() <= tol)
        && (0..x.len()).filter(|i| !support.contains(i)).all(|i| v[i] - tau <= tol)
}

pub fn softmax_ref(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Hierarchical attention by explicit loops over sentences, words and
/// features. `k_w[i]` and `v_w[i]` are the rows of sentence `i`.
pub fn hatt_brute(
    q_s: &[f64],
    q_w: &[f64],
    k_s: &[Vec<f64>],
    k_w: &[Vec<Vec<f64>>],
    v_w: &[Vec<Vec<f64>>],
    scale: f64,
) -> Vec<f64> {
    let a = softmax_ref(&k_s.iter().map(|k| dot(q_s, k) / scale).collect::<Vec<_>>());
    let dv = v_w[0][0].len();
    let mut out = vec![0.0; dv];
    for i in 0..k_s.len() {
        let b = softmax_ref(&k_w[i].iter().map(|k| dot(q_w, k) / scale).collect::<Vec<_>>());
        for j in 0..k_w[i].len() {
            for f in 0..dv {
                out[f] += a[i] * b[j] * v_w[i][j][f];
            }
        }
    }
    out
}

/// `Σ_i a^s_i Σ_j a^w_{i,j} r_{i,j}` with `a^w` a softmax over all words and
/// `a^s` the simplex projection of the sentence scores.
pub fn hier_context_brute(words: &[Vec<Vec<f64>>], word_scores: &[f64], sentence_scores: &[f64]) -> Vec<f64> {
    let aw = softmax_ref(word_scores);
    let as_ = michelot(sentence_scores);
    let dim = words[0][0].len();
    let mut out = vec![0.0; dim];
    let mut flat = 0;
    for (i, sent) in words.iter().enumerate() {
        for word in sent {
            for f in 0..dim {
                out[f] += as_[i] * aw[flat] * word[f];
            }
            flat += 1;
        }
    }
    out
}

/// `vᵀ tanh(W [item; dec])` by loops; `w` rows are input features.
pub fn additive_brute(item: &[f64], dec: &[f64], w: &[Vec<f64>], v: &[f64]) -> f64 {
    let x: Vec<f64> = item.iter().chain(dec).copied().collect();
    (0..v.len())
        .map(|a| v[a] * (0..x.len()).map(|i| x[i] * w[i][a]).sum::<f64>().tanh())
        .sum()
}

pub fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|_| (0..cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
