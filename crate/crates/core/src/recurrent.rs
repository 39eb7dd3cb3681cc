//! LSTM building blocks and the hierarchical BiLSTM paragraph encoder with
//! word-level softmax and sentence-level sparsemax attention.

use crate::attention::{additive_scores, membership};
use crate::data::{Bio, PAD};
use crate::error::{Error, Result};
use crate::init::Init;
use crate::tensor::{Axis, Graph, ParamId, Tensor, Var};

/// Gate layout of the fused `4H` pre-activation: input, forget, candidate, output.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    pub fn register(init: &mut Init, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        let w_x = init.xavier(&format!("{prefix}.w_x"), input, 4 * hidden)?;
        let w_h = init.xavier(&format!("{prefix}.w_h"), hidden, 4 * hidden)?;
        let mut bias = vec![0.0; 4 * hidden];
        bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
        let b = init.tensor(&format!("{prefix}.b"), Tensor::row(bias)?)?;
        Ok(Self {
            w_x,
            w_h,
            b,
            input,
            hidden,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmState {
    pub fn zeros(g: &mut Graph, hidden: usize) -> Self {
        Self {
            h: g.constant(Tensor::zeros(&[1, hidden])),
            c: g.constant(Tensor::zeros(&[1, hidden])),
        }
    }
}

/// One LSTM step on a `1 × input` row.
pub fn lstm_cell_step(g: &mut Graph, x: Var, prev: &LstmState, p: &LstmParams) -> Result<LstmState> {
    if g.shape(x)[1] != p.input {
        return Err(Error::dim("lstm_cell_step", g.shape(x), &[1, p.input]));
    }
    let w_x = g.param(p.w_x);
    let xw = g.matmul(x, w_x)?;
    step_projected(g, xw, prev, p)
}

/// LSTM step given the input contribution `x · W_x` (`1 × 4H`).
fn step_projected(g: &mut Graph, xw: Var, prev: &LstmState, p: &LstmParams) -> Result<LstmState> {
    let hdim = p.hidden;
    if g.shape(prev.h)[1] != hdim || g.shape(prev.c)[1] != hdim {
        return Err(Error::dim("lstm_cell_step", g.shape(prev.h), &[1, hdim]));
    }
    let (w_h, b) = (g.param(p.w_h), g.param(p.b));
    let hw = g.matmul(prev.h, w_h)?;
    let pre = g.add(xw, hw)?;
    let pre = g.add_row(pre, b)?;
    let i = g.cols(pre, 0, hdim)?;
    let f = g.cols(pre, hdim, 2 * hdim)?;
    let c_hat = g.cols(pre, 2 * hdim, 3 * hdim)?;
    let o = g.cols(pre, 3 * hdim, 4 * hdim)?;
    let i = g.sigmoid(i)?;
    let f = g.sigmoid(f)?;
    let c_hat = g.tanh(c_hat)?;
    let o = g.sigmoid(o)?;
    let keep = g.mul(f, prev.c)?;
    let write = g.mul(i, c_hat)?;
    let c = g.add(keep, write)?;
    let tc = g.tanh(c)?;
    let h = g.mul(o, tc)?;
    Ok(LstmState { h, c })
}

/// Runs one direction over all rows of `seq`, returning per-step states in
/// sequence order.
fn run_direction(g: &mut Graph, seq: Var, p: &LstmParams, reverse: bool) -> Result<Vec<LstmState>> {
    let m = g.value(seq).rows();
    let w_x = g.param(p.w_x);
    let xw = g.matmul(seq, w_x)?;
    let mut state = LstmState::zeros(g, p.hidden);
    let mut states = Vec::with_capacity(m);
    let order: Box<dyn Iterator<Item = usize>> = if reverse { Box::new((0..m).rev()) } else { Box::new(0..m) };
    for t in order {
        let row = g.row(xw, t)?;
        state = step_projected(g, row, &state, p)?;
        states.push(state);
    }
    if reverse {
        states.reverse();
    }
    Ok(states)
}

#[derive(Clone, Debug)]
pub struct BiLstmParams {
    pub fwd: LstmParams,
    pub bwd: LstmParams,
}

impl BiLstmParams {
    pub fn register(init: &mut Init, prefix: &str, input: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fwd: LstmParams::register(init, &format!("{prefix}.fwd"), input, hidden)?,
            bwd: LstmParams::register(init, &format!("{prefix}.bwd"), input, hidden)?,
        })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BiLstmOutput {
    /// `M × 2H`, row `t` = `[fwd_h_t ; bwd_h_t]`.
    pub states: Var,
    /// `[fwd_h_{M−1} ; bwd_h_0]`, the final state of each direction.
    pub summary: Var,
}

pub fn bilstm_encode(g: &mut Graph, seq: Var, p: &BiLstmParams) -> Result<BiLstmOutput> {
    let m = g.value(seq).rows();
    if m == 0 {
        return Err(Error::arg("bilstm over an empty sequence"));
    }
    let fwd = run_direction(g, seq, &p.fwd, false)?;
    let bwd = run_direction(g, seq, &p.bwd, true)?;
    let fh: Vec<Var> = fwd.iter().map(|s| s.h).collect();
    let bh: Vec<Var> = bwd.iter().map(|s| s.h).collect();
    let fwd_m = g.concat(&fh, Axis::Rows)?;
    let bwd_m = g.concat(&bh, Axis::Rows)?;
    let states = g.concat(&[fwd_m, bwd_m], Axis::Cols)?;
    let summary = g.concat(&[fh[m - 1], bh[0]], Axis::Cols)?;
    Ok(BiLstmOutput { states, summary })
}

/// Word-level encoder: BiLSTM over `[e_t ; f^w_t]` where `f^w_t` is a learned
/// embedding of the token's BIO tag.
#[derive(Clone, Debug)]
pub struct WordEncoderParams {
    pub bio: ParamId,
    pub lstm: BiLstmParams,
}

impl WordEncoderParams {
    pub fn register(init: &mut Init, prefix: &str, emb_dim: usize, bio_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            bio: init.uniform(&format!("{prefix}.bio"), &[3, bio_dim], 0.1)?,
            lstm: BiLstmParams::register(init, &format!("{prefix}.lstm"), emb_dim + bio_dim, hidden)?,
        })
    }
}

pub fn word_inputs(g: &mut Graph, embeddings: ParamId, bio_table: ParamId, tokens: &[usize], tags: &[Bio]) -> Result<Var> {
    if tokens.len() != tags.len() {
        return Err(Error::arg(format!(
            "{} tokens but {} BIO tags",
            tokens.len(),
            tags.len()
        )));
    }
    let emb = g.param(embeddings);
    let e = g.gather(emb, tokens)?;
    let bio = g.param(bio_table);
    let tag_ids: Vec<usize> = tags.iter().map(|t| t.index()).collect();
    let f = g.gather(bio, &tag_ids)?;
    g.concat(&[e, f], Axis::Cols)
}

pub fn encode_words(
    g: &mut Graph,
    embeddings: ParamId,
    tokens: &[usize],
    tags: &[Bio],
    p: &WordEncoderParams,
) -> Result<BiLstmOutput> {
    let x = word_inputs(g, embeddings, p.bio, tokens, tags)?;
    bilstm_encode(g, x, &p.lstm)
}

/// Mean of the word representations of non-PAD tokens.
pub fn sentence_repr_mean(g: &mut Graph, reps: Var, tokens: &[usize]) -> Result<Var> {
    if g.value(reps).rows() != tokens.len() {
        return Err(Error::dim("sentence_repr_mean", g.shape(reps), &[tokens.len()]));
    }
    let keep: Vec<usize> = (0..tokens.len()).filter(|&j| tokens[j] != PAD).collect();
    if keep.is_empty() {
        return Err(Error::arg("sentence has no non-PAD tokens"));
    }
    if keep.len() == tokens.len() {
        g.mean_rows(reps)
    } else {
        let rows = g.gather(reps, &keep)?;
        g.mean_rows(rows)
    }
}

/// Sentence-level encoder: BiLSTM over `[s̃_t ; f^s_t]` where `f^s_t` embeds
/// whether sentence `t` contains the answer.
#[derive(Clone, Debug)]
pub struct SentenceEncoderParams {
    pub flag: ParamId,
    pub lstm: BiLstmParams,
}

impl SentenceEncoderParams {
    pub fn register(init: &mut Init, prefix: &str, input: usize, flag_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            flag: init.uniform(&format!("{prefix}.flag"), &[2, flag_dim], 0.1)?,
            lstm: BiLstmParams::register(init, &format!("{prefix}.lstm"), input + flag_dim, hidden)?,
        })
    }
}

pub fn encode_sentences(g: &mut Graph, sentence_reprs: Var, has_answer: &[bool], p: &SentenceEncoderParams) -> Result<BiLstmOutput> {
    let k = g.value(sentence_reprs).rows();
    if has_answer.is_empty() {
        return Err(Error::arg("sentence encoder over zero sentences"));
    }
    if has_answer.len() != k {
        return Err(Error::dim("encode_sentences", g.shape(sentence_reprs), &[has_answer.len()]));
    }
    let table = g.param(p.flag);
    let ids: Vec<usize> = has_answer.iter().map(|&f| usize::from(f)).collect();
    let f = g.gather(table, &ids)?;
    let x = g.concat(&[sentence_reprs, f], Axis::Cols)?;
    bilstm_encode(g, x, &p.lstm)
}

/// Normalization of word attention scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordAttentionNorm {
    /// One softmax over all paragraph words; per-sentence slices are used
    /// without renormalizing.
    #[default]
    Global,
    /// An independent softmax inside every sentence.
    PerSentence,
}

/// Additive attention parameters: `W_w`, `v_w` for words, `W_s`, `v_s` for
/// sentences. Each `W` is `(item_dim + decoder_dim) × A`.
#[derive(Clone, Debug)]
pub struct HierAttentionParams {
    pub w_word: ParamId,
    pub v_word: ParamId,
    pub w_sent: ParamId,
    pub v_sent: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct HierContext {
    pub context: Var,
    /// `1 × M` softmax word weights `a^w`.
    pub word_weights: Var,
    /// `1 × K` sparsemax sentence weights `a^s`.
    pub sentence_weights: Var,
}

/// `c = Σ_i a^s_i Σ_j ā^w_{i,j} r_{i,j}` from precomputed word and sentence
/// scores. `words` stacks the `r_i` of all sentences (`M × w`).
pub fn hierarchical_context_from_scores(
    g: &mut Graph,
    words: Var,
    lens: &[usize],
    word_scores: Var,
    sentence_scores: Var,
    norm: WordAttentionNorm,
) -> Result<HierContext> {
    if lens.is_empty() || lens.contains(&0) {
        return Err(Error::arg("hierarchical context over an empty paragraph"));
    }
    let m: usize = lens.iter().sum();
    if g.value(words).rows() != m || g.shape(word_scores) != [1, m] {
        return Err(Error::dim("hierarchical_context", g.shape(words), g.shape(word_scores)));
    }
    if g.shape(sentence_scores) != [1, lens.len()] {
        return Err(Error::dim("hierarchical_context", g.shape(sentence_scores), &[1, lens.len()]));
    }
    let word_weights = match norm {
        WordAttentionNorm::Global => g.softmax(word_scores)?,
        WordAttentionNorm::PerSentence => g.segment_softmax(word_scores, lens)?,
    };
    let sentence_weights = g.sparsemax(sentence_scores)?;
    let context = if lens.len() == 1 {
        g.matmul(word_weights, words)?
    } else {
        let p = membership(g, lens)?;
        let spread = g.matmul(sentence_weights, p)?;
        let w = g.mul(word_weights, spread)?;
        g.matmul(w, words)?
    };
    Ok(HierContext {
        context,
        word_weights,
        sentence_weights,
    })
}

/// Hierarchical context for decoder state `decoder`, with sentence scores
/// `u^s_i = v_sᵀ tanh(W_s [g_i ; d])` computed here and word scores supplied.
pub fn hierarchical_context(
    g: &mut Graph,
    words: Var,
    lens: &[usize],
    word_scores: Var,
    sentence_states: Var,
    decoder: Var,
    p: &HierAttentionParams,
    norm: WordAttentionNorm,
) -> Result<HierContext> {
    let (w, v) = (g.param(p.w_sent), g.param(p.v_sent));
    let sentence_scores = additive_scores(g, sentence_states, decoder, w, v)?;
    hierarchical_context_from_scores(g, words, lens, word_scores, sentence_scores, norm)
}

/// Unidirectional LSTM decoder with an output projection to the vocabulary.
#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub lstm: LstmParams,
    pub w_out: ParamId,
    pub b_out: ParamId,
}

/// One decoder step on `[prev_embedding ; context]`; logits are the output
/// projection of the new hidden state.
pub fn lstm_decoder_step(
    g: &mut Graph,
    prev_embedding: Var,
    prev: &LstmState,
    context: Var,
    p: &DecoderParams,
) -> Result<(Var, LstmState)> {
    let x = g.concat(&[prev_embedding, context], Axis::Cols)?;
    let state = lstm_cell_step(g, x, prev, &p.lstm)?;
    let (w, b) = (g.param(p.w_out), g.param(p.b_out));
    let logits = g.linear(state.h, w, b)?;
    Ok((logits, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamStore;

    fn zero_lstm(store: &mut ParamStore, input: usize, hidden: usize) -> LstmParams {
        LstmParams {
            w_x: store.add("w_x", Tensor::zeros(&[input, 4 * hidden])).unwrap(),
            w_h: store.add("w_h", Tensor::zeros(&[hidden, 4 * hidden])).unwrap(),
            b: store.add("b", Tensor::zeros(&[1, 4 * hidden])).unwrap(),
            input,
            hidden,
        }
    }

    #[test]
    fn zero_weights_give_zero_hidden() {
        let mut store = ParamStore::new();
        let p = zero_lstm(&mut store, 3, 2);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::row(vec![0.5, -1.0, 2.0]).unwrap());
        let s0 = LstmState::zeros(&mut g, 2);
        let s1 = lstm_cell_step(&mut g, x, &s0, &p).unwrap();
        assert_eq!(g.value(s1.h).data(), &[0.0, 0.0]);
    }

    #[test]
    fn saturated_forget_gate_keeps_cell() {
        let mut store = ParamStore::new();
        let p = zero_lstm(&mut store, 1, 2);
        // forget +5, input −5
        store.value_mut(p.b).data_mut().copy_from_slice(&[-5.0, -5.0, 5.0, 5.0, 0.0, 0.0, 0.0, 0.0]);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::row(vec![0.3]).unwrap());
        let prev = LstmState {
            h: g.constant(Tensor::row(vec![0.1, 0.2]).unwrap()),
            c: g.constant(Tensor::row(vec![0.8, -1.5]).unwrap()),
        };
        let next = lstm_cell_step(&mut g, x, &prev, &p).unwrap();
        let sig5 = 1.0 / (1.0 + (-5.0f64).exp());
        let c = g.value(next.c).data();
        assert!((c[0] - 0.8 * sig5).abs() < 1e-15);
        assert!((c[1] + 1.5 * sig5).abs() < 1e-15);
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let mut store = ParamStore::new();
        let p = zero_lstm(&mut store, 3, 2);
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::row(vec![0.5, -1.0]).unwrap());
        let s0 = LstmState::zeros(&mut g, 2);
        assert!(matches!(lstm_cell_step(&mut g, x, &s0, &p), Err(Error::Dimension { .. })));
    }

    #[test]
    fn all_pad_sentence_rejected() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let r = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(sentence_repr_mean(&mut g, r, &[PAD, PAD]), Err(Error::Argument(_))));
    }

    #[test]
    fn single_word_paragraph_context_is_that_word() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let r = g.constant(Tensor::row(vec![0.4, -0.7, 1.3]).unwrap());
        let uw = g.constant(Tensor::row(vec![2.5]).unwrap());
        let us = g.constant(Tensor::row(vec![-1.0]).unwrap());
        let ctx = hierarchical_context_from_scores(&mut g, r, &[1], uw, us, WordAttentionNorm::Global).unwrap();
        assert_eq!(g.value(ctx.context).data(), &[0.4, -0.7, 1.3]);
        let empty = hierarchical_context_from_scores(&mut g, r, &[], uw, us, WordAttentionNorm::Global);
        assert!(matches!(empty, Err(Error::Argument(_))));
    }
}
