//! The four question-generation architectures behind one interface.

use std::borrow::Cow;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{additive_scores_projected, project_items, HattScale};
use crate::data::{Bio, EmbeddingTable, Limits, QGInstance, BOS, EOS};
use crate::decode::StepDecoder;
use crate::error::{Error, Result};
use crate::init::Init;
use crate::recurrent::{
    encode_sentences, encode_words, hierarchical_context_from_scores, lstm_decoder_step, sentence_repr_mean,
    DecoderParams, HierAttentionParams, LstmParams, LstmState, SentenceEncoderParams,
    WordAttentionNorm, WordEncoderParams,
};
use crate::tensor::{Axis, GradStore, Graph, ParamId, ParamStore, Tensor, Var};
use crate::transformer::{
    encode_paragraph_transformer, encode_sentence_transformer, prepare_memory, sentence_repr_boseos,
    transformer_decoder_step, AnswerFeatureMode, DecoderMemory, EncoderBlockParams, ParagraphEncoderParams,
    SourceRepr, TokenInputParams, TransformerDecoderParams, TransformerDecoderState,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Architecture {
    /// Flat BiLSTM encoder, attentive LSTM decoder.
    Seq2SeqAttAE,
    /// Word and sentence BiLSTMs with softmax/sparsemax hierarchical attention.
    HierSeq2SeqAE,
    /// Flat Transformer encoder-decoder.
    TransSeq2SeqAE,
    /// Two-level Transformer encoder, decoder with multi-head hierarchical
    /// source attention.
    HierTransSeq2SeqAE,
}

impl Architecture {
    pub const ALL: [Architecture; 4] = [
        Architecture::Seq2SeqAttAE,
        Architecture::HierSeq2SeqAE,
        Architecture::TransSeq2SeqAE,
        Architecture::HierTransSeq2SeqAE,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Seq2SeqAttAE => "Seq2SeqAttAE",
            Architecture::HierSeq2SeqAE => "HierSeq2SeqAE",
            Architecture::TransSeq2SeqAE => "TransSeq2SeqAE",
            Architecture::HierTransSeq2SeqAE => "HierTransSeq2SeqAE",
        }
    }

    pub fn is_hierarchical(self) -> bool {
        matches!(self, Architecture::HierSeq2SeqAE | Architecture::HierTransSeq2SeqAE)
    }

    pub fn is_transformer(self) -> bool {
        matches!(self, Architecture::TransSeq2SeqAE | Architecture::HierTransSeq2SeqAE)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown architecture `{s}` (expected one of Seq2SeqAttAE, HierSeq2SeqAE, TransSeq2SeqAE, HierTransSeq2SeqAE)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub vocab_size: usize,
    pub emb_dim: usize,
    pub bio_dim: usize,
    pub flag_dim: usize,
    /// Per-direction BiLSTM width.
    pub lstm_hidden: usize,
    pub dec_hidden: usize,
    /// Width of additive attention.
    pub attn_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub enc_layers: usize,
    pub para_layers: usize,
    pub dec_layers: usize,
    pub hatt_scale: HattScale,
    pub word_attention: WordAttentionNorm,
    pub answer_feature: AnswerFeatureMode,
    pub limits: Limits,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::HierSeq2SeqAE,
            vocab_size: 45_000,
            emb_dim: 300,
            bio_dim: 16,
            flag_dim: 16,
            lstm_hidden: 256,
            dec_hidden: 512,
            attn_dim: 256,
            d_model: 128,
            heads: 4,
            ffn_dim: 512,
            enc_layers: 2,
            para_layers: 2,
            dec_layers: 2,
            hatt_scale: HattScale::SqrtD,
            word_attention: WordAttentionNorm::Global,
            answer_feature: AnswerFeatureMode::Concat,
            limits: Limits::default(),
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// Tiny dimensions for tests and smoke runs.
    pub fn toy(arch: Architecture, vocab_size: usize) -> Self {
        Self {
            arch,
            vocab_size,
            emb_dim: 6,
            bio_dim: 2,
            flag_dim: 2,
            lstm_hidden: 4,
            dec_hidden: 5,
            attn_dim: 4,
            d_model: 8,
            heads: 2,
            ffn_dim: 12,
            enc_layers: 1,
            para_layers: 1,
            dec_layers: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("emb_dim", self.emb_dim),
            ("bio_dim", self.bio_dim),
            ("flag_dim", self.flag_dim),
            ("lstm_hidden", self.lstm_hidden),
            ("dec_hidden", self.dec_hidden),
            ("attn_dim", self.attn_dim),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("enc_layers", self.enc_layers),
            ("para_layers", self.para_layers),
            ("dec_layers", self.dec_layers),
            ("max_sentences", self.limits.max_sentences),
            ("max_sentence_tokens", self.limits.max_sentence_tokens),
            ("max_question_tokens", self.limits.max_question_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.vocab_size <= EOS {
            return Err(Error::Config("vocab_size must exceed the reserved tokens".into()));
        }
        if self.arch.is_transformer() {
            crate::attention::head_dim(self.d_model, self.heads)?;
            if self.ffn_dim < self.d_model {
                return Err(Error::Config(format!(
                    "ffn_dim {} is below d_model {}",
                    self.ffn_dim, self.d_model
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum LstmAttention {
    Flat { w: ParamId, v: ParamId },
    Hier(HierAttentionParams),
}

#[derive(Clone, Debug)]
struct LstmNet {
    word: WordEncoderParams,
    sent: Option<SentenceEncoderParams>,
    att: LstmAttention,
    init_w: ParamId,
    init_b: ParamId,
    dec: DecoderParams,
}

#[derive(Clone, Debug)]
struct TransNet {
    input: TokenInputParams,
    blocks: Vec<EncoderBlockParams>,
    para: Option<ParagraphEncoderParams>,
    w_ans: ParamId,
    b_ans: ParamId,
    dec: TransformerDecoderParams,
}

#[derive(Clone, Debug)]
enum Net {
    Lstm(LstmNet),
    Trans(TransNet),
}

/// A built model: configuration, parameters and the wiring between them.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    embed: ParamId,
    net: Net,
}

fn additive(init: &mut Init, prefix: &str, item: usize, dec: usize, a: usize) -> Result<(ParamId, ParamId)> {
    Ok((
        init.xavier(&format!("{prefix}.w"), item + dec, a)?,
        init.xavier(&format!("{prefix}.v"), a, 1)?,
    ))
}

impl Model {
    /// Registers every parameter in a fixed order seeded by `config.seed`.
    pub fn build(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut params = ParamStore::new();
        let embed_table = EmbeddingTable::random(c.vocab_size, c.emb_dim, c.seed ^ 0x9e37_79b9_7f4a_7c15);
        let embed = params.add("embed", embed_table.matrix)?;
        let mut init = Init::new(&mut params, c.seed);
        let net = if c.arch.is_transformer() {
            let d = c.d_model;
            let input = TokenInputParams::register(&mut init, "enc.input", c.emb_dim, c.bio_dim, d, c.answer_feature)?;
            let blocks = (0..c.enc_layers)
                .map(|l| EncoderBlockParams::register(&mut init, &format!("enc.block{l}"), d, c.heads, c.ffn_dim))
                .collect::<Result<Vec<_>>>()?;
            let para = if c.arch.is_hierarchical() {
                Some(ParagraphEncoderParams::register(
                    &mut init,
                    "enc.para",
                    d,
                    c.flag_dim,
                    c.heads,
                    c.ffn_dim,
                    c.para_layers,
                )?)
            } else {
                None
            };
            let w_ans = init.xavier("ans.w", d, d)?;
            let b_ans = init.constant("ans.b", &[1, d], 0.0)?;
            let dec = TransformerDecoderParams::register(
                &mut init,
                "dec",
                c.emb_dim,
                c.vocab_size,
                d,
                c.heads,
                c.ffn_dim,
                c.dec_layers,
                c.arch.is_hierarchical(),
                c.hatt_scale,
            )?;
            Net::Trans(TransNet {
                input,
                blocks,
                para,
                w_ans,
                b_ans,
                dec,
            })
        } else {
            let h = c.lstm_hidden;
            let enc_out = 2 * h;
            let word = WordEncoderParams::register(&mut init, "enc.word", c.emb_dim, c.bio_dim, h)?;
            let (sent, att) = if c.arch.is_hierarchical() {
                let sent = SentenceEncoderParams::register(&mut init, "enc.sent", enc_out, c.flag_dim, h)?;
                let (w_word, v_word) = additive(&mut init, "att.word", enc_out, c.dec_hidden, c.attn_dim)?;
                let (w_sent, v_sent) = additive(&mut init, "att.sent", enc_out, c.dec_hidden, c.attn_dim)?;
                (
                    Some(sent),
                    LstmAttention::Hier(HierAttentionParams {
                        w_word,
                        v_word,
                        w_sent,
                        v_sent,
                    }),
                )
            } else {
                let (w, v) = additive(&mut init, "att", enc_out, c.dec_hidden, c.attn_dim)?;
                (None, LstmAttention::Flat { w, v })
            };
            let init_w = init.xavier("init.w", 2 * enc_out, 2 * c.dec_hidden)?;
            let init_b = init.constant("init.b", &[1, 2 * c.dec_hidden], 0.0)?;
            let lstm = LstmParams::register(&mut init, "dec.lstm", c.emb_dim + enc_out, c.dec_hidden)?;
            let w_out = init.xavier("dec.w_out", c.dec_hidden, c.vocab_size)?;
            let b_out = init.constant("dec.b_out", &[1, c.vocab_size], 0.0)?;
            Net::Lstm(LstmNet {
                word,
                sent,
                att,
                init_w,
                init_b,
                dec: DecoderParams { lstm, w_out, b_out },
            })
        };
        Ok(Self {
            config,
            params,
            embed,
            net,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Replaces the word embedding matrix (for pretrained vectors).
    pub fn set_embeddings(&mut self, table: &EmbeddingTable) -> Result<()> {
        let current = self.params.value(self.embed);
        if current.shape() != table.matrix.shape() {
            return Err(Error::dim("set_embeddings", current.shape(), table.matrix.shape()));
        }
        *self.params.value_mut(self.embed) = table.matrix.clone();
        Ok(())
    }

    fn fit<'i>(&self, inst: &'i QGInstance) -> Cow<'i, QGInstance> {
        if inst.exceeds(&self.config.limits) {
            log::warn!("instance {} exceeds the length limits; truncating", inst.id);
            Cow::Owned(inst.truncated(&self.config.limits))
        } else {
            Cow::Borrowed(inst)
        }
    }

    fn check_ids(&self, inst: &QGInstance) -> Result<()> {
        let v = self.config.vocab_size;
        let bad = inst
            .sentences
            .iter()
            .flatten()
            .chain(&inst.question)
            .chain(&inst.answer)
            .find(|&&t| t >= v);
        match bad {
            Some(t) => Err(Error::arg(format!("instance {}: token id {t} outside vocabulary of {v}", inst.id))),
            None => Ok(()),
        }
    }

    /// Step decoder over one instance. The graph lives inside the decoder.
    pub fn decoder<'a>(&'a self, inst: &QGInstance) -> Result<ModelDecoder<'a>> {
        let inst = self.fit(inst);
        self.check_ids(&inst)?;
        inst.check_invariants()?;
        let mut g = Graph::new(&self.params);
        let source = self.encode(&mut g, &inst)?;
        Ok(ModelDecoder { model: self, g, source })
    }

    fn encode(&self, g: &mut Graph, inst: &QGInstance) -> Result<Source> {
        let lens: Vec<usize> = inst.sentences.iter().map(Vec::len).collect();
        let answer_tags: Vec<Bio> = (0..inst.answer.len())
            .map(|j| if j == 0 { Bio::B } else { Bio::I })
            .collect();
        match &self.net {
            Net::Lstm(net) => {
                let enc_out = 2 * self.config.lstm_hidden;
                let (words, summary, sentences) = match &net.sent {
                    None => {
                        let out = encode_words(g, self.embed, &inst.flat_tokens(), &inst.flat_tags(), &net.word)?;
                        (out.states, out.summary, None)
                    }
                    Some(sent) => {
                        let mut reps = Vec::with_capacity(lens.len());
                        let mut pooled = Vec::with_capacity(lens.len());
                        for (tokens, tags) in inst.sentences.iter().zip(&inst.bio_tags) {
                            let r = encode_words(g, self.embed, tokens, tags, &net.word)?.states;
                            pooled.push(sentence_repr_mean(g, r, tokens)?);
                            reps.push(r);
                        }
                        let words = g.concat(&reps, Axis::Rows)?;
                        let s_tilde = g.concat(&pooled, Axis::Rows)?;
                        let out = encode_sentences(g, s_tilde, &inst.sentence_has_answer, sent)?;
                        (words, out.summary, Some(out.states))
                    }
                };
                let answer = if inst.answer.is_empty() {
                    g.constant(Tensor::zeros(&[1, enc_out]))
                } else {
                    let a = encode_words(g, self.embed, &inst.answer, &answer_tags, &net.word)?;
                    g.mean_rows(a.states)?
                };
                let x = g.concat(&[summary, answer], Axis::Cols)?;
                let (w, b) = (g.param(net.init_w), g.param(net.init_b));
                let z = g.linear(x, w, b)?;
                let z = g.tanh(z)?;
                let dh = self.config.dec_hidden;
                let init = LstmState {
                    h: g.cols(z, 0, dh)?,
                    c: g.cols(z, dh, 2 * dh)?,
                };
                let (words_proj, sentences) = match (&net.att, sentences) {
                    (LstmAttention::Flat { w, .. }, None) => {
                        let w = g.param(*w);
                        (project_items(g, words, w)?, None)
                    }
                    (LstmAttention::Hier(p), Some(states)) => {
                        let (ww, ws) = (g.param(p.w_word), g.param(p.w_sent));
                        let words_proj = project_items(g, words, ww)?;
                        (words_proj, Some((states, project_items(g, states, ws)?)))
                    }
                    _ => unreachable!("attention kind follows the sentence encoder"),
                };
                Ok(Source::Lstm {
                    words,
                    words_proj,
                    sentences,
                    lens,
                    init,
                })
            }
            Net::Trans(net) => {
                let repr = match &net.para {
                    None => {
                        let r = encode_sentence_transformer(
                            g,
                            self.embed,
                            &inst.flat_tokens(),
                            &inst.flat_tags(),
                            &net.input,
                            &net.blocks,
                        )?;
                        SourceRepr::Flat(r)
                    }
                    Some(para) => {
                        let mut reps = Vec::with_capacity(lens.len());
                        let mut s_tilde = Vec::with_capacity(lens.len());
                        for (tokens, tags) in inst.sentences.iter().zip(&inst.bio_tags) {
                            let r = encode_sentence_transformer(g, self.embed, tokens, tags, &net.input, &net.blocks)?;
                            s_tilde.push(sentence_repr_boseos(g, r, tokens)?);
                            reps.push(r);
                        }
                        let r = g.concat(&reps, Axis::Rows)?;
                        let s_tilde = g.concat(&s_tilde, Axis::Rows)?;
                        let s = encode_paragraph_transformer(g, s_tilde, &inst.sentence_has_answer, para)?;
                        SourceRepr::Hier {
                            s,
                            r,
                            lens: lens.clone(),
                        }
                    }
                };
                let pooled = if inst.answer.is_empty() {
                    g.constant(Tensor::zeros(&[1, self.config.d_model]))
                } else {
                    let a = encode_sentence_transformer(g, self.embed, &inst.answer, &answer_tags, &net.input, &net.blocks)?;
                    g.mean_rows(a)?
                };
                let (w, b) = (g.param(net.w_ans), g.param(net.b_ans));
                let answer = g.linear(pooled, w, b)?;
                let memory = prepare_memory(g, &repr, &net.dec)?;
                Ok(Source::Trans { memory, answer, lens })
            }
        }
    }

    /// Summed teacher-forced negative log-likelihood of one instance and its
    /// number of target tokens (question plus EOS).
    fn instance_nll<'a>(&'a self, inst: &QGInstance) -> Result<(Graph<'a>, Var, usize)> {
        let mut dec = self.decoder(inst)?;
        let inst = self.fit(inst);
        let mut inputs = Vec::with_capacity(inst.question.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(&inst.question);
        let mut targets = inst.question.to_vec();
        targets.push(EOS);
        let mut state = dec.initial()?;
        let mut logits = Vec::with_capacity(inputs.len());
        for &tok in &inputs {
            let step = dec.step_graph(&state, tok)?;
            logits.push(step.logits);
            state = step.state;
        }
        let ModelDecoder { mut g, .. } = dec;
        let all = g.concat(&logits, Axis::Rows)?;
        let loss = g.cross_entropy(all, &targets)?;
        Ok((g, loss, targets.len()))
    }

    /// Mean per-token negative log-likelihood of the batch under teacher
    /// forcing.
    pub fn forward_loss(&self, batch: &[QGInstance]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let parts: Vec<(f64, usize)> = batch
            .par_iter()
            .map(|inst| {
                let (g, loss, n) = self.instance_nll(inst)?;
                Ok((g.scalar(loss)?, n))
            })
            .collect::<Result<_>>()?;
        let (sum, n) = parts.iter().fold((0.0, 0), |(s, c), (l, k)| (s + l, c + k));
        Ok(sum / n as f64)
    }

    /// Mean loss and its gradient. Instances are processed in fixed-size
    /// chunks in parallel and reduced in order, so results do not depend on
    /// the thread count.
    pub fn loss_and_grads(&self, batch: &[QGInstance]) -> Result<(f64, GradStore)> {
        const CHUNK: usize = 4;
        if batch.is_empty() {
            return Err(Error::arg("empty batch"));
        }
        let parts: Vec<(f64, usize, GradStore)> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut grads = GradStore::new(&self.params);
                let (mut sum, mut count) = (0.0, 0);
                for inst in chunk {
                    let (g, loss, n) = self.instance_nll(inst)?;
                    sum += g.scalar(loss)?;
                    count += n;
                    g.backward(loss, &mut grads)?;
                }
                Ok((sum, count, grads))
            })
            .collect::<Result<_>>()?;
        let mut iter = parts.into_iter();
        let (mut sum, mut count, mut grads) = iter.next().expect("non-empty batch");
        for (s, c, g) in iter {
            sum += s;
            count += c;
            grads.merge(&g);
        }
        let inv = 1.0 / count as f64;
        grads.scale(inv);
        Ok((sum * inv, grads))
    }
}

enum Source {
    Lstm {
        words: Var,
        words_proj: Var,
        sentences: Option<(Var, Var)>,
        lens: Vec<usize>,
        init: LstmState,
    },
    Trans {
        memory: DecoderMemory,
        answer: Var,
        lens: Vec<usize>,
    },
}

/// Decoder state of either family.
#[derive(Clone, Debug)]
pub enum DecodeState {
    Lstm(LstmState),
    Trans(TransformerDecoderState),
}

/// Attention over the paragraph used to predict one token: sentence weights
/// (`K`) and word weights per sentence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub sentence_weights: Vec<f64>,
    pub word_weights: Vec<Vec<f64>>,
}

struct GraphStep {
    logits: Var,
    state: DecodeState,
    trace: Option<(Var, Var)>,
    heads: Vec<crate::attention::HattOutput>,
}

/// Graph-backed step decoder for one encoded instance.
pub struct ModelDecoder<'a> {
    model: &'a Model,
    g: Graph<'a>,
    source: Source,
}

impl<'a> ModelDecoder<'a> {
    fn step_graph(&mut self, state: &DecodeState, token: usize) -> Result<GraphStep> {
        let model = self.model;
        let g = &mut self.g;
        match (&model.net, &self.source, state) {
            (
                Net::Lstm(net),
                Source::Lstm {
                    words,
                    words_proj,
                    sentences,
                    lens,
                    ..
                },
                DecodeState::Lstm(prev),
            ) => {
                let enc_out = 2 * model.config.lstm_hidden;
                let (context, trace) = match (&net.att, sentences) {
                    (LstmAttention::Flat { w, v }, None) => {
                        let (w, v) = (g.param(*w), g.param(*v));
                        let scores = additive_scores_projected(g, *words_proj, enc_out, prev.h, w, v)?;
                        let weights = g.softmax(scores)?;
                        (g.matmul(weights, *words)?, None)
                    }
                    (LstmAttention::Hier(p), Some((states, states_proj))) => {
                        let _ = states;
                        let (ww, vw) = (g.param(p.w_word), g.param(p.v_word));
                        let word_scores = additive_scores_projected(g, *words_proj, enc_out, prev.h, ww, vw)?;
                        let (ws, vs) = (g.param(p.w_sent), g.param(p.v_sent));
                        let sent_scores = additive_scores_projected(g, *states_proj, enc_out, prev.h, ws, vs)?;
                        let ctx = hierarchical_context_from_scores(
                            g,
                            *words,
                            lens,
                            word_scores,
                            sent_scores,
                            model.config.word_attention,
                        )?;
                        (ctx.context, Some((ctx.sentence_weights, ctx.word_weights)))
                    }
                    _ => unreachable!("attention kind follows the sentence encoder"),
                };
                let table = g.param(model.embed);
                let emb = g.gather(table, &[token])?;
                let (logits, next) = lstm_decoder_step(g, emb, prev, context, &net.dec)?;
                Ok(GraphStep {
                    logits,
                    state: DecodeState::Lstm(next),
                    trace,
                    heads: Vec::new(),
                })
            }
            (Net::Trans(net), Source::Trans { memory, answer, .. }, DecodeState::Trans(prev)) => {
                let out = transformer_decoder_step(g, prev, token, model.embed, Some(*answer), memory, &net.dec)?;
                Ok(GraphStep {
                    logits: out.logits,
                    state: DecodeState::Trans(out.state),
                    trace: None,
                    heads: out.source_heads,
                })
            }
            _ => Err(Error::arg("decoder state does not match the model")),
        }
    }

    /// One step that also reports the paragraph attention used for the
    /// prediction. The trace is `None` for flat architectures.
    pub fn step_traced(&mut self, state: &DecodeState, token: usize) -> Result<(DecodeState, Vec<f64>, Option<AttentionTrace>)> {
        let step = self.step_graph(state, token)?;
        let lens = match &self.source {
            Source::Lstm { lens, .. } | Source::Trans { lens, .. } => lens.clone(),
        };
        let split = |flat: &[f64]| -> Vec<Vec<f64>> {
            let mut out = Vec::with_capacity(lens.len());
            let mut at = 0;
            for &l in &lens {
                out.push(flat[at..at + l].to_vec());
                at += l;
            }
            out
        };
        let trace = if let Some((s, w)) = step.trace {
            Some(AttentionTrace {
                sentence_weights: self.g.value(s).data().to_vec(),
                word_weights: split(self.g.value(w).data()),
            })
        } else if !step.heads.is_empty() {
            let h = step.heads.len() as f64;
            let k = lens.len();
            let m: usize = lens.iter().sum();
            let (mut sw, mut ww) = (vec![0.0; k], vec![0.0; m]);
            for head in &step.heads {
                for (acc, x) in sw.iter_mut().zip(self.g.value(head.sentence_weights).data()) {
                    *acc += x / h;
                }
                for (acc, x) in ww.iter_mut().zip(self.g.value(head.word_weights).data()) {
                    *acc += x / h;
                }
            }
            Some(AttentionTrace {
                sentence_weights: sw,
                word_weights: split(&ww),
            })
        } else {
            None
        };
        let logp = log_softmax(self.g.value(step.logits).data());
        Ok((step.state, logp, trace))
    }
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

impl StepDecoder for ModelDecoder<'_> {
    type State = DecodeState;

    fn initial(&mut self) -> Result<DecodeState> {
        Ok(match (&self.model.net, &self.source) {
            (Net::Lstm(_), Source::Lstm { init, .. }) => DecodeState::Lstm(*init),
            (Net::Trans(net), Source::Trans { .. }) => DecodeState::Trans(TransformerDecoderState::new(&mut self.g, &net.dec)),
            _ => unreachable!("source follows the model family"),
        })
    }

    fn step(&mut self, state: &DecodeState, token: usize) -> Result<(DecodeState, Vec<f64>)> {
        let (state, logp, _) = self.step_traced(state, token)?;
        Ok((state, logp))
    }
}
