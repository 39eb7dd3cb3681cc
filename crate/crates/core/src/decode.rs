//! Greedy and beam-search generation over any step decoder.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{QGInstance, Vocab, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{AttentionTrace, Model};

/// Something that maps (state, fed token) to the next state and next-token
/// log-probabilities.
pub trait StepDecoder {
    type State: Clone;

    /// State before BOS is fed.
    fn initial(&mut self) -> Result<Self::State>;

    fn step(&mut self, state: &Self::State, token: usize) -> Result<(Self::State, Vec<f64>)>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOptions {
    pub max_len: usize,
    pub beam: usize,
    /// Length-normalization exponent `α` in `logP / len^α`.
    pub alpha: f64,
    /// Token ids never emitted.
    pub banned: Vec<usize>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            max_len: 30,
            beam: 5,
            alpha: 0.7,
            banned: vec![PAD, BOS],
        }
    }
}

/// A generated sequence. `tokens` starts with BOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Number of generated tokens, EOS included.
    pub fn len(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn score(&self, alpha: f64) -> f64 {
        length_normalized(self.log_prob, self.len(), alpha)
    }

    /// Generated tokens without BOS and the terminal EOS.
    pub fn output(&self) -> &[usize] {
        let body = &self.tokens[1..];
        match body.last() {
            Some(&EOS) => &body[..body.len() - 1],
            _ => body,
        }
    }
}

pub fn length_normalized(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if len == 0 {
        log_prob
    } else {
        log_prob / (len as f64).powf(alpha)
    }
}

fn best_token(logp: &[f64], banned: &[usize]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (v, &lp) in logp.iter().enumerate() {
        if banned.contains(&v) {
            continue;
        }
        if best.is_none_or(|b| lp > logp[b]) {
            best = Some(v);
        }
    }
    best.ok_or_else(|| Error::arg("every token is banned"))
}

/// Argmax decoding (ties go to the lower id) until EOS or `max_len` tokens.
pub fn greedy_decode<D: StepDecoder>(dec: &mut D, opts: &DecodeOptions) -> Result<Hypothesis> {
    let mut state = dec.initial()?;
    let mut hyp = Hypothesis {
        tokens: vec![BOS],
        log_prob: 0.0,
        finished: false,
    };
    let mut token = BOS;
    while hyp.len() < opts.max_len {
        let (next, logp) = dec.step(&state, token)?;
        token = best_token(&logp, &opts.banned)?;
        hyp.tokens.push(token);
        hyp.log_prob += logp[token];
        state = next;
        if token == EOS {
            break;
        }
    }
    hyp.finished = true;
    Ok(hyp)
}

struct Candidate<S> {
    hyp: Hypothesis,
    state: Option<S>,
    score: f64,
}

fn rank(a: f64, b: f64, ta: &[usize], tb: &[usize]) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal).then_with(|| ta.cmp(tb))
}

/// Beam search with score `logP / len^α`. Each round expands every active
/// hypothesis, keeps the best `beam` candidates, and retires the finished
/// ones. Ties prefer lower token ids, then earlier finishes.
pub fn beam_decode<D: StepDecoder>(dec: &mut D, opts: &DecodeOptions) -> Result<Hypothesis> {
    if opts.beam == 0 {
        return Err(Error::arg("beam size must be at least 1"));
    }
    let mut active = vec![Candidate {
        hyp: Hypothesis {
            tokens: vec![BOS],
            log_prob: 0.0,
            finished: false,
        },
        state: Some(dec.initial()?),
        score: 0.0,
    }];
    let mut finished: Vec<(usize, Hypothesis, f64)> = Vec::new();
    let mut round = 0;
    while !active.is_empty() && opts.max_len > 0 {
        round += 1;
        let mut candidates = Vec::new();
        for cand in &active {
            let state = cand.state.as_ref().expect("active candidates carry a state");
            let (next, logp) = dec.step(state, *cand.hyp.tokens.last().unwrap())?;
            for (v, &lp) in logp.iter().enumerate() {
                if opts.banned.contains(&v) || lp == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = cand.hyp.tokens.clone();
                tokens.push(v);
                let hyp = Hypothesis {
                    log_prob: cand.hyp.log_prob + lp,
                    finished: v == EOS || tokens.len() > opts.max_len,
                    tokens,
                };
                let score = hyp.score(opts.alpha);
                candidates.push(Candidate {
                    state: (!hyp.finished).then(|| next.clone()),
                    hyp,
                    score,
                });
            }
        }
        if candidates.is_empty() {
            return Err(Error::arg("every token is banned"));
        }
        candidates.sort_by(|a, b| rank(a.score, b.score, &a.hyp.tokens, &b.hyp.tokens));
        candidates.truncate(opts.beam);
        active.clear();
        for c in candidates {
            if c.hyp.finished {
                finished.push((round, c.hyp, c.score));
            } else {
                active.push(c);
            }
        }
    }
    finished
        .into_iter()
        .min_by(|a, b| {
            rank(a.2, b.2, &[], &[])
                .then_with(|| a.0.cmp(&b.0))
                .then_with(|| a.1.tokens.cmp(&b.1.tokens))
        })
        .map(|(_, h, _)| h)
        .ok_or_else(|| Error::arg("max_len must be at least 1"))
}

/// Greedy when `beam == 1`, beam search otherwise.
pub fn decode<D: StepDecoder>(dec: &mut D, opts: &DecodeOptions) -> Result<Hypothesis> {
    if opts.beam == 1 {
        greedy_decode(dec, opts)
    } else {
        beam_decode(dec, opts)
    }
}

/// One line of generation output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedQuestion {
    pub id: String,
    pub paragraph_id: String,
    pub generated: String,
    pub reference: String,
}

fn ids_to_text(vocab: &Vocab, ids: &[usize]) -> String {
    vocab.decode(ids).join(" ")
}

/// Decodes every instance (in parallel, output in input order). UNK
/// emissions are counted and logged.
pub fn generate(model: &Model, vocab: &Vocab, instances: &[QGInstance], opts: &DecodeOptions) -> Result<Vec<GeneratedQuestion>> {
    let out: Vec<(GeneratedQuestion, usize)> = instances
        .par_iter()
        .map(|inst| {
            let mut dec = model.decoder(inst)?;
            let hyp = decode(&mut dec, opts)?;
            let unk = hyp.output().iter().filter(|&&t| t == crate::data::UNK).count();
            Ok((
                GeneratedQuestion {
                    id: inst.id.clone(),
                    paragraph_id: inst.paragraph_id.clone(),
                    generated: ids_to_text(vocab, hyp.output()),
                    reference: ids_to_text(vocab, &inst.question),
                },
                unk,
            ))
        })
        .collect::<Result<_>>()?;
    let unk: usize = out.iter().map(|(_, u)| u).sum();
    if unk > 0 {
        log::info!("{unk} UNK tokens emitted across {} questions", out.len());
    }
    Ok(out.into_iter().map(|(g, _)| g).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordWeight {
    pub position: usize,
    pub token: String,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceAttention {
    pub sentence: usize,
    pub weight: f64,
    /// Up to five highest-weighted words, heaviest first.
    pub top_words: Vec<WordWeight>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAttention {
    pub step: usize,
    /// Token predicted at this step.
    pub token: String,
    /// Full sentence distribution; zeros are kept.
    pub sentence_weights: Vec<f64>,
    pub sentences: Vec<SentenceAttention>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionReport {
    pub id: String,
    pub architecture: String,
    pub generated: String,
    pub steps: Vec<StepAttention>,
}

/// Greedy decode that records the paragraph attention at every step. Fails
/// for architectures without hierarchical attention.
pub fn inspect_attention(model: &Model, vocab: &Vocab, inst: &QGInstance, max_len: usize) -> Result<AttentionReport> {
    let arch = model.config().arch;
    if !arch.is_hierarchical() {
        return Err(Error::Config(format!(
            "{arch} has no sentence-level attention to inspect; use HierSeq2SeqAE or HierTransSeq2SeqAE"
        )));
    }
    let mut dec = model.decoder(inst)?;
    let inst = if inst.exceeds(&model.config().limits) {
        inst.truncated(&model.config().limits)
    } else {
        inst.clone()
    };
    let opts = DecodeOptions::default();
    let mut state = dec.initial()?;
    let mut token = BOS;
    let mut generated = Vec::new();
    let mut steps = Vec::new();
    for step in 0..max_len {
        let (next, logp, trace) = dec.step_traced(&state, token)?;
        let AttentionTrace {
            sentence_weights,
            word_weights,
        } = trace.expect("hierarchical models report attention");
        token = best_token(&logp, &opts.banned)?;
        let sentences = word_weights
            .iter()
            .enumerate()
            .map(|(i, w)| {
                let mut order: Vec<usize> = (0..w.len()).collect();
                order.sort_by(|&a, &b| w[b].partial_cmp(&w[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
                SentenceAttention {
                    sentence: i,
                    weight: sentence_weights[i],
                    top_words: order
                        .into_iter()
                        .take(5)
                        .map(|j| WordWeight {
                            position: j,
                            token: vocab.token(inst.sentences[i][j]).to_string(),
                            weight: w[j],
                        })
                        .collect(),
                }
            })
            .collect();
        steps.push(StepAttention {
            step,
            token: vocab.token(token).to_string(),
            sentence_weights,
            sentences,
        });
        state = next;
        if token == EOS {
            break;
        }
        generated.push(token);
    }
    Ok(AttentionReport {
        id: inst.id.clone(),
        architecture: arch.name().to_string(),
        generated: ids_to_text(vocab, &generated),
        steps,
    })
}
