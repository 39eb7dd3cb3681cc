use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::text::{sentence_split, tokenize};
use super::vocab::{Vocab, BOS, EOS};
use super::RawExample;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Bio {
    O,
    B,
    I,
}

impl Bio {
    /// Row of the tag in a 3-row embedding table.
    pub fn index(self) -> usize {
        match self {
            Bio::O => 0,
            Bio::B => 1,
            Bio::I => 2,
        }
    }
}

/// Location of the answer: sentence index and half-open token range.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerSpan {
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
}

/// Maximum lengths applied during preprocessing and again by the models.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Limits {
    pub max_sentences: usize,
    /// Content tokens per sentence, not counting BOS/EOS.
    pub max_sentence_tokens: usize,
    pub max_question_tokens: usize,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            max_sentences: 20,
            max_sentence_tokens: 50,
            max_question_tokens: 30,
        }
    }
}

/// Tags the leftmost exact occurrence of `answer` in `tokens` as `B I…I`.
/// Returns all-`O` and no range when there is no occurrence.
pub fn bio_tag<S: AsRef<str>>(tokens: &[S], answer: &[S]) -> (Vec<Bio>, Option<(usize, usize)>) {
    let mut tags = vec![Bio::O; tokens.len()];
    if answer.is_empty() || answer.len() > tokens.len() {
        return (tags, None);
    }
    let found = tokens
        .windows(answer.len())
        .position(|w| w.iter().zip(answer).all(|(a, b)| a.as_ref() == b.as_ref()));
    match found {
        Some(start) => {
            tags[start] = Bio::B;
            for t in &mut tags[start + 1..start + answer.len()] {
                *t = Bio::I;
            }
            (tags, Some((start, start + answer.len())))
        }
        None => (tags, None),
    }
}

/// A tokenized, sentence-split example as stored in the preprocessed
/// JSON-lines files. Sentences carry no BOS/EOS markers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizedExample {
    pub id: String,
    pub paragraph_id: String,
    pub sentences: Vec<Vec<String>>,
    pub question: Vec<String>,
    pub answer: Vec<String>,
    pub bio: Vec<Vec<Bio>>,
    pub has_answer: Vec<bool>,
    pub answer_span: Option<AnswerSpan>,
}

impl TokenizedExample {
    pub fn from_raw(raw: &RawExample, limits: &Limits) -> Self {
        let mut sentences: Vec<Vec<String>> = sentence_split(&raw.paragraph)
            .iter()
            .map(|s| tokenize(s))
            .filter(|t| !t.is_empty())
            .collect();
        sentences.truncate(limits.max_sentences);
        for s in &mut sentences {
            s.truncate(limits.max_sentence_tokens);
        }
        let answer = tokenize(&raw.answer);
        let mut question = tokenize(&raw.question);
        question.truncate(limits.max_question_tokens);

        let mut bio: Vec<Vec<Bio>> = sentences.iter().map(|s| vec![Bio::O; s.len()]).collect();
        let mut answer_span = None;
        for (i, s) in sentences.iter().enumerate() {
            if let (tags, Some((start, end))) = bio_tag(s, &answer) {
                bio[i] = tags;
                answer_span = Some(AnswerSpan { sentence: i, start, end });
                break;
            }
        }
        let has_answer = bio.iter().map(|t| t.iter().any(|b| *b != Bio::O)).collect();
        Self {
            id: raw.id.clone(),
            paragraph_id: raw.paragraph_id.clone(),
            sentences,
            question,
            answer,
            bio,
            has_answer,
            answer_span,
        }
    }

    pub fn paragraph_tokens(&self) -> impl Iterator<Item = &String> {
        self.sentences.iter().flatten()
    }
}

/// One training/evaluation example in token ids. Every sentence starts with
/// BOS and ends with EOS; `bio_tags` mirrors `sentences` exactly and tags the
/// markers `O`. The question carries neither marker.
#[derive(Clone, Debug, PartialEq)]
pub struct QGInstance {
    pub id: String,
    pub paragraph_id: String,
    pub sentences: Vec<Vec<usize>>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub bio_tags: Vec<Vec<Bio>>,
    pub sentence_has_answer: Vec<bool>,
    /// Span in `sentences` coordinates (BOS at index 0).
    pub answer_span: Option<AnswerSpan>,
}

impl QGInstance {
    pub fn encode(ex: &TokenizedExample, vocab: &Vocab) -> Self {
        let sentences = ex
            .sentences
            .iter()
            .map(|s| {
                let mut ids = Vec::with_capacity(s.len() + 2);
                ids.push(BOS);
                ids.extend(vocab.encode(s));
                ids.push(EOS);
                ids
            })
            .collect();
        let bio_tags = ex
            .bio
            .iter()
            .map(|t| {
                let mut tags = Vec::with_capacity(t.len() + 2);
                tags.push(Bio::O);
                tags.extend_from_slice(t);
                tags.push(Bio::O);
                tags
            })
            .collect();
        Self {
            id: ex.id.clone(),
            paragraph_id: ex.paragraph_id.clone(),
            sentences,
            question: vocab.encode(&ex.question),
            answer: vocab.encode(&ex.answer),
            bio_tags,
            sentence_has_answer: ex.has_answer.clone(),
            answer_span: ex.answer_span.map(|s| AnswerSpan {
                sentence: s.sentence,
                start: s.start + 1,
                end: s.end + 1,
            }),
        }
    }

    pub fn num_words(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    /// Token ids of all sentences in order, markers included.
    pub fn flat_tokens(&self) -> Vec<usize> {
        self.sentences.concat()
    }

    pub fn flat_tags(&self) -> Vec<Bio> {
        self.bio_tags.concat()
    }

    pub fn exceeds(&self, limits: &Limits) -> bool {
        self.sentences.len() > limits.max_sentences
            || self.sentences.iter().any(|s| s.len() > limits.max_sentence_tokens + 2)
            || self.question.len() > limits.max_question_tokens
    }

    /// Copy cut down to `limits`. A partially cut answer keeps its surviving
    /// prefix; a cut `B` drops the span entirely.
    pub fn truncated(&self, limits: &Limits) -> Self {
        let mut out = self.clone();
        out.sentences.truncate(limits.max_sentences);
        out.bio_tags.truncate(limits.max_sentences);
        out.sentence_has_answer.truncate(limits.max_sentences);
        let cap = limits.max_sentence_tokens + 2;
        for (s, t) in out.sentences.iter_mut().zip(out.bio_tags.iter_mut()) {
            if s.len() > cap {
                s.truncate(cap - 1);
                s.push(EOS);
                t.truncate(cap - 1);
                t.push(Bio::O);
            }
        }
        out.question.truncate(limits.max_question_tokens);
        if let Some(span) = out.answer_span {
            let kept = span.sentence < out.sentences.len() && span.start < out.sentences[span.sentence].len() - 1;
            if kept {
                let end = span.end.min(out.sentences[span.sentence].len() - 1);
                out.answer_span = Some(AnswerSpan { end, ..span });
            } else {
                out.answer_span = None;
                if let Some(tags) = out.bio_tags.get_mut(span.sentence) {
                    tags.iter_mut().for_each(|t| *t = Bio::O);
                }
            }
        }
        out.sentence_has_answer = out
            .bio_tags
            .iter()
            .map(|t| t.iter().any(|b| *b != Bio::O))
            .collect();
        out
    }

    pub fn check_invariants(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::arg(format!("instance {}: {msg}", self.id)));
        if self.sentences.is_empty() {
            return fail("no sentences".into());
        }
        if self.bio_tags.len() != self.sentences.len() || self.sentence_has_answer.len() != self.sentences.len() {
            return fail("per-sentence field lengths differ".into());
        }
        let mut runs = 0;
        for (i, (s, t)) in self.sentences.iter().zip(&self.bio_tags).enumerate() {
            if s.len() != t.len() {
                return fail(format!("sentence {i} has {} tokens but {} tags", s.len(), t.len()));
            }
            if s.len() < 2 || s[0] != BOS || s[s.len() - 1] != EOS {
                return fail(format!("sentence {i} is not wrapped in BOS/EOS"));
            }
            let mut prev = Bio::O;
            for (j, &tag) in t.iter().enumerate() {
                match tag {
                    Bio::B => runs += 1,
                    Bio::I if prev == Bio::O => return fail(format!("I without B at {i}:{j}")),
                    _ => {}
                }
                prev = tag;
            }
            if self.sentence_has_answer[i] != t.iter().any(|b| *b != Bio::O) {
                return fail(format!("answer flag of sentence {i} disagrees with its tags"));
            }
        }
        if runs > 1 {
            return fail(format!("{runs} answer runs"));
        }
        match self.answer_span {
            Some(span) => {
                let tags = self
                    .bio_tags
                    .get(span.sentence)
                    .ok_or_else(|| Error::arg("answer span sentence out of range"))?;
                let ok = span.start < span.end
                    && span.end <= tags.len()
                    && tags.iter().enumerate().all(|(j, t)| match *t {
                        Bio::B => j == span.start,
                        Bio::I => j > span.start && j < span.end,
                        Bio::O => j < span.start || j >= span.end,
                    });
                if !ok {
                    return fail("answer span does not match tags".into());
                }
            }
            None if runs > 0 => return fail("tags present without an answer span".into()),
            None => {}
        }
        Ok(())
    }
}

pub fn write_jsonl<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::parse(path, None, e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, Some(format!("line {}", n + 1)), e.to_string()))?;
        items.push(item);
    }
    Ok(items)
}
