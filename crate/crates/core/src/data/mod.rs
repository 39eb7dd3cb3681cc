//! Corpus ingestion, tokenization, tagging and vocabularies.

mod embeddings;
mod instance;
mod marco;
mod split;
mod squad;
mod text;
mod vocab;

use serde::{Deserialize, Serialize};

pub use embeddings::{load_embeddings, EmbeddingTable};
pub use instance::{bio_tag, read_jsonl, write_jsonl, AnswerSpan, Bio, Limits, QGInstance, TokenizedExample};
pub use marco::load_marco;
pub use split::split_train_dev;
pub use squad::load_squad;
pub use text::{detokenize, sentence_spans, sentence_split, tokenize};
pub use vocab::{Vocab, BOS, EOS, PAD, RESERVED, UNK};

/// One (paragraph, question, answer) triple straight from a corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawExample {
    pub id: String,
    pub paragraph_id: String,
    pub paragraph: String,
    pub question: String,
    pub answer: String,
    /// Character offset of the answer in `paragraph`, when it occurs there.
    pub answer_start: Option<usize>,
}

/// Tokenized train/dev split plus a vocabulary built on the train side.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<TokenizedExample>,
    pub dev: Vec<TokenizedExample>,
    pub vocab: Vocab,
}

impl Corpus {
    /// Tokenizes and tags every record, splits `ratio` of them into train
    /// under `seed`, and counts the vocabulary over train paragraphs,
    /// questions and answers.
    pub fn prepare(
        records: Vec<RawExample>,
        limits: &Limits,
        vocab_size: usize,
        min_freq: usize,
        ratio: f64,
        seed: u64,
    ) -> crate::Result<Self> {
        let examples: Vec<TokenizedExample> = records.iter().map(|r| TokenizedExample::from_raw(r, limits)).collect();
        let examples: Vec<TokenizedExample> = examples.into_iter().filter(|e| !e.sentences.is_empty()).collect();
        let (train, dev) = split_train_dev(examples, ratio, seed)?;
        let vocab = Vocab::build(
            train
                .iter()
                .flat_map(|e| e.sentences.iter().chain([&e.question, &e.answer]))
                .map(Vec::as_slice),
            vocab_size,
            min_freq,
        );
        Ok(Self { train, dev, vocab })
    }

    pub fn encode(&self, examples: &[TokenizedExample]) -> Vec<QGInstance> {
        examples.iter().map(|e| QGInstance::encode(e, &self.vocab)).collect()
    }
}
