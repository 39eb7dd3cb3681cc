use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::RawExample;
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct File {
    data: Vec<Article>,
}

#[derive(Deserialize)]
struct Article {
    #[serde(default)]
    title: String,
    paragraphs: Vec<Paragraph>,
}

#[derive(Deserialize)]
struct Paragraph {
    context: String,
    qas: Vec<Qa>,
}

#[derive(Deserialize)]
struct Qa {
    #[serde(default)]
    id: Option<String>,
    question: String,
    #[serde(default)]
    answers: Vec<Answer>,
}

#[derive(Deserialize)]
struct Answer {
    text: String,
    answer_start: usize,
}

/// Byte offset of a serde_json error position (1-based line and column).
pub(crate) fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (line_start + column.saturating_sub(1)).min(text.len())
}

/// Reads a SQuAD v1.1 file: one record per (paragraph, question) pair, first
/// listed answer, paragraph text untouched.
pub fn load_squad(path: impl AsRef<Path>) -> Result<Vec<RawExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: File = serde_json::from_str(&text).map_err(|e| {
        let at = byte_offset(&text, e.line(), e.column());
        Error::parse(path, Some(format!("byte {at}")), e.to_string())
    })?;
    let mut out = Vec::new();
    for (ai, article) in file.data.into_iter().enumerate() {
        for (pi, para) in article.paragraphs.into_iter().enumerate() {
            let paragraph_id = if article.title.is_empty() {
                format!("{ai}#{pi}")
            } else {
                format!("{}#{pi}", article.title)
            };
            for (qi, qa) in para.qas.into_iter().enumerate() {
                let (answer, answer_start) = match qa.answers.into_iter().next() {
                    Some(a) => {
                        let byte = para.context.char_indices().nth(a.answer_start).map(|(b, _)| b);
                        (a.text, byte)
                    }
                    None => (String::new(), None),
                };
                out.push(RawExample {
                    id: qa.id.unwrap_or_else(|| format!("{paragraph_id}#{qi}")),
                    paragraph_id: paragraph_id.clone(),
                    paragraph: para.context.clone(),
                    question: qa.question,
                    answer,
                    answer_start,
                });
            }
        }
    }
    Ok(out)
}
