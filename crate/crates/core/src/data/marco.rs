use std::fs;
use std::path::Path;

use serde::Deserialize;

use super::RawExample;
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct Record {
    #[serde(default)]
    query_id: Option<serde_json::Value>,
    query: String,
    passages: Vec<Passage>,
    answers: Vec<String>,
}

#[derive(Deserialize)]
struct Passage {
    passage_text: String,
    is_selected: u8,
}

/// Reads MS MARCO JSON lines. Records without a selected passage are dropped;
/// the first selected passage becomes the paragraph. Answers that are not a
/// verbatim substring are kept with no offset.
pub fn load_marco(path: impl AsRef<Path>) -> Result<Vec<RawExample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line)
            .map_err(|e| Error::parse(path, Some(format!("line {}", n + 1)), e.to_string()))?;
        let Some(passage) = rec.passages.into_iter().find(|p| p.is_selected != 0) else {
            continue;
        };
        let answer = rec.answers.into_iter().next().unwrap_or_default();
        let answer_start = if answer.is_empty() {
            None
        } else {
            passage.passage_text.find(&answer)
        };
        let id = match rec.query_id {
            Some(serde_json::Value::String(s)) => s,
            Some(v) => v.to_string(),
            None => format!("line{}", n + 1),
        };
        out.push(RawExample {
            paragraph_id: id.clone(),
            id,
            paragraph: passage.passage_text,
            question: rec.query,
            answer,
            answer_start,
        });
    }
    Ok(out)
}
