use std::ops::Range;

const PUNCT: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\'', '(', ')'];

const ABBREVIATIONS: &[&str] = &[
    "mr.", "mrs.", "ms.", "dr.", "prof.", "st.", "jr.", "sr.", "vs.", "u.s.", "e.g.", "i.e.", "etc.",
];

/// Lowercases, splits on whitespace and detaches `.,!?;:"'()` as separate
/// tokens.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut current = String::new();
        for ch in word.chars() {
            if PUNCT.contains(&ch) {
                if !current.is_empty() {
                    tokens.push(std::mem::take(&mut current));
                }
                tokens.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            tokens.push(current);
        }
    }
    tokens
}

pub fn detokenize(tokens: &[String]) -> String {
    tokens.join(" ")
}

/// Byte ranges of the sentences of `text`, trimmed of surrounding
/// whitespace. Everything outside the ranges is whitespace.
///
/// A boundary is a run of `.`, `!` or `?` (plus closing quotes or brackets)
/// followed by whitespace and then an uppercase letter or digit. A period
/// closing a known abbreviation is never a boundary.
pub fn sentence_spans(text: &str) -> Vec<Range<usize>> {
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let mut spans = Vec::new();
    let mut start = None;
    let mut i = 0;
    while i < chars.len() {
        let (pos, ch) = chars[i];
        if start.is_none() {
            if !ch.is_whitespace() {
                start = Some(pos);
            }
            i += 1;
            continue;
        }
        if matches!(ch, '.' | '!' | '?') {
            let mut j = i + 1;
            while j < chars.len() && matches!(chars[j].1, '.' | '!' | '?' | '"' | '\'' | ')' | ']') {
                j += 1;
            }
            let end = chars.get(j).map_or(text.len(), |c| c.0);
            let mut k = j;
            while k < chars.len() && chars[k].1.is_whitespace() {
                k += 1;
            }
            let followed = k > j && k < chars.len() && (chars[k].1.is_uppercase() || chars[k].1.is_ascii_digit());
            if followed && !(ch == '.' && ends_with_abbreviation(&text[start.unwrap()..end])) {
                spans.push(start.unwrap()..end);
                start = None;
                i = k;
                continue;
            }
            i = j;
            continue;
        }
        i += 1;
    }
    if let Some(s) = start {
        let end = text.trim_end().len();
        if end > s {
            spans.push(s..end);
        }
    }
    spans
}

fn ends_with_abbreviation(sentence: &str) -> bool {
    let last = sentence.split_whitespace().last().unwrap_or("").to_lowercase();
    ABBREVIATIONS.contains(&last.as_str())
}

pub fn sentence_split(text: &str) -> Vec<String> {
    sentence_spans(text).into_iter().map(|r| text[r].to_string()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Who won?"), vec!["who", "won", "?"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("It's 1986."), vec!["it", "'", "s", "1986", "."]);
        assert_eq!(tokenize("(Hello, World)"), vec!["(", "hello", ",", "world", ")"]);
    }

    #[test]
    fn split_examples() {
        assert_eq!(sentence_split("A b. C d."), vec!["A b.", "C d."]);
        assert_eq!(sentence_split("Dr. Smith ran. He won."), vec!["Dr. Smith ran.", "He won."]);
        assert_eq!(sentence_split("no terminator here"), vec!["no terminator here"]);
        assert_eq!(sentence_split("It rose 5. 3 fell."), vec!["It rose 5.", "3 fell."]);
        assert_eq!(sentence_split("See e.g. the U.S. Army report."), vec!["See e.g. the U.S. Army report."]);
        assert_eq!(sentence_split("Really?! Yes.\"  Then \"no.\""), vec!["Really?!", "Yes.\"", "Then \"no.\""]);
        assert_eq!(sentence_split("lower. case"), vec!["lower. case"]);
        assert!(sentence_split("   ").is_empty());
    }

    #[test]
    fn spans_cover_all_non_whitespace() {
        let text = "  First one. Second?  Third!\nFourth with Mr. Jones. ";
        let spans = sentence_spans(text);
        assert_eq!(spans.len(), 4);
        let mut rebuilt = String::new();
        let mut last = 0;
        for r in &spans {
            assert!(text[last..r.start].chars().all(char::is_whitespace));
            rebuilt.push_str(&text[last..r.end]);
            last = r.end;
        }
        rebuilt.push_str(&text[last..]);
        assert_eq!(rebuilt, text);
    }
}
