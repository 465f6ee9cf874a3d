//! Tokenization shared by the generator, BM25, the hashing encoder and the
//! query analysis.

/// Separator placed between the current query and each history turn.
pub const SEP: &str = "<sep>";

/// Generator tokenizer: lowercased alphanumeric runs, the literal `<sep>`
/// marker, and every other non-whitespace character as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    let mut rest = text;
    while let Some(c) = rest.chars().next() {
        if rest.starts_with(SEP) {
            flush(&mut word, &mut tokens);
            tokens.push(SEP.to_string());
            rest = &rest[SEP.len()..];
            continue;
        }
        if c.is_alphanumeric() {
            word.extend(c.to_lowercase());
        } else {
            flush(&mut word, &mut tokens);
            if !c.is_whitespace() {
                tokens.push(c.to_string());
            }
        }
        rest = &rest[c.len_utf8()..];
    }
    flush(&mut word, &mut tokens);
    tokens
}

fn flush(word: &mut String, tokens: &mut Vec<String>) {
    if !word.is_empty() {
        tokens.push(std::mem::take(word));
    }
}

/// Lowercased alphanumeric runs only; everything else is a separator.
pub fn terms(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(|s| s.to_lowercase())
        .collect()
}

/// Byte spans of the tokens produced by [`tokenize`], in order.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start: Option<usize> = None;
    let mut i = 0;
    while i < text.len() {
        let rest = &text[i..];
        let c = rest.chars().next().unwrap();
        if rest.starts_with(SEP) {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
            spans.push((i, i + SEP.len()));
            i += SEP.len();
            continue;
        }
        if c.is_alphanumeric() {
            start.get_or_insert(i);
        } else {
            if let Some(s) = start.take() {
                spans.push((s, i));
            }
            if !c.is_whitespace() {
                spans.push((i, i + c.len_utf8()));
            }
        }
        i += c.len_utf8();
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Cut `text` after its `max_tokens`-th token, keeping the original spelling.
pub fn truncate_tokens(text: &str, max_tokens: usize) -> &str {
    let spans = token_spans(text);
    if spans.len() <= max_tokens {
        return text;
    }
    if max_tokens == 0 {
        return "";
    }
    &text[..spans[max_tokens - 1].1]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenize_splits_punctuation_and_keeps_sep() {
        assert_eq!(
            tokenize("What is it? <sep> question: Foo"),
            vec!["what", "is", "it", "?", "<sep>", "question", ":", "foo"]
        );
    }

    #[test]
    fn terms_drop_punctuation() {
        assert_eq!(terms("Paris, weather!  <sep>"), vec!["paris", "weather", "sep"]);
        assert!(terms("  ").is_empty());
    }

    #[test]
    fn spans_agree_with_tokens() {
        let text = "Hello, World <sep>x y";
        let spans = token_spans(text);
        let from_spans: Vec<String> = spans.iter().map(|&(a, b)| text[a..b].to_lowercase()).collect();
        assert_eq!(from_spans, tokenize(text));
    }

    #[test]
    fn truncation_at_token_boundary() {
        assert_eq!(truncate_tokens("one two, three four", 3), "one two,");
        assert_eq!(truncate_tokens("one two", 5), "one two");
        assert_eq!(truncate_tokens("one two", 0), "");
    }
}
