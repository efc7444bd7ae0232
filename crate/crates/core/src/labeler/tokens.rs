//! Token counting and sentence-boundary truncation.

/// Counts tokens and maps a model token budget onto the counter's units.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> usize;

    /// Largest count this counter accepts for a model budget of `max_tokens`.
    fn budget(&self, max_tokens: usize) -> usize;

    fn name(&self) -> &'static str;
}

/// Whitespace-delimited words. A word is usually more than one subword
/// token, so budgets are scaled down: 77 model tokens become 60 words.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WhitespaceCounter {
    pub words_per_77_tokens: usize,
}

impl Default for WhitespaceCounter {
    fn default() -> Self {
        Self { words_per_77_tokens: 60 }
    }
}

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> usize {
        text.split_whitespace().count()
    }

    fn budget(&self, max_tokens: usize) -> usize {
        max_tokens * self.words_per_77_tokens / 77
    }

    fn name(&self) -> &'static str {
        "whitespace"
    }
}

pub fn count_tokens(text: &str) -> usize {
    WhitespaceCounter::default().count(text)
}

/// Splits after `.`, `!` or `?` when followed by whitespace or the end.
pub fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    for (i, &(pos, c)) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            let next_is_break = chars.get(i + 1).is_none_or(|(_, n)| n.is_whitespace());
            if next_is_break {
                let end = pos + c.len_utf8();
                let s = text[start..end].trim();
                if !s.is_empty() {
                    out.push(s);
                }
                start = end;
            }
        }
    }
    let tail = text[start..].trim();
    if !tail.is_empty() {
        out.push(tail);
    }
    out
}

/// Longest prefix of whole sentences whose count fits in `budget`.
/// `None` when not even the first sentence fits or the text has no
/// sentence ending within budget.
pub fn truncate_to_sentences(text: &str, budget: usize, counter: &dyn TokenCounter) -> Option<String> {
    let mut kept: Vec<&str> = Vec::new();
    let mut used = 0;
    for s in sentences(text) {
        if !s.ends_with(['.', '!', '?']) {
            break;
        }
        let n = counter.count(s);
        if used + n > budget {
            break;
        }
        used += n;
        kept.push(s);
    }
    if kept.is_empty() {
        None
    } else {
        Some(kept.join(" "))
    }
}
