//! Tokenization, sentence splitting and string normalization shared by the
//! rankers, the retriever and question generation.

/// Byte spans of maximal alphanumeric runs.
pub fn token_spans(text: &str) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for (i, c) in text.char_indices() {
        match (c.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, text.len()));
    }
    spans
}

/// Lowercased alphanumeric word tokens. No stemming, no stop words.
pub fn tokenize(text: &str) -> Vec<String> {
    token_spans(text)
        .into_iter()
        .map(|(s, e)| text[s..e].to_lowercase())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SentenceSplitter {
    /// Every line break also ends a sentence (headers and bullets stay separate).
    pub split_on_newline: bool,
}

impl Default for SentenceSplitter {
    fn default() -> Self {
        Self { split_on_newline: true }
    }
}

impl SentenceSplitter {
    /// Byte spans of sentences, trimmed of surrounding whitespace. A sentence
    /// ends at `.`, `?` or `!` followed by whitespace, or at a newline.
    pub fn spans(&self, text: &str) -> Vec<(usize, usize)> {
        let mut spans = Vec::new();
        let mut start = 0;
        let mut chars = text.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            let boundary = match c {
                '\n' if self.split_on_newline => Some(i),
                '.' | '?' | '!' => match chars.peek() {
                    None => Some(i + 1),
                    Some((_, next)) if next.is_whitespace() => Some(i + 1),
                    _ => None,
                },
                _ => None,
            };
            if let Some(end) = boundary {
                push_trimmed(text, start, end, &mut spans);
                start = end;
            }
        }
        push_trimmed(text, start, text.len(), &mut spans);
        spans
    }

    pub fn split<'a>(&self, text: &'a str) -> Vec<&'a str> {
        self.spans(text).into_iter().map(|(s, e)| &text[s..e]).collect()
    }
}

fn push_trimmed(text: &str, start: usize, end: usize, spans: &mut Vec<(usize, usize)>) {
    let slice = &text[start..end];
    let lead = slice.len() - slice.trim_start().len();
    let trimmed = slice.trim();
    if !trimmed.is_empty() {
        spans.push((start + lead, start + lead + trimmed.len()));
    }
}

/// Strips one leading list marker (`1.`, `2)`, `-`, `*`, `•`) and the
/// whitespace after it. Returns `None` when the line carries no marker.
pub fn strip_list_marker(line: &str) -> Option<&str> {
    let s = line.trim_start();
    let rest = if let Some(r) = s.strip_prefix(['-', '*', '•']) {
        r
    } else {
        let digits = s.bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return None;
        }
        s[digits..].strip_prefix(['.', ')'])?
    };
    if rest.is_empty() {
        return Some(rest);
    }
    if rest.starts_with(char::is_whitespace) {
        Some(rest.trim_start())
    } else {
        None
    }
}

/// Lowercase, drop a leading list marker, replace punctuation with spaces and
/// collapse whitespace. Idempotent.
pub fn normalize_text(s: &str) -> String {
    let lower = s.to_lowercase();
    let body = strip_list_marker(&lower).unwrap_or(&lower);
    let cleaned: String = body
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Stable 64-bit FNV-1a, used to derive per-item seeds and cache keys.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for part in parts {
        for b in part.iter().chain(std::iter::once(&0xffu8)) {
            hash ^= u64::from(*b);
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tokenizes_lowercase_alphanumeric() {
        assert_eq!(tokenize("Type-2 Diabetes, HbA1c 7.5%"), ["type", "2", "diabetes", "hba1c", "7", "5"]);
        assert!(tokenize("  --- ").is_empty());
    }

    #[test]
    fn sentences_split_on_terminal_punctuation_and_newlines() {
        let s = SentenceSplitter::default();
        assert_eq!(s.split("Pt is stable. Walks 5.5 km!\n- Eat well\nDone?"), ["Pt is stable.", "Walks 5.5 km!", "- Eat well", "Done?"]);
        let joined = SentenceSplitter { split_on_newline: false };
        assert_eq!(joined.split("a\nb. c"), ["a\nb.", "c"]);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("1. Hypertension,"), "hypertension");
        assert_eq!(normalize_text("Type 2  Diabetes"), "type 2 diabetes");
        assert_eq!(normalize_text("- Acute kidney-injury"), "acute kidney injury");
        assert_eq!(normalize_text("2) x"), "x");
    }

    #[test]
    fn list_markers() {
        assert_eq!(strip_list_marker("  12. Walk daily"), Some("Walk daily"));
        assert_eq!(strip_list_marker("* item"), Some("item"));
        assert_eq!(strip_list_marker("3.5 mg"), None);
        assert_eq!(strip_list_marker("Plain"), None);
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(s in "\\PC{0,40}") {
            let once = normalize_text(&s);
            prop_assert_eq!(normalize_text(&once), once);
        }

        #[test]
        fn sentence_spans_are_ordered_and_nonempty(s in "[a-z .!?\n]{0,60}") {
            let spans = SentenceSplitter::default().spans(&s);
            let mut last = 0;
            for (a, b) in spans {
                prop_assert!(a >= last && a < b);
                prop_assert!(!s[a..b].trim().is_empty());
                last = b;
            }
        }
    }
}
