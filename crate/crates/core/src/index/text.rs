//! Lowercasing tokenizer and stop-word list shared by both retrieval channels.

/// Small English stop-word list; the synthetic corpus sprinkles these in as filler.
pub const STOP_WORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "in", "is", "it", "of", "on",
    "or", "the", "to", "with",
];

/// Lowercases and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

pub fn is_stop_word(word: &str) -> bool {
    STOP_WORDS.binary_search(&word).is_ok()
}

/// [`tokenize`] followed by stop-word removal.
pub fn analyze(text: &str) -> Vec<String> {
    tokenize(text).into_iter().filter(|w| !is_stop_word(w)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_words_sorted() {
        let mut sorted = STOP_WORDS.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, STOP_WORDS);
    }

    #[test]
    fn splits_and_filters() {
        assert_eq!(tokenize("Hello, World-wide  web!"), ["hello", "world", "wide", "web"]);
        assert_eq!(analyze("The cat of the Year"), ["cat", "year"]);
        assert!(analyze("the of and").is_empty());
    }
}
