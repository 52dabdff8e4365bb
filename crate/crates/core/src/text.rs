//! Word segmentation shared by the miner and the streaming controller.
//!
//! Phrases are matched over whitespace-delimited words of the detokenized
//! text, case-folded with leading/trailing punctuation stripped, so that a
//! vocabulary mined from one model family transfers to another tokenizer.

use std::collections::VecDeque;

/// Case-folds `raw` and strips surrounding punctuation. `None` when nothing
/// word-like remains.
pub fn normalize_word(raw: &str) -> Option<String> {
    let trimmed = raw.trim_matches(|c: char| !c.is_alphanumeric());
    if trimmed.is_empty() {
        None
    } else {
        Some(trimmed.to_lowercase())
    }
}

/// Whitespace-normalized, case-folded form of a phrase.
pub fn normalize_phrase(raw: &str) -> String {
    raw.split_whitespace()
        .filter_map(normalize_word)
        .collect::<Vec<_>>()
        .join(" ")
}

/// A word of the detokenized trace and the token step its last character
/// came from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WordSpan {
    pub word: String,
    pub surface: String,
    /// 0-based index of the token holding the word's last alphanumeric
    /// character; trailing punctuation does not move the anchor.
    pub end_step: usize,
}

/// Splits concatenated token texts into words, remembering where each word
/// ends. Pure punctuation runs are dropped.
pub fn words_with_steps<'a, I>(tokens: I) -> Vec<WordSpan>
where
    I: IntoIterator<Item = &'a str>,
{
    let mut out = Vec::new();
    let mut current = String::new();
    let mut last_step = 0;
    let flush = |current: &mut String, step: usize, out: &mut Vec<WordSpan>| {
        if let Some(word) = normalize_word(current) {
            out.push(WordSpan {
                word,
                surface: std::mem::take(current),
                end_step: step,
            });
        } else {
            current.clear();
        }
    };
    for (step, token) in tokens.into_iter().enumerate() {
        for ch in token.chars() {
            if ch.is_whitespace() {
                if !current.is_empty() {
                    flush(&mut current, last_step, &mut out);
                }
            } else {
                current.push(ch);
                if ch.is_alphanumeric() {
                    last_step = step;
                }
            }
        }
    }
    if !current.is_empty() {
        flush(&mut current, last_step, &mut out);
    }
    out
}

/// Incremental version of [`words_with_steps`] that keeps only the most
/// recent words. The word still being typed counts as the last word.
#[derive(Debug, Clone)]
pub struct RollingWords {
    capacity: usize,
    complete: VecDeque<String>,
    partial: String,
}

impl RollingWords {
    pub fn new(capacity: usize) -> Self {
        RollingWords {
            capacity,
            complete: VecDeque::with_capacity(capacity + 1),
            partial: String::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, text: &str) {
        for ch in text.chars() {
            if ch.is_whitespace() {
                self.finish_partial();
            } else {
                self.partial.push(ch);
            }
        }
    }

    fn finish_partial(&mut self) {
        if self.partial.is_empty() {
            return;
        }
        if let Some(w) = normalize_word(&self.partial) {
            self.complete.push_back(w);
            while self.complete.len() > self.capacity {
                self.complete.pop_front();
            }
        }
        self.partial.clear();
    }

    /// The last `capacity` words, oldest first, including the partial word.
    pub fn words(&self) -> Vec<String> {
        let mut words: Vec<String> = self.complete.iter().cloned().collect();
        if let Some(w) = normalize_word(&self.partial) {
            words.push(w);
        }
        let excess = words.len().saturating_sub(self.capacity);
        words.drain(..excess);
        words
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization() {
        assert_eq!(normalize_word("Wait,"), Some("wait".into()));
        assert_eq!(normalize_word("(A)"), Some("a".into()));
        assert_eq!(normalize_word("don't"), Some("don't".into()));
        assert_eq!(normalize_word("..."), None);
        assert_eq!(
            normalize_phrase("  Looking  back\tat the IMAGE, "),
            "looking back at the image"
        );
    }

    #[test]
    fn words_track_end_steps() {
        let spans = words_with_steps(["Let", " me", " re", "consider", ",", " hmm"]);
        let got: Vec<(&str, usize)> = spans
            .iter()
            .map(|s| (s.word.as_str(), s.end_step))
            .collect();
        assert_eq!(got, [("let", 0), ("me", 1), ("reconsider", 3), ("hmm", 5)]);
        assert_eq!(spans[2].surface, "reconsider,");
    }

    #[test]
    fn punctuation_only_tokens_vanish() {
        let spans = words_with_steps(["a", " -", " b"]);
        assert_eq!(spans.len(), 2);
        assert_eq!(spans[1].end_step, 2);
    }

    #[test]
    fn rolling_words_matches_batch_segmentation() {
        let toks = ["So", " the", " ang", "le is", " hmm", ",", " wait"];
        let mut roll = RollingWords::new(3);
        for t in toks {
            roll.push(t);
        }
        let batch: Vec<String> = words_with_steps(toks).into_iter().map(|s| s.word).collect();
        assert_eq!(roll.words(), batch[batch.len() - 3..].to_vec());
    }

    #[test]
    fn rolling_words_sees_partial_word() {
        let mut roll = RollingWords::new(2);
        roll.push("one two thr");
        assert_eq!(roll.words(), ["two", "thr"]);
    }
}
