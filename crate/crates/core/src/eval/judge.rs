use regex::Regex;

/// Answer normalization for string comparison: trims, drops wrapping
/// parentheses, dollar signs and trailing periods, collapses whitespace and
/// case-folds.
pub fn normalize_answer(raw: &str) -> String {
    let mut s = raw.trim();
    loop {
        let before = s;
        s = s.trim_matches(|c: char| c == '$' || c.is_whitespace());
        s = s.trim_end_matches(['.', ',', ';']);
        if let Some(inner) = s.strip_prefix('(').and_then(|x| x.strip_suffix(')')) {
            s = inner;
        }
        if s == before {
            break;
        }
    }
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Regex-based answer extraction. Patterns are tried in order and the last
/// match of the first matching pattern wins.
#[derive(Debug, Clone)]
pub struct AnswerJudge {
    patterns: Vec<Regex>,
}

impl Default for AnswerJudge {
    fn default() -> Self {
        Self::new(&[
            r"\\boxed\{([^{}]*)\}",
            r"(?i)final answer\s*(?:is)?\s*[:：]?\s*([^\n]+)",
            r"(?i)\b(?:answer|option)\s*(?:is)?\s*[:：]?\s*\(?([A-J])\)?(?:[^A-Za-z0-9]|$)",
        ])
        .expect("built-in patterns compile")
    }
}

impl AnswerJudge {
    /// Each pattern must have one capture group holding the answer.
    pub fn new<S: AsRef<str>>(patterns: &[S]) -> Result<Self, regex::Error> {
        Ok(AnswerJudge {
            patterns: patterns
                .iter()
                .map(|p| Regex::new(p.as_ref()))
                .collect::<Result<_, _>>()?,
        })
    }

    pub fn extract(&self, text: &str) -> Option<String> {
        self.patterns.iter().find_map(|re| {
            re.captures_iter(text)
                .last()
                .and_then(|c| c.get(1))
                .map(|m| m.as_str().to_string())
        })
    }

    /// True when the extracted answer equals `gold` after normalization. A
    /// single-letter gold also accepts "B. text" / "B) text" style answers.
    pub fn is_correct(&self, text: &str, gold: &str) -> bool {
        let Some(pred) = self.extract(text) else {
            return false;
        };
        let (pred, gold) = (normalize_answer(&pred), normalize_answer(gold));
        if pred == gold {
            return true;
        }
        let mut g = gold.chars();
        if let (Some(letter), None) = (g.next(), g.next()) {
            if letter.is_ascii_alphabetic() {
                let mut p = pred.chars();
                return p.next() == Some(letter)
                    && p.next().is_some_and(|c| matches!(c, '.' | ')' | ':' | ' '));
            }
        }
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extraction_order() {
        let j = AnswerJudge::default();
        assert_eq!(
            j.extract("so \\boxed{42} and \\boxed{43}").as_deref(),
            Some("43")
        );
        assert_eq!(j.extract("</think> Final Answer: B").as_deref(), Some("B"));
        assert_eq!(j.extract("the answer is (C).").as_deref(), Some("C"));
        assert_eq!(j.extract("no idea"), None);
    }

    #[test]
    fn judging() {
        let j = AnswerJudge::default();
        assert!(j.is_correct("Final Answer: (b)", "B"));
        assert!(j.is_correct("Final Answer: B. 12 cm", "B"));
        assert!(!j.is_correct("Final Answer: Because", "B"));
        assert!(j.is_correct("\\boxed{$3.5$}", "3.5"));
        assert!(!j.is_correct("Final Answer: A", "B"));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_answer(" ( B ). "), "b");
        assert_eq!(normalize_answer("$x  + 1$"), "x + 1");
    }
}
