//! Small text helpers shared by the stages.

/// Canonical form for label comparison: trimmed, lowercased.
pub fn normalize_label(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Canonical form for quiz option comparison: lowercased with all runs of
/// whitespace collapsed and the ends trimmed.
pub fn normalize_option(s: &str) -> String {
    s.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

pub fn labels_equal(a: &str, b: &str) -> bool {
    normalize_label(a) == normalize_label(b)
}

/// True when `s` holds at most one sentence: no terminator (`.`, `!`, `?`)
/// is followed by whitespace and a capitalised word. Lowercase continuations
/// ("e.g. scikit-learn") do not start a new sentence.
pub fn is_single_sentence(s: &str) -> bool {
    let chars: Vec<char> = s.trim().chars().collect();
    for (i, c) in chars.iter().enumerate() {
        if matches!(c, '.' | '!' | '?') {
            let rest = &chars[i + 1..];
            let mut saw_space = false;
            for r in rest {
                if r.is_whitespace() {
                    saw_space = true;
                } else if saw_space && r.is_uppercase() {
                    return false;
                } else {
                    break;
                }
            }
        }
    }
    true
}

pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

/// Longest prefix of `s` holding at most `max_chars` characters, cut back to
/// the last whitespace when one exists inside the prefix.
pub fn char_prefix(s: &str, max_chars: usize) -> &str {
    if s.chars().count() <= max_chars {
        return s;
    }
    let end = s
        .char_indices()
        .nth(max_chars)
        .map(|(i, _)| i)
        .unwrap_or(s.len());
    let cut = &s[..end];
    match cut.rfind(char::is_whitespace) {
        Some(ws) if ws > 0 => cut[..ws].trim_end(),
        _ => cut,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sentence_detection() {
        assert!(is_single_sentence("How to cluster customers"));
        assert!(is_single_sentence("How does k-means work?"));
        assert!(is_single_sentence("Using e.g. scikit-learn"));
        assert!(is_single_sentence("Version 3.5 of the API."));
        assert!(!is_single_sentence(
            "K-means clusters data. It is unsupervised."
        ));
        assert!(!is_single_sentence("Why? Because."));
    }

    #[test]
    fn option_normalization_collapses_case_and_space() {
        assert_eq!(normalize_option("  B "), "b");
        assert_eq!(normalize_option("Mean  of\tpoints"), "mean of points");
    }

    #[test]
    fn prefix_respects_budget_and_char_boundaries() {
        let s = "héllo wörld again";
        let p = char_prefix(s, 9);
        assert!(p.chars().count() <= 9);
        assert!(s.starts_with(p));
        assert_eq!(p, "héllo");
        assert_eq!(char_prefix("abc", 10), "abc");
        assert_eq!(char_prefix("abcdef", 3), "abc");
    }
}
