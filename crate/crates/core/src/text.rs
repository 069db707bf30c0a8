//! String normalization shared by answer matching, tokenization and the
//! vocabulary builder.

/// Lowercase, trim, collapse internal whitespace and strip terminal
/// punctuation.
pub fn normalize_answer(s: &str) -> String {
    let collapsed = s.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
    collapsed
        .trim_end_matches(|c: char| c.is_ascii_punctuation())
        .trim()
        .to_owned()
}

/// Lowercased words with surrounding punctuation removed.
pub fn words(s: &str) -> impl Iterator<Item = String> + '_ {
    s.split_whitespace().filter_map(|w| {
        let w = w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase();
        (!w.is_empty()).then_some(w)
    })
}
