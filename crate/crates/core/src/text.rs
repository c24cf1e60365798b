//! Tokenization shared by embeddings, ranking and query performance prediction.

/// Lowercases `text` and splits on anything that is not alphanumeric.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

/// A small English stopword list, only used when explicitly enabled.
pub const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "be", "by", "for", "from", "has", "have", "i", "in",
    "is", "it", "its", "me", "my", "near", "of", "on", "or", "that", "the", "to", "want", "was",
    "we", "which", "with", "would", "you",
];

pub fn tokenize_filtered(text: &str, drop_stopwords: bool) -> Vec<String> {
    let mut tokens = tokenize(text);
    if drop_stopwords {
        tokens.retain(|t| !STOPWORDS.contains(&t.as_str()));
    }
    tokens
}
