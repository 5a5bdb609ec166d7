//! Word-level text helpers shared by claim extraction, the reference
//! projection and the containment judge.

use std::collections::BTreeSet;

/// Function words and connectives. They carry no factual content, so they never
/// block a sentence from projection and never count as leaked vocabulary.
const STOPWORDS: &[&str] = &[
    "a",
    "about",
    "above",
    "after",
    "again",
    "against",
    "all",
    "also",
    "although",
    "am",
    "an",
    "and",
    "any",
    "are",
    "as",
    "at",
    "be",
    "because",
    "been",
    "before",
    "being",
    "below",
    "between",
    "both",
    "but",
    "by",
    "can",
    "could",
    "did",
    "do",
    "does",
    "doing",
    "down",
    "during",
    "each",
    "either",
    "else",
    "even",
    "every",
    "few",
    "for",
    "from",
    "further",
    "had",
    "has",
    "have",
    "having",
    "he",
    "hence",
    "her",
    "here",
    "hers",
    "herself",
    "him",
    "himself",
    "his",
    "how",
    "however",
    "i",
    "if",
    "in",
    "into",
    "is",
    "it",
    "its",
    "itself",
    "just",
    "let",
    "may",
    "me",
    "meanwhile",
    "might",
    "more",
    "moreover",
    "most",
    "must",
    "my",
    "myself",
    "neither",
    "nor",
    "not",
    "now",
    "of",
    "off",
    "on",
    "once",
    "only",
    "or",
    "other",
    "otherwise",
    "our",
    "ours",
    "ourselves",
    "out",
    "over",
    "own",
    "same",
    "she",
    "should",
    "since",
    "so",
    "some",
    "such",
    "than",
    "that",
    "the",
    "their",
    "theirs",
    "them",
    "themselves",
    "then",
    "there",
    "therefore",
    "these",
    "they",
    "this",
    "those",
    "though",
    "thus",
    "to",
    "too",
    "under",
    "until",
    "up",
    "very",
    "was",
    "we",
    "were",
    "what",
    "when",
    "where",
    "whether",
    "which",
    "while",
    "who",
    "whom",
    "whose",
    "why",
    "will",
    "with",
    "would",
    "yet",
    "you",
    "your",
    "yours",
    "yourself",
    "yourselves",
    "overall",
    "summary",
    "conclusion",
    "finally",
    "first",
    "second",
    "additionally",
    "furthermore",
    "instead",
    "still",
];

/// Interjections and thinking-aloud fillers. A clause made only of these (and
/// no other alphabetic word) has nothing to verify.
const FILLERS: &[&str] = &[
    "hmm", "hm", "um", "uh", "erm", "ah", "oh", "okay", "ok", "well", "wait", "right", "alright",
    "yes", "yeah", "no", "nope", "so", "let", "me", "think", "see", "actually", "anyway", "now",
    "hmmm", "huh",
];

pub fn is_stopword(word: &str) -> bool {
    STOPWORDS.contains(&word)
}

pub fn is_filler(word: &str) -> bool {
    FILLERS.contains(&word)
}

/// Trims and collapses every run of whitespace to a single space.
pub fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lowercased alphanumeric words, in order of appearance.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// Words that carry factual content: everything except stopwords.
pub fn content_words(text: &str) -> BTreeSet<String> {
    words(text).filter(|w| !is_stopword(w)).collect()
}

/// Whitespace-token approximation used when a backend does not report counts.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
