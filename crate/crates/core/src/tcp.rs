//! Pseudo-gloss generation from spoken text, vocabulary construction and
//! the feature-dispersion diagnostic.
//!
//! Punctuation is every character in the Unicode general categories
//! `Pc Pd Ps Pe Pi Pf Po` unless a custom set is configured. Characters are
//! removed, not replaced, so `"don't"` becomes `"dont"`.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use unicode_general_category::{get_general_category, GeneralCategory};

use crate::error::{Error, Result};
use crate::graph::{node_distance, Distance};
use crate::tensor::Tensor;
use crate::vocab::GlossVocab;

/// Suffixes removed by [`Lemmatizer::SuffixStrip`], tried in this order.
pub const INFLECTION_SUFFIXES: [&str; 3] = ["ing", "ed", "s"];
/// Shortest stem the suffix stripper will leave behind.
pub const MIN_STEM_LEN: usize = 3;

/// Closed set of function words used by the synthetic text generator and the
/// optional filter.
pub const FUNCTION_WORDS: [&str; 6] = ["the", "a", "to", "of", "and", "in"];

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lemmatizer {
    #[default]
    Identity,
    /// Removes one of [`INFLECTION_SUFFIXES`] while at least
    /// [`MIN_STEM_LEN`] characters remain, repeated to a fixed point.
    SuffixStrip,
    #[serde(skip)]
    Custom(fn(&str) -> String),
}

impl PartialEq for Lemmatizer {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Lemmatizer::Identity, Lemmatizer::Identity)
            | (Lemmatizer::SuffixStrip, Lemmatizer::SuffixStrip) => true,
            (Lemmatizer::Custom(a), Lemmatizer::Custom(b)) => std::ptr::fn_addr_eq(*a, *b),
            _ => false,
        }
    }
}

impl Lemmatizer {
    pub fn apply(&self, token: &str) -> String {
        match self {
            Lemmatizer::Identity => token.to_owned(),
            Lemmatizer::SuffixStrip => strip_suffixes(token),
            Lemmatizer::Custom(f) => f(token),
        }
    }
}

pub fn strip_suffixes(token: &str) -> String {
    let mut w = token;
    'outer: loop {
        for suf in INFLECTION_SUFFIXES {
            if let Some(stem) = w.strip_suffix(suf) {
                if stem.chars().count() >= MIN_STEM_LEN {
                    w = stem;
                    continue 'outer;
                }
            }
        }
        return w.to_owned();
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum Punctuation {
    #[default]
    Unicode,
    Chars(Vec<char>),
}

impl Punctuation {
    pub fn contains(&self, c: char) -> bool {
        match self {
            Punctuation::Unicode => is_unicode_punctuation(c),
            Punctuation::Chars(set) => set.contains(&c),
        }
    }
}

pub fn is_unicode_punctuation(c: char) -> bool {
    matches!(
        get_general_category(c),
        GeneralCategory::ConnectorPunctuation
            | GeneralCategory::DashPunctuation
            | GeneralCategory::OpenPunctuation
            | GeneralCategory::ClosePunctuation
            | GeneralCategory::InitialPunctuation
            | GeneralCategory::FinalPunctuation
            | GeneralCategory::OtherPunctuation
    )
}

#[derive(Clone, Debug)]
pub struct NormalizerConfig {
    pub punctuation: Punctuation,
    pub lowercase: bool,
    pub lemmatizer: Lemmatizer,
    /// Tokens dropped after lowercasing and before lemmatization.
    pub function_words: Option<HashSet<String>>,
}

impl Default for NormalizerConfig {
    fn default() -> Self {
        Self {
            punctuation: Punctuation::Unicode,
            lowercase: true,
            lemmatizer: Lemmatizer::Identity,
            function_words: None,
        }
    }
}

impl NormalizerConfig {
    pub fn with_lemmatizer(mut self, lemmatizer: Lemmatizer) -> Self {
        self.lemmatizer = lemmatizer;
        self
    }

    pub fn with_function_word_filter(mut self) -> Self {
        self.function_words = Some(FUNCTION_WORDS.iter().map(|w| (*w).to_owned()).collect());
        self
    }
}

/// Strip punctuation, optionally lowercase, split on whitespace, filter and
/// lemmatize each token.
pub fn make_pseudo_gloss(text: &str, cfg: &NormalizerConfig) -> Vec<String> {
    let stripped: String = text
        .chars()
        .filter(|&c| !cfg.punctuation.contains(c))
        .collect();
    let stripped = if cfg.lowercase {
        stripped.to_lowercase()
    } else {
        stripped
    };
    stripped
        .split_whitespace()
        .filter(|t| {
            cfg.function_words
                .as_ref()
                .is_none_or(|fw| !fw.contains(*t))
        })
        .map(|t| cfg.lemmatizer.apply(t))
        .filter(|t| !t.is_empty())
        .collect()
}

/// Ids by descending frequency, then lexicographic order.
pub fn build_vocab<S: AsRef<str>>(corpus: &[Vec<S>]) -> Result<GlossVocab> {
    if corpus.is_empty() {
        return Err(Error::invalid("build_vocab", "empty corpus"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for tok in corpus.iter().flatten() {
        *counts.entry(tok.as_ref()).or_default() += 1;
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    GlossVocab::from_tokens(ranked.into_iter().map(|(t, _)| t.to_owned()).collect())
}

/// Mean cosine similarity of consecutive rows of `[T', D]`; a zero row has
/// similarity 0 with anything.
pub fn feature_dispersion(seq: &Tensor) -> Result<f64> {
    let (t, _) = seq
        .dims2()
        .ok_or_else(|| Error::invalid("feature_dispersion", "expected a [T, D] tensor"))?;
    if t < 2 {
        return Err(Error::invalid(
            "feature_dispersion",
            format!("need at least 2 steps, got {t}"),
        ));
    }
    let total: f64 = (1..t)
        .map(|i| 1.0 - node_distance(seq.row(i - 1), seq.row(i), Distance::Cosine))
        .sum();
    Ok(total / (t - 1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| (*s).to_owned()).collect()
    }

    #[test]
    fn pseudo_gloss_examples() {
        let cfg = NormalizerConfig::default();
        assert_eq!(
            make_pseudo_gloss("There are results pending for 20 other tests", &cfg),
            words(&["there", "are", "results", "pending", "for", "20", "other", "tests"])
        );
        assert!(make_pseudo_gloss("", &cfg).is_empty());
        assert_eq!(
            make_pseudo_gloss("Hello, hello!", &cfg),
            words(&["hello", "hello"])
        );
        assert_eq!(
            make_pseudo_gloss("«Grüße» \u{2014} über¿", &cfg),
            words(&["grüße", "über"])
        );
    }

    #[test]
    fn suffix_stripper_reaches_fixed_point() {
        assert_eq!(strip_suffixes("suns"), "sun");
        assert_eq!(strip_suffixes("snowing"), "snow");
        assert_eq!(strip_suffixes("colded"), "cold");
        assert_eq!(strip_suffixes("sing"), "sing");
        assert_eq!(strip_suffixes("strings"), "str");
        assert_eq!(strip_suffixes(&strip_suffixes("strings")), "str");
    }

    #[test]
    fn filter_runs_before_lemmatizer() {
        let cfg = NormalizerConfig::default()
            .with_lemmatizer(Lemmatizer::SuffixStrip)
            .with_function_word_filter();
        assert_eq!(
            make_pseudo_gloss("The suns of snowing.", &cfg),
            words(&["sun", "snow"])
        );
    }

    #[test]
    fn vocab_examples() {
        let v = build_vocab(&[vec!["a", "b"], vec!["a"]]).unwrap();
        assert_eq!((v.id("a"), v.id("b")), (Some(1), Some(2)));
        let v = build_vocab(&[vec!["z", "y", "x"]]).unwrap();
        assert_eq!(v.size(), 4);
        assert_eq!(v.tokens(), &words(&["x", "y", "z"])[..]);
        assert!(build_vocab::<&str>(&[]).is_err());
    }

    #[test]
    fn dispersion_examples() {
        let c = Tensor::new(&[3, 2], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        assert!((feature_dispersion(&c).unwrap() - 1.0).abs() < 1e-12);
        let alt = Tensor::new(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(feature_dispersion(&alt).unwrap(), 0.0);
        let two = Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap();
        assert!((feature_dispersion(&two).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
        assert!(feature_dispersion(&Tensor::zeros(&[1, 2])).is_err());
    }
}
