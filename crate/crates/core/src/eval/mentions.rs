//! Object mentions in free text against a synonym vocabulary.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::EvalError;

/// Object name → surface synonyms, all lowercase. Every synonym list contains
/// the name itself.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectVocabulary {
    pub entries: BTreeMap<String, Vec<String>>,
}

impl ObjectVocabulary {
    /// Lowercases names and synonyms, adds each name to its own synonym list
    /// and drops duplicates.
    pub fn new<I, S, T>(entries: I) -> Result<Self, EvalError>
    where
        I: IntoIterator<Item = (S, Vec<T>)>,
        S: AsRef<str>,
        T: AsRef<str>,
    {
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (name, synonyms) in entries {
            let name = name.as_ref().trim().to_lowercase();
            if name.is_empty() {
                return Err(EvalError::InvalidVocabulary("empty object name".into()));
            }
            if out.contains_key(&name) {
                return Err(EvalError::InvalidVocabulary(format!(
                    "duplicate object name {name:?}"
                )));
            }
            let mut syns: BTreeSet<String> = synonyms
                .iter()
                .map(|s| s.as_ref().trim().to_lowercase())
                .filter(|s| !s.is_empty())
                .collect();
            syns.insert(name.clone());
            out.insert(name, syns.into_iter().collect());
        }
        Ok(Self { entries: out })
    }

    /// Re-normalizes a deserialized vocabulary.
    pub fn normalized(self) -> Result<Self, EvalError> {
        Self::new(self.entries)
    }

    /// Whether `a` and `b` are listed together under some entry.
    pub fn are_synonyms(&self, a: &str, b: &str) -> bool {
        self.entries.values().any(|syns| {
            syns.iter().any(|s| s == a) && syns.iter().any(|s| s == b)
        })
    }
}

/// Lowercased alphanumeric word runs.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn token_matches(token: &str, synonym_word: &str, allow_plural: bool) -> bool {
    token == synonym_word
        || (allow_plural
            && token.len() == synonym_word.len() + 1
            && token.ends_with('s')
            && token.starts_with(synonym_word))
}

/// Object names whose synonyms appear in `caption` as whole words.
///
/// Longer synonyms are matched first and consume their words, so "hot dog"
/// does not also count as "dog". Ties are broken by synonym text, then object
/// name. The last word of a synonym also matches with a trailing "s".
pub fn extract_mentions(caption: &str, vocab: &ObjectVocabulary) -> BTreeSet<String> {
    let tokens = words(caption);
    let mut candidates: Vec<(Vec<String>, &str, &str)> = vocab
        .entries
        .iter()
        .flat_map(|(name, syns)| {
            syns.iter()
                .map(move |s| (words(s), s.as_str(), name.as_str()))
        })
        .filter(|(w, _, _)| !w.is_empty())
        .collect();
    candidates.sort_by(|a, b| {
        b.0.len()
            .cmp(&a.0.len())
            .then_with(|| a.1.cmp(b.1))
            .then_with(|| a.2.cmp(b.2))
    });

    let mut consumed = vec![false; tokens.len()];
    let mut found = BTreeSet::new();
    for (syn_words, _, name) in &candidates {
        let k = syn_words.len();
        if k > tokens.len() {
            continue;
        }
        let mut i = 0;
        while i + k <= tokens.len() {
            let hit = (0..k).all(|j| {
                !consumed[i + j] && token_matches(&tokens[i + j], &syn_words[j], j + 1 == k)
            });
            if hit {
                consumed[i..i + k].iter_mut().for_each(|c| *c = true);
                found.insert((*name).to_string());
                i += k;
            } else {
                i += 1;
            }
        }
    }
    found
}
