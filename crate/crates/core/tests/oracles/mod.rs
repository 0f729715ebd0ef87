//! Independent reference implementations used by the property tests.
//!
//! Each oracle takes a deliberately different route from the library code:
//! regex rewriting instead of token arrays, exhaustive enumeration instead of
//! assignment solvers, plain loops instead of set operations.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};
use std::sync::{Mutex, OnceLock};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;

// ---------------------------------------------------------------- DPO

/// Naive `-ln(sigmoid(z))`; accurate for moderate `|z|`.
pub fn naive_dpo_loss(theta_pos: f64, theta_neg: f64, ref_pos: f64, ref_neg: f64, beta: f64) -> f64 {
    let z = beta * ((theta_pos - ref_pos) - (theta_neg - ref_neg));
    -(1.0 / (1.0 + (-z).exp())).ln()
}

/// Central finite difference of the naive loss in the two policy inputs.
pub fn finite_diff_grad(q: [f64; 4], beta: f64, h: f64) -> (f64, f64) {
    let f = |a: f64, b: f64| naive_dpo_loss(a, b, q[2], q[3], beta);
    let d_pos = (f(q[0] + h, q[1]) - f(q[0] - h, q[1])) / (2.0 * h);
    let d_neg = (f(q[0], q[1] + h) - f(q[0], q[1] - h)) / (2.0 * h);
    (d_pos, d_neg)
}

pub fn random_quad(rng: &mut ChaCha8Rng) -> [f64; 4] {
    [
        rng.gen_range(-12.0..0.0),
        rng.gen_range(-12.0..0.0),
        rng.gen_range(-12.0..0.0),
        rng.gen_range(-12.0..0.0),
    ]
}

// ---------------------------------------------------------------- parser

pub const OPEN_CAP: &str = "<revised caption>";
pub const CLOSE_CAP: &str = "</revised caption>";
pub const OPEN_AN: &str = "<analysis>";
pub const CLOSE_AN: &str = "</analysis>";

#[derive(Debug, PartialEq, Eq)]
pub enum OracleParse {
    Missing,
    Empty,
    Parsed(String, Option<String>),
}

/// Splits on markers with a regex, then applies the block rules to the
/// resulting (marker, following text) list.
pub fn parse_oracle(raw: &str) -> OracleParse {
    static MARKERS: OnceLock<Regex> = OnceLock::new();
    let re = MARKERS.get_or_init(|| Regex::new(r"(?i)</?revised caption>|</?analysis>").unwrap());
    let mut blocks: Vec<(String, String)> = Vec::new();
    let matches: Vec<_> = re.find_iter(raw).collect();
    for (i, m) in matches.iter().enumerate() {
        let end = matches.get(i + 1).map_or(raw.len(), |n| n.start());
        blocks.push((
            m.as_str().to_ascii_lowercase(),
            raw[m.end()..end].trim().to_string(),
        ));
    }
    let pick = |open: &str, close: &str| -> Option<String> {
        for (i, (tag, text)) in blocks.iter().enumerate() {
            let closed = blocks.get(i + 1).map(|b| b.0.as_str()) == Some(close);
            if tag == open && closed && !text.is_empty() {
                return Some(text.clone());
            }
        }
        blocks
            .iter()
            .find(|(tag, text)| tag == open && !text.is_empty())
            .map(|(_, text)| text.clone())
    };
    if !blocks.iter().any(|(t, _)| t == OPEN_CAP) {
        return OracleParse::Missing;
    }
    match pick(OPEN_CAP, CLOSE_CAP) {
        None => OracleParse::Empty,
        Some(c) => OracleParse::Parsed(c, pick(OPEN_AN, CLOSE_AN)),
    }
}

const WORDS: &[&str] = &[
    "a", "red", "car", "parked", "near", "the", "blue", "house", "two", "dogs", "sunny", "sky",
    "wooden", "table", "with", "cups", "<", ">", "caption", "revised", "analysis", "/",
];

pub fn random_text(rng: &mut ChaCha8Rng, max_words: usize) -> String {
    let n = rng.gen_range(0..=max_words);
    let mut out = String::new();
    for _ in 0..n {
        let sep = [" ", "  ", "\n", ", ", ". "].choose(rng).unwrap();
        out.push_str(sep);
        out.push_str(WORDS.choose(rng).unwrap());
    }
    if rng.gen_bool(0.3) {
        out.push_str(" \n");
    }
    out
}

/// Random interleaving of marker tokens and text chunks.
pub fn random_marker_arrangement(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(1..=8);
    let mut out = String::new();
    for _ in 0..n {
        match rng.gen_range(0..6) {
            0 => out.push_str(if rng.gen_bool(0.2) { "<Revised Caption>" } else { OPEN_CAP }),
            1 => out.push_str(CLOSE_CAP),
            2 => out.push_str(OPEN_AN),
            3 => out.push_str(CLOSE_AN),
            _ => out.push_str(&random_text(rng, 5)),
        }
    }
    out
}

/// Nonempty, trimmed, marker-free text.
pub fn random_clean_text(rng: &mut ChaCha8Rng) -> String {
    loop {
        let t = random_text(rng, 12).trim().to_string();
        let lower = t.to_ascii_lowercase();
        let has_marker = [OPEN_CAP, CLOSE_CAP, OPEN_AN, CLOSE_AN]
            .iter()
            .any(|m| lower.contains(m));
        if !t.is_empty() && !has_marker {
            return t;
        }
    }
}

// ---------------------------------------------------------------- mentions

fn cached_regex(pattern: &str) -> Regex {
    static CACHE: OnceLock<Mutex<HashMap<String, Regex>>> = OnceLock::new();
    let mut cache = CACHE.get_or_init(Default::default).lock().unwrap();
    cache
        .entry(pattern.to_string())
        .or_insert_with(|| Regex::new(pattern).unwrap())
        .clone()
}

/// Regex-rewriting mention oracle. Synonyms are processed longest first
/// (then by text, then by name); each hit is replaced by a sentinel word so
/// it cannot be matched again or bridge a later multi-word match.
pub fn mentions_oracle(caption: &str, vocab: &[(String, Vec<String>)]) -> BTreeSet<String> {
    const SENTINEL: &str = "qqconsumedqq";
    let word_count = |s: &str| {
        s.split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .count()
    };
    let mut syns: Vec<(String, String)> = Vec::new();
    for (name, list) in vocab {
        let mut all: Vec<String> = list.iter().map(|s| s.to_lowercase()).collect();
        all.push(name.to_lowercase());
        all.sort();
        all.dedup();
        for s in all {
            if word_count(&s) > 0 {
                syns.push((s, name.to_lowercase()));
            }
        }
    }
    syns.sort_by(|a, b| {
        word_count(&b.0)
            .cmp(&word_count(&a.0))
            .then_with(|| a.0.cmp(&b.0))
            .then_with(|| a.1.cmp(&b.1))
    });

    // Generated captions are ASCII, so an ASCII separator class suffices.
    let sep = r"[^a-z0-9]";
    let mut text = caption.to_lowercase();
    let mut found = BTreeSet::new();
    for (syn, name) in syns {
        let parts: Vec<String> = syn
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(regex::escape)
            .collect();
        let body = format!("{}s?", parts.join(&format!("{sep}+")));
        let re = cached_regex(&format!("(?:^|{sep})({body})(?:$|{sep})"));
        while let Some(caps) = re.captures(&text) {
            let m = caps.get(1).unwrap();
            text = format!("{}{}{}", &text[..m.start()], SENTINEL, &text[m.end()..]);
            found.insert(name.clone());
        }
    }
    found
}

const VOCAB_WORDS: &[&str] = &[
    "cat", "dog", "hot", "red", "car", "mat", "rug", "sky", "tree", "park", "bus", "stop",
    "sign", "light", "glass",
];
const FILLER: &[&str] = &["a", "the", "on", "catalog", "bobcat", "under", "and", "cars", "dogs", "mats"];

pub fn random_vocab(rng: &mut ChaCha8Rng) -> Vec<(String, Vec<String>)> {
    let n = rng.gen_range(1..=5);
    let mut names: Vec<String> = Vec::new();
    let mut out = Vec::new();
    for _ in 0..n {
        let name = VOCAB_WORDS.choose(rng).unwrap().to_string();
        if names.contains(&name) {
            continue;
        }
        names.push(name.clone());
        let k = rng.gen_range(0..=2);
        let syns = (0..k)
            .map(|_| {
                let len = rng.gen_range(1..=3);
                (0..len)
                    .map(|_| *VOCAB_WORDS.choose(rng).unwrap())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
            .collect();
        out.push((name, syns));
    }
    out
}

pub fn random_caption(rng: &mut ChaCha8Rng) -> String {
    let n = rng.gen_range(0..=14);
    let mut out = String::new();
    for i in 0..n {
        if i > 0 {
            out.push_str([" ", " ", ", ", "-", ". "].choose(rng).unwrap());
        }
        let w = if rng.gen_bool(0.6) {
            VOCAB_WORDS.choose(rng).unwrap()
        } else {
            FILLER.choose(rng).unwrap()
        };
        if rng.gen_bool(0.3) {
            out.push_str(&w.to_uppercase());
        } else {
            out.push_str(w);
        }
        if rng.gen_bool(0.2) {
            out.push('s');
        }
    }
    out
}

// ---------------------------------------------------------------- CHAIR / coverage

/// Counts with plain loops over vectors.
pub fn chair_cover_oracle(mentioned: &[String], annotated: &[String]) -> (f64, f64, f64) {
    let mut m = mentioned.to_vec();
    m.sort();
    m.dedup();
    let mut a = annotated.to_vec();
    a.sort();
    a.dedup();
    let mut halluc = 0usize;
    for x in &m {
        if !a.iter().any(|y| y == x) {
            halluc += 1;
        }
    }
    let mut covered = 0usize;
    for y in &a {
        if m.iter().any(|x| x == y) {
            covered += 1;
        }
    }
    let chair = if m.is_empty() { 0.0 } else { halluc as f64 / m.len() as f64 };
    let cover = if a.is_empty() { 0.0 } else { covered as f64 / a.len() as f64 };
    (chair, cover, cover - chair)
}

pub fn pixel_coverage_oracle(covered: &[String], objects: &[(String, f64)]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (name, area) in objects {
        den += area;
        if covered.iter().any(|c| c == name) {
            num += area;
        }
    }
    num / den
}

// ---------------------------------------------------------------- element matching

pub fn oracle_dice(a: &str, b: &str) -> f64 {
    let grams = |s: &str| {
        let chars: Vec<char> = format!(" {s} ").chars().collect();
        let mut v: Vec<String> = (0..chars.len().saturating_sub(2))
            .map(|i| chars[i..i + 3].iter().collect())
            .collect();
        v.sort();
        v.dedup();
        v
    };
    let (ga, gb) = (grams(a), grams(b));
    let common = ga.iter().filter(|g| gb.contains(g)).count();
    2.0 * common as f64 / (ga.len() + gb.len()) as f64
}

/// 3 exact, 2 synonym, 1 soft, 0 none.
pub fn oracle_tier(a: &str, b: &str, synonyms: &[Vec<String>], threshold: f64) -> u8 {
    if a == b {
        return 3;
    }
    let pa: Vec<&str> = a.split('|').collect();
    let pb: Vec<&str> = b.split('|').collect();
    let syn = pa.len() == pb.len()
        && pa.iter().zip(&pb).all(|(x, y)| {
            x == y
                || synonyms
                    .iter()
                    .any(|g| g.iter().any(|s| s == x) && g.iter().any(|s| s == y))
        });
    if syn {
        2
    } else if oracle_dice(a, b) >= threshold {
        1
    } else {
        0
    }
}

/// Best `(matched, exact, synonym)` over every injective partial matching,
/// compared lexicographically.
pub fn exhaustive_matching(tiers: &[Vec<u8>]) -> (usize, usize, usize) {
    fn go(row: usize, tiers: &[Vec<u8>], used: &mut Vec<bool>, acc: (usize, usize, usize), best: &mut (usize, usize, usize)) {
        if row == tiers.len() {
            if acc > *best {
                *best = acc;
            }
            return;
        }
        go(row + 1, tiers, used, acc, best);
        for col in 0..used.len() {
            let t = tiers[row][col];
            if t > 0 && !used[col] {
                used[col] = true;
                let next = (
                    acc.0 + 1,
                    acc.1 + usize::from(t == 3),
                    acc.2 + usize::from(t == 2),
                );
                go(row + 1, tiers, used, next, best);
                used[col] = false;
            }
        }
    }
    let cols = tiers.first().map_or(0, Vec::len);
    let mut best = (0, 0, 0);
    go(0, tiers, &mut vec![false; cols], (0, 0, 0), &mut best);
    best
}

const ELEMENT_POOL: &[&str] = &[
    "cat", "cats", "kitten", "car", "red car", "red cars", "sofa", "couch", "dog", "dogs",
    "mat", "rug", "blue sky", "sky",
];

pub fn random_elements(rng: &mut ChaCha8Rng, max: usize) -> Vec<String> {
    let n = rng.gen_range(0..=max);
    let mut v: Vec<String> = (0..n)
        .map(|_| ELEMENT_POOL.choose(rng).unwrap().to_string())
        .collect();
    v.sort();
    v.dedup();
    v
}

pub fn random_relations(rng: &mut ChaCha8Rng, max: usize) -> Vec<String> {
    let n = rng.gen_range(0..=max);
    let preds = ["on", "under", "near"];
    let mut v: Vec<String> = (0..n)
        .map(|_| {
            format!(
                "{}|{}|{}",
                ELEMENT_POOL.choose(rng).unwrap(),
                preds.choose(rng).unwrap(),
                ELEMENT_POOL.choose(rng).unwrap()
            )
        })
        .collect();
    v.sort();
    v.dedup();
    v
}

pub fn oracle_synonym_groups() -> Vec<Vec<String>> {
    vec![
        vec!["cat".into(), "kitten".into()],
        vec!["couch".into(), "sofa".into()],
        vec!["mat".into(), "rug".into()],
    ]
}
