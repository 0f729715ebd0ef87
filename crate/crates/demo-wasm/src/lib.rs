//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each exported function takes plain numbers or JSON strings and returns a
//! JSON string so the page needs no generated TypeScript glue beyond
//! `wasm-bindgen --target web`.

use std::collections::BTreeSet;

use recap_core::dpo::{self, IndexPair, LogProbQuad};
use recap_core::eval::{chair_cover, extract_mentions, ObjectVocabulary};
use recap_core::prompt::parse_reviser_output;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct CurvePoint {
    margin: f64,
    loss: f64,
    grad_chosen: f64,
    reward_prob: f64,
}

/// Loss and chosen-side gradient over margins in `[-span, span]`.
pub fn dpo_curve_json(beta: f64, span: f64, samples: usize) -> Result<String, String> {
    if samples < 2 {
        return Err("need at least two samples".into());
    }
    if !(span.is_finite() && span > 0.0) {
        return Err("span must be positive".into());
    }
    let points = (0..samples)
        .map(|i| {
            let margin = -span + 2.0 * span * i as f64 / (samples - 1) as f64;
            let q = LogProbQuad::new(margin, 0.0, 0.0, 0.0);
            let loss = dpo::dpo_loss(&q, beta).map_err(|e| e.to_string())?;
            let grad = dpo::dpo_loss_grad(&q, beta).map_err(|e| e.to_string())?;
            Ok(CurvePoint {
                margin,
                loss,
                grad_chosen: grad.d_theta_pos,
                reward_prob: dpo::sigmoid(beta * margin),
            })
        })
        .collect::<Result<Vec<_>, String>>()?;
    Ok(serde_json::to_string(&points).expect("curve serializes"))
}

#[derive(Serialize)]
struct FitView {
    loss_history: Vec<f64>,
    initial_probs: Vec<f64>,
    final_probs: Vec<f64>,
}

/// Parses `"0>1, 2>1"` into chosen/rejected index pairs.
pub fn parse_pairs(spec: &str) -> Result<Vec<IndexPair>, String> {
    spec.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (pos, neg) = item
                .split_once('>')
                .ok_or_else(|| format!("expected chosen>rejected, got {item:?}"))?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| format!("bad index {s:?}"))
            };
            Ok(IndexPair {
                pos: parse(pos)?,
                neg: parse(neg)?,
            })
        })
        .collect()
}

pub fn fit_policy_json(
    alphabet: usize,
    pairs: &str,
    beta: f64,
    steps: usize,
    learning_rate: f64,
) -> Result<String, String> {
    let pairs = parse_pairs(pairs)?;
    let fit = dpo::fit_tabular_policy(alphabet, &pairs, beta, steps, learning_rate)
        .map_err(|e| e.to_string())?;
    let view = FitView {
        loss_history: fit.loss_history,
        initial_probs: fit.reference.probs(),
        final_probs: fit.policy.probs(),
    };
    Ok(serde_json::to_string(&view).expect("fit serializes"))
}

#[derive(Serialize)]
struct CaptionScore {
    mentioned: BTreeSet<String>,
    chair: f64,
    cover: f64,
    over: f64,
}

/// CHAIR / Cover for `caption` given a vocabulary JSON object
/// (`{"cat": ["kitten"], ...}`) and comma-separated annotated objects.
pub fn score_caption_json(caption: &str, vocab: &str, annotated: &str) -> Result<String, String> {
    let entries: std::collections::BTreeMap<String, Vec<String>> =
        serde_json::from_str(vocab).map_err(|e| format!("vocabulary: {e}"))?;
    let vocab = ObjectVocabulary::new(entries).map_err(|e| e.to_string())?;
    let annotated: BTreeSet<String> = annotated
        .split(',')
        .map(|s| s.trim().to_lowercase())
        .filter(|s| !s.is_empty())
        .collect();
    let mentioned = extract_mentions(caption, &vocab);
    let m = chair_cover(&mentioned, &annotated);
    Ok(serde_json::to_string(&CaptionScore {
        mentioned,
        chair: m.chair,
        cover: m.cover,
        over: m.over,
    })
    .expect("score serializes"))
}

pub fn parse_reviser_json(raw: &str) -> Result<String, String> {
    let out = parse_reviser_output(raw).map_err(|e| e.to_string())?;
    Ok(serde_json::to_string(&out).expect("output serializes"))
}

#[wasm_bindgen(js_name = dpoCurve)]
pub fn dpo_curve(beta: f64, span: f64, samples: usize) -> Result<String, String> {
    dpo_curve_json(beta, span, samples)
}

#[wasm_bindgen(js_name = fitPolicy)]
pub fn fit_policy(
    alphabet: usize,
    pairs: &str,
    beta: f64,
    steps: usize,
    learning_rate: f64,
) -> Result<String, String> {
    fit_policy_json(alphabet, pairs, beta, steps, learning_rate)
}

#[wasm_bindgen(js_name = scoreCaption)]
pub fn score_caption(caption: &str, vocab: &str, annotated: &str) -> Result<String, String> {
    score_caption_json(caption, vocab, annotated)
}

#[wasm_bindgen(js_name = parseReviser)]
pub fn parse_reviser(raw: &str) -> Result<String, String> {
    parse_reviser_json(raw)
}
