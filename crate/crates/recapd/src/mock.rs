//! Deterministic stand-ins for the remote models.
//!
//! Every response is a pure function of the request body: a ChaCha PRNG is
//! seeded with the SHA-256 of the canonical body. Chat roles answer in the
//! chat-completions wire shape; the t2i role returns a tiny solid-colour PNG.

use base64::Engine as _;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use recap_core::hashing::{canonical_hash, canonical_json};
use recap_core::prompt::{ANALYSIS_CLOSE, ANALYSIS_OPEN, REVISED_CLOSE, REVISED_OPEN};
use recap_core::Role;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

const ADJECTIVES: &[&str] = &["small", "bright", "weathered", "striped", "quiet", "crowded", "wooden"];
const SUBJECTS: &[&str] = &["cat", "bicycle", "lighthouse", "market stall", "dog", "teapot", "sailboat"];
const PLACES: &[&str] = &["on a stone wall", "beside a river", "in a sunlit room", "under a grey sky", "on a wooden table"];
const CLAUSES: &[&str] = &[
    "with soft morning light from the left",
    "photographed at eye level",
    "against a slightly blurred background",
    "in muted warm tones",
    "with a shallow depth of field",
];

fn rng_for(body: &Value) -> ChaCha8Rng {
    ChaCha8Rng::from_seed(Sha256::digest(canonical_json(body).as_bytes()).into())
}

/// 8×8 PNG of a single colour.
pub fn solid_png(rgb: [u8; 3]) -> Vec<u8> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, 8, 8);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().expect("in-memory png header");
        let data: Vec<u8> = rgb.iter().copied().cycle().take(8 * 8 * 3).collect();
        w.write_image_data(&data).expect("in-memory png data");
    }
    out
}

/// Chat-completions response wrapping `text`.
pub fn chat_response(body: &Value, text: &str) -> Value {
    json!({
        "id": format!("mock-{}", &canonical_hash(body)[..16]),
        "object": "chat.completion",
        "model": body.get("model").cloned().unwrap_or(Value::Null),
        "choices": [{
            "index": 0,
            "message": {"role": "assistant", "content": text},
            "finish_reason": "stop"
        }]
    })
}

/// Text parts of the first user message, joined.
pub fn prompt_text(body: &Value) -> String {
    let content = &body["messages"][0]["content"];
    match content {
        Value::String(s) => s.clone(),
        Value::Array(parts) => parts
            .iter()
            .filter(|p| p["type"] == "text")
            .filter_map(|p| p["text"].as_str())
            .collect::<Vec<_>>()
            .join("\n"),
        _ => String::new(),
    }
}

fn image_count(body: &Value) -> usize {
    body["messages"][0]["content"]
        .as_array()
        .map_or(0, |parts| parts.iter().filter(|p| p["type"] == "image_url").count())
}

/// Role implied by a chat body: two images → reviser, one → captioner,
/// none → judge.
pub fn infer_chat_role(body: &Value) -> Role {
    match image_count(body) {
        0 => Role::Judge,
        1 => Role::Captioner,
        _ => Role::Reviser,
    }
}

/// The caption slot of a rendered refinement prompt, when recognisable.
fn previous_caption(prompt: &str) -> Option<&str> {
    let start = prompt.find("the original caption: ")? + "the original caption: ".len();
    let rest = &prompt[start..];
    let end = rest.find("\n\n").unwrap_or(rest.len());
    Some(rest[..end].trim().strip_suffix('.').unwrap_or(rest[..end].trim()))
}

fn caption(rng: &mut ChaCha8Rng) -> String {
    let mut c = format!(
        "A {} {} {}.",
        ADJECTIVES.choose(rng).unwrap(),
        SUBJECTS.choose(rng).unwrap(),
        PLACES.choose(rng).unwrap()
    );
    if rng.gen_bool(0.5) {
        c = format!("{}, {}.", c.trim_end_matches('.'), CLAUSES.choose(rng).unwrap());
    }
    c
}

fn revision(rng: &mut ChaCha8Rng, prompt: &str) -> String {
    let prev = previous_caption(prompt)
        .map(str::to_string)
        .unwrap_or_else(|| caption(rng));
    let clause = CLAUSES.choose(rng).unwrap();
    let (revised, analysis) = if prev.contains(clause) {
        (prev.clone(), "The reconstruction already matches the original closely.".to_string())
    } else {
        (
            format!("{}, {clause}.", prev.trim_end_matches('.')),
            format!("The reconstruction lacks this detail: {clause}."),
        )
    };
    let mut out = format!("{REVISED_OPEN}{revised}{REVISED_CLOSE}");
    if prompt.contains(ANALYSIS_OPEN) {
        out.push_str(&format!("\n{ANALYSIS_OPEN}{analysis}{ANALYSIS_CLOSE}"));
    }
    out
}

fn judge(rng: &mut ChaCha8Rng, prompt: &str) -> String {
    if prompt.contains("Fact:") {
        let scale_max: u32 = prompt
            .split(" (described fully")
            .next()
            .and_then(|s| s.rsplit(' ').next())
            .and_then(|s| s.parse().ok())
            .unwrap_or(3);
        return rng.gen_range(0..=scale_max).to_string();
    }
    ["Yes.", "No.", "N/A"].choose(rng).unwrap().to_string()
}

/// Deterministic response for a chat request served as `role`.
pub fn respond_chat(role: Role, body: &Value) -> Value {
    let mut rng = rng_for(body);
    let prompt = prompt_text(body);
    let text = match role {
        Role::Captioner => caption(&mut rng),
        Role::Reviser => revision(&mut rng, &prompt),
        Role::Judge | Role::T2i => judge(&mut rng, &prompt),
    };
    chat_response(body, &text)
}

/// Deterministic `{"image": <base64 png>}` for a t2i request.
pub fn respond_t2i(body: &Value) -> Value {
    let mut rng = rng_for(body);
    let rgb = [rng.gen(), rng.gen(), rng.gen()];
    json!({"image": base64::engine::general_purpose::STANDARD.encode(solid_png(rgb))})
}

pub fn respond(role: Role, body: &Value) -> Value {
    match role {
        Role::T2i => respond_t2i(body),
        _ => respond_chat(role, body),
    }
}
