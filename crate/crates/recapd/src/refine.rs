//! The reconstruct-and-revise loop for one image.

use std::sync::atomic::{AtomicBool, Ordering};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use recap_core::hashing::canonical_hash;
use recap_core::prompt::{parse_reviser_output, ParseError, PromptTemplates};
use recap_core::trace::{
    CallOutput, CallRecord, CallTiming, InitialCaption, StepRecord, TraceStatus, TraceTiming,
};
use recap_core::{ImageRef, RefineConfig, RefinementTrace, Role};

use crate::client::{chat_body, t2i_body, ClientError, Clients};
use crate::store::StoreError;

#[derive(Debug, thiserror::Error)]
pub enum RefineError {
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("reviser output unusable after {attempts} attempt(s): {source}")]
    Parse {
        attempts: u32,
        #[source]
        source: ParseError,
    },
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// One image to refine.
#[derive(Debug, Clone)]
pub struct RefineInput {
    pub id: String,
    pub image: ImageRef,
    pub init_caption: Option<String>,
}

#[derive(Clone, Copy)]
pub struct RefineOptions<'a> {
    pub config: &'a RefineConfig,
    pub templates: &'a PromptTemplates,
    /// Turn an unparseable reviser response into an error instead of a
    /// degenerate step.
    pub strict_parse: bool,
    /// Checked between steps; when set the trace ends as `Interrupted`.
    pub cancel: Option<&'a AtomicBool>,
}

/// Result of a single reconstruct-and-revise step.
#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub reconstruction: ImageRef,
    pub revised: String,
    pub analysis: Option<String>,
    pub record: StepRecord,
    pub timings: Vec<CallTiming>,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// `c_i = R(T(c_{i-1}), v_0, c_{i-1})`. When no attempt yields a parseable
/// caption, the previous caption is carried over and the step is flagged
/// degenerate (or, with `strict_parse`, the step fails).
pub fn refine_once(
    clients: &Clients,
    original: &ImageRef,
    prev_caption: &str,
    opts: &RefineOptions<'_>,
) -> Result<StepOutcome, RefineError> {
    if prev_caption.trim().is_empty() {
        return Err(RefineError::Input("previous caption is empty".into()));
    }
    let recon = clients.generate_image(prev_caption, opts.config.seed)?;
    let prompt = opts
        .templates
        .render_refinement(prev_caption, &opts.config.variant);
    let mut timings = vec![recon.timing.clone()];
    let mut revisions = Vec::new();
    let mut last_error = ParseError::MissingCaptionMarker;
    for attempt in 0..=opts.config.retry_on_parse_failure {
        let called =
            clients.revise_caption(original, &recon.value, &prompt, prev_caption, attempt)?;
        timings.push(called.timing.clone());
        revisions.push(called.record.clone());
        match parse_reviser_output(&called.value) {
            Ok(out) => {
                return Ok(StepOutcome {
                    reconstruction: recon.value,
                    revised: out.revised_caption,
                    analysis: out.analysis,
                    record: StepRecord {
                        reconstruction: recon.record,
                        revisions,
                        degenerate: false,
                    },
                    timings,
                })
            }
            Err(e) => {
                log::warn!("reviser output attempt {} unparseable: {e}", attempt + 1);
                last_error = e;
            }
        }
    }
    if opts.strict_parse {
        return Err(RefineError::Parse {
            attempts: revisions.len() as u32,
            source: last_error,
        });
    }
    Ok(StepOutcome {
        reconstruction: recon.value,
        revised: prev_caption.to_string(),
        analysis: None,
        record: StepRecord {
            reconstruction: recon.record,
            revisions,
            degenerate: true,
        },
        timings,
    })
}

/// Roles a refinement needs given whether the initial caption is supplied.
pub fn required_roles(config: &RefineConfig, has_init_caption: bool) -> Vec<Role> {
    let mut roles = Vec::new();
    if !has_init_caption {
        roles.push(Role::Captioner);
    }
    if config.n_iterations > 0 {
        roles.extend([Role::T2i, Role::Reviser]);
    }
    roles
}

/// Runs the full loop for one image. `persist` sees the trace after the
/// initial caption, after every step, and on failure, so partial progress is
/// on disk before an error surfaces. An interrupted run returns `Ok` with
/// status `Interrupted`.
pub fn run_refinement(
    clients: &Clients,
    input: &RefineInput,
    opts: &RefineOptions<'_>,
    persist: &mut dyn FnMut(&RefinementTrace) -> Result<(), StoreError>,
) -> Result<RefinementTrace, RefineError> {
    let config = opts.config;
    let supplied = input
        .init_caption
        .as_deref()
        .map(str::trim)
        .filter(|c| !c.is_empty());
    clients.require(&required_roles(config, supplied.is_some()))?;
    let started_at_ms = now_ms();
    let prompt_id = config.initial_prompt_id;
    let prompt = opts
        .templates
        .initial_prompt(prompt_id)
        .map_err(|e| RefineError::Input(e.to_string()))?
        .to_string();

    let mut timing = TraceTiming {
        started_at_ms,
        ..Default::default()
    };
    let (initial, c0) = match supplied {
        Some(c) => (InitialCaption::Supplied { prompt_id, prompt }, c.to_string()),
        None => {
            let called = clients.caption_image(&input.image, &prompt)?;
            timing.calls.push(called.timing);
            (
                InitialCaption::Generated {
                    prompt_id,
                    prompt,
                    call: called.record,
                },
                called.value,
            )
        }
    };

    let mut trace = RefinementTrace {
        id: input.id.clone(),
        image: input.image.clone(),
        initial,
        captions: vec![c0],
        reconstructions: Vec::new(),
        analyses: Vec::new(),
        steps: Vec::new(),
        endpoints: clients.identities(&required_roles(config, supplied.is_some())),
        config: *config,
        status: TraceStatus::InProgress,
        early_stopped: false,
        timing,
    };
    persist(&trace)?;

    for _ in 0..config.n_iterations {
        if opts.cancel.is_some_and(|c| c.load(Ordering::SeqCst)) {
            trace.status = TraceStatus::Interrupted;
            trace.timing.finished_at_ms = now_ms();
            persist(&trace)?;
            return Ok(trace);
        }
        let step_start = Instant::now();
        let prev = trace.final_caption().to_string();
        let outcome = match refine_once(clients, &input.image, &prev, opts) {
            Ok(o) => o,
            Err(e) => {
                trace.status = TraceStatus::Failed {
                    error: e.to_string(),
                };
                trace.timing.finished_at_ms = now_ms();
                persist(&trace)?;
                return Err(e);
            }
        };
        let fixed_point = !outcome.record.degenerate && outcome.revised == prev;
        trace.captions.push(outcome.revised);
        trace.reconstructions.push(outcome.reconstruction);
        trace.analyses.push(outcome.analysis);
        trace.steps.push(outcome.record);
        trace.timing.calls.extend(outcome.timings);
        trace
            .timing
            .step_latencies_ms
            .push(step_start.elapsed().as_millis() as u64);
        if config.early_stop_on_fixed_point && fixed_point {
            trace.early_stopped = true;
            break;
        }
        if trace.n_completed() < config.n_iterations as usize {
            persist(&trace)?;
        }
    }
    trace.status = TraceStatus::Complete;
    trace.timing.finished_at_ms = now_ms();
    persist(&trace)?;
    Ok(trace)
}

/// Checks that every reconstruction was requested from the caption before
/// it and every revise request embedded that caption and the images in
/// (original, reconstruction) order. Needs the blobs to rebuild requests.
pub fn check_bookkeeping(
    trace: &RefinementTrace,
    clients: &Clients,
    templates: &PromptTemplates,
) -> Result<(), String> {
    trace.check_shape().map_err(|e| e.to_string())?;
    let store = clients.store();
    let blob = |image: &ImageRef| {
        store
            .get_blob(&image.hash)
            .map_err(|e| format!("unresolvable image {}: {e}", image.short()))
    };
    let original = blob(&trace.image)?;
    for (i, step) in trace.steps.iter().enumerate() {
        let caption = &trace.captions[i];
        let expected = canonical_hash(&t2i_body(caption, trace.config.seed));
        if step.reconstruction.request_hash != expected {
            return Err(format!("step {}: reconstruction not requested from caption {i}", i + 1));
        }
        let recon = &trace.reconstructions[i];
        match &step.reconstruction.output {
            CallOutput::Image { image } if image == recon => {}
            _ => return Err(format!("step {}: reconstruction output mismatch", i + 1)),
        }
        let recon_bytes = blob(recon)?;
        let reviser = clients.endpoint(Role::Reviser).map_err(|e| e.to_string())?;
        let prompt = templates.render_refinement(caption, &trace.config.variant);
        let body = chat_body(
            &reviser.config.model_name,
            &prompt,
            &[(&trace.image, &original), (recon, &recon_bytes)],
        );
        let expected = canonical_hash(&body);
        if step.revisions.is_empty() {
            return Err(format!("step {}: no revise call recorded", i + 1));
        }
        if let Some(bad) = step
            .revisions
            .iter()
            .find(|r: &&CallRecord| r.request_hash != expected)
        {
            return Err(format!(
                "step {}: revise request {} does not embed caption {i}",
                i + 1,
                bad.request_hash
            ));
        }
    }
    Ok(())
}
