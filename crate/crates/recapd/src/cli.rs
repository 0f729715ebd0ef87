//! Command-line interface. [`run`] returns the process exit code so the
//! whole CLI can be driven in-process by tests.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::OnceLock;

use clap::{Args, Parser, Subcommand};
use recap_core::pairs::{build_preference_pairs, export_pairs, ExportMeta, SkipReason};
use recap_core::prompt::PromptTemplates;
use recap_core::trace::TraceStatus;
use recap_core::{RefinementTrace, Role};

use crate::batch::{run_batch, BatchOptions};
use crate::client::Clients;
use crate::config::{CliConfig, DEFAULT_CONFIG_PATH};
use crate::eval_io::{self, QaSource};
use crate::exit::{self, ExitClass};
use crate::mock_server::{load_fixtures, MockServer};
use crate::refine::{run_refinement, RefineInput, RefineOptions};
use crate::store::{validate_id, Store, StoreError};

#[derive(Debug, Parser)]
#[command(name = "recapd", version, about = "Refine image captions by reconstruct-and-revise loops")]
pub struct Cli {
    /// Config file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Store root; overrides the config file.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    /// Bypass the response cache for this invocation.
    #[arg(long, global = true)]
    pub no_cache: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Refine the caption of a single image.
    Refine(RefineArgs),
    /// Refine every image in a JSON-lines manifest (resumable).
    Batch(BatchArgs),
    /// Export DPO preference pairs from a run.
    ExportDpo(ExportArgs),
    /// Score captions against annotation files.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Summarize runs, or one run's traces, as text tables.
    Report(ReportArgs),
    /// Serve canned responses over HTTP.
    MockServe(MockServeArgs),
    /// Manage the response cache.
    #[command(subcommand)]
    Cache(CacheCommand),
}

#[derive(Debug, Clone, Args)]
pub struct LoopFlags {
    /// Number of reconstruct-and-revise steps.
    #[arg(long)]
    pub iterations: Option<u32>,
    /// Initial-captioning prompt (1, 2 or 3).
    #[arg(long)]
    pub prompt_id: Option<u8>,
    /// Omit the comparison guidelines from the refinement prompt.
    #[arg(long)]
    pub no_tips: bool,
    /// Do not ask the reviser for an analysis.
    #[arg(long)]
    pub no_analysis: bool,
    /// Stop when a step returns its input caption unchanged.
    #[arg(long)]
    pub early_stop: bool,
    /// Seed passed to the text-to-image endpoint.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Re-asks after an unparseable reviser response.
    #[arg(long)]
    pub parse_retries: Option<u32>,
    /// Fail instead of carrying the caption over when the reviser output
    /// cannot be parsed.
    #[arg(long)]
    pub strict_parse: bool,
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    pub image: PathBuf,
    /// Item id (defaults to a prefix of the image hash).
    #[arg(long)]
    pub id: Option<String>,
    /// Use this initial caption instead of calling the captioner.
    #[arg(long)]
    pub init_caption: Option<String>,
    #[arg(long, default_value = "adhoc")]
    pub run_id: String,
    #[command(flatten)]
    pub flags: LoopFlags,
}

#[derive(Debug, Args)]
pub struct BatchArgs {
    pub manifest: PathBuf,
    #[arg(long)]
    pub run_id: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub parallelism: usize,
    /// Exit non-zero when any item fails.
    #[arg(long)]
    pub strict: bool,
    #[command(flatten)]
    pub flags: LoopFlags,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    pub run_id: String,
    /// Output JSON-lines file; images go to `images/` beside it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<u32>,
    #[arg(long)]
    pub cutoff_len: Option<u32>,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Yes/no/n-a question accuracy.
    Qa {
        #[arg(long)]
        items: PathBuf,
        /// JSON array of answers aligned with the items.
        #[arg(long, conflicts_with = "captions", required_unless_present = "captions")]
        predictions: Option<PathBuf>,
        /// JSON object image key → caption; the judge answers.
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Object hallucination (CHAIR), coverage and Cover − CHAIR.
    Amber {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Scene-graph object/pixel coverage, optionally judged attributes and relations.
    Comprecap {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        judge: bool,
        #[arg(long)]
        scale_max: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Element-set matching with weighted F1.
    Capture {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        synonyms: Option<PathBuf>,
        #[arg(long)]
        soft_threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run to render; without it, runs are listed.
    pub run_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct MockServeArgs {
    #[arg(long, default_value_t = 8089)]
    pub port: u16,
    #[arg(long)]
    pub fixtures: PathBuf,
    /// Answer unknown requests with the deterministic mock instead of 404.
    #[arg(long)]
    pub generate: bool,
}

#[derive(Debug, Subcommand)]
pub enum CacheCommand {
    /// Delete cached responses, optionally only for one role and/or model.
    Purge {
        #[arg(long)]
        role: Option<Role>,
        #[arg(long)]
        model: Option<String>,
    },
}

/// Error with its exit class, printed once at the top level.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl<E: ExitClass + std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

fn failure(code: i32, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

type CmdResult = Result<i32, Failure>;

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

fn interrupt_flag() -> &'static AtomicBool {
    static INSTALLED: OnceLock<()> = OnceLock::new();
    INSTALLED.get_or_init(|| {
        if let Err(e) = ctrlc::set_handler(|| INTERRUPTED.store(true, Ordering::SeqCst)) {
            log::warn!("cannot install interrupt handler: {e}");
        }
    });
    &INTERRUPTED
}

/// Parses `args` (including the program name) and runs the command,
/// writing human output to `out`. Returns the exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => exit::OK,
                _ => exit::USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli, out) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

struct Context {
    config: CliConfig,
    templates: PromptTemplates,
}

impl Context {
    fn load(cli: &Cli) -> Result<Self, Failure> {
        let (path, explicit) = match &cli.config {
            Some(p) => (p.clone(), true),
            None => (PathBuf::from(DEFAULT_CONFIG_PATH), false),
        };
        let mut config = CliConfig::load(&path, explicit)?;
        if let Some(store) = &cli.store {
            config.store = store.clone();
        }
        if cli.no_cache {
            config.cache = false;
        }
        let templates = match &config.templates_dir {
            Some(dir) => PromptTemplates::from_dir(dir).map_err(|e| failure(exit::CONFIG, e.to_string()))?,
            None => PromptTemplates::default(),
        };
        Ok(Self { config, templates })
    }

    fn store(&self) -> Result<Store, Failure> {
        Ok(Store::open(&self.config.store)?)
    }

    fn clients(&self) -> Result<Clients, Failure> {
        Ok(Clients::from_config(&self.config, self.store()?)?)
    }

    fn apply(&mut self, flags: &LoopFlags) -> Result<(), Failure> {
        let r = &mut self.config.refine;
        if let Some(n) = flags.iterations {
            r.n_iterations = n;
        }
        if let Some(id) = flags.prompt_id {
            r.initial_prompt_id = id;
        }
        if flags.no_tips {
            r.variant.include_tips = false;
        }
        if flags.no_analysis {
            r.variant.require_analysis = false;
        }
        if flags.early_stop {
            r.early_stop_on_fixed_point = true;
        }
        if let Some(seed) = flags.seed {
            r.seed = Some(seed);
        }
        if let Some(n) = flags.parse_retries {
            r.retry_on_parse_failure = n;
        }
        self.config.validate_refine().map_err(|e| failure(exit::USAGE, e.to_string()))
    }
}

fn execute(cli: Cli, out: &mut dyn Write) -> CmdResult {
    let mut ctx = Context::load(&cli)?;
    match cli.command {
        Command::Refine(args) => cmd_refine(&mut ctx, args, out),
        Command::Batch(args) => cmd_batch(&mut ctx, args, out),
        Command::ExportDpo(args) => cmd_export(&ctx, args, out),
        Command::Eval(cmd) => cmd_eval(&ctx, cmd, out),
        Command::Report(args) => cmd_report(&ctx, args, out),
        Command::MockServe(args) => cmd_mock_serve(args, out),
        Command::Cache(CacheCommand::Purge { role, model }) => {
            let n = ctx.store()?.purge_cache(role, model.as_deref())?;
            emit(out, format!("purged {n} cache entries"))?;
            Ok(exit::OK)
        }
    }
}

fn emit(out: &mut dyn Write, text: impl AsRef<str>) -> Result<(), Failure> {
    writeln!(out, "{}", text.as_ref()).map_err(|e| failure(exit::CONFIG, format!("writing output: {e}")))
}

fn cmd_refine(ctx: &mut Context, args: RefineArgs, out: &mut dyn Write) -> CmdResult {
    ctx.apply(&args.flags)?;
    validate_id(&args.run_id)?;
    let bytes = std::fs::read(&args.image)
        .map_err(|e| failure(exit::CONFIG, format!("cannot read image {}: {e}", args.image.display())))?;
    let clients = ctx.clients()?;
    let image = clients.store().put_image(&bytes)?;
    let id = args.id.unwrap_or_else(|| format!("img-{}", image.short()));
    validate_id(&id)?;
    let input = RefineInput {
        id,
        image,
        init_caption: args.init_caption,
    };
    let opts = RefineOptions {
        config: &ctx.config.refine,
        templates: &ctx.templates,
        strict_parse: args.flags.strict_parse,
        cancel: Some(interrupt_flag()),
    };
    let store = clients.store();
    store.init_run(&crate::store::RunMeta {
        run_id: args.run_id.clone(),
        created_at_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_millis() as u64),
        manifest: None,
        manifest_sha256: None,
        config: ctx.config.refine,
    })?;
    let mut persist = |t: &RefinementTrace| store.save_trace(&args.run_id, t).map(drop);
    let trace = run_refinement(&clients, &input, &opts, &mut persist)?;
    emit(out, trace.final_caption())?;
    emit(out, format!("trace: {}", store.trace_path(&args.run_id, &trace.id).display()))?;
    Ok(match trace.status {
        TraceStatus::Interrupted => exit::REMOTE,
        _ => exit::OK,
    })
}

fn cmd_batch(ctx: &mut Context, args: BatchArgs, out: &mut dyn Write) -> CmdResult {
    ctx.apply(&args.flags)?;
    if let Some(id) = &args.run_id {
        validate_id(id)?;
    }
    let clients = ctx.clients()?;
    let opts = BatchOptions {
        run_id: args.run_id,
        parallelism: args.parallelism,
        strict_parse: args.flags.strict_parse,
        cancel: Some(interrupt_flag()),
    };
    let report = run_batch(&clients, &args.manifest, &ctx.config.refine, &ctx.templates, &opts)?;
    emit(out, report.summary())?;
    for item in report.items.iter().filter(|i| i.error.is_some()) {
        emit(out, format!("failed {}: {}", item.id, item.error.as_deref().unwrap_or_default()))?;
    }
    if report.interrupted {
        return Ok(exit::REMOTE);
    }
    match report.first_failure_code() {
        Some(code) if args.strict => Ok(code),
        _ => Ok(exit::OK),
    }
}

fn load_run_traces(store: &Store, run_id: &str) -> Result<Vec<RefinementTrace>, Failure> {
    store
        .list_traces(run_id)?
        .iter()
        .map(|id| store.load_trace(run_id, id).map_err(Failure::from))
        .collect()
}

fn cmd_export(ctx: &Context, args: ExportArgs, out: &mut dyn Write) -> CmdResult {
    let store = ctx.store()?;
    let traces = load_run_traces(&store, &args.run_id)?;
    let build = build_preference_pairs(&traces);
    let mut hyper = ctx.config.dpo;
    if let Some(b) = args.beta {
        if !(b > 0.0 && b.is_finite()) {
            return Err(failure(exit::USAGE, format!("--beta must be positive, got {b}")));
        }
        hyper.beta = b;
    }
    if let Some(e) = args.epochs {
        hyper.epochs = e;
    }
    if let Some(c) = args.cutoff_len {
        hyper.cutoff_len = c;
    }
    let meta = ExportMeta {
        hyperparams: hyper,
        pairs: build.pairs.len(),
        skipped: build.skipped.len(),
        source_run: Some(args.run_id.clone()),
    };
    export_pairs(&build.pairs, &args.out, &store, &meta).map_err(|e| failure(exit::CONFIG, e.to_string()))?;
    emit(out, format!("{} pairs written, {} skipped", build.pairs.len(), build.skipped.len()))?;
    for reason in [SkipReason::FixedPoint, SkipReason::AllDegenerate, SkipReason::Incomplete] {
        let n = build.skipped.iter().filter(|s| s.reason == reason).count();
        if n > 0 {
            emit(out, format!("  {reason:?}: {n}"))?;
        }
    }
    Ok(exit::OK)
}

fn cmd_eval(ctx: &Context, cmd: EvalCommand, out: &mut dyn Write) -> CmdResult {
    let defaults = &ctx.config.eval;
    let (report, out_path, transcripts) = match cmd {
        EvalCommand::Qa { items, predictions, captions, out } => {
            let report = match (predictions, captions) {
                (Some(p), _) => eval_io::eval_qa(&items, QaSource::Predictions(&p), &ctx.templates)?,
                (None, Some(c)) => {
                    let clients = ctx.clients()?;
                    clients.require(&[Role::Judge])?;
                    eval_io::eval_qa(&items, QaSource::Captions(&c, &clients), &ctx.templates)?
                }
                (None, None) => return Err(failure(exit::USAGE, "--predictions or --captions is required")),
            };
            (report, out, None)
        }
        EvalCommand::Amber { annotations, out } => (eval_io::eval_amber(&annotations)?, out, None),
        EvalCommand::Comprecap { annotations, judge, scale_max, out } => {
            let clients = if judge {
                let c = ctx.clients()?;
                c.require(&[Role::Judge])?;
                Some(c)
            } else {
                None
            };
            let scale = scale_max.unwrap_or(defaults.scale_max);
            let (report, t) = eval_io::eval_comprecap(&annotations, clients.as_ref(), &ctx.templates, scale)?;
            (report, out, judge.then_some(t))
        }
        EvalCommand::Capture { candidates, references, synonyms, soft_threshold, out } => {
            let mut d = defaults.clone();
            if let Some(t) = soft_threshold {
                d.soft_threshold = t;
            }
            (eval_io::eval_capture(&candidates, &references, synonyms.as_deref(), &d)?, out, None)
        }
    };
    let path = match out_path {
        Some(p) => p,
        None => eval_io::default_report_path(ctx.store()?.root(), &report),
    };
    let written = eval_io::write_report(&report, &path)?;
    if let Some(t) = transcripts {
        let side = path.with_extension("transcripts.json");
        let text = serde_json::to_string_pretty(&t).expect("transcripts serialize") + "\n";
        crate::store::write_atomic(&side, text.as_bytes())?;
    }
    write!(out, "{}", report.render_table()).map_err(|e| failure(exit::CONFIG, e.to_string()))?;
    for note in &report.notes {
        emit(out, format!("note: {note}"))?;
    }
    emit(out, eval_io::headline_line(&report))?;
    emit(out, format!("report: {}", written[0].display()))?;
    Ok(exit::OK)
}

/// Deterministic text rendering of one run's traces.
pub fn render_run_report(run_id: &str, traces: &[RefinementTrace]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "run {run_id}: {} trace(s)", traces.len());
    let id_w = traces.iter().map(|t| t.id.len()).chain([4]).max().unwrap_or(4);
    let _ = writeln!(
        s,
        "{:<id_w$}  {:<11}  {:>5}  {:>10}  {:>7}  {:>7}  {:>7}",
        "item", "status", "steps", "degenerate", "changed", "words0", "wordsN"
    );
    let words = |c: &str| c.split_whitespace().count();
    for t in traces {
        let status = match &t.status {
            TraceStatus::Complete => "complete",
            TraceStatus::Failed { .. } => "failed",
            TraceStatus::Interrupted => "interrupted",
            TraceStatus::InProgress => "in_progress",
        };
        let _ = writeln!(
            s,
            "{:<id_w$}  {:<11}  {:>5}  {:>10}  {:>7}  {:>7}  {:>7}",
            t.id,
            status,
            t.n_completed(),
            t.steps.iter().filter(|st| st.degenerate).count(),
            if t.final_caption() != t.initial_caption() { "yes" } else { "no" },
            words(t.initial_caption()),
            words(t.final_caption()),
        );
    }
    let complete = traces.iter().filter(|t| t.is_complete()).count();
    let changed = traces
        .iter()
        .filter(|t| t.is_complete() && t.final_caption() != t.initial_caption())
        .count();
    let _ = writeln!(s, "\ncomplete: {complete}\nchanged: {changed}");
    if complete > 0 {
        let mean = |f: &dyn Fn(&RefinementTrace) -> usize| {
            traces.iter().filter(|t| t.is_complete()).map(f).sum::<usize>() as f64 / complete as f64
        };
        let _ = writeln!(
            s,
            "mean words: initial {:.2}, final {:.2}",
            mean(&|t| words(t.initial_caption())),
            mean(&|t| words(t.final_caption()))
        );
    }
    for t in traces {
        let _ = writeln!(s, "\n== {} (image {})", t.id, t.image.short());
        for (i, c) in t.captions.iter().enumerate() {
            let _ = writeln!(s, "c{i}: {c}");
            if let Some(Some(a)) = t.analyses.get(i) {
                let _ = writeln!(s, "   analysis {}: {a}", i + 1);
            }
        }
        if let TraceStatus::Failed { error } = &t.status {
            let _ = writeln!(s, "error: {error}");
        }
    }
    s
}

fn cmd_report(ctx: &Context, args: ReportArgs, out: &mut dyn Write) -> CmdResult {
    let store = ctx.store()?;
    match args.run_id {
        Some(run_id) => {
            let traces = load_run_traces(&store, &run_id)?;
            write!(out, "{}", render_run_report(&run_id, &traces)).map_err(|e| failure(exit::CONFIG, e.to_string()))?;
        }
        None => {
            let runs = store.list_runs()?;
            emit(out, format!("{} run(s)", runs.len()))?;
            for run in runs {
                let n = store.list_traces(&run.run_id).map(|t| t.len()).unwrap_or(0);
                let summary = match store.load_report(&run.run_id) {
                    Ok(r) => format!("completed {}/{}, failed {}", r.completed, r.total, r.failed),
                    Err(StoreError::NotFound(_)) => "no batch report".to_string(),
                    Err(e) => return Err(e.into()),
                };
                emit(out, format!("{}  traces {n}  {summary}", run.run_id))?;
            }
        }
    }
    Ok(exit::OK)
}

fn cmd_mock_serve(args: MockServeArgs, out: &mut dyn Write) -> CmdResult {
    let fixtures = load_fixtures(&args.fixtures)?;
    let server = MockServer::start(args.port, fixtures, args.generate)?;
    emit(out, format!("listening on http://{}", server.addr()))?;
    out.flush().ok();
    server.join();
    Ok(exit::OK)
}
