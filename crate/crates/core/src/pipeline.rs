//! Resumable pipeline stages over a run directory.
//!
//! Layout of a run directory:
//!
//! ```text
//! run_dir/
//!   manifest.lock            config hash and resolved inputs
//!   coarse/<id>.json         anchor-based curves at the sampled rate
//!   mllm/<id>.json           stitched step curves
//!   mllm/<id>.verdicts.jsonl per-segment verdicts of one video
//!   mllm/verdicts.jsonl      all verdicts, manifest order
//!   fused/<id>.json|.csv     fused curves at the native rate
//!   prompts/<task>.json      best candidate of an optimization run
//!   prompts/<task>.state.json  resumable optimizer state
//!   history/<task>.jsonl|.csv  optimization history and learning curve
//!   report/report.json       evaluation report
//!   report/video_scores.csv  per-video scores
//! ```
//!
//! Every file is written atomically. Each stage is a pure function of the
//! config, its upstream artifacts and the seed.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ape::{
    self, history_jsonl, learning_curve_csv, optimize, seed_state, select_vau_subset, AnchorEvaluator, ApeError,
    FitnessEvaluator, GenerationStatus, HistoryRecord, OptimizerConfig, OptimizerState, PromptCandidate, Task,
    VauEvaluator, VauSample,
};
use crate::assets::{prompts, PromptSet};
use crate::corpus::{load_manifest, CorpusError, Label, Manifest, MockEncoder, ServiceEncoder, Split, TextEncoder, VideoRecord};
use crate::gateway::{Gateway, GatewayConfig, GatewayError, RetryPolicy};
use crate::hashing::{prompt_hash, sha256_hex};
use crate::metrics::{
    all_category_aucs, frame_eval, frame_report, materialize_native, pearson, semantic_similarity, FrameReport,
    MetricError,
};
use crate::par::{with_jobs, Exec};
use crate::refiner::{refine_video, ParseIssue, RefineError, RefineRequest, RefineRunError, VauPrompts, VerdictRecord, MAX_SEGMENT_S};
use crate::scorer::{aggregate_video, score_frames, Aggregator, AnchorPair, AnomalyCurve, InjectionLevel, ScoreError};
use crate::signal::{fuse_average, gaussian_smooth, to_csv, upsample, SignalError, Upsampler};

pub const LOCK_FILE: &str = "manifest.lock";
pub const STAGE_DIRS: [&str; 6] = ["coarse", "mllm", "fused", "prompts", "history", "report"];
const INPUTS_FILE: &str = "inputs.json";

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing upstream stage '{stage}': {detail}")]
    MissingStage { stage: &'static str, detail: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Ape(#[from] ApeError),
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl PipelineError {
    /// Process exit code: 2 for config errors, 3 for a missing upstream
    /// stage, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::MissingStage { .. } => 3,
            _ => 1,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io { path: path.to_path_buf(), source }
    }

    fn json(path: &Path, source: serde_json::Error) -> Self {
        PipelineError::Json { path: path.to_path_buf(), source }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

/// Built-in prompt sets, or the result of an optimization run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamedPrompts {
    Base,
    Optimized,
    OptimizedXd,
    /// `prompts/<task>.json` of the current run.
    Run,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptChoice {
    Named(NamedPrompts),
    Inline {
        #[serde(alias = "normal", alias = "system")]
        a: String,
        #[serde(alias = "abnormal", alias = "user")]
        b: String,
    },
}

impl PromptChoice {
    fn optimized() -> Self {
        PromptChoice::Named(NamedPrompts::Optimized)
    }

    fn base() -> Self {
        PromptChoice::Named(NamedPrompts::Base)
    }

    /// Resolves to (field_a, field_b) for `task`.
    pub fn resolve(&self, task: Task, layout: &RunLayout) -> Result<(String, String)> {
        let set = match self {
            PromptChoice::Inline { a, b } => return Ok((a.clone(), b.clone())),
            PromptChoice::Named(NamedPrompts::Run) => {
                let path = layout.best_prompt(task);
                if !path.exists() {
                    return Err(PipelineError::MissingStage {
                        stage: "prompts",
                        detail: format!("{} not found; run optimize-{} first", path.display(), task.as_str()),
                    });
                }
                let c: PromptCandidate = read_json(&path)?;
                return Ok((c.field_a, c.field_b));
            }
            PromptChoice::Named(NamedPrompts::Base) => PromptSet::Base,
            PromptChoice::Named(NamedPrompts::Optimized) => PromptSet::Optimized,
            PromptChoice::Named(NamedPrompts::OptimizedXd) => PromptSet::OptimizedXd,
        };
        let (a, b) = prompts(task, set);
        Ok((a.to_string(), b.to_string()))
    }
}

/// Per-task overrides of the optimizer defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerPatch {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub population: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub archive_capacity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patience: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_temperature: Option<f64>,
    /// Starting candidate of the search.
    #[serde(default = "PromptChoice::base")]
    pub initial: PromptChoice,
}

impl Default for OptimizerPatch {
    fn default() -> Self {
        Self {
            iterations: None,
            population: None,
            archive_capacity: None,
            patience: None,
            generation_temperature: None,
            initial: PromptChoice::base(),
        }
    }
}

impl OptimizerPatch {
    pub fn resolve(&self, task: Task, seed: u64) -> OptimizerConfig {
        let d = OptimizerConfig::defaults(task);
        OptimizerConfig {
            iterations: self.iterations.unwrap_or(d.iterations),
            population: self.population.unwrap_or(d.population),
            archive_capacity: self.archive_capacity.unwrap_or(d.archive_capacity),
            patience: self.patience.unwrap_or(d.patience),
            generation_temperature: self.generation_temperature.unwrap_or(d.generation_temperature),
            seed,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default)]
    pub anchors: OptimizerPatch,
    #[serde(default)]
    pub vau: OptimizerPatch,
}

/// Evaluation subset for VAU prompt fitness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VauEvalConfig {
    #[serde(default = "default_per_category")]
    pub per_category: usize,
    #[serde(default = "default_eval_level")]
    pub injection_level: InjectionLevel,
}

impl Default for VauEvalConfig {
    fn default() -> Self {
        Self { per_category: default_per_category(), injection_level: default_eval_level() }
    }
}

fn default_per_category() -> usize {
    3
}

fn default_eval_level() -> InjectionLevel {
    InjectionLevel::None
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum EncoderSpec {
    /// Hash-based stand-in; `dim` defaults to the manifest's.
    Mock {
        #[serde(default)]
        dim: Option<usize>,
    },
    Service {
        url: String,
        #[serde(default)]
        dim: Option<usize>,
        #[serde(default = "default_encoder_timeout")]
        timeout_s: f64,
        #[serde(default)]
        retry: RetryPolicy,
    },
}

fn default_encoder_timeout() -> f64 {
    60.0
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec::Mock { dim: None }
    }
}

impl EncoderSpec {
    pub fn build(&self, store_dim: usize) -> Result<Arc<dyn TextEncoder>> {
        Ok(match self {
            EncoderSpec::Mock { dim } => Arc::new(MockEncoder::new(dim.unwrap_or(store_dim))?),
            EncoderSpec::Service { url, dim, timeout_s, retry } => Arc::new(ServiceEncoder::new(
                url.clone(),
                dim.unwrap_or(store_dim),
                Duration::from_secs_f64(*timeout_s),
                *retry,
            )),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Backends {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub llm: Option<GatewayConfig>,
    #[serde(default)]
    pub encoder: EncoderSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_manifest: PathBuf,
    pub run_dir: PathBuf,
    #[serde(default = "default_tau")]
    pub tau: f64,
    #[serde(default = "default_sigma_coarse")]
    pub sigma_coarse: f64,
    #[serde(default = "default_sigma_mllm")]
    pub sigma_mllm: f64,
    #[serde(default = "default_threshold")]
    pub f1_threshold: f64,
    /// Threshold defining the temporal region of the coarse prior.
    #[serde(default = "default_threshold")]
    pub prior_threshold: f64,
    #[serde(default)]
    pub injection_level: InjectionLevel,
    #[serde(default)]
    pub upsampler: Upsampler,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "PromptChoice::optimized")]
    pub anchors: PromptChoice,
    #[serde(default = "PromptChoice::optimized")]
    pub vau_prompts: PromptChoice,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub vau_eval: VauEvalConfig,
    /// Per-category AUC pools include the normal test videos.
    #[serde(default = "default_true")]
    pub include_normals: bool,
    #[serde(default)]
    pub backends: Backends,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jobs: Option<usize>,
    /// JSON object mapping video ids to reference descriptions.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_descriptions: Option<PathBuf>,
    /// Directory relative paths resolve against (the config file's).
    #[serde(skip)]
    pub root: PathBuf,
}

fn default_tau() -> f64 {
    crate::scorer::DEFAULT_TAU
}
fn default_sigma_coarse() -> f64 {
    crate::signal::SIGMA_COARSE
}
fn default_sigma_mllm() -> f64 {
    crate::signal::SIGMA_MLLM
}
fn default_threshold() -> f64 {
    0.5
}
fn default_true() -> bool {
    true
}

impl RunConfig {
    /// Minimal config with every default applied.
    pub fn new(dataset_manifest: impl Into<PathBuf>, run_dir: impl Into<PathBuf>) -> Self {
        let v = serde_json::json!({
            "dataset_manifest": dataset_manifest.into(),
            "run_dir": run_dir.into(),
        });
        serde_json::from_value(v).expect("defaults deserialize")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        cfg.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        for (name, s) in [("sigma_coarse", self.sigma_coarse), ("sigma_mllm", self.sigma_mllm)] {
            if !(s > 0.0 && s.is_finite()) {
                return bad(format!("{name} must be positive, got {s}"));
            }
        }
        for (name, t) in [("f1_threshold", self.f1_threshold), ("prior_threshold", self.prior_threshold)] {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("{name} must lie in [0, 1], got {t}"));
            }
        }
        if self.jobs == Some(0) {
            return bad("jobs must be at least 1".into());
        }
        for (task, p) in [(Task::Anchors, &self.optimizer.anchors), (Task::Vau, &self.optimizer.vau)] {
            p.resolve(task, self.seed).validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        let manifest = self.manifest_path();
        if !manifest.is_file() {
            return bad(format!("dataset manifest {} not found", manifest.display()));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.resolve(&self.dataset_manifest)
    }

    pub fn layout(&self) -> RunLayout {
        RunLayout::new(self.resolve(&self.run_dir))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn gateway(&self) -> Result<Gateway> {
        let llm = self
            .backends
            .llm
            .as_ref()
            .ok_or_else(|| PipelineError::Config("backends.llm is not configured".into()))?;
        llm.build(&self.root).map_err(|e| PipelineError::Config(format!("llm backend: {e}")))
    }
}

/// Paths inside a run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn stage(&self, stage: &str) -> PathBuf {
        self.root.join(stage)
    }

    pub fn curve(&self, stage: &str, id: &str) -> PathBuf {
        self.stage(stage).join(format!("{id}.json"))
    }

    pub fn video_verdicts(&self, id: &str) -> PathBuf {
        self.stage("mllm").join(format!("{id}.verdicts.jsonl"))
    }

    pub fn verdicts(&self) -> PathBuf {
        self.stage("mllm").join("verdicts.jsonl")
    }

    pub fn best_prompt(&self, task: Task) -> PathBuf {
        self.stage("prompts").join(format!("{}.json", task.as_str()))
    }

    pub fn optimizer_state(&self, task: Task) -> PathBuf {
        self.stage("prompts").join(format!("{}.state.json", task.as_str()))
    }

    pub fn history(&self, task: Task) -> PathBuf {
        self.stage("history").join(format!("{}.jsonl", task.as_str()))
    }

    pub fn learning_curve(&self, task: Task) -> PathBuf {
        self.stage("history").join(format!("{}.csv", task.as_str()))
    }

    pub fn report(&self) -> PathBuf {
        self.stage("report").join("report.json")
    }

    pub fn video_scores(&self) -> PathBuf {
        self.stage("report").join("video_scores.csv")
    }

    pub fn lock(&self) -> PathBuf {
        self.root.join(LOCK_FILE)
    }
}

/// Contents of `manifest.lock`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLock {
    pub config_hash: String,
    pub dataset_manifest: PathBuf,
    /// Directory the config's relative paths resolve against.
    pub config_root: PathBuf,
    pub config: RunConfig,
}

impl RunLock {
    pub fn load(layout: &RunLayout) -> Result<Self> {
        let path = layout.lock();
        if !path.exists() {
            return Err(PipelineError::MissingStage { stage: "run", detail: format!("{} not found", path.display()) });
        }
        read_json(&path)
    }

    /// The locked config with its root restored.
    pub fn run_config(&self) -> RunConfig {
        RunConfig { root: self.config_root.clone(), ..self.config.clone() }
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| PipelineError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| PipelineError::io(path, e))?;
    tmp.persist(path).map_err(|e| PipelineError::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| PipelineError::json(path, e))?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| PipelineError::json(path, e))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| PipelineError::json(path, e)))
        .collect()
}

pub fn write_curve(path: &Path, curve: &AnomalyCurve) -> Result<()> {
    let bytes = serde_json::to_vec(curve).map_err(|e| PipelineError::json(path, e))?;
    write_atomic(path, &bytes)
}

pub fn read_curve(path: &Path) -> Result<AnomalyCurve> {
    let c: AnomalyCurve = read_json(path)?;
    c.validate()?;
    Ok(c)
}

/// Loads the curves of `stage` for `records`, failing with a
/// missing-stage error naming the first absent video.
pub fn load_stage_curves(
    layout: &RunLayout,
    stage: &'static str,
    records: &[&VideoRecord],
) -> Result<HashMap<String, AnomalyCurve>> {
    let mut out = HashMap::with_capacity(records.len());
    for r in records {
        let path = layout.curve(stage, &r.id);
        if !path.exists() {
            return Err(PipelineError::MissingStage {
                stage,
                detail: format!("no {stage} curve for video '{}'", r.id),
            });
        }
        out.insert(r.id.clone(), read_curve(&path)?);
    }
    Ok(out)
}

/// Command-line level options shared by all stages.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageOptions {
    pub force: bool,
    pub jobs: Option<usize>,
    pub exec: Exec,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub computed: usize,
    pub skipped: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub notes: BTreeMap<String, f64>,
}

impl std::fmt::Display for StageSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {} computed, {} skipped", self.stage, self.computed, self.skipped)?;
        for (k, v) in &self.notes {
            write!(f, ", {k}={v}")?;
        }
        Ok(())
    }
}

struct Ctx {
    cfg: RunConfig,
    manifest: Manifest,
    layout: RunLayout,
    opts: StageOptions,
}

impl Ctx {
    fn open(cfg: &RunConfig, opts: StageOptions) -> Result<Self> {
        let manifest = load_manifest(cfg.manifest_path()).map_err(|e| PipelineError::Config(e.to_string()))?;
        let layout = cfg.layout();
        let ctx = Self { cfg: cfg.clone(), manifest, layout, opts };
        ctx.ensure_lock()?;
        Ok(ctx)
    }

    fn ensure_lock(&self) -> Result<()> {
        let path = self.layout.lock();
        let lock = RunLock {
            config_hash: self.cfg.hash(),
            dataset_manifest: self.cfg.manifest_path(),
            config_root: self.cfg.root.clone(),
            config: self.cfg.clone(),
        };
        if path.exists() {
            match read_json::<RunLock>(&path) {
                Ok(old) if old.config_hash == lock.config_hash => return Ok(()),
                Ok(_) if !self.opts.force => {
                    log::warn!("config differs from the one recorded in {}; keeping existing lock", path.display());
                    return Ok(());
                }
                _ => {}
            }
        }
        write_json(&path, &lock)
    }

    fn records(&self) -> Vec<&VideoRecord> {
        self.manifest.videos.iter().collect()
    }

    fn split(&self, split: Split) -> Vec<&VideoRecord> {
        self.manifest.split(split).collect()
    }

    /// True when the recorded fingerprint of `stage` matches; rewrites it
    /// otherwise.
    fn fingerprint_matches(&self, stage: &str, fingerprint: &str) -> Result<bool> {
        let path = self.layout.stage(stage).join(INPUTS_FILE);
        let same = fs::read_to_string(&path).ok().and_then(|t| serde_json::from_str::<String>(&t).ok())
            == Some(fingerprint.to_string());
        if !same {
            write_json(&path, fingerprint)?;
        }
        Ok(same)
    }
}

fn run_staged<T: Send>(cfg: &RunConfig, opts: StageOptions, f: impl FnOnce(&Ctx) -> Result<T> + Send) -> Result<T> {
    let ctx = Ctx::open(cfg, opts)?;
    with_jobs(opts.jobs.or(cfg.jobs), || f(&ctx))
}

/// Scores every video against the configured anchors.
pub fn cmd_score_coarse(cfg: &RunConfig, opts: StageOptions) -> Result<StageSummary> {
    run_staged(cfg, opts, |ctx| {
        let (normal, abnormal) = ctx.cfg.anchors.resolve(Task::Anchors, &ctx.layout)?;
        let encoder = ctx.cfg.backends.encoder.build(ctx.manifest.dim)?;
        let anchors = AnchorPair::new(normal, abnormal)?.resolve(encoder.as_ref())?;
        let fingerprint = format!("{}:{}", prompt_hash(&anchors.normal_text, &anchors.abnormal_text), ctx.cfg.tau);
        let fresh = ctx.fingerprint_matches("coarse", &fingerprint)?;
        let records = ctx.records();
        let done = ctx.opts.exec.try_map(&records, |r| -> Result<bool> {
            let path = ctx.layout.curve("coarse", &r.id);
            if fresh && !ctx.opts.force && path.exists() {
                return Ok(false);
            }
            let emb = ctx.manifest.load_embeddings(r)?;
            let curve = score_frames(&emb, &anchors, ctx.cfg.tau, r.sampled_fps)?;
            write_curve(&path, &curve)?;
            Ok(true)
        })?;
        Ok(count_summary("score-coarse", &done))
    })
}

fn count_summary(stage: &str, done: &[bool]) -> StageSummary {
    let computed = done.iter().filter(|&&d| d).count();
    StageSummary { stage: stage.into(), computed, skipped: done.len() - computed, notes: BTreeMap::new() }
}

/// Queries the multimodal model segment by segment for every video.
pub fn cmd_refine(cfg: &RunConfig, opts: StageOptions) -> Result<StageSummary> {
    run_staged(cfg, opts, |ctx| {
        let (system, user) = ctx.cfg.vau_prompts.resolve(Task::Vau, &ctx.layout)?;
        let prompts = VauPrompts { system, user };
        let level = ctx.cfg.injection_level;
        let records = ctx.records();
        let coarse = if level == InjectionLevel::None {
            HashMap::new()
        } else {
            load_stage_curves(&ctx.layout, "coarse", &records)?
        };
        let gateway = ctx.cfg.gateway()?;
        let fingerprint = format!(
            "{}:{}:{}:{}",
            prompt_hash(&prompts.system, &prompts.user),
            serde_json::to_string(&level).unwrap(),
            ctx.cfg.prior_threshold,
            gateway.backend_name()
        );
        let fresh = ctx.fingerprint_matches("mllm", &fingerprint)?;
        let done = ctx.opts.exec.try_map(&records, |r| -> Result<bool> {
            let curve_path = ctx.layout.curve("mllm", &r.id);
            let log_path = ctx.layout.video_verdicts(&r.id);
            if fresh && !ctx.opts.force && curve_path.exists() && log_path.exists() {
                return Ok(false);
            }
            let req = RefineRequest {
                video_id: &r.id,
                duration_s: r.duration_s,
                rate: r.sampled_fps,
                prompts: &prompts,
                level,
                coarse: coarse.get(&r.id),
                threshold: ctx.cfg.prior_threshold,
                max_segment_s: MAX_SEGMENT_S,
            };
            let out = refine_video(&req, &gateway, ctx.opts.exec, false).map_err(|e| match e {
                RefineRunError::Refine(e) => PipelineError::Refine(e),
                RefineRunError::Gateway { source, .. } => PipelineError::Gateway(source),
            })?;
            let curve = fit_length(out.curve, r.sampled_frame_count());
            write_atomic(&log_path, verdict_jsonl(&out.verdicts).as_bytes())?;
            write_curve(&curve_path, &curve)?;
            Ok(true)
        })?;

        let mut all = String::new();
        let mut notes = VerdictStats::default();
        for r in &records {
            let path = ctx.layout.video_verdicts(&r.id);
            let verdicts: Vec<VerdictRecord> = read_jsonl(&path)?;
            notes.add(&verdicts);
            all.push_str(&verdict_jsonl(&verdicts));
        }
        write_atomic(&ctx.layout.verdicts(), all.as_bytes())?;
        let mut s = count_summary("refine", &done);
        s.notes = notes.as_notes();
        Ok(s)
    })
}

fn verdict_jsonl(v: &[VerdictRecord]) -> String {
    v.iter().map(|r| serde_json::to_string(r).expect("verdict serializes") + "\n").collect()
}

/// Pads with the last value or truncates so a stitched curve matches the
/// video's sample count.
fn fit_length(mut c: AnomalyCurve, n: usize) -> AnomalyCurve {
    let last = c.values.last().copied().unwrap_or(0.0);
    c.values.resize(n, last);
    c
}

/// Counts over a verdict log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VerdictStats {
    pub segments: usize,
    pub present: usize,
    pub parse_failures: usize,
    pub parse_warnings: usize,
    pub gateway_failures: usize,
}

impl VerdictStats {
    fn add(&mut self, verdicts: &[VerdictRecord]) {
        for v in verdicts {
            self.segments += 1;
            self.present += usize::from(v.verdict.present);
            self.gateway_failures += usize::from(v.error.is_some());
            let failed = v.warnings.iter().any(|w| matches!(w, ParseIssue::NoJson | ParseIssue::BadValue | ParseIssue::Incomplete));
            self.parse_failures += usize::from(failed);
            self.parse_warnings += usize::from(!failed && !v.warnings.is_empty());
        }
    }

    fn as_notes(&self) -> BTreeMap<String, f64> {
        [
            ("segments", self.segments),
            ("present", self.present),
            ("parse_failures", self.parse_failures),
            ("parse_warnings", self.parse_warnings),
            ("gateway_failures", self.gateway_failures),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v as f64))
        .collect()
    }
}

/// Smooths both curves, averages them and resamples to `target_rate`.
pub fn fuse_curves(
    coarse: &AnomalyCurve,
    mllm: &AnomalyCurve,
    sigma_coarse: f64,
    sigma_mllm: f64,
    target_rate: f64,
    upsampler: Upsampler,
) -> Result<AnomalyCurve> {
    let fused = fuse_average(&gaussian_smooth(coarse, sigma_coarse)?, &gaussian_smooth(mllm, sigma_mllm)?)?;
    Ok(upsample(&fused, target_rate, upsampler)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    /// Coarse curve alone, fill-forward upsampled.
    pub coarse_only: Option<FrameReport>,
    /// Step curves alone, fill-forward upsampled.
    pub mllm_only: Option<FrameReport>,
    /// Smoothed average, fill-forward instead of spectral upsampling.
    pub fused_fill_forward: Option<FrameReport>,
}

/// Evaluation report of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub roc_auc: f64,
    pub ap: f64,
    pub f1: f64,
    pub fpr: f64,
    pub f1_threshold: f64,
    pub n_videos: usize,
    pub n_frames: usize,
    pub per_category: BTreeMap<String, f64>,
    pub pearson_ta_mllm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub semantic_similarity: Option<f64>,
    pub baselines: Baselines,
    pub verdicts: VerdictStats,
    pub config_hash: String,
}

/// Fuses coarse and step curves of every video and evaluates the test split.
pub fn cmd_fuse_eval(cfg: &RunConfig, opts: StageOptions) -> Result<StageSummary> {
    run_staged(cfg, opts, |ctx| {
        let records = ctx.records();
        let coarse = load_stage_curves(&ctx.layout, "coarse", &records)?;
        let mllm = load_stage_curves(&ctx.layout, "mllm", &records)?;
        let c = &ctx.cfg;
        let fused_list = ctx.opts.exec.try_map(&records, |r| -> Result<AnomalyCurve> {
            let m = fit_length(mllm[&r.id].clone(), coarse[&r.id].len());
            let f = fuse_curves(&coarse[&r.id], &m, c.sigma_coarse, c.sigma_mllm, r.native_fps, c.upsampler)?;
            write_curve(&ctx.layout.curve("fused", &r.id), &f)?;
            write_atomic(&ctx.layout.stage("fused").join(format!("{}.csv", r.id)), to_csv(&f).as_bytes())?;
            Ok(f)
        })?;
        let fused: HashMap<String, AnomalyCurve> =
            records.iter().map(|r| r.id.clone()).zip(fused_list).collect();

        let test = ctx.split(Split::Test);
        let frames = materialize_native(&test, &fused, c.upsampler, ctx.opts.exec)?;
        let main = frame_report(&frames, c.f1_threshold)?;
        let ff = Upsampler::FillForward;
        let smoothed_avg: HashMap<String, AnomalyCurve> = test
            .iter()
            .map(|r| -> Result<(String, AnomalyCurve)> {
                let m = fit_length(mllm[&r.id].clone(), coarse[&r.id].len());
                let avg = fuse_average(&gaussian_smooth(&coarse[&r.id], c.sigma_coarse)?, &gaussian_smooth(&m, c.sigma_mllm)?)?;
                Ok((r.id.clone(), avg))
            })
            .collect::<Result<_>>()?;
        let baselines = Baselines {
            coarse_only: frame_eval(&test, &coarse, ff, c.f1_threshold, ctx.opts.exec).ok(),
            mllm_only: frame_eval(&test, &mllm, ff, c.f1_threshold, ctx.opts.exec).ok(),
            fused_fill_forward: frame_eval(&test, &smoothed_avg, ff, c.f1_threshold, ctx.opts.exec).ok(),
        };
        let (ta, mm): (Vec<f64>, Vec<f64>) = test
            .iter()
            .flat_map(|r| {
                let m = fit_length(mllm[&r.id].clone(), coarse[&r.id].len());
                coarse[&r.id].values.clone().into_iter().zip(m.values)
            })
            .unzip();
        let mut stats = VerdictStats::default();
        let mut descriptions: HashMap<String, Vec<String>> = HashMap::new();
        for r in &test {
            let path = ctx.layout.video_verdicts(&r.id);
            if !path.exists() {
                return Err(PipelineError::MissingStage { stage: "mllm", detail: format!("no verdict log for '{}'", r.id) });
            }
            let v: Vec<VerdictRecord> = read_jsonl(&path)?;
            stats.add(&v);
            descriptions.insert(
                r.id.clone(),
                v.into_iter().filter(|v| v.verdict.present && !v.verdict.description.trim().is_empty()).map(|v| v.verdict.description).collect(),
            );
        }
        let semantic = match &c.gt_descriptions {
            Some(p) => score_descriptions(ctx, &test, &descriptions, &c.resolve(p))?,
            None => None,
        };
        let report = Report {
            roc_auc: main.roc_auc,
            ap: main.ap,
            f1: main.f1,
            fpr: main.fpr,
            f1_threshold: c.f1_threshold,
            n_videos: test.len(),
            n_frames: main.n_frames,
            per_category: all_category_aucs(&frames, c.include_normals),
            pearson_ta_mllm: pearson(&ta, &mm).ok(),
            semantic_similarity: semantic,
            baselines,
            verdicts: stats,
            config_hash: c.hash(),
        };
        write_json(&ctx.layout.report(), &report)?;
        write_atomic(&ctx.layout.video_scores(), video_scores_csv(&test, &coarse, &mllm, &fused).as_bytes())?;
        let mut s = StageSummary { stage: "fuse-eval".into(), computed: records.len(), skipped: 0, notes: BTreeMap::new() };
        s.notes.insert("roc_auc".into(), report.roc_auc);
        s.notes.insert("ap".into(), report.ap);
        s.notes.insert("f1".into(), report.f1);
        s.notes.insert("fpr".into(), report.fpr);
        Ok(s)
    })
}

fn score_descriptions(
    ctx: &Ctx,
    test: &[&VideoRecord],
    predicted: &HashMap<String, Vec<String>>,
    gt_path: &Path,
) -> Result<Option<f64>> {
    let gt: HashMap<String, Vec<String>> = read_json(gt_path)?;
    let encoder = ctx.cfg.backends.encoder.build(ctx.manifest.dim)?;
    let embed = |texts: &[String]| -> Result<Vec<Vec<f64>>> {
        texts.iter().map(|t| Ok(encoder.encode(t)?.vector)).collect()
    };
    let (mut preds, mut gts) = (Vec::new(), Vec::new());
    for r in test {
        let (Some(p), Some(g)) = (predicted.get(&r.id), gt.get(&r.id)) else { continue };
        if p.is_empty() || g.is_empty() {
            continue;
        }
        preds.push(embed(p)?);
        gts.push(embed(g)?);
    }
    if preds.is_empty() {
        return Ok(None);
    }
    Ok(Some(semantic_similarity(&preds, &gts)?))
}

fn video_scores_csv(
    test: &[&VideoRecord],
    coarse: &HashMap<String, AnomalyCurve>,
    mllm: &HashMap<String, AnomalyCurve>,
    fused: &HashMap<String, AnomalyCurve>,
) -> String {
    let max = |m: &HashMap<String, AnomalyCurve>, id: &str| {
        m.get(id).and_then(|c| aggregate_video(c, Aggregator::Max).ok()).map(|v| format!("{v:.6}")).unwrap_or_default()
    };
    let mut s = String::from("id,label,category,coarse_max,mllm_max,fused_max\n");
    for r in test {
        let label = if r.label == Label::Abnormal { "abnormal" } else { "normal" };
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.id,
            label,
            r.category.as_deref().unwrap_or(""),
            max(coarse, &r.id),
            max(mllm, &r.id),
            max(fused, &r.id)
        ));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizeSummary {
    pub task: Task,
    pub best: PromptCandidate,
    pub iterations_run: usize,
    pub last_iteration: usize,
    pub stopped_early: bool,
    pub resumed: bool,
}

/// Runs (or resumes) prompt optimization for `task` on the train split.
pub fn cmd_optimize(cfg: &RunConfig, task: Task, opts: StageOptions) -> Result<OptimizeSummary> {
    run_staged(cfg, opts, |ctx| {
        let patch = match task {
            Task::Anchors => &ctx.cfg.optimizer.anchors,
            Task::Vau => &ctx.cfg.optimizer.vau,
        };
        let config = patch.resolve(task, ctx.cfg.seed);
        let gateway = Arc::new(ctx.cfg.gateway()?);
        let train = ctx.split(Split::Train);
        let evaluator: Box<dyn FitnessEvaluator> = match task {
            Task::Anchors => {
                let encoder = ctx.cfg.backends.encoder.build(ctx.manifest.dim)?;
                let videos = train
                    .iter()
                    .map(|r| Ok((r.label, ctx.manifest.load_embeddings(r)?)))
                    .collect::<Result<Vec<_>>>()?;
                Box::new(AnchorEvaluator::new(encoder, videos, ctx.cfg.tau, ctx.opts.exec)?)
            }
            Task::Vau => {
                let level = ctx.cfg.vau_eval.injection_level;
                let subset = select_vau_subset(&train, ctx.cfg.vau_eval.per_category, ctx.cfg.seed);
                let coarse = if level == InjectionLevel::None {
                    HashMap::new()
                } else {
                    load_stage_curves(&ctx.layout, "coarse", &subset)?
                };
                let samples = subset
                    .iter()
                    .map(|r| VauSample {
                        id: r.id.clone(),
                        duration_s: r.duration_s,
                        label: r.label,
                        coarse: coarse.get(&r.id).cloned(),
                    })
                    .collect();
                let mut ev = VauEvaluator::new(gateway.clone(), samples, level, ctx.opts.exec)?;
                ev.threshold = ctx.cfg.prior_threshold;
                Box::new(ev)
            }
        };

        let state_path = ctx.layout.optimizer_state(task);
        let history_path = ctx.layout.history(task);
        let resumed = state_path.exists() && !ctx.opts.force;
        let (state, mut history): (OptimizerState, Vec<HistoryRecord>) = if resumed {
            let state: OptimizerState = read_json(&state_path)?;
            let history = if history_path.exists() { read_jsonl(&history_path)? } else { Vec::new() };
            (state, history)
        } else {
            let (a, b) = patch.initial.resolve(task, &ctx.layout)?;
            let state = seed_state(PromptCandidate::new(task, a, b, 0), config.archive_capacity, evaluator.as_ref())?;
            let seed_rec = HistoryRecord {
                iteration: 0,
                generation: 0,
                status: GenerationStatus::Evaluated,
                candidate_hash: Some(state.best.hash()),
                fitness: state.best.fitness,
                aggregator: state.best.aggregator_used,
                best_so_far: state.best_fitness(),
                error: None,
            };
            write_json(&state_path, &state)?;
            write_atomic(&history_path, history_jsonl(std::slice::from_ref(&seed_rec)).as_bytes())?;
            (state, vec![seed_rec])
        };
        let start_iteration = state.iteration;

        let mut write_error: Option<PipelineError> = None;
        let mut checkpoint = |st: &OptimizerState, recs: &[HistoryRecord]| {
            history.extend_from_slice(recs);
            if write_error.is_none() {
                let r = write_json(&state_path, st).and_then(|_| write_atomic(&history_path, history_jsonl(&history).as_bytes()));
                write_error = r.err();
            }
        };
        let outcome = optimize(&config, state, &gateway, evaluator.as_ref(), ctx.opts.exec, &mut checkpoint)?;
        if let Some(e) = write_error {
            return Err(e);
        }
        let history: Vec<HistoryRecord> = read_jsonl(&history_path)?;
        write_atomic(&ctx.layout.learning_curve(task), learning_curve_csv(&history).as_bytes())?;
        write_json(&ctx.layout.best_prompt(task), outcome.best())?;
        Ok(OptimizeSummary {
            task,
            best: outcome.best().clone(),
            iterations_run: outcome.state.iteration - start_iteration,
            last_iteration: outcome.state.iteration,
            stopped_early: outcome.stopped_early,
            resumed,
        })
    })
}

/// Human-readable summary of a finished run.
pub fn cmd_report(cfg: &RunConfig) -> Result<String> {
    let layout = cfg.layout();
    let path = layout.report();
    if !path.exists() {
        return Err(PipelineError::MissingStage { stage: "report", detail: "run fuse-eval first".into() });
    }
    let r: Report = read_json(&path)?;
    let mut out = String::new();
    let line = |out: &mut String, k: &str, v: String| out.push_str(&format!("{k:<24}{v}\n"));
    line(&mut out, "videos (test)", r.n_videos.to_string());
    line(&mut out, "frames", r.n_frames.to_string());
    line(&mut out, "ROC AUC", pct(r.roc_auc));
    line(&mut out, "AP", pct(r.ap));
    line(&mut out, &format!("F1@{}", r.f1_threshold), pct(r.f1));
    line(&mut out, &format!("FPR@{}", r.f1_threshold), pct(r.fpr));
    line(&mut out, "pearson TA/MLLM", r.pearson_ta_mllm.map_or("n/a".into(), |p| format!("{p:.3}")));
    if let Some(s) = r.semantic_similarity {
        line(&mut out, "semantic similarity", format!("{s:.4}"));
    }
    for (name, b) in [
        ("coarse only (ff)", &r.baselines.coarse_only),
        ("mllm only (ff)", &r.baselines.mllm_only),
        ("fused (ff)", &r.baselines.fused_fill_forward),
    ] {
        line(&mut out, name, b.as_ref().map_or("n/a".into(), |b| format!("AUC {} F1 {}", pct(b.roc_auc), pct(b.f1))));
    }
    for (cat, auc) in &r.per_category {
        line(&mut out, &format!("  {cat}"), pct(*auc));
    }
    line(
        &mut out,
        "segments",
        format!(
            "{} ({} flagged, {} parse failures, {} gateway failures)",
            r.verdicts.segments, r.verdicts.present, r.verdicts.parse_failures, r.verdicts.gateway_failures
        ),
    );
    for task in [Task::Anchors, Task::Vau] {
        let h = layout.history(task);
        if h.exists() {
            let recs: Vec<HistoryRecord> = read_jsonl(&h)?;
            let summary = ape::iteration_summary(&recs);
            if let Some(last) = summary.last() {
                line(
                    &mut out,
                    &format!("optimize-{}", task.as_str()),
                    format!("{} iterations, best {:.2}", last.iteration, last.best_so_far),
                );
            }
        }
    }
    Ok(out)
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"dataset_manifest": "m.json", "run_dir": "run"}"#).unwrap();
        assert_eq!(c.tau, 0.07);
        assert_eq!((c.sigma_coarse, c.sigma_mllm, c.f1_threshold), (2.0, 4.0, 0.5));
        assert_eq!(c.injection_level, InjectionLevel::LSTF);
        assert_eq!(c.anchors, PromptChoice::Named(NamedPrompts::Optimized));
        assert_eq!(c.optimizer.anchors.resolve(Task::Anchors, 0), OptimizerConfig::defaults(Task::Anchors));
        assert_eq!(c.optimizer.vau.resolve(Task::Vau, 0).population, 3);
        assert_eq!(c.vau_eval, VauEvalConfig { per_category: 3, injection_level: InjectionLevel::None });
        assert!(c.include_normals);
        assert_eq!(c.backends.encoder, EncoderSpec::Mock { dim: None });
        assert_eq!(RunConfig::new("m.json", "run"), c);
    }

    #[test]
    fn inline_prompts_and_unknown_fields() {
        let c: RunConfig = serde_json::from_str(
            r#"{"dataset_manifest": "m", "run_dir": "r", "anchors": {"normal": "calm", "abnormal": "riot"}, "vau_prompts": "base"}"#,
        )
        .unwrap();
        assert_eq!(c.anchors, PromptChoice::Inline { a: "calm".into(), b: "riot".into() });
        assert_eq!(c.vau_prompts, PromptChoice::Named(NamedPrompts::Base));
        assert!(serde_json::from_str::<RunConfig>(r#"{"dataset_manifest": "m", "run_dir": "r", "tua": 1}"#).is_err());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(PipelineError::Config("x".into()).exit_code(), 2);
        assert_eq!(PipelineError::MissingStage { stage: "coarse", detail: String::new() }.exit_code(), 3);
        assert_eq!(PipelineError::Signal(SignalError::Empty).exit_code(), 1);
    }

    #[test]
    fn config_hash_is_stable_and_sensitive() {
        let a = RunConfig::new("m.json", "run");
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.tau = 0.1;
        assert_ne!(a.hash(), b.hash());
        b = a.clone();
        b.root = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.json");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }

    #[test]
    fn fuse_matches_composition() {
        let c = AnomalyCurve::new(1.0, 0.0, (0..20).map(|i| (i as f64 / 19.0).powi(2)).collect()).unwrap();
        let m = AnomalyCurve::new(1.0, 0.0, (0..20).map(|i| if (5..12).contains(&i) { 0.8 } else { 0.0 }).collect()).unwrap();
        let got = fuse_curves(&c, &m, 2.0, 4.0, 4.0, Upsampler::Fourier).unwrap();
        let sc = gaussian_smooth(&c, 2.0).unwrap();
        let sm = gaussian_smooth(&m, 4.0).unwrap();
        let avg: Vec<f64> = sc.values.iter().zip(&sm.values).map(|(a, b)| (a + b) / 2.0).collect();
        let want = crate::signal::fourier_upsample(&AnomalyCurve { values: avg, ..c.clone() }, 4.0).unwrap();
        assert_eq!(got.values.len(), 80);
        for (g, w) in got.values.iter().zip(&want.values) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn fit_length_pads_and_truncates() {
        let c = AnomalyCurve { rate: 1.0, origin_s: 0.0, values: vec![0.1, 0.2] };
        assert_eq!(fit_length(c.clone(), 3).values, vec![0.1, 0.2, 0.2]);
        assert_eq!(fit_length(c, 1).values, vec![0.1]);
    }
}
