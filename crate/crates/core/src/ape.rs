//! Automatic prompt engineering loop.
//!
//! A language model acts as the optimizer: each iteration it receives a
//! meta-prompt listing the best prompts found so far with their scores and
//! proposes new ones. Candidates are scored by a task-specific fitness
//! (video-level ROC AUC on weakly labeled videos) and the archive keeps the
//! global top-k. The loop is generic over the two tasks: anchor texts for
//! the coarse scorer and system/user prompts for the multimodal model.

use std::collections::HashMap;
use std::sync::{Arc, LazyLock};

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::{meta_prompt_template, EXAMPLES_PLACEHOLDER};
use crate::corpus::{EmbeddingMatrix, Label, TextEncoder, VideoRecord};
use crate::gateway::{ChatRequest, Gateway, GatewayError, OPTIMIZER_MAX_TOKENS};
use crate::hashing::{prompt_hash, splitmix64};
use crate::metrics::roc_auc;
use crate::par::Exec;
use crate::refiner::{refine_video, RefineRequest, RefineRunError, VauPrompts, MAX_SEGMENT_S};
use crate::scorer::{aggregate_video, score_frames, Aggregator, AnchorPair, AnomalyCurve, InjectionLevel, ScoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Anchors,
    Vau,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Anchors => "anchors",
            Task::Vau => "vau",
        }
    }

    /// Labels of (field_a, field_b) in meta-prompts and model outputs.
    pub fn labels(self) -> (&'static str, &'static str) {
        match self {
            Task::Anchors => ("Normal Prompt", "Abnormal Prompt"),
            Task::Vau => ("System Prompt", "User Prompt"),
        }
    }

    /// Gateway tag of generation requests.
    pub fn tag(self) -> &'static str {
        match self {
            Task::Anchors => "ape-anchors",
            Task::Vau => "ape-vau",
        }
    }
}

#[derive(Debug, Error)]
pub enum ApeError {
    #[error("archive is empty")]
    EmptyArchive,
    #[error("candidate has not been evaluated")]
    Unevaluated,
    #[error("missing label {0:?}")]
    MissingLabel(&'static str),
    #[error("field {0:?} is empty")]
    EmptyField(&'static str),
    #[error("evaluation set needs both labels")]
    SingleClass,
    #[error("invalid optimizer config: {0}")]
    BadConfig(String),
    #[error("every generation request of iteration {iteration} failed: {last}")]
    GatewayDown { iteration: usize, last: GatewayError },
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
}

pub type Result<T, E = ApeError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCandidate {
    pub task: Task,
    /// Normal anchor text or system prompt.
    pub field_a: String,
    /// Abnormal anchor text or user prompt.
    pub field_b: String,
    pub fitness: Option<f64>,
    pub aggregator_used: Option<Aggregator>,
    pub iteration: usize,
}

impl PromptCandidate {
    pub fn new(task: Task, field_a: impl Into<String>, field_b: impl Into<String>, iteration: usize) -> Self {
        Self { task, field_a: field_a.into(), field_b: field_b.into(), fitness: None, aggregator_used: None, iteration }
    }

    pub fn hash(&self) -> String {
        prompt_hash(&self.field_a, &self.field_b)
    }

    pub fn with_fitness(mut self, f: Fitness) -> Self {
        self.fitness = Some(f.value);
        self.aggregator_used = f.aggregator;
        self
    }

    fn same_text(&self, other: &PromptCandidate) -> bool {
        self.field_a == other.field_a && self.field_b == other.field_b
    }
}

/// Top-k evaluated candidates, ascending by fitness.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Archive {
    pub capacity: usize,
    pub entries: Vec<PromptCandidate>,
}

impl Archive {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, entries: Vec::new() }
    }

    pub fn best(&self) -> Option<&PromptCandidate> {
        self.entries.last()
    }

    pub fn min_fitness(&self) -> Option<f64> {
        self.entries.first().and_then(|c| c.fitness)
    }

    pub fn contains(&self, candidate: &PromptCandidate) -> bool {
        self.entries.iter().any(|e| e.same_text(candidate))
    }
}

fn fitness_order(a: &PromptCandidate, b: &PromptCandidate) -> std::cmp::Ordering {
    let (fa, fb) = (a.fitness.unwrap_or(f64::NEG_INFINITY), b.fitness.unwrap_or(f64::NEG_INFINITY));
    // ascending by fitness; among equals the earlier iteration ranks higher
    fa.total_cmp(&fb).then(b.iteration.cmp(&a.iteration))
}

/// Inserts `candidate` if it belongs to the top-k. Returns whether the
/// archive changed.
pub fn update_archive(archive: &mut Archive, candidate: PromptCandidate) -> Result<bool> {
    let fitness = candidate.fitness.ok_or(ApeError::Unevaluated)?;
    if let Some(pos) = archive.entries.iter().position(|e| e.same_text(&candidate)) {
        if fitness <= archive.entries[pos].fitness.unwrap_or(f64::NEG_INFINITY) {
            return Ok(false);
        }
        archive.entries[pos] = candidate;
    } else if archive.entries.len() < archive.capacity {
        archive.entries.push(candidate);
    } else if archive.min_fitness().is_some_and(|m| fitness > m) {
        archive.entries[0] = candidate;
    } else {
        return Ok(false);
    }
    archive.entries.sort_by(fitness_order);
    Ok(true)
}

fn render_example(i: usize, task: Task, c: &PromptCandidate) -> String {
    let (la, lb) = task.labels();
    format!(
        "Example {i}:\n{la}: {}\n{lb}: {}\nScore: {:.2}\n",
        c.field_a,
        c.field_b,
        c.fitness.unwrap_or(0.0)
    )
}

/// Fills the task's meta-prompt template with the archive, ascending.
pub fn build_meta_prompt(task: Task, archive: &Archive) -> Result<String> {
    if archive.entries.is_empty() {
        return Err(ApeError::EmptyArchive);
    }
    let examples = archive
        .entries
        .iter()
        .enumerate()
        .map(|(i, c)| render_example(i + 1, task, c))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(meta_prompt_template(task).replace(EXAMPLES_PLACEHOLDER, &examples))
}

static LABEL_RE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?im)(?:^[ \t]*(?:#{1,6}|[-*•>]|\d+[.)])[ \t]*)?(?:\*\*|__)?\b(normal prompt|abnormal prompt|system prompt|user prompt|score|example \d+)\b[ \t]*(?:\*\*|__)?[ \t]*:[ \t]*(?:\*\*|__)?",
    )
    .unwrap()
});

fn clean_field(s: &str) -> &str {
    s.trim().trim_end_matches("```").trim()
}

/// Extracts a candidate from free-form optimizer output.
///
/// Labels are matched case-insensitively anywhere in the text; a field runs
/// until the next recognized label or the end of the text.
pub fn parse_candidates(task: Task, llm_output: &str, iteration: usize) -> Result<PromptCandidate> {
    let (la, lb) = task.labels();
    let marks: Vec<(String, usize, usize)> = LABEL_RE
        .captures_iter(llm_output)
        .map(|c| {
            let m = c.get(0).unwrap();
            (c[1].to_lowercase(), m.start(), m.end())
        })
        .collect();
    let field = |label: &'static str| -> Result<&str> {
        let lower = label.to_lowercase();
        let idx = marks.iter().position(|(l, ..)| *l == lower).ok_or(ApeError::MissingLabel(label))?;
        let end = marks.get(idx + 1).map_or(llm_output.len(), |m| m.1);
        let text = clean_field(&llm_output[marks[idx].2..end]);
        if text.is_empty() {
            return Err(ApeError::EmptyField(label));
        }
        Ok(text)
    };
    let a = field(la)?;
    let b = field(lb)?;
    Ok(PromptCandidate::new(task, a, b, iteration))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fitness {
    /// 100 × ROC AUC.
    pub value: f64,
    pub aggregator: Option<Aggregator>,
}

/// Scores a candidate's two fields.
pub trait FitnessEvaluator: Sync {
    fn evaluate(&self, field_a: &str, field_b: &str) -> Result<Fitness>;
}

impl<F> FitnessEvaluator for F
where
    F: Fn(&str, &str) -> Result<Fitness> + Sync,
{
    fn evaluate(&self, a: &str, b: &str) -> Result<Fitness> {
        self(a, b)
    }
}

/// Picks the aggregator with the best video-level AUC (first wins ties).
pub fn best_aggregator_auc(curves: &[AnomalyCurve], labels: &[u8]) -> Result<Fitness> {
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(ApeError::SingleClass);
    }
    let mut best: Option<Fitness> = None;
    for agg in Aggregator::ALL {
        let scores = curves.iter().map(|c| aggregate_video(c, agg)).collect::<Result<Vec<_>, _>>()?;
        let auc = roc_auc(&scores, labels).map_err(|e| ApeError::Evaluation(e.to_string()))?;
        let value = 100.0 * auc;
        if best.is_none_or(|b| value > b.value) {
            best = Some(Fitness { value, aggregator: Some(agg) });
        }
    }
    Ok(best.expect("four aggregators"))
}

/// Anchor fitness on a labeled training set of frame embeddings.
pub struct AnchorEvaluator {
    pub encoder: Arc<dyn TextEncoder>,
    pub videos: Vec<(Label, EmbeddingMatrix)>,
    pub tau: f64,
    pub rate: f64,
    pub exec: Exec,
}

impl AnchorEvaluator {
    pub fn new(encoder: Arc<dyn TextEncoder>, videos: Vec<(Label, EmbeddingMatrix)>, tau: f64, exec: Exec) -> Result<Self> {
        let labels: Vec<u8> = videos.iter().map(|(l, _)| l.is_abnormal() as u8).collect();
        if !labels.contains(&0) || !labels.contains(&1) {
            return Err(ApeError::SingleClass);
        }
        Ok(Self { encoder, videos, tau, rate: 1.0, exec })
    }
}

impl FitnessEvaluator for AnchorEvaluator {
    fn evaluate(&self, normal: &str, abnormal: &str) -> Result<Fitness> {
        let anchors = AnchorPair::new(normal, abnormal)?.resolve(self.encoder.as_ref())?;
        let curves = self
            .exec
            .try_map(&self.videos, |(_, emb)| score_frames(emb, &anchors, self.tau, self.rate))?;
        let labels: Vec<u8> = self.videos.iter().map(|(l, _)| l.is_abnormal() as u8).collect();
        best_aggregator_auc(&curves, &labels)
    }
}

/// One video of the VAU evaluation subset.
#[derive(Debug, Clone)]
pub struct VauSample {
    pub id: String,
    pub duration_s: f64,
    pub label: Label,
    /// Coarse curve, needed when priors are injected.
    pub coarse: Option<AnomalyCurve>,
}

/// VAU prompt fitness: video score is the highest segment abnormality.
pub struct VauEvaluator {
    pub gateway: Arc<Gateway>,
    pub samples: Vec<VauSample>,
    pub level: InjectionLevel,
    pub threshold: f64,
    pub rate: f64,
    pub exec: Exec,
}

impl VauEvaluator {
    pub fn new(gateway: Arc<Gateway>, samples: Vec<VauSample>, level: InjectionLevel, exec: Exec) -> Result<Self> {
        let has = |l: Label| samples.iter().any(|s| s.label == l);
        if !has(Label::Normal) || !has(Label::Abnormal) {
            return Err(ApeError::SingleClass);
        }
        Ok(Self { gateway, samples, level, threshold: 0.5, rate: 1.0, exec })
    }
}

impl FitnessEvaluator for VauEvaluator {
    fn evaluate(&self, system: &str, user: &str) -> Result<Fitness> {
        let prompts = VauPrompts { system: system.into(), user: user.into() };
        let scores = self.exec.try_map(&self.samples, |s| {
            let req = RefineRequest {
                video_id: &s.id,
                duration_s: s.duration_s,
                rate: self.rate,
                prompts: &prompts,
                level: self.level,
                coarse: s.coarse.as_ref(),
                threshold: self.threshold,
                max_segment_s: MAX_SEGMENT_S,
            };
            match refine_video(&req, &self.gateway, self.exec, true) {
                Ok(r) => Ok(r.video_score()),
                Err(RefineRunError::Gateway { source, .. }) => Err(ApeError::Gateway(source)),
                Err(e) => Err(ApeError::Evaluation(e.to_string())),
            }
        });
        let scores = match scores {
            Ok(s) => s,
            // exhausted gateway aborts the candidate with fitness 0
            Err(ApeError::Gateway(_)) => return Ok(Fitness { value: 0.0, aggregator: None }),
            Err(e) => return Err(e),
        };
        let labels: Vec<u8> = self.samples.iter().map(|s| s.label.is_abnormal() as u8).collect();
        let auc = roc_auc(&scores, &labels).map_err(|e| ApeError::Evaluation(e.to_string()))?;
        Ok(Fitness { value: 100.0 * auc, aggregator: Some(Aggregator::Max) })
    }
}

/// Seeded selection of up to `per_category` abnormal videos per category
/// plus an equal number of normal videos, in manifest order.
pub fn select_vau_subset<'a>(records: &[&'a VideoRecord], per_category: usize, seed: u64) -> Vec<&'a VideoRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_cat: std::collections::BTreeMap<&str, Vec<&VideoRecord>> = Default::default();
    for r in records.iter().filter(|r| r.label == Label::Abnormal) {
        by_cat.entry(r.category.as_deref().unwrap_or("")).or_default().push(r);
    }
    let mut picked: Vec<&str> = Vec::new();
    for group in by_cat.values() {
        picked.extend(group.choose_multiple(&mut rng, per_category).map(|r| r.id.as_str()));
    }
    let normals: Vec<&VideoRecord> = records.iter().copied().filter(|r| r.label == Label::Normal).collect();
    let n_abn = picked.len();
    picked.extend(normals.choose_multiple(&mut rng, n_abn).map(|r| r.id.as_str()));
    records.iter().copied().filter(|r| picked.contains(&r.id.as_str())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub iterations: usize,
    pub population: usize,
    pub archive_capacity: usize,
    pub patience: usize,
    pub generation_temperature: f64,
    pub seed: u64,
}

impl OptimizerConfig {
    pub fn defaults(task: Task) -> Self {
        let (iterations, population, archive_capacity) = match task {
            Task::Anchors => (100, 10, 10),
            Task::Vau => (50, 3, 5),
        };
        Self { iterations, population, archive_capacity, patience: 15, generation_temperature: 1.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("iterations", self.iterations),
            ("population", self.population),
            ("archive_capacity", self.archive_capacity),
            ("patience", self.patience),
        ] {
            if v == 0 {
                return Err(ApeError::BadConfig(format!("{name} must be at least 1")));
            }
        }
        if !(self.generation_temperature.is_finite() && self.generation_temperature >= 0.0) {
            return Err(ApeError::BadConfig(format!("temperature {}", self.generation_temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationStatus {
    Evaluated,
    /// Same text as an earlier candidate; fitness reused.
    Cached,
    ParseFailed,
    GatewayFailed,
    EvalFailed,
}

/// One line of the optimization history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub iteration: usize,
    pub generation: usize,
    pub status: GenerationStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fitness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregator: Option<Aggregator>,
    pub best_so_far: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Resumable loop state; persisted after every iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub task: Task,
    pub iteration: usize,
    pub stagnant: usize,
    pub archive: Archive,
    pub best: PromptCandidate,
    /// Every evaluated text, by candidate hash.
    pub evaluated: HashMap<String, Fitness>,
}

impl OptimizerState {
    /// Starts from an evaluated seed candidate at iteration 0.
    pub fn seeded(seed: PromptCandidate, capacity: usize) -> Result<Self> {
        let fitness = seed.fitness.ok_or(ApeError::Unevaluated)?;
        let mut archive = Archive::new(capacity);
        let mut evaluated = HashMap::new();
        evaluated.insert(seed.hash(), Fitness { value: fitness, aggregator: seed.aggregator_used });
        update_archive(&mut archive, seed.clone())?;
        Ok(Self { task: seed.task, iteration: 0, stagnant: 0, archive, best: seed, evaluated })
    }

    pub fn best_fitness(&self) -> f64 {
        self.best.fitness.unwrap_or(f64::NEG_INFINITY)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeOutcome {
    pub state: OptimizerState,
    pub history: Vec<HistoryRecord>,
    pub stopped_early: bool,
}

impl OptimizeOutcome {
    pub fn best(&self) -> &PromptCandidate {
        &self.state.best
    }

    /// Global best after each completed iteration of this run.
    pub fn best_so_far(&self) -> Vec<f64> {
        iteration_summary(&self.history).into_iter().map(|s| s.best_so_far).collect()
    }
}

/// Per-iteration aggregates of a history, for learning curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub iteration_best: Option<f64>,
    pub best_so_far: f64,
    pub parse_failures: usize,
}

pub fn iteration_summary(history: &[HistoryRecord]) -> Vec<IterationSummary> {
    let mut out: Vec<IterationSummary> = Vec::new();
    for r in history {
        if out.last().is_none_or(|s| s.iteration != r.iteration) {
            out.push(IterationSummary { iteration: r.iteration, iteration_best: None, best_so_far: r.best_so_far, parse_failures: 0 });
        }
        let s = out.last_mut().unwrap();
        s.best_so_far = r.best_so_far;
        if let Some(f) = r.fitness.filter(|_| matches!(r.status, GenerationStatus::Evaluated | GenerationStatus::Cached)) {
            s.iteration_best = Some(s.iteration_best.map_or(f, |b: f64| b.max(f)));
        }
        if r.status == GenerationStatus::ParseFailed {
            s.parse_failures += 1;
        }
    }
    out
}

/// `iteration,iteration_best,best_so_far` rows.
pub fn learning_curve_csv(history: &[HistoryRecord]) -> String {
    let mut s = String::from("iteration,iteration_best,best_so_far\n");
    for r in iteration_summary(history) {
        let ib = r.iteration_best.map(|v| format!("{v:.4}")).unwrap_or_default();
        s.push_str(&format!("{},{},{:.4}\n", r.iteration, ib, r.best_so_far));
    }
    s
}

/// Deterministic per-request seed.
pub fn generation_seed(seed: u64, iteration: usize, generation: usize) -> u64 {
    splitmix64(seed ^ splitmix64(((iteration as u64) << 32) | generation as u64))
}

enum Generated {
    Candidate(PromptCandidate),
    ParseFailed(String),
    GatewayFailed(GatewayError),
}

/// Runs the optimization loop from `state` until the iteration budget or
/// patience is exhausted. `on_iteration` sees the state and the records of
/// each finished iteration (for checkpointing).
pub fn optimize(
    config: &OptimizerConfig,
    mut state: OptimizerState,
    gateway: &Gateway,
    evaluator: &dyn FitnessEvaluator,
    exec: Exec,
    on_iteration: &mut dyn FnMut(&OptimizerState, &[HistoryRecord]),
) -> Result<OptimizeOutcome> {
    config.validate()?;
    let task = state.task;
    let mut history = Vec::new();
    let mut stopped_early = false;
    while state.iteration < config.iterations {
        if state.stagnant >= config.patience {
            stopped_early = true;
            break;
        }
        let iteration = state.iteration + 1;
        let meta = build_meta_prompt(task, &state.archive)?;
        let generated: Vec<Generated> = (0..config.population)
            .map(|g| {
                let mut req = ChatRequest::new(task.tag(), "", meta.clone());
                req.temperature = config.generation_temperature;
                req.max_tokens = OPTIMIZER_MAX_TOKENS;
                req.seed = Some(generation_seed(config.seed, iteration, g));
                match gateway.chat(&req) {
                    Ok(resp) => match parse_candidates(task, &resp.text, iteration) {
                        Ok(c) => Generated::Candidate(c),
                        Err(e) => Generated::ParseFailed(e.to_string()),
                    },
                    Err(e) => Generated::GatewayFailed(e),
                }
            })
            .collect();
        if let Some(Generated::GatewayFailed(last)) = generated.last() {
            if generated.iter().all(|g| matches!(g, Generated::GatewayFailed(_))) {
                return Err(ApeError::GatewayDown { iteration, last: last.clone() });
            }
        }

        // fresh texts are evaluated once, in parallel
        let mut fresh: Vec<(String, PromptCandidate)> = Vec::new();
        for g in &generated {
            if let Generated::Candidate(c) = g {
                let h = c.hash();
                if !state.evaluated.contains_key(&h) && !fresh.iter().any(|(k, _)| *k == h) {
                    fresh.push((h, c.clone()));
                }
            }
        }
        let results = exec.map(&fresh, |(_, c)| evaluator.evaluate(&c.field_a, &c.field_b));
        let mut failures: HashMap<String, String> = HashMap::new();
        for ((h, _), r) in fresh.iter().zip(results) {
            match r {
                Ok(f) => {
                    state.evaluated.insert(h.clone(), f);
                }
                Err(e) => {
                    failures.insert(h.clone(), e.to_string());
                }
            }
        }

        let before = state.best_fitness();
        let mut records = Vec::with_capacity(generated.len());
        let mut seen_this_iteration: Vec<String> = Vec::new();
        for (g, item) in generated.into_iter().enumerate() {
            let mut rec = HistoryRecord {
                iteration,
                generation: g,
                status: GenerationStatus::Evaluated,
                candidate_hash: None,
                fitness: None,
                aggregator: None,
                best_so_far: 0.0,
                error: None,
            };
            match item {
                Generated::ParseFailed(e) => {
                    rec.status = GenerationStatus::ParseFailed;
                    rec.error = Some(e);
                }
                Generated::GatewayFailed(e) => {
                    rec.status = GenerationStatus::GatewayFailed;
                    rec.error = Some(e.to_string());
                }
                Generated::Candidate(c) => {
                    let h = c.hash();
                    rec.candidate_hash = Some(h.clone());
                    if let Some(err) = failures.get(&h) {
                        rec.status = GenerationStatus::EvalFailed;
                        rec.error = Some(err.clone());
                    } else {
                        let f = state.evaluated[&h];
                        let first = fresh.iter().any(|(k, _)| *k == h) && !seen_this_iteration.contains(&h);
                        rec.status = if first { GenerationStatus::Evaluated } else { GenerationStatus::Cached };
                        seen_this_iteration.push(h);
                        rec.fitness = Some(f.value);
                        rec.aggregator = f.aggregator;
                        let c = c.with_fitness(f);
                        if f.value > state.best_fitness() {
                            state.best = c.clone();
                        }
                        update_archive(&mut state.archive, c)?;
                    }
                }
            }
            rec.best_so_far = state.best_fitness();
            records.push(rec);
        }
        state.iteration = iteration;
        if state.best_fitness() > before {
            state.stagnant = 0;
        } else {
            state.stagnant += 1;
        }
        on_iteration(&state, &records);
        history.extend(records);
    }
    if state.iteration < config.iterations && state.stagnant >= config.patience {
        stopped_early = true;
    }
    Ok(OptimizeOutcome { state, history, stopped_early })
}

/// Evaluates the seed candidate and wraps it into a fresh state.
pub fn seed_state(
    seed: PromptCandidate,
    capacity: usize,
    evaluator: &dyn FitnessEvaluator,
) -> Result<OptimizerState> {
    let f = evaluator.evaluate(&seed.field_a, &seed.field_b)?;
    OptimizerState::seeded(seed.with_fitness(f), capacity)
}

/// History as JSON lines.
pub fn history_jsonl(history: &[HistoryRecord]) -> String {
    history.iter().map(|r| serde_json::to_string(r).expect("history serializes") + "\n").collect()
}
