//! Prompt templates and reference prompts shipped with the engine.
//!
//! Texts are stored under `assets/` and embedded at compile time. Trailing
//! newlines are stripped on access.

use crate::ape::Task;

const META_ANCHORS: &str = include_str!("../assets/meta_prompt_anchors.txt");
const META_VAU: &str = include_str!("../assets/meta_prompt_vau.txt");
const VAU_BASE_SYSTEM: &str = include_str!("../assets/vau_base_system.txt");
const VAU_BASE_USER: &str = include_str!("../assets/vau_base_user.txt");
const VAU_OPT_SYSTEM: &str = include_str!("../assets/vau_optimized_system.txt");
const VAU_OPT_USER: &str = include_str!("../assets/vau_optimized_user.txt");
const ANCHORS_BASE_NORMAL: &str = include_str!("../assets/anchors_base_normal.txt");
const ANCHORS_BASE_ABNORMAL: &str = include_str!("../assets/anchors_base_abnormal.txt");
const ANCHORS_OPT_NORMAL: &str = include_str!("../assets/anchors_optimized_normal.txt");
const ANCHORS_OPT_ABNORMAL: &str = include_str!("../assets/anchors_optimized_abnormal.txt");
const ANCHORS_XD_NORMAL: &str = include_str!("../assets/anchors_xd_normal.txt");
const ANCHORS_XD_ABNORMAL: &str = include_str!("../assets/anchors_xd_abnormal.txt");
const PRIOR_PREAMBLE: &str = include_str!("../assets/prior_preamble.txt");

/// Placeholder in meta-prompt templates replaced by the rendered archive.
pub const EXAMPLES_PLACEHOLDER: &str = "{examples}";
/// Placeholder in user prompts replaced by the coarse-prior block.
pub const PRIOR_PLACEHOLDER: &str = "{coarse_prior}";

pub fn meta_prompt_template(task: Task) -> &'static str {
    match task {
        Task::Anchors => META_ANCHORS,
        Task::Vau => META_VAU,
    }
}

/// Sentence introducing the injected prior.
pub fn prior_preamble() -> &'static str {
    PRIOR_PREAMBLE.trim_end()
}

/// Reference (field_a, field_b) texts for a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptSet {
    /// Hand-written starting point of the optimization.
    Base,
    /// Optimized result reported for UCF-Crime.
    Optimized,
    /// Anchors distilled for XD-Violence (VAU prompts are shared).
    OptimizedXd,
}

pub fn prompts(task: Task, set: PromptSet) -> (&'static str, &'static str) {
    let (a, b) = match (task, set) {
        (Task::Anchors, PromptSet::Base) => (ANCHORS_BASE_NORMAL, ANCHORS_BASE_ABNORMAL),
        (Task::Anchors, PromptSet::Optimized) => (ANCHORS_OPT_NORMAL, ANCHORS_OPT_ABNORMAL),
        (Task::Anchors, PromptSet::OptimizedXd) => (ANCHORS_XD_NORMAL, ANCHORS_XD_ABNORMAL),
        (Task::Vau, PromptSet::Base) => (VAU_BASE_SYSTEM, VAU_BASE_USER),
        (Task::Vau, PromptSet::Optimized | PromptSet::OptimizedXd) => (VAU_OPT_SYSTEM, VAU_OPT_USER),
    };
    (a.trim_end(), b.trim_end())
}
