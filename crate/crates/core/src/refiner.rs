//! Segment-level VAU inference with the multimodal model.
//!
//! Videos are cut into contiguous segments of at most 30 s. Each segment is
//! sent to the model together with the (optionally prior-augmented) task
//! prompts; the JSON verdict is turned into a step curve, and the step
//! curves of all segments are stitched back into a video-scale curve.
//!
//! Verdict timestamps are segment-local.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets::{prior_preamble, PRIOR_PLACEHOLDER};
use crate::corpus::frame_count;
use crate::gateway::{ChatRequest, Gateway, GatewayError, VAU_MAX_TOKENS};
use crate::par::Exec;
use crate::scorer::{compute_coarse_prior, AnomalyCurve, CoarsePrior, InjectionLevel};

pub const MAX_SEGMENT_S: f64 = 30.0;
pub const MAX_DESCRIPTION_CHARS: usize = 100;
pub const VAU_TAG: &str = "vau";

#[derive(Debug, Error, PartialEq)]
pub enum RefineError {
    #[error("duration must be positive, got {0}")]
    BadDuration(f64),
    #[error("injection level {0:?} requires a coarse prior")]
    MissingPrior(InjectionLevel),
    #[error("segments are not contiguous at index {0}")]
    Gap(usize),
    #[error("segment curves have different rates")]
    RateMismatch,
    #[error("nothing to stitch")]
    Empty,
}

pub type Result<T, E = RefineError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub video_id: String,
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
}

impl Segment {
    pub fn len_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    /// Media identifier for the segment, a media-fragment style reference.
    pub fn video_ref(&self) -> String {
        format!("{}#t={:.2},{:.2}", self.video_id, self.start_s, self.end_s)
    }
}

/// ⌈duration / max_len⌉ contiguous segments; only the last may be shorter.
pub fn partition_segments(video_id: &str, duration_s: f64, max_len: f64) -> Result<Vec<Segment>> {
    if !(duration_s > 0.0 && duration_s.is_finite()) {
        return Err(RefineError::BadDuration(duration_s));
    }
    let count = ((duration_s / max_len) - 1e-9).ceil().max(1.0) as usize;
    Ok((0..count)
        .map(|i| Segment {
            video_id: video_id.to_string(),
            index: i,
            start_s: i as f64 * max_len,
            end_s: ((i + 1) as f64 * max_len).min(duration_s),
        })
        .collect())
}

/// System/user prompt pair for the VAU task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VauPrompts {
    pub system: String,
    pub user: String,
}

/// Renders the user prompt, inserting the prior block at the
/// `{coarse_prior}` placeholder or, when absent, in front of the prompt.
pub fn render_user_prompt(user: &str, prior: Option<&CoarsePrior>, level: InjectionLevel) -> Result<String> {
    let block = match level {
        InjectionLevel::None => None,
        l => {
            let p = prior.ok_or(RefineError::MissingPrior(l))?;
            Some(format!("{}\n{}", prior_preamble(), p.to_json(l)))
        }
    };
    Ok(match (user.contains(PRIOR_PLACEHOLDER), block) {
        (true, Some(b)) => user.replace(PRIOR_PLACEHOLDER, &b),
        (true, None) => user.replace(PRIOR_PLACEHOLDER, "").trim_start().to_string(),
        (false, Some(b)) => format!("{b}\n\n{user}"),
        (false, None) => user.to_string(),
    })
}

pub fn build_vau_request(
    segment: &Segment,
    prompts: &VauPrompts,
    prior: Option<&CoarsePrior>,
    level: InjectionLevel,
) -> Result<ChatRequest> {
    Ok(ChatRequest {
        system: prompts.system.clone(),
        user: render_user_prompt(&prompts.user, prior, level)?,
        video_ref: Some(segment.video_ref()),
        history: Vec::new(),
        temperature: 0.0,
        max_tokens: VAU_MAX_TOKENS,
        tag: VAU_TAG.into(),
        seed: None,
    })
}

/// Parsed per-segment output of the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MllmVerdict {
    pub present: bool,
    pub start_time: f64,
    pub end_time: f64,
    pub abnormality: f64,
    pub description: String,
}

impl MllmVerdict {
    pub fn absent() -> Self {
        Self { present: false, start_time: 0.0, end_time: 0.0, abnormality: 0.0, description: String::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseIssue {
    /// No JSON object found at all.
    NoJson,
    /// Some but not all of the interval/score keys were present.
    Incomplete,
    /// A value had the wrong type.
    BadValue,
    /// Values had to be clipped into range.
    Clamped,
    /// start > end after clamping; treated as no anomaly.
    InvertedInterval,
    /// Description longer than the requested limit.
    LongDescription,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedVerdict {
    pub verdict: MllmVerdict,
    pub issues: Vec<ParseIssue>,
}

impl ParsedVerdict {
    pub fn is_failure(&self) -> bool {
        self.issues.iter().any(|i| matches!(i, ParseIssue::NoJson | ParseIssue::BadValue | ParseIssue::Incomplete))
    }
}

/// Byte ranges of top-level balanced `{...}` spans, honoring JSON strings.
fn balanced_objects(text: &str) -> impl Iterator<Item = &str> {
    let bytes = text.as_bytes();
    let mut starts = bytes.iter().enumerate().filter(|(_, &b)| b == b'{').map(|(i, _)| i);
    std::iter::from_fn(move || {
        for start in starts.by_ref() {
            let (mut depth, mut in_str, mut escaped) = (0usize, false, false);
            for (j, &b) in bytes.iter().enumerate().skip(start) {
                if in_str {
                    match b {
                        _ if escaped => escaped = false,
                        b'\\' => escaped = true,
                        b'"' => in_str = false,
                        _ => {}
                    }
                    continue;
                }
                match b {
                    b'"' => in_str = true,
                    b'{' => depth += 1,
                    b'}' => {
                        depth -= 1;
                        if depth == 0 {
                            return Some(&text[start..=j]);
                        }
                    }
                    _ => {}
                }
            }
        }
        None
    })
}

fn number(v: &serde_json::Value) -> Option<f64> {
    match v {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().trim_end_matches('s').trim().parse().ok(),
        _ => None,
    }
    .filter(|x: &f64| x.is_finite())
}

/// Extracts a verdict from free-form model output. Never fails: anything
/// unusable becomes an absent verdict with recorded issues.
pub fn parse_verdict(text: &str, segment: &Segment) -> ParsedVerdict {
    let obj = balanced_objects(text)
        .filter_map(|s| serde_json::from_str::<serde_json::Value>(s).ok())
        .find_map(|v| match v {
            serde_json::Value::Object(m) => Some(m),
            _ => None,
        });
    let Some(obj) = obj else {
        return ParsedVerdict { verdict: MllmVerdict::absent(), issues: vec![ParseIssue::NoJson] };
    };
    let mut issues = Vec::new();
    let keys = ["start_time", "end_time", "abnormality"];
    let present = keys.iter().filter(|k| obj.contains_key(**k)).count();
    if present == 0 {
        return ParsedVerdict { verdict: MllmVerdict::absent(), issues };
    }
    if present < keys.len() {
        issues.push(ParseIssue::Incomplete);
        return ParsedVerdict { verdict: MllmVerdict::absent(), issues };
    }
    let (Some(s), Some(e), Some(b)) = (number(&obj["start_time"]), number(&obj["end_time"]), number(&obj["abnormality"]))
    else {
        issues.push(ParseIssue::BadValue);
        return ParsedVerdict { verdict: MllmVerdict::absent(), issues };
    };
    let len = segment.len_s();
    let (cs, ce, cb) = (s.clamp(0.0, len), e.clamp(0.0, len), b.clamp(0.0, 1.0));
    if (cs, ce, cb) != (s, e, b) {
        issues.push(ParseIssue::Clamped);
    }
    let description = match obj.get("description") {
        Some(serde_json::Value::String(d)) => d.clone(),
        Some(serde_json::Value::Null) | None => String::new(),
        Some(other) => other.to_string(),
    };
    if description.chars().count() > MAX_DESCRIPTION_CHARS {
        issues.push(ParseIssue::LongDescription);
    }
    if cs > ce {
        issues.push(ParseIssue::InvertedInterval);
        return ParsedVerdict { verdict: MllmVerdict { description, ..MllmVerdict::absent() }, issues };
    }
    ParsedVerdict {
        verdict: MllmVerdict { present: true, start_time: cs, end_time: ce, abnormality: cb, description },
        issues,
    }
}

/// Step curve of a verdict over its segment, sampled at `rate`.
pub fn step_curve(verdict: &MllmVerdict, segment: &Segment, rate: f64) -> AnomalyCurve {
    let n = frame_count(segment.len_s(), rate);
    let values = (0..n)
        .map(|k| {
            let t = k as f64 / rate;
            if verdict.present && verdict.start_time <= t && t <= verdict.end_time {
                verdict.abnormality
            } else {
                0.0
            }
        })
        .collect();
    AnomalyCurve { rate, origin_s: segment.start_s, values }
}

/// Concatenates per-segment curves into one video curve starting at 0.
pub fn stitch(parts: &[(Segment, AnomalyCurve)]) -> Result<AnomalyCurve> {
    let Some((first_seg, first)) = parts.first() else {
        return Err(RefineError::Empty);
    };
    if first_seg.start_s.abs() > 1e-9 {
        return Err(RefineError::Gap(0));
    }
    let rate = first.rate;
    let mut values = Vec::new();
    for (i, (seg, c)) in parts.iter().enumerate() {
        if c.rate != rate {
            return Err(RefineError::RateMismatch);
        }
        if i > 0 && (seg.start_s - parts[i - 1].0.end_s).abs() > 1e-9 {
            return Err(RefineError::Gap(i));
        }
        values.extend_from_slice(&c.values);
    }
    Ok(AnomalyCurve { rate, origin_s: 0.0, values })
}

/// One line of the verdict log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub video_id: String,
    pub segment_index: usize,
    pub start_s: f64,
    pub end_s: f64,
    pub raw_text: Option<String>,
    pub verdict: MllmVerdict,
    pub warnings: Vec<ParseIssue>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Everything needed to refine one video.
pub struct RefineRequest<'a> {
    pub video_id: &'a str,
    pub duration_s: f64,
    /// Processing rate of the step curve.
    pub rate: f64,
    pub prompts: &'a VauPrompts,
    pub level: InjectionLevel,
    /// Coarse curve of the whole video; required unless `level` is none.
    pub coarse: Option<&'a AnomalyCurve>,
    pub threshold: f64,
    pub max_segment_s: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinedVideo {
    pub curve: AnomalyCurve,
    pub verdicts: Vec<VerdictRecord>,
}

impl RefinedVideo {
    /// Highest abnormality over present verdicts, 0 when none.
    pub fn video_score(&self) -> f64 {
        self.verdicts
            .iter()
            .filter(|v| v.verdict.present)
            .map(|v| v.verdict.abnormality)
            .fold(0.0, f64::max)
    }

    pub fn gateway_failures(&self) -> usize {
        self.verdicts.iter().filter(|v| v.error.is_some()).count()
    }
}

/// Error returned when a gateway failure should abort the whole video.
#[derive(Debug, Error)]
pub enum RefineRunError {
    #[error(transparent)]
    Refine(#[from] RefineError),
    #[error("segment {segment}: {source}")]
    Gateway {
        segment: usize,
        #[source]
        source: GatewayError,
    },
}

/// Queries every segment of a video and stitches the step curves.
///
/// With `abort_on_gateway_error` unset, a failed segment is logged as an
/// absent verdict carrying the error and the run continues.
pub fn refine_video(
    req: &RefineRequest<'_>,
    gateway: &Gateway,
    exec: Exec,
    abort_on_gateway_error: bool,
) -> Result<RefinedVideo, RefineRunError> {
    if req.level != InjectionLevel::None && req.coarse.is_none() {
        return Err(RefineError::MissingPrior(req.level).into());
    }
    let segments = partition_segments(req.video_id, req.duration_s, req.max_segment_s)?;
    let outcomes = exec.map(&segments, |seg| -> Result<(AnomalyCurve, VerdictRecord), RefineRunError> {
        let (prior, level) = match req.coarse {
            Some(c) if req.level != InjectionLevel::None => {
                let slice = c.slice_seconds(seg.start_s, seg.end_s);
                match compute_coarse_prior(&slice, req.threshold) {
                    Ok(p) => (Some(p), req.level),
                    // shorter than one sample: nothing to summarize
                    Err(_) => (None, InjectionLevel::None),
                }
            }
            _ => (None, InjectionLevel::None),
        };
        let chat = build_vau_request(seg, req.prompts, prior.as_ref(), level)?;
        let (raw_text, parsed, error) = match gateway.chat(&chat) {
            Ok(resp) => {
                let parsed = parse_verdict(&resp.text, seg);
                (Some(resp.text), parsed, None)
            }
            Err(e) if abort_on_gateway_error => {
                return Err(RefineRunError::Gateway { segment: seg.index, source: e });
            }
            Err(e) => (None, ParsedVerdict { verdict: MllmVerdict::absent(), issues: vec![] }, Some(e.to_string())),
        };
        let curve = step_curve(&parsed.verdict, seg, req.rate);
        let record = VerdictRecord {
            video_id: req.video_id.to_string(),
            segment_index: seg.index,
            start_s: seg.start_s,
            end_s: seg.end_s,
            raw_text,
            verdict: parsed.verdict,
            warnings: parsed.issues,
            error,
        };
        Ok((curve, record))
    });
    let mut parts = Vec::with_capacity(segments.len());
    let mut verdicts = Vec::with_capacity(segments.len());
    for (seg, outcome) in segments.into_iter().zip(outcomes) {
        let (curve, record) = outcome?;
        parts.push((seg, curve));
        verdicts.push(record);
    }
    Ok(RefinedVideo { curve: stitch(&parts)?, verdicts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assets::{prompts, PromptSet};
    use crate::ape::Task;
    use crate::gateway::{MatcherEntry, MockBackend, RetryPolicy};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn seg(len: f64) -> Segment {
        Segment { video_id: "v".into(), index: 0, start_s: 0.0, end_s: len }
    }

    #[test]
    fn partition_examples() {
        let s = partition_segments("v", 70.0, 30.0).unwrap();
        let spans: Vec<(f64, f64)> = s.iter().map(|s| (s.start_s, s.end_s)).collect();
        assert_eq!(spans, vec![(0.0, 30.0), (30.0, 60.0), (60.0, 70.0)]);
        assert_eq!(partition_segments("v", 30.0, 30.0).unwrap().len(), 1);
        assert_eq!(partition_segments("v", 0.0, 30.0), Err(RefineError::BadDuration(0.0)));
    }

    fn prior() -> CoarsePrior {
        let c = AnomalyCurve::new(1.0, 0.0, vec![0.0, 0.0, 0.8, 0.9, 0.7, 0.0]).unwrap();
        compute_coarse_prior(&c, 0.5).unwrap()
    }

    fn prior_block(user: &str) -> Option<serde_json::Value> {
        let start = user.find(prior_preamble())? + prior_preamble().len();
        balanced_objects(&user[start..]).next().and_then(|s| serde_json::from_str(s).ok())
    }

    #[test]
    fn request_levels() {
        let (system, user) = prompts(Task::Vau, PromptSet::Optimized);
        let p = VauPrompts { system: system.into(), user: user.into() };
        let none = build_vau_request(&seg(30.0), &p, None, InjectionLevel::None).unwrap();
        assert!(prior_block(&none.user).is_none());
        assert!(!none.user.contains(PRIOR_PLACEHOLDER));
        assert_eq!(none.temperature, 0.0);
        assert_eq!(none.video_ref.as_deref(), Some("v#t=0.00,30.00"));

        let full = build_vau_request(&seg(30.0), &p, Some(&prior()), InjectionLevel::LSTF).unwrap();
        let block = prior_block(&full.user).unwrap();
        assert_eq!(block.as_object().unwrap().len(), 4);

        let l = build_vau_request(&seg(30.0), &p, Some(&prior()), InjectionLevel::L).unwrap();
        let block = prior_block(&l.user).unwrap();
        assert_eq!(block.as_object().unwrap().keys().collect::<Vec<_>>(), vec!["coarse_video_label"]);

        assert_eq!(
            build_vau_request(&seg(30.0), &p, None, InjectionLevel::LS),
            Err(RefineError::MissingPrior(InjectionLevel::LS))
        );
    }

    #[test]
    fn base_prompt_gets_prior_prepended() {
        let (system, user) = prompts(Task::Vau, PromptSet::Base);
        let p = VauPrompts { system: system.into(), user: user.into() };
        let r = build_vau_request(&seg(30.0), &p, Some(&prior()), InjectionLevel::LS).unwrap();
        assert!(r.user.starts_with(prior_preamble()));
        assert!(r.user.ends_with(user));
    }

    #[test]
    fn parse_paper_verdict() {
        let t = r#"{"start_time": 10.00, "end_time": 19.00, "abnormality": 0.85, "description": "White van collides with motorcyclist, causing a crash."}"#;
        let p = parse_verdict(t, &seg(30.0));
        assert!(p.verdict.present);
        assert_eq!((p.verdict.start_time, p.verdict.end_time, p.verdict.abnormality), (10.0, 19.0, 0.85));
        assert!(p.verdict.description.starts_with("White van collides with motorcyclist"));
        assert!(p.issues.is_empty());
    }

    #[test]
    fn parse_empty_and_garbage() {
        let p = parse_verdict("{}", &seg(30.0));
        assert!(!p.verdict.present && p.issues.is_empty());
        let p = parse_verdict("I cannot tell.", &seg(30.0));
        assert!(!p.verdict.present);
        assert_eq!(p.issues, vec![ParseIssue::NoJson]);
    }

    #[test]
    fn parse_clamps() {
        let t = "Here you go:\n```json\n{\"start_time\": 12, \"end_time\": 45, \"abnormality\": 1.2, \"description\": \"x\"}\n```";
        let p = parse_verdict(t, &seg(30.0));
        assert!(p.verdict.present);
        assert_eq!((p.verdict.start_time, p.verdict.end_time, p.verdict.abnormality), (12.0, 30.0, 1.0));
        assert_eq!(p.issues, vec![ParseIssue::Clamped]);
    }

    #[test]
    fn parse_inverted_and_partial() {
        let p = parse_verdict(r#"{"start_time": 20, "end_time": 5, "abnormality": 0.5}"#, &seg(30.0));
        assert!(!p.verdict.present);
        assert!(p.issues.contains(&ParseIssue::InvertedInterval));
        let p = parse_verdict(r#"{"abnormality": 0.5}"#, &seg(30.0));
        assert!(!p.verdict.present);
        assert_eq!(p.issues, vec![ParseIssue::Incomplete]);
        let p = parse_verdict(r#"{"start_time": "1.5", "end_time": "3.25s", "abnormality": "0.4"}"#, &seg(30.0));
        assert!(p.verdict.present);
        assert_eq!(p.verdict.end_time, 3.25);
    }

    #[test]
    fn parse_skips_braces_inside_strings_and_invalid_spans() {
        let t = r#"{not json} then {"description": "a } b", "start_time": 1, "end_time": 2, "abnormality": 0.3}"#;
        let p = parse_verdict(t, &seg(30.0));
        assert!(p.verdict.present);
        assert_eq!(p.verdict.description, "a } b");
    }

    #[test]
    fn step_curve_examples() {
        let v = MllmVerdict { present: true, start_time: 10.0, end_time: 19.0, abnormality: 0.85, description: String::new() };
        let c = step_curve(&v, &seg(30.0), 1.0);
        let expect: Vec<f64> = (0..30).map(|k| if (10..=19).contains(&k) { 0.85 } else { 0.0 }).collect();
        assert_eq!(c.values, expect);
        assert_eq!(step_curve(&MllmVerdict::absent(), &seg(30.0), 1.0).values, vec![0.0; 30]);
        let point = MllmVerdict { start_time: 5.0, end_time: 5.0, ..v };
        let c = step_curve(&point, &seg(30.0), 1.0);
        assert_eq!(c.values.iter().filter(|&&x| x > 0.0).count(), 1);
        assert_eq!(c.values[5], 0.85);
    }

    #[test]
    fn stitch_examples() {
        let segs = partition_segments("v", 40.0, 30.0).unwrap();
        let a = AnomalyCurve { rate: 1.0, origin_s: 0.0, values: vec![0.1; 30] };
        let b = AnomalyCurve { rate: 1.0, origin_s: 30.0, values: vec![0.2; 10] };
        let s = stitch(&[(segs[0].clone(), a.clone()), (segs[1].clone(), b.clone())]).unwrap();
        assert_eq!(s.values.len(), 40);
        assert_eq!(s.values[29], 0.1);
        assert_eq!(s.values[30], 0.2);
        let mut gap = segs[1].clone();
        gap.start_s = 31.0;
        assert_eq!(stitch(&[(segs[0].clone(), a.clone()), (gap, b)]), Err(RefineError::Gap(1)));
        assert_eq!(stitch(&[(segs[0].clone(), a.clone())]).unwrap(), a);
    }

    #[test]
    fn refine_video_continues_past_failed_segment() {
        let mut e0 = MatcherEntry::fixed("vau", r#"{"start_time": 2, "end_time": 4, "abnormality": 0.9, "description": "fight"}"#);
        e0.video_ref = Some("v#t=0.00,30.00".into());
        let mut e1 = MatcherEntry::fixed("vau", "garbage");
        e1.video_ref = Some("v#t=30.00,60.00".into());
        // third segment has no matcher -> gateway error, logged
        let gw = Gateway::new(Arc::new(MockBackend::matchers(vec![e0, e1])), RetryPolicy::immediate(1), 2);
        let (s, u) = prompts(Task::Vau, PromptSet::Base);
        let p = VauPrompts { system: s.into(), user: u.into() };
        let req = RefineRequest {
            video_id: "v",
            duration_s: 70.0,
            rate: 1.0,
            prompts: &p,
            level: InjectionLevel::None,
            coarse: None,
            threshold: 0.5,
            max_segment_s: 30.0,
        };
        let out = refine_video(&req, &gw, Exec::Parallel, false).unwrap();
        assert_eq!(out.curve.values.len(), 70);
        assert_eq!(out.verdicts.len(), 3);
        assert_eq!(out.video_score(), 0.9);
        assert_eq!(out.verdicts[1].warnings, vec![ParseIssue::NoJson]);
        assert!(out.verdicts[2].error.is_some());
        assert_eq!(out.gateway_failures(), 1);
        assert!(refine_video(&req, &gw, Exec::Sequential, true).is_err());
    }

    proptest! {
        #[test]
        fn parse_never_panics(s in ".{0,200}") {
            let p = parse_verdict(&s, &seg(30.0));
            if p.verdict.present {
                prop_assert!(0.0 <= p.verdict.start_time && p.verdict.start_time <= p.verdict.end_time && p.verdict.end_time <= 30.0);
                prop_assert!((0.0..=1.0).contains(&p.verdict.abnormality));
            }
        }

        #[test]
        fn step_support_matches_oracle(us in 0.0f64..29.0, d in 0.0f64..10.0, b in 0.01f64..1.0, rate in prop::sample::select(vec![0.5, 1.0, 2.0])) {
            let ue = (us + d).min(29.0);
            let v = MllmVerdict { present: true, start_time: us, end_time: ue, abnormality: b, description: String::new() };
            let c = step_curve(&v, &seg(30.0), rate);
            for (k, &x) in c.values.iter().enumerate() {
                let t = k as f64 / rate;
                prop_assert_eq!(x, if us <= t && t <= ue { b } else { 0.0 });
            }
            let support = c.values.iter().filter(|&&x| x > 0.0).count() as i64;
            let oracle = (ue * rate).floor() as i64 - (us * rate).ceil() as i64 + 1;
            prop_assert_eq!(support, oracle.max(0));
        }

        #[test]
        fn stitched_zero_curves(duration in 1.0f64..200.0) {
            let duration = duration.floor();
            let segs = partition_segments("v", duration, 30.0).unwrap();
            let parts: Vec<_> = segs.iter().map(|s| (s.clone(), step_curve(&MllmVerdict::absent(), s, 1.0))).collect();
            let c = stitch(&parts).unwrap();
            prop_assert_eq!(c.values.len(), frame_count(duration, 1.0));
            prop_assert!(c.values.iter().all(|&x| x == 0.0));
        }
    }
}
