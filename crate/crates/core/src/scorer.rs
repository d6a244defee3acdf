//! Coarse frame-level anomaly scoring against a pair of textual anchors.
//!
//! Each sampled frame gets a two-way softmax over its cosine similarities to
//! the normal and abnormal anchor embeddings, sharpened by a temperature τ.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{fetch_text_embedding, CorpusError, EmbeddingMatrix, TextEmbedding, TextEncoder};

/// CLIP-style softmax temperature.
pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Debug, Error)]
pub enum ScoreError {
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("zero-norm vector")]
    ZeroNorm,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("anchor pair is not resolved to embeddings")]
    Unresolved,
    #[error("anchor texts must be non-empty")]
    EmptyAnchor,
    #[error("curve is empty")]
    EmptyCurve,
    #[error("threshold must lie in (0, 1), got {0}")]
    BadThreshold(f64),
    #[error("invalid curve: {0}")]
    InvalidCurve(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

pub type Result<T, E = ScoreError> = std::result::Result<T, E>;

/// Cosine similarity of two equal-length vectors, accumulated in f64.
pub fn cosine_similarity<T, U>(u: &[T], v: &[U]) -> Result<f64>
where
    T: Copy + Into<f64>,
    U: Copy + Into<f64>,
{
    if u.len() != v.len() {
        return Err(ScoreError::DimMismatch(u.len(), v.len()));
    }
    let (mut dot, mut nu, mut nv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        let (a, b): (f64, f64) = (a.into(), b.into());
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    if nu <= 0.0 || nv <= 0.0 {
        return Err(ScoreError::ZeroNorm);
    }
    Ok((dot / (nu.sqrt() * nv.sqrt())).clamp(-1.0, 1.0))
}

/// Two-way softmax of `(s_norm, s_abn) / tau`, returning the abnormal share.
///
/// Computed with max-subtraction so that large logits never overflow.
pub fn anomaly_score(s_norm: f64, s_abn: f64, tau: f64) -> f64 {
    let (ln, la) = (s_norm / tau, s_abn / tau);
    let m = ln.max(la);
    let (en, ea) = ((ln - m).exp(), (la - m).exp());
    ea / (en + ea)
}

/// Normal/abnormal textual anchors, optionally resolved to embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorPair {
    pub normal_text: String,
    pub abnormal_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normal_emb: Option<TextEmbedding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abnormal_emb: Option<TextEmbedding>,
}

impl AnchorPair {
    pub fn new(normal: impl Into<String>, abnormal: impl Into<String>) -> Result<Self> {
        let (normal_text, abnormal_text) = (normal.into(), abnormal.into());
        if normal_text.trim().is_empty() || abnormal_text.trim().is_empty() {
            return Err(ScoreError::EmptyAnchor);
        }
        Ok(Self { normal_text, abnormal_text, normal_emb: None, abnormal_emb: None })
    }

    /// Encodes both anchors with `encoder`.
    pub fn resolve(mut self, encoder: &dyn TextEncoder) -> Result<Self> {
        let n = fetch_text_embedding(&self.normal_text, encoder)?;
        let a = fetch_text_embedding(&self.abnormal_text, encoder)?;
        if n.dim != a.dim {
            return Err(ScoreError::DimMismatch(n.dim, a.dim));
        }
        self.normal_emb = Some(n);
        self.abnormal_emb = Some(a);
        Ok(self)
    }

    pub fn embeddings(&self) -> Result<(&TextEmbedding, &TextEmbedding)> {
        match (&self.normal_emb, &self.abnormal_emb) {
            (Some(n), Some(a)) => Ok((n, a)),
            _ => Err(ScoreError::Unresolved),
        }
    }
}

/// A uniformly sampled score series in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyCurve {
    pub rate: f64,
    pub origin_s: f64,
    pub values: Vec<f64>,
}

impl AnomalyCurve {
    pub fn new(rate: f64, origin_s: f64, values: Vec<f64>) -> Result<Self> {
        let c = Self { rate, origin_s, values };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(ScoreError::InvalidCurve(format!("rate {}", self.rate)));
        }
        if !(self.origin_s.is_finite() && self.origin_s >= 0.0) {
            return Err(ScoreError::InvalidCurve(format!("origin {}", self.origin_s)));
        }
        if let Some((i, v)) =
            self.values.iter().enumerate().find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(ScoreError::InvalidCurve(format!("value {v} at index {i}")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Samples whose instants fall in `[start_s, end_s)`, relative to the origin.
    pub fn slice_seconds(&self, start_s: f64, end_s: f64) -> AnomalyCurve {
        let lo = ((start_s * self.rate) - 1e-9).ceil().max(0.0) as usize;
        let hi = (((end_s * self.rate) - 1e-9).ceil().max(0.0) as usize).min(self.values.len());
        AnomalyCurve {
            rate: self.rate,
            origin_s: self.origin_s + start_s,
            values: self.values[lo.min(hi)..hi].to_vec(),
        }
    }
}

/// Scores every frame of `embeddings` against `anchors`.
pub fn score_frames(
    embeddings: &EmbeddingMatrix,
    anchors: &AnchorPair,
    tau: f64,
    rate: f64,
) -> Result<AnomalyCurve> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(ScoreError::BadTemperature(tau));
    }
    let (n, a) = anchors.embeddings()?;
    if embeddings.dim != n.dim {
        return Err(ScoreError::DimMismatch(embeddings.dim, n.dim));
    }
    let values = embeddings
        .rows()
        .map(|row| {
            let s_norm = cosine_similarity(row, &n.vector)?;
            let s_abn = cosine_similarity(row, &a.vector)?;
            Ok(anomaly_score(s_norm, s_abn, tau))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AnomalyCurve { rate, origin_s: 0.0, values })
}

/// Video-level reduction of a frame curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    Max,
    P90,
    P95,
    P99,
}

impl Aggregator {
    pub const ALL: [Aggregator; 4] = [Aggregator::Max, Aggregator::P90, Aggregator::P95, Aggregator::P99];

    pub fn as_str(self) -> &'static str {
        match self {
            Aggregator::Max => "max",
            Aggregator::P90 => "p90",
            Aggregator::P95 => "p95",
            Aggregator::P99 => "p99",
        }
    }
}

/// Percentile `q` in [0, 1] of `sorted` with linear interpolation at rank q·(n−1).
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn aggregate_video(curve: &AnomalyCurve, aggregator: Aggregator) -> Result<f64> {
    aggregate_values(&curve.values, aggregator)
}

pub fn aggregate_values(values: &[f64], aggregator: Aggregator) -> Result<f64> {
    if values.is_empty() {
        return Err(ScoreError::EmptyCurve);
    }
    let q = match aggregator {
        Aggregator::Max => return Ok(values.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
        Aggregator::P90 => 0.90,
        Aggregator::P95 => 0.95,
        Aggregator::P99 => 0.99,
    };
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_sorted(&sorted, q))
}

/// Frame statistics of the coarse curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameStats {
    pub max: f64,
    pub time_max: f64,
    pub median: f64,
    pub mean: f64,
    pub std: f64,
    pub abnormal_seconds: f64,
}

/// Statistical summary of a coarse curve, injected into MLLM prompts.
///
/// Times are relative to the first sample of the summarized curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoarsePrior {
    pub coarse_video_label: String,
    pub coarse_video_abnormality_score: f64,
    pub coarse_temporal_region: Vec<f64>,
    pub coarse_frame_abnormality_stats: FrameStats,
}

/// Which parts of the prior are exposed to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum InjectionLevel {
    #[serde(rename = "none")]
    None,
    L,
    LS,
    LST,
    #[default]
    LSTF,
}

impl InjectionLevel {
    pub const ALL: [InjectionLevel; 5] =
        [InjectionLevel::None, InjectionLevel::L, InjectionLevel::LS, InjectionLevel::LST, InjectionLevel::LSTF];

    fn rank(self) -> u8 {
        match self {
            InjectionLevel::None => 0,
            InjectionLevel::L => 1,
            InjectionLevel::LS => 2,
            InjectionLevel::LST => 3,
            InjectionLevel::LSTF => 4,
        }
    }

    pub fn label(self) -> bool {
        self.rank() >= 1
    }
    pub fn score(self) -> bool {
        self.rank() >= 2
    }
    pub fn region(self) -> bool {
        self.rank() >= 3
    }
    pub fn stats(self) -> bool {
        self.rank() >= 4
    }
}

impl std::str::FromStr for InjectionLevel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "none" => Ok(Self::None),
            "L" => Ok(Self::L),
            "LS" => Ok(Self::LS),
            "LST" => Ok(Self::LST),
            "LSTF" => Ok(Self::LSTF),
            other => Err(format!("unknown injection level '{other}'")),
        }
    }
}

fn fmt2(x: f64) -> String {
    let s = format!("{:.2}", x);
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

impl CoarsePrior {
    /// JSON rendering with every float at two decimals, restricted to the
    /// keys `level` allows. Keys keep the canonical order.
    pub fn to_json(&self, level: InjectionLevel) -> String {
        let mut parts = Vec::new();
        if level.label() {
            parts.push(format!(
                "  \"coarse_video_label\": {}",
                serde_json::to_string(&self.coarse_video_label).unwrap()
            ));
        }
        if level.score() {
            parts.push(format!(
                "  \"coarse_video_abnormality_score\": {}",
                fmt2(self.coarse_video_abnormality_score)
            ));
        }
        if level.region() {
            let r: Vec<String> = self.coarse_temporal_region.iter().map(|&x| fmt2(x)).collect();
            parts.push(format!("  \"coarse_temporal_region\": [{}]", r.join(", ")));
        }
        if level.stats() {
            let s = &self.coarse_frame_abnormality_stats;
            parts.push(format!(
                "  \"coarse_frame_abnormality_stats\": {{\n    \"max\": {},\n    \"time_max\": {},\n    \"median\": {},\n    \"mean\": {},\n    \"std\": {},\n    \"abnormal_seconds\": {}\n  }}",
                fmt2(s.max),
                fmt2(s.time_max),
                fmt2(s.median),
                fmt2(s.mean),
                fmt2(s.std),
                fmt2(s.abnormal_seconds)
            ));
        }
        if parts.is_empty() {
            return "{}".into();
        }
        format!("{{\n{}\n}}", parts.join(",\n"))
    }
}

/// Summarizes `curve` into a [`CoarsePrior`].
///
/// The temporal region is the longest maximal run of samples at or above
/// `threshold`; ties go to the higher run mean, then the earlier start.
pub fn compute_coarse_prior(curve: &AnomalyCurve, threshold: f64) -> Result<CoarsePrior> {
    let v = &curve.values;
    if v.is_empty() {
        return Err(ScoreError::EmptyCurve);
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(ScoreError::BadThreshold(threshold));
    }
    let n = v.len();
    let rate = curve.rate;

    let (mut argmax, mut max) = (0usize, v[0]);
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > max {
            max = x;
            argmax = i;
        }
    }
    let mut sorted = v.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    };
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let above = v.iter().filter(|&&x| x >= threshold).count();

    // (start, end_inclusive, mean)
    let mut best: Option<(usize, usize, f64)> = None;
    let mut i = 0;
    while i < n {
        if v[i] < threshold {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && v[i] >= threshold {
            i += 1;
        }
        let end = i - 1;
        let run_mean = v[start..=end].iter().sum::<f64>() / (end - start + 1) as f64;
        let better = match best {
            None => true,
            Some((bs, be, bm)) => {
                let (len, blen) = (end - start, be - bs);
                len > blen || (len == blen && run_mean > bm)
            }
        };
        if better {
            best = Some((start, end, run_mean));
        }
    }
    let region = best.map_or_else(Vec::new, |(s, e, _)| vec![s as f64 / rate, e as f64 / rate]);

    Ok(CoarsePrior {
        coarse_video_label: if max >= threshold { "abnormal" } else { "normal" }.into(),
        coarse_video_abnormality_score: max,
        coarse_temporal_region: region,
        coarse_frame_abnormality_stats: FrameStats {
            max,
            time_max: argmax as f64 / rate,
            median,
            mean,
            std: var.sqrt(),
            abnormal_seconds: above as f64 / rate,
        },
    })
}
