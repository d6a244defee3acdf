//! Dataset manifests, cached frame embeddings and text encoders.
//!
//! Ground-truth intervals are stored in native-frame indices with inclusive
//! ends. Any conversion to another rate goes through seconds: interval
//! `[s, e]` covers the half-open time span `[s / native_fps, (e + 1) / native_fps)`.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::RetryPolicy;
use crate::hashing::{fnv1a64, stream_unit};

/// Magic prefix of the binary embedding format.
pub const EMBEDDING_MAGIC: &[u8; 8] = b"PVEMB1\0\0";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("duplicate video id '{0}'")]
    DuplicateId(String),
    #[error("invalid record '{id}': {message}")]
    InvalidRecord { id: String, message: String },
    #[error("embedding file {path}: {message}")]
    BadEmbeddingFile { path: PathBuf, message: String },
    #[error("embedding shape mismatch for {path}: header says {expected} floats, payload has {actual}")]
    ShapeMismatch { path: PathBuf, expected: usize, actual: usize },
    #[error("video '{id}': expected {expected} frames from duration x sampled_fps, file has {actual}")]
    FrameCountMismatch { id: String, expected: usize, actual: usize },
    #[error("video '{id}': embedding row {row} has zero norm")]
    ZeroRow { id: String, row: usize },
    #[error("video '{id}': embedding file has no rows")]
    EmptyEmbeddings { id: String },
    #[error("encoder dimension must be at least 2, got {0}")]
    BadDimension(usize),
    #[error("encoder returned dimension {actual}, store expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("text to encode is empty")]
    EmptyText,
    #[error("embedding for '{0}' has zero norm")]
    ZeroNorm(String),
    #[error("encoder service failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
}

pub type Result<T, E = CorpusError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

impl Label {
    pub fn is_abnormal(self) -> bool {
        self == Label::Abnormal
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

fn default_sampled_fps() -> f64 {
    1.0
}

/// Metadata and labels for one untrimmed video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub duration_s: f64,
    pub native_fps: f64,
    #[serde(default = "default_sampled_fps")]
    pub sampled_fps: f64,
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_intervals: Option<Vec<[u64; 2]>>,
    pub embedding_path: String,
    pub split: Split,
}

/// Number of samples in `duration_s` seconds at `rate`, i.e. ⌊D × Y⌋.
///
/// A tiny tolerance absorbs products such as `0.1 * 30.0` landing just below
/// an integer.
pub fn frame_count(duration_s: f64, rate: f64) -> usize {
    (duration_s * rate + 1e-9).floor().max(0.0) as usize
}

impl VideoRecord {
    /// Number of native frames, round(duration × native_fps).
    pub fn native_frame_count(&self) -> u64 {
        (self.duration_s * self.native_fps).round() as u64
    }

    /// Number of sampled frames, ⌊duration × sampled_fps⌋.
    pub fn sampled_frame_count(&self) -> usize {
        frame_count(self.duration_s, self.sampled_fps)
    }

    pub fn intervals(&self) -> &[[u64; 2]] {
        self.gt_intervals.as_deref().unwrap_or(&[])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| CorpusError::InvalidRecord { id: self.id.clone(), message };
        if self.id.trim().is_empty() {
            return Err(bad("empty id".into()));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(bad(format!("duration_s must be > 0, got {}", self.duration_s)));
        }
        if !(self.native_fps.is_finite() && self.native_fps > 0.0) {
            return Err(bad(format!("native_fps must be > 0, got {}", self.native_fps)));
        }
        if !(self.sampled_fps.is_finite() && self.sampled_fps > 0.0) {
            return Err(bad(format!("sampled_fps must be > 0, got {}", self.sampled_fps)));
        }
        if self.sampled_fps > self.native_fps {
            return Err(bad(format!(
                "sampled_fps {} exceeds native_fps {}",
                self.sampled_fps, self.native_fps
            )));
        }
        if self.label == Label::Normal && !self.intervals().is_empty() {
            return Err(bad("normal video carries ground-truth intervals".into()));
        }
        let n = self.native_frame_count();
        for &[s, e] in self.intervals() {
            if s > e || e >= n {
                return Err(bad(format!(
                    "interval [{s}, {e}] outside 0 <= start <= end < {n} native frames"
                )));
            }
        }
        Ok(())
    }
}

/// A parsed dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dim: usize,
    pub videos: Vec<VideoRecord>,
    /// Directory relative embedding paths are resolved against.
    #[serde(skip)]
    pub root: PathBuf,
}

impl Manifest {
    pub fn embedding_file(&self, record: &VideoRecord) -> PathBuf {
        resolve(&self.root, &record.embedding_path)
    }

    pub fn load_embeddings(&self, record: &VideoRecord) -> Result<EmbeddingMatrix> {
        load_embeddings(record, &self.root)
    }

    pub fn get(&self, id: &str) -> Option<&VideoRecord> {
        self.videos.iter().find(|v| v.id == id)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoRecord> {
        self.videos.iter().filter(move |v| v.split == split)
    }
}

fn resolve(root: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

/// Loads and validates a manifest. Record order is preserved.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let mut manifest: Manifest = serde_json::from_str(&text).map_err(|e| CorpusError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    validate_records(&manifest.videos)?;
    Ok(manifest)
}

pub fn validate_records(videos: &[VideoRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    for v in videos {
        v.validate()?;
        if !seen.insert(v.id.as_str()) {
            return Err(CorpusError::DuplicateId(v.id.clone()));
        }
    }
    Ok(())
}

/// Per-frame pooled visual embeddings for one video, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    pub n_frames: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(n_frames: usize, dim: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n_frames * dim, "embedding payload does not match shape");
        Self { n_frames, dim, data }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }
}

/// Writes `m` in the `PVEMB1` binary layout.
pub fn write_embeddings(path: impl AsRef<Path>, m: &EmbeddingMatrix) -> Result<()> {
    let path = path.as_ref();
    let io = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    w.write_all(EMBEDDING_MAGIC).map_err(io)?;
    w.write_all(&(m.n_frames as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(m.dim as u32).to_le_bytes()).map_err(io)?;
    for x in &m.data {
        w.write_all(&x.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a `PVEMB1` file, checking only the header against the payload.
pub fn read_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let io = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(io)?).read_to_end(&mut bytes).map_err(io)?;
    let bad = |message: &str| CorpusError::BadEmbeddingFile {
        path: path.to_path_buf(),
        message: message.to_string(),
    };
    if bytes.len() < 16 {
        return Err(bad("file shorter than the 16-byte header"));
    }
    if &bytes[..8] != EMBEDDING_MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let n_frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let payload = &bytes[16..];
    let expected = n_frames * dim;
    if payload.len() % 4 != 0 || payload.len() / 4 != expected {
        return Err(CorpusError::ShapeMismatch {
            path: path.to_path_buf(),
            expected,
            actual: payload.len() / 4,
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(EmbeddingMatrix { n_frames, dim, data })
}

/// Loads the cached embeddings of `record` and checks them against it.
pub fn load_embeddings(record: &VideoRecord, root: &Path) -> Result<EmbeddingMatrix> {
    let path = resolve(root, &record.embedding_path);
    let m = read_embeddings(&path)?;
    if m.n_frames == 0 {
        return Err(CorpusError::EmptyEmbeddings { id: record.id.clone() });
    }
    let expected = record.sampled_frame_count();
    if m.n_frames != expected {
        return Err(CorpusError::FrameCountMismatch {
            id: record.id.clone(),
            expected,
            actual: m.n_frames,
        });
    }
    for (i, row) in m.rows().enumerate() {
        let sq: f64 = row.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
        if !(sq > 0.0 && sq.is_finite()) {
            return Err(CorpusError::ZeroRow { id: record.id.clone(), row: i });
        }
    }
    Ok(m)
}

/// Ground-truth frame labels of `record` sampled at `rate`.
///
/// Length is ⌊D × rate⌋ when `rate` equals the record's sampled rate and
/// round(D × rate) otherwise. Sample k is positive iff the instant k / rate
/// falls inside some interval converted to seconds.
pub fn frame_labels(record: &VideoRecord, rate: f64) -> Vec<u8> {
    assert!(rate > 0.0, "rate must be positive");
    let len = if rate == record.sampled_fps {
        frame_count(record.duration_s, rate)
    } else {
        (record.duration_s * rate).round() as usize
    };
    let spans: Vec<(f64, f64)> = record
        .intervals()
        .iter()
        .map(|&[s, e]| (s as f64 / record.native_fps, (e + 1) as f64 / record.native_fps))
        .collect();
    (0..len)
        .map(|k| {
            let t = k as f64 / rate;
            u8::from(spans.iter().any(|&(a, b)| a <= t && t < b))
        })
        .collect()
}

/// A pooled text embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEmbedding {
    pub text: String,
    pub dim: usize,
    pub vector: Vec<f64>,
}

impl TextEmbedding {
    pub fn new(text: impl Into<String>, vector: Vec<f64>) -> Result<Self> {
        let text = text.into();
        let sq: f64 = vector.iter().map(|x| x * x).sum();
        if !(sq > 0.0 && sq.is_finite()) {
            return Err(CorpusError::ZeroNorm(text));
        }
        Ok(Self { dim: vector.len(), text, vector })
    }
}

/// Deterministic stand-in encoder: FNV-1a hash of the text seeds a SplitMix64
/// counter stream, `dim` draws in [-1, 1) are unit-normalized.
pub fn mock_encode(seed_text: &str, dim: usize) -> Result<TextEmbedding> {
    TextEmbedding::new(seed_text, mock_vector(seed_text, dim)?)
}

pub(crate) fn mock_vector(seed_text: &str, dim: usize) -> Result<Vec<f64>> {
    if dim < 2 {
        return Err(CorpusError::BadDimension(dim));
    }
    let seed = fnv1a64(seed_text.as_bytes());
    let raw: Vec<f64> = (0..dim as u64).map(|k| stream_unit(seed, k)).collect();
    let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(CorpusError::ZeroNorm(seed_text.to_string()));
    }
    Ok(raw.into_iter().map(|x| x / norm).collect())
}

/// A text encoder backend.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, text: &str) -> Result<TextEmbedding>;
}

#[derive(Debug, Clone)]
pub struct MockEncoder {
    pub dim: usize,
}

impl MockEncoder {
    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(CorpusError::BadDimension(dim));
        }
        Ok(Self { dim })
    }
}

impl TextEncoder for MockEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<TextEmbedding> {
        mock_encode(text, self.dim)
    }
}

/// Client for an external encoder service (`POST /v1/embeddings`).
///
/// Responses are memoized per instance so that identical text yields the
/// identical vector for the lifetime of the session.
pub struct ServiceEncoder {
    base_url: String,
    dim: usize,
    retry: RetryPolicy,
    agent: ureq::Agent,
    cache: Mutex<HashMap<String, TextEmbedding>>,
}

#[derive(Serialize)]
struct EmbeddingRequest<'a> {
    input: &'a str,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    embedding: Vec<f64>,
}

impl ServiceEncoder {
    pub fn new(base_url: impl Into<String>, dim: usize, timeout: Duration, retry: RetryPolicy) -> Self {
        let config = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            dim,
            retry,
            agent: ureq::Agent::new_with_config(config),
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn request_once(&self, text: &str) -> std::result::Result<Vec<f64>, (bool, String)> {
        let url = format!("{}/v1/embeddings", self.base_url);
        let mut resp = self
            .agent
            .post(&url)
            .send_json(&EmbeddingRequest { input: text })
            .map_err(|e| (true, e.to_string()))?;
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Err((true, format!("HTTP {status}")));
        }
        if status != 200 {
            return Err((false, format!("HTTP {status}")));
        }
        let body: EmbeddingResponse =
            resp.body_mut().read_json().map_err(|e| (false, e.to_string()))?;
        Ok(body.embedding)
    }
}

impl TextEncoder for ServiceEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, text: &str) -> Result<TextEmbedding> {
        if let Some(hit) = self.cache.lock().unwrap().get(text) {
            return Ok(hit.clone());
        }
        let mut attempt = 0;
        let vector = loop {
            attempt += 1;
            match self.request_once(text) {
                Ok(v) => break v,
                Err((retryable, message)) => {
                    if !retryable || attempt >= self.retry.max_attempts {
                        return Err(CorpusError::Transport { attempts: attempt, message });
                    }
                    std::thread::sleep(self.retry.delay(attempt));
                }
            }
        };
        if vector.len() != self.dim {
            return Err(CorpusError::DimensionMismatch { expected: self.dim, actual: vector.len() });
        }
        let emb = TextEmbedding::new(text, vector)?;
        self.cache.lock().unwrap().insert(text.to_string(), emb.clone());
        Ok(emb)
    }
}

/// Encodes `text` with `backend`, rejecting empty input before dispatch and
/// checking the returned dimension.
pub fn fetch_text_embedding(text: &str, backend: &dyn TextEncoder) -> Result<TextEmbedding> {
    if text.trim().is_empty() {
        return Err(CorpusError::EmptyText);
    }
    let emb = backend.encode(text)?;
    if emb.vector.len() != backend.dim() {
        return Err(CorpusError::DimensionMismatch { expected: backend.dim(), actual: emb.vector.len() });
    }
    Ok(emb)
}
