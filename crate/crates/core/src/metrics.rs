//! Evaluation protocols: ROC AUC, average precision, F1/FPR at a fixed
//! threshold, Pearson correlation, per-category AUC, explanation similarity
//! and the frame-level report over a whole test split.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{frame_labels, Label, VideoRecord};
use crate::par::Exec;
use crate::scorer::{cosine_similarity, AnomalyCurve};
use crate::signal::{self, Upsampler};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("both classes are required")]
    SingleClass,
    #[error("length mismatch: {0} scores vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("no positive samples")]
    NoPositives,
    #[error("no negative samples")]
    NoNegatives,
    #[error("series is constant")]
    Constant,
    #[error("need at least two samples")]
    TooShort,
    #[error("non-finite score")]
    NonFinite,
    #[error("unknown category '{0}'")]
    UnknownCategory(String),
    #[error("empty pool for category '{0}'")]
    EmptyPool(String),
    #[error("video {0}: empty prediction or ground-truth list")]
    EmptyList(usize),
    #[error("no curve for video '{0}'")]
    MissingCurve(String),
    #[error("video '{id}': {actual} scores after upsampling, {expected} labels")]
    RateMismatch { id: String, expected: usize, actual: usize },
    #[error("signal: {0}")]
    Signal(String),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

/// ROC AUC as the Mann–Whitney statistic with half credit for ties,
/// computed from midrank sums in O(n log n).
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l != 0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1
        let midrank = (i + j + 2) as f64 / 2.0;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] != 0).count();
        rank_sum += midrank * tied_pos as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision over the ranking (score descending, index ascending):
/// the mean of precision@k over the ranks k of positive samples.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l != 0).count();
    if pos == 0 {
        return Err(MetricError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    // stable: equal scores keep index order
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] != 0 {
            hits += 1;
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    Ok(sum / pos as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

pub fn confusion_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    check_inputs(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// F1 with prediction `score >= threshold`; 0 when there are no true positives.
pub fn f1_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    let c = confusion_at(scores, labels, threshold)?;
    if c.tp + c.fn_ == 0 {
        return Err(MetricError::NoPositives);
    }
    Ok(if c.tp == 0 { 0.0 } else { 2.0 * c.tp as f64 / (2 * c.tp + c.fp + c.fn_) as f64 })
}

pub fn fpr_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    let c = confusion_at(scores, labels, threshold)?;
    if c.fp + c.tn == 0 {
        return Err(MetricError::NoNegatives);
    }
    Ok(c.fp as f64 / (c.fp + c.tn) as f64)
}

/// `(f1, fpr)` at `threshold`; requires both classes.
pub fn f1_fpr_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64)> {
    Ok((f1_at(scores, labels, threshold)?, fpr_at(scores, labels, threshold)?))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(MetricError::TooShort);
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::Constant);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Frame scores and labels of one video, materialized at a common rate.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoFrames {
    pub id: String,
    pub label: Label,
    pub category: Option<String>,
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

/// ROC AUC over the frames of all abnormal videos of `category`, pooled with
/// the frames of every normal video when `include_normals` is set.
pub fn per_category_auc(videos: &[VideoFrames], category: &str, include_normals: bool) -> Result<f64> {
    if !videos.iter().any(|v| v.label == Label::Abnormal && v.category.as_deref() == Some(category)) {
        return Err(MetricError::UnknownCategory(category.to_string()));
    }
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for v in videos {
        let take = (v.label == Label::Abnormal && v.category.as_deref() == Some(category))
            || (include_normals && v.label == Label::Normal);
        if take {
            s.extend_from_slice(&v.scores);
            l.extend_from_slice(&v.labels);
        }
    }
    if s.is_empty() {
        return Err(MetricError::EmptyPool(category.to_string()));
    }
    roc_auc(&s, &l)
}

/// Explanation similarity: every prediction takes its maximum cosine to the
/// video's ground-truth sentences, videos average their predictions, the
/// dataset averages its videos.
pub fn semantic_similarity(pred: &[Vec<Vec<f64>>], gt: &[Vec<Vec<f64>>]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(MetricError::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::EmptyList(0));
    }
    let mut total = 0.0;
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        total += video_semantic_similarity(p, g).map_err(|_| MetricError::EmptyList(i))?;
    }
    Ok(total / pred.len() as f64)
}

pub fn video_semantic_similarity(pred: &[Vec<f64>], gt: &[Vec<f64>]) -> Result<f64> {
    if pred.is_empty() || gt.is_empty() {
        return Err(MetricError::EmptyList(0));
    }
    let mut sum = 0.0;
    for p in pred {
        let mut best = f64::NEG_INFINITY;
        for g in gt {
            let c = cosine_similarity(p, g).map_err(|e| MetricError::Signal(e.to_string()))?;
            best = best.max(c);
        }
        sum += best;
    }
    Ok(sum / pred.len() as f64)
}

/// Dataset-level frame metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub roc_auc: f64,
    pub ap: f64,
    pub f1: f64,
    pub fpr: f64,
    pub n_frames: usize,
}

pub fn frame_report(frames: &[VideoFrames], threshold: f64) -> Result<FrameReport> {
    let scores: Vec<f64> = frames.iter().flat_map(|v| v.scores.iter().copied()).collect();
    let labels: Vec<u8> = frames.iter().flat_map(|v| v.labels.iter().copied()).collect();
    let (f1, fpr) = f1_fpr_at(&scores, &labels, threshold)?;
    Ok(FrameReport {
        roc_auc: roc_auc(&scores, &labels)?,
        ap: average_precision(&scores, &labels)?,
        f1,
        fpr,
        n_frames: scores.len(),
    })
}

/// Brings `values` to `target` samples when they differ by less than one
/// source sample's worth of output frames, repeating the last value or
/// dropping trailing samples.
fn align_length(id: &str, mut values: Vec<f64>, target: usize, slack: usize) -> Result<Vec<f64>> {
    if values.len().abs_diff(target) > slack || values.is_empty() {
        return Err(MetricError::RateMismatch { id: id.to_string(), expected: target, actual: values.len() });
    }
    let last = *values.last().unwrap();
    values.resize(target, last);
    Ok(values)
}

/// Materializes every record's scores at its native frame rate (upsampling
/// with `upsampler` when needed) next to its frame labels. Order follows
/// `records`.
pub fn materialize_native(
    records: &[&VideoRecord],
    curves: &HashMap<String, AnomalyCurve>,
    upsampler: Upsampler,
    exec: Exec,
) -> Result<Vec<VideoFrames>> {
    exec.try_map(records, |r| {
        let curve = curves.get(&r.id).ok_or_else(|| MetricError::MissingCurve(r.id.clone()))?;
        let labels = frame_labels(r, r.native_fps);
        let native = if (curve.rate - r.native_fps).abs() < 1e-9 {
            curve.clone()
        } else {
            signal::upsample(curve, r.native_fps, upsampler).map_err(|e| MetricError::Signal(e.to_string()))?
        };
        let slack = (r.native_fps / curve.rate).ceil() as usize;
        let scores = align_length(&r.id, native.values, labels.len(), slack)?;
        Ok(VideoFrames { id: r.id.clone(), label: r.label, category: r.category.clone(), scores, labels })
    })
}

/// Frame-level evaluation of `curves` over `records`.
pub fn frame_eval(
    records: &[&VideoRecord],
    curves: &HashMap<String, AnomalyCurve>,
    upsampler: Upsampler,
    threshold: f64,
    exec: Exec,
) -> Result<FrameReport> {
    frame_report(&materialize_native(records, curves, upsampler, exec)?, threshold)
}

/// Per-category AUCs for every category present among abnormal videos.
pub fn all_category_aucs(frames: &[VideoFrames], include_normals: bool) -> BTreeMap<String, f64> {
    let mut cats: Vec<&str> = frames
        .iter()
        .filter(|v| v.label == Label::Abnormal)
        .filter_map(|v| v.category.as_deref())
        .collect();
    cats.sort_unstable();
    cats.dedup();
    cats.into_iter()
        .filter_map(|c| per_category_auc(frames, c, include_normals).ok().map(|a| (c.to_string(), a)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Split;
    use proptest::prelude::*;

    fn brute_auc(s: &[f64], l: &[u8]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] == 1 && l[j] == 0 {
                    pairs += 1.0;
                    credit += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn auc_examples() {
        let s = [0.35, 0.8, 0.1, 0.4];
        let l = [1, 1, 0, 0];
        assert_eq!(brute_auc(&s, &l), 0.75);
        assert_eq!(roc_auc(&s, &l).unwrap(), 0.75);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.2, 0.3], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.4; 6], &[1, 0, 1, 0, 0, 1]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(MetricError::SingleClass));
        assert_eq!(roc_auc(&[0.1], &[1, 0]), Err(MetricError::LengthMismatch(1, 2)));
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.1, 0.5], &[1, 1]).unwrap(), 1.0);
        // ties: positives first by index -> precision 1 at both positive ranks
        assert_eq!(average_precision(&[0.5; 4], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert!((average_precision(&[0.5; 4], &[0, 0, 1, 1]).unwrap() - (1.0 / 3.0 + 0.5) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.5], &[0]), Err(MetricError::NoPositives));
    }

    #[test]
    fn f1_fpr_examples() {
        let (f1, fpr) = f1_fpr_at(&[0.6, 0.4, 0.7], &[1, 0, 0], 0.5).unwrap();
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(fpr, 0.5);
        assert_eq!(f1_fpr_at(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), (1.0, 0.0));
        assert_eq!(f1_at(&[0.1, 0.2], &[1, 0], 0.5).unwrap(), 0.0);
        assert_eq!(fpr_at(&[0.1], &[1], 0.5), Err(MetricError::NoNegatives));
    }

    #[test]
    fn pearson_examples() {
        let x = [1.0, 2.0, 3.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&x, &[-1.0, -2.0, -3.0]).unwrap() + 1.0).abs() < 1e-15);
        // means 2 and 7/3; sxy = 3, sxx = 2, syy = 14/3
        let oracle = 3.0 / (2.0f64 * 14.0 / 3.0).sqrt();
        let r = pearson(&x, &[1.0, 2.0, 4.0]).unwrap();
        assert!((r - oracle).abs() < 1e-15);
        assert!((r - 0.98198).abs() < 1e-5);
        assert_eq!(pearson(&x, &[1.0, 1.0, 1.0]), Err(MetricError::Constant));
    }

    #[test]
    fn semantic_examples() {
        let e = |v: &[f64]| v.to_vec();
        let gt = vec![vec![e(&[1.0, 0.0]), e(&[0.0, 1.0])]];
        assert!((semantic_similarity(&gt, &gt).unwrap() - 1.0).abs() < 1e-12);
        let pred = vec![vec![e(&[0.0, 0.0, 1.0])]];
        let gt3 = vec![vec![e(&[1.0, 0.0, 0.0]), e(&[0.0, 1.0, 0.0])]];
        assert!(semantic_similarity(&pred, &gt3).unwrap().abs() < 1e-12);
        assert!(semantic_similarity(&[vec![]], &gt).is_err());
    }

    #[test]
    fn semantic_row_max_example() {
        // two predictions and two ground truths with a prescribed cosine table
        // {{0.9, 0.2}, {0.1, 0.6}}: ground truths are orthonormal, predictions
        // have those coordinates plus an orthogonal component to unit length.
        let g = vec![vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
        let p1 = vec![0.9, 0.2, (1.0f64 - 0.81 - 0.04).sqrt(), 0.0];
        let p2 = vec![0.1, 0.6, 0.0, (1.0f64 - 0.01 - 0.36).sqrt()];
        let s = semantic_similarity(&[vec![p1, p2]], &[g]).unwrap();
        assert!((s - 0.75).abs() < 1e-12);
    }

    fn rec(id: &str, label: Label, cat: Option<&str>, gt: Option<Vec<[u64; 2]>>) -> VideoRecord {
        VideoRecord {
            id: id.into(),
            duration_s: 4.0,
            native_fps: 2.0,
            sampled_fps: 1.0,
            label,
            category: cat.map(Into::into),
            gt_intervals: gt,
            embedding_path: String::new(),
            split: Split::Test,
        }
    }

    #[test]
    fn frame_eval_composes_metric_oracles() {
        let a = rec("a", Label::Abnormal, Some("Arson"), Some(vec![[2, 5]]));
        let n = rec("n", Label::Normal, None, None);
        let mut curves = HashMap::new();
        curves.insert("a".to_string(), AnomalyCurve::new(1.0, 0.0, vec![0.1, 0.7, 0.9, 0.2]).unwrap());
        curves.insert("n".to_string(), AnomalyCurve::new(1.0, 0.0, vec![0.3, 0.6, 0.0, 0.1]).unwrap());
        let recs = [&a, &n];
        let report = frame_eval(&recs, &curves, Upsampler::FillForward, 0.5, Exec::Sequential).unwrap();
        // fill-forward to 2 FPS doubles each sample
        let s = [0.1, 0.1, 0.7, 0.7, 0.9, 0.9, 0.2, 0.2, 0.3, 0.3, 0.6, 0.6, 0.0, 0.0, 0.1, 0.1];
        let l = [0, 0, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        assert_eq!(report.roc_auc, brute_auc(&s, &l));
        assert_eq!(report.ap, average_precision(&s, &l).unwrap());
        assert_eq!((report.f1, report.fpr), f1_fpr_at(&s, &l, 0.5).unwrap());
        assert_eq!(report.n_frames, 16);
    }

    #[test]
    fn frame_eval_degenerate_and_perfect() {
        let a = rec("a", Label::Abnormal, Some("Arson"), Some(vec![[2, 5]]));
        let n = rec("n", Label::Normal, None, None);
        let recs = [&a, &n];
        let mut zero = HashMap::new();
        zero.insert("a".to_string(), AnomalyCurve::new(2.0, 0.0, vec![0.0; 8]).unwrap());
        zero.insert("n".to_string(), AnomalyCurve::new(2.0, 0.0, vec![0.0; 8]).unwrap());
        let r = frame_eval(&recs, &zero, Upsampler::Fourier, 0.5, Exec::Sequential).unwrap();
        assert_eq!((r.roc_auc, r.f1), (0.5, 0.0));

        let mut perfect = HashMap::new();
        let gt: Vec<f64> = frame_labels(&a, 2.0).iter().map(|&x| x as f64).collect();
        perfect.insert("a".to_string(), AnomalyCurve::new(2.0, 0.0, gt).unwrap());
        perfect.insert("n".to_string(), AnomalyCurve::new(2.0, 0.0, vec![0.0; 8]).unwrap());
        let r = frame_eval(&recs, &perfect, Upsampler::Fourier, 0.5, Exec::Parallel).unwrap();
        assert_eq!((r.roc_auc, r.f1, r.fpr), (1.0, 1.0, 0.0));

        let mut missing = perfect.clone();
        missing.remove("n");
        assert_eq!(
            frame_eval(&recs, &missing, Upsampler::Fourier, 0.5, Exec::Sequential),
            Err(MetricError::MissingCurve("n".into()))
        );
    }

    #[test]
    fn per_category_examples() {
        let frames = vec![
            VideoFrames { id: "a".into(), label: Label::Abnormal, category: Some("Arson".into()), scores: vec![0.9, 0.2], labels: vec![1, 0] },
            VideoFrames { id: "b".into(), label: Label::Abnormal, category: Some("Theft".into()), scores: vec![0.1, 0.6], labels: vec![1, 0] },
            VideoFrames { id: "n".into(), label: Label::Normal, category: None, scores: vec![0.0, 0.3], labels: vec![0, 0] },
        ];
        let arson = per_category_auc(&frames, "Arson", true).unwrap();
        assert_eq!(arson, brute_auc(&[0.9, 0.2, 0.0, 0.3], &[1, 0, 0, 0]));
        assert_eq!(arson, 1.0);
        let theft = per_category_auc(&frames, "Theft", true).unwrap();
        assert_eq!(theft, brute_auc(&[0.1, 0.6, 0.0, 0.3], &[1, 0, 0, 0]));
        assert_eq!(per_category_auc(&frames, "Theft", false).unwrap(), 0.0);
        assert!(matches!(per_category_auc(&frames, "Riot", true), Err(MetricError::UnknownCategory(_))));
        assert_eq!(all_category_aucs(&frames, true).len(), 2);
    }

    proptest! {
        #[test]
        fn auc_complement(v in proptest::collection::vec((0u8..5, 0u8..2), 2..64)) {
            let s: Vec<f64> = v.iter().map(|(x, _)| *x as f64 / 4.0).collect();
            let l: Vec<u8> = v.iter().map(|(_, y)| *y).collect();
            let flipped: Vec<u8> = l.iter().map(|x| 1 - x).collect();
            prop_assume!(l.contains(&0) && l.contains(&1));
            let a = roc_auc(&s, &l).unwrap();
            prop_assert!((a + roc_auc(&s, &flipped).unwrap() - 1.0).abs() < 1e-12);
            prop_assert_eq!(a, brute_auc(&s, &l));
            let cubed: Vec<f64> = s.iter().map(|x| x * x * x).collect();
            prop_assert_eq!(a, roc_auc(&cubed, &l).unwrap());
        }

        #[test]
        fn semantic_duplicate_gt_invariant(
            p in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 1..4),
            g in proptest::collection::vec(proptest::collection::vec(-1.0f64..1.0, 4), 1..4),
            dup in 0usize..4,
        ) {
            prop_assume!(p.iter().chain(&g).all(|v| v.iter().any(|x| x.abs() > 1e-3)));
            let base = semantic_similarity(&[p.clone()], &[g.clone()]).unwrap();
            let mut g2 = g.clone();
            g2.push(g[dup % g.len()].clone());
            prop_assert_eq!(base, semantic_similarity(&[p], &[g2]).unwrap());
        }
    }
}
