//! Synthetic mini-dataset for end-to-end runs without real data or models.
//!
//! Eight videos of 60 to 90 s (two normal and two abnormal per split) with
//! 16-dimensional frame embeddings. Frames inside ground-truth intervals
//! lean towards the abnormal anchor embedding, the rest towards the normal
//! one, with deterministic noise. A matcher script for the mock gateway
//! answers every segment with a verdict derived from the ground truth.

use std::path::{Path, PathBuf};

use serde_json::json;

use crate::ape::Task;
use crate::assets::{prompts, PromptSet};
use crate::corpus::{mock_encode, write_embeddings, EmbeddingMatrix, Label, Manifest, Split, VideoRecord};
use crate::gateway::{MatcherEntry, MockReply, MockScript};
use crate::hashing::{fnv1a64, stream_unit};
use crate::pipeline::{write_atomic, write_json, PipelineError, Result};
use crate::refiner::{partition_segments, MAX_SEGMENT_S};

pub const DEMO_DIM: usize = 16;
pub const CHAT_TAG: &str = "chat";
const NOISE: f64 = 0.9;

struct DemoVideo {
    id: &'static str,
    duration_s: f64,
    label: Label,
    category: Option<&'static str>,
    /// Ground truth in seconds, end exclusive.
    gt_s: &'static [(f64, f64)],
    split: Split,
}

const VIDEOS: [DemoVideo; 8] = [
    DemoVideo { id: "train_fight_01", duration_s: 60.0, label: Label::Abnormal, category: Some("Fighting"), gt_s: &[(20.0, 34.0)], split: Split::Train },
    DemoVideo { id: "train_explosion_01", duration_s: 75.0, label: Label::Abnormal, category: Some("Explosion"), gt_s: &[(41.0, 52.0)], split: Split::Train },
    DemoVideo { id: "train_normal_01", duration_s: 60.0, label: Label::Normal, category: None, gt_s: &[], split: Split::Train },
    DemoVideo { id: "train_normal_02", duration_s: 90.0, label: Label::Normal, category: None, gt_s: &[], split: Split::Train },
    DemoVideo { id: "test_fight_01", duration_s: 70.0, label: Label::Abnormal, category: Some("Fighting"), gt_s: &[(10.0, 20.0), (52.0, 60.0)], split: Split::Test },
    DemoVideo { id: "test_explosion_01", duration_s: 90.0, label: Label::Abnormal, category: Some("Explosion"), gt_s: &[(33.0, 47.0)], split: Split::Test },
    DemoVideo { id: "test_normal_01", duration_s: 65.0, label: Label::Normal, category: None, gt_s: &[], split: Split::Test },
    DemoVideo { id: "test_normal_02", duration_s: 80.0, label: Label::Normal, category: None, gt_s: &[], split: Split::Test },
];

pub const NATIVE_FPS: f64 = 30.0;

/// The eight demo records, with embedding paths relative to the manifest.
pub fn demo_records() -> Vec<VideoRecord> {
    VIDEOS
        .iter()
        .map(|s| VideoRecord {
            id: s.id.into(),
            duration_s: s.duration_s,
            native_fps: NATIVE_FPS,
            sampled_fps: 1.0,
            label: s.label,
            category: s.category.map(String::from),
            gt_intervals: (s.label == Label::Abnormal).then(|| {
                s.gt_s
                    .iter()
                    .map(|&(a, b)| [(a * NATIVE_FPS) as u64, (b * NATIVE_FPS) as u64 - 1])
                    .collect()
            }),
            embedding_path: format!("emb/{}.pvemb", s.id),
            split: s.split,
        })
        .collect()
}

fn demo_video(id: &str) -> &'static DemoVideo {
    VIDEOS.iter().find(|s| s.id == id).expect("demo id")
}

fn in_gt(v: &DemoVideo, t: f64) -> bool {
    v.gt_s.iter().any(|&(a, b)| a <= t && t < b)
}

/// Frame embeddings of a demo record, built around the optimized anchors.
pub fn demo_embeddings(record: &VideoRecord) -> Result<EmbeddingMatrix> {
    let (normal, abnormal) = prompts(Task::Anchors, PromptSet::Optimized);
    let e_norm = mock_encode(normal, DEMO_DIM)?.vector;
    let e_abn = mock_encode(abnormal, DEMO_DIM)?.vector;
    let s = demo_video(&record.id);
    let n = record.sampled_frame_count();
    let seed = fnv1a64(record.id.as_bytes());
    let mut data = Vec::with_capacity(n * DEMO_DIM);
    for k in 0..n {
        let base = if in_gt(s, k as f64 / record.sampled_fps) { &e_abn } else { &e_norm };
        for (j, b) in base.iter().enumerate() {
            let noise = stream_unit(seed ^ k as u64, j as u64);
            data.push((b + NOISE * noise) as f32);
        }
    }
    Ok(EmbeddingMatrix::new(n, DEMO_DIM, data))
}

fn description(category: Option<&str>) -> &'static str {
    match category {
        Some("Fighting") => "Two people exchange punches near the entrance.",
        Some("Explosion") => "Sudden blast with smoke and debris near a parked car.",
        _ => "Unusual activity in the scene.",
    }
}

fn sequence(tag: &str, replies: Vec<MockReply>) -> MatcherEntry {
    MatcherEntry { tag: tag.into(), video_ref: None, prompt_hash: None, reply: None, replies }
}

/// Matcher script answering VAU segments from the ground truth, plus
/// optimizer and chat fixtures.
pub fn demo_mock_script(records: &[VideoRecord]) -> Result<MockScript> {
    let mut entries = Vec::new();
    for r in records {
        let s = demo_video(&r.id);
        for seg in partition_segments(&r.id, r.duration_s, MAX_SEGMENT_S)? {
            let hit = s.gt_s.iter().find(|&&(a, b)| a < seg.end_s && b > seg.start_s);
            let reply = match hit {
                Some(&(a, b)) => {
                    let start = a.max(seg.start_s) - seg.start_s;
                    let end = (b - 1.0).min(seg.end_s) - seg.start_s;
                    let body = json!({
                        "start_time": start,
                        "end_time": end,
                        "abnormality": 0.85,
                        "description": description(s.category),
                    });
                    if seg.index == 0 {
                        format!("```json\n{}\n```", serde_json::to_string_pretty(&body).unwrap())
                    } else {
                        body.to_string()
                    }
                }
                None => "{}".to_string(),
            };
            let mut e = MatcherEntry::fixed("vau", MockReply::Text(reply));
            e.video_ref = Some(seg.video_ref());
            entries.push(e);
        }
    }
    entries.push(MatcherEntry::fixed("vau", "{}"));

    let anchor_words = [
        ("people walking calmly on a sidewalk", "people punching and kicking each other"),
        ("shoppers browsing shelves in a quiet store", "a fireball and thick smoke after an explosion"),
        ("cars moving slowly through an intersection", "a violent brawl with people falling down"),
        ("an empty corridor with steady lighting", "debris flying from a sudden blast"),
        ("customers waiting in line at a counter", "a man hitting another man with his fists"),
        ("a parking lot with parked cars", "flames and smoke filling a street"),
    ];
    let anchor_replies: Vec<MockReply> = (0..24)
        .map(|i| {
            let (n, a) = anchor_words[i % anchor_words.len()];
            MockReply::Text(format!("Normal Prompt: {n}, variant {i}.\nAbnormal Prompt: {a}, variant {i}."))
        })
        .collect();
    entries.push(sequence("ape-anchors", anchor_replies));

    let (base_sys, base_user) = prompts(Task::Vau, PromptSet::Base);
    let vau_replies: Vec<MockReply> = (0..12)
        .map(|i| {
            MockReply::Text(format!(
                "System Prompt: {base_sys} Pay attention to sudden motion (revision {i}).\nUser Prompt: {base_user}"
            ))
        })
        .collect();
    entries.push(sequence("ape-vau", vau_replies));

    entries.push(MatcherEntry::fixed(
        CHAT_TAG,
        "Based on the segment verdict, the flagged interval shows the reported event; the surrounding frames look ordinary.",
    ));
    Ok(MockScript::Matchers(entries))
}

/// Files of a generated demo.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoPaths {
    pub root: PathBuf,
    pub config: PathBuf,
    pub manifest: PathBuf,
    pub mock_script: PathBuf,
    pub run_dir: PathBuf,
}

/// Writes the mini-dataset, mock script and a run config under `dir`.
pub fn write_demo(dir: &Path) -> Result<DemoPaths> {
    let records = demo_records();
    let data = dir.join("data");
    std::fs::create_dir_all(data.join("emb")).map_err(|e| PipelineError::io(&data, e))?;
    for r in &records {
        write_embeddings(data.join(&r.embedding_path), &demo_embeddings(r)?)?;
    }
    let manifest = Manifest { dim: DEMO_DIM, videos: records.clone(), root: PathBuf::new() };
    let manifest_path = data.join("manifest.json");
    write_json(&manifest_path, &manifest)?;

    let descriptions: serde_json::Map<String, serde_json::Value> = records
        .iter()
        .filter(|r| r.label == Label::Abnormal)
        .map(|r| (r.id.clone(), json!([description(r.category.as_deref()), "An abnormal event takes place."])))
        .collect();
    write_json(&data.join("descriptions.json"), &descriptions)?;

    let script_path = dir.join("mock_llm.json");
    write_json(&script_path, &demo_mock_script(&records)?)?;

    let config = json!({
        "dataset_manifest": "data/manifest.json",
        "run_dir": "runs/demo",
        "seed": 7,
        "gt_descriptions": "data/descriptions.json",
        "backends": {
            "llm": {
                "backend": {"kind": "mock", "script": "mock_llm.json"},
                "retry": {"max_attempts": 2, "base_delay_ms": 0, "jitter": false},
                "max_in_flight": 4
            },
            "encoder": {"kind": "mock"}
        },
        "optimizer": {
            "anchors": {"iterations": 4, "population": 3, "patience": 3},
            "vau": {"iterations": 3, "population": 2, "archive_capacity": 3}
        },
        "vau_eval": {"per_category": 1}
    });
    let config_path = dir.join("config.json");
    let mut text = serde_json::to_vec_pretty(&config).map_err(|e| PipelineError::Config(e.to_string()))?;
    text.push(b'\n');
    write_atomic(&config_path, &text)?;
    Ok(DemoPaths {
        root: dir.to_path_buf(),
        config: config_path,
        manifest: manifest_path,
        mock_script: script_path,
        run_dir: dir.join("runs/demo"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{load_manifest, validate_records};

    #[test]
    fn records_are_valid_and_balanced() {
        let r = demo_records();
        validate_records(&r).unwrap();
        assert_eq!(r.len(), 8);
        for split in [Split::Train, Split::Test] {
            let abn = r.iter().filter(|v| v.split == split && v.label == Label::Abnormal).count();
            let nrm = r.iter().filter(|v| v.split == split && v.label == Label::Normal).count();
            assert_eq!((abn, nrm), (2, 2));
        }
        assert!(r.iter().all(|v| (60.0..=90.0).contains(&v.duration_s)));
    }

    #[test]
    fn written_demo_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = write_demo(dir.path()).unwrap();
        let m = load_manifest(&p.manifest).unwrap();
        for r in &m.videos {
            let e = m.load_embeddings(r).unwrap();
            assert_eq!(e.n_frames, r.sampled_frame_count());
            assert_eq!(e.dim, DEMO_DIM);
        }
        crate::pipeline::RunConfig::load(&p.config).unwrap();
        crate::gateway::load_mock_script(&p.mock_script).unwrap();
    }

    #[test]
    fn verdict_fixture_covers_gt() {
        let records = demo_records();
        let MockScript::Matchers(entries) = demo_mock_script(&records).unwrap() else { panic!() };
        let e = entries.iter().find(|e| e.video_ref.as_deref() == Some("test_fight_01#t=30.00,60.00")).unwrap();
        let MockReply::Text(t) = e.reply.clone().unwrap() else { panic!() };
        let v: serde_json::Value = serde_json::from_str(&t).unwrap();
        assert_eq!(v["start_time"], 22.0);
        assert_eq!(v["end_time"], 29.0);
    }
}
