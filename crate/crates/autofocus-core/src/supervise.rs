//! VLM supervision: the global context query and the per-sub-sequence
//! key-object filter with its missing-category retry loop.
//!
//! A retry augments the detection vocabulary, re-runs the detector on the
//! affected frame span only, tracks the newly visible labels under fresh ids
//! and re-segments that span in place. Neighboring sub-sequences are never
//! touched: new ids exist only inside the span, so boundaries outside it
//! cannot move.

use std::collections::BTreeSet;

use crate::config::PipelineConfig;
use crate::detect::{Detection, Detector, FrameDetections};
use crate::error::{Error, Result};
use crate::manifest::Trajectory;
use crate::track::{
    active_sets, build_tracks_span, segment_sets, SubSequence, Track, TrackIdGen,
};
use crate::vlm::{sample_context_frames, ActiveObject, ContextFrame, ContextSummary, VlmClient};

/// Everything the filter stage reads and rewrites.
#[derive(Debug, Clone)]
pub struct StageState {
    pub context: ContextSummary,
    pub detections: Vec<FrameDetections>,
    pub tracks: Vec<Track>,
    pub subsequences: Vec<SubSequence>,
}

#[derive(Debug)]
pub struct FilterOutcome {
    pub state: StageState,
    pub warnings: Vec<String>,
    /// Filter completions issued (the context query is counted by its caller).
    pub vlm_calls: usize,
    /// Frames re-queried against the detector during retries.
    pub detector_frame_queries: usize,
}

/// Samples evenly spaced frames and asks the VLM for the task summary and
/// detection vocabulary.
pub fn query_trajectory_context(
    traj: &Trajectory,
    cfg: &PipelineConfig,
    client: &VlmClient,
) -> Result<ContextSummary> {
    let indices = sample_context_frames(traj.len(), cfg.num_context_frames);
    let mut frames = Vec::with_capacity(indices.len());
    let mut actions = Vec::with_capacity(indices.len());
    for &i in &indices {
        frames.push(ContextFrame { index: i, png: traj.png_bytes(i)? });
        actions.push(traj.manifest.frames[i].action.clone());
    }
    client.query_context(traj.name(), &frames, &actions)
}

fn active_objects(tracks: &[Track], sub: &SubSequence) -> Result<Vec<ActiveObject>> {
    let mut out = Vec::with_capacity(sub.active_ids.len());
    for id in &sub.active_ids {
        let track = tracks.iter().find(|t| t.id == *id).ok_or_else(|| {
            Error::Pipeline(format!(
                "sub-sequence [{}, {}] lists unknown track {id}",
                sub.start, sub.end
            ))
        })?;
        let bbox = track.boxes.get(&sub.start).ok_or_else(|| Error::InvalidTrack {
            id: *id,
            message: format!("no box at sub-sequence start frame {}", sub.start),
        })?;
        out.push(ActiveObject { id: *id, label: track.label.clone(), bbox: *bbox });
    }
    Ok(out)
}

/// Runs the key-object filter over every sub-sequence.
///
/// Per sub-sequence the VLM is asked at most `max(1, retry_cap)` times; a
/// round that names categories absent from the vocabulary triggers one
/// retry (vocabulary grows monotonically, so a repeated complaint is a
/// no-op and ends the loop). When a retry splits the span, the piece
/// sharing the original start frame continues on the remaining budget and
/// later pieces are visited afterwards with a fresh budget.
pub fn filter_subsequences(
    traj: &Trajectory,
    detector: &Detector,
    client: &VlmClient,
    cfg: &PipelineConfig,
    state: StageState,
) -> Result<FilterOutcome> {
    let StageState { mut context, mut detections, mut tracks, mut subsequences } = state;
    let t_len = traj.len();
    if detections.len() != t_len {
        return Err(Error::Pipeline(format!(
            "detections cover {} frames, trajectory has {t_len}",
            detections.len()
        )));
    }
    for (i, fd) in detections.iter().enumerate() {
        if fd.frame_index != i {
            return Err(Error::Pipeline(format!(
                "detections out of order: position {i} holds frame {}",
                fd.frame_index
            )));
        }
    }

    let mut ids = TrackIdGen::starting_at(tracks.iter().map(|t| t.id + 1).max().unwrap_or(0));
    let budget = cfg.retry_cap.max(1);
    let mut warnings = Vec::new();
    let mut vlm_calls = 0usize;
    let mut detector_frame_queries = 0usize;

    let mut i = 0;
    while i < subsequences.len() {
        let mut rounds = 0usize;
        loop {
            let (start, end) = (subsequences[i].start, subsequences[i].end);
            let active = active_objects(&tracks, &subsequences[i])?;
            let frame_png = traj.png_bytes(start)?;
            let action = traj.manifest.frames[start].action.clone();
            rounds += 1;
            vlm_calls += 1;
            let decision =
                match client.query_filter(traj.name(), &frame_png, &action, &context, &active) {
                    Ok(d) => d,
                    Err(Error::VlmTransport(msg)) => {
                        return Err(Error::Pipeline(format!(
                            "filter query for sub-sequence [{start}, {end}]: {msg}"
                        )))
                    }
                    Err(other) => return Err(other),
                };

            let mut key_ids = BTreeSet::new();
            for id in &decision.key_ids {
                if *id >= 0 && subsequences[i].active_ids.contains(&(*id as u64)) {
                    key_ids.insert(*id as u64);
                } else {
                    warnings.push(format!(
                        "sub-sequence [{start}, {end}]: dropping unknown key object id {id}"
                    ));
                }
            }
            subsequences[i].key_ids = key_ids;

            let fresh: Vec<String> = decision
                .missing_categories
                .iter()
                .filter(|c| !context.vocabulary.contains(c))
                .cloned()
                .collect();
            if fresh.is_empty() {
                break;
            }
            if rounds >= budget {
                warnings.push(format!(
                    "sub-sequence [{start}, {end}]: retry budget exhausted, still missing: {}",
                    fresh.join(", ")
                ));
                break;
            }

            context.vocabulary.extend(fresh.iter().cloned());
            let span_lists = detector.detect_span(
                traj,
                &context.vocabulary,
                cfg.detector_confidence,
                start,
                end,
            )?;
            detector_frame_queries += span_lists.len();
            // Only the newly added labels matter; everything else is already
            // tracked and would duplicate under a fresh id.
            let new_lists: Vec<Vec<Detection>> = span_lists
                .into_iter()
                .map(|list| list.into_iter().filter(|d| fresh.contains(&d.label)).collect())
                .collect();
            for (offset, list) in new_lists.iter().enumerate() {
                detections[start + offset].detections.extend(list.iter().cloned());
            }
            let new_tracks = build_tracks_span(&new_lists, start, cfg.iou_gate, &mut ids)?;
            if new_tracks.is_empty() {
                continue;
            }
            tracks.extend(new_tracks);
            tracks.sort_by_key(|t| t.id);
            let sets = active_sets(&tracks, t_len)?;
            let replacement = segment_sets(&sets[start..=end], start);
            subsequences.splice(i..=i, replacement);
        }
        i += 1;
    }

    Ok(FilterOutcome {
        state: StageState { context, detections, tracks, subsequences },
        warnings,
        vlm_calls,
        detector_frame_queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;
    use std::path::Path;

    use crate::detect::{write_detections_file, DetectorSource};
    use crate::manifest::load_manifest;
    use crate::track::{build_tracks, segment};
    use crate::vlm::MockTransport;

    fn write_trajectory(dir: &Path, name: &str, t_len: usize) -> Trajectory {
        let traj_dir = dir.join(name);
        std::fs::create_dir_all(&traj_dir).unwrap();
        let mut frames = Vec::new();
        for t in 0..t_len {
            let file = format!("{t:06}.png");
            let img = image::RgbImage::from_fn(16, 16, |x, y| {
                image::Rgb([(x * 9 + t as u32 * 3) as u8, (y * 11) as u8, 70])
            });
            img.save(traj_dir.join(&file)).unwrap();
            frames.push(serde_json::json!({
                "index": t,
                "image": file,
                "action": [0.1 * t as f64, 0.5, 0.0],
            }));
        }
        let manifest = serde_json::json!({
            "name": name, "width": 16, "height": 16, "frames": frames,
        });
        std::fs::write(
            traj_dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest).unwrap(),
        )
        .unwrap();
        load_manifest(&traj_dir.join("manifest.json")).unwrap()
    }

    fn det(label: &str, confidence: f64, bbox: [f64; 4]) -> Detection {
        Detection { label: label.into(), confidence, bbox: bbox.into() }
    }

    fn write_fixture(traj: &Trajectory, frames: Vec<FrameDetections>) {
        write_detections_file(&traj.dir.join("dets.json"), &frames).unwrap();
    }

    fn fixture_detector() -> Detector {
        Detector::new(DetectorSource::Fixture("dets.json".into()))
    }

    fn context_with(vocabulary: &[&str]) -> ContextSummary {
        ContextSummary {
            task: "demo".into(),
            environment: "test".into(),
            risks: vec![],
            vocabulary: vocabulary.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn client_with(script: Vec<&str>, name: &str) -> VlmClient {
        let mock = MockTransport::new(HashMap::from([(
            name.to_owned(),
            script.into_iter().map(String::from).collect(),
        )]));
        VlmClient::new(std::sync::Arc::new(mock), "test-model")
    }

    /// Detect with the given vocabulary, then track and segment.
    fn initial_state(
        traj: &Trajectory,
        cfg: &PipelineConfig,
        vocabulary: &[&str],
    ) -> StageState {
        let context = context_with(vocabulary);
        let lists = fixture_detector()
            .detect_frames(traj, &context.vocabulary, cfg.detector_confidence)
            .unwrap();
        let tracks = build_tracks(&lists, cfg.iou_gate).unwrap();
        let subsequences = segment(&tracks, traj.len()).unwrap();
        let detections = lists
            .into_iter()
            .enumerate()
            .map(|(i, detections)| FrameDetections { frame_index: i, detections })
            .collect();
        StageState { context, detections, tracks, subsequences }
    }

    #[test]
    fn clean_answer_needs_one_round() {
        let dir = tempfile::tempdir().unwrap();
        let traj = write_trajectory(dir.path(), "t", 3);
        write_fixture(
            &traj,
            (0..3)
                .map(|f| FrameDetections {
                    frame_index: f,
                    detections: vec![det("car", 0.9, [2.0, 2.0, 8.0, 8.0])],
                })
                .collect(),
        );
        let cfg = PipelineConfig::default();
        let state = initial_state(&traj, &cfg, &["car"]);
        let client = client_with(vec![r#"{"key_object_ids":[0],"missing_categories":[]}"#], "t");

        let out =
            filter_subsequences(&traj, &fixture_detector(), &client, &cfg, state).unwrap();
        assert_eq!(out.vlm_calls, 1);
        assert_eq!(out.detector_frame_queries, 0);
        assert!(out.warnings.is_empty(), "{:?}", out.warnings);
        assert_eq!(out.state.subsequences.len(), 1);
        assert_eq!(out.state.subsequences[0].key_ids, BTreeSet::from([0]));
        assert_eq!(out.state.context.vocabulary, vec!["car"]);
    }

    #[test]
    fn unknown_key_ids_are_dropped_with_a_warning() {
        let dir = tempfile::tempdir().unwrap();
        let traj = write_trajectory(dir.path(), "t", 2);
        write_fixture(
            &traj,
            (0..2)
                .map(|f| FrameDetections {
                    frame_index: f,
                    detections: vec![det("car", 0.9, [2.0, 2.0, 8.0, 8.0])],
                })
                .collect(),
        );
        let cfg = PipelineConfig::default();
        let state = initial_state(&traj, &cfg, &["car"]);
        let client =
            client_with(vec![r#"{"key_object_ids":[0,9,-3],"missing_categories":[]}"#], "t");

        let out =
            filter_subsequences(&traj, &fixture_detector(), &client, &cfg, state).unwrap();
        assert_eq!(out.state.subsequences[0].key_ids, BTreeSet::from([0]));
        assert_eq!(out.warnings.len(), 2);
        assert!(out.warnings[0].contains("id 9"), "{:?}", out.warnings);
        assert!(out.warnings[1].contains("id -3"), "{:?}", out.warnings);
    }

    #[test]
    fn missing_category_recovers_an_object_from_re_detection() {
        let dir = tempfile::tempdir().unwrap();
        let traj = write_trajectory(dir.path(), "t", 4);
        // The fixture knows about the light, but the initial vocabulary does
        // not, so the first pass cannot see it.
        write_fixture(
            &traj,
            (0..4)
                .map(|f| FrameDetections {
                    frame_index: f,
                    detections: vec![
                        det("car", 0.9, [2.0, 2.0, 8.0, 8.0]),
                        det("traffic light", 0.8, [10.0, 2.0, 14.0, 6.0]),
                    ],
                })
                .collect(),
        );
        let cfg = PipelineConfig::default();
        let state = initial_state(&traj, &cfg, &["car"]);
        assert_eq!(state.tracks.len(), 1);
        let client = client_with(
            vec![
                r#"{"key_object_ids":[0],"missing_categories":["Traffic Light"]}"#,
                r#"{"key_object_ids":[0,1],"missing_categories":[]}"#,
            ],
            "t",
        );

        let out =
            filter_subsequences(&traj, &fixture_detector(), &client, &cfg, state).unwrap();
        assert_eq!(out.vlm_calls, 2);
        assert_eq!(out.detector_frame_queries, 4);
        assert_eq!(out.state.context.vocabulary, vec!["car", "traffic light"]);
        assert_eq!(out.state.tracks.len(), 2);
        assert_eq!(out.state.tracks[1].id, 1);
        assert_eq!(out.state.tracks[1].label, "traffic light");
        assert_eq!(out.state.tracks[1].first_frame(), 0);
        assert_eq!(out.state.tracks[1].last_frame(), 3);
        assert_eq!(out.state.subsequences.len(), 1);
        assert_eq!(out.state.subsequences[0].active_ids, BTreeSet::from([0, 1]));
        assert_eq!(out.state.subsequences[0].key_ids, BTreeSet::from([0, 1]));
        // The detections dump now carries the recovered label on every frame.
        for fd in &out.state.detections {
            assert!(fd.detections.iter().any(|d| d.label == "traffic light"));
        }
    }

    #[test]
    fn recovery_that_splits_the_span_revisits_each_piece() {
        let dir = tempfile::tempdir().unwrap();
        let traj = write_trajectory(dir.path(), "t", 5);
        let mut frames: Vec<FrameDetections> = (0..5)
            .map(|f| FrameDetections {
                frame_index: f,
                detections: vec![det("car", 0.9, [2.0, 2.0, 8.0, 8.0])],
            })
            .collect();
        for frame in &mut frames[2..5] {
            frame.detections.push(det("cone", 0.7, [10.0, 10.0, 14.0, 14.0]));
        }
        write_fixture(&traj, frames);
        let cfg = PipelineConfig::default();
        let state = initial_state(&traj, &cfg, &["car"]);
        assert_eq!(state.subsequences.len(), 1);
        let client = client_with(
            vec![
                r#"{"key_object_ids":[0],"missing_categories":["cone"]}"#,
                r#"{"key_object_ids":[0],"missing_categories":[]}"#,
                r#"{"key_object_ids":[0,1],"missing_categories":[]}"#,
            ],
            "t",
        );

        let out =
            filter_subsequences(&traj, &fixture_detector(), &client, &cfg, state).unwrap();
        assert_eq!(out.vlm_calls, 3);
        let subs = &out.state.subsequences;
        assert_eq!(subs.len(), 2);
        assert_eq!((subs[0].start, subs[0].end), (0, 1));
        assert_eq!(subs[0].active_ids, BTreeSet::from([0]));
        assert_eq!(subs[0].key_ids, BTreeSet::from([0]));
        assert_eq!((subs[1].start, subs[1].end), (2, 4));
        assert_eq!(subs[1].active_ids, BTreeSet::from([0, 1]));
        assert_eq!(subs[1].key_ids, BTreeSet::from([0, 1]));
    }

    #[test]
    fn retry_budget_caps_rounds_per_sub_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let traj = write_trajectory(dir.path(), "t", 2);
        write_fixture(
            &traj,
            (0..2)
                .map(|f| FrameDetections {
                    frame_index: f,
                    detections: vec![det("car", 0.9, [2.0, 2.0, 8.0, 8.0])],
                })
                .collect(),
        );
        let cfg = PipelineConfig { retry_cap: 3, ..Default::default() };
        let state = initial_state(&traj, &cfg, &["car"]);
        // A different complaint each round, none of which the fixture knows.
        let client = client_with(
            vec![
                r#"{"key_object_ids":[0],"missing_categories":["ghost one"]}"#,
                r#"{"key_object_ids":[0],"missing_categories":["ghost two"]}"#,
                r#"{"key_object_ids":[0],"missing_categories":["ghost three"]}"#,
            ],
            "t",
        );

        let out =
            filter_subsequences(&traj, &fixture_detector(), &client, &cfg, state).unwrap();
        assert_eq!(out.vlm_calls, 3);
        // The final round is past the budget, so its complaint is logged but
        // not pursued.
        assert_eq!(out.state.context.vocabulary, vec!["car", "ghost one", "ghost two"]);
        assert_eq!(out.warnings.len(), 1);
        assert!(out.warnings[0].contains("ghost three"), "{:?}", out.warnings);
        assert_eq!(out.state.subsequences[0].key_ids, BTreeSet::from([0]));
    }

    #[test]
    fn zero_retry_cap_still_asks_once() {
        let dir = tempfile::tempdir().unwrap();
        let traj = write_trajectory(dir.path(), "t", 2);
        write_fixture(
            &traj,
            (0..2)
                .map(|f| FrameDetections {
                    frame_index: f,
                    detections: vec![det("car", 0.9, [2.0, 2.0, 8.0, 8.0])],
                })
                .collect(),
        );
        let cfg = PipelineConfig { retry_cap: 0, ..Default::default() };
        let state = initial_state(&traj, &cfg, &["car"]);
        let client =
            client_with(vec![r#"{"key_object_ids":[0],"missing_categories":["ghost"]}"#], "t");

        let out =
            filter_subsequences(&traj, &fixture_detector(), &client, &cfg, state).unwrap();
        assert_eq!(out.vlm_calls, 1);
        assert_eq!(out.state.context.vocabulary, vec!["car"]);
        assert_eq!(out.warnings.len(), 1);
    }

    #[test]
    fn known_categories_do_not_trigger_retries() {
        let dir = tempfile::tempdir().unwrap();
        let traj = write_trajectory(dir.path(), "t", 2);
        write_fixture(
            &traj,
            (0..2)
                .map(|f| FrameDetections {
                    frame_index: f,
                    detections: vec![det("car", 0.9, [2.0, 2.0, 8.0, 8.0])],
                })
                .collect(),
        );
        let cfg = PipelineConfig::default();
        let state = initial_state(&traj, &cfg, &["car"]);
        let client =
            client_with(vec![r#"{"key_object_ids":[0],"missing_categories":["Car"]}"#], "t");

        let out =
            filter_subsequences(&traj, &fixture_detector(), &client, &cfg, state).unwrap();
        assert_eq!(out.vlm_calls, 1);
        assert!(out.warnings.is_empty());
        assert_eq!(out.state.context.vocabulary, vec!["car"]);
    }

    #[test]
    fn transport_failure_names_the_sub_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let traj = write_trajectory(dir.path(), "t", 2);
        write_fixture(
            &traj,
            (0..2)
                .map(|f| FrameDetections {
                    frame_index: f,
                    detections: vec![det("car", 0.9, [2.0, 2.0, 8.0, 8.0])],
                })
                .collect(),
        );
        let cfg = PipelineConfig::default();
        let state = initial_state(&traj, &cfg, &["car"]);
        let client = client_with(vec![], "t");

        let err = filter_subsequences(&traj, &fixture_detector(), &client, &cfg, state)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("sub-sequence [0, 1]"), "got: {msg}");
    }

    #[test]
    fn malformed_reply_is_a_parse_error_not_a_pipeline_error() {
        let dir = tempfile::tempdir().unwrap();
        let traj = write_trajectory(dir.path(), "t", 2);
        write_fixture(
            &traj,
            (0..2)
                .map(|f| FrameDetections {
                    frame_index: f,
                    detections: vec![det("car", 0.9, [2.0, 2.0, 8.0, 8.0])],
                })
                .collect(),
        );
        let cfg = PipelineConfig::default();
        let state = initial_state(&traj, &cfg, &["car"]);
        let client = client_with(vec!["not json"], "t");

        let err = filter_subsequences(&traj, &fixture_detector(), &client, &cfg, state)
            .unwrap_err();
        assert!(matches!(err, Error::VlmParse { .. }), "got: {err}");
    }

    #[test]
    fn context_query_parses_and_normalizes_the_summary() {
        let dir = tempfile::tempdir().unwrap();
        let traj = write_trajectory(dir.path(), "t", 6);
        let cfg = PipelineConfig { num_context_frames: 3, ..Default::default() };
        let client = client_with(
            vec![r#"{"task":"stir the pot","environment":"kitchen","risks":["spill"],"objects":[" Pot ","pot","Spoon"]}"#],
            "t",
        );
        let summary = query_trajectory_context(&traj, &cfg, &client).unwrap();
        assert_eq!(summary.task, "stir the pot");
        assert_eq!(summary.vocabulary, vec!["pot", "spoon"]);
        assert_eq!(summary.risks, vec!["spill"]);
    }
}
