use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assignment::hungarian;
use crate::detect::{BBox, Detection};
use crate::error::{Error, Result};

/// A persistent-ID sequence of same-label boxes over a contiguous frame range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub id: u64,
    pub label: String,
    pub boxes: BTreeMap<usize, BBox>,
}

impl Track {
    pub fn first_frame(&self) -> usize {
        *self.boxes.keys().next().expect("track has at least one box")
    }

    pub fn last_frame(&self) -> usize {
        *self.boxes.keys().next_back().expect("track has at least one box")
    }

    /// Contiguity and label invariants.
    pub fn validate(&self) -> Result<()> {
        if self.boxes.is_empty() {
            return Err(Error::InvalidTrack { id: self.id, message: "no boxes".into() });
        }
        if self.label.is_empty() {
            return Err(Error::InvalidTrack { id: self.id, message: "empty label".into() });
        }
        for (offset, &frame) in self.boxes.keys().enumerate() {
            let expected = self.first_frame() + offset;
            if frame != expected {
                return Err(Error::TrackGap { id: self.id, index: expected });
            }
        }
        Ok(())
    }
}

/// Maximal frame span over which the set of live track IDs is constant.
/// `key_ids` stays empty until the key-object filter fills it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubSequence {
    pub start: usize,
    pub end: usize,
    pub active_ids: BTreeSet<u64>,
    pub key_ids: BTreeSet<u64>,
}

/// Intersection-over-union of two boxes; 0 when disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Allocator for track IDs; IDs grow monotonically and are never reused.
#[derive(Debug, Clone)]
pub struct TrackIdGen {
    next: u64,
}

impl TrackIdGen {
    pub fn new() -> Self {
        TrackIdGen { next: 0 }
    }

    pub fn starting_at(next: u64) -> Self {
        TrackIdGen { next }
    }

    pub fn fresh(&mut self) -> u64 {
        let id = self.next;
        self.next += 1;
        id
    }

    pub fn peek(&self) -> u64 {
        self.next
    }
}

impl Default for TrackIdGen {
    fn default() -> Self {
        TrackIdGen::new()
    }
}

#[derive(Debug)]
pub struct AssociationOutcome {
    /// Tracks that matched a detection at `frame`, extended by one box.
    pub continued: Vec<Track>,
    /// Fresh tracks opened from unmatched detections.
    pub opened: Vec<Track>,
    /// Previously open tracks with no acceptable match; they end at frame-1.
    pub closed: Vec<Track>,
}

/// One step of frame-to-frame association.
///
/// Costs are 1 - IoU between each open track's last box and each detection,
/// restricted to equal labels. Optimal pairs with IoU below `iou_gate` are
/// rejected: the track closes and the detection opens a new track. Ties in
/// cost resolve toward lower track IDs, then lower detection positions.
pub fn associate(
    open_tracks: Vec<Track>,
    detections: &[Detection],
    frame: usize,
    iou_gate: f64,
    ids: &mut TrackIdGen,
) -> Result<AssociationOutcome> {
    let mut tracks = open_tracks;
    tracks.sort_by_key(|t| t.id);

    let prev_frame = match frame.checked_sub(1) {
        Some(p) => p,
        None if tracks.is_empty() => 0,
        None => {
            return Err(Error::Pipeline(
                "open tracks passed to associate at frame 0".into(),
            ))
        }
    };
    let last_box = |tracks: &[Track], ti: usize| -> Result<BBox> {
        tracks[ti].boxes.get(&prev_frame).copied().ok_or_else(|| Error::InvalidTrack {
            id: tracks[ti].id,
            message: format!("open track has no box at frame {prev_frame}"),
        })
    };

    // Group indices by label; track rows stay id-sorted, detection columns
    // stay in list order, so the solver's lexicographic tie-break realizes
    // the documented ordering.
    let mut groups: BTreeMap<&str, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
    for (i, track) in tracks.iter().enumerate() {
        groups.entry(track.label.as_str()).or_default().0.push(i);
    }
    for (j, det) in detections.iter().enumerate() {
        groups.entry(det.label.as_str()).or_default().1.push(j);
    }

    let mut matched_det_for_track: Vec<Option<usize>> = vec![None; tracks.len()];
    let mut det_taken: Vec<bool> = vec![false; detections.len()];
    for (track_rows, det_cols) in groups.values() {
        if track_rows.is_empty() || det_cols.is_empty() {
            continue;
        }
        let mut overlaps: Vec<Vec<f64>> = Vec::with_capacity(track_rows.len());
        for &ti in track_rows {
            let last = last_box(&tracks, ti)?;
            overlaps
                .push(det_cols.iter().map(|&dj| iou(&last, &detections[dj].bbox)).collect());
        }
        let cost: Vec<Vec<f64>> =
            overlaps.iter().map(|row| row.iter().map(|&o| 1.0 - o).collect()).collect();
        for (row, col) in hungarian(&cost)? {
            if overlaps[row][col] >= iou_gate {
                matched_det_for_track[track_rows[row]] = Some(det_cols[col]);
                det_taken[det_cols[col]] = true;
            }
        }
    }

    let mut outcome = AssociationOutcome {
        continued: Vec::new(),
        opened: Vec::new(),
        closed: Vec::new(),
    };
    for (ti, mut track) in tracks.into_iter().enumerate() {
        match matched_det_for_track[ti] {
            Some(dj) => {
                track.boxes.insert(frame, detections[dj].bbox);
                outcome.continued.push(track);
            }
            None => outcome.closed.push(track),
        }
    }
    for (dj, det) in detections.iter().enumerate() {
        if !det_taken[dj] {
            outcome.opened.push(Track {
                id: ids.fresh(),
                label: det.label.clone(),
                boxes: BTreeMap::from([(frame, det.bbox)]),
            });
        }
    }
    Ok(outcome)
}

/// Folds [`associate`] over consecutive frames starting at `first_frame`.
/// Returns all tracks (closed and still open at the last frame), id-sorted.
pub fn build_tracks_span(
    per_frame: &[Vec<Detection>],
    first_frame: usize,
    iou_gate: f64,
    ids: &mut TrackIdGen,
) -> Result<Vec<Track>> {
    let mut open: Vec<Track> = Vec::new();
    let mut finished: Vec<Track> = Vec::new();
    for (offset, detections) in per_frame.iter().enumerate() {
        let frame = first_frame + offset;
        let step = if offset == 0 {
            // No previous frame inside the span: everything opens fresh.
            associate(Vec::new(), detections, frame, iou_gate, ids)?
        } else {
            associate(open, detections, frame, iou_gate, ids)?
        };
        finished.extend(step.closed);
        open = step.continued;
        open.extend(step.opened);
    }
    finished.extend(open);
    finished.sort_by_key(|t| t.id);
    Ok(finished)
}

/// Tracks for a whole trajectory from its per-frame detections.
pub fn build_tracks(per_frame: &[Vec<Detection>], iou_gate: f64) -> Result<Vec<Track>> {
    let mut ids = TrackIdGen::new();
    build_tracks_span(per_frame, 0, iou_gate, &mut ids)
}

/// Live track-ID set at every frame in `0..t_len`.
pub fn active_sets(tracks: &[Track], t_len: usize) -> Result<Vec<BTreeSet<u64>>> {
    let mut sets = vec![BTreeSet::new(); t_len];
    for track in tracks {
        track.validate()?;
        if track.last_frame() >= t_len {
            return Err(Error::InvalidTrack {
                id: track.id,
                message: format!(
                    "box at frame {} beyond trajectory length {t_len}",
                    track.last_frame()
                ),
            });
        }
        for set in &mut sets[track.first_frame()..=track.last_frame()] {
            set.insert(track.id);
        }
    }
    Ok(sets)
}

/// Splits `[0, t_len-1]` into the minimal list of sub-sequences with constant
/// active-ID sets. Frames covered by no track still belong to a (possibly
/// empty-set) sub-sequence.
pub fn segment(tracks: &[Track], t_len: usize) -> Result<Vec<SubSequence>> {
    if t_len == 0 {
        return Err(Error::Pipeline("cannot segment an empty trajectory".into()));
    }
    let sets = active_sets(tracks, t_len)?;
    Ok(segment_sets(&sets, 0))
}

/// Scan a run of per-frame active sets (first one at frame `first_frame`)
/// into constant-set spans.
pub(crate) fn segment_sets(sets: &[BTreeSet<u64>], first_frame: usize) -> Vec<SubSequence> {
    let mut out: Vec<SubSequence> = Vec::new();
    for (offset, set) in sets.iter().enumerate() {
        let frame = first_frame + offset;
        match out.last_mut() {
            Some(last) if &last.active_ids == set => last.end = frame,
            _ => out.push(SubSequence {
                start: frame,
                end: frame,
                active_ids: set.clone(),
                key_ids: BTreeSet::new(),
            }),
        }
    }
    out
}

pub fn read_tracks_file(path: &Path) -> Result<Vec<Track>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading tracks {}", path.display()), e))?;
    let tracks: Vec<Track> = serde_json::from_str(&text)
        .map_err(|e| Error::json(format!("parsing tracks {}", path.display()), e))?;
    for track in &tracks {
        track.validate()?;
    }
    Ok(tracks)
}

pub fn write_tracks_file(path: &Path, tracks: &[Track]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(tracks)
        .map_err(|e| Error::json("encoding tracks", e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing tracks {}", path.display()), e))
}

pub fn read_subsequences_file(path: &Path) -> Result<Vec<SubSequence>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading sub-sequences {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::json(format!("parsing sub-sequences {}", path.display()), e))
}

pub fn write_subsequences_file(path: &Path, subs: &[SubSequence]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(subs)
        .map_err(|e| Error::json("encoding sub-sequences", e))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| Error::io(format!("writing sub-sequences {}", path.display()), e))
}
