use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::manifest::Trajectory;

/// Axis-aligned box in pixel coordinates, origin top-left.
/// Serialized as the 4-array `[x_min, y_min, x_max, y_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        BBox { x_min: v[0], y_min: v[1], x_max: v[2], y_max: v[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        BBox { x_min, y_min, x_max, y_max }
    }

    /// Geometric center `((x_min+x_max)/2, (y_min+y_max)/2)`.
    pub fn center(&self) -> (f64, f64) {
        ((self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0)
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        w.max(0.0) * h.max(0.0)
    }

    fn is_well_formed(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max].iter().all(|v| v.is_finite())
            && self.x_min < self.x_max
            && self.y_min < self.y_max
    }

    /// Clamps the box to the `width` x `height` image rectangle. Returns
    /// `None` when nothing with positive area remains.
    pub fn clamp_to(&self, width: u32, height: u32) -> Option<BBox> {
        let clamped = BBox {
            x_min: self.x_min.max(0.0),
            y_min: self.y_min.max(0.0),
            x_max: self.x_max.min(width as f64),
            y_max: self.y_max.min(height as f64),
        };
        (clamped.x_min < clamped.x_max && clamped.y_min < clamped.y_max).then_some(clamped)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub label: String,
    pub confidence: f64,
    pub bbox: BBox,
}

/// Canonical form used for vocabulary terms and detection labels everywhere.
pub fn normalize_term(term: &str) -> String {
    term.trim().to_lowercase()
}

/// Per-frame detection lists as stored in `detections.json` fixtures, stage
/// dumps and service caches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDetections {
    pub frame_index: usize,
    pub detections: Vec<Detection>,
}

pub fn read_detections_file(path: &Path) -> Result<Vec<FrameDetections>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading detections {}", path.display()), e))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::json(format!("parsing detections {}", path.display()), e))
}

pub fn write_detections_file(path: &Path, frames: &[FrameDetections]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(frames)
        .map_err(|e| Error::json("encoding detections".to_string(), e))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| Error::io(format!("writing detections {}", path.display()), e))
}

#[derive(Debug, Clone)]
pub enum DetectorSource {
    /// Precomputed per-frame detections. A relative path resolves against
    /// each trajectory's directory; an absolute path is used as given.
    Fixture(PathBuf),
    /// HTTP endpoint exposing POST /detect.
    Service { url: String },
}

#[derive(Serialize)]
struct DetectRequest<'a> {
    image_b64: String,
    labels: &'a [String],
    box_threshold: f64,
}

#[derive(Deserialize)]
struct DetectResponse {
    detections: Vec<Detection>,
}

/// Open-vocabulary detection client over either source.
///
/// A fixture file models everything the detector could know about a
/// trajectory; queries select the entries whose label is in the query
/// vocabulary, so growing the vocabulary can surface new objects from the
/// same file. Service responses must stay within the queried vocabulary.
pub struct Detector {
    source: DetectorSource,
    cache_dir: Option<PathBuf>,
    in_flight: usize,
    client: reqwest::blocking::Client,
}

impl Detector {
    pub fn new(source: DetectorSource) -> Self {
        Detector {
            source,
            cache_dir: None,
            in_flight: 4,
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(60))
                .build()
                .expect("default reqwest client"),
        }
    }

    /// Records service responses under this directory and replays them on
    /// later runs. No effect for fixture sources.
    pub fn with_cache_dir(mut self, dir: Option<PathBuf>) -> Self {
        self.cache_dir = dir;
        self
    }

    /// Maximum concurrent in-flight service requests.
    pub fn with_in_flight(mut self, n: usize) -> Self {
        self.in_flight = n.max(1);
        self
    }

    /// Detections for every frame of the trajectory; output length equals T.
    pub fn detect_frames(
        &self,
        traj: &Trajectory,
        vocabulary: &[String],
        confidence_gate: f64,
    ) -> Result<Vec<Vec<Detection>>> {
        self.detect_span(traj, vocabulary, confidence_gate, 0, traj.len() - 1)
    }

    /// Detections for frames `start..=end` only; output has `end-start+1`
    /// per-frame lists.
    pub fn detect_span(
        &self,
        traj: &Trajectory,
        vocabulary: &[String],
        confidence_gate: f64,
        start: usize,
        end: usize,
    ) -> Result<Vec<Vec<Detection>>> {
        if vocabulary.is_empty() {
            return Err(Error::Detection("query vocabulary is empty".into()));
        }
        if start > end || end >= traj.len() {
            return Err(Error::Detection(format!(
                "frame span {start}..={end} outside trajectory of length {}",
                traj.len()
            )));
        }
        match &self.source {
            DetectorSource::Fixture(rel) => {
                let path = if rel.is_absolute() { rel.clone() } else { traj.dir.join(rel) };
                self.detect_from_fixture(&path, traj, vocabulary, confidence_gate, start, end)
            }
            DetectorSource::Service { url } => {
                if let Some(cached) = self.read_cache(traj, vocabulary, confidence_gate, start, end)? {
                    return Ok(cached);
                }
                let lists =
                    self.detect_from_service(url, traj, vocabulary, confidence_gate, start, end)?;
                self.write_cache(traj, vocabulary, confidence_gate, start, end, &lists)?;
                Ok(lists)
            }
        }
    }

    fn detect_from_fixture(
        &self,
        path: &Path,
        traj: &Trajectory,
        vocabulary: &[String],
        gate: f64,
        start: usize,
        end: usize,
    ) -> Result<Vec<Vec<Detection>>> {
        let frames = read_detections_file(path)?;
        let mut by_index: Vec<Option<&FrameDetections>> = vec![None; traj.len()];
        for entry in &frames {
            if entry.frame_index < by_index.len() {
                by_index[entry.frame_index] = Some(entry);
            }
        }
        let mut out = Vec::with_capacity(end - start + 1);
        for (frame, slot) in by_index.iter().enumerate().take(end + 1).skip(start) {
            let entry = slot.ok_or_else(|| {
                Error::Detection(format!(
                    "fixture {} is missing frame {frame}",
                    path.display()
                ))
            })?;
            let mut kept = Vec::new();
            for det in &entry.detections {
                let label = normalize_term(&det.label);
                if !vocabulary.contains(&label) {
                    continue;
                }
                if let Some(det) = finalize_detection(det, label, gate, traj, frame)? {
                    kept.push(det);
                }
            }
            out.push(kept);
        }
        Ok(out)
    }

    fn detect_from_service(
        &self,
        url: &str,
        traj: &Trajectory,
        vocabulary: &[String],
        gate: f64,
        start: usize,
        end: usize,
    ) -> Result<Vec<Vec<Detection>>> {
        let endpoint = format!("{}/detect", url.trim_end_matches('/'));
        let frames: Vec<usize> = (start..=end).collect();
        let mut out: Vec<Vec<Detection>> = vec![Vec::new(); frames.len()];
        // Bounded concurrency: issue one chunk of requests at a time and
        // reassemble in frame order.
        for (chunk_idx, chunk) in frames.chunks(self.in_flight).enumerate() {
            let results: Vec<Result<Vec<Detection>>> = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&frame| {
                        let endpoint = endpoint.clone();
                        scope.spawn(move || {
                            self.query_frame(&endpoint, traj, frame, vocabulary, gate)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("detector worker panicked")).collect()
            });
            for (offset, result) in results.into_iter().enumerate() {
                out[chunk_idx * self.in_flight + offset] = result?;
            }
        }
        Ok(out)
    }

    fn query_frame(
        &self,
        endpoint: &str,
        traj: &Trajectory,
        frame: usize,
        vocabulary: &[String],
        gate: f64,
    ) -> Result<Vec<Detection>> {
        let png = traj.png_bytes(frame)?;
        let body = DetectRequest {
            image_b64: base64_encode(&png),
            labels: vocabulary,
            box_threshold: gate,
        };
        let response = self
            .client
            .post(endpoint)
            .json(&body)
            .send()
            .map_err(|e| Error::DetectorTransport { frame, message: e.to_string() })?;
        let status = response.status();
        let text = response
            .text()
            .map_err(|e| Error::DetectorTransport { frame, message: e.to_string() })?;
        if !status.is_success() {
            return Err(Error::DetectorTransport {
                frame,
                message: format!("status {status}: {}", snippet(&text)),
            });
        }
        let parsed: DetectResponse = serde_json::from_str(&text).map_err(|e| {
            Error::DetectorTransport { frame, message: format!("bad response JSON: {e}") }
        })?;
        let mut kept = Vec::new();
        for det in &parsed.detections {
            let label = normalize_term(&det.label);
            if !vocabulary.contains(&label) {
                return Err(Error::Detection(format!(
                    "frame {frame}: detection label \"{}\" outside query vocabulary",
                    det.label
                )));
            }
            if let Some(det) = finalize_detection(det, label, gate, traj, frame)? {
                kept.push(det);
            }
        }
        Ok(kept)
    }

    fn cache_path(
        &self,
        traj: &Trajectory,
        vocabulary: &[String],
        gate: f64,
        start: usize,
        end: usize,
    ) -> Option<PathBuf> {
        let dir = self.cache_dir.as_ref()?;
        let mut hasher = Sha256::new();
        for term in vocabulary {
            hasher.update(term.as_bytes());
            hasher.update([0x1f]);
        }
        hasher.update(gate.to_le_bytes());
        hasher.update(start.to_le_bytes());
        hasher.update(end.to_le_bytes());
        let digest = hasher.finalize();
        let tag: String = digest[..8].iter().map(|b| format!("{b:02x}")).collect();
        Some(dir.join(format!("{}-{tag}.json", traj.name())))
    }

    fn read_cache(
        &self,
        traj: &Trajectory,
        vocabulary: &[String],
        gate: f64,
        start: usize,
        end: usize,
    ) -> Result<Option<Vec<Vec<Detection>>>> {
        let Some(path) = self.cache_path(traj, vocabulary, gate, start, end) else {
            return Ok(None);
        };
        if !path.is_file() {
            return Ok(None);
        }
        let frames = read_detections_file(&path)?;
        let mut out = vec![Vec::new(); end - start + 1];
        for entry in frames {
            if entry.frame_index < start || entry.frame_index > end {
                return Err(Error::Detection(format!(
                    "cache {} contains frame {} outside span {start}..={end}",
                    path.display(),
                    entry.frame_index
                )));
            }
            out[entry.frame_index - start] = entry.detections;
        }
        Ok(Some(out))
    }

    fn write_cache(
        &self,
        traj: &Trajectory,
        vocabulary: &[String],
        gate: f64,
        start: usize,
        end: usize,
        lists: &[Vec<Detection>],
    ) -> Result<()> {
        let Some(path) = self.cache_path(traj, vocabulary, gate, start, end) else {
            return Ok(());
        };
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating cache dir {}", parent.display()), e))?;
        }
        let frames: Vec<FrameDetections> = lists
            .iter()
            .enumerate()
            .map(|(i, detections)| FrameDetections {
                frame_index: start + i,
                detections: detections.clone(),
            })
            .collect();
        write_detections_file(&path, &frames)
    }
}

/// Applies the confidence gate, validates, clamps to the image rectangle and
/// returns the detection in normalized-label form.
fn finalize_detection(
    det: &Detection,
    label: String,
    gate: f64,
    traj: &Trajectory,
    frame: usize,
) -> Result<Option<Detection>> {
    if label.is_empty() {
        return Err(Error::Detection(format!("frame {frame}: empty detection label")));
    }
    if !det.confidence.is_finite() || !(0.0..=1.0).contains(&det.confidence) {
        return Err(Error::Detection(format!(
            "frame {frame}: confidence {} outside [0, 1]",
            det.confidence
        )));
    }
    if det.confidence < gate {
        return Ok(None);
    }
    if !det.bbox.is_well_formed() {
        return Err(Error::Detection(format!(
            "frame {frame}: malformed box {:?}",
            <[f64; 4]>::from(det.bbox)
        )));
    }
    let clamped = det.bbox.clamp_to(traj.manifest.width, traj.manifest.height).ok_or_else(|| {
        Error::Detection(format!(
            "frame {frame}: box {:?} lies entirely outside the {}x{} image",
            <[f64; 4]>::from(det.bbox),
            traj.manifest.width,
            traj.manifest.height
        ))
    })?;
    Ok(Some(Detection { label, confidence: det.confidence, bbox: clamped }))
}

pub(crate) fn base64_encode(bytes: &[u8]) -> String {
    use base64::Engine as _;
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn snippet(text: &str) -> &str {
    &text[..text.len().min(200)]
}
