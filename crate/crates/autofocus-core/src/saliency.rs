//! Temporal multi-peak Gaussian saliency maps.
//!
//! For frame t, every key-object center from the last `t_prime + 1` frames
//! contributes a Gaussian kernel. A center seen k frames ago is weighted by
//! `alpha^k` and widened by `beta^-k`, then the per-frame grid is divided by
//! its maximum so values land in [0, 1].

use std::collections::BTreeMap;
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::track::{SubSequence, Track};

/// Normalized per-frame saliency grid, row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub width: u32,
    pub height: u32,
    pub values: Vec<f32>,
}

impl SaliencyMap {
    pub fn at(&self, x: u32, y: u32) -> f32 {
        self.values[(y * self.width + x) as usize]
    }
}

/// Key-object centers keyed by the frame they were observed in.
pub type CentersByFrame = BTreeMap<usize, Vec<(f64, f64)>>;

/// One history step's contribution: all centers of frame `t - k` share the
/// decay weight and the widened kernel denominator.
struct HistoryTerm<'a> {
    weight: f64,
    denom: f64,
    centers: &'a [(f64, f64)],
}

fn prepare_terms<'a>(
    width: u32,
    height: u32,
    t: usize,
    centers: &'a CentersByFrame,
    cfg: &PipelineConfig,
) -> Result<Vec<HistoryTerm<'a>>> {
    cfg.validate()?;
    for (&frame, list) in centers {
        for &(x, y) in list {
            let inside = x.is_finite()
                && y.is_finite()
                && (0.0..=width as f64).contains(&x)
                && (0.0..=height as f64).contains(&y);
            if !inside {
                return Err(Error::Saliency(format!(
                    "center ({x}, {y}) at frame {frame} outside the {width}x{height} image"
                )));
            }
        }
    }
    let mut terms = Vec::new();
    for k in 0..=cfg.t_prime.min(t) {
        let Some(list) = centers.get(&(t - k)) else { continue };
        if list.is_empty() {
            continue;
        }
        terms.push(HistoryTerm {
            weight: cfg.alpha.powi(k as i32),
            denom: 2.0 * cfg.gamma * cfg.gamma * cfg.beta.powi(-2 * k as i32),
            centers: list,
        });
    }
    Ok(terms)
}

fn fill_row(y: usize, row: &mut [f64], terms: &[HistoryTerm<'_>]) {
    let py = y as f64;
    for (x, out) in row.iter_mut().enumerate() {
        let px = x as f64;
        let mut total = 0.0;
        for term in terms {
            let mut inner = 0.0;
            for &(cx, cy) in term.centers {
                let dx = px - cx;
                let dy = py - cy;
                inner += (-(dx * dx + dy * dy) / term.denom).exp();
            }
            total += term.weight * inner;
        }
        *out = total;
    }
}

/// Unnormalized saliency grid for frame `t` (row-major, length
/// `width * height`). Pixels are evaluated at integer (col, row) positions;
/// frames before index 0 contribute nothing.
///
/// With the `parallel` feature rows are rendered concurrently; per-pixel
/// accumulation order is unchanged, so the output is bit-identical to
/// [`render_raw_sequential`].
pub fn render_raw(
    width: u32,
    height: u32,
    t: usize,
    centers: &CentersByFrame,
    cfg: &PipelineConfig,
) -> Result<Vec<f64>> {
    #[cfg(feature = "parallel")]
    {
        let terms = prepare_terms(width, height, t, centers, cfg)?;
        let mut grid = vec![0.0f64; width as usize * height as usize];
        grid.par_chunks_mut(width as usize)
            .enumerate()
            .for_each(|(y, row)| fill_row(y, row, &terms));
        Ok(grid)
    }
    #[cfg(not(feature = "parallel"))]
    render_raw_sequential(width, height, t, centers, cfg)
}

/// Single-threaded twin of [`render_raw`]; always available for comparison
/// and benchmarking.
pub fn render_raw_sequential(
    width: u32,
    height: u32,
    t: usize,
    centers: &CentersByFrame,
    cfg: &PipelineConfig,
) -> Result<Vec<f64>> {
    let terms = prepare_terms(width, height, t, centers, cfg)?;
    let mut grid = vec![0.0f64; width as usize * height as usize];
    for (y, row) in grid.chunks_mut(width as usize).enumerate() {
        fill_row(y, row, &terms);
    }
    Ok(grid)
}

/// Scales a raw grid by its maximum into [0, 1]. An all-zero grid stays all
/// zero; otherwise the peak maps to exactly 1.
pub fn normalize(width: u32, height: u32, raw: &[f64]) -> Result<SaliencyMap> {
    if raw.len() != width as usize * height as usize {
        return Err(Error::Saliency(format!(
            "grid length {} does not match {width}x{height}",
            raw.len()
        )));
    }
    let mut max = 0.0f64;
    for &v in raw {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Saliency(format!("invalid unnormalized value {v}")));
        }
        if v > max {
            max = v;
        }
    }
    let values = if max > 0.0 {
        raw.iter().map(|&v| (v / max) as f32).collect()
    } else {
        vec![0.0f32; raw.len()]
    };
    Ok(SaliencyMap { width, height, values })
}

/// Collects key-object centers for every frame. The key set is evaluated per
/// source frame: a track contributes at frame f only if the sub-sequence
/// containing f lists it in `key_ids`.
pub fn key_centers(
    tracks: &[Track],
    subsequences: &[SubSequence],
    t_len: usize,
) -> Result<CentersByFrame> {
    let by_id: BTreeMap<u64, &Track> = tracks.iter().map(|t| (t.id, t)).collect();
    let mut centers: CentersByFrame = BTreeMap::new();
    for sub in subsequences {
        if !sub.key_ids.is_subset(&sub.active_ids) {
            return Err(Error::Saliency(format!(
                "sub-sequence [{}, {}] has key ids outside its active set",
                sub.start, sub.end
            )));
        }
        if sub.end >= t_len {
            return Err(Error::Saliency(format!(
                "sub-sequence [{}, {}] exceeds trajectory length {t_len}",
                sub.start, sub.end
            )));
        }
        for frame in sub.start..=sub.end {
            let mut list = Vec::with_capacity(sub.key_ids.len());
            for id in &sub.key_ids {
                let track = by_id.get(id).ok_or_else(|| {
                    Error::Saliency(format!("key track {id} not present in track list"))
                })?;
                let bbox = track.boxes.get(&frame).ok_or_else(|| {
                    Error::Saliency(format!("key track {id} has no box at frame {frame}"))
                })?;
                list.push(bbox.center());
            }
            if !list.is_empty() {
                centers.insert(frame, list);
            }
        }
    }
    Ok(centers)
}

/// Renders and normalizes one map per frame from filtered sub-sequences.
pub fn generate(
    width: u32,
    height: u32,
    t_len: usize,
    tracks: &[Track],
    subsequences: &[SubSequence],
    cfg: &PipelineConfig,
) -> Result<Vec<SaliencyMap>> {
    let centers = key_centers(tracks, subsequences, t_len)?;
    let mut maps = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let raw = render_raw(width, height, t, &centers, cfg)?;
        maps.push(normalize(width, height, &raw)?);
    }
    Ok(maps)
}

/// Quantizes a unit-interval value to a byte, rounding half up.
pub(crate) fn quantize_u8(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// 8-bit single-channel PNG export; pixel = round(g * 255), half up.
pub fn export_png(map: &SaliencyMap, path: &Path) -> Result<()> {
    let bytes: Vec<u8> = map.values.iter().map(|&v| quantize_u8(v as f64)).collect();
    let img = image::GrayImage::from_raw(map.width, map.height, bytes)
        .expect("buffer length matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::image(format!("writing {}", path.display()), e))
}

const SALIENCY_MAGIC: &[u8; 4] = b"AFSL";

/// Lossless binary export: "AFSL", width and height as u32 LE, then
/// row-major f32 LE values.
pub fn export_f32(map: &SaliencyMap, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(12 + map.values.len() * 4);
    bytes.extend_from_slice(SALIENCY_MAGIC);
    bytes.extend_from_slice(&map.width.to_le_bytes());
    bytes.extend_from_slice(&map.height.to_le_bytes());
    for v in &map.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Reads a file written by [`export_f32`].
pub fn read_f32(path: &Path) -> Result<SaliencyMap> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 12 {
        return Err(Error::Saliency(format!(
            "{}: truncated file ({} bytes, header needs 12)",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[..4] != SALIENCY_MAGIC {
        return Err(Error::Saliency(format!(
            "{}: bad magic {:02x?}, expected \"AFSL\"",
            path.display(),
            &bytes[..4]
        )));
    }
    let width = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let expected = 12 + width as usize * height as usize * 4;
    if bytes.len() != expected {
        return Err(Error::Saliency(format!(
            "{}: {} bytes for a {width}x{height} map, expected {expected}",
            path.display(),
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(width as usize * height as usize);
    for chunk in bytes[12..].chunks_exact(4) {
        let v = f32::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() || !(0.0..=1.0).contains(&v) {
            return Err(Error::Saliency(format!(
                "{}: value {v} outside [0, 1]",
                path.display()
            )));
        }
        values.push(v);
    }
    Ok(SaliencyMap { width, height, values })
}

/// Heat-style colormap: black through red and yellow to white.
pub fn colormap(v: f32) -> [u8; 3] {
    let v = v as f64;
    [
        quantize_u8((3.0 * v).clamp(0.0, 1.0)),
        quantize_u8((3.0 * v - 1.0).clamp(0.0, 1.0)),
        quantize_u8((3.0 * v - 2.0).clamp(0.0, 1.0)),
    ]
}

/// Blends a frame with the colormapped saliency at fixed 0.5 alpha.
pub fn overlay_image(frame: &image::RgbImage, map: &SaliencyMap) -> Result<image::RgbImage> {
    if frame.width() != map.width || frame.height() != map.height {
        return Err(Error::Saliency(format!(
            "frame is {}x{} but map is {}x{}",
            frame.width(),
            frame.height(),
            map.width,
            map.height
        )));
    }
    let mut out = image::RgbImage::new(map.width, map.height);
    for y in 0..map.height {
        for x in 0..map.width {
            let base = frame.get_pixel(x, y).0;
            let heat = colormap(map.at(x, y));
            let mut px = [0u8; 3];
            for c in 0..3 {
                px[c] = quantize_u8(0.5 * (base[c] as f64 / 255.0 + heat[c] as f64 / 255.0));
            }
            out.put_pixel(x, y, image::Rgb(px));
        }
    }
    Ok(out)
}
