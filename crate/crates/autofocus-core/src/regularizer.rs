//! Reference numbers for the saliency regularization penalty.
//!
//! Trainer-side losses are validated against these values; nothing here
//! computes gradients. The penalty masks squared feature activations by
//! `1 - g` and takes the Euclidean norm of the whole masked tensor.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::saliency::SaliencyMap;

/// Dense h x w x c activation tensor, row-major with channels innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub values: Vec<f32>,
}

impl FeatureMap {
    pub fn new(height: u32, width: u32, channels: u32, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Feature("dimensions must be positive".into()));
        }
        let expected = (height * width * channels) as usize;
        if values.len() != expected {
            return Err(Error::Feature(format!(
                "value count {} does not match {height}x{width}x{channels}",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Feature(format!("non-finite value {bad}")));
        }
        Ok(FeatureMap { height, width, channels, values })
    }

    pub fn at(&self, y: u32, x: u32, c: u32) -> f32 {
        self.values[((y * self.width + x) * self.channels + c) as usize]
    }
}

const FEATURE_MAGIC: &[u8; 4] = b"AFFM";

/// Binary fixture layout: "AFFM", u32 LE height, width, channels, then
/// h*w*c f32 LE values in row-major (h, w, c) order.
pub fn write_feature_map(fm: &FeatureMap, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + fm.values.len() * 4);
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&fm.height.to_le_bytes());
    bytes.extend_from_slice(&fm.width.to_le_bytes());
    bytes.extend_from_slice(&fm.channels.to_le_bytes());
    for v in &fm.values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn read_feature_map(path: &Path) -> Result<FeatureMap> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() < 16 {
        return Err(Error::Feature(format!(
            "{}: truncated file ({} bytes, header needs 16)",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Feature(format!(
            "{}: bad magic {:02x?}, expected \"AFFM\"",
            path.display(),
            &bytes[..4]
        )));
    }
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let width = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let channels = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let count = height as usize * width as usize * channels as usize;
    if bytes.len() != 16 + count * 4 {
        return Err(Error::Feature(format!(
            "{}: {} bytes for a {height}x{width}x{channels} tensor, expected {}",
            path.display(),
            bytes.len(),
            16 + count * 4
        )));
    }
    let values: Vec<f32> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureMap::new(height, width, channels, values)
}

/// Per-channel bilinear upsampling with half-pixel-center sampling and edge
/// clamping. Target pixel (i, j) samples source coordinate
/// `((i+0.5)*h_s/h_t - 0.5, (j+0.5)*w_s/w_t - 0.5)`.
pub fn upsample_bilinear(fm: &FeatureMap, target_h: u32, target_w: u32) -> Result<FeatureMap> {
    if target_h < fm.height || target_w < fm.width {
        return Err(Error::Feature(format!(
            "target {target_h}x{target_w} smaller than source {}x{}",
            fm.height, fm.width
        )));
    }
    if target_h == fm.height && target_w == fm.width {
        return Ok(fm.clone());
    }
    let c = fm.channels as usize;
    let mut values = vec![0.0f32; target_h as usize * target_w as usize * c];
    for i in 0..target_h as usize {
        let sy = (i as f64 + 0.5) * fm.height as f64 / target_h as f64 - 0.5;
        let y0 = sy.floor();
        let fy = sy - y0;
        let y0c = (y0.max(0.0) as usize).min(fm.height as usize - 1);
        let y1c = ((y0 + 1.0).max(0.0) as usize).min(fm.height as usize - 1);
        for j in 0..target_w as usize {
            let sx = (j as f64 + 0.5) * fm.width as f64 / target_w as f64 - 0.5;
            let x0 = sx.floor();
            let fx = sx - x0;
            let x0c = (x0.max(0.0) as usize).min(fm.width as usize - 1);
            let x1c = ((x0 + 1.0).max(0.0) as usize).min(fm.width as usize - 1);
            for ch in 0..c {
                let v00 = fm.values[(y0c * fm.width as usize + x0c) * c + ch] as f64;
                let v01 = fm.values[(y0c * fm.width as usize + x1c) * c + ch] as f64;
                let v10 = fm.values[(y1c * fm.width as usize + x0c) * c + ch] as f64;
                let v11 = fm.values[(y1c * fm.width as usize + x1c) * c + ch] as f64;
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bottom = v10 * (1.0 - fx) + v11 * fx;
                values[(i * target_w as usize + j) * c + ch] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    FeatureMap::new(target_h, target_w, fm.channels, values)
}

/// `lambda * ||(1 - g) (*) psi^2||_2`: squared activations are masked by
/// `1 - g` (broadcast across channels) and the Euclidean norm runs over all
/// h*w*c entries.
pub fn saliency_penalty(fm: &FeatureMap, g: &SaliencyMap, lambda: f64) -> Result<f64> {
    if fm.height != g.height || fm.width != g.width {
        return Err(Error::Feature(format!(
            "feature map {}x{} does not match saliency map {}x{}",
            fm.height, fm.width, g.height, g.width
        )));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Feature(format!("lambda must be >= 0, got {lambda}")));
    }
    let c = fm.channels as usize;
    let mut sum_sq = 0.0f64;
    for (pixel, &gv) in g.values.iter().enumerate() {
        let mask = 1.0 - gv as f64;
        for ch in 0..c {
            let psi = fm.values[pixel * c + ch] as f64;
            let masked = mask * psi * psi;
            sum_sq += masked * masked;
        }
    }
    Ok(lambda * sum_sq.sqrt())
}

/// Manifest for the supervision-fraction ablation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupervisedFrames {
    pub fraction: f64,
    pub seed: u64,
    pub frames: Vec<usize>,
}

/// Draws `round(f * T)` distinct frame indices with a seeded generator and
/// returns them sorted. The same (T, f, seed) always yields the same list.
pub fn select_supervised_frames(t_len: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !fraction.is_finite() || !(0.0..=1.0).contains(&fraction) {
        return Err(Error::InvalidConfig(format!(
            "fraction must be in [0, 1], got {fraction}"
        )));
    }
    let count = (fraction * t_len as f64).round() as usize;
    let count = count.min(t_len);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut frames = rand::seq::index::sample(&mut rng, t_len, count).into_vec();
    frames.sort_unstable();
    Ok(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn flat_map(height: u32, width: u32, channels: u32, v: f32) -> FeatureMap {
        FeatureMap::new(height, width, channels, vec![v; (height * width * channels) as usize])
            .unwrap()
    }

    fn saliency_of(width: u32, height: u32, values: Vec<f32>) -> SaliencyMap {
        SaliencyMap { width, height, values }
    }

    #[test]
    fn constant_map_upsamples_to_constant() {
        let fm = flat_map(1, 1, 1, 3.0);
        let up = upsample_bilinear(&fm, 4, 4).unwrap();
        assert!(up.values.iter().all(|&v| v == 3.0));
    }

    #[test]
    fn two_sample_column_interpolates_per_the_half_pixel_formula() {
        // Hand evaluation of the sampling formula for h 2 -> 4: target rows
        // sample source rows -0.25, 0.25, 0.75, 1.25, clamped at edges:
        // values 0, 0.5, 1.5, 2.
        let fm = FeatureMap::new(2, 1, 1, vec![0.0, 2.0]).unwrap();
        let up = upsample_bilinear(&fm, 4, 1).unwrap();
        assert_eq!(up.values, vec![0.0, 0.5, 1.5, 2.0]);
    }

    #[test]
    fn identity_when_target_equals_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let values: Vec<f32> = (0..24).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let fm = FeatureMap::new(3, 4, 2, values).unwrap();
        assert_eq!(upsample_bilinear(&fm, 3, 4).unwrap(), fm);
    }

    #[test]
    fn downsampling_is_rejected() {
        let fm = flat_map(4, 4, 1, 1.0);
        assert!(upsample_bilinear(&fm, 2, 4).is_err());
        assert!(upsample_bilinear(&fm, 4, 3).is_err());
    }

    #[test]
    fn upsampling_stays_within_source_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let h = rng.gen_range(1..6u32);
            let w = rng.gen_range(1..6u32);
            let c = rng.gen_range(1..4u32);
            let values: Vec<f32> =
                (0..h * w * c).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let fm = FeatureMap::new(h, w, c, values).unwrap();
            let up = upsample_bilinear(&fm, h + rng.gen_range(0..8), w + rng.gen_range(0..8))
                .unwrap();
            for ch in 0..c {
                let channel_values = |m: &FeatureMap| -> Vec<f32> {
                    m.values
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| i % c as usize == ch as usize)
                        .map(|(_, &v)| v)
                        .collect()
                };
                let src = channel_values(&fm);
                let dst = channel_values(&up);
                let (lo, hi) = src
                    .iter()
                    .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
                        (lo.min(v), hi.max(v))
                    });
                for v in dst {
                    assert!(v >= lo - 1e-5 && v <= hi + 1e-5);
                }
            }
        }
    }

    #[test]
    fn full_saliency_zeroes_the_penalty() {
        let fm = flat_map(3, 4, 2, 2.5);
        let g = saliency_of(4, 3, vec![1.0; 12]);
        assert_eq!(saliency_penalty(&fm, &g, 10.0).unwrap(), 0.0);
    }

    #[test]
    fn zero_saliency_gives_lambda_times_norm_of_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let values: Vec<f32> = (0..24).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let fm = FeatureMap::new(3, 4, 2, values.clone()).unwrap();
        let g = saliency_of(4, 3, vec![0.0; 12]);
        let expected: f64 = values
            .iter()
            .map(|&v| {
                let sq = (v as f64) * (v as f64);
                sq * sq
            })
            .sum::<f64>()
            .sqrt();
        let got = saliency_penalty(&fm, &g, 10.0).unwrap();
        assert!((got - 10.0 * expected).abs() < 1e-9 * (1.0 + got.abs()));
    }

    #[test]
    fn hand_computed_two_pixel_case() {
        // psi = [1, 2], g = [1, 0.5]: masked squares are [0, 2], Euclidean
        // norm 2, penalty 10 * 2 = 20.
        let fm = FeatureMap::new(1, 2, 1, vec![1.0, 2.0]).unwrap();
        let g = saliency_of(2, 1, vec![1.0, 0.5]);
        let penalty = saliency_penalty(&fm, &g, 10.0).unwrap();
        assert!((penalty - 20.0).abs() < 1e-12, "got {penalty}");
    }

    #[test]
    fn penalty_is_homogeneous_in_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let values: Vec<f32> = (0..12).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let fm = FeatureMap::new(2, 3, 2, values).unwrap();
            let g_values: Vec<f32> = (0..6).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let g = saliency_of(3, 2, g_values);
            let lambda: f64 = rng.gen_range(0.0..20.0);
            let one = saliency_penalty(&fm, &g, lambda).unwrap();
            let two = saliency_penalty(&fm, &g, 2.0 * lambda).unwrap();
            assert_eq!(two, 2.0 * one);
        }
    }

    #[test]
    fn scaling_features_scales_the_penalty_quadratically() {
        // Power-of-two scales keep the f32 tensor exact, so the s^2 relation
        // must hold to relative 1e-9 (it only costs f64 rounding).
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let scales = [0.25f32, 0.5, 2.0, 4.0, 8.0];
        for round in 0..20 {
            let values: Vec<f32> = (0..18).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let fm = FeatureMap::new(3, 3, 2, values.clone()).unwrap();
            let s = scales[round % scales.len()];
            let scaled =
                FeatureMap::new(3, 3, 2, values.iter().map(|&v| v * s).collect()).unwrap();
            let g_values: Vec<f32> = (0..9).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let g = saliency_of(3, 3, g_values);
            let base = saliency_penalty(&fm, &g, 7.0).unwrap();
            let grown = saliency_penalty(&scaled, &g, 7.0).unwrap();
            let expected = (s as f64) * (s as f64) * base;
            assert!(
                (grown - expected).abs() <= 1e-9 * (1.0 + grown.abs()),
                "s={s}: {grown} vs {expected}"
            );
        }
    }

    #[test]
    fn pointwise_larger_saliency_never_increases_the_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let values: Vec<f32> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let fm = FeatureMap::new(4, 4, 1, values).unwrap();
            let g_lo: Vec<f32> = (0..16).map(|_| rng.gen_range(0.0..0.5)).collect();
            let g_hi: Vec<f32> =
                g_lo.iter().map(|&v| (v + rng.gen_range(0.0..0.5)).min(1.0)).collect();
            let lo = saliency_penalty(&fm, &saliency_of(4, 4, g_lo), 3.0).unwrap();
            let hi = saliency_penalty(&fm, &saliency_of(4, 4, g_hi), 3.0).unwrap();
            assert!(hi <= lo + 1e-12);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_input_error() {
        let fm = flat_map(2, 2, 1, 1.0);
        let g = saliency_of(3, 2, vec![0.0; 6]);
        assert!(saliency_penalty(&fm, &g, 1.0).is_err());
    }

    #[test]
    fn feature_map_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let values: Vec<f32> = (0..30).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let fm = FeatureMap::new(5, 3, 2, values).unwrap();
        let path = dir.path().join("f.affm");
        write_feature_map(&fm, &path).unwrap();
        assert_eq!(read_feature_map(&path).unwrap(), fm);
    }

    #[test]
    fn feature_file_magic_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.affm");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        assert!(read_feature_map(&path).unwrap_err().to_string().contains("magic"));
    }

    #[test]
    fn full_fraction_selects_every_frame() {
        assert_eq!(
            select_supervised_frames(100, 1.0, 42).unwrap(),
            (0..100).collect::<Vec<_>>()
        );
    }

    #[test]
    fn zero_fraction_selects_nothing() {
        assert!(select_supervised_frames(100, 0.0, 42).unwrap().is_empty());
    }

    #[test]
    fn selection_is_deterministic_and_sorted() {
        let a = select_supervised_frames(100, 0.25, 7).unwrap();
        let b = select_supervised_frames(100, 0.25, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 25);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert!(a.iter().all(|&f| f < 100));

        let c = select_supervised_frames(100, 0.25, 8).unwrap();
        assert_ne!(a, c, "different seeds should draw different frames");
    }

    #[test]
    fn fraction_outside_unit_interval_is_rejected() {
        assert!(select_supervised_frames(10, 1.5, 0).is_err());
        assert!(select_supervised_frames(10, -0.1, 0).is_err());
    }
}
