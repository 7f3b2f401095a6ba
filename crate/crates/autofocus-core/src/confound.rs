//! Confounded-dataset generator: copies a dataset while compositing icons
//! for the PREVIOUS timestep's action into a band along the top margin of
//! each frame. Frame 0 has no previous action and is copied untouched, and
//! no pixel below the band ever changes. Actions and frame order are never
//! modified, so the copy trains policies against a known spurious cue.
//!
//! Icons: a filled red circle (anchored near the band's right edge) when the
//! previous brake exceeds a threshold, and a white arrow (anchored at the
//! band's horizontal center) pointing right/left/up for positive, negative
//! and zero steering, with shaft thickness `round(throttle * scale)` capped
//! at a pixel limit. All geometry lives in [`IconConfig`].

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{ActionValue, FrameRecord, Trajectory, TrajectoryManifest};
use crate::pipeline::discover_trajectories;

pub const CIRCLE_COLOR: [u8; 3] = [255, 0, 0];
pub const ARROW_COLOR: [u8; 3] = [255, 255, 255];

/// Icon geometry and action mapping. Every field has a default; a config
/// file only needs the fields it overrides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IconConfig {
    /// Height in pixels of the top band icons may touch.
    pub band_height: u32,
    /// The circle appears when the previous brake is strictly above this.
    pub brake_threshold: f64,
    /// Positions of (steer, throttle, brake) in the action vector.
    pub steer_index: usize,
    pub throttle_index: usize,
    pub brake_index: usize,
    pub circle_radius: u32,
    /// Circle center inset from the right image edge.
    pub circle_margin: u32,
    /// Total arrow length, head included.
    pub arrow_length: u32,
    /// Shaft thickness = round(previous throttle * this), in pixels.
    pub thickness_scale: f64,
    /// Upper bound on shaft thickness.
    pub thickness_cap: u32,
}

impl Default for IconConfig {
    fn default() -> Self {
        IconConfig {
            band_height: 40,
            brake_threshold: 0.5,
            steer_index: 0,
            throttle_index: 1,
            brake_index: 2,
            circle_radius: 10,
            circle_margin: 18,
            arrow_length: 30,
            thickness_scale: 12.0,
            thickness_cap: 12,
        }
    }
}

impl IconConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading icon config {}", path.display()), e))?;
        let cfg: IconConfig = serde_json::from_str(&text)
            .map_err(|e| Error::json(format!("parsing icon config {}", path.display()), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.band_height == 0 {
            return Err(Error::InvalidConfig("band_height must be >= 1".into()));
        }
        if self.circle_radius == 0 {
            return Err(Error::InvalidConfig("circle_radius must be >= 1".into()));
        }
        if self.arrow_length < 4 {
            return Err(Error::InvalidConfig("arrow_length must be >= 4".into()));
        }
        if !self.thickness_scale.is_finite() || self.thickness_scale <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "thickness_scale must be > 0, got {}",
                self.thickness_scale
            )));
        }
        if self.thickness_cap == 0 {
            return Err(Error::InvalidConfig("thickness_cap must be >= 1".into()));
        }
        if !self.brake_threshold.is_finite() {
            return Err(Error::InvalidConfig("brake_threshold must be finite".into()));
        }
        Ok(())
    }

    fn max_action_index(&self) -> usize {
        self.steer_index.max(self.throttle_index).max(self.brake_index)
    }
}

/// Writes `color` iff (x, y) is inside both the image and the icon band.
fn put_banded(img: &mut image::RgbImage, band: u32, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < band.min(img.height()) {
        img.put_pixel(x as u32, y as u32, image::Rgb(color));
    }
}

fn draw_filled_circle(img: &mut image::RgbImage, band: u32, cx: i64, cy: i64, r: i64) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put_banded(img, band, cx + dx, cy + dy, CIRCLE_COLOR);
            }
        }
    }
}

#[derive(Clone, Copy)]
enum ArrowDir {
    Right,
    Left,
    Up,
}

/// Shaft thickness is exactly `thickness` pixels perpendicular to the arrow
/// axis; the head occupies the final quarter of the length only, so a probe
/// through the shaft's midpoint measures the thickness alone.
fn draw_arrow(img: &mut image::RgbImage, cfg: &IconConfig, dir: ArrowDir, thickness: i64) {
    let band = cfg.band_height;
    let cx = img.width() as i64 / 2;
    let cy = band.min(img.height()) as i64 / 2;
    let half = cfg.arrow_length as i64 / 2;
    let head = (cfg.arrow_length as i64 / 4).max(2);
    let head_half = (thickness / 2 + 3).max(3);

    match dir {
        ArrowDir::Right | ArrowDir::Left => {
            let sign = if matches!(dir, ArrowDir::Right) { 1 } else { -1 };
            let y0 = cy - thickness / 2;
            for x_off in -half..=(half - head) {
                for y in y0..y0 + thickness {
                    put_banded(img, band, cx + sign * x_off, y, ARROW_COLOR);
                }
            }
            for i in 0..head {
                // Width tapers from head_half at the base to 1 at the tip.
                let hh = 1 + (head - 1 - i) * (head_half - 1) / (head - 1).max(1);
                let x = cx + sign * (half - head + 1 + i);
                for y in (cy - hh)..=(cy + hh) {
                    put_banded(img, band, x, y, ARROW_COLOR);
                }
            }
        }
        ArrowDir::Up => {
            let x0 = cx - thickness / 2;
            for y_off in -(half - head)..=half {
                for x in x0..x0 + thickness {
                    put_banded(img, band, x, cy + y_off, ARROW_COLOR);
                }
            }
            for i in 0..head {
                let hh = 1 + (head - 1 - i) * (head_half - 1) / (head - 1).max(1);
                let y = cy - (half - head + 1 + i);
                for x in (cx - hh)..=(cx + hh) {
                    put_banded(img, band, x, y, ARROW_COLOR);
                }
            }
        }
    }
}

/// Composites the icons encoding `prev_action` into the frame's top band.
pub fn render_icons(
    img: &mut image::RgbImage,
    prev_action: &[f64],
    cfg: &IconConfig,
) -> Result<()> {
    if cfg.max_action_index() >= prev_action.len() {
        return Err(Error::Pipeline(format!(
            "action has {} components, icon config expects index {}",
            prev_action.len(),
            cfg.max_action_index()
        )));
    }
    let steer = prev_action[cfg.steer_index];
    let throttle = prev_action[cfg.throttle_index];
    let brake = prev_action[cfg.brake_index];

    let thickness = (throttle * cfg.thickness_scale).round().max(0.0) as i64;
    let thickness = thickness.min(cfg.thickness_cap as i64);
    if thickness >= 1 {
        let dir = if steer > 0.0 {
            ArrowDir::Right
        } else if steer < 0.0 {
            ArrowDir::Left
        } else {
            ArrowDir::Up
        };
        draw_arrow(img, cfg, dir, thickness);
    }

    if brake > cfg.brake_threshold {
        let band = cfg.band_height;
        let cx = img.width() as i64 - cfg.circle_margin as i64;
        let cy = band.min(img.height()) as i64 / 2;
        draw_filled_circle(img, band, cx, cy, cfg.circle_radius as i64);
    }
    Ok(())
}

fn continuous_action<'a>(action: &'a ActionValue, name: &str, frame: usize) -> Result<&'a [f64]> {
    match action {
        ActionValue::Continuous(v) => Ok(v),
        ActionValue::Discrete(_) => Err(Error::Pipeline(format!(
            "trajectory {name}: frame {frame} has a discrete action, \
             cannot map driving icons onto it"
        ))),
    }
}

fn png_name(image: &str) -> String {
    Path::new(image).with_extension("png").to_string_lossy().into_owned()
}

/// Copies one trajectory with icons composited; every output image is PNG.
pub fn confound_trajectory(
    traj: &Trajectory,
    out_traj_dir: &Path,
    cfg: &IconConfig,
) -> Result<()> {
    cfg.validate()?;
    std::fs::create_dir_all(out_traj_dir)
        .map_err(|e| Error::io(format!("creating {}", out_traj_dir.display()), e))?;
    let mut frames = Vec::with_capacity(traj.len());
    for t in 0..traj.len() {
        let record = &traj.manifest.frames[t];
        let path = traj.image_path(t);
        let mut img = image::open(&path)
            .map_err(|e| Error::image(format!("opening frame {}", path.display()), e))?
            .to_rgb8();
        if t > 0 {
            let prev = continuous_action(&traj.manifest.frames[t - 1].action, traj.name(), t - 1)?;
            render_icons(&mut img, prev, cfg)?;
        }
        let image_name = png_name(&record.image);
        let out_path = out_traj_dir.join(&image_name);
        if let Some(parent) = out_path.parent() {
            std::fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
        img.save(&out_path)
            .map_err(|e| Error::image(format!("writing frame {}", out_path.display()), e))?;
        frames.push(FrameRecord {
            index: record.index,
            image: image_name,
            action: record.action.clone(),
        });
    }
    let manifest = TrajectoryManifest {
        name: traj.manifest.name.clone(),
        width: traj.manifest.width,
        height: traj.manifest.height,
        frames,
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::json("encoding confounded manifest", e))?;
    text.push('\n');
    let path = out_traj_dir.join("manifest.json");
    std::fs::write(&path, text)
        .map_err(|e| Error::io(format!("writing manifest {}", path.display()), e))
}

/// Confounds every trajectory in the dataset; returns how many were written.
pub fn confound_dataset(dataset_dir: &Path, out_dir: &Path, cfg: &IconConfig) -> Result<usize> {
    let paths = discover_trajectories(dataset_dir)?;
    for traj_dir in &paths {
        let traj = crate::manifest::load_manifest(&traj_dir.join("manifest.json"))?;
        confound_trajectory(&traj, &out_dir.join(traj.name()), cfg)?;
    }
    Ok(paths.len())
}
