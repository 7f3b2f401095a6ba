//! Deterministic fixture data for end-to-end tests and benches: a two-
//! trajectory dataset with detection fixtures and scripted VLM responses
//! exercising vocabulary recovery, sub-sequence splitting boundaries,
//! unknown-id handling, fenced and prose-wrapped replies, and both action
//! variants.
//!
//! Everything here is pixel- and byte-deterministic: the same call always
//! writes the same files.

use std::path::{Path, PathBuf};

use crate::detect::{BBox, Detection, FrameDetections};
use crate::error::{Error, Result};
use crate::manifest::{load_manifest, Trajectory};

fn fill_rect(img: &mut image::RgbImage, bbox: &BBox, color: [u8; 3]) {
    let (w, h) = img.dimensions();
    let x0 = bbox.x_min.max(0.0) as u32;
    let y0 = bbox.y_min.max(0.0) as u32;
    let x1 = (bbox.x_max as u32).min(w);
    let y1 = (bbox.y_max as u32).min(h);
    for y in y0..y1 {
        for x in x0..x1 {
            img.put_pixel(x, y, image::Rgb(color));
        }
    }
}

/// Gradient that never produces a pure icon color (blue channel is fixed).
fn background(width: u32, height: u32, t: usize) -> image::RgbImage {
    image::RgbImage::from_fn(width, height, |x, y| {
        image::Rgb([(x * 2 + t as u32 * 5) as u8, (y * 3) as u8, 70])
    })
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(format!("encoding {}", path.display()), e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn car_box(t: usize) -> BBox {
    BBox::new(4.0 + 6.0 * t as f64, 30.0, 26.0 + 6.0 * t as f64, 44.0)
}

fn person_box(t: usize) -> BBox {
    let k = (t - 3) as f64;
    BBox::new(72.0 - 2.0 * k, 26.0, 80.0 - 2.0 * k, 44.0)
}

const LIGHT_BOX: [f64; 4] = [44.0, 4.0, 50.0, 20.0];

fn spoon_box(t: usize) -> BBox {
    let k = (t - 2) as f64;
    BBox::new(20.0 + 3.0 * k, 18.0, 30.0 + 3.0 * k, 30.0)
}

const POT_BOX: [f64; 4] = [30.0, 34.0, 54.0, 52.0];

/// "alpha": 8 driving frames, 96x64, continuous actions. The detector
/// fixture knows car, person and traffic light; the scripted context query
/// only surfaces car and person, and the light is recovered by a
/// missing-category retry on the first sub-sequence.
fn write_alpha(dataset: &Path) -> Result<()> {
    let dir = dataset.join("alpha");
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;

    let mut frames = Vec::new();
    let mut fixture = Vec::new();
    for t in 0..8usize {
        let mut img = background(96, 64, t);
        fill_rect(&mut img, &car_box(t), [40, 90, 200]);
        if t >= 3 {
            fill_rect(&mut img, &person_box(t), [210, 130, 60]);
        }
        fill_rect(&mut img, &BBox::from(LIGHT_BOX), [220, 210, 60]);
        let file = format!("{t:06}.png");
        img.save(dir.join(&file))
            .map_err(|e| Error::image(format!("writing alpha frame {t}"), e))?;

        frames.push(serde_json::json!({
            "index": t,
            "image": file,
            "action": [
                (t as f64 - 3.5) * 0.1,
                0.4 + 0.05 * t as f64,
                if t >= 6 { 0.8 } else { 0.0 },
            ],
        }));

        let mut detections = vec![Detection {
            label: "car".into(),
            confidence: 0.92,
            bbox: car_box(t),
        }];
        if t >= 3 {
            detections.push(Detection {
                label: "person".into(),
                confidence: 0.85,
                bbox: person_box(t),
            });
        }
        detections.push(Detection {
            label: "traffic light".into(),
            confidence: 0.9,
            bbox: BBox::from(LIGHT_BOX),
        });
        if t == 5 {
            // Below the confidence gate; must never surface.
            detections.push(Detection {
                label: "car".into(),
                confidence: 0.15,
                bbox: BBox::new(10.0, 46.0, 30.0, 60.0),
            });
        }
        fixture.push(FrameDetections { frame_index: t, detections });
    }

    write_json(
        &dir.join("manifest.json"),
        &serde_json::json!({ "name": "alpha", "width": 96, "height": 64, "frames": frames }),
    )?;
    crate::detect::write_detections_file(&dir.join("detections.json"), &fixture)
}

/// "beta": 6 manipulation frames, 80x60, discrete actions. Exercises a
/// mid-trajectory track (three sub-sequences) and an hallucinated key id.
fn write_beta(dataset: &Path) -> Result<()> {
    let dir = dataset.join("beta");
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;

    let actions = [0u64, 1, 2, 1, 0, 3];
    let mut frames = Vec::new();
    let mut fixture = Vec::new();
    for (t, &action) in actions.iter().enumerate() {
        let mut img = background(80, 60, t);
        fill_rect(&mut img, &BBox::from(POT_BOX), [120, 120, 130]);
        if (2..=4).contains(&t) {
            fill_rect(&mut img, &spoon_box(t), [70, 180, 90]);
        }
        let file = format!("{t:06}.png");
        img.save(dir.join(&file))
            .map_err(|e| Error::image(format!("writing beta frame {t}"), e))?;

        frames.push(serde_json::json!({
            "index": t,
            "image": file,
            "action": action,
        }));

        let mut detections = vec![Detection {
            label: "pot".into(),
            confidence: 0.88,
            bbox: BBox::from(POT_BOX),
        }];
        if (2..=4).contains(&t) {
            detections.push(Detection {
                label: "spoon".into(),
                confidence: 0.75,
                bbox: spoon_box(t),
            });
        }
        fixture.push(FrameDetections { frame_index: t, detections });
    }

    write_json(
        &dir.join("manifest.json"),
        &serde_json::json!({ "name": "beta", "width": 80, "height": 60, "frames": frames }),
    )?;
    crate::detect::write_detections_file(&dir.join("detections.json"), &fixture)
}

fn mock_script() -> serde_json::Value {
    let alpha_context = "Here is the summary you asked for:\n```json\n{\"task\": \"drive along the street and stop at the light\", \"environment\": \"sunny town road\", \"risks\": [\"crossing pedestrian\"], \"objects\": [\"Car\", \"person\", \"Car \"]}\n```";
    let alpha_sub0_round1 =
        r#"{"key_object_ids": [0], "missing_categories": ["Traffic Light"]}"#;
    let alpha_sub0_round2 = r#"{"key_object_ids": [0, 2], "missing_categories": []}"#;
    let alpha_sub1 = "The car keeps following the pedestrian, so both matter. {\"key_object_ids\": [0, 1], \"missing_categories\": []}";

    let beta_context = r#"{"task": "stir the pot", "environment": "kitchen counter", "risks": [], "objects": ["pot", "spoon"]}"#;
    let beta_sub0 = r#"{"key_object_ids": [0], "missing_categories": []}"#;
    let beta_sub1 = r#"{"key_object_ids": [0, 1, 9], "missing_categories": []}"#;
    let beta_sub2 = r#"{"key_object_ids": [0], "missing_categories": []}"#;

    serde_json::json!({
        "alpha": [alpha_context, alpha_sub0_round1, alpha_sub0_round2, alpha_sub1],
        "beta": [beta_context, beta_sub0, beta_sub1, beta_sub2],
    })
}

pub struct GoldenDataset {
    pub dataset_dir: PathBuf,
    /// VLM response script, `{"<trajectory>": ["reply 0", ...]}`.
    pub mock_path: PathBuf,
    /// Fixture filename relative to each trajectory directory.
    pub detections_name: &'static str,
}

/// Writes the full fixture dataset under `root` and returns its paths.
pub fn write_golden_dataset(root: &Path) -> Result<GoldenDataset> {
    let dataset_dir = root.join("dataset");
    write_alpha(&dataset_dir)?;
    write_beta(&dataset_dir)?;
    let mock_path = root.join("mock_vlm.json");
    write_json(&mock_path, &mock_script())?;
    Ok(GoldenDataset { dataset_dir, mock_path, detections_name: "detections.json" })
}

/// Writes a single driving trajectory with the given scripted actions,
/// deterministic gradient frames (never pure white or red) and no detection
/// fixture; used by the confound tests.
pub fn write_driving_trajectory(
    dir: &Path,
    name: &str,
    width: u32,
    height: u32,
    actions: &[[f64; 3]],
) -> Result<Trajectory> {
    let traj_dir = dir.join(name);
    std::fs::create_dir_all(&traj_dir)
        .map_err(|e| Error::io(format!("creating {}", traj_dir.display()), e))?;
    let mut frames = Vec::new();
    for (t, action) in actions.iter().enumerate() {
        let file = format!("{t:06}.png");
        background(width, height, t)
            .save(traj_dir.join(&file))
            .map_err(|e| Error::image(format!("writing {name} frame {t}"), e))?;
        frames.push(serde_json::json!({ "index": t, "image": file, "action": action }));
    }
    write_json(
        &traj_dir.join("manifest.json"),
        &serde_json::json!({ "name": name, "width": width, "height": height, "frames": frames }),
    )?;
    load_manifest(&traj_dir.join("manifest.json"))
}
