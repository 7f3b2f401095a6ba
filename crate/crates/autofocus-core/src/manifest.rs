use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Expert action attached to one frame: either a continuous control vector or
/// a single discrete choice. A trajectory uses one variant throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ActionValue {
    Discrete(u64),
    Continuous(Vec<f64>),
}

impl ActionValue {
    pub fn is_continuous(&self) -> bool {
        matches!(self, ActionValue::Continuous(_))
    }

    fn variant_name(&self) -> &'static str {
        match self {
            ActionValue::Discrete(_) => "discrete",
            ActionValue::Continuous(_) => "continuous",
        }
    }

    /// Renders the action for a prompt: discrete as the bare integer,
    /// continuous as comma-separated decimals with 4 significant digits.
    pub fn to_prompt_text(&self) -> String {
        match self {
            ActionValue::Discrete(v) => v.to_string(),
            ActionValue::Continuous(values) => {
                let mut out = String::new();
                for (i, &v) in values.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    let _ = write!(out, "{}", format_significant(v));
                }
                out
            }
        }
    }
}

/// Formats a scalar with 4 significant digits in plain decimal notation.
/// Very large magnitudes keep their full integer part rather than switching
/// to scientific notation.
pub fn format_significant(x: f64) -> String {
    if x == 0.0 {
        return "0.000".to_owned();
    }
    let exponent = x.abs().log10().floor() as i32;
    let decimals = (3 - exponent).max(0) as usize;
    format!("{x:.decimals$}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameRecord {
    pub index: usize,
    pub image: String,
    pub action: ActionValue,
}

/// One demonstration: image-action pairs plus the common frame geometry.
/// Image paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryManifest {
    pub name: String,
    pub width: u32,
    pub height: u32,
    pub frames: Vec<FrameRecord>,
}

impl TrajectoryManifest {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Structural checks that need no file system access.
    fn validate_structure(&self, path: &Path) -> Result<()> {
        let fail = |message: String| Error::Manifest { path: path.to_owned(), message };
        if self.name.is_empty() {
            return Err(fail("name must be non-empty".into()));
        }
        if self.name.contains('/') || self.name.contains('\\') {
            return Err(fail(format!("name \"{}\" must not contain path separators", self.name)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(fail("width and height must be positive".into()));
        }
        if self.frames.is_empty() {
            return Err(fail("trajectory must contain at least one frame".into()));
        }
        for (expected, frame) in self.frames.iter().enumerate() {
            if frame.index > expected {
                return Err(fail(format!("gap at index {expected}")));
            }
            if frame.index < expected {
                return Err(fail(format!(
                    "duplicate or out-of-order frame index {}",
                    frame.index
                )));
            }
        }
        let first = &self.frames[0].action;
        for frame in &self.frames[1..] {
            if frame.action.is_continuous() != first.is_continuous() {
                return Err(fail(format!(
                    "mixed action variants: frame {} is {} but frame 0 is {}",
                    frame.index,
                    frame.action.variant_name(),
                    first.variant_name()
                )));
            }
        }
        Ok(())
    }
}

/// A manifest bound to the directory it was loaded from, so relative image
/// paths can be resolved.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub manifest: TrajectoryManifest,
    pub dir: PathBuf,
}

impl Trajectory {
    pub fn name(&self) -> &str {
        &self.manifest.name
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn image_path(&self, frame: usize) -> PathBuf {
        self.dir.join(&self.manifest.frames[frame].image)
    }

    /// Reads one frame's encoded image bytes.
    pub fn image_bytes(&self, frame: usize) -> Result<Vec<u8>> {
        let path = self.image_path(frame);
        std::fs::read(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
    }

    /// Reads one frame as PNG bytes. PNG files pass through untouched so
    /// repeated reads stay byte-identical; other formats are re-encoded.
    pub fn png_bytes(&self, frame: usize) -> Result<Vec<u8>> {
        const PNG_MAGIC: [u8; 4] = [0x89, b'P', b'N', b'G'];
        let bytes = self.image_bytes(frame)?;
        if bytes.len() >= 4 && bytes[..4] == PNG_MAGIC {
            return Ok(bytes);
        }
        let path = self.image_path(frame);
        let decoded = image::load_from_memory(&bytes)
            .map_err(|e| Error::image(format!("decoding {}", path.display()), e))?;
        let mut out = std::io::Cursor::new(Vec::new());
        decoded
            .write_to(&mut out, image::ImageFormat::Png)
            .map_err(|e| Error::image(format!("re-encoding {}", path.display()), e))?;
        Ok(out.into_inner())
    }
}

/// Loads and fully validates a trajectory manifest. Every referenced image
/// must exist and match the declared dimensions.
pub fn load_manifest(path: &Path) -> Result<Trajectory> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let manifest: TrajectoryManifest = serde_path_to_error::deserialize(de).map_err(|e| {
        Error::Manifest {
            path: path.to_owned(),
            message: format!("parse error at {}: {}", e.path(), e.inner()),
        }
    })?;
    manifest.validate_structure(path)?;

    let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_owned();
    for frame in &manifest.frames {
        let image_path = dir.join(&frame.image);
        if !image_path.is_file() {
            return Err(Error::Manifest {
                path: path.to_owned(),
                message: format!("frame {}: missing image {}", frame.index, image_path.display()),
            });
        }
        let (w, h) = image::image_dimensions(&image_path)
            .map_err(|e| Error::image(format!("frame {}: {}", frame.index, image_path.display()), e))?;
        if (w, h) != (manifest.width, manifest.height) {
            return Err(Error::Manifest {
                path: path.to_owned(),
                message: format!(
                    "frame {}: image {} is {w}x{h}, manifest declares {}x{}",
                    frame.index,
                    image_path.display(),
                    manifest.width,
                    manifest.height
                ),
            });
        }
    }
    Ok(Trajectory { manifest, dir })
}
