//! Scene description: input image, object boxes, caption and spatial tokens,
//! plus the per-object records and placement parameters shared by all stages.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{RgbImage, RgbaImage};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::raster::{load_rgba, Mask};
use crate::scalar::{lit, Scalar};

/// Axis-aligned pixel box. `x_max`/`y_max` are exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl ObjectSpec {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32) -> Result<Self> {
        let b = Self {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::validation(format!(
                "degenerate bbox [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(b)
    }

    pub fn full(width: u32, height: u32) -> Self {
        Self {
            x_min: 0,
            y_min: 0,
            x_max: width,
            y_max: height,
        }
    }

    pub fn width(&self) -> u32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min
    }

    /// Center in continuous pixel coordinates.
    pub fn center<T: Scalar>(&self) -> (T, T) {
        let two = lit::<T>(2.0);
        (
            (lit::<T>(self.x_min as f64) + lit(self.x_max as f64)) / two,
            (lit::<T>(self.y_min as f64) + lit(self.y_max as f64)) / two,
        )
    }

    #[inline]
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max
    }

    pub fn fits(&self, width: u32, height: u32) -> bool {
        self.x_max <= width && self.y_max <= height
    }

    pub fn to_array(&self) -> [i64; 4] {
        [
            self.x_min as i64,
            self.y_min as i64,
            self.x_max as i64,
            self.y_max as i64,
        ]
    }

    pub fn indicator(&self, width: u32, height: u32) -> Mask {
        Mask::from_fn(width, height, |x, y| self.contains(x, y))
    }

    pub(crate) fn validate_in(&self, width: u32, height: u32) -> Result<()> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::validation(format!("degenerate bbox {:?}", self.to_array())));
        }
        if !self.fits(width, height) {
            return Err(Error::validation(format!(
                "bbox {:?} exceeds image bounds {width}x{height}",
                self.to_array()
            )));
        }
        Ok(())
    }
}

/// Validated scene input.
#[derive(Debug, Clone)]
pub struct SceneInput {
    pub image: RgbaImage,
    /// Image path as written in the source document.
    pub image_path: PathBuf,
    pub objects: Vec<ObjectSpec>,
    pub caption: String,
    /// Sorted, de-duplicated positions in `tokenize_caption(caption)`.
    pub spatial_token_indices: Vec<usize>,
}

impl SceneInput {
    pub fn new(
        image: RgbaImage,
        image_path: PathBuf,
        objects: Vec<ObjectSpec>,
        caption: String,
        spatial_tokens: impl IntoIterator<Item = usize>,
    ) -> Result<Self> {
        let (w, h) = image.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::validation("image has zero width or height"));
        }
        if objects.is_empty() {
            return Err(Error::validation("scene has no objects"));
        }
        for (i, b) in objects.iter().enumerate() {
            b.validate_in(w, h)
                .map_err(|e| Error::validation(format!("object {i}: {e}")))?;
        }
        let tokens = tokenize_caption(&caption)?;
        let spatial: BTreeSet<usize> = spatial_tokens.into_iter().collect();
        if let Some(&bad) = spatial.iter().find(|&&j| j >= tokens.len()) {
            return Err(Error::validation(format!(
                "spatial token index {bad} out of range for {} caption tokens",
                tokens.len()
            )));
        }
        Ok(Self {
            image,
            image_path,
            objects,
            caption,
            spatial_token_indices: spatial.into_iter().collect(),
        })
    }

    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn tokens(&self) -> Vec<String> {
        tokenize_caption(&self.caption).expect("caption validated on construction")
    }

    pub fn document(&self) -> SceneDocument {
        SceneDocument {
            image: self.image_path.to_string_lossy().into_owned(),
            objects: self
                .objects
                .iter()
                .map(|b| ObjectEntry { bbox: b.to_array() })
                .collect(),
            caption: self.caption.clone(),
            spatial_tokens: self.spatial_token_indices.iter().map(|&j| j as i64).collect(),
        }
    }
}

/// On-disk scene schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneDocument {
    pub image: String,
    pub objects: Vec<ObjectEntry>,
    pub caption: String,
    #[serde(default)]
    pub spatial_tokens: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectEntry {
    pub bbox: [i64; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DocFormat {
    Json,
    Toml,
}

impl DocFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => DocFormat::Json,
            _ => DocFormat::Toml,
        }
    }
}

/// Parses a structured-text document, reporting schema violations with the
/// path of the offending field.
pub fn parse_document<D: DeserializeOwned>(text: &str, format: DocFormat) -> Result<D> {
    let value: serde_json::Value = match format {
        DocFormat::Json => serde_json::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?,
        DocFormat::Toml => {
            let v: toml::Value = toml::from_str(text).map_err(|e| Error::config("<document>", e.to_string()))?;
            serde_json::to_value(v).map_err(|e| Error::config("<document>", e.to_string()))?
        }
    };
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner().to_string();
        let field = if path == "." {
            backticked(&inner).unwrap_or_else(|| "<root>".to_string())
        } else {
            path
        };
        Error::config(field, inner)
    })
}

pub fn render_document<S: Serialize>(doc: &S, format: DocFormat) -> Result<String> {
    match format {
        DocFormat::Json => serde_json::to_string_pretty(doc).map_err(|e| Error::config("<document>", e.to_string())),
        DocFormat::Toml => toml::to_string_pretty(doc).map_err(|e| Error::config("<document>", e.to_string())),
    }
}

fn backticked(msg: &str) -> Option<String> {
    let start = msg.find('`')? + 1;
    let end = start + msg[start..].find('`')?;
    Some(msg[start..end].to_string())
}

fn to_u32(field: String, v: i64) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::validation(format!("{field}: coordinate {v} out of bounds")))
}

impl SceneDocument {
    /// Validates the document against an already decoded image.
    pub fn into_scene(self, image: RgbaImage) -> Result<SceneInput> {
        let mut objects = Vec::with_capacity(self.objects.len());
        for (i, o) in self.objects.iter().enumerate() {
            let [a, b, c, d] = o.bbox;
            let f = |k: usize| format!("objects[{i}].bbox[{k}]");
            let spec = ObjectSpec {
                x_min: to_u32(f(0), a)?,
                y_min: to_u32(f(1), b)?,
                x_max: to_u32(f(2), c)?,
                y_max: to_u32(f(3), d)?,
            };
            spec.validate_in(image.width(), image.height())
                .map_err(|e| Error::validation(format!("objects[{i}]: {e}")))?;
            objects.push(spec);
        }
        let mut spatial = Vec::with_capacity(self.spatial_tokens.len());
        for (k, &j) in self.spatial_tokens.iter().enumerate() {
            spatial.push(
                usize::try_from(j)
                    .map_err(|_| Error::validation(format!("spatial_tokens[{k}]: negative index {j}")))?,
            );
        }
        SceneInput::new(image, PathBuf::from(self.image), objects, self.caption, spatial)
    }
}

/// Loads and validates a scene document; the image path is resolved relative
/// to the document's directory.
pub fn load_scene(path: &Path) -> Result<SceneInput> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    load_scene_str(&text, DocFormat::from_path(path), base)
}

pub fn load_scene_str(text: &str, format: DocFormat, base_dir: &Path) -> Result<SceneInput> {
    let doc: SceneDocument = parse_document(text, format)?;
    let image = load_rgba(&base_dir.join(&doc.image))?;
    doc.into_scene(image)
}

pub fn save_scene(scene: &SceneInput, path: &Path) -> Result<()> {
    let text = render_document(&scene.document(), DocFormat::from_path(path))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Splits a caption into alphanumeric runs and single punctuation marks.
///
/// `"a squirrel is sitting on a box"` has 7 tokens with `"sitting"` at 3.
pub fn tokenize_caption(caption: &str) -> Result<Vec<String>> {
    let mut tokens = Vec::new();
    let mut word = String::new();
    for ch in caption.chars() {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            tokens.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            tokens.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        tokens.push(word);
    }
    if tokens.is_empty() {
        return Err(Error::validation("caption is empty"));
    }
    Ok(tokens)
}

/// Per-object similarity transform: uniform scale, extrinsic X-Y-Z Euler
/// angles in radians, translation in scene units (z along the camera axis).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlacementParams<T> {
    pub scale: T,
    pub rotation: [T; 3],
    pub translation: [T; 3],
}

impl<T: Scalar> PlacementParams<T> {
    /// Number of scalar components: `[s, rx, ry, rz, tx, ty, tz]`.
    pub const LEN: usize = 7;

    pub fn identity() -> Self {
        Self {
            scale: T::one(),
            rotation: [T::zero(); 3],
            translation: [T::zero(); 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.scale > T::zero()) || !self.scale.is_finite() {
            return Err(Error::validation(format!(
                "scale must be positive and finite, got {}",
                self.scale
            )));
        }
        if self.rotation.iter().chain(&self.translation).any(|v| !v.is_finite()) {
            return Err(Error::validation("placement has non-finite components"));
        }
        Ok(())
    }

    pub fn to_array(&self) -> [T; 7] {
        let [rx, ry, rz] = self.rotation;
        let [tx, ty, tz] = self.translation;
        [self.scale, rx, ry, rz, tx, ty, tz]
    }

    pub fn from_array(a: [T; 7]) -> Self {
        Self {
            scale: a[0],
            rotation: [a[1], a[2], a[3]],
            translation: [a[4], a[5], a[6]],
        }
    }

    pub fn cast<U: Scalar>(&self) -> PlacementParams<U> {
        let a = self.to_array().map(|v| U::from(v).expect("finite placement"));
        PlacementParams::from_array(a)
    }
}

/// Everything the decomposition stage produces for one object.
#[derive(Debug, Clone)]
pub struct ObjectRecord<T> {
    pub mask: Mask,
    pub cutout: RgbaImage,
    pub noised: RgbImage,
    pub inpaint_mask: Mask,
    pub completed: RgbImage,
    pub mesh: Option<TriangleMesh<T>>,
}

impl<T: Scalar> ObjectRecord<T> {
    /// Asserts the record invariants against the scene dimensions and box.
    pub fn new(
        dims: (u32, u32),
        bbox: &ObjectSpec,
        mask: Mask,
        cutout: RgbaImage,
        noised: RgbImage,
        inpaint_mask: Mask,
        completed: RgbImage,
    ) -> Result<Self> {
        for (name, d) in [
            ("mask", mask.dimensions()),
            ("cutout", cutout.dimensions()),
            ("noised", noised.dimensions()),
            ("inpaint_mask", inpaint_mask.dimensions()),
            ("completed", completed.dimensions()),
        ] {
            if d != dims {
                return Err(Error::validation(format!(
                    "{name} is {}x{}, scene is {}x{}",
                    d.0, d.1, dims.0, dims.1
                )));
            }
        }
        for y in 0..dims.1 {
            for x in 0..dims.0 {
                if mask.get(x, y) && !bbox.contains(x, y) {
                    return Err(Error::validation(format!(
                        "mask pixel ({x}, {y}) lies outside its bbox"
                    )));
                }
            }
        }
        Ok(Self {
            mask,
            cutout,
            noised,
            inpaint_mask,
            completed,
            mesh: None,
        })
    }
}
