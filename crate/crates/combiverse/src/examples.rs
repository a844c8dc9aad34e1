//! Bundled example scenes, each a scene document, its image and a run config.

use std::path::{Path, PathBuf};

use combiverse_core::combiner::{AblationMode, ParamMask};
use combiverse_core::guidance::GuidanceMode;
use combiverse_core::mesh::TriangleMesh;
use combiverse_core::raster::save_image;
use combiverse_core::render::{reference_camera, render, CameraModel, ComposedScene, ReferenceFraming, RenderSettings};
use combiverse_core::scene::{render_document, DocFormat, ObjectEntry, ObjectSpec, PlacementParams, SceneDocument};
use combiverse_core::scenes::{squirrel_on_box, toy_potential, ToyStart, TOY_CAPTION, TOY_SPATIAL_TOKENS};
use combiverse_core::{Error, Placement, Result};
use image::{Rgba, RgbaImage};
use serde::{Deserialize, Serialize};

use crate::config::{Backend, DepthMock, InitConfig, ReconstructorMock, RunConfig, ScoreBackend, SegmenterMock};

pub const NAMES: [&str; 3] = ["two-cubes", "toy-left", "toy-right"];

const CUBES_SIZE: u32 = 64;
const CUBES_Z_REF: f64 = 3.5;

pub struct Example {
    pub document: SceneDocument,
    pub image: RgbaImage,
    pub config: RunConfig,
    /// Placements the image was rendered from, in the pipeline's frame.
    pub truth: Option<Vec<Placement>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub placements: Vec<Placement>,
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Bounding box of alpha above `threshold`, grown by one pixel.
fn alpha_bbox(alpha: &ndarray::Array2<f64>, threshold: f64) -> Result<ObjectSpec> {
    let (h, w) = alpha.dim();
    let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
    for ((y, x), &a) in alpha.indexed_iter() {
        if a > threshold {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    if x1 <= x0 {
        return Err(Error::validation("object is not visible"));
    }
    ObjectSpec::new(
        x0.saturating_sub(1) as u32,
        y0.saturating_sub(1) as u32,
        (x1 + 1).min(w) as u32,
        (y1 + 1).min(h) as u32,
    )
}

pub fn cube_truth() -> Vec<Placement> {
    vec![
        PlacementParams {
            scale: 0.24,
            rotation: [0.35, 0.6, 0.1],
            translation: [-0.2, 0.05, 3.3],
        },
        PlacementParams {
            scale: 0.2,
            rotation: [-0.2, 0.4, 0.3],
            translation: [0.21, -0.05, 3.7],
        },
    ]
}

/// Two flat-colored cubes on white, rendered by the pipeline's own reference camera.
pub fn two_cubes() -> Result<Example> {
    let framing = ReferenceFraming {
        image_width: CUBES_SIZE,
        image_height: CUBES_SIZE,
        pixel_to_scene: 1.0 / CUBES_SIZE as f64,
        z_ref: CUBES_Z_REF,
        resolution: CUBES_SIZE as usize,
        model: CameraModel::Pinhole,
    };
    let camera = reference_camera(&framing)?;
    let meshes = [
        TriangleMesh::unit_cube([0.85, 0.3, 0.2]),
        TriangleMesh::unit_cube([0.2, 0.45, 0.85]),
    ];
    let truth = cube_truth();
    let settings = RenderSettings::default();
    let out = render(
        &ComposedScene::new(meshes.iter().zip(truth.iter().copied()))?,
        &camera,
        &settings,
    )?;
    let image = RgbaImage::from_fn(CUBES_SIZE, CUBES_SIZE, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let a = out.alpha[[y, x]];
        let c = |k: usize| to_u8(out.rgb[[k, y, x]] + (1.0 - a));
        Rgba([c(0), c(1), c(2), 255])
    });
    let objects = meshes
        .iter()
        .zip(&truth)
        .map(|(m, p)| {
            let single = render(&ComposedScene::new([(m, *p)])?, &camera, &settings)?;
            Ok(ObjectEntry {
                bbox: alpha_bbox(&single.alpha, 0.02)?.to_array(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut config = RunConfig::default();
    config.backends.depth = Backend::Mock(DepthMock::Constant { value: CUBES_Z_REF });
    config.init = InitConfig {
        z_ref: CUBES_Z_REF,
        ..InitConfig::default()
    };
    config.combine.guidance.mode = GuidanceMode::Base;
    config.combine.optimizer.iterations = 200;
    config.combine.checkpoint_every = 50;
    config.ablation.modes = vec![
        AblationMode::Base,
        AblationMode::Depth,
        AblationMode::Sds,
        AblationMode::SsdsFull,
    ];
    Ok(Example {
        document: SceneDocument {
            image: "image.png".into(),
            objects,
            caption: "a red cube next to a blue cube".into(),
            spatial_tokens: vec![3, 4],
        },
        image,
        config,
        truth: Some(truth),
    })
}

/// The 2D layout toy: a sprite that should sit on a box, drawn at its start position.
pub fn toy(start: ToyStart) -> Result<Example> {
    let scene = squirrel_on_box(start);
    let (image, boxes) = scene.drawing();
    let mut config = RunConfig::default();
    config.backends.segmenter = Backend::Mock(SegmenterMock::Key);
    config.backends.reconstructor = Backend::Mock(ReconstructorMock::Billboard);
    // Upper rows closer, so the sprite draws over the box.
    config.backends.depth = Backend::Mock(DepthMock::Ramp { top: 1.0, bottom: 3.0 });
    config.backends.score = ScoreBackend::Mock {
        potential: toy_potential(),
    };
    config.init = InitConfig {
        camera: CameraModel::Orthographic,
        ..InitConfig::default()
    };
    let c = &mut config.combine;
    c.guidance.mode = GuidanceMode::Ssds;
    c.guidance.weights.reference = 0.0;
    c.views.reference_only = true;
    c.optimizer.iterations = 300;
    // One scene unit spans the 64-pixel image, so this is about 0.6 px per step.
    c.optimizer.lr_default = 0.01;
    c.optimizer.trainable = ParamMask::translation_xy();
    c.optimizer.frozen_objects = vec![0];
    c.checkpoint_every = 50;
    config.ablation.modes = vec![
        AblationMode::SsdsFull,
        AblationMode::SsdsUniform,
        AblationMode::SsdsLow,
        AblationMode::Sds,
    ];
    Ok(Example {
        document: SceneDocument {
            image: "image.png".into(),
            objects: boxes.iter().map(|b| ObjectEntry { bbox: b.to_array() }).collect(),
            caption: TOY_CAPTION.into(),
            spatial_tokens: TOY_SPATIAL_TOKENS.iter().map(|&t| t as i64).collect(),
        },
        image,
        config,
        truth: None,
    })
}

pub fn by_name(name: &str) -> Result<Example> {
    match name {
        "two-cubes" => two_cubes(),
        "toy-left" => toy(ToyStart::Left),
        "toy-right" => toy(ToyStart::Right),
        other => Err(Error::config(
            "example",
            format!("unknown example `{other}`; expected one of {}", NAMES.join(", ")),
        )),
    }
}

impl Example {
    /// Writes `scene.json`, `image.png`, `config.toml` and, when known, `truth.json`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut written = Vec::new();
        let mut put = |name: &str, text: String| -> Result<()> {
            let p = dir.join(name);
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            written.push(p);
            Ok(())
        };
        put("scene.json", render_document(&self.document, DocFormat::Json)? + "\n")?;
        put("config.toml", self.config.to_toml()?)?;
        if let Some(t) = &self.truth {
            put(
                "truth.json",
                render_document(&Truth { placements: t.clone() }, DocFormat::Json)? + "\n",
            )?;
        }
        let img = dir.join("image.png");
        save_image(&self.image, &img)?;
        written.push(img);
        Ok(written)
    }
}
