//! Small built-in scenes used by the examples, benchmarks and tests.

use image::{Rgba, RgbaImage};

use crate::camera::{CameraSpec, Projection, RigidPose};
use crate::combiner::{CombineConfig, CombineProblem, ParamMask};
use crate::error::Result;
use crate::guidance::synthetic::{Gain, PotentialConfig, SyntheticProvider, TermConfig, TermKind};
use crate::guidance::GuidanceMode;
use crate::mesh::TriangleMesh;
use crate::raster::Raster;
use crate::render::{render, RenderSettings};
use crate::scene::{ObjectSpec, PlacementParams};

pub const TOY_CAPTION: &str = "a squirrel is sitting on a box";
/// "sitting" and "on".
pub const TOY_SPATIAL_TOKENS: [usize; 2] = [3, 4];
pub const TOY_SIZE: usize = 64;
/// Canvas pixels per scene unit.
const TOY_SCALE: f64 = 32.0;

const SQUIRREL_COLOR: [f64; 3] = [0.9, 0.5, 0.0];
const BOX_COLOR: [f64; 3] = [0.0, 0.4, 0.9];
const SQUIRREL_PX: f64 = 12.0;
const BOX_PX: (f64, f64) = (24.0, 16.0);
const BOX_CENTER_PX: (f64, f64) = (32.0, 46.0);

/// Squirrel center minus box center when sitting on top, in pixels.
pub const TOY_OFFSET_PX: [f64; 2] = [0.0, -(BOX_PX.1 + SQUIRREL_PX) / 2.0];

/// Anchor weight of the content term.
pub const TOY_CONTENT_WEIGHT: f64 = 1.0;
/// Weight of the low-noise term holding the squirrel where it is drawn.
pub const TOY_PLACE_WEIGHT: f64 = 0.1;
/// Weight of the relation term before attention scaling.
pub const TOY_RELATION_WEIGHT: f64 = 0.15;

/// The two starting positions of the movable sprite.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ToyStart {
    /// Up and to the left of the box.
    Left,
    /// Right of the box, roughly level with its top.
    Right,
}

impl ToyStart {
    pub const BOTH: [ToyStart; 2] = [ToyStart::Left, ToyStart::Right];

    pub fn center_px(&self) -> (f64, f64) {
        match self {
            ToyStart::Left => (14.0, 14.0),
            ToyStart::Right => (52.0, 24.0),
        }
    }
}

/// Axis-aligned rectangle facing the camera, normalized to unit longest side.
pub fn rectangle(width: f64, height: f64, color: [f64; 3]) -> TriangleMesh<f64> {
    let mut m = TriangleMesh::unit_quad(color);
    let long = width.max(height);
    for v in &mut m.vertices {
        v[0] *= width / long;
        v[1] *= height / long;
    }
    m
}

fn px_to_scene(center: (f64, f64)) -> (f64, f64) {
    let half = TOY_SIZE as f64 / 2.0;
    ((center.0 - half) / TOY_SCALE, -(center.1 - half) / TOY_SCALE)
}

/// Orthographic camera over the toy canvas.
pub fn toy_camera() -> CameraSpec<f64> {
    let c = TOY_SIZE as f64 / 2.0;
    CameraSpec {
        pose: RigidPose::identity(),
        projection: Projection::Orthographic {
            scale: TOY_SCALE,
            cx: c,
            cy: c,
        },
        width: TOY_SIZE,
        height: TOY_SIZE,
    }
}

/// 2D layout benchmark: a squirrel sprite that should sit on a box.
#[derive(Debug, Clone)]
pub struct ToyScene {
    pub start: ToyStart,
    /// Box first, then the squirrel.
    pub meshes: Vec<TriangleMesh<f64>>,
    pub init: Vec<PlacementParams<f64>>,
    pub camera: CameraSpec<f64>,
    pub potential: PotentialConfig,
}

pub fn squirrel_on_box(start: ToyStart) -> ToyScene {
    let (bx, by) = px_to_scene(BOX_CENTER_PX);
    let (sx, sy) = px_to_scene(start.center_px());
    let place = |size_px: f64, x: f64, y: f64, z: f64| PlacementParams {
        scale: size_px / TOY_SCALE,
        rotation: [0.0; 3],
        translation: [x, y, z],
    };
    ToyScene {
        start,
        meshes: vec![
            rectangle(BOX_PX.0, BOX_PX.1, BOX_COLOR),
            rectangle(SQUIRREL_PX, SQUIRREL_PX, SQUIRREL_COLOR),
        ],
        init: vec![
            place(BOX_PX.0.max(BOX_PX.1), bx, by, 2.0),
            place(SQUIRREL_PX, sx, sy, 1.5),
        ],
        camera: toy_camera(),
        potential: toy_potential(),
    }
}

/// Content terms tied to "squirrel", relation term tied to "sitting".
pub fn toy_potential() -> PotentialConfig {
    PotentialConfig {
        terms: vec![
            TermConfig {
                token: 1,
                weight: TOY_CONTENT_WEIGHT,
                gain: Gain::Constant,
                potential: TermKind::Anchor,
            },
            TermConfig {
                token: 1,
                weight: TOY_PLACE_WEIGHT,
                gain: Gain::LowNoise {
                    center: 600.0,
                    width: 50.0,
                },
                potential: TermKind::CentroidAnchor { key: [1.0, 0.0, 0.0] },
            },
            TermConfig {
                token: 3,
                weight: TOY_RELATION_WEIGHT,
                gain: Gain::HighNoise {
                    center: 600.0,
                    width: 50.0,
                },
                potential: TermKind::Relation {
                    a: [1.0, 0.0, 0.0],
                    b: [0.0, 0.0, 1.0],
                    offset: TOY_OFFSET_PX,
                },
            },
        ],
    }
}

impl ToyScene {
    pub fn render_settings(&self) -> RenderSettings<f64> {
        RenderSettings::default()
    }

    /// The starting layout, which the content term treats as already correct.
    pub fn reference_image(&self) -> Result<Raster<f64>> {
        let scene = crate::render::ComposedScene::new(self.meshes.iter().zip(self.init.iter().copied()))?;
        Ok(render(&scene, &self.camera, &self.render_settings())?.rgb)
    }

    pub fn provider(&self, seed: u64) -> Result<SyntheticProvider<f64>> {
        let anchor = self.reference_image()?;
        SyntheticProvider::new(TOY_CAPTION, self.potential.resolve(Some(&anchor))?, seed)
    }

    /// Distillation-only problem over the single canvas view.
    pub fn problem<'a>(&'a self, provider: &'a SyntheticProvider<f64>) -> Result<CombineProblem<'a, f64>> {
        let scene = crate::render::ComposedScene::new(self.meshes.iter().zip(self.init.iter().copied()))?;
        let out = render(&scene, &self.camera, &self.render_settings())?;
        Ok(CombineProblem {
            meshes: self.meshes.iter().collect(),
            reference: self.camera,
            target_rgb: out.rgb,
            target_alpha: out.alpha,
            z_ref: 2.0,
            depth: None,
            provider: Some(provider),
            prompt: TOY_CAPTION.to_string(),
            spatial_tokens: TOY_SPATIAL_TOKENS.to_vec(),
        })
    }

    /// Only the squirrel's in-plane position moves and no reference loss applies.
    pub fn config(&self, mode: GuidanceMode, seed: u64) -> CombineConfig {
        let mut c = CombineConfig::default();
        c.guidance.mode = mode;
        c.guidance.weights.reference = 0.0;
        c.views.reference_only = true;
        c.optimizer.iterations = 300;
        c.optimizer.lr_default = 0.01;
        c.optimizer.seed = seed;
        c.optimizer.trainable = ParamMask::translation_xy();
        c.optimizer.frozen_objects = vec![0];
        c
    }

    /// Squirrel center in canvas pixels for the given placements.
    pub fn squirrel_center_px(params: &[PlacementParams<f64>]) -> (f64, f64) {
        let t = params[1].translation;
        let half = TOY_SIZE as f64 / 2.0;
        (t[0] * TOY_SCALE + half, -t[1] * TOY_SCALE + half)
    }

    /// Distance in pixels from the squirrel to where it would sit on the box.
    pub fn relation_error_px(params: &[PlacementParams<f64>]) -> f64 {
        let (x, y) = Self::squirrel_center_px(params);
        let t = params[0].translation;
        let half = TOY_SIZE as f64 / 2.0;
        let (bx, by) = (t[0] * TOY_SCALE + half, -t[1] * TOY_SCALE + half);
        ((x - bx - TOY_OFFSET_PX[0]).powi(2) + (y - by - TOY_OFFSET_PX[1]).powi(2)).sqrt()
    }

    /// Scene input for the full pipeline: a hard-edged drawing of the start
    /// layout on a white background with both boxes.
    pub fn drawing(&self) -> (RgbaImage, Vec<ObjectSpec>) {
        let size = TOY_SIZE as u32;
        let to_u8 = |c: [f64; 3]| {
            Rgba([
                (c[0] * 255.0).round() as u8,
                (c[1] * 255.0).round() as u8,
                (c[2] * 255.0).round() as u8,
                255,
            ])
        };
        let mut img = RgbaImage::from_pixel(size, size, Rgba([255, 255, 255, 255]));
        let rect = |center: (f64, f64), w: f64, h: f64| {
            let x0 = (center.0 - w / 2.0).round() as u32;
            let y0 = (center.1 - h / 2.0).round() as u32;
            ObjectSpec {
                x_min: x0,
                y_min: y0,
                x_max: x0 + w as u32,
                y_max: y0 + h as u32,
            }
        };
        let boxes = vec![
            rect(BOX_CENTER_PX, BOX_PX.0, BOX_PX.1),
            rect(self.start.center_px(), SQUIRREL_PX, SQUIRREL_PX),
        ];
        for (b, color) in boxes.iter().zip([BOX_COLOR, SQUIRREL_COLOR]) {
            for y in b.y_min..b.y_max {
                for x in b.x_min..b.x_max {
                    img.put_pixel(x, y, to_u8(color));
                }
            }
        }
        (img, boxes)
    }
}

/// Reference scene with known placements: two cubes seen by a pinhole camera.
#[derive(Debug, Clone)]
pub struct CubePair {
    pub meshes: Vec<TriangleMesh<f64>>,
    pub truth: Vec<PlacementParams<f64>>,
    pub camera: CameraSpec<f64>,
    pub z_ref: f64,
}

impl CubePair {
    /// Longest side of the bounding box of the placed cubes.
    pub fn extent(&self) -> f64 {
        let scene =
            crate::render::ComposedScene::new(self.meshes.iter().zip(self.truth.iter().copied())).expect("valid scene");
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for o in &scene.objects {
            for p in crate::render::apply_transform(o.mesh, &o.params).expect("valid params") {
                for k in 0..3 {
                    lo[k] = lo[k].min(p[k]);
                    hi[k] = hi[k].max(p[k]);
                }
            }
        }
        (0..3).map(|k| hi[k] - lo[k]).fold(0.0, f64::max)
    }

    /// Base-mode problem whose target is the ground-truth render.
    pub fn problem(&self, settings: &RenderSettings<f64>) -> Result<CombineProblem<'_, f64>> {
        let scene = crate::render::ComposedScene::new(self.meshes.iter().zip(self.truth.iter().copied()))?;
        let target = render(&scene, &self.camera, settings)?;
        Ok(CombineProblem {
            meshes: self.meshes.iter().collect(),
            reference: self.camera,
            target_rgb: target.rgb,
            target_alpha: target.alpha,
            z_ref: self.z_ref,
            depth: None,
            provider: None,
            prompt: "a red cube next to a blue cube".into(),
            spatial_tokens: vec![],
        })
    }

    /// Ground truth with each translation moved by `fraction` of the extent
    /// along a fixed unit direction.
    pub fn perturbed(&self, fraction: f64) -> Vec<PlacementParams<f64>> {
        let dirs = [[0.6, -0.8, 0.0], [-0.48, -0.6, 0.64]];
        let d = fraction * self.extent();
        self.truth
            .iter()
            .zip(dirs.iter().cycle())
            .map(|(p, u)| {
                let mut p = *p;
                for k in 0..3 {
                    p.translation[k] += d * u[k];
                }
                p
            })
            .collect()
    }

    /// Largest translation error over the objects, as a fraction of the extent.
    pub fn translation_error(&self, params: &[PlacementParams<f64>]) -> f64 {
        params
            .iter()
            .zip(&self.truth)
            .map(|(p, t)| {
                (0..3)
                    .map(|k| (p.translation[k] - t.translation[k]).powi(2))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max)
            / self.extent()
    }
}

pub fn cube_pair(resolution: usize) -> CubePair {
    let shade = |base: [f64; 3]| {
        let mut m = TriangleMesh::unit_cube(base);
        // Vary the color per corner so rotations are observable.
        for (v, c) in m.vertices.iter().zip(m.colors.iter_mut()) {
            for k in 0..3 {
                c[k] = (c[k] * (0.75 + 0.5 * (v[k] + 0.5) * 0.5)).min(1.0);
            }
        }
        m
    };
    let f = resolution as f64 * 1.2;
    let c = resolution as f64 / 2.0;
    CubePair {
        meshes: vec![shade([0.85, 0.35, 0.2]), shade([0.2, 0.45, 0.85])],
        truth: vec![
            PlacementParams {
                scale: 0.8,
                rotation: [0.25, 0.6, 0.1],
                translation: [-0.55, -0.15, 3.2],
            },
            PlacementParams {
                scale: 0.6,
                rotation: [-0.3, 0.3, 0.4],
                translation: [0.6, 0.25, 3.8],
            },
        ],
        camera: CameraSpec {
            pose: RigidPose::identity(),
            projection: Projection::Pinhole { focal: f, cx: c, cy: c },
            width: resolution,
            height: resolution,
        },
        z_ref: 3.5,
    }
}
