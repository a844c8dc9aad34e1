//! Backend construction from the run config, the extra mocks the pipeline
//! ships with, and the file-exchange protocol for external programs.
//!
//! An external backend is a program called as `command... <operation> <dir>`.
//! The pipeline writes the request into `dir` and reads the response from it:
//!
//! | operation       | request                                   | response       |
//! |-----------------|-------------------------------------------|----------------|
//! | `segment`       | `image.png`, `request.json` `{bbox}`      | `mask.png`     |
//! | `inpaint`       | `image.png`, `mask.png`, `request.json`   | `output.png`   |
//! | `reconstruct`   | `image.png`                               | `mesh.obj`     |
//! | `depth`         | `image.png`                               | `depth.bin`    |
//! | `predict_noise` | `noisy.bin`, `noise.bin`, `request.json`  | `eps.bin`      |
//! | `attention`     | `noisy.bin`, `noise.bin`, `request.json`  | `attention.json` plus one `.bin` per site |
//!
//! Tensors use the core's binary tensor format. A nonzero exit status is a
//! backend failure and its stderr becomes the error message.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Stdio};

use combiverse_core::decomposition::{
    BoxSegmenter, FillInpainter, IdentityInpainter, InpaintRequest, InpainterClient, KeySegmenter, ReconstructorClient,
    SegmenterClient,
};
use combiverse_core::guidance::synthetic::SyntheticProvider;
use combiverse_core::guidance::{AttentionSite, NoiseQuery, NoiseSchedule, ScoreProvider, TokenScaling, TOTAL_STEPS};
use combiverse_core::mesh::obj::{read_obj, write_obj};
use combiverse_core::mesh::TriangleMesh;
use combiverse_core::raster::{load_rgba, save_image, Mask, Raster};
use combiverse_core::scene::ObjectSpec;
use combiverse_core::scenes::rectangle;
use combiverse_core::spatial_init::{ConstantDepth, DepthClient, RampDepth};
use combiverse_core::tensor_io::{self, DType};
use combiverse_core::{BackendError, Error, Result};
use image::{RgbImage, RgbaImage};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::config::{Backend, DepthMock, InpainterMock, ReconstructorMock, ScheduleKind, ScoreBackend, SegmenterMock};

/// Most frequent exact color and the bounding box of the pixels that have it.
fn dominant_color(image: &RgbImage) -> Option<([u8; 3], ObjectSpec)> {
    let mut counts: BTreeMap<[u8; 3], usize> = BTreeMap::new();
    for p in image.pixels() {
        *counts.entry(p.0).or_default() += 1;
    }
    // First maximum in key order keeps ties deterministic.
    let (&color, _) = counts.iter().rev().max_by_key(|(_, &n)| n)?;
    let (mut x0, mut y0, mut x1, mut y1) = (u32::MAX, u32::MAX, 0, 0);
    for (x, y, p) in image.enumerate_pixels() {
        if p.0 == color {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x + 1);
            y1 = y1.max(y + 1);
        }
    }
    Some((
        color,
        ObjectSpec {
            x_min: x0,
            y_min: y0,
            x_max: x1,
            y_max: y1,
        },
    ))
}

fn unit_color(c: [u8; 3]) -> [f64; 3] {
    c.map(|v| v as f64 / 255.0)
}

/// Unit cube tinted with the dominant image color.
#[derive(Debug, Default, Clone, Copy)]
pub struct DominantCube;

impl ReconstructorClient for DominantCube {
    fn reconstruct(&self, image: &RgbImage) -> std::result::Result<TriangleMesh<f64>, BackendError> {
        let (color, _) = dominant_color(image).ok_or_else(|| BackendError::new("empty image"))?;
        Ok(TriangleMesh::unit_cube(unit_color(color)))
    }
}

/// Camera-facing rectangle with the aspect ratio of the dominant-color region.
#[derive(Debug, Default, Clone, Copy)]
pub struct Billboard;

impl ReconstructorClient for Billboard {
    fn reconstruct(&self, image: &RgbImage) -> std::result::Result<TriangleMesh<f64>, BackendError> {
        let (color, b) = dominant_color(image).ok_or_else(|| BackendError::new("empty image"))?;
        Ok(rectangle(b.width() as f64, b.height() as f64, unit_color(color)))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Sphere(pub u32);

impl ReconstructorClient for Sphere {
    fn reconstruct(&self, _image: &RgbImage) -> std::result::Result<TriangleMesh<f64>, BackendError> {
        Ok(TriangleMesh::icosphere(self.0, [0.7, 0.7, 0.7]))
    }
}

fn segmenter_mock(m: &SegmenterMock) -> Box<dyn SegmenterClient> {
    match m {
        SegmenterMock::Box => Box::new(BoxSegmenter),
        SegmenterMock::Key => Box::new(KeySegmenter::default()),
    }
}

fn inpainter_mock(m: &InpainterMock) -> Box<dyn InpainterClient> {
    match m {
        InpainterMock::Identity => Box::new(IdentityInpainter::default()),
        InpainterMock::Fill { color } => Box::new(FillInpainter::new(*color)),
    }
}

fn reconstructor_mock(m: &ReconstructorMock) -> Box<dyn ReconstructorClient> {
    match m {
        ReconstructorMock::Cube => Box::new(DominantCube),
        ReconstructorMock::Billboard => Box::new(Billboard),
        ReconstructorMock::Icosphere { subdivisions } => Box::new(Sphere(*subdivisions)),
    }
}

fn depth_mock(m: &DepthMock) -> Box<dyn DepthClient> {
    match m {
        DepthMock::Ramp { top, bottom } => Box::new(RampDepth {
            top: *top,
            bottom: *bottom,
        }),
        DepthMock::Constant { value } => Box::new(ConstantDepth(*value)),
    }
}

pub fn segmenter(b: &Backend<SegmenterMock>) -> Box<dyn SegmenterClient> {
    match b {
        Backend::Mock(m) => segmenter_mock(m),
        Backend::External(e) => Box::new(Process::new(&e.command)),
    }
}

pub fn inpainter(b: &Backend<InpainterMock>) -> Box<dyn InpainterClient> {
    match b {
        Backend::Mock(m) => inpainter_mock(m),
        Backend::External(e) => Box::new(Process::new(&e.command)),
    }
}

pub fn reconstructor(b: &Backend<ReconstructorMock>) -> Box<dyn ReconstructorClient> {
    match b {
        Backend::Mock(m) => reconstructor_mock(m),
        Backend::External(e) => Box::new(Process::new(&e.command)),
    }
}

pub fn depth(b: &Backend<DepthMock>) -> Box<dyn DepthClient> {
    match b {
        Backend::Mock(m) => depth_mock(m),
        Backend::External(e) => Box::new(Process::new(&e.command)),
    }
}

/// Score provider for `prompt`. The mock's anchor terms target `anchor`.
pub fn score_provider(
    b: &ScoreBackend,
    prompt: &str,
    anchor: &Raster<f64>,
    seed: u64,
) -> Result<Option<Box<dyn ScoreProvider<f64>>>> {
    Ok(match b {
        ScoreBackend::None => None,
        ScoreBackend::Mock { potential } => Some(Box::new(SyntheticProvider::new(
            prompt,
            potential.resolve(Some(anchor))?,
            seed,
        )?)),
        ScoreBackend::External { command, schedule } => Some(Box::new(ExternalScore {
            process: Process::new(command),
            schedule: match schedule {
                ScheduleKind::Unit => NoiseSchedule::unit(TOTAL_STEPS),
                ScheduleKind::LinearVp => NoiseSchedule::linear_vp(TOTAL_STEPS),
            },
        })),
    })
}

fn be(e: impl std::fmt::Display) -> BackendError {
    BackendError::new(e.to_string())
}

/// An external program speaking the exchange-directory protocol.
#[derive(Debug, Clone)]
pub struct Process {
    command: Vec<String>,
}

impl Process {
    pub fn new(command: &[String]) -> Self {
        Self {
            command: command.to_vec(),
        }
    }

    /// Runs `operation` in a fresh exchange directory prepared by `write`
    /// and hands the directory to `read`.
    fn call<R>(
        &self,
        operation: &str,
        write: impl FnOnce(&Path) -> Result<()>,
        read: impl FnOnce(&Path) -> Result<R>,
    ) -> std::result::Result<R, BackendError> {
        let dir = tempfile::tempdir().map_err(be)?;
        write(dir.path()).map_err(be)?;
        let (program, args) = self
            .command
            .split_first()
            .ok_or_else(|| BackendError::new("empty command"))?;
        let out = Command::new(program)
            .args(args)
            .arg(operation)
            .arg(dir.path())
            .stdin(Stdio::null())
            .output()
            .map_err(|e| BackendError::new(format!("cannot run `{program}`: {e}")))?;
        if !out.status.success() {
            let stderr = String::from_utf8_lossy(&out.stderr);
            let tail: String = stderr
                .lines()
                .rev()
                .take(5)
                .collect::<Vec<_>>()
                .into_iter()
                .rev()
                .collect::<Vec<_>>()
                .join("\n");
            return Err(BackendError::new(format!(
                "`{program} {operation}` exited with {}: {tail}",
                out.status
            )));
        }
        read(dir.path()).map_err(be)
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("request serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}

pub(crate) fn load_rgb(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8())
}

fn read_array2(path: &Path) -> Result<Array2<f64>> {
    tensor_io::read::<f64>(path)?
        .into_dimensionality()
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

fn read_array3(path: &Path) -> Result<Array3<f64>> {
    tensor_io::read::<f64>(path)?
        .into_dimensionality()
        .map_err(|e| Error::validation(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
struct SegmentRequest {
    bbox: [u32; 4],
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRequest {
    timestep: u32,
    prompt: String,
    scaling: Option<TokenScaling<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SiteFile {
    name: String,
    file: String,
}

impl SegmenterClient for Process {
    fn segment(&self, image: &RgbaImage, bbox: &ObjectSpec) -> std::result::Result<Mask, BackendError> {
        self.call(
            "segment",
            |d| {
                save_image(image, &d.join("image.png"))?;
                write_json(
                    &d.join("request.json"),
                    &SegmentRequest {
                        bbox: [bbox.x_min, bbox.y_min, bbox.x_max, bbox.y_max],
                    },
                )
            },
            |d| Mask::load_png(&d.join("mask.png")),
        )
    }
}

impl InpainterClient for Process {
    fn inpaint(
        &self,
        image: &RgbImage,
        mask: &Mask,
        request: &InpaintRequest,
    ) -> std::result::Result<RgbImage, BackendError> {
        self.call(
            "inpaint",
            |d| {
                save_image(image, &d.join("image.png"))?;
                mask.save_png(&d.join("mask.png"))?;
                write_json(&d.join("request.json"), request)
            },
            |d| load_rgb(&d.join("output.png")),
        )
    }
}

impl ReconstructorClient for Process {
    fn reconstruct(&self, image: &RgbImage) -> std::result::Result<TriangleMesh<f64>, BackendError> {
        self.call(
            "reconstruct",
            |d| save_image(image, &d.join("image.png")),
            |d| read_obj(&d.join("mesh.obj")),
        )
    }
}

impl DepthClient for Process {
    fn predict(&self, image: &RgbaImage) -> std::result::Result<Array2<f64>, BackendError> {
        self.call(
            "depth",
            |d| save_image(image, &d.join("image.png")),
            |d| read_array2(&d.join("depth.bin")),
        )
    }
}

/// Score provider behind an external program.
pub struct ExternalScore {
    process: Process,
    schedule: NoiseSchedule<f64>,
}

fn write_query(d: &Path, q: &NoiseQuery<'_, f64>) -> Result<()> {
    tensor_io::write(&d.join("noisy.bin"), &q.noisy.clone().into_dyn(), DType::F64)?;
    tensor_io::write(&d.join("noise.bin"), &q.noise.clone().into_dyn(), DType::F64)?;
    write_json(
        &d.join("request.json"),
        &ScoreRequest {
            timestep: q.timestep,
            prompt: q.prompt.to_string(),
            scaling: q.scaling.cloned(),
        },
    )
}

impl ScoreProvider<f64> for ExternalScore {
    fn schedule(&self) -> &NoiseSchedule<f64> {
        &self.schedule
    }

    fn predict_noise(&self, q: &NoiseQuery<'_, f64>) -> std::result::Result<Raster<f64>, BackendError> {
        self.process.call(
            "predict_noise",
            |d| write_query(d, q),
            |d| read_array3(&d.join("eps.bin")),
        )
    }

    fn introspect_attention(
        &self,
        q: &NoiseQuery<'_, f64>,
    ) -> std::result::Result<Vec<AttentionSite<f64>>, BackendError> {
        self.process.call(
            "attention",
            |d| write_query(d, q),
            |d| {
                let sites: Vec<SiteFile> = read_json(&d.join("attention.json"))?;
                sites
                    .into_iter()
                    .map(|s| {
                        Ok(AttentionSite {
                            maps: read_array2(&d.join(&s.file))?,
                            name: s.name,
                        })
                    })
                    .collect()
            },
        )
    }
}

/// Serves an in-process mock over the exchange protocol, so pipelines can
/// exercise the external path without real models. `role` is one of
/// `segmenter`, `inpainter`, `reconstructor`, `depth` or `score`.
pub fn serve_mock(role: &str, model: &str, operation: &str, dir: &Path) -> Result<()> {
    let unknown = || Error::validation(format!("no {role} mock named `{model}` handles `{operation}`"));
    let backend = |e: BackendError| Error::Backend {
        stage: "adapter",
        object: None,
        message: e.to_string(),
    };
    match (role, operation) {
        ("segmenter", "segment") => {
            let m = match model {
                "box" => SegmenterMock::Box,
                "key" => SegmenterMock::Key,
                _ => return Err(unknown()),
            };
            let image = load_rgba(&dir.join("image.png"))?;
            let req: SegmentRequest = read_json(&dir.join("request.json"))?;
            let [x0, y0, x1, y1] = req.bbox;
            let bbox = ObjectSpec::new(x0, y0, x1, y1)?;
            segmenter_mock(&m)
                .segment(&image, &bbox)
                .map_err(backend)?
                .save_png(&dir.join("mask.png"))
        }
        ("inpainter", "inpaint") => {
            let m = match model {
                "identity" => InpainterMock::Identity,
                "fill" => InpainterMock::Fill { color: [128, 128, 128] },
                _ => return Err(unknown()),
            };
            let image = load_rgb(&dir.join("image.png"))?;
            let mask = Mask::load_png(&dir.join("mask.png"))?;
            let req: InpaintRequest = read_json(&dir.join("request.json"))?;
            let out = inpainter_mock(&m).inpaint(&image, &mask, &req).map_err(backend)?;
            save_image(&out, &dir.join("output.png"))
        }
        ("reconstructor", "reconstruct") => {
            let m = match model {
                "cube" => ReconstructorMock::Cube,
                "billboard" => ReconstructorMock::Billboard,
                _ => return Err(unknown()),
            };
            let image = load_rgb(&dir.join("image.png"))?;
            let mesh = reconstructor_mock(&m).reconstruct(&image).map_err(backend)?;
            write_obj(&dir.join("mesh.obj"), &[("mesh", &mesh)])
        }
        ("depth", "depth") => {
            let m = match model {
                "ramp" => DepthMock::default(),
                _ => return Err(unknown()),
            };
            let image = load_rgba(&dir.join("image.png"))?;
            let d = depth_mock(&m).predict(&image).map_err(backend)?;
            tensor_io::write(&dir.join("depth.bin"), &d.into_dyn(), DType::F64)
        }
        ("score", "predict_noise" | "attention") if model == "null" => {
            let req: ScoreRequest = read_json(&dir.join("request.json"))?;
            let noisy = read_array3(&dir.join("noisy.bin"))?;
            let noise = read_array3(&dir.join("noise.bin"))?;
            let provider = SyntheticProvider::<f64>::new(&req.prompt, Vec::new(), 0)?;
            let q = NoiseQuery {
                noisy: &noisy,
                noise: &noise,
                timestep: req.timestep,
                prompt: &req.prompt,
                scaling: req.scaling.as_ref(),
            };
            if operation == "predict_noise" {
                let eps = provider.predict_noise(&q).map_err(backend)?;
                tensor_io::write(&dir.join("eps.bin"), &eps.into_dyn(), DType::F64)
            } else {
                let sites = provider.introspect_attention(&q).map_err(backend)?;
                let mut index = Vec::new();
                for (i, s) in sites.into_iter().enumerate() {
                    let file = format!("site_{i}.bin");
                    tensor_io::write(&dir.join(&file), &s.maps.into_dyn(), DType::F64)?;
                    index.push(SiteFile { name: s.name, file });
                }
                write_json(&dir.join("attention.json"), &index)
            }
        }
        _ => Err(unknown()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dominant_color_and_region() {
        let mut img = RgbImage::from_fn(10, 8, |x, y| image::Rgb([(x * 25) as u8, (y * 30) as u8, 7]));
        for y in 2..5 {
            for x in 1..7 {
                img.put_pixel(x, y, image::Rgb([200, 10, 10]));
            }
        }
        let (c, b) = dominant_color(&img).unwrap();
        assert_eq!(c, [200, 10, 10]);
        assert_eq!((b.x_min, b.y_min, b.x_max, b.y_max), (1, 2, 7, 5));
        let m = Billboard.reconstruct(&img).unwrap();
        let e = m.extent();
        assert!((e[0] - 1.0).abs() < 1e-12 && (e[1] - 0.5).abs() < 1e-12);
    }
}
