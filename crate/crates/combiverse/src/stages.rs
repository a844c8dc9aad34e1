//! Pipeline stages over a run directory.
//!
//! Layout:
//!
//! ```text
//! run_dir/
//!   manifest.json
//!   objects/<i>/{mask,cutout,noised,inpaint_mask,completed}.png
//!   objects/<i>/mesh.obj
//!   depth.bin
//!   combine/{metrics.jsonl,placements.json,render.png,composition.gltf,composition.obj}
//!   combine/checkpoints/ckpt_<k>/
//!   ablation/{report.json,<mode>.png,contact_sheet.png}
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use combiverse_core::combiner::{
    ablation_matrix, combine, export_composition, load_checkpoint, render_image, resume, AblationMode, CombineConfig,
    CombineIo, CombineProblem, LossRecord,
};
use combiverse_core::decomposition::{
    build_inpaint_mask, inpaint_object, noise_background, noise_seed, reconstruct_object, segment_object,
};
use combiverse_core::mesh::decimate_mesh;
use combiverse_core::mesh::obj::{read_obj, write_obj};
use combiverse_core::raster::{load_rgba, save_image, Mask, Raster};
use combiverse_core::render::{reference_camera, render, ReferenceFraming, RenderSettings};
use combiverse_core::scene::{load_scene, ObjectRecord, PlacementParams, SceneInput};
use combiverse_core::spatial_init::{default_pixel_to_scene, estimate_depth, initialize_placement, DepthMap};
use combiverse_core::{Camera, Error, Placement, Record, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::backends::{self, load_rgb};
use crate::config::{RunConfig, ScoreBackend};
use crate::manifest::{digest_files, sha256_hex, Freshness, Manifest, RunLock, Stage};

#[derive(Debug, Clone, Default)]
pub struct Options {
    pub force: bool,
    pub seed: Option<u64>,
    pub run_dir: Option<PathBuf>,
}

/// Final placements and summary numbers written by the combine stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementReport {
    pub names: Vec<String>,
    pub initial: Vec<PlacementParams<f64>>,
    #[serde(rename = "final")]
    pub final_params: Vec<PlacementParams<f64>>,
    pub iterations: usize,
    pub final_losses: Option<LossRecord>,
    /// Remaining error of the score potential's relation term, in reference-view pixels.
    pub relation_error_px: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationEntry {
    pub mode: AblationMode,
    pub final_losses: Option<LossRecord>,
    pub params: Vec<PlacementParams<f64>>,
    pub relation_error_px: Option<f64>,
}

pub struct Pipeline {
    config: RunConfig,
    run_dir: PathBuf,
    seed: u64,
    force: bool,
    manifest: Manifest,
    _lock: RunLock,
}

fn fingerprint(value: &serde_json::Value) -> String {
    sha256_hex(&serde_json::to_vec(value).expect("fingerprint input serializes"))
}

fn to_json<S: Serialize>(v: &S) -> serde_json::Value {
    serde_json::to_value(v).expect("config serializes")
}

fn object_dir(run_dir: &Path, i: usize) -> PathBuf {
    run_dir.join("objects").join(i.to_string())
}

fn object_names(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("object_{i}")).collect()
}

fn remove_dir(path: &Path) -> Result<()> {
    if path.exists() {
        std::fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Latest `ckpt_<k>` under `dir`.
fn latest_checkpoint(dir: &Path) -> Option<(usize, PathBuf)> {
    std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().to_string_lossy().into_owned();
            let k = name.strip_prefix("ckpt_")?.parse::<usize>().ok()?;
            Some((k, e.path()))
        })
        .max_by_key(|(k, _)| *k)
}

/// Keeps the first `lines` lines of a metrics log.
fn truncate_lines(path: &Path, lines: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let kept: Vec<String> = BufReader::new(f)
        .lines()
        .take(lines)
        .collect::<std::io::Result<_>>()
        .map_err(|e| Error::io(path, e))?;
    let mut out = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for l in kept {
        writeln!(out, "{l}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

fn relation_error(score: &ScoreBackend, anchor: &Raster<f64>, rgb: &Raster<f64>) -> Result<Option<f64>> {
    let ScoreBackend::Mock { potential } = score else {
        return Ok(None);
    };
    Ok(potential
        .resolve(Some(anchor))?
        .iter()
        .find_map(|t| t.potential.relation_residual(rgb))
        .map(|r| r[0].hypot(r[1])))
}

/// Everything the combine and ablate stages share.
struct Inputs {
    scene: SceneInput,
    records: Vec<Record>,
    depth: DepthMap<f64>,
    camera: Camera,
    init: Vec<Placement>,
}

impl Pipeline {
    /// Resolves the run directory, takes its lock and loads any existing manifest.
    pub fn open(mut config: RunConfig, opts: &Options) -> Result<Self> {
        if let Some(s) = opts.seed {
            config.seed = s;
        }
        config.validate()?;
        let run_dir = config.resolve_run_dir(opts.run_dir.as_deref())?;
        let lock = RunLock::acquire(&run_dir)?;
        let snapshot = to_json(&config);
        let mut manifest = Manifest::load(&run_dir)?.unwrap_or_else(|| Manifest::new(snapshot.clone()));
        manifest.config = snapshot;
        Ok(Self {
            seed: config.seed,
            config,
            run_dir,
            force: opts.force,
            manifest,
            _lock: lock,
        })
    }

    pub fn run_dir(&self) -> &Path {
        &self.run_dir
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    fn combine_config(&self) -> CombineConfig {
        let mut c = self.config.combine.clone();
        c.optimizer.seed = self.seed;
        c
    }

    fn fingerprint(&self, stage: Stage) -> Result<String> {
        let c = &self.config;
        let upstream: BTreeMap<&str, _> = stage
            .upstream()
            .iter()
            .map(|s| {
                (
                    s.name(),
                    self.manifest.stage(*s).map(|r| r.artifacts.clone()).unwrap_or_default(),
                )
            })
            .collect();
        let value = match stage {
            Stage::Decompose => {
                let scene = load_scene(&c.scene)?;
                json!({
                    "scene": to_json(&scene.document()),
                    "image": sha256_hex(scene.image.as_raw()),
                    "size": [scene.width(), scene.height()],
                    "segmenter": to_json(&c.backends.segmenter),
                    "inpainter": to_json(&c.backends.inpainter),
                    "inpaint": to_json(&c.decompose.inpaint),
                    "seed": self.seed,
                })
            }
            Stage::Reconstruct => json!({
                "reconstructor": to_json(&c.backends.reconstructor),
                "depth": to_json(&c.backends.depth),
                "face_budget": c.decompose.face_budget,
                "upstream": upstream,
            }),
            Stage::Combine | Stage::Ablate => json!({
                "combine": to_json(&self.combine_config()),
                "init": to_json(&c.init),
                "score": to_json(&c.backends.score),
                "modes": if stage == Stage::Ablate { to_json(&c.ablation.modes) } else { serde_json::Value::Null },
                "upstream": upstream,
            }),
        };
        Ok(fingerprint(&value))
    }

    /// Runs `stage` unless its recorded outputs are current. Returns whether it ran.
    pub fn run(&mut self, stage: Stage) -> Result<bool> {
        for &up in stage.upstream() {
            let fp = self.fingerprint(up)?;
            if self.manifest.freshness(up, &fp, &self.run_dir)? != Freshness::Current {
                return Err(Error::validation(format!(
                    "stage `{stage}` needs `{up}`, which is missing or out of date; run `{up}` or `run-all` first"
                )));
            }
        }
        let fp = self.fingerprint(stage)?;
        let same_inputs = self.manifest.stage(stage).is_some_and(|r| r.fingerprint == fp);
        if !self.force {
            match self.manifest.freshness(stage, &fp, &self.run_dir)? {
                Freshness::Current => {
                    log::info!("{stage}: up to date, skipping");
                    return Ok(false);
                }
                Freshness::Corrupt(path) => {
                    log::warn!("{stage}: {path} does not match its recorded digest; re-running the stage");
                }
                Freshness::Changed => log::info!("{stage}: inputs changed, re-running"),
                Freshness::Missing => log::info!("{stage}: running"),
            }
        }
        self.manifest.begin(stage, fp);
        self.manifest.save(&self.run_dir)?;
        let result = match stage {
            Stage::Decompose => self.decompose(),
            Stage::Reconstruct => self.reconstruct(),
            Stage::Combine => self.combine(same_inputs && !self.force),
            Stage::Ablate => self.ablate(),
        };
        match result {
            Ok(paths) => {
                let digests = digest_files(&self.run_dir, &paths)?;
                self.manifest.finish(stage, digests);
                self.manifest.save(&self.run_dir)?;
                Ok(true)
            }
            Err(e) => {
                self.manifest.fail(stage, &e);
                self.manifest.save(&self.run_dir)?;
                Err(e)
            }
        }
    }

    /// Decompose, reconstruct and combine, skipping stages that are current.
    pub fn run_all(&mut self) -> Result<()> {
        for s in Stage::PIPELINE {
            self.run(s)?;
        }
        Ok(())
    }

    fn decompose(&self) -> Result<Vec<PathBuf>> {
        let scene = load_scene(&self.config.scene)?;
        let seg = backends::segmenter(&self.config.backends.segmenter);
        let inp = backends::inpainter(&self.config.backends.inpainter);
        let settings = &self.config.decompose;
        remove_dir(&self.run_dir.join("objects"))?;
        let results: Vec<Result<Vec<PathBuf>>> = scene
            .objects
            .par_iter()
            .enumerate()
            .map(|(i, bbox)| {
                let run = || -> Result<Vec<PathBuf>> {
                    let (cutout, mask) = segment_object(&scene.image, bbox, seg.as_ref(), &settings.retry)?;
                    let noised = noise_background(&cutout, &mask, noise_seed(self.seed, i))?;
                    let inpaint_mask = build_inpaint_mask(&mask, bbox)?;
                    let completed =
                        inpaint_object(&noised, &inpaint_mask, inp.as_ref(), &settings.inpaint, &settings.retry)?;
                    let dir = object_dir(&self.run_dir, i);
                    create_dir(&dir)?;
                    let p = |n: &str| dir.join(n);
                    mask.save_png(&p("mask.png"))?;
                    save_image(&cutout, &p("cutout.png"))?;
                    save_image(&noised, &p("noised.png"))?;
                    inpaint_mask.save_png(&p("inpaint_mask.png"))?;
                    save_image(&completed, &p("completed.png"))?;
                    Ok(["mask", "cutout", "noised", "inpaint_mask", "completed"]
                        .iter()
                        .map(|n| p(&format!("{n}.png")))
                        .collect())
                };
                run().map_err(|e| e.for_object(i))
            })
            .collect();
        let mut paths = Vec::new();
        for r in results {
            paths.extend(r?);
        }
        Ok(paths)
    }

    fn reconstruct(&self) -> Result<Vec<PathBuf>> {
        let scene = load_scene(&self.config.scene)?;
        let rec = backends::reconstructor(&self.config.backends.reconstructor);
        let settings = &self.config.decompose;
        let results: Vec<Result<PathBuf>> = (0..scene.objects.len())
            .into_par_iter()
            .map(|i| {
                let run = || -> Result<PathBuf> {
                    let dir = object_dir(&self.run_dir, i);
                    let completed = load_rgb(&dir.join("completed.png"))?;
                    let mesh = reconstruct_object(&completed, rec.as_ref(), &settings.retry)?;
                    let mesh = decimate_mesh(&mesh, settings.face_budget)?;
                    let path = dir.join("mesh.obj");
                    write_obj(&path, &[(&format!("object_{i}"), &mesh)])?;
                    Ok(path)
                };
                run().map_err(|e| e.for_object(i))
            })
            .collect();
        let mut paths = results.into_iter().collect::<Result<Vec<_>>>()?;
        let depth_client = backends::depth(&self.config.backends.depth);
        let depth = estimate_depth::<f64>(depth_client.as_ref(), &scene.image, &settings.retry)?;
        let path = self.run_dir.join("depth.bin");
        depth.save(&path)?;
        paths.push(path);
        Ok(paths)
    }

    fn inputs(&self) -> Result<Inputs> {
        let scene = load_scene(&self.config.scene)?;
        let dims = (scene.width(), scene.height());
        let records = scene
            .objects
            .iter()
            .enumerate()
            .map(|(i, bbox)| {
                let dir = object_dir(&self.run_dir, i);
                let mut r = ObjectRecord::new(
                    dims,
                    bbox,
                    Mask::load_png(&dir.join("mask.png"))?,
                    load_rgba(&dir.join("cutout.png"))?,
                    load_rgb(&dir.join("noised.png"))?,
                    Mask::load_png(&dir.join("inpaint_mask.png"))?,
                    load_rgb(&dir.join("completed.png"))?,
                )?;
                r.mesh = Some(read_obj(&dir.join("mesh.obj"))?);
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()?;
        let depth = DepthMap::load(&self.run_dir.join("depth.bin"))?;
        let init_cfg = &self.config.init;
        let p2s = init_cfg
            .pixel_to_scene
            .unwrap_or_else(|| default_pixel_to_scene(dims.0));
        let camera = reference_camera(&ReferenceFraming {
            image_width: dims.0,
            image_height: dims.1,
            pixel_to_scene: p2s,
            z_ref: init_cfg.z_ref,
            resolution: init_cfg.resolution,
            model: init_cfg.camera,
        })?;
        let init = scene
            .objects
            .iter()
            .zip(&records)
            .enumerate()
            .map(|(i, (b, r))| initialize_placement(b, dims, &depth, &r.mask, p2s).map_err(|e| e.for_object(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Inputs {
            scene,
            records,
            depth,
            camera,
            init,
        })
    }

    fn prompt(&self, scene: &SceneInput) -> String {
        self.config
            .combine
            .guidance
            .prompt
            .clone()
            .unwrap_or_else(|| scene.caption.clone())
    }

    fn combine(&self, may_resume: bool) -> Result<Vec<PathBuf>> {
        let inputs = self.inputs()?;
        let mut problem = CombineProblem::from_scene(
            &inputs.scene,
            &inputs.records,
            inputs.camera,
            self.config.init.z_ref,
            Some(&inputs.depth),
            None,
        )?;
        let provider = backends::score_provider(
            &self.config.backends.score,
            &self.prompt(&inputs.scene),
            &problem.target_rgb,
            self.seed,
        )?;
        problem.provider = provider.as_deref();
        let config = self.combine_config();

        let dir = self.run_dir.join("combine");
        let io = CombineIo {
            metrics: Some(dir.join("metrics.jsonl")),
            checkpoints: Some(dir.join("checkpoints")),
        };
        let checkpoint = if may_resume {
            latest_checkpoint(&dir.join("checkpoints"))
        } else {
            None
        };
        let outcome = match checkpoint {
            Some((k, path)) => match load_checkpoint::<f64>(&path) {
                Ok((state, seed)) if seed == self.seed && k <= config.optimizer.iterations => {
                    log::info!("combine: resuming from {}", path.display());
                    truncate_lines(io.metrics.as_ref().expect("metrics path"), k)?;
                    resume(&problem, state, &config, &io)?
                }
                _ => {
                    remove_dir(&dir)?;
                    combine(&problem, &inputs.init, &config, &io)?
                }
            },
            None => {
                remove_dir(&dir)?;
                combine(&problem, &inputs.init, &config, &io)?
            }
        };

        let names = object_names(problem.meshes.len());
        let gltf = dir.join("composition.gltf");
        let obj = dir.join("composition.obj");
        export_composition(&names, &problem.meshes, &outcome.params, &gltf, &obj)?;
        let settings = RenderSettings {
            sigma: config.render.sigma,
            tile_size: config.render.tile_size,
        };
        let out = render(&problem.scene(&outcome.params)?, &problem.reference, &settings)?;
        let render_path = dir.join("render.png");
        save_image(&render_image(&out), &render_path)?;
        let report = PlacementReport {
            names,
            initial: inputs.init.clone(),
            final_params: outcome.params.clone(),
            iterations: config.optimizer.iterations,
            final_losses: outcome.run.losses.last().cloned(),
            relation_error_px: relation_error(&self.config.backends.score, &problem.target_rgb, &out.rgb)?,
        };
        let report_path = dir.join("placements.json");
        std::fs::write(
            &report_path,
            serde_json::to_string_pretty(&report).expect("report serializes"),
        )
        .map_err(|e| Error::io(&report_path, e))?;
        Ok(vec![
            io.metrics.expect("metrics path"),
            report_path,
            render_path,
            gltf,
            obj,
        ])
    }

    fn ablate(&self) -> Result<Vec<PathBuf>> {
        let inputs = self.inputs()?;
        let mut problem = CombineProblem::from_scene(
            &inputs.scene,
            &inputs.records,
            inputs.camera,
            self.config.init.z_ref,
            Some(&inputs.depth),
            None,
        )?;
        let provider = backends::score_provider(
            &self.config.backends.score,
            &self.prompt(&inputs.scene),
            &problem.target_rgb,
            self.seed,
        )?;
        problem.provider = provider.as_deref();
        let rows = ablation_matrix(
            &problem,
            &inputs.init,
            &self.combine_config(),
            &self.config.ablation.modes,
        )?;
        let dir = self.run_dir.join("ablation");
        remove_dir(&dir)?;
        create_dir(&dir)?;
        let mut paths = Vec::new();
        let mut images = Vec::new();
        let mut entries = Vec::new();
        for row in &rows {
            let img = render_image(&row.render);
            let p = dir.join(format!("{}.png", row.mode.name()));
            save_image(&img, &p)?;
            paths.push(p);
            images.push(img);
            entries.push(AblationEntry {
                mode: row.mode,
                final_losses: row.final_losses().cloned(),
                params: row.outcome.params.clone(),
                relation_error_px: relation_error(&self.config.backends.score, &problem.target_rgb, &row.render.rgb)?,
            });
        }
        let sheet = dir.join("contact_sheet.png");
        save_image(&combiverse_core::combiner::contact_sheet(&images), &sheet)?;
        paths.push(sheet);
        let report = dir.join("report.json");
        std::fs::write(
            &report,
            serde_json::to_string_pretty(&entries).expect("report serializes"),
        )
        .map_err(|e| Error::io(&report, e))?;
        paths.push(report);
        Ok(paths)
    }

    /// Overrides the configured ablation modes.
    pub fn set_ablation_modes(&mut self, modes: Vec<AblationMode>) -> Result<()> {
        if modes.is_empty() {
            return Err(Error::config("--modes", "must not be empty"));
        }
        self.config.ablation.modes = modes;
        self.manifest.config = to_json(&self.config);
        Ok(())
    }
}

pub fn read_ablation_report(run_dir: &Path) -> Result<Vec<AblationEntry>> {
    let path = run_dir.join("ablation").join("report.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}

pub fn read_placements(run_dir: &Path) -> Result<PlacementReport> {
    let path = run_dir.join("combine").join("placements.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}
