//! Run configuration.

use std::path::{Path, PathBuf};

use combiverse_core::combiner::{AblationMode, CombineConfig};
use combiverse_core::decomposition::DecomposeSettings;
use combiverse_core::guidance::synthetic::PotentialConfig;
use combiverse_core::render::CameraModel;
use combiverse_core::scene::{parse_document, render_document, DocFormat};
use combiverse_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Environment variable consulted when neither the command line nor the
/// config names a run directory.
pub const RUN_DIR_ENV: &str = "COMBIVERSE_RUN_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Scene document, relative to the config file.
    pub scene: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub decompose: DecomposeSettings,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub combine: CombineConfig,
    #[serde(default)]
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: PathBuf::from("scene.json"),
            run_dir: None,
            seed: 0,
            backends: BackendsConfig::default(),
            decompose: DecomposeSettings::default(),
            init: InitConfig::default(),
            combine: CombineConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Placement initialization and the reference camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    /// Longer side of the reference render in pixels.
    pub resolution: usize,
    /// Reference camera distance, also the orbit radius of novel views.
    pub z_ref: f64,
    /// Scene units per image pixel. Defaults to one over the image width.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pixel_to_scene: Option<f64>,
    pub camera: CameraModel,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            z_ref: 2.0,
            pixel_to_scene: None,
            camera: CameraModel::Pinhole,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub modes: Vec<AblationMode>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            modes: AblationMode::ALL.to_vec(),
        }
    }
}

/// A backend served either in-process by a mock or by an external program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend<M> {
    Mock(M),
    External(ExternalCommand),
}

/// Program invoked as `command... <operation> <exchange-dir>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalCommand {
    pub command: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum SegmenterMock {
    /// The whole box.
    Box,
    /// Pixels that differ from the background color.
    #[default]
    Key,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum InpainterMock {
    #[default]
    Identity,
    Fill {
        color: [u8; 3],
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReconstructorMock {
    /// Unit cube in the dominant color of the image.
    #[default]
    Cube,
    /// Flat rectangle fitted to the dominant-color region.
    Billboard,
    /// Fixed sphere, useful for exercising decimation.
    Icosphere { subdivisions: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum DepthMock {
    Ramp { top: f64, bottom: f64 },
    Constant { value: f64 },
}

impl Default for DepthMock {
    fn default() -> Self {
        DepthMock::Ramp { top: 3.0, bottom: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreMock {
    /// Analytic potential of the synthetic provider. Anchor terms use the
    /// reference-view target.
    pub potential: PotentialConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    #[default]
    Unit,
    LinearVp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScoreBackend {
    None,
    Mock {
        #[serde(default)]
        potential: PotentialConfig,
    },
    External {
        command: Vec<String>,
        #[serde(default)]
        schedule: ScheduleKind,
    },
}

impl Default for ScoreBackend {
    fn default() -> Self {
        ScoreBackend::Mock {
            potential: PotentialConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendsConfig {
    pub segmenter: Backend<SegmenterMock>,
    pub inpainter: Backend<InpainterMock>,
    pub reconstructor: Backend<ReconstructorMock>,
    pub depth: Backend<DepthMock>,
    pub score: ScoreBackend,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        Self {
            segmenter: Backend::Mock(SegmenterMock::default()),
            inpainter: Backend::Mock(InpainterMock::default()),
            reconstructor: Backend::Mock(ReconstructorMock::default()),
            depth: Backend::Mock(DepthMock::default()),
            score: ScoreBackend::default(),
        }
    }
}

impl<M> Backend<M> {
    fn validate(&self, field: &str) -> Result<()> {
        match self {
            Backend::External(e) if e.command.is_empty() || e.command[0].trim().is_empty() => {
                Err(Error::config(format!("{field}.command"), "must name a program"))
            }
            _ => Ok(()),
        }
    }
}

impl RunConfig {
    /// Reads a TOML or JSON config and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: RunConfig = parse_document(&text, DocFormat::from_path(path))?;
        let base = path.parent().unwrap_or(Path::new("."));
        config.scene = base.join(&config.scene);
        if let Some(dir) = &config.run_dir {
            config.run_dir = Some(base.join(dir));
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        render_document(self, DocFormat::Toml)
    }

    pub fn validate(&self) -> Result<()> {
        self.decompose.inpaint.validate()?;
        if self.decompose.face_budget < 4 {
            return Err(Error::config("decompose.face_budget", "must be at least 4"));
        }
        self.combine.validate()?;
        if self.init.resolution == 0 {
            return Err(Error::config("init.resolution", "must be positive"));
        }
        if !(self.init.z_ref > 0.0) || !self.init.z_ref.is_finite() {
            return Err(Error::config("init.z_ref", "must be positive"));
        }
        if let Some(p) = self.init.pixel_to_scene {
            if !(p > 0.0) || !p.is_finite() {
                return Err(Error::config("init.pixel_to_scene", "must be positive"));
            }
        }
        let b = &self.backends;
        b.segmenter.validate("backends.segmenter")?;
        b.inpainter.validate("backends.inpainter")?;
        b.reconstructor.validate("backends.reconstructor")?;
        b.depth.validate("backends.depth")?;
        match &b.score {
            ScoreBackend::External { command, .. } if command.is_empty() => {
                return Err(Error::config("backends.score.command", "must name a program"));
            }
            ScoreBackend::None if self.combine.guidance.uses_novel_views() => {
                return Err(Error::config(
                    "backends.score",
                    format!("mode {:?} needs a score provider", self.combine.guidance.mode),
                ));
            }
            _ => {}
        }
        if let Backend::Mock(ReconstructorMock::Icosphere { subdivisions }) = &b.reconstructor {
            if *subdivisions > 7 {
                return Err(Error::config("backends.reconstructor.subdivisions", "at most 7"));
            }
        }
        if self.ablation.modes.is_empty() {
            return Err(Error::config("ablation.modes", "must not be empty"));
        }
        Ok(())
    }

    /// Run directory from, in order, the command line, the config and the environment.
    pub fn resolve_run_dir(&self, cli: Option<&Path>) -> Result<PathBuf> {
        if let Some(p) = cli {
            return Ok(p.to_path_buf());
        }
        if let Some(p) = &self.run_dir {
            return Ok(p.clone());
        }
        match std::env::var_os(RUN_DIR_ENV) {
            Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
            _ => Err(Error::config(
                "run_dir",
                format!("not set; pass --run-dir, set it in the config or export {RUN_DIR_ENV}"),
            )),
        }
    }
}
