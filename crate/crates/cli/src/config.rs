//! Run configuration: one JSON file drives every subcommand. Missing
//! sections fall back to per-dimension defaults; unknown keys are rejected;
//! every run writes back the fully-resolved config it actually used, and
//! resolving a resolved config is a no-op.

use std::path::{Path, PathBuf};

use dirsurf_core::dirparam::{DirMode, FusionPoint};
use dirsurf_core::nets::FieldConfig;
use dirsurf_core::scenes;
use dirsurf_core::train::TrainConfig;
use dirsurf_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;
pub const RESOLVED_CONFIG_NAME: &str = "config.resolved.json";
/// Default root for run output directories when a config names none.
pub const OUT_ROOT_ENV: &str = "DIRSURF_OUT_ROOT";

pub fn default_out_root() -> PathBuf {
    PathBuf::from(std::env::var(OUT_ROOT_ENV).unwrap_or_else(|_| "runs".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Built-in scene id; needed by generate/diagnose and for ground-truth
    /// metrics. Defaults to the dataset's recorded scene name.
    #[serde(default)]
    pub scene: Option<String>,
    /// Dataset directory: written by generate, read by everything else.
    #[serde(default)]
    pub dataset: Option<PathBuf>,
    /// Run output directory.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Master seed; all named random streams derive from it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub field: Option<FieldConfig>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub eval: Option<EvalConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Extraction grid cells per axis.
    pub grid_resolution: usize,
    /// Ground-truth surface points sampled from the analytic scene.
    pub gt_samples: usize,
    /// Points sampled from the extracted surface.
    pub surface_samples: usize,
    /// Held-out views rendered for image metrics.
    pub heldout_views: usize,
}

impl EvalConfig {
    pub fn desk_default(dim: usize) -> Self {
        if dim == 2 {
            EvalConfig {
                grid_resolution: 256,
                gt_samples: 4096,
                surface_samples: 4096,
                heldout_views: 2,
            }
        } else {
            EvalConfig {
                grid_resolution: 128,
                gt_samples: 4096,
                surface_samples: 4096,
                heldout_views: 2,
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_resolution < 2 {
            return Err(Error::Config("eval.grid_resolution must be >= 2".into()));
        }
        if self.gt_samples == 0 || self.surface_samples == 0 {
            return Err(Error::Config("eval sample counts must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            scene: None,
            dataset: None,
            out_dir: None,
            seed: 0,
            field: None,
            train: None,
            eval: None,
        }
    }
}

/// Command-line overrides applied on top of the config file. Only the
/// directional overrides touch the field config, and they touch nothing
/// else: switching `--mode` swaps the directional input and leaves every
/// other knob identical.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub scene: Option<String>,
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub mode: Option<DirMode>,
    pub gamma_b_init: Option<f64>,
    pub detach_blend: Option<bool>,
    pub fusion: Option<FusionPoint>,
    pub iterations: Option<usize>,
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let raw = std::fs::read(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_slice(&raw)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if cfg.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "{}: unsupported schema_version {} (expected {CONFIG_SCHEMA_VERSION})",
                path.display(),
                cfg.schema_version
            )));
        }
        Ok(cfg)
    }

    pub fn apply(&mut self, ov: &Overrides) {
        if let Some(s) = &ov.scene {
            self.scene = Some(s.clone());
        }
        if let Some(d) = &ov.dataset {
            self.dataset = Some(d.clone());
        }
        if let Some(o) = &ov.out_dir {
            self.out_dir = Some(o.clone());
        }
        if let Some(s) = ov.seed {
            self.seed = s;
        }
    }

    /// Directional and training overrides need the sections materialized, so
    /// they run inside `resolve` once the dimension is known.
    fn apply_late(&mut self, ov: &Overrides) {
        let field = self.field.as_mut().expect("resolve fills field");
        if let Some(m) = ov.mode {
            field.directional.mode = m;
        }
        if let Some(g) = ov.gamma_b_init {
            field.directional.gamma_b_init = g;
        }
        if let Some(d) = ov.detach_blend {
            field.directional.detach_blend = d;
        }
        if let Some(f) = ov.fusion {
            field.directional.fusion = f;
        }
        let train = self.train.as_mut().expect("resolve fills train");
        if let Some(i) = ov.iterations {
            train.iterations = i;
        }
        if let Some(w) = ov.workers {
            train.workers = w;
        }
    }

    /// The scene id to evaluate against: explicit `scene` or the dataset's
    /// recorded name.
    pub fn scene_id<'a>(&'a self, meta: Option<&'a scenes::SceneMeta>) -> Option<&'a str> {
        self.scene.as_deref().or(meta.map(|m| m.name.as_str()))
    }

    /// Fill defaults for dimension `dim`, apply the remaining overrides, and
    /// validate. Idempotent on its own output.
    pub fn resolve(&mut self, dim: usize, ov: &Overrides) -> Result<()> {
        if self.field.is_none() {
            self.field = Some(FieldConfig::desk_default(dim));
        }
        if self.train.is_none() {
            self.train = Some(TrainConfig::desk_default(dim));
        }
        if self.eval.is_none() {
            self.eval = Some(EvalConfig::desk_default(dim));
        }
        self.apply_late(ov);
        let field = self.field.as_mut().unwrap();
        if field.dim != dim {
            return Err(Error::Config(format!(
                "field.dim is {} but the scene/dataset is {dim}-dimensional",
                field.dim
            )));
        }
        // One master seed: the training loop inherits it.
        self.train.as_mut().unwrap().seed = self.seed;
        self.train.as_ref().unwrap().validate()?;
        self.eval.as_ref().unwrap().validate()?;
        if self.out_dir.is_none() {
            let scene = self
                .scene
                .clone()
                .or_else(|| {
                    self.dataset
                        .as_ref()
                        .and_then(|d| d.file_name().map(|s| s.to_string_lossy().into_owned()))
                })
                .unwrap_or_else(|| "run".into());
            let mode = field.directional.mode.name();
            self.out_dir = Some(default_out_root().join(format!("{scene}-{mode}")));
        }
        Ok(())
    }

    pub fn field(&self) -> &FieldConfig {
        self.field.as_ref().expect("config not resolved")
    }

    pub fn train(&self) -> &TrainConfig {
        self.train.as_ref().expect("config not resolved")
    }

    pub fn eval(&self) -> &EvalConfig {
        self.eval.as_ref().expect("config not resolved")
    }

    pub fn out_dir(&self) -> &Path {
        self.out_dir.as_deref().expect("config not resolved")
    }

    pub fn dataset_dir(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset directory configured (--dataset)".into()))
    }

    /// Write the resolved config into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        dirsurf_core::io::atomic_write(&dir.join(RESOLVED_CONFIG_NAME), &bytes)
    }
}
