//! The JSON run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::error::Category;

use crate::error::{Error, Result};
use crate::patchmodes::PatchGrid;
use crate::synthdata::{SceneConfig, MAX_SCENES};
use crate::trainer::TrainConfig;

/// Dataset sizes for `gen-data` and `bench`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_source: usize,
    pub n_target: usize,
    pub n_target_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n_source: 200, n_target: 200, n_target_test: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub patch_h: usize,
    pub patch_w: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self { patch_h: 8, patch_w: 8 }
    }
}

/// Patch-mode discovery: histogram sampling and k-means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModesConfig {
    #[serde(alias = "K")]
    pub k: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ModesConfig {
    fn default() -> Self {
        Self { k: 50, n_samples: 10_000, seed: 0, max_iter: 300, tol: 1e-6 }
    }
}

/// Optional default locations; command-line flags take precedence.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub modes: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub data: DataConfig,
    pub patch: PatchConfig,
    pub modes: ModesConfig,
    pub train: TrainConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        for (key, n) in [
            ("data.n_source", self.data.n_source),
            ("data.n_target", self.data.n_target),
            ("data.n_target_test", self.data.n_target_test),
        ] {
            if n == 0 || n > MAX_SCENES {
                return Err(Error::config(key, format!("must be in [1, {MAX_SCENES}]")));
            }
        }
        let p = &self.patch;
        if p.patch_h < 2 || p.patch_w < 2 {
            return Err(Error::config("patch.patch_h", "patches must be at least 2x2"));
        }
        if !self.scene.height.is_multiple_of(p.patch_h) {
            return Err(Error::config("patch.patch_h", "must divide scene.height"));
        }
        if !self.scene.width.is_multiple_of(p.patch_w) {
            return Err(Error::config("patch.patch_w", "must divide scene.width"));
        }
        let m = &self.modes;
        if m.k < 2 {
            return Err(Error::config("modes.k", "must be at least 2"));
        }
        if m.n_samples < m.k {
            return Err(Error::config("modes.n_samples", "must be at least modes.k"));
        }
        if m.max_iter == 0 {
            return Err(Error::config("modes.max_iter", "must be positive"));
        }
        if !(m.tol >= 0.0 && m.tol.is_finite()) {
            return Err(Error::config("modes.tol", "must be finite and >= 0"));
        }
        self.train.validate()?;
        if self.train.k != m.k {
            return Err(Error::config("train.k", format!("must equal modes.k ({})", m.k)));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<PatchGrid> {
        PatchGrid::new(self.scene.height, self.scene.width, self.patch.patch_h, self.patch.patch_w)
    }

    /// Parse and validate a JSON document; `origin` names the source in errors.
    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let key = e.path().to_string();
            let inner = e.into_inner();
            match inner.classify() {
                Category::Data => {
                    let msg = inner.to_string();
                    match msg.strip_prefix("unknown field `").and_then(|m| m.split('`').next()) {
                        Some(field) => {
                            let parent = key.rsplit_once('.').map_or("", |(p, _)| p);
                            let full = if parent.is_empty() { field.to_string() } else { format!("{parent}.{field}") };
                            Error::config(full, "unknown key")
                        }
                        None => Error::config(key, msg),
                    }
                }
                _ => Error::parse(origin, format!("malformed JSON: {inner}")),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Echo the resolved config to `dir/resolved_config.json`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("resolved_config.json");
        fs::write(&path, self.to_json()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    RunConfig::from_json(&text, path)
}
