//! Run configuration: one TOML file per experiment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tdcn_core::data::{CueSchema, Manifest, SynthConfig, MANIFEST_FILE};
use tdcn_core::train::{Strategy, TrainConfig};
use tdcn_core::{Cue, Error, ModelConfig, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory holding `manifest.csv` and one sub-directory per subject.
    pub dataset_dir: PathBuf,
    /// Manifest path; defaults to the one inside `dataset_dir`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    /// Cues fed to the model, one branch each.
    pub cues: Vec<Cue>,
    pub strategy: Strategy,
    /// Column schema; defaults to the bundled one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub schema: Option<PathBuf>,
    /// When set, this fraction of the training subjects (per class) is held
    /// out and used in place of the validation split.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tuning_ratio: Option<f64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset_dir: PathBuf::from("data"),
            manifest: None,
            cues: vec![Cue::Landmarks2d, Cue::Pose],
            strategy: Strategy::HeadFirst,
            schema: None,
            tuning_ratio: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("runs"),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

fn resolve(base: &Path, path: &mut PathBuf) {
    if path.is_relative() {
        *path = base.join(&*path);
    }
}

impl RunConfig {
    /// Parses `path`; relative paths inside are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|source| Error::Toml {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        resolve(base, &mut self.output_dir);
        resolve(base, &mut self.data.dataset_dir);
        for p in [&mut self.data.manifest, &mut self.data.schema]
            .into_iter()
            .flatten()
        {
            resolve(base, p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.cues.is_empty() {
            return Err(Error::Config("cue selection must not be empty".into()));
        }
        self.train.validate()?;
        self.synth.validate()?;
        self.model_for_run()?;
        if let Some(r) = self.data.tuning_ratio {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!(
                    "tuning ratio must lie in [0, 1), got {r}"
                )));
            }
        }
        Ok(())
    }

    /// The model restricted to the selected cues.
    pub fn model_for_run(&self) -> Result<ModelConfig> {
        self.model.with_cues(&self.data.cues)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data
            .manifest
            .clone()
            .unwrap_or_else(|| self.data.dataset_dir.join(MANIFEST_FILE))
    }

    pub fn schema(&self) -> Result<CueSchema> {
        match &self.data.schema {
            Some(p) => CueSchema::from_path(p),
            None => Ok(CueSchema::default()),
        }
    }

    /// Reads the manifest, failing if the dataset is not on disk.
    pub fn manifest(&self) -> Result<Manifest> {
        let dir = &self.data.dataset_dir;
        if !dir.is_dir() {
            return Err(Error::Io {
                path: dir.clone(),
                source: std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "dataset directory not found",
                ),
            });
        }
        Manifest::read(&self.manifest_path())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.output_dir.join("checkpoint.bin")
    }

    pub fn log_path(&self) -> PathBuf {
        self.output_dir.join("training_log.csv")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.output_dir.join("metrics.csv")
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}
