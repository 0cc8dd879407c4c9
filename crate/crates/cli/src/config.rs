//! Run configuration: a TOML file with `[paths]`, `[preprocess]`,
//! `[model]`, `[train]` and `[cv]` sections. Every key has a default and
//! unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use triplex_core::data::Neighborhood;
use triplex_core::encoders::{Activation, EncoderConfig};
use triplex_core::model::ModelConfig;
use triplex_core::train::TrainConfig;

use crate::error::InputError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Spots table (`slide_id,patient_id,spot_id,grid_x,grid_y,pixel_x,pixel_y`).
    pub spots: Option<PathBuf>,
    /// Raw counts table (`spot_id,<gene>...`).
    pub counts: Option<PathBuf>,
    /// Directory of precomputed `<slide>.{target,neighbor,global}.feat` files.
    pub features: Option<PathBuf>,
    /// Directory of `<slide>.ppm` slide images, used when `features` is unset.
    pub images: Option<PathBuf>,
    /// Output directory of every command.
    pub out: PathBuf,
    /// Output of `prepare` and input of the other commands; defaults to
    /// `<out>/prepared`.
    pub prepared: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            spots: None,
            counts: None,
            features: None,
            images: None,
            out: PathBuf::from("out"),
            prepared: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Number of genes kept by `prepare`.
    pub m_keep: usize,
    /// Smooth training labels over grid neighbours.
    pub smooth: bool,
    pub neighborhood: Neighborhood,
    /// Also smooth the ground truth used for evaluation.
    pub smooth_eval_labels: bool,
    /// Feature width of the bundled extractor (image input only).
    pub extractor_dim: usize,
    /// Weight seed of the bundled extractor.
    pub extractor_seed: u64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            m_keep: 250,
            smooth: true,
            neighborhood: Neighborhood::Eight,
            smooth_eval_labels: false,
            extractor_dim: 512,
            extractor_seed: 2021,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub activation: Activation,
    pub encoder: EncoderConfig,
}

/// Cross-validation scheme.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CvMode {
    /// Leave one patient out.
    #[default]
    Lopcv,
    /// `k` folds of whole patients.
    KFold(usize),
}

impl TryFrom<String> for CvMode {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("lopcv") {
            return Ok(Self::Lopcv);
        }
        if let Some(k) = s.strip_prefix("kfold:") {
            return k
                .trim()
                .parse()
                .map(Self::KFold)
                .map_err(|_| format!("bad fold count in {s:?}"));
        }
        Err(format!(
            "cv mode {s:?} is neither \"lopcv\" nor \"kfold:<k>\""
        ))
    }
}

impl From<CvMode> for String {
    fn from(m: CvMode) -> String {
        m.to_string()
    }
}

impl fmt::Display for CvMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Lopcv => write!(f, "lopcv"),
            Self::KFold(k) => write!(f, "kfold:{k}"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub mode: CvMode,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed. When set it overrides `train.seed` and also seeds model
    /// initialisation and fold assignment.
    pub seed: Option<u64>,
    pub paths: PathsConfig,
    pub preprocess: PreprocessConfig,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub cv: CvConfig,
}

impl RunConfig {
    /// Parses a config file. Relative paths are resolved against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self, InputError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InputError(format!("{}: {e}", path.display())))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| InputError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.resolve(base);
        Ok(cfg)
    }

    /// Applies command-line overrides and checks every value.
    pub fn finish(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self, InputError> {
        if seed.is_some() {
            self.seed = seed;
        }
        if let Some(out) = out {
            self.paths.out = out;
        }
        self.train.seed = self.seed();
        self.train
            .validate()
            .map_err(|e| InputError(e.to_string()))?;
        self.model
            .encoder
            .validate()
            .map_err(|e| InputError(e.to_string()))?;
        if self.preprocess.m_keep == 0 {
            return Err(InputError("preprocess.m_keep must be positive".into()));
        }
        if let CvMode::KFold(k) = self.cv.mode {
            if k < 2 {
                return Err(InputError(format!("cv.mode kfold:{k} needs k >= 2")));
            }
        }
        Ok(self)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(self.train.seed)
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.paths
            .prepared
            .clone()
            .unwrap_or_else(|| self.paths.out.join("prepared"))
    }

    pub fn model_config(&self, feature_dim: usize, n_genes: usize) -> ModelConfig {
        ModelConfig {
            encoder: self.model.encoder.clone(),
            feature_dim,
            n_genes,
            activation: self.model.activation,
            seed: self.seed(),
            extractor_seed: self.preprocess.extractor_seed,
            ..ModelConfig::default()
        }
    }
}

impl PathsConfig {
    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.spots,
            &mut self.counts,
            &mut self.features,
            &mut self.images,
            &mut self.prepared,
        ]
        .into_iter()
        .flatten()
        {
            join(p);
        }
        join(&mut self.out);
    }
}
