//! Experiment configuration: a flat-sectioned TOML file with every field defaulted.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use phirec_core::acquisition::{DatasetConfig, MaskPattern, PhantomConfig, SplitSpec};
use phirec_core::baselines::UNetConfig;
use phirec_core::evaluation::EvalOptions;
use phirec_core::train::TrainConfig;
use phirec_core::{BaselineConfig, BaselineKind, ModelConfig, SegmenterConfig};

use crate::error::{LabError, Result};

/// Environment variable naming the default output root.
pub const HOME_ENV: &str = "PHIREC_LAB_HOME";

/// Phantom seeds of consecutive data seeds never collide.
const DATA_SEED_STRIDE: u64 = 10_000_000;

fn hash_json<S: Serialize>(value: &S) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Train, validate and test on every listed acceleration.
    Id,
    /// Train and validate on the lowest acceleration only.
    Ood,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Phirec,
    McDropout,
    Heteroscedastic,
    McDropoutHetero,
    Ensemble,
    ProbUnet,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Phirec => "phirec",
            ModelKind::McDropout => "mc_dropout",
            ModelKind::Heteroscedastic => "heteroscedastic",
            ModelKind::McDropoutHetero => "mc_dropout_hetero",
            ModelKind::Ensemble => "ensemble",
            ModelKind::ProbUnet => "prob_unet",
        }
    }

    pub fn baseline(self) -> Option<BaselineKind> {
        match self {
            ModelKind::Phirec => None,
            ModelKind::McDropout => Some(BaselineKind::McDropout),
            ModelKind::Heteroscedastic => Some(BaselineKind::Heteroscedastic),
            ModelKind::McDropoutHetero => Some(BaselineKind::McDropoutHetero),
            ModelKind::Ensemble => Some(BaselineKind::Ensemble),
            ModelKind::ProbUnet => Some(BaselineKind::ProbUnet),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// Run directory name under the output root.
    pub name: String,
    pub setting: Setting,
    pub accelerations: Vec<f64>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            name: "desk".into(),
            setting: Setting::Id,
            accelerations: vec![4.0, 8.0, 16.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub image_size: usize,
    pub n_classes: usize,
    pub pattern: MaskPattern,
    pub calib_fraction: f64,
    pub noise_sigma: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            n_train: 200,
            n_val: 20,
            n_test: 20,
            image_size: 64,
            n_classes: 5,
            pattern: MaskPattern::PoissonDisc,
            calib_fraction: 0.08,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub levels: usize,
    pub base_channels: usize,
    pub latent_channels: usize,
    pub likelihood_sigma: f64,
    pub sigma_floor: f64,
    pub alpha_reversed: bool,
    pub decoder_features: bool,
    pub unet_depth: usize,
    pub dropout_rate: f64,
    pub ensemble_size: usize,
    pub latent_dim: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        let b = BaselineConfig::default();
        ModelSection {
            kind: ModelKind::Phirec,
            levels: 3,
            base_channels: 16,
            latent_channels: m.latent_channels,
            likelihood_sigma: m.likelihood_sigma,
            sigma_floor: m.sigma_floor,
            alpha_reversed: m.alpha_reversed,
            decoder_features: m.decoder_features,
            unet_depth: b.unet.depth,
            dropout_rate: b.dropout_rate,
            ensemble_size: b.ensemble_size,
            latent_dim: b.latent_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Validation images scored per checkpoint; 0 means the whole split.
    pub val_limit: usize,
    pub cosine_decay: bool,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        OptimizerSection {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            eval_every: t.eval_every,
            val_limit: t.val_limit,
            cosine_decay: t.cosine_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SegmenterSection {
    pub base_channels: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
}

impl Default for SegmenterSection {
    fn default() -> Self {
        SegmenterSection {
            base_channels: 16,
            depth: 3,
            learning_rate: 1e-3,
            batch_size: 6,
            max_steps: 600,
            eval_every: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub n_samples: usize,
    pub gamma_hard_samples: bool,
    /// Test images per acceleration kept as map galleries.
    pub gallery_images: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        let e = EvalOptions::default();
        EvaluationSection {
            n_samples: e.n_samples,
            gamma_hard_samples: e.gamma_hard_samples,
            gallery_images: 2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    pub data: u64,
    pub model: u64,
    pub sampling: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathSection {
    /// Output root; falls back to `$PHIREC_LAB_HOME`, then `./runs`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub optimizer: OptimizerSection,
    pub segmenter: SegmenterSection,
    pub evaluation: EvaluationSection,
    pub seeds: SeedSection,
    pub paths: PathSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            LabError::Config(msg) => LabError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The full configuration, defaults included.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of the settings that determine results; the output root is excluded.
    pub fn content_hash(&self) -> String {
        let mut c = self.clone();
        c.paths = PathSection::default();
        hash_json(&c)
    }

    /// Hash of what a run directory shares between models: dataset and segmenter.
    pub fn run_hash(&self) -> String {
        let e = &self.experiment;
        hash_json(&(
            &e.name,
            e.setting,
            &e.accelerations,
            &self.data,
            &self.segmenter,
            self.seeds.data,
        ))
    }

    /// Hash of everything that determines a trained model.
    pub fn model_hash(&self) -> String {
        hash_json(&(
            self.run_hash(),
            &self.model,
            &self.optimizer,
            self.seeds.model,
        ))
    }

    /// Hash of everything that determines an evaluation.
    pub fn evaluation_hash(&self) -> String {
        hash_json(&(self.model_hash(), &self.evaluation, self.seeds.sampling))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(LabError::Config(m));
        let e = &self.experiment;
        if e.name.is_empty() || e.name.contains(['/', '\\']) || e.name.starts_with('.') {
            return bad(format!(
                "experiment name {:?} is not a plain directory name",
                e.name
            ));
        }
        if e.accelerations.is_empty() {
            return bad("accelerations must be non-empty".into());
        }
        if e.accelerations.iter().any(|&a| !(a >= 1.0)) {
            return bad("accelerations must be >= 1".into());
        }
        if e.accelerations.windows(2).any(|w| w[0] >= w[1]) {
            return bad("accelerations must be strictly increasing".into());
        }
        if self.data.n_train == 0 || self.data.n_val == 0 || self.data.n_test == 0 {
            return bad("every split needs at least one phantom".into());
        }
        if self.evaluation.n_samples < 2 {
            return bad("evaluation.n_samples must be >= 2".into());
        }
        if self.segmenter.learning_rate <= 0.0
            || self.segmenter.max_steps == 0
            || self.segmenter.eval_every == 0
        {
            return bad(
                "segmenter learning_rate, max_steps and eval_every must be positive".into(),
            );
        }
        self.dataset_config().validate()?;
        self.train_config().validate()?;
        match self.model.kind.baseline() {
            None => self.model_config().validate()?,
            Some(_) => self.baseline_config().validate()?,
        }
        self.segmenter_config().unet.validate()?;
        Ok(())
    }

    /// Accelerations used for training and validation.
    pub fn train_accelerations(&self) -> Vec<f64> {
        match self.experiment.setting {
            Setting::Id => self.experiment.accelerations.clone(),
            Setting::Ood => vec![self.experiment.accelerations[0]],
        }
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        let d = &self.data;
        let base = self.seeds.data * DATA_SEED_STRIDE;
        DatasetConfig {
            phantom: PhantomConfig {
                size: d.image_size,
                n_classes: d.n_classes,
                ..Default::default()
            },
            train: SplitSpec {
                seed_start: base,
                count: d.n_train,
            },
            val: SplitSpec {
                seed_start: base + DATA_SEED_STRIDE / 10,
                count: d.n_val,
            },
            test: SplitSpec {
                seed_start: base + DATA_SEED_STRIDE / 5,
                count: d.n_test,
            },
            train_accels: self.train_accelerations(),
            test_accels: self.experiment.accelerations.clone(),
            pattern: d.pattern,
            calib_fraction: d.calib_fraction,
            noise_sigma: d.noise_sigma,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            levels: m.levels,
            base_channels: m.base_channels,
            latent_channels: m.latent_channels,
            image_size: self.data.image_size,
            in_channels: 2,
            likelihood_sigma: m.likelihood_sigma,
            sigma_floor: m.sigma_floor,
            alpha_reversed: m.alpha_reversed,
            decoder_features: m.decoder_features,
        }
    }

    pub fn baseline_config(&self) -> BaselineConfig {
        let m = &self.model;
        BaselineConfig {
            kind: m.kind.baseline().unwrap_or(BaselineKind::McDropout),
            dropout_rate: m.dropout_rate,
            ensemble_size: m.ensemble_size,
            ensemble_seeds: Vec::new(),
            latent_dim: m.latent_dim,
            unet: UNetConfig {
                depth: m.unet_depth,
                base_channels: m.base_channels,
                image_size: self.data.image_size,
            },
            sigma_floor: m.sigma_floor,
            likelihood_sigma: m.likelihood_sigma,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let o = &self.optimizer;
        TrainConfig {
            learning_rate: o.learning_rate,
            batch_size: o.batch_size,
            max_steps: o.max_steps,
            eval_every: o.eval_every,
            seed: self.seeds.model,
            val_limit: o.val_limit,
            cosine_decay: o.cosine_decay,
        }
    }

    pub fn segmenter_config(&self) -> SegmenterConfig {
        SegmenterConfig {
            unet: UNetConfig {
                depth: self.segmenter.depth,
                base_channels: self.segmenter.base_channels,
                image_size: self.data.image_size,
            },
            n_classes: self.data.n_classes,
        }
    }

    pub fn segmenter_train_config(&self) -> TrainConfig {
        let s = &self.segmenter;
        TrainConfig {
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            max_steps: s.max_steps,
            eval_every: s.eval_every,
            seed: self.seeds.data,
            val_limit: 0,
            cosine_decay: false,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            n_samples: self.evaluation.n_samples,
            seed: self.seeds.sampling,
            gamma_hard_samples: self.evaluation.gamma_hard_samples,
        }
    }

    pub fn output_root(&self) -> PathBuf {
        self.paths
            .root
            .clone()
            .or_else(|| std::env::var_os(HOME_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(&self.experiment.name)
    }
}
