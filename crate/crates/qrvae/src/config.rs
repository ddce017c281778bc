//! TOML configuration for experiments and datasets.
//!
//! An experiment config file carries a `[model]` and a `[train]` table; a
//! dataset config file is a single table tagged by `kind`. Both are plain
//! key-value text, hashed (SHA-256 of the file bytes) into checkpoint
//! manifests so artifacts can be traced back to the exact configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    make_moons_dataset, parse_idx_images, parse_idx_labels, split_indices,
    synthesize_lesion_set, Dataset, LesionParams, SplitDataset,
};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vae,
    Qrvae,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Vae => write!(f, "vae"),
            ModelKind::Qrvae => write!(f, "qrvae"),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae" => Ok(ModelKind::Vae),
            "qrvae" => Ok(ModelKind::Qrvae),
            other => Err(Error::InvalidArgument(format!(
                "unknown model kind {other:?} (expected \"vae\" or \"qrvae\")"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchKind {
    Mlp,
    Conv,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadActivation {
    /// Unbounded outputs (moons data).
    #[default]
    Linear,
    /// Outputs squashed to `[0, 1]` (image data).
    Sigmoid,
}

fn default_hidden() -> usize {
    400
}

fn default_channels() -> Vec<usize> {
    vec![8, 16, 32]
}

fn default_clamp() -> [f64; 2] {
    [-7.0, 7.0]
}

/// Architecture and output parameterization of a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub arch: ArchKind,
    /// Per-item input shape: `[d]` for vectors, `[c, h, w]` for images.
    pub input_shape: Vec<usize>,
    pub latent_dim: usize,
    /// Hidden width for MLP trunks.
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    /// Encoder channel progression for conv trunks.
    #[serde(default = "default_channels")]
    pub channels: Vec<usize>,
    /// Quantile levels `[alpha_lo, alpha_hi]`; required for `qrvae`.
    #[serde(default)]
    pub alphas: Option<[f64; 2]>,
    #[serde(default)]
    pub head_activation: HeadActivation,
    /// Clamp bounds for the decoder log-variance head.
    #[serde(default = "default_clamp")]
    pub logvar_clamp: [f64; 2],
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::InvalidArgument("latent_dim must be positive".into()));
        }
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "bad input_shape {:?}",
                self.input_shape
            )));
        }
        if self.logvar_clamp[0] > self.logvar_clamp[1] {
            return Err(Error::InvalidArgument("logvar_clamp bounds out of order".into()));
        }
        match self.kind {
            ModelKind::Qrvae => match self.alphas {
                None => {
                    return Err(Error::InvalidArgument(
                        "qrvae requires alphas = [alpha_lo, alpha_hi]".into(),
                    ))
                }
                Some([lo, hi]) => {
                    if !(0.0 < lo && lo < hi && hi < 1.0) {
                        return Err(Error::InvalidArgument(format!(
                            "alphas must satisfy 0 < lo < hi < 1, got [{lo}, {hi}]"
                        )));
                    }
                }
            },
            ModelKind::Vae => {}
        }
        match self.arch {
            ArchKind::Conv => {
                if self.input_shape.len() != 3 {
                    return Err(Error::InvalidArgument(
                        "conv arch needs input_shape = [c, h, w]".into(),
                    ));
                }
                if self.channels.len() != 3 {
                    return Err(Error::InvalidArgument(
                        "conv arch needs exactly 3 channel counts".into(),
                    ));
                }
                let (h, w) = (self.input_shape[1], self.input_shape[2]);
                if h % 8 != 0 || w % 8 != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "conv arch needs spatial dims divisible by 8, got {h}x{w}"
                    )));
                }
            }
            ArchKind::Mlp => {
                if self.hidden == 0 {
                    return Err(Error::InvalidArgument("hidden must be positive".into()));
                }
            }
        }
        Ok(())
    }

    /// Elements of one input item.
    pub fn input_numel(&self) -> usize {
        self.input_shape.iter().product()
    }
}

fn default_lr_decay() -> f64 {
    1.0
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps_opt() -> f64 {
    1e-8
}

/// Optimization loop settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Per-epoch multiplicative learning-rate decay (1.0 = constant).
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps_opt")]
    pub eps_opt: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.lr < 0.0 || self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(Error::InvalidArgument("lr must be >= 0 and lr_decay in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps_opt <= 0.0
        {
            return Err(Error::InvalidArgument("bad optimizer parameters".into()));
        }
        Ok(())
    }
}

/// A whole experiment: model plus training loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn from_str_validated(text: &str, origin: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::parse(origin, e.to_string()))?;
        cfg.model.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
        Self::from_str_validated(&text, &display)
    }
}

/// SHA-256 hex digest of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(hex_digest(&bytes))
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn default_noise_scale() -> f64 {
    1.0
}

fn default_lesion_rate() -> f64 {
    0.5
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

/// Dataset description: what to generate or parse, and how to split it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataConfig {
    /// Two-moons latent simulation mapped to 4 observed dimensions.
    Moons {
        n_train: usize,
        n_val: usize,
        n_test: usize,
        seed: u64,
        #[serde(default = "default_noise_scale")]
        noise_scale: f64,
    },
    /// Synthetic lesion benchmark; the training split is lesion-free.
    Lesion {
        n_train: usize,
        n_val: usize,
        n_test: usize,
        seed: u64,
        #[serde(default = "default_lesion_rate")]
        lesion_rate: f64,
        #[serde(default)]
        noise_gain: f64,
    },
    /// IDX image files (Fashion-MNIST layout), fetched by the user.
    Idx {
        images: String,
        #[serde(default)]
        labels: Option<String>,
        #[serde(default = "default_split")]
        split: [f64; 3],
        #[serde(default)]
        split_seed: u64,
    },
}

impl DataConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let display = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(&display, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(&display, e.to_string()))
    }

    /// Per-item shape of the dataset this config produces (`None` for IDX
    /// files, which declare their own dimensions).
    pub fn item_shape(&self) -> Option<Vec<usize>> {
        match self {
            DataConfig::Moons { .. } => Some(vec![4]),
            DataConfig::Lesion { .. } => Some(vec![1, 64, 64]),
            DataConfig::Idx { .. } => None,
        }
    }

    /// Materialize the dataset deterministically.
    pub fn load(&self) -> Result<SplitDataset> {
        match self {
            DataConfig::Moons { n_train, n_val, n_test, seed, noise_scale } => {
                let make = |n: usize, tag: u64| -> Dataset {
                    if n == 0 {
                        return Dataset {
                            items: crate::autodiff::Tensor::zeros(vec![0, 4]),
                            labels: None,
                            masks: None,
                        };
                    }
                    let moons = make_moons_dataset(n, seed.wrapping_add(tag), *noise_scale);
                    Dataset { items: moons.observed, labels: None, masks: None }
                };
                Ok(SplitDataset {
                    train: make(*n_train, 0),
                    val: make(*n_val, 1),
                    test: make(*n_test, 2),
                })
            }
            DataConfig::Lesion { n_train, n_val, n_test, seed, lesion_rate, noise_gain } => {
                let params =
                    LesionParams { noise_gain: *noise_gain, ..LesionParams::default() };
                Ok(SplitDataset {
                    // train and val are lesion-free by construction
                    train: synthesize_lesion_set(*n_train, seed.wrapping_add(0), 0.0, &params),
                    val: synthesize_lesion_set(*n_val, seed.wrapping_add(1), 0.0, &params),
                    test: synthesize_lesion_set(
                        *n_test,
                        seed.wrapping_add(2),
                        *lesion_rate,
                        &params,
                    ),
                })
            }
            DataConfig::Idx { images, labels, split, split_seed } => {
                let items = parse_idx_images(Path::new(images))?;
                let labels = match labels {
                    Some(path) => Some(parse_idx_labels(Path::new(path))?),
                    None => None,
                };
                let n = items.shape()[0];
                let full = Dataset { items, labels, masks: None };
                let [train_idx, val_idx, test_idx] = split_indices(n, *split, *split_seed)?;
                Ok(SplitDataset {
                    train: full.subset(&train_idx),
                    val: full.subset(&val_idx),
                    test: full.subset(&test_idx),
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MOONS_TOML: &str = r#"
[model]
kind = "qrvae"
arch = "mlp"
input_shape = [4]
latent_dim = 2
hidden = 64
alphas = [0.15, 0.5]

[train]
epochs = 10
batch_size = 64
lr = 1e-3
seed = 7
"#;

    #[test]
    fn experiment_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_str_validated(MOONS_TOML, "test").unwrap();
        assert_eq!(cfg.model.kind, ModelKind::Qrvae);
        assert_eq!(cfg.model.alphas, Some([0.15, 0.5]));
        assert_eq!(cfg.model.logvar_clamp, [-7.0, 7.0]);
        assert_eq!(cfg.train.beta1, 0.9);
        assert_eq!(cfg.train.beta2, 0.999);
        assert_eq!(cfg.train.lr_decay, 1.0);
    }

    #[test]
    fn qrvae_without_alphas_is_rejected() {
        let bad = MOONS_TOML.replace("alphas = [0.15, 0.5]\n", "");
        assert!(ExperimentConfig::from_str_validated(&bad, "test").is_err());
    }

    #[test]
    fn crossed_alphas_are_rejected() {
        let bad = MOONS_TOML.replace("[0.15, 0.5]", "[0.5, 0.15]");
        assert!(ExperimentConfig::from_str_validated(&bad, "test").is_err());
    }

    #[test]
    fn data_config_moons_loads_split_sizes() {
        let cfg: DataConfig = toml::from_str(
            r#"
kind = "moons"
n_train = 50
n_val = 10
n_test = 20
seed = 3
"#,
        )
        .unwrap();
        let split = cfg.load().unwrap();
        assert_eq!(split.train.len(), 50);
        assert_eq!(split.val.len(), 10);
        assert_eq!(split.test.len(), 20);
        assert_eq!(split.train.item_shape(), &[4]);
    }

    #[test]
    fn data_config_lesion_train_split_is_clean() {
        let cfg: DataConfig = toml::from_str(
            r#"
kind = "lesion"
n_train = 3
n_val = 2
n_test = 4
seed = 9
lesion_rate = 1.0
"#,
        )
        .unwrap();
        let split = cfg.load().unwrap();
        assert!(split.train.masks.unwrap().data().iter().all(|&v| v == 0.0));
        assert!(split.test.masks.unwrap().data().iter().any(|&v| v > 0.0));
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(
            hex_digest(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
