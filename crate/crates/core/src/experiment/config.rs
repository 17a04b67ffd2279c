//! Run configuration. TOML, every key defaulted, unknown keys rejected.

use crate::alignment::AlignmentConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::regulator::RegulatorConfig;
use crate::scalar::Scalar;
use crate::transforms::{check_kernel_size, FoveationParams, Scale, View, ViewParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub transforms: TransformConfig,
    pub views: ViewFlags,
    pub features: FeatureConfig,
    pub fusion: FusionConfig,
    pub alignment: AlignmentConfig,
    pub regulator: RegulatorConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            data: DataConfig::default(),
            transforms: TransformConfig::default(),
            views: ViewFlags::default(),
            features: FeatureConfig::default(),
            fusion: FusionConfig::default(),
            alignment: AlignmentConfig::default(),
            regulator: RegulatorConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub classes: usize,
    pub test_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    pub neural_dim: usize,
    /// Standard deviation of the additive noise on neural vectors.
    pub neural_noise: f64,
    /// Kernel levels stored in the embedding bank. Empty means every kernel the
    /// regulator can reach from the initial size.
    pub bank_levels: Vec<u32>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 60,
            test_classes: 50,
            train_per_class: 30,
            test_per_class: 1,
            image_size: 32,
            channels: 3,
            neural_dim: 64,
            neural_noise: 0.05,
            bank_levels: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformConfig {
    pub gamma: f64,
    /// `[row, col]`; omitted means the geometric image centre.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<[f64; 2]>,
    pub kernel_size: u32,
    pub perturbation: u32,
    /// On the 0–255 scale.
    pub noise_sigma: f64,
    pub scale_low: Scale,
    pub scale_mosaic: Scale,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            center: None,
            kernel_size: 75,
            perturbation: 6,
            noise_sigma: 10.0,
            scale_low: Scale::new(1, 2).unwrap(),
            scale_mosaic: Scale::new(1, 16).unwrap(),
        }
    }
}

impl TransformConfig {
    pub fn foveation<T: Scalar>(&self) -> FoveationParams<T> {
        FoveationParams {
            center: self.center.map(|[r, c]| (T::lit(r), T::lit(c))),
            gamma: T::lit(self.gamma),
            kernel_size: self.kernel_size,
            perturbation: self.perturbation,
        }
    }

    pub fn view_params<T: Scalar>(&self, noise_seed: u64) -> ViewParams<T> {
        ViewParams {
            noise_sigma: T::lit(self.noise_sigma),
            scale_low: self.scale_low,
            scale_mosaic: self.scale_mosaic,
            noise_seed,
        }
    }
}

/// Which views feed the fusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewFlags {
    pub foveation: bool,
    pub noise: bool,
    pub low_res: bool,
    pub mosaic: bool,
}

impl Default for ViewFlags {
    fn default() -> Self {
        Self {
            foveation: true,
            noise: true,
            low_res: true,
            mosaic: true,
        }
    }
}

impl ViewFlags {
    pub fn enabled(&self) -> Vec<View> {
        View::ALL
            .into_iter()
            .zip([self.foveation, self.noise, self.low_res, self.mosaic])
            .filter_map(|(v, on)| on.then_some(v))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    /// Encode views from the dataset images on the fly.
    Synthetic,
    /// Read precomputed features from the dataset's embedding bank.
    Bank,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub provider: ProviderKind,
    pub dim: usize,
    pub encoder_seed: u64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            provider: ProviderKind::Synthetic,
            dim: 64,
            encoder_seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub gallery_sizes: Vec<usize>,
    pub trials: usize,
    /// Label written in the subject column of evaluation reports.
    pub subject: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            gallery_sizes: vec![200, 100, 50],
            trials: 20,
            subject: "synthetic".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub dataset: PathBuf,
    pub run: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            dataset: "data".into(),
            run: "run".into(),
            reports: "reports".into(),
        }
    }
}

/// Record written next to every command's outputs. Loading it with
/// [`RunConfig::load`] yields the embedded configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub outputs: Vec<String>,
    pub config: RunConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        let cfg = if table.contains_key("command") && table.contains_key("config") {
            let m: Manifest = toml::from_str(text).map_err(|e| Error::Config(format!("manifest: {e}")))?;
            m.config
        } else {
            toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn views(&self) -> Vec<View> {
        self.views.enabled()
    }

    pub fn validate(&self) -> Result<()> {
        if self.views().is_empty() {
            return Err(Error::Config(
                "all views are disabled; at least one is required".into(),
            ));
        }
        let t = &self.transforms;
        check_kernel_size(t.kernel_size)?;
        let size = self.data.image_size;
        if size == 0 || !matches!(self.data.channels, 1 | 3) {
            return Err(Error::Config(
                "image size must be positive and channels 1 or 3".into(),
            ));
        }
        t.foveation::<f64>().validate(size, size)?;
        t.view_params::<f64>(0).validate(size, size)?;
        let r = &self.regulator;
        let k_max = r.k_max_for(t.kernel_size);
        if r.k_min.is_multiple_of(2)
            || k_max.is_multiple_of(2)
            || !(r.k_min <= t.kernel_size && t.kernel_size <= k_max)
        {
            return Err(Error::Config(format!(
                "regulator bounds [{}, {k_max}] must be odd and contain kernel size {}",
                r.k_min, t.kernel_size
            )));
        }
        if !(0.0..=1.0).contains(&r.momentum) || !(r.alpha > 0.0 && r.alpha < 1.0) {
            return Err(Error::Config(
                "momentum must lie in [0, 1] and alpha in (0, 1)".into(),
            ));
        }
        if self.features.dim < 2 || self.data.neural_dim == 0 {
            return Err(Error::Config("feature dimensions too small".into()));
        }
        if self.data.test_classes == 0 || self.data.test_classes >= self.data.classes {
            return Err(Error::Config(format!(
                "need 0 < test_classes < classes, got {} of {}",
                self.data.test_classes, self.data.classes
            )));
        }
        if self.data.train_per_class == 0 || self.data.test_per_class == 0 {
            return Err(Error::Config("samples per class must be positive".into()));
        }
        if self.data.bank_levels.iter().any(|k| k % 2 == 0) {
            return Err(Error::Config("bank levels must be odd".into()));
        }
        if !(self.data.neural_noise >= 0.0) {
            return Err(Error::Config("neural noise must be non-negative".into()));
        }
        if self.eval.trials == 0 || self.eval.gallery_sizes.contains(&0) {
            return Err(Error::Config(
                "evaluation needs positive trials and gallery sizes".into(),
            ));
        }
        self.fusion.validate()?;
        self.alignment.validate()
    }

    /// Kernel levels the bank should hold.
    pub fn bank_levels(&self) -> Vec<u32> {
        if !self.data.bank_levels.is_empty() {
            let mut levels = self.data.bank_levels.clone();
            levels.sort_unstable();
            levels.dedup();
            return levels;
        }
        let k = self.transforms.kernel_size as i64;
        let c = self.transforms.perturbation as i64;
        let (lo, hi) = (
            self.regulator.k_min as i64,
            self.regulator.k_max_for(self.transforms.kernel_size) as i64,
        );
        let mut levels: Vec<u32> = (-(k / c + 1)..=(hi - k) / c + 1)
            .map(|m| (k + m * c).clamp(lo, hi) as u32)
            .collect();
        levels.sort_unstable();
        levels.dedup();
        levels
    }
}

/// The incremental ablation ladder: baseline, then dynamic foveation, noise,
/// low resolution, mosaic and finally evidence weighting switched on in turn.
pub fn ablation_ladder(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let step = |dynamic, noise, low_res, mosaic, evidence| {
        let mut c = base.clone();
        c.regulator.dynamic = dynamic;
        c.views = ViewFlags {
            foveation: true,
            noise,
            low_res,
            mosaic,
        };
        c.fusion.evidence = evidence;
        c
    };
    vec![
        ("baseline", step(false, false, false, false, false)),
        ("dyn", step(true, false, false, false, false)),
        ("dyn+noise", step(true, true, false, false, false)),
        ("dyn+noise+res", step(true, true, true, false, false)),
        ("dyn+noise+res+mos", step(true, true, true, true, false)),
        ("dyn+noise+res+mos+el", step(true, true, true, true, true)),
    ]
}
