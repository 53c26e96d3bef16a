//! Pipeline configuration file (TOML).
//!
//! ```toml
//! [data]
//! path = "sites.csv"        # default: <out>/sites.csv
//! window = 45
//! stride = 15
//! holdout_fraction = 0.25
//! stratify = true
//!
//! [synth]
//! sites = 32
//! days = 400
//! # noise_sd = 0.0           # overrides every site's drawn noise level
//! low_qc_prob = 0.15
//! missing_prob = 0.01
//!
//! [model]
//! hidden = 64
//! encoder_hidden = 32
//! embedding_dim = 32
//! generator_hidden = [64]
//! generator_identity_init = true
//! flux_scale = 5.0
//!
//! [loss]
//! alpha = 0.1
//! class_weights = "inverse_frequency"   # or "uniform"
//! sign = "reco_minus_gpp"               # or "gpp_minus_reco"
//!
//! [train]
//! seed = 0
//! pretrain_epochs = 30
//! joint_epochs = 60
//! baseline_epochs = 30
//! batch_size = 8
//! episodes_per_site = 1
//! support_size = 3
//! query_size = 6
//! lr_pretrain = 1e-3
//! lr_joint = 5e-4
//! clip_norm = 5.0
//! ensemble_size = 10
//! checkpoint_every = 0
//! threads = 0
//!
//! [eval]
//! strict_qc = false
//! reference = "tamlstm"
//! ```
//!
//! Every key is optional. `model.driver_dim` is taken from the data.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DEFAULT_STRIDE, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::loss::{ClassWeightMode, FluxSign, DEFAULT_ALPHA};
use crate::model::{ModelKind, TamRlConfig};
use crate::synth::SynthConfig;
use crate::train::TrainRunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    pub window: usize,
    pub stride: usize,
    pub holdout_fraction: f64,
    pub stratify: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: None,
            window: DEFAULT_WINDOW,
            stride: DEFAULT_STRIDE,
            holdout_fraction: 0.25,
            stratify: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSettings {
    pub sites: usize,
    pub days: usize,
    pub noise_sd: Option<f64>,
    pub low_qc_prob: f64,
    pub missing_prob: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        let base = SynthConfig::default();
        SynthSettings {
            sites: 32,
            days: 400,
            noise_sd: None,
            low_qc_prob: base.low_qc_prob,
            missing_prob: base.missing_prob,
        }
    }
}

impl SynthSettings {
    pub fn generator_config(&self) -> SynthConfig {
        SynthConfig {
            noise_sd_override: self.noise_sd,
            low_qc_prob: self.low_qc_prob,
            missing_prob: self.missing_prob,
            ..SynthConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    pub alpha: f64,
    pub class_weights: ClassWeightMode,
    pub sign: FluxSign,
}

impl Default for LossSettings {
    fn default() -> Self {
        LossSettings {
            alpha: DEFAULT_ALPHA,
            class_weights: ClassWeightMode::default(),
            sign: FluxSign::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Score only steps with `qc == 1`.
    pub strict_qc: bool,
    /// Model the relative-RMSE tables compare against.
    pub reference: ModelKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            strict_qc: false,
            reference: ModelKind::TamLstm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub synth: SynthSettings,
    pub model: TamRlConfig,
    pub loss: LossSettings,
    pub train: TrainRunConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: DataConfig::default(),
            synth: SynthSettings::default(),
            model: TamRlConfig::default(),
            loss: LossSettings::default(),
            train: TrainRunConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
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

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.window == 0 || self.data.stride == 0 {
            return Err(Error::Config("data.window and data.stride must be positive".into()));
        }
        if !(self.data.holdout_fraction > 0.0 && self.data.holdout_fraction < 1.0) {
            return Err(Error::Config("data.holdout_fraction must lie in (0, 1)".into()));
        }
        if !(self.loss.alpha >= 0.0 && self.loss.alpha.is_finite()) {
            return Err(Error::Config("loss.alpha must be >= 0".into()));
        }
        Ok(())
    }
}
