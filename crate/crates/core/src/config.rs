//! Run configuration: one JSON document describing every stage.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cl::{ClFlags, RegConfig, ScheduleConfig};
use crate::error::{ensure, Error, Result};
use crate::finetune::FinetuneConfig;
use crate::moco::MoCoConfig;
use crate::nets::EncoderConfig;
use crate::preprocess::GrayNorm;
use crate::seed::derive_seed;
use crate::synth::SUITE_IMAGES;

/// Which stages a run executes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Kaiming initialisation straight into fine-tuning.
    Scratch,
    /// Contrastive pre-training on the unlabelled datasets only.
    Foreign,
    /// Contrastive pre-training on every dataset.
    MdMoco,
    /// Pre-training, then continual learning with every option off.
    MuscleMinus,
    /// Pre-training, then continual learning as configured in `flags`.
    Muscle,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Scratch,
        Variant::Foreign,
        Variant::MdMoco,
        Variant::MuscleMinus,
        Variant::Muscle,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Scratch => "scratch",
            Variant::Foreign => "foreign",
            Variant::MdMoco => "md_moco",
            Variant::MuscleMinus => "muscle_minus",
            Variant::Muscle => "muscle",
        }
    }

    pub fn pretrains(self) -> bool {
        self != Variant::Scratch
    }

    pub fn continual(self) -> bool {
        matches!(self, Variant::MuscleMinus | Variant::Muscle)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Encoder input `(height, width)`.
    pub target_hw: (usize, usize),
    pub norm: GrayNorm,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_hw: (32, 32),
            norm: GrayNorm::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    /// The generated standard suite.
    Synthetic { suite_seed: u64, n_images: usize },
    /// Every `*.json` manifest in a directory, ordered by dataset id.
    Manifests { dir: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic {
            suite_seed: 0,
            n_images: SUITE_IMAGES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Every stage seed is derived from this value.
    pub master_seed: u64,
    pub variant: Variant,
    pub out_dir: PathBuf,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub preprocessing: PreprocessConfig,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub moco: MoCoConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub reg: RegConfig,
    /// Continual-learning switches for the `muscle` variant.
    #[serde(default = "all_on")]
    pub flags: ClFlags,
    #[serde(default)]
    pub finetune: FinetuneConfig,
}

fn all_on() -> ClFlags {
    ClFlags::ALL_ON
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            variant: Variant::Muscle,
            out_dir: PathBuf::from("runs/default"),
            data: DataSource::default(),
            preprocessing: PreprocessConfig::default(),
            encoder: EncoderConfig::default(),
            moco: MoCoConfig::default(),
            schedule: ScheduleConfig::default(),
            reg: RegConfig::default(),
            flags: ClFlags::ALL_ON,
            finetune: FinetuneConfig::default(),
        }
    }
}

mod stage_key {
    pub const MOCO: u64 = 101;
    pub const CL: u64 = 102;
    pub const FINETUNE: u64 = 103;
}

impl RunConfig {
    /// Reads a JSON config. A missing or unreadable file is a configuration
    /// error, like malformed JSON.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Copy with every stage seed derived from `master_seed`.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.moco.seed = derive_seed(self.master_seed, &[stage_key::MOCO]);
        c.schedule.seed = derive_seed(self.master_seed, &[stage_key::CL]);
        c.finetune.seed = derive_seed(self.master_seed, &[stage_key::FINETUNE]);
        c
    }

    /// Flags for the continual-learning stage of this variant.
    pub fn cl_flags(&self) -> ClFlags {
        match self.variant {
            Variant::MuscleMinus => ClFlags::ALL_OFF,
            _ => self.flags,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let hw = self.preprocessing.target_hw;
        ensure!(
            hw == self.encoder.input_hw,
            Config,
            "preprocessing target {:?} differs from encoder input {:?}",
            hw,
            self.encoder.input_hw
        );
        if let DataSource::Synthetic { n_images, .. } = self.data {
            ensure!(n_images >= 10, Config, "synthetic suite needs at least 10 images per dataset");
        }
        if let GrayNorm::Fixed { std, .. } = self.preprocessing.norm {
            ensure!(std > 0.0, Config, "fixed gray std must be positive");
        }
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.encoder.validate().map_err(cfg_err)?;
        self.moco.validate().map_err(cfg_err)?;
        self.schedule.validate().map_err(cfg_err)?;
        self.reg.validate().map_err(cfg_err)?;
        self.finetune.validate().map_err(cfg_err)?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON of the resolved config, ignoring
    /// the output directory.
    pub fn config_hash(&self) -> String {
        let mut c = self.resolved();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_and_defaults() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json().unwrap()).unwrap();
        assert_eq!(c, back);
        let minimal: RunConfig =
            serde_json::from_str(r#"{"master_seed": 3, "variant": "md_moco", "out_dir": "x"}"#).unwrap();
        assert_eq!(minimal.variant, Variant::MdMoco);
        assert_eq!(minimal.flags, ClFlags::ALL_ON);
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        assert_eq!(a.config_hash(), b.config_hash());
        b.master_seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert!("imagenet".parse::<Variant>().is_err());
    }
}
