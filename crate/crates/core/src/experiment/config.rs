use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{HamOptions, SyntheticSpec};
use crate::encoders::DEFAULT_EMBED_DIM;
use crate::error::{Error, Result};
use crate::federation::{RawInputSpec, WirePrecision};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    CentralImageOnly,
    CentralMultimodal,
    ConcatVfl,
    HybridVfl,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::CentralImageOnly,
        Variant::CentralMultimodal,
        Variant::ConcatVfl,
        Variant::HybridVfl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CentralImageOnly => "central_image_only",
            Variant::CentralMultimodal => "central_multimodal",
            Variant::ConcatVfl => "concat_vfl",
            Variant::HybridVfl => "hybrid_vfl",
        }
    }

    /// Row label used in the summary table.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::CentralImageOnly => "Centralized Image-Only",
            Variant::CentralMultimodal => "Centralized Multimodal",
            Variant::ConcatVfl => "VFL Baseline",
            Variant::HybridVfl => "HybridVFL",
        }
    }

    pub fn is_federated(self) -> bool {
        matches!(self, Variant::ConcatVfl | Variant::HybridVfl)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    /// Accepts snake case names and the mixed-case model names
    /// (`HybridVFL`, `ConcatVFL`, `CentralImageOnly`, `CentralMultimodal`).
    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_ascii_lowercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.name().replace('_', "") == key)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Ham {
        metadata: PathBuf,
        image_dir: PathBuf,
        #[serde(default)]
        options: HamOptions,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub data: DataSource,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Only used by HybridVFL; every other variant trains with 0.
    pub lambda_cons: f64,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub wire: WirePrecision,
    /// Raw input values planted as audit canaries per run.
    pub audit_canaries: usize,
    /// Image size the communication report compares against.
    pub raw_input: RawInputSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            variant: Variant::HybridVfl,
            data: DataSource::default(),
            epochs: 30,
            batch_size: 32,
            lr: 0.01,
            lambda_cons: 0.1,
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("results"),
            embed_dim: DEFAULT_EMBED_DIM,
            heads: 4,
            blocks: 1,
            wire: WirePrecision::F32,
            audit_canaries: 8,
            raw_input: RawInputSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))
    }

    /// The weight actually used for training.
    pub fn effective_lambda(&self) -> f64 {
        if self.variant == Variant::HybridVfl {
            self.lambda_cons
        } else {
            0.0
        }
    }

    /// Directory name for this variant and weight under `out_dir`.
    pub fn run_name(&self) -> String {
        match self.variant {
            Variant::HybridVfl => format!("{}_lambda{}", self.variant.name(), self.lambda_cons),
            v => v.name().to_string(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.lr)));
        }
        if !(self.lambda_cons >= 0.0 && self.lambda_cons.is_finite()) {
            return Err(Error::Config(format!("lambda_cons {} must be non-negative", self.lambda_cons)));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embedding width {} must be a positive multiple of {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.variant == Variant::ConcatVfl && self.embed_dim % 2 != 0 {
            return Err(Error::Config("the concatenation baseline splits its head in two; use an even width".into()));
        }
        let (h, w) = match &self.data {
            DataSource::Synthetic(spec) => {
                spec.validate()?;
                (spec.height, spec.width)
            }
            DataSource::Ham { metadata, image_dir, options } => {
                if !metadata.is_file() {
                    return Err(Error::Config(format!("metadata file {} not found", metadata.display())));
                }
                if !image_dir.is_dir() {
                    return Err(Error::Config(format!("image directory {} not found", image_dir.display())));
                }
                options.target_size
            }
        };
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!(
                "image size {h}×{w} does not suit the {} image encoder, which needs multiples of 4",
                self.variant
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_parse() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        assert_eq!("HybridVFL".parse::<Variant>().unwrap(), Variant::HybridVfl);
        assert_eq!("ConcatVFL".parse::<Variant>().unwrap(), Variant::ConcatVfl);
        assert_eq!("CentralImageOnly".parse::<Variant>().unwrap(), Variant::CentralImageOnly);
        assert!("resnet".parse::<Variant>().is_err());
    }

    #[test]
    fn lambda_is_forced_to_zero_outside_hybrid() {
        let mut cfg = ExperimentConfig {
            lambda_cons: 1.0,
            ..Default::default()
        };
        assert_eq!(cfg.effective_lambda(), 1.0);
        cfg.variant = Variant::ConcatVfl;
        assert_eq!(cfg.effective_lambda(), 0.0);
    }

    #[test]
    fn toml_round_trip() {
        let text = r#"
            variant = "concat_vfl"
            epochs = 3
            seeds = [7]
            [data]
            kind = "synthetic"
            n = 70
            interaction_strength = 0.8
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.variant, Variant::ConcatVfl);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 32);
        match &cfg.data {
            DataSource::Synthetic(s) => assert_eq!((s.n, s.interaction_strength, s.k), (70, 0.8, 7)),
            other => panic!("{other:?}"),
        }
        cfg.validate().unwrap();
        assert!(ExperimentConfig::from_toml_str("epochs = \"x\"").is_err());
        assert!(ExperimentConfig::from_toml_str("unknown_key = 1").is_err());
    }

    #[test]
    fn bad_combinations_fail_validation() {
        let odd_image = ExperimentConfig {
            data: DataSource::Synthetic(SyntheticSpec {
                height: 30,
                ..Default::default()
            }),
            ..Default::default()
        };
        assert!(matches!(odd_image.validate(), Err(Error::Config(_))));
        let missing = ExperimentConfig {
            data: DataSource::Ham {
                metadata: "/nonexistent/metadata.csv".into(),
                image_dir: "/nonexistent".into(),
                options: HamOptions::default(),
            },
            ..Default::default()
        };
        assert!(matches!(missing.validate(), Err(Error::Config(_))));
    }
}
