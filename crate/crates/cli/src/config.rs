//! Experiment configuration files.
//!
//! A config is a JSON object with an explicit `version`; unknown keys are
//! rejected with the offending key in the message. Omitted optional
//! sections fall back to the reference desk setup.
//!
//! ```json
//! {
//!   "version": 1,
//!   "master_seed": 7,
//!   "replicates": 3,
//!   "temperatures": [0.5, 1, 30, 50],
//!   "dataset": { "kind": "blobs", "classes": 10, "shape": [64], "per_class": 500,
//!                "test_per_class": 200, "separation": 0.5, "noise": 0.12, "seed": 0 },
//!   "train": { "lr_max": 0.06, "epochs": 30, "batch_size": 32 },
//!   "adversarial": { "temperatures": [1, 50], "lr_max": 0.02 },
//!   "output_dir": "runs/reference"
//! }
//! ```
//!
//! The dataset `seed` field is ignored for blob datasets in sweeps: each
//! replicate draws its data from a sub-seed of `master_seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use tempscale_core::attack::{AttackConfig, LossKind, Target};
use tempscale_core::corrupt::{CorruptionKind, DEFAULT_SEVERITY};
use tempscale_core::data::DatasetSpec;
use tempscale_core::model::EncoderSpec;
use tempscale_core::softmax::Temperature;
use tempscale_core::train::{AtConfig, TrainConfig, REFERENCE_AT_LR, REFERENCE_BATCH, REFERENCE_LR};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

/// The full temperature grid; used when a config omits `temperatures`.
pub const PAPER_TEMPERATURES: [f64; 8] = [0.1, 0.5, 1.0, 10.0, 30.0, 50.0, 70.0, 100.0];

/// The reduced grid of the acceptance runs.
pub const ACCEPTANCE_TEMPERATURES: [f64; 4] = [0.5, 1.0, 30.0, 50.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub master_seed: u64,
    /// Independent repetitions (data draw + initialization) per temperature.
    #[serde(default = "one")]
    pub replicates: usize,
    #[serde(default = "paper_temperatures")]
    pub temperatures: Vec<Temperature>,
    #[serde(default = "reference_dataset")]
    pub dataset: DatasetSpec,
    /// Defaults to the reference MLP sized for the dataset's samples.
    #[serde(default)]
    pub encoder: Option<EncoderSpec>,
    #[serde(default)]
    pub train: TrainSection,
    /// Adversarial-training entries; absent means none.
    #[serde(default)]
    pub adversarial: Option<AdversarialSection>,
    #[serde(default = "default_attacks")]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub corruptions: CorruptionSection,
    /// Write geometry/variance/logit-shift CSVs for every entry.
    #[serde(default = "yes")]
    pub analysis: bool,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr_max: REFERENCE_LR,
            lr_min: 0.0,
            momentum: 0.9,
            epochs: 30,
            batch_size: REFERENCE_BATCH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdversarialSection {
    pub temperatures: Vec<Temperature>,
    pub lr_max: f64,
    pub lr_min: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub attack_steps: usize,
    pub epsilon: f64,
    pub step_size: f64,
    pub random_start: bool,
}

impl Default for AdversarialSection {
    fn default() -> Self {
        Self {
            temperatures: vec![Temperature::ONE, Temperature::new(50.0).expect("positive")],
            lr_max: REFERENCE_AT_LR,
            lr_min: 0.0,
            momentum: 0.9,
            epochs: 30,
            batch_size: REFERENCE_BATCH,
            attack_steps: 10,
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            random_start: true,
        }
    }
}

/// One evaluation attack. Seeds are derived per replicate, not configured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    /// Column/file name, e.g. `pgd20`.
    pub name: String,
    pub loss: LossKind,
    pub epsilon: f64,
    pub steps: usize,
    pub step_size: f64,
    #[serde(default = "yes")]
    pub random_start: bool,
    #[serde(default = "untargeted")]
    pub target: Target,
    #[serde(default)]
    pub kappa: f64,
}

impl AttackSpec {
    pub fn to_config(&self, seed: u64) -> AttackConfig {
        AttackConfig {
            loss: self.loss,
            epsilon: self.epsilon,
            steps: self.steps,
            step_size: self.step_size,
            random_start: self.random_start,
            target: self.target,
            kappa: self.kappa,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorruptionSection {
    /// Empty means every kind applicable to the sample shape.
    pub kinds: Vec<CorruptionKind>,
    pub severity: u8,
}

impl Default for CorruptionSection {
    fn default() -> Self {
        Self {
            kinds: Vec::new(),
            severity: DEFAULT_SEVERITY,
        }
    }
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn untargeted() -> Target {
    Target::Untargeted
}

fn paper_temperatures() -> Vec<Temperature> {
    PAPER_TEMPERATURES
        .iter()
        .map(|&t| Temperature::new(t).expect("positive"))
        .collect()
}

fn reference_dataset() -> DatasetSpec {
    DatasetSpec::reference(0)
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

/// PGD20 and C&W20 at ε = 8/255, α = 2/255, plus PGD20 targeted at the
/// error-prone class.
pub fn default_attacks() -> Vec<AttackSpec> {
    let eps = 8.0 / 255.0;
    let pgd = AttackSpec {
        name: "pgd20".into(),
        loss: LossKind::Ce,
        epsilon: eps,
        steps: 20,
        step_size: 2.0 / 255.0,
        random_start: true,
        target: Target::Untargeted,
        kappa: 0.0,
    };
    vec![
        pgd.clone(),
        AttackSpec {
            name: "cw20".into(),
            loss: LossKind::CwMargin,
            ..pgd.clone()
        },
        AttackSpec {
            name: "pgd20_targeted".into(),
            target: Target::ErrorProne,
            ..pgd
        },
    ]
}

impl ExperimentConfig {
    /// The reference desk setup at the given temperatures.
    pub fn reference(temperatures: &[f64], replicates: usize, master_seed: u64) -> CliResult<Self> {
        Ok(Self {
            version: CONFIG_VERSION,
            master_seed,
            replicates,
            temperatures: temperatures
                .iter()
                .map(|&t| Temperature::new(t))
                .collect::<Result<_, _>>()?,
            dataset: reference_dataset(),
            encoder: None,
            train: TrainSection::default(),
            adversarial: None,
            attacks: default_attacks(),
            corruptions: CorruptionSection::default(),
            analysis: true,
            output_dir: default_output(),
        })
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// sha256 of the compact serialization.
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {}, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        if self.temperatures.is_empty() {
            return Err(CliError::Config("temperature list is empty".into()));
        }
        if self.replicates == 0 {
            return Err(CliError::Config("replicates must be at least 1".into()));
        }
        let mut names: Vec<&str> = self.attacks.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(CliError::Config(format!("duplicate attack name {:?}", w[0])));
        }
        for a in &self.attacks {
            if a.name.is_empty()
                || !a
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(CliError::Config(format!(
                    "attack name {:?} must be [A-Za-z0-9_-]+",
                    a.name
                )));
            }
        }
        if let Some(adv) = &self.adversarial {
            if adv.temperatures.is_empty() {
                return Err(CliError::Config("adversarial temperature list is empty".into()));
            }
        }
        // Encoder/train settings are checked by building one of each.
        self.train_config(self.temperatures[0], 0)?
            .validate()
            .map_err(config_error)?;
        if let Some(adv) = &self.adversarial {
            self.at_config(adv, adv.temperatures[0], 0)?
                .validate()
                .map_err(config_error)?;
        }
        Ok(())
    }

    /// Encoder for the configured dataset: explicit, or the reference MLP.
    pub fn encoder_for(&self) -> CliResult<EncoderSpec> {
        if let Some(e) = &self.encoder {
            return Ok(e.clone());
        }
        let len = match &self.dataset {
            DatasetSpec::Blobs(b) | DatasetSpec::BlobImages(b) => b.shape.iter().product(),
            DatasetSpec::Idx { .. } => 28 * 28,
        };
        Ok(EncoderSpec::default_mlp(len))
    }

    pub fn train_config(&self, tau: Temperature, seed: u64) -> CliResult<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            tau,
            lr_max: t.lr_max,
            lr_min: t.lr_min,
            momentum: t.momentum,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed,
            dataset_id: dataset_id(&self.dataset),
            encoder: self.encoder_for()?,
        })
    }

    pub fn at_config(&self, adv: &AdversarialSection, tau: Temperature, seed: u64) -> CliResult<AtConfig> {
        Ok(AtConfig {
            train: TrainConfig {
                tau,
                lr_max: adv.lr_max,
                lr_min: adv.lr_min,
                momentum: adv.momentum,
                epochs: adv.epochs,
                batch_size: adv.batch_size,
                seed,
                dataset_id: dataset_id(&self.dataset),
                encoder: self.encoder_for()?,
            },
            attack_steps: adv.attack_steps,
            epsilon: adv.epsilon,
            step_size: adv.step_size,
            random_start: adv.random_start,
        })
    }
}

fn config_error(e: tempscale_core::Error) -> CliError {
    CliError::Config(e.to_string())
}

fn dataset_id(spec: &DatasetSpec) -> String {
    match spec {
        DatasetSpec::Blobs(_) => "blobs".into(),
        DatasetSpec::BlobImages(_) => "blob-images".into(),
        DatasetSpec::Idx { train_images, .. } => format!("idx:{train_images}"),
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = ExperimentConfig::parse(r#"{"version": 1}"#).unwrap();
        assert_eq!(cfg.temperatures.len(), PAPER_TEMPERATURES.len());
        assert_eq!(cfg.replicates, 1);
        assert_eq!(cfg.attacks.len(), 3);
        assert_eq!(cfg.train, TrainSection::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let err = ExperimentConfig::parse(r#"{"version": 1, "temperatrues": [1]}"#).unwrap_err();
        assert!(
            matches!(&err, CliError::Config(m) if m.contains("temperatrues")),
            "{err}"
        );
        let err = ExperimentConfig::parse(r#"{"version": 1, "train": {"lr": 0.1}}"#).unwrap_err();
        assert!(matches!(&err, CliError::Config(m) if m.contains("`lr`")), "{err}");
    }

    #[test]
    fn version_is_required_and_checked() {
        assert!(matches!(ExperimentConfig::parse("{}"), Err(CliError::Config(_))));
        assert!(matches!(
            ExperimentConfig::parse(r#"{"version": 2}"#),
            Err(CliError::Config(m)) if m.contains("version")
        ));
    }

    #[test]
    fn bad_values_are_config_errors() {
        for text in [
            r#"{"version": 1, "temperatures": []}"#,
            r#"{"version": 1, "temperatures": [0]}"#,
            r#"{"version": 1, "temperatures": [-1]}"#,
            r#"{"version": 1, "replicates": 0}"#,
            r#"{"version": 1, "train": {"momentum": 1.5}}"#,
            r#"{"version": 1, "train": {"epochs": 0}}"#,
        ] {
            assert!(
                matches!(ExperimentConfig::parse(text), Err(CliError::Config(_))),
                "{text}"
            );
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let mut cfg = ExperimentConfig::reference(&ACCEPTANCE_TEMPERATURES, 3, 11).unwrap();
        cfg.adversarial = Some(AdversarialSection::default());
        let back = ExperimentConfig::parse(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::reference(&[1.0], 1, 0).unwrap();
        let mut b = a.clone();
        b.master_seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }
}
