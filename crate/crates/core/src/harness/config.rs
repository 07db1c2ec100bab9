//! TOML experiment configuration. Unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::advrobust::{AdvTrainConfig, AttackConfig};
use crate::corruptions::CorruptionKind;
use crate::dataset::Dataset;
use crate::diffgraph::NetworkSpec;
use crate::error::{Error, Result};
use crate::harness::data::{load_cifar_files, load_idx};
use crate::harness::synthetic::{gen_synthetic_shapes, SyntheticConfig};
use crate::labelnoise::LabelNoiseConfig;
use crate::ooddetect::{OodConfig, ScoreConfig};
use crate::selfsup::{LossSpec, CLASS_HEAD};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Adv,
    Corruptions,
    Labelnoise,
    Ood,
}

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    Cifar {
        train: Vec<PathBuf>,
        test: Vec<PathBuf>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        classes: usize,
    },
}

impl DataSource {
    /// Load or generate the dataset; relative paths resolve against `base`.
    pub fn load(&self, base: &Path, seed: u64) -> Result<Dataset<f32>> {
        let at = |p: &PathBuf| base.join(p);
        match self {
            DataSource::Synthetic(shapes) => gen_synthetic_shapes(shapes, seed),
            DataSource::Cifar { train, test } => {
                let tr: Vec<PathBuf> = train.iter().map(at).collect();
                let te: Vec<PathBuf> = test.iter().map(at).collect();
                Dataset::new(load_cifar_files(&tr)?, load_cifar_files(&te)?, 10, "cifar10-binary")
            }
            DataSource::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                classes,
            } => Dataset::new(
                load_idx(at(train_images), at(train_labels))?,
                load_idx(at(test_images), at(test_labels))?,
                *classes,
                "idx",
            ),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            DataSource::Synthetic(shapes) => shapes.validate(),
            DataSource::Cifar { train, test } if train.is_empty() || test.is_empty() => {
                Err(Error::Config("data: cifar needs train and test files".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvSection {
    pub train: TrainConfig,
    pub attack: AttackConfig,
    #[serde(default = "LossSpec::supervised")]
    pub loss: LossSpec,
    /// Evaluation adversaries; those with zero steps are skipped.
    #[serde(default)]
    pub eval: Vec<AttackConfig>,
    /// Extra ε values (in units of 1/255) run with the first evaluation adversary.
    #[serde(default)]
    pub eps_sweep: Vec<f64>,
}

impl AdvSection {
    pub fn train_config(&self) -> AdvTrainConfig {
        AdvTrainConfig {
            train: self.train,
            attack: self.attack,
            loss: self.loss.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSection {
    pub train: TrainConfig,
    #[serde(default = "LossSpec::supervised")]
    pub loss: LossSpec,
    #[serde(default = "all_kinds")]
    pub kinds: Vec<CorruptionKind>,
    #[serde(default = "all_severities")]
    pub severities: Vec<u8>,
}

fn all_kinds() -> Vec<CorruptionKind> {
    CorruptionKind::ALL.to_vec()
}

fn all_severities() -> Vec<u8> {
    crate::corruptions::SEVERITIES.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodMethod {
    pub name: String,
    /// Network for this method; defaults to the top-level network.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSpec>,
    pub score: ScoreConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub oe_weight: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_score: Option<ScoreConfig>,
}

impl OodMethod {
    pub fn config(&self) -> OodConfig {
        OodConfig {
            score: self.score.clone(),
            train: self.train,
            oe_weight: self.oe_weight,
            test_score: self.test_score.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OodSection {
    pub methods: Vec<OodMethod>,
    /// Number of noise-texture outliers generated for methods with OE.
    #[serde(default = "default_outliers")]
    pub outliers: usize,
}

fn default_outliers() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSource,
    pub network: NetworkSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adv: Option<AdvSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruptions: Option<CorruptionSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labelnoise: Option<LabelNoiseConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ood: Option<OodSection>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Field-level checks run before any compute.
    pub fn validate(&self) -> Result<()> {
        self.data.validate().map_err(ctx("data"))?;
        let present = [
            (ExperimentKind::Adv, self.adv.is_some()),
            (ExperimentKind::Corruptions, self.corruptions.is_some()),
            (ExperimentKind::Labelnoise, self.labelnoise.is_some()),
            (ExperimentKind::Ood, self.ood.is_some()),
        ];
        for (kind, has) in present {
            if has != (kind == self.kind) {
                let name = serde_json::to_string(&kind)?;
                return Err(Error::Config(if has {
                    format!("section {name} given but kind is {:?}", self.kind)
                } else {
                    format!("kind {name} needs a [{}] section", name.trim_matches('"'))
                }));
            }
        }
        let needs_class = !matches!(self.kind, ExperimentKind::Ood);
        if needs_class && !self.network.has_head(CLASS_HEAD) {
            return Err(Error::Config(format!("network: missing `{CLASS_HEAD}` head")));
        }
        if let Some(a) = &self.adv {
            a.train_config().validate().map_err(ctx("adv"))?;
            for e in &a.eval {
                e.validate().map_err(ctx("adv.eval"))?;
            }
            if !a.eps_sweep.is_empty() && a.eval.is_empty() {
                return Err(Error::Config("adv.eps_sweep needs an adv.eval adversary".into()));
            }
        }
        if let Some(c) = &self.corruptions {
            c.train.validate().map_err(ctx("corruptions.train"))?;
            c.loss.validate().map_err(ctx("corruptions.loss"))?;
            if let Some(s) = c.severities.iter().find(|s| !(1..=5).contains(*s)) {
                return Err(Error::Config(format!("corruptions.severities: {s} not in 1..=5")));
            }
        }
        if let Some(l) = &self.labelnoise {
            l.validate().map_err(ctx("labelnoise"))?;
        }
        if let Some(o) = &self.ood {
            if o.methods.is_empty() {
                return Err(Error::Config("ood.methods is empty".into()));
            }
            for m in &o.methods {
                m.config().validate().map_err(ctx(&format!("ood.methods.{}", m.name)))?;
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the parsed config, so layout,
    /// comments and spelled-out defaults do not change it.
    pub fn hash(&self) -> Result<String> {
        let canonical = serde_json::to_value(self)?;
        let digest = Sha256::digest(serde_json::to_vec(&canonical)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

fn ctx(section: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| Error::Config(format!("{section}: {e}"))
}

/// Sidecar written next to a checkpoint so it can be evaluated later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub network: NetworkSpec,
    pub data: DataSource,
    /// Directory that relative data paths resolve against.
    pub base_dir: PathBuf,
    pub seed: u64,
}

impl CheckpointMeta {
    pub fn sidecar_path(ckpt: &Path) -> PathBuf {
        let mut s = ckpt.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    pub fn load(ckpt: &Path) -> Result<Self> {
        let p = Self::sidecar_path(ckpt);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, ckpt: &Path) -> Result<()> {
        let p = Self::sidecar_path(ckpt);
        fs::write(&p, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&p, e))
    }
}
