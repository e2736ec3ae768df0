//! Experiment configuration: JSON with explicit keys, defaults filled in,
//! cross-field validation before any compute.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::continuous::GaussianMixture;
use crate::discrete::{PretrainConfig, SeqDistribution, SeqSpace};
use crate::error::{config, Error, Result};
use crate::estep::EStepConfig;
use crate::mstep::MStepConfig;
use crate::numkit::{tol, Activation};
use crate::rewards::{RewardDomain, RewardKind, RewardSpec};
use crate::sched::ContinuousSchedule;

/// How the policy is trained each epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Search against the current policy, distill the searched trajectories.
    #[default]
    Dav,
    /// Search always against the pretrained policy.
    SearchAndDistill,
    /// On-policy rollouts, weighted by `exp(r/α)`.
    Reweight,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Dav, Variant::SearchAndDistill, Variant::Reweight];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Dav => "dav",
            Variant::SearchAndDistill => "search_and_distill",
            Variant::Reweight => "reweight",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContinuousWorld {
    pub steps: usize,
    /// Defaults to the 1000-step reference range rescaled to `steps`.
    #[serde(default)]
    pub beta_min: Option<f64>,
    #[serde(default)]
    pub beta_max: Option<f64>,
    pub mixture: GaussianMixture,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}

impl ContinuousWorld {
    pub fn schedule(&self) -> Result<ContinuousSchedule> {
        let (lo, hi) = ContinuousSchedule::rescaled_default_range(self.steps);
        ContinuousSchedule::linear(self.steps, self.beta_min.unwrap_or(lo), self.beta_max.unwrap_or(hi))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DenoiserSpec {
    /// One logit table per (timestep, state); enumerable instances only.
    Tabular,
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default)]
        activation: Activation,
    },
}

/// Pretraining distribution as weighted sequences over the alphabet.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub support: Vec<String>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteWorld {
    pub len: usize,
    /// One character per token.
    pub alphabet: String,
    pub steps: usize,
    pub denoiser: DenoiserSpec,
    pub data: DataSpec,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// Checkpoint written by `pretrain`; when absent the denoiser is
    /// pretrained in-process.
    #[serde(default)]
    pub pretrained: Option<PathBuf>,
}

pub const MASK_CHAR: char = '_';

impl DiscreteWorld {
    pub fn alphabet(&self) -> Vec<char> {
        self.alphabet.chars().collect()
    }

    pub fn space(&self) -> Result<SeqSpace> {
        SeqSpace::new(self.len, self.alphabet.chars().count())
    }

    pub fn distribution(&self) -> Result<SeqDistribution> {
        let space = self.space()?;
        let alphabet = self.alphabet();
        let support = self
            .data
            .support
            .iter()
            .map(|s| space.parse(s, &alphabet))
            .collect::<Result<Vec<_>>>()?;
        SeqDistribution::new(space, support, self.data.weights.clone())
    }

    pub fn enumerable(&self) -> bool {
        self.space().map(|s| s.num_states() <= tol::ENUMERATION_CAP).unwrap_or(false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WorldSpec {
    Continuous(ContinuousWorld),
    Discrete(DiscreteWorld),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Amortized rollouts per evaluation.
    #[serde(default = "default_samples")]
    pub samples: usize,
    /// Posterior-search samples drawn by `eval` alongside the rollouts.
    #[serde(default = "default_samples")]
    pub posterior_samples: usize,
    /// Search batch for the surrogate ELBO when no exact value exists.
    #[serde(default = "default_samples")]
    pub surrogate_batch: usize,
    /// Defaults to twice the largest component std.
    #[serde(default)]
    pub coverage_radius: Option<f64>,
}

fn default_samples() -> usize {
    256
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: default_samples(),
            posterior_samples: default_samples(),
            surrogate_batch: default_samples(),
            coverage_radius: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub epochs: usize,
    /// Trajectories per E-step.
    pub batch: usize,
    #[serde(default)]
    pub variant: Variant,
    pub world: WorldSpec,
    pub reward: RewardSpec,
    pub estep: EStepConfig,
    pub mstep: MStepConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Run directory; not part of the config hash.
    #[serde(default)]
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON (sorted keys, no whitespace) with the
    /// output directory removed.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("out");
        }
        let canonical = serde_json::to_string(&v).expect("value serializes");
        Sha256::digest(canonical.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.world, WorldSpec::Discrete(_))
    }

    /// Whether exact tables (and the exact ELBO) are available.
    pub fn enumerable(&self) -> bool {
        match &self.world {
            WorldSpec::Discrete(w) => w.enumerable(),
            WorldSpec::Continuous(_) => false,
        }
    }

    pub fn coverage_radius(&self) -> Option<f64> {
        match &self.world {
            WorldSpec::Continuous(w) => Some(
                self.eval
                    .coverage_radius
                    .unwrap_or_else(|| 2.0 * w.mixture.stds.iter().copied().fold(0.0, f64::max)),
            ),
            WorldSpec::Discrete(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return config("batch must be at least 1");
        }
        if self.eval.samples == 0 {
            return config("eval.samples must be at least 1");
        }
        self.estep.validate(&self.reward)?;
        self.mstep.validate()?;
        if !(self.reward.scale.is_finite()) {
            return config("reward scale must be finite");
        }
        let domain = self.reward.domain();
        match &self.world {
            WorldSpec::Continuous(w) => {
                w.mixture.validate()?;
                w.schedule()?;
                if domain == Some(RewardDomain::Discrete) {
                    return config(format!("reward '{}' is for sequences, world is continuous", self.reward.name));
                }
                self.reward.validate(w.mixture.dim())?;
                if let Some(r) = self.eval.coverage_radius {
                    if !(r > 0.0) {
                        return config("coverage radius must be positive");
                    }
                }
            }
            WorldSpec::Discrete(w) => {
                let space = w.space()?;
                if space.vocab == 0 || w.alphabet.contains(MASK_CHAR) {
                    return config(format!("alphabet must be non-empty and may not contain '{MASK_CHAR}'"));
                }
                if w.steps < 2 {
                    return config("discrete worlds need at least 2 steps");
                }
                if domain == Some(RewardDomain::Continuous) {
                    return config(format!("reward '{}' is for vectors, world is discrete", self.reward.name));
                }
                self.reward.validate(space.len)?;
                if matches!(w.denoiser, DenoiserSpec::Tabular) && !w.enumerable() {
                    return Err(Error::OracleUnavailable(format!(
                        "tabular denoiser over {} states",
                        space.num_states()
                    )));
                }
                w.distribution()?;
            }
        }
        Ok(())
    }

    /// Checks that the oracle subcommand can run on this config.
    pub fn require_enumerable(&self) -> Result<()> {
        match &self.world {
            WorldSpec::Discrete(w) if w.enumerable() => Ok(()),
            WorldSpec::Discrete(w) => Err(Error::OracleUnavailable(format!(
                "{} states exceed the enumeration cap {}",
                w.space()?.num_states(),
                tol::ENUMERATION_CAP
            ))),
            WorldSpec::Continuous(_) => Err(Error::OracleUnavailable("continuous worlds cannot be enumerated".into())),
        }
    }
}

/// Built-in configurations.
pub mod presets {
    use super::*;

    pub const NAMES: [&str; 3] = ["tiny", "tabular", "mixture"];

    pub fn by_name(name: &str) -> Result<ExperimentConfig> {
        match name {
            "tiny" => Ok(tiny()),
            "tabular" => Ok(tabular()),
            "mixture" => Ok(mixture()),
            _ => config(format!("unknown preset '{name}' (known: {})", NAMES.join(", "))),
        }
    }

    fn discrete_estep(alpha: f64, particles: usize) -> EStepConfig {
        EStepConfig {
            alpha,
            particles,
            ..EStepConfig::discrete_default()
        }
    }

    /// Two tokens, two positions, three steps, rewarded for "AB".
    pub fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            name: "tiny".into(),
            seed: 0,
            epochs: 20,
            batch: 64,
            variant: Variant::Dav,
            world: WorldSpec::Discrete(DiscreteWorld {
                len: 2,
                alphabet: "AB".into(),
                steps: 3,
                denoiser: DenoiserSpec::Tabular,
                data: DataSpec {
                    support: vec!["AA".into(), "BB".into(), "AB".into(), "BA".into()],
                    weights: vec![0.35, 0.35, 0.15, 0.15],
                },
                pretrain: PretrainConfig::default(),
                pretrained: None,
            }),
            reward: RewardSpec::new("motif_AB", RewardKind::MotifCount { motif: vec![0, 1] }),
            estep: discrete_estep(0.5, 10),
            mstep: MStepConfig {
                lr: 0.05,
                ..MStepConfig::discrete_default()
            },
            eval: EvalConfig::default(),
            checkpoint_every: 0,
            out: None,
        }
    }

    /// Four positions over "AB", four steps, tabular denoiser.
    pub fn tabular() -> ExperimentConfig {
        let support = ["AAAA", "BBBB", "AABB", "BBAA", "ABBA", "BAAB", "ABAB", "BABA"];
        ExperimentConfig {
            name: "tabular".into(),
            seed: 0,
            epochs: 50,
            batch: 64,
            variant: Variant::Dav,
            world: WorldSpec::Discrete(DiscreteWorld {
                len: 4,
                alphabet: "AB".into(),
                steps: 4,
                denoiser: DenoiserSpec::Tabular,
                data: DataSpec {
                    support: support.iter().map(|s| s.to_string()).collect(),
                    weights: vec![0.25, 0.25, 0.12, 0.12, 0.1, 0.1, 0.03, 0.03],
                },
                pretrain: PretrainConfig::default(),
                pretrained: None,
            }),
            reward: RewardSpec::new("motif_AB", RewardKind::MotifCount { motif: vec![0, 1] }),
            estep: discrete_estep(0.5, 10),
            mstep: MStepConfig {
                lr: 0.05,
                ..MStepConfig::discrete_default()
            },
            eval: EvalConfig::default(),
            checkpoint_every: 10,
            out: None,
        }
    }

    /// Four-mode ring in the plane; the fourth mode pays less.
    pub fn mixture() -> ExperimentConfig {
        let mix = GaussianMixture::ring(4, 3.0, 0.3, 2).expect("valid ring");
        let centers = mix.means.clone();
        ExperimentConfig {
            name: "mixture".into(),
            seed: 0,
            epochs: 50,
            batch: 128,
            variant: Variant::Dav,
            world: WorldSpec::Continuous(ContinuousWorld {
                steps: 20,
                beta_min: None,
                beta_max: None,
                mixture: mix,
                hidden: default_hidden(),
                activation: Activation::Tanh,
            }),
            reward: RewardSpec::new(
                "mode_preference",
                RewardKind::ModePreference {
                    centers,
                    amplitudes: vec![1.0, 1.0, 1.0, 0.3],
                    tau: 0.5,
                },
            ),
            estep: EStepConfig {
                alpha: 0.05,
                ..EStepConfig::continuous_default()
            },
            mstep: MStepConfig {
                lr: 2e-3,
                ..MStepConfig::continuous_default()
            },
            eval: EvalConfig {
                surrogate_batch: 128,
                ..EvalConfig::default()
            },
            checkpoint_every: 10,
            out: None,
        }
    }
}
