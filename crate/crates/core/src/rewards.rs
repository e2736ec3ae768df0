//! Terminal reward functions R(x_0).
//!
//! Continuous rewards act on vectors. Discrete rewards act on token arrays
//! and also have a relaxed form on per-position distributions: an `L×(K+1)`
//! row-major array whose last column is the mask coordinate. The relaxation
//! is the multilinear extension (expected value under independent
//! positions), which agrees with the exact reward on one-hot inputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::linalg::{dot, sq_dist};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardDomain {
    Continuous,
    Discrete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum RewardKind {
    /// `cᵀx`
    Linear { coef: Vec<f64> },
    /// `−‖x − g‖²`
    NegSqDist { goal: Vec<f64> },
    /// `Σ_k a_k exp(−‖x − μ_k‖² / 2τ²)`
    ModePreference {
        centers: Vec<Vec<f64>>,
        amplitudes: Vec<f64>,
        tau: f64,
    },
    /// Number of windows equal to `motif` (token ids).
    MotifCount { motif: Vec<u8> },
    /// Number of positions holding `token`.
    Composition { token: u8 },
    /// The same value everywhere, in either domain.
    Constant { value: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardSpec {
    pub name: String,
    pub kind: RewardKind,
    /// When false the reward is treated as a black box: no gradients, and
    /// the E-step falls back to prior proposals.
    #[serde(default = "yes")]
    pub differentiable: bool,
    /// Multiplies values and gradients.
    #[serde(default = "one")]
    pub scale: f64,
}

fn yes() -> bool {
    true
}

fn one() -> f64 {
    1.0
}

/// A terminal sample handed to [`RewardSpec::value`].
#[derive(Debug, Clone, Copy)]
pub enum Sample<'a> {
    Continuous(&'a [f64]),
    Discrete(&'a [u8]),
}

impl RewardSpec {
    pub fn new(name: impl Into<String>, kind: RewardKind) -> Self {
        Self {
            name: name.into(),
            kind,
            differentiable: true,
            scale: 1.0,
        }
    }

    pub fn black_box(mut self) -> Self {
        self.differentiable = false;
        self
    }

    pub fn scaled(mut self, c: f64) -> Self {
        self.scale *= c;
        self
    }

    /// The domain the reward is defined on; `None` for rewards valid in both.
    pub fn domain(&self) -> Option<RewardDomain> {
        match self.kind {
            RewardKind::Linear { .. }
            | RewardKind::NegSqDist { .. }
            | RewardKind::ModePreference { .. } => Some(RewardDomain::Continuous),
            RewardKind::MotifCount { .. } | RewardKind::Composition { .. } => {
                Some(RewardDomain::Discrete)
            }
            RewardKind::Constant { .. } => None,
        }
    }

    pub fn validate(&self, dim_or_len: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("reward '{}': {m}", self.name)));
        match &self.kind {
            RewardKind::Linear { coef } if coef.len() != dim_or_len => {
                bad(format!("coef has {} entries, dim is {dim_or_len}", coef.len()))
            }
            RewardKind::NegSqDist { goal } if goal.len() != dim_or_len => {
                bad(format!("goal has {} entries, dim is {dim_or_len}", goal.len()))
            }
            RewardKind::ModePreference {
                centers,
                amplitudes,
                tau,
            } => {
                if centers.len() != amplitudes.len() || centers.is_empty() {
                    return bad("centers and amplitudes must be non-empty and equal length".into());
                }
                if centers.iter().any(|c| c.len() != dim_or_len) {
                    return bad("center dimension mismatch".into());
                }
                if *tau <= 0.0 {
                    return bad("tau must be positive".into());
                }
                Ok(())
            }
            RewardKind::MotifCount { motif } if motif.is_empty() || motif.len() > dim_or_len => {
                bad("motif must be non-empty and no longer than the sequence".into())
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, x: Sample<'_>) -> Result<f64> {
        match (x, self.domain()) {
            (Sample::Continuous(v), Some(RewardDomain::Continuous) | None) => {
                self.value_continuous(v)
            }
            (Sample::Discrete(s), Some(RewardDomain::Discrete) | None) => self.value_discrete(s),
            _ => Err(Error::Domain(format!(
                "reward '{}' evaluated on a sample from the wrong domain",
                self.name
            ))),
        }
    }

    pub fn value_continuous(&self, x: &[f64]) -> Result<f64> {
        let raw = match &self.kind {
            RewardKind::Linear { coef } => dot(coef, x),
            RewardKind::NegSqDist { goal } => -sq_dist(x, goal),
            RewardKind::ModePreference {
                centers,
                amplitudes,
                tau,
            } => centers
                .iter()
                .zip(amplitudes)
                .map(|(c, a)| a * (-sq_dist(x, c) / (2.0 * tau * tau)).exp())
                .sum(),
            RewardKind::Constant { value } => *value,
            _ => return self.wrong_domain(),
        };
        Ok(self.scale * raw)
    }

    /// Exact reward of a token array; mask tokens (any id ≥ K) never match.
    pub fn value_discrete(&self, tokens: &[u8]) -> Result<f64> {
        let raw = match &self.kind {
            RewardKind::MotifCount { motif } => {
                if tokens.len() < motif.len() {
                    0.0
                } else {
                    tokens
                        .windows(motif.len())
                        .filter(|w| *w == motif.as_slice())
                        .count() as f64
                }
            }
            RewardKind::Composition { token } => {
                tokens.iter().filter(|t| *t == token).count() as f64
            }
            RewardKind::Constant { value } => *value,
            _ => return self.wrong_domain(),
        };
        Ok(self.scale * raw)
    }

    /// Multilinear extension on an `len × width` array of per-position
    /// probabilities (`width = K + 1`, last column is the mask).
    pub fn relaxed_value(&self, probs: &[f64], len: usize, width: usize) -> Result<f64> {
        check_relaxed(probs, len, width)?;
        let raw = match &self.kind {
            RewardKind::MotifCount { motif } => {
                let m = motif.len();
                if m > len {
                    0.0
                } else {
                    (0..=len - m)
                        .map(|w| {
                            motif
                                .iter()
                                .enumerate()
                                .map(|(j, &tok)| probs[(w + j) * width + tok as usize])
                                .product::<f64>()
                        })
                        .sum()
                }
            }
            RewardKind::Composition { token } => {
                (0..len).map(|l| probs[l * width + *token as usize]).sum()
            }
            RewardKind::Constant { value } => *value,
            _ => return self.wrong_domain(),
        };
        Ok(self.scale * raw)
    }

    fn ensure_differentiable(&self) -> Result<()> {
        if self.differentiable {
            Ok(())
        } else {
            Err(Error::Unsupported(format!(
                "reward '{}' is a black box and has no gradient",
                self.name
            )))
        }
    }

    pub fn grad_continuous(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.ensure_differentiable()?;
        let mut g = match &self.kind {
            RewardKind::Linear { coef } => coef.clone(),
            RewardKind::NegSqDist { goal } => {
                x.iter().zip(goal).map(|(xi, gi)| -2.0 * (xi - gi)).collect()
            }
            RewardKind::ModePreference {
                centers,
                amplitudes,
                tau,
            } => {
                let t2 = tau * tau;
                let mut g = vec![0.0; x.len()];
                for (c, a) in centers.iter().zip(amplitudes) {
                    let k = a * (-sq_dist(x, c) / (2.0 * t2)).exp();
                    for (gi, (xi, ci)) in g.iter_mut().zip(x.iter().zip(c)) {
                        *gi -= k * (xi - ci) / t2;
                    }
                }
                g
            }
            RewardKind::Constant { .. } => vec![0.0; x.len()],
            _ => return self.wrong_domain(),
        };
        g.iter_mut().for_each(|v| *v *= self.scale);
        Ok(g)
    }

    /// Gradient of [`RewardSpec::relaxed_value`] with respect to every
    /// coordinate of the `len × width` array (zero on the mask column).
    pub fn relaxed_grad(&self, probs: &[f64], len: usize, width: usize) -> Result<Vec<f64>> {
        self.ensure_differentiable()?;
        check_relaxed(probs, len, width)?;
        let mut g = vec![0.0; len * width];
        match &self.kind {
            RewardKind::MotifCount { motif } => {
                let m = motif.len();
                if m <= len {
                    for w in 0..=len - m {
                        for j in 0..m {
                            let others: f64 = motif
                                .iter()
                                .enumerate()
                                .filter(|(i, _)| *i != j)
                                .map(|(i, &tok)| probs[(w + i) * width + tok as usize])
                                .product();
                            g[(w + j) * width + motif[j] as usize] += others;
                        }
                    }
                }
            }
            RewardKind::Composition { token } => {
                for l in 0..len {
                    g[l * width + *token as usize] = 1.0;
                }
            }
            RewardKind::Constant { .. } => {}
            _ => return self.wrong_domain(),
        }
        g.iter_mut().for_each(|v| *v *= self.scale);
        Ok(g)
    }

    fn wrong_domain<T>(&self) -> Result<T> {
        Err(Error::Domain(format!(
            "reward '{}' does not support this domain",
            self.name
        )))
    }
}

fn check_relaxed(probs: &[f64], len: usize, width: usize) -> Result<()> {
    if probs.len() != len * width {
        return Err(Error::Shape {
            expected: len * width,
            got: probs.len(),
        });
    }
    Ok(())
}

/// One-hot `L × (K+1)` encoding of a token array (mask id = K).
pub fn one_hot(tokens: &[u8], vocab: usize) -> Vec<f64> {
    let width = vocab + 1;
    let mut out = vec![0.0; tokens.len() * width];
    for (l, &t) in tokens.iter().enumerate() {
        out[l * width + (t as usize).min(vocab)] = 1.0;
    }
    out
}
