//! Denoiser pretraining with the masked cross-entropy objective.
//!
//! For the step `t → t−1` of the uniform-survival schedule the per-position
//! weight `(ᾱ_{t−1} − ᾱ_t)/(1 − ᾱ_t)` equals `1/t`, and only masked positions
//! contribute. When the expectation over `(x_0, t, mask)` is small enough it
//! is summed exactly; otherwise one corruption per example is drawn.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::reduce::softmax_unchecked;
use crate::numkit::{sample_categorical, Adam, RngStream};
use crate::par::Exec;

use super::{DiscreteDenoiser, SeqSpace};

/// A finite distribution over clean sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeqDistribution {
    pub support: Vec<Vec<u8>>,
    pub weights: Vec<f64>,
}

impl SeqDistribution {
    pub fn new(space: SeqSpace, support: Vec<Vec<u8>>, weights: Vec<f64>) -> Result<Self> {
        if support.is_empty() || support.len() != weights.len() {
            return Err(Error::Data(
                "sequence distribution needs a non-empty support with one weight each".into(),
            ));
        }
        for s in &support {
            space.check(s)?;
            if s.iter().any(|t| space.is_masked(*t)) {
                return Err(Error::Data("clean sequences may not contain the mask".into()));
            }
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Data("sequence weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Data("sequence weights sum to zero".into()));
        }
        Ok(Self {
            support,
            weights: weights.iter().map(|w| w / total).collect(),
        })
    }

    /// Empirical distribution of a dataset (distinct sequences, sorted).
    pub fn empirical(space: SeqSpace, data: &[Vec<u8>]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        let mut sorted = data.to_vec();
        sorted.sort();
        let mut support: Vec<Vec<u8>> = Vec::new();
        let mut weights: Vec<f64> = Vec::new();
        for s in sorted {
            if support.last() == Some(&s) {
                *weights.last_mut().expect("parallel vectors") += 1.0;
            } else {
                support.push(s);
                weights.push(1.0);
            }
        }
        Self::new(space, support, weights)
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<u8> {
        let i = sample_categorical(&self.weights, rng).expect("normalized weights");
        self.support[i].clone()
    }

    pub fn sample_dataset(&self, n: usize, rng: &mut RngStream) -> Vec<Vec<u8>> {
        (0..n).map(|_| self.sample(rng)).collect()
    }

    /// Per-position token marginals, `L×K`.
    pub fn marginals(&self, space: SeqSpace) -> Vec<f64> {
        let k = space.vocab;
        let mut out = vec![0.0; space.len * k];
        for (s, w) in self.support.iter().zip(&self.weights) {
            for (l, &tok) in s.iter().enumerate() {
                out[l * k + tok as usize] += w;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Optimizer steps; each uses the full dataset.
    pub epochs: usize,
    pub lr: f64,
    /// Largest `examples × T × 2^L` for which the corruption expectation is
    /// summed exactly.
    #[serde(default = "default_exact_budget")]
    pub exact_budget: usize,
}

fn default_exact_budget() -> usize {
    200_000
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.05,
            exact_budget: default_exact_budget(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: usize,
    pub exact: bool,
}

/// One weighted corruption `(x_0, t, x_t, weight)`.
struct Corruption {
    x0: Vec<u8>,
    t: usize,
    xt: Vec<u8>,
    weight: f64,
}

fn exact_corruptions(space: SeqSpace, steps: usize, data: &SeqDistribution) -> Vec<Corruption> {
    let mut out = Vec::new();
    for (x0, w) in data.support.iter().zip(&data.weights) {
        for t in 1..=steps {
            let keep = 1.0 - t as f64 / steps as f64;
            for pattern in 0u64..(1u64 << space.len) {
                let mut p = 1.0;
                let mut xt = x0.clone();
                for (l, slot) in xt.iter_mut().enumerate() {
                    if pattern >> l & 1 == 1 {
                        p *= 1.0 - keep;
                        *slot = space.mask();
                    } else {
                        p *= keep;
                    }
                }
                if p > 0.0 && pattern != 0 {
                    out.push(Corruption {
                        x0: x0.clone(),
                        t,
                        xt,
                        weight: w * p / t as f64,
                    });
                }
            }
        }
    }
    out
}

fn sampled_corruptions(
    space: SeqSpace,
    steps: usize,
    dist: &SeqDistribution,
    rng: &mut RngStream,
) -> Vec<Corruption> {
    dist.support
        .iter()
        .zip(&dist.weights)
        .map(|(x0, &w)| {
            let t = 1 + rng.below(steps);
            let keep = 1.0 - t as f64 / steps as f64;
            let xt = x0
                .iter()
                .map(|&x| if rng.uniform() < keep { x } else { space.mask() })
                .collect();
            Corruption {
                x0: x0.clone(),
                t,
                xt,
                // uniform t stands in for the sum over t
                weight: steps as f64 * w / t as f64,
            }
        })
        .collect()
}

/// Weighted cross-entropy and its gradient over a set of corruptions.
fn loss_and_grad(
    den: &DiscreteDenoiser,
    items: &[Corruption],
    exec: Exec,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let space = den.space();
    let k = space.vocab;
    let np = den.num_params();
    let parts = exec.map_chunks(items, |chunk| -> Result<(f64, Vec<f64>)> {
        let mut loss = 0.0;
        let mut grad = if want_grad { vec![0.0; np] } else { Vec::new() };
        for c in chunk {
            let z = den.logits(&c.xt, c.t)?;
            let mut up = vec![0.0; space.len * k];
            for l in 0..space.len {
                if !space.is_masked(c.xt[l]) {
                    continue;
                }
                let p = softmax_unchecked(&z[l * k..(l + 1) * k]);
                let y = c.x0[l] as usize;
                loss -= c.weight * p[y].ln();
                for j in 0..k {
                    up[l * k + j] = c.weight * p[j];
                }
                up[l * k + y] -= c.weight;
            }
            if want_grad {
                den.logits_backward(&c.xt, c.t, &up, 1.0, &mut grad)?;
            }
        }
        Ok((loss, grad))
    });
    let mut loss = 0.0;
    let mut grad = vec![0.0; if want_grad { np } else { 0 }];
    for part in parts {
        let (l, g) = part?;
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// Exact expected masked cross-entropy of `den` under `data`.
pub fn masked_loss(den: &DiscreteDenoiser, data: &SeqDistribution) -> Result<f64> {
    let items = exact_corruptions(den.space(), den.steps(), data);
    Ok(loss_and_grad(den, &items, Exec::Sequential, false)?.0)
}

/// Full-batch Adam on the masked cross-entropy of `data`.
pub fn pretrain_discrete(
    den: &mut DiscreteDenoiser,
    data: &[Vec<u8>],
    cfg: &PretrainConfig,
    rng: &mut RngStream,
    exec: Exec,
) -> Result<PretrainReport> {
    let dist = SeqDistribution::empirical(den.space(), data)?;
    pretrain_on_distribution(den, &dist, cfg, rng, exec)
}

/// [`pretrain_discrete`] against a weighted support instead of a dataset.
pub fn pretrain_on_distribution(
    den: &mut DiscreteDenoiser,
    dist: &SeqDistribution,
    cfg: &PretrainConfig,
    rng: &mut RngStream,
    exec: Exec,
) -> Result<PretrainReport> {
    let space = den.space();
    let budget = dist
        .support
        .len()
        .saturating_mul(den.steps())
        .saturating_mul(1usize.checked_shl(space.len as u32).unwrap_or(usize::MAX));
    let exact = space.len < 32 && budget <= cfg.exact_budget;
    let fixed = if exact {
        Some(exact_corruptions(space, den.steps(), dist))
    } else {
        None
    };
    let mut adam = Adam::new(den.num_params(), cfg.lr, 0.9, 0.999, 1e-8);
    let mut params = den.params();
    let mut initial_loss = f64::NAN;
    let mut last = f64::NAN;
    for epoch in 0..cfg.epochs {
        let sampled;
        let items = match &fixed {
            Some(items) => items.as_slice(),
            None => {
                sampled = sampled_corruptions(space, den.steps(), dist, rng);
                sampled.as_slice()
            }
        };
        let (loss, grad) = loss_and_grad(den, items, exec, true)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("pretraining loss at epoch {epoch}")));
        }
        if epoch == 0 {
            initial_loss = loss;
        }
        adam.update(&mut params, &grad)?;
        den.set_params(&params)?;
        last = loss;
    }
    let final_loss = if exact {
        masked_loss(den, dist)?
    } else {
        last
    };
    if cfg.epochs == 0 {
        initial_loss = final_loss;
    }
    Ok(PretrainReport {
        initial_loss,
        final_loss,
        epochs: cfg.epochs,
        exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Activation;

    fn space(l: usize, k: usize) -> SeqSpace {
        SeqSpace::new(l, k).unwrap()
    }

    #[test]
    fn empirical_merges_duplicates() {
        let s = space(2, 2);
        let d = SeqDistribution::empirical(s, &[vec![1, 1], vec![0, 0], vec![1, 1]]).unwrap();
        assert_eq!(d.support, vec![vec![0, 0], vec![1, 1]]);
        assert!((d.weights[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(SeqDistribution::empirical(s, &[]).is_err());
        assert!(SeqDistribution::empirical(s, &[vec![0, 2]]).is_err());
    }

    #[test]
    fn tabular_learns_marginals_at_the_fully_masked_state() {
        let s = space(2, 2);
        let mut den = DiscreteDenoiser::tabular(s, 3).unwrap();
        let data = vec![vec![0, 0], vec![1, 1]];
        let cfg = PretrainConfig {
            epochs: 300,
            lr: 0.05,
            ..Default::default()
        };
        let rep = pretrain_discrete(&mut den, &data, &cfg, &mut RngStream::new(0, 0), Exec::Parallel)
            .unwrap();
        assert!(rep.exact);
        assert!(rep.final_loss < rep.initial_loss);
        for t in 1..=3 {
            let p = den.x0hat_probs(&s.all_masked(), t).unwrap();
            for v in p {
                assert!((v - 0.5).abs() < 1e-3, "t={t}: {v}");
            }
        }
        // the second position is determined by the first
        let p = den.x0hat_probs(&[1, 2], 2).unwrap();
        assert!(p[3] > 0.99);
    }

    #[test]
    fn skewed_marginals_within_tolerance() {
        let s = space(3, 2);
        let dist = SeqDistribution::new(
            s,
            vec![vec![0, 1, 1], vec![1, 1, 0], vec![0, 0, 0], vec![1, 0, 1]],
            vec![0.4, 0.3, 0.2, 0.1],
        )
        .unwrap();
        let mut den = DiscreteDenoiser::tabular(s, 3).unwrap();
        let cfg = PretrainConfig {
            epochs: 800,
            lr: 0.05,
            ..Default::default()
        };
        // weighted data via repetition
        let data: Vec<Vec<u8>> = dist
            .support
            .iter()
            .zip([4, 3, 2, 1])
            .flat_map(|(x, n)| std::iter::repeat_n(x.clone(), n))
            .collect();
        pretrain_discrete(&mut den, &data, &cfg, &mut RngStream::new(0, 0), Exec::Sequential)
            .unwrap();
        let want = dist.marginals(s);
        let got = den.x0hat_probs(&s.all_masked(), 3).unwrap();
        for (a, b) in want.iter().zip(&got) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn single_sequence_concentrates() {
        let s = space(3, 3);
        let mut den = DiscreteDenoiser::tabular(s, 3).unwrap();
        let cfg = PretrainConfig {
            epochs: 200,
            lr: 0.1,
            ..Default::default()
        };
        pretrain_discrete(&mut den, &[vec![2, 0, 1]], &cfg, &mut RngStream::new(0, 0), Exec::Sequential)
            .unwrap();
        let p = den.x0hat_probs(&s.all_masked(), 3).unwrap();
        assert!(p[2] >= 0.99 && p[3] >= 0.99 && p[7] >= 0.99);
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let s = space(2, 2);
        let mut rng = RngStream::new(3, 0);
        let mut den = DiscreteDenoiser::mlp(s, 3, &[8], Activation::Tanh, &mut rng).unwrap();
        let before = den.params();
        let cfg = PretrainConfig {
            epochs: 0,
            ..Default::default()
        };
        pretrain_discrete(&mut den, &[vec![0, 1]], &cfg, &mut rng, Exec::Sequential).unwrap();
        assert_eq!(den.params(), before);
        assert!(pretrain_discrete(&mut den, &[], &cfg, &mut rng, Exec::Sequential).is_err());
    }

    #[test]
    fn mlp_sampled_training_lowers_held_out_loss() {
        let s = space(6, 2);
        let truth = SeqDistribution::new(
            s,
            vec![vec![0, 1, 0, 1, 0, 1], vec![1, 1, 1, 0, 0, 0], vec![0, 0, 1, 1, 0, 1]],
            vec![0.5, 0.3, 0.2],
        )
        .unwrap();
        let mut rng = RngStream::new(4, 0);
        let train = truth.sample_dataset(200, &mut rng);
        let mut den = DiscreteDenoiser::mlp(s, 4, &[32], Activation::Tanh, &mut rng).unwrap();
        let before = masked_loss(&den, &truth).unwrap();
        let cfg = PretrainConfig {
            epochs: 150,
            lr: 0.01,
            exact_budget: 0,
        };
        let rep = pretrain_discrete(&mut den, &train, &cfg, &mut rng, Exec::Parallel).unwrap();
        assert!(!rep.exact);
        let after = masked_loss(&den, &truth).unwrap();
        assert!(after < 0.8 * before, "{before} -> {after}");
    }
}
