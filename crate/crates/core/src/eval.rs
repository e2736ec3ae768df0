//! Evaluation: the discounted ELBO (exact for enumerable discrete instances,
//! an importance-sampling surrogate otherwise), reward statistics,
//! diversity and mode coverage.

use serde::{Deserialize, Serialize};

use crate::continuous::GaussianMixture;
use crate::discrete::{DiscretePolicy, SeqDistribution, SeqSpace};
use crate::error::{Error, Result};
use crate::numkit::linalg::sq_dist;
use crate::numkit::reduce::{lse_unchecked, softmax_unchecked};
use crate::policy::{DiffusionPolicy, Trajectory};
use crate::softq::{ExactSoftTables, SoftQConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    ExactTabular,
    SurrogateIs,
}

impl std::fmt::Display for Estimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Estimator::ExactTabular => "exact_tabular",
            Estimator::SurrogateIs => "surrogate_is",
        })
    }
}

/// One evaluation of a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboRecord {
    pub epoch: usize,
    /// Per-trajectory ELBO.
    pub elbo: f64,
    pub estimator: Estimator,
    /// Trajectories behind a surrogate estimate; zero for exact ones.
    pub elbo_samples: usize,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub diversity: Option<f64>,
    pub mode_coverage: Option<f64>,
}

/// `E_η[Σ_t γ^{T−t}(1{t=1} r/α + log p_θ − log η)]` with `η` the tilted
/// policy stored in `tables`, by a forward pass over state marginals.
pub fn elbo_exact_tabular<F>(tables: &ExactSoftTables, log_p: F) -> Result<f64>
where
    F: Fn(&[u8], &[u8], usize) -> Result<f64>,
{
    let space = tables.space;
    let big_t = tables.horizon();
    let SoftQConfig { alpha, gamma } = tables.cfg;
    let mut mass = vec![0.0; space.num_states()];
    mass[space.index(&space.all_masked())] = 1.0;
    let mut total = 0.0;
    for t in (1..=big_t).rev() {
        let weight = gamma.powi((big_t - t) as i32);
        let mut next_mass = vec![0.0; mass.len()];
        for (i, &mu) in mass.iter().enumerate() {
            if mu == 0.0 {
                continue;
            }
            let x = space.tokens_of(i);
            for (j, l_eta) in tables.policy_log_probs(t, &x) {
                let eta = l_eta.exp();
                if eta == 0.0 {
                    continue;
                }
                let y = space.tokens_of(j);
                let mut term = log_p(&x, &y, t)? - l_eta;
                if t == 1 {
                    term += tables.rewards[j] / alpha;
                }
                total += mu * eta * weight * term;
                next_mass[j] += mu * eta;
            }
        }
        mass = next_mass;
    }
    Ok(total)
}

/// [`elbo_exact_tabular`] for a discrete policy.
pub fn elbo_exact_for_policy(policy: &DiscretePolicy, tables: &ExactSoftTables) -> Result<f64> {
    elbo_exact_tabular(tables, |x, y, t| policy.log_prob(&x.to_vec(), &y.to_vec(), t))
}

/// Per-trajectory ELBO terms of a searched batch and their self-normalized
/// trajectory weights.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateTerms {
    /// `Σ_t γ^{T−t}(1{t=1} r/α + log p_θ − log η̂ − log(w_sel / mean w))`
    pub terms: Vec<f64>,
    /// Log trajectory weights: tilted path density (unnormalized) over the
    /// search approximation of it.
    pub log_weights: Vec<f64>,
    /// `log_weights`, normalized.
    pub weights: Vec<f64>,
}

impl SurrogateTerms {
    pub fn weighted(&self) -> f64 {
        self.terms.iter().zip(&self.weights).map(|(f, w)| f * w).sum()
    }

    /// Log of the mean trajectory weight, estimating the tilted normalizer.
    pub fn log_normalizer(&self) -> f64 {
        lse_unchecked(&self.log_weights) - (self.log_weights.len() as f64).ln()
    }

    /// Self-normalized estimate with the path density of the tilted policy
    /// taken as `q(τ) ŵ(τ) / Ẑ` instead of the search density `q(τ)`.
    pub fn corrected(&self) -> f64 {
        let log_z = self.log_normalizer();
        self.terms
            .iter()
            .zip(&self.log_weights)
            .zip(&self.weights)
            .filter(|(_, w)| **w > 0.0)
            .map(|((f, lw), w)| w * (f - lw + log_z))
            .sum()
    }

    pub fn unweighted(&self) -> f64 {
        self.terms.iter().sum::<f64>() / self.terms.len() as f64
    }

    /// Effective sample size of the trajectory weights.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Splits the surrogate ELBO of `batch` into terms and weights. The tilted
/// density at each step is approximated by `η̂ · w_sel / mean w`; the
/// trajectory weight is the ratio of the tilted path density (with the
/// intermediate values estimated by the per-step mean weights) to that
/// approximation. Trajectories with a resampling fallback get weight zero.
pub fn surrogate_terms<P: DiffusionPolicy>(
    policy: &P,
    batch: &[Trajectory<P::State>],
    cfg: &SoftQConfig,
) -> Result<SurrogateTerms> {
    if batch.is_empty() {
        return Err(Error::Data("surrogate ELBO of an empty batch".into()));
    }
    let mut terms = Vec::with_capacity(batch.len());
    let mut logw = Vec::with_capacity(batch.len());
    for tr in batch {
        let big_t = tr.horizon();
        if tr.steps.len() != big_t {
            return Err(Error::Data("surrogate ELBO needs search statistics on every step".into()));
        }
        let mut f = 0.0;
        let mut lw = tr.reward / cfg.alpha;
        for ((x_t, x_prev, t), st) in tr.transitions().zip(&tr.steps) {
            let log_q = st.log_proposal + st.log_correction;
            let mut term = policy.log_prob(x_t, x_prev, t)? - log_q;
            if t == 1 {
                term += tr.reward / cfg.alpha;
            }
            f += cfg.gamma.powi((big_t - t) as i32) * term;
            lw += st.log_prior - log_q;
            if t < big_t && cfg.gamma != 1.0 {
                lw += (cfg.gamma - 1.0) * st.log_mean_weight;
            }
        }
        if tr.steps.iter().any(|s| s.fallback) || !lw.is_finite() {
            lw = f64::NEG_INFINITY;
        }
        terms.push(f);
        logw.push(lw);
    }
    if logw.iter().all(|w| *w == f64::NEG_INFINITY) {
        return Err(Error::Data("no trajectory with a finite weight".into()));
    }
    let weights = softmax_unchecked(&logw);
    Ok(SurrogateTerms {
        terms,
        log_weights: logw,
        weights,
    })
}

/// Self-normalized importance estimate of the ELBO from a searched batch
/// (see [`SurrogateTerms::corrected`]).
pub fn elbo_surrogate<P: DiffusionPolicy>(
    policy: &P,
    batch: &[Trajectory<P::State>],
    cfg: &SoftQConfig,
) -> Result<f64> {
    Ok(surrogate_terms(policy, batch, cfg)?.corrected())
}

/// Mean and sample standard deviation (zero for a single value).
pub fn reward_stats(rewards: &[f64]) -> (f64, f64) {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = rewards.iter().sum::<f64>() / n;
    if rewards.len() < 2 {
        return (mean, 0.0);
    }
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn levenshtein(a: &[u8], b: &[u8]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

fn mean_pairwise<T>(samples: &[T], d: impl Fn(&T, &T) -> f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::Data("diversity needs at least two samples".into()));
    }
    let mut total = 0.0;
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            total += d(&samples[i], &samples[j]);
        }
    }
    let pairs = samples.len() * (samples.len() - 1) / 2;
    Ok(total / pairs as f64)
}

/// Mean pairwise Euclidean distance.
pub fn diversity_euclidean(samples: &[Vec<f64>]) -> Result<f64> {
    mean_pairwise(samples, |a, b| sq_dist(a, b).sqrt())
}

/// Mean pairwise edit distance.
pub fn diversity_levenshtein(samples: &[Vec<u8>]) -> Result<f64> {
    mean_pairwise(samples, |a, b| levenshtein(a, b) as f64)
}

/// Fraction of mixture components with at least one sample within
/// `radius` of the component mean.
pub fn mode_coverage(samples: &[Vec<f64>], mixture: &GaussianMixture, radius: f64) -> f64 {
    let r2 = radius * radius;
    let hit = mixture
        .means
        .iter()
        .filter(|m| samples.iter().any(|x| sq_dist(x, m) <= r2))
        .count();
    hit as f64 / mixture.components() as f64
}

/// Pearson correlation between the unigram-plus-bigram frequency vectors of
/// `samples` and of the reference distribution.
pub fn ngram_correlation(samples: &[Vec<u8>], reference: &SeqDistribution, space: SeqSpace) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("n-gram statistics of an empty sample".into()));
    }
    let k = space.vocab;
    let counts = |seqs: &mut dyn Iterator<Item = (&Vec<u8>, f64)>| {
        let mut v = vec![0.0; k + k * k];
        for (s, w) in seqs {
            for &a in s {
                v[a as usize] += w;
            }
            for p in s.windows(2) {
                v[k + p[0] as usize * k + p[1] as usize] += w;
            }
        }
        v
    };
    let a = counts(&mut samples.iter().map(|s| (s, 1.0 / samples.len() as f64)));
    let b = counts(&mut reference.support.iter().zip(reference.weights.iter().copied()));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(&a), mean(&b));
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    Ok(cov / (va * vb).sqrt())
}
