//! Posterior exploration: guided proposals, importance weights and
//! single-particle resampling at every denoising step.
//!
//! At step `t` the sampler draws `M` candidates for `x_{t−1}` from a
//! proposal `η̂`, weights them by
//! `w ∝ p(x_{t−1}|x_t) / η̂(x_{t−1}|x_t) · exp(Q̂/α)` with
//! `Q̂ = γ^{t−1} r(x̂_0(x_{t−1}))`, and keeps one. The posterior mean `x̂_0`
//! comes from a separate *guide* policy so the search can use either the
//! pretrained or the current denoiser.

use serde::{Deserialize, Serialize};

use crate::continuous::ContinuousPolicy;
use crate::discrete::DiscretePolicy;
use crate::error::{config, Error, Result};
use crate::numkit::reduce::lse_unchecked;
use crate::numkit::{sample_categorical, Mat, RngStream};
use crate::par::Exec;
use crate::policy::{DiffusionPolicy, StepStats, Trajectory};
use crate::rewards::RewardSpec;
use crate::softq::SoftQConfig;

/// Which denoiser supplies `x̂_0` for guidance and `Q̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum X0Source {
    /// The pretrained model.
    #[default]
    Prior,
    /// The policy being searched from.
    Current,
}

/// How `∇_{x_t} r(x̂_0(x_t))` treats the posterior mean (continuous world).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum JacobianMode {
    /// Chain rule through the closed-form Jacobian.
    #[default]
    Exact,
    /// Stop-gradient through `x̂_0`: the Jacobian is taken as the identity.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EStepConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Particles per step, `M ≥ 1`.
    pub particles: usize,
    #[serde(default = "yes")]
    pub guidance: bool,
    #[serde(default)]
    pub x0hat_source: X0Source,
    #[serde(default)]
    pub jacobian: JacobianMode,
}

fn yes() -> bool {
    true
}

impl EStepConfig {
    pub fn continuous_default() -> Self {
        Self {
            alpha: 0.005,
            gamma: 0.9,
            particles: 4,
            guidance: true,
            x0hat_source: X0Source::Prior,
            jacobian: JacobianMode::Exact,
        }
    }

    pub fn discrete_default() -> Self {
        Self {
            alpha: 0.01,
            gamma: 1.0,
            particles: 10,
            guidance: true,
            x0hat_source: X0Source::Prior,
            jacobian: JacobianMode::Exact,
        }
    }

    pub fn soft_q(&self) -> SoftQConfig {
        SoftQConfig {
            alpha: self.alpha,
            gamma: self.gamma,
        }
    }

    pub fn validate(&self, reward: &RewardSpec) -> Result<()> {
        self.soft_q().validate()?;
        if self.particles == 0 {
            return config("particle count must be at least 1");
        }
        if self.guidance && !reward.differentiable {
            return config(format!(
                "guidance needs a differentiable reward, but '{}' is a black box",
                reward.name
            ));
        }
        Ok(())
    }
}

/// Candidates for `x_{t−1}` with their bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet<S> {
    pub states: Vec<S>,
    pub log_proposal: Vec<f64>,
    pub log_prior: Vec<f64>,
    pub q_hat: Vec<f64>,
    /// Normalized; empty until [`importance_weights`] runs.
    pub weights: Vec<f64>,
}

impl<S> ParticleSet<S> {
    fn with_capacity(m: usize) -> Self {
        Self {
            states: Vec::with_capacity(m),
            log_proposal: Vec::with_capacity(m),
            log_prior: Vec::with_capacity(m),
            q_hat: Vec::with_capacity(m),
            weights: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// `−Σ w log w`
    pub fn weight_entropy(&self) -> f64 {
        -self
            .weights
            .iter()
            .filter(|w| **w > 0.0)
            .map(|w| w * w.ln())
            .sum::<f64>()
    }
}

/// Worlds that can run the guided search.
pub trait Searchable: DiffusionPolicy + Sized {
    /// Draw `cfg.particles` candidates for `x_{t−1}` from `x_t`, with
    /// densities under the proposal and under `self`, and `Q̂` from `guide`.
    fn propose(
        &self,
        guide: &Self,
        x_t: &Self::State,
        t: usize,
        reward: &RewardSpec,
        cfg: &EStepConfig,
        rng: &mut RngStream,
    ) -> Result<ParticleSet<Self::State>>;

    /// `γ^{t−1} r(x̂_0(x_{t−1}))` with `x̂_0` from `guide` at level `t−1`.
    fn q_hat(
        guide: &Self,
        x_prev: &Self::State,
        t: usize,
        reward: &RewardSpec,
        cfg: &EStepConfig,
    ) -> Result<f64>;

    fn terminal_reward(reward: &RewardSpec, x0: &Self::State) -> Result<f64>;
}

/// Policy mean `μ_θ(x_t)` and the guided proposal mean
/// `μ_θ + (σ_t²/α) γ^{t−1} Jᵀ ∇r(x̂_0)`.
pub fn continuous_proposal_mean(
    policy: &ContinuousPolicy,
    guide: &ContinuousPolicy,
    x_t: &[f64],
    t: usize,
    reward: &RewardSpec,
    cfg: &EStepConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mu = policy.policy_mean(x_t, t)?;
    if !cfg.guidance {
        return Ok((mu.clone(), mu));
    }
    let (x0, jac) = match cfg.jacobian {
        JacobianMode::Exact => guide.x0hat_with_jacobian(x_t, t)?,
        JacobianMode::Identity => (guide.x0hat(x_t, t)?, Mat::identity(x_t.len())),
    };
    let g = jac.matvec_t(&reward.grad_continuous(&x0)?)?;
    let c = policy.sigma2(t) / cfg.alpha * cfg.soft_q().discount(t);
    let centre = mu.iter().zip(&g).map(|(m, gi)| m + c * gi).collect();
    Ok((mu, centre))
}

impl Searchable for ContinuousPolicy {
    fn propose(
        &self,
        guide: &Self,
        x_t: &Vec<f64>,
        t: usize,
        reward: &RewardSpec,
        cfg: &EStepConfig,
        rng: &mut RngStream,
    ) -> Result<ParticleSet<Vec<f64>>> {
        let (mu, centre) = continuous_proposal_mean(self, guide, x_t, t, reward, cfg)?;
        let var = self.sigma2(t);
        let sd = var.sqrt();
        let mut set = ParticleSet::with_capacity(cfg.particles);
        for _ in 0..cfg.particles {
            let x: Vec<f64> = centre.iter().map(|m| m + sd * rng.normal()).collect();
            let lq = ContinuousPolicy::gaussian_log_density(&x, &centre, var);
            let lp = if cfg.guidance {
                ContinuousPolicy::gaussian_log_density(&x, &mu, var)
            } else {
                lq
            };
            set.q_hat.push(Self::q_hat(guide, &x, t, reward, cfg)?);
            set.log_proposal.push(lq);
            set.log_prior.push(lp);
            set.states.push(x);
        }
        Ok(set)
    }

    fn q_hat(
        guide: &Self,
        x_prev: &Vec<f64>,
        t: usize,
        reward: &RewardSpec,
        cfg: &EStepConfig,
    ) -> Result<f64> {
        let x0 = guide.x0hat(x_prev, t - 1)?;
        Ok(cfg.soft_q().discount(t) * reward.value_continuous(&x0)?)
    }

    fn terminal_reward(reward: &RewardSpec, x0: &Vec<f64>) -> Result<f64> {
        reward.value_continuous(x0)
    }
}

/// Guided log-probabilities over `K` tokens and the mask for one masked
/// position: `log p + coef · grad`, renormalized. The mask coordinate's
/// gradient is `Σ_i x̂0_i grad_i`, because a masked input passes the
/// denoiser's distribution through to `x̂_0`.
pub fn guided_log_probs(prior: &[f64], grad: &[f64], x0hat: &[f64], coef: f64) -> Vec<f64> {
    let k = x0hat.len();
    let mask_grad: f64 = (0..k).map(|i| x0hat[i] * grad[i]).sum();
    let mut z: Vec<f64> = (0..k).map(|i| prior[i] + coef * grad[i]).collect();
    z.push(prior[k] + coef * mask_grad);
    let norm = lse_unchecked(&z);
    z.iter().map(|v| v - norm).collect()
}

/// `L×(K+1)` relaxed encoding of the clean-sequence prediction at `x`.
fn relaxed_x0(policy: &DiscretePolicy, x: &[u8], t: usize) -> Result<Vec<f64>> {
    let space = policy.space();
    let (k, w) = (space.vocab, space.width());
    let pi = policy.denoiser.x0hat_probs(x, t)?;
    let mut out = vec![0.0; space.len * w];
    for l in 0..space.len {
        out[l * w..l * w + k].copy_from_slice(&pi[l * k..(l + 1) * k]);
    }
    Ok(out)
}

impl Searchable for DiscretePolicy {
    fn propose(
        &self,
        guide: &Self,
        x_t: &Vec<u8>,
        t: usize,
        reward: &RewardSpec,
        cfg: &EStepConfig,
        rng: &mut RngStream,
    ) -> Result<ParticleSet<Vec<u8>>> {
        let mut set = ParticleSet::with_capacity(cfg.particles);
        if !cfg.guidance {
            for _ in 0..cfg.particles {
                let y = self.sample_step(x_t, t, rng)?;
                let lp = self.log_prob(x_t, &y, t)?;
                set.q_hat.push(Self::q_hat(guide, &y, t, reward, cfg)?);
                set.log_proposal.push(lp);
                set.log_prior.push(lp);
                set.states.push(y);
            }
            return Ok(set);
        }
        let space = self.space();
        let (k, w) = (space.vocab, space.width());
        let prior = self.step_log_probs(x_t, t - 1, t)?;
        let relaxed = relaxed_x0(guide, x_t, t)?;
        let grad = reward.relaxed_grad(&relaxed, space.len, w)?;
        let coef = cfg.soft_q().discount(t) / cfg.alpha;
        let guided: Vec<Option<(Vec<f64>, Vec<f64>)>> = prior
            .iter()
            .enumerate()
            .map(|(l, row)| {
                row.as_ref().map(|lp| {
                    let lq = guided_log_probs(
                        lp,
                        &grad[l * w..(l + 1) * w],
                        &relaxed[l * w..l * w + k],
                        coef,
                    );
                    let q = lq.iter().map(|v| v.exp()).collect();
                    (lq, q)
                })
            })
            .collect();
        for _ in 0..cfg.particles {
            let mut y = x_t.clone();
            let (mut lq_sum, mut lp_sum) = (0.0, 0.0);
            for (l, g) in guided.iter().enumerate() {
                if let Some((lq, q)) = g {
                    let c = sample_categorical(q, rng)?;
                    y[l] = c as u8;
                    lq_sum += lq[c];
                    lp_sum += prior[l].as_ref().expect("masked row")[c];
                }
            }
            set.q_hat.push(Self::q_hat(guide, &y, t, reward, cfg)?);
            set.log_proposal.push(lq_sum);
            set.log_prior.push(lp_sum);
            set.states.push(y);
        }
        Ok(set)
    }

    fn q_hat(
        guide: &Self,
        x_prev: &Vec<u8>,
        t: usize,
        reward: &RewardSpec,
        cfg: &EStepConfig,
    ) -> Result<f64> {
        let space = guide.space();
        let relaxed = relaxed_x0(guide, x_prev, t - 1)?;
        Ok(cfg.soft_q().discount(t) * reward.relaxed_value(&relaxed, space.len, space.width())?)
    }

    fn terminal_reward(reward: &RewardSpec, x0: &Vec<u8>) -> Result<f64> {
        reward.value_discrete(x0)
    }
}

/// Normalized weights `∝ (p/η̂) exp(Q̂/α)`, computed in log space. Returns
/// the log of the mean unnormalized weight.
pub fn importance_weights<S>(set: &mut ParticleSet<S>, alpha: f64, t: usize) -> Result<f64> {
    let logw: Vec<f64> = (0..set.len())
        .map(|m| set.log_prior[m] - set.log_proposal[m] + set.q_hat[m] / alpha)
        .collect();
    let norm = lse_unchecked(&logw);
    if !norm.is_finite() {
        return Err(Error::DegenerateWeights { t });
    }
    set.weights = logw.iter().map(|v| (v - norm).exp()).collect();
    Ok(norm - (set.len() as f64).ln())
}

/// Pick one particle index. A single particle is returned without touching
/// the RNG.
pub fn resample<S>(set: &ParticleSet<S>, rng: &mut RngStream) -> Result<usize> {
    if set.len() == 1 {
        return Ok(0);
    }
    sample_categorical(&set.weights, rng)
}

/// One guided step from `x_t`: propose, weight, resample.
pub fn search_step<P: Searchable>(
    policy: &P,
    guide: &P,
    x_t: &P::State,
    t: usize,
    reward: &RewardSpec,
    cfg: &EStepConfig,
    rng: &mut RngStream,
) -> Result<(P::State, StepStats)> {
    let mut set = policy.propose(guide, x_t, t, reward, cfg, rng)?;
    let (fallback, log_mean_weight) = match importance_weights(&mut set, cfg.alpha, t) {
        Ok(v) => (false, v),
        Err(Error::DegenerateWeights { .. }) => {
            log::warn!("all importance weights underflowed at t={t}; resampling uniformly");
            set.weights = vec![1.0 / set.len() as f64; set.len()];
            (true, f64::NAN)
        }
        Err(e) => return Err(e),
    };
    let i = resample(&set, rng)?;
    let stats = StepStats {
        log_proposal: set.log_proposal[i],
        log_prior: set.log_prior[i],
        log_correction: (set.weights[i] * set.len() as f64).ln(),
        log_mean_weight,
        weight_entropy: set.weight_entropy(),
        fallback,
    };
    Ok((set.states.swap_remove(i), stats))
}

/// One full search pass `x_T → x_0`.
pub fn sample_posterior_trajectory<P: Searchable>(
    policy: &P,
    guide: &P,
    reward: &RewardSpec,
    cfg: &EStepConfig,
    rng: &mut RngStream,
) -> Result<Trajectory<P::State>> {
    let mut x = policy.initial_state(rng);
    let mut states = Vec::with_capacity(policy.horizon() + 1);
    let mut steps = Vec::with_capacity(policy.horizon());
    states.push(x.clone());
    for t in (1..=policy.horizon()).rev() {
        let (next, stats) = search_step(policy, guide, &x, t, reward, cfg, rng)?;
        steps.push(stats);
        x = next;
        states.push(x.clone());
    }
    Ok(Trajectory {
        reward: P::terminal_reward(reward, &x)?,
        states,
        snapshot: 0,
        steps,
    })
}

/// `n` independent searches, trajectory `i` on stream `rng.derive(i)`, all
/// tagged with `snapshot`.
#[allow(clippy::too_many_arguments)]
pub fn estep_batch<P: Searchable>(
    policy: &P,
    guide: &P,
    reward: &RewardSpec,
    cfg: &EStepConfig,
    rng: &RngStream,
    n: usize,
    snapshot: u64,
    exec: Exec,
) -> Result<Vec<Trajectory<P::State>>> {
    cfg.validate(reward)?;
    if n == 0 {
        return Err(Error::Domain("E-step batch of zero trajectories".into()));
    }
    exec.map_range(n, |i| {
        let mut r = rng.derive(i as u64);
        let mut tr = sample_posterior_trajectory(policy, guide, reward, cfg, &mut r)?;
        tr.snapshot = snapshot;
        Ok(tr)
    })
    .into_iter()
    .collect()
}

/// Mean per-step weight entropy and number of fallback steps in a batch.
pub fn batch_stats<S>(batch: &[Trajectory<S>]) -> (f64, usize) {
    let steps: Vec<&StepStats> = batch.iter().flat_map(|t| &t.steps).collect();
    if steps.is_empty() {
        return (0.0, 0);
    }
    let entropy = steps.iter().map(|s| s.weight_entropy).sum::<f64>() / steps.len() as f64;
    (entropy, steps.iter().filter(|s| s.fallback).count())
}
