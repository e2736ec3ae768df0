//! Interfaces shared by the continuous and discrete reverse processes.

use crate::error::Result;
use crate::numkit::RngStream;
use crate::par::Exec;

/// A parametric reverse process `p_θ(x_{t−1} | x_t)` over `horizon()` steps.
///
/// Parameters are exposed as one flat vector so the M-step optimizer and
/// checkpoints are shared between worlds.
pub trait DiffusionPolicy: Sync {
    type State: Clone + Send + Sync + PartialEq + std::fmt::Debug;

    fn horizon(&self) -> usize;

    fn num_params(&self) -> usize;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, flat: &[f64]) -> Result<()>;

    /// Draw `x_T` from the reverse-process prior.
    fn initial_state(&self, rng: &mut RngStream) -> Self::State;

    /// One ancestral step `x_{t−1} ~ p_θ(· | x_t)`.
    fn sample_step(&self, x_t: &Self::State, t: usize, rng: &mut RngStream)
        -> Result<Self::State>;

    fn log_prob(&self, x_t: &Self::State, x_prev: &Self::State, t: usize) -> Result<f64>;

    /// Returns `log p_θ(x_prev | x_t)` and adds `scale · ∇_θ log p` to `grads`.
    fn log_prob_grad(
        &self,
        x_t: &Self::State,
        x_prev: &Self::State,
        t: usize,
        scale: f64,
        grads: &mut [f64],
    ) -> Result<f64>;

    /// `KL(p_θ(·|x_t) ‖ p_anchor(·|x_t))`, adding `scale · ∇_θ KL` to `grads`.
    fn kl_grad(
        &self,
        anchor: &Self,
        x_t: &Self::State,
        t: usize,
        scale: f64,
        grads: &mut [f64],
    ) -> Result<f64>;

    fn kl(&self, anchor: &Self, x_t: &Self::State, t: usize) -> Result<f64> {
        let mut sink = vec![0.0; self.num_params()];
        self.kl_grad(anchor, x_t, t, 0.0, &mut sink)
    }
}

/// Ordered states `x_T, …, x_0` of one denoising pass plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<S> {
    pub states: Vec<S>,
    pub reward: f64,
    /// Version of the parameter snapshot the trajectory was generated from.
    pub snapshot: u64,
    /// Per-step search statistics, indexed like `states[1..]` (step t = T
    /// first). Empty for plain rollouts.
    pub steps: Vec<StepStats>,
}

impl<S> Trajectory<S> {
    pub fn horizon(&self) -> usize {
        self.states.len() - 1
    }

    /// `(x_t, x_{t−1}, t)` for t = T … 1.
    pub fn transitions(&self) -> impl Iterator<Item = (&S, &S, usize)> {
        let horizon = self.horizon();
        self.states
            .windows(2)
            .enumerate()
            .map(move |(i, w)| (&w[0], &w[1], horizon - i))
    }

    pub fn terminal(&self) -> &S {
        self.states.last().expect("trajectory holds x_T")
    }
}

/// Statistics recorded by the posterior search at one denoising step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// `log η̂(x_{t−1} | x_t)` of the selected particle.
    pub log_proposal: f64,
    /// `log p(x_{t−1} | x_t)` of the selected particle under the search prior.
    pub log_prior: f64,
    /// `log(w_sel / mean_m w_m)`, the self-normalized correction that turns
    /// the proposal density into an estimate of the tilted density.
    pub log_correction: f64,
    /// `log mean_m w_m`, an estimate of `V̂(x_t)/α` under the search prior;
    /// `NaN` after a fallback.
    pub log_mean_weight: f64,
    /// Entropy of the normalized weights.
    pub weight_entropy: f64,
    /// True when every weight underflowed and resampling fell back to uniform.
    pub fallback: bool,
}

/// Ancestral sampling of `n` trajectories, each on stream `rng.derive(i)`.
pub fn rollout<P, R>(
    policy: &P,
    rng: &RngStream,
    n: usize,
    exec: Exec,
    reward: R,
) -> Result<Vec<Trajectory<P::State>>>
where
    P: DiffusionPolicy,
    R: Fn(&P::State) -> Result<f64> + Sync + Send,
{
    if n == 0 {
        return Err(crate::error::Error::Domain("rollout of zero trajectories".into()));
    }
    exec.map_range(n, |i| {
        let mut r = rng.derive(i as u64);
        let mut x = policy.initial_state(&mut r);
        let mut states = Vec::with_capacity(policy.horizon() + 1);
        states.push(x.clone());
        for t in (1..=policy.horizon()).rev() {
            x = policy.sample_step(&x, t, &mut r)?;
            states.push(x.clone());
        }
        Ok(Trajectory {
            reward: reward(&x)?,
            states,
            snapshot: 0,
            steps: Vec::new(),
        })
    })
    .into_iter()
    .collect()
}
