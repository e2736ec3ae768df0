//! Amortization: maximum-likelihood distillation of searched trajectories
//! into the policy, optionally anchored to the pretrained policy by a
//! per-step KL penalty.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::numkit::Adam;
use crate::par::Exec;
use crate::policy::{DiffusionPolicy, Trajectory};

/// Weight of the KL term at step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KlWeighting {
    #[default]
    Uniform,
    /// `γ^{T−t}`, matching the ELBO's step weights.
    Discounted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MStepConfig {
    pub lr: f64,
    /// Optimizer steps per epoch, `≥ 1`.
    pub steps: usize,
    /// KL anchor strength `λ ≥ 0`.
    #[serde(default)]
    pub lambda: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub kl_weighting: KlWeighting,
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl MStepConfig {
    pub fn continuous_default() -> Self {
        Self {
            lr: 1e-3,
            steps: 1,
            lambda: 0.0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            kl_weighting: KlWeighting::Uniform,
        }
    }

    pub fn discrete_default() -> Self {
        Self {
            steps: 2,
            ..Self::continuous_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return config("distillation steps must be at least 1");
        }
        if !(self.lambda >= 0.0) {
            return config(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.lr >= 0.0) {
            return config(format!("learning rate must be non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return config("moment decays must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Options shared by the distillation losses.
#[derive(Debug, Clone, Copy)]
pub struct LossSpec<'a, P> {
    /// Pretrained policy for the KL anchor; required when `lambda > 0`.
    pub anchor: Option<&'a P>,
    pub lambda: f64,
    pub kl_weighting: KlWeighting,
    pub gamma: f64,
    /// Per-trajectory weights; `None` means `1/B` each.
    pub weights: Option<&'a [f64]>,
}

impl<P> LossSpec<'_, P> {
    pub fn plain() -> Self {
        Self {
            anchor: None,
            lambda: 0.0,
            kl_weighting: KlWeighting::Uniform,
            gamma: 1.0,
            weights: None,
        }
    }
}

/// Loss value with its parts and gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub loss: f64,
    /// Weighted negative log-likelihood part.
    pub nll: f64,
    /// Weighted KL part before multiplying by `λ`.
    pub kl: f64,
    pub grad: Vec<f64>,
}

/// `−Σ_b w_b Σ_t log p_θ(x_{t−1}|x_t) + λ Σ_b w_b Σ_t c_t KL_t(x_t)`.
pub fn distill_loss<P: DiffusionPolicy>(
    policy: &P,
    batch: &[Trajectory<P::State>],
    spec: &LossSpec<'_, P>,
    exec: Exec,
) -> Result<LossValue> {
    if batch.is_empty() {
        return Err(Error::Data("empty distillation batch".into()));
    }
    let uniform = vec![1.0 / batch.len() as f64; batch.len()];
    let weights = spec.weights.unwrap_or(&uniform);
    if weights.len() != batch.len() {
        return Err(Error::Shape {
            expected: batch.len(),
            got: weights.len(),
        });
    }
    let anchor = match (spec.lambda > 0.0, spec.anchor) {
        (true, None) => return config("KL anchor requested without a pretrained policy"),
        (true, Some(a)) => Some(a),
        (false, _) => None,
    };
    let horizon = policy.horizon();
    let items: Vec<(&Trajectory<P::State>, f64)> = batch.iter().zip(weights.iter().copied()).collect();
    let np = policy.num_params();
    let parts = exec.map_chunks(&items, |chunk| -> Result<(f64, f64, Vec<f64>)> {
        let (mut nll, mut kl) = (0.0, 0.0);
        let mut grad = vec![0.0; np];
        for (tr, w) in chunk {
            for (x_t, x_prev, t) in tr.transitions() {
                let lp = policy
                    .log_prob_grad(x_t, x_prev, t, -w, &mut grad)
                    .map_err(|e| match e {
                        Error::Unreachable(m) => Error::Data(format!("trajectory step t={t}: {m}")),
                        other => other,
                    })?;
                nll -= w * lp;
                if let Some(a) = anchor {
                    let c = match spec.kl_weighting {
                        KlWeighting::Uniform => 1.0,
                        KlWeighting::Discounted => spec.gamma.powi((horizon - t) as i32),
                    };
                    kl += w * c * policy.kl_grad(a, x_t, t, spec.lambda * w * c, &mut grad)?;
                }
            }
        }
        Ok((nll, kl, grad))
    });
    let (mut nll, mut kl) = (0.0, 0.0);
    let mut grad = vec![0.0; np];
    for part in parts {
        let (a, b, g) = part?;
        nll += a;
        kl += b;
        for (x, y) in grad.iter_mut().zip(&g) {
            *x += y;
        }
    }
    let loss = if anchor.is_some() { nll + spec.lambda * kl } else { nll };
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("distillation loss or gradient".into()));
    }
    Ok(LossValue {
        loss,
        nll,
        kl,
        grad,
    })
}

/// Negative mean trajectory log-likelihood and its gradient.
pub fn dav_loss<P: DiffusionPolicy>(
    policy: &P,
    batch: &[Trajectory<P::State>],
    exec: Exec,
) -> Result<(f64, Vec<f64>)> {
    let v = distill_loss(policy, batch, &LossSpec::plain(), exec)?;
    Ok((v.loss, v.grad))
}

/// [`dav_loss`] plus `λ` times the summed per-step KL to `anchor`.
pub fn dav_kl_loss<P: DiffusionPolicy>(
    policy: &P,
    anchor: &P,
    batch: &[Trajectory<P::State>],
    lambda: f64,
    exec: Exec,
) -> Result<(f64, Vec<f64>)> {
    let spec = LossSpec {
        anchor: Some(anchor),
        lambda,
        ..LossSpec::plain()
    };
    let v = distill_loss(policy, batch, &spec, exec)?;
    Ok((v.loss, v.grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStepReport {
    /// Loss before each optimizer step, then after the last one.
    pub losses: Vec<f64>,
}

impl MStepReport {
    pub fn before(&self) -> f64 {
        self.losses[0]
    }

    pub fn after(&self) -> f64 {
        *self.losses.last().expect("at least one loss")
    }

    pub fn strictly_decreasing(&self) -> bool {
        self.losses.windows(2).all(|w| w[1] < w[0])
    }
}

/// Optimizer state carried across epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    pub cfg: MStepConfig,
    pub adam: Adam,
}

impl MStep {
    pub fn new(cfg: MStepConfig, num_params: usize) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(num_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
        Ok(Self { cfg, adam })
    }

    /// Runs `cfg.steps` optimizer steps on `batch`. Every trajectory must
    /// carry the tag `snapshot` of the parameters it was generated from.
    #[allow(clippy::too_many_arguments)]
    pub fn update<P: DiffusionPolicy>(
        &mut self,
        policy: &mut P,
        anchor: &P,
        batch: &[Trajectory<P::State>],
        weights: Option<&[f64]>,
        snapshot: u64,
        gamma: f64,
        exec: Exec,
    ) -> Result<MStepReport> {
        if let Some(tr) = batch.iter().find(|tr| tr.snapshot != snapshot) {
            return Err(Error::Data(format!(
                "trajectory from snapshot {} in the M-step of snapshot {snapshot}",
                tr.snapshot
            )));
        }
        let spec = LossSpec {
            anchor: Some(anchor),
            lambda: self.cfg.lambda,
            kl_weighting: self.cfg.kl_weighting,
            gamma,
            weights,
        };
        let mut params = policy.params();
        let mut losses = Vec::with_capacity(self.cfg.steps + 1);
        for _ in 0..self.cfg.steps {
            let v = distill_loss(policy, batch, &spec, exec)?;
            losses.push(v.loss);
            self.adam.update(&mut params, &v.grad)?;
            if params.iter().any(|p| !p.is_finite()) {
                return Err(Error::NonFinite("parameters after optimizer step".into()));
            }
            policy.set_params(&params)?;
        }
        losses.push(distill_loss(policy, batch, &spec, exec)?.loss);
        Ok(MStepReport { losses })
    }
}
