//! Masked (absorbing-state) discrete diffusion over fixed-length sequences.
//!
//! Forward: each position is independently replaced by the mask with
//! probability `1 − ᾱ_t`. Reverse (SUBS): unmasked positions carry over;
//! a masked position stays masked with probability `(1−ᾱ_s)/(1−ᾱ_t)` and
//! otherwise emits a token drawn from the denoiser's `x̂_0` distribution.

mod denoiser;
mod pretrain;

pub use denoiser::{DiscreteDenoiser, SeqSpace};
pub use pretrain::{masked_loss, pretrain_discrete, pretrain_on_distribution, PretrainConfig, PretrainReport, SeqDistribution};

use crate::error::{domain, Error, Result};
use crate::numkit::reduce::{lse_unchecked, softmax_unchecked};
use crate::numkit::{sample_categorical, RngStream};
use crate::policy::DiffusionPolicy;
use crate::sched::DiscreteSchedule;

/// Corrupt a clean sequence to timestep `t`.
pub fn forward_mask_sample(
    space: SeqSpace,
    schedule: &DiscreteSchedule,
    x0: &[u8],
    t: usize,
    rng: &mut RngStream,
) -> Result<Vec<u8>> {
    space.check(x0)?;
    if x0.iter().any(|x| space.is_masked(*x)) {
        return domain("forward corruption needs a fully unmasked sequence");
    }
    if t > schedule.steps() {
        return Err(Error::Domain(format!(
            "timestep {t} outside 0..={}",
            schedule.steps()
        )));
    }
    let keep = schedule.alpha_bar(t);
    Ok(x0
        .iter()
        .map(|&x| if rng.uniform() < keep { x } else { space.mask() })
        .collect())
}

/// Probability of staying masked and of unmasking when stepping `t → s`.
pub fn subs_coefficients(schedule: &DiscreteSchedule, s: usize, t: usize) -> Result<(f64, f64)> {
    if s >= t {
        return Err(Error::Domain(format!("reverse step needs s < t, got s={s}, t={t}")));
    }
    if t > schedule.steps() {
        return Err(Error::Domain(format!(
            "timestep {t} outside 1..={}",
            schedule.steps()
        )));
    }
    let (ab_s, ab_t) = (schedule.alpha_bar(s), schedule.alpha_bar(t));
    let denom = 1.0 - ab_t;
    Ok(((1.0 - ab_s) / denom, (ab_s - ab_t) / denom))
}

/// SUBS distribution over `K` tokens followed by the mask, for one masked
/// position with clean-token distribution `x0hat`.
pub fn subs_probs(x0hat: &[f64], stay: f64, emit: f64) -> Vec<f64> {
    let mut p: Vec<f64> = x0hat.iter().map(|q| emit * q).collect();
    p.push(stay);
    p
}

/// The masked-diffusion reverse policy with a trainable denoiser.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePolicy {
    pub schedule: DiscreteSchedule,
    pub denoiser: DiscreteDenoiser,
}

impl DiscretePolicy {
    pub fn new(denoiser: DiscreteDenoiser) -> Result<Self> {
        Ok(Self {
            schedule: DiscreteSchedule::new(denoiser.steps())?,
            denoiser,
        })
    }

    pub fn space(&self) -> SeqSpace {
        self.denoiser.space()
    }

    fn masked_positions(&self, x: &[u8]) -> Vec<usize> {
        let space = self.space();
        (0..x.len()).filter(|&l| space.is_masked(x[l])).collect()
    }

    /// Per-position log-probabilities over `K` tokens and the mask for the
    /// step `t → s`; rows of unmasked positions are `None` (carry-over).
    pub fn step_log_probs(&self, x_t: &[u8], s: usize, t: usize) -> Result<Vec<Option<Vec<f64>>>> {
        let space = self.space();
        space.check(x_t)?;
        let (stay, emit) = subs_coefficients(&self.schedule, s, t)?;
        let masked = self.masked_positions(x_t);
        let mut rows = vec![None; space.len];
        if masked.is_empty() {
            return Ok(rows);
        }
        let k = space.vocab;
        let z = self.denoiser.logits(x_t, t)?;
        let (log_stay, log_emit) = (stay.ln(), emit.ln());
        for l in masked {
            let zl = &z[l * k..(l + 1) * k];
            let norm = lse_unchecked(zl);
            let mut row: Vec<f64> = zl.iter().map(|v| log_emit + v - norm).collect();
            row.push(log_stay);
            rows[l] = Some(row);
        }
        Ok(rows)
    }

    /// Same as [`Self::step_log_probs`] in probability space, built from the
    /// SUBS mixture directly.
    pub fn step_probs(&self, x_t: &[u8], s: usize, t: usize) -> Result<Vec<Option<Vec<f64>>>> {
        let space = self.space();
        space.check(x_t)?;
        let (stay, emit) = subs_coefficients(&self.schedule, s, t)?;
        let masked = self.masked_positions(x_t);
        let mut rows = vec![None; space.len];
        if masked.is_empty() {
            return Ok(rows);
        }
        let k = space.vocab;
        let z = self.denoiser.logits(x_t, t)?;
        for l in masked {
            rows[l] = Some(subs_probs(&softmax_unchecked(&z[l * k..(l + 1) * k]), stay, emit));
        }
        Ok(rows)
    }

    /// One reverse step `t → s`, one uniform per masked position.
    pub fn reverse_step(&self, x_t: &[u8], s: usize, t: usize, rng: &mut RngStream) -> Result<Vec<u8>> {
        let rows = self.step_probs(x_t, s, t)?;
        let mut out = x_t.to_vec();
        for (l, row) in rows.iter().enumerate() {
            if let Some(p) = row {
                out[l] = sample_categorical(p, rng)? as u8;
            }
        }
        Ok(out)
    }

    /// `log p(x_s | x_t)`; transitions outside the SUBS support are
    /// reported as [`Error::Unreachable`].
    pub fn transition_log_prob(&self, x_t: &[u8], x_s: &[u8], s: usize, t: usize) -> Result<f64> {
        self.space().check(x_s)?;
        let rows = self.step_log_probs(x_t, s, t)?;
        let mut total = 0.0;
        for (l, row) in rows.iter().enumerate() {
            match row {
                None if x_s[l] != x_t[l] => {
                    return Err(Error::Unreachable(format!(
                        "position {l} changed from unmasked token {} to {}",
                        x_t[l], x_s[l]
                    )))
                }
                None => {}
                Some(lp) => {
                    let v = lp[x_s[l] as usize];
                    if v == f64::NEG_INFINITY {
                        return Err(Error::Unreachable(format!(
                            "position {l} cannot take {} at step {t} -> {s}",
                            x_s[l]
                        )));
                    }
                    total += v;
                }
            }
        }
        Ok(total)
    }

    /// All successors of `x_t` under the step `t → t−1` with positive
    /// probability, with their log-probabilities.
    pub fn successors(&self, x_t: &[u8], t: usize) -> Result<Vec<(Vec<u8>, f64)>> {
        let rows = self.step_log_probs(x_t, t - 1, t)?;
        let mut out = vec![(x_t.to_vec(), 0.0)];
        for (l, row) in rows.iter().enumerate() {
            let Some(lp) = row else { continue };
            let mut next = Vec::with_capacity(out.len() * lp.len());
            for (x, base) in &out {
                for (tok, v) in lp.iter().enumerate() {
                    if *v == f64::NEG_INFINITY {
                        continue;
                    }
                    let mut y = x.clone();
                    y[l] = tok as u8;
                    next.push((y, base + v));
                }
            }
            out = next;
        }
        Ok(out)
    }

    /// Adds `scale · ∇_θ log p(x_s | x_t)` and returns the log-probability.
    fn transition_log_prob_grad(
        &self,
        x_t: &[u8],
        x_s: &[u8],
        t: usize,
        scale: f64,
        grads: &mut [f64],
    ) -> Result<f64> {
        let lp = self.transition_log_prob(x_t, x_s, t - 1, t)?;
        let space = self.space();
        let k = space.vocab;
        // only emitted tokens depend on θ: ∂ log softmax(z)_y / ∂z = e_y − softmax(z)
        let emitted: Vec<usize> = (0..space.len)
            .filter(|&l| space.is_masked(x_t[l]) && !space.is_masked(x_s[l]))
            .collect();
        if emitted.is_empty() || scale == 0.0 {
            return Ok(lp);
        }
        let z = self.denoiser.logits(x_t, t)?;
        let mut up = vec![0.0; space.len * k];
        for l in emitted {
            let p = softmax_unchecked(&z[l * k..(l + 1) * k]);
            for j in 0..k {
                up[l * k + j] = -p[j];
            }
            up[l * k + x_s[l] as usize] += 1.0;
        }
        self.denoiser.logits_backward(x_t, t, &up, scale, grads)?;
        Ok(lp)
    }
}

impl DiffusionPolicy for DiscretePolicy {
    type State = Vec<u8>;

    fn horizon(&self) -> usize {
        self.schedule.steps()
    }

    fn num_params(&self) -> usize {
        self.denoiser.num_params()
    }

    fn params(&self) -> Vec<f64> {
        self.denoiser.params()
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        self.denoiser.set_params(flat)
    }

    fn initial_state(&self, _rng: &mut RngStream) -> Vec<u8> {
        self.space().all_masked()
    }

    fn sample_step(&self, x_t: &Vec<u8>, t: usize, rng: &mut RngStream) -> Result<Vec<u8>> {
        if t == 0 {
            return domain("reverse step from t = 0");
        }
        self.reverse_step(x_t, t - 1, t, rng)
    }

    fn log_prob(&self, x_t: &Vec<u8>, x_prev: &Vec<u8>, t: usize) -> Result<f64> {
        if t == 0 {
            return domain("reverse step from t = 0");
        }
        self.transition_log_prob(x_t, x_prev, t - 1, t)
    }

    fn log_prob_grad(
        &self,
        x_t: &Vec<u8>,
        x_prev: &Vec<u8>,
        t: usize,
        scale: f64,
        grads: &mut [f64],
    ) -> Result<f64> {
        if t == 0 {
            return domain("reverse step from t = 0");
        }
        self.transition_log_prob_grad(x_t, x_prev, t, scale, grads)
    }

    fn kl_grad(
        &self,
        anchor: &Self,
        x_t: &Vec<u8>,
        t: usize,
        scale: f64,
        grads: &mut [f64],
    ) -> Result<f64> {
        // the mask probability is shared, so KL = emit · Σ_ℓ KL(π_θ,ℓ ‖ π_0,ℓ)
        let (_, emit) = subs_coefficients(&self.schedule, t - 1, t)?;
        let space = self.space();
        let masked = self.masked_positions(x_t);
        if masked.is_empty() {
            return Ok(0.0);
        }
        let k = space.vocab;
        let z = self.denoiser.logits(x_t, t)?;
        let z0 = anchor.denoiser.logits(x_t, t)?;
        let mut up = vec![0.0; space.len * k];
        let mut total = 0.0;
        for l in masked {
            let zl = &z[l * k..(l + 1) * k];
            let z0l = &z0[l * k..(l + 1) * k];
            let (n, n0) = (lse_unchecked(zl), lse_unchecked(z0l));
            let lq: Vec<f64> = zl.iter().map(|v| v - n).collect();
            let lq0: Vec<f64> = z0l.iter().map(|v| v - n0).collect();
            let kl: f64 = (0..k).map(|j| lq[j].exp() * (lq[j] - lq0[j])).sum();
            total += emit * kl;
            for j in 0..k {
                up[l * k + j] = emit * lq[j].exp() * (lq[j] - lq0[j] - kl);
            }
        }
        if scale != 0.0 {
            self.denoiser.logits_backward(x_t, t, &up, scale, grads)?;
        }
        Ok(total)
    }
}
