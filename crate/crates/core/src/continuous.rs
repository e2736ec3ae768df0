//! Gaussian diffusion over `R^d` with a Gaussian-mixture data distribution.
//!
//! The pretrained denoiser is analytic: the posterior mean `E[x_0 | x_t]`
//! of the mixture is available in closed form together with its Jacobian.
//! The fine-tunable policy adds a residual network to the analytic DDPM
//! posterior mean; with the residual's final layer zeroed the policy is
//! exactly the pretrained one.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::numkit::linalg::{check_len, sq_dist};
use crate::numkit::reduce::lse_unchecked;
use crate::numkit::{sample_categorical, Activation, Mat, Mlp, RngStream};
use crate::policy::DiffusionPolicy;
use crate::sched::ContinuousSchedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub stds: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, stds: Vec<f64>) -> Result<Self> {
        let m = Self {
            weights,
            means,
            stds,
        };
        m.validate()?;
        Ok(m)
    }

    /// `n` equal-weight components on a circle of `radius` in the first two
    /// coordinates.
    pub fn ring(n: usize, radius: f64, std: f64, dim: usize) -> Result<Self> {
        if dim < 2 {
            return config("ring mixture needs dim >= 2");
        }
        let means = (0..n)
            .map(|k| {
                let a = std::f64::consts::TAU * k as f64 / n as f64 + std::f64::consts::FRAC_PI_4;
                let mut m = vec![0.0; dim];
                m[0] = radius * a.cos();
                m[1] = radius * a.sin();
                m
            })
            .collect();
        Self::new(vec![1.0 / n as f64; n], means, vec![std; n])
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.weights.len();
        if k == 0 || self.means.len() != k || self.stds.len() != k {
            return config("mixture weights, means and stds must be non-empty and equal length");
        }
        let d = self.means[0].len();
        if d == 0 || self.means.iter().any(|m| m.len() != d) {
            return config("mixture means must share a positive dimension");
        }
        if self.stds.iter().any(|s| !(*s > 0.0)) || self.weights.iter().any(|w| !(*w >= 0.0)) {
            return config("mixture stds must be positive and weights non-negative");
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return config(format!("mixture weights sum to {total}"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, mi) in out.iter_mut().zip(m) {
                *o += w * mi;
            }
        }
        out
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let k = sample_categorical(&self.weights, rng).expect("validated weights");
        self.means[k]
            .iter()
            .map(|m| m + self.stds[k] * rng.normal())
            .collect()
    }

    /// Component responsibilities and conditional means given
    /// `x_t ~ N(√ᾱ x_0, (1−ᾱ) I)`.
    fn posterior_parts(&self, xt: &[f64], ab: f64) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
        let d = xt.len() as f64;
        let sab = ab.sqrt();
        let mut logits = Vec::with_capacity(self.components());
        let mut cond = Vec::with_capacity(self.components());
        let mut vars = Vec::with_capacity(self.components());
        for k in 0..self.components() {
            let s2 = self.stds[k] * self.stds[k];
            let v = ab * s2 + 1.0 - ab;
            let centre: Vec<f64> = self.means[k].iter().map(|m| sab * m).collect();
            logits.push(self.weights[k].ln() - 0.5 * d * v.ln() - 0.5 * sq_dist(xt, &centre) / v);
            cond.push(
                xt.iter()
                    .zip(&self.means[k])
                    .map(|(x, m)| (sab * s2 * x + (1.0 - ab) * m) / v)
                    .collect(),
            );
            vars.push(v);
        }
        let z = lse_unchecked(&logits);
        let resp = logits.iter().map(|l| (l - z).exp()).collect();
        (resp, cond, vars)
    }

    /// Posterior mean `E[x_0 | x_t]` at noise level `ab = ᾱ_t`; `ab = 1`
    /// returns `x_t`.
    pub fn posterior_mean(&self, xt: &[f64], ab: f64) -> Vec<f64> {
        if ab >= 1.0 {
            return xt.to_vec();
        }
        let (resp, cond, _) = self.posterior_parts(xt, ab);
        let mut out = vec![0.0; xt.len()];
        for (r, m) in resp.iter().zip(&cond) {
            for (o, mi) in out.iter_mut().zip(m) {
                *o += r * mi;
            }
        }
        out
    }

    /// Posterior mean and its Jacobian `∂ x̂_0 / ∂ x_t` (d × d).
    ///
    /// `x̂_0 = Σ ρ_k m_k` with `∂m_k/∂x = c_k I` and
    /// `∂ρ_k/∂x = ρ_k (g_k − Σ_j ρ_j g_j)`, `g_k = −(x − √ᾱ μ_k)/v_k`.
    pub fn posterior_mean_jacobian(&self, xt: &[f64], ab: f64) -> (Vec<f64>, Mat) {
        let d = xt.len();
        if ab >= 1.0 {
            return (xt.to_vec(), Mat::identity(d));
        }
        let sab = ab.sqrt();
        let (resp, cond, vars) = self.posterior_parts(xt, ab);
        let scores: Vec<Vec<f64>> = (0..self.components())
            .map(|k| {
                xt.iter()
                    .zip(&self.means[k])
                    .map(|(x, m)| -(x - sab * m) / vars[k])
                    .collect()
            })
            .collect();
        let mut gbar = vec![0.0; d];
        let mut mean = vec![0.0; d];
        let mut diag = 0.0;
        for k in 0..self.components() {
            let s2 = self.stds[k] * self.stds[k];
            diag += resp[k] * sab * s2 / vars[k];
            for i in 0..d {
                gbar[i] += resp[k] * scores[k][i];
                mean[i] += resp[k] * cond[k][i];
            }
        }
        let mut jac = Mat::identity(d);
        jac.as_mut_slice().iter_mut().for_each(|v| *v *= diag);
        for k in 0..self.components() {
            let centred: Vec<f64> = scores[k].iter().zip(&gbar).map(|(g, b)| g - b).collect();
            jac.add_outer(&cond[k], &centred, resp[k]).expect("d × d");
        }
        (mean, jac)
    }
}

/// `p_θ(x_{t−1} | x_t) = N(μ_analytic(x_t, t) + f_θ(x_t, t/T), σ_t² I)`.
#[derive(Debug, Clone)]
pub struct ContinuousPolicy {
    pub schedule: ContinuousSchedule,
    pub mixture: GaussianMixture,
    pub residual: Mlp,
    /// When set the residual is ignored and the policy is the pretrained one.
    pub frozen: bool,
}

impl ContinuousPolicy {
    pub fn new(
        schedule: ContinuousSchedule,
        mixture: GaussianMixture,
        hidden: &[usize],
        activation: Activation,
        rng: &mut RngStream,
    ) -> Result<Self> {
        let d = mixture.dim();
        let mut widths = vec![d + 1];
        widths.extend_from_slice(hidden);
        widths.push(d);
        Ok(Self {
            schedule,
            mixture,
            residual: Mlp::zero_output(&widths, activation, 1.0, rng)?,
            frozen: false,
        })
    }

    pub fn dim(&self) -> usize {
        self.mixture.dim()
    }

    pub fn frozen_copy(&self) -> Self {
        Self {
            frozen: true,
            ..self.clone()
        }
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.schedule.steps() {
            return Err(Error::Domain(format!(
                "timestep {t} outside 1..={}",
                self.schedule.steps()
            )));
        }
        Ok(())
    }

    /// `√ᾱ_t x_0 + √(1−ᾱ_t) ε`
    pub fn forward_marginal_sample(
        &self,
        x0: &[f64],
        t: usize,
        rng: &mut RngStream,
    ) -> Result<Vec<f64>> {
        self.check_t(t)?;
        let ab = self.schedule.alpha_bar(t);
        Ok(x0
            .iter()
            .map(|x| ab.sqrt() * x + (1.0 - ab).sqrt() * rng.normal())
            .collect())
    }

    /// Analytic posterior mean; `t = 0` returns `x_t`.
    pub fn analytic_x0hat(&self, xt: &[f64], t: usize) -> Vec<f64> {
        self.mixture.posterior_mean(xt, self.schedule.alpha_bar(t))
    }

    /// Coefficients `(a, b)` of the DDPM posterior mean `a x̂_0 + b x_t`.
    pub fn posterior_coefs(&self, t: usize) -> (f64, f64) {
        let s = &self.schedule;
        let ab_prev = s.alpha_bar(t - 1);
        let denom = 1.0 - s.alpha_bar(t);
        (
            ab_prev.sqrt() * s.beta(t) / denom,
            s.alpha(t).sqrt() * (1.0 - ab_prev) / denom,
        )
    }

    pub fn analytic_mean(&self, xt: &[f64], t: usize) -> Vec<f64> {
        let (a, b) = self.posterior_coefs(t);
        self.analytic_x0hat(xt, t)
            .iter()
            .zip(xt)
            .map(|(x0, x)| a * x0 + b * x)
            .collect()
    }

    fn residual_input(&self, xt: &[f64], t: usize) -> Vec<f64> {
        let mut inp = xt.to_vec();
        inp.push(t as f64 / self.schedule.steps() as f64);
        inp
    }

    pub fn residual_out(&self, xt: &[f64], t: usize) -> Result<Vec<f64>> {
        if self.frozen {
            return Ok(vec![0.0; xt.len()]);
        }
        self.residual.forward(&self.residual_input(xt, t))
    }

    /// `μ_θ(x_t, t)`
    pub fn policy_mean(&self, xt: &[f64], t: usize) -> Result<Vec<f64>> {
        self.check_t(t)?;
        check_len(self.dim(), xt.len())?;
        let mut mu = self.analytic_mean(xt, t);
        for (m, r) in mu.iter_mut().zip(self.residual_out(xt, t)?) {
            *m += r;
        }
        Ok(mu)
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        self.schedule.sigma2(t)
    }

    /// Posterior mean implied by the policy mean, `x̂_0 + f_θ / a_t`, and its
    /// Jacobian in `x_t`. Equals the analytic denoiser while the residual is
    /// zero or the policy is frozen.
    pub fn x0hat_with_jacobian(&self, xt: &[f64], t: usize) -> Result<(Vec<f64>, Mat)> {
        let (mut x0, mut jac) = self
            .mixture
            .posterior_mean_jacobian(xt, self.schedule.alpha_bar(t));
        if t > 0 && !self.frozen {
            let (a, _) = self.posterior_coefs(t);
            let inp = self.residual_input(xt, t);
            let f = self.residual.forward(&inp)?;
            let d = xt.len();
            let mut sink = vec![0.0; self.residual.num_params()];
            for i in 0..d {
                x0[i] += f[i] / a;
                let mut up = vec![0.0; d];
                up[i] = 1.0;
                let gx = self.residual.backward_into(&inp, &up, 0.0, &mut sink)?;
                for j in 0..d {
                    jac[(i, j)] += gx[j] / a;
                }
            }
        }
        Ok((x0, jac))
    }

    pub fn x0hat(&self, xt: &[f64], t: usize) -> Result<Vec<f64>> {
        let mut x0 = self.analytic_x0hat(xt, t);
        if t > 0 && !self.frozen {
            let (a, _) = self.posterior_coefs(t);
            let f = self.residual.forward(&self.residual_input(xt, t))?;
            for (x, r) in x0.iter_mut().zip(&f) {
                *x += r / a;
            }
        }
        Ok(x0)
    }

    pub fn gaussian_log_density(x: &[f64], mean: &[f64], var: f64) -> f64 {
        let d = x.len() as f64;
        -0.5 * d * (std::f64::consts::TAU * var).ln() - 0.5 * sq_dist(x, mean) / var
    }
}

impl DiffusionPolicy for ContinuousPolicy {
    type State = Vec<f64>;

    fn horizon(&self) -> usize {
        self.schedule.steps()
    }

    fn num_params(&self) -> usize {
        self.residual.num_params()
    }

    fn params(&self) -> Vec<f64> {
        self.residual.params()
    }

    fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        self.residual.set_params(flat)
    }

    fn initial_state(&self, rng: &mut RngStream) -> Vec<f64> {
        rng.normal_vec(self.dim())
    }

    fn sample_step(&self, x_t: &Vec<f64>, t: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
        let mu = self.policy_mean(x_t, t)?;
        let sd = self.sigma2(t).sqrt();
        Ok(mu.iter().map(|m| m + sd * rng.normal()).collect())
    }

    fn log_prob(&self, x_t: &Vec<f64>, x_prev: &Vec<f64>, t: usize) -> Result<f64> {
        let var = self.sigma2(t);
        if !(var > 0.0) {
            return config(format!("non-positive variance at t={t}"));
        }
        let mu = self.policy_mean(x_t, t)?;
        Ok(Self::gaussian_log_density(x_prev, &mu, var))
    }

    fn log_prob_grad(
        &self,
        x_t: &Vec<f64>,
        x_prev: &Vec<f64>,
        t: usize,
        scale: f64,
        grads: &mut [f64],
    ) -> Result<f64> {
        let var = self.sigma2(t);
        let mu = self.policy_mean(x_t, t)?;
        let lp = Self::gaussian_log_density(x_prev, &mu, var);
        if !self.frozen {
            // ∂ log p / ∂μ = (x_prev − μ) / σ²
            let up: Vec<f64> = x_prev.iter().zip(&mu).map(|(x, m)| (x - m) / var).collect();
            self.residual
                .backward_into(&self.residual_input(x_t, t), &up, scale, grads)?;
        }
        Ok(lp)
    }

    fn kl_grad(
        &self,
        anchor: &Self,
        x_t: &Vec<f64>,
        t: usize,
        scale: f64,
        grads: &mut [f64],
    ) -> Result<f64> {
        // equal variances: ‖μ_θ − μ_0‖² / 2σ²
        let var = self.sigma2(t);
        let mu = self.policy_mean(x_t, t)?;
        let mu0 = anchor.policy_mean(x_t, t)?;
        let diff: Vec<f64> = mu.iter().zip(&mu0).map(|(a, b)| (a - b) / var).collect();
        let kl = 0.5 * sq_dist(&mu, &mu0) / var;
        if !self.frozen && scale != 0.0 {
            self.residual
                .backward_into(&self.residual_input(x_t, t), &diff, scale, grads)?;
        }
        Ok(kl)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::tol;
    use crate::par::Exec;
    use crate::policy::rollout;
    use approx::assert_abs_diff_eq;

    fn policy(mixture: GaussianMixture, steps: usize, seed: u64) -> ContinuousPolicy {
        let (lo, hi) = ContinuousSchedule::rescaled_default_range(steps);
        let sched = ContinuousSchedule::linear(steps, lo, hi).unwrap();
        let mut rng = RngStream::new(seed, 0);
        ContinuousPolicy::new(sched, mixture, &[16, 16], Activation::Tanh, &mut rng).unwrap()
    }

    fn randomize(p: &mut ContinuousPolicy, seed: u64) {
        let mut rng = RngStream::new(seed, 99);
        let w: Vec<f64> = (0..p.num_params()).map(|_| 0.3 * rng.normal()).collect();
        p.set_params(&w).unwrap();
    }

    fn single(mu: Vec<f64>, s: f64) -> GaussianMixture {
        GaussianMixture::new(vec![1.0], vec![mu], vec![s]).unwrap()
    }

    #[test]
    fn x0hat_terminal_and_symmetry() {
        let m = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![2.0, 1.0], vec![-2.0, -1.0]],
            vec![0.5, 0.5],
        )
        .unwrap();
        assert_eq!(m.posterior_mean(&[0.3, 0.4], 1.0), vec![0.3, 0.4]);
        let z = m.posterior_mean(&[0.0, 0.0], 0.4);
        assert_abs_diff_eq!(z[0], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(z[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn x0hat_single_component_closed_form() {
        let m = single(vec![0.0, 0.0], 1.0);
        let x = m.posterior_mean(&[2.0, 0.0], 0.5);
        assert_abs_diff_eq!(x[0], 0.5f64.sqrt() * 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(x[1], 0.0, epsilon = 1e-15);
    }

    #[test]
    fn x0hat_single_component_monte_carlo_oracle() {
        // sample (x0, xt) pairs, keep xt within a small box around (2, 0)
        let m = single(vec![0.0, 0.0], 1.0);
        let ab: f64 = 0.5;
        let mut rng = RngStream::new(17, 0);
        let (mut sum, mut n) = (0.0, 0usize);
        for _ in 0..2_000_000 {
            let x0 = m.sample(&mut rng);
            let xt: Vec<f64> = x0
                .iter()
                .map(|x| ab.sqrt() * x + (1.0 - ab).sqrt() * rng.normal())
                .collect();
            if (xt[0] - 2.0).abs() < 0.05 && xt[1].abs() < 0.05 {
                sum += x0[0];
                n += 1;
            }
        }
        let est = sum / n as f64;
        // conditional sd of x0 given xt is sqrt(0.5)
        let se = 0.5f64.sqrt() / (n as f64).sqrt();
        assert!((est - std::f64::consts::SQRT_2).abs() < 4.0 * se + 0.01, "est {est} n {n}");
    }

    #[test]
    fn x0hat_prior_limit() {
        let m = GaussianMixture::ring(4, 3.0, 0.4, 2).unwrap();
        let x = m.posterior_mean(&[0.7, -1.2], 1e-8);
        let mean = m.mean();
        assert!(sq_dist(&x, &mean).sqrt() < 1e-3);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let m = GaussianMixture::new(
            vec![0.2, 0.5, 0.3],
            vec![vec![1.0, 2.0], vec![-1.5, 0.0], vec![0.5, -2.0]],
            vec![0.4, 0.8, 0.6],
        )
        .unwrap();
        let mut rng = RngStream::new(3, 0);
        for _ in 0..20 {
            let x = rng.normal_vec(2);
            let ab = rng.uniform() * 0.98 + 0.01;
            let (_, jac) = m.posterior_mean_jacobian(&x, ab);
            for j in 0..2 {
                let mut xp = x.clone();
                xp[j] += tol::FD_STEP;
                let mut xm = x.clone();
                xm[j] -= tol::FD_STEP;
                let fp = m.posterior_mean(&xp, ab);
                let fm = m.posterior_mean(&xm, ab);
                for i in 0..2 {
                    let fd = (fp[i] - fm[i]) / (2.0 * tol::FD_STEP);
                    assert!((fd - jac[(i, j)]).abs() < 1e-6 * (1.0 + fd.abs()));
                }
            }
        }
    }

    #[test]
    fn zero_residual_equals_analytic_and_frozen_ignores_residual() {
        let mut p = policy(GaussianMixture::ring(4, 2.0, 0.5, 2).unwrap(), 10, 1);
        let x = [0.3, -0.8];
        assert_eq!(p.policy_mean(&x, 4).unwrap(), p.analytic_mean(&x, 4));
        randomize(&mut p, 5);
        assert_ne!(p.policy_mean(&x, 4).unwrap(), p.analytic_mean(&x, 4));
        let f = p.frozen_copy();
        assert_eq!(f.policy_mean(&x, 4).unwrap(), f.analytic_mean(&x, 4));
    }

    #[test]
    fn mean_at_first_step_by_substitution() {
        // ᾱ_0 = 1: μ = β_1 x̂0 / (1−ᾱ_1) + 0 · x_1 = x̂0 since β_1 = 1 − ᾱ_1
        let p = policy(GaussianMixture::ring(3, 2.0, 0.5, 2).unwrap(), 10, 1);
        let x = [0.9, 0.1];
        let mu = p.policy_mean(&x, 1).unwrap();
        let x0 = p.analytic_x0hat(&x, 1);
        for (a, b) in mu.iter().zip(&x0) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn log_prob_peak_and_offset() {
        let p = policy(single(vec![0.0], 1.0), 10, 1);
        let t = 3;
        let xt = vec![0.4];
        let mu = p.policy_mean(&xt, t).unwrap();
        let var = p.sigma2(t);
        let peak = p.log_prob(&xt, &mu, t).unwrap();
        assert_abs_diff_eq!(peak, -0.5 * (std::f64::consts::TAU * var).ln(), epsilon = 1e-12);
        let off = vec![mu[0] + var.sqrt()];
        assert_abs_diff_eq!(p.log_prob(&xt, &off, t).unwrap(), peak - 0.5, epsilon = 1e-12);
    }

    #[test]
    fn log_prob_integrates_to_one_by_gauss_hermite() {
        // probabilists' Hermite nodes would need a table; use physicists'
        // 20-point rule on the 1-d slice through the mean.
        let (nodes, weights) = gauss_hermite_20();
        let p = policy(GaussianMixture::ring(4, 2.0, 0.5, 2).unwrap(), 10, 2);
        for t in [1, 4, 10] {
            let xt = vec![0.2, -0.1];
            let mu = p.policy_mean(&xt, t).unwrap();
            let sd = p.sigma2(t).sqrt();
            // ∫ p(x_prev) dx_0 over coordinate 0 with coordinate 1 at its mean,
            // times the 1-d normalizer of coordinate 1
            let mut total = 0.0;
            for (z, w) in nodes.iter().zip(&weights) {
                let x = mu[0] + std::f64::consts::SQRT_2 * sd * z;
                let lp = p.log_prob(&xt, &vec![x, mu[1]], t).unwrap();
                total += w * (lp + z * z).exp() * std::f64::consts::SQRT_2 * sd;
            }
            let slice_norm = (std::f64::consts::TAU * sd * sd).sqrt();
            assert!((total * slice_norm - 1.0).abs() < 1e-6, "t={t}: {total}");
        }
    }

    fn gauss_hermite_20() -> (Vec<f64>, Vec<f64>) {
        // Golub-Welsch on the Jacobi matrix of physicists' Hermite polynomials
        let n = 20;
        let mut a = vec![vec![0.0; n]; n];
        for i in 1..n {
            let b = (i as f64 / 2.0).sqrt();
            a[i][i - 1] = b;
            a[i - 1][i] = b;
        }
        let (vals, vecs) = jacobi_eigen(a);
        let w = vecs
            .iter()
            .map(|v| std::f64::consts::PI.sqrt() * v[0] * v[0])
            .collect();
        (vals, w)
    }

    fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
        let n = a.len();
        let mut v = vec![vec![0.0; n]; n];
        for (i, row) in v.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).filter(move |j| *j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i][j] * a[i][j])
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[p][q].abs() < 1e-300 {
                        continue;
                    }
                    let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                    let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                    let t = if theta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (t * t + 1.0).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k][p];
                        let akq = a[k][q];
                        a[k][p] = c * akp - s * akq;
                        a[k][q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p][k];
                        let aqk = a[q][k];
                        a[p][k] = c * apk - s * aqk;
                        a[q][k] = s * apk + c * aqk;
                    }
                    for row in v.iter_mut() {
                        let vp = row[p];
                        let vq = row[q];
                        row[p] = c * vp - s * vq;
                        row[q] = s * vp + c * vq;
                    }
                }
            }
        }
        let vals = (0..n).map(|i| a[i][i]).collect();
        // eigenvectors are columns of v
        let vecs = (0..n).map(|j| (0..n).map(|i| v[i][j]).collect()).collect();
        (vals, vecs)
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut p = policy(GaussianMixture::ring(4, 2.0, 0.5, 2).unwrap(), 10, seed);
            randomize(&mut p, seed);
            let mut rng = RngStream::new(seed, 7);
            let xt = rng.normal_vec(2);
            let xp = rng.normal_vec(2);
            let t = 1 + rng.below(10);
            let mut g = vec![0.0; p.num_params()];
            p.log_prob_grad(&xt, &xp, t, 1.0, &mut g).unwrap();
            let p0 = p.params();
            let mut probe = p.clone();
            let fd: Vec<f64> = (0..p0.len())
                .map(|i| {
                    let mut q = p0.clone();
                    q[i] += tol::FD_STEP;
                    probe.set_params(&q).unwrap();
                    let a = probe.log_prob(&xt, &xp, t).unwrap();
                    q[i] -= 2.0 * tol::FD_STEP;
                    probe.set_params(&q).unwrap();
                    let b = probe.log_prob(&xt, &xp, t).unwrap();
                    (a - b) / (2.0 * tol::FD_STEP)
                })
                .collect();
            assert!(tol::grad_rel_error(&g, &fd) < tol::GRAD_REL, "seed {seed}");
        }
    }

    #[test]
    fn forward_marginal_moments() {
        let p = policy(single(vec![0.0], 1.0), 50, 0);
        let mut rng = RngStream::new(4, 0);
        let n = 100_000;
        for t in [1, 10, 50] {
            let ab = p.schedule.alpha_bar(t);
            let x0 = [1.5];
            let xs: Vec<f64> = (0..n)
                .map(|_| p.forward_marginal_sample(&x0, t, &mut rng).unwrap()[0])
                .collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sd = (1.0 - ab).sqrt();
            assert!((mean - ab.sqrt() * 1.5).abs() < 3.0 * sd / (n as f64).sqrt());
            let var_se = (1.0 - ab) * (2.0 / (n - 1) as f64).sqrt();
            assert!((var - (1.0 - ab)).abs() < 3.0 * var_se);
        }
        assert!(p.forward_marginal_sample(&[0.0], 0, &mut rng).is_err());
        assert!(p.forward_marginal_sample(&[0.0], 51, &mut rng).is_err());
    }

    #[test]
    fn pretrained_rollout_matches_single_gaussian_target() {
        // T = 1000 with the reference β range keeps the ancestral sampler's
        // variance deficit well inside the Monte-Carlo interval.
        let sched = ContinuousSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let s = 1.5;
        let mut rng = RngStream::new(0, 0);
        let p = ContinuousPolicy::new(
            sched,
            single(vec![0.0, 0.0], s),
            &[4],
            Activation::Tanh,
            &mut rng,
        )
        .unwrap();
        let n = 10_000;
        let trajs = rollout(&p, &RngStream::new(8, 1), n, Exec::Parallel, |_| Ok(0.0)).unwrap();
        for i in 0..2 {
            let xs: Vec<f64> = trajs.iter().map(|tr| tr.terminal()[i]).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!(mean.abs() < 3.0 * s / (n as f64).sqrt(), "mean {mean}");
            let var_se = s * s * (2.0 / (n - 1) as f64).sqrt();
            assert!((var - s * s).abs() < 3.0 * var_se, "var {var}");
        }
        let x: Vec<f64> = trajs.iter().map(|tr| tr.terminal()[0]).collect();
        let y: Vec<f64> = trajs.iter().map(|tr| tr.terminal()[1]).collect();
        let cov = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        assert!(cov.abs() < 3.0 * s * s / (n as f64).sqrt());
    }

    #[test]
    fn rollout_rejects_zero_and_is_deterministic() {
        let p = policy(GaussianMixture::ring(4, 2.0, 0.5, 2).unwrap(), 10, 0);
        let rng = RngStream::new(1, 2);
        assert!(rollout(&p, &rng, 0, Exec::Sequential, |_| Ok(0.0)).is_err());
        let a = rollout(&p, &rng, 5, Exec::Sequential, |_| Ok(0.0)).unwrap();
        let b = rollout(&p, &rng, 5, Exec::Parallel, |_| Ok(0.0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a[0].states.len(), 11);
    }

    #[test]
    fn equal_variance_kl() {
        let mut p = policy(GaussianMixture::ring(4, 2.0, 0.5, 2).unwrap(), 10, 0);
        let anchor = p.clone();
        let x = vec![0.1, 0.2];
        assert_eq!(p.kl(&anchor, &x, 5).unwrap(), 0.0);
        randomize(&mut p, 3);
        assert!(p.kl(&anchor, &x, 5).unwrap() > 0.0);
    }
}
