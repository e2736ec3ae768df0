//! Soft value functions for the sparse-reward denoising MDP.
//!
//! With the reward paid only on the final transition and deterministic
//! state updates, the soft Bellman recursion reads
//!
//! ```text
//! Q(x_1, x_0)     = r(x_0)
//! Q(x_t, x_{t−1}) = γ V(x_{t−1})                      (t ≥ 2)
//! V(x_t)          = α log Σ p(x_{t−1}|x_t) exp(Q/α)
//! ```
//!
//! At runtime `Q` is replaced by `γ^{t−1} r(x̂_0(x_{t−1}))`. For enumerable
//! discrete instances the exact tables below serve as the oracle.

use serde::{Deserialize, Serialize};

use crate::discrete::{DiscretePolicy, SeqSpace};
use crate::error::{config, Result};
use crate::numkit::reduce::lse_unchecked;
use crate::numkit::{tol, RngStream};
use crate::policy::DiffusionPolicy;
use crate::rewards::RewardSpec;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftQConfig {
    pub alpha: f64,
    pub gamma: f64,
}

impl SoftQConfig {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self> {
        let c = Self { alpha, gamma };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return config(format!("alpha must be positive, got {}", self.alpha));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return config(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        Ok(())
    }

    /// `γ^{t−1}` for `t ≥ 1`.
    pub fn discount(&self, t: usize) -> f64 {
        self.gamma.powi(t as i32 - 1)
    }
}

/// `γ^{t−1} r̂`, where `r̂` is the reward of the posterior-mean prediction
/// from `x_{t−1}`.
pub fn approx_soft_q(reward_of_x0hat: f64, t: usize, cfg: &SoftQConfig) -> f64 {
    cfg.discount(t) * reward_of_x0hat
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    /// State index of `x_{t−1}`.
    pub next: usize,
    pub log_prior: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateEntry {
    pub transitions: Vec<Transition>,
    pub v: f64,
    /// `log Σ p exp(Q/α)`
    pub log_z: f64,
}

/// Exact soft-optimal quantities for every state and timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct ExactSoftTables {
    pub space: SeqSpace,
    pub cfg: SoftQConfig,
    /// `levels[t−1][index(x_t)]`
    pub levels: Vec<Vec<StateEntry>>,
    /// Reward of each clean state, `NaN` for states containing the mask.
    pub rewards: Vec<f64>,
}

impl ExactSoftTables {
    /// Backward recursion against the base policy `base`.
    pub fn build(base: &DiscretePolicy, reward: &RewardSpec, cfg: &SoftQConfig) -> Result<Self> {
        cfg.validate()?;
        let space = base.space();
        reward.validate(space.len)?;
        let states = space.enumerate(tol::ENUMERATION_CAP)?;
        let rewards = states
            .iter()
            .map(|s| {
                if s.iter().any(|t| space.is_masked(*t)) {
                    Ok(f64::NAN)
                } else {
                    reward.value_discrete(s)
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        let mut levels: Vec<Vec<StateEntry>> = Vec::with_capacity(base.horizon());
        for t in 1..=base.horizon() {
            let mut level = Vec::with_capacity(states.len());
            for x in &states {
                let transitions = base
                    .successors(x, t)?
                    .into_iter()
                    .map(|(y, log_prior)| {
                        let next = space.index(&y);
                        let q = if t == 1 {
                            rewards[next]
                        } else {
                            cfg.gamma * levels[t - 2][next].v
                        };
                        Transition {
                            next,
                            log_prior,
                            q,
                        }
                    })
                    .collect::<Vec<_>>();
                let terms: Vec<f64> = transitions
                    .iter()
                    .map(|tr| tr.log_prior + tr.q / cfg.alpha)
                    .collect();
                let log_z = lse_unchecked(&terms);
                level.push(StateEntry {
                    transitions,
                    v: cfg.alpha * log_z,
                    log_z,
                });
            }
            levels.push(level);
        }
        Ok(Self {
            space,
            cfg: *cfg,
            levels,
            rewards,
        })
    }

    pub fn horizon(&self) -> usize {
        self.levels.len()
    }

    pub fn entry(&self, t: usize, x: &[u8]) -> &StateEntry {
        &self.levels[t - 1][self.space.index(x)]
    }

    /// `V(x_t)`, zero at `t = 0`.
    pub fn value(&self, t: usize, x: &[u8]) -> f64 {
        if t == 0 {
            0.0
        } else {
            self.entry(t, x).v
        }
    }

    /// `J = V(x_T)/α` at the all-mask start.
    pub fn log_partition(&self) -> f64 {
        self.entry(self.horizon(), &self.space.all_masked()).log_z
    }

    /// The tilted policy `η*(·|x_t) = p exp(Q/α) / Z` as (state index,
    /// log-probability) pairs.
    pub fn policy_log_probs(&self, t: usize, x: &[u8]) -> Vec<(usize, f64)> {
        let e = self.entry(t, x);
        e.transitions
            .iter()
            .map(|tr| (tr.next, tr.log_prior + tr.q / self.cfg.alpha - e.log_z))
            .collect()
    }

    /// Dense `η*(·|x_t)` over all state indices.
    pub fn policy_dense(&self, t: usize, x: &[u8]) -> Vec<f64> {
        let mut out = vec![0.0; self.space.num_states()];
        for (i, lp) in self.policy_log_probs(t, x) {
            out[i] = lp.exp();
        }
        out
    }

    pub fn log_policy(&self, t: usize, x: &[u8], y: &[u8]) -> f64 {
        let j = self.space.index(y);
        self.policy_log_probs(t, x)
            .into_iter()
            .find(|(i, _)| *i == j)
            .map_or(f64::NEG_INFINITY, |(_, lp)| lp)
    }

    /// Largest violation of the recursion when the stored tables are
    /// substituted back in, including the terminal conditions and the
    /// stored prior log-probabilities.
    pub fn bellman_residual(&self, base: &DiscretePolicy) -> Result<f64> {
        let states = self.space.enumerate(tol::ENUMERATION_CAP)?;
        let mut worst: f64 = 0.0;
        for t in 1..=self.horizon() {
            for (i, x) in states.iter().enumerate() {
                let e = &self.levels[t - 1][i];
                let terms: Vec<f64> = e
                    .transitions
                    .iter()
                    .map(|tr| tr.log_prior + tr.q / self.cfg.alpha)
                    .collect();
                let lz = lse_unchecked(&terms);
                worst = worst
                    .max((e.v - self.cfg.alpha * lz).abs())
                    .max((e.log_z - lz).abs());
                for tr in &e.transitions {
                    let want = if t == 1 {
                        self.rewards[tr.next]
                    } else {
                        self.cfg.gamma * self.levels[t - 2][tr.next].v
                    };
                    if t == 1 && tr.q != want {
                        return Ok(f64::INFINITY);
                    }
                    worst = worst.max((tr.q - want).abs());
                    let y = self.space.tokens_of(tr.next);
                    let lp = base.log_prob(&x.to_vec(), &y, t)?;
                    worst = worst.max((tr.log_prior - lp).abs());
                }
            }
        }
        Ok(worst)
    }

    /// Checks the discounted lower/upper bounds on `Q(x_t, x_{t−1})`, t ≥ 2.
    pub fn check_bounds(&self, base: &DiscretePolicy, mode: BoundMode) -> Result<BoundReport> {
        match mode {
            BoundMode::Exact => self.check_bounds_exact(base),
            BoundMode::MonteCarlo { samples, transitions, seed } => {
                self.check_bounds_mc(base, samples, transitions, seed)
            }
        }
    }

    /// `log E[exp(c r(x_0)) | x_u]` for every level `u = 0..T−1` and state.
    fn log_moment(&self, c: f64) -> Vec<Vec<f64>> {
        let n = self.space.num_states();
        let mut out = Vec::with_capacity(self.horizon());
        out.push((0..n).map(|i| c * self.rewards[i]).collect::<Vec<f64>>());
        for u in 1..self.horizon() {
            let prev = &out[u - 1];
            let level = self.levels[u - 1]
                .iter()
                .map(|e| {
                    let terms: Vec<f64> = e
                        .transitions
                        .iter()
                        .map(|tr| tr.log_prior + prev[tr.next])
                        .collect();
                    lse_unchecked(&terms)
                })
                .collect();
            out.push(level);
        }
        out
    }

    fn check_bounds_exact(&self, _base: &DiscretePolicy) -> Result<BoundReport> {
        let SoftQConfig { alpha, gamma } = self.cfg;
        let upper_m = self.log_moment(1.0 / alpha);
        let mut report = BoundReport::default();
        for t in 2..=self.horizon() {
            let lower_m = self.log_moment(gamma.powi(t as i32 - 2) / alpha);
            for (i, e) in self.levels[t - 1].iter().enumerate() {
                for tr in &e.transitions {
                    let lower = alpha * gamma * lower_m[t - 1][tr.next];
                    let upper = alpha * gamma.powi(t as i32 - 1) * upper_m[t - 1][tr.next];
                    let slack = tol::BOUND_EXACT * (1.0 + tr.q.abs());
                    report.record(t, i, tr.next, lower, tr.q, upper, slack);
                }
            }
        }
        Ok(report)
    }

    fn check_bounds_mc(
        &self,
        base: &DiscretePolicy,
        samples: usize,
        transitions: usize,
        seed: u64,
    ) -> Result<BoundReport> {
        if samples < 2 {
            return config("Monte-Carlo bound check needs at least two samples");
        }
        let SoftQConfig { alpha, gamma } = self.cfg;
        let candidates: Vec<(usize, usize, usize)> = (2..=self.horizon())
            .flat_map(|t| {
                self.levels[t - 1].iter().enumerate().flat_map(move |(i, e)| {
                    e.transitions.iter().map(move |tr| (t, i, tr.next))
                })
            })
            .collect();
        let root = RngStream::new(seed, 0xb00d5);
        let mut pick = root.derive(u64::MAX);
        let mut report = BoundReport::default();
        for k in 0..transitions.min(candidates.len()) {
            let (t, i, next) = if transitions >= candidates.len() {
                candidates[k]
            } else {
                candidates[pick.below(candidates.len())]
            };
            let q = self.levels[t - 1][i]
                .transitions
                .iter()
                .find(|tr| tr.next == next)
                .expect("candidate transition")
                .q;
            let mut rng = root.derive(k as u64);
            let c_low = gamma.powi(t as i32 - 2) / alpha;
            let (mut lo_vals, mut up_vals) = (Vec::with_capacity(samples), Vec::with_capacity(samples));
            for _ in 0..samples {
                let mut x = self.space.tokens_of(next);
                for u in (1..t).rev() {
                    x = base.sample_step(&x, u, &mut rng)?;
                }
                let r = self.rewards[self.space.index(&x)];
                lo_vals.push(c_low * r);
                up_vals.push(r / alpha);
            }
            let (lo, lo_se) = log_mean_exp_with_se(&lo_vals);
            let (up, up_se) = log_mean_exp_with_se(&up_vals);
            let lower = alpha * gamma * lo;
            let upper = alpha * gamma.powi(t as i32 - 1) * up;
            let slack = 3.0 * (alpha * gamma * lo_se + alpha * gamma.powi(t as i32 - 1) * up_se)
                + tol::BOUND_EXACT * (1.0 + q.abs());
            report.record(t, i, next, lower, q, upper, slack);
        }
        Ok(report)
    }
}

/// `log mean exp(v)` and the delta-method standard error of that logarithm.
fn log_mean_exp_with_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let mean = e.iter().sum::<f64>() / n;
    let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (m + mean.ln(), (var / n).sqrt() / mean)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BoundMode {
    /// Expectations by enumeration.
    Exact,
    /// `samples` prior rollouts for each of `transitions` sampled
    /// `(x_t, x_{t−1})` pairs (all pairs if there are fewer).
    MonteCarlo {
        samples: usize,
        transitions: usize,
        seed: u64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundViolation {
    pub t: usize,
    pub state: usize,
    pub next: usize,
    pub lower: f64,
    pub q: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BoundReport {
    pub checked: usize,
    /// Pairs whose lower and upper bounds agree within the slack.
    pub collapsed: usize,
    pub violations: Vec<BoundViolation>,
    pub max_gap: f64,
}

impl BoundReport {
    #[allow(clippy::too_many_arguments)]
    fn record(&mut self, t: usize, state: usize, next: usize, lower: f64, q: f64, upper: f64, slack: f64) {
        self.checked += 1;
        if upper - lower <= 2.0 * slack {
            self.collapsed += 1;
        }
        self.max_gap = self.max_gap.max(upper - lower);
        if q < lower - slack || q > upper + slack {
            self.violations.push(BoundViolation {
                t,
                state,
                next,
                lower,
                q,
                upper,
            });
        }
    }

    pub fn passed(&self) -> bool {
        self.violations.is_empty() && self.checked > 0
    }
}

impl std::fmt::Display for BoundReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "bounds: checked={} collapsed={} violations={} max_gap={:.3e}",
            self.checked,
            self.collapsed,
            self.violations.len(),
            self.max_gap
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::discrete::DiscreteDenoiser;
    use crate::rewards::RewardKind;
    use approx::assert_abs_diff_eq;

    fn base(len: usize, vocab: usize, steps: usize, seed: u64) -> DiscretePolicy {
        let space = SeqSpace::new(len, vocab).unwrap();
        let mut p = DiscretePolicy::new(DiscreteDenoiser::tabular(space, steps).unwrap()).unwrap();
        let mut rng = RngStream::new(seed, 1);
        let w: Vec<f64> = (0..p.num_params()).map(|_| rng.normal()).collect();
        p.set_params(&w).unwrap();
        p
    }

    fn motif() -> RewardSpec {
        RewardSpec::new("ab", RewardKind::MotifCount { motif: vec![0, 1] })
    }

    #[test]
    fn approx_q_examples() {
        let c = SoftQConfig::new(0.1, 0.9).unwrap();
        assert_eq!(approx_soft_q(2.0, 1, &c), 2.0);
        assert_abs_diff_eq!(approx_soft_q(2.0, 3, &c), 1.62, epsilon = 1e-12);
        let c1 = SoftQConfig::new(0.1, 1.0).unwrap();
        assert_eq!(approx_soft_q(2.0, 7, &c1), 2.0);
        assert!(SoftQConfig::new(0.0, 0.5).is_err());
        assert!(SoftQConfig::new(1.0, 0.0).is_err());
        assert!(SoftQConfig::new(1.0, 1.1).is_err());
    }

    #[test]
    fn constant_reward_gives_constant_value() {
        let p = base(2, 2, 3, 0);
        let c = RewardSpec::new("c", RewardKind::Constant { value: 1.7 });
        let tables = ExactSoftTables::build(&p, &c, &SoftQConfig::new(0.3, 1.0).unwrap()).unwrap();
        for level in &tables.levels {
            for e in level {
                assert_abs_diff_eq!(e.v, 1.7, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn single_step_instance_holds_terminal_entries() {
        let p = base(2, 2, 2, 0);
        let cfg = SoftQConfig::new(0.5, 0.8).unwrap();
        let tables = ExactSoftTables::build(&p, &motif(), &cfg).unwrap();
        for e in &tables.levels[0] {
            for tr in &e.transitions {
                assert_eq!(tr.q, tables.rewards[tr.next]);
            }
        }
    }

    #[test]
    fn self_consistency_and_normalization() {
        for gamma in [0.8, 1.0] {
            let p = base(2, 2, 3, 7);
            let cfg = SoftQConfig::new(0.5, gamma).unwrap();
            let tables = ExactSoftTables::build(&p, &motif(), &cfg).unwrap();
            assert!(tables.bellman_residual(&p).unwrap() < tol::BELLMAN);
            for t in 1..=3 {
                for x in p.space().enumerate(100).unwrap() {
                    let s: f64 = tables.policy_dense(t, &x).iter().sum();
                    assert!((s - 1.0).abs() < tol::NORMALIZATION);
                }
            }
        }
    }

    #[test]
    fn corrupted_table_is_detected() {
        let p = base(2, 2, 3, 7);
        let cfg = SoftQConfig::new(0.5, 0.8).unwrap();
        let mut tables = ExactSoftTables::build(&p, &motif(), &cfg).unwrap();
        tables.levels[2][0].transitions[0].q += 1.0;
        assert!(tables.bellman_residual(&p).unwrap() > 0.5);
        let rep = tables.check_bounds(&p, BoundMode::Exact).unwrap();
        assert!(!rep.passed());
    }

    #[test]
    fn boltzmann_ratio_by_hand() {
        // uniform prior over two emitted tokens at t = 1 from a single masked
        // position; rewards 0 and α log 3 give probabilities 1/4 and 3/4
        let space = SeqSpace::new(1, 2).unwrap();
        let p = DiscretePolicy::new(DiscreteDenoiser::tabular(space, 2).unwrap()).unwrap();
        let alpha = 0.7;
        let r = RewardSpec::new("b", RewardKind::Composition { token: 1 }).scaled(alpha * 3f64.ln());
        let tables = ExactSoftTables::build(&p, &r, &SoftQConfig::new(alpha, 1.0).unwrap()).unwrap();
        let d = tables.policy_dense(1, &[2]);
        assert_abs_diff_eq!(d[0], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], 0.75, epsilon = 1e-12);
        assert_abs_diff_eq!(tables.entry(1, &[2]).log_z, (0.5 + 1.5f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn high_temperature_limit() {
        let p = base(2, 2, 3, 3);
        let gamma = 0.9;
        let tables = ExactSoftTables::build(&p, &motif(), &SoftQConfig::new(1e6, gamma).unwrap()).unwrap();
        // separate expected-reward recursion under the prior
        let space = p.space();
        let states = space.enumerate(100).unwrap();
        let mut ev: Vec<f64> = states
            .iter()
            .map(|s| motif().value_discrete(s).unwrap_or(0.0))
            .collect();
        for t in 1..=3 {
            ev = states
                .iter()
                .map(|x| {
                    p.successors(x, t)
                        .unwrap()
                        .iter()
                        .map(|(y, lp)| lp.exp() * ev[space.index(y)])
                        .sum::<f64>()
                        * if t == 1 { 1.0 } else { gamma }
                })
                .collect();
            for (i, x) in states.iter().enumerate() {
                assert!((tables.value(t, x) - ev[i]).abs() < 1e-3);
                let tv: f64 = p
                    .successors(x, t)
                    .unwrap()
                    .iter()
                    .map(|(y, lp)| (lp.exp() - tables.log_policy(t, x, y).exp()).abs())
                    .sum::<f64>()
                    / 2.0;
                assert!(tv < 1e-4);
            }
        }
    }

    #[test]
    fn value_non_decreasing_in_alpha_for_non_negative_rewards() {
        let p = base(2, 2, 3, 5);
        let alphas = [0.05, 0.2, 1.0, 5.0];
        let tabs: Vec<ExactSoftTables> = alphas
            .iter()
            .map(|a| ExactSoftTables::build(&p, &motif(), &SoftQConfig::new(*a, 0.9).unwrap()).unwrap())
            .collect();
        // V = α log E[exp(Q/α)] decreases towards the mean as α grows
        for t in 1..=3 {
            for x in p.space().enumerate(100).unwrap() {
                for w in tabs.windows(2) {
                    assert!(w[1].value(t, &x) <= w[0].value(t, &x) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn bounds_exact_and_collapse() {
        let p = base(2, 2, 3, 11);
        for gamma in [0.8, 1.0] {
            let tables = ExactSoftTables::build(&p, &motif(), &SoftQConfig::new(0.5, gamma).unwrap()).unwrap();
            let rep = tables.check_bounds(&p, BoundMode::Exact).unwrap();
            assert!(rep.passed(), "{rep}");
            if gamma == 1.0 {
                assert_eq!(rep.collapsed, rep.checked);
            } else {
                assert!(rep.collapsed < rep.checked);
            }
        }
    }

    #[test]
    fn bounds_monte_carlo() {
        let p = base(2, 2, 3, 11);
        let tables = ExactSoftTables::build(&p, &motif(), &SoftQConfig::new(0.5, 0.8).unwrap()).unwrap();
        let rep = tables
            .check_bounds(
                &p,
                BoundMode::MonteCarlo {
                    samples: 20_000,
                    transitions: 10,
                    seed: 1,
                },
            )
            .unwrap();
        assert!(rep.passed(), "{rep}");
    }
}
