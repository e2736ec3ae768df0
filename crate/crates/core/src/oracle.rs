//! Brute-force checks for enumerable discrete instances: path enumeration,
//! next-state distributions of the guided search, and the combined oracle
//! report.

use std::fmt;

use crate::discrete::DiscretePolicy;
use crate::error::{Error, Result};
use crate::estep::{estep_batch, search_step, EStepConfig};
use crate::eval::{elbo_exact_for_policy, elbo_surrogate};
use crate::numkit::reduce::lse_unchecked;
use crate::numkit::{tol, RngStream};
use crate::par::Exec;
use crate::policy::DiffusionPolicy;
use crate::rewards::RewardSpec;
use crate::softq::{BoundMode, ExactSoftTables, SoftQConfig};

/// Paths beyond this count make enumeration unavailable.
pub const PATH_CAP: usize = 1_000_000;

pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Every denoising path of `base` from the all-mask state with its log-probability.
pub fn enumerate_paths(base: &DiscretePolicy) -> Result<Vec<(Vec<Vec<u8>>, f64)>> {
    let start = base.space().all_masked();
    let mut paths = vec![(vec![start], 0.0)];
    for t in (1..=base.horizon()).rev() {
        let mut next = Vec::new();
        for (states, lp) in &paths {
            for (y, l) in base.successors(states.last().expect("non-empty path"), t)? {
                let mut s = states.clone();
                s.push(y);
                next.push((s, lp + l));
            }
            if next.len() > PATH_CAP {
                return Err(Error::OracleUnavailable(format!("more than {PATH_CAP} denoising paths")));
            }
        }
        paths = next;
    }
    Ok(paths)
}

/// The undiscounted ELBO of `policy` under the path posterior
/// `η(τ) ∝ p_base(τ) exp(r(x_0)/α)`, by summing over whole paths.
pub fn elbo_by_enumeration(
    base: &DiscretePolicy,
    policy: &DiscretePolicy,
    reward: &RewardSpec,
    alpha: f64,
) -> Result<f64> {
    let paths = enumerate_paths(base)?;
    let mut scored = Vec::with_capacity(paths.len());
    for (states, lp) in &paths {
        let r = reward.value_discrete(states.last().expect("non-empty path"))? / alpha;
        scored.push((r, lp + r));
    }
    let log_z = lse_unchecked(&scored.iter().map(|s| s.1).collect::<Vec<_>>());
    let big_t = base.horizon();
    let mut total = 0.0;
    for ((states, _), (r, lw)) in paths.iter().zip(&scored) {
        let log_eta = lw - log_z;
        let eta = log_eta.exp();
        if eta == 0.0 {
            continue;
        }
        let mut log_p = 0.0;
        for (i, w) in states.windows(2).enumerate() {
            log_p += policy.log_prob(&w[0], &w[1], big_t - i)?;
        }
        total += eta * (r + log_p - log_eta);
    }
    Ok(total)
}

/// Empirical distribution over state indices of one resampled search step
/// from `x_t`, over `repeats` independent draws.
#[allow(clippy::too_many_arguments)]
pub fn next_state_frequencies(
    policy: &DiscretePolicy,
    guide: &DiscretePolicy,
    reward: &RewardSpec,
    cfg: &EStepConfig,
    x_t: &[u8],
    t: usize,
    repeats: usize,
    rng: &RngStream,
    exec: Exec,
) -> Result<Vec<f64>> {
    let space = policy.space();
    let x = x_t.to_vec();
    let picks = exec
        .map_range(repeats, |i| {
            let mut r = rng.derive(i as u64);
            search_step(policy, guide, &x, t, reward, cfg, &mut r).map(|(y, _)| space.index(&y))
        })
        .into_iter()
        .collect::<Result<Vec<usize>>>()?;
    let mut freq = vec![0.0; space.num_states()];
    for i in picks {
        freq[i] += 1.0 / repeats as f64;
    }
    Ok(freq)
}

/// Total-variation distances to the tilted policy, `tv[m][seed]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TvSweep {
    pub particles: Vec<usize>,
    pub tv: Vec<Vec<f64>>,
}

impl TvSweep {
    pub fn means(&self) -> Vec<f64> {
        self.tv.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).collect()
    }

    pub fn std_errors(&self) -> Vec<f64> {
        self.tv
            .iter()
            .map(|v| {
                let n = v.len() as f64;
                if v.len() < 2 {
                    return 0.0;
                }
                let m = v.iter().sum::<f64>() / n;
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
            })
            .collect()
    }

    /// Consecutive particle counts where the mean distance grows by more
    /// than `z` combined standard errors.
    pub fn ci_inversions(&self, z: f64) -> usize {
        let (m, se) = (self.means(), self.std_errors());
        (1..m.len())
            .filter(|&i| m[i] - m[i - 1] > z * (se[i].powi(2) + se[i - 1].powi(2)).sqrt())
            .count()
    }

    pub fn point_inversions(&self) -> usize {
        let m = self.means();
        m.windows(2).filter(|w| w[1] > w[0]).count()
    }
}

/// Distance between the resampled next-state distribution from `x_t` and
/// the exact tilted policy, per particle count and seed.
#[allow(clippy::too_many_arguments)]
pub fn tv_sweep(
    base: &DiscretePolicy,
    reward: &RewardSpec,
    cfg: &EStepConfig,
    x_t: &[u8],
    t: usize,
    particles: &[usize],
    seeds: usize,
    repeats: usize,
    seed: u64,
    exec: Exec,
) -> Result<TvSweep> {
    let tables = ExactSoftTables::build(base, reward, &cfg.soft_q())?;
    let exact = tables.policy_dense(t, x_t);
    let root = RngStream::new(seed, 0x7f);
    let mut tv = Vec::with_capacity(particles.len());
    for (mi, &m) in particles.iter().enumerate() {
        let c = EStepConfig {
            particles: m,
            ..cfg.clone()
        };
        let mut row = Vec::with_capacity(seeds);
        for s in 0..seeds {
            let rng = root.derive_path(&[mi as u64, s as u64]);
            let freq = next_state_frequencies(base, base, reward, &c, x_t, t, repeats, &rng, exec)?;
            row.push(tv_distance(&freq, &exact));
        }
        tv.push(row);
    }
    Ok(TvSweep {
        particles: particles.to_vec(),
        tv,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOptions {
    pub particle_counts: Vec<usize>,
    pub seeds: usize,
    pub repeats: usize,
    pub tv_threshold: f64,
    pub max_inversions: usize,
    pub surrogate_particles: usize,
    pub surrogate_batch: usize,
    pub surrogate_rel_tol: f64,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            particle_counts: vec![1, 4, 16, 64],
            seeds: 20,
            repeats: 10_000,
            tv_threshold: 0.05,
            max_inversions: 1,
            surrogate_particles: 64,
            surrogate_batch: 10_000,
            surrogate_rel_tol: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl OracleCheck {
    fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OracleReport {
    pub checks: Vec<OracleCheck>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &OracleCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for OracleReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        let failed = self.failures().count();
        write!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

/// Bellman consistency, terminal entries, normalization and bounds of
/// `tables` against `base`.
pub fn check_tables(base: &DiscretePolicy, tables: &ExactSoftTables) -> Result<Vec<OracleCheck>> {
    let g = tables.cfg.gamma;
    let mut out = Vec::new();
    let res = tables.bellman_residual(base)?;
    out.push(OracleCheck::new(
        format!("bellman γ={g}"),
        res <= tol::BELLMAN,
        format!("max residual {res:.3e}"),
    ));

    let mut terminal_ok = true;
    for entry in &tables.levels[0] {
        for tr in &entry.transitions {
            terminal_ok &= tr.q == tables.rewards[tr.next];
        }
    }
    out.push(OracleCheck::new(
        format!("terminal γ={g}"),
        terminal_ok,
        "Q(x_1, x_0) = r(x_0) and V(x_0) = 0",
    ));

    let mut worst: f64 = 0.0;
    for t in 1..=tables.horizon() {
        for i in 0..tables.space.num_states() {
            let x = tables.space.tokens_of(i);
            let s: f64 = tables.policy_log_probs(t, &x).iter().map(|(_, l)| l.exp()).sum();
            worst = worst.max((s - 1.0).abs());
        }
    }
    out.push(OracleCheck::new(
        format!("normalization γ={g}"),
        worst <= tol::NORMALIZATION,
        format!("max |Σ η − 1| {worst:.3e}"),
    ));

    let b = tables.check_bounds(base, BoundMode::Exact)?;
    out.push(OracleCheck::new(format!("bounds γ={g}"), b.passed(), b.to_string()));
    if g == 1.0 {
        let collapse = b.collapsed == b.checked && b.checked > 0;
        out.push(OracleCheck::new(
            "bounds collapse γ=1",
            collapse,
            format!("{} of {} pairs collapsed", b.collapsed, b.checked),
        ));
    }
    Ok(out)
}

/// Every oracle-backed check on `base` (the pretrained policy, used both as
/// the policy and as the search prior).
pub fn run_oracle(
    base: &DiscretePolicy,
    reward: &RewardSpec,
    cfg: &EStepConfig,
    opts: &OracleOptions,
    exec: Exec,
) -> Result<OracleReport> {
    cfg.validate(reward)?;
    let mut report = OracleReport::default();
    let mut gammas = vec![cfg.gamma, 0.8, 1.0];
    gammas.dedup();
    gammas.sort_by(f64::total_cmp);
    gammas.dedup();
    for &gamma in &gammas {
        let tables = ExactSoftTables::build(base, reward, &SoftQConfig::new(cfg.alpha, gamma)?)?;
        report.checks.extend(check_tables(base, &tables)?);
    }

    let undiscounted = ExactSoftTables::build(base, reward, &SoftQConfig::new(cfg.alpha, 1.0)?)?;
    let dp = elbo_exact_for_policy(base, &undiscounted)?;
    let brute = elbo_by_enumeration(base, base, reward, cfg.alpha)?;
    report.checks.push(OracleCheck::new(
        "elbo γ=1 vs path enumeration",
        (dp - brute).abs() <= tol::BELLMAN,
        format!("dp {dp:.12} enumeration {brute:.12}"),
    ));

    let x_t = base.space().all_masked();
    let sweep = tv_sweep(
        base,
        reward,
        cfg,
        &x_t,
        1,
        &opts.particle_counts,
        opts.seeds,
        opts.repeats,
        opts.seed,
        exec,
    )?;
    let means = sweep.means();
    let last = *means.last().unwrap_or(&f64::NAN);
    let inv = sweep.ci_inversions(1.96);
    let detail = sweep
        .particles
        .iter()
        .zip(&means)
        .map(|(m, tv)| format!("M={m}: {tv:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    report.checks.push(OracleCheck::new(
        "resampled next state vs tilted policy",
        last < opts.tv_threshold,
        format!("mean TV {detail}"),
    ));
    report.checks.push(OracleCheck::new(
        "TV decreases with particles",
        inv <= opts.max_inversions,
        format!("{inv} inversions beyond 95% CI"),
    ));

    let tables = ExactSoftTables::build(base, reward, &cfg.soft_q())?;
    let exact = elbo_exact_for_policy(base, &tables)?;
    let c = EStepConfig {
        particles: opts.surrogate_particles,
        ..cfg.clone()
    };
    let rng = RngStream::new(opts.seed, 0x5e);
    let batch = estep_batch(base, base, reward, &c, &rng, opts.surrogate_batch, 0, exec)?;
    let sur = elbo_surrogate(base, &batch, &cfg.soft_q())?;
    let rel = (sur - exact).abs() / exact.abs().max(f64::MIN_POSITIVE);
    report.checks.push(OracleCheck::new(
        "surrogate ELBO vs exact",
        rel <= opts.surrogate_rel_tol,
        format!("surrogate {sur:.5} exact {exact:.5} rel err {rel:.4}"),
    ));
    Ok(report)
}
