//! Closed-form cadence and rollback analytics, the clustered-error Monte
//! Carlo, and the synchronization-overhead scale model.

use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{config_err, Result};
use crate::rng::{self, domain, SplitMix64};

/// Upper bound on the stale-read event probability, `√(Lε/2)` clamped to `[0, 1]`.
pub fn stale_rollback_bound(l: usize, epsilon: f64) -> f64 {
    libm::sqrt(l as f64 * epsilon.max(0.0) / 2.0).clamp(0.0, 1.0)
}

/// Variance of the stale-read event probability under geometric cadence,
/// `Lε(M−1)/(8M)`.
pub fn cadence_variance(l: usize, epsilon: f64, m: usize) -> f64 {
    let m = m.max(1) as f64;
    l as f64 * epsilon * (m - 1.0) / (8.0 * m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterSimConfig {
    pub l: usize,
    pub rho_c: f64,
    pub q_token: f64,
    pub trials: usize,
    pub seed: u64,
}

impl ClusterSimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.trials == 0 {
            return Err(config_err("L and trials must be positive"));
        }
        if !(0.0..1.0).contains(&self.rho_c) {
            return Err(config_err("rho must lie in [0, 1)"));
        }
        if !(self.q_token > 0.0 && self.q_token < 1.0) {
            return Err(config_err("q_token must lie in (0, 1)"));
        }
        let p01 = self.recovery_to_error();
        if !(0.0..=1.0).contains(&p01) {
            return Err(config_err(alloc::format!(
                "no stationary chain: P(err | no err) = {p01} for rho = {}, q = {}",
                self.rho_c,
                self.q_token
            )));
        }
        Ok(())
    }

    /// `P(err | no err)` giving stationary error rate `q`.
    pub fn recovery_to_error(&self) -> f64 {
        self.q_token * (1.0 - self.rho_c) / (1.0 - self.q_token)
    }
}

/// Integer tallies over a block of trials; merging is exact and order-free.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ErrorTally {
    pub trials: u64,
    pub failed: u64,
    pub errors: u64,
    pub errors_sq: u64,
}

impl ErrorTally {
    fn record(&mut self, count: u64) {
        self.trials += 1;
        self.failed += u64::from(count > 0);
        self.errors += count;
        self.errors_sq += count * count;
    }

    pub fn merge(&mut self, other: &ErrorTally) {
        self.trials += other.trials;
        self.failed += other.failed;
        self.errors += other.errors;
        self.errors_sq += other.errors_sq;
    }

    pub fn fail_prob(&self) -> f64 {
        self.failed as f64 / self.trials as f64
    }

    /// Population variance of the per-stride error count.
    pub fn variance(&self) -> f64 {
        let n = self.trials as f64;
        let mean = self.errors as f64 / n;
        self.errors_sq as f64 / n - mean * mean
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrialTallies {
    pub independent: ErrorTally,
    pub clustered: ErrorTally,
}

impl TrialTallies {
    pub fn merge(&mut self, other: &TrialTallies) {
        self.independent.merge(&other.independent);
        self.clustered.merge(&other.clustered);
    }
}

/// Simulate trials `range` of `cfg`. Each trial draws from its own keyed
/// generator, so any partition of `0..trials` merges to the same totals.
pub fn simulate_trials(cfg: &ClusterSimConfig, range: Range<usize>) -> TrialTallies {
    let p01 = cfg.recovery_to_error();
    let mut out = TrialTallies::default();
    for trial in range {
        let t = trial as u64;
        let mut ind = SplitMix64::new(rng::key(cfg.seed, &[domain::CLUSTER_INDEPENDENT, t]));
        let count = (0..cfg.l).filter(|_| ind.bernoulli(cfg.q_token)).count() as u64;
        out.independent.record(count);

        let mut mc = SplitMix64::new(rng::key(cfg.seed, &[domain::CLUSTER_MARKOV, t]));
        let mut err = mc.bernoulli(cfg.q_token);
        let mut count = u64::from(err);
        for _ in 1..cfg.l {
            err = mc.bernoulli(if err { cfg.rho_c } else { p01 });
            count += u64::from(err);
        }
        out.clustered.record(count);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IndependentStats {
    pub fail_prob: f64,
    pub theo_fail: f64,
    pub variance: f64,
    /// `L·q(1−q)`
    pub theo_variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusteredStats {
    pub fail_prob: f64,
    pub variance: f64,
    /// `L·q(1−q)(1+ρ)/(1−ρ)`, the large-`L` limit.
    pub asymptotic_variance: f64,
    /// Exact variance of a stationary `L`-step chain.
    pub exact_variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterSimResult {
    pub config: ClusterSimConfig,
    pub independent: IndependentStats,
    pub clustered: ClusteredStats,
}

/// Exact per-stride error-count variance of a stationary two-state chain:
/// `Lq(1−q)[1 + 2Σ_{k<L}(1−k/L)λᵏ]` with `λ = ρ − P(err|no err)`.
pub fn clustered_variance_exact(l: usize, q: f64, rho: f64) -> f64 {
    let p01 = q * (1.0 - rho) / (1.0 - q);
    let lambda = rho - p01;
    let lf = l as f64;
    let mut acc = 0.0;
    let mut pow = 1.0;
    for k in 1..l {
        pow *= lambda;
        acc += (1.0 - k as f64 / lf) * pow;
    }
    lf * q * (1.0 - q) * (1.0 + 2.0 * acc)
}

pub fn summarize(cfg: &ClusterSimConfig, t: &TrialTallies) -> ClusterSimResult {
    let (l, q, rho) = (cfg.l as f64, cfg.q_token, cfg.rho_c);
    let bernoulli = l * q * (1.0 - q);
    ClusterSimResult {
        config: *cfg,
        independent: IndependentStats {
            fail_prob: t.independent.fail_prob(),
            theo_fail: 1.0 - libm::pow(1.0 - q, l),
            variance: t.independent.variance(),
            theo_variance: bernoulli,
        },
        clustered: ClusteredStats {
            fail_prob: t.clustered.fail_prob(),
            variance: t.clustered.variance(),
            asymptotic_variance: bernoulli * (1.0 + rho) / (1.0 - rho),
            exact_variance: clustered_variance_exact(cfg.l, q, rho),
        },
    }
}

/// Run every trial on the calling thread.
pub fn simulate_clustered_rollback(cfg: &ClusterSimConfig) -> Result<ClusterSimResult> {
    cfg.validate()?;
    Ok(summarize(cfg, &simulate_trials(cfg, 0..cfg.trials)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleModelParams {
    pub t_base: f64,
    pub t_comm: f64,
    pub avg_notes: f64,
    pub n_streams: usize,
    pub b_base: usize,
}

impl ScaleModelParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.t_base > 0.0 && self.t_comm >= 0.0 && self.avg_notes >= 0.0;
        if !ok || self.n_streams == 0 || self.b_base == 0 {
            return Err(config_err("scale model parameters must be positive"));
        }
        Ok(())
    }
}

/// `t_base + t_comm · N · avg_notes`
pub fn sync_overhead(p: &ScaleModelParams) -> f64 {
    p.t_base + p.t_comm * p.n_streams as f64 * p.avg_notes
}

/// `B_base·√(N/3)` rounded to the nearest positive integer.
pub fn adaptive_stride(b_base: usize, n: usize) -> usize {
    let b = b_base as f64 * libm::sqrt(n.max(1) as f64 / 3.0);
    (libm::round(b) as usize).max(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    NearLinear,
    Moderate,
    Saturating,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::NearLinear => "near-linear",
            Regime::Moderate => "moderate",
            Regime::Saturating => "saturating",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub n_streams: usize,
    pub t_sync: f64,
    pub stride: usize,
    pub regime: Regime,
}

/// Descriptive model output for `N = 1..=max_n`; the regime labels restate
/// the illustrative bands (up to 3 streams near-linear, 4–6 moderate, 7+
/// saturating) and are not measurements.
pub fn operating_points(p: &ScaleModelParams, max_n: usize) -> Vec<OperatingPoint> {
    (1..=max_n)
        .map(|n| OperatingPoint {
            n_streams: n,
            t_sync: sync_overhead(&ScaleModelParams { n_streams: n, ..*p }),
            stride: adaptive_stride(p.b_base, n),
            regime: match n {
                0..=3 => Regime::NearLinear,
                4..=6 => Regime::Moderate,
                _ => Regime::Saturating,
            },
        })
        .collect()
}
