//! Loss-weight balancing, auxiliary objectives and the curriculum scheduler.
//!
//! Everything here works on caller-supplied gradient norms, losses and
//! distributions; there is no backpropagation.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::error::{config_err, input_err, Error, Result};
use crate::rng::{self, domain};
use crate::tensor::{dot, norm2};

#[derive(Debug, Clone, PartialEq)]
pub struct BalancerConfig {
    pub alpha: f64,
    pub eta_w: f64,
    pub update_interval: u64,
    pub clamp: (f64, f64),
    /// Number of recent `λ_KL` values behind `σ_λ`.
    pub history_window: usize,
    /// Central-difference step for `∂L_grad/∂λ_KL`.
    pub fd_step: f64,
    pub initial_lambda_kl: f64,
}

impl Default for BalancerConfig {
    fn default() -> Self {
        Self {
            alpha: 1.5,
            eta_w: 0.05,
            update_interval: 50,
            clamp: (0.1, 0.9),
            history_window: 20,
            fd_step: 1e-4,
            initial_lambda_kl: 0.5,
        }
    }
}

impl BalancerConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.clamp;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(config_err("clamp range must satisfy 0 < lo <= hi < 1"));
        }
        // both weights share the range, so it must be closed under λ ↦ 1 − λ
        if lo + hi != 1.0 {
            return Err(config_err("clamp range must be symmetric: lo + hi = 1"));
        }
        if !(lo..=hi).contains(&self.initial_lambda_kl) {
            return Err(config_err("initial lambda_kl must lie inside the clamp range"));
        }
        if self.update_interval == 0 || self.history_window == 0 {
            return Err(config_err("update interval and history window must be positive"));
        }
        if !(self.fd_step > 0.0 && self.eta_w >= 0.0 && self.alpha >= 0.0) {
            return Err(config_err("fd_step must be positive; eta_w and alpha non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalancerState {
    pub cfg: BalancerConfig,
    pub lambda_ce: f64,
    pub lambda_kl: f64,
    /// `(L_CE(0), L_KL(0))`
    pub initial_losses: Option<(f64, f64)>,
    pub weight_history: VecDeque<f64>,
}

impl BalancerState {
    pub fn new(cfg: BalancerConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            lambda_kl: cfg.initial_lambda_kl,
            lambda_ce: 1.0 - cfg.initial_lambda_kl,
            initial_losses: None,
            weight_history: VecDeque::with_capacity(cfg.history_window),
            cfg,
        })
    }

    /// Record the reference losses the training rates are measured against.
    pub fn initialize(&mut self, l_ce0: f64, l_kl0: f64) -> Result<()> {
        if !(l_ce0 > 0.0 && l_kl0 > 0.0 && l_ce0.is_finite() && l_kl0.is_finite()) {
            return Err(input_err("initial losses must be positive and finite"));
        }
        self.initial_losses = Some((l_ce0, l_kl0));
        Ok(())
    }

    /// `(r_CE, r_KL)`: current losses relative to the initial ones.
    pub fn rates(&self, l_ce: f64, l_kl: f64) -> Result<(f64, f64)> {
        let (c0, k0) = self
            .initial_losses
            .ok_or(Error::State("balancer used before initial losses were recorded"))?;
        Ok((l_ce / c0, l_kl / k0))
    }

    fn push_history(&mut self, w: f64) {
        if self.weight_history.len() == self.cfg.history_window {
            self.weight_history.pop_front();
        }
        self.weight_history.push_back(w);
    }
}

/// `L_grad` at the trial weight `λ_KL = λ₀ + offset`.
///
/// Norms are taken to scale linearly with their weights about the current
/// point, `G_KL(λ) = g_kl·λ/λ₀` and `G_CE(λ) = g_ce·(1−λ)/(1−λ₀)`, while the
/// target `Ḡ·r̃ᵅ` is held fixed. `r̃` is each rate divided by the mean rate.
/// Taking the offset rather than `λ` keeps `±h` probes exactly symmetric.
pub fn grad_loss(offset: f64, lambda0: f64, g_ce: f64, g_kl: f64, r_ce: f64, r_kl: f64, alpha: f64) -> f64 {
    let g_bar = (g_ce + g_kl) / 2.0;
    let r_mean = (r_ce + r_kl) / 2.0;
    let (t_ce, t_kl) = if r_mean > 0.0 {
        (
            g_bar * libm::pow(r_ce / r_mean, alpha),
            g_bar * libm::pow(r_kl / r_mean, alpha),
        )
    } else {
        (g_bar, g_bar)
    };
    let dk = (g_kl - t_kl) + g_kl * offset / lambda0;
    let dc = (g_ce - t_ce) - g_ce * offset / (1.0 - lambda0);
    dc.abs() + dk.abs()
}

/// One weight update from gradient norms and current losses.
pub fn gradnorm_update(st: &BalancerState, g_ce: f64, g_kl: f64, l_ce: f64, l_kl: f64) -> Result<BalancerState> {
    if !(g_ce >= 0.0 && g_kl >= 0.0 && l_ce >= 0.0 && l_kl >= 0.0) {
        return Err(input_err("gradient norms and losses must be non-negative"));
    }
    let (r_ce, r_kl) = st.rates(l_ce, l_kl)?;
    let c = &st.cfg;
    let lam = st.lambda_kl;
    let h = c.fd_step.min(lam / 2.0).min((1.0 - lam) / 2.0);
    let deriv = (grad_loss(h, lam, g_ce, g_kl, r_ce, r_kl, c.alpha)
        - grad_loss(-h, lam, g_ce, g_kl, r_ce, r_kl, c.alpha))
        / (2.0 * h);
    let kl = lam * libm::exp(-c.eta_w * deriv);
    let kl = (kl / (kl + st.lambda_ce)).clamp(c.clamp.0, c.clamp.1);

    let mut next = st.clone();
    next.lambda_kl = kl;
    // lo + hi = 1, so clamping the complement only undoes rounding at the ends
    next.lambda_ce = (1.0 - kl).clamp(c.clamp.0, c.clamp.1);
    next.push_history(kl);
    Ok(next)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct HealthFlags {
    /// `ρ` outside `[0.5, 2.0]`: adjust the learning rate if it persists.
    pub gradient_ratio: bool,
    /// `δ_r ≥ 0.3`: increase `α` if it keeps growing.
    pub rate_divergence: bool,
    /// `σ_λ ≥ 0.05`: reduce `η_w`.
    pub oscillation: bool,
}

impl HealthFlags {
    pub fn any(&self) -> bool {
        self.gradient_ratio || self.rate_divergence || self.oscillation
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HealthReport {
    pub rho: f64,
    pub delta_r: f64,
    pub sigma_lambda: f64,
    pub flags: HealthFlags,
}

pub fn health_metrics(st: &BalancerState, g_ce: f64, g_kl: f64, r_ce: f64, r_kl: f64) -> HealthReport {
    let rho = g_kl / g_ce;
    let delta_r = (r_ce - r_kl).abs();
    let n = st.weight_history.len();
    let sigma_lambda = if n == 0 {
        0.0
    } else {
        let mean = st.weight_history.iter().sum::<f64>() / n as f64;
        let var = st.weight_history.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / n as f64;
        libm::sqrt(var)
    };
    HealthReport {
        rho,
        delta_r,
        sigma_lambda,
        flags: HealthFlags {
            gradient_ratio: !(0.5..=2.0).contains(&rho),
            rate_divergence: delta_r >= 0.3,
            oscillation: sigma_lambda >= 0.05,
        },
    }
}

/// One line of a loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub g_ce: f64,
    pub g_kl: f64,
    pub l_ce: f64,
    pub l_kl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalanceRecord {
    pub step: u64,
    pub lambda_ce: f64,
    pub lambda_kl: f64,
    pub updated: bool,
    pub health: HealthReport,
}

/// Replay a loss log: the first record fixes the initial losses, and weights
/// update on every step that is a multiple of the update interval.
pub fn run_balancer(cfg: BalancerConfig, log: &[LossRecord]) -> Result<Vec<BalanceRecord>> {
    let mut st = BalancerState::new(cfg)?;
    let mut out = Vec::with_capacity(log.len());
    let mut last_step = None;
    for rec in log {
        if last_step.is_some_and(|s| rec.step <= s) {
            return Err(input_err(alloc::format!(
                "loss log steps must increase (step {})",
                rec.step
            )));
        }
        last_step = Some(rec.step);
        if st.initial_losses.is_none() {
            st.initialize(rec.l_ce, rec.l_kl)?;
        }
        let updated = rec.step > 0 && rec.step % st.cfg.update_interval == 0;
        if updated {
            st = gradnorm_update(&st, rec.g_ce, rec.g_kl, rec.l_ce, rec.l_kl)?;
        }
        let (r_ce, r_kl) = st.rates(rec.l_ce, rec.l_kl)?;
        out.push(BalanceRecord {
            step: rec.step,
            lambda_ce: st.lambda_ce,
            lambda_kl: st.lambda_kl,
            updated,
            health: health_metrics(&st, rec.g_ce, rec.g_kl, r_ce, r_kl),
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Auxiliary objectives
// ---------------------------------------------------------------------------

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// `1 − F1` of predicted coverage flags against expected ones.
pub fn coverage_loss(expected: &[bool], predicted: &[bool]) -> Result<f64> {
    if expected.len() != predicted.len() {
        return Err(Error::Shape {
            op: "coverage_loss",
            expected: (1, expected.len()),
            found: (1, predicted.len()),
        });
    }
    let tp = expected.iter().zip(predicted).filter(|(e, p)| **e && **p).count() as f64;
    let pred_pos = predicted.iter().filter(|p| **p).count() as f64;
    let exp_pos = expected.iter().filter(|e| **e).count() as f64;
    if exp_pos == 0.0 && pred_pos == 0.0 {
        return Ok(0.0);
    }
    let precision = if pred_pos > 0.0 { tp / pred_pos } else { 0.0 };
    let recall = if exp_pos > 0.0 { tp / exp_pos } else { 0.0 };
    Ok(1.0 - f1(precision, recall))
}

fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    let (nu, nv) = (norm2(u), norm2(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(input_err("cosine similarity of a zero vector is undefined"));
    }
    Ok(dot(u, v) / (nu * nv))
}

/// Mean hinge `max(0, cos(u, v) − threshold)` over all pairs, scaled by
/// `margin_weight`.
pub fn redundancy_penalty(embeddings: &[Vec<f64>], threshold: f64, margin_weight: f64) -> Result<f64> {
    if embeddings.len() < 2 {
        return Err(input_err("redundancy needs at least two embeddings"));
    }
    let d = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != d) {
        return Err(input_err("embeddings must share a dimension"));
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..embeddings.len() {
        for j in i + 1..embeddings.len() {
            total += f64::max(0.0, cosine(&embeddings[i], &embeddings[j])? - threshold);
            pairs += 1;
        }
    }
    Ok(margin_weight * total / pairs as f64)
}

fn check_distribution(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(input_err("distribution rows must be non-negative and sum to 1"));
    }
    Ok(())
}

/// `KL(p‖q)` in nats; `q = 0` where `p > 0` gives infinity.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(pi, _)| **pi > 0.0)
        .map(|(pi, qi)| pi * libm::log(pi / qi))
        .sum()
}

/// Mean `KL(p_pre‖p_post)` over tokens outside the commit horizon.
///
/// `distances[i]` is how far token `i` sits behind the decode frontier;
/// tokens with distance `≥ L` are outside the horizon. With none outside the
/// result is 0.
pub fn stability_kl(p_pre: &[Vec<f64>], p_post: &[Vec<f64>], horizon: usize, distances: &[usize]) -> Result<f64> {
    if p_pre.len() != p_post.len() || p_pre.len() != distances.len() {
        return Err(input_err("stability_kl inputs must have matching lengths"));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for ((a, b), &dist) in p_pre.iter().zip(p_post).zip(distances) {
        if a.len() != b.len() {
            return Err(input_err("paired distributions must share a support"));
        }
        check_distribution(a)?;
        check_distribution(b)?;
        if dist >= horizon {
            total += kl_divergence(a, b);
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

/// `max(0, τ_use − KL)` applied only when the teacher is note-sensitive.
pub fn note_usage_guard(kl_with_vs_without: f64, kl_teacher: f64, tau_use: f64, delta: f64) -> f64 {
    if kl_teacher > delta {
        f64::max(0.0, tau_use - kl_with_vs_without)
    } else {
        0.0
    }
}

/// Contradiction probability for a premise/hypothesis embedding pair.
pub trait NliScorer {
    fn contradiction(&self, premise: &[f64], hypothesis: &[f64]) -> f64;
}

/// Deterministic stand-in: a pseudo-probability hashed from the exact bits
/// of both embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashNliScorer {
    pub seed: u64,
}

fn hash_vec(v: &[f64]) -> u64 {
    let bits: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
    rng::key(0, &bits)
}

impl NliScorer for HashNliScorer {
    fn contradiction(&self, premise: &[f64], hypothesis: &[f64]) -> f64 {
        rng::uniform_at(self.seed, &[domain::NLI, hash_vec(premise), hash_vec(hypothesis)])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NliLossConfig {
    /// Pairs whose contradiction probability is within this distance of 0.5
    /// (or above it) count as near-contradictions.
    pub margin: f64,
    pub margin_weight: f64,
}

impl Default for NliLossConfig {
    fn default() -> Self {
        Self {
            margin: 0.1,
            margin_weight: 1.0,
        }
    }
}

/// Mean contradiction probability over note-to-note pairs from different
/// streams and every note-to-plan pair, plus a hinge on near-contradictions.
pub fn nli_loss(scorer: &dyn NliScorer, notes: &[Vec<Vec<f64>>], plan: &[Vec<f64>], cfg: &NliLossConfig) -> f64 {
    let mut scores = Vec::new();
    for (s, mine) in notes.iter().enumerate() {
        for a in mine {
            for other in &notes[s + 1..] {
                for b in other {
                    scores.push(scorer.contradiction(a, b));
                }
            }
            for p in plan {
                scores.push(scorer.contradiction(a, p));
            }
        }
    }
    if scores.is_empty() {
        return 0.0;
    }
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    let near = scores
        .iter()
        .map(|p| f64::max(0.0, p - (0.5 - cfg.margin)))
        .sum::<f64>()
        / n;
    mean + cfg.margin_weight * near
}

// ---------------------------------------------------------------------------
// Curriculum
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Trainable {
    PlannerHead,
    NotesHead,
    StreamAdapters,
    SpeculationHead,
    CoverageHead,
    AgreementHead,
}

impl Trainable {
    pub fn label(self) -> &'static str {
        match self {
            Trainable::PlannerHead => "planner_head",
            Trainable::NotesHead => "notes_head",
            Trainable::StreamAdapters => "stream_adapters",
            Trainable::SpeculationHead => "speculation_head",
            Trainable::CoverageHead => "coverage_head",
            Trainable::AgreementHead => "agreement_head",
        }
    }
}

/// Modules unfrozen when each stage begins; earlier stages stay trainable.
const UNFROZEN_AT: [&[Trainable]; 4] = [
    &[Trainable::PlannerHead, Trainable::NotesHead],
    &[Trainable::StreamAdapters],
    &[Trainable::SpeculationHead],
    &[Trainable::CoverageHead, Trainable::AgreementHead],
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurriculumSchedule {
    /// First step of stages 1, 2 and 3.
    pub boundaries: [u64; 3],
    pub guard_window: u64,
}

impl CurriculumSchedule {
    pub fn new(boundaries: [u64; 3], guard_window: u64) -> Result<Self> {
        if !(boundaries[0] > 0 && boundaries[0] < boundaries[1] && boundaries[1] < boundaries[2]) {
            return Err(config_err("stage boundaries must be positive and strictly increasing"));
        }
        Ok(Self {
            boundaries,
            guard_window,
        })
    }

    pub fn stage_at(&self, step: u64) -> usize {
        self.boundaries.iter().filter(|&&b| step >= b).count()
    }

    pub fn trainable_set(stage: usize) -> Vec<Trainable> {
        UNFROZEN_AT[..=stage.min(3)]
            .iter()
            .flat_map(|s| s.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageDecision {
    pub stage: usize,
    pub trainable_set: Vec<Trainable>,
    pub aux_pass_allowed: bool,
    pub sync_required: bool,
}

pub fn stage_scheduler_step(sched: &CurriculumSchedule, step: u64, requested_aux_pass: bool) -> StageDecision {
    let stage = sched.stage_at(step);
    let near_boundary = sched.boundaries.iter().any(|&b| step.abs_diff(b) <= sched.guard_window);
    StageDecision {
        stage,
        trainable_set: CurriculumSchedule::trainable_set(stage),
        aux_pass_allowed: requested_aux_pass && !near_boundary,
        sync_required: sched.boundaries.contains(&step),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn initialized(lambda_kl: f64) -> BalancerState {
        let mut st = BalancerState::new(BalancerConfig {
            initial_lambda_kl: lambda_kl,
            ..BalancerConfig::default()
        })
        .unwrap();
        st.initialize(2.0, 1.0).unwrap();
        st
    }

    #[test]
    fn balanced_inputs_are_a_fixed_point() {
        for lam in [0.1, 0.3, 0.5, 0.77, 0.9] {
            let st = initialized(lam);
            let next = gradnorm_update(&st, 1.3, 1.3, 1.0, 0.5).unwrap();
            assert_eq!(next.lambda_kl, lam);
            assert_eq!(next.lambda_ce + next.lambda_kl, 1.0);
        }
    }

    #[test]
    fn uninitialized_update_is_a_state_error() {
        let st = BalancerState::new(BalancerConfig::default()).unwrap();
        assert!(matches!(gradnorm_update(&st, 1.0, 1.0, 1.0, 1.0), Err(Error::State(_))));
    }

    #[test]
    fn large_push_clamps_at_the_floor() {
        let mut st = initialized(0.15);
        st.cfg.eta_w = 10.0;
        let next = gradnorm_update(&st, 0.1, 50.0, 2.0, 1.0).unwrap();
        assert_eq!(next.lambda_kl, 0.1);
        assert_eq!(next.lambda_ce, 0.9);
    }

    /// Minimize `L_grad` over a λ grid as an oracle for the update direction.
    fn grid_argmin(lam0: f64, g_ce: f64, g_kl: f64, r_ce: f64, r_kl: f64, alpha: f64) -> f64 {
        let mut best = (f64::INFINITY, lam0);
        for i in 0..=8000 {
            let lam = 0.1 + 0.8 * i as f64 / 8000.0;
            let v = grad_loss(lam - lam0, lam0, g_ce, g_kl, r_ce, r_kl, alpha);
            if v < best.0 {
                best = (v, lam);
            }
        }
        best.1
    }

    #[test]
    fn asymmetric_step_moves_toward_the_grid_minimum() {
        let cases = [
            (1.0, 3.0, 2.0, 1.0),
            (3.0, 1.0, 2.0, 1.0),
            (1.0, 1.0, 1.0, 0.6),
            (2.0, 1.5, 1.4, 1.0),
        ];
        for (g_ce, g_kl, l_ce, l_kl) in cases {
            let st = initialized(0.5);
            let next = gradnorm_update(&st, g_ce, g_kl, l_ce, l_kl).unwrap();
            let (r_ce, r_kl) = st.rates(l_ce, l_kl).unwrap();
            let target = grid_argmin(0.5, g_ce, g_kl, r_ce, r_kl, st.cfg.alpha);
            let moved = next.lambda_kl - 0.5;
            assert!(
                moved != 0.0 && moved.signum() == (target - 0.5).signum(),
                "{g_ce} {g_kl}: {moved} vs {target}"
            );
        }
    }

    #[test]
    fn health_examples() {
        let st = initialized(0.5);
        let h = health_metrics(&st, 1.0, 1.0, 0.5, 0.5);
        assert_eq!(h.flags, HealthFlags::default());
        let h = health_metrics(&st, 1.0, 2.5, 0.5, 0.5);
        assert!(h.flags.gradient_ratio && !h.flags.rate_divergence);
        let mut osc = st.clone();
        for i in 0..10 {
            osc.push_history(if i % 2 == 0 { 0.4 } else { 0.6 });
        }
        let h = health_metrics(&osc, 1.0, 1.0, 0.5, 0.5);
        assert!((h.sigma_lambda - 0.1).abs() < 1e-12);
        assert!(h.flags.oscillation);
    }

    #[test]
    fn health_thresholds_are_inclusive_where_stated() {
        let st = initialized(0.5);
        assert!(!health_metrics(&st, 1.0, 2.0, 0.5, 0.5).flags.gradient_ratio);
        assert!(!health_metrics(&st, 2.0, 1.0, 0.5, 0.5).flags.gradient_ratio);
        assert!(health_metrics(&st, 1.0, 1.0, 0.75, 0.25).flags.rate_divergence);
        assert!(!health_metrics(&st, 1.0, 1.0, 0.7, 0.5).flags.rate_divergence);
    }

    #[test]
    fn loss_log_replay_updates_on_interval() {
        let log: Vec<LossRecord> = (0..=200)
            .map(|s| LossRecord {
                step: s,
                g_ce: 1.0,
                g_kl: 3.0,
                l_ce: 2.0,
                l_kl: 1.0,
            })
            .collect();
        let out = run_balancer(BalancerConfig::default(), &log).unwrap();
        let updates: Vec<u64> = out.iter().filter(|r| r.updated).map(|r| r.step).collect();
        assert_eq!(updates, [50, 100, 150, 200]);
        assert!(out.last().unwrap().lambda_kl < 0.5);
        let mut bad = log.clone();
        bad[3].step = 2;
        assert!(run_balancer(BalancerConfig::default(), &bad).is_err());
    }

    #[test]
    fn coverage_examples() {
        assert_eq!(coverage_loss(&[true, false, true], &[true, false, true]).unwrap(), 0.0);
        assert_eq!(coverage_loss(&[true, false], &[false, false]).unwrap(), 1.0);
        let f = f1(0.7778, 0.0491);
        assert!((f - 0.0924).abs() < 5e-5);
        assert!((1.0 - f - 0.9076).abs() < 5e-5);
        assert!(coverage_loss(&[true], &[true, false]).is_err());
    }

    #[test]
    fn redundancy_examples() {
        let e = |v: &[f64]| v.to_vec();
        assert_eq!(
            redundancy_penalty(&[e(&[1.0, 0.0]), e(&[0.0, 2.0])], 0.8, 1.0).unwrap(),
            0.0
        );
        let same = redundancy_penalty(&[e(&[1.0, 2.0]), e(&[1.0, 2.0])], 0.8, 1.0).unwrap();
        assert!((same - 0.2).abs() < 1e-12);
        // cos = 0.8 exactly for (1, 0) and (0.8, 0.6)
        assert_eq!(
            redundancy_penalty(&[e(&[1.0, 0.0]), e(&[0.8, 0.6])], 0.8, 1.0).unwrap(),
            0.0
        );
        assert!(redundancy_penalty(&[e(&[1.0, 0.0]), e(&[0.0, 0.0])], 0.8, 1.0).is_err());
        assert!(redundancy_penalty(&[e(&[1.0])], 0.8, 1.0).is_err());
    }

    #[test]
    fn stability_examples() {
        let p = vec![vec![0.9, 0.1]];
        let q = vec![vec![0.5, 0.5]];
        assert_eq!(stability_kl(&p, &p, 4, &[10]).unwrap(), 0.0);
        assert_eq!(stability_kl(&p, &q, 4, &[2]).unwrap(), 0.0);
        let oracle = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
        let v = stability_kl(&p, &q, 4, &[4]).unwrap();
        assert!((v - oracle).abs() < 1e-15);
        assert!((v - 0.3681).abs() < 5e-5);
        assert!(stability_kl(&[vec![0.5, 0.6]], &q, 4, &[9]).is_err());
    }

    #[test]
    fn usage_guard_examples() {
        assert_eq!(note_usage_guard(0.0, 0.01, 0.5, 0.05), 0.0);
        assert_eq!(note_usage_guard(0.7, 1.0, 0.5, 0.05), 0.0);
        assert!((note_usage_guard(0.2, 1.0, 0.5, 0.05) - 0.3).abs() < 1e-15);
    }

    #[test]
    fn hash_scorer_is_deterministic_and_bounded() {
        let s = HashNliScorer { seed: 4 };
        let a = [0.1, 0.2];
        let b = [0.3, -0.2];
        assert_eq!(s.contradiction(&a, &b).to_bits(), s.contradiction(&a, &b).to_bits());
        let notes = vec![vec![a.to_vec()], vec![b.to_vec(), vec![1.0, 1.0]]];
        let loss = nli_loss(&s, &notes, &[vec![0.0, 1.0]], &NliLossConfig::default());
        assert!(loss >= 0.0 && loss <= 2.0);
        assert_eq!(nli_loss(&s, &[], &[], &NliLossConfig::default()), 0.0);
    }

    struct Always(f64);
    impl NliScorer for Always {
        fn contradiction(&self, _: &[f64], _: &[f64]) -> f64 {
            self.0
        }
    }

    #[test]
    fn nli_loss_hinges_on_near_contradictions() {
        let notes = vec![vec![vec![1.0]], vec![vec![2.0]]];
        let cfg = NliLossConfig::default();
        assert!((nli_loss(&Always(0.2), &notes, &[], &cfg) - 0.2).abs() < 1e-15);
        assert!((nli_loss(&Always(0.6), &notes, &[], &cfg) - (0.6 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn curriculum_examples() {
        let sched = CurriculumSchedule::new([100, 200, 300], 1).unwrap();
        let mid = stage_scheduler_step(&sched, 150, true);
        assert_eq!(mid.stage, 1);
        assert!(mid.aux_pass_allowed && !mid.sync_required);
        assert!(!stage_scheduler_step(&sched, 150, false).aux_pass_allowed);
        let edge = stage_scheduler_step(&sched, 200, true);
        assert_eq!(edge.stage, 2);
        assert!(!edge.aux_pass_allowed && edge.sync_required);
        assert!(edge.trainable_set.contains(&Trainable::SpeculationHead));
        assert!(!stage_scheduler_step(&sched, 199, true).aux_pass_allowed);
        assert_eq!(
            stage_scheduler_step(&sched, 0, true).trainable_set,
            [Trainable::PlannerHead, Trainable::NotesHead]
        );
        assert_eq!(stage_scheduler_step(&sched, 999, true).trainable_set.len(), 6);
        assert!(CurriculumSchedule::new([100, 100, 300], 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]

        #[test]
        fn weights_stay_on_the_clamped_simplex(
            lam in 0.1f64..=0.9,
            g_ce in 0.0f64..10.0, g_kl in 0.0f64..10.0,
            l_ce in 0.0f64..5.0, l_kl in 0.0f64..5.0,
            eta in 0.0f64..5.0,
        ) {
            let mut st = initialized(lam);
            st.cfg.eta_w = eta;
            let next = gradnorm_update(&st, g_ce, g_kl, l_ce, l_kl).unwrap();
            prop_assert_eq!(next.lambda_ce + next.lambda_kl, 1.0);
            prop_assert!((0.1..=0.9).contains(&next.lambda_kl));
            prop_assert!((0.1..=0.9).contains(&next.lambda_ce));
        }

        #[test]
        fn balanced_fixed_point_everywhere(lam in 0.1f64..=0.9, g in 0.0f64..10.0, l in 0.01f64..5.0) {
            let st = initialized(lam);
            // rates equal when both losses keep the same ratio to their initial values
            let next = gradnorm_update(&st, g, g, 2.0 * l, l).unwrap();
            prop_assert_eq!(next.lambda_kl, lam);
        }

        #[test]
        fn coverage_loss_in_unit_interval(flags in prop::collection::vec((any::<bool>(), any::<bool>()), 0..40)) {
            let (e, p): (Vec<bool>, Vec<bool>) = flags.iter().copied().unzip();
            let v = coverage_loss(&e, &p).unwrap();
            prop_assert!((0.0..=1.0).contains(&v));
            let exact = e.iter().zip(&p).all(|(a, b)| a == b);
            prop_assert_eq!(v == 0.0, exact);
        }

        #[test]
        fn guard_windows_block_aux_passes(
            b0 in 1u64..100, gap1 in 1u64..100, gap2 in 1u64..100, w in 0u64..5, offset in -6i64..=6,
        ) {
            let sched = CurriculumSchedule::new([b0, b0 + gap1, b0 + gap1 + gap2], w).unwrap();
            for b in sched.boundaries {
                let step = b as i64 + offset;
                if step >= 0 && offset.unsigned_abs() <= w {
                    prop_assert!(!stage_scheduler_step(&sched, step as u64, true).aux_pass_allowed);
                }
            }
        }

        #[test]
        fn losses_are_non_negative(a in 0.0f64..1.0, b in 0.0f64..1.0, tau in 0.0f64..1.0, kl in 0.0f64..2.0) {
            let p = vec![vec![a, 1.0 - a]];
            let q = vec![vec![b, 1.0 - b]];
            prop_assert!(stability_kl(&p, &q, 1, &[5]).unwrap() >= 0.0);
            prop_assert!(note_usage_guard(kl, 1.0, tau, 0.1) >= 0.0);
        }
    }
}
