//! Note-emission cadence.
//!
//! Draws are keyed by `(seed, stream, position)`; the counter is the RNG
//! state, so there is nothing to thread between calls.

use crate::error::{config_err, Result};
use crate::rng::{self, domain};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptiveWeights {
    /// Weight on `1 − agreement`.
    pub agreement: f64,
    /// Weight on normalized next-token entropy.
    pub entropy: f64,
    /// Weight on `1 − coverage`.
    pub coverage_gap: f64,
    /// Weight on `min(1, note_age / M)`.
    pub note_age: f64,
    /// Multiplier applied to `m_t` while the applied gate is below `gate_floor`.
    pub idle_gate_damping: f64,
    pub gate_floor: f64,
}

impl AdaptiveWeights {
    /// All modulation off: `m_t ≡ 1`.
    pub const NEUTRAL: Self = Self {
        agreement: 0.0,
        entropy: 0.0,
        coverage_gap: 0.0,
        note_age: 0.0,
        idle_gate_damping: 1.0,
        gate_floor: 0.0,
    };
}

impl Default for AdaptiveWeights {
    fn default() -> Self {
        Self {
            agreement: 1.0,
            entropy: 0.5,
            coverage_gap: 0.5,
            note_age: 0.25,
            idle_gate_damping: 0.5,
            gate_floor: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CadenceMode {
    Deterministic,
    Stochastic,
    Adaptive(AdaptiveWeights),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CadenceConfig {
    pub mode: CadenceMode,
    /// `M(ρ)`: expected tokens between emissions.
    pub m_of_rho: usize,
    pub m_min: f64,
    pub m_max: f64,
    pub seed: u64,
}

impl Default for CadenceConfig {
    fn default() -> Self {
        Self {
            mode: CadenceMode::Deterministic,
            m_of_rho: 4,
            m_min: 0.5,
            m_max: 2.0,
            seed: 0,
        }
    }
}

impl CadenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m_of_rho == 0 {
            return Err(config_err("M(rho) must be at least 1"));
        }
        if !(self.m_min > 0.0 && self.m_min <= self.m_max && self.m_max.is_finite()) {
            return Err(config_err("cadence needs 0 < m_min <= m_max"));
        }
        Ok(())
    }
}

/// Per-token inputs to adaptive modulation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CadenceSignals {
    /// Tokens emitted so far, including the current one.
    pub position: usize,
    pub agreement: f64,
    /// Next-token entropy divided by `ln(vocab)`.
    pub entropy: f64,
    pub coverage: f64,
    /// Tokens since this stream last emitted a note.
    pub note_age: usize,
    pub gate: f64,
}

/// Modulation factor `m_t` before clamping.
pub fn modulation(w: &AdaptiveWeights, m_of_rho: usize, s: &CadenceSignals) -> f64 {
    let age = f64::min(1.0, s.note_age as f64 / m_of_rho as f64);
    let mut m = 1.0
        + w.agreement * (1.0 - s.agreement)
        + w.entropy * s.entropy
        + w.coverage_gap * (1.0 - s.coverage)
        + w.note_age * age;
    if s.gate < w.gate_floor {
        m *= w.idle_gate_damping;
    }
    m
}

/// Emission probability for this token.
pub fn emission_probability(cfg: &CadenceConfig, s: &CadenceSignals) -> f64 {
    let m = cfg.m_of_rho as f64;
    match cfg.mode {
        CadenceMode::Deterministic => {
            if s.position.is_multiple_of(cfg.m_of_rho) {
                1.0
            } else {
                0.0
            }
        }
        CadenceMode::Stochastic => 1.0 / m,
        CadenceMode::Adaptive(w) => {
            let mt = modulation(&w, cfg.m_of_rho, s).clamp(cfg.m_min, cfg.m_max);
            f64::min(1.0, mt / m)
        }
    }
}

/// Whether `stream` emits a note after the token at `signals.position`.
pub fn next_emission(cfg: &CadenceConfig, stream: usize, signals: &CadenceSignals) -> bool {
    if cfg.mode == CadenceMode::Deterministic {
        return signals.position > 0 && signals.position.is_multiple_of(cfg.m_of_rho);
    }
    let p = emission_probability(cfg, signals);
    let u = rng::uniform_at(cfg.seed, &[domain::CADENCE, stream as u64, signals.position as u64]);
    u < p
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    fn signals(position: usize) -> CadenceSignals {
        CadenceSignals {
            position,
            agreement: 0.9,
            entropy: 0.5,
            coverage: 0.5,
            note_age: 3,
            gate: 0.4,
        }
    }

    fn inter_arrivals(cfg: &CadenceConfig, tokens: usize) -> Vec<f64> {
        let mut gaps = Vec::new();
        let mut last = 0;
        for pos in 1..=tokens {
            if next_emission(cfg, 0, &signals(pos)) {
                gaps.push((pos - last) as f64);
                last = pos;
            }
        }
        gaps
    }

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        (mean, var)
    }

    #[test]
    fn deterministic_emits_every_m_tokens() {
        let cfg = CadenceConfig::default();
        let hits: Vec<usize> = (0..=13).filter(|&p| next_emission(&cfg, 0, &signals(p))).collect();
        assert_eq!(hits, [4, 8, 12]);
    }

    #[test]
    fn stochastic_inter_arrival_is_geometric() {
        let cfg = CadenceConfig {
            mode: CadenceMode::Stochastic,
            seed: 17,
            ..CadenceConfig::default()
        };
        let (mean, var) = moments(&inter_arrivals(&cfg, 100_000));
        assert!((mean - 4.0).abs() < 0.05, "{mean}");
        assert!((var - 12.0).abs() < 0.3, "{var}");
    }

    #[test]
    fn neutral_adaptive_matches_stochastic_draw_for_draw() {
        let stochastic = CadenceConfig {
            mode: CadenceMode::Stochastic,
            seed: 3,
            ..CadenceConfig::default()
        };
        let adaptive = CadenceConfig {
            mode: CadenceMode::Adaptive(AdaptiveWeights::NEUTRAL),
            ..stochastic
        };
        for pos in 1..5000 {
            assert_eq!(
                next_emission(&stochastic, 1, &signals(pos)),
                next_emission(&adaptive, 1, &signals(pos))
            );
        }
    }

    #[test]
    fn adaptive_modulation_directions() {
        let w = AdaptiveWeights::default();
        let base = signals(10);
        let low_agreement = CadenceSignals { agreement: 0.1, ..base };
        let idle_gate = CadenceSignals { gate: 0.0, ..base };
        assert!(modulation(&w, 4, &low_agreement) > modulation(&w, 4, &base));
        assert!(modulation(&w, 4, &idle_gate) < modulation(&w, 4, &base));
        let cfg = CadenceConfig {
            mode: CadenceMode::Adaptive(w),
            ..CadenceConfig::default()
        };
        let p = emission_probability(
            &cfg,
            &CadenceSignals {
                agreement: 0.0,
                entropy: 1.0,
                coverage: 0.0,
                ..base
            },
        );
        assert_eq!(p, 2.0 / 4.0);
    }

    #[test]
    fn rejects_zero_m() {
        let cfg = CadenceConfig {
            m_of_rho: 0,
            ..CadenceConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
