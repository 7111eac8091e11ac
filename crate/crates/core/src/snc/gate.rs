//! Gate-stability controller: warmup after note updates, flicker backoff and
//! Lipschitz monitoring.

use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GateConfig {
    pub g_min: f64,
    pub g_max: f64,
    pub warmup_tokens: usize,
    pub window: usize,
    /// Backoff fires when the std-dev of the gate window exceeds this.
    pub flicker_threshold: f64,
    pub backoff_scale: f64,
    /// `τ_L`: layerwise Lipschitz estimate above which spectral normalization is requested.
    pub tau_lipschitz: f64,
    pub stability_threshold: f64,
    /// Steps between Lipschitz checks.
    pub refresh_interval: usize,
    /// Number of recent note updates averaged into the expected note change.
    pub note_change_window: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            g_min: 0.05,
            g_max: 0.80,
            warmup_tokens: 128,
            window: 64,
            flicker_threshold: 0.10,
            backoff_scale: 0.9,
            tau_lipschitz: 40.0,
            stability_threshold: 1.0,
            refresh_interval: 200,
            note_change_window: 64,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.g_min && self.g_min <= self.g_max && self.g_max <= 1.0) {
            return Err(config_err("gate bounds must satisfy 0 <= g_min <= g_max <= 1"));
        }
        if self.window == 0 || self.note_change_window == 0 || self.refresh_interval == 0 {
            return Err(config_err("gate windows and refresh interval must be positive"));
        }
        if !(self.backoff_scale > 0.0 && self.backoff_scale <= 1.0) {
            return Err(config_err("backoff scale must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Signals emitted by the controller for the caller to act on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GateAction {
    /// Gate flicker exceeded the threshold; the gate ceiling was scaled down.
    Backoff { g_max: f64 },
    /// The Lipschitz estimate exceeded `τ_L`.
    SpectralNormalize { l_u: f64 },
}

/// Per-stream gate state.
#[derive(Debug, Clone, PartialEq)]
pub struct GateState {
    pub cfg: GateConfig,
    /// Current ceiling after any backoffs.
    pub g_max: f64,
    pub tokens_since_note: usize,
    pub gate_window: VecDeque<f64>,
    pub l_u_estimate: f64,
    note_changes: VecDeque<f64>,
    steps_since_refresh: usize,
}

impl GateState {
    pub fn new(cfg: GateConfig, l_u_estimate: f64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            g_max: cfg.g_max,
            tokens_since_note: 0,
            gate_window: VecDeque::with_capacity(cfg.window),
            note_changes: VecDeque::with_capacity(cfg.note_change_window),
            l_u_estimate,
            steps_since_refresh: 0,
            cfg,
        })
    }

    /// Record `‖u_t − u_{t−1}‖₂` for a note update.
    pub fn record_note_change(&mut self, delta_norm: f64) {
        if self.note_changes.len() == self.cfg.note_change_window {
            self.note_changes.pop_front();
        }
        self.note_changes.push_back(delta_norm);
    }

    pub fn expected_note_change(&self) -> f64 {
        if self.note_changes.is_empty() {
            return 0.0;
        }
        self.note_changes.iter().sum::<f64>() / self.note_changes.len() as f64
    }

    /// `min(g_max, stability_threshold / (L_u · E‖Δu‖))`, never below `g_min`.
    pub fn scheduled_max(&self) -> f64 {
        let change = self.expected_note_change();
        let denom = self.l_u_estimate * change;
        let bound = if denom > 0.0 {
            f64::min(self.g_max, self.cfg.stability_threshold / denom)
        } else {
            self.g_max
        };
        f64::max(self.cfg.g_min, bound)
    }

    /// Linear anneal from `g_min` to the scheduled maximum.
    pub fn effective_gate(&self) -> f64 {
        let top = self.scheduled_max();
        let g_min = self.cfg.g_min;
        if self.cfg.warmup_tokens == 0 {
            return top;
        }
        let frac = f64::min(1.0, self.tokens_since_note as f64 / self.cfg.warmup_tokens as f64);
        g_min + (top - g_min) * frac
    }

    fn window_std(&self) -> f64 {
        let n = self.gate_window.len() as f64;
        let mean = self.gate_window.iter().sum::<f64>() / n;
        let var = self.gate_window.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / n;
        libm::sqrt(var)
    }

    /// Advance one token. `current_gate` is the gate actually applied at the
    /// previous token; it feeds the flicker window.
    pub fn step(&mut self, new_note_event: bool, current_gate: f64) -> (f64, Vec<GateAction>) {
        let mut actions = Vec::new();
        if new_note_event {
            self.tokens_since_note = 0;
        } else {
            self.tokens_since_note = self.tokens_since_note.saturating_add(1);
        }

        if self.gate_window.len() == self.cfg.window {
            self.gate_window.pop_front();
        }
        self.gate_window.push_back(current_gate);
        if self.gate_window.len() == self.cfg.window && self.window_std() > self.cfg.flicker_threshold {
            self.g_max = f64::max(self.cfg.g_min, self.g_max * self.cfg.backoff_scale);
            // a fresh window after each backoff, so one burst scales the ceiling once
            self.gate_window.clear();
            actions.push(GateAction::Backoff { g_max: self.g_max });
        }

        self.steps_since_refresh += 1;
        if self.steps_since_refresh >= self.cfg.refresh_interval {
            self.steps_since_refresh = 0;
            if self.l_u_estimate > self.cfg.tau_lipschitz {
                actions.push(GateAction::SpectralNormalize { l_u: self.l_u_estimate });
            }
        }

        (self.effective_gate(), actions)
    }
}

/// Functional form of [`GateState::step`].
pub fn gate_controller_step(
    gs: &GateState,
    new_note_event: bool,
    current_gate: f64,
) -> (GateState, f64, Vec<GateAction>) {
    let mut next = gs.clone();
    let (g, actions) = next.step(new_note_event, current_gate);
    (next, g, actions)
}
