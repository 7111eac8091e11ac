//! Multi-stream decode loop over logit-replay artifacts.
//!
//! Streams advance in rounds of `B` tokens. Within a round every stream reads
//! the same lagged bus view and touches only its own state, so the rounds can
//! be executed in any order or in parallel (see [`StrideExecutor`]). All bus
//! writes, page accounting and agreement checks happen at the barrier between
//! rounds, in stream order.

pub mod artifact;
pub mod cadence;
pub mod trace;

use alloc::vec;
use alloc::vec::Vec;

pub use artifact::{synthesize_artifact, ArtifactMeta, ModelParams, ReplayArtifact, ReplayFrame, SynthSpec};
pub use cadence::{next_emission, AdaptiveWeights, CadenceConfig, CadenceMode, CadenceSignals};
pub use trace::{hex, DecodeTrace, RollbackEvent, TraceEvent};

use crate::bus::{BusConfig, Note, NotesBus};
use crate::error::{config_err, input_err, Error, Result};
use crate::mem::{PageTable, PlacementPolicy};
use crate::rng::{self, domain};
use crate::snc::{
    agreement_score, apply_adapter, estimate_lipschitz_layerwise, snc_context, AgreementParams, DropoutMode,
    GateConfig, GateState,
};
use crate::tensor::{self, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgreementSource {
    /// Use the precomputed scores in the artifact.
    Replay,
    /// Evaluate the agreement head on the post-SNC hidden state.
    Live,
}

/// What a stream consumes after a rollback.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regeneration {
    /// Rewind the frame cursor and consume the same frames again, scored with
    /// their retry agreement.
    Reconsume,
    /// Keep the frame cursor; regenerated positions take the following frames.
    SkipAhead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RollbackScope {
    /// Discard the whole uncommitted span.
    FullSpan,
    /// Keep tokens before the first failing one.
    FromFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    /// Expected stream count `K`; checked against the artifact when set.
    pub n_streams: Option<usize>,
    /// `L`
    pub commit_horizon: usize,
    /// `B`
    pub stride: usize,
    pub tau: f64,
    /// Bus lag `Δ` in snapshot versions.
    pub delta: usize,
    pub cadence: CadenceConfig,
    pub gate: GateConfig,
    pub gate_override: Option<f64>,
    pub agreement_source: AgreementSource,
    pub regeneration: Regeneration,
    pub rollback_scope: RollbackScope,
    /// Hide every sibling note from every stream.
    pub mask_siblings: bool,
    /// Std-dev of gaussian noise added to note embeddings on read.
    pub note_noise: f64,
    pub seed: u64,
    /// Defaults to the commit horizon.
    pub page_size: Option<usize>,
    pub bus_capacity: usize,
    pub bus_retain_k: usize,
    pub bus_history: usize,
    /// Abort when a stream rolls back this many strides in a row.
    pub max_consecutive_rollbacks: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            n_streams: None,
            commit_horizon: 32,
            stride: 32,
            tau: 0.5,
            delta: 1,
            cadence: CadenceConfig::default(),
            gate: GateConfig::default(),
            gate_override: None,
            agreement_source: AgreementSource::Replay,
            regeneration: Regeneration::Reconsume,
            rollback_scope: RollbackScope::FullSpan,
            mask_siblings: false,
            note_noise: 0.0,
            seed: 0,
            page_size: None,
            bus_capacity: 2560,
            bus_retain_k: 32,
            bus_history: 64,
            max_consecutive_rollbacks: 16,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.commit_horizon == 0 {
            return Err(config_err("stride and commit horizon must be positive"));
        }
        if self.stride > self.commit_horizon {
            return Err(config_err(alloc::format!(
                "stride B = {} exceeds commit horizon L = {}",
                self.stride,
                self.commit_horizon
            )));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(config_err("tau must lie in [0, 1]"));
        }
        if let Some(g) = self.gate_override {
            if !(0.0..=1.0).contains(&g) {
                return Err(config_err("gate override must lie in [0, 1]"));
            }
        }
        if !(self.note_noise >= 0.0 && self.note_noise.is_finite()) {
            return Err(config_err("note noise must be a finite non-negative scale"));
        }
        if self.bus_retain_k < self.stride {
            // a single stride may emit up to B notes; they must survive compaction
            return Err(config_err("bus retain_k must be at least the stride"));
        }
        if self.page_size == Some(0) || self.max_consecutive_rollbacks == 0 {
            return Err(config_err("page size and rollback limit must be positive"));
        }
        self.cadence.validate()?;
        self.gate.validate()
    }

    fn bus_config(&self, n_streams: usize, d_note: usize) -> BusConfig {
        BusConfig {
            capacity: self.bus_capacity,
            retain_k: self.bus_retain_k,
            history: self.bus_history,
            ..BusConfig::new(n_streams, d_note)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PendingNote {
    pub emitted_at: usize,
    pub embedding: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamState {
    pub stream_id: usize,
    pub position: usize,
    pub committed_prefix: usize,
    pub token_log: Vec<u32>,
    pub gate_state: GateState,
    pub rollback_count: usize,
    /// Next replay frame to consume.
    pub cursor: usize,
    /// One past the furthest frame ever consumed.
    pub high_water: usize,
    /// Agreement of each uncommitted token.
    pub scores: Vec<f64>,
    /// Notes emitted this stride, published at the barrier.
    pub pending_notes: Vec<PendingNote>,
    /// Token count at the last note emission.
    pub last_emit: usize,
    pub applied_gate: f64,
    pub consecutive_rollbacks: usize,
    last_pooled: Option<Vec<f64>>,
}

impl StreamState {
    pub fn new(stream_id: usize, gate: GateConfig, l_u: f64) -> Result<Self> {
        Ok(Self {
            stream_id,
            position: 0,
            committed_prefix: 0,
            token_log: Vec::new(),
            gate_state: GateState::new(gate, l_u)?,
            rollback_count: 0,
            cursor: 0,
            high_water: 0,
            scores: Vec::new(),
            pending_notes: Vec::new(),
            last_emit: 0,
            applied_gate: 0.0,
            consecutive_rollbacks: 0,
            last_pooled: None,
        })
    }

    pub fn uncommitted(&self) -> usize {
        self.position - self.committed_prefix
    }
}

/// The sibling notes one stream sees for a whole stride.
#[derive(Debug, Clone, PartialEq)]
pub struct SiblingView {
    pub snapshot_version: u64,
    pub rows: Vec<Vec<f64>>,
    /// Weighted mean of the sibling notes before masking or noise.
    pub pooled: Option<Vec<f64>>,
}

impl SiblingView {
    pub fn empty() -> Self {
        Self {
            snapshot_version: 0,
            rows: Vec::new(),
            pooled: None,
        }
    }
}

/// Read-only inputs shared by every stride of a run.
#[derive(Debug, Clone, Copy)]
pub struct StrideContext<'a> {
    pub artifact: &'a ReplayArtifact,
    pub cfg: &'a DecodeConfig,
}

impl StrideContext<'_> {
    fn learned_gate(&self) -> f64 {
        self.artifact.params.snc.learned_gate()
    }
}

pub struct StrideTask {
    pub state: StreamState,
    pub view: SiblingView,
}

pub struct StrideOutput {
    pub state: StreamState,
    pub events: Vec<TraceEvent>,
}

/// Runs one round of independent stride tasks. Implementations must return
/// outputs in task order.
pub trait StrideExecutor {
    fn execute(&self, ctx: &StrideContext<'_>, tasks: Vec<StrideTask>) -> Result<Vec<StrideOutput>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct SequentialExecutor;

impl StrideExecutor for SequentialExecutor {
    fn execute(&self, ctx: &StrideContext<'_>, tasks: Vec<StrideTask>) -> Result<Vec<StrideOutput>> {
        tasks.into_iter().map(|t| run_stride(ctx, t)).collect()
    }
}

/// Advance one stream by up to `B` tokens against a fixed sibling view.
pub fn run_stride(ctx: &StrideContext<'_>, task: StrideTask) -> Result<StrideOutput> {
    let StrideTask { mut state, view } = task;
    let frames = ctx.artifact.streams[state.stream_id].len();
    let mut events = Vec::new();
    for i in 0..ctx.cfg.stride {
        if state.cursor >= frames {
            break;
        }
        events.extend(step_stream(&mut state, ctx, &view, i == 0)?);
    }
    Ok(StrideOutput { state, events })
}

fn argmax_margin(v: &[f64]) -> (usize, f64) {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    let second = v
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != best)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    (best, v[best] - second)
}

fn normalized_entropy(logits: &[f64]) -> f64 {
    if logits.len() < 2 {
        return 0.0;
    }
    let mut p = vec![0.0; logits.len()];
    tensor::softmax_into(logits, 1.0, &mut p);
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * libm::log(x)).sum();
    h / libm::log(logits.len() as f64)
}

/// Consume one replay frame: adapter, SNC bias, greedy token, agreement and
/// cadence. `stride_start` marks the first token read against `view`.
pub fn step_stream(
    state: &mut StreamState,
    ctx: &StrideContext<'_>,
    view: &SiblingView,
    stride_start: bool,
) -> Result<Vec<TraceEvent>> {
    let art = ctx.artifact;
    let cfg = ctx.cfg;
    let s = state.stream_id;
    let frame = art.streams[s]
        .get(state.cursor)
        .ok_or(Error::State("replay frames exhausted"))?;
    let mut events = Vec::new();

    let mut new_note_event = false;
    if stride_start && view.pooled.is_some() && view.pooled != state.last_pooled {
        let new = view.pooled.as_deref().unwrap();
        let change = match &state.last_pooled {
            Some(old) => tensor::norm2(&new.iter().zip(old).map(|(a, b)| a - b).collect::<Vec<_>>()),
            None => tensor::norm2(new),
        };
        state.gate_state.record_note_change(change);
        state.last_pooled = view.pooled.clone();
        new_note_event = true;
    }
    let (scheduled, actions) = state.gate_state.step(new_note_event, state.applied_gate);
    for action in actions {
        events.push(TraceEvent::Gate {
            stream: s,
            position: state.position,
            action,
        });
    }
    let gate = cfg
        .gate_override
        .unwrap_or_else(|| f64::min(ctx.learned_gate(), scheduled));

    let h = Matrix::row_vector(&frame.hidden)?;
    let adapted = apply_adapter(&h, &art.params.adapters[s])?;
    let rows: Vec<&[f64]> = view.rows.iter().map(Vec::as_slice).collect();
    let residual = snc_context(&adapted, &rows, &art.params.snc)?;

    let mut biased = frame.logits.clone();
    let mut h_out = adapted;
    if let (Some(r), true) = (&residual, gate != 0.0) {
        let bias = tensor::vecmat(r.row(0), &art.params.readout)?;
        for (l, b) in biased.iter_mut().zip(&bias) {
            *l += gate * b;
        }
        h_out = h_out.add(&r.scale(gate))?;
    }
    let (token, margin) = argmax_margin(&biased);

    let agreement = match cfg.agreement_source {
        AgreementSource::Replay if state.cursor < state.high_water => frame.retry_agreement,
        AgreementSource::Replay => frame.agreement,
        AgreementSource::Live => {
            let head = AgreementParams {
                w_agree: art.params.w_agree.clone(),
                b_agree: art.params.b_agree,
                dropout_rate: 0.0,
                tau: cfg.tau,
            };
            agreement_score(h_out.row(0), &head, DropoutMode::Deterministic)?
        }
    };

    events.push(TraceEvent::Token {
        stream: s,
        position: state.position,
        frame: state.cursor,
        token: token as u32,
        agreement,
        gate,
        margin,
    });
    state.token_log.push(token as u32);
    state.scores.push(agreement);
    state.position += 1;
    state.cursor += 1;
    state.high_water = state.high_water.max(state.cursor);
    state.applied_gate = gate;

    let signals = CadenceSignals {
        position: state.position,
        agreement,
        entropy: normalized_entropy(&biased),
        coverage: frame.coverage,
        note_age: state.position - state.last_emit,
        gate,
    };
    if let Some(note) = &frame.note {
        if next_emission(&cfg.cadence, s, &signals) {
            state.pending_notes.push(PendingNote {
                emitted_at: state.position,
                embedding: note.clone(),
            });
            state.last_emit = state.position;
        }
    }
    Ok(events)
}

/// Stride-boundary agreement check. Commits the uncommitted span when every
/// score is at least `τ`, otherwise rewinds it. `pages_dropped` is left at 0
/// for the caller to fill in.
pub fn check_and_rollback(state: &mut StreamState, cfg: &DecodeConfig) -> Option<RollbackEvent> {
    let failing = state.scores.iter().position(|&x| x < cfg.tau);
    let Some(offset) = failing else {
        state.committed_prefix = state.position;
        state.scores.clear();
        state.consecutive_rollbacks = 0;
        return None;
    };
    let trigger = state.committed_prefix + offset;
    let to = match cfg.rollback_scope {
        RollbackScope::FullSpan => state.committed_prefix,
        RollbackScope::FromFailure => trigger,
    };
    let dropped = state.position - to;
    let event = RollbackEvent {
        stream_id: state.stream_id,
        trigger_position: trigger,
        rolled_back_to: to,
        trust_score: state.scores[offset],
        pages_dropped: 0,
    };
    state.token_log.truncate(to);
    state.position = to;
    state.committed_prefix = to;
    if cfg.regeneration == Regeneration::Reconsume {
        state.cursor -= dropped;
    }
    state.scores.clear();
    state.pending_notes.clear();
    state.last_emit = state.last_emit.min(to);
    state.rollback_count += 1;
    state.consecutive_rollbacks += 1;
    Some(event)
}

/// What a stream looks like from outside: the part rollback must restore.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservableState {
    pub token_log: Vec<u32>,
    pub committed_prefix: usize,
    pub live_notes: Vec<Note>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoundReport {
    pub rollbacks: Vec<RollbackEvent>,
    pub finished: bool,
}

/// Stateful driver: one call to [`Decoder::round`] per stride round.
pub struct Decoder<'a> {
    artifact: &'a ReplayArtifact,
    cfg: &'a DecodeConfig,
    bus: NotesBus,
    pages: PageTable,
    states: Vec<StreamState>,
    done: Vec<bool>,
    events: Vec<TraceEvent>,
    rounds: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(artifact: &'a ReplayArtifact, cfg: &'a DecodeConfig) -> Result<Self> {
        cfg.validate()?;
        artifact.validate()?;
        let k = artifact.meta.n_streams;
        if let Some(want) = cfg.n_streams {
            if want != k {
                return Err(input_err(alloc::format!(
                    "config expects {want} streams but the artifact has {k}"
                )));
            }
        }
        let l_u = estimate_lipschitz_layerwise(&artifact.params.snc.notes_pathway())?;
        let states = (0..k)
            .map(|s| StreamState::new(s, cfg.gate.clone(), l_u))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            bus: NotesBus::new(cfg.bus_config(k, artifact.meta.d_note))?,
            pages: PageTable::new(cfg.page_size.unwrap_or(cfg.commit_horizon), k)?,
            states,
            done: vec![false; k],
            events: Vec::new(),
            rounds: 0,
            artifact,
            cfg,
        })
    }

    pub fn state(&self, stream: usize) -> &StreamState {
        &self.states[stream]
    }

    pub fn bus(&self) -> &NotesBus {
        &self.bus
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    pub fn is_finished(&self) -> bool {
        self.done.iter().all(|&d| d)
    }

    pub fn observable(&self, stream: usize) -> ObservableState {
        let st = &self.states[stream];
        ObservableState {
            token_log: st.token_log.clone(),
            committed_prefix: st.committed_prefix,
            live_notes: self.bus.live_notes(stream).to_vec(),
        }
    }

    fn sibling_view(&self, stream: usize) -> SiblingView {
        let d_note = self.artifact.meta.d_note;
        let snap = self.bus.read_lagged(stream, self.cfg.delta);
        let pooled = snap.pooled(d_note);
        let mut rows: Vec<Vec<f64>> = if self.cfg.mask_siblings {
            Vec::new()
        } else {
            snap.notes().map(|n| n.embedding.clone()).collect()
        };
        if self.cfg.note_noise > 0.0 {
            for (r, row) in rows.iter_mut().enumerate() {
                for (j, x) in row.iter_mut().enumerate() {
                    let coords = [
                        domain::NOTE_NOISE,
                        stream as u64,
                        self.rounds as u64,
                        r as u64,
                        j as u64,
                    ];
                    *x += self.cfg.note_noise * rng::normal_at(self.cfg.seed, &coords);
                }
            }
        }
        SiblingView {
            snapshot_version: snap.snapshot_version,
            rows,
            pooled,
        }
    }

    /// Run one stride round and its barrier.
    pub fn round(&mut self, exec: &dyn StrideExecutor) -> Result<RoundReport> {
        let active: Vec<usize> = (0..self.states.len()).filter(|&s| !self.done[s]).collect();
        if active.is_empty() {
            return Ok(RoundReport {
                rollbacks: Vec::new(),
                finished: true,
            });
        }
        let tasks = active
            .iter()
            .map(|&s| StrideTask {
                view: self.sibling_view(s),
                state: self.states[s].clone(),
            })
            .collect();
        let ctx = StrideContext {
            artifact: self.artifact,
            cfg: self.cfg,
        };
        let outputs = exec.execute(&ctx, tasks)?;
        if outputs.len() != active.len() {
            return Err(Error::State("executor returned the wrong number of strides"));
        }

        // barrier: tokens and pages, then note publication
        let mut published = false;
        let mut max_pos = 0;
        for (&s, out) in active.iter().zip(outputs) {
            if out.state.stream_id != s {
                return Err(Error::State("executor reordered strides"));
            }
            self.events.extend(out.events);
            self.states[s] = out.state;
            let st = &mut self.states[s];
            self.pages.page_place(
                s,
                st.committed_prefix..st.position,
                self.cfg.commit_horizon,
                PlacementPolicy::Aligned,
            )?;
            for note in core::mem::take(&mut st.pending_notes) {
                let version = self.bus.publish(s, note.embedding, note.emitted_at)?;
                self.events.push(TraceEvent::Note {
                    stream: s,
                    version,
                    emitted_at: note.emitted_at,
                });
                published = true;
            }
            max_pos = max_pos.max(st.position);
        }
        if published {
            self.push_snapshot(max_pos);
        }

        // barrier: agreement checks
        let mut rollbacks = Vec::new();
        for &s in &active {
            let st = &mut self.states[s];
            if let Some(mut ev) = check_and_rollback(st, self.cfg) {
                if st.consecutive_rollbacks >= self.cfg.max_consecutive_rollbacks {
                    return Err(Error::State("stream keeps failing its agreement check"));
                }
                self.bus.tombstone_from(s, ev.rolled_back_to + 1)?;
                ev.pages_dropped = self.pages.rollback(s, ev.rolled_back_to)?;
                self.events.push(TraceEvent::Rollback(ev));
                rollbacks.push(ev);
            }
        }
        if !rollbacks.is_empty() {
            self.push_snapshot(max_pos);
        }

        for &s in &active {
            let st = &self.states[s];
            if st.cursor >= self.artifact.streams[s].len() {
                self.done[s] = true;
                self.events.push(TraceEvent::EndOfStream {
                    stream: s,
                    position: st.position,
                });
            }
        }
        self.rounds += 1;
        Ok(RoundReport {
            rollbacks,
            finished: self.is_finished(),
        })
    }

    fn push_snapshot(&mut self, at_token: usize) {
        let version = self.bus.snapshot(at_token);
        self.events.push(TraceEvent::Snapshot {
            version,
            rows: self.bus.total_rows(),
            at_token,
        });
    }

    pub fn run(mut self, exec: &dyn StrideExecutor) -> Result<DecodeTrace> {
        while !self.round(exec)?.finished {}
        Ok(self.finish())
    }

    pub fn finish(self) -> DecodeTrace {
        DecodeTrace {
            events: self.events,
            token_logs: self.states.into_iter().map(|s| s.token_log).collect(),
            final_bus: self.bus.dump(),
        }
    }
}

/// Decode every stream of `artifact` to completion on the calling thread.
pub fn run_parallel(artifact: &ReplayArtifact, cfg: &DecodeConfig) -> Result<DecodeTrace> {
    run_with(artifact, cfg, &SequentialExecutor)
}

pub fn run_with(artifact: &ReplayArtifact, cfg: &DecodeConfig, exec: &dyn StrideExecutor) -> Result<DecodeTrace> {
    Decoder::new(artifact, cfg)?.run(exec)
}
