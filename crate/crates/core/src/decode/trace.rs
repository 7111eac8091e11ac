use alloc::vec::Vec;

use crate::bus::Note;
use crate::canon::Canon;
use crate::snc::GateAction;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RollbackEvent {
    pub stream_id: usize,
    /// Index of the first token whose agreement fell below `τ`.
    pub trigger_position: usize,
    pub rolled_back_to: usize,
    pub trust_score: f64,
    pub pages_dropped: usize,
}

/// One trace record. Token positions are 0-based token indices; note
/// `emitted_at` is the number of tokens the stream had produced at emission.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceEvent {
    Token {
        stream: usize,
        position: usize,
        frame: usize,
        token: u32,
        agreement: f64,
        gate: f64,
        /// Gap between the best and second-best biased logit.
        margin: f64,
    },
    Note {
        stream: usize,
        version: u64,
        emitted_at: usize,
    },
    Snapshot {
        version: u64,
        rows: usize,
        at_token: usize,
    },
    Rollback(RollbackEvent),
    Gate {
        stream: usize,
        position: usize,
        action: GateAction,
    },
    EndOfStream {
        stream: usize,
        position: usize,
    },
}

impl TraceEvent {
    pub fn kind(&self) -> &'static str {
        match self {
            TraceEvent::Token { .. } => "TOKEN",
            TraceEvent::Note { .. } => "NOTE",
            TraceEvent::Snapshot { .. } => "SNAPSHOT",
            TraceEvent::Rollback(_) => "ROLLBACK",
            TraceEvent::Gate { .. } => "GATE",
            TraceEvent::EndOfStream { .. } => "END",
        }
    }

    fn absorb(&self, c: &mut Canon) {
        match *self {
            TraceEvent::Token {
                stream,
                position,
                frame,
                token,
                agreement,
                gate,
                margin,
            } => {
                c.u64(1).usize(stream).usize(position).usize(frame).u64(token as u64);
                c.f64(agreement).f64(gate).f64(margin);
            }
            TraceEvent::Note {
                stream,
                version,
                emitted_at,
            } => {
                c.u64(2).usize(stream).u64(version).usize(emitted_at);
            }
            TraceEvent::Snapshot {
                version,
                rows,
                at_token,
            } => {
                c.u64(3).u64(version).usize(rows).usize(at_token);
            }
            TraceEvent::Rollback(r) => {
                c.u64(4)
                    .usize(r.stream_id)
                    .usize(r.trigger_position)
                    .usize(r.rolled_back_to);
                c.f64(r.trust_score).usize(r.pages_dropped);
            }
            TraceEvent::Gate {
                stream,
                position,
                action,
            } => {
                c.u64(5).usize(stream).usize(position);
                match action {
                    GateAction::Backoff { g_max } => c.u64(0).f64(g_max),
                    GateAction::SpectralNormalize { l_u } => c.u64(1).f64(l_u),
                };
            }
            TraceEvent::EndOfStream { stream, position } => {
                c.u64(6).usize(stream).usize(position);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeTrace {
    pub events: Vec<TraceEvent>,
    /// Final committed tokens per stream.
    pub token_logs: Vec<Vec<u32>>,
    /// Live bus at the end of the run, in `(stream, version)` order.
    pub final_bus: Vec<Note>,
}

impl DecodeTrace {
    pub fn rollbacks(&self) -> impl Iterator<Item = &RollbackEvent> {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Rollback(r) => Some(r),
            _ => None,
        })
    }

    pub fn count(&self, kind: &str) -> usize {
        self.events.iter().filter(|e| e.kind() == kind).count()
    }

    /// Applied gate values of every generated token (including rolled-back ones).
    pub fn gate_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.events.iter().filter_map(|e| match e {
            TraceEvent::Token { gate, .. } => Some(*gate),
            _ => None,
        })
    }

    /// SHA-256 over the canonical encoding of events, token logs and final bus.
    pub fn hash(&self) -> [u8; 32] {
        let mut c = Canon::new(b"pdt-trace-v1");
        c.usize(self.events.len());
        for e in &self.events {
            e.absorb(&mut c);
        }
        c.usize(self.token_logs.len());
        for log in &self.token_logs {
            c.usize(log.len());
            for &t in log {
                c.u64(t as u64);
            }
        }
        c.usize(self.final_bus.len());
        for n in &self.final_bus {
            c.usize(n.stream_id).u64(n.version).usize(n.emitted_at).u64(n.weight);
            c.u64(n.schema as u64).f64s(&n.embedding);
        }
        c.finish()
    }
}

/// Lower-case hex rendering of a digest.
pub fn hex(digest: &[u8; 32]) -> alloc::string::String {
    use core::fmt::Write;
    let mut s = alloc::string::String::with_capacity(64);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}
