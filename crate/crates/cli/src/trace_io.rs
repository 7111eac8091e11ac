//! Text trace files: one event per line, fields in a fixed order, reals in
//! shortest round-trip form.

use std::fmt::Write as _;
use std::path::Path;

use pdt_core::decode::{hex, DecodeTrace, TraceEvent};
use pdt_core::snc::GateAction;

use crate::error::{CliError, Result};

pub const HEADER: &str = "# pdt-trace v1";

fn join(vs: &[f64]) -> String {
    vs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn render(trace: &DecodeTrace) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{HEADER}");
    let _ = writeln!(out, "# sha256 {}", hex(&trace.hash()));
    for e in &trace.events {
        let line = match e {
            TraceEvent::Token {
                stream,
                position,
                frame,
                token,
                agreement,
                gate,
                margin,
            } => format!(
                "TOKEN stream={stream} position={position} frame={frame} token={token} agreement={agreement} gate={gate} margin={margin}"
            ),
            TraceEvent::Note {
                stream,
                version,
                emitted_at,
            } => format!("NOTE stream={stream} version={version} emitted_at={emitted_at}"),
            TraceEvent::Snapshot {
                version,
                rows,
                at_token,
            } => format!("SNAPSHOT version={version} rows={rows} at_token={at_token}"),
            TraceEvent::Rollback(r) => format!(
                "ROLLBACK stream={} trigger_position={} rolled_back_to={} trust_score={} pages_dropped={}",
                r.stream_id, r.trigger_position, r.rolled_back_to, r.trust_score, r.pages_dropped
            ),
            TraceEvent::Gate {
                stream,
                position,
                action,
            } => match action {
                GateAction::Backoff { g_max } => {
                    format!("GATE stream={stream} position={position} action=backoff g_max={g_max}")
                }
                GateAction::SpectralNormalize { l_u } => {
                    format!("GATE stream={stream} position={position} action=spectral_normalize l_u={l_u}")
                }
            },
            TraceEvent::EndOfStream { stream, position } => format!("END stream={stream} position={position}"),
        };
        out.push_str(&line);
        out.push('\n');
    }
    for (s, log) in trace.token_logs.iter().enumerate() {
        let tokens: Vec<String> = log.iter().map(|t| t.to_string()).collect();
        let _ = writeln!(out, "LOG stream={s} len={} tokens={}", log.len(), tokens.join(","));
    }
    for n in &trace.final_bus {
        let _ = writeln!(
            out,
            "BUS stream={} version={} emitted_at={} schema={} weight={} embedding={}",
            n.stream_id,
            n.version,
            n.emitted_at,
            n.schema.as_str(),
            n.weight,
            join(&n.embedding)
        );
    }
    out
}

pub fn write(path: &Path, trace: &DecodeTrace) -> Result<()> {
    std::fs::write(path, render(trace)).map_err(|e| CliError::io(path, e))
}
