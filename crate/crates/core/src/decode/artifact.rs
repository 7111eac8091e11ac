//! Logit-replay artifacts: precomputed per-token frames plus the small set of
//! weights the controller needs to run adapters, SNC and the bias read-out.

use alloc::vec::Vec;

use crate::error::{config_err, input_err, Error, Result};
use crate::rng::{self, domain, SplitMix64};
use crate::snc::{AdapterParams, SncParams};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArtifactMeta {
    pub vocab_size: usize,
    pub n_streams: usize,
    pub d: usize,
    pub d_note: usize,
    pub d_bottleneck: usize,
    pub d_attn: usize,
    pub seed: u64,
}

/// One precomputed decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayFrame {
    pub logits: Vec<f64>,
    pub hidden: Vec<f64>,
    pub agreement: f64,
    /// Score used when the frame is consumed again after a rollback.
    pub retry_agreement: f64,
    /// Coverage estimate in `[0, 1]` for adaptive cadence.
    pub coverage: f64,
    pub note: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// One adapter per stream.
    pub adapters: Vec<AdapterParams>,
    pub snc: SncParams,
    pub w_agree: Vec<f64>,
    pub b_agree: f64,
    /// `d × vocab` read-out turning the SNC context into a logit bias.
    pub readout: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplayArtifact {
    pub meta: ArtifactMeta,
    pub params: ModelParams,
    pub streams: Vec<Vec<ReplayFrame>>,
}

impl ReplayArtifact {
    pub fn validate(&self) -> Result<()> {
        let m = &self.meta;
        if m.vocab_size == 0 || m.d < 2 || m.d_note == 0 {
            return Err(input_err("artifact needs vocab > 0, d >= 2 and d_note > 0"));
        }
        if self.streams.len() != m.n_streams || m.n_streams == 0 {
            return Err(input_err(alloc::format!(
                "artifact declares {} streams but holds {}",
                m.n_streams,
                self.streams.len()
            )));
        }
        let p = &self.params;
        if p.adapters.len() != m.n_streams {
            return Err(input_err("one adapter per stream is required"));
        }
        for a in &p.adapters {
            if a.d() != m.d || a.bottleneck() != m.d_bottleneck {
                return Err(shape("adapter", (m.d, m.d_bottleneck), a.w_down.shape()));
            }
        }
        if p.snc.d() != m.d || p.snc.d_note != m.d_note || p.snc.attn_dim() != m.d_attn {
            return Err(shape("snc", (m.d, m.d_attn), p.snc.w_q.shape()));
        }
        if p.w_agree.len() != m.d {
            return Err(shape("w_agree", (1, m.d), (1, p.w_agree.len())));
        }
        if p.readout.shape() != (m.d, m.vocab_size) {
            return Err(shape("readout", (m.d, m.vocab_size), p.readout.shape()));
        }
        for (s, frames) in self.streams.iter().enumerate() {
            if frames.is_empty() {
                return Err(input_err(alloc::format!("stream {s} has no frames")));
            }
            for f in frames {
                if f.logits.len() != m.vocab_size {
                    return Err(shape("logits", (1, m.vocab_size), (1, f.logits.len())));
                }
                if f.hidden.len() != m.d {
                    return Err(shape("hidden", (1, m.d), (1, f.hidden.len())));
                }
                if let Some(n) = &f.note {
                    if n.len() != m.d_note {
                        return Err(shape("note", (1, m.d_note), (1, n.len())));
                    }
                }
                let finite = f
                    .logits
                    .iter()
                    .chain(&f.hidden)
                    .chain(f.note.iter().flatten())
                    .all(|x| x.is_finite())
                    && [f.agreement, f.retry_agreement, f.coverage]
                        .iter()
                        .all(|x| x.is_finite());
                if !finite {
                    return Err(Error::NonFinite("replay frame"));
                }
            }
        }
        Ok(())
    }
}

fn shape(op: &'static str, expected: (usize, usize), found: (usize, usize)) -> Error {
    Error::Shape { op, expected, found }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub n_streams: usize,
    pub length: usize,
    pub vocab_size: usize,
    pub d: usize,
    pub d_note: usize,
    pub d_bottleneck: usize,
    pub d_attn: usize,
    pub seed: u64,
    /// SNC gate logit; `logistic(gamma)` is the learned gate.
    pub gamma: f64,
    /// `(stream, frame index)` pairs whose agreement is forced low.
    pub planted_divergences: Vec<(usize, usize)>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_streams: 3,
            length: 128,
            vocab_size: 32,
            d: 16,
            d_note: 8,
            d_bottleneck: 4,
            d_attn: 8,
            seed: 0,
            gamma: 0.0,
            planted_divergences: Vec::new(),
        }
    }
}

/// Agreement of a planted divergence; below any useful trust threshold.
pub const PLANTED_AGREEMENT: f64 = 0.02;
/// Lowest agreement of an ordinary frame.
pub const CLEAN_AGREEMENT_FLOOR: f64 = 0.7;

fn gaussian(rng: &mut SplitMix64, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.next_normal() * scale).collect();
    Matrix::new(rows, cols, data).expect("finite gaussian draws")
}

/// Build a seeded pseudo-random artifact.
pub fn synthesize_artifact(spec: &SynthSpec) -> Result<ReplayArtifact> {
    if spec.n_streams == 0 || spec.length == 0 || spec.vocab_size < 2 {
        return Err(config_err("synthesis needs streams, length and vocab >= 2"));
    }
    if spec.d < 2 || spec.d_note == 0 || spec.d_bottleneck == 0 || spec.d_attn == 0 {
        return Err(config_err("synthesis dimensions must be positive (d >= 2)"));
    }
    for &(s, p) in &spec.planted_divergences {
        if s >= spec.n_streams || p >= spec.length {
            return Err(config_err(alloc::format!(
                "planted divergence ({s}, {p}) outside {} streams x {} frames",
                spec.n_streams,
                spec.length
            )));
        }
    }
    let seed = spec.seed;
    let mut prng = SplitMix64::new(rng::key(seed, &[domain::SYNTH, u64::MAX]));
    let d = spec.d;
    let inv = |n: usize| 1.0 / libm::sqrt(n as f64);

    let adapters = (0..spec.n_streams)
        .map(|_| {
            let down = gaussian(&mut prng, d, spec.d_bottleneck, inv(d));
            let up = gaussian(&mut prng, spec.d_bottleneck, d, 0.1 * inv(spec.d_bottleneck));
            AdapterParams::new(down, up, 1e-5)
        })
        .collect::<Result<Vec<_>>>()?;
    let snc = SncParams::new(
        gaussian(&mut prng, d, spec.d_attn, inv(d)),
        gaussian(&mut prng, spec.d_note, spec.d_attn, inv(spec.d_note)),
        gaussian(&mut prng, spec.d_note, spec.d_attn, inv(spec.d_note)),
        gaussian(&mut prng, spec.d_attn, d, inv(spec.d_attn)),
        spec.gamma,
    )?;
    let w_agree = gaussian(&mut prng, 1, d, 0.1 * inv(d)).into_data();
    let readout = gaussian(&mut prng, d, spec.vocab_size, inv(d));

    let streams = (0..spec.n_streams)
        .map(|s| {
            let mut r = SplitMix64::new(rng::key(seed, &[domain::SYNTH, s as u64]));
            (0..spec.length)
                .map(|p| {
                    let logits = (0..spec.vocab_size).map(|_| 2.0 * r.next_normal()).collect();
                    let hidden = (0..d).map(|_| r.next_normal()).collect();
                    let note = (0..spec.d_note).map(|_| r.next_normal()).collect();
                    let clean = CLEAN_AGREEMENT_FLOOR + (1.0 - CLEAN_AGREEMENT_FLOOR) * r.next_f64();
                    let retry = CLEAN_AGREEMENT_FLOOR + (1.0 - CLEAN_AGREEMENT_FLOOR) * r.next_f64();
                    let coverage = r.next_f64();
                    let planted = spec.planted_divergences.contains(&(s, p));
                    ReplayFrame {
                        logits,
                        hidden,
                        agreement: if planted { PLANTED_AGREEMENT } else { clean },
                        retry_agreement: retry,
                        coverage,
                        note: Some(note),
                    }
                })
                .collect()
        })
        .collect();

    let artifact = ReplayArtifact {
        meta: ArtifactMeta {
            vocab_size: spec.vocab_size,
            n_streams: spec.n_streams,
            d,
            d_note: spec.d_note,
            d_bottleneck: spec.d_bottleneck,
            d_attn: spec.d_attn,
            seed,
        },
        params: ModelParams {
            adapters,
            snc,
            w_agree,
            b_agree: 0.0,
            readout,
        },
        streams,
    };
    artifact.validate()?;
    Ok(artifact)
}

#[cfg(test)]
/// Zero matrix helper for hand-built artifacts in tests.
pub(crate) fn zero_adapters(n: usize, d: usize, bottleneck: usize) -> Vec<AdapterParams> {
    alloc::vec![AdapterParams::new(Matrix::zeros(d, bottleneck), Matrix::zeros(bottleneck, d), 1e-5).unwrap(); n]
}
