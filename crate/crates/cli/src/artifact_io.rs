//! `PDTR1` replay artifact container.
//!
//! Layout, all integers `u64` and all reals `f64`, little-endian:
//!
//! ```text
//! magic "PDTR1\0\0\0"
//! vocab K d d_note d_bottleneck d_attn seed
//! K × adapter      w_down[d×b] w_up[b×d] ln_eps
//! snc              w_q[d×a] w_k[dn×a] w_v[dn×a] w_o[a×d] gamma
//! agreement head   w_agree[d] b_agree
//! readout[d×vocab]
//! K × stream       n_frames, then per frame:
//!                  logits[vocab] hidden[d] agreement retry_agreement coverage
//!                  has_note:u8 [note[dn]]
//! ```
//!
//! Matrices are row-major.

use std::path::Path;

use pdt_core::decode::{ArtifactMeta, ModelParams, ReplayArtifact, ReplayFrame};
use pdt_core::snc::{AdapterParams, SncParams};
use pdt_core::Matrix;

use crate::error::{CliError, Result};

pub const MAGIC: &[u8; 8] = b"PDTR1\0\0\0";
const WHAT: &str = "artifact";

pub fn encode(a: &ReplayArtifact) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    let m = &a.meta;
    for v in [m.vocab_size, m.n_streams, m.d, m.d_note, m.d_bottleneck, m.d_attn] {
        w.u64(v as u64);
    }
    w.u64(m.seed);
    let p = &a.params;
    for ad in &p.adapters {
        w.matrix(&ad.w_down);
        w.matrix(&ad.w_up);
        w.f64(ad.ln_eps);
    }
    for mat in [&p.snc.w_q, &p.snc.w_k, &p.snc.w_v, &p.snc.w_o] {
        w.matrix(mat);
    }
    w.f64(p.snc.gamma);
    w.f64s(&p.w_agree);
    w.f64(p.b_agree);
    w.matrix(&p.readout);
    for frames in &a.streams {
        w.u64(frames.len() as u64);
        for f in frames {
            w.f64s(&f.logits);
            w.f64s(&f.hidden);
            w.f64(f.agreement);
            w.f64(f.retry_agreement);
            w.f64(f.coverage);
            match &f.note {
                Some(n) => {
                    w.0.push(1);
                    w.f64s(n);
                }
                None => w.0.push(0),
            }
        }
    }
    w.0
}

pub fn decode(buf: &[u8]) -> Result<ReplayArtifact> {
    let mut r = Reader { buf, pos: 0 };
    let magic = r.take(MAGIC.len(), "magic")?;
    if magic != MAGIC {
        return Err(r.err_at(0, "bad magic; expected PDTR1"));
    }
    let mut dims = [0usize; 6];
    for (slot, name) in dims
        .iter_mut()
        .zip(["vocab", "streams", "d", "d_note", "d_bottleneck", "d_attn"])
    {
        *slot = r.dim(name)?;
    }
    let [vocab, k, d, dn, b, a] = dims;
    let seed = r.u64("seed")?;

    let mut adapters = Vec::with_capacity(k.min(1024));
    for _ in 0..k {
        let at = r.pos;
        let down = r.matrix(d, b, "adapter w_down")?;
        let up = r.matrix(b, d, "adapter w_up")?;
        let eps = r.f64("adapter ln_eps")?;
        adapters.push(AdapterParams::new(down, up, eps).map_err(|e| r.err_at(at, e))?);
    }
    let at = r.pos;
    let w_q = r.matrix(d, a, "snc w_q")?;
    let w_k = r.matrix(dn, a, "snc w_k")?;
    let w_v = r.matrix(dn, a, "snc w_v")?;
    let w_o = r.matrix(a, d, "snc w_o")?;
    let gamma = r.f64("snc gamma")?;
    let snc = SncParams::new(w_q, w_k, w_v, w_o, gamma).map_err(|e| r.err_at(at, e))?;
    let w_agree = r.f64s(d, "w_agree")?;
    let b_agree = r.f64("b_agree")?;
    let readout = r.matrix(d, vocab, "readout")?;

    // smallest possible frame: logits, hidden, three scores and the note flag
    let min_frame = 8 * (vocab + d + 3) + 1;
    let mut streams = Vec::with_capacity(k.min(1024));
    for s in 0..k {
        let at = r.pos;
        let n = r.u64("frame count")?;
        if n.checked_mul(min_frame as u64)
            .is_none_or(|need| need > r.remaining() as u64)
        {
            return Err(r.err_at(at, format!("stream {s} declares {n} frames, more than the file holds")));
        }
        let mut frames = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let logits = r.f64s(vocab, "logits")?;
            let hidden = r.f64s(d, "hidden")?;
            let agreement = r.f64("agreement")?;
            let retry_agreement = r.f64("retry agreement")?;
            let coverage = r.f64("coverage")?;
            let flag_at = r.pos;
            let note = match r.take(1, "note flag")?[0] {
                0 => None,
                1 => Some(r.f64s(dn, "note")?),
                other => return Err(r.err_at(flag_at, format!("note flag must be 0 or 1, found {other}"))),
            };
            frames.push(ReplayFrame {
                logits,
                hidden,
                agreement,
                retry_agreement,
                coverage,
                note,
            });
        }
        streams.push(frames);
    }
    if r.remaining() > 0 {
        return Err(r.err_at(r.pos, format!("{} trailing bytes", r.remaining())));
    }
    let artifact = ReplayArtifact {
        meta: ArtifactMeta {
            vocab_size: vocab,
            n_streams: k,
            d,
            d_note: dn,
            d_bottleneck: b,
            d_attn: a,
            seed,
        },
        params: ModelParams {
            adapters,
            snc,
            w_agree,
            b_agree,
            readout,
        },
        streams,
    };
    artifact.validate()?;
    Ok(artifact)
}

pub fn read(path: &Path) -> Result<ReplayArtifact> {
    let buf = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&buf)
}

pub fn write(path: &Path, a: &ReplayArtifact) -> Result<usize> {
    let bytes = encode(a);
    std::fs::write(path, &bytes).map_err(|e| CliError::io(path, e))?;
    Ok(bytes.len())
}

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        for &v in vs {
            self.f64(v);
        }
    }

    fn matrix(&mut self, m: &Matrix) {
        self.f64s(m.data());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn err_at(&self, offset: usize, msg: impl ToString) -> CliError {
        CliError::Parse {
            what: WHAT,
            offset,
            msg: msg.to_string(),
        }
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(self.err_at(
                self.pos,
                format!("truncated {field}: need {n} bytes, {} left", self.remaining()),
            ));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        let b = self.take(8, field)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn dim(&mut self, field: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(field)?;
        // a dimension cannot exceed the number of reals the file could hold
        if v > (self.buf.len() / 8) as u64 {
            return Err(self.err_at(
                at,
                format!("{field} = {v} cannot fit in a {}-byte file", self.buf.len()),
            ));
        }
        Ok(v as usize)
    }

    fn f64(&mut self, field: &str) -> Result<f64> {
        let b = self.take(8, field)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize, field: &str) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| self.err_at(self.pos, format!("{field} length overflows")))?;
        let raw = self.take(bytes, field)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize, field: &str) -> Result<Matrix> {
        let at = self.pos;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| self.err_at(at, format!("{field} size overflows")))?;
        let data = self.f64s(n, field)?;
        Matrix::new(rows, cols, data).map_err(|e| self.err_at(at, format!("{field}: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use pdt_core::decode::{synthesize_artifact, SynthSpec};

    fn small() -> ReplayArtifact {
        synthesize_artifact(&SynthSpec {
            length: 9,
            planted_divergences: vec![(1, 4)],
            ..SynthSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let a = small();
        let bytes = encode(&a);
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(decode(&bytes).unwrap(), a);
    }

    #[test]
    fn absent_notes_round_trip() {
        let mut a = small();
        a.streams[0][2].note = None;
        assert_eq!(decode(&encode(&a)).unwrap(), a);
    }

    #[test]
    fn truncation_reports_the_offset() {
        let bytes = encode(&small());
        let cut = bytes.len() - 5;
        match decode(&bytes[..cut]) {
            Err(CliError::Parse { offset, .. }) => assert!(offset <= cut && offset + 64 > cut),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_and_trailing_bytes() {
        let mut bytes = encode(&small());
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(CliError::Parse { offset: 0, .. })));
        let mut bytes = encode(&small());
        let len = bytes.len();
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(CliError::Parse { offset, .. }) if offset == len));
    }

    #[test]
    fn bad_note_flag_is_located() {
        let a = small();
        let bytes = encode(&a);
        // first note flag follows the first frame's fixed-size fields
        let m = &a.meta;
        let header = 8 + 7 * 8;
        let adapters = m.n_streams * (2 * m.d * m.d_bottleneck + 1) * 8;
        let snc = (m.d * m.d_attn + 2 * m.d_note * m.d_attn + m.d_attn * m.d + 1) * 8;
        let head = (m.d + 1) * 8 + m.d * m.vocab_size * 8;
        let flag = header + adapters + snc + head + 8 + (m.vocab_size + m.d + 3) * 8;
        let mut bad = bytes.clone();
        assert_eq!(bad[flag], 1);
        bad[flag] = 7;
        assert!(matches!(decode(&bad), Err(CliError::Parse { offset, .. }) if offset == flag));
    }

    #[test]
    fn absurd_frame_counts_fail_cleanly() {
        let a = small();
        let mut bytes = encode(&a);
        let m = &a.meta;
        let header = 8 + 7 * 8;
        let adapters = m.n_streams * (2 * m.d * m.d_bottleneck + 1) * 8;
        let snc = (m.d * m.d_attn + 2 * m.d_note * m.d_attn + m.d_attn * m.d + 1) * 8;
        let head = (m.d + 1) * 8 + m.d * m.vocab_size * 8;
        let at = header + adapters + snc + head;
        bytes[at..at + 8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(CliError::Parse { offset, .. }) if offset == at));
    }
}
