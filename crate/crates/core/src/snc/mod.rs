//! Stream adapters and note-conditioned cross-attention.
//!
//! Hidden states are row-major `(tokens × d)`; projections multiply on the
//! right, so the adapter is `H + GELU(LN(H)·W_down)·W_up` and the SNC block is
//! `H + λ·softmax(Q·Kᵀ/√a)·V·W_O` with `Q = H·W_Q`, `K = N·W_K`, `V = N·W_V`.

mod agreement;
mod gate;

pub use agreement::{agreement_score, AgreementParams, DropoutMode};
pub use gate::{gate_controller_step, GateAction, GateConfig, GateState};

use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::tensor::{self, gelu, layer_norm, logistic, matmul, spectral_norm, Matrix};

/// Bottleneck adapter weights for one stream.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    /// `d × d_bottleneck`
    pub w_down: Matrix,
    /// `d_bottleneck × d`
    pub w_up: Matrix,
    pub ln_eps: f64,
}

impl AdapterParams {
    pub fn new(w_down: Matrix, w_up: Matrix, ln_eps: f64) -> Result<Self> {
        let (d, b) = w_down.shape();
        if w_up.shape() != (b, d) {
            return Err(Error::Shape {
                op: "AdapterParams::new",
                expected: (b, d),
                found: w_up.shape(),
            });
        }
        if b >= d {
            return Err(config_err("adapter bottleneck must be narrower than d"));
        }
        if !(ln_eps >= 0.0) {
            return Err(config_err("ln_eps must be non-negative"));
        }
        Ok(Self { w_down, w_up, ln_eps })
    }

    pub fn d(&self) -> usize {
        self.w_down.rows()
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down.cols()
    }
}

pub fn apply_adapter(h: &Matrix, p: &AdapterParams) -> Result<Matrix> {
    if h.cols() != p.d() {
        return Err(Error::Shape {
            op: "apply_adapter",
            expected: (h.rows(), p.d()),
            found: h.shape(),
        });
    }
    let normed = layer_norm(h, p.ln_eps)?;
    let hidden = matmul(&normed, &p.w_down)?.map(gelu);
    h.add(&matmul(&hidden, &p.w_up)?)
}

/// Projections and gate pre-activation of one SNC injection site.
#[derive(Debug, Clone, PartialEq)]
pub struct SncParams {
    /// `d × a`
    pub w_q: Matrix,
    /// `d_note × a`
    pub w_k: Matrix,
    /// `d_note × a`
    pub w_v: Matrix,
    /// `a × d`
    pub w_o: Matrix,
    pub gamma: f64,
    pub d_note: usize,
}

impl SncParams {
    pub fn new(w_q: Matrix, w_k: Matrix, w_v: Matrix, w_o: Matrix, gamma: f64) -> Result<Self> {
        let (d, a) = w_q.shape();
        let d_note = w_k.rows();
        for (name, m, want) in [
            ("w_k", &w_k, (d_note, a)),
            ("w_v", &w_v, (d_note, a)),
            ("w_o", &w_o, (a, d)),
        ] {
            if m.shape() != want {
                return Err(Error::Shape {
                    op: name,
                    expected: want,
                    found: m.shape(),
                });
            }
        }
        if !gamma.is_finite() {
            return Err(Error::NonFinite("SncParams::gamma"));
        }
        Ok(Self {
            w_q,
            w_k,
            w_v,
            w_o,
            gamma,
            d_note,
        })
    }

    pub fn d(&self) -> usize {
        self.w_q.rows()
    }

    pub fn attn_dim(&self) -> usize {
        self.w_q.cols()
    }

    /// The learned trust gate `λ = logistic(γ)`.
    pub fn learned_gate(&self) -> f64 {
        logistic(self.gamma)
    }

    /// The value/output pathway through which notes reach the hidden state.
    pub fn notes_pathway(&self) -> [Matrix; 2] {
        [self.w_v.clone(), self.w_o.clone()]
    }
}

/// The ungated residual `C·W_O` over the given note rows.
///
/// Returns `None` when there are no rows to attend to.
pub fn snc_context(h: &Matrix, note_rows: &[&[f64]], p: &SncParams) -> Result<Option<Matrix>> {
    if h.cols() != p.d() {
        return Err(Error::Shape {
            op: "snc_attend",
            expected: (h.rows(), p.d()),
            found: h.shape(),
        });
    }
    if note_rows.is_empty() {
        return Ok(None);
    }
    let a = p.attn_dim();
    let mut keys = Vec::with_capacity(note_rows.len());
    let mut values = Vec::with_capacity(note_rows.len());
    for row in note_rows {
        if row.len() != p.d_note {
            return Err(Error::Shape {
                op: "snc_attend",
                expected: (1, p.d_note),
                found: (1, row.len()),
            });
        }
        keys.push(tensor::vecmat(row, &p.w_k)?);
        values.push(tensor::vecmat(row, &p.w_v)?);
    }
    let q = matmul(h, &p.w_q)?;
    let scale = 1.0 / libm::sqrt(a as f64);
    let mut weights = alloc::vec![0.0; keys.len()];
    let mut scores = alloc::vec![0.0; keys.len()];
    let mut ctx = Vec::with_capacity(h.rows() * a);
    for r in 0..h.rows() {
        let qr = q.row(r);
        for (s, k) in scores.iter_mut().zip(&keys) {
            *s = tensor::dot(qr, k);
        }
        tensor::softmax_into(&scores, scale, &mut weights);
        let mut c = alloc::vec![0.0; a];
        for (w, v) in weights.iter().zip(&values) {
            for (ci, vi) in c.iter_mut().zip(v) {
                *ci += w * vi;
            }
        }
        ctx.extend_from_slice(&c);
    }
    let ctx = Matrix::new(h.rows(), a, ctx)?;
    Ok(Some(matmul(&ctx, &p.w_o)?))
}

fn gated(h: &Matrix, residual: Option<Matrix>, gate: f64) -> Result<Matrix> {
    match residual {
        Some(r) if gate != 0.0 => h.add(&r.scale(gate)),
        _ => Ok(h.clone()),
    }
}

/// Trust-gated cross-attention over the union of sibling note blocks.
///
/// Sibling blocks may have different row counts. The gate is
/// `gate_override` when given, otherwise `logistic(γ)`; a zero gate or an
/// empty sibling set returns `h` unchanged.
pub fn snc_attend(h: &Matrix, sibling_notes: &[Matrix], p: &SncParams, gate_override: Option<f64>) -> Result<Matrix> {
    let mut rows = Vec::new();
    for n in sibling_notes {
        if n.cols() != p.d_note {
            return Err(Error::Shape {
                op: "snc_attend",
                expected: (n.rows(), p.d_note),
                found: n.shape(),
            });
        }
        rows.extend((0..n.rows()).map(|r| n.row(r)));
    }
    let gate = gate_override.unwrap_or_else(|| p.learned_gate());
    gated(h, snc_context(h, &rows, p)?, gate)
}

/// [`snc_attend`] over a padded note matrix; rows whose mask entry is false
/// are dropped before the reduction, so they cannot influence the output.
pub fn snc_attend_masked(
    h: &Matrix,
    notes: &Matrix,
    mask: &[bool],
    p: &SncParams,
    gate_override: Option<f64>,
) -> Result<Matrix> {
    if mask.len() != notes.rows() {
        return Err(Error::Shape {
            op: "snc_attend_masked",
            expected: (notes.rows(), 1),
            found: (mask.len(), 1),
        });
    }
    let rows: Vec<&[f64]> = (0..notes.rows()).filter(|&r| mask[r]).map(|r| notes.row(r)).collect();
    let gate = gate_override.unwrap_or_else(|| p.learned_gate());
    gated(h, snc_context(h, &rows, p)?, gate)
}

/// Product of per-layer spectral norms, an upper bound on the Lipschitz
/// constant of the linear pathway `u ↦ u·W₁·W₂⋯`.
pub fn estimate_lipschitz_layerwise(pathway: &[Matrix]) -> Result<f64> {
    if pathway.is_empty() {
        return Err(crate::error::input_err("empty pathway"));
    }
    pathway
        .iter()
        .try_fold(1.0, |acc, w| Ok(acc * spectral_norm(w, 20_000, 1e-14)?.value))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use alloc::vec;

    fn random(rows: usize, cols: usize, rng: &mut SplitMix64, scale: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| scale * rng.next_normal()).collect();
        Matrix::new(rows, cols, data).unwrap()
    }

    fn params(d: usize, d_note: usize, a: usize, gamma: f64, seed: u64) -> SncParams {
        let mut r = SplitMix64::new(seed);
        SncParams::new(
            random(d, a, &mut r, 0.5),
            random(d_note, a, &mut r, 0.5),
            random(d_note, a, &mut r, 0.5),
            random(a, d, &mut r, 0.5),
            gamma,
        )
        .unwrap()
    }

    #[test]
    fn adapter_with_zero_up_projection_is_identity() {
        let mut r = SplitMix64::new(1);
        let h = random(3, 4, &mut r, 1.0);
        let p = AdapterParams::new(random(4, 2, &mut r, 1.0), Matrix::zeros(2, 4), 1e-5).unwrap();
        assert_eq!(apply_adapter(&h, &p).unwrap(), h);
    }

    #[test]
    fn adapter_maps_zero_input_to_zero() {
        let mut r = SplitMix64::new(2);
        let p = AdapterParams::new(random(4, 2, &mut r, 1.0), random(2, 4, &mut r, 1.0), 1e-5).unwrap();
        let out = apply_adapter(&Matrix::zeros(2, 4), &p).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn adapter_matches_scalar_expansion() {
        let mut r = SplitMix64::new(3);
        let h = random(2, 4, &mut r, 1.0);
        let w_down = random(4, 3, &mut r, 1.0);
        let w_up = random(3, 4, &mut r, 1.0);
        let eps = 1e-5;
        let p = AdapterParams::new(w_down.clone(), w_up.clone(), eps).unwrap();
        let got = apply_adapter(&h, &p).unwrap();
        for t in 0..2 {
            let x = h.row(t);
            let mean = (x[0] + x[1] + x[2] + x[3]) / 4.0;
            let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            let ln: Vec<f64> = x.iter().map(|v| (v - mean) / (var + eps).sqrt()).collect();
            for j in 0..4 {
                let mut acc = x[j];
                for k in 0..3 {
                    let mut pre = 0.0;
                    for i in 0..4 {
                        pre += ln[i] * w_down.get(i, k);
                    }
                    let phi = 0.5 * (1.0 + libm::erf(pre / 2f64.sqrt()));
                    acc += pre * phi * w_up.get(k, j);
                }
                assert!((got.get(t, j) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adapter_shape_checks() {
        let mut r = SplitMix64::new(4);
        assert!(AdapterParams::new(random(4, 4, &mut r, 1.0), random(4, 4, &mut r, 1.0), 0.0).is_err());
        assert!(AdapterParams::new(random(4, 2, &mut r, 1.0), random(3, 4, &mut r, 1.0), 0.0).is_err());
        let p = AdapterParams::new(random(4, 2, &mut r, 1.0), random(2, 4, &mut r, 1.0), 0.0).unwrap();
        assert!(apply_adapter(&Matrix::zeros(1, 3), &p).is_err());
    }

    #[test]
    fn gamma_minus_four_bounds_deviation() {
        let p = params(6, 4, 3, -4.0, 9);
        assert!((p.learned_gate() - 0.017_986_209_962_091_56).abs() < 1e-15);
        let mut r = SplitMix64::new(10);
        let h = random(2, 6, &mut r, 1.0);
        let notes = vec![random(3, 4, &mut r, 1.0), random(1, 4, &mut r, 1.0)];
        let out = snc_attend(&h, &notes, &p, None).unwrap();
        let rows: Vec<&[f64]> = notes
            .iter()
            .flat_map(|n| (0..n.rows()).map(move |i| n.row(i)))
            .collect();
        let cw = snc_context(&h, &rows, &p).unwrap().unwrap();
        let dev = out.add(&h.scale(-1.0)).unwrap().max_abs();
        assert!(dev <= 0.018 * cw.max_abs());
    }

    #[test]
    fn zero_gate_is_bit_exact_identity() {
        let p = params(5, 3, 4, 3.0, 11);
        let mut r = SplitMix64::new(12);
        let h = random(3, 5, &mut r, 1.0);
        let notes = vec![random(2, 3, &mut r, 1.0)];
        let out = snc_attend(&h, &notes, &p, Some(0.0)).unwrap();
        assert_eq!(out, h);
        assert_eq!(snc_attend(&h, &[], &p, Some(0.7)).unwrap(), h);
    }

    #[test]
    fn single_note_attention_matches_closed_form() {
        // one key: softmax weight is exactly 1, so C = n·W_V
        let p = params(4, 3, 2, 0.5, 13);
        let mut r = SplitMix64::new(14);
        let h = random(2, 4, &mut r, 1.0);
        let note = random(1, 3, &mut r, 1.0);
        let gate = 0.37;
        let out = snc_attend(&h, &[note.clone()], &p, Some(gate)).unwrap();
        for t in 0..2 {
            for j in 0..4 {
                let mut inj = 0.0;
                for k in 0..2 {
                    let mut v = 0.0;
                    for i in 0..3 {
                        v += note.get(0, i) * p.w_v.get(i, k);
                    }
                    inj += v * p.w_o.get(k, j);
                }
                assert!((out.get(t, j) - (h.get(t, j) + gate * inj)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn masked_rows_are_inert() {
        let p = params(4, 3, 3, 1.0, 15);
        let mut r = SplitMix64::new(16);
        let h = random(2, 4, &mut r, 1.0);
        let a = random(2, 3, &mut r, 1.0);
        let b = random(1, 3, &mut r, 1.0);
        let plain = snc_attend(&h, &[a.clone(), b.clone()], &p, None).unwrap();
        let junk = random(1, 3, &mut r, 100.0);
        let padded = Matrix::vstack(&[&a, &junk, &b, &Matrix::zeros(1, 3)], 3).unwrap();
        let mask = [true, true, false, true, false];
        let out = snc_attend_masked(&h, &padded, &mask, &p, None).unwrap();
        assert_eq!(out, plain);
    }

    #[test]
    fn note_width_mismatch_is_rejected() {
        let p = params(4, 3, 3, 1.0, 17);
        assert!(snc_attend(&Matrix::zeros(1, 4), &[Matrix::zeros(1, 2)], &p, None).is_err());
        assert!(snc_attend(&Matrix::zeros(1, 5), &[Matrix::zeros(1, 3)], &p, None).is_err());
    }

    #[test]
    fn lipschitz_examples() {
        let l = estimate_lipschitz_layerwise(&[Matrix::diag(&[2.0, 1.0]), Matrix::diag(&[3.0, 1.0])]).unwrap();
        assert!((l - 6.0).abs() < 1e-12);
        let mut r = SplitMix64::new(18);
        let w = random(5, 4, &mut r, 1.0);
        let single = estimate_lipschitz_layerwise(&[w.clone()]).unwrap();
        assert_eq!(single, spectral_norm(&w, 20_000, 1e-14).unwrap().value);
        assert!(estimate_lipschitz_layerwise(&[]).is_err());
    }

    #[test]
    fn notes_pathway_respects_gate_times_lipschitz() {
        let p = params(6, 4, 3, 0.0, 19);
        let l_u = estimate_lipschitz_layerwise(&p.notes_pathway()).unwrap();
        let mut r = SplitMix64::new(20);
        for _ in 0..50 {
            let h = random(1, 6, &mut r, 1.0);
            let u1 = random(1, 4, &mut r, 1.0);
            let u2 = random(1, 4, &mut r, 1.0);
            let g = r.next_f64();
            let f1 = snc_attend(&h, &[u1.clone()], &p, Some(g)).unwrap();
            let f2 = snc_attend(&h, &[u2.clone()], &p, Some(g)).unwrap();
            let lhs = tensor::norm2(f1.add(&f2.scale(-1.0)).unwrap().data());
            let du = tensor::norm2(u1.add(&u2.scale(-1.0)).unwrap().data());
            assert!(lhs <= g * l_u * du * (1.0 + 1e-9));
        }
    }
}
