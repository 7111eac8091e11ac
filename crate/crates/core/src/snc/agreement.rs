use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::rng;
use crate::tensor::{dot, logistic};

/// Agreement-head weights and the trust threshold used for rollback.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementParams {
    pub w_agree: Vec<f64>,
    pub b_agree: f64,
    pub dropout_rate: f64,
    pub tau: f64,
}

impl AgreementParams {
    pub fn new(w_agree: Vec<f64>, b_agree: f64, dropout_rate: f64, tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(config_err("agreement tau must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(config_err("dropout rate must lie in [0, 1)"));
        }
        Ok(Self {
            w_agree,
            b_agree,
            dropout_rate,
            tau,
        })
    }
}

/// Whether dropout is active when scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropoutMode {
    /// Inference semantics: dropout disabled, the score is a pure function of `h`.
    Deterministic,
    /// Bernoulli mask with inverted scaling, drawn from `(seed, key)`.
    Train { seed: u64, key: u64 },
}

/// Trust score `logistic(w·Dropout(h) + b)`.
pub fn agreement_score(h_t: &[f64], p: &AgreementParams, mode: DropoutMode) -> Result<f64> {
    if h_t.len() != p.w_agree.len() {
        return Err(Error::Shape {
            op: "agreement_score",
            expected: (1, p.w_agree.len()),
            found: (1, h_t.len()),
        });
    }
    let z = match mode {
        DropoutMode::Deterministic => dot(&p.w_agree, h_t),
        DropoutMode::Train { seed, key } => {
            let keep = 1.0 - p.dropout_rate;
            h_t.iter()
                .zip(&p.w_agree)
                .enumerate()
                .filter(|(i, _)| rng::uniform_at(seed, &[rng::domain::DROPOUT, key, *i as u64]) < keep)
                .map(|(_, (h, w))| h * w / keep)
                .sum()
        }
    };
    Ok(logistic(z + p.b_agree))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn closed_form_scores() {
        let p = AgreementParams::new(vec![0.0; 3], 0.0, 0.1, 0.5).unwrap();
        assert_eq!(
            agreement_score(&[1.0, 2.0, 3.0], &p, DropoutMode::Deterministic).unwrap(),
            0.5
        );

        let p = AgreementParams::new(vec![0.0; 3], -4.0, 0.1, 0.5).unwrap();
        let s = agreement_score(&[1.0, 2.0, 3.0], &p, DropoutMode::Deterministic).unwrap();
        assert!((s - 0.017_986_209_962_091_56).abs() < 1e-15);

        let p = AgreementParams::new(vec![2.0, 0.0], 0.0, 0.1, 0.5).unwrap();
        let s = agreement_score(&[1.0, 0.0], &p, DropoutMode::Deterministic).unwrap();
        assert!((s - 0.8808).abs() < 1e-4);
    }

    #[test]
    fn deterministic_mode_is_pure_and_train_mode_is_keyed() {
        let p = AgreementParams::new(vec![0.3, -0.2, 0.9, 0.4], 0.1, 0.5, 0.5).unwrap();
        let h = [1.0, 2.0, -1.0, 0.5];
        let a = agreement_score(&h, &p, DropoutMode::Deterministic).unwrap();
        let b = agreement_score(&h, &p, DropoutMode::Deterministic).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        let t1 = agreement_score(&h, &p, DropoutMode::Train { seed: 1, key: 4 }).unwrap();
        let t2 = agreement_score(&h, &p, DropoutMode::Train { seed: 1, key: 4 }).unwrap();
        assert_eq!(t1.to_bits(), t2.to_bits());
        assert!(t1 > 0.0 && t1 < 1.0);
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let p = AgreementParams::new(vec![1.0; 8], 0.0, 0.3, 0.5).unwrap();
        let h = [0.25; 8];
        let n = 20_000;
        let mut mean_logit = 0.0;
        for key in 0..n {
            let s = agreement_score(&h, &p, DropoutMode::Train { seed: 9, key }).unwrap();
            mean_logit += libm::log(s / (1.0 - s));
        }
        mean_logit /= n as f64;
        assert!((mean_logit - 2.0).abs() < 0.02, "{mean_logit}");
    }

    #[test]
    fn invalid_params() {
        assert!(AgreementParams::new(vec![], 0.0, 0.1, 0.0).is_err());
        assert!(AgreementParams::new(vec![], 0.0, 1.0, 0.5).is_err());
        let p = AgreementParams::new(vec![1.0], 0.0, 0.0, 0.5).unwrap();
        assert!(agreement_score(&[1.0, 2.0], &p, DropoutMode::Deterministic).is_err());
    }
}
