//! Canonical little-endian hashing used for trace and bus fingerprints.

use sha2::{Digest, Sha256};

pub struct Canon(Sha256);

impl Canon {
    pub fn new(tag: &[u8]) -> Self {
        let mut h = Sha256::new();
        h.update((tag.len() as u64).to_le_bytes());
        h.update(tag);
        Self(h)
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.0.update(v.to_le_bytes());
        self
    }

    pub fn usize(&mut self, v: usize) -> &mut Self {
        self.u64(v as u64)
    }

    pub fn f64(&mut self, v: f64) -> &mut Self {
        self.0.update(v.to_bits().to_le_bytes());
        self
    }

    pub fn f64s(&mut self, vs: &[f64]) -> &mut Self {
        self.usize(vs.len());
        for v in vs {
            self.f64(*v);
        }
        self
    }

    pub fn finish(self) -> [u8; 32] {
        self.0.finalize().into()
    }
}
