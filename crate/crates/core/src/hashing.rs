use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Incremental SHA-256 over a sequence of f32 parameter blocks.
#[derive(Default)]
pub(crate) struct ParamHasher {
    inner: Sha256,
}

impl ParamHasher {
    pub(crate) fn update_f32(&mut self, values: &[f32]) {
        for v in values {
            self.inner.update(v.to_le_bytes());
        }
    }

    pub(crate) fn update_str(&mut self, s: &str) {
        self.inner.update((s.len() as u64).to_le_bytes());
        self.inner.update(s.as_bytes());
    }

    pub(crate) fn finish(self) -> String {
        hex::encode(self.inner.finalize())
    }
}
