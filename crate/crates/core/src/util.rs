use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// First eight bytes of the SHA-256 digest, little-endian.
pub fn checksum64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

/// Deterministic generator for a named sub-stream of a root seed, so that
/// stages seeded from one config value stay independent of each other.
pub fn stream_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(stream.as_bytes());
    ChaCha8Rng::seed_from_u64(checksum64(&bytes))
}

pub(crate) fn push_f64s(buf: &mut Vec<u8>, xs: impl IntoIterator<Item = f64>) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

/// Little-endian cursor over a byte buffer.
pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> crate::Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(crate::Error::Format("unexpected end of binary data".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u64(&mut self) -> crate::Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> crate::Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> crate::Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub fn f64s(&mut self, n: usize) -> crate::Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}
