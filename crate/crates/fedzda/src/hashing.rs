//! Stable 64-bit content hashing (FNV-1a) for parameter vectors and round
//! records. Not cryptographic; used to detect state divergence cheaply and
//! to stamp CSV rows so reruns can be compared at a glance.

#[derive(Debug, Clone, Copy)]
pub struct Fnv(u64);

impl Default for Fnv {
    fn default() -> Self {
        Self::new()
    }
}

impl Fnv {
    pub fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub fn write_bytes(&mut self, bytes: &[u8]) -> &mut Self {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
        self
    }

    pub fn write_u64(&mut self, v: u64) -> &mut Self {
        self.write_bytes(&v.to_le_bytes())
    }

    /// Hash the exact bit pattern, so -0.0 and 0.0 hash differently and
    /// bit-identical runs hash identically.
    pub fn write_f64(&mut self, v: f64) -> &mut Self {
        self.write_u64(v.to_bits())
    }

    pub fn write_f64s(&mut self, vs: &[f64]) -> &mut Self {
        for &v in vs {
            self.write_f64(v);
        }
        self
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

pub fn hash_f64s(vs: &[f64]) -> u64 {
    Fnv::new().write_f64s(vs).finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_order_sensitive() {
        assert_eq!(hash_f64s(&[1.0, 2.0]), hash_f64s(&[1.0, 2.0]));
        assert_ne!(hash_f64s(&[1.0, 2.0]), hash_f64s(&[2.0, 1.0]));
        assert_ne!(hash_f64s(&[0.0]), hash_f64s(&[-0.0]));
    }
}
