use super::LineAddr;

const SEED: u64 = 0x243f_6a88_85a3_08d3;
const SEED_STEP: u64 = 0x9e37_79b9_7f4a_7c15;

fn mix64(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^ (x >> 33)
}

/// Fixed-size Bloom set of line addresses. Each of the `k` bit positions
/// of a line comes from its own seeded 64-bit mix. Never answers `false`
/// for an inserted line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    words: Vec<u64>,
    m: usize,
    k: u32,
    inserted: usize,
}

impl Signature {
    pub fn new(m: usize, k: u32) -> Self {
        assert!(m > 0 && k > 0, "signature needs m >= 1 bits and k >= 1 hashes");
        Self {
            words: vec![0; m.div_ceil(64)],
            m,
            k,
            inserted: 0,
        }
    }

    fn positions(&self, line: LineAddr) -> impl Iterator<Item = usize> {
        let m = self.m as u64;
        (0..self.k as u64).map(move |i| {
            let seed = SEED.wrapping_add(i.wrapping_mul(SEED_STEP));
            (mix64(line ^ seed) % m) as usize
        })
    }

    pub fn insert(&mut self, line: LineAddr) {
        for p in self.positions(line) {
            self.words[p / 64] |= 1 << (p % 64);
        }
        self.inserted += 1;
    }

    pub fn maybe_contains(&self, line: LineAddr) -> bool {
        self.positions(line)
            .all(|p| self.words[p / 64] & (1 << (p % 64)) != 0)
    }

    pub fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
        self.inserted = 0;
    }

    pub fn inserted(&self) -> usize {
        self.inserted
    }

    pub fn bits(&self) -> usize {
        self.m
    }

    pub fn hashes(&self) -> u32 {
        self.k
    }

    pub fn ones(&self) -> u32 {
        self.words.iter().map(|w| w.count_ones()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inserted_lines_always_found() {
        let mut s = Signature::new(2048, 4);
        for l in (0..500u64).map(|i| i * 64) {
            s.insert(l);
        }
        assert!((0..500u64).all(|i| s.maybe_contains(i * 64)));
        assert_eq!(s.inserted(), 500);
    }

    #[test]
    fn clear_resets() {
        let mut s = Signature::new(128, 3);
        s.insert(64);
        s.clear();
        assert_eq!(s.inserted(), 0);
        assert_eq!(s.ones(), 0);
        assert!(!s.maybe_contains(64));
    }

    #[test]
    fn empty_signature_contains_nothing() {
        let s = Signature::new(2048, 4);
        assert!((0..1000u64).all(|l| !s.maybe_contains(l * 64)));
    }
}
