//! Portable, seedable random streams.
//!
//! A [`Stream`] is SplitMix64 viewed as a counter-based generator: the `i`-th
//! draw (1-based) of a stream with key `k` is `mix64(k + i * GAMMA)` in
//! wrapping 64-bit arithmetic. Because each draw is a pure function of
//! `(key, counter)`, the sequence is identical on every platform and is easy
//! to re-implement in other languages.
//!
//! Derived quantities:
//!
//! * `next_f64` = `(next_u64 >> 11) * 2^-53`, uniform on `[0, 1)`.
//! * `below(n)` rejects draws `x < (2^64 - n) mod n` and returns `x mod n`.
//! * `split(label)` starts a child stream keyed `mix64(key ^ mix64(label + GAMMA))`.
//! * `derive_seed(seed, stage)` = `mix64(seed ^ fnv1a64(stage))`, used to fan a
//!   single experiment seed out to independent pipeline stages.
//! * `shuffle` is Fisher–Yates from the last index down: for `i = n-1 .. 1`,
//!   swap `i` with `below(i + 1)`.

pub const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xCBF2_9CE4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    mix64(seed ^ fnv1a64(stage.as_bytes()))
}

#[derive(Debug, Clone)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream {
            key: seed,
            counter: 0,
        }
    }

    pub fn split(&self, label: u64) -> Stream {
        Stream::new(mix64(self.key ^ mix64(label.wrapping_add(GAMMA))))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GAMMA)))
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box–Muller (`sqrt(-2 ln(1-u1)) · cos(2π u2)`),
    /// consuming two draws.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * (1.0 - u1).ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Unbiased integer in `0..n`. Panics if `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let threshold = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            if x >= threshold {
                return x % n;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}
