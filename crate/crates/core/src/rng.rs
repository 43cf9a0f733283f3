//! Counter-based deterministic RNG.
//!
//! Every random draw is `mix(key, counter)` with a splitmix64 finalizer, so a
//! stream is a pure function of (seed, substream path, draw index) and never
//! depends on platform, thread timing, or call-site ordering elsewhere in the
//! program. Substreams are derived by hashing a string tag into the key,
//! which lets e.g. perturbation noise stay identical across methods that
//! consume different amounts of randomness elsewhere.

/// Splitmix64 finalizer. Bijective on u64, good avalanche.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

#[derive(Debug, Clone)]
pub struct RngStream {
    key: u64,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream {
            key: mix(seed ^ 0x517cc1b727220a95),
            counter: 0,
        }
    }

    /// Child stream keyed by a tag. Independent of the parent's counter, so
    /// deriving the same tag twice gives the same stream.
    pub fn substream(&self, tag: &str) -> RngStream {
        let mut k = self.key;
        for b in tag.as_bytes() {
            k = mix(k ^ (*b as u64));
        }
        RngStream {
            key: mix(k ^ 0xd1b54a32d192ed03),
            counter: 0,
        }
    }

    /// Child stream keyed by an index (e.g. per-row or per-condition).
    pub fn substream_idx(&self, idx: u64) -> RngStream {
        RngStream {
            key: mix(self.key ^ mix(idx ^ 0x8cb92ba72f3d8dd7)),
            counter: 0,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        let x = mix(self.key.wrapping_add(mix(self.counter)));
        self.counter += 1;
        x
    }

    /// Uniform in the open interval (0, 1): (x >> 11 + 0.5) * 2^-53 keeps both
    /// endpoints strictly excluded, so log(u) and log(1-u) stay finite.
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / 9007199254740992.0)
    }

    /// Uniform in (lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + self.uniform() * (hi - lo)
    }

    /// Standard normal via Box-Muller. Draws two uniforms per call; the
    /// second output is discarded to keep the draw count predictable.
    pub fn normal(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    pub fn normal_scaled(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.normal()
    }

    /// Unbiased integer in [0, n): Lemire's multiply-shift with rejection.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let mut m = (self.next_u64() as u128) * (n as u128);
        if (m as u64) < n {
            let t = n.wrapping_neg() % n;
            while (m as u64) < t {
                m = (self.next_u64() as u128) * (n as u128);
            }
        }
        (m >> 64) as usize
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }
}
