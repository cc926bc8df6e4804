//! Counter-based splittable random streams.
//!
//! A draw is a pure function of (seed, stream label, counter), so any stream
//! can be replayed from a serialized counter and distinct labels never
//! interfere no matter how many draws each one consumes. All randomness in
//! the crate flows through named streams: "init", "dropout", "gauss",
//! "split", "aug", "gen".

use serde::{Deserialize, Serialize};

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngStream {
    seed: u64,
    stream_label: String,
    counter: u64,
}

impl RngStream {
    pub fn new(seed: u64, stream_label: &str) -> RngStream {
        RngStream {
            seed,
            stream_label: stream_label.to_string(),
            counter: 0,
        }
    }

    /// Same stream positioned at an explicit counter (checkpoint restore,
    /// or per-item offsets for order-independent parallel generation).
    pub fn at(seed: u64, stream_label: &str, counter: u64) -> RngStream {
        RngStream {
            seed,
            stream_label: stream_label.to_string(),
            counter,
        }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn label(&self) -> &str {
        &self.stream_label
    }

    pub fn next_u64(&mut self) -> u64 {
        let base = splitmix(self.seed ^ GOLDEN.wrapping_mul(fnv1a(self.stream_label.as_bytes())));
        let v = splitmix(base ^ GOLDEN.wrapping_mul(self.counter.wrapping_add(1)));
        self.counter += 1;
        v
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    /// Uniform in {0, 1, ..., n-1} by rejection-free scaling (n is tiny here;
    /// modulo bias at 64 bits is far below anything observable).
    pub fn next_below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller; consumes exactly two draws.
    pub fn next_gaussian(&mut self) -> f64 {
        // u1 in (0, 1] keeps the log finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / 9_007_199_254_740_992.0);
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_below(i + 1);
            items.swap(i, j);
        }
    }
}

/// The named streams one run draws from, with serializable counters so a
/// checkpoint restart replays identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngSuite {
    pub seed: u64,
    pub init: RngStream,
    pub dropout: RngStream,
    pub gauss: RngStream,
    pub split: RngStream,
    pub aug: RngStream,
}

impl RngSuite {
    pub fn new(seed: u64) -> RngSuite {
        RngSuite {
            seed,
            init: RngStream::new(seed, "init"),
            dropout: RngStream::new(seed, "dropout"),
            gauss: RngStream::new(seed, "gauss"),
            split: RngStream::new(seed, "split"),
            aug: RngStream::new(seed, "aug"),
        }
    }
}
