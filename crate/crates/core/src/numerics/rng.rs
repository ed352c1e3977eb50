//! Counter-based random streams keyed by (global seed, label).
//!
//! The key comes from the global seed and the ChaCha stream id from a hash
//! of the label, so each (client, round, purpose) draws from its own
//! sequence no matter which thread runs it or in what order.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct StreamLabel {
    purpose: String,
    words: Vec<u64>,
}

impl StreamLabel {
    pub fn new(purpose: &str) -> Self {
        StreamLabel {
            purpose: purpose.to_string(),
            words: Vec::new(),
        }
    }

    /// Appends a tag/value pair, e.g. `("client", 3)`.
    pub fn with(mut self, tag: &str, value: u64) -> Self {
        self.words.push(fnv1a(tag.as_bytes()));
        self.words.push(value);
        self
    }

    pub fn client(self, k: usize) -> Self {
        self.with("client", k as u64)
    }

    pub fn round(self, t: usize) -> Self {
        self.with("round", t as u64)
    }

    pub fn index(self, i: usize) -> Self {
        self.with("index", i as u64)
    }

    fn stream_id(&self) -> u64 {
        let mut h = fnv1a(self.purpose.as_bytes());
        for w in &self.words {
            h = splitmix64(h ^ w.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        }
        h
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    label: StreamLabel,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(seed: u64, label: StreamLabel) -> Self {
        let mut key = [0u8; 32];
        let mut s = seed;
        for chunk in key.chunks_mut(8) {
            s = splitmix64(s);
            chunk.copy_from_slice(&s.to_le_bytes());
        }
        let mut rng = ChaCha20Rng::from_seed(key);
        rng.set_stream(label.stream_id());
        RngStream { seed, label, rng }
    }

    /// A child stream under the same seed with `label` extended by `tag = value`.
    pub fn fork(&self, tag: &str, value: u64) -> RngStream {
        RngStream::new(self.seed, self.label.clone().with(tag, value))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &StreamLabel {
        &self.label
    }

    /// Position in the keystream, in 32-bit words.
    pub fn counter(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn gaussian(&mut self, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| self.rng.sample(StandardNormal)).collect();
        Tensor::new(shape.to_vec(), data).expect("gaussian shape")
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}
