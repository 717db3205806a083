use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Counter-addressed random stream.
///
/// The ChaCha key is derived from `(seed, label)` and the counter selects the
/// ChaCha stream, so every `(seed, label, counter)` triple names its own
/// non-overlapping sequence and can be regenerated independently of any
/// other draw.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngStream {
    seed: u64,
    label: String,
    counter: u64,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl RngStream {
    pub fn new(seed: u64, label: impl Into<String>, counter: u64) -> Self {
        Self { seed, label: label.into(), counter }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Sibling stream with the same seed and label.
    pub fn at(&self, counter: u64) -> Self {
        Self { counter, ..self.clone() }
    }

    /// Stream under a derived label, e.g. `"batch"` → `"batch/glda"`.
    pub fn child(&self, suffix: &str) -> Self {
        Self::new(self.seed, format!("{}/{suffix}", self.label), self.counter)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&fnv1a(self.label.as_bytes()).to_le_bytes());
        key[16..24].copy_from_slice(&(self.label.len() as u64).to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(self.counter);
        rng
    }
}
