//! A desk-scale laboratory for sparse dictionaries over recurrent cache writes.
//!
//! Recurrent hosts (gated delta rule, ungated DeltaNet, diagonal SSM) carry a
//! per-head matrix cache that every token writes into. This crate trains small
//! hosts from scratch, captures their per-token cache states and write tuples,
//! learns rank-1 dictionary atoms shaped like the native writes, and then runs
//! the causal toolkit: single-write replacement against deletion and random
//! controls, a three-factor logit-change predictor, and cache steering during
//! greedy decoding. Every numerical component is backed by an independent
//! oracle test.

pub mod capture;
pub mod causal;
pub mod corpus;
pub mod hosts;
pub mod mat;
pub mod partition;
pub mod predictor;
pub mod sae;
pub mod stats;
pub mod steer;

/// Token id within a host vocabulary.
pub type Token = u32;

/// A (layer, head) address of one recurrent cache.
pub type Cell = (usize, usize);

/// Crate-wide error type. CLI exit codes map onto the variants.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("training diverged at step {step}: {what}")]
    Training { step: usize, what: String },
    #[error("bad magic bytes (expected {expected:?})")]
    BadMagic { expected: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    BadVersion { found: u32, expected: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Derive an independent stream seed from a base seed and two tags.
///
/// splitmix64 finalizer over the concatenated words; used everywhere a
/// sub-computation needs its own deterministic RNG stream.
pub fn subseed(seed: u64, tag: u64, idx: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(tag.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(idx.wrapping_mul(0x94d0_49bb_1331_11eb));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
