//! Encoder-decoder Transformer with a causal-k decoder.
//!
//! For a target of length `N` and parallelism degree `k`, the decoder input is
//! `(x_1, ..., x_k, y_1, ..., y_{N-k})` and position `p` may attend to
//! position `q` iff `q <= ceil(p / k) * k`. One forward pass therefore scores
//! every group of `k` target tokens conditioned on all earlier groups.

mod params;
mod transformer;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub use params::{AttnWeights, DecoderLayer, EncoderLayer, FfnWeights, ModelParams, NormWeights, Weights};
pub use transformer::{
    decoder_forward, encode, teacher_forced_nll, Forward, PaddedBatch, Session, TrainBatch,
};

pub type TokenId = u32;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_layer: usize,
    pub n_head: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl ModelConfig {
    /// `small` sizes: `d_model = d_hidden = 256`, 6 layers, 4 heads.
    pub fn small(vocab_size: usize, max_len: usize) -> Self {
        ModelConfig {
            d_model: 256,
            d_hidden: 256,
            n_layer: 6,
            n_head: 4,
            vocab_size,
            max_len,
        }
    }

    /// Laptop-sized model used by the desk experiments.
    pub fn desk(vocab_size: usize, max_len: usize) -> Self {
        ModelConfig {
            d_model: 32,
            d_hidden: 64,
            n_layer: 2,
            n_head: 4,
            vocab_size,
            max_len,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_hidden", self.d_hidden),
            ("n_layer", self.n_layer),
            ("n_head", self.n_head),
            ("vocab_size", self.vocab_size),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.d_model % self.n_head != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_head {}",
                self.d_model, self.n_head
            )));
        }
        Ok(())
    }
}

/// Parallelism degree of a task: a fixed `k`, or `N` (the whole target).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TaskK {
    Fixed(usize),
    Full,
}

impl TaskK {
    /// `min(k, n)` for a target of length `n`.
    pub fn effective(self, n: usize) -> usize {
        match self {
            TaskK::Fixed(k) => k.min(n),
            TaskK::Full => n,
        }
    }
}

impl fmt::Display for TaskK {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskK::Fixed(k) => write!(f, "{k}"),
            TaskK::Full => f.write_str("N"),
        }
    }
}

impl FromStr for TaskK {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("n") {
            return Ok(TaskK::Full);
        }
        match s.parse::<usize>() {
            Ok(k) if k >= 1 => Ok(TaskK::Fixed(k)),
            _ => Err(Error::InvalidArgument(format!("bad parallelism degree {s:?}"))),
        }
    }
}

impl Serialize for TaskK {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            TaskK::Fixed(k) => s.serialize_u64(*k as u64),
            TaskK::Full => s.serialize_str("N"),
        }
    }
}

impl<'de> Deserialize<'de> for TaskK {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(k) if k >= 1 => Ok(TaskK::Fixed(k as usize)),
            Raw::Int(k) => Err(serde::de::Error::custom(format!("bad parallelism degree {k}"))),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Decoder self-attention mask for target length `n` and degree `k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CausalKMask {
    n: usize,
    k: usize,
    bits: Vec<bool>,
}

impl CausalKMask {
    pub fn new(n: usize, k: usize) -> Result<Self> {
        if n == 0 || k == 0 {
            return Err(Error::InvalidArgument(format!("causal-k mask needs n, k >= 1 (n={n}, k={k})")));
        }
        let bits = (0..n).flat_map(|p| (0..n).map(move |q| causal_k_allows(p, q, k))).collect();
        Ok(CausalKMask { n, k, bits })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Zero-indexed query `p`, key `q`.
    pub fn allows(&self, p: usize, q: usize) -> bool {
        self.bits[p * self.n + q]
    }

    pub fn row(&self, p: usize) -> &[bool] {
        &self.bits[p * self.n..(p + 1) * self.n]
    }
}

impl fmt::Display for CausalKMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in 0..self.n {
            let row: String = self.row(p).iter().map(|&b| if b { '1' } else { '0' }).collect();
            writeln!(f, "{row}")?;
        }
        Ok(())
    }
}

/// Zero-indexed form of `q <= ceil(p / k) * k`.
#[inline]
pub(crate) fn causal_k_allows(p: usize, q: usize, k: usize) -> bool {
    q < (p / k + 1) * k
}

/// Builds the decoder input for source `x`, degree `k` and target length `n`.
///
/// Positions `1..=min(k, n)` copy the source (position `p` takes
/// `x[min(p, M)]`), later positions carry `y` shifted right by `k`. When `y`
/// holds fewer than `n - k` tokens (group-by-group decoding) the result is the
/// longest prefix those tokens determine, `min(n, k + y.len())` long.
pub fn build_decoder_input(x: &[TokenId], k: usize, n: usize, y: Option<&[TokenId]>) -> Result<Vec<TokenId>> {
    if x.is_empty() {
        return Err(Error::InvalidArgument("empty source sentence".into()));
    }
    if n == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!("decoder input needs n, k >= 1 (n={n}, k={k})")));
    }
    let k = k.min(n);
    let y = y.unwrap_or(&[]);
    let len = n.min(k + y.len());
    let m = x.len();
    Ok((1..=len)
        .map(|p| if p <= k { x[p.min(m) - 1] } else { y[p - k - 1] })
        .collect())
}
