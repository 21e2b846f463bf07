//! Synthetic parallel corpora, vocabulary, batching, and distillation.

mod distill;
mod io;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;

pub use distill::distill;
pub use io::{corpus_exists, read_corpus, read_vocab, write_corpus, write_vocab};
pub(crate) use io::write_atomic;

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: TokenId = 0;
pub const EOS_ID: TokenId = 1;
pub const UNK_ID: TokenId = 2;
pub const SPECIALS: [&str; 3] = [PAD, EOS, UNK];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Copy,
    Reverse,
    MappedSwap,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::MappedSwap => "mapped-swap",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "mapped-swap" => Ok(TaskKind::MappedSwap),
            other => Err(Error::InvalidArgument(format!("unknown task kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7261_696e,
            Split::Dev => 0x0064_6576,
            Split::Test => 0x7465_7374,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentencePair {
    pub src: Vec<String>,
    pub tgt: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusMeta {
    pub task: TaskKind,
    pub split: Split,
    pub seed: u64,
    pub size: usize,
    pub vocab_size: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Hash of the teacher checkpoint when targets were distilled.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distilled_from: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub pairs: Vec<SentencePair>,
    pub meta: CorpusMeta,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.pairs.iter().map(|p| p.src.len().max(p.tgt.len())).max().unwrap_or(0)
    }
}

/// Generator parameters shared by all splits of one synthetic dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub task: TaskKind,
    /// Total vocabulary including the special symbols.
    pub vocab_size: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub seed: u64,
}

impl SynthSpec {
    fn validate(&self, max_len: Option<usize>) -> Result<()> {
        if self.vocab_size <= SPECIALS.len() {
            return Err(Error::InvalidArgument(format!(
                "vocab_size {} must exceed the {} special symbols",
                self.vocab_size,
                SPECIALS.len()
            )));
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            return Err(Error::InvalidArgument(format!(
                "invalid length range ({}, {})",
                self.len_min, self.len_max
            )));
        }
        if let Some(m) = max_len {
            if self.len_max > m {
                return Err(Error::InvalidArgument(format!("len_max {} exceeds max_len {m}", self.len_max)));
            }
        }
        Ok(())
    }

    pub fn content_tokens(&self) -> Vec<String> {
        (0..self.vocab_size - SPECIALS.len()).map(|i| format!("t{i}")).collect()
    }

    /// Token permutation used by mapped-swap; fixed by the dataset seed so all
    /// splits share it.
    pub fn permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.vocab_size - SPECIALS.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed ^ 0x5045_524d));
        perm
    }
}

/// `y[i] = perm[x[i]]`, then swap each adjacent pair `(y[2j], y[2j+1])`.
pub fn mapped_swap(x: &[usize], perm: &[usize]) -> Vec<usize> {
    let mut y: Vec<usize> = x.iter().map(|&t| perm[t]).collect();
    for pair in y.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
    y
}

fn transduce(task: TaskKind, x: &[usize], perm: &[usize]) -> Vec<usize> {
    match task {
        TaskKind::Copy => x.to_vec(),
        TaskKind::Reverse => x.iter().rev().copied().collect(),
        TaskKind::MappedSwap => mapped_swap(x, perm),
    }
}

/// Deterministic synthetic corpus for one split.
pub fn gen_synthetic_corpus(spec: &SynthSpec, split: Split, size: usize) -> Result<Corpus> {
    gen_excluding(spec, split, size, &HashSet::new())
}

fn gen_excluding(spec: &SynthSpec, split: Split, size: usize, exclude: &HashSet<Vec<usize>>) -> Result<Corpus> {
    spec.validate(None)?;
    let names = spec.content_tokens();
    let perm = spec.permutation();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ split.salt());
    let mut pairs = Vec::with_capacity(size);
    let mut attempts = 0usize;
    while pairs.len() < size {
        attempts += 1;
        if attempts > size.saturating_mul(100).max(10_000) {
            return Err(Error::InvalidArgument(format!(
                "cannot draw {size} {} sentences disjoint from other splits",
                split.name()
            )));
        }
        let len = rng.random_range(spec.len_min..=spec.len_max);
        let x: Vec<usize> = (0..len).map(|_| rng.random_range(0..names.len())).collect();
        if exclude.contains(&x) {
            continue;
        }
        let y = transduce(spec.task, &x, &perm);
        pairs.push(SentencePair {
            src: x.iter().map(|&t| names[t].clone()).collect(),
            tgt: y.iter().map(|&t| names[t].clone()).collect(),
        });
    }
    Ok(Corpus {
        pairs,
        meta: CorpusMeta {
            task: spec.task,
            split,
            seed: spec.seed,
            size,
            vocab_size: spec.vocab_size,
            len_min: spec.len_min,
            len_max: spec.len_max,
            distilled_from: None,
        },
    })
}

/// Train, dev and test corpora whose source sides do not overlap.
pub fn gen_splits(spec: &SynthSpec, sizes: [usize; 3], max_len: Option<usize>) -> Result<[Corpus; 3]> {
    spec.validate(max_len)?;
    let train = gen_synthetic_corpus(spec, Split::Train, sizes[0])?;
    let tokens = spec.content_tokens();
    let names: HashMap<&str, usize> = tokens.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let index = |p: &SentencePair| -> Vec<usize> { p.src.iter().map(|t| names[t.as_str()]).collect() };
    let mut seen: HashSet<Vec<usize>> = train.pairs.iter().map(index).collect();
    let dev = gen_excluding(spec, Split::Dev, sizes[1], &seen)?;
    seen.extend(dev.pairs.iter().map(index));
    let test = gen_excluding(spec, Split::Test, sizes[2], &seen)?;
    Ok([train, dev, test])
}

/// Token/id bijection with the special symbols at fixed ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::InvalidArgument("vocabulary must start with <pad> <eos> <unk>".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or(UNK, String::as_str)
    }

    pub fn encode(&self, sentence: &[String]) -> Vec<TokenId> {
        sentence.iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_owned()).collect()
    }

    /// Hex SHA-256 of the token list; ties checkpoints to their vocabulary.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

/// Specials followed by every corpus token in sorted order.
pub fn build_vocab(corpus: &Corpus) -> Result<Vocab> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut seen: Vec<&str> = corpus
        .pairs
        .iter()
        .flat_map(|p| p.src.iter().chain(&p.tgt))
        .map(String::as_str)
        .filter(|t| !SPECIALS.contains(t))
        .collect::<HashSet<_>>()
        .into_iter()
        .collect();
    seen.sort_unstable();
    let tokens = SPECIALS.iter().copied().chain(seen).map(str::to_owned).collect();
    Vocab::from_tokens(tokens)
}

pub type EncodedPair = (Vec<TokenId>, Vec<TokenId>);

pub fn encode_corpus(corpus: &Corpus, vocab: &Vocab) -> Vec<EncodedPair> {
    corpus.pairs.iter().map(|p| (vocab.encode(&p.src), vocab.encode(&p.tgt))).collect()
}

/// One epoch of length-bucketed batches, as indices into `pairs`.
///
/// Pairs are shuffled, stably sorted by padded length, cut greedily so that
/// `batch_len * longest <= max_tokens`, and the batch order is shuffled again.
pub fn batch(pairs: &[EncodedPair], max_tokens: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let width = |i: usize| pairs[i].0.len().max(pairs[i].1.len());
    if let Some(i) = (0..pairs.len()).find(|&i| width(i) > max_tokens) {
        return Err(Error::InvalidArgument(format!(
            "sentence {i} has {} tokens, more than max_tokens {max_tokens}",
            width(i)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| width(i));
    let mut batches: Vec<Vec<usize>> = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let w = width(i).max(longest);
        if !current.is_empty() && w * (current.len() + 1) > max_tokens {
            batches.push(std::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(width(i));
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches.shuffle(&mut rng);
    Ok(batches)
}
