//! Group-by-group decoding, noisy parallel decoding and latency measurement.

use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::{EOS_ID, PAD_ID};
use crate::error::{Error, Result};
use crate::model::{build_decoder_input, ModelParams, Session, TaskK, TokenId, TrainBatch};
use crate::numcore::{argmax, log_softmax};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub k: TaskK,
    /// Length half-window: candidates at `N` in `[M - b, M + b]`.
    pub b: usize,
    pub rescore: bool,
    pub max_len: usize,
}

impl DecodeConfig {
    pub fn new(k: TaskK, b: usize, rescore: bool, max_len: usize) -> Self {
        DecodeConfig { k, b, rescore, max_len }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == TaskK::Fixed(0) {
            return Err(Error::Config("decode k must be >= 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::Config("decode max_len must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Raw decoder output, `length` tokens.
    pub tokens: Vec<TokenId>,
    pub model_score: f64,
    pub teacher_score: Option<f64>,
    pub length: usize,
    /// Decoder forward passes spent on this hypothesis.
    pub passes: usize,
}

impl Hypothesis {
    /// Tokens with trailing eos/pad removed.
    pub fn output(&self) -> &[TokenId] {
        strip_trailing(&self.tokens)
    }
}

pub fn strip_trailing(tokens: &[TokenId]) -> &[TokenId] {
    let end = tokens.iter().rposition(|&t| t != EOS_ID && t != PAD_ID).map_or(0, |i| i + 1);
    &tokens[..end]
}

pub fn pass_count(n: usize, k: TaskK) -> usize {
    n.div_ceil(k.effective(n))
}

/// Greedy group-by-group decode of a batch of sources, one target length each.
///
/// Sentence `i` takes `ceil(n_i / k'_i)` passes; pass `t` emits the argmax
/// tokens of group `t` given the source and every earlier group. Sentences
/// that finish early ride along in the batch without being counted.
pub fn decode_batch(session: &mut Session<'_>, xs: &[&[TokenId]], k: TaskK, ns: &[usize]) -> Result<Vec<Hypothesis>> {
    let max_len = session.params().config.max_len;
    if xs.len() != ns.len() {
        return Err(Error::InvalidArgument(format!("{} sources but {} target lengths", xs.len(), ns.len())));
    }
    if let Some(&n) = ns.iter().find(|&&n| n == 0 || n > max_len) {
        return Err(Error::InvalidArgument(format!("target length {n} outside 1..={max_len}")));
    }
    if xs.is_empty() {
        return Ok(Vec::new());
    }
    session.encode(xs)?;
    let ks: Vec<usize> = ns.iter().map(|&n| k.effective(n)).collect();
    let passes: Vec<usize> = ns.iter().zip(&ks).map(|(&n, &kk)| n.div_ceil(kk)).collect();
    let mut hyps: Vec<Hypothesis> = ns
        .iter()
        .zip(&passes)
        .map(|(&n, &p)| Hypothesis {
            tokens: Vec::with_capacity(n),
            model_score: 0.0,
            teacher_score: None,
            length: n,
            passes: p,
        })
        .collect();
    let rounds = passes.iter().copied().max().unwrap_or(0);
    for t in 0..rounds {
        let inputs: Vec<Vec<TokenId>> = (0..xs.len())
            .map(|i| build_decoder_input(xs[i], ks[i], ns[i], Some(&hyps[i].tokens)))
            .collect::<Result<_>>()?;
        let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
        let width = refs.iter().map(|r| r.len()).max().unwrap_or(0);
        let logits = session.decoder_logits(&refs, &ks)?;
        for (i, hyp) in hyps.iter_mut().enumerate() {
            if t >= passes[i] {
                continue;
            }
            for p in t * ks[i]..inputs[i].len() {
                let row = logits.row(i * width + p);
                let tok = argmax(row);
                hyp.model_score += log_softmax(row)[tok];
                hyp.tokens.push(tok as TokenId);
            }
        }
    }
    Ok(hyps)
}

/// Greedy decode of one source at degree `k` and target length `n`.
pub fn decode_k(params: &ModelParams, x: &[TokenId], k: TaskK, n: usize) -> Result<Hypothesis> {
    let mut session = Session::new(params);
    Ok(decode_batch(&mut session, &[x], k, &[n])?.remove(0))
}

/// Length-normalised teacher log-probability of each candidate under `k = 1`
/// teacher forcing. Empty candidates score negative infinity.
pub fn rescore(teacher: &ModelParams, x: &[TokenId], candidates: &[&[TokenId]]) -> Result<Vec<f64>> {
    let live: Vec<usize> = (0..candidates.len()).filter(|&i| !candidates[i].is_empty()).collect();
    let mut scores = vec![f64::NEG_INFINITY; candidates.len()];
    if live.is_empty() {
        return Ok(scores);
    }
    let pairs: Vec<(&[TokenId], &[TokenId])> = live.iter().map(|&i| (x, candidates[i])).collect();
    let lp = TrainBatch::new(&pairs, TaskK::Fixed(1), PAD_ID)?.token_log_probs(teacher)?;
    for (&i, l) in live.iter().zip(lp) {
        scores[i] = l.iter().sum::<f64>() / l.len() as f64;
    }
    Ok(scores)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpdResult {
    pub best: Hypothesis,
    /// All `2B + 1` candidates, ordered by requested length.
    pub candidates: Vec<Hypothesis>,
}

/// Candidate target lengths `M - b ..= M + b`, clipped into `1..=max_len`.
pub fn candidate_lengths(m: usize, b: usize, max_len: usize) -> Vec<usize> {
    (0..=2 * b).map(|j| (m + j).saturating_sub(b).clamp(1, max_len)).collect()
}

/// Noisy parallel decoding: one candidate per length in the window, chosen by
/// teacher rescoring (ties go to the shorter output, then the smaller length,
/// then the earlier candidate) or, without rescoring, the `N = M` candidate.
pub fn npd_decode(
    session: &mut Session<'_>,
    teacher: Option<&ModelParams>,
    x: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<NpdResult> {
    if cfg.rescore && teacher.is_none() {
        return Err(Error::InvalidArgument("rescoring requested without a teacher".into()));
    }
    let max_len = cfg.max_len.min(session.params().config.max_len);
    let lengths = candidate_lengths(x.len(), cfg.b, max_len);
    let xs = vec![x; lengths.len()];
    let mut candidates = decode_batch(session, &xs, cfg.k, &lengths)?;
    let chosen = match teacher {
        Some(teacher) if cfg.rescore => {
            let outs: Vec<&[TokenId]> = candidates.iter().map(Hypothesis::output).collect();
            let scores = rescore(teacher, x, &outs)?;
            for (c, s) in candidates.iter_mut().zip(&scores) {
                c.teacher_score = Some(*s);
            }
            select_best(&candidates)
        }
        _ => cfg.b,
    };
    let mut best = candidates[chosen].clone();
    if best.output().is_empty() {
        warn!("all decoding candidates were empty; emitting eos");
        best.tokens = vec![EOS_ID];
        best.length = 1;
    }
    Ok(NpdResult { best, candidates })
}

fn select_best(candidates: &[Hypothesis]) -> usize {
    let mut best = 0;
    for (i, c) in candidates.iter().enumerate().skip(1) {
        let b = &candidates[best];
        let (cs, bs) = (c.teacher_score.unwrap_or(f64::NEG_INFINITY), b.teacher_score.unwrap_or(f64::NEG_INFINITY));
        let better = cs > bs
            || (cs == bs
                && (c.output().len(), c.length) < (b.output().len(), b.length));
        if better {
            best = i;
        }
    }
    best
}

/// Decodes every source with `cfg`. Without a length window the sources are
/// batched `batch_size` at a time; with one, each source is a separate NPD call.
pub fn translate(
    params: &ModelParams,
    teacher: Option<&ModelParams>,
    xs: &[Vec<TokenId>],
    cfg: &DecodeConfig,
    batch_size: usize,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    let mut session = Session::new(params);
    if cfg.b > 0 || cfg.rescore {
        return xs.iter().map(|x| Ok(npd_decode(&mut session, teacher, x, cfg)?.best)).collect();
    }
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by_key(|&i| xs[i].len());
    let mut out: Vec<Option<Hypothesis>> = vec![None; xs.len()];
    for chunk in order.chunks(batch_size.max(1)) {
        let srcs: Vec<&[TokenId]> = chunk.iter().map(|&i| xs[i].as_slice()).collect();
        let ns: Vec<usize> = srcs.iter().map(|x| x.len().min(cfg.max_len)).collect();
        for (&i, mut h) in chunk.iter().zip(decode_batch(&mut session, &srcs, cfg.k, &ns)?) {
            if h.output().is_empty() {
                warn!("empty output for sentence {i}; emitting eos");
                h.tokens = vec![EOS_ID];
                h.length = 1;
            }
            out[i] = Some(h);
        }
    }
    Ok(out.into_iter().map(|h| h.expect("every sentence decoded")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub config: DecodeConfig,
    pub median_ms: f64,
    pub passes_total: usize,
    pub tokens_per_sec: f64,
    #[serde(skip)]
    pub per_sentence_ms: Vec<f64>,
    #[serde(skip)]
    pub passes: Vec<usize>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

const WARMUP_SENTENCES: usize = 3;

/// Per-sentence wall-clock of single-sentence decoding. The first few
/// sentences are decoded once untimed as warmup; every sentence then gets
/// `repeats` timed runs whose median is its latency, and the report carries
/// the median over sentences.
pub fn measure_latency(
    params: &ModelParams,
    teacher: Option<&ModelParams>,
    testset: &[Vec<TokenId>],
    cfg: &DecodeConfig,
    repeats: usize,
) -> Result<LatencyReport> {
    cfg.validate()?;
    if repeats < 3 {
        return Err(Error::InvalidArgument(format!("latency needs at least 3 repeats, got {repeats}")));
    }
    let mut session = Session::new(params);
    for x in testset.iter().take(WARMUP_SENTENCES) {
        npd_decode(&mut session, teacher, x, cfg)?;
    }
    let mut per_sentence_ms = Vec::with_capacity(testset.len());
    let mut passes = Vec::with_capacity(testset.len());
    let mut tokens = 0usize;
    let mut total_secs = 0.0;
    for x in testset {
        let mut times = Vec::with_capacity(repeats);
        let mut last = None;
        for _ in 0..repeats {
            let start = Instant::now();
            let r = npd_decode(&mut session, teacher, x, cfg)?;
            let secs = start.elapsed().as_secs_f64();
            times.push(secs);
            total_secs += secs;
            last = Some(r);
        }
        let r = last.expect("repeats >= 3");
        tokens += r.best.length * repeats;
        passes.push(r.candidates.iter().map(|c| c.passes).sum());
        per_sentence_ms.push(median(&mut times) * 1e3);
    }
    let median_ms = median(&mut per_sentence_ms.clone());
    Ok(LatencyReport {
        config: cfg.clone(),
        median_ms,
        passes_total: passes.iter().sum(),
        tokens_per_sec: if total_secs > 0.0 { tokens as f64 / total_secs } else { 0.0 },
        per_sentence_ms,
        passes,
    })
}
