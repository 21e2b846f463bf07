use serde::{Deserialize, Serialize};

use super::bleu::{bleu, BleuReport};
use super::checkpoint::Checkpoint;
use crate::corpus::{EncodedPair, Vocab, EOS_ID, PAD_ID};
use crate::decode::{measure_latency, translate, DecodeConfig, Hypothesis, LatencyReport};
use crate::error::Result;
use crate::model::{ModelParams, TokenId};

const EVAL_BATCH: usize = 64;

/// Hypothesis tokens for scoring: trailing specials stripped, remaining pad and eos dropped.
pub fn hypothesis_words(h: &Hypothesis, vocab: &Vocab) -> Vec<String> {
    let ids: Vec<TokenId> = h.output().iter().copied().filter(|&t| t != PAD_ID && t != EOS_ID).collect();
    vocab.decode(&ids)
}

/// Decodes every source and returns the hypotheses with their BLEU against the targets.
pub fn translate_and_score(
    params: &ModelParams,
    teacher: Option<&ModelParams>,
    pairs: &[EncodedPair],
    cfg: &DecodeConfig,
    vocab: &Vocab,
) -> Result<(Vec<Hypothesis>, BleuReport)> {
    let xs: Vec<Vec<TokenId>> = pairs.iter().map(|p| p.0.clone()).collect();
    let hyps = translate(params, teacher, &xs, cfg, EVAL_BATCH)?;
    let refs: Vec<Vec<String>> = pairs.iter().map(|p| vocab.decode(&p.1)).collect();
    let words: Vec<Vec<String>> = hyps.iter().map(|h| hypothesis_words(h, vocab)).collect();
    let report = bleu(&refs, &words)?;
    Ok((hyps, report))
}

pub fn corpus_bleu(
    params: &ModelParams,
    teacher: Option<&ModelParams>,
    pairs: &[EncodedPair],
    cfg: &DecodeConfig,
    vocab: &Vocab,
) -> Result<BleuReport> {
    Ok(translate_and_score(params, teacher, pairs, cfg, vocab)?.1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub bleu: BleuReport,
    pub latency: Option<LatencyReport>,
    pub candidates_per_sentence: usize,
    pub sentences: usize,
}

/// BLEU of `ckpt` on `testset` under `cfg`, plus latency over the first
/// `latency_sentences` sources when that is non-zero.
pub fn evaluate(
    ckpt: &Checkpoint,
    teacher: Option<&Checkpoint>,
    testset: &[EncodedPair],
    cfg: &DecodeConfig,
    vocab: &Vocab,
    latency_sentences: usize,
) -> Result<EvalReport> {
    ckpt.check_vocab(&vocab.fingerprint())?;
    if let Some(t) = teacher {
        t.check_vocab(&vocab.fingerprint())?;
    }
    let teacher = teacher.map(|t| &t.params);
    let report = corpus_bleu(&ckpt.params, teacher, testset, cfg, vocab)?;
    let latency = if latency_sentences > 0 {
        let xs: Vec<Vec<TokenId>> = testset.iter().take(latency_sentences).map(|p| p.0.clone()).collect();
        Some(measure_latency(&ckpt.params, teacher, &xs, cfg, 3)?)
    } else {
        None
    };
    Ok(EvalReport {
        bleu: report,
        latency,
        candidates_per_sentence: 2 * cfg.b + 1,
        sentences: testset.len(),
    })
}
