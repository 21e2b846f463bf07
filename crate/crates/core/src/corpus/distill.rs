use log::warn;

use super::{Corpus, SentencePair, Vocab, EOS};
use crate::decode::{decode_batch, DecodeConfig};
use crate::error::Result;
use crate::model::{ModelParams, Session, TaskK, TokenId};

const DISTILL_BATCH: usize = 64;

/// Replaces every target with the teacher's greedy `k = 1` decode at the
/// source length. Sources, order and size are preserved; an empty decode
/// becomes a lone eos.
pub fn distill(teacher: &ModelParams, corpus: &Corpus, vocab: &Vocab, cfg: &DecodeConfig, teacher_id: &str) -> Result<Corpus> {
    cfg.validate()?;
    let xs: Vec<Vec<TokenId>> = corpus.pairs.iter().map(|p| vocab.encode(&p.src)).collect();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by_key(|&i| xs[i].len());
    let mut targets: Vec<Vec<String>> = vec![Vec::new(); xs.len()];
    let mut session = Session::new(teacher);
    let max_len = cfg.max_len.min(teacher.config.max_len);
    for chunk in order.chunks(DISTILL_BATCH) {
        let srcs: Vec<&[TokenId]> = chunk.iter().map(|&i| xs[i].as_slice()).collect();
        let ns: Vec<usize> = srcs.iter().map(|x| x.len().min(max_len)).collect();
        for (&i, h) in chunk.iter().zip(decode_batch(&mut session, &srcs, TaskK::Fixed(1), &ns)?) {
            let out = h.output();
            targets[i] = if out.is_empty() {
                warn!("teacher produced an empty translation for sentence {i}; using eos");
                vec![EOS.to_owned()]
            } else {
                vocab.decode(out)
            };
        }
    }
    let pairs = corpus
        .pairs
        .iter()
        .zip(targets)
        .map(|(p, tgt)| SentencePair { src: p.src.clone(), tgt })
        .collect();
    let mut meta = corpus.meta.clone();
    meta.distilled_from = Some(teacher_id.to_owned());
    Ok(Corpus { pairs, meta })
}
