use rand_chacha::ChaCha8Rng;

use super::params::{AttnWeights, FfnWeights, NormWeights, Weights};
use super::{build_decoder_input, causal_k_allows, CausalKMask, ModelConfig, ModelParams, TaskK, TokenId};
use crate::error::{Error, Result};
use crate::numcore::{log_softmax, Tape, Tensor, Var, MASK_NEG};

const LN_EPS: f64 = 1e-6;

/// Right-padded token matrix, row-major `[batch, width]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub ids: Vec<usize>,
    pub lens: Vec<usize>,
    pub width: usize,
}

impl PaddedBatch {
    pub fn new(seqs: &[&[TokenId]], pad: TokenId) -> Result<Self> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidArgument("batch with an empty sequence".into()));
        }
        let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * width);
        for s in seqs {
            ids.extend(s.iter().map(|&t| t as usize));
            ids.extend(std::iter::repeat_n(pad as usize, width - s.len()));
        }
        Ok(PaddedBatch {
            ids,
            lens: seqs.iter().map(|s| s.len()).collect(),
            width,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.lens.len()
    }

    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        if let Some(&id) = self.ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::OutOfVocab {
                id: id as u32,
                vocab: cfg.vocab_size,
            });
        }
        if self.width > cfg.max_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} exceeds max_len {}",
                self.width, cfg.max_len
            )));
        }
        Ok(())
    }

    /// `[B, Tq, width]` additive mask hiding padded keys.
    fn key_mask(&self, queries: usize) -> Tensor {
        let w = self.width;
        let mut data = vec![0.0; self.batch_size() * queries * w];
        for (b, &len) in self.lens.iter().enumerate() {
            for q in 0..queries {
                let row = &mut data[(b * queries + q) * w..(b * queries + q + 1) * w];
                row[len..].fill(MASK_NEG);
            }
        }
        Tensor::from_parts(vec![self.batch_size(), queries, w], data)
    }
}

/// Decoder self-attention mask for a padded batch, one degree per sentence.
fn causal_k_batch_mask(dec: &PaddedBatch, ks: &[usize]) -> Tensor {
    let t = dec.width;
    let mut data = vec![MASK_NEG; dec.batch_size() * t * t];
    for (b, (&len, &k)) in dec.lens.iter().zip(ks).enumerate() {
        for p in 0..t {
            for q in 0..len {
                if causal_k_allows(p, q, k) {
                    data[(b * t + p) * t + q] = 0.0;
                }
            }
        }
    }
    Tensor::from_parts(vec![dec.batch_size(), t, t], data)
}

fn mask_from_causal_k(mask: &CausalKMask) -> Tensor {
    let n = mask.n();
    let data = (0..n * n)
        .map(|i| if mask.allows(i / n, i % n) { 0.0 } else { MASK_NEG })
        .collect();
    Tensor::from_parts(vec![1, n, n], data)
}

fn sinusoid_table(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[pos * d + 2 * i] = angle.sin();
            data[pos * d + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::from_parts(vec![len, d], data)
}

/// One forward pass over registered weights.
pub struct Forward<'a> {
    pub config: &'a ModelConfig,
    pub weights: &'a Weights<Var>,
    /// Drop probability and its generator; `None` disables dropout.
    pub dropout: Option<(f64, &'a mut ChaCha8Rng)>,
}

impl<'a> Forward<'a> {
    pub fn new(config: &'a ModelConfig, weights: &'a Weights<Var>) -> Self {
        Forward {
            config,
            weights,
            dropout: None,
        }
    }

    fn drop(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        match &mut self.dropout {
            Some((p, rng)) if *p > 0.0 => tape.dropout(x, *p, *rng),
            _ => Ok(x),
        }
    }

    fn embed(&mut self, tape: &mut Tape, batch: &PaddedBatch) -> Result<Var> {
        let d = self.config.d_model;
        let e = tape.embedding(self.weights.embedding, &batch.ids)?;
        let e = tape.scale(e, (d as f64).sqrt())?;
        let pe = tape.constant(sinusoid_table(batch.width, d));
        let x = tape.add_tiled(e, pe)?;
        self.drop(tape, x)
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: &NormWeights<Var>) -> Result<Var> {
        tape.layer_norm(x, n.gain, n.bias, LN_EPS)
    }

    fn linear(&self, tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tape.matmul(x, w)?;
        tape.add_tiled(y, b)
    }

    /// `[B*T, d] -> [B*H, T, d/H]`
    fn split_heads(&self, tape: &mut Tape, x: Var, batch: usize, len: usize) -> Result<Var> {
        let h = self.config.n_head;
        let dh = self.config.d_model / h;
        let x = tape.reshape(x, &[batch, len, h, dh])?;
        let x = tape.swap_axes12(x)?;
        tape.reshape(x, &[batch * h, len, dh])
    }

    /// `[B*H, T, d/H] -> [B*T, d]`
    fn merge_heads(&self, tape: &mut Tape, x: Var, batch: usize, len: usize) -> Result<Var> {
        let h = self.config.n_head;
        let dh = self.config.d_model / h;
        let x = tape.reshape(x, &[batch, h, len, dh])?;
        let x = tape.swap_axes12(x)?;
        tape.reshape(x, &[batch * len, h * dh])
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        tape: &mut Tape,
        a: &AttnWeights<Var>,
        queries: Var,
        keys: Var,
        batch: usize,
        q_len: usize,
        k_len: usize,
        mask: &Tensor,
        cached_kv: Option<(Var, Var)>,
    ) -> Result<Var> {
        let dh = self.config.d_model / self.config.n_head;
        let q = self.linear(tape, queries, a.wq, a.bq)?;
        let q = tape.scale(q, 1.0 / (dh as f64).sqrt())?;
        let q = self.split_heads(tape, q, batch, q_len)?;
        let (k, v) = match cached_kv {
            Some(kv) => kv,
            None => self.key_values(tape, a, keys, batch, k_len)?,
        };
        let scores = tape.bmm(q, k, true)?;
        let probs = tape.masked_softmax(scores, Some(mask))?;
        let probs = self.drop(tape, probs)?;
        let ctx = tape.bmm(probs, v, false)?;
        let ctx = self.merge_heads(tape, ctx, batch, q_len)?;
        self.linear(tape, ctx, a.wo, a.bo)
    }

    /// Head-split key and value projections `[B*H, L, d/H]`.
    fn key_values(&mut self, tape: &mut Tape, a: &AttnWeights<Var>, keys: Var, batch: usize, len: usize) -> Result<(Var, Var)> {
        let k = self.linear(tape, keys, a.wk, a.bk)?;
        let v = self.linear(tape, keys, a.wv, a.bv)?;
        let k = self.split_heads(tape, k, batch, len)?;
        let v = self.split_heads(tape, v, batch, len)?;
        Ok((k, v))
    }

    /// Cross-attention keys and values of every decoder layer for fixed encoder states.
    pub fn cross_key_values(&mut self, tape: &mut Tape, enc: Var, src: &PaddedBatch) -> Result<Vec<(Var, Var)>> {
        let weights = self.weights;
        weights
            .decoder
            .iter()
            .map(|layer| self.key_values(tape, &layer.cross_attn, enc, src.batch_size(), src.width))
            .collect()
    }

    fn ffn(&mut self, tape: &mut Tape, x: Var, f: &FfnWeights<Var>) -> Result<Var> {
        let h = self.linear(tape, x, f.w1, f.b1)?;
        let h = tape.relu(h)?;
        let h = self.drop(tape, h)?;
        self.linear(tape, h, f.w2, f.b2)
    }

    fn residual(&mut self, tape: &mut Tape, x: Var, sub: Var) -> Result<Var> {
        let sub = self.drop(tape, sub)?;
        tape.add(x, sub)
    }

    /// Encoder states `[B*L, d]`.
    pub fn encode(&mut self, tape: &mut Tape, src: &PaddedBatch) -> Result<Var> {
        src.check(self.config)?;
        let (b, l) = (src.batch_size(), src.width);
        let mask = src.key_mask(l);
        let mut x = self.embed(tape, src)?;
        for layer in &self.weights.encoder {
            let h = self.norm(tape, x, &layer.norm1)?;
            let h = self.attention(tape, &layer.attn, h, h, b, l, l, &mask, None)?;
            x = self.residual(tape, x, h)?;
            let h = self.norm(tape, x, &layer.norm2)?;
            let h = self.ffn(tape, h, &layer.ffn)?;
            x = self.residual(tape, x, h)?;
        }
        self.norm(tape, x, &self.weights.encoder_norm)
    }

    /// Logits `[B*T, V]` given encoder states and a `[B or 1, T, T]` self-attention mask.
    pub fn decode(
        &mut self,
        tape: &mut Tape,
        dec: &PaddedBatch,
        self_mask: &Tensor,
        enc: Var,
        src: &PaddedBatch,
    ) -> Result<Var> {
        self.decode_cached(tape, dec, self_mask, enc, src, None)
    }

    /// `decode` with optional precomputed [`Forward::cross_key_values`].
    pub fn decode_cached(
        &mut self,
        tape: &mut Tape,
        dec: &PaddedBatch,
        self_mask: &Tensor,
        enc: Var,
        src: &PaddedBatch,
        cross_kv: Option<&[(Var, Var)]>,
    ) -> Result<Var> {
        dec.check(self.config)?;
        if dec.batch_size() != src.batch_size() {
            return Err(Error::shape(
                "decoder",
                format!("{} decoder rows vs {} encoder rows", dec.batch_size(), src.batch_size()),
            ));
        }
        let (b, t, l) = (dec.batch_size(), dec.width, src.width);
        let cross_mask = src.key_mask(t);
        let mut x = self.embed(tape, dec)?;
        for (i, layer) in self.weights.decoder.iter().enumerate() {
            let h = self.norm(tape, x, &layer.norm1)?;
            let h = self.attention(tape, &layer.self_attn, h, h, b, t, t, self_mask, None)?;
            x = self.residual(tape, x, h)?;
            let h = self.norm(tape, x, &layer.norm2)?;
            let h = self.attention(tape, &layer.cross_attn, h, enc, b, t, l, &cross_mask, cross_kv.map(|kv| kv[i]))?;
            x = self.residual(tape, x, h)?;
            let h = self.norm(tape, x, &layer.norm3)?;
            let h = self.ffn(tape, h, &layer.ffn)?;
            x = self.residual(tape, x, h)?;
        }
        let x = self.norm(tape, x, &self.weights.decoder_norm)?;
        self.linear(tape, x, self.weights.out_w, self.weights.out_b)
    }
}

/// Teacher-forced inputs for a batch of pairs at one task `k`.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub src: PaddedBatch,
    pub dec: PaddedBatch,
    /// Effective degree `min(k, N)` per sentence.
    pub ks: Vec<usize>,
    /// Target class per decoder row (`None` at padding).
    pub targets: Vec<Option<usize>>,
}

impl TrainBatch {
    pub fn new(pairs: &[(&[TokenId], &[TokenId])], k: TaskK, pad: TokenId) -> Result<Self> {
        let mut dec_inputs = Vec::with_capacity(pairs.len());
        let mut ks = Vec::with_capacity(pairs.len());
        for (x, y) in pairs {
            if y.is_empty() {
                return Err(Error::InvalidArgument("empty target sentence".into()));
            }
            let kk = k.effective(y.len());
            dec_inputs.push(build_decoder_input(x, kk, y.len(), Some(y))?);
            ks.push(kk);
        }
        let srcs: Vec<&[TokenId]> = pairs.iter().map(|(x, _)| *x).collect();
        let decs: Vec<&[TokenId]> = dec_inputs.iter().map(Vec::as_slice).collect();
        let src = PaddedBatch::new(&srcs, pad)?;
        let dec = PaddedBatch::new(&decs, pad)?;
        let mut targets = vec![None; dec.batch_size() * dec.width];
        for (b, (_, y)) in pairs.iter().enumerate() {
            for (t, &tok) in y.iter().enumerate() {
                targets[b * dec.width + t] = Some(tok as usize);
            }
        }
        Ok(TrainBatch { src, dec, ks, targets })
    }

    pub fn token_count(&self) -> usize {
        self.targets.iter().filter(|t| t.is_some()).count()
    }

    /// Logits `[B*T, V]` for this batch.
    pub fn logits(&self, fwd: &mut Forward<'_>, tape: &mut Tape) -> Result<Var> {
        let enc = fwd.encode(tape, &self.src)?;
        let mask = causal_k_batch_mask(&self.dec, &self.ks);
        fwd.decode(tape, &self.dec, &mask, enc, &self.src)
    }

    /// Mean label-smoothed cross-entropy over non-pad target tokens.
    pub fn loss(&self, fwd: &mut Forward<'_>, tape: &mut Tape, smoothing: f64) -> Result<Var> {
        let logits = self.logits(fwd, tape)?;
        tape.cross_entropy(logits, &self.targets, smoothing)
    }

    /// Log-probability of each target token, per sentence, in one pass.
    pub fn token_log_probs(&self, params: &ModelParams) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::inference();
        let w = params.weights.register(&mut tape, false);
        let mut fwd = Forward::new(&params.config, &w);
        let logits = self.logits(&mut fwd, &mut tape)?;
        let logits = tape.value(logits);
        let width = self.dec.width;
        Ok((0..self.dec.batch_size())
            .map(|b| {
                (0..width)
                    .filter_map(|t| {
                        self.targets[b * width + t].map(|c| log_softmax(logits.row(b * width + t))[c])
                    })
                    .collect()
            })
            .collect())
    }
}

/// Encoder states `M x d_model` for one source sentence.
pub fn encode(params: &ModelParams, x: &[TokenId]) -> Result<Tensor> {
    let src = PaddedBatch::new(&[x], 0)?;
    let mut tape = Tape::inference();
    let w = params.weights.register(&mut tape, false);
    let out = Forward::new(&params.config, &w).encode(&mut tape, &src)?;
    Ok(tape.take_value(out))
}

/// Logits `N x vocab` for one decoder input against fixed encoder states.
pub fn decoder_forward(
    params: &ModelParams,
    dec_input: &[TokenId],
    enc_states: &Tensor,
    mask: &CausalKMask,
) -> Result<Tensor> {
    if dec_input.len() != mask.n() {
        return Err(Error::shape(
            "decoder_forward",
            format!("decoder input length {} vs mask size {}", dec_input.len(), mask.n()),
        ));
    }
    let d = params.config.d_model;
    if enc_states.cols() != d || enc_states.shape().len() != 2 {
        return Err(Error::shape(
            "decoder_forward",
            format!("encoder states {:?} vs d_model {d}", enc_states.shape()),
        ));
    }
    let m = enc_states.rows();
    let dec = PaddedBatch::new(&[dec_input], 0)?;
    let src = PaddedBatch {
        ids: vec![0; m],
        lens: vec![m],
        width: m,
    };
    let mut tape = Tape::inference();
    let w = params.weights.register(&mut tape, false);
    let enc = tape.constant(enc_states.clone());
    let logits = Forward::new(&params.config, &w).decode(&mut tape, &dec, &mask_from_causal_k(mask), enc, &src)?;
    Ok(tape.take_value(logits))
}

/// Mean per-token negative log-likelihood of `y` given `x` under degree `k`,
/// from a single masked forward pass.
pub fn teacher_forced_nll(params: &ModelParams, x: &[TokenId], y: &[TokenId], k: TaskK) -> Result<f64> {
    let batch = TrainBatch::new(&[(x, y)], k, 0)?;
    let lp = batch.token_log_probs(params)?;
    Ok(-lp[0].iter().sum::<f64>() / y.len() as f64)
}

/// Inference tape with the weights registered once.
///
/// `encode` keeps one batch of encoder states resident; each `decoder_logits`
/// call truncates its own nodes away afterwards, so repeated decoder passes
/// cost only the decoder.
pub struct Session<'p> {
    params: &'p ModelParams,
    tape: Tape,
    weights: Weights<Var>,
    weights_len: usize,
    encoded: Option<(Var, PaddedBatch, Vec<(Var, Var)>)>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        let mut tape = Tape::inference();
        let weights = params.weights.register(&mut tape, false);
        let weights_len = tape.len();
        Session {
            params,
            tape,
            weights,
            weights_len,
            encoded: None,
        }
    }

    pub fn params(&self) -> &'p ModelParams {
        self.params
    }

    /// Encodes a batch of sources, replacing any previously encoded batch.
    pub fn encode(&mut self, srcs: &[&[TokenId]]) -> Result<()> {
        self.tape.truncate(self.weights_len);
        self.encoded = None;
        let src = PaddedBatch::new(srcs, 0)?;
        let mut fwd = Forward::new(&self.params.config, &self.weights);
        let enc = fwd.encode(&mut self.tape, &src)?;
        let kv = fwd.cross_key_values(&mut self.tape, enc, &src)?;
        self.encoded = Some((enc, src, kv));
        Ok(())
    }

    /// Logits `[B*T, V]` (`T` the longest input) for one decoder input per
    /// encoded source, each under its own causal-k degree.
    pub fn decoder_logits(&mut self, decs: &[&[TokenId]], ks: &[usize]) -> Result<Tensor> {
        let (enc, src, kv) = self
            .encoded
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("decoder pass before encode".into()))?;
        if decs.len() != ks.len() || ks.contains(&0) {
            return Err(Error::InvalidArgument("one positive degree per decoder input required".into()));
        }
        let dec = PaddedBatch::new(decs, 0)?;
        let mask = causal_k_batch_mask(&dec, ks);
        let mark = self.tape.len();
        let out = Forward::new(&self.params.config, &self.weights).decode_cached(&mut self.tape, &dec, &mask, *enc, src, Some(kv));
        let logits = out.map(|v| self.tape.take_value(v));
        self.tape.truncate(mark);
        logits
    }
}
