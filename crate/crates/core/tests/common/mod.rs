//! Oracles shared by the integration tests and the acceptance run.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tclnat::model::{
    decoder_forward, encode, CausalKMask, Forward, ModelConfig, ModelParams, TaskK, TokenId, TrainBatch, Weights,
};
use tclnat::numcore::gradcheck::{check_gradients, Tolerance};
use tclnat::numcore::{argmax, log_softmax, Tape, Tensor, Var};
use tclnat::Result;

pub type Case = (Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);
pub type CaseFn = fn(&mut ChaCha8Rng, u64) -> Case;

pub const SHAPES: u64 = 24;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces `out` to a scalar through a fixed random projection so every
/// output element carries a distinct weight.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = rand_tensor(&mut rng, tape.shape(out));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn dims(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=5)
}

/// Finite-difference check of one primitive on `SHAPES` seeded shape draws;
/// returns the number of gradient elements compared.
pub fn check_primitive(name: &str, case: CaseFn) -> std::result::Result<usize, String> {
    let mut checked = 0;
    for seed in 0..SHAPES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        let (inputs, f) = case(&mut rng, seed);
        let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
        let report = check_gradients(&inputs, Tolerance::default(), |t, v| f(t, v)).map_err(|e| e.to_string())?;
        if !report.passed() || report.checked == 0 {
            return Err(format!(
                "{name} seed {seed} shapes {shapes:?}: {:?} (worst abs {:e})",
                &report.failures[..report.failures.len().min(4)],
                report.worst_abs
            ));
        }
        checked += report.checked;
    }
    Ok(checked)
}

pub const PRIMITIVES: &[(&str, CaseFn)] = &[
    ("matmul", case_matmul),
    ("bmm", case_bmm),
    ("elementwise", case_elementwise),
    ("add_tiled", case_add_tiled),
    ("relu", case_relu),
    ("masked_softmax", case_masked_softmax),
    ("layer_norm", case_layer_norm),
    ("embedding", case_embedding),
    ("swap_axes12", case_swap_axes12),
    ("cross_entropy", case_cross_entropy),
    ("dropout", case_dropout),
    ("attention", case_attention),
];

fn case_matmul(rng: &mut ChaCha8Rng, seed: u64) -> Case {
    let (m, k, n) = (dims(rng), dims(rng), dims(rng));
    let inputs = vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])];
    (inputs, Box::new(move |t, v| {
        let o = t.matmul(v[0], v[1])?;
        project(t, o, seed)
    }))
}

fn case_bmm(rng: &mut ChaCha8Rng, seed: u64) -> Case {
    let (b, m, k, n) = (dims(rng), dims(rng), dims(rng), dims(rng));
    let trans = seed % 2 == 0;
    let bshape = if trans { [b, n, k] } else { [b, k, n] };
    let inputs = vec![rand_tensor(rng, &[b, m, k]), rand_tensor(rng, &bshape)];
    (inputs, Box::new(move |t, v| {
        let o = t.bmm(v[0], v[1], trans)?;
        project(t, o, seed)
    }))
}

fn case_elementwise(rng: &mut ChaCha8Rng, seed: u64) -> Case {
    let shape = [dims(rng), dims(rng)];
    let s = rng.random_range(-2.0..2.0);
    let inputs = vec![rand_tensor(rng, &shape), rand_tensor(rng, &shape)];
    (inputs, Box::new(move |t, v| {
        let a = t.add(v[0], v[1])?;
        let m = t.mul(a, v[1])?;
        let o = t.scale(m, s)?;
        project(t, o, seed)
    }))
}

fn case_add_tiled(rng: &mut ChaCha8Rng, seed: u64) -> Case {
    let (p, reps, c) = (dims(rng), dims(rng), dims(rng));
    let inputs = vec![rand_tensor(rng, &[p * reps, c]), rand_tensor(rng, &[p, c])];
    (inputs, Box::new(move |t, v| {
        let o = t.add_tiled(v[0], v[1])?;
        project(t, o, seed)
    }))
}

fn case_relu(rng: &mut ChaCha8Rng, seed: u64) -> Case {
    // Keep inputs away from the kink.
    let shape = [dims(rng), dims(rng)];
    let mut x = rand_tensor(rng, &shape);
    for v in x.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    (vec![x], Box::new(move |t, v| {
        let o = t.relu(v[0])?;
        project(t, o, seed)
    }))
}

fn case_masked_softmax(rng: &mut ChaCha8Rng, seed: u64) -> Case {
    let (heads, b, r, c) = (dims(rng), dims(rng), dims(rng), dims(rng) + 1);
    let x = rand_tensor(rng, &[b * heads, r, c]);
    let mut mask = Tensor::zeros(&[b, r, c]);
    for row in mask.data_mut().chunks_mut(c) {
        // Leave column 0 open so no row is fully masked.
        for v in &mut row[1..] {
            if rng.random_bool(0.4) {
                *v = tclnat::numcore::MASK_NEG;
            }
        }
    }
    let masked = seed % 3 != 0;
    (vec![x], Box::new(move |t, v| {
        let o = t.masked_softmax(v[0], masked.then_some(&mask))?;
        project(t, o, seed)
    }))
}

fn case_layer_norm(rng: &mut ChaCha8Rng, seed: u64) -> Case {
    let (r, c) = (dims(rng), dims(rng) + 1);
    let inputs = vec![rand_tensor(rng, &[r, c]), rand_tensor(rng, &[c]), rand_tensor(rng, &[c])];
    (inputs, Box::new(move |t, v| {
        let o = t.layer_norm(v[0], v[1], v[2], 1e-5)?;
        project(t, o, seed)
    }))
}

fn case_embedding(rng: &mut ChaCha8Rng, seed: u64) -> Case {
    let (vocab, d, n) = (dims(rng) + 1, dims(rng), dims(rng) + 2);
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
    (vec![rand_tensor(rng, &[vocab, d])], Box::new(move |t, v| {
        let o = t.embedding(v[0], &ids)?;
        project(t, o, seed)
    }))
}

fn case_swap_axes12(rng: &mut ChaCha8Rng, seed: u64) -> Case {
    let shape = [dims(rng), dims(rng), dims(rng), dims(rng)];
    (vec![rand_tensor(rng, &shape)], Box::new(move |t, v| {
        let s = t.swap_axes12(v[0])?;
        let o = t.reshape(s, &[shape[0] * shape[2], shape[1] * shape[3]])?;
        project(t, o, seed)
    }))
}

fn case_cross_entropy(rng: &mut ChaCha8Rng, _seed: u64) -> Case {
    let (r, c) = (dims(rng) + 1, dims(rng) + 1);
    let mut targets: Vec<Option<usize>> =
        (0..r).map(|_| rng.random_bool(0.8).then(|| rng.random_range(0..c))).collect();
    targets[0] = Some(0);
    let smoothing = if rng.random_bool(0.5) { 0.0 } else { 0.1 };
    (vec![rand_tensor(rng, &[r, c])], Box::new(move |t, v| t.cross_entropy(v[0], &targets, smoothing)))
}

fn case_dropout(rng: &mut ChaCha8Rng, seed: u64) -> Case {
    let shape = [dims(rng), dims(rng)];
    (vec![rand_tensor(rng, &shape)], Box::new(move |t, v| {
        let mut mask_rng = ChaCha8Rng::seed_from_u64(seed);
        let o = t.dropout(v[0], 0.3, &mut mask_rng)?;
        project(t, o, seed)
    }))
}

fn case_attention(rng: &mut ChaCha8Rng, seed: u64) -> Case {
    let (b, tq, tk, d) = (dims(rng), dims(rng), dims(rng), dims(rng));
    let inputs = vec![rand_tensor(rng, &[b, tq, d]), rand_tensor(rng, &[b, tk, d]), rand_tensor(rng, &[b, tk, d])];
    (inputs, Box::new(move |t, v| {
        let s = t.bmm(v[0], v[1], true)?;
        let s = t.scale(s, 1.0 / (d as f64).sqrt())?;
        let p = t.masked_softmax(s, None)?;
        let o = t.bmm(p, v[2], false)?;
        project(t, o, seed)
    }))
}

/// Two-layer `d_model = 8` model used by the whole-model checks.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_hidden: 16,
        n_layer: 2,
        n_head: 2,
        vocab_size: 16,
        max_len: 16,
    }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> Vec<TokenId> {
    (0..len).map(|_| rng.random_range(3..vocab as TokenId)).collect()
}

fn rebuild(template: &ModelParams, vars: &[Var]) -> Weights<Var> {
    let mut it = vars.iter();
    template.weights.map(&mut |_, _| *it.next().unwrap())
}

/// Finite-difference check of the token-mean NLL (even seeds) or the
/// label-smoothed training loss (odd seeds) with respect to every weight of
/// the tiny model; returns the number of elements compared. The whole network
/// has enough curvature that h = 1e-4 leaves O(h^2) truncation error above
/// 1e-3 relative on some elements, so the step is 1e-5.
pub fn check_full_model(seed: u64, k: TaskK) -> std::result::Result<usize, String> {
    let params = ModelParams::init(tiny_config(), seed).map_err(|e| e.to_string())?;
    let inputs: Vec<Tensor> = params.weights.flatten().into_iter().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs: Vec<(Vec<TokenId>, Vec<TokenId>)> = (0..2)
        .map(|_| {
            let (m, n) = (rng.random_range(1..5), rng.random_range(1..5));
            (random_tokens(&mut rng, m, 16), random_tokens(&mut rng, n, 16))
        })
        .collect();
    let refs: Vec<(&[TokenId], &[TokenId])> = pairs.iter().map(|(x, y)| (&x[..], &y[..])).collect();
    let batch = TrainBatch::new(&refs, k, 0).map_err(|e| e.to_string())?;
    let smoothing = if seed % 2 == 0 { 0.0 } else { 0.1 };
    let tol = Tolerance {
        step: 1e-5,
        ..Tolerance::default()
    };
    let report = check_gradients(&inputs, tol, |tape: &mut Tape, vars: &[Var]| {
        let w = rebuild(&params, vars);
        let mut fwd = Forward::new(&params.config, &w);
        batch.loss(&mut fwd, tape, smoothing)
    })
    .map_err(|e| e.to_string())?;
    if report.passed() {
        Ok(report.checked)
    } else {
        Err(format!("seed {seed} k={k}: {:?}", &report.failures[..report.failures.len().min(4)]))
    }
}

/// Sum of log P(y_{tk+j} | y_{<tk+1}, x) evaluated one group at a time on
/// truncated decoder inputs.
pub fn group_by_group_log_prob(params: &ModelParams, x: &[TokenId], y: &[TokenId], k: usize) -> f64 {
    let n = y.len();
    let k = k.min(n);
    let enc = encode(params, x).unwrap();
    let mut total = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + k).min(n);
        let input: Vec<TokenId> = (0..end)
            .map(|p| if p < k { x[p.min(x.len() - 1)] } else { y[p - k] })
            .collect();
        let mask = CausalKMask::new(end, k).unwrap();
        let logits = decoder_forward(params, &input, &enc, &mask).unwrap();
        for (p, &target) in y.iter().enumerate().take(end).skip(start) {
            total += log_softmax(logits.row(p))[target as usize];
        }
        start = end;
    }
    total
}

/// Classic greedy decoder: one full forward per emitted token on the growing
/// prefix, reading only the last row.
pub fn token_by_token(params: &ModelParams, x: &[TokenId], n: usize) -> Vec<TokenId> {
    let enc = encode(params, x).unwrap();
    let mut y: Vec<TokenId> = Vec::new();
    for t in 0..n {
        let mut input = vec![x[0]];
        input.extend(&y);
        let logits = decoder_forward(params, &input, &enc, &CausalKMask::new(t + 1, 1).unwrap()).unwrap();
        y.push(argmax(logits.row(t)) as TokenId);
    }
    y
}

/// BLEU by direct enumeration: every hypothesis n-gram position is compared
/// against every reference position, with clipping by explicit counting.
pub fn brute_bleu(refs: &[Vec<u8>], hyps: &[Vec<u8>]) -> f64 {
    let mut logp = 0.0;
    for n in 1..=4 {
        let (mut matched, mut total) = (0usize, 0usize);
        for (r, h) in refs.iter().zip(hyps) {
            if h.len() < n {
                continue;
            }
            let hg: Vec<&[u8]> = (0..=h.len() - n).map(|i| &h[i..i + n]).collect();
            let rg: Vec<&[u8]> = if r.len() >= n { (0..=r.len() - n).map(|i| &r[i..i + n]).collect() } else { vec![] };
            total += hg.len();
            let mut seen: Vec<&[u8]> = Vec::new();
            for g in &hg {
                if seen.contains(g) {
                    continue;
                }
                seen.push(g);
                let in_h = hg.iter().filter(|x| *x == g).count();
                let in_r = rg.iter().filter(|x| *x == g).count();
                matched += in_h.min(in_r);
            }
        }
        if matched == 0 {
            return 0.0;
        }
        logp += (matched as f64 / total as f64).ln() / 4.0;
    }
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    100.0 * bp * logp.exp()
}

pub fn words(s: &[u8]) -> Vec<String> {
    s.iter().map(|b| format!("w{b}")).collect()
}

/// Random reference/hypothesis corpora over a tiny alphabet; hypotheses are
/// mutated references so most cases score above zero.
pub fn random_bleu_case(rng: &mut ChaCha8Rng) -> (Vec<Vec<u8>>, Vec<Vec<u8>>) {
    let sentences = rng.random_range(1..6);
    let alphabet = rng.random_range(2..5u8);
    let mut refs = Vec::new();
    let mut hyps = Vec::new();
    for _ in 0..sentences {
        let r: Vec<u8> = (0..rng.random_range(1..12)).map(|_| rng.random_range(0..alphabet)).collect();
        let mut h: Vec<u8> = r.iter().map(|&t| if rng.random_bool(0.2) { rng.random_range(0..alphabet) } else { t }).collect();
        if rng.random_bool(0.3) {
            h.truncate(rng.random_range(1..=h.len()));
        }
        if rng.random_bool(0.3) {
            h.extend((0..rng.random_range(1..4)).map(|_| rng.random_range(0..alphabet)));
        }
        refs.push(r);
        hyps.push(h);
    }
    (refs, hyps)
}
