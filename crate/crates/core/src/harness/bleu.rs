use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

/// Corpus-level BLEU with clipped n-gram precisions, n up to 4, no smoothing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    /// Clipped matches and candidate n-gram totals per order.
    pub matches: [usize; MAX_ORDER],
    pub totals: [usize; MAX_ORDER],
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "BLEU = {:.2}, {:.1}/{:.1}/{:.1}/{:.1} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            100.0 * self.precisions[0],
            100.0 * self.precisions[1],
            100.0 * self.precisions[2],
            100.0 * self.precisions[3],
            self.brevity_penalty,
            if self.ref_len == 0 { 0.0 } else { self.hyp_len as f64 / self.ref_len as f64 },
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Scores tokenised hypotheses against one reference each.
pub fn bleu<T: AsRef<str>>(references: &[Vec<T>], hypotheses: &[Vec<T>]) -> Result<BleuReport> {
    if hypotheses.is_empty() {
        return Err(Error::InvalidArgument("BLEU needs at least one hypothesis".into()));
    }
    if references.len() != hypotheses.len() {
        return Err(Error::InvalidArgument(format!(
            "{} references vs {} hypotheses",
            references.len(),
            hypotheses.len()
        )));
    }
    let mut matches = [0usize; MAX_ORDER];
    let mut totals = [0usize; MAX_ORDER];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (r, h) in references.iter().zip(hypotheses) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let rc = ngram_counts(r, n);
            for (g, c) in ngram_counts(h, n) {
                matches[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
                totals[n - 1] += c;
            }
        }
    }
    let precisions: [f64; MAX_ORDER] =
        std::array::from_fn(|i| if totals[i] == 0 { 0.0 } else { matches[i] as f64 / totals[i] as f64 });
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp().min(1.0)
    };
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        100.0 * brevity_penalty * (precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64).exp()
    };
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
        matches,
        totals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    #[test]
    fn identical_is_perfect() {
        let r = bleu(&[split("a b c d e")], &[split("a b c d e")]).unwrap();
        assert_eq!(r.bleu, 100.0);
        assert_eq!(r.brevity_penalty, 1.0);
    }

    #[test]
    fn hand_computed_example() {
        let r = bleu(&[split("the cat sat on the mat")], &[split("the cat sat on mat")]).unwrap();
        assert_eq!(r.precisions, [1.0, 0.75, 2.0 / 3.0, 0.5]);
        assert!((r.brevity_penalty - (-0.2f64).exp()).abs() < 1e-12);
        assert!((r.bleu - 57.89).abs() < 5e-3, "{}", r.bleu);
    }

    #[test]
    fn missing_four_gram_gives_zero() {
        let r = bleu(&[split("a b c d")], &[split("a b c e")]).unwrap();
        assert_eq!(r.matches[3], 0);
        assert_eq!(r.bleu, 0.0);
    }

    #[test]
    fn clipping_limits_repeats() {
        let r = bleu(&[split("the cat")], &[split("the the the")]).unwrap();
        assert_eq!(r.matches[0], 1);
        assert_eq!(r.totals[0], 3);
    }

    #[test]
    fn errors() {
        assert!(bleu::<String>(&[], &[]).is_err());
        assert!(bleu(&[split("a")], &[split("a"), split("b")]).is_err());
    }
}
