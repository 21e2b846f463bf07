//! Dense `f64` tensors, a reverse-mode tape, and Adam with warmup.

pub mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use optim::{adam_step, lr_at_step, AdamConfig, OptimizerState};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::log_sum_exp;

/// Additive mask value standing in for minus infinity.
pub const MASK_NEG: f64 = -1e9;

/// Log-softmax of one row of logits.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
