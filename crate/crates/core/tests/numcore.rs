mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use common::{check_primitive, rand_tensor, PRIMITIVES};
use tclnat::numcore::{adam_step, lr_at_step, AdamConfig, OptimizerState, Tape, Tensor};

fn check(name: &str) {
    let (_, case) = PRIMITIVES.iter().find(|(n, _)| *n == name).unwrap();
    check_primitive(name, *case).unwrap();
}

#[test]
fn matmul_gradients() {
    check("matmul");
}

#[test]
fn bmm_gradients() {
    check("bmm");
}

#[test]
fn add_mul_scale_gradients() {
    check("elementwise");
}

#[test]
fn add_tiled_gradients() {
    check("add_tiled");
}

#[test]
fn relu_gradients() {
    check("relu");
}

#[test]
fn masked_softmax_gradients() {
    check("masked_softmax");
}

#[test]
fn layer_norm_gradients() {
    check("layer_norm");
}

#[test]
fn embedding_gradients() {
    check("embedding");
}

#[test]
fn reshape_and_swap_gradients() {
    check("swap_axes12");
}

#[test]
fn cross_entropy_gradients() {
    check("cross_entropy");
}

#[test]
fn dropout_gradients() {
    check("dropout");
}

#[test]
fn composed_attention_block_gradients() {
    check("attention");
}

#[test]
fn learning_rate_schedule_matches_formula() {
    let w = 4000.0f64;
    for step in [1u64, 10, 199, 3999, 4000, 4001, 10_000] {
        let s = step as f64;
        let expected = 512f64.powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5));
        let got = lr_at_step(step, 512, 4000, 1.0).unwrap();
        assert!((got - expected).abs() <= 1e-15, "step {step}: {got} vs {expected}");
    }
    assert_eq!(lr_at_step(50, 512, 4000, 0.5).unwrap(), 0.5 * lr_at_step(50, 512, 4000, 1.0).unwrap());
}

#[test]
fn adam_matches_hand_rolled_update() {
    let cfg = AdamConfig {
        warmup_steps: 3,
        ..AdamConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = vec![rand_tensor(&mut rng, &[3, 2]), rand_tensor(&mut rng, &[4])];
    let mut state = OptimizerState::new(cfg.clone(), 8, &params);
    let mut reference: Vec<Vec<f64>> = params.iter().map(|p| p.data().to_vec()).collect();
    let mut m: Vec<Vec<f64>> = reference.iter().map(|p| vec![0.0; p.len()]).collect();
    let mut v = m.clone();
    for step in 1..=5u64 {
        let grads: Vec<Vec<f64>> =
            params.iter().map(|p| (0..p.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        let mut refs: Vec<&mut Tensor> = params.iter_mut().collect();
        let lr = adam_step(&mut refs, &grad_refs, &mut state).unwrap();
        assert_eq!(lr, lr_at_step(step, 8, 3, 1.0).unwrap());
        for i in 0..reference.len() {
            for j in 0..reference[i].len() {
                let g = grads[i][j];
                m[i][j] = cfg.beta1 * m[i][j] + (1.0 - cfg.beta1) * g;
                v[i][j] = cfg.beta2 * v[i][j] + (1.0 - cfg.beta2) * g * g;
                let mh = m[i][j] / (1.0 - cfg.beta1.powi(step as i32));
                let vh = v[i][j] / (1.0 - cfg.beta2.powi(step as i32));
                reference[i][j] -= lr * mh / (vh.sqrt() + cfg.epsilon);
            }
        }
        for (p, r) in params.iter().zip(&reference) {
            for (a, b) in p.data().iter().zip(r) {
                assert!((a - b).abs() < 1e-12, "step {step}: {a} vs {b}");
            }
        }
    }
    assert_eq!(state.step, 5);
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(
        rows in 1usize..5, cols in 1usize..8, seed in any::<u64>(), scale in 0.1f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[rows, cols]);
        let mut tape = Tape::inference();
        let a = tape.leaf(x);
        let a = tape.scale(a, scale).unwrap();
        let p = tape.masked_softmax(a, None).unwrap();
        for r in 0..rows {
            let row = tape.value(p).row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn softmax_is_shift_invariant(cols in 1usize..8, seed in any::<u64>(), shift in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[1, cols]);
        let shifted = Tensor::new(vec![1, cols], x.data().iter().map(|v| v + shift).collect()).unwrap();
        let mut tape = Tape::inference();
        let (a, b) = (tape.leaf(x), tape.leaf(shifted));
        let (pa, pb) = (tape.masked_softmax(a, None).unwrap(), tape.masked_softmax(b, None).unwrap());
        for (u, v) in tape.value(pa).data().iter().zip(tape.value(pb).data()) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_output_is_standardised(cols in 2usize..12, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[1, cols]);
        let mut tape = Tape::inference();
        let a = tape.leaf(x);
        let g = tape.leaf(Tensor::new(vec![cols], vec![1.0; cols]).unwrap());
        let b = tape.leaf(Tensor::zeros(&[cols]));
        let y = tape.layer_norm(a, g, b, 1e-12).unwrap();
        let d = tape.value(y).data();
        let mean = d.iter().sum::<f64>() / cols as f64;
        let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }
}
