use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

macro_rules! leaf_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
                $( f(&format!("{prefix}.{}", stringify!($field)), &self.$field); )*
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut T)) {
                $( f(&format!("{prefix}.{}", stringify!($field)), &mut self.$field); )*
            }

            fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name { $( $field: f(&format!("{prefix}.{}", stringify!($field)), &self.$field), )* }
            }
        }
    };
}

macro_rules! layer_group {
    ($name:ident { $($field:ident: $group:ident),* }) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: $group<T>,)*
        }

        impl<T> $name<T> {
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a T)) {
                $( self.$field.visit(&format!("{prefix}.{}", stringify!($field)), f); )*
            }

            fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut dyn FnMut(&str, &'a mut T)) {
                $( self.$field.visit_mut(&format!("{prefix}.{}", stringify!($field)), f); )*
            }

            fn map<U>(&self, prefix: &str, f: &mut dyn FnMut(&str, &T) -> U) -> $name<U> {
                $name { $( $field: self.$field.map(&format!("{prefix}.{}", stringify!($field)), f), )* }
            }
        }
    };
}

leaf_group!(NormWeights { gain, bias });
leaf_group!(AttnWeights { wq, bq, wk, bk, wv, bv, wo, bo });
leaf_group!(FfnWeights { w1, b1, w2, b2 });
layer_group!(EncoderLayer { norm1: NormWeights, attn: AttnWeights, norm2: NormWeights, ffn: FfnWeights });
layer_group!(DecoderLayer {
    norm1: NormWeights,
    self_attn: AttnWeights,
    norm2: NormWeights,
    cross_attn: AttnWeights,
    norm3: NormWeights,
    ffn: FfnWeights
});

/// Every weight of the model, generic over storage so the same layout holds
/// concrete tensors and their handles on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    /// Shared by source and target.
    pub embedding: T,
    pub encoder: Vec<EncoderLayer<T>>,
    pub encoder_norm: NormWeights<T>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub decoder_norm: NormWeights<T>,
    pub out_w: T,
    pub out_b: T,
}

impl<T> Weights<T> {
    /// Visits every weight in canonical order with its dotted name.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(&str, &'a T)) {
        f("embedding", &self.embedding);
        for (i, l) in self.encoder.iter().enumerate() {
            l.visit(&format!("encoder.{i}"), f);
        }
        self.encoder_norm.visit("encoder_norm", f);
        for (i, l) in self.decoder.iter().enumerate() {
            l.visit(&format!("decoder.{i}"), f);
        }
        self.decoder_norm.visit("decoder_norm", f);
        f("out_w", &self.out_w);
        f("out_b", &self.out_b);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&str, &'a mut T)) {
        f("embedding", &mut self.embedding);
        for (i, l) in self.encoder.iter_mut().enumerate() {
            l.visit_mut(&format!("encoder.{i}"), f);
        }
        self.encoder_norm.visit_mut("encoder_norm", f);
        for (i, l) in self.decoder.iter_mut().enumerate() {
            l.visit_mut(&format!("decoder.{i}"), f);
        }
        self.decoder_norm.visit_mut("decoder_norm", f);
        f("out_w", &mut self.out_w);
        f("out_b", &mut self.out_b);
    }

    /// Structure-preserving map; `f` sees weights in [`Weights::visit`] order.
    pub fn map<U>(&self, f: &mut dyn FnMut(&str, &T) -> U) -> Weights<U> {
        Weights {
            embedding: f("embedding", &self.embedding),
            encoder: self.encoder.iter().enumerate().map(|(i, l)| l.map(&format!("encoder.{i}"), f)).collect(),
            encoder_norm: self.encoder_norm.map("encoder_norm", f),
            decoder: self.decoder.iter().enumerate().map(|(i, l)| l.map(&format!("decoder.{i}"), f)).collect(),
            decoder_norm: self.decoder_norm.map("decoder_norm", f),
            out_w: f("out_w", &self.out_w),
            out_b: f("out_b", &self.out_b),
        }
    }

    pub fn flatten(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(&mut |_, t| out.push(t));
        out
    }

    pub fn flatten_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut(&mut |_, t| out.push(t));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n.to_string()));
        out
    }
}

impl Weights<Tensor> {
    /// Registers every weight on `tape`, as leaves when `trainable`.
    pub fn register(&self, tape: &mut Tape, trainable: bool) -> Weights<Var> {
        self.map(&mut |_, t| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        })
    }
}

/// A configured model and its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Weights<Tensor>,
}

impl ModelParams {
    /// Seeded initialisation: uniform Xavier for projections, unit gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let h = config.d_hidden;
        let v = config.vocab_size;
        // Unit-variance rows once scaled by sqrt(d_model) in the forward pass.
        let emb_bound = (3.0 / d as f64).sqrt();
        let embedding = Tensor::from_parts(
            vec![v, d],
            (0..v * d).map(|_| rng.random_range(-emb_bound..emb_bound)).collect(),
        );
        let mut xavier = |rows: usize, cols: usize| {
            let a = (6.0 / (rows + cols) as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
            Tensor::from_parts(vec![rows, cols], data)
        };
        let zeros = |n: usize| Tensor::zeros(&[n]);
        let norm = || NormWeights {
            gain: Tensor::from_parts(vec![d], vec![1.0; d]),
            bias: zeros(d),
        };
        let attn = |x: &mut dyn FnMut(usize, usize) -> Tensor| AttnWeights {
            wq: x(d, d),
            bq: zeros(d),
            wk: x(d, d),
            bk: zeros(d),
            wv: x(d, d),
            bv: zeros(d),
            wo: x(d, d),
            bo: zeros(d),
        };
        let mut encoder = Vec::with_capacity(config.n_layer);
        for _ in 0..config.n_layer {
            encoder.push(EncoderLayer {
                norm1: norm(),
                attn: attn(&mut xavier),
                norm2: norm(),
                ffn: FfnWeights {
                    w1: xavier(d, h),
                    b1: zeros(h),
                    w2: xavier(h, d),
                    b2: zeros(d),
                },
            });
        }
        let mut decoder = Vec::with_capacity(config.n_layer);
        for _ in 0..config.n_layer {
            decoder.push(DecoderLayer {
                norm1: norm(),
                self_attn: attn(&mut xavier),
                norm2: norm(),
                cross_attn: attn(&mut xavier),
                norm3: norm(),
                ffn: FfnWeights {
                    w1: xavier(d, h),
                    b1: zeros(h),
                    w2: xavier(h, d),
                    b2: zeros(d),
                },
            });
        }
        let weights = Weights {
            embedding,
            encoder,
            encoder_norm: norm(),
            decoder,
            decoder_norm: norm(),
            out_w: xavier(d, v),
            out_b: zeros(v),
        };
        Ok(ModelParams { config, weights })
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.flatten().iter().map(|t| t.len()).sum()
    }

    /// Rebuilds params from tensors in canonical order, checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let template = ModelParams::init(config.clone(), 0)?;
        let expected = template.weights.flatten().len();
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!("expected {expected} tensors, found {}", tensors.len())));
        }
        let mut iter = tensors.into_iter();
        let mut mismatch = None;
        let weights = template.weights.map(&mut |name, t| {
            let got = iter.next().expect("length checked");
            if got.shape() != t.shape() && mismatch.is_none() {
                mismatch = Some(format!("{name}: expected {:?}, found {:?}", t.shape(), got.shape()));
            }
            got
        });
        if let Some(m) = mismatch {
            return Err(Error::Checkpoint(m));
        }
        Ok(ModelParams { config, weights })
    }
}
