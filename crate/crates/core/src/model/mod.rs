//! The deterministic transformer runtime.
//!
//! A decoder-only residual-stream model in f64 throughout: token plus
//! learned absolute position embeddings, per layer a causal multi-head
//! attention block and a two-layer tanh MLP added onto the residual
//! stream, and a linear unembedding readout. There is no normalization
//! layer — each layer literally computes
//!
//! ```text
//! h_t(l) = h_t(l-1) + attn_t(l) + mlp_t(l)
//! ```
//!
//! with `mlp` reading the post-attention intermediate `h_t(l-1) + attn_t(l)`.
//!
//! Weights are a pure function of [`ModelConfig::init_seed`]: every tensor
//! is filled in a fixed, documented order with i.i.d. uniform values in
//! `[-s, s]`, `s = 1/sqrt(model_dim)`, drawn from a ChaCha20 stream. Two
//! initializations from equal configs are bit-identical.

mod forward;
mod io;

pub use forward::{
    label_probabilities, next_token_distribution, predict_label, HiddenStateRecord, LayerHook,
};

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Static model shape plus the readout options.
///
/// `temperature` and `top_k` are recorded here because run configurations
/// carry them, but both default to off; the label readout used everywhere
/// in this crate is a plain argmax over two label tokens, which a
/// temperature cannot change.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub vocab_size: u32,
    pub max_seq_len: usize,
    pub init_seed: u64,
    /// Optional logit scaling at readout (`logits / temperature`).
    #[serde(default)]
    pub temperature: Option<f64>,
    /// Optional top-k logit mask at readout.
    #[serde(default)]
    pub top_k: Option<usize>,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if self.model_dim == 0 || self.ff_dim == 0 {
            return Err(Error::Config("model_dim and ff_dim must be positive".into()));
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "num_heads ({}) must be positive and divide model_dim ({})",
                self.num_heads, self.model_dim
            )));
        }
        if self.vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        if let Some(t) = self.temperature {
            if !(t > 0.0) {
                return Err(Error::Config(format!("temperature must be positive, got {t}")));
            }
        }
        if let Some(k) = self.top_k {
            if k == 0 {
                return Err(Error::Config("top_k must be at least 1".into()));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// Per-layer parameter block. All projection matrices are stored
/// `[out, in]`, i.e. they act on column vectors from the left; the forward
/// pass computes `X . W^T` on row-major state matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
    /// MLP input projection, `[ff_dim, model_dim]`.
    pub w_in: Array2<f64>,
    /// MLP output projection, `[model_dim, ff_dim]`.
    pub w_out: Array2<f64>,
}

/// Full parameter set. Construct with [`init_model`] or [`load_weights`].
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: ModelConfig,
    /// `[vocab_size, model_dim]`.
    pub token_embedding: Array2<f64>,
    /// Learned absolute position table, `[max_seq_len, model_dim]`, added
    /// to token embeddings at layer 0.
    pub position_embedding: Array2<f64>,
    pub layers: Vec<LayerWeights>,
    /// Readout matrix, `[vocab_size, model_dim]`; independent of the token
    /// embedding table.
    pub unembedding: Array2<f64>,
}

pub use io::{load_weights, save_weights};

/// Names and shapes of every tensor, in initialization (and checkpoint)
/// order.
fn tensor_plan(config: &ModelConfig) -> Vec<(String, usize, usize)> {
    let d = config.model_dim;
    let mut plan = vec![
        ("token_embedding".to_string(), config.vocab_size as usize, d),
        ("position_embedding".to_string(), config.max_seq_len, d),
    ];
    for layer in 0..config.num_layers {
        for name in ["w_q", "w_k", "w_v", "w_o"] {
            plan.push((format!("layers.{layer}.{name}"), d, d));
        }
        plan.push((format!("layers.{layer}.w_in"), config.ff_dim, d));
        plan.push((format!("layers.{layer}.w_out"), d, config.ff_dim));
    }
    plan.push(("unembedding".to_string(), config.vocab_size as usize, d));
    plan
}

/// Assemble a [`Weights`] value from tensors in plan order.
fn weights_from_tensors(config: ModelConfig, mut tensors: Vec<Array2<f64>>) -> Weights {
    let unembedding = tensors.pop().expect("tensor plan ends with the unembedding");
    let mut iter = tensors.into_iter();
    let token_embedding = iter.next().expect("plan starts with token embedding");
    let position_embedding = iter.next().expect("plan includes position embedding");
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        layers.push(LayerWeights {
            w_q: iter.next().expect("layer tensor"),
            w_k: iter.next().expect("layer tensor"),
            w_v: iter.next().expect("layer tensor"),
            w_o: iter.next().expect("layer tensor"),
            w_in: iter.next().expect("layer tensor"),
            w_out: iter.next().expect("layer tensor"),
        });
    }
    assert!(iter.next().is_none(), "tensor plan exhausted");
    Weights { config, token_embedding, position_embedding, layers, unembedding }
}

/// Initialize a model deterministically from its config.
///
/// Tensors are filled in [`tensor_plan`] order, each in row-major element
/// order, with uniform values in `[-s, s]`, `s = 1/sqrt(model_dim)`, from
/// `ChaCha20Rng::seed_from_u64(init_seed)`.
pub fn init_model(config: &ModelConfig) -> Result<Weights> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.init_seed);
    let s = 1.0 / (config.model_dim as f64).sqrt();
    let tensors = tensor_plan(config)
        .into_iter()
        .map(|(_, rows, cols)| {
            let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-s..=s)).collect();
            Array2::from_shape_vec((rows, cols), data).expect("shape matches data length")
        })
        .collect();
    Ok(weights_from_tensors(config.clone(), tensors))
}

impl Weights {
    /// Iterate `(name, tensor)` in plan order. Used by the checkpoint
    /// writer and handy for diagnostics.
    pub fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.w_q"), &layer.w_q));
            out.push((format!("layers.{i}.w_k"), &layer.w_k));
            out.push((format!("layers.{i}.w_v"), &layer.w_v));
            out.push((format!("layers.{i}.w_o"), &layer.w_o));
            out.push((format!("layers.{i}.w_in"), &layer.w_in));
            out.push((format!("layers.{i}.w_out"), &layer.w_out));
        }
        out.push(("unembedding".to_string(), &self.unembedding));
        out
    }
}
