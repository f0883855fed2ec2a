//! Independent oracles for the acceptance suite.
//!
//! Everything here recomputes results from first principles — scalar
//! loops over the public weight matrices, exhaustive candidate scans —
//! without calling into the code paths under test, so agreement is
//! evidence rather than tautology.

#![allow(dead_code)]

use std::collections::BTreeSet;

use ndarray::Array2;

use anchorlab::error::Result;
use anchorlab::model::{init_model, LayerHook, ModelConfig, Weights};
use anchorlab::prompt::SequenceLayout;
use anchorlab::retrieval::{CriterionId, Label};

// ---------------------------------------------------------------------------
// Model fixtures
// ---------------------------------------------------------------------------

pub fn model_config(
    num_layers: usize,
    model_dim: usize,
    num_heads: usize,
    ff_dim: usize,
    vocab_size: u32,
    max_seq_len: usize,
    init_seed: u64,
) -> ModelConfig {
    ModelConfig {
        num_layers,
        model_dim,
        num_heads,
        ff_dim,
        vocab_size,
        max_seq_len,
        init_seed,
        temperature: None,
        top_k: None,
    }
}

pub fn model(
    num_layers: usize,
    model_dim: usize,
    num_heads: usize,
    ff_dim: usize,
    vocab_size: u32,
    max_seq_len: usize,
    init_seed: u64,
) -> Weights {
    init_model(&model_config(
        num_layers,
        model_dim,
        num_heads,
        ff_dim,
        vocab_size,
        max_seq_len,
        init_seed,
    ))
    .expect("fixture config is valid")
}

/// A layout carrying nothing but raw tokens (the trailing token doubles as
/// the nominal readout anchor).
pub fn bare_layout(tokens: Vec<u32>) -> SequenceLayout {
    let last = tokens.len() - 1;
    SequenceLayout {
        tokens,
        demo_separators: Vec::new(),
        label_positions: Vec::new(),
        test_separator: last,
    }
}

// ---------------------------------------------------------------------------
// Residual-stream oracle
// ---------------------------------------------------------------------------

/// Everything a forward pass produces, recomputed with plain scalar loops.
pub struct OracleForward {
    /// `states[0]` is the embedding output, `states[l]` the stream after
    /// layer `l`; each is `[position][dim]`.
    pub states: Vec<Vec<Vec<f64>>>,
    /// `attention[layer][head][query][key]`, zero above the causal
    /// diagonal.
    pub attention: Vec<Vec<Vec<Vec<f64>>>>,
    /// `[position][vocab]`.
    pub logits: Vec<Vec<f64>>,
}

/// `x . W^T` for one row vector, element by element.
fn apply_t(w: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    let (rows, cols) = (w.nrows(), w.ncols());
    assert_eq!(cols, x.len(), "weight acts on a {cols}-vector");
    (0..rows).map(|j| (0..cols).map(|i| x[i] * w[[j, i]]).sum()).collect()
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// Recompute a hook-free forward pass from the public weight fields.
pub fn oracle_forward(weights: &Weights, tokens: &[u32]) -> OracleForward {
    let cfg = &weights.config;
    let t_len = tokens.len();
    let d = cfg.model_dim;
    let heads = cfg.num_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let embed: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            (0..d)
                .map(|i| {
                    weights.token_embedding[[tok as usize, i]]
                        + weights.position_embedding[[t, i]]
                })
                .collect()
        })
        .collect();

    let mut states = vec![embed];
    let mut attention = Vec::new();

    for lw in &weights.layers {
        let prev = states.last().unwrap();
        let q: Vec<Vec<f64>> = prev.iter().map(|row| apply_t(&lw.w_q, row)).collect();
        let k: Vec<Vec<f64>> = prev.iter().map(|row| apply_t(&lw.w_k, row)).collect();
        let v: Vec<Vec<f64>> = prev.iter().map(|row| apply_t(&lw.w_v, row)).collect();

        let mut attn = vec![vec![vec![0.0; t_len]; t_len]; heads];
        let mut ctx = vec![vec![0.0; d]; t_len];
        for h in 0..heads {
            let lo = h * dh;
            for t in 0..t_len {
                let mut scores: Vec<f64> = (0..=t)
                    .map(|i| {
                        (0..dh).map(|c| q[t][lo + c] * k[i][lo + c]).sum::<f64>() * scale
                    })
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                for s in scores.iter_mut() {
                    *s /= sum;
                }
                for (i, &p) in scores.iter().enumerate() {
                    attn[h][t][i] = p;
                    for c in 0..dh {
                        ctx[t][lo + c] += p * v[i][lo + c];
                    }
                }
            }
        }

        let a: Vec<Vec<f64>> = ctx.iter().map(|row| apply_t(&lw.w_o, row)).collect();
        let mut next = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let mid = add(&prev[t], &a[t]);
            let hidden: Vec<f64> =
                apply_t(&lw.w_in, &mid).into_iter().map(f64::tanh).collect();
            let m = apply_t(&lw.w_out, &hidden);
            next.push(add(&mid, &m));
        }
        attention.push(attn);
        states.push(next);
    }

    let logits =
        states.last().unwrap().iter().map(|row| apply_t(&weights.unembedding, row)).collect();

    OracleForward { states, attention, logits }
}

// ---------------------------------------------------------------------------
// Single-position write hook
// ---------------------------------------------------------------------------

/// Adds a fixed vector to exactly one `(layer, position)` cell.
pub struct DeltaHook {
    pub layer: usize,
    pub position: usize,
    pub delta: Vec<f64>,
}

impl LayerHook for DeltaHook {
    fn writable_positions(&self, layer: usize) -> Vec<usize> {
        if layer == self.layer {
            vec![self.position]
        } else {
            Vec::new()
        }
    }

    fn apply(
        &self,
        layer: usize,
        states: &mut Array2<f64>,
        _layout: &SequenceLayout,
    ) -> Result<()> {
        if layer == self.layer {
            let mut row = states.row_mut(self.position);
            for (x, &dx) in row.iter_mut().zip(&self.delta) {
                *x += dx;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Exhaustive-scan retrieval oracle
// ---------------------------------------------------------------------------

/// The raw material the oracle scores: what the test itself constructed
/// when it built the pool, independent of any pool indexing.
#[derive(Clone)]
pub struct RawDemo {
    pub id: u64,
    pub label: Label,
    pub len: usize,
    pub embedding: Vec<f64>,
}

/// Cosine similarity with the same accumulation order the selector uses,
/// so engineered exact ties stay exact.
pub fn cosine_scalar(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt() * nb.sqrt())
}

fn raw_score(demo: &RawDemo, query_embedding: &[f64], query_len: usize, c: CriterionId) -> f64 {
    match c {
        CriterionId::SemSim | CriterionId::SemDis => cosine_scalar(query_embedding, &demo.embedding),
        CriterionId::LenSim | CriterionId::LenDis => {
            (query_len as f64 - demo.len as f64).abs()
        }
    }
}

/// Exhaustive scan: collect every eligible candidate's score, find the
/// extremal value for the criterion's pole, and return the smallest id
/// holding exactly that value.
pub fn oracle_pick(
    demos: &[RawDemo],
    query_embedding: &[f64],
    query_len: usize,
    criterion: CriterionId,
    label: Label,
    exclude: &BTreeSet<u64>,
) -> u64 {
    let scored: Vec<(u64, f64)> = demos
        .iter()
        .filter(|d| d.label == label && !exclude.contains(&d.id))
        .map(|d| (d.id, raw_score(d, query_embedding, query_len, criterion)))
        .collect();
    assert!(!scored.is_empty(), "oracle scan found no {label} candidate for {criterion}");
    let maximize = matches!(criterion, CriterionId::SemSim | CriterionId::LenDis);
    let best = scored
        .iter()
        .map(|&(_, s)| s)
        .fold(if maximize { f64::NEG_INFINITY } else { f64::INFINITY }, |acc, s| {
            if maximize {
                acc.max(s)
            } else {
                acc.min(s)
            }
        });
    scored
        .into_iter()
        .filter(|&(_, s)| s == best)
        .map(|(id, _)| id)
        .min()
        .expect("a best candidate exists")
}

/// The oracle's eight-id main or sub selection in fixed criterion order
/// (AD before HC within each pair).
pub fn oracle_selection(
    demos: &[RawDemo],
    query_embedding: &[f64],
    query_len: usize,
    exclude: &BTreeSet<u64>,
) -> Vec<u64> {
    let mut out = Vec::with_capacity(8);
    for criterion in CriterionId::ALL {
        for label in [Label::Ad, Label::Hc] {
            out.push(oracle_pick(demos, query_embedding, query_len, criterion, label, exclude));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Random draws
// ---------------------------------------------------------------------------

pub fn rand_vec(rng: &mut impl rand::Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// A vector whose every component is bounded away from zero, so writes and
/// norms can never degenerate.
pub fn rand_strong_vec(rng: &mut impl rand::Rng, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let mag = rng.gen_range(0.25..1.25);
            if rng.gen_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect()
}

pub fn rand_tokens(rng: &mut impl rand::Rng, len: usize, vocab_size: u32) -> Vec<u32> {
    (0..len).map(|_| rng.gen_range(0..vocab_size)).collect()
}
