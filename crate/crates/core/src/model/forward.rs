//! The hooked forward pass and the label readout.

use std::collections::BTreeSet;

use ndarray::{s, Array1, Array2, Array3, ArrayView1};

use crate::error::{Error, Result};
use crate::model::Weights;
use crate::prompt::SequenceLayout;
use crate::retrieval::Label;

/// A residual-stream intervention point.
///
/// Hooks fire after a layer's residual update is complete and before the
/// next layer (or the readout) consumes it, in list order. A hook must
/// declare up front which positions it may write at a given layer; the
/// runtime snapshots the layer and rejects the run if any undeclared
/// position changed by even one bit.
pub trait LayerHook {
    /// Positions this hook may modify at `layer` (layers are 1-based; the
    /// embedding output is layer 0 and is never hooked).
    fn writable_positions(&self, layer: usize) -> Vec<usize>;

    /// Mutate the given layer's states in place. `states` has one row per
    /// sequence position.
    fn apply(&self, layer: usize, states: &mut Array2<f64>, layout: &SequenceLayout)
        -> Result<()>;
}

/// Everything one forward pass produced.
///
/// `states[0]` is the embedding output; `states[l]` for `l in 1..=L` the
/// residual stream after layer `l` *including any hook edits*. Attention
/// probabilities are recorded per layer as `[head, query, key]` with zeros
/// above the causal diagonal.
pub struct HiddenStateRecord {
    pub config: super::ModelConfig,
    pub states: Vec<Array2<f64>>,
    pub attention: Vec<Array3<f64>>,
    /// Readout logits per position, `[seq_len, vocab_size]`, computed from
    /// the final (post-hook) layer.
    pub logits: Array2<f64>,
    /// `(layer, position)` rows that hooks actually rewrote.
    pub modified_positions: BTreeSet<(usize, usize)>,
}

impl HiddenStateRecord {
    pub fn seq_len(&self) -> usize {
        self.states[0].nrows()
    }

    pub fn num_layers(&self) -> usize {
        self.states.len() - 1
    }

    /// Residual state at `(layer, position)`; layer 0 is the embedding
    /// output.
    pub fn state(&self, layer: usize, position: usize) -> ArrayView1<'_, f64> {
        self.states[layer].row(position)
    }

    /// Final-layer state at a position — what the readout consumes.
    pub fn final_state(&self, position: usize) -> ArrayView1<'_, f64> {
        self.states[self.num_layers()].row(position)
    }
}

/// Numerically stable softmax over a slice, in place.
fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

impl Weights {
    /// Run the model over an assembled sequence, applying `hooks` in order
    /// after every layer.
    ///
    /// Fails if the sequence is empty or longer than `max_seq_len`, if any
    /// token id is out of vocabulary, if a recorded layout position is out
    /// of range, or if a hook writes outside its declared positions.
    pub fn forward(
        &self,
        layout: &SequenceLayout,
        hooks: &[&dyn LayerHook],
    ) -> Result<HiddenStateRecord> {
        let cfg = &self.config;
        let t_len = layout.tokens.len();
        if t_len == 0 {
            return Err(Error::Layout("cannot run an empty sequence".into()));
        }
        if t_len > cfg.max_seq_len {
            return Err(Error::SequenceTooLong { required: t_len, max: cfg.max_seq_len });
        }
        for &tok in &layout.tokens {
            if tok >= cfg.vocab_size {
                return Err(Error::TokenOutOfRange { token: tok, vocab_size: cfg.vocab_size });
            }
        }
        let positions_ok = layout.test_separator < t_len
            && layout.demo_separators.iter().all(|&(_, p)| p < t_len)
            && layout.label_positions.iter().all(|&(_, p)| p < t_len);
        if !positions_ok {
            return Err(Error::Layout(format!(
                "layout records positions outside its {t_len}-token sequence"
            )));
        }

        let d = cfg.model_dim;
        let heads = cfg.num_heads;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        // Layer 0: token embedding plus learned absolute position embedding.
        let mut embed = Array2::zeros((t_len, d));
        for (t, &tok) in layout.tokens.iter().enumerate() {
            let row = &self.token_embedding.row(tok as usize) + &self.position_embedding.row(t);
            embed.row_mut(t).assign(&row);
        }

        let mut states: Vec<Array2<f64>> = Vec::with_capacity(cfg.num_layers + 1);
        states.push(embed);
        let mut attention: Vec<Array3<f64>> = Vec::with_capacity(cfg.num_layers);
        let mut modified_positions = BTreeSet::new();

        for layer in 1..=cfg.num_layers {
            let prev = &states[layer - 1];
            let lw = &self.layers[layer - 1];

            // Causal multi-head attention.
            let q = prev.dot(&lw.w_q.t());
            let k = prev.dot(&lw.w_k.t());
            let v = prev.dot(&lw.w_v.t());
            let mut attn = Array3::zeros((heads, t_len, t_len));
            let mut ctx = Array2::zeros((t_len, d));
            for h in 0..heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = q.slice(cols);
                let kh = k.slice(cols);
                let vh = v.slice(cols);
                for t in 0..t_len {
                    let mut scores: Vec<f64> =
                        (0..=t).map(|i| qh.row(t).dot(&kh.row(i)) * scale).collect();
                    softmax_in_place(&mut scores);
                    let mut acc = Array1::zeros(dh);
                    for (i, &p) in scores.iter().enumerate() {
                        attn[[h, t, i]] = p;
                        acc.scaled_add(p, &vh.row(i));
                    }
                    ctx.slice_mut(s![t, h * dh..(h + 1) * dh]).assign(&acc);
                }
            }
            let a = ctx.dot(&lw.w_o.t());

            // MLP on the post-attention intermediate.
            let mid = prev + &a;
            let hidden = mid.dot(&lw.w_in.t()).mapv(f64::tanh);
            let m = hidden.dot(&lw.w_out.t());

            let mut next = prev + &a + &m;
            attention.push(attn);

            // Hooks, each checked against its declared write set.
            for (hook_idx, hook) in hooks.iter().enumerate() {
                let writable: BTreeSet<usize> =
                    hook.writable_positions(layer).into_iter().collect();
                let before = next.clone();
                hook.apply(layer, &mut next, layout)?;
                for t in 0..t_len {
                    let changed = before
                        .row(t)
                        .iter()
                        .zip(next.row(t).iter())
                        .any(|(x, y)| x.to_bits() != y.to_bits());
                    if changed {
                        if !writable.contains(&t) {
                            return Err(Error::HookViolation(format!(
                                "hook {hook_idx} wrote position {t} at layer {layer} \
                                 without declaring it"
                            )));
                        }
                        modified_positions.insert((layer, t));
                    }
                }
            }

            states.push(next);
        }

        let logits = states[cfg.num_layers].dot(&self.unembedding.t());

        Ok(HiddenStateRecord {
            config: cfg.clone(),
            states,
            attention,
            logits,
            modified_positions,
        })
    }
}

// ---------------------------------------------------------------------------
// Readout
// ---------------------------------------------------------------------------

/// Next-token distribution at a position: softmax over the recorded
/// logits, honouring the config's optional temperature and top-k settings
/// (both off by default).
pub fn next_token_distribution(record: &HiddenStateRecord, position: usize) -> Result<Vec<f64>> {
    if position >= record.seq_len() {
        return Err(Error::Layout(format!(
            "readout position {position} out of range for a {}-token sequence",
            record.seq_len()
        )));
    }
    let mut logits: Vec<f64> = record.logits.row(position).to_vec();
    if let Some(temp) = record.config.temperature {
        for x in logits.iter_mut() {
            *x /= temp;
        }
    }
    if let Some(k) = record.config.top_k {
        if k < logits.len() {
            // Keep the k largest logits; ties resolve toward smaller token
            // ids so the mask is deterministic.
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| {
                logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b))
            });
            let cut: std::collections::BTreeSet<usize> = order[k..].iter().copied().collect();
            for (i, x) in logits.iter_mut().enumerate() {
                if cut.contains(&i) {
                    *x = f64::NEG_INFINITY;
                }
            }
        }
    }
    softmax_in_place(&mut logits);
    Ok(logits)
}

/// Probabilities of the two label tokens at a position, renormalized to
/// sum to one.
pub fn label_probabilities(
    record: &HiddenStateRecord,
    position: usize,
    ad_token: u32,
    hc_token: u32,
) -> Result<(f64, f64)> {
    let vocab = record.config.vocab_size;
    if ad_token == hc_token {
        return Err(Error::Parameter(format!("label tokens must be distinct, both are {ad_token}")));
    }
    for tok in [ad_token, hc_token] {
        if tok >= vocab {
            return Err(Error::TokenOutOfRange { token: tok, vocab_size: vocab });
        }
    }
    let dist = next_token_distribution(record, position)?;
    let p_ad = dist[ad_token as usize];
    let p_hc = dist[hc_token as usize];
    let sum = p_ad + p_hc;
    if sum == 0.0 {
        // Only reachable when a top-k mask removed both label tokens.
        return Err(Error::DegenerateVector(
            "both label tokens carry zero probability at the readout position".into(),
        ));
    }
    Ok((p_ad / sum, p_hc / sum))
}

/// Greedy label prediction at a position; exact ties break toward `Hc`.
pub fn predict_label(
    record: &HiddenStateRecord,
    position: usize,
    ad_token: u32,
    hc_token: u32,
) -> Result<Label> {
    let (p_ad, p_hc) = label_probabilities(record, position, ad_token, hc_token)?;
    Ok(if p_ad > p_hc { Label::Ad } else { Label::Hc })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::prompt::{assemble_icl, Vocab};

    fn config() -> ModelConfig {
        ModelConfig {
            num_layers: 3,
            model_dim: 16,
            num_heads: 4,
            ff_dim: 32,
            vocab_size: 64,
            max_seq_len: 48,
            init_seed: 11,
            temperature: None,
            top_k: None,
        }
    }

    fn vocab() -> Vocab {
        Vocab::partition(64, 0.5, true).unwrap()
    }

    fn bare(tokens: &[u32]) -> SequenceLayout {
        assemble_icl(&[], tokens, &vocab(), 48).unwrap()
    }

    #[test]
    fn forward_is_deterministic() {
        let w = init_model(&config()).unwrap();
        let layout = bare(&[40, 41, 42, 43]);
        let a = w.forward(&layout, &[]).unwrap();
        let b = w.forward(&layout, &[]).unwrap();
        for (x, y) in a.states.iter().zip(&b.states) {
            assert_eq!(x, y);
        }
        assert_eq!(a.logits, b.logits);
    }

    #[test]
    fn record_shapes_match_config() {
        let cfg = config();
        let w = init_model(&cfg).unwrap();
        let layout = bare(&[40, 41, 42]);
        let rec = w.forward(&layout, &[]).unwrap();
        assert_eq!(rec.states.len(), cfg.num_layers + 1);
        assert_eq!(rec.num_layers(), cfg.num_layers);
        assert_eq!(rec.seq_len(), 4);
        for st in &rec.states {
            assert_eq!(st.shape(), &[4, cfg.model_dim]);
        }
        assert_eq!(rec.logits.shape(), &[4, cfg.vocab_size as usize]);
        assert_eq!(rec.attention.len(), cfg.num_layers);
        assert_eq!(rec.attention[0].shape(), &[cfg.num_heads, 4, 4]);
    }

    #[test]
    fn attention_rows_are_causal_distributions() {
        let w = init_model(&config()).unwrap();
        let layout = bare(&[40, 41, 42, 43, 44]);
        let rec = w.forward(&layout, &[]).unwrap();
        for attn in &rec.attention {
            for h in 0..attn.shape()[0] {
                for t in 0..attn.shape()[1] {
                    let row = attn.slice(s![h, t, ..]);
                    let sum: f64 = row.iter().take(t + 1).sum();
                    assert!((sum - 1.0).abs() < 1e-12, "row sums to {sum}");
                    for i in (t + 1)..attn.shape()[2] {
                        assert_eq!(row[i], 0.0, "future position {i} attended from {t}");
                    }
                }
            }
        }
    }

    #[test]
    fn position_embedding_distinguishes_repeated_tokens() {
        let w = init_model(&config()).unwrap();
        let rec = w.forward(&bare(&[40, 40]), &[]).unwrap();
        assert_ne!(rec.state(0, 0), rec.state(0, 1));
    }

    #[test]
    fn rejects_bad_inputs() {
        let w = init_model(&config()).unwrap();
        let long = SequenceLayout {
            tokens: vec![40; 49],
            demo_separators: vec![],
            label_positions: vec![],
            test_separator: 48,
        };
        assert!(matches!(
            w.forward(&long, &[]),
            Err(Error::SequenceTooLong { required: 49, max: 48 })
        ));

        let oov = SequenceLayout {
            tokens: vec![64],
            demo_separators: vec![],
            label_positions: vec![],
            test_separator: 0,
        };
        assert!(matches!(w.forward(&oov, &[]), Err(Error::TokenOutOfRange { .. })));

        let bad_pos = SequenceLayout {
            tokens: vec![40, 41],
            demo_separators: vec![],
            label_positions: vec![],
            test_separator: 5,
        };
        assert!(matches!(w.forward(&bad_pos, &[]), Err(Error::Layout(_))));
    }

    /// Hook that adds 1.0 to every coordinate of one position at one layer.
    struct Bump {
        layer: usize,
        position: usize,
    }

    impl LayerHook for Bump {
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
                states.row_mut(self.position).mapv_inplace(|x| x + 1.0);
            }
            Ok(())
        }
    }

    /// Hook that (incorrectly) writes a position it never declared.
    struct Rogue;

    impl LayerHook for Rogue {
        fn writable_positions(&self, _layer: usize) -> Vec<usize> {
            vec![0]
        }

        fn apply(
            &self,
            _layer: usize,
            states: &mut Array2<f64>,
            _layout: &SequenceLayout,
        ) -> Result<()> {
            let last = states.nrows() - 1;
            states.row_mut(last).mapv_inplace(|x| x + 0.5);
            Ok(())
        }
    }

    #[test]
    fn hook_edits_are_recorded_and_propagate() {
        let w = init_model(&config()).unwrap();
        let layout = bare(&[40, 41, 42]);
        let clean = w.forward(&layout, &[]).unwrap();
        let hook = Bump { layer: 2, position: 1 };
        let hooked = w.forward(&layout, &[&hook]).unwrap();
        assert_eq!(
            hooked.modified_positions.iter().copied().collect::<Vec<_>>(),
            vec![(2, 1)]
        );
        // Layers up to the hook agree bit for bit.
        assert_eq!(clean.states[0], hooked.states[0]);
        assert_eq!(clean.states[1], hooked.states[1]);
        // The edited row differs at its layer, and downstream layers see it.
        assert_ne!(clean.states[2].row(1), hooked.states[2].row(1));
        assert_ne!(clean.states[3].row(1), hooked.states[3].row(1));
        // Positions before the edit are untouched at every layer (causality).
        for l in 0..=3 {
            assert_eq!(clean.states[l].row(0), hooked.states[l].row(0));
        }
    }

    #[test]
    fn undeclared_writes_are_rejected() {
        let w = init_model(&config()).unwrap();
        let layout = bare(&[40, 41, 42]);
        assert!(matches!(w.forward(&layout, &[&Rogue]), Err(Error::HookViolation(_))));
    }

    #[test]
    fn label_readout_restricts_and_normalizes() {
        let w = init_model(&config()).unwrap();
        let layout = bare(&[40, 41, 42]);
        let rec = w.forward(&layout, &[]).unwrap();
        let pos = layout.test_separator;
        let dist = next_token_distribution(&rec, pos).unwrap();
        assert!((dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (p_ad, p_hc) = label_probabilities(&rec, pos, 1, 2).unwrap();
        assert!((p_ad + p_hc - 1.0).abs() < 1e-12);
        // Renormalization preserves the logit ordering.
        let expect = if dist[1] > dist[2] { Label::Ad } else { Label::Hc };
        assert_eq!(predict_label(&rec, pos, 1, 2).unwrap(), expect);
    }

    #[test]
    fn label_readout_validates_tokens() {
        let w = init_model(&config()).unwrap();
        let rec = w.forward(&bare(&[40]), &[]).unwrap();
        assert!(matches!(label_probabilities(&rec, 0, 1, 1), Err(Error::Parameter(_))));
        assert!(matches!(
            label_probabilities(&rec, 0, 64, 2),
            Err(Error::TokenOutOfRange { .. })
        ));
        assert!(matches!(next_token_distribution(&rec, 9), Err(Error::Layout(_))));
    }

    #[test]
    fn temperature_rescales_but_never_reorders() {
        let mut cfg = config();
        let w = init_model(&cfg).unwrap();
        let layout = bare(&[40, 41]);
        let cold = w.forward(&layout, &[]).unwrap();
        cfg.temperature = Some(0.1);
        let w_hot = init_model(&cfg).unwrap();
        let hot = w_hot.forward(&layout, &[]).unwrap();
        let a = next_token_distribution(&cold, 2).unwrap();
        let b = next_token_distribution(&hot, 2).unwrap();
        let argmax = |v: &[f64]| {
            v.iter().enumerate().max_by(|x, y| x.1.partial_cmp(y.1).unwrap()).unwrap().0
        };
        assert_eq!(argmax(&a), argmax(&b));
        assert!(b[argmax(&b)] > a[argmax(&a)], "temperature 0.1 sharpens the distribution");
    }
}
