//! Token vocabulary and prompt assembly.
//!
//! A prompt is a flat token sequence of the shape
//!
//! ```text
//! x_1 SEP y_1  x_2 SEP y_2  ...  x_k SEP y_k  x_test SEP
//! ```
//!
//! where each `x_i` is a demonstration's content, `SEP` the shared
//! separator token, `y_i` the demonstration's label token, and the final
//! `SEP` the position the model is read out at. [`SequenceLayout`] keeps
//! every structurally relevant position (demonstration separators, label
//! positions, the test separator) so that downstream code never has to
//! re-derive offsets from the raw tokens.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{Demo, DemoId, Label};

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Token-id layout of the closed vocabulary.
///
/// Three ids are reserved (`sep`, one label token per class); the rest is
/// split into two disjoint per-class marker ranges and a shared filler
/// range. Marker ranges are what the synthetic corpus draws class evidence
/// from; fillers are class-neutral.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: u32,
    sep: u32,
    label_ad: u32,
    label_hc: u32,
    ad_markers: Range<u32>,
    hc_markers: Range<u32>,
    fillers: Range<u32>,
}

impl Vocab {
    /// Build a vocabulary from explicit ranges, validating that reserved
    /// ids are distinct, that every range stays inside the vocabulary, and
    /// that no range overlaps a reserved id or another range.
    pub fn new(
        size: u32,
        sep: u32,
        label_ad: u32,
        label_hc: u32,
        ad_markers: Range<u32>,
        hc_markers: Range<u32>,
        fillers: Range<u32>,
    ) -> Result<Self> {
        let reserved = [sep, label_ad, label_hc];
        if sep == label_ad || sep == label_hc || label_ad == label_hc {
            return Err(Error::Config(format!(
                "reserved token ids must be distinct, got sep={sep} ad={label_ad} hc={label_hc}"
            )));
        }
        for &id in &reserved {
            if id >= size {
                return Err(Error::Config(format!(
                    "reserved token id {id} outside vocabulary of size {size}"
                )));
            }
        }
        let ranges = [("ad-markers", &ad_markers), ("hc-markers", &hc_markers), ("fillers", &fillers)];
        for (name, range) in &ranges {
            if range.end > size {
                return Err(Error::Config(format!(
                    "{name} range {range:?} extends past vocabulary of size {size}"
                )));
            }
            for &id in &reserved {
                if range.contains(&id) {
                    return Err(Error::Config(format!(
                        "{name} range {range:?} overlaps reserved token id {id}"
                    )));
                }
            }
        }
        for i in 0..ranges.len() {
            for j in (i + 1)..ranges.len() {
                let (a_name, a) = &ranges[i];
                let (b_name, b) = &ranges[j];
                if a.start < b.end && b.start < a.end {
                    return Err(Error::Config(format!(
                        "{a_name} range {a:?} overlaps {b_name} range {b:?}"
                    )));
                }
            }
        }
        Ok(Vocab { size, sep, label_ad, label_hc, ad_markers, hc_markers, fillers })
    }

    /// Standard partition: ids `0..3` are `SEP`, the AD label and the HC
    /// label; of the remaining ids, roughly `shared_fraction` become
    /// fillers and the rest is split evenly into the two marker ranges.
    ///
    /// `require_markers` should be true whenever class markers will
    /// actually be drawn (marker rate above zero); it turns an empty
    /// marker range into a configuration error instead of a silent
    /// degenerate corpus.
    pub fn partition(size: u32, shared_fraction: f64, require_markers: bool) -> Result<Self> {
        if !(shared_fraction > 0.0 && shared_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "shared vocabulary fraction must lie in (0, 1], got {shared_fraction}"
            )));
        }
        if size < 4 {
            return Err(Error::Config(format!(
                "vocabulary of size {size} cannot hold 3 reserved ids plus content"
            )));
        }
        let content = size - 3;
        let per_class = ((content as f64) * (1.0 - shared_fraction) / 2.0).floor() as u32;
        if require_markers && per_class == 0 {
            return Err(Error::Config(format!(
                "shared fraction {shared_fraction} leaves no marker ids in a vocabulary of size {size}"
            )));
        }
        let ad_markers = 3..3 + per_class;
        let hc_markers = ad_markers.end..ad_markers.end + per_class;
        let fillers = hc_markers.end..size;
        Vocab::new(size, 0, 1, 2, ad_markers, hc_markers, fillers)
    }

    pub fn size(&self) -> u32 {
        self.size
    }

    pub fn sep(&self) -> u32 {
        self.sep
    }

    /// The label token emitted after a demonstration of the given class.
    pub fn label_token(&self, label: Label) -> u32 {
        match label {
            Label::Ad => self.label_ad,
            Label::Hc => self.label_hc,
        }
    }

    pub fn marker_range(&self, label: Label) -> Range<u32> {
        match label {
            Label::Ad => self.ad_markers.clone(),
            Label::Hc => self.hc_markers.clone(),
        }
    }

    pub fn filler_range(&self) -> Range<u32> {
        self.fillers.clone()
    }

    /// Class whose marker range contains `token`, if any.
    pub fn marker_class(&self, token: u32) -> Option<Label> {
        if self.ad_markers.contains(&token) {
            Some(Label::Ad)
        } else if self.hc_markers.contains(&token) {
            Some(Label::Hc)
        } else {
            None
        }
    }

    fn is_reserved(&self, token: u32) -> bool {
        token == self.sep || token == self.label_ad || token == self.label_hc
    }
}

// ---------------------------------------------------------------------------
// Sequence layout
// ---------------------------------------------------------------------------

/// An assembled prompt plus the positions that matter structurally.
///
/// Invariants maintained by the assembly functions:
/// * `test_separator` is always the final token of the sequence;
/// * each demonstration separator is immediately followed by that
///   demonstration's label token;
/// * demonstration entries appear in prompt order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub tokens: Vec<u32>,
    /// `(demo id, position of the demo's separator token)`, in prompt order.
    pub demo_separators: Vec<(DemoId, usize)>,
    /// `(demo id, position of the demo's label token)`, in prompt order.
    pub label_positions: Vec<(DemoId, usize)>,
    /// Position of the final separator the model is read out at. For
    /// extraction sequences this is the extraction anchor.
    pub test_separator: usize,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Positions of all demonstration separators, in prompt order. These
    /// are the anchoring targets of a demonstration-anchored run; the test
    /// separator is deliberately not among them.
    pub fn demo_separator_positions(&self) -> Vec<usize> {
        self.demo_separators.iter().map(|&(_, p)| p).collect()
    }

    /// Separator position belonging to a specific demonstration.
    pub fn separator_of(&self, id: DemoId) -> Option<usize> {
        self.demo_separators.iter().find(|&&(d, _)| d == id).map(|&(_, p)| p)
    }

    /// Invert the assembly: recover each demonstration's content tokens
    /// and label token, plus the test content. Fails if the recorded
    /// positions do not describe a well-formed prompt.
    pub fn decode(&self) -> Result<(Vec<(DemoId, Vec<u32>, u32)>, Vec<u32>)> {
        let mut demos = Vec::with_capacity(self.demo_separators.len());
        let mut cursor = 0usize;
        if self.demo_separators.len() != self.label_positions.len() {
            return Err(Error::Layout(format!(
                "{} separators but {} label positions",
                self.demo_separators.len(),
                self.label_positions.len()
            )));
        }
        for (&(id, sep_pos), &(label_id, label_pos)) in
            self.demo_separators.iter().zip(&self.label_positions)
        {
            if id != label_id {
                return Err(Error::Layout(format!(
                    "separator/label id mismatch: {id} vs {label_id}"
                )));
            }
            if label_pos != sep_pos + 1 || sep_pos < cursor || label_pos >= self.tokens.len() {
                return Err(Error::Layout(format!(
                    "demo {id} has separator at {sep_pos} and label at {label_pos}, \
                     expected adjacent positions at or after {cursor}"
                )));
            }
            demos.push((id, self.tokens[cursor..sep_pos].to_vec(), self.tokens[label_pos]));
            cursor = label_pos + 1;
        }
        if self.test_separator + 1 != self.tokens.len() || self.test_separator < cursor {
            return Err(Error::Layout(format!(
                "test separator at {} does not terminate the {}-token sequence",
                self.test_separator,
                self.tokens.len()
            )));
        }
        let test = self.tokens[cursor..self.test_separator].to_vec();
        Ok((demos, test))
    }
}

/// Check that a content span contains no reserved ids and stays inside the
/// vocabulary.
fn check_content(tokens: &[u32], vocab: &Vocab, what: &str) -> Result<()> {
    for &t in tokens {
        if t >= vocab.size() {
            return Err(Error::TokenOutOfRange { token: t, vocab_size: vocab.size() });
        }
        if vocab.is_reserved(t) {
            return Err(Error::Layout(format!(
                "{what} contains reserved token id {t}; content must not embed separators or labels"
            )));
        }
    }
    Ok(())
}

/// Assemble a few-shot prompt: every demonstration as `x SEP y`, then the
/// test content and a trailing separator. `demos` may be empty, which
/// yields the zero-shot prompt `x_test SEP`.
pub fn assemble_icl(
    demos: &[&Demo],
    test_tokens: &[u32],
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<SequenceLayout> {
    let required = demos.iter().map(|d| d.tokens.len() + 2).sum::<usize>() + test_tokens.len() + 1;
    if required > max_seq_len {
        return Err(Error::SequenceTooLong { required, max: max_seq_len });
    }
    let mut tokens = Vec::with_capacity(required);
    let mut demo_separators = Vec::with_capacity(demos.len());
    let mut label_positions = Vec::with_capacity(demos.len());
    for demo in demos {
        check_content(&demo.tokens, vocab, "demonstration")?;
        tokens.extend_from_slice(&demo.tokens);
        demo_separators.push((demo.id, tokens.len()));
        tokens.push(vocab.sep());
        label_positions.push((demo.id, tokens.len()));
        tokens.push(vocab.label_token(demo.label));
    }
    check_content(test_tokens, vocab, "test content")?;
    tokens.extend_from_slice(test_tokens);
    let test_separator = tokens.len();
    tokens.push(vocab.sep());
    debug_assert_eq!(tokens.len(), required);
    Ok(SequenceLayout { tokens, demo_separators, label_positions, test_separator })
}

/// Assemble the extraction sequence for one main demonstration: its eight
/// sub-demonstrations as regular demonstrations, then the main
/// demonstration itself in the test slot (content plus trailing
/// separator, no label). The layout's `test_separator` is the extraction
/// anchor — the final token of the sequence.
pub fn assemble_sub_sequence(
    sub_demos: &[&Demo],
    main_demo: &Demo,
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<SequenceLayout> {
    assemble_icl(sub_demos, &main_demo.tokens, vocab, max_seq_len)
}

/// Assemble the anchored prompt for a demonstration-anchored run. The
/// token sequence is exactly the one [`assemble_icl`] produces for the
/// same inputs; the demonstration separators recorded in the layout are
/// the anchoring targets, and the test separator is never one of them.
pub fn assemble_anchored(
    main_set: &[&Demo],
    test_tokens: &[u32],
    vocab: &Vocab,
    max_seq_len: usize,
) -> Result<SequenceLayout> {
    let layout = assemble_icl(main_set, test_tokens, vocab, max_seq_len)?;
    debug_assert!(layout.demo_separator_positions().iter().all(|&p| p != layout.test_separator));
    Ok(layout)
}
