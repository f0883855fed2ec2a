//! Seeded synthetic two-class corpus.
//!
//! Every sample is a token sequence over a partitioned vocabulary: most
//! positions draw from a *shared* filler range (the two classes look alike
//! there), and each position independently emits a class *marker* instead
//! with probability `marker_rate`. The marker ranges are disjoint between
//! classes, so `marker_rate` is the single dial between indistinguishable
//! classes (0.0) and a corpus a marker-counting classifier solves exactly
//! (1.0).
//!
//! Generation is keyed per sample: sample `i` draws from its own
//! [`rng_stream`](crate::rng_stream), so corpora are reproducible from the
//! spec alone and insensitive to generation order.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::Vocab;
use crate::retrieval::{read_demos_jsonl, write_demos_jsonl, Demo, DemoId, DemoPool, Label};
use crate::{rng_stream, stream_tag};

/// Everything needed to regenerate a corpus byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    /// Pool demonstrations per class.
    pub n_per_class: usize,
    /// Held-out test samples per class.
    pub n_test_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Fraction of content vocabulary shared between classes, in (0, 1].
    pub shared_vocab_fraction: f64,
    /// Per-position probability of a class marker instead of a filler.
    pub marker_rate: f64,
    pub vocab_size: u32,
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_class == 0 {
            return Err(Error::Config("corpus needs at least one pool demo per class".into()));
        }
        if self.min_len < 1 {
            return Err(Error::Config("minimum sample length must be at least 1".into()));
        }
        if self.max_len < self.min_len {
            return Err(Error::Config(format!(
                "length range [{}, {}] is empty",
                self.min_len, self.max_len
            )));
        }
        if !(0.0..=1.0).contains(&self.marker_rate) {
            return Err(Error::Config(format!(
                "marker rate must lie in [0, 1], got {}",
                self.marker_rate
            )));
        }
        if !(self.shared_vocab_fraction > 0.0 && self.shared_vocab_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "shared vocabulary fraction must lie in (0, 1], got {}",
                self.shared_vocab_fraction
            )));
        }
        Ok(())
    }

    /// The vocabulary this spec generates over. Marker ranges must be
    /// nonempty whenever markers can actually be emitted.
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::partition(self.vocab_size, self.shared_vocab_fraction, self.marker_rate > 0.0)
    }

    fn total_samples(&self) -> usize {
        2 * (self.n_per_class + self.n_test_per_class)
    }
}

/// Draw one sample's tokens from its own stream. `marker_rate = 1.0`
/// yields all markers (the uniform draw lands strictly below 1), and
/// `0.0` yields none.
fn sample_tokens(spec: &CorpusSpec, vocab: &Vocab, label: Label, index: u64) -> Vec<u32> {
    let mut rng = rng_stream(spec.seed, stream_tag::CORPUS, index);
    let len = rng.gen_range(spec.min_len..=spec.max_len);
    let markers = vocab.marker_range(label);
    let fillers = vocab.filler_range();
    (0..len)
        .map(|_| {
            if rng.gen::<f64>() < spec.marker_rate {
                rng.gen_range(markers.start..markers.end)
            } else {
                rng.gen_range(fillers.start..fillers.end)
            }
        })
        .collect()
}

/// Generate the demonstration pool and the held-out test set.
///
/// Sample ids are global indices: pool AD, pool HC, test AD, test HC, in
/// that order — so pool and test ids never collide.
pub fn generate(spec: &CorpusSpec) -> Result<(Vocab, DemoPool, Vec<Demo>)> {
    spec.validate()?;
    let vocab = spec.vocab()?;
    let mut index = 0u64;
    let mut block = |label: Label, count: usize| -> Vec<Demo> {
        (0..count)
            .map(|_| {
                let demo = Demo {
                    id: DemoId(index),
                    label,
                    tokens: sample_tokens(spec, &vocab, label, index),
                };
                index += 1;
                demo
            })
            .collect()
    };
    let mut pool = block(Label::Ad, spec.n_per_class);
    pool.extend(block(Label::Hc, spec.n_per_class));
    let mut test = block(Label::Ad, spec.n_test_per_class);
    test.extend(block(Label::Hc, spec.n_test_per_class));
    debug_assert_eq!(index as usize, spec.total_samples());
    Ok((vocab, DemoPool::new(pool)?, test))
}

/// Count class markers and take the majority; ties (including marker-free
/// samples) go to HC.
pub fn oracle_classify(tokens: &[u32], vocab: &Vocab) -> Label {
    let mut ad = 0usize;
    let mut hc = 0usize;
    for &t in tokens {
        match vocab.marker_class(t) {
            Some(Label::Ad) => ad += 1,
            Some(Label::Hc) => hc += 1,
            None => {}
        }
    }
    if ad > hc {
        Label::Ad
    } else {
        Label::Hc
    }
}

/// Fraction of samples whose oracle classification matches their
/// generating class.
pub fn oracle_accuracy<'a>(samples: impl IntoIterator<Item = &'a Demo>, vocab: &Vocab) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for demo in samples {
        total += 1;
        if oracle_classify(&demo.tokens, vocab) == demo.label {
            correct += 1;
        }
    }
    correct as f64 / total as f64
}

// ---------------------------------------------------------------------------
// On-disk layout
// ---------------------------------------------------------------------------

const SPEC_FILE: &str = "corpus.json";
const POOL_FILE: &str = "pool.jsonl";
const TEST_FILE: &str = "test.jsonl";

/// Write a corpus directory: `corpus.json` (the generation parameters),
/// `pool.jsonl`, and `test.jsonl`. The vocabulary is not stored; it
/// re-derives from those parameters.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec, pool: &DemoPool, test: &[Demo]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let spec_json = serde_json::to_string_pretty(spec)?;
    std::fs::write(dir.join(SPEC_FILE), spec_json + "\n")?;
    pool.to_jsonl(&dir.join(POOL_FILE))?;
    write_demos_jsonl(test, &dir.join(TEST_FILE))?;
    Ok(())
}

/// Read a corpus directory back: spec, re-derived vocabulary, pool, test
/// set.
pub fn load_corpus(dir: &Path) -> Result<(CorpusSpec, Vocab, DemoPool, Vec<Demo>)> {
    let spec_path = dir.join(SPEC_FILE);
    let raw = std::fs::read_to_string(&spec_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", spec_path.display())))?;
    let spec: CorpusSpec = serde_json::from_str(&raw)
        .map_err(|e| Error::Data(format!("malformed corpus spec {}: {e}", spec_path.display())))?;
    spec.validate()?;
    let vocab = spec.vocab()?;
    let pool = DemoPool::from_jsonl(&dir.join(POOL_FILE))?;
    let test = read_demos_jsonl(&dir.join(TEST_FILE))?;
    Ok((spec, vocab, pool, test))
}
