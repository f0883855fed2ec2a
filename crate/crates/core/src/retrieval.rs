//! Demonstration pools and diverse-and-contrastive retrieval.
//!
//! Retrieval runs in two stages. Stage one picks the *main* set for a test
//! query: for each of four criteria — semantically similar, semantically
//! dissimilar, length-similar, length-dissimilar — one demonstration per
//! class, eight in total. Stage two repeats the same four-criteria sweep
//! *around each main demonstration* to pick the sub-demonstrations its
//! task vector is extracted from, excluding the main set itself.
//!
//! Semantic criteria compare final-layer hidden states taken at a
//! demonstration's own trailing separator in a standalone `x SEP`
//! sequence (no label token). Length criteria compare token counts. All
//! argmin/argmax selections break ties toward the smallest demonstration
//! id, and candidates are always scanned in ascending id order, so
//! selection is independent of pool construction order.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, BufReader, Write as _};
use std::path::Path;

use once_cell::sync::OnceCell;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Weights;
use crate::prompt::{assemble_icl, Vocab};

// ---------------------------------------------------------------------------
// Demonstrations
// ---------------------------------------------------------------------------

/// Stable demonstration identifier, unique within a pool.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct DemoId(pub u64);

impl fmt::Display for DemoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Binary class label. `Ad` is the positive class throughout; every tie in
/// prediction or oracle voting breaks toward `Hc`.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum Label {
    #[serde(rename = "AD")]
    Ad,
    #[serde(rename = "HC")]
    Hc,
}

impl Label {
    pub const BOTH: [Label; 2] = [Label::Ad, Label::Hc];

    pub fn other(self) -> Label {
        match self {
            Label::Ad => Label::Hc,
            Label::Hc => Label::Ad,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Ad => "AD",
            Label::Hc => "HC",
        })
    }
}

/// One labelled demonstration: content tokens only, never separators or
/// label tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demo {
    pub id: DemoId,
    pub label: Label,
    pub tokens: Vec<u32>,
}

impl Demo {
    /// Content length in tokens — the quantity the length criteria compare.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Pool
// ---------------------------------------------------------------------------

/// A set of demonstrations with per-demo embedding cache.
///
/// Embeddings are computed at most once per demonstration (write-once
/// cells, safe under parallel pipelines) and always via the same
/// standalone-sequence recipe, so cached and freshly computed values are
/// identical.
pub struct DemoPool {
    demos: Vec<Demo>,
    /// Indices into `demos`, sorted by ascending id. All candidate scans
    /// walk this ordering.
    by_id: Vec<usize>,
    embeddings: Vec<OnceCell<Vec<f64>>>,
}

impl DemoPool {
    /// Build a pool, rejecting duplicate ids.
    pub fn new(demos: Vec<Demo>) -> Result<Self> {
        let mut by_id: Vec<usize> = (0..demos.len()).collect();
        by_id.sort_by_key(|&i| demos[i].id);
        for w in by_id.windows(2) {
            if demos[w[0]].id == demos[w[1]].id {
                return Err(Error::Data(format!(
                    "duplicate demonstration id {} in pool",
                    demos[w[0]].id
                )));
            }
        }
        let embeddings = (0..demos.len()).map(|_| OnceCell::new()).collect();
        Ok(DemoPool { demos, by_id, embeddings })
    }

    /// Build a pool with externally supplied embeddings (one per demo, in
    /// `demos` order). Useful for calibrated embeddings and for exercising
    /// the selectors without a model.
    pub fn with_embeddings(demos: Vec<Demo>, embeddings: Vec<Vec<f64>>) -> Result<Self> {
        if demos.len() != embeddings.len() {
            return Err(Error::Data(format!(
                "{} demos but {} embeddings",
                demos.len(),
                embeddings.len()
            )));
        }
        let pool = DemoPool::new(demos)?;
        for (cell, value) in pool.embeddings.iter().zip(embeddings) {
            cell.set(value).expect("fresh pool has empty embedding cells");
        }
        Ok(pool)
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn demos(&self) -> &[Demo] {
        &self.demos
    }

    pub fn get(&self, id: DemoId) -> Option<&Demo> {
        let idx = self.by_id.binary_search_by_key(&id, |&i| self.demos[i].id).ok()?;
        Some(&self.demos[self.by_id[idx]])
    }

    pub fn count_label(&self, label: Label) -> usize {
        self.demos.iter().filter(|d| d.label == label).count()
    }

    /// Demonstrations of one class in ascending id order.
    pub fn by_label(&self, label: Label) -> impl Iterator<Item = &Demo> {
        self.by_id.iter().map(|&i| &self.demos[i]).filter(move |d| d.label == label)
    }

    /// All demonstrations in ascending id order.
    pub fn in_id_order(&self) -> impl Iterator<Item = &Demo> {
        self.by_id.iter().map(|&i| &self.demos[i])
    }

    /// Check this pool can support the two-stage retrieval: at least eight
    /// demonstrations per class (four criteria, two poles, plus stage-two
    /// exclusions).
    pub fn ensure_retrieval_capacity(&self) -> Result<()> {
        for label in Label::BOTH {
            let n = self.count_label(label);
            if n < 8 {
                return Err(Error::Retrieval(format!(
                    "class {label} has only {n} demonstrations; two-stage retrieval needs at least 8"
                )));
            }
        }
        Ok(())
    }

    /// Embedding of the demo at pool slot `idx`, computing and caching it
    /// on first use.
    pub fn embedding(&self, idx: usize, weights: &Weights, vocab: &Vocab) -> Result<&[f64]> {
        let cell = self.embeddings.get(idx).ok_or_else(|| {
            Error::Retrieval(format!("pool slot {idx} out of range ({} demos)", self.demos.len()))
        })?;
        cell.get_or_try_init(|| embed_demo(weights, &self.demos[idx], vocab))
            .map(|v| v.as_slice())
    }

    /// Cached embedding only; errors if it has not been computed yet.
    fn cached_embedding(&self, idx: usize) -> Result<&[f64]> {
        self.embeddings[idx]
            .get()
            .map(|v| v.as_slice())
            .ok_or_else(|| {
                Error::Retrieval(format!(
                    "demonstration {} has no cached embedding; call precompute_embeddings first",
                    self.demos[idx].id
                ))
            })
    }

    /// Compute every demonstration's embedding up front. Cheap relative to
    /// pipeline forwards and makes later selection infallible on the
    /// embedding path.
    pub fn precompute_embeddings(&self, weights: &Weights, vocab: &Vocab) -> Result<()> {
        use rayon::prelude::*;
        (0..self.demos.len())
            .into_par_iter()
            .try_for_each(|i| self.embedding(i, weights, vocab).map(|_| ()))
    }

    fn slot_of(&self, id: DemoId) -> Option<usize> {
        self.by_id
            .binary_search_by_key(&id, |&i| self.demos[i].id)
            .ok()
            .map(|pos| self.by_id[pos])
    }

    /// Cached embedding of a demonstration by id.
    pub fn embedding_of(&self, id: DemoId) -> Result<&[f64]> {
        let slot = self
            .slot_of(id)
            .ok_or_else(|| Error::Retrieval(format!("demonstration {id} not in pool")))?;
        self.cached_embedding(slot)
    }

    // -- JSON-lines persistence ---------------------------------------------

    /// Read a pool from JSON lines: one `{"id": .., "label": "AD"|"HC",
    /// "tokens": [..]}` object per line. Blank lines are ignored.
    pub fn from_jsonl(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let reader = BufReader::new(file);
        let mut demos = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let demo: Demo = serde_json::from_str(&line).map_err(|e| {
                Error::Data(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            demos.push(demo);
        }
        DemoPool::new(demos)
    }

    /// Write the pool as JSON lines, in insertion order.
    pub fn to_jsonl(&self, path: &Path) -> Result<()> {
        write_demos_jsonl(&self.demos, path)
    }
}

/// Write any demonstration list in the pool file format.
pub fn write_demos_jsonl(demos: &[Demo], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for demo in demos {
        serde_json::to_writer(&mut out, demo)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Read a demonstration list (pool or test set) from JSON lines.
pub fn read_demos_jsonl(path: &Path) -> Result<Vec<Demo>> {
    Ok(DemoPool::from_jsonl(path)?.demos)
}

// ---------------------------------------------------------------------------
// Embeddings and similarity
// ---------------------------------------------------------------------------

/// Embed a demonstration: assemble its standalone sequence `x SEP` (no
/// label token), run the model without hooks, and return the final-layer
/// hidden state at the trailing separator.
pub fn embed_demo(weights: &Weights, demo: &Demo, vocab: &Vocab) -> Result<Vec<f64>> {
    let layout = assemble_icl(&[], &demo.tokens, vocab, weights.config.max_seq_len)?;
    let record = weights.forward(&layout, &[])?;
    Ok(record.final_state(layout.test_separator).to_vec())
}

/// Cosine similarity. Zero-norm inputs are an error: a zero embedding has
/// no direction and silently scoring it 0 would make selections depend on
/// accidents of the pool.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Parameter(format!(
            "cosine of vectors with different lengths ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector(
            "cosine similarity of a zero-norm vector".to_string(),
        ));
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

// ---------------------------------------------------------------------------
// Selection criteria
// ---------------------------------------------------------------------------

/// The four retrieval criteria, in the order their pairs appear in a main
/// set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CriterionId {
    /// Highest cosine similarity to the query embedding.
    SemSim,
    /// Lowest cosine similarity to the query embedding.
    SemDis,
    /// Smallest absolute token-length difference to the query.
    LenSim,
    /// Largest absolute token-length difference to the query.
    LenDis,
}

impl CriterionId {
    pub const ALL: [CriterionId; 4] =
        [CriterionId::SemSim, CriterionId::SemDis, CriterionId::LenSim, CriterionId::LenDis];
}

impl fmt::Display for CriterionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CriterionId::SemSim => "sem-sim",
            CriterionId::SemDis => "sem-dis",
            CriterionId::LenSim => "len-sim",
            CriterionId::LenDis => "len-dis",
        })
    }
}

impl std::str::FromStr for CriterionId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sem-sim" => Ok(CriterionId::SemSim),
            "sem-dis" => Ok(CriterionId::SemDis),
            "len-sim" => Ok(CriterionId::LenSim),
            "len-dis" => Ok(CriterionId::LenDis),
            other => Err(Error::Parameter(format!(
                "unknown criterion '{other}' (expected sem-sim, sem-dis, len-sim or len-dis)"
            ))),
        }
    }
}

/// What a selection is anchored on: an embedding for the semantic
/// criteria and a token length for the length criteria. Both test samples
/// and demonstrations reduce to this.
#[derive(Debug, Clone)]
pub struct RetrievalQuery {
    pub embedding: Vec<f64>,
    pub length: usize,
}

impl RetrievalQuery {
    /// Query view of a pool demonstration (requires its embedding to be
    /// cached).
    pub fn for_demo(pool: &DemoPool, demo: &Demo) -> Result<Self> {
        Ok(RetrievalQuery { embedding: pool.embedding_of(demo.id)?.to_vec(), length: demo.len() })
    }
}

/// Score orientation: whether a criterion looks for the largest or the
/// smallest score.
enum Pole {
    Max,
    Min,
}

/// Select the extremal candidate of one class under one criterion,
/// scanning in ascending id order and keeping the first (smallest-id)
/// candidate on exact score ties.
fn select_one<'p>(
    pool: &'p DemoPool,
    query: &RetrievalQuery,
    criterion: CriterionId,
    label: Label,
    exclude: &BTreeSet<DemoId>,
) -> Result<&'p Demo> {
    let mut best: Option<(&Demo, f64)> = None;
    let pole = match criterion {
        CriterionId::SemSim | CriterionId::LenDis => Pole::Max,
        CriterionId::SemDis | CriterionId::LenSim => Pole::Min,
    };
    for (slot, demo) in pool.by_id.iter().map(|&i| (i, &pool.demos[i])) {
        if demo.label != label || exclude.contains(&demo.id) {
            continue;
        }
        let score = match criterion {
            CriterionId::SemSim | CriterionId::SemDis => {
                cosine(&query.embedding, pool.cached_embedding(slot)?)?
            }
            CriterionId::LenSim | CriterionId::LenDis => {
                (query.length as f64 - demo.len() as f64).abs()
            }
        };
        let replace = match (&best, &pole) {
            (None, _) => true,
            (Some((_, b)), Pole::Max) => score > *b,
            (Some((_, b)), Pole::Min) => score < *b,
        };
        if replace {
            best = Some((demo, score));
        }
    }
    best.map(|(d, _)| d).ok_or_else(|| {
        Error::Retrieval(format!(
            "no {label} candidates left for criterion {criterion} ({} excluded)",
            exclude.len()
        ))
    })
}

/// Select one demonstration per class under a criterion: the AD pick
/// first, then the HC pick.
pub fn select_pair<'p>(
    pool: &'p DemoPool,
    query: &RetrievalQuery,
    criterion: CriterionId,
    exclude: &BTreeSet<DemoId>,
) -> Result<(&'p Demo, &'p Demo)> {
    let ad = select_one(pool, query, criterion, Label::Ad, exclude)?;
    let hc = select_one(pool, query, criterion, Label::Hc, exclude)?;
    Ok((ad, hc))
}

/// The stage-one result: eight demonstrations in fixed criterion order
/// (sem-sim, sem-dis, len-sim, len-dis; AD before HC within each pair).
#[derive(Debug, Clone)]
pub struct MainSet {
    pub demos: Vec<Demo>,
    /// Ids selected by more than one criterion. Duplicates are legal — the
    /// four criteria run independently with no cross-exclusions — but
    /// worth surfacing in run metadata.
    pub duplicate_ids: Vec<DemoId>,
}

impl MainSet {
    pub fn ids(&self) -> BTreeSet<DemoId> {
        self.demos.iter().map(|d| d.id).collect()
    }

    pub fn id_list(&self) -> Vec<DemoId> {
        self.demos.iter().map(|d| d.id).collect()
    }
}

/// Stage one: build the main demonstration set for a query. Each criterion
/// selects independently over the full pool (no exclusions), so the result
/// equals four independent [`select_pair`] calls.
pub fn build_main_set(pool: &DemoPool, query: &RetrievalQuery) -> Result<MainSet> {
    let empty = BTreeSet::new();
    let mut demos = Vec::with_capacity(8);
    for criterion in CriterionId::ALL {
        let (ad, hc) = select_pair(pool, query, criterion, &empty)?;
        demos.push(ad.clone());
        demos.push(hc.clone());
    }
    let mut counts = std::collections::BTreeMap::new();
    for d in &demos {
        *counts.entry(d.id).or_insert(0usize) += 1;
    }
    let duplicate_ids = counts.into_iter().filter(|&(_, c)| c > 1).map(|(id, _)| id).collect();
    Ok(MainSet { demos, duplicate_ids })
}

/// Stage two: build the sub-demonstration set for one main demonstration.
/// The query is the main demonstration itself; excluded are the whole main
/// set plus the main demonstration (already a member, but excluded
/// explicitly so the contract does not depend on that). Overlap *between*
/// different main demos' sub-sets is allowed.
pub fn build_sub_set(
    pool: &DemoPool,
    main_demo: &Demo,
    main_set_ids: &BTreeSet<DemoId>,
) -> Result<Vec<Demo>> {
    let query = RetrievalQuery::for_demo(pool, main_demo)?;
    let mut exclude = main_set_ids.clone();
    exclude.insert(main_demo.id);
    let mut demos = Vec::with_capacity(8);
    for criterion in CriterionId::ALL {
        let (ad, hc) = select_pair(pool, &query, criterion, &exclude)?;
        demos.push(ad.clone());
        demos.push(hc.clone());
    }
    Ok(demos)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn demo(id: u64, label: Label, len: usize) -> Demo {
        Demo { id: DemoId(id), label, tokens: vec![40; len] }
    }

    /// Pool with hand-placed embeddings on the unit circle so cosine
    /// rankings are obvious.
    fn angle_pool() -> DemoPool {
        // AD demos at angles 0, 60, 120 degrees; HC at 30, 90, 150.
        let angles: [(u64, Label, f64, usize); 6] = [
            (0, Label::Ad, 0.0, 4),
            (1, Label::Hc, 30.0, 5),
            (2, Label::Ad, 60.0, 6),
            (3, Label::Hc, 90.0, 9),
            (4, Label::Ad, 120.0, 12),
            (5, Label::Hc, 150.0, 2),
        ];
        let demos = angles.iter().map(|&(id, label, _, len)| demo(id, label, len)).collect();
        let embeddings = angles
            .iter()
            .map(|&(_, _, deg, _)| {
                let rad = deg.to_radians();
                vec![rad.cos(), rad.sin()]
            })
            .collect();
        DemoPool::with_embeddings(demos, embeddings).unwrap()
    }

    fn query(deg: f64, length: usize) -> RetrievalQuery {
        let rad = deg.to_radians();
        RetrievalQuery { embedding: vec![rad.cos(), rad.sin()], length }
    }

    #[test]
    fn cosine_basics() {
        assert!((cosine(&[1.0, 0.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[0.0, 2.0]).unwrap()).abs() < 1e-12);
        assert!((cosine(&[1.0, 0.0], &[-3.0, 0.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!(matches!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::DegenerateVector(_))));
        assert!(matches!(cosine(&[1.0], &[1.0, 2.0]), Err(Error::Parameter(_))));
    }

    #[test]
    fn pool_rejects_duplicate_ids() {
        let demos = vec![demo(1, Label::Ad, 3), demo(1, Label::Hc, 4)];
        assert!(matches!(DemoPool::new(demos), Err(Error::Data(_))));
    }

    #[test]
    fn semantic_pair_picks_nearest_and_farthest_per_class() {
        let pool = angle_pool();
        let q = query(10.0, 7);
        let (ad, hc) = select_pair(&pool, &q, CriterionId::SemSim, &BTreeSet::new()).unwrap();
        // Nearest AD to 10deg is 0deg (id 0); nearest HC is 30deg (id 1).
        assert_eq!((ad.id, hc.id), (DemoId(0), DemoId(1)));
        let (ad, hc) = select_pair(&pool, &q, CriterionId::SemDis, &BTreeSet::new()).unwrap();
        // Farthest AD is 120deg (id 4); farthest HC is 150deg (id 5).
        assert_eq!((ad.id, hc.id), (DemoId(4), DemoId(5)));
    }

    #[test]
    fn length_pair_picks_closest_and_farthest_lengths() {
        let pool = angle_pool();
        let q = query(10.0, 7);
        let (ad, hc) = select_pair(&pool, &q, CriterionId::LenSim, &BTreeSet::new()).unwrap();
        // AD lengths {4, 6, 12}: closest to 7 is 6 (id 2). HC lengths {5, 9, 2}: closest is 5 (id 1).
        assert_eq!((ad.id, hc.id), (DemoId(2), DemoId(1)));
        let (ad, hc) = select_pair(&pool, &q, CriterionId::LenDis, &BTreeSet::new()).unwrap();
        // Farthest AD is 12 (id 4); farthest HC is 2 (id 5).
        assert_eq!((ad.id, hc.id), (DemoId(4), DemoId(5)));
    }

    #[test]
    fn ties_break_toward_smallest_id() {
        // Two AD demos at the same angle and length; ids deliberately
        // inserted in descending order.
        let demos = vec![demo(9, Label::Ad, 5), demo(4, Label::Ad, 5), demo(2, Label::Hc, 5)];
        let embeddings = vec![vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        let pool = DemoPool::with_embeddings(demos, embeddings).unwrap();
        let q = query(0.0, 5);
        for criterion in CriterionId::ALL {
            let (ad, _) = select_pair(&pool, &q, criterion, &BTreeSet::new()).unwrap();
            assert_eq!(ad.id, DemoId(4), "criterion {criterion} must break ties to smallest id");
        }
    }

    #[test]
    fn minimal_pool_returns_its_only_pair() {
        let demos = vec![demo(1, Label::Ad, 3), demo(2, Label::Hc, 9)];
        let embeddings = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let pool = DemoPool::with_embeddings(demos, embeddings).unwrap();
        let q = query(45.0, 5);
        for criterion in CriterionId::ALL {
            let (ad, hc) = select_pair(&pool, &q, criterion, &BTreeSet::new()).unwrap();
            assert_eq!((ad.id, hc.id), (DemoId(1), DemoId(2)));
        }
    }

    #[test]
    fn exclusions_remove_candidates() {
        let pool = angle_pool();
        let q = query(10.0, 7);
        let mut exclude = BTreeSet::new();
        exclude.insert(DemoId(0));
        let (ad, _) = select_pair(&pool, &q, CriterionId::SemSim, &exclude).unwrap();
        // With id 0 gone, the nearest AD is 60deg (id 2).
        assert_eq!(ad.id, DemoId(2));
        // Excluding an entire class is an error, not a silent fallback.
        exclude.extend([DemoId(2), DemoId(4)]);
        assert!(matches!(
            select_pair(&pool, &q, CriterionId::SemSim, &exclude),
            Err(Error::Retrieval(_))
        ));
    }

    #[test]
    fn main_set_is_four_pairs_in_criterion_order() {
        let pool = angle_pool();
        let q = query(10.0, 7);
        let main = build_main_set(&pool, &q).unwrap();
        assert_eq!(main.demos.len(), 8);
        let ids: Vec<u64> = main.demos.iter().map(|d| d.id.0).collect();
        // (sem-sim, sem-dis, len-sim, len-dis) with AD before HC, from the
        // two tests above.
        assert_eq!(ids, vec![0, 1, 4, 5, 2, 1, 4, 5]);
        // Labels alternate AD, HC by construction.
        for (i, d) in main.demos.iter().enumerate() {
            let expect = if i % 2 == 0 { Label::Ad } else { Label::Hc };
            assert_eq!(d.label, expect);
        }
        // Ids 1, 4 and 5 each won two criteria.
        assert_eq!(main.duplicate_ids, vec![DemoId(1), DemoId(4), DemoId(5)]);
    }

    #[test]
    fn sub_set_excludes_main_set_and_anchor() {
        // Ten demos per class with scattered embeddings and lengths.
        let mut demos = Vec::new();
        let mut embeddings = Vec::new();
        for i in 0..20u64 {
            let label = if i % 2 == 0 { Label::Ad } else { Label::Hc };
            demos.push(demo(i, label, 3 + (i as usize * 7) % 11));
            let rad = (i as f64 * 17.0).to_radians();
            embeddings.push(vec![rad.cos(), rad.sin()]);
        }
        let pool = DemoPool::with_embeddings(demos, embeddings).unwrap();
        let q = query(40.0, 8);
        let main = build_main_set(&pool, &q).unwrap();
        let main_ids = main.ids();
        for anchor in &main.demos {
            let sub = build_sub_set(&pool, anchor, &main_ids).unwrap();
            assert_eq!(sub.len(), 8);
            for d in &sub {
                assert!(!main_ids.contains(&d.id), "sub-demo {} is in the main set", d.id);
                assert_ne!(d.id, anchor.id, "sub-demo equals its own anchor");
            }
        }
    }

    #[test]
    fn selection_is_scale_invariant() {
        // Scaling every embedding by the same positive constant must not
        // change any cosine-based selection.
        let pool = angle_pool();
        let scaled = {
            let demos = pool.demos.clone();
            let embeddings = demos
                .iter()
                .enumerate()
                .map(|(i, _)| pool.cached_embedding(i).unwrap().iter().map(|x| x * 3.5).collect())
                .collect();
            DemoPool::with_embeddings(demos, embeddings).unwrap()
        };
        let q = query(10.0, 7);
        let a = build_main_set(&pool, &q).unwrap();
        let b = build_main_set(&scaled, &q).unwrap();
        assert_eq!(a.id_list(), b.id_list());
    }
}
