//! Python bindings for the anchoring laboratory: the model, the synthetic
//! corpus, the pipelines, and the statistics, importable as
//! `anchorlab_py`.
//!
//! The surface mirrors the CLI's vocabulary — build a `Model` and a
//! `Corpus`, call `run_pipeline(model, corpus, "anchored", ...)`, feed the
//! per-run metrics to `paired_t_test` — so a notebook can drive the same
//! experiment the binary does.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use anchorlab::corpus::{generate, load_corpus, write_corpus, oracle_accuracy, CorpusSpec};
use anchorlab::error::Error;
use anchorlab::eval::{compute_metrics, paired_t_test as core_t, wilcoxon_signed_rank as core_w, TestOutcome};
use anchorlab::intervention::{
    anchor as core_anchor, calibrate_norm, extract_task_vectors, inject_interpolate, project,
    GammaSchedule,
};
use anchorlab::model::{init_model, ModelConfig, Weights};
use anchorlab::pipelines::{
    run_ablation_grid, run_pipeline as core_run_pipeline, PipelineSpec, RunContext, RunOptions,
    PIPELINE_NAMES,
};
use anchorlab::prompt::{assemble_icl, assemble_sub_sequence, Vocab};
use anchorlab::retrieval::{build_main_set, build_sub_set, Demo, DemoId, DemoPool, Label, RetrievalQuery, embed_demo};
use anchorlab::runner::check_vocab_compat;
use anchorlab::sweep::{injection_sweep as core_sweep, SweepGrid};

fn py_err(e: Error) -> PyErr {
    match &e {
        Error::Config(_) | Error::Parameter(_) => PyValueError::new_err(e.to_string()),
        Error::Io(_) => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn label_str(label: Label) -> &'static str {
    match label {
        Label::Ad => "ad",
        Label::Hc => "hc",
    }
}

/// A deterministic residual-stream transformer with frozen random weights.
#[pyclass]
struct Model {
    weights: Weights,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (num_layers=4, model_dim=32, num_heads=4, ff_dim=64, vocab_size=64,
                        max_seq_len=512, init_seed=7, temperature=None, top_k=None))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        num_layers: usize,
        model_dim: usize,
        num_heads: usize,
        ff_dim: usize,
        vocab_size: u32,
        max_seq_len: usize,
        init_seed: u64,
        temperature: Option<f64>,
        top_k: Option<usize>,
    ) -> PyResult<Self> {
        let config = ModelConfig {
            num_layers,
            model_dim,
            num_heads,
            ff_dim,
            vocab_size,
            max_seq_len,
            init_seed,
            temperature,
            top_k,
        };
        Ok(Model { weights: init_model(&config).map_err(py_err)? })
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.weights.config.num_layers
    }

    #[getter]
    fn model_dim(&self) -> usize {
        self.weights.config.model_dim
    }

    #[getter]
    fn vocab_size(&self) -> u32 {
        self.weights.config.vocab_size
    }

    /// Final-layer state at the trailing separator of `content + [SEP]`.
    fn final_state(&self, content: Vec<u32>) -> PyResult<Vec<f64>> {
        let vocab = Vocab::partition(self.weights.config.vocab_size, 0.5, false).map_err(py_err)?;
        let layout =
            assemble_icl(&[], &content, &vocab, self.weights.config.max_seq_len).map_err(py_err)?;
        let record = self.weights.forward(&layout, &[]).map_err(py_err)?;
        Ok(record.final_state(layout.test_separator).to_vec())
    }

    /// Restricted-softmax (p_ad, p_hc) at the trailing separator.
    fn label_probabilities(&self, content: Vec<u32>) -> PyResult<(f64, f64)> {
        let vocab = Vocab::partition(self.weights.config.vocab_size, 0.5, false).map_err(py_err)?;
        let layout =
            assemble_icl(&[], &content, &vocab, self.weights.config.max_seq_len).map_err(py_err)?;
        let record = self.weights.forward(&layout, &[]).map_err(py_err)?;
        anchorlab::model::label_probabilities(
            &record,
            layout.test_separator,
            vocab.label_token(Label::Ad),
            vocab.label_token(Label::Hc),
        )
        .map_err(py_err)
    }

    fn __repr__(&self) -> String {
        let c = &self.weights.config;
        format!(
            "Model(num_layers={}, model_dim={}, num_heads={}, vocab_size={}, init_seed={})",
            c.num_layers, c.model_dim, c.num_heads, c.vocab_size, c.init_seed
        )
    }
}

/// A generated two-class corpus: demonstration pool plus held-out test set.
#[pyclass]
struct Corpus {
    spec: CorpusSpec,
    vocab: Vocab,
    pool: DemoPool,
    test: Vec<Demo>,
}

fn demo_dict<'py>(py: Python<'py>, demo: &Demo) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("id", demo.id.0)?;
    d.set_item("label", label_str(demo.label))?;
    d.set_item("tokens", demo.tokens.clone())?;
    Ok(d)
}

#[pymethods]
impl Corpus {
    #[new]
    #[pyo3(signature = (seed=11, n_per_class=60, n_test_per_class=24, min_len=3, max_len=8,
                        shared_vocab_fraction=0.5, marker_rate=0.7, vocab_size=64))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        seed: u64,
        n_per_class: usize,
        n_test_per_class: usize,
        min_len: usize,
        max_len: usize,
        shared_vocab_fraction: f64,
        marker_rate: f64,
        vocab_size: u32,
    ) -> PyResult<Self> {
        let spec = CorpusSpec {
            seed,
            n_per_class,
            n_test_per_class,
            min_len,
            max_len,
            shared_vocab_fraction,
            marker_rate,
            vocab_size,
        };
        let (vocab, pool, test) = generate(&spec).map_err(py_err)?;
        Ok(Corpus { spec, vocab, pool, test })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let (spec, vocab, pool, test) = load_corpus(&dir).map_err(py_err)?;
        Ok(Corpus { spec, vocab, pool, test })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        write_corpus(&dir, &self.spec, &self.pool, &self.test).map_err(py_err)
    }

    #[getter]
    fn pool_size(&self) -> usize {
        self.pool.len()
    }

    #[getter]
    fn test_size(&self) -> usize {
        self.test.len()
    }

    fn pool<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let list = PyList::empty(py);
        for demo in self.pool.demos() {
            list.append(demo_dict(py, demo)?)?;
        }
        Ok(list)
    }

    fn test<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyList>> {
        let list = PyList::empty(py);
        for demo in &self.test {
            list.append(demo_dict(py, demo)?)?;
        }
        Ok(list)
    }

    /// Accuracy of the marker-counting oracle on the test set.
    fn oracle_accuracy(&self) -> f64 {
        oracle_accuracy(&self.test, &self.vocab)
    }

    fn __repr__(&self) -> String {
        format!(
            "Corpus(seed={}, pool={}, test={}, marker_rate={})",
            self.spec.seed,
            self.pool.len(),
            self.test.len(),
            self.spec.marker_rate
        )
    }
}

/// One test-sample prediction from a pipeline run.
#[pyclass(get_all, frozen)]
struct Prediction {
    test_id: u64,
    gold: String,
    pred: String,
    p_ad: f64,
    p_hc: f64,
    demo_ids: Vec<u64>,
    plan: Option<String>,
}

#[pymethods]
impl Prediction {
    fn __repr__(&self) -> String {
        format!(
            "Prediction(test_id={}, gold='{}', pred='{}', p_ad={:.4})",
            self.test_id, self.gold, self.pred, self.p_ad
        )
    }
}

impl Prediction {
    fn from_core(p: anchorlab::pipelines::Prediction) -> Self {
        Prediction {
            test_id: p.test_id.0,
            gold: label_str(p.gold).to_string(),
            pred: label_str(p.pred).to_string(),
            p_ad: p.p_ad,
            p_hc: p.p_hc,
            demo_ids: p.demo_ids.iter().map(|id| id.0).collect(),
            plan: p.plan,
        }
    }
}

fn build_options(
    epsilon: f64,
    schedule: Option<Vec<f64>>,
    tv_context_with_demos: bool,
) -> PyResult<RunOptions> {
    Ok(RunOptions {
        epsilon,
        schedule: schedule.map(GammaSchedule::from_values).transpose().map_err(py_err)?,
        tv_context_with_demos,
    })
}

/// Run one pipeline over the corpus's test set.
#[pyfunction]
#[pyo3(signature = (model, corpus, name, seed=0, demo_pairs=4, ensemble_size=5, epsilon=1e-6,
                    schedule=None, tv_context_with_demos=false))]
#[allow(clippy::too_many_arguments)]
fn run_pipeline(
    model: &Model,
    corpus: &Corpus,
    name: &str,
    seed: u64,
    demo_pairs: usize,
    ensemble_size: usize,
    epsilon: f64,
    schedule: Option<Vec<f64>>,
    tv_context_with_demos: bool,
) -> PyResult<Vec<Prediction>> {
    check_vocab_compat(&model.weights.config, &corpus.spec).map_err(py_err)?;
    let spec = PipelineSpec::parse(name, demo_pairs, ensemble_size, seed).map_err(py_err)?;
    let options = build_options(epsilon, schedule, tv_context_with_demos)?;
    let ctx = RunContext {
        weights: &model.weights,
        vocab: &corpus.vocab,
        pool: &corpus.pool,
        options,
    };
    let preds = core_run_pipeline(&ctx, &spec, &corpus.test).map_err(py_err)?;
    Ok(preds.into_iter().map(Prediction::from_core).collect())
}

/// Accuracy/precision/recall/F1 for parallel gold and predicted label lists
/// ("ad"/"hc").
#[pyfunction]
fn metrics(py: Python<'_>, golds: Vec<String>, preds: Vec<String>) -> PyResult<Py<PyDict>> {
    let parse = |s: &str| -> PyResult<Label> {
        match s {
            "ad" => Ok(Label::Ad),
            "hc" => Ok(Label::Hc),
            other => Err(PyValueError::new_err(format!("unknown label '{other}'"))),
        }
    };
    let golds: Vec<Label> = golds.iter().map(|s| parse(s)).collect::<PyResult<_>>()?;
    let preds: Vec<Label> = preds.iter().map(|s| parse(s)).collect::<PyResult<_>>()?;
    let m = compute_metrics(&preds, &golds).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("accuracy", m.accuracy)?;
    d.set_item("precision", m.precision)?;
    d.set_item("recall", m.recall)?;
    d.set_item("f1", m.f1)?;
    Ok(d.into())
}

/// The 12-cell retrieval x anchoring grid, as a list of row dicts.
#[pyfunction]
#[pyo3(signature = (model, corpus, seed=0, epsilon=1e-6))]
fn ablation_grid(
    py: Python<'_>,
    model: &Model,
    corpus: &Corpus,
    seed: u64,
    epsilon: f64,
) -> PyResult<Py<PyList>> {
    check_vocab_compat(&model.weights.config, &corpus.spec).map_err(py_err)?;
    let options = build_options(epsilon, None, false)?;
    let ctx = RunContext {
        weights: &model.weights,
        vocab: &corpus.vocab,
        pool: &corpus.pool,
        options,
    };
    let cells = run_ablation_grid(&ctx, seed, &corpus.test).map_err(py_err)?;
    let list = PyList::empty(py);
    for cell in cells {
        let d = PyDict::new(py);
        d.set_item("prompt", cell.prompt_mode.to_string())?;
        d.set_item(
            "anchor",
            cell.anchor_mode.map(|m| m.to_string()).unwrap_or_else(|| "none".to_string()),
        )?;
        d.set_item("accuracy", cell.accuracy)?;
        d.set_item("f1", cell.f1)?;
        list.append(d)?;
    }
    Ok(list.into())
}

/// Contrastive retrieval for a test sample: the four criterion pairs and,
/// per main demonstration, its sub-demonstration ids.
#[pyfunction]
fn retrieve(py: Python<'_>, model: &Model, corpus: &Corpus, test_id: u64) -> PyResult<Py<PyDict>> {
    check_vocab_compat(&model.weights.config, &corpus.spec).map_err(py_err)?;
    corpus.pool.ensure_retrieval_capacity().map_err(py_err)?;
    corpus.pool.precompute_embeddings(&model.weights, &corpus.vocab).map_err(py_err)?;
    let target = corpus
        .test
        .iter()
        .find(|d| d.id.0 == test_id)
        .or_else(|| corpus.pool.get(DemoId(test_id)))
        .ok_or_else(|| PyValueError::new_err(format!("no demonstration with id {test_id}")))?;
    let query = RetrievalQuery {
        embedding: embed_demo(&model.weights, target, &corpus.vocab).map_err(py_err)?,
        length: target.len(),
    };
    let main = build_main_set(&corpus.pool, &query).map_err(py_err)?;
    let main_ids = main.ids();
    let out = PyDict::new(py);
    out.set_item("main_ids", main.id_list().iter().map(|id| id.0).collect::<Vec<_>>())?;
    let subs = PyList::empty(py);
    for demo in &main.demos {
        let sub = build_sub_set(&corpus.pool, demo, &main_ids).map_err(py_err)?;
        let d = PyDict::new(py);
        d.set_item("main_demo", demo.id.0)?;
        d.set_item("ids", sub.iter().map(|s| s.id.0).collect::<Vec<_>>())?;
        subs.append(d)?;
    }
    out.set_item("sub_sets", subs)?;
    Ok(out.into())
}

/// Per-layer task vectors for one pool demonstration, as a list of rows.
#[pyfunction]
fn extract_vectors(model: &Model, corpus: &Corpus, demo_id: u64) -> PyResult<Vec<Vec<f64>>> {
    check_vocab_compat(&model.weights.config, &corpus.spec).map_err(py_err)?;
    corpus.pool.ensure_retrieval_capacity().map_err(py_err)?;
    corpus.pool.precompute_embeddings(&model.weights, &corpus.vocab).map_err(py_err)?;
    let demo = corpus
        .pool
        .get(DemoId(demo_id))
        .ok_or_else(|| PyValueError::new_err(format!("no pool demonstration with id {demo_id}")))?;
    let sub = build_sub_set(&corpus.pool, demo, &BTreeSet::new()).map_err(py_err)?;
    let refs: Vec<&Demo> = sub.iter().collect();
    let layout = assemble_sub_sequence(&refs, demo, &corpus.vocab, model.weights.config.max_seq_len)
        .map_err(py_err)?;
    let set = extract_task_vectors(&model.weights, &layout, demo.id).map_err(py_err)?;
    Ok((1..=set.num_layers()).map(|l| set.vector(l).to_vec()).collect())
}

fn outcome_dict(py: Python<'_>, outcome: TestOutcome) -> PyResult<Py<PyDict>> {
    let d = PyDict::new(py);
    match outcome {
        TestOutcome::Valid { statistic, p_value } => {
            d.set_item("status", "valid")?;
            d.set_item("statistic", statistic)?;
            d.set_item("p_value", p_value)?;
        }
        TestOutcome::Degenerate { reason } => {
            d.set_item("status", "degenerate")?;
            d.set_item("reason", reason)?;
        }
    }
    Ok(d.into())
}

/// Two-sided paired t-test; degenerate inputs return a flag, never NaN.
#[pyfunction]
fn paired_t_test(py: Python<'_>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Py<PyDict>> {
    outcome_dict(py, core_t(&a, &b).map_err(py_err)?)
}

/// Two-sided Wilcoxon signed-rank test (exact for n <= 25, tie-corrected
/// normal approximation above).
#[pyfunction]
fn wilcoxon_signed_rank(py: Python<'_>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Py<PyDict>> {
    outcome_dict(py, core_w(&a, &b).map_err(py_err)?)
}

/// Projected anchoring of one state vector: calibrate `v` to norm `mu`,
/// project onto `h`, scale by `gamma`, and add.
#[pyfunction]
fn project_anchor(h: Vec<f64>, v: Vec<f64>, mu: f64, gamma: f64, epsilon: f64) -> PyResult<Vec<f64>> {
    let h = ndarray::Array1::from(h);
    let v = ndarray::Array1::from(v);
    let v_bar = calibrate_norm(&v.view(), mu).map_err(py_err)?;
    let p = project(&v_bar.view(), &h.view(), epsilon);
    Ok(core_anchor(&h.view(), &p.view(), gamma).to_vec())
}

/// Interpolation injection `(1 - gamma) * h + gamma * v`, bit-exact at the
/// endpoints.
#[pyfunction]
fn interpolate(h: Vec<f64>, v: Vec<f64>, gamma: f64) -> PyResult<Vec<f64>> {
    let h = ndarray::Array1::from(h);
    let v = ndarray::Array1::from(v);
    Ok(inject_interpolate(&h.view(), &v.view(), gamma).map_err(py_err)?.to_vec())
}

/// Unit-perturbation sweep over (position, depth, breadth, strength).
#[pyfunction]
#[pyo3(signature = (model, content, direction_seed=0, positions=None, strengths=None))]
fn injection_sweep(
    py: Python<'_>,
    model: &Model,
    content: Vec<u32>,
    direction_seed: u64,
    positions: Option<Vec<usize>>,
    strengths: Option<Vec<f64>>,
) -> PyResult<Py<PyList>> {
    let vocab = Vocab::partition(model.weights.config.vocab_size, 0.5, false).map_err(py_err)?;
    let layout =
        assemble_icl(&[], &content, &vocab, model.weights.config.max_seq_len).map_err(py_err)?;
    let mut grid = SweepGrid::default_for(&layout);
    if let Some(p) = positions {
        grid.positions = p;
    }
    if let Some(s) = strengths {
        grid.strengths = s;
    }
    let rows = core_sweep(&model.weights, &layout, &grid, direction_seed).map_err(py_err)?;
    let list = PyList::empty(py);
    for row in rows {
        let d = PyDict::new(py);
        d.set_item("position", row.position)?;
        d.set_item("depth", row.depth)?;
        d.set_item("breadth", row.breadth)?;
        d.set_item("strength", row.strength)?;
        d.set_item("effect", row.effect)?;
        list.append(d)?;
    }
    Ok(list.into())
}

#[pymodule]
fn anchorlab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<Corpus>()?;
    m.add_class::<Prediction>()?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_grid, m)?)?;
    m.add_function(wrap_pyfunction!(retrieve, m)?)?;
    m.add_function(wrap_pyfunction!(extract_vectors, m)?)?;
    m.add_function(wrap_pyfunction!(paired_t_test, m)?)?;
    m.add_function(wrap_pyfunction!(wilcoxon_signed_rank, m)?)?;
    m.add_function(wrap_pyfunction!(project_anchor, m)?)?;
    m.add_function(wrap_pyfunction!(interpolate, m)?)?;
    m.add_function(wrap_pyfunction!(injection_sweep, m)?)?;
    m.add("PIPELINE_NAMES", PIPELINE_NAMES.to_vec())?;
    Ok(())
}
